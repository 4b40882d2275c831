#include <gtest/gtest.h>

#include "support/oracles.hpp"

using namespace wcox;

namespace {

RawRows rows(std::vector<double> t, std::vector<double> e, std::vector<std::string> z) {
  RawRows r;
  r.time = std::move(t);
  r.event = std::move(e);
  r.treatment = std::move(z);
  return r;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Cohort, MinimalInput) {
  const Cohort c = validate_cohort(rows({1, 2, 3}, {1, 0, 1}, {"0", "1", "0"}));
  EXPECT_EQ(c.n(), 3);
  EXPECT_EQ(c.contrasts(), 1);
  EXPECT_EQ(c.p(), 0);
  EXPECT_EQ(c.event_count(), 2);
  EXPECT_EQ(c.treatment[1], 1);
}

TEST(Cohort, NegativeTime) {
  EXPECT_EQ(message_of([] { validate_cohort(rows({-1, 2, 3}, {1, 0, 1}, {"0", "1", "0"})); }),
            "negative time at row 1");
}

TEST(Cohort, SingleLevel) {
  EXPECT_EQ(message_of([] { validate_cohort(rows({1, 2, 3}, {1, 0, 1}, {"0", "0", "0"})); }),
            "treatment has a single level");
}

TEST(Cohort, BadEventFlagAndMissingValues) {
  EXPECT_NE(message_of([] { validate_cohort(rows({1, 2}, {1, 2}, {"a", "b"})); }).find("row 2"), std::string::npos);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    validate_cohort(rows({1, nan, 3}, {1, 0, 1}, {"a", "b", "a"}));
    FAIL();
  } catch (const ValidationError& e) {
    ASSERT_EQ(e.rows().size(), 1u);
    EXPECT_EQ(e.rows()[0], 2u);
  }
}

TEST(Cohort, LevelsByFirstAppearanceAndReference) {
  RawRows r = rows({1, 2, 3, 4}, {1, 1, 1, 1}, {"b", "a", "c", "a"});
  Cohort c = validate_cohort(r);
  EXPECT_EQ(c.treatment_labels, (std::vector<std::string>{"b", "a", "c"}));
  r.reference = "c";
  c = validate_cohort(r);
  EXPECT_EQ(c.treatment_labels, (std::vector<std::string>{"c", "b", "a"}));
  EXPECT_EQ(c.treatment[2], 0);
}

TEST(Cohort, DeclaredLevelWithoutUnits) {
  RawRows r = rows({1, 2}, {1, 1}, {"a", "b"});
  r.level_order = std::vector<std::string>{"a", "b", "c"};
  EXPECT_NE(message_of([&] { validate_cohort(r); }).find("'c' has no units"), std::string::npos);
}

TEST(Cohort, ValidateIsIdempotent) {
  oracle::Gen g(11);
  for (int rep = 0; rep < 20; ++rep) {
    const Cohort c = oracle::random_cohort(g, {.n = 30, .levels = 2 + rep % 3, .p = rep % 3});
    const Cohort d = validate_cohort(c);
    EXPECT_EQ(c.time, d.time);
    EXPECT_EQ(c.event, d.event);
    EXPECT_EQ(c.treatment, d.treatment);
    EXPECT_EQ(c.covariates, d.covariates);
    EXPECT_EQ(c.treatment_labels, d.treatment_labels);
  }
}

TEST(Cohort, IndicatorVector) {
  const Cohort c = validate_cohort(rows({1, 2, 3}, {1, 1, 1}, {"0", "1", "2"}));
  EXPECT_EQ(c.indicator(0), Eigen::Vector2d(0, 0));
  EXPECT_EQ(c.indicator(1), Eigen::Vector2d(1, 0));
  EXPECT_EQ(c.indicator(2), Eigen::Vector2d(0, 1));
}

TEST(Cohort, SelectUnitsAllowsDuplicates) {
  const Cohort c = validate_cohort(rows({1, 2, 3}, {1, 0, 1}, {"0", "1", "0"}));
  const std::vector<Eigen::Index> idx{2, 2, 1};
  const Cohort s = select_units(c, idx);
  EXPECT_EQ(s.n(), 3);
  EXPECT_EQ(s.time[0], 3.0);
  EXPECT_EQ(s.time[1], 3.0);
  EXPECT_EQ(s.treatment[2], 1);
}

TEST(Factorial, Encoding) {
  EXPECT_EQ(encode_factorial(0, 0), 0);
  EXPECT_EQ(encode_factorial(1, 1), 3);
  EXPECT_THROW(encode_factorial(2, 0), ValidationError);
  EXPECT_EQ(factorial_labels(), (std::vector<std::string>{"(0,0)", "(1,0)", "(0,1)", "(1,1)"}));
}

TEST(Factorial, DecodeEncodeRoundTrip) {
  for (int z1 = 0; z1 <= 1; ++z1)
    for (int z2 = 0; z2 <= 1; ++z2) EXPECT_EQ(decode_factorial(encode_factorial(z1, z2)), std::make_pair(z1, z2));
  for (int k = 0; k < kFactorialLevels; ++k) {
    const auto [a, b] = decode_factorial(k);
    EXPECT_EQ(encode_factorial(a, b), k);
  }
}

TEST(Factorial, ColumnEncodingReportsRow) {
  const std::vector<double> z1{0, 1, 1}, z2{0, 0, 0.5};
  try {
    encode_factorial(z1, z2);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.rows(), std::vector<std::size_t>{3});
  }
}
