#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wcox {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that violates a documented precondition. `rows` holds 1-based row
/// numbers when the problem can be traced to specific input rows.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what, std::vector<std::size_t> rows = {})
      : Error(what), rows_(std::move(rows)) {}
  const std::vector<std::size_t>& rows() const noexcept { return rows_; }

 private:
  std::vector<std::size_t> rows_;
};

/// An iterative solver failed to reach its convergence criterion.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A Monte Carlo study exceeded its replicate failure budget.
class StudyAbortedError : public Error {
 public:
  using Error::Error;
};

}  // namespace wcox
