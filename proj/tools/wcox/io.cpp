#include "io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "wcox/error.hpp"

#ifndef WCOX_VERSION
#define WCOX_VERSION "0.0.0"
#endif

namespace wcox::cli {

namespace {

std::vector<std::string> split_record(const std::string& line, std::size_t lineno, const std::string& path) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (quoted) throw ValidationError(path + ": unterminated quote on line " + std::to_string(lineno));
  out.push_back(cur);
  return out;
}

std::string strip(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t") - a + 1);
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t k = 0; k < header.size(); ++k)
    if (header[k] == name) return k;
  throw ValidationError("column '" + name + "' not found in " + path);
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open input file " + path);
  CsvTable t;
  t.path = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (t.header.empty()) {
      if (line.empty()) throw ValidationError(path + ": missing header row");
      for (auto& h : split_record(line, lineno, path)) t.header.push_back(strip(h));
      continue;
    }
    if (line.empty()) continue;
    auto rec = split_record(line, lineno, path);
    if (rec.size() != t.header.size())
      throw ValidationError(path + ": line " + std::to_string(lineno) + " has " + std::to_string(rec.size()) +
                            " fields, header has " + std::to_string(t.header.size()));
    for (auto& f : rec) f = strip(f);
    t.rows.push_back(std::move(rec));
  }
  if (t.header.empty()) throw ValidationError(path + ": missing header row");
  return t;
}

double parse_number(const std::string& field, const std::string& column, std::size_t row) {
  if (field.empty() || field == "NA" || field == "NaN" || field == "nan")
    return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last)
    throw ValidationError("non-numeric value '" + field + "' in column '" + column + "' at row " +
                              std::to_string(row),
                          {row});
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = strip(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open input file " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int k = 0; k < len; ++k) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[k]);
  return hex.str();
}

InputFile describe_input(const std::string& path) {
  InputFile f;
  f.path = path;
  f.sha256 = sha256_file(path);
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  f.bytes = static_cast<std::size_t>(in.tellg());
  return f;
}

Json make_manifest(const std::string& command, const Json& config, const std::vector<InputFile>& inputs,
                   std::optional<unsigned long long> seed, std::optional<double> duration_seconds) {
  Json m;
  m["tool"] = "wcox";
  m["version"] = WCOX_VERSION;
  m["command"] = command;
  m["config"] = config;
  Json files = Json::array();
  for (const auto& f : inputs) files.push_back({{"path", f.path}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  m["inputs"] = files;
  m["seed"] = seed ? Json(*seed) : Json(nullptr);
  if (duration_seconds) m["duration_seconds"] = *duration_seconds;
  return m;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write output file " + path);
  out << text;
}

}  // namespace wcox::cli
