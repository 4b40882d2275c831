#pragma once

#include "json.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace wcox::cli {

using Json = nlohmann::ordered_json;

/// Comma-separated table with a mandatory header row.
struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of column `name`; throws ValidationError naming the column.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

/// Parses one numeric field. Empty, "NA" and "NaN" map to NaN; anything else
/// that is not a complete decimal number is a validation error.
double parse_number(const std::string& field, const std::string& column, std::size_t row);

std::vector<std::string> split_list(const std::string& s);

std::string sha256_file(const std::string& path);

struct InputFile {
  std::string path;
  std::string sha256;
  std::size_t bytes = 0;
};

InputFile describe_input(const std::string& path);

/// Run manifest: command, resolved configuration, input digests, seed and
/// tool version. The wall-clock duration is included only when requested,
/// so that default outputs are byte-identical across reruns.
Json make_manifest(const std::string& command, const Json& config, const std::vector<InputFile>& inputs,
                   std::optional<unsigned long long> seed, std::optional<double> duration_seconds);

/// Writes `text` to `path`, replacing any existing file.
void write_text(const std::string& path, const std::string& text);

}  // namespace wcox::cli
