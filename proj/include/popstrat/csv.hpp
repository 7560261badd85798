#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/common.hpp"

namespace popstrat {

// Shortest round-trip decimal rendering (std::to_chars). Used for every
// number the library writes, so output files are byte-stable across runs.
std::string format_double(double x);

// Strict numeric parsing: the whole field must be consumed.
double parse_double(std::string_view field, std::string_view context);
long long parse_int(std::string_view field, std::string_view context);

// Minimal RFC 4180 table: one header row plus data rows, all fields as text.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(std::string_view name) const;
  std::size_t require_column(std::string_view name, std::string_view context) const;
};

CsvTable parse_csv_text(std::string_view text, std::string_view context);
CsvTable read_csv_file(const std::string& path);

std::string to_csv_text(const CsvTable& table);
void write_csv_file(const std::string& path, const CsvTable& table);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);

}  // namespace popstrat
