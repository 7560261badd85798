#include "popstrat/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace popstrat {

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  if (res.ec != std::errc()) throw numeric_error("failed to format double");
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view field, std::string_view context) {
  double out = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw data_error(std::string(context) + ": not a number: '" + std::string(field) + "'");
  }
  return out;
}

long long parse_int(std::string_view field, std::string_view context) {
  long long out = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) {
    throw data_error(std::string(context) + ": not an integer: '" + std::string(field) + "'");
  }
  return out;
}

std::optional<std::size_t> CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t CsvTable::require_column(std::string_view name, std::string_view context) const {
  const auto idx = column(name);
  if (!idx) throw data_error(std::string(context) + ": missing required column '" + std::string(name) + "'");
  return *idx;
}

namespace {

// RFC 4180 field scanner. Accepts \n and \r\n row terminators and a missing
// final newline. Reports 1-based line numbers on malformed quoting.
std::vector<std::vector<std::string>> parse_rows(std::string_view text, std::string_view context) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;

  const auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  const auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started && !field.empty()) {
          throw data_error(std::string(context) + ": line " + std::to_string(line) +
                           ": quote inside unquoted field");
        }
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') break;  // swallowed by the \n branch
        [[fallthrough]];
      case '\n':
        end_row();
        ++line;
        break;
      default:
        field.push_back(c);
        field_started = true;
        break;
    }
  }
  if (in_quotes) {
    throw data_error(std::string(context) + ": unterminated quoted field at end of input");
  }
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

bool needs_quoting(std::string_view field) {
  for (char c : field) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r') return true;
  }
  return false;
}

void append_field(std::string& out, std::string_view field) {
  if (!needs_quoting(field)) {
    out.append(field);
    return;
  }
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
}

}  // namespace

CsvTable parse_csv_text(std::string_view text, std::string_view context) {
  auto rows = parse_rows(text, context);
  if (rows.empty()) throw data_error(std::string(context) + ": empty CSV (no header row)");
  CsvTable table;
  table.header = std::move(rows.front());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != table.header.size()) {
      throw data_error(std::string(context) + ": row " + std::to_string(r + 1) + " has " +
                       std::to_string(rows[r].size()) + " fields, header has " +
                       std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(rows[r]));
  }
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  return parse_csv_text(read_text_file(path), path);
}

std::string to_csv_text(const CsvTable& table) {
  std::string out;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i) out.push_back(',');
    append_field(out, table.header[i]);
  }
  out.push_back('\n');
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out.push_back(',');
      append_field(out, row[i]);
    }
    out.push_back('\n');
  }
  return out;
}

void write_csv_file(const std::string& path, const CsvTable& table) {
  write_text_file(path, to_csv_text(table));
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file for reading: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw data_error("read error on file: " + path);
  return std::move(buf).str();
}

void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open file for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw data_error("write error on file: " + path);
}

}  // namespace popstrat
