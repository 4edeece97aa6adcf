#include "cli/csv.hpp"

#include <array>
#include <charconv>
#include <sstream>

#include "xstitch/checkpoint.hpp"
#include "xstitch/errors.hpp"

namespace xstitch::cli {

std::string format_number(double v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

std::string format_number(float v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

double parse_number(std::string_view text) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw FormatError("csv: '" + std::string(text) + "' is not a number");
  }
  return v;
}

std::string format_number(std::int64_t v) { return std::to_string(v); }

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw FormatError("csv: no column '" + std::string(name) + "'");
}

std::string CsvTable::to_string() const {
  std::ostringstream out;
  if (!tags.empty()) {
    out << "#";
    for (const auto& [k, v] : tags) out << " " << k << "=" << v;
    out << "\n";
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

std::map<std::string, std::string> artifact_tags(const std::string& config_hash, std::uint64_t seed) {
  return {{"config_hash", config_hash}, {"seed", std::to_string(seed)}};
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) { write_text_file(path, table.to_string()); }

CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::istringstream in{std::string(text)};
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream words(line.substr(1));
      std::string w;
      while (words >> w) {
        const auto eq = w.find('=');
        if (eq != std::string::npos) t.tags[w.substr(0, eq)] = w.substr(eq + 1);
      }
      continue;
    }
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream fields(line);
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size()) throw FormatError("csv: row width differs from header");
      t.rows.push_back(std::move(cells));
    }
  }
  if (!have_header) throw FormatError("csv: missing header");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  try {
    return parse_csv(read_text_file(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace xstitch::cli
