#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xstitch::cli {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_number(double v);
std::string format_number(float v);
double parse_number(std::string_view text);
std::string format_number(std::int64_t v);

/// In-memory CSV: optional `# key=value ...` comment line, header, rows.
struct CsvTable {
  std::map<std::string, std::string> tags;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
  std::string to_string() const;
};

/// Tag line written at the top of every artifact CSV.
std::map<std::string, std::string> artifact_tags(const std::string& config_hash, std::uint64_t seed);

void write_csv(const std::filesystem::path& path, const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);

}  // namespace xstitch::cli
