#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace trafficfuse::csv {

struct Row {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> cells;
};

/// Reads a comma-separated file. Blank lines and lines starting with '#'
/// are skipped; cells are whitespace-trimmed. No quoting support.
std::vector<Row> read(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view line);

double to_double(const std::string& cell, const std::filesystem::path& path,
                 std::size_t line, std::string_view column);
long long to_int(const std::string& cell, const std::filesystem::path& path,
                 std::size_t line, std::string_view column);

/// Shortest round-trippable decimal representation.
std::string format(double v);

/// Writes `content` to `path` via a temporary sibling and a rename.
void write_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace trafficfuse::csv

namespace trafficfuse {

/// Seconds since 1970-01-01T00:00:00 (UTC, no leap seconds).
using EpochSeconds = std::int64_t;

EpochSeconds parse_iso8601(std::string_view text);
std::string format_iso8601(EpochSeconds t);
/// Hour of day 0..23.
int hour_of_day(EpochSeconds t);
/// Day of week with 0 = Monday ... 6 = Sunday.
int day_of_week(EpochSeconds t);

}  // namespace trafficfuse
