#include "trafficfuse/csv.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "trafficfuse/error.hpp"

namespace trafficfuse::csv {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string locus(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

}  // namespace

std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    const auto end = comma == std::string_view::npos ? line.size() : comma;
    cells.emplace_back(trim(line.substr(start, end - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::vector<Row> read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<Row> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    rows.push_back(Row{n, split(t)});
  }
  return rows;
}

double to_double(const std::string& cell, const std::filesystem::path& path,
                 std::size_t line, std::string_view column) {
  double v = 0.0;
  const auto* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(locus(path, line) + ": column '" + std::string(column) +
                     "': not a number: '" + cell + "'");
  }
  return v;
}

long long to_int(const std::string& cell, const std::filesystem::path& path,
                 std::size_t line, std::string_view column) {
  long long v = 0;
  const auto* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(locus(path, line) + ": column '" + std::string(column) +
                     "': not an integer: '" + cell + "'");
  }
  return v;
}

std::string format(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

void write_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace trafficfuse::csv

namespace trafficfuse {

EpochSeconds parse_iso8601(std::string_view text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  const std::string str(text);
  const int n = std::sscanf(str.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
  if (n < 3 || (n > 3 && n < 5) || mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 ||
      h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) {
    throw ParseError("invalid ISO-8601 timestamp '" + str + "'");
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw ParseError("invalid calendar date '" + str + "'");
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<EpochSeconds>(days) * 86400 + h * 3600 + mi * 60 + s;
}

std::string format_iso8601(EpochSeconds t) {
  using namespace std::chrono;
  auto days = t >= 0 ? t / 86400 : (t - 86399) / 86400;
  const auto secs = t - days * 86400;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lld",
                static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()), static_cast<long long>(secs / 3600),
                static_cast<long long>((secs / 60) % 60), static_cast<long long>(secs % 60));
  return buf;
}

int hour_of_day(EpochSeconds t) {
  auto s = t % 86400;
  if (s < 0) s += 86400;
  return static_cast<int>(s / 3600);
}

int day_of_week(EpochSeconds t) {
  auto days = t >= 0 ? t / 86400 : (t - 86399) / 86400;
  // 1970-01-01 was a Thursday (index 3 with Monday = 0).
  auto d = (days + 3) % 7;
  if (d < 0) d += 7;
  return static_cast<int>(d);
}

}  // namespace trafficfuse
