#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace trafficfuse {

/// Non-fatal findings collected while processing data: clamped speeds,
/// out-of-range segment lengths, clipped boundary outflows and so on.
/// Counters are keyed by a short code; the first few messages per code
/// are retained verbatim.
class Diagnostics {
 public:
  void warn(const std::string& code, const std::string& message);
  void count(const std::string& code, std::size_t n = 1);

  std::size_t count_of(const std::string& code) const;
  const std::map<std::string, std::size_t>& counters() const { return counters_; }
  const std::vector<std::string>& messages() const { return messages_; }
  bool empty() const { return counters_.empty(); }

  void merge(const Diagnostics& other);

 private:
  static constexpr std::size_t kMaxMessagesPerCode = 8;
  std::map<std::string, std::size_t> counters_;
  std::vector<std::string> messages_;
};

}  // namespace trafficfuse
