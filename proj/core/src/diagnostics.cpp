#include "trafficfuse/diagnostics.hpp"

namespace trafficfuse {

void Diagnostics::warn(const std::string& code, const std::string& message) {
  auto& n = counters_[code];
  if (n < kMaxMessagesPerCode) messages_.push_back(code + ": " + message);
  ++n;
}

void Diagnostics::count(const std::string& code, std::size_t n) {
  counters_[code] += n;
}

std::size_t Diagnostics::count_of(const std::string& code) const {
  auto it = counters_.find(code);
  return it == counters_.end() ? 0 : it->second;
}

void Diagnostics::merge(const Diagnostics& other) {
  for (const auto& [code, n] : other.counters_) counters_[code] += n;
  messages_.insert(messages_.end(), other.messages_.begin(), other.messages_.end());
}

}  // namespace trafficfuse
