#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>

namespace fermi {

// Audit trail of sensitive reads (table rows, model checkpoints). The attack
// paths record every access they make so the threat-model contracts can be
// asserted after the fact instead of trusted.
class AccessLog {
 public:
  void record(std::string_view key) { ++counts_[std::string(key)]; }

  std::size_t count(std::string_view key) const {
    auto it = counts_.find(std::string(key));
    return it == counts_.end() ? 0 : it->second;
  }

  // Sum of all entries whose key starts with the prefix.
  std::size_t count_prefix(std::string_view prefix) const {
    std::size_t n = 0;
    for (const auto& [k, v] : counts_)
      if (k.size() >= prefix.size() && std::string_view(k).substr(0, prefix.size()) == prefix)
        n += v;
    return n;
  }

  const std::map<std::string, std::size_t>& entries() const { return counts_; }

  void merge(const AccessLog& other) {
    for (const auto& [k, v] : other.counts_) counts_[k] += v;
  }

 private:
  std::map<std::string, std::size_t> counts_;
};

inline std::string table_read_key(std::string_view table) {
  return "table-read:" + std::string(table);
}
inline std::string checkpoint_read_key(std::string_view name) {
  return "checkpoint-read:" + std::string(name);
}

}  // namespace fermi
