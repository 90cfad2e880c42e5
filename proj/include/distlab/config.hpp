#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace distlab {

/// Flat `key = value` configuration with `#` comments and dotted key names
/// (model.depth, optim.lr, ...). Values are stored as strings and converted
/// on access; lookups record the key so unused entries can be reported.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  void set(const std::string& key, std::string value) { kv_[key] = std::move(value); }

  /// Applies a `key=value` override (CLI `--set`).
  void apply_override(const std::string& assignment);

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::int64_t get_i64(const std::string& key) const;
  std::int64_t get_i64(const std::string& key, std::int64_t fallback) const;
  double get_f64(const std::string& key) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Keys present in the file but never read; useful for catching typos.
  std::vector<std::string> unread_keys() const;

  /// Canonical `key = value` rendering, keys sorted, for digests and for
  /// writing resolved configs next to run artifacts.
  std::string canonical_text() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::string require(const std::string& key) const;

  std::map<std::string, std::string> kv_;
  mutable std::map<std::string, bool> read_;
};

}  // namespace distlab
