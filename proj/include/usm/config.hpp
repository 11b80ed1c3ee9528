#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace usm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Canonical `key = value` text, one entry per line, keys sorted on write.
// Blank lines and lines starting with '#' are skipped on read.
class KeyValue {
 public:
  static KeyValue parse(std::string_view text);
  static KeyValue load(const std::filesystem::path& path);

  std::string to_string() const;

  void set(const std::string& key, std::string value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, std::string fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Entries of `other` override ours.
  void merge(const KeyValue& other);
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

std::string format_double(double v);  // shortest round-trip form

}  // namespace usm
