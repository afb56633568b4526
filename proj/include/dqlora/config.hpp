// SPDX-License-Identifier: Apache-2.0
//
// Flat "key = value" configuration with a closed key set. Files are UTF-8,
// one assignment per line, '#' starts a comment. Unknown keys are errors.
#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dqlora {

enum class KeyType { kInt, kReal, kBool, kString, kChoice };

struct KeySpec {
  std::string name;
  KeyType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // kChoice only
};

/// Every accepted key, in documentation order.
const std::vector<KeySpec>& config_keys();

class Config {
 public:
  Config();

  /// Validates the key and the value's type; throws ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Parses "key=value" (whitespace around '=' allowed).
  void set_assignment(const std::string& assignment);
  void load_text(const std::string& text, const std::string& origin = "<text>");
  void load_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// True once the key was assigned from a file or flag.
  bool is_set(const std::string& key) const { return explicit_.count(key) > 0; }

  /// Canonical "key = value" listing of every key.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace dqlora
