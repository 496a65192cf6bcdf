// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace msmk {

/// Lines of `key = value`; `#` starts a comment, blank lines are skipped.
/// Throws ParseError (with the line number) on a line without `=`, an empty
/// key, or a repeated key.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& source = "config");

/// Settings for one command. Every key must be declared with a default;
/// later layers override earlier ones (defaults < file < flags).
class RunConfig {
 public:
  RunConfig(std::string command, std::map<std::string, std::string> defaults);

  /// Throws ParseError for keys that were never declared.
  void set(const std::string& key, const std::string& value, const std::string& origin);
  void apply_text(const std::string& text, const std::string& source);
  void apply_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::string& command() const { return command_; }
  const std::map<std::string, std::string>& values() const { return values_; }
  /// Where each value came from: "default", a file path, or "flag".
  const std::map<std::string, std::string>& origins() const { return origins_; }

  /// {"command", "settings": {...}, "origins": {...}}.
  nlohmann::ordered_json manifest() const;
  void write_manifest(const std::filesystem::path& path) const;

 private:
  std::string command_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origins_;
};

}  // namespace msmk
