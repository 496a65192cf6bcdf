// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#include "msmk/config.hpp"

#include <charconv>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "msmk/errors.hpp"

namespace msmk {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ParseError("setting '" + key + "': expected an integer, got '" + text + "'");
  }
  return v;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ParseError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(where + ": empty key");
    if (!seen.insert(key).second) throw ParseError(where + ": '" + key + "' set twice");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

RunConfig::RunConfig(std::string command, std::map<std::string, std::string> defaults)
    : command_(std::move(command)), values_(std::move(defaults)) {
  for (const auto& [k, v] : values_) origins_[k] = "default";
}

void RunConfig::set(const std::string& key, const std::string& value, const std::string& origin) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ParseError(origin + ": unknown setting '" + key + "' for " + command_);
  it->second = value;
  origins_[key] = origin;
}

void RunConfig::apply_text(const std::string& text, const std::string& source) {
  const auto pairs = parse_key_values(text, source);
  for (const auto& [k, v] : pairs) {
    if (!values_.count(k)) throw ParseError(source + ": unknown setting '" + k + "' for " + command_);
  }
  for (const auto& [k, v] : pairs) set(k, v, source);
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read config file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (trim(text).rfind('{', 0) != 0) {
    apply_text(text, path.string());
    return;
  }
  // A resolved manifest from an earlier run.
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    if (j.at("command").get<std::string>() != command_) {
      throw ParseError(path.string() + ": manifest is for '" + j.at("command").get<std::string>() + "', not " + command_);
    }
    std::string lines;
    for (const auto& [k, v] : j.at("settings").items()) lines += k + " = " + v.get<std::string>() + "\n";
    apply_text(lines, path.string());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("RunConfig: '" + key + "' was never declared");
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& text = get(key);
  double v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ParseError("setting '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

std::int64_t RunConfig::get_int(const std::string& key) const { return parse_integer<std::int64_t>(key, get(key)); }

std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_integer<std::uint64_t>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("setting '" + key + "': expected true or false, got '" + v + "'");
}

nlohmann::ordered_json RunConfig::manifest() const {
  nlohmann::ordered_json j;
  j["command"] = command_;
  j["settings"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values_) j["settings"][k] = v;
  j["origins"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : origins_) j["origins"][k] = v;
  return j;
}

void RunConfig::write_manifest(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest().dump(2) << "\n";
}

}  // namespace msmk
