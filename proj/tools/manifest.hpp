#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace modality::cli {

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

class RunManifest {
 public:
  RunManifest(std::string command, std::uint64_t seed);

  void add_input(const std::string& role, const std::filesystem::path& path);
  void set_option(const std::string& name, nlohmann::json value) { options_[name] = std::move(value); }
  void add_output(const std::string& name) { outputs_.push_back(name); }

  nlohmann::json to_json() const;
  // Writes <dir>/manifest.json.
  void write(const std::filesystem::path& dir) const;

 private:
  std::string command_;
  std::uint64_t seed_;
  nlohmann::json inputs_ = nlohmann::json::array();
  nlohmann::json options_ = nlohmann::json::object();
  std::vector<std::string> outputs_;
  std::chrono::system_clock::time_point started_;
  std::chrono::steady_clock::time_point clock_;
};

}  // namespace modality::cli
