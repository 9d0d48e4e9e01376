#pragma once

// Run configuration: a flat document of dotted keys ("translation.epochs")
// resolved from a named preset, an optional config file and overrides.
// Unknown keys and mistyped values are rejected.

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace deftrans::config {

using Json = nlohmann::ordered_json;

/// Names of the built-in presets.
std::vector<std::string> preset_names();

class RunConfig {
 public:
  /// Defaults with the named preset (and its parents) applied.
  static RunConfig from_preset(const std::string& preset);
  /// A JSON object of dotted keys; "preset" selects the starting point
  /// unless `preset_override` is non-empty.
  static RunConfig from_file(const std::filesystem::path& path, const std::string& preset_override = {});

  /// Throws std::invalid_argument for unknown keys or type mismatches.
  void set(const std::string& key, const Json& value);
  /// Parses `value` according to the key's type.
  void set_text(const std::string& key, const std::string& value);

  const std::string& preset() const { return preset_; }
  bool has(const std::string& key) const;
  double number(const std::string& key) const;
  int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::string text(const std::string& key) const;

  /// Resolved document including the preset name, keys in schema order.
  Json snapshot() const;
  void write_snapshot(const std::filesystem::path& path) const;

 private:
  std::string preset_ = "default";
  Json values_;
};

/// Output root used when no --out is given: $DEFTRANS_OUT or "runs".
std::filesystem::path default_output_root();

}  // namespace deftrans::config
