#include "deftrans/config.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <stdexcept>

#include "deftrans/format.hpp"

namespace deftrans::config {

namespace {

enum class Type { integer, number, boolean, text };

struct Key {
  const char* name;
  Type type;
  Json fallback;
};

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = {
      {"seed", Type::integer, 0},
      {"animal", Type::text, "worm"},
      {"image_size", Type::integer, 128},
      {"device", Type::text, "cpu"},
      {"threads", Type::integer, 1},

      {"data.root", Type::text, "data"},
      {"data.kind", Type::text, "synthetic"},
      {"data.source_train", Type::integer, 200},
      {"data.target_train", Type::integer, 200},
      {"data.target_test", Type::integer, 100},
      {"data.scale", Type::number, 1.15},
      {"data.rotation_deg", Type::number, 10.0},
      {"data.tx", Type::number, 0.05},
      {"data.ty", Type::number, -0.03},
      {"data.width_factor", Type::number, 1.6},

      {"translation.base_width", Type::integer, 64},
      {"translation.batch_size", Type::integer, 4},
      {"translation.epochs", Type::integer, 200},
      {"translation.max_steps", Type::integer, 0},
      {"translation.lr_stn", Type::number, 1e-4},
      {"translation.lr_deform", Type::number, 1e-4},
      {"translation.lr_shape_disc", Type::number, 1e-5},
      {"translation.lr_appearance", Type::number, 2e-4},
      {"translation.lr_image_disc", Type::number, 2e-4},
      {"translation.decay_start", Type::number, 100.0},
      {"translation.decay_end", Type::number, 200.0},
      {"translation.beta1", Type::number, 0.5},
      {"translation.beta2", Type::number, 0.999},
      {"translation.alpha", Type::number, 10.0},
      {"translation.beta", Type::number, 1.0},
      {"translation.w_shape_adv", Type::number, 1.0},
      {"translation.w_image_adv", Type::number, 1.0},
      {"translation.w_sup", Type::number, 1.0},
      {"translation.detach_shape", Type::boolean, false},
      {"translation.tau", Type::number, 0.5},
      {"translation.pretrain_steps", Type::integer, 500},
      {"translation.pretrain_lr", Type::number, 1e-4},
      {"translation.log_every", Type::integer, 1},
      {"translation.checkpoint_every", Type::integer, 500},
      {"translation.sample_every", Type::integer, 500},

      {"pose.base_width", Type::integer, 64},
      {"pose.batch_size", Type::integer, 4},
      {"pose.epochs", Type::integer, 200},
      {"pose.lr", Type::number, 2e-3},
      {"pose.decay_start", Type::number, 100.0},
      {"pose.decay_end", Type::number, 200.0},
      {"pose.rotation_deg", Type::number, 30.0},
      {"pose.augment", Type::boolean, true},
      {"pose.pi_training", Type::text, "auto"},

      {"eval.t_min", Type::number, 2.0},
      {"eval.t_max", Type::number, 45.0},
      {"eval.ssim_seed", Type::integer, 0},
  };
  return keys;
}

const Key& lookup(const std::string& name) {
  for (const auto& k : schema())
    if (name == k.name) return k;
  throw std::invalid_argument("unknown configuration key '" + name + "'");
}

struct Preset {
  const char* parent;
  Json values;
};

const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> p = {
      {"default", {nullptr, Json::object()}},
      {"worm",
       {"default",
        {{"animal", "worm"},
         {"translation.lr_stn", 1e-4},
         {"translation.lr_deform", 1e-4},
         {"translation.lr_shape_disc", 1e-5},
         {"translation.decay_start", 100.0},
         {"translation.decay_end", 200.0},
         {"translation.epochs", 200}}}},
      {"fish", {"worm", {{"animal", "fish"}}}},
      {"fly",
       {"default",
        {{"animal", "fly"},
         {"data.kind", "ingested"},
         {"translation.lr_appearance", 2e-3},
         {"translation.lr_image_disc", 2e-3},
         {"translation.lr_stn", 2e-5},
         {"translation.lr_deform", 2e-5},
         {"translation.lr_shape_disc", 2e-6},
         {"translation.decay_start", 50.0},
         {"translation.decay_end", 100.0},
         {"translation.epochs", 100},
         {"pose.augment", true}}}},
      // Desk-scale CPU profile of the worm benchmark at 64 x 64.
      {"sim2sim",
       {"worm",
        {{"data.kind", "sim2sim"},
         {"seed", 7},
         {"image_size", 64},
         {"translation.base_width", 16},
         {"translation.epochs", 60},
         {"translation.lr_stn", 2e-4},
         {"translation.lr_deform", 1e-4},
         {"translation.lr_shape_disc", 1e-4},
         {"translation.lr_appearance", 2e-4},
         {"translation.lr_image_disc", 2e-4},
         {"translation.decay_start", 30.0},
         {"translation.decay_end", 60.0},
         {"translation.checkpoint_every", 1000},
         {"translation.sample_every", 1000},
         {"pose.base_width", 32},
         {"pose.epochs", 40},
         {"pose.decay_start", 20.0},
         {"pose.decay_end", 40.0}}}},
      {"smoke",
       {"sim2sim",
        {{"data.source_train", 16},
         {"data.target_train", 16},
         {"data.target_test", 8},
         {"translation.max_steps", 200},
         {"translation.checkpoint_every", 100},
         {"translation.sample_every", 100},
         {"pose.epochs", 2}}}},
  };
  return p;
}

bool matches(Type type, const Json& v) {
  switch (type) {
    case Type::integer: return v.is_number_integer();
    case Type::number: return v.is_number();
    case Type::boolean: return v.is_boolean();
    case Type::text: return v.is_string();
  }
  return false;
}

void apply_preset(RunConfig& cfg, const std::string& name, int depth) {
  const auto it = presets().find(name);
  if (it == presets().end()) throw std::invalid_argument("unknown preset '" + name + "'");
  if (depth > 8) throw std::logic_error("preset inheritance too deep");
  if (it->second.parent) apply_preset(cfg, it->second.parent, depth + 1);
  for (const auto& [k, v] : it->second.values.items()) cfg.set(k, v);
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, p] : presets()) names.push_back(name);
  return names;
}

RunConfig RunConfig::from_preset(const std::string& preset) {
  RunConfig cfg;
  for (const auto& k : schema()) cfg.values_[k.name] = k.fallback;
  apply_preset(cfg, preset, 0);
  cfg.preset_ = preset;
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path, const std::string& preset_override) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file " + path.string());
  Json doc;
  try {
    doc = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument(path.string() + ": expected a JSON object");
  std::string preset = doc.contains("preset") ? doc.at("preset").get<std::string>() : "default";
  if (!preset_override.empty()) preset = preset_override;
  RunConfig cfg = from_preset(preset);
  for (const auto& [k, v] : doc.items())
    if (k != "preset") cfg.set(k, v);
  return cfg;
}

void RunConfig::set(const std::string& key, const Json& value) {
  const Key& k = lookup(key);
  if (!matches(k.type, value))
    throw std::invalid_argument("configuration key '" + key + "' has the wrong type: " + value.dump());
  values_[key] = k.type == Type::number ? Json(value.get<double>()) : value;
}

void RunConfig::set_text(const std::string& key, const std::string& value) {
  const Key& k = lookup(key);
  try {
    switch (k.type) {
      case Type::integer: {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        set(key, v);
        break;
      }
      case Type::number: set(key, parse_double(value)); break;
      case Type::boolean:
        if (value != "true" && value != "false") throw std::invalid_argument(value);
        set(key, value == "true");
        break;
      case Type::text: set(key, value); break;
    }
  } catch (const std::logic_error&) {
    throw std::invalid_argument("invalid value '" + value + "' for configuration key '" + key + "'");
  }
}

bool RunConfig::has(const std::string& key) const { return values_.contains(key); }

double RunConfig::number(const std::string& key) const {
  lookup(key);
  return values_.at(key).get<double>();
}

int64_t RunConfig::integer(const std::string& key) const {
  if (lookup(key).type != Type::integer) throw std::invalid_argument(key + " is not an integer key");
  return values_.at(key).get<int64_t>();
}

bool RunConfig::flag(const std::string& key) const {
  if (lookup(key).type != Type::boolean) throw std::invalid_argument(key + " is not a boolean key");
  return values_.at(key).get<bool>();
}

std::string RunConfig::text(const std::string& key) const {
  if (lookup(key).type != Type::text) throw std::invalid_argument(key + " is not a text key");
  return values_.at(key).get<std::string>();
}

Json RunConfig::snapshot() const {
  Json out;
  out["preset"] = preset_;
  for (const auto& k : schema()) out[k.name] = values_.at(k.name);
  return out;
}

void RunConfig::write_snapshot(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  os << snapshot().dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

std::filesystem::path default_output_root() {
  if (const char* env = std::getenv("DEFTRANS_OUT"); env && *env) return env;
  return "runs";
}

}  // namespace deftrans::config
