#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "deftrans/hash.hpp"
#include "deftrans/networks.hpp"

namespace deftrans::nets {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
constexpr char kMagic[8] = {'D', 'T', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kVersion = 1;

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw std::invalid_argument("unsupported array dtype in checkpoint");
  }
}

torch::ScalarType dtype_from_name(const std::string& n) {
  if (n == "f32") return torch::kFloat32;
  if (n == "f64") return torch::kFloat64;
  if (n == "i64") return torch::kInt64;
  throw std::runtime_error("unknown dtype '" + n + "' in checkpoint");
}

nlohmann::json spec_to_json(const NetworkSpec& s) {
  return {{"kind", to_string(s.kind)},       {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},  {"base_width", s.base_width},
          {"max_width", s.max_width},        {"image_size", s.image_size},
          {"depth", s.depth},                {"num_stacks", s.num_stacks},
          {"instance_norm", s.instance_norm}};
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.kind = network_kind_from_string(j.at("kind").get<std::string>());
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.base_width = j.at("base_width").get<int>();
  s.max_width = j.at("max_width").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.depth = j.at("depth").get<int>();
  s.num_stacks = j.at("num_stacks").get<int>();
  s.instance_norm = j.at("instance_norm").get<bool>();
  return s;
}

struct Parsed {
  nlohmann::json manifest;
  std::streamoff payload_offset = 0;
};

Parsed parse_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("truncated checkpoint header in " + path.string());
  Parsed p{nlohmann::json::parse(text), is.tellg()};
  if (!p.manifest.contains("version"))
    throw std::runtime_error("checkpoint manifest lacks a version field");
  if (p.manifest.at("version").get<int>() != kVersion)
    throw std::runtime_error("unsupported checkpoint version");
  return p;
}

CheckpointMeta meta_from_manifest(const nlohmann::json& m) {
  CheckpointMeta meta;
  meta.version = m.at("version").get<int>();
  meta.spec = spec_from_json(m.at("spec"));
  meta.seed = m.at("seed").get<uint64_t>();
  meta.step = m.at("step").get<int64_t>();
  return meta;
}

}  // namespace

std::vector<std::pair<std::string, torch::Tensor>> named_arrays(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back("param/" + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back("buffer/" + b.key(), b.value());
  return out;
}

std::string parameter_hash(const torch::nn::Module& module) {
  Sha256 h;
  for (const auto& [name, t] : named_arrays(module)) {
    h.update(name);
    auto c = t.detach().contiguous();
    h.update(std::as_bytes(std::span(static_cast<const char*>(c.data_ptr()),
                                     static_cast<std::size_t>(c.nbytes()))));
  }
  return h.hex_digest();
}

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta) {
  const auto arrays = named_arrays(module);
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> payload;
  for (const auto& [name, t] : arrays) {
    auto c = t.detach().contiguous().cpu();
    table.push_back({{"name", name},
                     {"shape", c.sizes().vec()},
                     {"dtype", dtype_name(c.scalar_type())},
                     {"offset", offset},
                     {"nbytes", c.nbytes()}});
    offset += c.nbytes();
    payload.push_back(c);
  }
  const nlohmann::json manifest = {{"version", kVersion},
                                   {"kind", to_string(meta.spec.kind)},
                                   {"spec", spec_to_json(meta.spec)},
                                   {"seed", meta.seed},
                                   {"step", meta.step},
                                   {"arrays", table}};
  const auto text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : payload)
      os.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.nbytes()));
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return meta_from_manifest(parse_header(is, path).manifest);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               NetworkKind expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  const auto parsed = parse_header(is, path);
  const auto& m = parsed.manifest;
  auto meta = meta_from_manifest(m);
  if (meta.spec.kind != expected_kind)
    throw std::runtime_error("checkpoint " + path.string() + " holds a " +
                             to_string(meta.spec.kind) + ", expected " + to_string(expected_kind));

  auto arrays = named_arrays(module);
  const auto& table = m.at("arrays");
  if (table.size() != arrays.size())
    throw std::runtime_error("checkpoint/spec mismatch: array count differs in " + path.string());

  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& entry = table[i];
    auto& [name, target] = arrays[i];
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint/spec mismatch: expected array " + name);
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    if (shape != target.sizes().vec())
      throw std::runtime_error("checkpoint/spec mismatch: shape of " + name);
    const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
    auto buffer = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    is.seekg(parsed.payload_offset + entry.at("offset").get<std::streamoff>());
    is.read(static_cast<char*>(buffer.data_ptr()), static_cast<std::streamsize>(buffer.nbytes()));
    if (!is) throw std::runtime_error("truncated checkpoint payload in " + path.string());
    target.copy_(buffer);
  }
  return meta;
}

}  // namespace deftrans::nets
