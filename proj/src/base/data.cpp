#include "deftrans/data.hpp"

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "deftrans/format.hpp"
#include "deftrans/hash.hpp"

namespace deftrans::data {

namespace {

using Json = nlohmann::ordered_json;

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 engine_;
};

struct Point {
  double x, y;
};

// One disc of the body sweep: center, radius, position along the body in [0,1].
struct Disc {
  Point c;
  double r;
  double u;
};

struct Shape {
  std::vector<Disc> discs;
  // optional ellipse body (fish): center, semi-axes, unit axis direction
  bool has_ellipse = false;
  Point ec{0, 0};
  double ea = 0, eb = 0;
  Point axis{1, 0};
  std::vector<Keypoint> keypoints;
};

// Maps pixel positions through the placement (pose jitter) and the global
// similarity, both about the image center.
struct Placement {
  double half;  // (N - 1) / 2
  double rot, tx, ty;
  double gscale, grot, gtx, gty;

  Point apply(Point p) const {
    // p is relative to the body origin, in pixels
    const double c = std::cos(rot), s = std::sin(rot);
    Point q{c * p.x - s * p.y + tx * half, s * p.x + c * p.y + ty * half};
    const double gc = std::cos(grot), gs = std::sin(grot);
    // normalized coordinates relative to the center are q / half
    Point n{q.x / half, q.y / half};
    Point g{gscale * (gc * n.x - gs * n.y) + gtx, gscale * (gs * n.x + gc * n.y) + gty};
    return {g.x * half + half, g.y * half + half};
  }
  double radius(double r) const { return r * gscale; }
  Point direction(Point d) const {
    const double a = rot + grot;
    return {std::cos(a) * d.x - std::sin(a) * d.y, std::sin(a) * d.x + std::cos(a) * d.y};
  }
};

Shape worm_shape(const SyntheticSpec& spec, Rng& rng, const Placement& place) {
  const double n = spec.image_size;
  const double length = spec.length * n;
  const double hw = spec.half_width * n;
  const double bend = rng.uniform(-spec.bend, spec.bend);
  const double amp = rng.uniform(spec.wave[0], spec.wave[1]);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const int steps = std::max(8, static_cast<int>(std::ceil(length * 4.0)));
  const double ds = length / steps;
  std::vector<Point> line(static_cast<std::size_t>(steps) + 1);
  line[0] = {0.0, 0.0};
  auto heading = [&](double s) {
    return bend * (s / length - 0.5) + amp * std::sin(2.0 * std::numbers::pi * s / length + phase);
  };
  for (int i = 0; i < steps; ++i) {
    const double h = heading((i + 0.5) * ds);
    line[i + 1] = {line[i].x + ds * std::cos(h), line[i].y + ds * std::sin(h)};
  }
  // center on the arc-length midpoint
  const Point mid = steps % 2 == 0 ? line[steps / 2]
                                   : Point{(line[steps / 2].x + line[steps / 2 + 1].x) / 2,
                                           (line[steps / 2].y + line[steps / 2 + 1].y) / 2};
  Shape shape;
  for (int i = 0; i <= steps; ++i) {
    const Point p{line[i].x - mid.x, line[i].y - mid.y};
    shape.discs.push_back({place.apply(p), place.radius(hw), static_cast<double>(i) / steps});
  }
  const auto& names = skeleton_for(Animal::worm).joints;
  for (int k = 0; k < 7; ++k) {
    // equispaced in arc length
    const double pos = static_cast<double>(k) * steps / 6.0;
    const int i0 = std::min(static_cast<int>(std::floor(pos)), steps - 1);
    const double t = pos - i0;
    const Point p{line[i0].x + t * (line[i0 + 1].x - line[i0].x) - mid.x,
                  line[i0].y + t * (line[i0 + 1].y - line[i0].y) - mid.y};
    const Point q = place.apply(p);
    shape.keypoints.push_back({names[static_cast<std::size_t>(k)], q.x, q.y, true});
  }
  return shape;
}

Shape fish_shape(const SyntheticSpec& spec, Rng& rng, const Placement& place) {
  const double n = spec.image_size;
  const double a = spec.body_length * n / 2.0;
  const double b = spec.body_width * n / 2.0;
  const double tail = spec.tail_length * n;
  const double tw = spec.tail_width * n;
  const double bend = rng.uniform(-spec.bend, spec.bend);
  const double amp = rng.uniform(spec.wave[0], spec.wave[1]);

  // body centered so the whole fish is centered on the origin
  const double shift = tail / 2.0;
  Shape shape;
  shape.has_ellipse = true;
  shape.ec = place.apply({shift, 0.0});
  shape.ea = place.radius(a);
  shape.eb = place.radius(b);
  shape.axis = place.direction({1.0, 0.0});

  const int steps = std::max(8, static_cast<int>(std::ceil(tail * 4.0)));
  const double ds = tail / steps;
  Point p{shift - a * 0.8, 0.0};
  const double r_min = 1.0;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const double r = std::max(r_min, tw * (1.0 - t));
    shape.discs.push_back({place.apply(p), place.radius(r), 0.5 + 0.5 * t});
    const double h = std::numbers::pi + bend * t + amp * std::sin(std::numbers::pi * t);
    p = {p.x + ds * std::cos(h), p.y + ds * std::sin(h)};
  }
  const Point left = place.apply({shift + 0.55 * a, -0.45 * b});
  const Point right = place.apply({shift + 0.55 * a, 0.45 * b});
  const Disc& last = shape.discs.back();
  shape.keypoints = {{"left_eye", left.x, left.y, true},
                     {"right_eye", right.x, right.y, true},
                     {"tail", last.c.x, last.c.y, true}};
  return shape;
}

struct Coverage {
  Raster<std::uint8_t> inside;
  Raster<float> u;      // position along the body
  Raster<float> depth;  // 1 at the axis, 0 at the boundary
};

Coverage rasterize(const Shape& shape, int size) {
  Coverage cov{Raster<std::uint8_t>(size, size), Raster<float>(size, size), Raster<float>(size, size)};
  Raster<float> best(size, size, 2.0f);  // smallest d / r so far
  auto visit = [&](int y, int x, double ratio, double u) {
    if (ratio > 1.0) return;
    cov.inside.at(y, x) = 1;
    if (ratio < best.at(y, x)) {
      best.at(y, x) = static_cast<float>(ratio);
      cov.u.at(y, x) = static_cast<float>(u);
      cov.depth.at(y, x) = static_cast<float>(1.0 - ratio * ratio);
    }
  };
  for (const auto& d : shape.discs) {
    const int x0 = std::max(0, static_cast<int>(std::floor(d.c.x - d.r)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(d.c.x + d.r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(d.c.y - d.r)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(d.c.y + d.r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        visit(y, x, std::hypot(x - d.c.x, y - d.c.y) / d.r, d.u);
  }
  if (shape.has_ellipse) {
    const double ext = std::max(shape.ea, shape.eb);
    const int x0 = std::max(0, static_cast<int>(std::floor(shape.ec.x - ext)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(shape.ec.x + ext)));
    const int y0 = std::max(0, static_cast<int>(std::floor(shape.ec.y - ext)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(shape.ec.y + ext)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - shape.ec.x, dy = y - shape.ec.y;
        const double along = dx * shape.axis.x + dy * shape.axis.y;
        const double across = -dx * shape.axis.y + dy * shape.axis.x;
        const double ratio = std::sqrt((along / shape.ea) * (along / shape.ea) +
                                       (across / shape.eb) * (across / shape.eb));
        visit(y, x, ratio, 0.5 - 0.5 * along / shape.ea);
      }
  }
  return cov;
}

float shade(const SyntheticSpec& spec, float u, float depth) {
  if (spec.appearance == Appearance::flat) return static_cast<float>(spec.intensity);
  const double v = 0.3 + 0.4 * depth + 0.15 * (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * 9.0 * u));
  return static_cast<float>(std::clamp(v, 0.3, 1.0));
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 step so neighbouring seeds give unrelated streams
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void hash_raster_bytes(Sha256& h, const void* data, std::size_t bytes) {
  h.update(std::span<const std::byte>(static_cast<const std::byte*>(data), bytes));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (image_size < 16) throw std::invalid_argument("image_size must be at least 16");
  if (animal == Animal::fly)
    throw std::invalid_argument("fly sources are externally rendered; ingest them with read_domain_set");
  if (animal == Animal::worm && (!(length > 0.0) || !(half_width > 0.0)))
    throw std::invalid_argument("degenerate worm template: length and half_width must be positive");
  if (animal == Animal::fish && (!(body_length > 0.0) || !(body_width > 0.0) || !(tail_length > 0.0)))
    throw std::invalid_argument("degenerate fish template: body and tail must have positive size");
  if (wave[0] > wave[1] || bend < 0.0 || rotation < 0.0 || translation < 0.0)
    throw std::invalid_argument("invalid pose sampler ranges");
  if (!(global[0] > 0.0)) throw std::invalid_argument("global scale must be positive");
  if (!(intensity >= 0.3 && intensity <= 1.0)) throw std::invalid_argument("intensity must lie in [0.3, 1]");
}

std::vector<Sample> gen_synthetic(const SyntheticSpec& spec, int n) {
  spec.validate();
  if (n < 0) throw std::invalid_argument("sample count must be non-negative");
  Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(spec.animal)));
  const int size = spec.image_size;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Placement place{(size - 1) / 2.0,
                    rng.uniform(-spec.rotation, spec.rotation),
                    rng.uniform(-spec.translation, spec.translation),
                    rng.uniform(-spec.translation, spec.translation),
                    spec.global[0], spec.global[1], spec.global[2], spec.global[3]};
    const Shape shape = spec.animal == Animal::worm ? worm_shape(spec, rng, place) : fish_shape(spec, rng, place);
    const Coverage cov = rasterize(shape, size);
    Sample s{Image(size, size), open3x3(cov.inside), {}};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (s.mask.at(y, x)) s.image.at(y, x) = io::quantize(shade(spec, cov.u.at(y, x), cov.depth.at(y, x)));
    for (auto kp : shape.keypoints) {
      kp.visible = kp.x >= 0.0 && kp.y >= 0.0 && kp.x <= size - 1 && kp.y <= size - 1;
      s.keypoints.points.push_back(kp);
    }
    out.push_back(std::move(s));
  }
  return out;
}

SilhouetteMask open3x3(const SilhouetteMask& mask) {
  cv::Mat m(mask.height(), mask.width(), CV_8UC1, const_cast<std::uint8_t*>(mask.values().data()));
  cv::Mat opened;
  cv::morphologyEx(m, opened, cv::MORPH_OPEN, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}));
  SilhouetteMask out(mask.height(), mask.width());
  std::memcpy(out.values().data(), opened.data, out.size());
  return out;
}

SilhouetteMask extract_silhouette(const Image& img, const Background& bg,
                                  const std::optional<SilhouetteMask>& roi) {
  if (roi && (roi->height() != img.height() || roi->width() != img.width()))
    throw std::invalid_argument("roi size does not match image");
  const float key = bg.kind == Background::Kind::black ? 0.0f : bg.value;
  SilhouetteMask raw(img.height(), img.width());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const bool fg = std::abs(img.values()[i] - key) > bg.tolerance;
    raw.values()[i] = fg && (!roi || roi->values()[i]) ? 1 : 0;
  }
  return open3x3(raw);
}

bool is_empty(const SilhouetteMask& mask) {
  return std::none_of(mask.values().begin(), mask.values().end(), [](auto v) { return v != 0; });
}

std::string to_string(Split split) { return split == Split::test ? "test" : "unpaired_train"; }

Split split_from_string(const std::string& name) {
  if (name == "test") return Split::test;
  if (name == "unpaired_train") return Split::unpaired_train;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::filesystem::path set_dir(const std::filesystem::path& root, const std::string& domain, Split split) {
  return root / domain / to_string(split);
}

void write_domain_set(const std::filesystem::path& root, const DomainSet& set) {
  const auto dir = set_dir(root, set.domain, set.split);
  std::filesystem::create_directories(dir / "images");
  std::vector<io::AnnotationRecord> records;
  for (const auto& item : set.items) {
    const std::string rel = "images/" + item.id + ".png";
    io::write_image(dir / rel, item.image);
    if (item.mask) io::write_mask(dir / "masks" / (item.id + ".png"), *item.mask);
    if (item.keypoints) records.push_back({rel, set.animal, *item.keypoints});
  }
  if (!records.empty()) io::write_annotations(dir / "annotations" / "keypoints.txt", records);
}

DomainSet read_domain_set(const std::filesystem::path& root, const std::string& domain, Split split,
                          Animal animal) {
  const auto dir = set_dir(root, domain, split);
  if (!std::filesystem::is_directory(dir / "images"))
    throw std::runtime_error("no images directory under " + dir.string());
  DomainSet set{domain, split, animal, {}};
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir / "images"))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    DomainItem item;
    item.id = f.stem().string();
    item.image = io::read_image(f);
    const auto mask_path = dir / "masks" / f.filename();
    if (std::filesystem::exists(mask_path)) item.mask = io::read_mask(mask_path);
    set.items.push_back(std::move(item));
  }
  const auto ann = dir / "annotations" / "keypoints.txt";
  if (std::filesystem::exists(ann)) {
    for (auto& r : io::read_annotations(ann)) {
      const std::string id = std::filesystem::path(r.image_path).stem().string();
      auto it = std::find_if(set.items.begin(), set.items.end(), [&](const auto& item) { return item.id == id; });
      if (it == set.items.end()) throw std::runtime_error(ann.string() + ": no image for " + r.image_path);
      if (r.animal != animal) throw std::runtime_error(ann.string() + ": animal class mismatch");
      it->keypoints = std::move(r.keypoints);
    }
  }
  return set;
}

std::string content_hash(const DomainSet& set) {
  Sha256 h;
  h.update(set.domain + "/" + to_string(set.split) + "/" + deftrans::to_string(set.animal) + "\n");
  for (const auto& item : set.items) {
    h.update(item.id + "\n");
    std::vector<std::uint8_t> bytes(item.image.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
      bytes[i] = static_cast<std::uint8_t>(std::lround(item.image.values()[i] * 255.0f));
    h.update(std::to_string(item.image.height()) + "x" + std::to_string(item.image.width()) + "\n");
    hash_raster_bytes(h, bytes.data(), bytes.size());
    if (item.mask) {
      h.update("mask\n");
      hash_raster_bytes(h, item.mask->values().data(), item.mask->size());
    }
    if (item.keypoints) {
      h.update("keypoints\n");
      for (const auto& kp : item.keypoints->points)
        h.update(kp.name + " " + format_double(kp.x) + " " + format_double(kp.y) + (kp.visible ? " 1\n" : " 0\n"));
    }
  }
  return h.hex_digest();
}

int fill_silhouettes(DomainSet& set, const Background& bg) {
  int skipped = 0;
  std::vector<DomainItem> kept;
  for (auto& item : set.items) {
    if (!item.mask) item.mask = extract_silhouette(item.image, bg);
    if (is_empty(*item.mask)) {
      std::cerr << "warning: empty silhouette for " << set.domain << "/" << item.id << ", skipped\n";
      ++skipped;
      continue;
    }
    kept.push_back(std::move(item));
  }
  set.items = std::move(kept);
  return skipped;
}

SyntheticSpec sim2sim_source_spec(const Sim2SimConfig& cfg) {
  SyntheticSpec s;
  s.animal = Animal::worm;
  s.image_size = cfg.image_size;
  s.half_width = 0.03;
  s.bend = 0.3;
  s.wave = {0.0, 0.25};
  s.rotation = 0.14;
  s.translation = 0.04;
  s.appearance = Appearance::flat;
  s.intensity = 0.8;
  return s;
}

SyntheticSpec sim2sim_target_spec(const Sim2SimConfig& cfg) {
  SyntheticSpec s = sim2sim_source_spec(cfg);
  s.half_width *= cfg.width_factor;
  s.bend = 0.8;
  s.wave = {0.2, 0.5};
  s.global = {cfg.scale, cfg.rotation_deg * std::numbers::pi / 180.0, cfg.translation[0], cfg.translation[1]};
  s.appearance = Appearance::textured;
  return s;
}

namespace {

DomainSet to_set(std::vector<Sample> samples, const std::string& domain, Split split, const char* prefix,
                 bool with_mask, bool with_keypoints) {
  DomainSet set{domain, split, Animal::worm, {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%s%04zu", prefix, i);
    DomainItem item{id, std::move(samples[i].image), {}, {}};
    if (with_mask) item.mask = std::move(samples[i].mask);
    if (with_keypoints) item.keypoints = std::move(samples[i].keypoints);
    set.items.push_back(std::move(item));
  }
  return set;
}

}  // namespace

Benchmark build_sim2sim_benchmark(const Sim2SimConfig& cfg) {
  SyntheticSpec src = sim2sim_source_spec(cfg);
  SyntheticSpec tgt = sim2sim_target_spec(cfg);
  src.seed = mix_seed(cfg.seed, 1);
  tgt.seed = mix_seed(cfg.seed, 2);
  SyntheticSpec test = tgt;
  test.seed = mix_seed(cfg.seed, 3);

  Benchmark b;
  b.config = cfg;
  b.source = to_set(gen_synthetic(src, cfg.source_train), "source", Split::unpaired_train, "a", true, true);
  b.target_train = to_set(gen_synthetic(tgt, cfg.target_train), "target", Split::unpaired_train, "b", false, false);
  auto test_samples = gen_synthetic(test, cfg.target_test);
  for (std::size_t i = 0; i < test_samples.size(); ++i) {
    char rel[48];
    std::snprintf(rel, sizeof(rel), "images/q%04zu.png", i);
    b.sealed_gt.push_back({rel, Animal::worm, test_samples[i].keypoints});
  }
  b.target_test = to_set(std::move(test_samples), "target", Split::test, "q", false, false);
  return b;
}

namespace {

std::string affine_json(const Sim2SimConfig& cfg) {
  Json j;
  j["scale"] = cfg.scale;
  j["rotation_deg"] = cfg.rotation_deg;
  j["translation"] = {cfg.translation[0], cfg.translation[1]};
  j["width_factor"] = cfg.width_factor;
  return j.dump(2) + "\n";
}

bool& training_flag() {
  static bool flag = false;
  return flag;
}

}  // namespace

std::string write_benchmark(const std::filesystem::path& root, const Benchmark& bench) {
  if (in_training_mode()) throw std::logic_error("sealed ground truth cannot be written by a training command");
  std::filesystem::create_directories(root);
  Json sets = Json::array();
  for (const DomainSet* set : {&bench.source, &bench.target_train, &bench.target_test}) {
    write_domain_set(root, *set);
    sets.push_back({{"domain", set->domain},
                    {"split", to_string(set->split)},
                    {"count", set->items.size()},
                    {"sha256", content_hash(*set)}});
  }
  io::write_annotations(root / kSealedGtPath, bench.sealed_gt);
  {
    std::ofstream os(root / kSealedAffinePath);
    os << affine_json(bench.config);
    if (!os) throw std::runtime_error("cannot write sealed affine");
  }
  Json m;
  m["format"] = "deftrans-benchmark";
  m["version"] = 1;
  m["kind"] = "sim2sim";
  m["animal"] = "worm";
  m["seed"] = bench.config.seed;
  m["image_size"] = bench.config.image_size;
  m["sets"] = sets;
  m["sealed"] = {{"keypoints", {{"path", kSealedGtPath}, {"sha256", sha256_file(root / kSealedGtPath)}}},
                 {"affine", {{"path", kSealedAffinePath}, {"sha256", sha256_file(root / kSealedAffinePath)}}}};
  const std::string text = m.dump(2) + "\n";
  std::ofstream os(root / kManifestName);
  os << text;
  if (!os) throw std::runtime_error("cannot write manifest");
  return text;
}

void enter_training_mode() { training_flag() = true; }
bool in_training_mode() { return training_flag(); }

SealedTruth read_sealed_truth(const std::filesystem::path& root) {
  if (in_training_mode()) throw std::logic_error("sealed ground truth is not readable from a training command");
  std::ifstream ms(root / kManifestName);
  if (!ms) throw std::runtime_error("no manifest in " + root.string());
  const Json m = Json::parse(ms);
  const auto& sealed = m.at("sealed");
  for (const char* key : {"keypoints", "affine"}) {
    const auto path = root / sealed.at(key).at("path").get<std::string>();
    if (sha256_file(path) != sealed.at(key).at("sha256").get<std::string>())
      throw std::runtime_error("sealed file " + path.string() + " does not match the manifest hash");
  }
  SealedTruth t;
  t.keypoints = io::read_annotations(root / sealed.at("keypoints").at("path").get<std::string>());
  std::ifstream as(root / sealed.at("affine").at("path").get<std::string>());
  const Json a = Json::parse(as);
  t.scale = a.at("scale").get<double>();
  t.rotation_deg = a.at("rotation_deg").get<double>();
  t.translation = {a.at("translation")[0].get<double>(), a.at("translation")[1].get<double>()};
  return t;
}

}  // namespace deftrans::data
