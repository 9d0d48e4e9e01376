#pragma once

// Procedural source data, silhouette extraction, on-disk dataset layout and
// the sim2sim benchmark (a synthetic target with known geometry).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deftrans/io.hpp"
#include "deftrans/raster.hpp"
#include "deftrans/skeleton.hpp"

namespace deftrans::data {

enum class Appearance { flat, textured };

/// Geometry is given in fractions of the image side so one spec renders the
/// same scene at any resolution.
struct SyntheticSpec {
  Animal animal = Animal::worm;
  int image_size = 128;
  uint64_t seed = 0;

  // worm: capsule of constant half-width around a curved centerline
  double length = 0.55;
  double half_width = 0.03;
  double bend = 0.3;                       // total heading change, drawn from [-bend, bend] (rad)
  std::array<double, 2> wave = {0.0, 0.3};  // sinusoid amplitude range (rad)

  // fish: ellipse body with a tapered tail
  double body_length = 0.28;
  double body_width = 0.12;
  double tail_length = 0.3;
  double tail_width = 0.035;

  // pose sampler
  double rotation = 0.14;     // uniform in [-rotation, rotation] (rad)
  double translation = 0.06;  // uniform in [-translation, translation] per axis (normalized)

  /// Similarity applied to the sampled geometry about the image center, in
  /// normalized coordinates: c -> scale * R(rotation) * c + (tx, ty).
  std::array<double, 4> global = {1.0, 0.0, 0.0, 0.0};

  Appearance appearance = Appearance::flat;
  double intensity = 0.8;

  void validate() const;
};

struct Sample {
  Image image;
  SilhouetteMask mask;
  KeypointSet keypoints;
};

/// Deterministic in (spec, n). The mask is exactly the support of the image.
/// Fly sources are externally rendered and must be ingested with read_domain_set.
std::vector<Sample> gen_synthetic(const SyntheticSpec& spec, int n);

/// Opening with a 3x3 square element.
SilhouetteMask open3x3(const SilhouetteMask& mask);

struct Background {
  enum class Kind { black, keyed } kind = Kind::black;
  float value = 0.0f;  // key intensity when keyed
  float tolerance = 0.02f;
};

/// (|img - bg| > tol) and roi, then a 3x3 opening.
SilhouetteMask extract_silhouette(const Image& img, const Background& bg = {},
                                  const std::optional<SilhouetteMask>& roi = std::nullopt);
bool is_empty(const SilhouetteMask& mask);

enum class Split { unpaired_train, test };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct DomainItem {
  std::string id;
  Image image;
  std::optional<SilhouetteMask> mask;
  std::optional<KeypointSet> keypoints;

  friend bool operator==(const DomainItem&, const DomainItem&) = default;
};

struct DomainSet {
  std::string domain;
  Split split = Split::unpaired_train;
  Animal animal = Animal::worm;
  std::vector<DomainItem> items;

  friend bool operator==(const DomainSet&, const DomainSet&) = default;
};

/// <root>/<domain>/<split>/{images,masks,annotations}. Annotations live in
/// annotations/keypoints.txt with image paths relative to the split directory.
std::filesystem::path set_dir(const std::filesystem::path& root, const std::string& domain, Split split);
void write_domain_set(const std::filesystem::path& root, const DomainSet& set);
/// Items without a mask file get none; an annotation file without the
/// matching image is an error.
DomainSet read_domain_set(const std::filesystem::path& root, const std::string& domain, Split split,
                          Animal animal);
/// SHA-256 over ids, raster bytes and annotations in item order.
std::string content_hash(const DomainSet& set);

/// Items whose extracted silhouette is empty are skipped with a warning.
/// Returns the number of skipped items.
int fill_silhouettes(DomainSet& set, const Background& bg = {});

struct Sim2SimConfig {
  uint64_t seed = 7;
  int image_size = 128;
  int source_train = 200;
  int target_train = 200;
  int target_test = 100;
  double scale = 1.15;
  double rotation_deg = 10.0;
  std::array<double, 2> translation = {0.05, -0.03};
  double width_factor = 1.6;
};

SyntheticSpec sim2sim_source_spec(const Sim2SimConfig& cfg);
SyntheticSpec sim2sim_target_spec(const Sim2SimConfig& cfg);

struct Benchmark {
  DomainSet source;        // source/unpaired_train, masks and keypoints
  DomainSet target_train;  // target/unpaired_train, images only
  DomainSet target_test;   // target/test, images only; keypoints sealed
  std::vector<io::AnnotationRecord> sealed_gt;
  Sim2SimConfig config;
};

Benchmark build_sim2sim_benchmark(const Sim2SimConfig& cfg);

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kSealedGtPath = "sealed/target_test_keypoints.txt";
inline constexpr const char* kSealedAffinePath = "sealed/hidden_affine.json";

/// Writes the three sets, the sealed files and manifest.json. Returns the
/// manifest text.
std::string write_benchmark(const std::filesystem::path& root, const Benchmark& bench);

/// Training commands call this once; afterwards sealed files refuse to open.
void enter_training_mode();
bool in_training_mode();

struct SealedTruth {
  std::vector<io::AnnotationRecord> keypoints;
  double scale = 1.0;
  double rotation_deg = 0.0;
  std::array<double, 2> translation = {0.0, 0.0};
};

/// Verifies the sealed files against the hashes in the manifest.
SealedTruth read_sealed_truth(const std::filesystem::path& root);

}  // namespace deftrans::data
