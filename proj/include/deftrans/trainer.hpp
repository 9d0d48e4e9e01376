#pragma once

// Adversarial training of the shape stage (STN + local deformation against a
// shape discriminator) and the appearance stage (U-Net against an image
// discriminator, plus silhouette-to-image reconstruction), and batch
// translation with the trained generators.

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deftrans/data.hpp"
#include "deftrans/networks.hpp"
#include "deftrans/warp.hpp"

namespace deftrans::train {

/// Non-saturating logistic losses, averaged over patches and batch.
struct GanLosses {
  torch::Tensor gen;
  torch::Tensor disc;
};
GanLosses loss_shape(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

struct RegularizerWeights {
  double alpha = 10.0;
  double beta = 1.0;
};

/// alpha * (mean (gx - sx)^2 + mean (gy - sy)^2) + beta * mean |phi - id|,
/// with sx, sy the identity spacings and |.| the per-pixel Euclidean norm.
torch::Tensor loss_regularizer(const warp::DeformationField& field, const warp::GradientField& grads,
                               const RegularizerWeights& w);

struct AppearanceLosses {
  torch::Tensor gen;
  torch::Tensor disc;
  torch::Tensor sup;  // mean L1 between reconstruction and target
};
AppearanceLosses loss_appearance(const torch::Tensor& real_logits, const torch::Tensor& fake_logits,
                                 const torch::Tensor& reconstruction, const torch::Tensor& target);

/// Constant until decay_start, then linear to 0 at decay_end.
double linear_decay(double base, double epoch, double decay_start, double decay_end);

struct TranslationSettings {
  int image_size = 128;
  int base_width = 64;
  uint64_t seed = 0;
  int batch_size = 4;
  int epochs = 200;
  /// Stops early after this many optimizer steps when positive.
  int64_t max_steps = 0;

  double lr_stn = 1e-4;
  double lr_deform = 1e-4;
  double lr_shape_disc = 1e-5;
  double lr_appearance = 2e-4;
  double lr_image_disc = 2e-4;
  double decay_start = 100;
  double decay_end = 200;
  double beta1 = 0.5;
  double beta2 = 0.999;

  RegularizerWeights reg;
  double w_shape_adv = 1.0;
  double w_image_adv = 1.0;
  double w_sup = 1.0;
  /// Keeps the appearance loss from reaching the shape generator when set.
  bool detach_shape = false;
  double tau = warp::kDefaultThreshold;

  int pretrain_steps = 500;
  double pretrain_lr = 1e-4;
  double pretrain_tolerance = 1e-3;

  int log_every = 1;
  int checkpoint_every = 500;
  int sample_every = 500;

  void validate() const;
};

/// The five translation networks.
struct TranslationModels {
  nets::SpatialTransformer stn{nullptr};
  nets::DeformGenerator deform{nullptr};
  nets::UNetGenerator appearance{nullptr};
  nets::PatchDiscriminator shape_disc{nullptr};
  nets::PatchDiscriminator image_disc{nullptr};
  nets::NetworkSpec stn_spec, deform_spec, appearance_spec, shape_disc_spec, image_disc_spec;

  static TranslationModels create(int image_size, int base_width, uint64_t seed);
  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
  void train(bool on = true);
};

/// Everything the shape generator produces for one batch.
struct ShapeOutput {
  warp::AffineParams theta;
  warp::GradientField grads;
  warp::DeformationField local;     // integrated field in the theta-transformed frame
  warp::DeformationField composed;  // output pixel -> source coordinate
  torch::Tensor soft_mask;          // bilinear sample of the source mask
  torch::Tensor mask;               // STE-binarized soft_mask
};

/// theta = STN(I), local field from G_D(theta (x) I), composed = theta (x) local.
ShapeOutput shape_forward(TranslationModels& m, const torch::Tensor& images, const torch::Tensor& masks,
                          double tau = warp::kDefaultThreshold);

/// Mean |phi - id| of the local fields G_D produces on `images`.
double identity_deviation(TranslationModels& m, const torch::Tensor& images);

struct PretrainResult {
  int steps = 0;
  double deviation = 0.0;  // on the held-out batch
  std::vector<double> losses;
};

/// Trains G_D on the regularizer alone. The STN is not touched. Throws
/// std::runtime_error when the held-out deviation misses `tolerance`.
PretrainResult pretrain_identity(TranslationModels& m, const torch::Tensor& train_images,
                                 const torch::Tensor& heldout_images, int steps, double lr,
                                 const RegularizerWeights& w, double tolerance);

struct LogRow {
  int64_t step = 0;
  double loss_ds = 0, loss_di = 0, loss_gs = 0, loss_gi = 0, reg = 0, sup = 0;
};

inline constexpr const char* kLogHeader = "step,loss_DS,loss_DI,loss_GS,loss_GI,reg,sup";

struct TrainResult {
  std::filesystem::path run_dir;
  int64_t steps = 0;
  std::vector<LogRow> log;  // rows written by this invocation
  PretrainResult pretrain;
};

/// Source items need masks; target items get extracted silhouettes when they
/// have none. Writes log.csv, checkpoints/ and samples/ under run_dir. With
/// resume, continues from the latest checkpoint in run_dir. Throws
/// NumericalError (after dumping the batch to run_dir/nan_dump) on a
/// non-finite loss.
TrainResult train_translation(const TranslationSettings& settings, const data::DomainSet& source,
                              const data::DomainSet& target, const std::filesystem::path& run_dir,
                              bool resume = false);

/// Deterministic epoch order of `count` items.
std::vector<int> epoch_order(uint64_t seed, int64_t epoch, int count);

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);
void save_models(const std::filesystem::path& dir, const TranslationModels& m, uint64_t seed, int64_t step);
/// Rebuilds the models from the specs stored in dir and loads their values.
TranslationModels load_models(const std::filesystem::path& dir);

struct Translation {
  torch::Tensor images;  // G_I(masks), [N, 1, H, W]
  torch::Tensor masks;   // binarized warped source masks
  std::vector<KeypointSet> keypoints;
  warp::DeformationField fields;  // composed, one per item
};

Translation translate_batch(TranslationModels& m, const torch::Tensor& images, const torch::Tensor& masks,
                            const std::vector<KeypointSet>& keypoints, double tau = warp::kDefaultThreshold);

/// Forward map theta^-1 as scale, rotation (degrees) and translation,
/// averaged over the batch.
struct SimilarityEstimate {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double tx = 0.0, ty = 0.0;
};
SimilarityEstimate estimate_similarity(const warp::AffineParams& theta);

}  // namespace deftrans::train
