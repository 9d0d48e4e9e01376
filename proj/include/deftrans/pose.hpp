#pragma once

// Heatmap supervision, permutation-invariant training of the stacked
// hourglass, and keypoint prediction by heatmap argmax.

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <vector>

#include "deftrans/networks.hpp"
#include "deftrans/skeleton.hpp"
#include "deftrans/warp.hpp"

namespace deftrans::pose {

inline constexpr int kHeatmapScale = 4;
inline constexpr double kSigma2 = 0.5;
inline constexpr double kLowConfidence = 0.05;

/// Channel j is exp(-|p - k_j / scale|^2 / (2 sigma2)) on the heatmap grid
/// (peak 1); invisible joints give all-zero channels. maps is [1, J, h, w].
warp::HeatmapStack render_heatmaps(const KeypointSet& keypoints, int image_size, int scale = kHeatmapScale,
                                   double sigma2 = kSigma2);

/// Per sample, the minimum over the skeleton's symmetry group (identity only
/// when use_group is false) of the mean squared error between a stack output
/// and the permuted target, summed over stacks and averaged over the batch.
/// Permuting the target means target'[j] = target[perm[j]].
torch::Tensor pi_loss(const std::vector<torch::Tensor>& stack_outputs, const torch::Tensor& target,
                      const SkeletonDef& skeleton, bool use_group = true);

/// Rotation about the image center by `radians` (content turns with the
/// matrix [cos -sin; sin cos] in x-right/y-down pixels), zero padded.
/// Keypoints leaving the frame become invisible.
torch::Tensor rotate_images(const torch::Tensor& images, double radians);
KeypointSet rotate_keypoints(const KeypointSet& keypoints, int image_size, double radians);

struct PoseSettings {
  Animal animal = Animal::worm;
  int image_size = 128;
  int base_width = 64;
  uint64_t seed = 0;
  int batch_size = 4;
  int epochs = 200;
  double lr = 2e-3;
  double decay_start = 100;
  double decay_end = 200;
  double rotation_deg = 30.0;
  bool augment = true;
  /// Defaults to the skeleton's pi_training flag when unset.
  std::optional<bool> pi_training;

  void validate() const;
};

struct PoseSample {
  Image image;
  KeypointSet keypoints;
};

struct PoseModel {
  nets::StackedHourglass net{nullptr};
  nets::NetworkSpec spec;
};

PoseModel create_pose_model(const PoseSettings& settings);

struct PoseLogRow {
  int64_t step = 0;
  int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct PoseTrainResult {
  int64_t steps = 0;
  std::vector<PoseLogRow> log;
};

/// Adam on pi_loss with intermediate supervision. When log_path is given the
/// rows are written there as CSV (step,epoch,lr,loss). Throws NumericalError on
/// a non-finite loss after writing the batch to dump_dir (when given).
PoseTrainResult train_pose(PoseModel& model, const std::vector<PoseSample>& samples, const PoseSettings& settings,
                           const std::filesystem::path& log_path = {}, const std::filesystem::path& dump_dir = {});

struct Prediction {
  KeypointSet keypoints;
  std::vector<double> peaks;
  std::vector<bool> low_confidence;
};

/// Argmax of each channel (first maximum in row-major order), scaled by the
/// heatmap factor. Channels whose peak is below kLowConfidence are flagged.
Prediction decode_heatmaps(const torch::Tensor& maps, const SkeletonDef& skeleton, int scale = kHeatmapScale);

/// Runs the final stack in evaluation mode.
std::vector<Prediction> predict(PoseModel& model, const std::vector<Image>& images, const SkeletonDef& skeleton,
                                int batch_size = 16);

void save_pose_model(const std::filesystem::path& path, const PoseModel& model, uint64_t seed, int64_t step);
PoseModel load_pose_model(const std::filesystem::path& path);

}  // namespace deftrans::pose
