#pragma once

// Keypoint accuracy metrics and image similarity.
//
// Errors are Euclidean distances in image pixels. Joints whose ground truth is
// invisible are excluded from every metric. A joint counts as correct for PCK
// when its error is strictly below the threshold.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deftrans/raster.hpp"

namespace deftrans::metrics {

/// permuted_pred[j] = pred[perm[j]]. Every symmetry group contains the identity.
using Permutation = std::vector<int>;

double pck(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
           double threshold_px);
double rmse(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt);
std::vector<double> per_joint_rmse(const std::vector<KeypointSet>& pred,
                                   const std::vector<KeypointSet>& gt);
/// Mean PCK over thresholds t_min, t_min + step, ..., t_max.
double auc(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt, double t_min,
           double t_max, double step = 1.0);

/// Applies the permutation to a prediction's joints (names follow the gt slot).
KeypointSet permute(const KeypointSet& pred, const Permutation& perm);

enum class BaseMetric { pck, rmse };
/// Per sample, the best value over the group: max for PCK, min (squared
/// error) for RMSE; then aggregated over the set.
double pi_metric(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
                 const std::vector<Permutation>& group, BaseMetric base, double threshold_px = 0.0);
/// Reorders every prediction by its squared-error-optimal group element.
std::vector<KeypointSet> pi_assign(const std::vector<KeypointSet>& pred,
                                   const std::vector<KeypointSet>& gt,
                                   const std::vector<Permutation>& group);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over all window positions fully inside the image (Gaussian window).
double ssim(const Image& a, const Image& b, const SsimParams& params = {});
/// One SSIM per generated image against a pseudo-randomly drawn reference, averaged.
double mean_ssim_against_references(const std::vector<Image>& generated,
                                    const std::vector<Image>& references, uint64_t seed,
                                    const SsimParams& params = {});

struct EvalReport {
  std::size_t samples = 0;
  std::size_t joints = 0;
  bool permutation_invariant = false;
  std::vector<double> thresholds;
  std::vector<double> pck;     // per threshold
  std::vector<double> pi_pck;  // per threshold (equals pck without a group)
  double rmse = 0.0;
  double pi_rmse = 0.0;
  std::vector<double> per_joint_rmse;
  double auc = 0.0;
  double pi_auc = 0.0;
  double auc_min = 2.0;
  double auc_max = 45.0;
  SsimParams ssim_params;
};

EvalReport evaluate(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
                    const std::vector<Permutation>& group, double t_min = 2.0, double t_max = 45.0);

/// CSV with header "threshold,pck,pi_pck", one row per threshold.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report_csv(const std::filesystem::path& path);

}  // namespace deftrans::metrics
