#pragma once

// Differentiable geometric machinery: affine transforms, foldover-free
// deformation fields obtained by integrating positive spatial gradients,
// bilinear sampling, straight-through thresholding, and consistent warping of
// images, masks, heatmaps and keypoints.
//
// Coordinates are normalized to [-1, 1] with pixel centers at -1 + 2i/(N-1).
// A field stores, for every output pixel, the normalized source coordinate it
// reads from (x before y), so warping is always a gather.

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>

#include "deftrans/raster.hpp"

namespace deftrans::warp {

/// Upper bound of a clamped spatial gradient (normalized units per pixel).
inline constexpr double kMaxSpacing = 0.1;
/// Positivity floor applied by clamp_gradients.
inline constexpr double kMinSpacing = 1e-6;
/// Binarization threshold; values equal to it map to 0.
inline constexpr double kDefaultThreshold = 0.5;

double normalized_coord(double pixel, int extent);
double pixel_coord(double normalized, int extent);
/// Distance between neighbouring pixel centers in normalized units.
double identity_spacing(int extent);

/// Batched 2x3 affine maps, output coordinates -> source coordinates.
struct AffineParams {
  torch::Tensor matrix;  // [N, 2, 3]

  static AffineParams identity(int64_t batch = 1, torch::ScalarType dtype = torch::kFloat64);
  /// Row-major [a b tx; c d ty] replicated over the batch.
  static AffineParams from_values(const std::array<double, 6>& values, int64_t batch = 1,
                                  torch::ScalarType dtype = torch::kFloat64);
  /// [s cos r, -s sin r, tx; s sin r, s cos r, ty].
  static AffineParams similarity(double scale, double rotation, double tx, double ty,
                                 int64_t batch = 1, torch::ScalarType dtype = torch::kFloat64);

  int64_t batch() const { return matrix.size(0); }
  torch::Tensor determinant() const;  // [N]
  /// Throws std::invalid_argument unless every 2x2 block has positive determinant.
  void validate() const;
  AffineParams inverse() const;
};

/// Strictly positive spacings of a monotone field, [N, H, W] each.
struct GradientField {
  torch::Tensor gx;
  torch::Tensor gy;

  void validate() const;
};

enum class Provenance : std::uint32_t { identity = 0, integrated = 1, composed = 2 };

struct DeformationField {
  torch::Tensor phi;  // [N, H, W, 2]
  AffineParams theta;
  Provenance provenance = Provenance::identity;

  static DeformationField identity(int64_t batch, int64_t height, int64_t width,
                                   torch::ScalarType dtype = torch::kFloat64);

  int64_t batch() const { return phi.size(0); }
  int64_t height() const { return phi.size(1); }
  int64_t width() const { return phi.size(2); }
  /// Single-sample view, keeping the batch dimension.
  DeformationField slice(int64_t index) const;
  /// True when every horizontal (x) and vertical (y) neighbour difference is positive.
  bool is_monotone() const;
};

/// J-channel Gaussian maps at 1/scale of the image resolution.
struct HeatmapStack {
  torch::Tensor maps;  // [N, J, h, w]
  double sigma2 = 0.5;
  int scale = 4;
};

/// Normalized pixel-center coordinates, [N, H, W, 2].
torch::Tensor identity_grid(int64_t batch, int64_t height, int64_t width,
                            const torch::TensorOptions& options = torch::kFloat64);

/// HardTanh into [kMinSpacing, kMaxSpacing]. raw is [N, 2, H, W] with the x
/// spacing in channel 0 and the y spacing in channel 1.
GradientField clamp_gradients(const torch::Tensor& raw);

/// Cumulative sums of gx along rows and gy along columns, then shifted so the
/// mean of each coordinate equals `anchor` (the identity-grid mean by default).
DeformationField integrate_gradients(const GradientField& grads,
                                     std::array<double, 2> anchor = {0.0, 0.0});

/// Applies theta pointwise to coordinates [N, ..., 2].
torch::Tensor apply_affine(const AffineParams& theta, const torch::Tensor& coords);
/// Composes theta after the field's coordinates: phi' = theta * [phi; 1].
DeformationField apply_affine(const AffineParams& theta, const DeformationField& field);
/// Sampling grid of a pure affine at the given output size.
DeformationField affine_field(const AffineParams& theta, int64_t height, int64_t width);

/// Zero-padded bilinear gather of src [N, C, Hs, Ws] at phi [N, H, W, 2].
/// Differentiable in both arguments.
torch::Tensor bilinear_sample(const torch::Tensor& src, const torch::Tensor& phi);
torch::Tensor bilinear_sample(const torch::Tensor& src, const DeformationField& field);

/// Forward: 1 where soft > tau, else 0. Backward: identity.
torch::Tensor threshold_ste(const torch::Tensor& soft, double tau = kDefaultThreshold);

/// Re-expresses an image-resolution field at 1/factor resolution by
/// subsampling every factor-th pixel and rescaling the pixel units.
DeformationField downscale_field(const DeformationField& field, int factor);

/// Warps every heatmap channel with the field used for the image
/// (given at image resolution).
HeatmapStack warp_heatmaps(const HeatmapStack& heatmaps, const DeformationField& image_field);

/// Maps source-image keypoints into the warped output by inverse lookup:
/// each keypoint moves to the output pixel whose phi entry is nearest to its
/// source coordinate. Keypoints outside the source raster, or not covered by
/// the field, are kept but marked invisible.
KeypointSet warp_keypoints(const KeypointSet& keypoints, const DeformationField& field,
                           int64_t batch_index = 0);

/// Binary field file: "DEFFIELD", u32 version, u32 H, u32 W, u32 provenance,
/// theta (6 x f64 row-major), phi (H*W*2 x f64 row-major, x before y).
void save_field(const std::filesystem::path& path, const DeformationField& field,
                int64_t batch_index = 0);
DeformationField load_field(const std::filesystem::path& path);

}  // namespace deftrans::warp
