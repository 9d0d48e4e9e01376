#pragma once

// Learnable function approximators of the translation and pose pipelines.
// Every network is described by a NetworkSpec; modules are plain libtorch
// modules so they can be trained with the standard optimizers.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deftrans/warp.hpp"

namespace deftrans::nets {

enum class NetworkKind { stn, deform_gen, unet_gen, patch_disc_shape, patch_disc_image, hourglass };

std::string to_string(NetworkKind kind);
NetworkKind network_kind_from_string(const std::string& name);

/// Geometry of one spatial layer for receptive-field bookkeeping.
/// An `upsample` entry is a nearest-neighbour x2 resize (no kernel).
struct LayerGeometry {
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  int padding = 0;
  bool upsample = false;
};

/// Receptive field of a chain of layers: 1 + sum (k-1) d * jump, where the
/// jump multiplies by each stride and halves at each upsampling.
int receptive_field(const std::vector<LayerGeometry>& layers);
/// Output extent after the chain (convolutions only; upsampling doubles).
int output_extent(const std::vector<LayerGeometry>& layers, int input_extent);

struct NetworkSpec {
  NetworkKind kind = NetworkKind::stn;
  int in_channels = 1;
  int out_channels = 1;
  int base_width = 64;
  int max_width = 512;
  int image_size = 128;
  /// U-Net levels or hourglass recursion depth; 0 picks the default for image_size.
  int depth = 0;
  int num_stacks = 2;
  bool instance_norm = true;

  static NetworkSpec defaults(NetworkKind kind, int image_size = 128, int base_width = 64);

  int resolved_depth() const;
  /// Spatial layer chain along the longest path; empty for the STN (global).
  std::vector<LayerGeometry> layer_schedule() const;
  int receptive_field_px() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline constexpr int kSupportedSizes[] = {64, 128};
/// Throws std::invalid_argument unless x is [N, C, S, S] with S in kSupportedSizes.
void check_input(const torch::Tensor& x, int channels, const std::string& network);
/// Throws NumericalError naming the network if t has a non-finite entry.
void check_finite(const torch::Tensor& t, const std::string& network);

// --- modules ---------------------------------------------------------------

/// Global similarity regressor: five conv/SELU/max-pool stages and a fully
/// connected stub producing (log scale, angle, tx, ty). The last layer is zero
/// so a fresh network returns exactly the identity.
class SpatialTransformerImpl : public torch::nn::Module {
 public:
  explicit SpatialTransformerImpl(const NetworkSpec& spec);
  /// Raw (s, angle, tx, ty), [N, 4]; the scale is 2^tanh(s).
  torch::Tensor forward(const torch::Tensor& image);
  static warp::AffineParams to_affine(const torch::Tensor& params);

 private:
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear hidden_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SpatialTransformer);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int channels, bool instance_norm);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Local deformation generator: raw spatial-gradient pre-activations
/// [N, 2, H, W]; receptive field 64 px.
class DeformGeneratorImpl : public torch::nn::Module {
 public:
  explicit DeformGeneratorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& image);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(DeformGenerator);

/// Silhouette-to-appearance U-Net with skip connections; sigmoid output.
class UNetGeneratorImpl : public torch::nn::Module {
 public:
  explicit UNetGeneratorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& mask);

 private:
  int levels_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> up_;
};
TORCH_MODULE(UNetGenerator);

/// Patch discriminator. The shape variant is the 70x70 patchGAN with
/// dilation 2 in its second and third convolutions; the image variant is the
/// small three-layer stack (plus logit projection).
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const NetworkSpec& spec);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  NetworkSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(Bottleneck);

class HourglassImpl : public torch::nn::Module {
 public:
  HourglassImpl(int depth, int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  Bottleneck up_{nullptr}, low1_{nullptr}, low3_{nullptr};
  Bottleneck low2_leaf_{nullptr};
  std::shared_ptr<HourglassImpl> low2_;
};
TORCH_MODULE(Hourglass);

/// Stacked hourglass: 4x downsampling front end, num_stacks hourglasses,
/// one heatmap output per stack (intermediate supervision).
class StackedHourglassImpl : public torch::nn::Module {
 public:
  explicit StackedHourglassImpl(const NetworkSpec& spec);
  std::vector<torch::Tensor> forward(const torch::Tensor& image);

 private:
  NetworkSpec spec_;
  torch::nn::Sequential front_{nullptr};
  std::vector<Hourglass> hourglasses_;
  std::vector<torch::nn::Sequential> features_;
  std::vector<torch::nn::Conv2d> heads_;
  std::vector<torch::nn::Conv2d> merge_features_;
  std::vector<torch::nn::Conv2d> merge_heads_;
};
TORCH_MODULE(StackedHourglass);

// --- named parameters and checkpoints ----------------------------------------

/// Deterministic initialization: seeds the global generator, then constructs.
std::shared_ptr<torch::nn::Module> make_network(const NetworkSpec& spec, uint64_t seed);

struct CheckpointMeta {
  NetworkSpec spec;
  uint64_t seed = 0;
  int64_t step = 0;
  int version = 1;
};

/// Named arrays (parameters then buffers) of a module, in registration order.
std::vector<std::pair<std::string, torch::Tensor>> named_arrays(const torch::nn::Module& module);
/// Hex digest over all named arrays; changes iff any value changes.
std::string parameter_hash(const torch::nn::Module& module);

/// Container: "DTCKPT01", u64 manifest length, JSON manifest (version, kind,
/// spec, seed, step, array table), then raw little-endian f32 payload.
void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
/// Loads values into an existing module; throws on kind or shape mismatch.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                               NetworkKind expected_kind);

// --- typed forwards -----------------------------------------------------------

warp::AffineParams stn_forward(SpatialTransformer& net, const torch::Tensor& image);
torch::Tensor deform_gen_forward(DeformGenerator& net, const torch::Tensor& image);
torch::Tensor unet_forward(UNetGenerator& net, const torch::Tensor& mask);
torch::Tensor disc_shape_forward(PatchDiscriminator& net, const torch::Tensor& mask);
torch::Tensor disc_image_forward(PatchDiscriminator& net, const torch::Tensor& image);
std::vector<warp::HeatmapStack> hourglass_forward(StackedHourglass& net, const torch::Tensor& image);

}  // namespace deftrans::nets
