#include "deftrans/networks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "deftrans/raster.hpp"

namespace deftrans::nets {

namespace nn = torch::nn;
using torch::indexing::Slice;

std::string to_string(NetworkKind kind) {
  switch (kind) {
    case NetworkKind::stn: return "stn";
    case NetworkKind::deform_gen: return "deform_gen";
    case NetworkKind::unet_gen: return "unet_gen";
    case NetworkKind::patch_disc_shape: return "patch_disc_shape";
    case NetworkKind::patch_disc_image: return "patch_disc_image";
    case NetworkKind::hourglass: return "hourglass";
  }
  throw std::invalid_argument("unknown network kind");
}

NetworkKind network_kind_from_string(const std::string& name) {
  for (auto k : {NetworkKind::stn, NetworkKind::deform_gen, NetworkKind::unet_gen,
                 NetworkKind::patch_disc_shape, NetworkKind::patch_disc_image,
                 NetworkKind::hourglass}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown network kind '" + name + "'");
}

int receptive_field(const std::vector<LayerGeometry>& layers) {
  double rf = 1.0, jump = 1.0;
  for (const auto& l : layers) {
    if (l.upsample) {
      const int taps = (l.kernel + l.stride - 1) / l.stride;
      rf += (taps - 1) * jump;
      jump /= l.stride;
    } else {
      rf += (l.kernel - 1) * l.dilation * jump;
      jump *= l.stride;
    }
  }
  return static_cast<int>(std::lround(rf));
}

int output_extent(const std::vector<LayerGeometry>& layers, int input_extent) {
  int n = input_extent;
  for (const auto& l : layers) {
    if (l.upsample && l.kernel == 1) {
      n *= l.stride;
    } else if (l.upsample) {
      n = (n - 1) * l.stride - 2 * l.padding + l.dilation * (l.kernel - 1) + 1;
    } else {
      n = (n + 2 * l.padding - l.dilation * (l.kernel - 1) - 1) / l.stride + 1;
    }
  }
  return n;
}

NetworkSpec NetworkSpec::defaults(NetworkKind kind, int image_size, int base_width) {
  NetworkSpec s;
  s.kind = kind;
  s.image_size = image_size;
  s.base_width = base_width;
  switch (kind) {
    case NetworkKind::deform_gen: s.out_channels = 2; break;
    case NetworkKind::hourglass: s.out_channels = 30; break;
    default: break;
  }
  return s;
}

int NetworkSpec::resolved_depth() const {
  if (depth > 0) return depth;
  const int log2_size = static_cast<int>(std::lround(std::log2(image_size)));
  switch (kind) {
    case NetworkKind::unet_gen: return log2_size;  // down to 1x1: 7 levels at 128 px
    case NetworkKind::hourglass: return std::max(1, log2_size - 4);  // innermost 2x2 at /4
    default: return 0;
  }
}

namespace {

void append_bottleneck(std::vector<LayerGeometry>& out) {
  out.push_back({1, 1, 1, 0});
  out.push_back({3, 1, 1, 1});
  out.push_back({1, 1, 1, 0});
}

void append_hourglass(std::vector<LayerGeometry>& out, int depth) {
  out.push_back({2, 2, 1, 0});  // max-pool
  append_bottleneck(out);       // low1
  if (depth > 1) {
    append_hourglass(out, depth - 1);
  } else {
    append_bottleneck(out);  // low2
  }
  append_bottleneck(out);  // low3
  out.push_back({1, 2, 1, 0, true});
}

}  // namespace

std::vector<LayerGeometry> NetworkSpec::layer_schedule() const {
  std::vector<LayerGeometry> s;
  switch (kind) {
    case NetworkKind::stn:
      break;
    case NetworkKind::deform_gen:
      s.push_back({1, 1, 1, 0});
      s.push_back({4, 2, 1, 1});
      s.push_back({4, 2, 1, 1});
      for (int i = 0; i < 6; ++i) s.push_back({3, 1, 1, 1});
      s.push_back({1, 2, 1, 0, true});
      s.push_back({3, 1, 1, 1});
      s.push_back({1, 2, 1, 0, true});
      s.push_back({3, 1, 1, 1});
      s.push_back({1, 1, 1, 0});
      break;
    case NetworkKind::unet_gen: {
      const int levels = resolved_depth();
      for (int i = 0; i < levels; ++i) s.push_back({4, 2, 1, 1});
      for (int i = 0; i < levels; ++i) s.push_back({4, 2, 1, 1, true});
      break;
    }
    case NetworkKind::patch_disc_shape:
      s.push_back({4, 2, 1, 1});
      s.push_back({4, 2, 2, 3});
      s.push_back({4, 2, 2, 3});
      s.push_back({4, 1, 1, 1});
      s.push_back({4, 1, 1, 1});
      break;
    case NetworkKind::patch_disc_image:
      s.push_back({4, 2, 1, 1});
      s.push_back({4, 1, 1, 1});
      s.push_back({4, 1, 1, 1});
      s.push_back({4, 1, 1, 1});
      break;
    case NetworkKind::hourglass: {
      s.push_back({7, 2, 1, 3});
      append_bottleneck(s);
      s.push_back({2, 2, 1, 0});
      append_bottleneck(s);
      append_bottleneck(s);
      for (int k = 0; k < num_stacks; ++k) {
        append_hourglass(s, resolved_depth());
        append_bottleneck(s);
        s.push_back({1, 1, 1, 0});
        s.push_back({1, 1, 1, 0});
      }
      break;
    }
  }
  return s;
}

int NetworkSpec::receptive_field_px() const {
  if (kind == NetworkKind::stn) return image_size;
  return receptive_field(layer_schedule());
}

void check_input(const torch::Tensor& x, int channels, const std::string& network) {
  if (x.dim() != 4 || x.size(1) != channels)
    throw std::invalid_argument(network + ": expected input [N, " + std::to_string(channels) +
                                ", S, S]");
  if (x.size(2) != x.size(3) ||
      std::find(std::begin(kSupportedSizes), std::end(kSupportedSizes), x.size(2)) ==
          std::end(kSupportedSizes))
    throw std::invalid_argument(network + ": unsupported input size " +
                                std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                                " (supported: 64, 128)");
}

void check_finite(const torch::Tensor& t, const std::string& network) {
  if (!torch::isfinite(t).all().item<bool>())
    throw NumericalError(network + ": non-finite activation in forward pass");
}

namespace {

int width_at(const NetworkSpec& spec, int level) {
  return std::min(spec.max_width, spec.base_width << level);
}

nn::Conv2dOptions conv(int in, int out, int k, int stride = 1, int pad = 0, int dilation = 1) {
  return nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).dilation(dilation);
}

void maybe_norm(nn::Sequential& seq, int channels, bool enabled) {
  if (enabled) seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true)));
}

nn::Upsample nearest2x() {
  return nn::Upsample(nn::UpsampleOptions()
                          .scale_factor(std::vector<double>{2.0, 2.0})
                          .mode(torch::kNearest));
}

}  // namespace

// --- STN ----------------------------------------------------------------------

SpatialTransformerImpl::SpatialTransformerImpl(const NetworkSpec& spec) {
  features_ = nn::Sequential();
  int in = spec.in_channels;
  for (int l = 0; l < 5; ++l) {
    const int out = width_at(spec, l / 2);
    features_->push_back(nn::Conv2d(conv(in, out, 3, 1, 1)));
    features_->push_back(nn::SELU());
    features_->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
    in = out;
  }
  features_->push_back(nn::AdaptiveMaxPool2d(nn::AdaptiveMaxPool2dOptions(2)));
  register_module("features", features_);
  hidden_ = register_module("hidden", nn::Linear(in * 4, 32));
  head_ = register_module("head", nn::Linear(32, 4));
  torch::NoGradGuard guard;
  head_->weight.zero_();
  head_->bias.zero_();
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& image) {
  auto h = features_->forward(image).flatten(1);
  h = torch::selu(hidden_->forward(h));
  return head_->forward(h);
}

warp::AffineParams SpatialTransformerImpl::to_affine(const torch::Tensor& params) {
  // scale in (1/2, 2) keeps the determinant representable for any raw value
  auto scale = torch::exp(std::log(2.0) * torch::tanh(params.index({Slice(), 0})));
  auto angle = params.index({Slice(), 1});
  auto c = scale * torch::cos(angle), s = scale * torch::sin(angle);
  auto row0 = torch::stack({c, -s, params.index({Slice(), 2})}, 1);
  auto row1 = torch::stack({s, c, params.index({Slice(), 3})}, 1);
  return warp::AffineParams{torch::stack({row0, row1}, 1)};
}

// --- deformation generator ---------------------------------------------------------

ResidualBlockImpl::ResidualBlockImpl(int channels, bool instance_norm) {
  body_ = nn::Sequential();
  body_->push_back(nn::Conv2d(conv(channels, channels, 3, 1, 1)));
  maybe_norm(body_, channels, instance_norm);
  body_->push_back(nn::ReLU());
  body_->push_back(nn::Conv2d(conv(channels, channels, 3, 1, 1)));
  maybe_norm(body_, channels, instance_norm);
  register_module("body", body_);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

DeformGeneratorImpl::DeformGeneratorImpl(const NetworkSpec& spec) {
  const int c0 = width_at(spec, 0), c1 = width_at(spec, 1), c2 = width_at(spec, 2);
  const bool in = spec.instance_norm;
  body_ = nn::Sequential();
  body_->push_back(nn::Conv2d(conv(spec.in_channels, c0, 1)));
  maybe_norm(body_, c0, in);
  body_->push_back(nn::ReLU());
  body_->push_back(nn::Conv2d(conv(c0, c1, 4, 2, 1)));
  maybe_norm(body_, c1, in);
  body_->push_back(nn::ReLU());
  body_->push_back(nn::Conv2d(conv(c1, c2, 4, 2, 1)));
  maybe_norm(body_, c2, in);
  body_->push_back(nn::ReLU());
  for (int i = 0; i < 3; ++i) body_->push_back(ResidualBlock(c2, in));
  body_->push_back(nearest2x());
  body_->push_back(nn::Conv2d(conv(c2, c1, 3, 1, 1)));
  maybe_norm(body_, c1, in);
  body_->push_back(nn::ReLU());
  body_->push_back(nearest2x());
  body_->push_back(nn::Conv2d(conv(c1, c0, 3, 1, 1)));
  maybe_norm(body_, c0, in);
  body_->push_back(nn::ReLU());
  register_module("body", body_);
  head_ = register_module("head", nn::Conv2d(conv(c0, 2, 1)));

  // Start close to the identity spacing so the clamp is not saturated.
  torch::NoGradGuard guard;
  head_->weight.normal_(0.0, 1e-4);
  head_->bias[0] = warp::identity_spacing(spec.image_size);
  head_->bias[1] = warp::identity_spacing(spec.image_size);
}

torch::Tensor DeformGeneratorImpl::forward(const torch::Tensor& image) {
  return head_->forward(body_->forward(image));
}

// --- U-Net ---------------------------------------------------------------------

UNetGeneratorImpl::UNetGeneratorImpl(const NetworkSpec& spec) : levels_(spec.resolved_depth()) {
  if (levels_ < 2) throw std::invalid_argument("U-Net needs at least two levels");
  std::vector<int> widths;
  for (int l = 0; l < levels_; ++l) widths.push_back(width_at(spec, l));

  for (int l = 0; l < levels_; ++l) {
    nn::Sequential block;
    const int in = l == 0 ? spec.in_channels : widths[l - 1];
    if (l > 0) block->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    block->push_back(nn::Conv2d(conv(in, widths[l], 4, 2, 1)));
    // No normalization at the outermost (raw input) and innermost (1x1) levels.
    if (l > 0 && l < levels_ - 1) maybe_norm(block, widths[l], spec.instance_norm);
    down_.push_back(register_module("down" + std::to_string(l), block));
  }
  for (int l = levels_ - 1; l >= 0; --l) {
    nn::Sequential block;
    const int in = l == levels_ - 1 ? widths[l] : 2 * widths[l];
    const int out = l == 0 ? spec.out_channels : widths[l - 1];
    block->push_back(nn::ReLU());
    block->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)));
    if (l > 0) maybe_norm(block, out, spec.instance_norm);
    up_.push_back(register_module("up" + std::to_string(l), block));
  }
}

torch::Tensor UNetGeneratorImpl::forward(const torch::Tensor& mask) {
  std::vector<torch::Tensor> skips;
  auto h = mask;
  for (auto& d : down_) {
    h = d->forward(h);
    skips.push_back(h);
  }
  // up_[0] is the innermost level.
  for (std::size_t k = 0; k < up_.size(); ++k) {
    const auto level = levels_ - 1 - static_cast<int>(k);
    if (k > 0) h = torch::cat({h, skips[static_cast<std::size_t>(level)]}, 1);
    h = up_[k]->forward(h);
  }
  return torch::sigmoid(h);
}

// --- patch discriminators ----------------------------------------------------------

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const NetworkSpec& spec) : spec_(spec) {
  auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
  const auto schedule = spec.layer_schedule();
  body_ = nn::Sequential();
  int in = spec.in_channels;
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const auto& g = schedule[i];
    const bool last = i + 1 == schedule.size();
    const int out = last ? 1 : width_at(spec, static_cast<int>(i));
    body_->push_back(nn::Conv2d(conv(in, out, g.kernel, g.stride, g.padding, g.dilation)));
    if (!last) {
      const bool norm = spec.kind == NetworkKind::patch_disc_image ? i == 1 : i > 0;
      if (norm) maybe_norm(body_, out, spec.instance_norm);
      body_->push_back(lrelu());
    }
    in = out;
  }
  register_module("body", body_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

// --- stacked hourglass ----------------------------------------------------------

BottleneckImpl::BottleneckImpl(int in_channels, int out_channels) {
  const int mid = std::max(1, out_channels / 2);
  body_ = nn::Sequential(
      nn::BatchNorm2d(in_channels), nn::ReLU(), nn::Conv2d(conv(in_channels, mid, 1)),
      nn::BatchNorm2d(mid), nn::ReLU(), nn::Conv2d(conv(mid, mid, 3, 1, 1)),
      nn::BatchNorm2d(mid), nn::ReLU(), nn::Conv2d(conv(mid, out_channels, 1)));
  register_module("body", body_);
  if (in_channels != out_channels)
    skip_ = register_module("skip", nn::Conv2d(conv(in_channels, out_channels, 1)));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto residual = skip_ ? skip_->forward(x) : x;
  return residual + body_->forward(x);
}

HourglassImpl::HourglassImpl(int depth, int channels) {
  up_ = register_module("up", Bottleneck(channels, channels));
  low1_ = register_module("low1", Bottleneck(channels, channels));
  if (depth > 1) {
    low2_ = register_module("low2", std::make_shared<HourglassImpl>(depth - 1, channels));
  } else {
    low2_leaf_ = register_module("low2", Bottleneck(channels, channels));
  }
  low3_ = register_module("low3", Bottleneck(channels, channels));
}

torch::Tensor HourglassImpl::forward(const torch::Tensor& x) {
  auto up = up_->forward(x);
  auto low = low1_->forward(torch::max_pool2d(x, 2));
  low = low2_ ? low2_->forward(low) : low2_leaf_->forward(low);
  low = low3_->forward(low);
  return up + torch::upsample_nearest2d(low, {}, std::vector<double>{2.0, 2.0});
}

StackedHourglassImpl::StackedHourglassImpl(const NetworkSpec& spec) : spec_(spec) {
  const int f = spec.base_width;
  const int half = std::max(1, f / 2);
  front_ = nn::Sequential(nn::Conv2d(conv(spec.in_channels, half, 7, 2, 3)), nn::BatchNorm2d(half),
                          nn::ReLU(), Bottleneck(half, f), nn::MaxPool2d(nn::MaxPool2dOptions(2)),
                          Bottleneck(f, f), Bottleneck(f, f));
  register_module("front", front_);
  for (int k = 0; k < spec.num_stacks; ++k) {
    const auto tag = std::to_string(k);
    hourglasses_.push_back(register_module("hg" + tag, Hourglass(spec.resolved_depth(), f)));
    features_.push_back(register_module(
        "features" + tag, nn::Sequential(Bottleneck(f, f), nn::Conv2d(conv(f, f, 1)),
                                         nn::BatchNorm2d(f), nn::ReLU())));
    heads_.push_back(register_module("head" + tag, nn::Conv2d(conv(f, spec.out_channels, 1))));
    if (k + 1 < spec.num_stacks) {
      merge_features_.push_back(register_module("merge_features" + tag, nn::Conv2d(conv(f, f, 1))));
      merge_heads_.push_back(
          register_module("merge_heads" + tag, nn::Conv2d(conv(spec.out_channels, f, 1))));
    }
  }
}

std::vector<torch::Tensor> StackedHourglassImpl::forward(const torch::Tensor& image) {
  std::vector<torch::Tensor> outputs;
  auto x = front_->forward(image);
  for (std::size_t k = 0; k < hourglasses_.size(); ++k) {
    auto feat = features_[k]->forward(hourglasses_[k]->forward(x));
    auto heat = heads_[k]->forward(feat);
    outputs.push_back(heat);
    if (k + 1 < hourglasses_.size())
      x = x + merge_features_[k]->forward(feat) + merge_heads_[k]->forward(heat);
  }
  return outputs;
}

// --- factory and typed forwards --------------------------------------------------

std::shared_ptr<torch::nn::Module> make_network(const NetworkSpec& spec, uint64_t seed) {
  torch::manual_seed(seed);
  switch (spec.kind) {
    case NetworkKind::stn: return std::make_shared<SpatialTransformerImpl>(spec);
    case NetworkKind::deform_gen: return std::make_shared<DeformGeneratorImpl>(spec);
    case NetworkKind::unet_gen: return std::make_shared<UNetGeneratorImpl>(spec);
    case NetworkKind::patch_disc_shape:
    case NetworkKind::patch_disc_image: return std::make_shared<PatchDiscriminatorImpl>(spec);
    case NetworkKind::hourglass: return std::make_shared<StackedHourglassImpl>(spec);
  }
  throw std::invalid_argument("unknown network kind");
}

warp::AffineParams stn_forward(SpatialTransformer& net, const torch::Tensor& image) {
  check_input(image, 1, "stn");
  auto raw = net->forward(image);
  check_finite(raw, "stn");
  return SpatialTransformerImpl::to_affine(raw);
}

torch::Tensor deform_gen_forward(DeformGenerator& net, const torch::Tensor& image) {
  check_input(image, 1, "deform_gen");
  auto out = net->forward(image);
  check_finite(out, "deform_gen");
  return out;
}

torch::Tensor unet_forward(UNetGenerator& net, const torch::Tensor& mask) {
  check_input(mask, 1, "unet_gen");
  auto out = net->forward(mask);
  check_finite(out, "unet_gen");
  return out;
}

torch::Tensor disc_shape_forward(PatchDiscriminator& net, const torch::Tensor& mask) {
  check_input(mask, 1, "patch_disc_shape");
  auto out = net->forward(mask);
  check_finite(out, "patch_disc_shape");
  return out;
}

torch::Tensor disc_image_forward(PatchDiscriminator& net, const torch::Tensor& image) {
  check_input(image, 1, "patch_disc_image");
  auto out = net->forward(image);
  check_finite(out, "patch_disc_image");
  return out;
}

std::vector<warp::HeatmapStack> hourglass_forward(StackedHourglass& net, const torch::Tensor& image) {
  check_input(image, 1, "hourglass");
  std::vector<warp::HeatmapStack> stacks;
  for (auto& maps : net->forward(image)) {
    check_finite(maps, "hourglass");
    stacks.push_back({maps, 0.5, 4});
  }
  return stacks;
}

}  // namespace deftrans::nets
