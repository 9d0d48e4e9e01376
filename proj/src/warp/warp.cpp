#include "deftrans/warp.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace deftrans::warp {

namespace {

using torch::indexing::Slice;

// Source pixel coordinate of a normalized value. Coordinates within a few
// rounding errors of a pixel center land on it exactly.
template <typename scalar_t>
scalar_t to_source_px(scalar_t v, scalar_t half) {
  const scalar_t px = (v + 1) * half;
  const scalar_t r = std::nearbyint(px);
  const scalar_t tol = 16 * std::numeric_limits<scalar_t>::epsilon() * (half + 1);
  return std::abs(px - r) <= tol ? r : px;
}

template <typename scalar_t>
void sample_forward_kernel(const torch::Tensor& src, const torch::Tensor& phi, torch::Tensor& out) {
  const auto s = src.accessor<scalar_t, 4>();
  const auto p = phi.accessor<scalar_t, 4>();
  auto o = out.accessor<scalar_t, 4>();
  const int64_t n_batch = src.size(0), channels = src.size(1);
  const int64_t src_h = src.size(2), src_w = src.size(3);
  const int64_t out_h = phi.size(1), out_w = phi.size(2);
  const scalar_t half_w = static_cast<scalar_t>(src_w - 1) / 2;
  const scalar_t half_h = static_cast<scalar_t>(src_h - 1) / 2;

  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t i = 0; i < out_h; ++i) {
      for (int64_t j = 0; j < out_w; ++j) {
        const scalar_t px = to_source_px(p[n][i][j][0], half_w);
        const scalar_t py = to_source_px(p[n][i][j][1], half_h);
        const scalar_t fx0 = std::floor(px), fy0 = std::floor(py);
        const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
        const scalar_t ax = px - fx0, ay = py - fy0;
        const scalar_t w[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int64_t c = 0; c < channels; ++c) {
          scalar_t acc = 0;
          for (int k = 0; k < 4; ++k) {
            if (xs[k] >= 0 && xs[k] < src_w && ys[k] >= 0 && ys[k] < src_h)
              acc += w[k] * s[n][c][ys[k]][xs[k]];
          }
          o[n][c][i][j] = acc;
        }
      }
    }
  }
}

template <typename scalar_t>
void sample_backward_kernel(const torch::Tensor& src, const torch::Tensor& phi,
                            const torch::Tensor& grad_out, torch::Tensor& grad_src,
                            torch::Tensor& grad_phi) {
  const auto s = src.accessor<scalar_t, 4>();
  const auto p = phi.accessor<scalar_t, 4>();
  const auto g = grad_out.accessor<scalar_t, 4>();
  auto gs = grad_src.accessor<scalar_t, 4>();
  auto gp = grad_phi.accessor<scalar_t, 4>();
  const int64_t n_batch = src.size(0), channels = src.size(1);
  const int64_t src_h = src.size(2), src_w = src.size(3);
  const int64_t out_h = phi.size(1), out_w = phi.size(2);
  const scalar_t half_w = static_cast<scalar_t>(src_w - 1) / 2;
  const scalar_t half_h = static_cast<scalar_t>(src_h - 1) / 2;

  auto value = [&](int64_t n, int64_t c, int64_t y, int64_t x) -> scalar_t {
    return (x >= 0 && x < src_w && y >= 0 && y < src_h) ? s[n][c][y][x] : scalar_t(0);
  };

  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t i = 0; i < out_h; ++i) {
      for (int64_t j = 0; j < out_w; ++j) {
        const scalar_t px = to_source_px(p[n][i][j][0], half_w);
        const scalar_t py = to_source_px(p[n][i][j][1], half_h);
        const scalar_t fx0 = std::floor(px), fy0 = std::floor(py);
        const int64_t x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
        const scalar_t ax = px - fx0, ay = py - fy0;
        const scalar_t w[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
        scalar_t d_px = 0, d_py = 0;
        for (int64_t c = 0; c < channels; ++c) {
          const scalar_t go = g[n][c][i][j];
          if (go == 0) continue;
          for (int k = 0; k < 4; ++k) {
            if (xs[k] >= 0 && xs[k] < src_w && ys[k] >= 0 && ys[k] < src_h)
              gs[n][c][ys[k]][xs[k]] += w[k] * go;
          }
          const scalar_t v00 = value(n, c, y0, x0), v01 = value(n, c, y0, x0 + 1);
          const scalar_t v10 = value(n, c, y0 + 1, x0), v11 = value(n, c, y0 + 1, x0 + 1);
          d_px += go * ((1 - ay) * (v01 - v00) + ay * (v11 - v10));
          d_py += go * ((1 - ax) * (v10 - v00) + ax * (v11 - v01));
        }
        gp[n][i][j][0] = d_px * half_w;
        gp[n][i][j][1] = d_py * half_h;
      }
    }
  }
}

class BilinearSampleFunction : public torch::autograd::Function<BilinearSampleFunction> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& src,
                               const torch::Tensor& phi) {
    auto src_c = src.contiguous();
    auto phi_c = phi.contiguous();
    auto out = torch::empty({src.size(0), src.size(1), phi.size(1), phi.size(2)}, src.options());
    AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "bilinear_sample_forward", [&] {
      sample_forward_kernel<scalar_t>(src_c, phi_c, out);
    });
    ctx->save_for_backward({src_c, phi_c});
    return out;
  }

  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                               torch::autograd::tensor_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const auto& src = saved[0];
    const auto& phi = saved[1];
    auto grad_out = grad_outputs[0].contiguous();
    auto grad_src = torch::zeros_like(src);
    auto grad_phi = torch::zeros_like(phi);
    AT_DISPATCH_FLOATING_TYPES(src.scalar_type(), "bilinear_sample_backward", [&] {
      sample_backward_kernel<scalar_t>(src, phi, grad_out, grad_src, grad_phi);
    });
    return {grad_src, grad_phi};
  }
};

class ThresholdSteFunction : public torch::autograd::Function<ThresholdSteFunction> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& soft,
                               double tau) {
    return soft.gt(tau).to(soft.scalar_type());
  }

  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext*,
                                               torch::autograd::tensor_list grad_outputs) {
    return {grad_outputs[0], torch::Tensor()};
  }
};

void check_phi(const torch::Tensor& phi) {
  if (phi.dim() != 4 || phi.size(3) != 2)
    throw std::invalid_argument("deformation field must have shape [N, H, W, 2]");
}

}  // namespace

double normalized_coord(double pixel, int extent) {
  if (extent < 2) throw std::invalid_argument("extent must be at least 2");
  return -1.0 + 2.0 * pixel / (extent - 1);
}

double pixel_coord(double normalized, int extent) {
  if (extent < 2) throw std::invalid_argument("extent must be at least 2");
  return (normalized + 1.0) * (extent - 1) / 2.0;
}

double identity_spacing(int extent) {
  if (extent < 2) throw std::invalid_argument("extent must be at least 2");
  return 2.0 / (extent - 1);
}

AffineParams AffineParams::identity(int64_t batch, torch::ScalarType dtype) {
  return from_values({1, 0, 0, 0, 1, 0}, batch, dtype);
}

AffineParams AffineParams::from_values(const std::array<double, 6>& values, int64_t batch,
                                       torch::ScalarType dtype) {
  auto m = torch::tensor(std::vector<double>(values.begin(), values.end()), torch::kFloat64)
               .reshape({1, 2, 3})
               .to(dtype)
               .repeat({batch, 1, 1});
  return AffineParams{m};
}

AffineParams AffineParams::similarity(double scale, double rotation, double tx, double ty,
                                      int64_t batch, torch::ScalarType dtype) {
  const double c = scale * std::cos(rotation), s = scale * std::sin(rotation);
  return from_values({c, -s, tx, s, c, ty}, batch, dtype);
}

torch::Tensor AffineParams::determinant() const {
  using torch::indexing::Slice;
  return matrix.index({Slice(), 0, 0}) * matrix.index({Slice(), 1, 1}) -
         matrix.index({Slice(), 0, 1}) * matrix.index({Slice(), 1, 0});
}

void AffineParams::validate() const {
  if (!matrix.defined() || matrix.dim() != 3 || matrix.size(1) != 2 || matrix.size(2) != 3)
    throw std::invalid_argument("affine parameters must have shape [N, 2, 3]");
  if (!torch::isfinite(matrix).all().item<bool>())
    throw std::invalid_argument("affine parameters must be finite");
  if (!(determinant() > 0).all().item<bool>())
    throw std::invalid_argument("affine 2x2 block must have positive determinant");
}

AffineParams AffineParams::inverse() const {
  validate();
  auto a = matrix.index({Slice(), Slice(), Slice(0, 2)});
  auto t = matrix.index({Slice(), Slice(), Slice(2, 3)});
  auto a_inv = torch::linalg_inv(a);
  return AffineParams{torch::cat({a_inv, -torch::matmul(a_inv, t)}, 2)};
}

void GradientField::validate() const {
  if (!gx.defined() || !gy.defined() || gx.dim() != 3 || gx.sizes() != gy.sizes())
    throw std::invalid_argument("gradient field components must both be [N, H, W]");
  if (!(gx > 0).all().item<bool>() || !(gy > 0).all().item<bool>())
    throw std::invalid_argument("gradient field entries must be strictly positive");
  if ((gx > kMaxSpacing).any().item<bool>() || (gy > kMaxSpacing).any().item<bool>())
    throw std::invalid_argument("gradient field entries exceed the maximum spacing");
}

DeformationField DeformationField::identity(int64_t batch, int64_t height, int64_t width,
                                            torch::ScalarType dtype) {
  return {identity_grid(batch, height, width, dtype), AffineParams::identity(batch, dtype),
          Provenance::identity};
}

DeformationField DeformationField::slice(int64_t index) const {
  return {phi.index({Slice(index, index + 1)}),
          AffineParams{theta.matrix.index({Slice(index, index + 1)})}, provenance};
}

bool DeformationField::is_monotone() const {
  auto x = phi.index({"...", 0});
  auto y = phi.index({"...", 1});
  auto dx = x.index({Slice(), Slice(), Slice(1)}) - x.index({Slice(), Slice(), Slice(0, -1)});
  auto dy = y.index({Slice(), Slice(1)}) - y.index({Slice(), Slice(0, -1)});
  return (dx > 0).all().item<bool>() && (dy > 0).all().item<bool>();
}

torch::Tensor identity_grid(int64_t batch, int64_t height, int64_t width,
                            const torch::TensorOptions& options) {
  if (height < 2 || width < 2) throw std::invalid_argument("grid needs at least 2x2 pixels");
  auto opts = options.requires_grad(false);
  auto xs = torch::arange(width, opts) * (2.0 / static_cast<double>(width - 1)) - 1.0;
  auto ys = torch::arange(height, opts) * (2.0 / static_cast<double>(height - 1)) - 1.0;
  auto gx = xs.view({1, width}).expand({height, width});
  auto gy = ys.view({height, 1}).expand({height, width});
  return torch::stack({gx, gy}, -1).unsqueeze(0).repeat({batch, 1, 1, 1});
}

GradientField clamp_gradients(const torch::Tensor& raw) {
  if (raw.dim() != 4 || raw.size(1) != 2)
    throw std::invalid_argument("raw gradients must have shape [N, 2, H, W]");
  auto clamped = torch::hardtanh(raw, kMinSpacing, kMaxSpacing);
  return {clamped.select(1, 0), clamped.select(1, 1)};
}

DeformationField integrate_gradients(const GradientField& grads, std::array<double, 2> anchor) {
  grads.validate();
  auto x = torch::cumsum(grads.gx, 2);
  auto y = torch::cumsum(grads.gy, 1);
  x = x - x.mean({1, 2}, true) + anchor[0];
  y = y - y.mean({1, 2}, true) + anchor[1];
  const auto n = grads.gx.size(0);
  return {torch::stack({x, y}, -1), AffineParams::identity(n, grads.gx.scalar_type()),
          Provenance::integrated};
}

torch::Tensor apply_affine(const AffineParams& theta, const torch::Tensor& coords) {
  theta.validate();
  if (coords.size(-1) != 2 || coords.size(0) != theta.batch())
    throw std::invalid_argument("coordinates must be [N, ..., 2] matching the affine batch");
  const auto n = coords.size(0);
  auto flat = coords.reshape({n, -1, 2}).to(theta.matrix.scalar_type());
  auto a = theta.matrix.index({Slice(), Slice(), Slice(0, 2)});
  auto t = theta.matrix.index({Slice(), Slice(), 2});
  auto mapped = torch::matmul(flat, a.transpose(1, 2)) + t.unsqueeze(1);
  return mapped.reshape(coords.sizes());
}

DeformationField apply_affine(const AffineParams& theta, const DeformationField& field) {
  check_phi(field.phi);
  // theta after field.theta: A = A1 A2, t = A1 t2 + t1.
  auto a1 = theta.matrix.index({Slice(), Slice(), Slice(0, 2)});
  auto outer = field.theta.matrix.to(theta.matrix.scalar_type());
  auto combined = torch::matmul(a1, outer);
  combined.index({Slice(), Slice(), 2}) += theta.matrix.index({Slice(), Slice(), 2});
  return {apply_affine(theta, field.phi), AffineParams{combined}, Provenance::composed};
}

DeformationField affine_field(const AffineParams& theta, int64_t height, int64_t width) {
  auto grid = identity_grid(theta.batch(), height, width, theta.matrix.scalar_type());
  return {apply_affine(theta, grid), theta, Provenance::composed};
}

torch::Tensor bilinear_sample(const torch::Tensor& src, const torch::Tensor& phi) {
  check_phi(phi);
  if (src.dim() != 4) throw std::invalid_argument("source must have shape [N, C, H, W]");
  if (src.size(0) != phi.size(0)) throw std::invalid_argument("source and field batch differ");
  if (src.scalar_type() != phi.scalar_type())
    throw std::invalid_argument("source and field dtypes differ");
  return BilinearSampleFunction::apply(src, phi);
}

torch::Tensor bilinear_sample(const torch::Tensor& src, const DeformationField& field) {
  if (src.dim() == 4 && (src.size(2) != field.height() || src.size(3) != field.width()))
    throw std::invalid_argument("field dimensions must match the raster dimensions");
  return bilinear_sample(src, field.phi);
}

torch::Tensor threshold_ste(const torch::Tensor& soft, double tau) {
  return ThresholdSteFunction::apply(soft, tau);
}

DeformationField downscale_field(const DeformationField& field, int factor) {
  check_phi(field.phi);
  const auto h = field.height(), w = field.width();
  if (factor < 1 || h % factor != 0 || w % factor != 0)
    throw std::invalid_argument("field size must be divisible by the heatmap scale");
  if (factor == 1) return field;
  const auto hh = h / factor, hw = w / factor;
  if (hh < 2 || hw < 2) throw std::invalid_argument("downscaled field would be degenerate");
  auto sub = field.phi.index({Slice(), Slice(0, h, factor), Slice(0, w, factor)});
  // normalized(image) -> image px -> heatmap px -> normalized(heatmap)
  auto px = (sub.index({"...", 0}) + 1.0) * (static_cast<double>(w - 1) / 2.0) / factor;
  auto py = (sub.index({"...", 1}) + 1.0) * (static_cast<double>(h - 1) / 2.0) / factor;
  auto nx = px * (2.0 / static_cast<double>(hw - 1)) - 1.0;
  auto ny = py * (2.0 / static_cast<double>(hh - 1)) - 1.0;
  return {torch::stack({nx, ny}, -1), field.theta, field.provenance};
}

HeatmapStack warp_heatmaps(const HeatmapStack& heatmaps, const DeformationField& image_field) {
  const auto& maps = heatmaps.maps;
  if (maps.dim() != 4) throw std::invalid_argument("heatmaps must have shape [N, J, h, w]");
  auto small = downscale_field(image_field, heatmaps.scale);
  if (small.height() != maps.size(2) || small.width() != maps.size(3))
    throw std::invalid_argument("heatmap resolution does not match the scaled field");
  auto phi = small.phi.to(maps.scalar_type());
  return {bilinear_sample(maps, phi), heatmaps.sigma2, heatmaps.scale};
}

KeypointSet warp_keypoints(const KeypointSet& keypoints, const DeformationField& field,
                           int64_t batch_index) {
  check_phi(field.phi);
  const int h = static_cast<int>(field.height()), w = static_cast<int>(field.width());
  auto phi = field.phi.index({batch_index}).detach().to(torch::kFloat64).contiguous();
  const auto p = phi.accessor<double, 3>();

  KeypointSet out = keypoints;
  for (auto& kp : out.points) {
    if (!std::isfinite(kp.x) || !std::isfinite(kp.y) || kp.x < 0 || kp.y < 0 || kp.x > w - 1 ||
        kp.y > h - 1) {
      kp.visible = false;
      continue;
    }
    const double cx = normalized_coord(kp.x, w), cy = normalized_coord(kp.y, h);
    double best = std::numeric_limits<double>::infinity();
    int bi = 0, bj = 0;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double dx = p[i][j][0] - cx, dy = p[i][j][1] - cy;
        const double d = dx * dx + dy * dy;
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    // Local cell extent around the match; a nearest entry farther than that
    // means the source point is not covered by the warped domain.
    double cell = 0.0;
    for (auto [di, dj] : {std::pair{0, 1}, {0, -1}, {1, 0}, {-1, 0}}) {
      const int ni = bi + di, nj = bj + dj;
      if (ni < 0 || nj < 0 || ni >= h || nj >= w) continue;
      const double dx = p[ni][nj][0] - p[bi][bj][0], dy = p[ni][nj][1] - p[bi][bj][1];
      cell = std::max(cell, std::sqrt(dx * dx + dy * dy));
    }
    kp.x = bj;
    kp.y = bi;
    if (std::sqrt(best) > cell) kp.visible = false;
  }
  return out;
}

namespace {
static_assert(std::endian::native == std::endian::little, "field files are little-endian");
constexpr char kFieldMagic[8] = {'D', 'E', 'F', 'F', 'I', 'E', 'L', 'D'};
constexpr std::uint32_t kFieldVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated field file");
  return v;
}
}  // namespace

void save_field(const std::filesystem::path& path, const DeformationField& field,
                int64_t batch_index) {
  check_phi(field.phi);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kFieldMagic, sizeof(kFieldMagic));
  write_pod(os, kFieldVersion);
  write_pod(os, static_cast<std::uint32_t>(field.height()));
  write_pod(os, static_cast<std::uint32_t>(field.width()));
  write_pod(os, static_cast<std::uint32_t>(field.provenance));
  auto theta = field.theta.matrix.index({batch_index}).detach().to(torch::kFloat64).contiguous();
  os.write(reinterpret_cast<const char*>(theta.data_ptr<double>()), 6 * sizeof(double));
  auto phi = field.phi.index({batch_index}).detach().to(torch::kFloat64).contiguous();
  os.write(reinterpret_cast<const char*>(phi.data_ptr<double>()),
           static_cast<std::streamsize>(phi.numel() * sizeof(double)));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

DeformationField load_field(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kFieldMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path.string() + " is not a deformation field file");
  if (read_pod<std::uint32_t>(is) != kFieldVersion)
    throw std::runtime_error("unsupported field file version");
  const auto h = read_pod<std::uint32_t>(is);
  const auto w = read_pod<std::uint32_t>(is);
  const auto prov = read_pod<std::uint32_t>(is);
  if (prov > static_cast<std::uint32_t>(Provenance::composed))
    throw std::runtime_error("invalid provenance in field file");
  auto theta = torch::empty({1, 2, 3}, torch::kFloat64);
  is.read(reinterpret_cast<char*>(theta.data_ptr<double>()), 6 * sizeof(double));
  auto phi = torch::empty({1, h, w, 2}, torch::kFloat64);
  is.read(reinterpret_cast<char*>(phi.data_ptr<double>()),
          static_cast<std::streamsize>(phi.numel() * sizeof(double)));
  if (!is) throw std::runtime_error("truncated field file");
  return {phi, AffineParams{theta}, static_cast<Provenance>(prov)};
}

}  // namespace deftrans::warp
