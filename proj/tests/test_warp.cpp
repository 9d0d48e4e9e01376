#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "deftrans/warp.hpp"
#include "oracles.hpp"

using namespace deftrans;
using namespace deftrans::warp;
using torch::indexing::Slice;

namespace {

torch::Tensor uniform(std::mt19937_64& rng, std::vector<int64_t> shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = u(rng);
  return oracle::from_vector(v, shape);
}

DeformationField random_monotone(std::mt19937_64& rng, int h, int w) {
  auto raw = torch::stack({uniform(rng, {1, h, w}, 0.0, 2.5 * 2.0 / (w - 1)),
                           uniform(rng, {1, h, w}, 0.0, 2.5 * 2.0 / (h - 1))}, 1);
  return integrate_gradients(clamp_gradients(raw));
}

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

}  // namespace

TEST_CASE("coordinate helpers") {
  CHECK(normalized_coord(0, 128) == -1.0);
  CHECK(normalized_coord(127, 128) == 1.0);
  CHECK(pixel_coord(0.0, 5) == doctest::Approx(2.0));
  CHECK(identity_spacing(128) == doctest::Approx(2.0 / 127));
}

TEST_CASE("affine params") {
  auto id = AffineParams::identity(2);
  CHECK(id.matrix.sizes() == torch::IntArrayRef({2, 2, 3}));
  CHECK(torch::equal(id.matrix[1], torch::tensor({1.0, 0.0, 0.0, 0.0, 1.0, 0.0}, torch::kFloat64).reshape({2, 3})));

  SUBCASE("reflection and singular blocks are rejected") {
    CHECK_THROWS_AS(AffineParams::from_values({-1, 0, 0, 0, 1, 0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(AffineParams::from_values({0, 0, 0, 0, 1, 0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(apply_affine(AffineParams::from_values({1, 0, 0, 0, -1, 0}), DeformationField::identity(1, 4, 4)),
                    std::invalid_argument);
  }
  SUBCASE("rotation by 90 degrees maps (1, 0) to (0, 1)") {
    auto rot = AffineParams::similarity(1.0, std::numbers::pi / 2, 0, 0);
    auto p = apply_affine(rot, torch::tensor({1.0, 0.0}, torch::kFloat64).reshape({1, 1, 2}));
    CHECK(std::abs(p[0][0][0].item<double>()) < 1e-12);
    CHECK(std::abs(p[0][0][1].item<double>() - 1.0) < 1e-12);
  }
  SUBCASE("identity theta leaves coordinates unchanged") {
    std::mt19937_64 rng(1);
    auto c = uniform(rng, {1, 5, 7, 2}, -1, 1);
    CHECK(torch::equal(apply_affine(AffineParams::identity(), c), c));
  }
  SUBCASE("translation shifts phi.x by 0.25") {
    auto f = apply_affine(AffineParams::from_values({1, 0, 0.25, 0, 1, 0}), DeformationField::identity(1, 6, 6));
    auto id = identity_grid(1, 6, 6);
    CHECK(max_abs(f.phi.select(-1, 0) - id.select(-1, 0) - 0.25) < 1e-15);
    CHECK(torch::equal(f.phi.select(-1, 1), id.select(-1, 1)));
    CHECK(f.provenance == Provenance::composed);
  }
  SUBCASE("inverse") {
    auto a = AffineParams::similarity(1.15, 0.2, 0.05, -0.03);
    auto back = apply_affine(a.inverse(), apply_affine(a, identity_grid(1, 3, 3)));
    CHECK(max_abs(back - identity_grid(1, 3, 3)) < 1e-12);
  }
}

TEST_CASE("clamp_gradients") {
  auto full = [](double v) { return torch::full({1, 2, 3, 3}, v, torch::kFloat64); };
  CHECK(max_abs(clamp_gradients(full(0.05)).gx - 0.05) == 0.0);
  CHECK(clamp_gradients(full(-3.0)).gx.max().item<double>() == kMinSpacing);
  CHECK(clamp_gradients(full(7.0)).gy.min().item<double>() == kMaxSpacing);

  std::mt19937_64 rng(2);
  auto raw = torch::randn({1, 2, 16, 16}, torch::TensorOptions().dtype(torch::kFloat64));
  auto g = clamp_gradients(raw);
  const auto r = oracle::to_vector(raw), gx = oracle::to_vector(g.gx), gy = oracle::to_vector(g.gy);
  for (std::size_t k = 0; k < 256; ++k) {
    CHECK(gx[k] == std::min(kMaxSpacing, std::max(kMinSpacing, r[k])));
    CHECK(gy[k] == std::min(kMaxSpacing, std::max(kMinSpacing, r[256 + k])));
    CHECK(gx[k] > 0.0);
    CHECK(gx[k] <= 0.1);
  }
}

TEST_CASE("integrate_gradients") {
  SUBCASE("identity spacing reproduces the identity grid") {
    const int n = 128;
    auto g = torch::full({1, 2, n, n}, identity_spacing(n), torch::kFloat64);
    auto f = integrate_gradients(clamp_gradients(g));
    CHECK(max_abs(f.phi - identity_grid(1, n, n)) < 1e-12);
    CHECK(f.provenance == Provenance::integrated);
  }
  SUBCASE("doubled x spacing doubles the x range") {
    const int n = 64;
    const double s = identity_spacing(n);
    auto g = torch::stack({torch::full({1, n, n}, 2 * s, torch::kFloat64), torch::full({1, n, n}, s, torch::kFloat64)}, 1);
    auto f = integrate_gradients({g.select(1, 0), g.select(1, 1)});
    auto id = identity_grid(1, n, n);
    CHECK(max_abs(f.phi.select(-1, 0) - 2 * id.select(-1, 0)) < 1e-12);
    CHECK(max_abs(f.phi.select(-1, 1) - id.select(-1, 1)) < 1e-12);
  }
  SUBCASE("random 8x8 matches the cumulative-sum oracle") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      auto gx = uniform(rng, {1, 8, 8}, 1e-9, 0.1), gy = uniform(rng, {1, 8, 8}, 1e-9, 0.1);
      auto f = integrate_gradients({gx, gy});
      const auto want = oracle::cumsum_field(oracle::to_vector(gx), oracle::to_vector(gy), 8, 8);
      const auto got = oracle::to_vector(f.phi);
      for (std::size_t k = 0; k < want.size(); ++k) REQUIRE(std::abs(got[k] - want[k]) < 1e-12);
      int pairs = 0;
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 7; ++j, ++pairs) {
          CHECK(got[2 * (i * 8 + j + 1)] > got[2 * (i * 8 + j)]);
          CHECK(got[2 * ((j + 1) * 8 + i) + 1] > got[2 * (j * 8 + i) + 1]);
        }
      CHECK(pairs == 56);
    }
  }
  SUBCASE("anchor moves the mean") {
    auto g = torch::full({1, 2, 4, 4}, 0.05, torch::kFloat64);
    auto f = integrate_gradients(clamp_gradients(g), {0.3, -0.2});
    CHECK(f.phi.select(-1, 0).mean().item<double>() == doctest::Approx(0.3));
    CHECK(f.phi.select(-1, 1).mean().item<double>() == doctest::Approx(-0.2));
  }
  SUBCASE("invalid spacings are rejected") {
    auto bad = torch::full({1, 4, 4}, 0.05, torch::kFloat64);
    auto zero = bad.clone();
    zero[0][1][1] = 0.0;
    auto big = bad.clone();
    big[0][2][2] = 0.2;
    CHECK_THROWS_AS(integrate_gradients({zero, bad}), std::invalid_argument);
    CHECK_THROWS_AS(integrate_gradients({bad, big}), std::invalid_argument);
  }
}

TEST_CASE("foldover freedom on random clamped fields") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> size(4, 64);
  for (int rep = 0; rep < 1000; ++rep) {
    const int h = size(rng), w = size(rng);
    auto raw = torch::randn({1, 2, h, w}, torch::kFloat64) * 0.2;
    auto f = integrate_gradients(clamp_gradients(raw));
    auto dx = f.phi.index({Slice(), Slice(), Slice(1), 0}) - f.phi.index({Slice(), Slice(), Slice(0, -1), 0});
    auto dy = f.phi.index({Slice(), Slice(1), Slice(), 1}) - f.phi.index({Slice(), Slice(0, -1), Slice(), 1});
    REQUIRE(dx.min().item<double>() > 0.0);
    REQUIRE(dy.min().item<double>() > 0.0);
    REQUIRE(f.is_monotone());
  }
}

TEST_CASE("bilinear_sample") {
  SUBCASE("identity field reproduces the input") {
    auto src = torch::rand({2, 3, 9, 11}, torch::kFloat32);
    auto out = bilinear_sample(src, DeformationField::identity(2, 9, 11, torch::kFloat32));
    CHECK(max_abs(out - src) <= 1e-7);
  }
  SUBCASE("2x2 half-pixel shift with zero padding") {
    auto src = torch::tensor({0.0, 1.0, 2.0, 3.0}, torch::kFloat64).reshape({1, 1, 2, 2});
    auto phi = identity_grid(1, 2, 2);
    phi.index({"...", 0}) += 0.5 * identity_spacing(2);
    auto out = bilinear_sample(src, phi);
    CHECK(out[0][0][0][0].item<double>() == doctest::Approx(0.5));
    CHECK(out[0][0][1][0].item<double>() == doctest::Approx(2.5));
    CHECK(out[0][0][0][1].item<double>() == doctest::Approx(0.5));
    CHECK(out[0][0][1][1].item<double>() == doctest::Approx(1.5));
  }
  SUBCASE("random inputs match the loop oracle") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> size(2, 16);
    for (int rep = 0; rep < 60; ++rep) {
      const int h = size(rng), w = size(rng);
      auto src = uniform(rng, {1, 1, h, w}, -1, 1);
      auto phi = uniform(rng, {1, h, w, 2}, -1.3, 1.3);
      auto got = oracle::to_vector(bilinear_sample(src, phi));
      auto want = oracle::sample(oracle::to_vector(src), h, w, oracle::to_vector(phi), h, w);
      for (std::size_t k = 0; k < want.size(); ++k) REQUIRE(std::abs(got[k] - want[k]) <= 1e-6);
    }
  }
  SUBCASE("different source and output sizes") {
    std::mt19937_64 rng(6);
    auto src = uniform(rng, {1, 1, 7, 5}, 0, 1);
    auto phi = uniform(rng, {1, 3, 4, 2}, -1, 1);
    auto got = oracle::to_vector(bilinear_sample(src, phi));
    auto want = oracle::sample(oracle::to_vector(src), 7, 5, oracle::to_vector(phi), 3, 4);
    for (std::size_t k = 0; k < want.size(); ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-12);
  }
  SUBCASE("float32 agrees with float64") {
    auto src = torch::rand({1, 1, 8, 8}, torch::kFloat64);
    auto phi = torch::rand({1, 8, 8, 2}, torch::kFloat64) * 2 - 1;
    auto a = bilinear_sample(src, phi);
    auto b = bilinear_sample(src.to(torch::kFloat32), phi.to(torch::kFloat32));
    CHECK(max_abs(a - b.to(torch::kFloat64)) < 1e-6);
  }
  SUBCASE("shape mismatches are rejected") {
    CHECK_THROWS_AS(bilinear_sample(torch::zeros({2, 1, 4, 4}), identity_grid(1, 4, 4, torch::kFloat32)),
                    std::invalid_argument);
    CHECK_THROWS_AS(bilinear_sample(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 4, 4, 3})), std::invalid_argument);
  }
}

TEST_CASE("bilinear_sample gradients match central differences") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> size(3, 9);
  for (int rep = 0; rep < 24; ++rep) {
    const int h = size(rng), w = size(rng);
    auto src = uniform(rng, {1, 2, h, w}, -1, 1).requires_grad_(true);
    auto phi = random_monotone(rng, h, w).phi;
    // keep every sample point away from the kinks at integer pixel positions
    auto px = (phi.index({"...", 0}) + 1) * (w - 1) / 2.0, py = (phi.index({"...", 1}) + 1) * (h - 1) / 2.0;
    auto fx = px - px.floor(), fy = py - py.floor();
    px = px.floor() + 0.05 + 0.9 * fx;
    py = py.floor() + 0.05 + 0.9 * fy;
    phi = torch::stack({px * 2.0 / (w - 1) - 1, py * 2.0 / (h - 1) - 1}, -1).detach().requires_grad_(true);
    auto weights = uniform(rng, {1, 2, h, w}, -1, 1);

    auto loss = (bilinear_sample(src, phi) * weights).sum();
    loss.backward();
    auto f = [&](const torch::Tensor& s, const torch::Tensor& p) {
      torch::NoGradGuard g;
      return (bilinear_sample(s, p) * weights).sum().item<double>();
    };
    auto numeric = [&](const torch::Tensor& wrt, bool is_src) {
      auto base = wrt.detach().clone();
      auto flat = base.view({-1});
      std::vector<double> out(static_cast<std::size_t>(flat.numel()));
      const double eps = 1e-4;
      for (int64_t k = 0; k < flat.numel(); ++k) {
        const double v = flat[k].item<double>();
        flat[k] = v + eps;
        const double up = is_src ? f(base, phi.detach()) : f(src.detach(), base);
        flat[k] = v - eps;
        const double down = is_src ? f(base, phi.detach()) : f(src.detach(), base);
        flat[k] = v;
        out[static_cast<std::size_t>(k)] = (up - down) / (2 * eps);
      }
      return out;
    };
    auto rel = [](const std::vector<double>& a, const std::vector<double>& b) {
      double num = 0, den = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        num += (a[k] - b[k]) * (a[k] - b[k]);
        den += b[k] * b[k];
      }
      return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
    };
    CHECK(rel(oracle::to_vector(src.grad()), numeric(src, true)) < 1e-3);
    CHECK(rel(oracle::to_vector(phi.grad()), numeric(phi, false)) < 1e-3);
  }
}

TEST_CASE("threshold_ste") {
  auto soft = torch::tensor({0.7, 0.3, 0.5, 0.500001}, torch::kFloat64).requires_grad_(true);
  auto hard = threshold_ste(soft, 0.5);
  CHECK(oracle::to_vector(hard) == std::vector<double>{1, 0, 0, 1});
  auto g = torch::tensor({0.25, -3.0, 7.5, 1e-9}, torch::kFloat64);
  hard.backward(g);
  CHECK(torch::equal(soft.grad(), g));
}

TEST_CASE("composition order matches the fused oracle") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 12;
    auto theta = AffineParams::similarity(1.1, 0.2, 0.05, -0.04);
    auto local = random_monotone(rng, n, n);
    auto composed = apply_affine(theta, local);
    auto src = uniform(rng, {1, 1, n, n}, 0, 1);

    // fused: every output pixel reads the source at theta * phi_local(p)
    const auto phi = oracle::to_vector(local.phi);
    const auto m = oracle::to_vector(theta.matrix);
    std::vector<double> fused_phi(phi.size());
    for (std::size_t k = 0; k < phi.size() / 2; ++k) {
      fused_phi[2 * k] = m[0] * phi[2 * k] + m[1] * phi[2 * k + 1] + m[2];
      fused_phi[2 * k + 1] = m[3] * phi[2 * k] + m[4] * phi[2 * k + 1] + m[5];
    }
    const auto want = oracle::sample(oracle::to_vector(src), n, n, fused_phi, n, n);
    const auto got = oracle::to_vector(bilinear_sample(src, composed));
    for (std::size_t k = 0; k < want.size(); ++k) REQUIRE(std::abs(got[k] - want[k]) < 1e-12);
  }

  SUBCASE("two gathers equal one composed gather on a linear ramp") {
    const int n = 32;
    auto ramp = (identity_grid(1, n, n).select(-1, 0) * 0.3 + identity_grid(1, n, n).select(-1, 1) * 0.2 + 0.5)
                    .unsqueeze(1);
    auto theta = AffineParams::similarity(0.8, 0.1, 0.02, 0.01);
    auto local = affine_field(AffineParams::similarity(0.9, -0.05, 0, 0), n, n);
    local.provenance = Provenance::integrated;
    local.theta = AffineParams::identity();
    auto aligned = bilinear_sample(ramp, affine_field(theta, n, n));
    auto two_step = bilinear_sample(aligned, local);
    auto one_step = bilinear_sample(ramp, apply_affine(theta, local));
    CHECK(max_abs(two_step - one_step) < 1e-12);
  }
}

TEST_CASE("heatmap and keypoint warping") {
  SUBCASE("identity field leaves heatmaps and keypoints unchanged") {
    auto maps = torch::rand({1, 3, 16, 16}, torch::kFloat32);
    auto out = warp_heatmaps({maps, 0.5, 4}, DeformationField::identity(1, 64, 64));
    CHECK(max_abs(out.maps - maps) <= 1e-7);
    KeypointSet k{{{"a", 10, 20, true}, {"b", 63, 0, true}}};
    CHECK(warp_keypoints(k, DeformationField::identity(1, 64, 64)) == k);
  }
  SUBCASE("translation by +4 heatmap px moves the argmax from (10,10) to (14,10)") {
    auto maps = torch::zeros({1, 1, 32, 32}, torch::kFloat64);
    maps[0][0][10][10] = 1.0;
    // output reads the source 4 heatmap px (16 image px) to the left
    auto shift = AffineParams::from_values({1, 0, -16 * identity_spacing(128), 0, 1, 0});
    auto out = warp_heatmaps({maps, 0.5, 4}, affine_field(shift, 128, 128));
    const auto idx = out.maps.reshape({-1}).argmax().item<int64_t>();
    CHECK(idx % 32 == 14);
    CHECK(idx / 32 == 10);
  }
  SUBCASE("translation moves keypoints by the inverse of the sampling offset") {
    auto shift = AffineParams::from_values({1, 0, -5 * identity_spacing(64), 0, 1, 3 * identity_spacing(64)});
    KeypointSet k{{{"a", 20, 30, true}}};
    auto out = warp_keypoints(k, affine_field(shift, 64, 64));
    CHECK(out[0].x == doctest::Approx(25));
    CHECK(out[0].y == doctest::Approx(27));
    CHECK(out[0].visible);
  }
  SUBCASE("keypoints outside the raster become invisible") {
    KeypointSet k{{{"a", -1, 3, true}, {"b", 3, 64.5, true}}};
    auto out = warp_keypoints(k, DeformationField::identity(1, 64, 64));
    CHECK(out.size() == 2);
    CHECK_FALSE(out[0].visible);
    CHECK_FALSE(out[1].visible);
  }
  SUBCASE("nearest lookup agrees with the exhaustive oracle on every pixel") {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 5; ++rep) {
      auto f = random_monotone(rng, 8, 8);
      const auto phi = oracle::to_vector(f.phi);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          KeypointSet k{{{"p", static_cast<double>(x), static_cast<double>(y), true}}};
          auto out = warp_keypoints(k, f);
          if (!out[0].visible) continue;
          auto [i, j] = oracle::nearest_entry(phi, 8, 8, oracle::to_norm(x, 8), oracle::to_norm(y, 8));
          CHECK(out[0].x == j);
          CHECK(out[0].y == i);
        }
    }
  }
  SUBCASE("resolution mismatch is rejected") {
    CHECK_THROWS_AS(warp_heatmaps({torch::zeros({1, 1, 8, 8}), 0.5, 4}, DeformationField::identity(1, 64, 64)),
                    std::invalid_argument);
    CHECK_THROWS_AS(downscale_field(DeformationField::identity(1, 30, 30), 4), std::invalid_argument);
  }
}

TEST_CASE("field files round trip") {
  std::mt19937_64 rng(10);
  auto f = apply_affine(AffineParams::similarity(1.2, 0.1, 0.0, 0.05), random_monotone(rng, 6, 9));
  const auto path = std::filesystem::temp_directory_path() / "deftrans_field_test.field";
  save_field(path, f);
  auto g = load_field(path);
  CHECK(torch::equal(g.phi, f.phi));
  CHECK(torch::equal(g.theta.matrix, f.theta.matrix));
  CHECK(g.provenance == Provenance::composed);
  std::filesystem::remove(path);
}
