#include <doctest.h>

#include <filesystem>
#include <functional>

#include "deftrans/networks.hpp"

using namespace deftrans;
using namespace deftrans::nets;
using torch::indexing::Slice;

namespace {

template <typename Holder, typename Impl>
Holder build(const NetworkSpec& spec, uint64_t seed) {
  return Holder(std::dynamic_pointer_cast<Impl>(make_network(spec, seed)));
}

// Bounding box (rows, cols) of the input pixels that influence one output unit.
std::pair<int64_t, int64_t> influence_extent(const std::function<torch::Tensor(torch::Tensor)>& fwd, int size,
                                             int64_t oy, int64_t ox) {
  torch::manual_seed(99);
  auto x = torch::randn({1, 1, size, size}, torch::kFloat64).requires_grad_(true);
  fwd(x).index({0, Slice(), oy, ox}).sum().backward();
  auto g = x.grad()[0][0].abs() > 0;
  auto rows = torch::nonzero(g.any(1)), cols = torch::nonzero(g.any(0));
  return {rows.max().item<int64_t>() - rows.min().item<int64_t>() + 1,
          cols.max().item<int64_t>() - cols.min().item<int64_t>() + 1};
}

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("receptive fields from the layer schedules") {
  CHECK(NetworkSpec::defaults(NetworkKind::deform_gen, 128).receptive_field_px() == 64);
  CHECK(NetworkSpec::defaults(NetworkKind::patch_disc_image, 128).receptive_field_px() == 22);
  CHECK(NetworkSpec::defaults(NetworkKind::patch_disc_shape, 128).receptive_field_px() == 88);
  // plain 70x70 patchGAN without dilation
  CHECK(receptive_field({{4, 2, 1, 1}, {4, 2, 1, 1}, {4, 2, 1, 1}, {4, 1, 1, 1}, {4, 1, 1, 1}}) == 70);
  CHECK(output_extent(NetworkSpec::defaults(NetworkKind::patch_disc_image, 128).layer_schedule(), 128) == 61);
  CHECK(output_extent(NetworkSpec::defaults(NetworkKind::deform_gen, 128).layer_schedule(), 128) == 128);
}

TEST_CASE("receptive fields agree with gradient masking") {
  SUBCASE("image discriminator") {
    auto spec = NetworkSpec::defaults(NetworkKind::patch_disc_image, 64, 4);
    spec.instance_norm = false;
    auto d = build<PatchDiscriminator, PatchDiscriminatorImpl>(spec, 1);
    d->to(torch::kFloat64);
    auto [h, w] = influence_extent([&](torch::Tensor x) { return d->forward(x); }, 64, 15, 15);
    CHECK(h == 22);
    CHECK(w == 22);
  }
  SUBCASE("deformation generator") {
    auto spec = NetworkSpec::defaults(NetworkKind::deform_gen, 128, 4);
    spec.instance_norm = false;
    auto g = build<DeformGenerator, DeformGeneratorImpl>(spec, 2);
    g->to(torch::kFloat64);
    auto [h, w] = influence_extent([&](torch::Tensor x) { return g->forward(x); }, 128, 64, 64);
    CHECK(h <= 64);
    CHECK(w <= 64);
    CHECK(h > 48);
    CHECK(w > 48);
  }
}

TEST_CASE("spatial transformer") {
  auto spec = NetworkSpec::defaults(NetworkKind::stn, 64, 8);
  auto stn = build<SpatialTransformer, SpatialTransformerImpl>(spec, 3);

  SUBCASE("fresh parameters give exactly the identity") {
    auto theta = stn_forward(stn, torch::rand({3, 1, 64, 64}));
    CHECK(torch::equal(theta.matrix, warp::AffineParams::identity(3, torch::kFloat32).matrix));
  }
  SUBCASE("deterministic under a fixed seed") {
    auto a = build<SpatialTransformer, SpatialTransformerImpl>(spec, 5);
    auto b = build<SpatialTransformer, SpatialTransformerImpl>(spec, 5);
    CHECK(parameter_hash(*a) == parameter_hash(*b));
    auto x = torch::rand({2, 1, 64, 64});
    CHECK(torch::equal(a->forward(x), b->forward(x)));
  }
  SUBCASE("positive determinant for random parameters") {
    torch::NoGradGuard guard;
    for (int draw = 0; draw < 100; ++draw) {
      torch::manual_seed(draw);
      for (auto& p : stn->parameters()) p.normal_(0.0, 0.5);
      auto t = stn_forward(stn, torch::rand({2, 1, 64, 64}));
      REQUIRE(t.determinant().min().item<double>() > 0.0);
    }
  }
  SUBCASE("unsupported inputs are rejected") {
    CHECK_THROWS_AS(stn_forward(stn, torch::rand({1, 1, 96, 96})), std::invalid_argument);
    CHECK_THROWS_AS(stn_forward(stn, torch::rand({1, 2, 64, 64})), std::invalid_argument);
  }
  SUBCASE("non-finite activations fail fast") {
    auto x = torch::rand({1, 1, 64, 64});
    x[0][0][3][3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(stn_forward(stn, x), NumericalError);
  }
}

TEST_CASE("deformation generator") {
  auto spec = NetworkSpec::defaults(NetworkKind::deform_gen, 64, 8);
  auto g = build<DeformGenerator, DeformGeneratorImpl>(spec, 4);
  auto x = torch::rand({2, 1, 64, 64});
  auto out = deform_gen_forward(g, x);
  CHECK(out.sizes() == torch::IntArrayRef({2, 2, 64, 64}));
  auto g2 = build<DeformGenerator, DeformGeneratorImpl>(spec, 4);
  CHECK(torch::equal(out, deform_gen_forward(g2, x)));

  SUBCASE("shifting the input by 8 px shifts the output by 8 px away from the borders") {
    auto spec128 = NetworkSpec::defaults(NetworkKind::deform_gen, 128, 8);
    auto net = build<DeformGenerator, DeformGeneratorImpl>(spec128, 6);
    torch::manual_seed(12);
    auto img = torch::zeros({1, 1, 128, 128});
    img.index_put_({0, 0, Slice(40, 80), Slice(40, 80)}, torch::rand({40, 40}));
    auto shifted = torch::roll(img, {8}, {3});
    torch::NoGradGuard guard;
    auto a = deform_gen_forward(net, img), b = deform_gen_forward(net, shifted);
    const auto interior = Slice(40, 88);
    auto dev = b.index({0, Slice(), interior, Slice(48, 96)}) - a.index({0, Slice(), interior, Slice(40, 88)});
    CHECK(max_abs(dev) < 1e-4);
  }
}

TEST_CASE("appearance generator") {
  for (int size : {64, 128}) {
    CAPTURE(size);
    auto spec = NetworkSpec::defaults(NetworkKind::unet_gen, size, 4);
    auto u = build<UNetGenerator, UNetGeneratorImpl>(spec, 7);
    auto out = unet_forward(u, torch::zeros({2, 1, size, size}));
    CHECK(out.sizes() == torch::IntArrayRef({2, 1, size, size}));
    CHECK(out.min().item<double>() >= 0.0);
    CHECK(out.max().item<double>() <= 1.0);
    CHECK(torch::isfinite(out).all().item<bool>());
  }
  CHECK(NetworkSpec::defaults(NetworkKind::unet_gen, 128).resolved_depth() == 7);
}

TEST_CASE("patch discriminators") {
  for (auto kind : {NetworkKind::patch_disc_shape, NetworkKind::patch_disc_image}) {
    CAPTURE(to_string(kind));
    auto spec = NetworkSpec::defaults(kind, 128, 8);
    auto d = build<PatchDiscriminator, PatchDiscriminatorImpl>(spec, 8);
    CHECK(d->forward(torch::rand({1, 1, 128, 128})).size(2) == output_extent(spec.layer_schedule(), 128));
    // units whose receptive field misses the zero padding see a constant input
    auto out = d->forward(torch::full({1, 1, 320, 320}, 0.7f));
    const auto n = out.size(2);
    auto interior = out.index({0, 0, Slice(n / 2 - 1, n / 2 + 2), Slice(n / 2 - 1, n / 2 + 2)});
    CHECK(interior.to(torch::kFloat64).var(false).item<double>() < 1e-8);
    auto d2 = build<PatchDiscriminator, PatchDiscriminatorImpl>(spec, 8);
    auto x = torch::rand({1, 1, 128, 128});
    CHECK(torch::equal(d->forward(x), d2->forward(x)));
  }
}

TEST_CASE("stacked hourglass") {
  for (int joints : {30, 7, 3}) {
    CAPTURE(joints);
    auto spec = NetworkSpec::defaults(NetworkKind::hourglass, 128, 8);
    spec.out_channels = joints;
    auto net = build<StackedHourglass, StackedHourglassImpl>(spec, 9);
    net->eval();
    auto stacks = hourglass_forward(net, torch::rand({1, 1, 128, 128}));
    REQUIRE(stacks.size() == 2);
    for (const auto& s : stacks) {
      CHECK(s.maps.sizes() == torch::IntArrayRef({1, joints, 32, 32}));
      CHECK(torch::isfinite(s.maps).all().item<bool>());
    }
  }
  auto spec = NetworkSpec::defaults(NetworkKind::hourglass, 64, 8);
  spec.out_channels = 7;
  auto net = build<StackedHourglass, StackedHourglassImpl>(spec, 9);
  net->eval();
  CHECK(hourglass_forward(net, torch::rand({2, 1, 64, 64})).back().maps.sizes() ==
        torch::IntArrayRef({2, 7, 16, 16}));
}

TEST_CASE("checkpoints round trip") {
  auto spec = NetworkSpec::defaults(NetworkKind::hourglass, 64, 8);
  spec.out_channels = 7;
  auto a = build<StackedHourglass, StackedHourglassImpl>(spec, 10);
  {
    // move the batch-norm buffers away from their defaults
    torch::NoGradGuard guard;
    a->train();
    a->forward(torch::rand({2, 1, 64, 64}));
  }
  a->eval();
  const auto path = temp_file("deftrans_ckpt_test.ckpt");
  save_checkpoint(path, *a, {spec, 10, 42, 1});

  const auto meta = read_checkpoint_meta(path);
  CHECK(meta.spec == spec);
  CHECK(meta.seed == 10);
  CHECK(meta.step == 42);
  CHECK(meta.version == 1);

  auto b = build<StackedHourglass, StackedHourglassImpl>(spec, 11);
  CHECK(parameter_hash(*a) != parameter_hash(*b));
  load_checkpoint(path, *b, NetworkKind::hourglass);
  b->eval();
  CHECK(parameter_hash(*a) == parameter_hash(*b));
  auto x = torch::rand({1, 1, 64, 64});
  CHECK(torch::equal(a->forward(x).back(), b->forward(x).back()));

  SUBCASE("kind and shape mismatches are rejected") {
    auto stn = build<SpatialTransformer, SpatialTransformerImpl>(NetworkSpec::defaults(NetworkKind::stn, 64, 8), 1);
    CHECK_THROWS(load_checkpoint(path, *stn, NetworkKind::stn));
    auto other_spec = spec;
    other_spec.base_width = 16;
    auto c = build<StackedHourglass, StackedHourglassImpl>(other_spec, 1);
    CHECK_THROWS(load_checkpoint(path, *c, NetworkKind::hourglass));
  }
  std::filesystem::remove(path);
}
