#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "deftrans/data.hpp"
#include "deftrans/tensors.hpp"
#include "deftrans/trainer.hpp"

using namespace deftrans;
using namespace deftrans::train;
using torch::indexing::Slice;

namespace fs = std::filesystem;

namespace {

double value(const torch::Tensor& t) { return t.item<double>(); }

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Toy {
  data::DomainSet source, target;
};

const Toy& toy_benchmark() {
  static const Toy toy = [] {
    data::Sim2SimConfig c;
    c.image_size = 64;
    c.source_train = 16;
    c.target_train = 16;
    c.target_test = 1;
    auto b = data::build_sim2sim_benchmark(c);
    return Toy{b.source, b.target_train};
  }();
  return toy;
}

TranslationSettings small_settings() {
  TranslationSettings s;
  s.image_size = 64;
  s.base_width = 4;
  s.seed = 3;
  s.epochs = 100;
  s.max_steps = 20;
  s.pretrain_steps = 20;
  s.pretrain_tolerance = 1.0;
  s.checkpoint_every = 10;
  s.sample_every = 1000;
  return s;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("shape GAN losses") {
  auto t = [](double v) { return torch::full({2, 1, 3, 3}, v, torch::kFloat64); };
  auto strong = loss_shape(t(10), t(-10));
  CHECK(value(strong.disc) == doctest::Approx(2 * std::log1p(std::exp(-10.0))).epsilon(1e-12));
  CHECK(value(strong.disc) == doctest::Approx(9.08e-5).epsilon(1e-3));
  CHECK(value(strong.gen) == doctest::Approx(std::log1p(std::exp(10.0))).epsilon(1e-12));
  CHECK(value(strong.gen) == doctest::Approx(10.00005).epsilon(1e-6));

  auto zero = loss_shape(t(0), t(0));
  CHECK(value(zero.disc) == doctest::Approx(std::log(4.0)));
  CHECK(value(zero.gen) == doctest::Approx(std::log(2.0)));

  SUBCASE("batch duplication leaves the losses unchanged") {
    auto real = torch::randn({2, 1, 5, 5}, torch::kFloat64), fake = torch::randn({2, 1, 5, 5}, torch::kFloat64);
    auto a = loss_shape(real, fake);
    auto b = loss_shape(torch::cat({real, real}), torch::cat({fake, fake}));
    CHECK(value(a.disc) == doctest::Approx(value(b.disc)).epsilon(1e-14));
    CHECK(value(a.gen) == doctest::Approx(value(b.gen)).epsilon(1e-14));
  }
  SUBCASE("generator loss falls as fake logits rise") {
    double prev = INFINITY;
    for (double f = -5; f <= 5; f += 0.5) {
      const double g = value(loss_shape(t(0), t(f)).gen);
      CHECK(g < prev);
      prev = g;
    }
  }
  SUBCASE("finite for extreme logits, rejected when non-finite") {
    auto big = loss_shape(t(1e4), t(-1e4));
    CHECK(std::isfinite(value(big.disc)));
    CHECK(std::isfinite(value(big.gen)));
    CHECK_THROWS_AS(loss_shape(t(NAN), t(0)), NumericalError);
    CHECK_THROWS_AS(loss_shape(t(0), t(INFINITY)), NumericalError);
  }
}

TEST_CASE("appearance losses") {
  auto logits = torch::zeros({1, 1, 4, 4}, torch::kFloat64);
  auto target = torch::rand({2, 1, 8, 8}, torch::kFloat64);
  CHECK(value(loss_appearance(logits, logits, target, target).sup) == 0.0);
  auto half = torch::full({2, 1, 8, 8}, 0.5, torch::kFloat64), one = torch::ones({2, 1, 8, 8}, torch::kFloat64);
  CHECK(value(loss_appearance(logits, logits, half, one).sup) == doctest::Approx(0.5));
  CHECK_THROWS_AS(loss_appearance(logits, logits, half, torch::ones({2, 1, 4, 4})), std::invalid_argument);

  SUBCASE("sup gradient is sign(out - target) / N") {
    auto out = torch::rand({1, 1, 4, 4}, torch::kFloat64).requires_grad_(true);
    auto tgt = torch::rand({1, 1, 4, 4}, torch::kFloat64);
    loss_appearance(logits, logits, out, tgt).sup.backward();
    auto expected = torch::sign(out.detach() - tgt) / 16.0;
    CHECK(torch::allclose(out.grad(), expected, 0, 1e-15));
    auto flat = out.detach().clone().view({-1});
    for (int k = 0; k < 16; ++k) {
      const double v = flat[k].item<double>(), eps = 1e-6;
      flat[k] = v + eps;
      const double up = value(loss_appearance(logits, logits, flat.view({1, 1, 4, 4}), tgt).sup);
      flat[k] = v - eps;
      const double down = value(loss_appearance(logits, logits, flat.view({1, 1, 4, 4}), tgt).sup);
      flat[k] = v;
      CHECK(std::abs((up - down) / (2 * eps) - expected.view({-1})[k].item<double>()) < 1e-3);
    }
  }
}

TEST_CASE("deformation regularizer") {
  const int n = 4;
  const double s = warp::identity_spacing(n);
  auto id = warp::identity_grid(1, n, n);
  warp::DeformationField identity{id.clone(), warp::AffineParams::identity(), warp::Provenance::integrated};
  warp::GradientField flat{torch::full({1, n, n}, s, torch::kFloat64), torch::full({1, n, n}, s, torch::kFloat64)};
  CHECK(value(loss_regularizer(identity, flat, {})) == 0.0);

  // x stretched by 2: gx = 2s, phi.x = 2 * id.x. On a 4-point axis |id.x| averages (1 + 1/3 + 1/3 + 1) / 4.
  warp::DeformationField stretched{torch::stack({2 * id.select(-1, 0), id.select(-1, 1)}, -1),
                                   warp::AffineParams::identity(), warp::Provenance::integrated};
  warp::GradientField g2{torch::full({1, n, n}, 2 * s, torch::kFloat64), flat.gy};
  const double alpha_term = s * s, beta_term = 2.0 / 3.0;
  CHECK(value(loss_regularizer(stretched, g2, {1.0, 0.0})) == doctest::Approx(alpha_term).epsilon(1e-14));
  CHECK(value(loss_regularizer(stretched, g2, {0.0, 1.0})) == doctest::Approx(beta_term).epsilon(1e-14));
  CHECK(value(loss_regularizer(stretched, g2, {10.0, 1.0})) == doctest::Approx(10 * alpha_term + beta_term));
  CHECK(value(loss_regularizer(stretched, g2, {2.0, 0.0})) == doctest::Approx(2 * alpha_term).epsilon(1e-14));
  CHECK_THROWS_AS(loss_regularizer(stretched, g2, {-1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("learning-rate schedule") {
  CHECK(linear_decay(2e-5, 0, 50, 100) == 2e-5);
  CHECK(linear_decay(2e-5, 50, 50, 100) == 2e-5);
  CHECK(linear_decay(2e-5, 75, 50, 100) == doctest::Approx(1e-5));
  CHECK(linear_decay(2e-5, 100, 50, 100) == 0.0);
  CHECK(linear_decay(2e-5, 120, 50, 100) == 0.0);
  CHECK(linear_decay(2e-3, 150, 100, 200) == doctest::Approx(1e-3));
}

TEST_CASE("epoch order") {
  auto a = epoch_order(5, 0, 50), b = epoch_order(5, 0, 50), c = epoch_order(5, 1, 50);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("identity pretraining") {
  const auto& toy = toy_benchmark();
  std::vector<Image> imgs;
  for (int i = 0; i < 16; ++i) imgs.push_back(toy.source.items[static_cast<std::size_t>(i)].image);
  auto all = to_tensor(imgs);
  auto train_imgs = all.index({Slice(0, 8)}), held = all.index({Slice(8, 16)});

  auto m = TranslationModels::create(64, 4, 1);
  SUBCASE("zero steps miss the tolerance") {
    CHECK_THROWS_AS(pretrain_identity(m, train_imgs, held, 0, 1e-4, {}, 1e-3), std::runtime_error);
  }
  SUBCASE("the STN is untouched and the deviation shrinks") {
    const auto stn_before = nets::parameter_hash(*m.stn);
    const double before = identity_deviation(m, held);
    auto r = pretrain_identity(m, train_imgs, held, 100, 1e-4, {}, 1.0);
    CHECK(nets::parameter_hash(*m.stn) == stn_before);
    CHECK(r.deviation < before);
    CHECK(r.losses.size() == 100);
    CHECK(r.losses.back() < r.losses.front());
  }
}

TEST_CASE("shape stage plumbing") {
  const auto& toy = toy_benchmark();
  std::vector<Image> imgs;
  std::vector<SilhouetteMask> masks;
  for (int i = 0; i < 4; ++i) {
    imgs.push_back(toy.source.items[static_cast<std::size_t>(i)].image);
    masks.push_back(*toy.source.items[static_cast<std::size_t>(i)].mask);
  }
  auto I = to_tensor(imgs), S = to_tensor(masks);
  auto m = TranslationModels::create(64, 4, 2);
  pretrain_identity(m, I, I, 300, 1e-4, {}, 1e-2);

  SUBCASE("the shape discriminator only sees binary masks") {
    auto out = shape_forward(m, I, S);
    auto binary = (out.mask == 0) | (out.mask == 1);
    CHECK(binary.all().item<bool>());
    CHECK(out.composed.is_monotone());
  }
  SUBCASE("a discriminator step never reaches generator parameters") {
    auto out = shape_forward(m, I, S);
    const auto before = std::vector<std::string>{nets::parameter_hash(*m.stn), nets::parameter_hash(*m.deform),
                                                 nets::parameter_hash(*m.appearance)};
    for (auto& p : m.generator_parameters()) p.mutable_grad() = torch::Tensor();
    auto d = loss_shape(nets::disc_shape_forward(m.shape_disc, S), nets::disc_shape_forward(m.shape_disc, out.mask.detach()));
    torch::optim::Adam opt(m.discriminator_parameters(), torch::optim::AdamOptions(1e-3));
    d.disc.backward();
    opt.step();
    for (auto& p : m.generator_parameters()) CHECK_FALSE(p.grad().defined());
    CHECK(nets::parameter_hash(*m.stn) == before[0]);
    CHECK(nets::parameter_hash(*m.deform) == before[1]);
  }
  SUBCASE("identity-pretrained generators reproduce the source masks") {
    std::vector<KeypointSet> kps;
    for (int i = 0; i < 4; ++i) kps.push_back(*toy.source.items[static_cast<std::size_t>(i)].keypoints);
    auto tr = translate_batch(m, I, S, kps);
    const double mismatch = (tr.masks != S).to(torch::kFloat64).mean().item<double>();
    CHECK(mismatch < 0.005);
    auto id = warp::identity_grid(4, 64, 64, tr.fields.phi.options());
    CHECK((tr.fields.phi - id).abs().mean().item<double>() < 1e-2);
    for (std::size_t i = 0; i < kps.size(); ++i)
      for (std::size_t j = 0; j < kps[i].size(); ++j) {
        CHECK(std::abs(tr.keypoints[i][j].x - kps[i][j].x) <= 1.0);
        CHECK(std::abs(tr.keypoints[i][j].y - kps[i][j].y) <= 1.0);
      }
    auto again = translate_batch(m, I, S, kps);
    CHECK(torch::equal(again.images, tr.images));
    CHECK((again.keypoints == tr.keypoints));
  }
}

TEST_CASE("similarity estimate inverts theta") {
  auto forward = warp::AffineParams::similarity(1.15, 10.0 * M_PI / 180.0, 0.05, -0.03, 3);
  auto est = estimate_similarity(forward.inverse());
  CHECK(est.scale == doctest::Approx(1.15).epsilon(1e-12));
  CHECK(est.rotation_deg == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(est.tx == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(est.ty == doctest::Approx(-0.03).epsilon(1e-12));
}

TEST_CASE("translation training smoke and resume") {
  const auto& toy = toy_benchmark();
  auto s = small_settings();
  const auto full = fresh_dir("deftrans_train_full");
  auto r = train_translation(s, toy.source, toy.target, full);
  CHECK(r.steps == 20);
  const auto lines = read_lines(full / "log.csv");
  REQUIRE(lines.size() == 21);
  CHECK(lines[0] == kLogHeader);
  for (const auto& row : r.log) {
    CHECK(std::isfinite(row.loss_ds));
    CHECK(std::isfinite(row.loss_di));
    CHECK(std::isfinite(row.loss_gs));
    CHECK(std::isfinite(row.loss_gi));
    CHECK(std::isfinite(row.reg));
    CHECK(std::isfinite(row.sup));
  }
  CHECK(fs::exists(full / "checkpoints" / "step_00000010" / "stn.ckpt"));
  CHECK(latest_checkpoint(full).filename() == "step_00000020");

  SUBCASE("resuming from step 10 reproduces steps 10 to 19 bitwise") {
    const auto part = fresh_dir("deftrans_train_part");
    auto s10 = s;
    s10.max_steps = 10;
    train_translation(s10, toy.source, toy.target, part);
    auto resumed = train_translation(s, toy.source, toy.target, part, true);
    CHECK(resumed.steps == 20);
    CHECK(resumed.log.size() == 10);
    CHECK(read_lines(part / "log.csv") == lines);
    fs::remove_all(part);
  }
  SUBCASE("missing source silhouettes halt training") {
    auto src = toy.source;
    src.items[3].mask.reset();
    CHECK_THROWS_AS(train_translation(s, src, toy.target, fresh_dir("deftrans_train_nomask")), std::runtime_error);
  }
  fs::remove_all(full);
}

TEST_CASE("without adversarial terms the reconstruction loss decreases") {
  const auto& toy = toy_benchmark();
  auto s = small_settings();
  s.w_shape_adv = 0.0;
  s.w_image_adv = 0.0;
  s.max_steps = 0;
  s.epochs = 20;  // 4 steps per epoch
  s.lr_appearance = 1e-3;
  s.checkpoint_every = 1000;
  const auto dir = fresh_dir("deftrans_train_sup");
  auto r = train_translation(s, toy.source, toy.target, dir);
  REQUIRE(r.log.size() == 80);
  std::vector<double> per_epoch;
  for (std::size_t e = 0; e < 20; ++e) {
    double sum = 0;
    for (std::size_t k = 0; k < 4; ++k) sum += r.log[e * 4 + k].sup;
    per_epoch.push_back(sum / 4);
  }
  // smoothed over 5-epoch windows
  std::vector<double> smooth;
  for (std::size_t e = 0; e + 5 <= per_epoch.size(); e += 5)
    smooth.push_back((per_epoch[e] + per_epoch[e + 1] + per_epoch[e + 2] + per_epoch[e + 3] + per_epoch[e + 4]) / 5);
  for (std::size_t k = 1; k < smooth.size(); ++k) CHECK(smooth[k] < smooth[k - 1]);
  fs::remove_all(dir);
}
