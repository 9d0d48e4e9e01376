#include "deftrans/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "deftrans/format.hpp"
#include "deftrans/io.hpp"
#include "deftrans/tensors.hpp"

namespace deftrans::train {

using torch::indexing::Slice;

GanLosses loss_shape(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  if (!torch::isfinite(real_logits).all().item<bool>() || !torch::isfinite(fake_logits).all().item<bool>())
    throw NumericalError("non-finite discriminator logits");
  auto disc = torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean();
  auto gen = torch::softplus(-fake_logits).mean();
  return {gen, disc};
}

torch::Tensor loss_regularizer(const warp::DeformationField& field, const warp::GradientField& grads,
                               const RegularizerWeights& w) {
  if (w.alpha < 0.0 || w.beta < 0.0) throw std::invalid_argument("regularizer weights must be non-negative");
  const auto n = field.batch(), h = field.height(), wd = field.width();
  const double sx = warp::identity_spacing(static_cast<int>(wd));
  const double sy = warp::identity_spacing(static_cast<int>(h));
  auto smooth = (grads.gx - sx).square().mean() + (grads.gy - sy).square().mean();
  auto id = warp::identity_grid(n, h, wd, field.phi.options());
  auto magnitude = torch::linalg_vector_norm(field.phi - id, 2, {-1}).mean();
  return w.alpha * smooth + w.beta * magnitude;
}

AppearanceLosses loss_appearance(const torch::Tensor& real_logits, const torch::Tensor& fake_logits,
                                 const torch::Tensor& reconstruction, const torch::Tensor& target) {
  if (reconstruction.sizes() != target.sizes())
    throw std::invalid_argument("reconstruction and target resolution differ");
  auto gan = loss_shape(real_logits, fake_logits);
  return {gan.gen, gan.disc, (reconstruction - target).abs().mean()};
}

double linear_decay(double base, double epoch, double decay_start, double decay_end) {
  if (epoch < decay_start) return base;
  if (decay_end <= decay_start || epoch >= decay_end) return 0.0;
  return base * (1.0 - (epoch - decay_start) / (decay_end - decay_start));
}

void TranslationSettings::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  if (image_size != 64 && image_size != 128) throw std::invalid_argument("image_size must be 64 or 128");
  if (base_width < 2) throw std::invalid_argument("base_width must be at least 2");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  positive(lr_stn, "lr_stn");
  positive(lr_deform, "lr_deform");
  positive(lr_shape_disc, "lr_shape_disc");
  positive(lr_appearance, "lr_appearance");
  positive(lr_image_disc, "lr_image_disc");
  if (decay_end < decay_start) throw std::invalid_argument("decay_end must not precede decay_start");
  if (reg.alpha < 0.0 || reg.beta < 0.0) throw std::invalid_argument("alpha and beta must be non-negative");
  if (w_shape_adv < 0.0 || w_image_adv < 0.0 || w_sup < 0.0)
    throw std::invalid_argument("loss weights must be non-negative");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  if (pretrain_steps < 0) throw std::invalid_argument("pretrain_steps must be non-negative");
  if (log_every < 1 || checkpoint_every < 1 || sample_every < 1)
    throw std::invalid_argument("log/checkpoint/sample intervals must be at least 1");
}

// --- models -----------------------------------------------------------------------

namespace {

template <typename Holder>
Holder build(const nets::NetworkSpec& spec, uint64_t seed) {
  auto ptr = nets::make_network(spec, seed);
  return Holder(std::dynamic_pointer_cast<typename Holder::Impl>(ptr));
}

std::vector<torch::Tensor> params_of(const torch::nn::Module& m) { return m.parameters(); }

void append(std::vector<torch::Tensor>& out, const std::vector<torch::Tensor>& in) {
  out.insert(out.end(), in.begin(), in.end());
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
  for (auto p : params) p.requires_grad_(on);
}

}  // namespace

TranslationModels TranslationModels::create(int image_size, int base_width, uint64_t seed) {
  using nets::NetworkKind;
  TranslationModels m;
  auto spec = [&](NetworkKind kind) {
    auto s = nets::NetworkSpec::defaults(kind, image_size, base_width);
    s.max_width = 8 * base_width;
    return s;
  };
  m.stn_spec = spec(NetworkKind::stn);
  m.deform_spec = spec(NetworkKind::deform_gen);
  m.appearance_spec = spec(NetworkKind::unet_gen);
  m.shape_disc_spec = spec(NetworkKind::patch_disc_shape);
  m.image_disc_spec = spec(NetworkKind::patch_disc_image);
  m.stn = build<nets::SpatialTransformer>(m.stn_spec, seed * 8 + 1);
  m.deform = build<nets::DeformGenerator>(m.deform_spec, seed * 8 + 2);
  m.appearance = build<nets::UNetGenerator>(m.appearance_spec, seed * 8 + 3);
  m.shape_disc = build<nets::PatchDiscriminator>(m.shape_disc_spec, seed * 8 + 4);
  m.image_disc = build<nets::PatchDiscriminator>(m.image_disc_spec, seed * 8 + 5);
  return m;
}

std::vector<torch::Tensor> TranslationModels::generator_parameters() const {
  std::vector<torch::Tensor> out;
  append(out, params_of(*stn));
  append(out, params_of(*deform));
  append(out, params_of(*appearance));
  return out;
}

std::vector<torch::Tensor> TranslationModels::discriminator_parameters() const {
  std::vector<torch::Tensor> out;
  append(out, params_of(*shape_disc));
  append(out, params_of(*image_disc));
  return out;
}

void TranslationModels::train(bool on) {
  stn->train(on);
  deform->train(on);
  appearance->train(on);
  shape_disc->train(on);
  image_disc->train(on);
}

ShapeOutput shape_forward(TranslationModels& m, const torch::Tensor& images, const torch::Tensor& masks,
                          double tau) {
  const auto h = images.size(2), w = images.size(3);
  ShapeOutput out;
  out.theta = nets::stn_forward(m.stn, images);
  auto global = warp::affine_field(out.theta, h, w);
  auto aligned = warp::bilinear_sample(images, global);
  out.grads = warp::clamp_gradients(nets::deform_gen_forward(m.deform, aligned));
  out.local = warp::integrate_gradients(out.grads);
  out.composed = warp::apply_affine(out.theta, out.local);
  out.soft_mask = warp::bilinear_sample(masks, out.composed);
  out.mask = warp::threshold_ste(out.soft_mask, tau);
  return out;
}

double identity_deviation(TranslationModels& m, const torch::Tensor& images) {
  torch::NoGradGuard guard;
  const auto n = images.size(0), h = images.size(2), w = images.size(3);
  auto theta = nets::stn_forward(m.stn, images);
  auto aligned = warp::bilinear_sample(images, warp::affine_field(theta, h, w));
  auto field = warp::integrate_gradients(warp::clamp_gradients(nets::deform_gen_forward(m.deform, aligned)));
  auto id = warp::identity_grid(n, h, w, field.phi.options());
  return (field.phi - id).abs().mean().item<double>();
}

PretrainResult pretrain_identity(TranslationModels& m, const torch::Tensor& train_images,
                                 const torch::Tensor& heldout_images, int steps, double lr,
                                 const RegularizerWeights& w, double tolerance) {
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  PretrainResult result;
  const auto h = train_images.size(2), wd = train_images.size(3);
  torch::optim::Adam opt(m.deform->parameters(), torch::optim::AdamOptions(lr).betas({0.5, 0.999}));
  torch::Tensor aligned;
  {
    torch::NoGradGuard guard;
    auto theta = nets::stn_forward(m.stn, train_images);
    aligned = warp::bilinear_sample(train_images, warp::affine_field(theta, h, wd));
  }
  for (int s = 0; s < steps; ++s) {
    auto grads = warp::clamp_gradients(nets::deform_gen_forward(m.deform, aligned));
    auto field = warp::integrate_gradients(grads);
    auto loss = loss_regularizer(field, grads, w);
    if (!std::isfinite(loss.item<double>())) throw NumericalError("non-finite regularizer during identity pretraining");
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.losses.push_back(loss.item<double>());
  }
  result.steps = steps;
  result.deviation = identity_deviation(m, heldout_images);
  if (!(result.deviation < tolerance)) {
    std::ostringstream msg;
    msg << "identity pretraining did not converge: mean |phi - id| = " << result.deviation
        << " after " << steps << " steps (tolerance " << tolerance << ")";
    throw std::runtime_error(msg.str());
  }
  return result;
}

// --- checkpoints ---------------------------------------------------------------------

std::vector<int> epoch_order(uint64_t seed, int64_t epoch, int count) {
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) * 0xD1B54A32D192ED03ULL + 1);
  for (int i = count - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

namespace {

std::string step_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld", static_cast<long long>(step));
  return buf;
}

struct Optimizers {
  torch::optim::Adam stn, deform, appearance, shape_disc, image_disc;

  Optimizers(TranslationModels& m, const TranslationSettings& s)
      : stn(m.stn->parameters(), opts(s.lr_stn, s)),
        deform(m.deform->parameters(), opts(s.lr_deform, s)),
        appearance(m.appearance->parameters(), opts(s.lr_appearance, s)),
        shape_disc(m.shape_disc->parameters(), opts(s.lr_shape_disc, s)),
        image_disc(m.image_disc->parameters(), opts(s.lr_image_disc, s)) {}

  static torch::optim::AdamOptions opts(double lr, const TranslationSettings& s) {
    return torch::optim::AdamOptions(lr).betas({s.beta1, s.beta2});
  }

  std::vector<std::pair<std::string, torch::optim::Adam*>> all() {
    return {{"stn", &stn}, {"deform", &deform}, {"appearance", &appearance},
            {"shape_disc", &shape_disc}, {"image_disc", &image_disc}};
  }
};

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

void save_optimizers(const std::filesystem::path& dir, Optimizers& opts) {
  for (auto& [name, opt] : opts.all()) torch::save(*opt, (dir / (name + ".optim")).string());
}

void load_optimizers(const std::filesystem::path& dir, Optimizers& opts) {
  for (auto& [name, opt] : opts.all()) torch::load(*opt, (dir / (name + ".optim")).string());
}

}  // namespace

void save_models(const std::filesystem::path& dir, const TranslationModels& m, uint64_t seed, int64_t step) {
  std::filesystem::create_directories(dir);
  auto meta = [&](const nets::NetworkSpec& spec) { return nets::CheckpointMeta{spec, seed, step, 1}; };
  nets::save_checkpoint(dir / "stn.ckpt", *m.stn, meta(m.stn_spec));
  nets::save_checkpoint(dir / "deform_gen.ckpt", *m.deform, meta(m.deform_spec));
  nets::save_checkpoint(dir / "unet_gen.ckpt", *m.appearance, meta(m.appearance_spec));
  nets::save_checkpoint(dir / "disc_shape.ckpt", *m.shape_disc, meta(m.shape_disc_spec));
  nets::save_checkpoint(dir / "disc_image.ckpt", *m.image_disc, meta(m.image_disc_spec));
}

TranslationModels load_models(const std::filesystem::path& dir) {
  using nets::NetworkKind;
  TranslationModels m;
  auto load = [&](const char* file, NetworkKind kind, nets::NetworkSpec& spec_out, auto& holder) {
    const auto path = dir / file;
    const auto meta = nets::read_checkpoint_meta(path);
    if (meta.spec.kind != kind) throw std::runtime_error(path.string() + ": unexpected network kind");
    spec_out = meta.spec;
    using Holder = std::decay_t<decltype(holder)>;
    holder = build<Holder>(meta.spec, 0);
    nets::load_checkpoint(path, *holder, kind);
  };
  load("stn.ckpt", NetworkKind::stn, m.stn_spec, m.stn);
  load("deform_gen.ckpt", NetworkKind::deform_gen, m.deform_spec, m.deform);
  load("unet_gen.ckpt", NetworkKind::unet_gen, m.appearance_spec, m.appearance);
  load("disc_shape.ckpt", NetworkKind::patch_disc_shape, m.shape_disc_spec, m.shape_disc);
  load("disc_image.ckpt", NetworkKind::patch_disc_image, m.image_disc_spec, m.image_disc);
  return m;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  std::filesystem::path best;
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0 &&
          std::filesystem::exists(e.path() / "state.json") && e.path().filename() > best.filename())
        best = e.path();
  if (best.empty()) throw std::runtime_error("no checkpoint found under " + dir.string());
  return best;
}

// --- training loop ----------------------------------------------------------------------

namespace {

torch::Tensor gather(const torch::Tensor& t, const std::vector<int>& idx) {
  std::vector<int64_t> i64(idx.begin(), idx.end());
  return t.index_select(0, torch::tensor(i64, torch::kInt64));
}

void write_log_header_if_new(const std::filesystem::path& path) {
  if (std::filesystem::exists(path)) return;
  std::ofstream os(path);
  os << kLogHeader << '\n';
}

std::string log_line(const LogRow& r) {
  return std::to_string(r.step) + "," + format_double(r.loss_ds) + "," + format_double(r.loss_di) + "," +
         format_double(r.loss_gs) + "," + format_double(r.loss_gi) + "," + format_double(r.reg) + "," +
         format_double(r.sup);
}

// Keeps the header and every row with step < `keep_below`.
void truncate_log(const std::filesystem::path& path, int64_t keep_below) {
  std::ifstream is(path);
  if (!is) return;
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (lines.empty() || std::stoll(line.substr(0, line.find(','))) < keep_below) lines.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : lines) os << l << '\n';
}

void write_samples(const std::filesystem::path& path, TranslationModels& m, const torch::Tensor& images,
                   const torch::Tensor& masks, const std::vector<KeypointSet>& keypoints, double tau) {
  auto tr = translate_batch(m, images, masks, keypoints, tau);
  std::vector<std::vector<io::GridCell>> rows;
  for (int64_t i = 0; i < images.size(0); ++i) {
    rows.push_back({{image_from_tensor(images[i]), keypoints[static_cast<std::size_t>(i)]},
                    {image_from_tensor(masks[i]), {}},
                    {image_from_tensor(tr.masks[i]), {}},
                    {image_from_tensor(tr.images[i]), tr.keypoints[static_cast<std::size_t>(i)]}});
  }
  io::write_grid(path, rows);
}

void dump_batch(const std::filesystem::path& dir, int64_t step, const torch::Tensor& ia, const torch::Tensor& sa,
                const torch::Tensor& ib, const torch::Tensor& sb, const std::vector<std::string>& ids,
                const std::string& reason) {
  std::filesystem::create_directories(dir);
  std::vector<std::vector<io::GridCell>> rows;
  for (int64_t i = 0; i < ia.size(0); ++i) {
    auto clean = [](const torch::Tensor& t) { return image_from_tensor(torch::nan_to_num(t.detach(), 0.0)); };
    rows.push_back({{clean(ia[i]), {}}, {clean(sa[i]), {}}, {clean(ib[i]), {}}, {clean(sb[i]), {}}});
  }
  io::write_grid(dir / "batch.png", rows);
  std::ofstream os(dir / "reason.txt");
  os << "step " << step << ": " << reason << "\nsource items:";
  for (const auto& id : ids) os << ' ' << id;
  os << '\n';
}

}  // namespace

TrainResult train_translation(const TranslationSettings& s, const data::DomainSet& source,
                              const data::DomainSet& target, const std::filesystem::path& run_dir,
                              bool resume) {
  s.validate();
  if (source.items.empty() || target.items.empty()) throw std::invalid_argument("both domains need images");
  std::vector<Image> ia, ib;
  std::vector<SilhouetteMask> sa, sb;
  std::vector<KeypointSet> ka;
  std::vector<std::string> ids;
  for (const auto& item : source.items) {
    if (!item.mask) throw std::runtime_error("source item " + item.id + " has no silhouette");
    ia.push_back(item.image);
    sa.push_back(*item.mask);
    ka.push_back(item.keypoints.value_or(KeypointSet{}));
    ids.push_back(item.id);
  }
  data::DomainSet tgt = target;
  data::fill_silhouettes(tgt);
  if (tgt.items.empty()) throw std::runtime_error("no target item has a usable silhouette");
  for (const auto& item : tgt.items) {
    ib.push_back(item.image);
    sb.push_back(*item.mask);
  }
  const auto IA = to_tensor(ia), SA = to_tensor(sa), IB = to_tensor(ib), SB = to_tensor(sb);
  if (IA.size(2) != s.image_size || IB.size(2) != s.image_size)
    throw std::invalid_argument("dataset resolution does not match image_size");

  const int na = static_cast<int>(IA.size(0)), nb = static_cast<int>(IB.size(0));
  const int bs = std::min(s.batch_size, na);
  const int64_t per_epoch = na / bs;
  int64_t total = per_epoch * s.epochs;
  if (s.max_steps > 0) total = std::min(total, s.max_steps);

  std::filesystem::create_directories(run_dir / "checkpoints");
  std::filesystem::create_directories(run_dir / "samples");
  const auto log_path = run_dir / "log.csv";

  TrainResult result;
  result.run_dir = run_dir;
  TranslationModels m;
  std::unique_ptr<Optimizers> optimizers;
  int64_t step = 0;

  if (resume) {
    const auto ckpt = latest_checkpoint(run_dir);
    m = load_models(ckpt);
    optimizers = std::make_unique<Optimizers>(m, s);
    load_optimizers(ckpt, *optimizers);
    std::ifstream st(ckpt / "state.json");
    step = nlohmann::json::parse(st).at("step").get<int64_t>();
    truncate_log(log_path, step);
  } else {
    std::filesystem::remove(log_path);
    m = TranslationModels::create(s.image_size, s.base_width, s.seed);
    const int n_pre = std::min(8, na);
    auto train_idx = std::vector<int>();
    auto held_idx = std::vector<int>();
    for (int i = 0; i < n_pre; ++i) train_idx.push_back(i);
    for (int i = n_pre; i < std::min(na, 2 * n_pre); ++i) held_idx.push_back(i);
    if (held_idx.empty()) held_idx = train_idx;
    result.pretrain = pretrain_identity(m, gather(IA, train_idx), gather(IA, held_idx), s.pretrain_steps,
                                        s.pretrain_lr, s.reg, s.pretrain_tolerance);
    optimizers = std::make_unique<Optimizers>(m, s);
  }
  Optimizers& opts = *optimizers;
  write_log_header_if_new(log_path);
  std::ofstream log(log_path, std::ios::app);

  const auto disc_params = m.discriminator_parameters();
  std::vector<int> sample_idx;
  for (int i = 0; i < std::min(4, na); ++i) sample_idx.push_back(i);

  auto checkpoint = [&](int64_t at) {
    const auto dir = run_dir / "checkpoints" / step_name(at);
    save_models(dir, m, s.seed, at);
    save_optimizers(dir, opts);
    std::ofstream st(dir / "state.json");
    st << nlohmann::json{{"step", at}, {"seed", s.seed}}.dump() << '\n';
  };

  m.train(true);
  while (step < total) {
    const int64_t epoch = step / per_epoch;
    const int64_t k = step % per_epoch;
    set_lr(opts.stn, linear_decay(s.lr_stn, static_cast<double>(epoch), s.decay_start, s.decay_end));
    set_lr(opts.deform, linear_decay(s.lr_deform, static_cast<double>(epoch), s.decay_start, s.decay_end));
    set_lr(opts.appearance, linear_decay(s.lr_appearance, static_cast<double>(epoch), s.decay_start, s.decay_end));
    set_lr(opts.shape_disc, linear_decay(s.lr_shape_disc, static_cast<double>(epoch), s.decay_start, s.decay_end));
    set_lr(opts.image_disc, linear_decay(s.lr_image_disc, static_cast<double>(epoch), s.decay_start, s.decay_end));

    const auto order_a = epoch_order(2 * s.seed, epoch, na);
    const auto order_b = epoch_order(2 * s.seed + 1, epoch, nb);
    std::vector<int> idx_a, idx_b;
    std::vector<std::string> batch_ids;
    for (int i = 0; i < bs; ++i) {
      idx_a.push_back(order_a[static_cast<std::size_t>(k * bs + i)]);
      idx_b.push_back(order_b[static_cast<std::size_t>((k * bs + i) % nb)]);
      batch_ids.push_back(ids[static_cast<std::size_t>(idx_a.back())]);
    }
    const auto ia_b = gather(IA, idx_a), sa_b = gather(SA, idx_a);
    const auto ib_b = gather(IB, idx_b), sb_b = gather(SB, idx_b);

    LogRow row;
    row.step = step;
    try {
      auto out = shape_forward(m, ia_b, sa_b, s.tau);
      auto fake_img = nets::unet_forward(m.appearance, s.detach_shape ? out.mask.detach() : out.mask);

      // discriminators on detached generator outputs
      set_requires_grad(disc_params, true);
      auto ds_loss = loss_shape(nets::disc_shape_forward(m.shape_disc, sb_b),
                                nets::disc_shape_forward(m.shape_disc, out.mask.detach()));
      auto di_loss = loss_shape(nets::disc_image_forward(m.image_disc, ib_b),
                                nets::disc_image_forward(m.image_disc, fake_img.detach()));
      row.loss_ds = ds_loss.disc.item<double>();
      row.loss_di = di_loss.disc.item<double>();
      if (!std::isfinite(row.loss_ds) || !std::isfinite(row.loss_di))
        throw NumericalError("non-finite discriminator loss");
      opts.shape_disc.zero_grad();
      opts.image_disc.zero_grad();
      (ds_loss.disc + di_loss.disc).backward();
      opts.shape_disc.step();
      opts.image_disc.step();

      // joint generator step
      set_requires_grad(disc_params, false);
      auto gs = torch::softplus(-nets::disc_shape_forward(m.shape_disc, out.mask)).mean();
      auto app = loss_appearance(nets::disc_image_forward(m.image_disc, ib_b),
                                 nets::disc_image_forward(m.image_disc, fake_img),
                                 nets::unet_forward(m.appearance, sb_b), ib_b);
      auto reg = loss_regularizer(out.local, out.grads, s.reg);
      auto total_loss = s.w_shape_adv * gs + s.w_image_adv * app.gen + reg + s.w_sup * app.sup;
      row.loss_gs = gs.item<double>();
      row.loss_gi = app.gen.item<double>();
      row.reg = reg.item<double>();
      row.sup = app.sup.item<double>();
      if (!std::isfinite(row.loss_gs) || !std::isfinite(row.loss_gi) || !std::isfinite(row.reg) ||
          !std::isfinite(row.sup) || !std::isfinite(total_loss.item<double>()))
        throw NumericalError("non-finite generator loss");
      opts.stn.zero_grad();
      opts.deform.zero_grad();
      opts.appearance.zero_grad();
      total_loss.backward();
      opts.stn.step();
      opts.deform.step();
      opts.appearance.step();
      set_requires_grad(disc_params, true);
    } catch (const NumericalError& e) {
      log.flush();
      dump_batch(run_dir / "nan_dump", step, ia_b, sa_b, ib_b, sb_b, batch_ids, e.what());
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step) + "; batch dumped to " +
                           (run_dir / "nan_dump").string());
    }
    if (step % s.log_every == 0) log << log_line(row) << '\n';
    result.log.push_back(row);
    ++step;
    if (step % s.checkpoint_every == 0 || step == total) {
      log.flush();
      checkpoint(step);
    }
    if (step % s.sample_every == 0 || step == total) {
      std::vector<KeypointSet> kp;
      for (int i : sample_idx) kp.push_back(ka[static_cast<std::size_t>(i)]);
      write_samples(run_dir / "samples" / (step_name(step) + ".png"), m, gather(IA, sample_idx),
                    gather(SA, sample_idx), kp, s.tau);
      m.train(true);
    }
  }
  if (total == 0 || result.log.empty()) checkpoint(step);
  result.steps = step;
  return result;
}

// --- translation ------------------------------------------------------------------------

Translation translate_batch(TranslationModels& m, const torch::Tensor& images, const torch::Tensor& masks,
                            const std::vector<KeypointSet>& keypoints, double tau) {
  if (static_cast<int64_t>(keypoints.size()) != images.size(0))
    throw std::invalid_argument("one keypoint set per image required");
  if (images.size(2) != m.stn_spec.image_size)
    throw std::invalid_argument("image resolution does not match the checkpoint");
  torch::NoGradGuard guard;
  m.train(false);
  auto out = shape_forward(m, images, masks, tau);
  Translation t;
  t.masks = out.mask;
  t.images = nets::unet_forward(m.appearance, out.mask);
  t.fields = out.composed;
  for (std::size_t i = 0; i < keypoints.size(); ++i)
    t.keypoints.push_back(warp::warp_keypoints(keypoints[i], out.composed, static_cast<int64_t>(i)));
  return t;
}

SimilarityEstimate estimate_similarity(const warp::AffineParams& theta) {
  auto fwd = theta.inverse().matrix.to(torch::kFloat64);
  auto det = fwd.index({Slice(), 0, 0}) * fwd.index({Slice(), 1, 1}) -
             fwd.index({Slice(), 0, 1}) * fwd.index({Slice(), 1, 0});
  auto rot = torch::atan2(fwd.index({Slice(), 1, 0}), fwd.index({Slice(), 0, 0}));
  SimilarityEstimate e;
  e.scale = torch::sqrt(det).mean().item<double>();
  e.rotation_deg = rot.mean().item<double>() * 180.0 / std::numbers::pi;
  e.tx = fwd.index({Slice(), 0, 2}).mean().item<double>();
  e.ty = fwd.index({Slice(), 1, 2}).mean().item<double>();
  return e;
}

}  // namespace deftrans::train
