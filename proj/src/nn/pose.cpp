#include "deftrans/pose.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "deftrans/format.hpp"
#include "deftrans/io.hpp"
#include "deftrans/tensors.hpp"
#include "deftrans/trainer.hpp"

namespace deftrans::pose {

using torch::indexing::Slice;

warp::HeatmapStack render_heatmaps(const KeypointSet& keypoints, int image_size, int scale, double sigma2) {
  if (scale < 1 || image_size % scale != 0) throw std::invalid_argument("image size must be a multiple of the scale");
  const int h = image_size / scale;
  const auto j_count = static_cast<int64_t>(keypoints.size());
  auto maps = torch::zeros({1, j_count, h, h}, torch::kFloat32);
  auto acc = maps.accessor<float, 4>();
  for (int64_t j = 0; j < j_count; ++j) {
    const auto& kp = keypoints[static_cast<std::size_t>(j)];
    if (!kp.visible) continue;
    const double cx = kp.x / scale, cy = kp.y / scale;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        acc[0][j][y][x] = static_cast<float>(std::exp(-d2 / (2.0 * sigma2)));
      }
  }
  return {maps, sigma2, scale};
}

torch::Tensor pi_loss(const std::vector<torch::Tensor>& stack_outputs, const torch::Tensor& target,
                      const SkeletonDef& skeleton, bool use_group) {
  if (stack_outputs.empty()) throw std::invalid_argument("no stack outputs");
  for (const auto& out : stack_outputs)
    if (out.sizes() != target.sizes()) throw std::invalid_argument("prediction and target shapes differ");
  if (target.size(1) != skeleton.joint_count()) throw std::invalid_argument("channel count does not match skeleton");
  std::vector<torch::Tensor> per_perm;
  const std::size_t n_perm = use_group ? skeleton.symmetries.size() : 1;
  for (std::size_t p = 0; p < n_perm; ++p) {
    const auto& perm = skeleton.symmetries[p];
    std::vector<int64_t> idx(perm.begin(), perm.end());
    auto permuted = target.index_select(1, torch::tensor(idx, torch::kInt64));
    torch::Tensor sum;
    for (const auto& out : stack_outputs) {
      auto mse = (out - permuted).square().mean({1, 2, 3});
      sum = sum.defined() ? sum + mse : mse;
    }
    per_perm.push_back(sum);
  }
  return std::get<0>(torch::stack(per_perm, 0).min(0)).mean();
}

namespace {

torch::Tensor rotation_thetas(const std::vector<double>& radians) {
  std::vector<torch::Tensor> mats;
  for (double a : radians) mats.push_back(warp::AffineParams::similarity(1.0, -a, 0.0, 0.0, 1, torch::kFloat32).matrix);
  return torch::cat(mats, 0);
}

torch::Tensor rotate_each(const torch::Tensor& images, const std::vector<double>& radians) {
  warp::AffineParams theta{rotation_thetas(radians)};
  return warp::bilinear_sample(images, warp::affine_field(theta, images.size(2), images.size(3)));
}

}  // namespace

torch::Tensor rotate_images(const torch::Tensor& images, double radians) {
  return rotate_each(images, std::vector<double>(static_cast<std::size_t>(images.size(0)), radians));
}

KeypointSet rotate_keypoints(const KeypointSet& keypoints, int image_size, double radians) {
  KeypointSet out = keypoints;
  const double c = std::cos(radians), s = std::sin(radians);
  for (auto& kp : out.points) {
    const double nx = warp::normalized_coord(kp.x, image_size), ny = warp::normalized_coord(kp.y, image_size);
    kp.x = warp::pixel_coord(c * nx - s * ny, image_size);
    kp.y = warp::pixel_coord(s * nx + c * ny, image_size);
    if (kp.x < 0.0 || kp.y < 0.0 || kp.x > image_size - 1 || kp.y > image_size - 1) kp.visible = false;
  }
  return out;
}

void PoseSettings::validate() const {
  if (image_size != 64 && image_size != 128) throw std::invalid_argument("image_size must be 64 or 128");
  if (base_width < 2) throw std::invalid_argument("base_width must be at least 2");
  if (batch_size < 1 || epochs < 1) throw std::invalid_argument("batch_size and epochs must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (decay_end < decay_start) throw std::invalid_argument("decay_end must not precede decay_start");
  if (rotation_deg < 0.0) throw std::invalid_argument("rotation_deg must be non-negative");
}

PoseModel create_pose_model(const PoseSettings& settings) {
  settings.validate();
  auto spec = nets::NetworkSpec::defaults(nets::NetworkKind::hourglass, settings.image_size, settings.base_width);
  spec.out_channels = skeleton_for(settings.animal).joint_count();
  auto ptr = nets::make_network(spec, settings.seed * 8 + 6);
  return {nets::StackedHourglass(std::dynamic_pointer_cast<nets::StackedHourglassImpl>(ptr)), spec};
}

PoseTrainResult train_pose(PoseModel& model, const std::vector<PoseSample>& samples, const PoseSettings& s,
                           const std::filesystem::path& log_path, const std::filesystem::path& dump_dir) {
  s.validate();
  if (samples.empty()) throw std::invalid_argument("pose training needs at least one sample");
  const auto& skel = skeleton_for(s.animal);
  const bool use_group = s.pi_training.value_or(skel.pi_training);
  std::vector<Image> imgs;
  for (const auto& smp : samples) {
    if (static_cast<int>(smp.keypoints.size()) != skel.joint_count())
      throw std::invalid_argument("keypoint count does not match the skeleton");
    imgs.push_back(smp.image);
  }
  const auto images = to_tensor(imgs);
  if (images.size(2) != s.image_size) throw std::invalid_argument("sample resolution does not match image_size");

  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(s.lr));
  const int n = static_cast<int>(samples.size());
  const int bs = std::min(s.batch_size, n);
  const int per_epoch = (n + bs - 1) / bs;
  std::ofstream log;
  if (!log_path.empty()) {
    if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
    log.open(log_path);
    log << "step,epoch,lr,loss\n";
  }

  PoseTrainResult result;
  model.net->train(true);
  int64_t step = 0;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    const double lr = train::linear_decay(s.lr, epoch, s.decay_start, s.decay_end);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
    const auto order = train::epoch_order(s.seed, epoch, n);
    for (int k = 0; k < per_epoch; ++k) {
      std::vector<int64_t> idx;
      std::vector<double> angles;
      std::vector<torch::Tensor> targets;
      for (int i = k * bs; i < std::min(n, (k + 1) * bs); ++i) {
        const int item = order[static_cast<std::size_t>(i)];
        idx.push_back(item);
        double a = 0.0;
        if (s.augment && s.rotation_deg > 0.0) {
          std::mt19937_64 rng(s.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) * 1000003ULL +
                              static_cast<uint64_t>(item));
          const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
          a = (2.0 * u - 1.0) * s.rotation_deg * std::numbers::pi / 180.0;
        }
        angles.push_back(a);
        const auto kp = a == 0.0 ? samples[static_cast<std::size_t>(item)].keypoints
                                 : rotate_keypoints(samples[static_cast<std::size_t>(item)].keypoints, s.image_size, a);
        targets.push_back(render_heatmaps(kp, s.image_size).maps);
      }
      auto batch = images.index_select(0, torch::tensor(idx, torch::kInt64));
      if (s.augment && s.rotation_deg > 0.0) batch = rotate_each(batch, angles);
      const auto target = torch::cat(targets, 0);

      auto outputs = model.net->forward(batch);
      auto loss = pi_loss(outputs, target, skel, use_group);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        if (!dump_dir.empty()) {
          std::vector<std::vector<io::GridCell>> rows;
          for (int64_t i = 0; i < batch.size(0); ++i)
            rows.push_back({{image_from_tensor(torch::nan_to_num(batch[i], 0.0)), {}}});
          io::write_grid(dump_dir / "batch.png", rows);
          std::ofstream(dump_dir / "reason.txt") << "non-finite pose loss at step " << step << '\n';
        }
        throw NumericalError("non-finite pose loss at step " + std::to_string(step));
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      PoseLogRow row{step, epoch, lr, value};
      if (log.is_open()) log << step << ',' << epoch << ',' << format_double(lr) << ',' << format_double(value) << '\n';
      result.log.push_back(row);
      ++step;
    }
  }
  result.steps = step;
  model.net->train(false);
  return result;
}

Prediction decode_heatmaps(const torch::Tensor& maps, const SkeletonDef& skeleton, int scale) {
  auto m = maps.dim() == 4 ? maps.squeeze(0) : maps;
  if (m.dim() != 3 || m.size(0) != skeleton.joint_count())
    throw std::invalid_argument("heatmaps must be [J, h, w] with J matching the skeleton");
  m = m.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  auto acc = m.accessor<float, 3>();
  Prediction p;
  for (int64_t j = 0; j < m.size(0); ++j) {
    float best = acc[j][0][0];
    int64_t by = 0, bx = 0;
    for (int64_t y = 0; y < m.size(1); ++y)
      for (int64_t x = 0; x < m.size(2); ++x)
        if (acc[j][y][x] > best) {
          best = acc[j][y][x];
          by = y;
          bx = x;
        }
    p.keypoints.points.push_back({skeleton.joints[static_cast<std::size_t>(j)], static_cast<double>(scale * bx),
                                  static_cast<double>(scale * by), true});
    p.peaks.push_back(best);
    p.low_confidence.push_back(best < kLowConfidence);
  }
  return p;
}

std::vector<Prediction> predict(PoseModel& model, const std::vector<Image>& images, const SkeletonDef& skeleton,
                                int batch_size) {
  torch::NoGradGuard guard;
  model.net->train(false);
  std::vector<Prediction> out;
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                             images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), start + batch_size)));
    auto maps = nets::hourglass_forward(model.net, to_tensor(chunk)).back().maps;
    for (int64_t i = 0; i < maps.size(0); ++i) out.push_back(decode_heatmaps(maps[i], skeleton));
  }
  return out;
}

void save_pose_model(const std::filesystem::path& path, const PoseModel& model, uint64_t seed, int64_t step) {
  nets::save_checkpoint(path, *model.net, {model.spec, seed, step, 1});
}

PoseModel load_pose_model(const std::filesystem::path& path) {
  const auto meta = nets::read_checkpoint_meta(path);
  if (meta.spec.kind != nets::NetworkKind::hourglass) throw std::runtime_error(path.string() + " is not a pose model");
  auto ptr = nets::make_network(meta.spec, 0);
  PoseModel m{nets::StackedHourglass(std::dynamic_pointer_cast<nets::StackedHourglassImpl>(ptr)), meta.spec};
  nets::load_checkpoint(path, *m.net, nets::NetworkKind::hourglass);
  m.net->train(false);
  return m;
}

}  // namespace deftrans::pose
