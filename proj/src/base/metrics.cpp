#include "deftrans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "deftrans/format.hpp"

namespace deftrans::metrics {

namespace {

void check_sets(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("prediction and ground-truth counts differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != gt[i].size())
      throw std::invalid_argument("keypoint counts differ in sample " + std::to_string(i));
  }
}

double joint_error(const Keypoint& p, const Keypoint& g) { return std::hypot(p.x - g.x, p.y - g.y); }

struct SampleStats {
  std::size_t visible = 0;
  std::size_t correct = 0;
  double sse = 0.0;
};

SampleStats sample_stats(const KeypointSet& pred, const KeypointSet& gt, double threshold) {
  SampleStats s;
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (!gt[j].visible) continue;
    const double e = joint_error(pred[j], gt[j]);
    ++s.visible;
    if (e < threshold) ++s.correct;
    // Non-finite predictions count as infinitely wrong.
    s.sse += std::isfinite(e) ? e * e : std::numeric_limits<double>::infinity();
  }
  return s;
}

}  // namespace

double pck(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
           double threshold_px) {
  check_sets(pred, gt);
  std::size_t visible = 0, correct = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto s = sample_stats(pred[i], gt[i], threshold_px);
    visible += s.visible;
    correct += s.correct;
  }
  return visible == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(visible);
}

double rmse(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt) {
  check_sets(pred, gt);
  std::size_t visible = 0;
  double sse = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto s = sample_stats(pred[i], gt[i], 0.0);
    visible += s.visible;
    sse += s.sse;
  }
  return visible == 0 ? 0.0 : std::sqrt(sse / static_cast<double>(visible));
}

std::vector<double> per_joint_rmse(const std::vector<KeypointSet>& pred,
                                   const std::vector<KeypointSet>& gt) {
  check_sets(pred, gt);
  if (gt.empty()) return {};
  const auto joints = gt.front().size();
  std::vector<double> sse(joints, 0.0);
  std::vector<std::size_t> count(joints, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].size() != joints) throw std::invalid_argument("joint count varies across samples");
    for (std::size_t j = 0; j < joints; ++j) {
      if (!gt[i][j].visible) continue;
      const double e = joint_error(pred[i][j], gt[i][j]);
      sse[j] += e * e;
      ++count[j];
    }
  }
  std::vector<double> out(joints, 0.0);
  for (std::size_t j = 0; j < joints; ++j)
    out[j] = count[j] == 0 ? 0.0 : std::sqrt(sse[j] / static_cast<double>(count[j]));
  return out;
}

double auc(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt, double t_min,
           double t_max, double step) {
  if (!(step > 0) || t_max < t_min) throw std::invalid_argument("invalid AUC threshold range");
  double sum = 0.0;
  int n = 0;
  for (int k = 0;; ++k) {
    const double t = t_min + k * step;
    if (t > t_max + 1e-9) break;
    sum += pck(pred, gt, t);
    ++n;
  }
  return sum / n;
}

KeypointSet permute(const KeypointSet& pred, const Permutation& perm) {
  if (perm.size() != pred.size()) throw std::invalid_argument("permutation size mismatch");
  KeypointSet out = pred;
  for (std::size_t j = 0; j < perm.size(); ++j) {
    const auto& src = pred[static_cast<std::size_t>(perm[j])];
    out[j].x = src.x;
    out[j].y = src.y;
    out[j].visible = src.visible;
  }
  return out;
}

double pi_metric(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
                 const std::vector<Permutation>& group, BaseMetric base, double threshold_px) {
  check_sets(pred, gt);
  if (group.empty()) throw std::invalid_argument("symmetry group must contain the identity");
  std::size_t visible = 0, correct = 0;
  double sse = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    SampleStats best;
    bool first = true;
    for (const auto& perm : group) {
      const auto s = sample_stats(permute(pred[i], perm), gt[i], threshold_px);
      const bool better = base == BaseMetric::pck ? s.correct > best.correct : s.sse < best.sse;
      if (first || better) best = s;
      first = false;
    }
    visible += best.visible;
    correct += best.correct;
    sse += best.sse;
  }
  if (visible == 0) return 0.0;
  if (base == BaseMetric::pck) return 100.0 * static_cast<double>(correct) / static_cast<double>(visible);
  return std::sqrt(sse / static_cast<double>(visible));
}

std::vector<KeypointSet> pi_assign(const std::vector<KeypointSet>& pred,
                                   const std::vector<KeypointSet>& gt,
                                   const std::vector<Permutation>& group) {
  check_sets(pred, gt);
  std::vector<KeypointSet> out;
  out.reserve(pred.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    KeypointSet chosen = pred[i];
    for (const auto& perm : group) {
      auto candidate = permute(pred[i], perm);
      const double sse = sample_stats(candidate, gt[i], 0.0).sse;
      if (sse < best) {
        best = sse;
        chosen = std::move(candidate);
      }
    }
    out.push_back(std::move(chosen));
  }
  return out;
}

double ssim(const Image& a, const Image& b, const SsimParams& p) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("ssim: image sizes differ");
  if (a.height() < p.window || a.width() < p.window)
    throw std::invalid_argument("ssim: image smaller than the window");

  const int r = p.window / 2;
  std::vector<double> g(static_cast<std::size_t>(p.window));
  for (int k = 0; k < p.window; ++k) g[k] = std::exp(-((k - r) * (k - r)) / (2.0 * p.sigma * p.sigma));
  const double gsum = std::accumulate(g.begin(), g.end(), 0.0);
  for (auto& v : g) v /= gsum;

  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  double total = 0.0;
  std::size_t count = 0;
  for (int y = 0; y + p.window <= a.height(); ++y) {
    for (int x = 0; x + p.window <= a.width(); ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int u = 0; u < p.window; ++u) {
        for (int v = 0; v < p.window; ++v) {
          const double w = g[u] * g[v];
          const double va = a.at(y + u, x + v), vb = b.at(y + u, x + v);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double mean_ssim_against_references(const std::vector<Image>& generated,
                                    const std::vector<Image>& references, uint64_t seed,
                                    const SsimParams& params) {
  if (generated.empty() || references.empty())
    throw std::invalid_argument("ssim protocol needs generated and reference images");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, references.size() - 1);
  double sum = 0.0;
  for (const auto& img : generated) sum += ssim(img, references[pick(rng)], params);
  return sum / static_cast<double>(generated.size());
}

EvalReport evaluate(const std::vector<KeypointSet>& pred, const std::vector<KeypointSet>& gt,
                    const std::vector<Permutation>& group, double t_min, double t_max) {
  check_sets(pred, gt);
  EvalReport r;
  r.samples = gt.size();
  r.joints = gt.empty() ? 0 : gt.front().size();
  r.permutation_invariant = group.size() > 1;
  r.auc_min = t_min;
  r.auc_max = t_max;
  std::vector<Permutation> effective = group;
  if (effective.empty()) {
    Permutation id(r.joints);
    std::iota(id.begin(), id.end(), 0);
    effective.push_back(id);
  }
  for (double t = t_min; t <= t_max + 1e-9; t += 1.0) {
    r.thresholds.push_back(t);
    r.pck.push_back(pck(pred, gt, t));
    r.pi_pck.push_back(pi_metric(pred, gt, effective, BaseMetric::pck, t));
  }
  r.rmse = rmse(pred, gt);
  r.pi_rmse = pi_metric(pred, gt, effective, BaseMetric::rmse);
  r.per_joint_rmse = per_joint_rmse(pi_assign(pred, gt, effective), gt);
  r.auc = std::accumulate(r.pck.begin(), r.pck.end(), 0.0) / static_cast<double>(r.pck.size());
  r.pi_auc =
      std::accumulate(r.pi_pck.begin(), r.pi_pck.end(), 0.0) / static_cast<double>(r.pi_pck.size());
  return r;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "threshold,pck,pi_pck\n";
  for (std::size_t i = 0; i < report.thresholds.size(); ++i) {
    os << format_double(report.thresholds[i]) << ',' << format_double(report.pck[i]) << ','
       << format_double(report.pi_pck[i]) << '\n';
  }
}

void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["joints"] = r.joints;
  j["permutation_invariant"] = r.permutation_invariant;
  j["rmse"] = r.rmse;
  j["pi_rmse"] = r.pi_rmse;
  j["auc"] = r.auc;
  j["pi_auc"] = r.pi_auc;
  j["auc_range"] = {r.auc_min, r.auc_max};
  j["per_joint_rmse"] = r.per_joint_rmse;
  j["ssim"] = {{"window", r.ssim_params.window},
               {"sigma", r.ssim_params.sigma},
               {"k1", r.ssim_params.k1},
               {"k2", r.ssim_params.k2},
               {"dynamic_range", r.ssim_params.dynamic_range}};
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

EvalReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "threshold,pck,pi_pck") throw std::runtime_error("unexpected report header");
  EvalReport r;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c, ',');
    r.thresholds.push_back(parse_double(a));
    r.pck.push_back(parse_double(b));
    r.pi_pck.push_back(parse_double(c));
  }
  if (!r.thresholds.empty()) {
    r.auc_min = r.thresholds.front();
    r.auc_max = r.thresholds.back();
    r.auc = std::accumulate(r.pck.begin(), r.pck.end(), 0.0) / static_cast<double>(r.pck.size());
    r.pi_auc = std::accumulate(r.pi_pck.begin(), r.pi_pck.end(), 0.0) /
               static_cast<double>(r.pi_pck.size());
  }
  return r;
}

}  // namespace deftrans::metrics
