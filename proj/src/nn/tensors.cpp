#include "deftrans/tensors.hpp"

#include <cstring>
#include <stdexcept>

namespace deftrans {

namespace {

template <typename T>
torch::Tensor stack_rasters(const std::vector<Raster<T>>& rasters) {
  if (rasters.empty()) throw std::invalid_argument("no rasters to convert");
  const int h = rasters.front().height(), w = rasters.front().width();
  auto out = torch::empty({static_cast<int64_t>(rasters.size()), 1, h, w}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (const auto& r : rasters) {
    if (r.height() != h || r.width() != w) throw std::invalid_argument("rasters differ in size");
    for (const T& v : r.values()) *dst++ = static_cast<float>(v);
  }
  return out;
}

torch::Tensor plane(const torch::Tensor& t) {
  auto p = t.dim() == 3 ? t.squeeze(0) : t;
  if (p.dim() != 2) throw std::invalid_argument("expected a single-channel plane");
  return p.detach().to(torch::kCPU, torch::kFloat32).contiguous();
}

}  // namespace

torch::Tensor to_tensor(const std::vector<Image>& images) { return stack_rasters(images); }
torch::Tensor to_tensor(const std::vector<SilhouetteMask>& masks) { return stack_rasters(masks); }
torch::Tensor to_tensor(const Image& image) { return stack_rasters(std::vector<Image>{image}); }

Image image_from_tensor(const torch::Tensor& t) {
  const auto p = plane(t);
  Image img(static_cast<int>(p.size(0)), static_cast<int>(p.size(1)));
  std::memcpy(img.values().data(), p.data_ptr<float>(), img.size() * sizeof(float));
  return img;
}

SilhouetteMask mask_from_tensor(const torch::Tensor& t) {
  const auto p = plane(t);
  SilhouetteMask m(static_cast<int>(p.size(0)), static_cast<int>(p.size(1)));
  const float* src = p.data_ptr<float>();
  for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = src[i] != 0.0f ? 1 : 0;
  return m;
}

}  // namespace deftrans
