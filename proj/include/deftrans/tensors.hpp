#pragma once

// Conversions between rasters and float32 tensors [N, 1, H, W].

#include <torch/torch.h>

#include <vector>

#include "deftrans/raster.hpp"

namespace deftrans {

torch::Tensor to_tensor(const std::vector<Image>& images);
torch::Tensor to_tensor(const std::vector<SilhouetteMask>& masks);
torch::Tensor to_tensor(const Image& image);

/// t is [H, W] or [1, H, W]; values are copied as they are.
Image image_from_tensor(const torch::Tensor& t);
/// Nonzero entries become 1.
SilhouetteMask mask_from_tensor(const torch::Tensor& t);

}  // namespace deftrans
