#pragma once

// On-disk formats: 8-bit grayscale PNG rasters and the line-delimited
// keypoint annotation file shared by generated and manually annotated data.

#include <filesystem>
#include <string>
#include <vector>

#include "deftrans/raster.hpp"
#include "deftrans/skeleton.hpp"

namespace deftrans::io {

/// Rounds to the nearest 8-bit level so the value survives a PNG round trip.
float quantize(float v);
Image quantized(const Image& img);

Image read_image(const std::filesystem::path& path);
/// Writes round(255 * clamp(v, 0, 1)).
void write_image(const std::filesystem::path& path, const Image& img);
/// Nonzero pixels read as foreground.
SilhouetteMask read_mask(const std::filesystem::path& path);
/// Writes 0 / 255.
void write_mask(const std::filesystem::path& path, const SilhouetteMask& mask);

Image mask_to_image(const SilhouetteMask& mask);

struct AnnotationRecord {
  std::string image_path;
  Animal animal = Animal::worm;
  KeypointSet keypoints;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

inline constexpr const char* kAnnotationHeader = "# deftrans-annotations v1";

/// Header line, then one record per line:
///   <image path> <animal> <J> (<name> <x> <y> <visible 0|1>){J}
/// Coordinates use the shortest round-trip decimal form.
void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records);
std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);

/// Image tile with optional keypoints drawn as dots.
struct GridCell {
  Image image;
  KeypointSet keypoints;
};
/// One row per entry of `rows`; all tiles must share one size.
void write_grid(const std::filesystem::path& path, const std::vector<std::vector<GridCell>>& rows);

}  // namespace deftrans::io
