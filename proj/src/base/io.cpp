#include "deftrans/io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "deftrans/format.hpp"

namespace deftrans::io {

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

cv::Mat to_mat(const Image& img) {
  cv::Mat m(img.height(), img.width(), CV_8UC1);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) m.at<std::uint8_t>(y, x) = to_byte(img.at(y, x));
  return m;
}

cv::Mat read_gray(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read image " + path.string());
  return m;
}

void write_png(const std::filesystem::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

float quantize(float v) { return static_cast<float>(to_byte(v)) / 255.0f; }

Image quantized(const Image& img) {
  Image out = img;
  for (auto& v : out.values()) v = quantize(v);
  return out;
}

Image read_image(const std::filesystem::path& path) {
  const cv::Mat m = read_gray(path);
  Image img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) img.at(y, x) = static_cast<float>(m.at<std::uint8_t>(y, x)) / 255.0f;
  return img;
}

void write_image(const std::filesystem::path& path, const Image& img) { write_png(path, to_mat(img)); }

SilhouetteMask read_mask(const std::filesystem::path& path) {
  const cv::Mat m = read_gray(path);
  SilhouetteMask mask(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<std::uint8_t>(y, x) != 0 ? 1 : 0;
  return mask;
}

void write_mask(const std::filesystem::path& path, const SilhouetteMask& mask) {
  cv::Mat m(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  write_png(path, m);
}

Image mask_to_image(const SilhouetteMask& mask) {
  Image img(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) img.values()[i] = mask.values()[i] ? 1.0f : 0.0f;
  return img;
}

void write_annotations(const std::filesystem::path& path,
                       const std::vector<AnnotationRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kAnnotationHeader << '\n';
  for (const auto& r : records) {
    if (r.image_path.find_first_of(" \t\n") != std::string::npos)
      throw std::invalid_argument("image paths must not contain whitespace");
    os << r.image_path << ' ' << to_string(r.animal) << ' ' << r.keypoints.size();
    for (const auto& kp : r.keypoints.points) {
      if (kp.name.empty() || kp.name.find_first_of(" \t\n") != std::string::npos)
        throw std::invalid_argument("joint names must be non-empty and whitespace free");
      os << ' ' << kp.name << ' ' << format_double(kp.x) << ' ' << format_double(kp.y) << ' '
         << (kp.visible ? 1 : 0);
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open annotations " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kAnnotationHeader)
    throw std::runtime_error(path.string() + ": missing or unsupported annotation header");
  std::vector<AnnotationRecord> records;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    AnnotationRecord r;
    std::string animal, count_text;
    if (!(ss >> r.image_path >> animal >> count_text))
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed record");
    r.animal = animal_from_string(animal);
    const int count = std::stoi(count_text);
    for (int j = 0; j < count; ++j) {
      Keypoint kp;
      std::string x, y, v;
      if (!(ss >> kp.name >> x >> y >> v))
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": truncated keypoints");
      kp.x = parse_double(x);
      kp.y = parse_double(y);
      if (v != "0" && v != "1")
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": bad visibility flag");
      kp.visible = v == "1";
      r.keypoints.points.push_back(std::move(kp));
    }
    std::string extra;
    if (ss >> extra)
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": trailing fields");
    records.push_back(std::move(r));
  }
  return records;
}

void write_grid(const std::filesystem::path& path, const std::vector<std::vector<GridCell>>& rows) {
  if (rows.empty() || rows.front().empty()) throw std::invalid_argument("empty grid");
  const int h = rows.front().front().image.height(), w = rows.front().front().image.width();
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const int pad = 2;
  cv::Mat canvas(static_cast<int>(rows.size()) * (h + pad) + pad,
                 static_cast<int>(cols) * (w + pad) + pad, CV_8UC3, cv::Scalar(40, 40, 40));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& cell = rows[r][c];
      if (cell.image.height() != h || cell.image.width() != w)
        throw std::invalid_argument("grid tiles must share one size");
      cv::Mat tile;
      cv::cvtColor(to_mat(cell.image), tile, cv::COLOR_GRAY2BGR);
      for (const auto& kp : cell.keypoints.points) {
        if (!kp.visible) continue;
        cv::circle(tile, cv::Point(static_cast<int>(std::lround(kp.x)), static_cast<int>(std::lround(kp.y))),
                   1, cv::Scalar(0, 0, 255), cv::FILLED);
      }
      tile.copyTo(canvas(cv::Rect(pad + static_cast<int>(c) * (w + pad),
                                  pad + static_cast<int>(r) * (h + pad), w, h)));
    }
  }
  write_png(path, canvas);
}

}  // namespace deftrans::io
