#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "deftrans/io.hpp"

using namespace deftrans;
using namespace deftrans::io;

namespace {

const std::filesystem::path kDir = std::filesystem::temp_directory_path() / "deftrans_io_test";

std::filesystem::path write_text(const std::string& name, const std::string& text) {
  std::filesystem::create_directories(kDir);
  std::ofstream(kDir / name) << text;
  return kDir / name;
}

}  // namespace

TEST_CASE("images and masks survive PNG") {
  std::filesystem::create_directories(kDir);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(13, 21);
  for (auto& v : img.values()) v = quantize(u(rng));
  write_image(kDir / "a.png", img);
  CHECK(read_image(kDir / "a.png") == img);

  Image raw(2, 2, std::vector<float>{-0.5f, 0.25f, 0.5f, 2.0f});
  write_image(kDir / "b.png", raw);
  CHECK(read_image(kDir / "b.png") == Image(2, 2, std::vector<float>{0.0f, quantize(0.25f), quantize(0.5f), 1.0f}));
  CHECK(quantize(0.25f) == 64.0f / 255.0f);

  SilhouetteMask m(3, 3);
  m.at(1, 1) = 1;
  m.at(2, 0) = 1;
  write_mask(kDir / "m.png", m);
  CHECK(read_mask(kDir / "m.png") == m);
  CHECK(mask_to_image(m).at(1, 1) == 1.0f);
  CHECK_THROWS(read_image(kDir / "missing.png"));
}

TEST_CASE("annotations round trip") {
  std::vector<AnnotationRecord> recs = {
      {"images/a.png", Animal::fish, {{{"left_eye", 0.1, 1e-17, true}, {"right_eye", 127.0, 3.0, false},
                                       {"tail", 1.0 / 3.0, 2.0 / 3.0, true}}}},
      {"images/b.png", Animal::worm, {}},
  };
  write_annotations(kDir / "ann.txt", recs);
  CHECK(read_annotations(kDir / "ann.txt") == recs);

  std::ifstream is(kDir / "ann.txt");
  std::string first;
  std::getline(is, first);
  CHECK(first == kAnnotationHeader);

  CHECK_THROWS_AS(write_annotations(kDir / "x.txt", {{"a b.png", Animal::worm, {}}}), std::invalid_argument);
  CHECK_THROWS_AS(write_annotations(kDir / "x.txt", {{"a.png", Animal::worm, {{{"", 1, 1, true}}}}}),
                  std::invalid_argument);
}

TEST_CASE("malformed annotation files are rejected") {
  const std::string h = std::string(kAnnotationHeader) + "\n";
  CHECK_THROWS(read_annotations(write_text("nohdr.txt", "a.png worm 0\n")));
  CHECK_THROWS(read_annotations(write_text("trunc.txt", h + "a.png fish 3 left_eye 1 2 1\n")));
  CHECK_THROWS(read_annotations(write_text("vis.txt", h + "a.png fish 1 tail 1 2 2\n")));
  CHECK_THROWS(read_annotations(write_text("trail.txt", h + "a.png fish 1 tail 1 2 1 extra\n")));
  CHECK_THROWS(read_annotations(write_text("animal.txt", h + "a.png cat 0\n")));
  CHECK_THROWS(read_annotations(kDir / "missing.txt"));
  CHECK(read_annotations(write_text("empty.txt", h)).empty());
}

TEST_CASE("grids") {
  write_grid(kDir / "grid.png", {{{Image(8, 8, 0.5f), {}}, {Image(8, 8), {{{"k", 3, 3, true}}}}}});
  auto g = read_image(kDir / "grid.png");
  CHECK(g.width() >= 16);
  CHECK_THROWS_AS(write_grid(kDir / "bad.png", {{{Image(8, 8), {}}, {Image(4, 4), {}}}}), std::invalid_argument);
  CHECK_THROWS_AS(write_grid(kDir / "bad.png", {}), std::invalid_argument);
  std::filesystem::remove_all(kDir);
}
