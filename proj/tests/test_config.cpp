#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "deftrans/config.hpp"

using namespace deftrans::config;

TEST_CASE("presets resolve through their parents") {
  auto names = preset_names();
  for (const char* n : {"default", "worm", "fish", "fly", "sim2sim", "smoke"})
    CHECK(std::find(names.begin(), names.end(), n) != names.end());

  auto smoke = RunConfig::from_preset("smoke");
  CHECK(smoke.preset() == "smoke");
  CHECK(smoke.integer("translation.max_steps") == 200);  // own value
  CHECK(smoke.integer("image_size") == 64);              // from sim2sim
  CHECK(smoke.text("animal") == "worm");                 // from worm
  CHECK(smoke.number("translation.tau") == 0.5);         // default

  auto fly = RunConfig::from_preset("fly");
  CHECK(fly.number("translation.lr_appearance") == 2e-3);
  CHECK(fly.text("data.kind") == "ingested");
  CHECK_THROWS_AS(RunConfig::from_preset("nope"), std::invalid_argument);
}

TEST_CASE("unknown keys and mistyped values are rejected") {
  auto cfg = RunConfig::from_preset("default");
  CHECK_THROWS_AS(cfg.set("translation.epoch", 3), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set_text("nope", "1"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("translation.epochs", 2.5), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("pose.augment", 1), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("animal", 3), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set_text("translation.epochs", "12x"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set_text("translation.alpha", "ten"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set_text("pose.augment", "yes"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.flag("translation.alpha"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.integer("translation.alpha"), std::invalid_argument);

  cfg.set_text("translation.epochs", "12");
  cfg.set_text("translation.alpha", "2.5e-1");
  cfg.set_text("pose.augment", "false");
  cfg.set("translation.beta", 3);  // integers are accepted for real-valued keys
  CHECK(cfg.integer("translation.epochs") == 12);
  CHECK(cfg.number("translation.alpha") == 0.25);
  CHECK_FALSE(cfg.flag("pose.augment"));
  CHECK(cfg.number("translation.beta") == 3.0);
}

TEST_CASE("config files and snapshots") {
  const auto dir = std::filesystem::temp_directory_path() / "deftrans_config_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "run.json";
  std::ofstream(file) << R"({"preset": "sim2sim", "seed": 3, "pose.epochs": 5})";

  auto cfg = RunConfig::from_file(file);
  CHECK(cfg.preset() == "sim2sim");
  CHECK(cfg.integer("seed") == 3);
  CHECK(cfg.integer("pose.epochs") == 5);
  CHECK(RunConfig::from_file(file, "smoke").integer("translation.max_steps") == 200);

  cfg.write_snapshot(dir / "snap.json");
  auto again = RunConfig::from_file(dir / "snap.json");
  CHECK(again.snapshot() == cfg.snapshot());
  CHECK(cfg.snapshot().begin().key() == "preset");

  std::ofstream(file) << R"({"seed": 3, "typo": 1})";
  CHECK_THROWS_AS(RunConfig::from_file(file), std::invalid_argument);
  std::ofstream(file) << "[1, 2";
  CHECK_THROWS_AS(RunConfig::from_file(file), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_file(dir / "missing.json"), std::invalid_argument);
  std::filesystem::remove_all(dir);
}
