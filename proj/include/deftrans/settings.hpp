#pragma once

// Typed settings derived from a RunConfig.

#include "deftrans/config.hpp"
#include "deftrans/data.hpp"
#include "deftrans/pose.hpp"
#include "deftrans/trainer.hpp"

namespace deftrans {

train::TranslationSettings translation_settings(const config::RunConfig& cfg);
pose::PoseSettings pose_settings(const config::RunConfig& cfg);
data::Sim2SimConfig benchmark_config(const config::RunConfig& cfg);

}  // namespace deftrans
