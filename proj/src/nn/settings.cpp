#include "deftrans/settings.hpp"

#include <stdexcept>

namespace deftrans {

train::TranslationSettings translation_settings(const config::RunConfig& cfg) {
  train::TranslationSettings s;
  s.image_size = static_cast<int>(cfg.integer("image_size"));
  s.base_width = static_cast<int>(cfg.integer("translation.base_width"));
  s.seed = static_cast<uint64_t>(cfg.integer("seed"));
  s.batch_size = static_cast<int>(cfg.integer("translation.batch_size"));
  s.epochs = static_cast<int>(cfg.integer("translation.epochs"));
  s.max_steps = cfg.integer("translation.max_steps");
  s.lr_stn = cfg.number("translation.lr_stn");
  s.lr_deform = cfg.number("translation.lr_deform");
  s.lr_shape_disc = cfg.number("translation.lr_shape_disc");
  s.lr_appearance = cfg.number("translation.lr_appearance");
  s.lr_image_disc = cfg.number("translation.lr_image_disc");
  s.decay_start = cfg.number("translation.decay_start");
  s.decay_end = cfg.number("translation.decay_end");
  s.beta1 = cfg.number("translation.beta1");
  s.beta2 = cfg.number("translation.beta2");
  s.reg = {cfg.number("translation.alpha"), cfg.number("translation.beta")};
  s.w_shape_adv = cfg.number("translation.w_shape_adv");
  s.w_image_adv = cfg.number("translation.w_image_adv");
  s.w_sup = cfg.number("translation.w_sup");
  s.detach_shape = cfg.flag("translation.detach_shape");
  s.tau = cfg.number("translation.tau");
  s.pretrain_steps = static_cast<int>(cfg.integer("translation.pretrain_steps"));
  s.pretrain_lr = cfg.number("translation.pretrain_lr");
  s.log_every = static_cast<int>(cfg.integer("translation.log_every"));
  s.checkpoint_every = static_cast<int>(cfg.integer("translation.checkpoint_every"));
  s.sample_every = static_cast<int>(cfg.integer("translation.sample_every"));
  s.validate();
  return s;
}

pose::PoseSettings pose_settings(const config::RunConfig& cfg) {
  pose::PoseSettings s;
  s.animal = animal_from_string(cfg.text("animal"));
  s.image_size = static_cast<int>(cfg.integer("image_size"));
  s.base_width = static_cast<int>(cfg.integer("pose.base_width"));
  s.seed = static_cast<uint64_t>(cfg.integer("seed"));
  s.batch_size = static_cast<int>(cfg.integer("pose.batch_size"));
  s.epochs = static_cast<int>(cfg.integer("pose.epochs"));
  s.lr = cfg.number("pose.lr");
  s.decay_start = cfg.number("pose.decay_start");
  s.decay_end = cfg.number("pose.decay_end");
  s.rotation_deg = cfg.number("pose.rotation_deg");
  s.augment = cfg.flag("pose.augment");
  const auto pi = cfg.text("pose.pi_training");
  if (pi == "true") s.pi_training = true;
  else if (pi == "false") s.pi_training = false;
  else if (pi != "auto") throw std::invalid_argument("pose.pi_training must be auto, true or false");
  s.validate();
  return s;
}

data::Sim2SimConfig benchmark_config(const config::RunConfig& cfg) {
  data::Sim2SimConfig b;
  b.seed = static_cast<uint64_t>(cfg.integer("seed"));
  b.image_size = static_cast<int>(cfg.integer("image_size"));
  b.source_train = static_cast<int>(cfg.integer("data.source_train"));
  b.target_train = static_cast<int>(cfg.integer("data.target_train"));
  b.target_test = static_cast<int>(cfg.integer("data.target_test"));
  b.scale = cfg.number("data.scale");
  b.rotation_deg = cfg.number("data.rotation_deg");
  b.translation = {cfg.number("data.tx"), cfg.number("data.ty")};
  b.width_factor = cfg.number("data.width_factor");
  if (b.source_train < 1 || b.target_train < 1 || b.target_test < 1)
    throw std::invalid_argument("benchmark set sizes must be positive");
  return b;
}

}  // namespace deftrans
