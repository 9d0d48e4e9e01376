#pragma once

#include <string>
#include <vector>

#include "deftrans/metrics.hpp"
#include "deftrans/raster.hpp"

namespace deftrans {

enum class Animal { fly, worm, fish };

std::string to_string(Animal animal);
Animal animal_from_string(const std::string& name);

/// Joint layout and symmetry group of one animal class.
struct SkeletonDef {
  Animal animal = Animal::worm;
  std::vector<std::string> joints;
  /// Joint reorderings under which a prediction is equally valid; contains the identity first.
  std::vector<metrics::Permutation> symmetries;
  /// Whether the pose loss takes the minimum over `symmetries` during training.
  bool pi_training = false;

  int joint_count() const { return static_cast<int>(joints.size()); }
};

/// fly: 30 joints (6 legs x 5), PI evaluation over whole-leg permutations of
/// the three evaluated legs; worm: 7 joints, head/tail reversal, PI training;
/// fish: 3 joints, no symmetry.
const SkeletonDef& skeleton_for(Animal animal);

/// Checks that every permutation is a bijection on joint indices.
bool is_valid_group(const SkeletonDef& skeleton);

}  // namespace deftrans
