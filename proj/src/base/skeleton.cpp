#include "deftrans/skeleton.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace deftrans {

std::string to_string(Animal animal) {
  switch (animal) {
    case Animal::fly: return "fly";
    case Animal::worm: return "worm";
    case Animal::fish: return "fish";
  }
  throw std::invalid_argument("unknown animal");
}

Animal animal_from_string(const std::string& name) {
  if (name == "fly") return Animal::fly;
  if (name == "worm") return Animal::worm;
  if (name == "fish") return Animal::fish;
  throw std::invalid_argument("unknown animal class '" + name + "'");
}

namespace {

metrics::Permutation identity_perm(int n) {
  metrics::Permutation p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

SkeletonDef make_worm() {
  SkeletonDef s;
  s.animal = Animal::worm;
  s.joints = {"head", "body1", "body2", "body3", "body4", "body5", "tail"};
  auto id = identity_perm(7);
  auto reversed = id;
  std::reverse(reversed.begin(), reversed.end());
  s.symmetries = {id, reversed};
  s.pi_training = true;
  return s;
}

SkeletonDef make_fish() {
  SkeletonDef s;
  s.animal = Animal::fish;
  s.joints = {"left_eye", "right_eye", "tail"};
  s.symmetries = {identity_perm(3)};
  return s;
}

SkeletonDef make_fly() {
  SkeletonDef s;
  s.animal = Animal::fly;
  const char* legs[] = {"LF", "LM", "LH", "RF", "RM", "RH"};
  const char* segments[] = {"coxa", "femur", "tibia", "tarsus", "claw"};
  for (auto* leg : legs)
    for (auto* seg : segments) s.joints.push_back(std::string(leg) + "_" + seg);

  // Whole-leg permutations among the three evaluated (left) legs.
  std::vector<int> order = {0, 1, 2};
  do {
    auto p = identity_perm(30);
    for (int leg = 0; leg < 3; ++leg)
      for (int k = 0; k < 5; ++k) p[static_cast<std::size_t>(leg * 5 + k)] = order[leg] * 5 + k;
    s.symmetries.push_back(p);
  } while (std::next_permutation(order.begin(), order.end()));
  s.pi_training = false;
  return s;
}

}  // namespace

const SkeletonDef& skeleton_for(Animal animal) {
  static const SkeletonDef worm = make_worm();
  static const SkeletonDef fish = make_fish();
  static const SkeletonDef fly = make_fly();
  switch (animal) {
    case Animal::worm: return worm;
    case Animal::fish: return fish;
    case Animal::fly: return fly;
  }
  throw std::invalid_argument("unknown animal");
}

bool is_valid_group(const SkeletonDef& skeleton) {
  const auto n = skeleton.joints.size();
  if (skeleton.symmetries.empty() || skeleton.symmetries.front() != identity_perm(static_cast<int>(n)))
    return false;
  for (const auto& p : skeleton.symmetries) {
    if (p.size() != n) return false;
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != identity_perm(static_cast<int>(n))) return false;
  }
  return true;
}

}  // namespace deftrans
