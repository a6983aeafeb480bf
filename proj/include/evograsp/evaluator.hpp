#pragma once

#include <array>
#include <vector>

#include "evograsp/geometry.hpp"

namespace evograsp {

struct EvalConfig {
  double contact_eps = 0.02;   // |sdf| at a fingertip that counts as contact
  double normal_margin = 0.3;  // min n.d for a contact to resist direction d
  double pen_max = 0.05;       // max penetration depth (length units) for any resistance
  HandModel hand{};
};

/// Shake directions in order: +X, -X, +Y, -Y.
inline constexpr std::array<Vec2, 4> kShakeDirections{Vec2{1, 0}, Vec2{-1, 0}, Vec2{0, 1}, Vec2{0, -1}};

struct Contact {
  int fingertip = 0;
  Vec2 normal;
};

struct GraspOutcome {
  std::array<bool, 4> resisted{};
  double pen = 0.0;  // max penetration depth in milli-units
  std::vector<Contact> contacts;

  bool all_resisted() const { return resisted[0] && resisted[1] && resisted[2] && resisted[3]; }
  bool any_resisted() const { return resisted[0] || resisted[1] || resisted[2] || resisted[3]; }
};

/// Resistance decision from contacts and penetration alone.
std::array<bool, 4> resisted_directions(const std::vector<Contact>& contacts, double pen_depth,
                                        const EvalConfig& cfg);

GraspOutcome shake_test(const HandPose& pose, const ObjectShape& shape, const EvalConfig& cfg = {});

struct Metrics {
  double suc_all = 0.0;   // percent
  double suc_one = 0.0;   // percent
  double pen_mean = 0.0;  // milli-units
  double wall_time = 0.0; // seconds
};

Metrics evaluate_outcomes(const std::vector<GraspOutcome>& outcomes, double wall_time);
/// `shapes` is either parallel to `poses` or a single shape shared by all.
Metrics evaluate_batch(const std::vector<HandPose>& poses, const std::vector<ObjectShape>& shapes,
                       double wall_time, const EvalConfig& cfg = {});

struct PreferenceLabels {
  std::vector<int> labels;  // +1 preferred, -1 not
  int n_suc = 0;
  int n_fail = 0;
};

PreferenceLabels label_preferences(const std::vector<GraspOutcome>& outcomes);

}  // namespace evograsp
