#pragma once

#include <array>

#include "evograsp/geometry.hpp"

namespace evograsp {

/// Weights for the three physics terms, in order: surface pull, external
/// penetration, self penetration.
using PhysicsWeights = std::array<double, 3>;

struct PhysicsConfig {
  PhysicsWeights alpha{0.1, 0.1, 0.1};  // distillation weights
  PhysicsWeights gamma{0.0125, 0.0125, 0.00625};  // sampling guidance weights
  double contact_clamp = 0.1;
  double self_min_dist = 0.08;
  HandModel hand{};

  void validate() const;
};

double surface_pull_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg = {});
double penetration_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg = {});
double self_penetration_loss(const HandPose& pose, const PhysicsConfig& cfg = {});

/// Pointwise forms, shared with the evaluator and tests.
double surface_pull_from_points(const HandPoints& pts, const ObjectShape& shape, double clamp);
double penetration_from_points(const HandPoints& pts, const ObjectShape& shape);
double self_penetration_from_points(const HandPoints& pts, double min_dist);

struct PhysicsTerms {
  std::array<double, 3> values{};
  std::array<PoseVec, 3> grads{PoseVec::Zero(), PoseVec::Zero(), PoseVec::Zero()};
};

/// All three terms with exact gradients through the kinematics and the
/// distance field. Hinge and clamp kinks take subgradient zero.
PhysicsTerms physics_terms(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg);

struct PhysicsValueGrad {
  double value = 0.0;
  PoseVec grad = PoseVec::Zero();
};

PhysicsValueGrad physics_loss_and_grad(const HandPose& pose, const ObjectShape& shape,
                                       const PhysicsConfig& cfg, const PhysicsWeights& weights);

}  // namespace evograsp
