#include "evograsp/physics.hpp"

#include <algorithm>
#include <cmath>

#include "evograsp/error.hpp"

namespace evograsp {

void PhysicsConfig::validate() const {
  for (int i = 0; i < 3; ++i)
    if (!(alpha[i] >= 0.0) || !(gamma[i] >= 0.0) || !std::isfinite(alpha[i]) || !std::isfinite(gamma[i]))
      fail(ErrorCode::InvalidConfig, "physics weights must be finite and non-negative");
  if (!(contact_clamp > 0.0) || !(self_min_dist > 0.0))
    fail(ErrorCode::InvalidConfig, "physics.contact_clamp and physics.self_min_dist must be positive");
  hand.validate();
}

double surface_pull_from_points(const HandPoints& pts, const ObjectShape& shape, double clamp) {
  double sum = 0.0;
  for (int f = 0; f < 2; ++f) sum += std::min(std::abs(signed_distance(shape, pts.fingertip(f))), clamp);
  return 0.5 * sum;
}

double penetration_from_points(const HandPoints& pts, const ObjectShape& shape) {
  double sum = 0.0;
  for (const auto& p : pts.points) sum += std::max(0.0, -signed_distance(shape, p));
  return sum;
}

double self_penetration_from_points(const HandPoints& pts, double min_dist) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!is_left_finger(pts.link_ids[i])) continue;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (!is_right_finger(pts.link_ids[j])) continue;
      sum += std::max(0.0, min_dist - (pts.points[i] - pts.points[j]).norm());
    }
  }
  return sum;
}

double surface_pull_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg) {
  return surface_pull_from_points(forward_kinematics(pose, cfg.hand), shape, cfg.contact_clamp);
}

double penetration_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg) {
  return penetration_from_points(forward_kinematics(pose, cfg.hand), shape);
}

double self_penetration_loss(const HandPose& pose, const PhysicsConfig& cfg) {
  return self_penetration_from_points(forward_kinematics(pose, cfg.hand), cfg.self_min_dist);
}

namespace {

void accumulate(PoseVec& grad, const Eigen::Matrix<double, 2, kPoseDim>& jac, const Vec2& dp, double scale) {
  grad.noalias() += scale * (jac.row(0).transpose() * dp.x + jac.row(1).transpose() * dp.y);
}

}  // namespace

PhysicsTerms physics_terms(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg) {
  const HandPoints pts = forward_kinematics(pose, cfg.hand, true);
  PhysicsTerms out;

  std::vector<SignedDistance> sd(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) sd[i] = signed_distance_full(shape, pts.points[i]);

  for (int f = 0; f < 2; ++f) {
    const std::size_t idx = pts.fingertip_index[f];
    const double d = sd[idx].distance;
    const double a = std::abs(d);
    out.values[0] += 0.5 * std::min(a, cfg.contact_clamp);
    if (a < cfg.contact_clamp && d != 0.0)
      accumulate(out.grads[0], pts.jacobians[idx], sd[idx].gradient, d > 0 ? 0.5 : -0.5);
  }

  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (sd[i].distance < 0.0) {
      out.values[1] -= sd[i].distance;
      accumulate(out.grads[1], pts.jacobians[i], sd[i].gradient, -1.0);
    }
  }

  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!is_left_finger(pts.link_ids[i])) continue;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (!is_right_finger(pts.link_ids[j])) continue;
      const Vec2 diff = pts.points[i] - pts.points[j];
      const double dist = diff.norm();
      if (dist >= cfg.self_min_dist) continue;
      out.values[2] += cfg.self_min_dist - dist;
      if (dist == 0.0) continue;
      const Vec2 u = diff * (1.0 / dist);
      accumulate(out.grads[2], pts.jacobians[i], u, -1.0);
      accumulate(out.grads[2], pts.jacobians[j], u, 1.0);
    }
  }
  return out;
}

PhysicsValueGrad physics_loss_and_grad(const HandPose& pose, const ObjectShape& shape,
                                       const PhysicsConfig& cfg, const PhysicsWeights& weights) {
  if (!pose.finite()) fail(ErrorCode::InvalidInput, "hand pose has non-finite entries");
  for (double w : weights)
    if (!std::isfinite(w)) fail(ErrorCode::InvalidInput, "physics weights must be finite");
  PhysicsValueGrad out;
  if (weights[0] == 0.0 && weights[1] == 0.0 && weights[2] == 0.0) return out;
  const PhysicsTerms terms = physics_terms(pose, shape, cfg);
  for (int i = 0; i < 3; ++i) {
    out.value += weights[i] * terms.values[i];
    out.grad += weights[i] * terms.grads[i];
  }
  return out;
}

}  // namespace evograsp
