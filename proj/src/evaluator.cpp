#include "evograsp/evaluator.hpp"

#include <algorithm>

#include "evograsp/error.hpp"

namespace evograsp {

std::array<bool, 4> resisted_directions(const std::vector<Contact>& contacts, double pen_depth,
                                        const EvalConfig& cfg) {
  std::array<bool, 4> out{};
  if (pen_depth > cfg.pen_max) return out;
  for (int d = 0; d < 4; ++d)
    for (const auto& c : contacts)
      if (c.normal.dot(kShakeDirections[d]) >= cfg.normal_margin) out[d] = true;
  return out;
}

GraspOutcome shake_test(const HandPose& pose, const ObjectShape& shape, const EvalConfig& cfg) {
  const HandPoints pts = forward_kinematics(pose, cfg.hand);
  GraspOutcome out;
  double depth = 0.0;
  for (const auto& p : pts.points) depth = std::max(depth, -signed_distance(shape, p));
  for (int f = 0; f < 2; ++f) {
    const SignedDistance sd = signed_distance_full(shape, pts.fingertip(f));
    if (std::abs(sd.distance) <= cfg.contact_eps) out.contacts.push_back({f, sd.gradient});
  }
  out.pen = depth * 1000.0;
  out.resisted = resisted_directions(out.contacts, depth, cfg);
  return out;
}

Metrics evaluate_outcomes(const std::vector<GraspOutcome>& outcomes, double wall_time) {
  if (outcomes.empty()) fail(ErrorCode::InvalidInput, "cannot evaluate an empty batch");
  Metrics m;
  int all = 0, one = 0;
  double pen = 0.0;
  for (const auto& o : outcomes) {
    all += o.all_resisted();
    one += o.any_resisted();
    pen += o.pen;
  }
  const double n = static_cast<double>(outcomes.size());
  m.suc_all = 100.0 * all / n;
  m.suc_one = 100.0 * one / n;
  m.pen_mean = pen / n;
  m.wall_time = wall_time;
  return m;
}

Metrics evaluate_batch(const std::vector<HandPose>& poses, const std::vector<ObjectShape>& shapes,
                       double wall_time, const EvalConfig& cfg) {
  if (poses.empty()) fail(ErrorCode::InvalidInput, "cannot evaluate an empty batch");
  if (shapes.size() != 1 && shapes.size() != poses.size())
    fail(ErrorCode::InvalidInput, "shapes must be one per pose or a single shared shape");
  std::vector<GraspOutcome> outcomes;
  outcomes.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i)
    outcomes.push_back(shake_test(poses[i], shapes.size() == 1 ? shapes[0] : shapes[i], cfg));
  return evaluate_outcomes(outcomes, wall_time);
}

PreferenceLabels label_preferences(const std::vector<GraspOutcome>& outcomes) {
  if (outcomes.empty()) fail(ErrorCode::InvalidInput, "cannot label an empty batch");
  PreferenceLabels out;
  out.labels.reserve(outcomes.size());
  for (const auto& o : outcomes) {
    const bool good = o.all_resisted();
    out.labels.push_back(good ? 1 : -1);
    (good ? out.n_suc : out.n_fail) += 1;
  }
  return out;
}

}  // namespace evograsp
