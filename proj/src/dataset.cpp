#include "evograsp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

DatasetStats compute_stats(const std::vector<std::vector<HandPose>>& grasps) {
  DatasetStats s;
  s.mean.setZero();
  std::size_t n = 0;
  for (const auto& per_obj : grasps)
    for (const auto& g : per_obj) {
      s.mean += g.values();
      ++n;
    }
  if (n == 0) return {};
  s.mean /= static_cast<double>(n);
  PoseVec var = PoseVec::Zero();
  for (const auto& per_obj : grasps)
    for (const auto& g : per_obj) var += (g.values() - s.mean).cwiseAbs2();
  var /= static_cast<double>(n);
  for (int i = 0; i < kPoseDim; ++i) s.std[i] = var[i] > 1e-12 ? std::sqrt(var[i]) : 1.0;
  return s;
}

std::size_t GraspDataset::total_grasps() const {
  std::size_t n = 0;
  for (const auto& g : grasps) n += g.size();
  return n;
}

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kMinCurvatureRadius = 0.01;

// d normal / d point for the distance-field normal at p, with the radius of
// curvature around a vertex floored at kMinCurvatureRadius.
Eigen::Matrix2d normal_jacobian(const ObjectShape& shape, const SignedDistance& sd) {
  if (sd.distance <= 0.0) return Eigen::Matrix2d::Zero();
  for (const auto& v : shape.vertices()) {
    if ((sd.closest - v).norm() < 1e-12) {
      const Eigen::Vector2d n(sd.gradient.x, sd.gradient.y);
      return (Eigen::Matrix2d::Identity() - n * n.transpose()) / std::max(sd.distance, kMinCurvatureRadius);
    }
  }
  return Eigen::Matrix2d::Zero();
}

}  // namespace

double closure_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg, double margin,
                    PoseVec* grad) {
  const HandPoints pts = forward_kinematics(pose, cfg.hand, grad != nullptr);
  std::array<SignedDistance, 2> sd;
  for (int f = 0; f < 2; ++f) sd[f] = signed_distance_full(shape, pts.fingertip(f));
  double loss = 0.0;
  for (const Vec2& d : kShakeDirections) {
    const int best = sd[0].gradient.dot(d) >= sd[1].gradient.dot(d) ? 0 : 1;
    const double arg = margin - sd[best].gradient.dot(d);
    loss += softplus(arg);
    if (!grad) continue;
    const Eigen::Matrix2d dn = normal_jacobian(shape, sd[best]);
    const Eigen::Vector2d dp = -sigmoid(arg) * (dn.transpose() * Eigen::Vector2d(d.x, d.y));
    *grad += pts.jacobians[pts.fingertip_index[best]].transpose() * dp;
  }
  return loss;
}

HandPose refine_grasp(const HandPose& init, const ObjectShape& shape, const SynthConfig& cfg) {
  HandPose pose = init;
  const PhysicsWeights w{cfg.weights[0], cfg.weights[1], cfg.weights[2]};
  for (int step = 0; step < cfg.refine_steps; ++step) {
    PoseVec grad = physics_loss_and_grad(pose, shape, cfg.physics, w).grad;
    if (cfg.weights[3] != 0.0) {
      PoseVec cg = PoseVec::Zero();
      closure_loss(pose, shape, cfg.physics, cfg.eval.normal_margin, &cg);
      grad += cfg.weights[3] * cg;
    }
    pose.values() -= cfg.refine_lr * grad;
    for (int j = 3; j < kPoseDim; ++j) pose.values()[j] = std::clamp(pose.values()[j], -kJointLimit, kJointLimit);
  }
  return pose;
}

namespace {

// Point where the ray from `origin` along `dir` leaves the convex polygon.
Vec2 ray_exit(const ObjectShape& shape, const Vec2& origin, const Vec2& dir) {
  double t_exit = std::numeric_limits<double>::infinity();
  const auto& v = shape.vertices();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Vec2& n = shape.edge_normal(i);
    const double rate = n.dot(dir);
    if (rate > 1e-12) t_exit = std::min(t_exit, n.dot(v[i] - origin) / rate);
  }
  return origin + dir * t_exit;
}

// Joint angles placing a two-link finger based at `base` (palm frame) on
// `target`; `outward` is +1 for the left finger and -1 for the right one.
std::pair<double, double> finger_ik(const Vec2& base, const Vec2& target, const HandModel& hand, double outward) {
  const Vec2 q = target - base;
  const double l1 = hand.link1_len, l2 = hand.link2_len;
  const double d = std::clamp(q.norm(), std::abs(l1 - l2) + 1e-9, l1 + l2);
  const double c2 = std::clamp((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2), -1.0, 1.0);
  const double t2 = -outward * std::acos(c2);
  const double bearing = std::atan2(-q.x, q.y);
  const double t1 = bearing - std::atan2(l2 * std::sin(t2), l1 + l2 * std::cos(t2));
  return {std::clamp(t1, -kJointLimit, kJointLimit), std::clamp(t2, -kJointLimit, kJointLimit)};
}

}  // namespace

// Random pinch line across the object; the palm sits outside the object
// below the line and each fingertip is placed on the boundary by inverse
// kinematics.
HandPose random_initial_pose(const ObjectShape& shape, const SynthConfig& cfg, Rng& rng) {
  const HandModel& hand = cfg.physics.hand;
  const double psi = rng.uniform(0.0, 2.0 * M_PI);
  const double side = rng.uniform(0.0, 1.0) < 0.5 ? 1.0 : -1.0;
  const double drop = rng.uniform(0.0, 0.15);
  const double gap = rng.uniform(cfg.init_gap[0], cfg.init_gap[1]);
  const double lateral = rng.uniform(-cfg.init_lateral, cfg.init_lateral);
  const double tilt = rng.uniform(-cfg.init_tilt, cfg.init_tilt);

  const Vec2 pinch{std::cos(psi), std::sin(psi)};
  const Vec2 up = pinch.perp() * side;
  const double phi = std::atan2(-up.x, up.y);
  const Vec2 center = shape.centroid();
  double support = 0.0;
  for (const auto& v : shape.vertices()) support = std::max(support, -(v - center).dot(up));
  const Vec2 ex = rotate({1.0, 0.0}, phi);
  const Vec2 palm = center + up * -(support + gap) + ex * lateral;
  const Vec2 left_base = palm - ex * hand.palm_half_width, right_base = palm + ex * hand.palm_half_width;
  const double reach = cfg.init_reach * (hand.link1_len + hand.link2_len);

  // Highest pinch line whose boundary points both fingers can reach.
  Vec2 left_target, right_target;
  for (double h = 0.15; h > -support; h -= 0.02) {
    const Vec2 c = center + up * (h - drop);
    const Vec2 line = rotate(pinch, tilt);
    const Vec2 a = ray_exit(shape, c, line), b = ray_exit(shape, c, -line);
    left_target = a.dot(ex) < b.dot(ex) ? a : b;
    right_target = a.dot(ex) < b.dot(ex) ? b : a;
    if ((left_target - left_base).norm() <= reach && (right_target - right_base).norm() <= reach) break;
  }

  auto to_palm = [&](const Vec2& p) { return rotate(p - palm, -phi); };
  const auto [l1, l2] = finger_ik({-hand.palm_half_width, 0.0}, to_palm(left_target), hand, 1.0);
  const auto [r1, r2] = finger_ik({hand.palm_half_width, 0.0}, to_palm(right_target), hand, -1.0);
  return HandPose(palm.x, palm.y, phi, l1, l2, r1, r2);
}

GraspDataset synthesize(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.n_objects < 1 || cfg.grasps_per_object < 1)
    fail(ErrorCode::InvalidConfig, "data.n_objects and data.grasps_per_object must be >= 1");
  cfg.physics.validate();
  GraspDataset ds;
  ds.provenance.seed = seed;
  ds.provenance.sigma = 0.0;
  for (int k = 0; k < cfg.n_objects; ++k) {
    ObjectShape shape = sample_object(derive_seed(seed, 0x0b, static_cast<std::uint64_t>(k)));
    Rng rng(derive_seed(seed, 0x9a, static_cast<std::uint64_t>(k)));
    std::vector<HandPose> kept;
    const int cap = cfg.attempt_factor * cfg.grasps_per_object;
    for (int attempt = 0; attempt < cap && static_cast<int>(kept.size()) < cfg.grasps_per_object; ++attempt) {
      const HandPose pose = refine_grasp(random_initial_pose(shape, cfg, rng), shape, cfg);
      if (shake_test(pose, shape, cfg.eval).all_resisted()) kept.push_back(pose);
    }
    if (static_cast<int>(kept.size()) < cfg.grasps_per_object)
      fail(ErrorCode::GenerationStarved, "object '" + shape.object_id() + "' reached only " +
                                             std::to_string(kept.size()) + " of " +
                                             std::to_string(cfg.grasps_per_object) + " grasps");
    ds.objects.push_back(std::move(shape));
    ds.grasps.push_back(std::move(kept));
  }
  ds.stats = compute_stats(ds.grasps);
  return ds;
}

GraspDataset synthesize(std::uint64_t seed, int n_objects, int grasps_per_object) {
  SynthConfig cfg;
  cfg.n_objects = n_objects;
  cfg.grasps_per_object = grasps_per_object;
  return synthesize(seed, cfg);
}

GraspDataset degrade(const GraspDataset& clean, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail(ErrorCode::InvalidConfig, "degradation sigma must be >= 0");
  GraspDataset out = clean;
  out.provenance.sigma = sigma;
  if (sigma == 0.0) return out;
  Rng rng(derive_seed(seed, 0xde9));
  for (auto& per_obj : out.grasps)
    for (auto& g : per_obj)
      for (int i = 0; i < kPoseDim; ++i) g.values()[i] += sigma * rng.normal();
  out.stats = compute_stats(out.grasps);
  return out;
}

DatasetSplit split_by_object(const GraspDataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0))
    fail(ErrorCode::InvalidConfig, "test fraction must lie in [0, 1)");
  std::vector<std::size_t> order(ds.objects.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5911));
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t n_test = static_cast<std::size_t>(std::llround(test_fraction * ds.objects.size()));
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + n_test);
  std::vector<std::size_t> train_idx(order.begin() + n_test, order.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  auto subset = [&](const std::vector<std::size_t>& idx) {
    GraspDataset out;
    out.provenance = ds.provenance;
    for (std::size_t i : idx) {
      out.objects.push_back(ds.objects[i]);
      out.grasps.push_back(ds.grasps[i]);
    }
    out.stats = compute_stats(out.grasps);
    return out;
  };
  return {subset(train_idx), subset(test_idx)};
}

namespace {

nlohmann::json pose_json(const HandPose& p) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < kPoseDim; ++i) a.push_back(p[i]);
  return a;
}

std::vector<double> to_std_vector(const PoseVec& v) { return {v.data(), v.data() + kPoseDim}; }

}  // namespace

void save_dataset(const GraspDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  nlohmann::json header = {
      {"version", kDatasetVersion},
      {"n_objects", ds.objects.size()},
      {"stats", {{"mean", to_std_vector(ds.stats.mean)}, {"std", to_std_vector(ds.stats.std)}}},
      {"provenance",
       {{"seed", ds.provenance.seed},
        {"generator_version", ds.provenance.generator_version},
        {"sigma", ds.provenance.sigma}}}};
  out << header.dump() << '\n';
  for (std::size_t k = 0; k < ds.objects.size(); ++k) {
    nlohmann::json grasps = nlohmann::json::array();
    for (const auto& g : ds.grasps[k]) grasps.push_back(pose_json(g));
    out << nlohmann::json{{"object", object_to_json(ds.objects[k])}, {"grasps", std::move(grasps)}}.dump() << '\n';
  }
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

GraspDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  GraspDataset ds;
  std::string line;
  try {
    if (!std::getline(in, line)) fail(ErrorCode::DatasetCorrupt, path.string() + ": missing header");
    const auto header = nlohmann::json::parse(line);
    if (header.at("version").get<int>() != kDatasetVersion)
      fail(ErrorCode::DatasetCorrupt, path.string() + ": unsupported dataset version");
    const auto n_objects = header.at("n_objects").get<std::size_t>();
    const auto& prov = header.at("provenance");
    ds.provenance.seed = prov.at("seed").get<std::uint64_t>();
    ds.provenance.generator_version = prov.at("generator_version").get<std::string>();
    ds.provenance.sigma = prov.at("sigma").get<double>();
    const auto mean = header.at("stats").at("mean").get<std::vector<double>>();
    const auto stdv = header.at("stats").at("std").get<std::vector<double>>();
    if (mean.size() != kPoseDim || stdv.size() != kPoseDim)
      fail(ErrorCode::DatasetCorrupt, path.string() + ": stats must have 7 channels");

    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      ds.objects.push_back(object_from_json(rec.at("object")));
      std::vector<HandPose> grasps;
      for (const auto& g : rec.at("grasps")) {
        if (!g.is_array() || g.size() != kPoseDim)
          fail(ErrorCode::DatasetCorrupt, path.string() + ": grasp must have 7 numbers");
        PoseVec v;
        for (int i = 0; i < kPoseDim; ++i) v[i] = g.at(i).get<double>();
        grasps.emplace_back(v);
      }
      ds.grasps.push_back(std::move(grasps));
    }
    if (ds.objects.size() != n_objects)
      fail(ErrorCode::DatasetCorrupt, path.string() + ": expected " + std::to_string(n_objects) +
                                          " objects, found " + std::to_string(ds.objects.size()));
    ds.stats = compute_stats(ds.grasps);
    for (int i = 0; i < kPoseDim; ++i)
      if (std::abs(ds.stats.mean[i] - mean[i]) > 1e-12 || std::abs(ds.stats.std[i] - stdv[i]) > 1e-12)
        fail(ErrorCode::DatasetCorrupt, path.string() + ": stored stats disagree with the grasps");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::DatasetCorrupt, path.string() + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidInput) fail(ErrorCode::DatasetCorrupt, e.what());
    throw;
  }
  return ds;
}

}  // namespace evograsp
