#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evograsp/evaluator.hpp"
#include "evograsp/geometry.hpp"
#include "evograsp/physics.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

/// Per-channel z-score statistics of a grasp set.
struct DatasetStats {
  PoseVec mean = PoseVec::Zero();
  PoseVec std = PoseVec::Ones();

  PoseVec standardize(const PoseVec& pose) const { return (pose - mean).cwiseQuotient(std); }
  PoseVec unstandardize(const PoseVec& z) const { return z.cwiseProduct(std) + mean; }
};

DatasetStats compute_stats(const std::vector<std::vector<HandPose>>& grasps);

struct Provenance {
  std::uint64_t seed = 0;
  std::string generator_version = "planar-pinch-1";
  double sigma = 0.0;  // degradation noise; 0 for clean data
};

struct GraspDataset {
  std::vector<ObjectShape> objects;
  std::vector<std::vector<HandPose>> grasps;  // parallel to objects
  DatasetStats stats;
  Provenance provenance;

  std::size_t total_grasps() const;
  bool is_clean() const { return provenance.sigma == 0.0; }
};

struct SynthConfig {
  int n_objects = 40;
  int grasps_per_object = 32;
  int refine_steps = 200;
  double refine_lr = 0.01;
  /// Objective weights: surface pull, penetration, self penetration, closure.
  std::array<double, 4> weights{0.3, 0.1, 0.3, 0.2};
  int attempt_factor = 50;
  /// Initialization spread: palm offset along the pinch line, pinch line tilt.
  double init_lateral = 0.0;
  double init_tilt = 0.0;
  std::array<double, 2> init_gap{0.0, 0.05};
  double init_reach = 1.0;
  PhysicsConfig physics{};
  EvalConfig eval{};
};

/// Differentiable closure term sum_d softplus(margin - max_f n_f.d) over the
/// four shake directions, with n_f the distance-field normal at fingertip f.
/// The gradient is added to `*grad` when given.
double closure_loss(const HandPose& pose, const ObjectShape& shape, const PhysicsConfig& cfg,
                    double margin, PoseVec* grad);

/// Random pinch initialization around `shape` (centroid at the origin).
HandPose random_initial_pose(const ObjectShape& shape, const SynthConfig& cfg, Rng& rng);

/// Random initialization followed by gradient refinement; returns the refined pose.
HandPose refine_grasp(const HandPose& init, const ObjectShape& shape, const SynthConfig& cfg);

/// Ground-truth grasps: refined random poses kept only when they pass the
/// full shake test. Throws GenerationStarved when an object cannot reach its
/// quota within attempt_factor * quota attempts.
GraspDataset synthesize(std::uint64_t seed, const SynthConfig& cfg);
GraspDataset synthesize(std::uint64_t seed, int n_objects, int grasps_per_object);

GraspDataset degrade(const GraspDataset& clean, double sigma, std::uint64_t seed);

struct DatasetSplit {
  GraspDataset train;
  GraspDataset test;
};

/// Split by object (never by grasp); each side gets its own statistics.
DatasetSplit split_by_object(const GraspDataset& ds, double test_fraction, std::uint64_t seed);

inline constexpr int kDatasetVersion = 1;

void save_dataset(const GraspDataset& ds, const std::filesystem::path& path);
GraspDataset load_dataset(const std::filesystem::path& path);

}  // namespace evograsp
