#pragma once

#include <cstdint>
#include <vector>

#include "evograsp/dataset.hpp"
#include "evograsp/netcore.hpp"

namespace evograsp {

/// Discrete DDPM schedule. Index 0 is data: alpha_bar[0] = 1, beta[0] = 0.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar;
  std::vector<double> sigma;  // posterior std of q(x_{t-1} | x_t, x_0), sigma[0] = 0

  ScheduleParams params;

  double sqrt_ab(int t) const { return std::sqrt(alpha_bar[t]); }
  double sqrt_1mab(int t) const { return std::sqrt(1.0 - alpha_bar[t]); }
};

NoiseSchedule make_schedule(int T, double beta1, double betaT);
inline NoiseSchedule make_schedule(const ScheduleParams& p) { return make_schedule(p.T, p.beta1, p.betaT); }

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, column-wise.
Matrix q_sample(const NoiseSchedule& s, const Matrix& x0, int t, const Matrix& eps);
PoseVec q_sample(const NoiseSchedule& s, const PoseVec& x0, int t, const PoseVec& eps);

/// Teacher eps(x_t, t, O) with the schedule and the pose standardization it was trained with.
struct Denoiser {
  EpsNet net;
  NoiseSchedule schedule;
  DatasetStats stats;
};

Denoiser make_denoiser(const NetArch& arch, const ScheduleParams& sp, const DatasetStats& stats,
                       std::uint64_t seed);

Matrix standardize_columns(const DatasetStats& stats, const Matrix& poses);
Matrix unstandardize_columns(const DatasetStats& stats, const Matrix& z);
std::vector<HandPose> columns_to_poses(const Matrix& poses);

/// Descriptor of each object repeated per column.
Matrix descriptor_columns(const Vector& desc, Eigen::Index cols);

/// Gathers descriptors for a mixed-object batch and routes descriptor
/// gradients back through the encoder, once per distinct object.
class BatchEncoding {
 public:
  BatchEncoding(const PointSetEncoder& encoder, const std::vector<const ObjectShape*>& per_column);

  const Matrix& descriptors() const { return desc_; }
  void backward(const Matrix& desc_grad, MlpGrads* grads, ParamGroup group = ParamGroup::Base) const;

 private:
  const PointSetEncoder* encoder_;
  std::vector<const ObjectShape*> unique_;
  std::vector<int> column_slot_;
  std::vector<PointSetEncoder::Tape> tapes_;
  Matrix desc_;
};

struct TrainConfig {
  int epochs = 300;
  int batch = 64;
  double lr = 1e-3;
};

/// One (object, grasp) training example.
struct GraspRef {
  std::size_t object = 0;
  std::size_t grasp = 0;
};
std::vector<GraspRef> enumerate_grasps(const GraspDataset& ds);

struct TrainTrace {
  std::vector<double> epoch_loss;
};

/// Minimizes E||eps - eps_theta(x_t, t, O)||^2 with t uniform on 1..T.
TrainTrace train_teacher(const GraspDataset& dataset, Denoiser& model, const TrainConfig& cfg,
                         std::uint64_t seed);

/// Mean squared eps error of `model` on fresh (t, eps) draws over the dataset.
double teacher_loss(const GraspDataset& dataset, const Denoiser& model, int draws, std::uint64_t seed);

struct SampleResult {
  std::vector<HandPose> poses;
  double wall_time = 0.0;  // seconds spent in the sampling loop
  long nfe = 0;            // network evaluations per sample
};

/// Full T-step ancestral sampling.
SampleResult ddpm_sample(const Denoiser& model, const ObjectShape& shape, int n, std::uint64_t seed);

/// One reverse step's posterior mean given an eps estimate.
Matrix ddpm_posterior_mean(const NoiseSchedule& s, const Matrix& x_t, int t, const Matrix& eps);

ModelBundle to_bundle(const Denoiser& model);
Denoiser denoiser_from_bundle(const ModelBundle& bundle);

}  // namespace evograsp
