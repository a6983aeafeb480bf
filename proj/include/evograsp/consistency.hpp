#pragma once

#include <cstdint>
#include <vector>

#include "evograsp/diffusion.hpp"
#include "evograsp/physics.hpp"

namespace evograsp {

/// Boundary parameterization: s = time_scale * tau / T.
struct Boundary {
  double sigma_data = 0.5;
  double time_scale = 1.0;
};

/// Few-step consistency function f(x, tau, O) = c_skip x + c_out F(x, tau, O)
/// with F the x0 prediction of an eps network. `target` is the EMA copy.
struct ConsistencyModel {
  EpsNet net;
  EpsNet target;
  NoiseSchedule schedule;
  DatasetStats stats;
  Boundary boundary;
};

ConsistencyModel consistency_from_teacher(const Denoiser& teacher, const Boundary& boundary = {});

struct BoundaryCoeffs {
  double c_skip = 1.0;
  double c_out = 0.0;
};

/// c_skip = sd^2 / (s^2 + sd^2), c_out = sd s / sqrt(sd^2 + s^2).
BoundaryCoeffs boundary_coeffs(double tau, int T, double sigma_data, double time_scale = 1.0);

/// Ordered gridpoints 0 = tau_0 < ... < tau_{N-1} = T.
struct TimestepSequence {
  std::vector<int> steps;
  int nfe() const { return static_cast<int>(steps.size()) - 1; }
};

/// tau_k = round(k T / nfe).
TimestepSequence even_sequence(int T, int nfe);
TimestepSequence make_sequence(std::vector<int> steps, int T);

/// F = (x - sqrt(1 - ab) eps) / sqrt(ab) per column; columns at tau = 0 return x.
Matrix predict_x0(const NoiseSchedule& s, const Matrix& x, const std::vector<int>& taus, const Matrix& eps);

/// f = c_skip x + c_out F per column; columns at tau = 0 return x exactly.
Matrix consistency_combine(const NoiseSchedule& s, const Boundary& boundary, const Matrix& x, const std::vector<int>& taus,
                           const Matrix& F);

/// x* = sqrt(ab_prev) F + sqrt(1 - ab_prev) eps.
Matrix ode_target(const NoiseSchedule& s, const Matrix& F, int tau_prev, const Matrix& eps);

/// Network outputs at standardized inputs; `desc` has one column per input column.
struct ConsistencyEval {
  Matrix eps, F, f;
};
ConsistencyEval consistency_eval(const EpsNet& net, const NoiseSchedule& s, const Boundary& boundary, const Matrix& x,
                                 const Matrix& desc, const std::vector<int>& taus);

/// f of the online network for a single object.
Matrix f_theta(const ConsistencyModel& model, const Matrix& x, const std::vector<int>& taus, const ObjectShape& shape);

/// One distillation minibatch with all its random draws fixed.
struct DistillBatch {
  Matrix x0;  // standardized clean poses
  std::vector<const ObjectShape*> shapes;
  std::vector<int> tau_n, tau_prev;
  Matrix noise;         // forward-process noise for x_{tau_n}
  Matrix target_noise;  // fresh noise re-injected by the solver step
};

struct DistillStep {
  double cd_loss = 0.0;
  double pa_loss = 0.0;
  EpsGrads grads;  // online network only; the target branch is constant
};

/// Loss and online-network gradients of one minibatch, without updating anything.
DistillStep distill_gradients(const Denoiser& teacher, const ConsistencyModel& student, const DistillBatch& batch,
                              const PhysicsConfig& phys, bool deterministic_target);

struct DistillConfig {
  int epochs = 1000;
  int batch = 64;
  double lr = 1e-4;
  double ema_decay = 0.95;
  int steps_train = 100;
  bool deterministic_target = true;
};

struct DistillTrace {
  std::vector<double> cd_loss;  // per epoch mean of the consistency term
  std::vector<double> pa_loss;  // per epoch mean of sum_i alpha_i L_PA_i
};

/// Consistency distillation from the teacher's solver with physics terms on F.
/// One epoch is ceil(grasps / batch) optimizer steps.
DistillTrace distill(const Denoiser& teacher, ConsistencyModel& student, const GraspDataset& dataset,
                     const DistillConfig& cfg, const PhysicsConfig& phys, std::uint64_t seed);

/// Gradient of sum_j L(unstandardize(F_j)) with respect to the standardized
/// input x, through the network. Non-finite columns are reported in `failed`.
struct GuidanceGrad {
  Matrix grad;
  Matrix F;
  Matrix f;
  std::vector<bool> failed;
};
GuidanceGrad guidance_gradient(const ConsistencyModel& model, const Matrix& x, int tau, const Matrix& desc,
                               const ObjectShape& shape, const PhysicsConfig& phys);

/// Guided transition mean sqrt(ab_prev) f - sum_i gamma_i grad_x L_i. Samples
/// whose gradient is non-finite keep the unguided mean and are counted.
struct GuidedMean {
  Matrix mean;
  Matrix f;
  int failures = 0;
};
GuidedMean guided_mean(const ConsistencyModel& model, const Matrix& x, int tau, int tau_prev, const ObjectShape& shape,
                       const PhysicsConfig& phys, bool guided = true);

struct PaSampleResult {
  std::vector<HandPose> poses;
  /// Standardized states per gridpoint: states[k] holds x at steps[k].
  std::vector<Matrix> states;
  double wall_time = 0.0;
  long nfe = 0;
  int guidance_failures = 0;
};

PaSampleResult pa_sample(const ConsistencyModel& model, const ObjectShape& shape, const TimestepSequence& seq,
                         const PhysicsConfig& phys, int n, std::uint64_t seed, bool guided = true);

ModelBundle to_bundle(const ConsistencyModel& model);
ConsistencyModel consistency_from_bundle(const ModelBundle& bundle);

}  // namespace evograsp
