#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "evograsp/consistency.hpp"
#include "evograsp/evaluator.hpp"

namespace evograsp {

enum class TrajectorySource { Rollout, Forward };
enum class HpoOptimizer { Sgd, Adam };

struct HpoConfig {
  double beta = 1.0;
  int n_ft = 1;
  double lr = 1e-5;
  double lr_down = 0.8;
  double lr_up = 1.25;
  double lr_min = 1e-6;
  double lr_max = 1e-4;
  int epochs = 10;
  int batch = 32;  // candidates per object and epoch
  int nfe = 4;
  bool guided = true;
  int adapter_rank = 4;
  bool adapt_encoder = false;
  double adapter_scale = 1.0;
  bool square_current = false;  // square (x_cur - mu) instead of (x_prev - mu)
  TrajectorySource trajectory_source = TrajectorySource::Rollout;
  bool include_terminal = false;
  double sigma_floor = 1e-4;
  HpoOptimizer optimizer = HpoOptimizer::Sgd;

  void validate() const;
};

/// Options that change the transition density.
struct TransitionOptions {
  bool square_current = false;
  double sigma_floor = 1e-4;
};

/// sigma of the transition into gridpoint tau_prev, floored.
double transition_sigma(const NoiseSchedule& s, int tau_prev, double floor);

/// log N(x_prev; sqrt(ab_prev) f(x_cur, tau_n), sigma^2 I) summed over 7 dims, per column.
Vector transition_logprobs(const ConsistencyModel& model, const Matrix& x_prev, const Matrix& x_cur, int tau_n,
                           int tau_prev, const ObjectShape& shape, const TransitionOptions& opts = {});
double transition_logprob(const ConsistencyModel& model, const PoseVec& x_prev, const PoseVec& x_cur, int tau_n,
                          int tau_prev, const ObjectShape& shape, const TransitionOptions& opts = {});

/// Labeled few-step trajectories for one object. states[k] holds the
/// standardized x at seq.steps[k], one column per item.
struct PreferenceBatch {
  const ObjectShape* shape = nullptr;
  std::size_t object_index = 0;
  TimestepSequence seq;
  std::vector<Matrix> states;
  std::vector<int> labels;
  std::vector<GraspOutcome> outcomes;  // evaluator verdict on the final poses

  int size() const { return static_cast<int>(labels.size()); }
  int n_suc() const;
  int n_fail() const;
  void validate() const;
};

/// Replaces rollout states with a forward-process chain conditioned on each
/// item's final pose: x_T ~ q(x_T | x0), then x_s ~ q(x_s | x_t, x0) downwards.
void resample_forward_states(PreferenceBatch& batch, const NoiseSchedule& s, std::uint64_t seed);

/// Frozen copy of the model taken when fine-tuning starts.
struct ReferenceModel {
  ConsistencyModel model;
};

struct HpoLoss {
  double loss = 0.0;
  double inner = 0.0;          // beta * sum_i h_i (log pi_theta - log pi_ref)
  Vector log_ratio;            // per item
  std::optional<EpsGrads> grads;  // adapter gradients when requested
};

/// -log sigmoid(beta sum_i h_i [log pi_theta - log pi_ref]) on the transition
/// steps[k] -> steps[k-1]. Gradients flow into adapters only.
HpoLoss hpo_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch, int k,
                 double beta, const TransitionOptions& opts = {}, bool with_grads = false);

/// Trajectory-level objective: all transitions summed inside one sigmoid.
double hpo_chain_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch,
                      double beta, const TransitionOptions& opts = {});
/// Per-transition bound: mean over transitions of hpo_loss.
double hpo_surrogate_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch,
                          double beta, const TransitionOptions& opts = {});

/// cur > prev scales by lr_down, otherwise by lr_up; clamped to [lr_min, lr_max].
double adapt_lr(double lr, double prev_suc, double cur_suc, const HpoConfig& cfg);

/// Mutable fine-tuning state carried across epochs.
struct HpoState {
  ReferenceModel ref;
  Adam opt;  // used when cfg.optimizer is Adam
  double lr = 1e-5;
  std::optional<double> prev_suc;
  int epoch = 0;
};

/// Attaches zero-initialized adapters when absent and snapshots the reference.
HpoState begin_finetune(ConsistencyModel& model, const HpoConfig& cfg, std::uint64_t seed);

struct LabelRequest {
  std::size_t object_index = 0;
  const ObjectShape* shape = nullptr;
  const std::vector<HandPose>* poses = nullptr;
  const std::vector<GraspOutcome>* outcomes = nullptr;
};
using PreferenceSource = std::function<std::vector<int>(const LabelRequest&)>;

/// Evaluator labels: full shake-test success is preferred.
PreferenceSource simulated_preferences();

struct EpochReport {
  int epoch = 0;
  Metrics metrics;  // evaluator metrics of the epoch's candidates
  double lr = 0.0;  // after adaptation
  int n_suc = 0;
  int n_fail = 0;
  double loss = 0.0;  // mean hpo loss over update steps
};

/// Seed of evolutionary epoch `epoch` (0-based) in a run seeded with `run_seed`.
std::uint64_t epoch_seed(std::uint64_t run_seed, int epoch);
/// Candidate seed of object k within an epoch.
std::uint64_t candidate_seed(std::uint64_t epoch_seed, std::size_t k);

/// Samples `cfg.batch` candidates per object with the current model.
std::vector<PreferenceBatch> sample_candidates(const ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                                               const PhysicsConfig& phys, const HpoConfig& cfg, std::uint64_t seed);

/// Adapter updates from labeled batches, then the learning-rate rule.
EpochReport finetune_on_batches(ConsistencyModel& model, HpoState& state, std::vector<PreferenceBatch>& batches,
                                const HpoConfig& cfg, std::uint64_t seed);

/// One evolutionary epoch: sample, label, update.
EpochReport finetune_epoch(ConsistencyModel& model, HpoState& state, const std::vector<ObjectShape>& objects,
                           const PhysicsConfig& phys, const HpoConfig& cfg, const PreferenceSource& source,
                           std::uint64_t seed);

/// cfg.epochs epochs from a fresh state.
std::vector<EpochReport> finetune(ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                                  const PhysicsConfig& phys, const HpoConfig& cfg, const PreferenceSource& source,
                                  std::uint64_t seed);

void write_report_csv(const std::vector<EpochReport>& rows, const std::filesystem::path& path);

}  // namespace evograsp
