#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "evograsp/config.hpp"

namespace evograsp {

/// Split keyed on the dataset's own seed, so every command sees the same
/// held-out objects for a given dataset file.
DatasetSplit split_dataset(const GraspDataset& ds, double test_fraction);

/// Child seeds of the global seed, one per pipeline stage.
std::uint64_t hpo_run_seed(const RunConfig& cfg);
std::uint64_t eval_run_seed(const RunConfig& cfg);

GraspDataset generate_dataset(const RunConfig& cfg);
Denoiser build_teacher(const GraspDataset& train, const RunConfig& cfg, TrainTrace* trace = nullptr);
ConsistencyModel build_student(const Denoiser& teacher, const GraspDataset& train, const RunConfig& cfg,
                               DistillTrace* trace = nullptr);

struct SampleSet {
  std::vector<HandPose> poses;
  std::vector<std::size_t> object_index;  // parallel to poses
  double wall_time = 0.0;
};

/// n samples per object; object k uses derive_seed(seed, k).
SampleSet sample_objects(const ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                         const TimestepSequence& seq, const PhysicsConfig& phys, int n, bool guided,
                         std::uint64_t seed);

Metrics evaluate_samples(const SampleSet& s, const std::vector<ObjectShape>& objects, const EvalConfig& eval);

/// Held-out metrics with the sampler settings of `cfg` and eval.n per object.
Metrics evaluate_model(const ConsistencyModel& model, const std::vector<ObjectShape>& objects, const RunConfig& cfg,
                       std::uint64_t seed);

struct EvolutionCurve {
  Metrics initial;                  // held-out, before fine-tuning
  std::vector<EpochReport> epochs;  // training-object candidates per epoch
  std::vector<Metrics> heldout;     // held-out after each epoch
  double seconds = 0.0;
};

/// hpo.epochs evolutionary epochs on `train_objects`. Held-out evaluation
/// reuses one seed throughout so successive rows are paired.
EvolutionCurve evolve(ConsistencyModel& model, const std::vector<ObjectShape>& train_objects,
                      const std::vector<ObjectShape>& heldout_objects, const RunConfig& cfg,
                      const PreferenceSource& source);

struct ToyRun {
  DatasetSplit split;
  Denoiser teacher;
  ConsistencyModel student;  // before fine-tuning
  ConsistencyModel evolved;
  EvolutionCurve curve;
  double seconds = 0.0;
};

/// Synthesize, train, distill, then fine-tune with evaluator preferences.
ToyRun run_toy_pipeline(const RunConfig& cfg);

struct DegradedReport {
  double sigma = 0.0;
  Metrics clean_initial;
  EvolutionCurve curve;  // curve.initial is the degraded model's start
  double improvement() const;
  bool crossed_clean() const;
};

/// Degrade the poses, train and distill on the degraded set, then fine-tune.
/// The clean reference is trained here unless supplied.
DegradedReport finetune_degraded(const GraspDataset& clean, double sigma, const RunConfig& cfg,
                                 std::optional<Metrics> clean_reference = std::nullopt);

enum class Stage { Data, Teacher, Distill, Finetune, Evaluate };

/// Earliest pipeline stage a key influences.
Stage stage_of(const std::string& key);

struct SweepInputs {
  const GraspDataset* dataset = nullptr;
  const Denoiser* teacher = nullptr;
  const ConsistencyModel* student = nullptr;
};

struct SweepPoint {
  std::string value;
  Metrics metrics;                  // held-out
  std::vector<EpochReport> epochs;  // only for hpo keys
};

/// One run per value. Stages before the key's stage are taken from `in`;
/// each point writes its resolved config and outputs under out/point_<i>.
std::vector<SweepPoint> run_sweep(const RunConfig& base, const std::string& key, const std::vector<std::string>& values,
                                  const SweepInputs& in, const std::filesystem::path& out);

void write_metrics_json(const Metrics& m, const std::filesystem::path& path);
void write_curve_csv(const EvolutionCurve& c, const std::filesystem::path& path);
void write_sweep_csv(const std::string& key, const std::vector<SweepPoint>& pts, const std::filesystem::path& path);

}  // namespace evograsp
