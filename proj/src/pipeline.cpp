#include "evograsp/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>

#include <nlohmann/json.hpp>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

namespace {

enum : std::uint64_t {
  kTeacherInit = 0x7e1,
  kTeacherTrain = 0x7e2,
  kDistill = 0xd15,
  kHpo = 0x4b0,
  kEval = 0xe7a,
  kDegrade = 0xde9,
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

DatasetSplit split_dataset(const GraspDataset& ds, double test_fraction) {
  return split_by_object(ds, test_fraction, ds.provenance.seed);
}

std::uint64_t hpo_run_seed(const RunConfig& cfg) { return derive_seed(cfg.seed(), kHpo); }
std::uint64_t eval_run_seed(const RunConfig& cfg) { return derive_seed(cfg.seed(), kEval); }

GraspDataset generate_dataset(const RunConfig& cfg) { return synthesize(cfg.seed(), cfg.synth()); }

Denoiser build_teacher(const GraspDataset& train, const RunConfig& cfg, TrainTrace* trace) {
  Denoiser teacher = make_denoiser(cfg.arch(), cfg.schedule(), train.stats, derive_seed(cfg.seed(), kTeacherInit));
  TrainTrace t = train_teacher(train, teacher, cfg.teacher_training(), derive_seed(cfg.seed(), kTeacherTrain));
  if (trace) *trace = std::move(t);
  return teacher;
}

ConsistencyModel build_student(const Denoiser& teacher, const GraspDataset& train, const RunConfig& cfg,
                               DistillTrace* trace) {
  ConsistencyModel student = consistency_from_teacher(teacher, cfg.boundary());
  DistillTrace t = distill(teacher, student, train, cfg.distillation(), cfg.physics(), derive_seed(cfg.seed(), kDistill));
  if (trace) *trace = std::move(t);
  return student;
}

SampleSet sample_objects(const ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                         const TimestepSequence& seq, const PhysicsConfig& phys, int n, bool guided,
                         std::uint64_t seed) {
  SampleSet out;
  for (std::size_t k = 0; k < objects.size(); ++k) {
    PaSampleResult r = pa_sample(model, objects[k], seq, phys, n, derive_seed(seed, k), guided);
    out.wall_time += r.wall_time;
    for (auto& p : r.poses) {
      out.poses.push_back(std::move(p));
      out.object_index.push_back(k);
    }
  }
  return out;
}

Metrics evaluate_samples(const SampleSet& s, const std::vector<ObjectShape>& objects, const EvalConfig& eval) {
  std::vector<GraspOutcome> outs;
  outs.reserve(s.poses.size());
  for (std::size_t i = 0; i < s.poses.size(); ++i) outs.push_back(shake_test(s.poses[i], objects.at(s.object_index[i]), eval));
  return evaluate_outcomes(outs, s.wall_time);
}

Metrics evaluate_model(const ConsistencyModel& model, const std::vector<ObjectShape>& objects, const RunConfig& cfg,
                       std::uint64_t seed) {
  if (objects.empty()) fail(ErrorCode::InvalidInput, "no objects to evaluate on");
  const SampleSet s = sample_objects(model, objects, cfg.sequence(), cfg.physics(), static_cast<int>(cfg.get_int("eval.n")),
                                     cfg.get_bool("sample.guided"), seed);
  return evaluate_samples(s, objects, cfg.eval());
}

EvolutionCurve evolve(ConsistencyModel& model, const std::vector<ObjectShape>& train_objects,
                      const std::vector<ObjectShape>& heldout_objects, const RunConfig& cfg,
                      const PreferenceSource& source) {
  const auto t0 = std::chrono::steady_clock::now();
  const HpoConfig hc = cfg.hpo();
  const PhysicsConfig phys = cfg.physics();
  const std::uint64_t eval_seed = eval_run_seed(cfg);
  const std::uint64_t hpo_seed = hpo_run_seed(cfg);
  EvolutionCurve c;
  c.initial = evaluate_model(model, heldout_objects, cfg, eval_seed);
  HpoState state = begin_finetune(model, hc, hpo_seed);
  for (int e = 0; e < hc.epochs; ++e) {
    c.epochs.push_back(finetune_epoch(model, state, train_objects, phys, hc, source, hpo_seed));
    c.heldout.push_back(evaluate_model(model, heldout_objects, cfg, eval_seed));
  }
  c.seconds = seconds_since(t0);
  return c;
}

ToyRun run_toy_pipeline(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ToyRun run;
  run.split = split_dataset(generate_dataset(cfg), cfg.get_real("data.test_fraction"));
  run.teacher = build_teacher(run.split.train, cfg);
  run.student = build_student(run.teacher, run.split.train, cfg);
  run.evolved = run.student;
  run.curve = evolve(run.evolved, run.split.train.objects, run.split.test.objects, cfg, simulated_preferences());
  run.seconds = seconds_since(t0);
  return run;
}

double DegradedReport::improvement() const {
  const Metrics& last = curve.heldout.empty() ? curve.initial : curve.heldout.back();
  return last.suc_all - curve.initial.suc_all;
}

bool DegradedReport::crossed_clean() const {
  const Metrics& last = curve.heldout.empty() ? curve.initial : curve.heldout.back();
  return last.suc_all > clean_initial.suc_all;
}

DegradedReport finetune_degraded(const GraspDataset& clean, double sigma, const RunConfig& cfg,
                                 std::optional<Metrics> clean_reference) {
  cfg.validate();
  const double tf = cfg.get_real("data.test_fraction");
  const std::uint64_t eval_seed = eval_run_seed(cfg);
  DegradedReport rep;
  rep.sigma = sigma;
  if (clean_reference) {
    rep.clean_initial = *clean_reference;
  } else {
    const DatasetSplit cs = split_dataset(clean, tf);
    const Denoiser t = build_teacher(cs.train, cfg);
    rep.clean_initial = evaluate_model(build_student(t, cs.train, cfg), cs.test.objects, cfg, eval_seed);
  }
  const DatasetSplit ds = split_dataset(degrade(clean, sigma, derive_seed(cfg.seed(), kDegrade)), tf);
  const Denoiser teacher = build_teacher(ds.train, cfg);
  ConsistencyModel model = build_student(teacher, ds.train, cfg);
  rep.curve = evolve(model, ds.train.objects, ds.test.objects, cfg, simulated_preferences());
  return rep;
}

Stage stage_of(const std::string& key) {
  auto starts = [&](const char* p) { return key.rfind(p, 0) == 0; };
  if (key == "seed" || starts("data.")) return Stage::Data;
  if (starts("diffusion.")) return Stage::Teacher;
  if (starts("distill.") || starts("physics.alpha") || key == "physics.contact_clamp" || key == "physics.self_min_dist")
    return Stage::Distill;
  if (starts("hpo.")) return Stage::Finetune;
  if (starts("sample.") || starts("eval.") || starts("physics.gamma")) return Stage::Evaluate;
  fail(ErrorCode::InvalidConfig, "key '" + key + "' cannot be swept");
}

std::vector<SweepPoint> run_sweep(const RunConfig& base, const std::string& key, const std::vector<std::string>& values,
                                  const SweepInputs& in, const std::filesystem::path& out) {
  if (values.empty()) fail(ErrorCode::InvalidConfig, "sweep grid for '" + key + "' is empty");
  const Stage stage = stage_of(key);
  if (stage > Stage::Data && !in.dataset) fail(ErrorCode::InvalidConfig, "sweeping '" + key + "' needs a dataset");
  if (stage == Stage::Distill && !in.teacher) fail(ErrorCode::InvalidConfig, "sweeping '" + key + "' needs a teacher");
  if (stage >= Stage::Finetune && !in.student) fail(ErrorCode::InvalidConfig, "sweeping '" + key + "' needs a model");

  std::vector<SweepPoint> pts;
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunConfig cfg = base;
    cfg.set(key, values[i]);
    cfg.validate();
    const std::filesystem::path dir = out / ("point_" + std::to_string(i));
    std::filesystem::create_directories(dir);
    cfg.write_resolved(dir / "config.txt");

    const GraspDataset data = stage == Stage::Data ? generate_dataset(cfg) : *in.dataset;
    const DatasetSplit split = split_dataset(data, cfg.get_real("data.test_fraction"));
    ConsistencyModel model;
    if (stage <= Stage::Distill) {
      const Denoiser teacher = stage <= Stage::Teacher ? build_teacher(split.train, cfg) : *in.teacher;
      model = build_student(teacher, split.train, cfg);
    } else {
      model = *in.student;
    }

    SweepPoint p;
    p.value = values[i];
    if (stage == Stage::Finetune) {
      EvolutionCurve c = evolve(model, split.train.objects, split.test.objects, cfg, simulated_preferences());
      p.epochs = c.epochs;
      p.metrics = c.heldout.empty() ? c.initial : c.heldout.back();
      write_report_csv(c.epochs, dir / "report.csv");
      write_curve_csv(c, dir / "curve.csv");
    } else {
      p.metrics = evaluate_model(model, split.test.objects, cfg, eval_run_seed(cfg));
    }
    write_metrics_json(p.metrics, dir / "metrics.json");
    pts.push_back(std::move(p));
  }
  write_sweep_csv(key, pts, out / "sweep.csv");
  return pts;
}

void write_metrics_json(const Metrics& m, const std::filesystem::path& path) {
  const nlohmann::json j = {{"suc_all", m.suc_all}, {"suc_one", m.suc_one}, {"pen_mean", m.pen_mean},
                            {"wall_time", m.wall_time}};
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

void write_curve_csv(const EvolutionCurve& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,suc_all,suc_one,pen_mean\n" << std::setprecision(17);
  out << 0 << ',' << c.initial.suc_all << ',' << c.initial.suc_one << ',' << c.initial.pen_mean << '\n';
  for (std::size_t e = 0; e < c.heldout.size(); ++e)
    out << e + 1 << ',' << c.heldout[e].suc_all << ',' << c.heldout[e].suc_one << ',' << c.heldout[e].pen_mean << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

void write_sweep_csv(const std::string& key, const std::vector<SweepPoint>& pts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "key,value,suc_all,suc_one,pen_mean,wall_time\n" << std::setprecision(17);
  for (const auto& p : pts)
    out << key << ',' << p.value << ',' << p.metrics.suc_all << ',' << p.metrics.suc_one << ',' << p.metrics.pen_mean
        << ',' << p.metrics.wall_time << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace evograsp
