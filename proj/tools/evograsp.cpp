#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "evograsp/error.hpp"
#include "evograsp/pipeline.hpp"
#include "evograsp/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using namespace evograsp;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // flag-derived overrides, applied last
};

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  for (const auto& s : c.sets) cfg.set_assignment(s);
  for (const auto& [k, v] : c.flags) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

/// Files written by the running command; removed if it fails.
std::vector<fs::path> g_outputs;

void track(const fs::path& p) { g_outputs.push_back(p); }

void remove_partial() {
  for (auto it = g_outputs.rbegin(); it != g_outputs.rend(); ++it) {
    std::error_code ec;
    fs::remove_all(*it, ec);
  }
}

fs::path config_beside(const fs::path& out) { return fs::path(out.string() + ".config.txt"); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_loss_csv(const std::vector<double>& v, const fs::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) out << i + 1 << ',' << v[i] << '\n';
}

std::vector<ObjectShape> pick_objects(const GraspDataset& ds, const RunConfig& cfg, const std::string& split) {
  if (split == "all") return ds.objects;
  const DatasetSplit s = split_dataset(ds, cfg.get_real("data.test_fraction"));
  if (split == "train") return s.train.objects;
  if (split == "test") return s.test.objects;
  fail(ErrorCode::InvalidConfig, "--split must be train, test or all");
}

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidInput:
    case ErrorCode::InvalidSchedule: return 2;
    case ErrorCode::TrainingDiverged: return 3;
    case ErrorCode::Io:
    case ErrorCode::CheckpointCorrupt:
    case ErrorCode::DatasetCorrupt: return 4;
    default: return 1;
  }
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key=value config file");
  app->add_option("--set", c.sets, "override, key=value (repeatable)");
  app->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) { c.flags["seed"] = std::to_string(s); }, "global seed");
}

template <class T>
void map_flag(CLI::App* app, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<T>(flag, [&c, key](const T& v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    c.flags[key] = s.str();
  }, help);
}

std::pair<std::string, int> parse_listen(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) fail(ErrorCode::InvalidConfig, "serve.listen must be host:port");
  try {
    return {s.substr(0, colon), std::stoi(s.substr(colon + 1))};
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidConfig, "serve.listen must be host:port");
  }
}

/// Runs the HTTP facade until `done` returns true (polled) or forever.
void run_server(GraspService& svc, const RunConfig& cfg, const std::function<bool()>& done) {
  httplib::Server server;
  svc.mount(server);
  const auto [host, port] = parse_listen(cfg.get_text("serve.listen"));
  if (!server.bind_to_port(host, port)) fail(ErrorCode::Io, "cannot listen on " + cfg.get_text("serve.listen"));
  std::cerr << "listening on " << host << ':' << port << '\n';
  std::thread t([&] { server.listen_after_bind(); });
  if (done) {
    while (!done()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    server.stop();
  }
  t.join();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"planar grasp generation with preference fine-tuning"};
  app.require_subcommand(1);
  Common c;

  std::string out, data, teacher_path, model_path, poses_path, objects_dir, report, pref = "sim", split = "test";
  std::vector<std::string> grid;
  int repeats = 1;

  auto* gen = app.add_subcommand("gen-data", "synthesize a verified grasp dataset");
  add_common(gen, c);
  gen->add_option("--out", out, "output directory")->required();

  auto* tt = app.add_subcommand("train-teacher", "train the diffusion teacher");
  add_common(tt, c);
  tt->add_option("--data", data, "dataset.jsonl")->required();
  tt->add_option("--out", out, "teacher checkpoint")->required();

  auto* di = app.add_subcommand("distill", "distill a few-step consistency model");
  add_common(di, c);
  di->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  di->add_option("--data", data, "dataset.jsonl")->required();
  map_flag<int>(di, c, "--steps-train", "distill.steps_train", "training grid size");
  di->add_option("--out", out, "student checkpoint")->required();

  auto* sa = app.add_subcommand("sample", "sample grasps");
  add_common(sa, c);
  sa->add_option("--model", model_path, "consistency checkpoint")->required();
  sa->add_option("--data", data, "dataset.jsonl")->required();
  sa->add_option("--split", split, "train, test or all");
  map_flag<int>(sa, c, "--nfe", "sample.nfe", "consistency steps");
  sa->add_option_function<std::string>("--guided", [&c](const std::string& v) { c.flags["sample.guided"] = v; },
                                        "on or off");
  map_flag<int>(sa, c, "--n", "sample.n", "samples per object");
  sa->add_option("--repeats", repeats, "timing repeats")->check(CLI::PositiveNumber);
  sa->add_option("--out", out, "poses.jsonl")->required();

  auto* ev = app.add_subcommand("evaluate", "shake-test sampled grasps");
  add_common(ev, c);
  ev->add_option("--poses", poses_path, "poses.jsonl")->required();
  ev->add_option("--objects", objects_dir, "object directory")->required();
  ev->add_option("--out", out, "metrics.json")->required();

  auto* ft = app.add_subcommand("finetune-hpo", "evolutionary preference fine-tuning");
  add_common(ft, c);
  ft->add_option("--model", model_path, "consistency checkpoint")->required();
  ft->add_option("--data", data, "dataset.jsonl")->required();
  map_flag<double>(ft, c, "--beta", "hpo.beta", "preference temperature");
  map_flag<int>(ft, c, "--nft", "hpo.n_ft", "updates per transition");
  map_flag<int>(ft, c, "--epochs", "hpo.epochs", "epochs");
  ft->add_option("--pref", pref, "sim or service")->check(CLI::IsMember({"sim", "service"}));
  ft->add_option_function<std::string>("--listen", [&c](const std::string& v) { c.flags["serve.listen"] = v; }, "host:port");
  ft->add_option("--out", out, "evolved checkpoint")->required();
  ft->add_option("--report", report, "report.csv")->required();

  auto* dg = app.add_subcommand("degrade-exp", "degraded-dataset recovery experiment");
  add_common(dg, c);
  dg->add_option("--data", data, "clean dataset.jsonl")->required();
  map_flag<double>(dg, c, "--sigma", "data.degrade_sigma", "pose noise");
  dg->add_option("--out", out, "output directory")->required();

  auto* sw = app.add_subcommand("sweep", "one-key grid over the pipeline");
  add_common(sw, c);
  sw->add_option("--grid", grid, "key=v1,v2,...")->required();
  sw->add_option("--data", data, "dataset.jsonl");
  sw->add_option("--teacher", teacher_path, "teacher checkpoint");
  sw->add_option("--model", model_path, "consistency checkpoint");
  sw->add_option("--out", out, "output directory")->required();

  auto* sv = app.add_subcommand("serve", "HTTP labeling service");
  add_common(sv, c);
  sv->add_option("--model", model_path, "consistency checkpoint")->required();
  sv->add_option("--data", data, "dataset.jsonl")->required();
  sv->add_option_function<std::string>("--listen", [&c](const std::string& v) { c.flags["serve.listen"] = v; }, "host:port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = resolve(c);

    if (gen->parsed()) {
      const fs::path dir = out;
      const bool existed = fs::exists(dir);
      fs::create_directories(dir / "objects");
      if (!existed) track(dir);
      const GraspDataset ds = generate_dataset(cfg);
      track(dir / "dataset.jsonl");
      save_dataset(ds, dir / "dataset.jsonl");
      for (const auto& o : ds.objects) {
        track(dir / "objects" / (o.object_id() + ".json"));
        save_object(o, dir / "objects" / (o.object_id() + ".json"));
      }
      cfg.write_resolved(dir / "config.txt");
    } else if (tt->parsed()) {
      const DatasetSplit s = split_dataset(load_dataset(data), cfg.get_real("data.test_fraction"));
      ensure_parent(out);
      TrainTrace trace;
      const Denoiser t = build_teacher(s.train, cfg, &trace);
      track(out);
      save_checkpoint(to_bundle(t), out);
      track(out + ".loss.csv");
      write_loss_csv(trace.epoch_loss, out + ".loss.csv");
      track(config_beside(out));
      cfg.write_resolved(config_beside(out));
    } else if (di->parsed()) {
      const DatasetSplit s = split_dataset(load_dataset(data), cfg.get_real("data.test_fraction"));
      const Denoiser t = denoiser_from_bundle(load_checkpoint(teacher_path));
      ensure_parent(out);
      DistillTrace trace;
      const ConsistencyModel m = build_student(t, s.train, cfg, &trace);
      track(out);
      save_checkpoint(to_bundle(m), out);
      track(out + ".loss.csv");
      write_loss_csv(trace.cd_loss, out + ".loss.csv");
      track(config_beside(out));
      cfg.write_resolved(config_beside(out));
    } else if (sa->parsed()) {
      const GraspDataset ds = load_dataset(data);
      const std::vector<ObjectShape> objs = pick_objects(ds, cfg, split);
      const ConsistencyModel m = consistency_from_bundle(load_checkpoint(model_path));
      const int n = static_cast<int>(cfg.get_int("sample.n"));
      const bool guided = cfg.get_bool("sample.guided");
      std::vector<double> times;
      SampleSet first;
      for (int r = 0; r < repeats; ++r) {
        SampleSet s = sample_objects(m, objs, cfg.sequence(), cfg.physics(), n, guided, cfg.seed());
        times.push_back(s.wall_time);
        if (r == 0) first = std::move(s);
      }
      ensure_parent(out);
      track(out);
      std::ofstream f(out);
      if (!f) fail(ErrorCode::Io, "cannot write " + out);
      for (std::size_t i = 0; i < first.poses.size(); ++i) {
        json pose = json::array();
        for (int d = 0; d < kPoseDim; ++d) pose.push_back(first.poses[i][d]);
        f << json{{"object_id", objs[first.object_index[i]].object_id()},
                  {"pose", pose},
                  {"nfe", cfg.get_int("sample.nfe")},
                  {"guided", guided},
                  {"seed", cfg.seed()}}
                 .dump()
          << '\n';
      }
      if (!f) fail(ErrorCode::Io, "failed writing " + out);
      double mean = 0.0, var = 0.0;
      for (double t : times) mean += t / times.size();
      for (double t : times) var += (t - mean) * (t - mean) / times.size();
      track(out + ".timing.json");
      std::ofstream(out + ".timing.json") << json{{"wall_time_mean", mean}, {"wall_time_std", std::sqrt(var)},
                                                  {"repeats", repeats}}.dump(2)
                                          << '\n';
      track(config_beside(out));
      cfg.write_resolved(config_beside(out));
    } else if (ev->parsed()) {
      std::map<std::string, ObjectShape> by_id;
      for (auto& o : load_objects_dir(objects_dir)) by_id.emplace(o.object_id(), o);
      std::ifstream f(poses_path);
      if (!f) fail(ErrorCode::Io, "cannot read " + poses_path);
      std::vector<GraspOutcome> outs;
      std::string line;
      int lineno = 0;
      while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("object_id") || !j.contains("pose") || !j["pose"].is_array() ||
            j["pose"].size() != kPoseDim)
          fail(ErrorCode::InvalidInput, poses_path + ":" + std::to_string(lineno) + ": malformed pose record");
        auto it = by_id.find(j["object_id"].get<std::string>());
        if (it == by_id.end())
          fail(ErrorCode::InvalidInput, poses_path + ":" + std::to_string(lineno) + ": unknown object_id");
        PoseVec v;
        for (int d = 0; d < kPoseDim; ++d) v[d] = j["pose"][d].get<double>();
        outs.push_back(shake_test(HandPose(v), it->second, cfg.eval()));
      }
      double wall = 0.0;
      if (fs::exists(poses_path + ".timing.json")) {
        std::ifstream tf(poses_path + ".timing.json");
        const json t = json::parse(tf, nullptr, false);
        if (!t.is_discarded() && t.contains("wall_time_mean")) wall = t["wall_time_mean"].get<double>();
      }
      ensure_parent(out);
      track(out);
      write_metrics_json(evaluate_outcomes(outs, wall), out);
      track(config_beside(out));
      cfg.write_resolved(config_beside(out));
    } else if (ft->parsed()) {
      const GraspDataset ds = load_dataset(data);
      ConsistencyModel m = consistency_from_bundle(load_checkpoint(model_path));
      std::vector<EpochReport> rows;
      if (pref == "sim") {
        const DatasetSplit s = split_dataset(ds, cfg.get_real("data.test_fraction"));
        rows = finetune(m, s.train.objects, cfg.physics(), cfg.hpo(), simulated_preferences(), hpo_run_seed(cfg));
      } else {
        GraspService svc(ds.objects, m, cfg);
        const std::size_t want = static_cast<std::size_t>(cfg.get_int("hpo.epochs"));
        run_server(svc, cfg, [&] { return svc.history().size() >= want; });
        svc.wait_idle(std::chrono::hours(1));
        m = *svc.model();
        rows = svc.history();
      }
      ensure_parent(out);
      ensure_parent(report);
      track(out);
      save_checkpoint(to_bundle(m), out);
      track(report);
      write_report_csv(rows, report);
      track(config_beside(out));
      cfg.write_resolved(config_beside(out));
    } else if (dg->parsed()) {
      const GraspDataset clean = load_dataset(data);
      const fs::path dir = out;
      const bool existed = fs::exists(dir);
      fs::create_directories(dir);
      if (!existed) track(dir);
      const DegradedReport rep = finetune_degraded(clean, cfg.get_real("data.degrade_sigma"), cfg);
      track(dir / "curve.csv");
      write_curve_csv(rep.curve, dir / "curve.csv");
      track(dir / "report.csv");
      write_report_csv(rep.curve.epochs, dir / "report.csv");
      const Metrics& last = rep.curve.heldout.empty() ? rep.curve.initial : rep.curve.heldout.back();
      track(dir / "summary.json");
      std::ofstream(dir / "summary.json") << json{{"sigma", rep.sigma},
                                                  {"clean_initial_suc_all", rep.clean_initial.suc_all},
                                                  {"degraded_initial_suc_all", rep.curve.initial.suc_all},
                                                  {"final_suc_all", last.suc_all},
                                                  {"improvement", rep.improvement()},
                                                  {"crossed_clean", rep.crossed_clean()}}.dump(2)
                                             << '\n';
      cfg.write_resolved(dir / "config.txt");
    } else if (sw->parsed()) {
      if (grid.size() != 1) fail(ErrorCode::InvalidConfig, "--grid takes exactly one key=v1,v2,... argument");
      const auto eq = grid[0].find('=');
      if (eq == std::string::npos) fail(ErrorCode::InvalidConfig, "--grid expects key=v1,v2,...");
      const std::string key = grid[0].substr(0, eq);
      std::vector<std::string> values;
      std::stringstream ss(grid[0].substr(eq + 1));
      for (std::string v; std::getline(ss, v, ',');)
        if (!v.empty()) values.push_back(v);
      std::optional<GraspDataset> ds;
      std::optional<Denoiser> teacher;
      std::optional<ConsistencyModel> student;
      if (!data.empty()) ds = load_dataset(data);
      if (!teacher_path.empty()) teacher = denoiser_from_bundle(load_checkpoint(teacher_path));
      if (!model_path.empty()) student = consistency_from_bundle(load_checkpoint(model_path));
      const SweepInputs in{ds ? &*ds : nullptr, teacher ? &*teacher : nullptr, student ? &*student : nullptr};
      const fs::path dir = out;
      const bool existed = fs::exists(dir);
      fs::create_directories(dir);
      if (!existed) track(dir);
      run_sweep(cfg, key, values, in, dir);
      cfg.write_resolved(dir / "config.txt");
    } else if (sv->parsed()) {
      const GraspDataset ds = load_dataset(data);
      GraspService svc(ds.objects, consistency_from_bundle(load_checkpoint(model_path)), cfg);
      run_server(svc, cfg, nullptr);
    }
  } catch (const Error& e) {
    remove_partial();
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    remove_partial();
    std::cerr << "error [io-error]: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    remove_partial();
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
