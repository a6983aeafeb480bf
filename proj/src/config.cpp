#include "evograsp/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "evograsp/error.hpp"

namespace evograsp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_int(const std::string& s, long long& out) {
  if (s.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtoll(s.c_str(), &end, 10);
  return errno == 0 && end == s.c_str() + s.size();
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return errno == 0 && end == s.c_str() + s.size() && std::isfinite(out);
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "on" || s == "1") { out = true; return true; }
  if (s == "false" || s == "off" || s == "0") { out = false; return true; }
  return false;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  using K = ValueKind;
  static const std::vector<ConfigKey> keys = {
      {"seed", K::Int, "1", "global seed"},
      {"out", K::Text, "run", "output directory"},

      {"data.n_objects", K::Int, "40", "objects to synthesize"},
      {"data.grasps_per_object", K::Int, "32", "verified grasps per object"},
      {"data.refine_steps", K::Int, "200", "gradient steps per synthesized grasp"},
      {"data.test_fraction", K::Real, "0.2", "held-out object fraction"},
      {"data.degrade_sigma", K::Real, "0.15", "pose noise for the degraded dataset"},

      {"diffusion.T", K::Int, "100", "diffusion steps"},
      {"diffusion.beta1", K::Real, "1e-4", "first beta"},
      {"diffusion.betaT", K::Real, "0.02", "last beta"},
      {"diffusion.epochs", K::Int, "300", "teacher epochs"},
      {"diffusion.batch", K::Int, "64", "teacher minibatch"},
      {"diffusion.lr", K::Real, "1e-3", "teacher learning rate"},
      {"diffusion.hidden", K::Int, "128", "body width"},
      {"diffusion.hidden_layers", K::Int, "2", "body hidden layers"},
      {"diffusion.desc_dim", K::Int, "64", "object descriptor size"},
      {"diffusion.enc_hidden", K::Int, "32", "encoder width"},
      {"diffusion.time_pairs", K::Int, "8", "sin/cos time features"},

      {"distill.epochs", K::Int, "300", "distillation epochs"},
      {"distill.batch", K::Int, "64", "distillation minibatch"},
      {"distill.lr", K::Real, "1e-4", "distillation learning rate"},
      {"distill.ema", K::Real, "0.95", "target network decay"},
      {"distill.steps_train", K::Int, "100", "training grid size"},
      {"distill.deterministic_target", K::Bool, "true", "solver step reuses teacher eps"},
      {"distill.sigma_data", K::Real, "1.0", "boundary sigma_data"},
      {"distill.time_scale", K::Real, "1000", "boundary time scale"},

      {"physics.alpha[0]", K::Real, "0.1", "distillation weight, surface pull"},
      {"physics.alpha[1]", K::Real, "0.1", "distillation weight, penetration"},
      {"physics.alpha[2]", K::Real, "0.1", "distillation weight, self penetration"},
      {"physics.gamma[0]", K::Real, "0.0125", "guidance weight, surface pull"},
      {"physics.gamma[1]", K::Real, "0.0125", "guidance weight, penetration"},
      {"physics.gamma[2]", K::Real, "0.00625", "guidance weight, self penetration"},
      {"physics.contact_clamp", K::Real, "0.1", "surface pull clamp"},
      {"physics.self_min_dist", K::Real, "0.08", "finger clearance"},

      {"sample.nfe", K::Int, "4", "consistency steps"},
      {"sample.guided", K::Bool, "true", "physics guidance while sampling"},
      {"sample.n", K::Int, "256", "samples per object for the sample command"},

      {"hpo.beta", K::Real, "1.0", "preference temperature"},
      {"hpo.n_ft", K::Int, "1", "updates per transition and epoch"},
      {"hpo.lr", K::Real, "1e-5", "initial learning rate"},
      {"hpo.lr_down", K::Real, "0.8", "factor on improvement"},
      {"hpo.lr_up", K::Real, "1.25", "factor on regression"},
      {"hpo.lr_min", K::Real, "1e-6", "learning-rate floor"},
      {"hpo.lr_max", K::Real, "1e-4", "learning-rate ceiling"},
      {"hpo.epochs", K::Int, "10", "evolutionary epochs"},
      {"hpo.batch", K::Int, "32", "candidates per object and epoch"},
      {"hpo.adapter_rank", K::Int, "4", "adapter rank"},
      {"hpo.adapter_scale", K::Real, "1.0", "adapter output scale"},
      {"hpo.adapt_encoder", K::Bool, "false", "also adapt the object encoder"},
      {"hpo.square_current", K::Bool, "false", "square x_cur - mu in the transition density"},
      {"hpo.trajectory_source", K::Text, "rollout", "rollout or forward"},
      {"hpo.include_terminal", K::Bool, "false", "train on the transition into tau = 0"},
      {"hpo.sigma_floor", K::Real, "1e-4", "transition sigma floor"},
      {"hpo.optimizer", K::Text, "sgd", "sgd or adam"},

      {"eval.n", K::Int, "64", "evaluation samples per object"},
      {"eval.contact_eps", K::Real, "0.02", "contact distance"},
      {"eval.normal_margin", K::Real, "0.3", "resistance threshold"},
      {"eval.pen_max", K::Real, "0.05", "penetration limit"},

      {"serve.listen", K::Text, "127.0.0.1:8080", "service address"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : config_keys()) values_[k.name] = k.fallback;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey* k = find_key(key);
  if (!k) fail(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  const std::string v = trim(value);
  long long i = 0;
  double r = 0.0;
  bool b = false;
  bool ok = true;
  switch (k->kind) {
    case ValueKind::Int: ok = parse_int(v, i); break;
    case ValueKind::Real: ok = parse_real(v, r); break;
    case ValueKind::Bool: ok = parse_bool(v, b); break;
    case ValueKind::Text: ok = !v.empty(); break;
  }
  if (!ok) fail(ErrorCode::InvalidConfig, key + ": cannot parse '" + v + "'");
  values_[key] = v;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorCode::InvalidConfig, "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      set_assignment(line);
    } catch (const Error& e) {
      fail(e.code(), origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& RunConfig::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
  long long v = 0;
  if (!parse_int(raw(key), v)) fail(ErrorCode::InvalidConfig, key + " is not an integer");
  return v;
}

double RunConfig::get_real(const std::string& key) const {
  double v = 0.0;
  if (!parse_real(raw(key), v)) fail(ErrorCode::InvalidConfig, key + " is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(raw(key), v)) fail(ErrorCode::InvalidConfig, key + " is not a boolean");
  return v;
}

const std::string& RunConfig::get_text(const std::string& key) const { return raw(key); }

std::string RunConfig::resolved() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  return out.str();
}

void RunConfig::write_resolved(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << resolved();
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

SynthConfig RunConfig::synth() const {
  SynthConfig c;
  c.n_objects = static_cast<int>(get_int("data.n_objects"));
  c.grasps_per_object = static_cast<int>(get_int("data.grasps_per_object"));
  c.refine_steps = static_cast<int>(get_int("data.refine_steps"));
  c.physics = physics();
  c.eval = eval();
  return c;
}

NetArch RunConfig::arch() const {
  NetArch a;
  a.desc_dim = static_cast<int>(get_int("diffusion.desc_dim"));
  a.enc_hidden = static_cast<int>(get_int("diffusion.enc_hidden"));
  a.time_pairs = static_cast<int>(get_int("diffusion.time_pairs"));
  a.hidden = static_cast<int>(get_int("diffusion.hidden"));
  a.hidden_layers = static_cast<int>(get_int("diffusion.hidden_layers"));
  a.horizon = static_cast<int>(get_int("diffusion.T"));
  return a;
}

ScheduleParams RunConfig::schedule() const {
  return {static_cast<int>(get_int("diffusion.T")), get_real("diffusion.beta1"), get_real("diffusion.betaT")};
}

TrainConfig RunConfig::teacher_training() const {
  TrainConfig c;
  c.epochs = static_cast<int>(get_int("diffusion.epochs"));
  c.batch = static_cast<int>(get_int("diffusion.batch"));
  c.lr = get_real("diffusion.lr");
  return c;
}

DistillConfig RunConfig::distillation() const {
  DistillConfig c;
  c.epochs = static_cast<int>(get_int("distill.epochs"));
  c.batch = static_cast<int>(get_int("distill.batch"));
  c.lr = get_real("distill.lr");
  c.ema_decay = get_real("distill.ema");
  c.steps_train = static_cast<int>(get_int("distill.steps_train"));
  c.deterministic_target = get_bool("distill.deterministic_target");
  return c;
}

Boundary RunConfig::boundary() const { return {get_real("distill.sigma_data"), get_real("distill.time_scale")}; }

PhysicsConfig RunConfig::physics() const {
  PhysicsConfig c;
  for (int i = 0; i < 3; ++i) {
    c.alpha[i] = get_real("physics.alpha[" + std::to_string(i) + "]");
    c.gamma[i] = get_real("physics.gamma[" + std::to_string(i) + "]");
  }
  c.contact_clamp = get_real("physics.contact_clamp");
  c.self_min_dist = get_real("physics.self_min_dist");
  return c;
}

HpoConfig RunConfig::hpo() const {
  HpoConfig c;
  c.beta = get_real("hpo.beta");
  c.n_ft = static_cast<int>(get_int("hpo.n_ft"));
  c.lr = get_real("hpo.lr");
  c.lr_down = get_real("hpo.lr_down");
  c.lr_up = get_real("hpo.lr_up");
  c.lr_min = get_real("hpo.lr_min");
  c.lr_max = get_real("hpo.lr_max");
  c.epochs = static_cast<int>(get_int("hpo.epochs"));
  c.batch = static_cast<int>(get_int("hpo.batch"));
  c.nfe = static_cast<int>(get_int("sample.nfe"));
  c.guided = get_bool("sample.guided");
  c.adapter_rank = static_cast<int>(get_int("hpo.adapter_rank"));
  c.adapter_scale = get_real("hpo.adapter_scale");
  c.adapt_encoder = get_bool("hpo.adapt_encoder");
  c.square_current = get_bool("hpo.square_current");
  const std::string& src = get_text("hpo.trajectory_source");
  if (src == "rollout") c.trajectory_source = TrajectorySource::Rollout;
  else if (src == "forward") c.trajectory_source = TrajectorySource::Forward;
  else fail(ErrorCode::InvalidConfig, "hpo.trajectory_source must be rollout or forward");
  c.include_terminal = get_bool("hpo.include_terminal");
  c.sigma_floor = get_real("hpo.sigma_floor");
  const std::string& opt = get_text("hpo.optimizer");
  if (opt == "sgd") c.optimizer = HpoOptimizer::Sgd;
  else if (opt == "adam") c.optimizer = HpoOptimizer::Adam;
  else fail(ErrorCode::InvalidConfig, "hpo.optimizer must be sgd or adam");
  return c;
}

EvalConfig RunConfig::eval() const {
  EvalConfig c;
  c.contact_eps = get_real("eval.contact_eps");
  c.normal_margin = get_real("eval.normal_margin");
  c.pen_max = get_real("eval.pen_max");
  return c;
}

TimestepSequence RunConfig::sequence() const {
  return even_sequence(static_cast<int>(get_int("diffusion.T")), static_cast<int>(get_int("sample.nfe")));
}

void RunConfig::validate() const {
  if (get_int("seed") < 0) fail(ErrorCode::InvalidConfig, "seed must be >= 0");
  if (get_int("data.n_objects") < 1) fail(ErrorCode::InvalidConfig, "data.n_objects must be >= 1");
  if (get_int("data.grasps_per_object") < 1) fail(ErrorCode::InvalidConfig, "data.grasps_per_object must be >= 1");
  const double tf = get_real("data.test_fraction");
  if (!(tf >= 0.0 && tf < 1.0)) fail(ErrorCode::InvalidConfig, "data.test_fraction must lie in [0, 1)");
  if (get_real("data.degrade_sigma") < 0.0) fail(ErrorCode::InvalidConfig, "data.degrade_sigma must be >= 0");
  for (const char* k : {"diffusion.hidden", "diffusion.hidden_layers", "diffusion.desc_dim", "diffusion.enc_hidden",
                        "diffusion.time_pairs", "sample.n", "eval.n"})
    if (get_int(k) < 1) fail(ErrorCode::InvalidConfig, std::string(k) + " must be >= 1");
  if (!(get_real("distill.ema") >= 0.0 && get_real("distill.ema") < 1.0))
    fail(ErrorCode::InvalidConfig, "distill.ema must lie in [0, 1)");
  (void)make_schedule(schedule());
  (void)sequence();
  physics().validate();
  hpo().validate();
  const Boundary b = boundary();
  if (!(b.sigma_data > 0.0)) fail(ErrorCode::InvalidConfig, "distill.sigma_data must be positive");
  if (!(b.time_scale > 0.0)) fail(ErrorCode::InvalidConfig, "distill.time_scale must be positive");
  const int st = static_cast<int>(get_int("distill.steps_train"));
  if (st < 1 || st > get_int("diffusion.T")) fail(ErrorCode::InvalidConfig, "distill.steps_train must lie in [1, T]");
  const TrainConfig tc = teacher_training();
  if (tc.batch < 1 || tc.epochs < 0 || !(tc.lr > 0.0)) fail(ErrorCode::InvalidConfig, "diffusion training settings out of range");
  const DistillConfig dc = distillation();
  if (dc.batch < 1 || dc.epochs < 0 || !(dc.lr > 0.0)) fail(ErrorCode::InvalidConfig, "distill settings out of range");
}

}  // namespace evograsp
