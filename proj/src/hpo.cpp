#include "evograsp/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

namespace {

/// -log sigmoid(z), stable for large |z|.
double neg_log_sigmoid(double z) { return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

TransitionOptions options_of(const HpoConfig& cfg) { return {cfg.square_current, cfg.sigma_floor}; }

struct TransitionEval {
  Vector logp;
  Matrix resid;  // (x - mu) / sigma^2 per column
  Matrix eps;
  EpsNet::Tape tape;
};

TransitionEval evaluate_transition(const ConsistencyModel& model, const Matrix& x_prev, const Matrix& x_cur,
                                   int tau_n, int tau_prev, const Matrix& desc, const TransitionOptions& opts,
                                   bool keep_tape) {
  const NoiseSchedule& s = model.schedule;
  if (tau_prev >= tau_n || tau_n > s.T || tau_prev < 0)
    fail(ErrorCode::InvalidInput, "transition needs 0 <= tau_prev < tau_n <= T");
  TransitionEval out;
  const std::vector<int> taus(x_cur.cols(), tau_n);
  const std::vector<double> taus_d(x_cur.cols(), static_cast<double>(tau_n));
  out.eps = keep_tape ? model.net.forward(x_cur, desc, taus_d, out.tape) : model.net.forward(x_cur, desc, taus_d);
  const Matrix F = predict_x0(s, x_cur, taus, out.eps);
  const Matrix f = consistency_combine(s, model.boundary, x_cur, taus, F);
  const Matrix mu = s.sqrt_ab(tau_prev) * f;
  const double sigma = transition_sigma(s, tau_prev, opts.sigma_floor);
  const Matrix diff = (opts.square_current ? x_cur : x_prev) - mu;
  const double norm = kPoseDim * (std::log(sigma) + 0.5 * std::log(2.0 * std::numbers::pi));
  out.logp = -diff.colwise().squaredNorm().transpose() / (2.0 * sigma * sigma);
  out.logp.array() -= norm;
  out.resid = diff / (sigma * sigma);
  return out;
}

Matrix shape_descriptors(const ConsistencyModel& model, const ObjectShape& shape, Eigen::Index cols) {
  return descriptor_columns(model.net.encode(shape), cols);
}

std::vector<std::size_t> transition_indices(const PreferenceBatch& batch, bool include_terminal) {
  std::vector<std::size_t> ks;
  for (std::size_t k = batch.seq.steps.size() - 1; k >= 1; --k)
    if (include_terminal || k > 1) ks.push_back(k);
  return ks;
}

}  // namespace

void HpoConfig::validate() const {
  if (!(beta > 0.0)) fail(ErrorCode::InvalidConfig, "hpo.beta must be positive");
  if (n_ft < 1) fail(ErrorCode::InvalidConfig, "hpo.n_ft must be >= 1");
  if (!(lr_min > 0.0 && lr_min <= lr_max)) fail(ErrorCode::InvalidConfig, "hpo.lr_min must be positive and <= hpo.lr_max");
  if (!(lr > 0.0)) fail(ErrorCode::InvalidConfig, "hpo.lr must be positive");
  if (!(lr_down > 0.0 && lr_up > 0.0)) fail(ErrorCode::InvalidConfig, "hpo.lr_down and hpo.lr_up must be positive");
  if (epochs < 0) fail(ErrorCode::InvalidConfig, "hpo.epochs must be >= 0");
  if (batch < 1) fail(ErrorCode::InvalidConfig, "hpo.batch must be >= 1");
  if (nfe < 1) fail(ErrorCode::InvalidConfig, "hpo.nfe must be >= 1");
  if (adapter_rank < 1) fail(ErrorCode::InvalidConfig, "hpo.adapter_rank must be >= 1");
  if (!(sigma_floor > 0.0)) fail(ErrorCode::InvalidConfig, "hpo.sigma_floor must be positive");
}

double transition_sigma(const NoiseSchedule& s, int tau_prev, double floor) {
  return std::max(s.sqrt_1mab(tau_prev), floor);
}

Vector transition_logprobs(const ConsistencyModel& model, const Matrix& x_prev, const Matrix& x_cur, int tau_n,
                           int tau_prev, const ObjectShape& shape, const TransitionOptions& opts) {
  if (x_prev.cols() != x_cur.cols()) fail(ErrorCode::InvalidInput, "x_prev and x_cur column counts differ");
  const Matrix desc = shape_descriptors(model, shape, x_cur.cols());
  return evaluate_transition(model, x_prev, x_cur, tau_n, tau_prev, desc, opts, false).logp;
}

double transition_logprob(const ConsistencyModel& model, const PoseVec& x_prev, const PoseVec& x_cur, int tau_n,
                          int tau_prev, const ObjectShape& shape, const TransitionOptions& opts) {
  return transition_logprobs(model, Matrix(x_prev), Matrix(x_cur), tau_n, tau_prev, shape, opts)(0);
}

int PreferenceBatch::n_suc() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 1)); }
int PreferenceBatch::n_fail() const { return static_cast<int>(std::count(labels.begin(), labels.end(), -1)); }

void PreferenceBatch::validate() const {
  if (shape == nullptr) fail(ErrorCode::InvalidInput, "preference batch has no object");
  if (labels.empty()) fail(ErrorCode::InvalidInput, "preference batch is empty");
  if (states.size() != seq.steps.size())
    fail(ErrorCode::InvalidInput, "trajectory states must align with the timestep sequence");
  for (const Matrix& m : states)
    if (m.rows() != kPoseDim || m.cols() != size())
      fail(ErrorCode::LabelMismatch, "trajectory width differs from the number of labels");
  for (int h : labels)
    if (h != 1 && h != -1) fail(ErrorCode::InvalidInput, "labels must be +1 or -1");
}

void resample_forward_states(PreferenceBatch& batch, const NoiseSchedule& s, std::uint64_t seed) {
  batch.validate();
  Rng rng(derive_seed(seed, 0xf0d));
  const Matrix x0 = batch.states.front();
  const Eigen::Index b = x0.cols();
  const std::size_t last = batch.seq.steps.size() - 1;
  auto noise = [&] {
    Matrix z(kPoseDim, b);
    for (Eigen::Index j = 0; j < b; ++j)
      for (int i = 0; i < kPoseDim; ++i) z(i, j) = rng.normal();
    return z;
  };
  batch.states[last] = q_sample(s, x0, batch.seq.steps[last], noise());
  for (std::size_t k = last; k >= 2; --k) {
    const int t = batch.seq.steps[k], u = batch.seq.steps[k - 1];
    const double ab_t = s.alpha_bar[t], ab_u = s.alpha_bar[u];
    const double a_tu = ab_t / ab_u;
    const double b_tu = 1.0 - a_tu;
    const Matrix mean = (std::sqrt(ab_u) * b_tu / (1.0 - ab_t)) * x0 +
                        (std::sqrt(a_tu) * (1.0 - ab_u) / (1.0 - ab_t)) * batch.states[k];
    batch.states[k - 1] = mean + std::sqrt((1.0 - ab_u) / (1.0 - ab_t) * b_tu) * noise();
  }
}

HpoLoss hpo_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch, int k,
                 double beta, const TransitionOptions& opts, bool with_grads) {
  batch.validate();
  if (k < 1 || k >= static_cast<int>(batch.seq.steps.size())) fail(ErrorCode::InvalidInput, "transition index out of range");
  const int tau_n = batch.seq.steps[k], tau_prev = batch.seq.steps[k - 1];
  const Matrix& x_cur = batch.states[k];
  const Matrix& x_prev = batch.states[k - 1];
  PointSetEncoder::Tape enc_tape;
  const bool enc_grads = with_grads && model.net.encoder().net().has_adapters();
  const Matrix desc = enc_grads ? descriptor_columns(model.net.encoder().encode(batch.shape->boundary_points(), enc_tape),
                                                     x_cur.cols())
                                : shape_descriptors(model, *batch.shape, x_cur.cols());
  const Matrix ref_desc = shape_descriptors(ref.model, *batch.shape, x_cur.cols());

  TransitionEval cur = evaluate_transition(model, x_prev, x_cur, tau_n, tau_prev, desc, opts, with_grads);
  const TransitionEval base = evaluate_transition(ref.model, x_prev, x_cur, tau_n, tau_prev, ref_desc, opts, false);

  HpoLoss out;
  out.log_ratio = cur.logp - base.logp;
  double sum = 0.0;
  for (int i = 0; i < batch.size(); ++i) sum += batch.labels[i] * out.log_ratio(i);
  out.inner = beta * sum;
  out.loss = neg_log_sigmoid(out.inner);
  if (!std::isfinite(out.loss)) fail(ErrorCode::TrainingDiverged, "hpo loss became non-finite");
  if (!with_grads) return out;

  // d loss / d eps through mu = sqrt(ab_prev) (c_skip x + c_out F), F = (x - sqrt(1-ab) eps) / sqrt(ab).
  const NoiseSchedule& s = model.schedule;
  const BoundaryCoeffs c = boundary_coeffs(tau_n, s.T, model.boundary.sigma_data, model.boundary.time_scale);
  const double dmu_deps = -s.sqrt_ab(tau_prev) * c.c_out * s.sqrt_1mab(tau_n) / s.sqrt_ab(tau_n);
  const double dz = -sigmoid(-out.inner) * beta;
  Matrix eps_grad(kPoseDim, batch.size());
  for (int i = 0; i < batch.size(); ++i) eps_grad.col(i) = (dz * batch.labels[i] * dmu_deps) * cur.resid.col(i);
  EpsGrads g = model.net.zero_grads(ParamGroup::Adapters);
  const EpsNet::InputGrads ig = model.net.backward(cur.tape, eps_grad, &g.body, ParamGroup::Adapters);
  if (enc_grads) model.net.encoder().backward(enc_tape, ig.desc.rowwise().sum(), &g.encoder, ParamGroup::Adapters);
  out.grads = std::move(g);
  return out;
}

double hpo_chain_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch,
                      double beta, const TransitionOptions& opts) {
  double inner = 0.0;
  for (std::size_t k = 1; k < batch.seq.steps.size(); ++k)
    inner += hpo_loss(model, ref, batch, static_cast<int>(k), beta, opts).inner;
  return neg_log_sigmoid(inner);
}

double hpo_surrogate_loss(const ConsistencyModel& model, const ReferenceModel& ref, const PreferenceBatch& batch,
                          double beta, const TransitionOptions& opts) {
  const std::size_t n = batch.seq.steps.size() - 1;
  double total = 0.0;
  for (std::size_t k = 1; k <= n; ++k) total += hpo_loss(model, ref, batch, static_cast<int>(k), beta, opts).loss;
  return total / static_cast<double>(n);
}

double adapt_lr(double lr, double prev_suc, double cur_suc, const HpoConfig& cfg) {
  const double next = cur_suc > prev_suc ? lr * cfg.lr_down : lr * cfg.lr_up;
  return std::clamp(next, cfg.lr_min, cfg.lr_max);
}

HpoState begin_finetune(ConsistencyModel& model, const HpoConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!model.net.has_adapters()) model.net.attach_adapters(cfg.adapter_rank, cfg.adapter_scale, derive_seed(seed, 0xada),
                                                         cfg.adapt_encoder);
  HpoState st;
  st.ref.model = model;
  st.lr = std::clamp(cfg.lr, cfg.lr_min, cfg.lr_max);
  st.opt = Adam(model.net.parameters(ParamGroup::Adapters), st.lr);
  return st;
}

std::uint64_t epoch_seed(std::uint64_t run_seed, int epoch) {
  return derive_seed(run_seed, 0xe90c, static_cast<std::uint64_t>(epoch));
}

std::uint64_t candidate_seed(std::uint64_t epoch_seed, std::size_t k) { return derive_seed(epoch_seed, k); }

PreferenceSource simulated_preferences() {
  return [](const LabelRequest& req) { return label_preferences(*req.outcomes).labels; };
}

std::vector<PreferenceBatch> sample_candidates(const ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                                               const PhysicsConfig& phys, const HpoConfig& cfg, std::uint64_t seed) {
  const TimestepSequence seq = even_sequence(model.schedule.T, cfg.nfe);
  std::vector<PreferenceBatch> out;
  out.reserve(objects.size());
  for (std::size_t k = 0; k < objects.size(); ++k) {
    PaSampleResult r = pa_sample(model, objects[k], seq, phys, cfg.batch, candidate_seed(seed, k), cfg.guided);
    PreferenceBatch b;
    b.shape = &objects[k];
    b.object_index = k;
    b.seq = seq;
    b.states = std::move(r.states);
    b.outcomes.reserve(r.poses.size());
    for (const HandPose& p : r.poses) b.outcomes.push_back(shake_test(p, objects[k]));
    out.push_back(std::move(b));
  }
  return out;
}

EpochReport finetune_on_batches(ConsistencyModel& model, HpoState& state, std::vector<PreferenceBatch>& batches,
                                const HpoConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (batches.empty()) fail(ErrorCode::InvalidInput, "no labeled batches to fine-tune on");
  const TransitionOptions opts = options_of(cfg);
  auto params = model.net.parameters(ParamGroup::Adapters);
  state.opt.set_lr(state.lr);

  EpochReport rep;
  std::vector<GraspOutcome> outcomes;
  double loss_sum = 0.0;
  int steps = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    PreferenceBatch& batch = batches[bi];
    batch.validate();
    if (cfg.trajectory_source == TrajectorySource::Forward)
      resample_forward_states(batch, model.schedule, derive_seed(seed, state.epoch, bi));
    rep.n_suc += batch.n_suc();
    rep.n_fail += batch.n_fail();
    outcomes.insert(outcomes.end(), batch.outcomes.begin(), batch.outcomes.end());
    for (std::size_t k : transition_indices(batch, cfg.include_terminal)) {
      for (int it = 0; it < cfg.n_ft; ++it) {
        HpoLoss l = hpo_loss(model, state.ref, batch, static_cast<int>(k), cfg.beta, opts, true);
        auto grads = EpsNet::grad_list(*l.grads, ParamGroup::Adapters);
        if (cfg.optimizer == HpoOptimizer::Adam) {
          state.opt.step(params, grads);
        } else {
          for (Matrix* g : grads)
            if (!g->allFinite()) fail(ErrorCode::TrainingDiverged, "non-finite adapter gradient");
          for (std::size_t p = 0; p < params.size(); ++p) *params[p] -= state.lr * *grads[p];
        }
        loss_sum += l.loss;
        ++steps;
      }
    }
  }
  ++state.epoch;
  rep.epoch = state.epoch;
  rep.loss = steps > 0 ? loss_sum / steps : 0.0;
  if (!outcomes.empty()) rep.metrics = evaluate_outcomes(outcomes, 0.0);
  if (state.prev_suc) state.lr = adapt_lr(state.lr, *state.prev_suc, rep.metrics.suc_all, cfg);
  state.prev_suc = rep.metrics.suc_all;
  rep.lr = state.lr;
  return rep;
}

EpochReport finetune_epoch(ConsistencyModel& model, HpoState& state, const std::vector<ObjectShape>& objects,
                           const PhysicsConfig& phys, const HpoConfig& cfg, const PreferenceSource& source,
                           std::uint64_t seed) {
  if (objects.empty()) fail(ErrorCode::InvalidInput, "fine-tuning needs at least one object");
  const std::uint64_t es = epoch_seed(seed, state.epoch);
  std::vector<PreferenceBatch> batches = sample_candidates(model, objects, phys, cfg, es);
  for (PreferenceBatch& b : batches) {
    const std::vector<HandPose> poses = columns_to_poses(unstandardize_columns(model.stats, b.states.front()));
    b.labels = source({b.object_index, b.shape, &poses, &b.outcomes});
    if (static_cast<int>(b.labels.size()) != static_cast<int>(b.outcomes.size()))
      fail(ErrorCode::LabelMismatch, "preference source returned " + std::to_string(b.labels.size()) +
                                         " labels for " + std::to_string(b.outcomes.size()) + " candidates");
  }
  return finetune_on_batches(model, state, batches, cfg, es);
}

std::vector<EpochReport> finetune(ConsistencyModel& model, const std::vector<ObjectShape>& objects,
                                  const PhysicsConfig& phys, const HpoConfig& cfg, const PreferenceSource& source,
                                  std::uint64_t seed) {
  HpoState state = begin_finetune(model, cfg, seed);
  std::vector<EpochReport> rows;
  for (int e = 0; e < cfg.epochs; ++e) rows.push_back(finetune_epoch(model, state, objects, phys, cfg, source, seed));
  return rows;
}

void write_report_csv(const std::vector<EpochReport>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,suc_all,suc_one,pen_mean,lr,n_suc,n_fail,loss\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.epoch << ',' << r.metrics.suc_all << ',' << r.metrics.suc_one << ',' << r.metrics.pen_mean << ','
        << r.lr << ',' << r.n_suc << ',' << r.n_fail << ',' << r.loss << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace evograsp
