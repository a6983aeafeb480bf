#include "evograsp/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

NoiseSchedule make_schedule(int T, double beta1, double betaT) {
  if (T < 1) fail(ErrorCode::InvalidConfig, "diffusion.T must be >= 1");
  if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0))
    fail(ErrorCode::InvalidConfig, "schedule requires 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.T = T;
  s.params = {T, beta1, betaT};
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = T == 1 ? beta1 : beta1 + (betaT - beta1) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]));
  }
  return s;
}

Matrix q_sample(const NoiseSchedule& s, const Matrix& x0, int t, const Matrix& eps) {
  if (t < 0 || t > s.T) fail(ErrorCode::InvalidInput, "timestep out of range");
  return s.sqrt_ab(t) * x0 + s.sqrt_1mab(t) * eps;
}

PoseVec q_sample(const NoiseSchedule& s, const PoseVec& x0, int t, const PoseVec& eps) {
  if (t < 0 || t > s.T) fail(ErrorCode::InvalidInput, "timestep out of range");
  return s.sqrt_ab(t) * x0 + s.sqrt_1mab(t) * eps;
}

Denoiser make_denoiser(const NetArch& arch, const ScheduleParams& sp, const DatasetStats& stats,
                       std::uint64_t seed) {
  NetArch a = arch;
  a.horizon = sp.T;
  return {EpsNet(a, seed), make_schedule(sp), stats};
}

Matrix standardize_columns(const DatasetStats& stats, const Matrix& poses) {
  return (poses.colwise() - stats.mean).array().colwise() / stats.std.array();
}

Matrix unstandardize_columns(const DatasetStats& stats, const Matrix& z) {
  return (z.array().colwise() * stats.std.array()).matrix().colwise() + stats.mean;
}

std::vector<HandPose> columns_to_poses(const Matrix& poses) {
  std::vector<HandPose> out;
  out.reserve(poses.cols());
  for (Eigen::Index j = 0; j < poses.cols(); ++j) out.emplace_back(PoseVec(poses.col(j)));
  return out;
}

Matrix descriptor_columns(const Vector& desc, Eigen::Index cols) { return desc.replicate(1, cols); }

BatchEncoding::BatchEncoding(const PointSetEncoder& encoder, const std::vector<const ObjectShape*>& per_column)
    : encoder_(&encoder) {
  column_slot_.reserve(per_column.size());
  for (const ObjectShape* s : per_column) {
    auto it = std::find(unique_.begin(), unique_.end(), s);
    if (it == unique_.end()) {
      unique_.push_back(s);
      it = unique_.end() - 1;
    }
    column_slot_.push_back(static_cast<int>(it - unique_.begin()));
  }
  tapes_.resize(unique_.size());
  std::vector<Vector> descs;
  for (std::size_t u = 0; u < unique_.size(); ++u) descs.push_back(encoder.encode(unique_[u]->boundary_points(), tapes_[u]));
  desc_.resize(encoder.output_dim(), static_cast<Eigen::Index>(per_column.size()));
  for (std::size_t j = 0; j < per_column.size(); ++j) desc_.col(j) = descs[column_slot_[j]];
}

void BatchEncoding::backward(const Matrix& desc_grad, MlpGrads* grads, ParamGroup group) const {
  std::vector<Vector> per_object(unique_.size(), Vector::Zero(desc_.rows()));
  for (std::size_t j = 0; j < column_slot_.size(); ++j) per_object[column_slot_[j]] += desc_grad.col(j);
  for (std::size_t u = 0; u < unique_.size(); ++u) encoder_->backward(tapes_[u], per_object[u], grads, group);
}

std::vector<GraspRef> enumerate_grasps(const GraspDataset& ds) {
  std::vector<GraspRef> refs;
  for (std::size_t k = 0; k < ds.objects.size(); ++k)
    for (std::size_t g = 0; g < ds.grasps[k].size(); ++g) refs.push_back({k, g});
  return refs;
}

TrainTrace train_teacher(const GraspDataset& dataset, Denoiser& model, const TrainConfig& cfg, std::uint64_t seed) {
  const auto refs = enumerate_grasps(dataset);
  if (refs.empty()) fail(ErrorCode::InvalidInput, "training dataset is empty");
  if (cfg.batch < 1 || cfg.epochs < 0) fail(ErrorCode::InvalidConfig, "diffusion.batch must be >= 1");

  Rng rng(derive_seed(seed, 0x7eac));
  auto params = model.net.parameters(ParamGroup::Base);
  Adam opt(params, cfg.lr);
  const NoiseSchedule& s = model.schedule;
  TrainTrace trace;
  std::vector<std::size_t> order(refs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t b = std::min<std::size_t>(cfg.batch, order.size() - start);
      Matrix x0(kPoseDim, b), eps(kPoseDim, b), xt(kPoseDim, b);
      std::vector<double> taus(b);
      std::vector<const ObjectShape*> shapes(b);
      for (std::size_t j = 0; j < b; ++j) {
        const GraspRef& r = refs[order[start + j]];
        x0.col(j) = model.stats.standardize(dataset.grasps[r.object][r.grasp].values());
        shapes[j] = &dataset.objects[r.object];
        const int t = rng.uniform_int(1, s.T);
        taus[j] = t;
        for (int i = 0; i < kPoseDim; ++i) eps(i, j) = rng.normal();
        xt.col(j) = s.sqrt_ab(t) * x0.col(j) + s.sqrt_1mab(t) * eps.col(j);
      }
      BatchEncoding enc(model.net.encoder(), shapes);
      EpsNet::Tape tape;
      const Matrix pred = model.net.forward(xt, enc.descriptors(), taus, tape);
      const Matrix diff = pred - eps;
      const double loss = diff.squaredNorm() / static_cast<double>(b);
      if (!std::isfinite(loss)) fail(ErrorCode::TrainingDiverged, "teacher loss became non-finite");

      EpsGrads grads = model.net.zero_grads(ParamGroup::Base);
      const Matrix out_grad = (2.0 / static_cast<double>(b)) * diff;
      const auto in_grad = model.net.backward(tape, out_grad, &grads.body, ParamGroup::Base);
      enc.backward(in_grad.desc, &grads.encoder, ParamGroup::Base);
      opt.step(params, EpsNet::grad_list(grads, ParamGroup::Base));
      loss_sum += loss;
      ++batches;
    }
    trace.epoch_loss.push_back(loss_sum / batches);
  }
  return trace;
}

double teacher_loss(const GraspDataset& dataset, const Denoiser& model, int draws, std::uint64_t seed) {
  const auto refs = enumerate_grasps(dataset);
  if (refs.empty()) fail(ErrorCode::InvalidInput, "dataset is empty");
  Rng rng(derive_seed(seed, 0x1055));
  const NoiseSchedule& s = model.schedule;
  std::vector<Vector> descs;
  for (const auto& o : dataset.objects) descs.push_back(model.net.encode(o));
  Matrix xt(kPoseDim, draws), eps(kPoseDim, draws), desc(model.net.arch().desc_dim, draws);
  std::vector<double> taus(draws);
  for (int j = 0; j < draws; ++j) {
    const GraspRef& r = refs[rng.uniform_int(0, static_cast<int>(refs.size()) - 1)];
    const int t = rng.uniform_int(1, s.T);
    taus[j] = t;
    for (int i = 0; i < kPoseDim; ++i) eps(i, j) = rng.normal();
    xt.col(j) = s.sqrt_ab(t) * model.stats.standardize(dataset.grasps[r.object][r.grasp].values()) +
                s.sqrt_1mab(t) * eps.col(j);
    desc.col(j) = descs[r.object];
  }
  return (model.net.forward(xt, desc, taus) - eps).squaredNorm() / draws;
}

Matrix ddpm_posterior_mean(const NoiseSchedule& s, const Matrix& x_t, int t, const Matrix& eps) {
  return (x_t - (s.beta[t] / s.sqrt_1mab(t)) * eps) / std::sqrt(s.alpha[t]);
}

SampleResult ddpm_sample(const Denoiser& model, const ObjectShape& shape, int n, std::uint64_t seed) {
  SampleResult out;
  if (n <= 0) return out;
  Rng rng(derive_seed(seed, 0xddb));
  const NoiseSchedule& s = model.schedule;
  const Matrix desc = descriptor_columns(model.net.encode(shape), n);

  const auto start = std::chrono::steady_clock::now();
  Matrix x(kPoseDim, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < kPoseDim; ++i) x(i, j) = rng.normal();
  for (int t = s.T; t >= 1; --t) {
    const std::vector<double> taus(n, static_cast<double>(t));
    const Matrix eps = model.net.forward(x, desc, taus);
    ++out.nfe;
    x = ddpm_posterior_mean(s, x, t, eps);
    if (t > 1) {
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < kPoseDim; ++i) x(i, j) += s.sigma[t] * rng.normal();
    }
  }
  out.poses = columns_to_poses(unstandardize_columns(model.stats, x));
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

namespace {

std::vector<double> to_vec(const PoseVec& v) { return {v.data(), v.data() + kPoseDim}; }

PoseVec from_vec(const std::vector<double>& v) {
  if (v.size() != kPoseDim) fail(ErrorCode::CheckpointCorrupt, "standardization must have 7 channels");
  PoseVec p;
  for (int i = 0; i < kPoseDim; ++i) p[i] = v[i];
  return p;
}

}  // namespace

ModelBundle to_bundle(const Denoiser& model) {
  ModelBundle b;
  b.kind = "teacher";
  b.arch = model.net.arch();
  b.schedule = model.schedule.params;
  b.stats_mean = to_vec(model.stats.mean);
  b.stats_std = to_vec(model.stats.std);
  export_params(model.net, b.params, b.adapters);
  return b;
}

Denoiser denoiser_from_bundle(const ModelBundle& bundle) {
  if (bundle.kind != "teacher") fail(ErrorCode::CheckpointCorrupt, "expected a teacher checkpoint, got '" + bundle.kind + "'");
  Denoiser d;
  d.net = EpsNet(bundle.arch, 0);
  import_params(d.net, bundle.params, bundle.adapters);
  d.schedule = make_schedule(bundle.schedule);
  d.stats = {from_vec(bundle.stats_mean), from_vec(bundle.stats_std)};
  return d;
}

}  // namespace evograsp
