#include "evograsp/consistency.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

ConsistencyModel consistency_from_teacher(const Denoiser& teacher, const Boundary& boundary) {
  if (!(boundary.sigma_data > 0.0)) fail(ErrorCode::InvalidConfig, "distill.sigma_data must be positive");
  if (!(boundary.time_scale > 0.0)) fail(ErrorCode::InvalidConfig, "distill.time_scale must be positive");
  return {teacher.net, teacher.net, teacher.schedule, teacher.stats, boundary};
}

BoundaryCoeffs boundary_coeffs(double tau, int T, double sigma_data, double time_scale) {
  if (tau == 0.0) return {1.0, 0.0};
  const double s = time_scale * tau / T;
  const double sd2 = sigma_data * sigma_data;
  return {sd2 / (s * s + sd2), sigma_data * s / std::sqrt(sd2 + s * s)};
}

TimestepSequence even_sequence(int T, int nfe) {
  if (nfe < 1 || nfe > T) fail(ErrorCode::InvalidConfig, "sample.nfe must lie in [1, T]");
  TimestepSequence seq;
  for (int k = 0; k <= nfe; ++k)
    seq.steps.push_back(static_cast<int>(std::lround(static_cast<double>(k) * T / nfe)));
  return make_sequence(std::move(seq.steps), T);
}

TimestepSequence make_sequence(std::vector<int> steps, int T) {
  if (steps.size() < 2) fail(ErrorCode::InvalidConfig, "timestep sequence needs at least the endpoints 0 and T");
  if (steps.front() != 0 || steps.back() != T)
    fail(ErrorCode::InvalidConfig, "timestep sequence must start at 0 and end at T");
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i] <= steps[i - 1]) fail(ErrorCode::InvalidConfig, "timestep sequence must be strictly increasing");
  return {std::move(steps)};
}

Matrix predict_x0(const NoiseSchedule& s, const Matrix& x, const std::vector<int>& taus, const Matrix& eps) {
  Matrix F(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const int t = taus[j];
    if (t == 0) {
      F.col(j) = x.col(j);
      continue;
    }
    if (!(s.alpha_bar[t] > 0.0)) fail(ErrorCode::InvalidSchedule, "alpha_bar must be positive");
    F.col(j) = (x.col(j) - s.sqrt_1mab(t) * eps.col(j)) / s.sqrt_ab(t);
  }
  return F;
}

Matrix consistency_combine(const NoiseSchedule& s, const Boundary& boundary, const Matrix& x, const std::vector<int>& taus,
                           const Matrix& F) {
  Matrix f(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (taus[j] == 0) {
      f.col(j) = x.col(j);
      continue;
    }
    const BoundaryCoeffs c = boundary_coeffs(taus[j], s.T, boundary.sigma_data, boundary.time_scale);
    f.col(j) = c.c_skip * x.col(j) + c.c_out * F.col(j);
  }
  return f;
}

Matrix ode_target(const NoiseSchedule& s, const Matrix& F, int tau_prev, const Matrix& eps) {
  return s.sqrt_ab(tau_prev) * F + s.sqrt_1mab(tau_prev) * eps;
}

namespace {

std::vector<double> as_double(const std::vector<int>& taus) { return {taus.begin(), taus.end()}; }

}  // namespace

ConsistencyEval consistency_eval(const EpsNet& net, const NoiseSchedule& s, const Boundary& boundary, const Matrix& x,
                                 const Matrix& desc, const std::vector<int>& taus) {
  ConsistencyEval out;
  out.eps = net.forward(x, desc, as_double(taus));
  out.F = predict_x0(s, x, taus, out.eps);
  out.f = consistency_combine(s, boundary, x, taus, out.F);
  return out;
}

Matrix f_theta(const ConsistencyModel& model, const Matrix& x, const std::vector<int>& taus, const ObjectShape& shape) {
  const Matrix desc = descriptor_columns(model.net.encode(shape), x.cols());
  return consistency_eval(model.net, model.schedule, model.boundary, x, desc, taus).f;
}

DistillStep distill_gradients(const Denoiser& teacher, const ConsistencyModel& student, const DistillBatch& batch,
                              const PhysicsConfig& phys, bool deterministic_target) {
  const NoiseSchedule& s = student.schedule;
  const Eigen::Index b = batch.x0.cols();
  if (b == 0) fail(ErrorCode::InvalidInput, "distillation batch is empty");

  Matrix x_n(kPoseDim, b);
  for (Eigen::Index j = 0; j < b; ++j) x_n.col(j) = s.sqrt_ab(batch.tau_n[j]) * batch.x0.col(j) + s.sqrt_1mab(batch.tau_n[j]) * batch.noise.col(j);

  // Solver step with the teacher, then the EMA target at the earlier gridpoint.
  BatchEncoding teacher_enc(teacher.net.encoder(), batch.shapes);
  const Matrix teacher_eps = teacher.net.forward(x_n, teacher_enc.descriptors(), as_double(batch.tau_n));
  const Matrix teacher_F = predict_x0(s, x_n, batch.tau_n, teacher_eps);
  Matrix x_prev(kPoseDim, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const int tp = batch.tau_prev[j];
    const auto renoise = deterministic_target ? teacher_eps.col(j) : batch.target_noise.col(j);
    x_prev.col(j) = s.sqrt_ab(tp) * teacher_F.col(j) + s.sqrt_1mab(tp) * renoise;
  }
  BatchEncoding target_enc(student.target.encoder(), batch.shapes);
  const Matrix target_f =
      consistency_eval(student.target, s, student.boundary, x_prev, target_enc.descriptors(), batch.tau_prev).f;

  // Online branch.
  BatchEncoding enc(student.net.encoder(), batch.shapes);
  EpsNet::Tape tape;
  const Matrix eps = student.net.forward(x_n, enc.descriptors(), as_double(batch.tau_n), tape);
  const Matrix F = predict_x0(s, x_n, batch.tau_n, eps);
  const Matrix f = consistency_combine(s, student.boundary, x_n, batch.tau_n, F);

  DistillStep out;
  const Matrix diff = f - target_f;
  out.cd_loss = diff.squaredNorm() / static_cast<double>(b);
  Matrix eps_grad(kPoseDim, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const int t = batch.tau_n[j];
    const BoundaryCoeffs c = boundary_coeffs(t, s.T, student.boundary.sigma_data, student.boundary.time_scale);
    PoseVec dF = c.c_out * (2.0 / static_cast<double>(b)) * diff.col(j);
    const PhysicsValueGrad pa =
        physics_loss_and_grad(HandPose(student.stats.unstandardize(F.col(j))), *batch.shapes[j], phys, phys.alpha);
    out.pa_loss += pa.value / static_cast<double>(b);
    dF += student.stats.std.cwiseProduct(pa.grad) / static_cast<double>(b);
    eps_grad.col(j) = dF * (-s.sqrt_1mab(t) / s.sqrt_ab(t));
  }
  if (!std::isfinite(out.cd_loss) || !std::isfinite(out.pa_loss))
    fail(ErrorCode::TrainingDiverged, "distillation loss became non-finite");

  out.grads = student.net.zero_grads(ParamGroup::Base);
  const auto in_grad = student.net.backward(tape, eps_grad, &out.grads.body, ParamGroup::Base);
  enc.backward(in_grad.desc, &out.grads.encoder, ParamGroup::Base);
  return out;
}

DistillTrace distill(const Denoiser& teacher, ConsistencyModel& student, const GraspDataset& dataset,
                     const DistillConfig& cfg, const PhysicsConfig& phys, std::uint64_t seed) {
  const auto refs = enumerate_grasps(dataset);
  if (refs.empty()) fail(ErrorCode::InvalidInput, "training dataset is empty");
  if (cfg.batch < 1 || cfg.epochs < 0) fail(ErrorCode::InvalidConfig, "distill.batch must be >= 1");
  if (cfg.steps_train < 1 || cfg.steps_train > student.schedule.T)
    fail(ErrorCode::InvalidConfig, "distill.steps_train must lie in [1, T]");
  phys.validate();
  const TimestepSequence grid = even_sequence(student.schedule.T, cfg.steps_train);

  Rng rng(derive_seed(seed, 0xd157));
  auto params = student.net.parameters(ParamGroup::Base);
  Adam opt(params, cfg.lr);
  Ema ema(params, cfg.ema_decay);
  DistillTrace trace;
  std::vector<std::size_t> order(refs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double cd_sum = 0.0, pa_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t b = std::min<std::size_t>(cfg.batch, order.size() - start);
      DistillBatch batch;
      batch.x0.resize(kPoseDim, b);
      batch.noise.resize(kPoseDim, b);
      batch.target_noise.resize(kPoseDim, b);
      for (std::size_t j = 0; j < b; ++j) {
        const GraspRef& r = refs[order[start + j]];
        batch.x0.col(j) = student.stats.standardize(dataset.grasps[r.object][r.grasp].values());
        batch.shapes.push_back(&dataset.objects[r.object]);
        const int n = rng.uniform_int(1, cfg.steps_train);
        batch.tau_n.push_back(grid.steps[n]);
        batch.tau_prev.push_back(grid.steps[n - 1]);
        for (int i = 0; i < kPoseDim; ++i) batch.noise(i, j) = rng.normal();
        for (int i = 0; i < kPoseDim; ++i) batch.target_noise(i, j) = rng.normal();
      }
      DistillStep step = distill_gradients(teacher, student, batch, phys, cfg.deterministic_target);
      opt.step(params, EpsNet::grad_list(step.grads, ParamGroup::Base));
      ema.update(params);
      ema.copy_to(student.target.parameters(ParamGroup::Base));
      cd_sum += step.cd_loss;
      pa_sum += step.pa_loss;
      ++batches;
    }
    trace.cd_loss.push_back(cd_sum / batches);
    trace.pa_loss.push_back(pa_sum / batches);
  }
  return trace;
}

namespace {

bool all_zero(const PhysicsWeights& w) { return w[0] == 0.0 && w[1] == 0.0 && w[2] == 0.0; }

}  // namespace

GuidanceGrad guidance_gradient(const ConsistencyModel& model, const Matrix& x, int tau, const Matrix& desc,
                               const ObjectShape& shape, const PhysicsConfig& phys) {
  const NoiseSchedule& s = model.schedule;
  const Eigen::Index b = x.cols();
  const std::vector<int> taus(b, tau);
  EpsNet::Tape tape;
  const Matrix eps = model.net.forward(x, desc, as_double(taus), tape);

  GuidanceGrad out;
  out.F = predict_x0(s, x, taus, eps);
  out.f = consistency_combine(s, model.boundary, x, taus, out.F);
  out.failed.assign(b, false);
  Matrix gF = Matrix::Zero(kPoseDim, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const HandPose pose(model.stats.unstandardize(out.F.col(j)));
    if (!pose.finite()) {
      out.failed[j] = true;
      continue;
    }
    const PoseVec g = model.stats.std.cwiseProduct(physics_loss_and_grad(pose, shape, phys, phys.gamma).grad);
    if (!g.allFinite()) {
      out.failed[j] = true;
      continue;
    }
    gF.col(j) = g;
  }
  if (tau == 0) {
    out.grad = gF;
  } else {
    const Matrix through_eps = model.net.backward(tape, gF, nullptr).pose;
    out.grad = (gF - s.sqrt_1mab(tau) * through_eps) / s.sqrt_ab(tau);
  }
  for (Eigen::Index j = 0; j < b; ++j)
    if (!out.failed[j] && !out.grad.col(j).allFinite()) out.failed[j] = true;
  return out;
}

namespace {

GuidedMean transition_mean(const ConsistencyModel& model, const Matrix& x, int tau, int tau_prev, const Matrix& desc,
                           const ObjectShape& shape, const PhysicsConfig& phys, bool guided) {
  const NoiseSchedule& s = model.schedule;
  GuidedMean out;
  if (!guided || all_zero(phys.gamma)) {
    out.f = consistency_eval(model.net, s, model.boundary, x, desc, std::vector<int>(x.cols(), tau)).f;
    out.mean = s.sqrt_ab(tau_prev) * out.f;
    return out;
  }
  const GuidanceGrad g = guidance_gradient(model, x, tau, desc, shape, phys);
  out.f = g.f;
  out.mean = s.sqrt_ab(tau_prev) * out.f;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (g.failed[j]) {
      ++out.failures;
      continue;
    }
    out.mean.col(j) -= g.grad.col(j);
  }
  return out;
}

void log_guidance_failures(int failures) {
  if (failures > 0)
    std::clog << "evograsp: guidance gradient non-finite in " << failures
              << " sample steps; used the unguided mean\n";
}

}  // namespace

GuidedMean guided_mean(const ConsistencyModel& model, const Matrix& x, int tau, int tau_prev, const ObjectShape& shape,
                       const PhysicsConfig& phys, bool guided) {
  const Matrix desc = descriptor_columns(model.net.encode(shape), x.cols());
  GuidedMean out = transition_mean(model, x, tau, tau_prev, desc, shape, phys, guided);
  log_guidance_failures(out.failures);
  return out;
}

PaSampleResult pa_sample(const ConsistencyModel& model, const ObjectShape& shape, const TimestepSequence& seq,
                         const PhysicsConfig& phys, int n, std::uint64_t seed, bool guided) {
  if (seq.steps.size() < 2) fail(ErrorCode::InvalidConfig, "timestep sequence is empty");
  if (seq.steps.back() != model.schedule.T) fail(ErrorCode::InvalidConfig, "timestep sequence must end at T");
  PaSampleResult out;
  if (n <= 0) return out;
  const NoiseSchedule& s = model.schedule;
  Rng rng(derive_seed(seed, 0xc0));
  const Matrix desc = descriptor_columns(model.net.encode(shape), n);

  const auto start = std::chrono::steady_clock::now();
  const int last = seq.nfe();
  Matrix x(kPoseDim, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < kPoseDim; ++i) x(i, j) = rng.normal();
  out.states.assign(seq.steps.size(), Matrix());
  out.states[last] = x;
  for (int k = last; k >= 1; --k) {
    const int tau_prev = seq.steps[k - 1];
    GuidedMean step = transition_mean(model, x, seq.steps[k], tau_prev, desc, shape, phys, guided);
    ++out.nfe;
    out.guidance_failures += step.failures;
    if (tau_prev > 0) {
      const double sigma = s.sqrt_1mab(tau_prev);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < kPoseDim; ++i) step.mean(i, j) += sigma * rng.normal();
    }
    x = std::move(step.mean);
    out.states[k - 1] = x;
  }
  out.poses = columns_to_poses(unstandardize_columns(model.stats, x));
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log_guidance_failures(out.guidance_failures);
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

ModelBundle to_bundle(const ConsistencyModel& model) {
  ModelBundle b;
  b.kind = "consistency";
  b.arch = model.net.arch();
  b.schedule = model.schedule.params;
  b.stats_mean = to_vec(model.stats.mean);
  b.stats_std = to_vec(model.stats.std);
  b.extra["sigma_data"] = model.boundary.sigma_data;
  b.extra["time_scale"] = model.boundary.time_scale;
  export_params(model.net, b.params, b.adapters);
  TensorMap unused;
  export_params(model.target, b.ema, unused);
  return b;
}

ConsistencyModel consistency_from_bundle(const ModelBundle& bundle) {
  if (bundle.kind != "consistency")
    fail(ErrorCode::CheckpointCorrupt, "expected a consistency checkpoint, got '" + bundle.kind + "'");
  ConsistencyModel m;
  m.net = EpsNet(bundle.arch, 0);
  import_params(m.net, bundle.params, bundle.adapters);
  m.target = EpsNet(bundle.arch, 0);
  import_params(m.target, bundle.ema, {});
  m.schedule = make_schedule(bundle.schedule);
  m.stats = {from_vec(bundle.stats_mean), from_vec(bundle.stats_std)};
  for (const char* key : {"sigma_data", "time_scale"}) {
    if (!bundle.extra.contains(key) || !bundle.extra[key].is_number())
      fail(ErrorCode::CheckpointCorrupt, std::string("consistency checkpoint lacks ") + key);
  }
  m.boundary.sigma_data = bundle.extra["sigma_data"].get<double>();
  m.boundary.time_scale = bundle.extra["time_scale"].get<double>();
  return m;
}

}  // namespace evograsp
