#include <gtest/gtest.h>

#include <cmath>

#include "evograsp/diffusion.hpp"
#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

using namespace evograsp;

namespace {

Matrix normal_matrix(int r, int c, Rng& rng) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

const GraspDataset& small_dataset() {
  static const GraspDataset ds = synthesize(3, 8, 16);
  return ds;
}

}  // namespace

TEST(Schedule, EndpointsMonotoneAndProduct) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  EXPECT_EQ(s.alpha_bar[0], 1.0);
  EXPECT_DOUBLE_EQ(s.beta[1], 1e-4);
  EXPECT_DOUBLE_EQ(s.beta[100], 0.02);
  for (int t = 1; t <= 100; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  }
  EXPECT_LT(s.alpha_bar[100], s.alpha_bar[1]);
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 99.0);
  EXPECT_NEAR(s.alpha_bar[50], prod, 1e-15);
}

TEST(Schedule, PosteriorSigma) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  EXPECT_EQ(s.sigma[0], 0.0);
  for (int t : {1, 2, 37, 100}) {
    const double expect = std::sqrt((1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]) * s.beta[t]);
    EXPECT_NEAR(s.sigma[t], expect, 1e-15);
  }
}

TEST(Schedule, InvalidBoundsRejected) {
  for (auto [b1, bT] : {std::pair{0.0, 0.02}, std::pair{0.03, 0.02}, std::pair{1e-4, 1.0}}) {
    try {
      make_schedule(100, b1, bT);
      FAIL() << "expected an error";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    }
  }
}

TEST(QSample, BoundaryAndZeroMean) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  Rng rng(1);
  const Matrix x0 = normal_matrix(7, 3, rng), eps = normal_matrix(7, 3, rng);
  EXPECT_EQ(q_sample(s, x0, 0, eps), x0);
  const Matrix z = q_sample(s, Matrix::Zero(7, 3), 40, eps);
  EXPECT_LT((z - std::sqrt(1 - s.alpha_bar[40]) * eps).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(QSample, MonteCarloMomentsAtHalfHorizon) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  PoseVec x0;
  x0 << 0.5, -1.0, 2.0, 0.0, 0.3, -0.7, 1.2;
  const int n = 100000, t = 50;
  Rng rng(2);
  PoseVec sum = PoseVec::Zero(), sq = PoseVec::Zero();
  for (int k = 0; k < n; ++k) {
    PoseVec e;
    for (int i = 0; i < 7; ++i) e[i] = rng.normal();
    const PoseVec x = q_sample(s, x0, t, e);
    sum += x;
    sq += x.cwiseAbs2();
  }
  const double var = 1 - s.alpha_bar[t];
  for (int i = 0; i < 7; ++i) {
    const double mean = sum[i] / n, v = sq[i] / n - mean * mean;
    EXPECT_LT(std::abs(mean - std::sqrt(s.alpha_bar[t]) * x0[i]), 3 * std::sqrt(var / n));
    EXPECT_LT(std::abs(v - var), 3 * var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST(Standardization, RoundTrip) {
  const GraspDataset& ds = small_dataset();
  Matrix poses(7, 16);
  for (int j = 0; j < 16; ++j) poses.col(j) = ds.grasps[0][j].values();
  const Matrix back = unstandardize_columns(ds.stats, standardize_columns(ds.stats, poses));
  EXPECT_LT((back - poses).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix z = standardize_columns(ds.stats, poses);
  EXPECT_LT((z.col(3) - (poses.col(3) - ds.stats.mean).cwiseQuotient(ds.stats.std)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PosteriorMean, TrueNoiseGivesAnalyticPosterior) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  Rng rng(3);
  for (int t : {1, 10, 55, 100}) {
    const Matrix x0 = normal_matrix(7, 4, rng), eps = normal_matrix(7, 4, rng);
    const Matrix xt = q_sample(s, x0, t, eps);
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    const Matrix expect = (std::sqrt(abp) * s.beta[t] / (1 - ab)) * x0 + (std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab)) * xt;
    EXPECT_LT((ddpm_posterior_mean(s, xt, t, eps) - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(PosteriorMean, ExactNoiseChainConcentratesOnPointMass) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  PoseVec target;
  target << 0.3, -0.2, 0.5, 1.0, -1.0, 0.25, 0.0;
  Rng rng(4);
  Matrix x = normal_matrix(7, 200, rng);
  for (int t = s.T; t >= 1; --t) {
    Matrix eps = (x.colwise() - s.sqrt_ab(t) * target) / s.sqrt_1mab(t);
    x = ddpm_posterior_mean(s, x, t, eps);
    if (t > 1) x += s.sigma[t] * normal_matrix(7, 200, rng);
  }
  const PoseVec mean = x.rowwise().mean();
  EXPECT_LT((mean - target).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Teacher, UntrainedLossIsNoiseEnergy) {
  const GraspDataset& ds = small_dataset();
  const Denoiser d = make_denoiser(NetArch{}, ScheduleParams{}, ds.stats, 5);
  const int draws = 20000;
  EXPECT_NEAR(teacher_loss(ds, d, draws, 9), 7.0, 4 * std::sqrt(14.0 / draws));
}

TEST(Teacher, MemorizesSingleExample) {
  NetArch arch;
  EpsNet net(arch, 6);
  Rng rng(7);
  const Matrix x = normal_matrix(7, 1, rng), eps = normal_matrix(7, 1, rng), desc = normal_matrix(64, 1, rng);
  const std::vector<double> tau{37};
  auto params = net.parameters(ParamGroup::Base);
  Adam opt(params, 1e-3);
  double loss = 0;
  for (int it = 0; it < 500; ++it) {
    EpsNet::Tape tape;
    const Matrix r = net.forward(x, desc, tau, tape) - eps;
    loss = r.squaredNorm();
    EpsGrads g = net.zero_grads(ParamGroup::Base);
    net.backward(tape, 2 * r, &g.body);
    opt.step(params, EpsNet::grad_list(g, ParamGroup::Base));
  }
  EXPECT_LT(loss, 1e-3);
}

TEST(Teacher, TrainingHalvesLossAndIsDeterministic) {
  const GraspDataset& ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 150;
  Denoiser a = make_denoiser(NetArch{}, ScheduleParams{}, ds.stats, 8);
  Denoiser b = a;
  const TrainTrace ta = train_teacher(ds, a, tc, 3);
  const TrainTrace tb = train_teacher(ds, b, tc, 3);
  ASSERT_EQ(ta.epoch_loss.size(), 150u);
  EXPECT_LT(ta.epoch_loss.back(), 0.5 * ta.epoch_loss.front());
  EXPECT_EQ(ta.epoch_loss, tb.epoch_loss);
  auto pa = a.net.parameters(ParamGroup::Base), pb = b.net.parameters(ParamGroup::Base);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
}

TEST(Teacher, EmptyDatasetRejected) {
  GraspDataset empty;
  Denoiser d = make_denoiser(NetArch{}, ScheduleParams{}, {}, 1);
  EXPECT_THROW(train_teacher(empty, d, TrainConfig{}, 1), Error);
}

TEST(DdpmSample, DeterministicWithFullHorizonNfe) {
  const GraspDataset& ds = small_dataset();
  const Denoiser d = make_denoiser(NetArch{}, ScheduleParams{}, ds.stats, 10);
  const SampleResult a = ddpm_sample(d, ds.objects[0], 5, 42), b = ddpm_sample(d, ds.objects[0], 5, 42);
  EXPECT_EQ(a.nfe, 100);
  ASSERT_EQ(a.poses.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.poses[i].values(), b.poses[i].values());
  EXPECT_GE(a.wall_time, 0.0);
}

TEST(DdpmSample, BundleRoundTripKeepsSamples) {
  const GraspDataset& ds = small_dataset();
  const Denoiser d = make_denoiser(NetArch{}, ScheduleParams{}, ds.stats, 11);
  const Denoiser r = denoiser_from_bundle(to_bundle(d));
  EXPECT_EQ(r.stats.mean, d.stats.mean);
  EXPECT_EQ(r.schedule.alpha_bar, d.schedule.alpha_bar);
  const SampleResult a = ddpm_sample(d, ds.objects[1], 3, 5), b = ddpm_sample(r, ds.objects[1], 3, 5);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.poses[i].values(), b.poses[i].values());
}
