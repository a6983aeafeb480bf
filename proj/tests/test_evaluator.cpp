#include <gtest/gtest.h>

#include <cmath>

#include "evograsp/dataset.hpp"
#include "evograsp/error.hpp"
#include "evograsp/evaluator.hpp"
#include "evograsp/rng.hpp"
#include "oracle.hpp"

using namespace evograsp;

namespace {

ObjectShape box(double x0, double y0, double x1, double y1) {
  return ObjectShape::from_vertices("box", {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}});
}

struct OracleOutcome {
  std::array<bool, 4> resisted{};
  double pen = 0;
  int contacts = 0;
  bool on_boundary = false;  // a contact tip lies on the boundary where the normal is ambiguous at corners
};

OracleOutcome oracle_shake(const HandPose& pose, const std::vector<Vec2>& v, const EvalConfig& cfg) {
  const oracle::Hand h = oracle::hand_points(pose.values().data());
  OracleOutcome o;
  const double depth = oracle::max_depth(h, v);
  o.pen = 1000 * depth;
  const Vec2 dirs[4] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  for (const Vec2& tip : h.tips) {
    if (std::abs(oracle::sdf(v, tip)) > cfg.contact_eps) continue;
    ++o.contacts;
    if (std::abs(oracle::sdf(v, tip)) < 1e-9) o.on_boundary = true;
    const Vec2 n = oracle::sdf_gradient(v, tip);
    for (int d = 0; d < 4; ++d)
      if (depth <= cfg.pen_max && n.x * dirs[d].x + n.y * dirs[d].y >= cfg.normal_margin) o.resisted[d] = true;
  }
  return o;
}

GraspOutcome with_resisted(std::array<bool, 4> r, double pen) {
  GraspOutcome o;
  o.resisted = r;
  o.pen = pen;
  return o;
}

}  // namespace

TEST(ShakeTest, FarHandResistsNothing) {
  const GraspOutcome o = shake_test(HandPose(5, 5, 0, 0, 0, 0, 0), box(-0.2, -0.2, 0.2, 0.2));
  EXPECT_TRUE(o.contacts.empty());
  EXPECT_FALSE(o.any_resisted());
  EXPECT_EQ(o.pen, 0.0);
}

TEST(ShakeTest, SidePinchResistsHorizontalOnly) {
  // Zero pose fingertips at (-0.2, 0.6) and (0.2, 0.6) sit on the square's side faces.
  const GraspOutcome o = shake_test(HandPose{}, box(-0.2, 0.4, 0.2, 0.8));
  ASSERT_EQ(o.contacts.size(), 2u);
  EXPECT_NEAR(o.contacts[0].normal.x, -1.0, 1e-12);
  EXPECT_NEAR(o.contacts[1].normal.x, 1.0, 1e-12);
  EXPECT_TRUE(o.resisted[0]);
  EXPECT_TRUE(o.resisted[1]);
  EXPECT_FALSE(o.resisted[2]);
  EXPECT_FALSE(o.resisted[3]);
  EXPECT_TRUE(o.any_resisted());
  EXPECT_FALSE(o.all_resisted());
  EXPECT_NEAR(o.pen, 0.0, 1e-9);
}

TEST(ShakeTest, DeepPenetrationVoidsResistance) {
  // Fingertips still touch the faces but the palm sits 0.1 deep inside.
  const ObjectShape s = box(-0.2, -0.1, 0.2, 0.8);
  const GraspOutcome o = shake_test(HandPose{}, s);
  EXPECT_EQ(o.contacts.size(), 2u);
  EXPECT_NEAR(o.pen, 100.0, 1e-9);
  EXPECT_FALSE(o.any_resisted());
  EvalConfig loose;
  loose.pen_max = 0.2;
  EXPECT_TRUE(shake_test(HandPose{}, s, loose).resisted[0]);
}

TEST(ResistedDirections, RuleOnHandmadeContacts) {
  EvalConfig cfg;
  const std::vector<Contact> c{{0, {std::cos(1.0), std::sin(1.0)}}, {1, {-0.2, -0.98}}};
  const auto r = resisted_directions(c, 0.0, cfg);
  EXPECT_TRUE(r[0]);   // cos 1 = 0.54
  EXPECT_FALSE(r[1]);
  EXPECT_TRUE(r[2]);   // sin 1 = 0.84
  EXPECT_TRUE(r[3]);
  const std::vector<Contact> edge{{0, {0.3, 0.0}}};
  EXPECT_TRUE(resisted_directions(edge, 0.0, cfg)[0]);
  EXPECT_FALSE(resisted_directions(c, 0.0500001, cfg)[0]);
  EXPECT_TRUE(resisted_directions(c, 0.05, cfg)[0]);
  EXPECT_FALSE(resisted_directions({}, 0.0, cfg)[0]);
}

TEST(ShakeTest, MatchesBruteForceOracle) {
  const GraspDataset ds = synthesize(5, 10, 25);
  Rng rng(6);
  EvalConfig cfg;
  int trials = 0, with_contact = 0, full = 0, ambiguous = 0;
  for (std::size_t k = 0; k < ds.objects.size(); ++k) {
    for (const HandPose& g : ds.grasps[k]) {
      for (int variant = 0; variant < 2; ++variant) {
        HandPose p = g;
        if (variant == 1)
          for (int i = 0; i < kPoseDim; ++i) p.values()[i] += rng.normal() * (i < 2 ? 0.01 : 0.03);
        const GraspOutcome got = shake_test(p, ds.objects[k], cfg);
        const OracleOutcome want = oracle_shake(p, ds.objects[k].vertices(), cfg);
        if (want.on_boundary)
          ++ambiguous;
        else
          EXPECT_EQ(got.resisted, want.resisted) << "object " << k << " variant " << variant;
        EXPECT_EQ(static_cast<int>(got.contacts.size()), want.contacts);
        EXPECT_NEAR(got.pen, want.pen, 1e-6);
        ++trials;
        with_contact += want.contacts > 0;
        full += want.resisted[0] && want.resisted[1] && want.resisted[2] && want.resisted[3];
      }
    }
  }
  EXPECT_EQ(trials, 500);
  EXPECT_GT(with_contact, 50);
  EXPECT_GT(full, 10);
  EXPECT_LT(ambiguous, 25);
}

TEST(Metrics, TenItemBatch) {
  std::vector<GraspOutcome> v;
  for (int i = 0; i < 3; ++i) v.push_back(with_resisted({true, true, true, true}, 1.0));
  for (int i = 0; i < 4; ++i) v.push_back(with_resisted({i == 0, i == 1, i == 2, i == 3}, 2.0));
  for (int i = 0; i < 3; ++i) v.push_back(with_resisted({false, false, false, false}, 10.0));
  const Metrics m = evaluate_outcomes(v, 0.25);
  EXPECT_DOUBLE_EQ(m.suc_all, 30.0);
  EXPECT_DOUBLE_EQ(m.suc_one, 70.0);
  EXPECT_DOUBLE_EQ(m.pen_mean, (3 * 1.0 + 4 * 2.0 + 3 * 10.0) / 10);
  EXPECT_EQ(m.wall_time, 0.25);
  const PreferenceLabels l = label_preferences(v);
  EXPECT_EQ(l.labels, (std::vector<int>{1, 1, 1, -1, -1, -1, -1, -1, -1, -1}));
  EXPECT_EQ(l.n_suc, 3);
  EXPECT_EQ(l.n_fail, 7);
}

TEST(Metrics, BatchSharedAndParallelShapes) {
  const ObjectShape pinch = box(-0.2, 0.4, 0.2, 0.8);
  const std::vector<HandPose> poses{HandPose{}, HandPose(5, 5, 0, 0, 0, 0, 0)};
  const Metrics shared = evaluate_batch(poses, {pinch}, 0.0);
  EXPECT_DOUBLE_EQ(shared.suc_one, 50.0);
  const Metrics parallel = evaluate_batch(poses, {pinch, pinch}, 0.0);
  EXPECT_EQ(parallel.suc_one, shared.suc_one);
  EXPECT_THROW(evaluate_batch(poses, {pinch, pinch, pinch}, 0.0), Error);
}

TEST(Metrics, EmptyBatchRejected) {
  for (auto call : {+[] { evaluate_outcomes({}, 0.0); }, +[] { label_preferences({}); },
                    +[] { evaluate_batch({}, {}, 0.0); }}) {
    try {
      call();
      FAIL() << "expected an error";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
    }
  }
}

TEST(Metrics, MonotoneInThresholds) {
  const GraspDataset ds = synthesize(7, 4, 25);
  EvalConfig base, strict, loose;
  strict.normal_margin = 0.6;
  strict.pen_max = 0.02;
  loose.normal_margin = 0.1;
  loose.pen_max = 0.2;
  loose.contact_eps = 0.04;
  for (std::size_t k = 0; k < ds.objects.size(); ++k) {
    const Metrics a = evaluate_batch(ds.grasps[k], {ds.objects[k]}, 0, strict);
    const Metrics b = evaluate_batch(ds.grasps[k], {ds.objects[k]}, 0, base);
    const Metrics c = evaluate_batch(ds.grasps[k], {ds.objects[k]}, 0, loose);
    EXPECT_LE(a.suc_all, b.suc_all);
    EXPECT_LE(b.suc_all, c.suc_all);
    EXPECT_LE(a.suc_one, b.suc_one);
    EXPECT_LE(b.suc_one, c.suc_one);
    EXPECT_LE(b.suc_all, b.suc_one);
  }
}
