#include <gtest/gtest.h>

#include <cmath>

#include "evograsp/error.hpp"
#include "evograsp/physics.hpp"
#include "evograsp/rng.hpp"
#include "oracle.hpp"

using namespace evograsp;

namespace {

ObjectShape box(double x0, double y0, double x1, double y1) {
  return ObjectShape::from_vertices("box", {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}});
}

HandPose random_pose_near(Rng& rng) {
  return HandPose(rng.uniform(-0.3, 0.3), rng.uniform(-0.9, -0.2), rng.uniform(-0.4, 0.4), rng.uniform(-1.2, 1.2),
                  rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
}

// Second-largest plane distance gap; a tie means a kink of the interior distance.
double plane_gap(const ObjectShape& s, Vec2 p) {
  double a = -1e300, b = -1e300;
  for (std::size_t i = 0; i < s.vertices().size(); ++i) {
    const double h = s.edge_normal(i).dot(p - s.vertices()[i]);
    if (h > a) {
      b = a;
      a = h;
    } else if (h > b) {
      b = h;
    }
  }
  return a - b;
}

bool near_kink(const HandPose& pose, const ObjectShape& s, const PhysicsConfig& cfg, double margin) {
  for (int j = 0; j < 4; ++j)
    if (std::abs(std::abs(pose.joint(j)) - kJointLimit) < margin) return true;
  const oracle::Hand h = oracle::hand_points(pose.values().data());
  for (const Vec2& p : h.points) {
    const double d = oracle::sdf(s.vertices(), p);
    if (std::abs(d) < margin) return true;
    if (d < 0 && plane_gap(s, p) < margin) return true;
  }
  for (const Vec2& t : h.tips) {
    const double d = std::abs(oracle::sdf(s.vertices(), t));
    if (std::abs(d - cfg.contact_clamp) < margin) return true;
  }
  for (std::size_t i = 0; i < h.points.size(); ++i)
    for (std::size_t j = 0; j < h.points.size(); ++j)
      if (h.finger[i] == 0 && h.finger[j] == 1) {
        const double d = std::hypot(h.points[i].x - h.points[j].x, h.points[i].y - h.points[j].y);
        if (std::abs(d - cfg.self_min_dist) < margin) return true;
      }
  return false;
}

}  // namespace

TEST(SurfacePull, ZeroWhenFingertipsOnSurface) {
  // Zero pose fingertips sit at (-0.2, 0.6) and (0.2, 0.6): the box's lower corners.
  const ObjectShape s = box(-0.2, 0.6, 0.2, 1.0);
  EXPECT_NEAR(surface_pull_loss(HandPose{}, s), 0.0, 1e-15);
  EXPECT_EQ(penetration_loss(HandPose{}, s), 0.0);
}

TEST(SurfacePull, SaturatesAtClampFarAway) {
  const ObjectShape s = box(-0.5, -0.5, 0.5, 0.5);
  PhysicsConfig cfg;
  EXPECT_DOUBLE_EQ(surface_pull_loss(HandPose(10, 10, 0, 0, 0, 0, 0), s, cfg), cfg.contact_clamp);
}

TEST(Penetration, OutsideIsZeroAndSinglePointCounts) {
  const ObjectShape s = box(-0.5, -0.5, 0.5, 0.5);
  EXPECT_EQ(penetration_loss(HandPose(5, 0, 0, 0, 0, 0, 0), s), 0.0);
  HandPoints pts;
  pts.points = {{0, 0}, {3, 3}, {-4, 1}};
  pts.link_ids = {LinkId::Palm, LinkId::Left2, LinkId::Right2};
  pts.fingertip_index = {1, 2};
  EXPECT_DOUBLE_EQ(penetration_from_points(pts, s), 0.5);
}

TEST(SelfPenetration, OpenPoseIsZeroAndCoincidentPairCounts) {
  EXPECT_EQ(self_penetration_loss(HandPose{}), 0.0);
  HandPoints pts;
  pts.points = {{0, 0}, {0, 0}, {5, 5}, {-5, -5}};
  pts.link_ids = {LinkId::Left1, LinkId::Right1, LinkId::Left2, LinkId::Right2};
  pts.fingertip_index = {2, 3};
  EXPECT_DOUBLE_EQ(self_penetration_from_points(pts, 0.08), 0.08);
}

TEST(PhysicsLosses, MatchBruteForceOracles) {
  Rng rng(31);
  PhysicsConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    const ObjectShape s = sample_object(trial);
    HandPose p = random_pose_near(rng);
    if (trial % 4 == 0) p = HandPose(rng.uniform(-0.1, 0.1), rng.uniform(-0.3, 0.1), 0, -1.2, -1.5, 1.2, 1.5);
    const oracle::Hand h = oracle::hand_points(p.values().data());
    EXPECT_NEAR(surface_pull_loss(p, s, cfg), oracle::surface_pull(h, s.vertices(), cfg.contact_clamp), 1e-12);
    EXPECT_NEAR(penetration_loss(p, s, cfg), oracle::penetration(h, s.vertices()), 1e-9);
    EXPECT_NEAR(self_penetration_loss(p, cfg), oracle::self_penetration(h, cfg.self_min_dist), 1e-12);
  }
}

TEST(PhysicsLosses, CurledPoseActivatesSelfPenetration) {
  const HandPose curled(0, 0, 0, -1.2, -1.5, 1.2, 1.5);
  const oracle::Hand h = oracle::hand_points(curled.values().data());
  const double expect = oracle::self_penetration(h, 0.08);
  EXPECT_GT(expect, 0.0);
  EXPECT_NEAR(self_penetration_loss(curled), expect, 1e-12);
}

TEST(PhysicsLosses, NonNegativeAndTranslationCovariant) {
  Rng rng(4);
  PhysicsConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const ObjectShape s = sample_object(50 + trial);
    const HandPose p = random_pose_near(rng);
    const Vec2 off{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    HandPose q = p;
    q.values()[0] += off.x;
    q.values()[1] += off.y;
    const ObjectShape t = s.translated(off);
    const PhysicsTerms a = physics_terms(p, s, cfg), b = physics_terms(q, t, cfg);
    for (int i = 0; i < 3; ++i) {
      EXPECT_GE(a.values[i], 0.0);
      EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
    }
  }
}

TEST(PhysicsLossAndGrad, ZeroWeightsGiveZero) {
  const PhysicsValueGrad r = physics_loss_and_grad(HandPose(0.1, -0.4, 0.2, 0.5, 0.5, -0.5, -0.5), sample_object(3),
                                                   PhysicsConfig{}, {0, 0, 0});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE((r.grad.array() == 0.0).all());
}

TEST(PhysicsLossAndGrad, NonFinitePoseRejected) {
  try {
    physics_loss_and_grad(HandPose(0, 0, INFINITY, 0, 0, 0, 0), sample_object(3), PhysicsConfig{}, {1, 1, 1});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
  }
}

TEST(PhysicsLossAndGrad, FarPoseOnlySurfaceTermAndJointGradsMatchFd) {
  const ObjectShape s = box(-0.3, -0.3, 0.3, 0.3);
  PhysicsConfig cfg;
  cfg.contact_clamp = 5.0;
  const HandPose p(0, -2.0, 0, 0.3, -0.2, -0.4, 0.1);
  const PhysicsTerms t = physics_terms(p, s, cfg);
  EXPECT_EQ(t.values[1], 0.0);
  EXPECT_EQ(t.values[2], 0.0);
  const PhysicsWeights w{1, 1, 1};
  const PhysicsValueGrad g = physics_loss_and_grad(p, s, cfg, w);
  EXPECT_DOUBLE_EQ(g.value, t.values[0]);
  for (int d = 3; d < kPoseDim; ++d) {
    HandPose up = p, dn = p;
    up.values()[d] += 1e-5;
    dn.values()[d] -= 1e-5;
    const double fd = (surface_pull_loss(up, s, cfg) - surface_pull_loss(dn, s, cfg)) / 2e-5;
    EXPECT_LT(std::abs(g.grad[d] - fd), 1e-4 * std::max(std::abs(fd), 1e-3));
  }
}

TEST(PhysicsLossAndGrad, GradientMatchesFiniteDifferencesOffKink) {
  Rng rng(77);
  PhysicsConfig cfg;
  int checked = 0;
  for (int trial = 0; checked < 100 && trial < 5000; ++trial) {
    const ObjectShape s = sample_object(500 + trial);
    const HandPose p = random_pose_near(rng);
    if (near_kink(p, s, cfg, 1e-3)) continue;
    const PhysicsWeights w{rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)};
    const PhysicsValueGrad g = physics_loss_and_grad(p, s, cfg, w);
    auto value = [&](const HandPose& q) {
      const oracle::Hand h = oracle::hand_points(q.values().data());
      return w[0] * oracle::surface_pull(h, s.vertices(), cfg.contact_clamp) +
             w[1] * oracle::penetration(h, s.vertices()) + w[2] * oracle::self_penetration(h, cfg.self_min_dist);
    };
    EXPECT_NEAR(g.value, value(p), 1e-9);
    for (int d = 0; d < kPoseDim; ++d) {
      HandPose up = p, dn = p;
      up.values()[d] += 1e-5;
      dn.values()[d] -= 1e-5;
      const double fd = (value(up) - value(dn)) / 2e-5;
      const double err = std::abs(g.grad[d] - fd);
      if (std::abs(fd) < 1e-6) {
        EXPECT_LT(err, 1e-8) << "trial " << trial << " dim " << d;
      } else {
        EXPECT_LT(err / std::abs(fd), 1e-4) << "trial " << trial << " dim " << d;
      }
    }
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}
