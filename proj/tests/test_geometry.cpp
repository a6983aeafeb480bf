#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "evograsp/error.hpp"
#include "evograsp/geometry.hpp"
#include "evograsp/rng.hpp"
#include "oracle.hpp"

using namespace evograsp;

namespace {

ObjectShape unit_square() {
  return ObjectShape::from_vertices("square", {{-0.5, -0.5}, {0.5, -0.5}, {0.5, 0.5}, {-0.5, 0.5}});
}

// Fingertip by accumulating rotations link by link in plain trig.
Vec2 trig_fingertip(double tx, double ty, double phi, double base_x, double j1, double j2) {
  const double w1 = phi + j1, w2 = phi + j1 + j2;
  double x = tx + std::cos(phi) * base_x;
  double y = ty + std::sin(phi) * base_x;
  x += -std::sin(w1) * 0.35;
  y += std::cos(w1) * 0.35;
  x += -std::sin(w2) * 0.25;
  y += std::cos(w2) * 0.25;
  return {x, y};
}

}  // namespace

TEST(ForwardKinematics, ZeroPoseFingertips) {
  const HandPoints h = forward_kinematics(HandPose{});
  EXPECT_NEAR(h.fingertip(0).x, -0.2, 1e-15);
  EXPECT_NEAR(h.fingertip(0).y, 0.6, 1e-15);
  EXPECT_NEAR(h.fingertip(1).x, 0.2, 1e-15);
  EXPECT_NEAR(h.fingertip(1).y, 0.6, 1e-15);
}

TEST(ForwardKinematics, PureTranslation) {
  const HandPoints h = forward_kinematics(HandPose(1, 2, 0, 0, 0, 0, 0));
  EXPECT_NEAR(h.fingertip(0).x, 0.8, 1e-15);
  EXPECT_NEAR(h.fingertip(0).y, 2.6, 1e-15);
  EXPECT_NEAR(h.fingertip(1).x, 1.2, 1e-15);
  EXPECT_NEAR(h.fingertip(1).y, 2.6, 1e-15);
}

TEST(ForwardKinematics, RotatedBentPoseMatchesTrig) {
  const HandPose pose(0, 0, M_PI / 2, M_PI / 6, -M_PI / 4, 0, 0);
  const HandPoints h = forward_kinematics(pose);
  const Vec2 l = trig_fingertip(0, 0, M_PI / 2, -0.2, M_PI / 6, -M_PI / 4);
  const Vec2 r = trig_fingertip(0, 0, M_PI / 2, 0.2, 0, 0);
  EXPECT_NEAR(h.fingertip(0).x, l.x, 1e-12);
  EXPECT_NEAR(h.fingertip(0).y, l.y, 1e-12);
  EXPECT_NEAR(h.fingertip(1).x, r.x, 1e-12);
  EXPECT_NEAR(h.fingertip(1).y, r.y, 1e-12);
}

TEST(ForwardKinematics, LayoutAndFingertipsAreChainEnds) {
  const HandPoints h = forward_kinematics(HandPose(0.1, -0.3, 0.4, 0.2, 0.3, -0.1, -0.5));
  ASSERT_EQ(h.points.size(), 3u + 4u * 5u);
  ASSERT_EQ(h.link_ids.size(), h.points.size());
  EXPECT_EQ(h.link_ids[h.fingertip_index[0]], LinkId::Left2);
  EXPECT_EQ(h.link_ids[h.fingertip_index[1]], LinkId::Right2);
  EXPECT_EQ(h.fingertip_index[1], h.points.size() - 1);
  EXPECT_EQ(h.link_ids[h.fingertip_index[0] + 1], LinkId::Right1);
}

TEST(ForwardKinematics, JointsClampedWhenTurnedIntoGeometry) {
  const HandPoints a = forward_kinematics(HandPose(0, 0, 0, 3.0, 0, 0, 0));
  const HandPoints b = forward_kinematics(HandPose(0, 0, 0, M_PI / 2, 0, 0, 0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.points[i].x, b.points[i].x);
    EXPECT_EQ(a.points[i].y, b.points[i].y);
  }
}

TEST(ForwardKinematics, NonFinitePoseRejected) {
  try {
    forward_kinematics(HandPose(0, std::nan(""), 0, 0, 0, 0, 0));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
  }
}

TEST(ForwardKinematics, TranslationAndRotationEquivariance) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    HandPose p;
    for (int i = 0; i < kPoseDim; ++i) p.values()[i] = rng.uniform(-1.2, 1.2);
    const double dx = rng.uniform(-2, 2), dy = rng.uniform(-2, 2), delta = rng.uniform(-3, 3);
    HandPose moved = p, turned = p;
    moved.values()[0] += dx;
    moved.values()[1] += dy;
    turned.values()[2] += delta;
    const HandPoints h = forward_kinematics(p), hm = forward_kinematics(moved), ht = forward_kinematics(turned);
    const Vec2 c{p.tx(), p.ty()};
    for (std::size_t i = 0; i < h.size(); ++i) {
      EXPECT_NEAR(hm.points[i].x, h.points[i].x + dx, 1e-12);
      EXPECT_NEAR(hm.points[i].y, h.points[i].y + dy, 1e-12);
      const Vec2 r = c + rotate(h.points[i] - c, delta);
      EXPECT_NEAR(ht.points[i].x, r.x, 1e-12);
      EXPECT_NEAR(ht.points[i].y, r.y, 1e-12);
    }
  }
}

TEST(ForwardKinematics, JacobianMatchesFiniteDifferences) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    HandPose p;
    for (int i = 0; i < kPoseDim; ++i) p.values()[i] = rng.uniform(-1.3, 1.3);
    const HandPoints h = forward_kinematics(p, {}, true);
    const double step = 1e-6;
    for (int d = 0; d < kPoseDim; ++d) {
      HandPose up = p, dn = p;
      up.values()[d] += step;
      dn.values()[d] -= step;
      const HandPoints hu = forward_kinematics(up), hd = forward_kinematics(dn);
      for (std::size_t i = 0; i < h.size(); ++i) {
        EXPECT_NEAR(h.jacobians[i](0, d), (hu.points[i].x - hd.points[i].x) / (2 * step), 1e-8);
        EXPECT_NEAR(h.jacobians[i](1, d), (hu.points[i].y - hd.points[i].y) / (2 * step), 1e-8);
      }
    }
  }
}

TEST(SignedDistance, SquareCenterAndAxisPoint) {
  const ObjectShape sq = unit_square();
  EXPECT_DOUBLE_EQ(signed_distance(sq, {0, 0}), -0.5);
  EXPECT_DOUBLE_EQ(signed_distance(sq, {1, 0}), 0.5);
}

TEST(SignedDistance, MatchesBruteForceOnRandomPolygons) {
  Rng rng(17);
  for (int k = 0; k < 20; ++k) {
    const ObjectShape s = sample_object(1000 + k);
    for (int i = 0; i < 200; ++i) {
      const Vec2 p{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
      EXPECT_NEAR(signed_distance(s, p), oracle::sdf(s.vertices(), p), 1e-9);
    }
  }
}

TEST(SignedDistance, TenGonMatchesBruteForce) {
  std::vector<Vec2> v;
  for (int i = 0; i < 10; ++i) v.push_back({0.7 * std::cos(2 * M_PI * i / 10), 0.5 * std::sin(2 * M_PI * i / 10)});
  const ObjectShape s = ObjectShape::from_vertices("ten", v);
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const Vec2 p{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    EXPECT_NEAR(signed_distance(s, p), oracle::sdf(v, p), 1e-9);
  }
}

TEST(SignedDistance, OneLipschitz) {
  const ObjectShape s = sample_object(4);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const Vec2 p{rng.uniform(-1, 1), rng.uniform(-1, 1)}, q{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    EXPECT_LE(std::abs(signed_distance(s, p) - signed_distance(s, q)), (p - q).norm() + 1e-12);
  }
}

TEST(SignedDistance, GradientIsUnitAndPointsFromClosestPoint) {
  const ObjectShape s = sample_object(12);
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const Vec2 p{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const SignedDistance sd = signed_distance_full(s, p);
    EXPECT_NEAR(sd.gradient.norm(), 1.0, 1e-12);
    EXPECT_NEAR(signed_distance(s, sd.closest), 0.0, 1e-9);
    const Vec2 back = sd.closest + sd.gradient * sd.distance;
    EXPECT_NEAR(back.x, p.x, 1e-9);
    EXPECT_NEAR(back.y, p.y, 1e-9);
  }
}

TEST(SignedDistance, DegeneratePolygonRejected) {
  try {
    ObjectShape::from_vertices("flat", {{0, 0}, {1, 0}, {2, 1e-12}});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
  }
}

TEST(ObjectShape, BoundarySamplesOnSurfaceWithOutwardNormals) {
  for (std::uint64_t seed : {0u, 1u, 7u, 99u}) {
    const ObjectShape s = sample_object(seed);
    ASSERT_EQ(s.boundary_points().size(), static_cast<std::size_t>(kBoundarySamples));
    ASSERT_EQ(s.boundary_normals().size(), s.boundary_points().size());
    for (std::size_t i = 0; i < s.boundary_points().size(); ++i) {
      const Vec2 p = s.boundary_points()[i], n = s.boundary_normals()[i];
      EXPECT_NEAR(signed_distance(s, p), 0.0, 1e-9);
      EXPECT_NEAR(n.norm(), 1.0, 1e-9);
      EXPECT_GT(signed_distance_full(s, p + n * 1e-4).gradient.dot(n), 0.999);
    }
  }
}

TEST(ObjectShape, BoundarySamplesEvenlySpacedByArcLength) {
  const ObjectShape s = unit_square();
  const auto& b = s.boundary_points();
  double perim = 4.0, step = perim / kBoundarySamples;
  for (std::size_t i = 0; i + 1 < b.size(); ++i) {
    const Vec2 a = b[i], c = b[i + 1];
    // On the same edge the chord equals the arc step.
    if (std::abs(a.x - c.x) < 1e-12 || std::abs(a.y - c.y) < 1e-12) EXPECT_NEAR((c - a).norm(), step, 1e-12);
  }
}

TEST(SampleObject, DeterministicConvexAndInscribedRadius) {
  const ObjectShape a = sample_object(0), b = sample_object(0);
  ASSERT_EQ(a.vertices().size(), b.vertices().size());
  for (std::size_t i = 0; i < a.vertices().size(); ++i) EXPECT_EQ(a.vertices()[i], b.vertices()[i]);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const ObjectShape s = sample_object(seed);
    const auto& v = s.vertices();
    EXPECT_GE(v.size(), 8u);
    EXPECT_LE(v.size(), 12u);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Vec2 e0 = v[(i + 1) % v.size()] - v[i], e1 = v[(i + 2) % v.size()] - v[(i + 1) % v.size()];
      EXPECT_GT(e0.cross(e1), 0.0);
    }
  }
  const ObjectShape s7 = sample_object(7);
  const Vec2 c = s7.centroid();
  double r = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s7.vertices().size(); ++i)
    r = std::min(r, oracle::segment_distance(c, s7.vertices()[i], s7.vertices()[(i + 1) % s7.vertices().size()]));
  EXPECT_GE(r, 0.3 - 1e-12);
  EXPECT_LE(r, 0.6 + 1e-12);
}

TEST(ObjectShape, JsonFileRoundTrip) {
  const ObjectShape s = sample_object(21);
  const auto dir = std::filesystem::temp_directory_path() / "evograsp_geom_rt";
  std::filesystem::create_directories(dir);
  save_object(s, dir / "a.json");
  const ObjectShape r = load_object(dir / "a.json");
  EXPECT_EQ(r.object_id(), s.object_id());
  ASSERT_EQ(r.vertices().size(), s.vertices().size());
  for (std::size_t i = 0; i < s.vertices().size(); ++i) EXPECT_EQ(r.vertices()[i], s.vertices()[i]);
  for (std::size_t i = 0; i < s.boundary_points().size(); ++i) EXPECT_EQ(r.boundary_points()[i], s.boundary_points()[i]);
  std::filesystem::remove_all(dir);
}

TEST(ObjectShape, NonConvexRejected) {
  EXPECT_THROW(ObjectShape::from_vertices("dart", {{0, 0}, {1, 0}, {0.2, 0.2}, {0, 1}}), Error);
  EXPECT_THROW(ObjectShape::from_vertices("cw", {{0, 0}, {0, 1}, {1, 1}, {1, 0}}), Error);
}
