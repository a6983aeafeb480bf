#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace evograsp {

inline constexpr int kPoseDim = 7;
using PoseVec = Eigen::Matrix<double, kPoseDim, 1>;

struct Vec2 {
  double x{0.0};
  double y{0.0};

  constexpr Vec2() = default;
  constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}

  constexpr Vec2 operator+(const Vec2& r) const { return {x + r.x, y + r.y}; }
  constexpr Vec2 operator-(const Vec2& r) const { return {x - r.x, y - r.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr Vec2& operator+=(const Vec2& r) { x += r.x; y += r.y; return *this; }
  constexpr bool operator==(const Vec2&) const = default;

  constexpr double dot(const Vec2& r) const { return x * r.x + y * r.y; }
  constexpr double cross(const Vec2& r) const { return x * r.y - y * r.x; }
  /// Counter-clockwise quarter turn.
  constexpr Vec2 perp() const { return {-y, x}; }
  double norm() const { return std::hypot(x, y); }
};

constexpr Vec2 operator*(double s, const Vec2& v) { return v * s; }

inline Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

struct HandModel {
  double palm_half_width = 0.2;
  double link1_len = 0.35;
  double link2_len = 0.25;
  int samples_per_link = 5;
  int palm_samples = 3;

  void validate() const;
};

/// Planar grasp parameters: translation, palm rotation, and two joints per
/// finger (left j1, j2, right j1, j2). Joint angles are kept as sampled; the
/// [-pi/2, pi/2] clamp is applied when the pose is turned into geometry.
class HandPose {
 public:
  HandPose() { values_.setZero(); }
  explicit HandPose(const PoseVec& v) : values_(v) {}
  HandPose(double tx, double ty, double phi, double l1, double l2, double r1, double r2) {
    values_ << tx, ty, phi, l1, l2, r1, r2;
  }

  double tx() const { return values_[0]; }
  double ty() const { return values_[1]; }
  double phi() const { return values_[2]; }
  /// Joint index 0..3 = left j1, left j2, right j1, right j2.
  double joint(int i) const { return values_[3 + i]; }

  const PoseVec& values() const { return values_; }
  PoseVec& values() { return values_; }
  double operator[](int i) const { return values_[i]; }

  bool finite() const { return values_.allFinite(); }

 private:
  PoseVec values_;
};

inline constexpr double kJointLimit = M_PI / 2.0;

enum class LinkId : int { Palm = 0, Left1 = 1, Left2 = 2, Right1 = 3, Right2 = 4 };

inline bool is_left_finger(LinkId id) { return id == LinkId::Left1 || id == LinkId::Left2; }
inline bool is_right_finger(LinkId id) { return id == LinkId::Right1 || id == LinkId::Right2; }

struct HandPoints {
  std::vector<Vec2> points;
  std::vector<LinkId> link_ids;
  /// Index into `points` of the left and right fingertip.
  std::array<std::size_t, 2> fingertip_index{};
  /// d point / d pose, one 2x7 block per point. Filled only when requested.
  std::vector<Eigen::Matrix<double, 2, kPoseDim>> jacobians;

  Vec2 fingertip(int i) const { return points[fingertip_index[i]]; }
  std::size_t size() const { return points.size(); }
};

HandPoints forward_kinematics(const HandPose& pose, const HandModel& model = {},
                              bool with_jacobian = false);

inline constexpr int kBoundarySamples = 64;

/// Convex counter-clockwise polygon with a boundary point cloud sampled
/// uniformly by arc length. Built only through `from_vertices`, which
/// validates the polygon and derives the boundary samples.
class ObjectShape {
 public:
  static ObjectShape from_vertices(std::string object_id, std::vector<Vec2> vertices);

  const std::string& object_id() const { return object_id_; }
  const std::vector<Vec2>& vertices() const { return vertices_; }
  const std::vector<Vec2>& boundary_points() const { return boundary_points_; }
  const std::vector<Vec2>& boundary_normals() const { return boundary_normals_; }

  /// Unit outward normal of edge i (from vertex i to vertex i+1).
  const Vec2& edge_normal(std::size_t i) const { return edge_normals_[i]; }
  double area() const;
  Vec2 centroid() const;

  ObjectShape translated(const Vec2& offset) const;

 private:
  ObjectShape() = default;

  std::string object_id_;
  std::vector<Vec2> vertices_;
  std::vector<Vec2> edge_normals_;
  std::vector<Vec2> boundary_points_;
  std::vector<Vec2> boundary_normals_;
};

struct SignedDistance {
  double distance = 0.0;
  /// Gradient of the distance field; the outward normal at the closest point.
  Vec2 gradient;
  Vec2 closest;
};

SignedDistance signed_distance_full(const ObjectShape& shape, const Vec2& p);

inline double signed_distance(const ObjectShape& shape, const Vec2& p) {
  return signed_distance_full(shape, p).distance;
}

/// Random convex 8-12 gon whose centroid sits at the origin and whose minimum
/// centroid-to-edge distance is uniform in [0.3, 0.6].
ObjectShape sample_object(std::uint64_t seed);

bool is_convex_ccw(const std::vector<Vec2>& vertices);

nlohmann::json object_to_json(const ObjectShape& shape);
ObjectShape object_from_json(const nlohmann::json& j);

void save_object(const ObjectShape& shape, const std::filesystem::path& path);
ObjectShape load_object(const std::filesystem::path& path);
/// Every *.json file in `dir`, ordered by file name.
std::vector<ObjectShape> load_objects_dir(const std::filesystem::path& dir);

}  // namespace evograsp
