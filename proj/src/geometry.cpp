#include "evograsp/geometry.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

void HandModel::validate() const {
  if (!(palm_half_width > 0 && link1_len > 0 && link2_len > 0))
    fail(ErrorCode::InvalidConfig, "hand model lengths must be positive");
  if (samples_per_link < 2 || palm_samples < 2)
    fail(ErrorCode::InvalidConfig, "hand model needs at least 2 samples per link");
}

namespace {

// Unit direction of a finger link whose cumulative joint angle is `angle`;
// zero points along +y in the palm frame.
Vec2 link_dir(double angle) { return {-std::sin(angle), std::cos(angle)}; }
Vec2 link_dir_deriv(double angle) { return {-std::cos(angle), -std::sin(angle)}; }

struct ClampedJoint {
  double value;
  double slope;  // d value / d raw
};

ClampedJoint clamp_joint(double raw) {
  if (raw > kJointLimit) return {kJointLimit, 0.0};
  if (raw < -kJointLimit) return {-kJointLimit, 0.0};
  return {raw, 1.0};
}

}  // namespace

HandPoints forward_kinematics(const HandPose& pose, const HandModel& model, bool with_jacobian) {
  if (!pose.finite()) fail(ErrorCode::InvalidInput, "hand pose has non-finite entries");

  const Vec2 t{pose.tx(), pose.ty()};
  const double phi = pose.phi();
  const double c = std::cos(phi), s = std::sin(phi);
  auto to_world = [&](const Vec2& q) { return Vec2{c * q.x - s * q.y + t.x, s * q.x + c * q.y + t.y}; };
  auto rot = [&](const Vec2& q) { return Vec2{c * q.x - s * q.y, s * q.x + c * q.y}; };

  const int n = model.samples_per_link;
  const std::size_t total = static_cast<std::size_t>(model.palm_samples + 4 * n);

  HandPoints out;
  out.points.reserve(total);
  out.link_ids.reserve(total);
  if (with_jacobian) out.jacobians.reserve(total);

  // Each local point q carries dq/d(joint) for the 4 joints.
  auto emit = [&](const Vec2& q, LinkId link, const std::array<Vec2, 4>& dq) {
    const Vec2 p = to_world(q);
    out.points.push_back(p);
    out.link_ids.push_back(link);
    if (!with_jacobian) return;
    Eigen::Matrix<double, 2, kPoseDim> jac;
    jac.setZero();
    jac(0, 0) = 1.0;
    jac(1, 1) = 1.0;
    const Vec2 dphi = (p - t).perp();
    jac(0, 2) = dphi.x;
    jac(1, 2) = dphi.y;
    for (int k = 0; k < 4; ++k) {
      const Vec2 d = rot(dq[k]);
      jac(0, 3 + k) = d.x;
      jac(1, 3 + k) = d.y;
    }
    out.jacobians.push_back(jac);
  };

  const double w = model.palm_half_width;
  const std::array<Vec2, 4> no_joint{};
  for (int k = 0; k < model.palm_samples; ++k) {
    const double x = -w + 2.0 * w * k / (model.palm_samples - 1);
    emit({x, 0.0}, LinkId::Palm, no_joint);
  }

  for (int finger = 0; finger < 2; ++finger) {
    const Vec2 base{finger == 0 ? -w : w, 0.0};
    const ClampedJoint j1 = clamp_joint(pose.joint(2 * finger));
    const ClampedJoint j2 = clamp_joint(pose.joint(2 * finger + 1));
    const double a1 = j1.value;
    const double a2 = j1.value + j2.value;
    const LinkId first = finger == 0 ? LinkId::Left1 : LinkId::Right1;
    const LinkId second = finger == 0 ? LinkId::Left2 : LinkId::Right2;

    for (int k = 1; k <= n; ++k) {
      const double len = model.link1_len * k / n;
      std::array<Vec2, 4> dq{};
      dq[2 * finger] = link_dir_deriv(a1) * (len * j1.slope);
      emit(base + link_dir(a1) * len, first, dq);
    }
    const Vec2 elbow = base + link_dir(a1) * model.link1_len;
    for (int k = 1; k <= n; ++k) {
      const double len = model.link2_len * k / n;
      std::array<Vec2, 4> dq{};
      dq[2 * finger] = (link_dir_deriv(a1) * model.link1_len + link_dir_deriv(a2) * len) * j1.slope;
      dq[2 * finger + 1] = link_dir_deriv(a2) * (len * j2.slope);
      emit(elbow + link_dir(a2) * len, second, dq);
    }
    out.fingertip_index[finger] = out.points.size() - 1;
  }
  return out;
}

bool is_convex_ccw(const std::vector<Vec2>& v) {
  const std::size_t n = v.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e0 = v[(i + 1) % n] - v[i];
    const Vec2 e1 = v[(i + 2) % n] - v[(i + 1) % n];
    if (!(e0.cross(e1) > 0.0)) return false;
  }
  // Total turning must be one revolution, otherwise the polygon winds twice.
  double turning = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e0 = v[(i + 1) % n] - v[i];
    const Vec2 e1 = v[(i + 2) % n] - v[(i + 1) % n];
    turning += std::atan2(e0.cross(e1), e0.dot(e1));
  }
  return std::abs(turning - 2.0 * M_PI) < 1e-6;
}

namespace {

double polygon_area(const std::vector<Vec2>& v) {
  double a = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) a += v[i].cross(v[(i + 1) % v.size()]);
  return 0.5 * a;
}

}  // namespace

ObjectShape ObjectShape::from_vertices(std::string object_id, std::vector<Vec2> vertices) {
  for (const auto& p : vertices)
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      fail(ErrorCode::InvalidInput, "object '" + object_id + "' has non-finite vertices");
  if (vertices.size() < 3)
    fail(ErrorCode::InvalidInput, "object '" + object_id + "' needs at least 3 vertices");
  if (polygon_area(vertices) < 1e-9)
    fail(ErrorCode::InvalidInput, "object '" + object_id + "' is degenerate or clockwise");
  if (!is_convex_ccw(vertices))
    fail(ErrorCode::InvalidInput, "object '" + object_id + "' is not a convex counter-clockwise polygon");

  ObjectShape shape;
  shape.object_id_ = std::move(object_id);
  shape.vertices_ = std::move(vertices);

  const auto& v = shape.vertices_;
  const std::size_t n = v.size();
  std::vector<double> edge_len(n);
  double perimeter = 0.0;
  shape.edge_normals_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 e = v[(i + 1) % n] - v[i];
    edge_len[i] = e.norm();
    perimeter += edge_len[i];
    shape.edge_normals_[i] = Vec2{e.y, -e.x} * (1.0 / edge_len[i]);
  }

  shape.boundary_points_.reserve(kBoundarySamples);
  shape.boundary_normals_.reserve(kBoundarySamples);
  std::size_t edge = 0;
  double edge_start = 0.0;
  for (int k = 0; k < kBoundarySamples; ++k) {
    const double s = perimeter * k / kBoundarySamples;
    while (edge + 1 < n && s >= edge_start + edge_len[edge]) {
      edge_start += edge_len[edge];
      ++edge;
    }
    const double frac = std::clamp((s - edge_start) / edge_len[edge], 0.0, 1.0);
    const Vec2 a = v[edge], b = v[(edge + 1) % n];
    shape.boundary_points_.push_back(a + (b - a) * frac);
    shape.boundary_normals_.push_back(shape.edge_normals_[edge]);
  }
  return shape;
}

double ObjectShape::area() const { return polygon_area(vertices_); }

Vec2 ObjectShape::centroid() const {
  const std::size_t n = vertices_.size();
  double a = 0.0, cx = 0.0, cy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = vertices_[i];
    const Vec2& q = vertices_[(i + 1) % n];
    const double cr = p.cross(q);
    a += cr;
    cx += (p.x + q.x) * cr;
    cy += (p.y + q.y) * cr;
  }
  return {cx / (3.0 * a), cy / (3.0 * a)};
}

ObjectShape ObjectShape::translated(const Vec2& offset) const {
  std::vector<Vec2> moved = vertices_;
  for (auto& p : moved) p += offset;
  return from_vertices(object_id_, std::move(moved));
}

SignedDistance signed_distance_full(const ObjectShape& shape, const Vec2& p) {
  const auto& v = shape.vertices();
  const std::size_t n = v.size();

  // Inside a convex polygon the nearest boundary point lies on the edge whose
  // supporting line is closest, so the largest plane distance decides.
  double max_plane = -std::numeric_limits<double>::infinity();
  std::size_t max_edge = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double h = shape.edge_normal(i).dot(p - v[i]);
    if (h > max_plane) {
      max_plane = h;
      max_edge = i;
    }
  }
  if (max_plane <= 0.0) {
    const Vec2& nrm = shape.edge_normal(max_edge);
    return {max_plane, nrm, p - nrm * max_plane};
  }

  double best = std::numeric_limits<double>::infinity();
  Vec2 closest;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = v[i];
    const Vec2 e = v[(i + 1) % n] - a;
    const double u = std::clamp((p - a).dot(e) / e.dot(e), 0.0, 1.0);
    const Vec2 c = a + e * u;
    const double d = (p - c).norm();
    if (d < best) {
      best = d;
      closest = c;
    }
  }
  if (best < 1e-300) return {0.0, shape.edge_normal(max_edge), p};
  return {best, (p - closest) * (1.0 / best), closest};
}

ObjectShape sample_object(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x0b1ec7));
  const int n = rng.uniform_int(8, 12);
  const double radius = rng.uniform(0.3, 0.6);
  const double offset = rng.uniform(0.0, 2.0 * M_PI);
  const double spacing = 2.0 * M_PI / n;

  std::vector<double> angles(n);
  for (int i = 0; i < n; ++i) angles[i] = offset + spacing * i + rng.uniform(-0.3, 0.3) * spacing;

  // Vertex i is where support lines i and i+1 (both at unit distance) meet.
  std::vector<Vec2> vertices(n);
  for (int i = 0; i < n; ++i) {
    const double a0 = angles[i], a1 = angles[(i + 1) % n];
    const double det = std::sin(a1 - a0);
    vertices[i] = {(std::sin(a1) - std::sin(a0)) / det, (std::cos(a0) - std::cos(a1)) / det};
  }

  std::vector<Vec2> probe = vertices;
  const Vec2 c = ObjectShape::from_vertices("probe", probe).centroid();
  double min_dist = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const Vec2 a = vertices[i] - c;
    const Vec2 e = vertices[(i + 1) % n] - vertices[i];
    min_dist = std::min(min_dist, std::abs(e.cross(a)) / e.norm());
  }
  const double scale = radius / min_dist;
  for (auto& p : vertices) p = (p - c) * scale;
  return ObjectShape::from_vertices("obj-" + std::to_string(seed), std::move(vertices));
}

nlohmann::json object_to_json(const ObjectShape& shape) {
  nlohmann::json verts = nlohmann::json::array();
  for (const auto& p : shape.vertices()) verts.push_back({p.x, p.y});
  return {{"object_id", shape.object_id()}, {"vertices", std::move(verts)}};
}

ObjectShape object_from_json(const nlohmann::json& j) {
  try {
    std::vector<Vec2> verts;
    for (const auto& p : j.at("vertices")) {
      if (!p.is_array() || p.size() != 2) fail(ErrorCode::InvalidInput, "vertex must be [x, y]");
      verts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    return ObjectShape::from_vertices(j.at("object_id").get<std::string>(), std::move(verts));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("malformed object record: ") + e.what());
  }
}

void save_object(const ObjectShape& shape, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << object_to_json(shape).dump() << '\n';
}

ObjectShape load_object(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, path.string() + ": " + e.what());
  }
  return object_from_json(j);
}

std::vector<ObjectShape> load_objects_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorCode::Io, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<ObjectShape> shapes;
  shapes.reserve(files.size());
  for (const auto& f : files) shapes.push_back(load_object(f));
  return shapes;
}

}  // namespace evograsp
