#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "evograsp/geometry.hpp"

namespace evograsp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Tanh, Identity };

/// Trainable low-rank additive update: effective weight = W + scale * up * down.
struct LowRankAdapter {
  Matrix down;  // rank x in
  Matrix up;    // out x rank
  double scale = 1.0;
  bool enabled = true;

  int rank() const { return static_cast<int>(down.rows()); }
};

struct Linear {
  Matrix weight;  // out x in
  Matrix bias;    // out x 1
  std::optional<LowRankAdapter> adapter;

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
  Matrix effective_weight() const;
};

struct MlpGrads {
  std::vector<Matrix> weight, bias, down, up;
};

/// Which parameters a backward pass or optimizer touches.
enum class ParamGroup { Base, Adapters };

/// Fully connected network over column-batched inputs. Hidden layers use the
/// configured activation, the last layer is linear.
class Mlp {
 public:
  struct Tape {
    std::vector<Matrix> inputs;  // input of every layer
    std::vector<Matrix> mids;    // down * input, for adapted layers
    Matrix output;
  };

  Mlp() = default;
  /// Weights ~ N(0, 1/fan_in); biases zero. `zero_last` zeroes the output layer.
  Mlp(const std::vector<int>& dims, Activation activation, std::uint64_t seed, bool zero_last = false);

  int input_dim() const { return layers_.front().in(); }
  int output_dim() const { return layers_.back().out(); }
  std::vector<int> dims() const;
  Activation activation() const { return activation_; }
  std::size_t parameter_count() const;

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

  Matrix forward(const Matrix& input) const;
  Matrix forward(const Matrix& input, Tape& tape) const;

  /// Reverse pass. Returns d loss / d input. Parameter gradients are added
  /// into `grads` for the requested group when `grads` is non-null.
  Matrix backward(const Tape& tape, const Matrix& output_grad, MlpGrads* grads,
                  ParamGroup group = ParamGroup::Base) const;

  MlpGrads zero_grads(ParamGroup group) const;

  /// Attaches zero-initialized-up adapters to every layer.
  void attach_adapters(int rank, double scale, std::uint64_t seed);
  void detach_adapters();
  bool has_adapters() const;
  /// Plain network with the adapter update folded into each weight.
  Mlp merged() const;

  std::vector<Matrix*> parameters(ParamGroup group);
  std::vector<const Matrix*> parameters(ParamGroup group) const;
  static std::vector<Matrix*> grad_list(MlpGrads& grads, ParamGroup group);

 private:
  std::vector<Linear> layers_;
  Activation activation_ = Activation::Tanh;
};

/// Per-point MLP followed by max pooling over points.
class PointSetEncoder {
 public:
  struct Tape {
    std::vector<Mlp::Tape> points;
    std::vector<int> argmax;
  };

  PointSetEncoder() = default;
  PointSetEncoder(int hidden, int out, std::uint64_t seed);

  Vector encode(const std::vector<Vec2>& points) const;
  Vector encode(const std::vector<Vec2>& points, Tape& tape) const;
  void backward(const Tape& tape, const Vector& desc_grad, MlpGrads* grads,
                ParamGroup group = ParamGroup::Base) const;

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  int output_dim() const { return net_.output_dim(); }

 private:
  Mlp net_;
};

struct NetArch {
  int pose_dim = kPoseDim;
  int desc_dim = 64;
  int enc_hidden = 32;
  int time_pairs = 8;
  int hidden = 128;
  int hidden_layers = 2;
  int horizon = 100;  // T, used to normalize timesteps

  int body_input() const { return pose_dim + desc_dim + 2 * time_pairs; }
  nlohmann::json to_json() const;
  static NetArch from_json(const nlohmann::json& j);
  bool operator==(const NetArch&) const = default;
};

/// Sinusoidal embedding of tau / horizon with geometric frequencies 2^k.
Matrix time_embedding(const std::vector<double>& taus, int pairs, int horizon);

struct EpsGrads {
  MlpGrads encoder;
  MlpGrads body;
};

/// The noise-prediction network eps(x, t, O): point-set encoder for O plus
/// an MLP body over pose (+) descriptor (+) time embedding.
class EpsNet {
 public:
  struct Tape {
    Mlp::Tape body;
  };
  struct InputGrads {
    Matrix pose;  // pose_dim x B
    Matrix desc;  // desc_dim x B
  };

  EpsNet() = default;
  EpsNet(const NetArch& arch, std::uint64_t seed);

  const NetArch& arch() const { return arch_; }
  std::size_t parameter_count() const { return encoder_.net().parameter_count() + body_.parameter_count(); }

  Vector encode(const ObjectShape& shape) const { return encoder_.encode(shape.boundary_points()); }

  /// Columns of `x` are poses; `desc` columns are matching descriptors.
  Matrix forward(const Matrix& x, const Matrix& desc, const std::vector<double>& taus) const;
  Matrix forward(const Matrix& x, const Matrix& desc, const std::vector<double>& taus, Tape& tape) const;
  InputGrads backward(const Tape& tape, const Matrix& out_grad, MlpGrads* body_grads,
                      ParamGroup group = ParamGroup::Base) const;

  PointSetEncoder& encoder() { return encoder_; }
  const PointSetEncoder& encoder() const { return encoder_; }
  Mlp& body() { return body_; }
  const Mlp& body() const { return body_; }

  EpsGrads zero_grads(ParamGroup group) const;
  std::vector<Matrix*> parameters(ParamGroup group);
  static std::vector<Matrix*> grad_list(EpsGrads& grads, ParamGroup group);

  /// Adapters on the body; on the encoder too when `include_encoder`.
  void attach_adapters(int rank, double scale, std::uint64_t seed, bool include_encoder);
  void detach_adapters();
  bool has_adapters() const { return body_.has_adapters() || encoder_.net().has_adapters(); }
  EpsNet merged() const;

 private:
  NetArch arch_;
  PointSetEncoder encoder_;
  Mlp body_;
};

/// Adaptive-moment optimizer over an ordered parameter list.
class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Matrix*>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  /// Throws TrainingDiverged on non-finite gradients; parameters are left untouched then.
  void step(const std::vector<Matrix*>& params, const std::vector<Matrix*>& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }

 private:
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Exponential moving average of a parameter list: shadow <- mu*shadow + (1-mu)*params.
class Ema {
 public:
  Ema() = default;
  Ema(const std::vector<Matrix*>& params, double decay);

  void update(const std::vector<Matrix*>& params);
  /// Writes the shadow values into `params`.
  void copy_to(const std::vector<Matrix*>& params) const;

  double decay() const { return decay_; }
  const std::vector<Matrix>& shadow() const { return shadow_; }

 private:
  std::vector<Matrix> shadow_;
  double decay_ = 0.95;
};

/// Named tensors as stored in a checkpoint.
using TensorMap = std::map<std::string, Matrix>;

void export_params(const EpsNet& net, TensorMap& params, TensorMap& adapters);
/// Shapes are validated against `net`; any mismatch raises CheckpointCorrupt.
void import_params(EpsNet& net, const TensorMap& params, const TensorMap& adapters);

/// Schedule parameters recorded with every model.
struct ScheduleParams {
  int T = 100;
  double beta1 = 1e-4;
  double betaT = 0.02;
  bool operator==(const ScheduleParams&) const = default;
};

inline constexpr int kCheckpointVersion = 1;

/// Everything persisted for a teacher or consistency model.
struct ModelBundle {
  std::string kind;  // "teacher" or "consistency"
  NetArch arch;
  ScheduleParams schedule;
  std::vector<double> stats_mean, stats_std;
  nlohmann::json extra = nlohmann::json::object();
  TensorMap params;
  TensorMap adapters;
  TensorMap ema;
};

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);
nlohmann::json bundle_to_json(const ModelBundle& bundle);
ModelBundle bundle_from_json(const nlohmann::json& j);

}  // namespace evograsp
