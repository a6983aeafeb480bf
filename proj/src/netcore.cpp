#include "evograsp/netcore.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "evograsp/error.hpp"
#include "evograsp/rng.hpp"

namespace evograsp {

// ---------------------------------------------------------------- Linear / Mlp

Matrix Linear::effective_weight() const {
  if (!adapter || !adapter->enabled) return weight;
  return weight + adapter->scale * (adapter->up * adapter->down);
}

namespace {

Matrix gaussian_matrix(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = stddev * rng.normal();
  return m;
}

}  // namespace

Mlp::Mlp(const std::vector<int>& dims, Activation activation, std::uint64_t seed, bool zero_last)
    : activation_(activation) {
  if (dims.size() < 2) fail(ErrorCode::InvalidInput, "an MLP needs at least input and output widths");
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] <= 0 || dims[l + 1] <= 0) fail(ErrorCode::InvalidInput, "layer widths must be positive");
    Linear layer;
    const bool last = l + 2 == dims.size();
    layer.weight = (last && zero_last) ? Matrix::Zero(dims[l + 1], dims[l])
                                       : gaussian_matrix(dims[l + 1], dims[l], 1.0 / std::sqrt(dims[l]), rng);
    layer.bias = Matrix::Zero(dims[l + 1], 1);
    layers_.push_back(std::move(layer));
  }
}

std::vector<int> Mlp::dims() const {
  std::vector<int> d{input_dim()};
  for (const auto& l : layers_) d.push_back(l.out());
  return d;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Matrix Mlp::forward(const Matrix& input) const {
  Tape tape;
  return forward(input, tape);
}

Matrix Mlp::forward(const Matrix& input, Tape& tape) const {
  if (input.rows() != input_dim())
    fail(ErrorCode::InvalidInput, "MLP input has " + std::to_string(input.rows()) + " rows, expected " +
                                      std::to_string(input_dim()));
  tape.inputs.assign(1, input);
  tape.mids.assign(layers_.size(), Matrix());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Linear& layer = layers_[l];
    const Matrix& x = tape.inputs.back();
    Matrix z = layer.weight * x;
    if (layer.adapter && layer.adapter->enabled) {
      tape.mids[l] = layer.adapter->down * x;
      z.noalias() += layer.adapter->scale * (layer.adapter->up * tape.mids[l]);
    }
    z.colwise() += layer.bias.col(0);
    if (l + 1 < layers_.size()) {
      if (activation_ == Activation::Tanh) z = z.array().tanh().matrix();
      tape.inputs.push_back(std::move(z));
    } else {
      tape.output = std::move(z);
    }
  }
  return tape.output;
}

Matrix Mlp::backward(const Tape& tape, const Matrix& output_grad, MlpGrads* grads, ParamGroup group) const {
  if (output_grad.rows() != output_dim() || output_grad.cols() != tape.output.cols())
    fail(ErrorCode::InvalidInput, "MLP output gradient shape mismatch");
  Matrix g = output_grad;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const Linear& layer = layers_[l];
    const Matrix& x = tape.inputs[l];
    if (l + 1 < layers_.size() && activation_ == Activation::Tanh) {
      const Matrix& y = tape.inputs[l + 1];
      g.array() *= (1.0 - y.array().square());
    }
    const bool adapted = layer.adapter && layer.adapter->enabled;
    if (grads && group == ParamGroup::Base) {
      grads->weight[l].noalias() += g * x.transpose();
      grads->bias[l].noalias() += g.rowwise().sum();
    }
    Matrix gx = layer.weight.transpose() * g;
    if (adapted) {
      const LowRankAdapter& a = *layer.adapter;
      Matrix gmid = a.scale * (a.up.transpose() * g);
      if (grads && group == ParamGroup::Adapters) {
        grads->up[l].noalias() += a.scale * (g * tape.mids[l].transpose());
        grads->down[l].noalias() += gmid * x.transpose();
      }
      gx.noalias() += a.down.transpose() * gmid;
    }
    g = std::move(gx);
  }
  return g;
}

MlpGrads Mlp::zero_grads(ParamGroup group) const {
  MlpGrads g;
  const std::size_t n = layers_.size();
  g.weight.resize(n);
  g.bias.resize(n);
  g.down.resize(n);
  g.up.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    const Linear& layer = layers_[l];
    if (group == ParamGroup::Base) {
      g.weight[l] = Matrix::Zero(layer.out(), layer.in());
      g.bias[l] = Matrix::Zero(layer.out(), 1);
    } else if (layer.adapter) {
      g.down[l] = Matrix::Zero(layer.adapter->down.rows(), layer.adapter->down.cols());
      g.up[l] = Matrix::Zero(layer.adapter->up.rows(), layer.adapter->up.cols());
    }
  }
  return g;
}

void Mlp::attach_adapters(int rank, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : layers_) {
    if (rank < 1 || rank > std::min(layer.in(), layer.out()))
      fail(ErrorCode::InvalidInput, "adapter rank " + std::to_string(rank) + " exceeds layer dims " +
                                        std::to_string(layer.out()) + "x" + std::to_string(layer.in()));
  }
  for (auto& layer : layers_) {
    LowRankAdapter a;
    a.down = gaussian_matrix(rank, layer.in(), 1.0 / std::sqrt(layer.in()), rng);
    a.up = Matrix::Zero(layer.out(), rank);
    a.scale = scale;
    layer.adapter = std::move(a);
  }
}

void Mlp::detach_adapters() {
  for (auto& layer : layers_) layer.adapter.reset();
}

bool Mlp::has_adapters() const {
  for (const auto& layer : layers_)
    if (layer.adapter) return true;
  return false;
}

Mlp Mlp::merged() const {
  Mlp out = *this;
  for (auto& layer : out.layers_) {
    if (layer.adapter && layer.adapter->enabled) layer.weight = layer.effective_weight();
    layer.adapter.reset();
  }
  return out;
}

std::vector<Matrix*> Mlp::parameters(ParamGroup group) {
  std::vector<Matrix*> out;
  for (auto& layer : layers_) {
    if (group == ParamGroup::Base) {
      out.push_back(&layer.weight);
      out.push_back(&layer.bias);
    } else if (layer.adapter) {
      out.push_back(&layer.adapter->down);
      out.push_back(&layer.adapter->up);
    }
  }
  return out;
}

std::vector<const Matrix*> Mlp::parameters(ParamGroup group) const {
  std::vector<const Matrix*> out;
  for (Matrix* p : const_cast<Mlp*>(this)->parameters(group)) out.push_back(p);
  return out;
}

std::vector<Matrix*> Mlp::grad_list(MlpGrads& grads, ParamGroup group) {
  std::vector<Matrix*> out;
  for (std::size_t l = 0; l < grads.weight.size(); ++l) {
    if (group == ParamGroup::Base) {
      out.push_back(&grads.weight[l]);
      out.push_back(&grads.bias[l]);
    } else if (grads.down[l].size() > 0) {
      out.push_back(&grads.down[l]);
      out.push_back(&grads.up[l]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- encoder

PointSetEncoder::PointSetEncoder(int hidden, int out, std::uint64_t seed)
    : net_({2, hidden, out}, Activation::Tanh, seed) {}

Vector PointSetEncoder::encode(const std::vector<Vec2>& points) const {
  Tape tape;
  return encode(points, tape);
}

Vector PointSetEncoder::encode(const std::vector<Vec2>& points, Tape& tape) const {
  if (points.empty()) fail(ErrorCode::InvalidInput, "point set is empty");
  // Points are pushed one at a time so each feature column is computed by
  // the same arithmetic regardless of its position in the set.
  const int out = net_.output_dim();
  Vector desc = Vector::Constant(out, -std::numeric_limits<double>::infinity());
  tape.points.resize(points.size());
  tape.argmax.assign(out, 0);
  Matrix x(2, 1);
  for (std::size_t k = 0; k < points.size(); ++k) {
    x(0, 0) = points[k].x;
    x(1, 0) = points[k].y;
    const Matrix f = net_.forward(x, tape.points[k]);
    for (int i = 0; i < out; ++i) {
      if (f(i, 0) > desc[i]) {
        desc[i] = f(i, 0);
        tape.argmax[i] = static_cast<int>(k);
      }
    }
  }
  return desc;
}

void PointSetEncoder::backward(const Tape& tape, const Vector& desc_grad, MlpGrads* grads,
                               ParamGroup group) const {
  const int out = net_.output_dim();
  // Group output-gradient entries by the point that won the max.
  std::map<int, Matrix> per_point;
  for (int i = 0; i < out; ++i) {
    if (desc_grad[i] == 0.0) continue;
    auto [it, inserted] = per_point.try_emplace(tape.argmax[i], Matrix::Zero(out, 1));
    it->second(i, 0) += desc_grad[i];
  }
  for (const auto& [k, g] : per_point) net_.backward(tape.points[k], g, grads, group);
}

// ---------------------------------------------------------------- EpsNet

nlohmann::json NetArch::to_json() const {
  return {{"pose_dim", pose_dim},   {"desc_dim", desc_dim}, {"enc_hidden", enc_hidden},
          {"time_pairs", time_pairs}, {"hidden", hidden},   {"hidden_layers", hidden_layers},
          {"horizon", horizon},     {"activation", "tanh"}};
}

NetArch NetArch::from_json(const nlohmann::json& j) {
  NetArch a;
  a.pose_dim = j.at("pose_dim").get<int>();
  a.desc_dim = j.at("desc_dim").get<int>();
  a.enc_hidden = j.at("enc_hidden").get<int>();
  a.time_pairs = j.at("time_pairs").get<int>();
  a.hidden = j.at("hidden").get<int>();
  a.hidden_layers = j.at("hidden_layers").get<int>();
  a.horizon = j.at("horizon").get<int>();
  if (j.value("activation", std::string("tanh")) != "tanh")
    fail(ErrorCode::CheckpointCorrupt, "unsupported activation in checkpoint");
  return a;
}

Matrix time_embedding(const std::vector<double>& taus, int pairs, int horizon) {
  Matrix e(2 * pairs, static_cast<Eigen::Index>(taus.size()));
  for (std::size_t j = 0; j < taus.size(); ++j) {
    const double s = taus[j] / horizon;
    double freq = 1.0;
    for (int k = 0; k < pairs; ++k, freq *= 2.0) {
      e(2 * k, j) = std::sin(freq * s);
      e(2 * k + 1, j) = std::cos(freq * s);
    }
  }
  return e;
}

EpsNet::EpsNet(const NetArch& arch, std::uint64_t seed)
    : arch_(arch), encoder_(arch.enc_hidden, arch.desc_dim, derive_seed(seed, 1)) {
  std::vector<int> dims{arch.body_input()};
  for (int i = 0; i < arch.hidden_layers; ++i) dims.push_back(arch.hidden);
  dims.push_back(arch.pose_dim);
  body_ = Mlp(dims, Activation::Tanh, derive_seed(seed, 2), /*zero_last=*/true);
}

Matrix EpsNet::forward(const Matrix& x, const Matrix& desc, const std::vector<double>& taus) const {
  Tape tape;
  return forward(x, desc, taus, tape);
}

Matrix EpsNet::forward(const Matrix& x, const Matrix& desc, const std::vector<double>& taus, Tape& tape) const {
  const Eigen::Index b = x.cols();
  if (x.rows() != arch_.pose_dim || desc.rows() != arch_.desc_dim || desc.cols() != b ||
      static_cast<Eigen::Index>(taus.size()) != b)
    fail(ErrorCode::InvalidInput, "denoiser input shapes do not agree");
  Matrix input(arch_.body_input(), b);
  input.topRows(arch_.pose_dim) = x;
  input.middleRows(arch_.pose_dim, arch_.desc_dim) = desc;
  input.bottomRows(2 * arch_.time_pairs) = time_embedding(taus, arch_.time_pairs, arch_.horizon);
  return body_.forward(input, tape.body);
}

EpsNet::InputGrads EpsNet::backward(const Tape& tape, const Matrix& out_grad, MlpGrads* body_grads,
                                    ParamGroup group) const {
  const Matrix g = body_.backward(tape.body, out_grad, body_grads, group);
  return {g.topRows(arch_.pose_dim), g.middleRows(arch_.pose_dim, arch_.desc_dim)};
}

EpsGrads EpsNet::zero_grads(ParamGroup group) const {
  return {encoder_.net().zero_grads(group), body_.zero_grads(group)};
}

std::vector<Matrix*> EpsNet::parameters(ParamGroup group) {
  auto out = encoder_.net().parameters(group);
  for (Matrix* p : body_.parameters(group)) out.push_back(p);
  return out;
}

std::vector<Matrix*> EpsNet::grad_list(EpsGrads& grads, ParamGroup group) {
  auto out = Mlp::grad_list(grads.encoder, group);
  for (Matrix* p : Mlp::grad_list(grads.body, group)) out.push_back(p);
  return out;
}

void EpsNet::attach_adapters(int rank, double scale, std::uint64_t seed, bool include_encoder) {
  body_.attach_adapters(rank, scale, derive_seed(seed, 11));
  if (include_encoder) encoder_.net().attach_adapters(std::min(rank, 2), scale, derive_seed(seed, 12));
}

void EpsNet::detach_adapters() {
  body_.detach_adapters();
  encoder_.net().detach_adapters();
}

EpsNet EpsNet::merged() const {
  EpsNet out = *this;
  out.body_ = body_.merged();
  out.encoder_.net() = encoder_.net().merged();
  return out;
}

// ---------------------------------------------------------------- Adam / EMA

Adam::Adam(const std::vector<Matrix*>& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) fail(ErrorCode::InvalidConfig, "learning rate must be positive");
  for (const Matrix* p : params) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const std::vector<Matrix*>& params, const std::vector<Matrix*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    fail(ErrorCode::InvalidInput, "optimizer parameter list changed shape");
  for (const Matrix* g : grads)
    if (!g->allFinite()) fail(ErrorCode::TrainingDiverged, "non-finite gradient");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * (*grads[i]);
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i]->cwiseAbs2();
    params[i]->array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

Ema::Ema(const std::vector<Matrix*>& params, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay <= 1.0))
    fail(ErrorCode::InvalidConfig, "EMA decay must lie in [0, 1]");
  for (const Matrix* p : params) shadow_.push_back(*p);
}

void Ema::update(const std::vector<Matrix*>& params) {
  if (params.size() != shadow_.size()) fail(ErrorCode::InvalidInput, "EMA parameter list changed shape");
  for (std::size_t i = 0; i < params.size(); ++i) shadow_[i] = decay_ * shadow_[i] + (1.0 - decay_) * (*params[i]);
}

void Ema::copy_to(const std::vector<Matrix*>& params) const {
  if (params.size() != shadow_.size()) fail(ErrorCode::InvalidInput, "EMA parameter list changed shape");
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = shadow_[i];
}

// ---------------------------------------------------------------- checkpoint

namespace {

void export_mlp(const Mlp& mlp, const std::string& prefix, TensorMap& params, TensorMap& adapters) {
  for (std::size_t l = 0; l < mlp.layers().size(); ++l) {
    const Linear& layer = mlp.layers()[l];
    const std::string name = prefix + "." + std::to_string(l);
    params[name + ".weight"] = layer.weight;
    params[name + ".bias"] = layer.bias;
    if (layer.adapter) {
      adapters[name + ".down"] = layer.adapter->down;
      adapters[name + ".up"] = layer.adapter->up;
      adapters[name + ".scale"] = Matrix::Constant(1, 1, layer.adapter->scale);
    }
  }
}

const Matrix& require_tensor(const TensorMap& map, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  auto it = map.find(name);
  if (it == map.end()) fail(ErrorCode::CheckpointCorrupt, "checkpoint is missing tensor '" + name + "'");
  if (it->second.rows() != rows || it->second.cols() != cols)
    fail(ErrorCode::CheckpointCorrupt, "tensor '" + name + "' has shape " + std::to_string(it->second.rows()) +
                                           "x" + std::to_string(it->second.cols()) + ", expected " +
                                           std::to_string(rows) + "x" + std::to_string(cols));
  return it->second;
}

void import_mlp(Mlp& mlp, const std::string& prefix, const TensorMap& params, const TensorMap& adapters) {
  for (std::size_t l = 0; l < mlp.layers().size(); ++l) {
    Linear& layer = mlp.layers()[l];
    const std::string name = prefix + "." + std::to_string(l);
    layer.weight = require_tensor(params, name + ".weight", layer.out(), layer.in());
    layer.bias = require_tensor(params, name + ".bias", layer.out(), 1);
    layer.adapter.reset();
    auto down = adapters.find(name + ".down");
    if (down == adapters.end()) continue;
    const Eigen::Index rank = down->second.rows();
    LowRankAdapter a;
    a.down = require_tensor(adapters, name + ".down", rank, layer.in());
    a.up = require_tensor(adapters, name + ".up", layer.out(), rank);
    a.scale = require_tensor(adapters, name + ".scale", 1, 1)(0, 0);
    layer.adapter = std::move(a);
  }
}

nlohmann::json tensor_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix tensor_from_json(const nlohmann::json& j, const std::string& name) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    fail(ErrorCode::CheckpointCorrupt, "tensor '" + name + "' is not a nested array");
  const std::size_t rows = j.size(), cols = j[0].size();
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols)
      fail(ErrorCode::CheckpointCorrupt, "tensor '" + name + "' is ragged");
    for (std::size_t k = 0; k < cols; ++k) {
      if (!j[i][k].is_number()) fail(ErrorCode::CheckpointCorrupt, "tensor '" + name + "' has non-numeric entries");
      m(i, k) = j[i][k].get<double>();
    }
  }
  return m;
}

nlohmann::json map_to_json(const TensorMap& map) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, m] : map) out[name] = tensor_to_json(m);
  return out;
}

TensorMap map_from_json(const nlohmann::json& j) {
  TensorMap out;
  if (!j.is_object()) fail(ErrorCode::CheckpointCorrupt, "tensor section must be an object");
  for (const auto& [name, value] : j.items()) out[name] = tensor_from_json(value, name);
  return out;
}

}  // namespace

void export_params(const EpsNet& net, TensorMap& params, TensorMap& adapters) {
  export_mlp(net.encoder().net(), "encoder", params, adapters);
  export_mlp(net.body(), "body", params, adapters);
}

void import_params(EpsNet& net, const TensorMap& params, const TensorMap& adapters) {
  import_mlp(net.encoder().net(), "encoder", params, adapters);
  import_mlp(net.body(), "body", params, adapters);
}

nlohmann::json bundle_to_json(const ModelBundle& b) {
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  j["kind"] = b.kind;
  j["arch"] = b.arch.to_json();
  j["schedule"] = {{"T", b.schedule.T}, {"beta1", b.schedule.beta1}, {"betaT", b.schedule.betaT}};
  j["standardization"] = {{"mean", b.stats_mean}, {"std", b.stats_std}};
  j["extra"] = b.extra;
  j["params"] = map_to_json(b.params);
  j["adapters"] = map_to_json(b.adapters);
  j["ema"] = map_to_json(b.ema);
  return j;
}

ModelBundle bundle_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) fail(ErrorCode::CheckpointCorrupt, "checkpoint root must be an object");
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      fail(ErrorCode::CheckpointCorrupt, "unsupported checkpoint format_version " + std::to_string(version));
    ModelBundle b;
    b.kind = j.at("kind").get<std::string>();
    b.arch = NetArch::from_json(j.at("arch"));
    const auto& s = j.at("schedule");
    b.schedule = {s.at("T").get<int>(), s.at("beta1").get<double>(), s.at("betaT").get<double>()};
    b.stats_mean = j.at("standardization").at("mean").get<std::vector<double>>();
    b.stats_std = j.at("standardization").at("std").get<std::vector<double>>();
    b.extra = j.value("extra", nlohmann::json::object());
    b.params = map_from_json(j.at("params"));
    b.adapters = map_from_json(j.at("adapters"));
    b.ema = map_from_json(j.at("ema"));
    return b;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointCorrupt, std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << bundle_to_json(bundle).dump() << '\n';
  if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CheckpointCorrupt, path.string() + ": " + e.what());
  }
  return bundle_from_json(j);
}

}  // namespace evograsp
