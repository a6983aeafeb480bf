#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "evograsp/consistency.hpp"
#include "evograsp/dataset.hpp"
#include "evograsp/diffusion.hpp"
#include "evograsp/evaluator.hpp"
#include "evograsp/hpo.hpp"

namespace evograsp {

enum class ValueKind { Int, Real, Bool, Text };

struct ConfigKey {
  std::string name;
  ValueKind kind;
  std::string fallback;
  std::string help;
};

/// Every recognized key with its default, in file order.
const std::vector<ConfigKey>& config_keys();

/// Flat key=value configuration covering every module namespace.
class RunConfig {
 public:
  RunConfig();

  /// Parses and stores one value. Unknown keys and malformed values throw
  /// InvalidConfig naming the key path.
  void set(const std::string& key, const std::string& value);
  /// "key=value" form, as used by flag overrides.
  void set_assignment(const std::string& assignment);
  void merge_file(const std::filesystem::path& path);
  void merge_text(const std::string& text, const std::string& origin = "<text>");

  bool has(const std::string& key) const;
  const std::string& raw(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_text(const std::string& key) const;

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

  /// Canonical key=value listing of every key, sorted.
  std::string resolved() const;
  void write_resolved(const std::filesystem::path& path) const;

  SynthConfig synth() const;
  NetArch arch() const;
  ScheduleParams schedule() const;
  TrainConfig teacher_training() const;
  DistillConfig distillation() const;
  Boundary boundary() const;
  PhysicsConfig physics() const;
  HpoConfig hpo() const;
  EvalConfig eval() const;
  TimestepSequence sequence() const;

  /// Checks cross-key constraints through the module validators.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace evograsp
