#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "evograsp/config.hpp"
#include "evograsp/error.hpp"

namespace httplib {
class Server;
}

namespace evograsp {

/// Hand drawn as one polyline per link: palm, left proximal, left distal,
/// right proximal, right distal.
std::vector<std::vector<Vec2>> hand_outline(const HandPose& pose, const HandModel& hand = {});

struct ServiceReply {
  int status = 200;
  nlohmann::json body;
};

/// {error_code, message, offenders?} with the HTTP status of the code.
ServiceReply error_reply(ErrorCode code, const std::string& message, const std::vector<std::string>& offenders = {});
int http_status(ErrorCode code);

enum class JobStatus { Queued, Running, Done, Failed };
std::string to_string(JobStatus s);

/// Candidate generation, preference ledger and a single-writer fine-tune
/// queue around one consistency model. Handlers take and return JSON so they
/// can be driven without a socket; `mount` wires them to an HTTP server.
class GraspService {
 public:
  /// `objects` are served in order; `cfg` supplies sampler, physics, hpo and
  /// seed settings. Adapters are attached and the reference is frozen here.
  GraspService(std::vector<ObjectShape> objects, ConsistencyModel model, RunConfig cfg);
  ~GraspService();
  GraspService(const GraspService&) = delete;
  GraspService& operator=(const GraspService&) = delete;

  ServiceReply get_objects() const;
  ServiceReply post_candidates(const nlohmann::json& body);
  ServiceReply post_preferences(const nlohmann::json& body);
  ServiceReply post_finetune(const nlohmann::json& body);
  ServiceReply get_job(const std::string& job_id) const;
  ServiceReply get_metrics() const;

  void mount(httplib::Server& server);

  /// Blocks until no job is queued or running, or the timeout passes.
  bool wait_idle(std::chrono::milliseconds timeout) const;
  std::shared_ptr<const ConsistencyModel> model() const;
  std::vector<EpochReport> history() const;
  std::uint64_t run_seed() const { return run_seed_; }

 private:
  struct Candidate {
    std::string id;
    HandPose pose;
    GraspOutcome outcome;
  };
  struct Batch {
    std::size_t object_index = 0;
    TimestepSequence seq;
    std::vector<Matrix> states;
    std::vector<Candidate> candidates;
    bool consumed = false;
  };
  struct Session {
    std::vector<Batch> batches;
    std::map<std::string, std::pair<std::size_t, std::size_t>> index;  // candidate -> (batch, column)
    std::map<std::string, bool> labels;
    int next_candidate = 0;
  };
  struct Job {
    std::string id;
    int epochs = 1;
    std::vector<PreferenceBatch> batches;
    JobStatus status = JobStatus::Queued;
    std::vector<EpochReport> rows;
    std::string error;
  };

  void worker_loop();
  nlohmann::json job_json(const Job& job) const;

  std::vector<ObjectShape> objects_;
  RunConfig cfg_;
  HpoConfig hpo_;
  PhysicsConfig phys_;
  EvalConfig eval_;
  std::uint64_t run_seed_ = 0;

  mutable std::mutex mu_;
  mutable std::condition_variable idle_cv_;
  std::condition_variable work_cv_;
  std::shared_ptr<const ConsistencyModel> model_;
  HpoState state_;  // touched only by the worker after construction
  std::map<std::string, Session> sessions_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  bool busy_ = false;
  bool stop_ = false;
  int next_session_ = 1;
  int next_job_ = 1;
  std::vector<EpochReport> history_;
  std::thread worker_;
};

}  // namespace evograsp
