#include "evograsp/service.hpp"

#include <algorithm>
#include <set>

#include <httplib.h>

#include "evograsp/error.hpp"
#include "evograsp/pipeline.hpp"

namespace evograsp {

using nlohmann::json;

namespace {

json vec2_json(const Vec2& v) { return json::array({v.x, v.y}); }

json pose_json(const HandPose& p) {
  json a = json::array();
  for (int i = 0; i < kPoseDim; ++i) a.push_back(p[i]);
  return a;
}

json outcome_json(const GraspOutcome& o) {
  return {{"resisted", json::array({o.resisted[0], o.resisted[1], o.resisted[2], o.resisted[3]})},
          {"success_all", o.all_resisted()},
          {"success_one", o.any_resisted()},
          {"pen", o.pen}};
}

json report_json(const EpochReport& r) {
  return {{"epoch", r.epoch},     {"suc_all", r.metrics.suc_all}, {"suc_one", r.metrics.suc_one},
          {"pen_mean", r.metrics.pen_mean}, {"lr", r.lr},          {"n_suc", r.n_suc},
          {"n_fail", r.n_fail},   {"loss", r.loss}};
}

const json& field(const json& body, const char* name) {
  if (!body.is_object() || !body.contains(name)) fail(ErrorCode::InvalidInput, std::string("missing field '") + name + "'");
  return body.at(name);
}

long long int_field(const json& body, const char* name, long long fallback, bool required) {
  if (!body.is_object() || !body.contains(name)) {
    if (required) fail(ErrorCode::InvalidInput, std::string("missing field '") + name + "'");
    return fallback;
  }
  const json& v = body.at(name);
  if (!v.is_number_integer()) fail(ErrorCode::InvalidInput, std::string("field '") + name + "' must be an integer");
  return v.get<long long>();
}

std::uint64_t seed_field(const json& body) {
  if (!body.is_object() || !body.contains("seed")) return 0;
  const json& v = body.at("seed");
  const bool ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (!ok) fail(ErrorCode::InvalidInput, "field 'seed' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

template <class F>
ServiceReply guarded(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    return error_reply(e.code(), e.what());
  } catch (const json::exception& e) {
    return error_reply(ErrorCode::InvalidInput, e.what());
  }
}

}  // namespace

std::vector<std::vector<Vec2>> hand_outline(const HandPose& pose, const HandModel& hand) {
  const HandPoints pts = forward_kinematics(pose, hand);
  std::vector<std::vector<Vec2>> lines(5);
  for (std::size_t i = 0; i < pts.size(); ++i) lines[static_cast<int>(pts.link_ids[i])].push_back(pts.points[i]);
  return lines;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidSchedule:
    case ErrorCode::LabelMismatch: return 400;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::Precondition: return 409;
    default: return 500;
  }
}

ServiceReply error_reply(ErrorCode code, const std::string& message, const std::vector<std::string>& offenders) {
  json body = {{"error_code", std::string(to_string(code))}, {"message", message}};
  if (!offenders.empty()) body["offenders"] = offenders;
  return {http_status(code), std::move(body)};
}

std::string to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "unknown";
}

GraspService::GraspService(std::vector<ObjectShape> objects, ConsistencyModel model, RunConfig cfg)
    : objects_(std::move(objects)), cfg_(std::move(cfg)) {
  cfg_.validate();
  hpo_ = cfg_.hpo();
  phys_ = cfg_.physics();
  eval_ = cfg_.eval();
  run_seed_ = hpo_run_seed(cfg_);
  state_ = begin_finetune(model, hpo_, run_seed_);
  model_ = std::make_shared<const ConsistencyModel>(std::move(model));
  worker_ = std::thread([this] { worker_loop(); });
}

GraspService::~GraspService() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  work_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

ServiceReply GraspService::get_objects() const {
  json out = json::array();
  for (const auto& o : objects_) {
    json verts = json::array();
    for (const auto& v : o.vertices()) verts.push_back(vec2_json(v));
    out.push_back({{"object_id", o.object_id()}, {"vertices", std::move(verts)}});
  }
  return {200, std::move(out)};
}

ServiceReply GraspService::post_candidates(const json& body) {
  return guarded([&]() -> ServiceReply {
    const json& oid = field(body, "object_id");
    if (!oid.is_string()) fail(ErrorCode::InvalidInput, "field 'object_id' must be a string");
    const auto it = std::find_if(objects_.begin(), objects_.end(),
                                 [&](const ObjectShape& o) { return o.object_id() == oid.get<std::string>(); });
    if (it == objects_.end()) fail(ErrorCode::NotFound, "unknown object_id '" + oid.get<std::string>() + "'");
    const long long n = int_field(body, "n", 0, true);
    const long long nfe = int_field(body, "nfe", hpo_.nfe, false);
    const std::uint64_t seed = seed_field(body);
    if (n < 0) fail(ErrorCode::InvalidInput, "field 'n' must be >= 0");

    std::shared_ptr<const ConsistencyModel> snap = model();
    const TimestepSequence seq = even_sequence(snap->schedule.T, static_cast<int>(nfe));
    Batch batch;
    batch.object_index = static_cast<std::size_t>(it - objects_.begin());
    batch.seq = seq;
    if (n > 0) {
      PaSampleResult r = pa_sample(*snap, *it, seq, phys_, static_cast<int>(n), seed, hpo_.guided);
      batch.states = std::move(r.states);
      for (auto& p : r.poses) batch.candidates.push_back({"", p, shake_test(p, *it, eval_)});
    }

    std::lock_guard<std::mutex> lk(mu_);
    std::string sid;
    if (body.contains("session_id")) {
      if (!body["session_id"].is_string()) fail(ErrorCode::InvalidInput, "field 'session_id' must be a string");
      sid = body["session_id"].get<std::string>();
      if (!sessions_.count(sid)) fail(ErrorCode::NotFound, "unknown session_id '" + sid + "'");
    } else {
      sid = "s" + std::to_string(next_session_++);
      sessions_[sid];
    }
    Session& s = sessions_[sid];
    json cands = json::array();
    const std::size_t bi = s.batches.size();
    for (std::size_t c = 0; c < batch.candidates.size(); ++c) {
      Candidate& cand = batch.candidates[c];
      cand.id = sid + "-c" + std::to_string(s.next_candidate++);
      s.index[cand.id] = {bi, c};
      json outline = json::array();
      for (const auto& line : hand_outline(cand.pose, phys_.hand)) {
        json l = json::array();
        for (const auto& p : line) l.push_back(vec2_json(p));
        outline.push_back(std::move(l));
      }
      cands.push_back({{"candidate_id", cand.id},
                       {"pose", pose_json(cand.pose)},
                       {"hand_outline", std::move(outline)},
                       {"sim_outcome", outcome_json(cand.outcome)}});
    }
    if (!batch.candidates.empty()) s.batches.push_back(std::move(batch));
    return {200, {{"session_id", sid}, {"candidates", std::move(cands)}}};
  });
}

ServiceReply GraspService::post_preferences(const json& body) {
  return guarded([&]() -> ServiceReply {
    const json& sid_j = field(body, "session_id");
    if (!sid_j.is_string()) fail(ErrorCode::InvalidInput, "field 'session_id' must be a string");
    const json& labels = field(body, "labels");
    if (!labels.is_array()) fail(ErrorCode::InvalidInput, "field 'labels' must be an array");

    std::lock_guard<std::mutex> lk(mu_);
    auto sit = sessions_.find(sid_j.get<std::string>());
    if (sit == sessions_.end()) fail(ErrorCode::NotFound, "unknown session_id '" + sid_j.get<std::string>() + "'");
    Session& s = sit->second;

    std::vector<std::pair<std::string, bool>> parsed;
    std::vector<std::string> offenders;
    std::set<std::string> seen;
    for (const auto& l : labels) {
      if (!l.is_object() || !l.contains("candidate_id") || !l["candidate_id"].is_string() || !l.contains("preferred") ||
          !l["preferred"].is_boolean())
        fail(ErrorCode::InvalidInput, "each label needs a string candidate_id and a boolean preferred");
      const std::string id = l["candidate_id"].get<std::string>();
      if (!s.index.count(id) || !seen.insert(id).second) {
        if (std::find(offenders.begin(), offenders.end(), id) == offenders.end()) offenders.push_back(id);
        continue;
      }
      parsed.emplace_back(id, l["preferred"].get<bool>());
    }
    if (!offenders.empty())
      return error_reply(ErrorCode::InvalidInput, "unknown or duplicate candidate ids", offenders);

    int n_suc = 0, n_fail = 0;
    for (const auto& [id, pref] : parsed) {
      s.labels[id] = pref;
      (pref ? n_suc : n_fail)++;
    }
    return {200, {{"accepted", true}, {"n_suc", n_suc}, {"n_fail", n_fail}}};
  });
}

ServiceReply GraspService::post_finetune(const json& body) {
  return guarded([&]() -> ServiceReply {
    const json& sid_j = field(body, "session_id");
    if (!sid_j.is_string()) fail(ErrorCode::InvalidInput, "field 'session_id' must be a string");
    const long long epochs = int_field(body, "epochs", 1, false);
    if (epochs < 1) fail(ErrorCode::InvalidInput, "field 'epochs' must be >= 1");

    std::lock_guard<std::mutex> lk(mu_);
    auto sit = sessions_.find(sid_j.get<std::string>());
    if (sit == sessions_.end()) fail(ErrorCode::NotFound, "unknown session_id '" + sid_j.get<std::string>() + "'");
    Session& s = sit->second;

    auto job = std::make_shared<Job>();
    job->epochs = static_cast<int>(epochs);
    for (Batch& b : s.batches) {
      if (b.consumed) continue;
      const bool full = std::all_of(b.candidates.begin(), b.candidates.end(),
                                    [&](const Candidate& c) { return s.labels.count(c.id) > 0; });
      if (!full) continue;
      PreferenceBatch pb;
      pb.shape = &objects_[b.object_index];
      pb.object_index = b.object_index;
      pb.seq = b.seq;
      pb.states = b.states;
      for (const Candidate& c : b.candidates) {
        pb.labels.push_back(s.labels.at(c.id) ? 1 : -1);
        pb.outcomes.push_back(c.outcome);
      }
      job->batches.push_back(std::move(pb));
    }
    if (job->batches.empty()) fail(ErrorCode::Precondition, "session has no fully labeled candidate batch");
    for (Batch& b : s.batches)
      if (!b.consumed && std::all_of(b.candidates.begin(), b.candidates.end(),
                                     [&](const Candidate& c) { return s.labels.count(c.id) > 0; }))
        b.consumed = true;
    job->id = "j" + std::to_string(next_job_++);
    jobs_[job->id] = job;
    queue_.push_back(job);
    work_cv_.notify_one();
    return {202, {{"job_id", job->id}}};
  });
}

json GraspService::job_json(const Job& job) const {
  json rows = json::array();
  for (const auto& r : job.rows) rows.push_back(report_json(r));
  json out = {{"job_id", job.id}, {"status", to_string(job.status)}, {"report", std::move(rows)}};
  if (!job.error.empty()) out["error"] = job.error;
  return out;
}

ServiceReply GraspService::get_job(const std::string& job_id) const {
  std::lock_guard<std::mutex> lk(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) return error_reply(ErrorCode::NotFound, "unknown job_id '" + job_id + "'");
  return {200, job_json(*it->second)};
}

ServiceReply GraspService::get_metrics() const {
  std::lock_guard<std::mutex> lk(mu_);
  json hist = json::array();
  for (const auto& r : history_) hist.push_back(report_json(r));
  json latest = nullptr;
  if (!history_.empty()) {
    const Metrics& m = history_.back().metrics;
    latest = {{"suc_all", m.suc_all}, {"suc_one", m.suc_one}, {"pen_mean", m.pen_mean}, {"wall_time", m.wall_time}};
  }
  return {200, {{"latest", latest}, {"history", std::move(hist)}}};
}

void GraspService::worker_loop() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock<std::mutex> lk(mu_);
      work_cv_.wait(lk, [&] { return stop_ || !queue_.empty(); });
      if (stop_) return;
      job = queue_.front();
      queue_.pop_front();
      job->status = JobStatus::Running;
      busy_ = true;
    }
    ConsistencyModel working = *model();
    std::vector<EpochReport> rows;
    std::string error;
    try {
      for (int e = 0; e < job->epochs; ++e)
        rows.push_back(finetune_on_batches(working, state_, job->batches, hpo_, epoch_seed(run_seed_, state_.epoch)));
    } catch (const std::exception& ex) {
      error = ex.what();
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job->rows = rows;
      if (error.empty()) {
        job->status = JobStatus::Done;
        model_ = std::make_shared<const ConsistencyModel>(std::move(working));
        history_.insert(history_.end(), rows.begin(), rows.end());
      } else {
        job->status = JobStatus::Failed;
        job->error = error;
      }
      busy_ = false;
    }
    idle_cv_.notify_all();
  }
}

bool GraspService::wait_idle(std::chrono::milliseconds timeout) const {
  std::unique_lock<std::mutex> lk(mu_);
  return idle_cv_.wait_for(lk, timeout, [&] { return queue_.empty() && !busy_; });
}

std::shared_ptr<const ConsistencyModel> GraspService::model() const {
  std::lock_guard<std::mutex> lk(mu_);
  return model_;
}

std::vector<EpochReport> GraspService::history() const {
  std::lock_guard<std::mutex> lk(mu_);
  return history_;
}

void GraspService::mount(httplib::Server& server) {
  auto send = [](httplib::Response& res, const ServiceReply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto parse = [](const httplib::Request& req, json& out) {
    out = json::parse(req.body, nullptr, false);
    return !out.is_discarded();
  };
  server.Get("/objects", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_objects()); });
  server.Get("/metrics", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_metrics()); });
  server.Get(R"(/jobs/([A-Za-z0-9_-]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_job(req.matches[1]));
  });
  auto post = [&](const char* path, ServiceReply (GraspService::*handler)(const json&)) {
    server.Post(path, [this, send, parse, handler](const httplib::Request& req, httplib::Response& res) {
      json body;
      if (!parse(req, body)) return send(res, error_reply(ErrorCode::InvalidInput, "request body is not JSON"));
      send(res, (this->*handler)(body));
    });
  };
  post("/candidates", &GraspService::post_candidates);
  post("/preferences", &GraspService::post_preferences);
  post("/finetune", &GraspService::post_finetune);
}

}  // namespace evograsp
