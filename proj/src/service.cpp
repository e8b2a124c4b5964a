#include "stackdiff/service.hpp"

#include <chrono>
#include <fstream>
#include <set>

#include <httplib.h>

#include "stackdiff/synthetic.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::service {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kKinds{"checkpoints", "articles", "sessions", "eval_reports"};

void check_kind(const std::string& kind) {
  if (!kKinds.count(kind)) throw Error("unknown store kind '" + kind + "'", "invalid_argument");
}

}  // namespace

Store::Store(fs::path root) : root_(std::move(root)) {
  for (const auto& k : kKinds) fs::create_directories(root_ / k);
  fs::create_directories(root_ / "images");
}

bool Store::valid_id(const std::string& id) {
  if (id.empty() || id.size() > 128) return false;
  for (char c : id)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') return false;
  return true;
}

std::string Store::put_image(const Image& image) {
  const auto hash = to_hex(image_hash(image));
  const auto path = image_path(hash);
  if (!fs::exists(path)) {
    const auto bytes = encode_png(image);
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  return hash;
}

fs::path Store::image_path(const std::string& hash) const { return root_ / "images" / (hash + ".png"); }

void Store::put(const std::string& kind, const std::string& id, const std::string& text) {
  check_kind(kind);
  if (!valid_id(id)) throw Error("invalid id '" + id + "'", "invalid_argument");
  write_file_atomic(root_ / kind / (id + ".json"), text);
}

std::optional<std::string> Store::get(const std::string& kind, const std::string& id) const {
  check_kind(kind);
  if (!valid_id(id)) return std::nullopt;
  const auto path = root_ / kind / (id + ".json");
  if (!fs::exists(path)) return std::nullopt;
  return read_file(path);
}

bool Store::remove(const std::string& kind, const std::string& id) {
  check_kind(kind);
  if (!valid_id(id)) return false;
  return fs::remove(root_ / kind / (id + ".json"));
}

std::string IdGenerator::next(const std::string& prefix) {
  std::lock_guard lock(mutex_);
  const auto ms = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch()).count());
  if (ms > last_ms_) {
    last_ms_ = ms;
    counter_ = 0;
  } else {
    ++counter_;
    if (counter_ > 0xffff) {
      ++last_ms_;
      counter_ = 0;
    }
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%012llx%04x", static_cast<unsigned long long>(last_ms_ & 0xffffffffffffull), counter_);
  return prefix + buf;
}

json error_body(const std::string& kind, const std::string& message, bool retry) {
  json e = {{"kind", kind}, {"message", message}};
  if (retry) e["retry"] = true;
  return {{"error", e}};
}

int status_for(const std::string& kind) {
  static const std::map<std::string, int> table{
      {"invalid_argument", 400}, {"parse_error", 400}, {"config_error", 400}, {"plan_too_long", 400},
      {"shape_error", 400},      {"not_found", 404},   {"llm_error", 502},    {"queue_full", 503},
  };
  auto it = table.find(kind);
  return it == table.end() ? 500 : it->second;
}

namespace {

ApiResponse json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

ApiResponse error_response(const std::string& kind, const std::string& message) {
  const int status = status_for(kind);
  return json_response(status, error_body(kind, message, status == 502 || status == 503));
}

std::string nonempty_text(const json& body) {
  if (!body.contains("user_text") || !body.at("user_text").is_string())
    throw Error("user_text is required", "invalid_argument");
  auto text = trim(body.at("user_text").get<std::string>());
  if (text.empty()) throw Error("user_text is empty", "invalid_argument");
  return text;
}

json parse_body(const std::string& body) {
  try {
    auto j = json::parse(body.empty() ? "{}" : body);
    if (!j.is_object()) throw Error("request body must be a JSON object", "invalid_argument");
    return j;
  } catch (const json::parse_error& e) {
    throw Error(std::string("malformed JSON: ") + e.what(), "invalid_argument");
  }
}

}  // namespace

StubAssets make_stub_assets(const json& canned_transcripts) {
  StubAssets assets;
  DenoiserConfig cfg;
  cfg.base_channels = 16;
  cfg.init_seed = 0;
  instruct::DiffusionModel model;
  model.denoiser = std::make_shared<Denoiser>(cfg);
  model.encoder = std::make_shared<embed::HashTextEncoder>(cfg.cond_dim, 16);
  model.schedule = diffusion::rescale_zero_terminal_snr(diffusion::make_schedule(diffusion::ScheduleKind::Linear, 1000));
  model.parameterization = diffusion::Parameterization::V;
  model.n_steps = instruct::kDefaultMaxSteps;
  model.image_size = 48;
  assets.bundle.stacked = model;

  synthetic::SyntheticSpec spec;
  spec.articles = 32;
  auto corpus = synthetic::generate_synthetic_corpus(spec, 0);
  assets.bundle.retrieval =
      std::make_shared<instruct::RetrievalIndex>(std::move(corpus), std::make_shared<embed::OracleSemanticEmbedder>(spec));

  auto canned = std::make_shared<instruct::CannedLlmClient>(std::make_shared<instruct::SyntheticLlmClient>(spec));
  canned->load(canned_transcripts);
  assets.llm = canned;
  return assets;
}

Api::Api(ServiceConfig config, instruct::ModelBundle bundle, std::shared_ptr<instruct::LlmClient> llm)
    : config_(std::move(config)), bundle_(std::move(bundle)), llm_(std::move(llm)), store_(config_.store_root) {
  if (!llm_) throw ConfigError("the service needs an LLM client");
  if (config_.queue_depth < 1) throw ConfigError("queue_depth must be positive");
  worker_ = std::thread([this] { worker_loop(); });
}

Api::~Api() {
  {
    std::lock_guard lock(jobs_mutex_);
    stopping_ = true;
  }
  jobs_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void Api::worker_loop() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock lock(jobs_mutex_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = queue_.front();
      queue_.pop_front();
      job->status = "running";
    }
    json result, error;
    try {
      result = job->work();
    } catch (const Error& e) {
      error = error_body(e.kind(), e.what(), status_for(e.kind()) >= 502);
    } catch (const std::exception& e) {
      error = error_body("internal", e.what());
    }
    {
      std::lock_guard lock(jobs_mutex_);
      job->status = error.is_null() ? "done" : "failed";
      job->result = result;
      job->error = error;
    }
    job->done.set_value(error.is_null() ? result : error);
  }
}

ApiResponse Api::submit(std::function<json()> work) {
  auto job = std::make_shared<Job>();
  job->id = ids_.next("job-");
  job->work = std::move(work);
  auto future = job->done.get_future();
  {
    std::lock_guard lock(jobs_mutex_);
    if (queue_.size() >= config_.queue_depth)
      return error_response("queue_full", "generation queue is full; retry later");
    queue_.push_back(job);
    jobs_[job->id] = job;
    if (jobs_.size() > 4096) {
      for (auto it = jobs_.begin(); it != jobs_.end() && jobs_.size() > 2048;)
        it = (it->second->status == "done" || it->second->status == "failed") ? jobs_.erase(it) : std::next(it);
    }
  }
  jobs_cv_.notify_one();
  const auto budget = std::chrono::duration<double>(config_.sync_budget_s);
  if (future.wait_for(budget) != std::future_status::ready)
    return json_response(202, {{"job_id", job->id}, {"status", "queued"}, {"poll_url", "/v1/jobs/" + job->id}});
  const json out = future.get();
  if (out.contains("error")) {
    const auto kind = out["error"]["kind"].get<std::string>();
    return {status_for(kind), out.dump(), "application/json"};
  }
  return json_response(200, out);
}

std::shared_ptr<std::mutex> Api::session_lock(const std::string& id) {
  std::lock_guard lock(sessions_mutex_);
  auto& m = session_locks_[id];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

json Api::run_turn(const std::string& session_id, const std::string& user_text, instruct::Mode mode, std::uint64_t seed,
                   bool first) {
  auto lock_ptr = session_lock(session_id);
  std::lock_guard lock(*lock_ptr);

  json session;
  if (first) {
    session = {{"id", session_id}, {"created_at", instruct::utc_timestamp()}, {"turns", json::array()}};
  } else {
    auto text = store_.get("sessions", session_id);
    if (!text) throw NotFoundError("session " + session_id + " not found");
    session = json::parse(*text);
  }

  const int n = (mode == instruct::Mode::Stacked && bundle_.stacked) ? bundle_.stacked->n_steps : instruct::kDefaultMaxSteps;
  std::string prompt;
  instruct::ParsedPlan plan;
  try {
    if (first) {
      prompt = instruct::render_prompt(user_text, n);
    } else {
      const auto previous = session.at("turns").back().at("plan").get<instruct::ParsedPlan>();
      prompt = instruct::render_follow_up_prompt(previous, user_text, n);
    }
    plan = instruct::plan_from_prompt(prompt, *llm_, config_.llm_retries, n);
  } catch (const Error& e) {
    if (e.kind() == "invalid_argument") throw;
    throw Error(std::string("LLM planning failed: ") + e.what(), "llm_error");
  }

  auto gen = config_.generation;
  gen.sampler.seed = seed;
  const auto article = instruct::generate_article(plan, mode, bundle_, gen);

  json images = json::array();
  json steps = json::array();
  for (std::size_t i = 0; i < article.steps.size(); ++i) {
    const auto hash = store_.put_image(article.images.at(i));
    images.push_back(hash);
    steps.push_back({{"index", i + 1}, {"text", article.steps[i]}, {"image_url", "/v1/images/" + hash + ".png"}});
  }
  const json content = {{"goal", article.goal}, {"steps", article.steps}, {"mode", instruct::to_string(mode)},
                        {"seed", seed}, {"images", images}};
  const std::size_t turn = session.at("turns").size();
  json api = {{"id", ids_.next("art-")},
              {"content_hash", to_hex(fnv1a(content.dump()))},
              {"session_id", session_id},
              {"turn", turn},
              {"goal", article.goal},
              {"steps", steps},
              {"mode", instruct::to_string(mode)},
              {"created_at", instruct::utc_timestamp()},
              {"seed", seed},
              {"plan_truncated", plan.truncated},
              {"generation", {{"trimmed", article.trimmed}, {"nonempty_dummies", article.nonempty_dummies},
                              {"details", article.details}}}};
  store_.put("articles", api["id"].get<std::string>(), api.dump());

  session["turns"].push_back({{"user_text", user_text}, {"prompt", prompt}, {"plan", plan}, {"article_id", api["id"]}});
  store_.put("sessions", session_id, session.dump());
  return api;
}

ApiResponse Api::create_article(const std::string& body) {
  try {
    const json req = parse_body(body);
    const auto text = nonempty_text(req);
    const auto mode = req.contains("mode") ? instruct::parse_mode(req.at("mode").get<std::string>()) : config_.default_mode;
    const auto seed = req.value("seed", std::uint64_t{0});
    const auto session_id = ids_.next("ses-");
    return submit([=, this] { return run_turn(session_id, text, mode, seed, true); });
  } catch (const ConfigError& e) {
    return error_response("invalid_argument", e.what());
  } catch (const Error& e) {
    return error_response(e.kind(), e.what());
  } catch (const json::exception& e) {
    return error_response("invalid_argument", e.what());
  }
}

ApiResponse Api::follow_up(const std::string& session_id, const std::string& body) {
  try {
    if (!store_.get("sessions", session_id)) return error_response("not_found", "session " + session_id + " not found");
    const json req = parse_body(body);
    const auto text = nonempty_text(req);
    const auto mode = req.contains("mode") ? instruct::parse_mode(req.at("mode").get<std::string>()) : config_.default_mode;
    const auto seed = req.value("seed", std::uint64_t{0});
    return submit([=, this] { return run_turn(session_id, text, mode, seed, false); });
  } catch (const ConfigError& e) {
    return error_response("invalid_argument", e.what());
  } catch (const Error& e) {
    return error_response(e.kind(), e.what());
  } catch (const json::exception& e) {
    return error_response("invalid_argument", e.what());
  }
}

ApiResponse Api::get_article(const std::string& id) const {
  auto text = store_.get("articles", id);
  if (!text) return error_response("not_found", "article " + id + " not found");
  return {200, *text, "application/json"};
}

ApiResponse Api::get_session(const std::string& id) const {
  auto text = store_.get("sessions", id);
  if (!text) return error_response("not_found", "session " + id + " not found");
  return {200, *text, "application/json"};
}

ApiResponse Api::delete_session(const std::string& id) {
  auto lock_ptr = session_lock(id);
  std::lock_guard lock(*lock_ptr);
  if (!store_.remove("sessions", id)) return error_response("not_found", "session " + id + " not found");
  return json_response(200, {{"deleted", id}});
}

ApiResponse Api::get_job(const std::string& id) const {
  std::lock_guard lock(jobs_mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return error_response("not_found", "job " + id + " not found");
  json out = {{"job_id", id}, {"status", it->second->status}};
  if (!it->second->result.is_null()) out["article"] = it->second->result;
  if (!it->second->error.is_null()) out["error"] = it->second->error["error"];
  return json_response(200, out);
}

ApiResponse Api::get_eval_report(const std::string& id) const {
  auto text = store_.get("eval_reports", id);
  if (!text) return error_response("not_found", "eval report " + id + " not found");
  return {200, *text, "application/json"};
}

ApiResponse Api::get_image(const std::string& hash) const {
  if (!Store::valid_id(hash)) return error_response("not_found", "image not found");
  const auto path = store_.image_path(hash);
  if (!fs::exists(path)) return error_response("not_found", "image " + hash + " not found");
  return {200, read_file(path), "image/png"};
}

ApiResponse Api::healthz() const {
  json h = {{"ok", true}, {"api", "v1"}, {"stub", config_.stub}};
  h["checkpoint_hash"] = bundle_.stacked ? json(bundle_.stacked->denoiser->hash()) : json(nullptr);
  h["text_encoder"] = bundle_.stacked ? json(bundle_.stacked->encoder->identity()) : json(nullptr);
  h["retrieval"] = static_cast<bool>(bundle_.retrieval);
  h["llm"] = {{"identity", llm_->identity()}, {"reachable", config_.stub ? true : llm_->reachable()}};
  h["default_mode"] = instruct::to_string(config_.default_mode);
  {
    std::lock_guard lock(jobs_mutex_);
    h["queue"] = {{"depth", queue_.size()}, {"capacity", config_.queue_depth}};
  }
  return json_response(200, h);
}

// ---------------------------------------------------------------------------

HttpServer::HttpServer(Api& api, fs::path static_dir) : api_(api), server_(std::make_unique<httplib::Server>()) {
  auto reply = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  auto& s = *server_;
  s.Post("/v1/articles", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.create_article(req.body));
  });
  s.Get(R"(/v1/articles/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.get_article(req.matches[1]));
  });
  s.Post(R"(/v1/sessions/([A-Za-z0-9_-]+)/follow_up)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.follow_up(req.matches[1], req.body));
  });
  s.Get(R"(/v1/sessions/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.get_session(req.matches[1]));
  });
  s.Delete(R"(/v1/sessions/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.delete_session(req.matches[1]));
  });
  s.Get(R"(/v1/jobs/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.get_job(req.matches[1]));
  });
  s.Get(R"(/v1/eval_reports/([A-Za-z0-9_-]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.get_eval_report(req.matches[1]));
  });
  s.Get(R"(/v1/images/([0-9a-f]+)\.png)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, api_.get_image(req.matches[1]));
    if (res.status == 200) res.set_header("Cache-Control", "public, max-age=31536000, immutable");
  });
  s.Get("/v1/healthz", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, api_.healthz()); });
  if (!static_dir.empty()) s.set_mount_point("/", static_dir.string());
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) res.set_content(error_body("not_found", "no such route").dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace stackdiff::service
