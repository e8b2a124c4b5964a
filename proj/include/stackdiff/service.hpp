#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "stackdiff/instructor.hpp"

namespace httplib {
class Server;
}

namespace stackdiff::service {

// Root layout: checkpoints/, articles/, sessions/, eval_reports/, images/.
// Every write goes through a temporary file and a rename.
class Store {
 public:
  explicit Store(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  // Returns the content hash naming the stored PNG.
  std::string put_image(const Image& image);
  std::filesystem::path image_path(const std::string& hash) const;

  void put(const std::string& kind, const std::string& id, const std::string& text);
  std::optional<std::string> get(const std::string& kind, const std::string& id) const;
  bool remove(const std::string& kind, const std::string& id);

  static bool valid_id(const std::string& id);

 private:
  std::filesystem::path root_;
};

// Time-ordered ids: 12 hex digits of milliseconds plus a 4-digit counter.
class IdGenerator {
 public:
  std::string next(const std::string& prefix);

 private:
  std::mutex mutex_;
  std::uint64_t last_ms_ = 0;
  std::uint32_t counter_ = 0;
};

struct ServiceConfig {
  std::filesystem::path store_root = "store";
  bool stub = false;
  instruct::Mode default_mode = instruct::Mode::Stacked;
  instruct::GenerationConfig generation;
  int llm_retries = 2;
  std::size_t queue_depth = 8;
  double sync_budget_s = 60.0;  // longer generations answer 202 with a job to poll
};

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// Untrained toy model, synthetic planner with canned transcripts, and a
// retrieval index over a small synthetic corpus. Needs no network or files.
struct StubAssets {
  instruct::ModelBundle bundle;
  std::shared_ptr<instruct::LlmClient> llm;
};

StubAssets make_stub_assets(const nlohmann::json& canned_transcripts = nlohmann::json::object());

// Request handling without the socket layer; HttpServer wires it to httplib.
class Api {
 public:
  Api(ServiceConfig config, instruct::ModelBundle bundle, std::shared_ptr<instruct::LlmClient> llm);
  ~Api();
  Api(const Api&) = delete;
  Api& operator=(const Api&) = delete;

  ApiResponse create_article(const std::string& body);
  ApiResponse follow_up(const std::string& session_id, const std::string& body);
  ApiResponse get_article(const std::string& id) const;
  ApiResponse get_session(const std::string& id) const;
  ApiResponse delete_session(const std::string& id);
  ApiResponse get_job(const std::string& id) const;
  ApiResponse get_eval_report(const std::string& id) const;
  ApiResponse get_image(const std::string& hash) const;
  ApiResponse healthz() const;

  Store& store() { return store_; }
  const ServiceConfig& config() const { return config_; }

 private:
  struct Job {
    std::string id;
    std::function<nlohmann::json()> work;
    std::promise<nlohmann::json> done;
    std::string status = "queued";
    nlohmann::json result;
    nlohmann::json error;
  };

  ApiResponse submit(std::function<nlohmann::json()> work);
  void worker_loop();

  nlohmann::json run_turn(const std::string& session_id, const std::string& user_text, instruct::Mode mode,
                          std::uint64_t seed, bool first);
  std::shared_ptr<std::mutex> session_lock(const std::string& id);

  ServiceConfig config_;
  instruct::ModelBundle bundle_;
  std::shared_ptr<instruct::LlmClient> llm_;
  Store store_;
  IdGenerator ids_;

  mutable std::mutex jobs_mutex_;
  std::condition_variable jobs_cv_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  bool stopping_ = false;
  std::thread worker_;

  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> session_locks_;
};

nlohmann::json error_body(const std::string& kind, const std::string& message, bool retry = false);
int status_for(const std::string& error_kind);

class HttpServer {
 public:
  explicit HttpServer(Api& api, std::filesystem::path static_dir = {});
  ~HttpServer();

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks serving on the calling thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  Api& api_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace stackdiff::service
