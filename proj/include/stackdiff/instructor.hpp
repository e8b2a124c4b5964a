#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackdiff/corpus.hpp"
#include "stackdiff/denoiser.hpp"
#include "stackdiff/diffusion.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/error.hpp"
#include "stackdiff/stacking.hpp"

namespace stackdiff::instruct {

// ---------------------------------------------------------------------------
// Prompting and plan parsing

constexpr int kDefaultMaxSteps = 6;

// The instruction appended to every user input. Contains the literal
// placeholder {INPUT_TEXT}.
std::string prompt_template(int max_steps = kDefaultMaxSteps);
std::string format_instruction(int max_steps = kDefaultMaxSteps);

// A bare goal has no sentence punctuation, e.g. "make colored ice".
bool is_bare_goal(std::string_view user_text);
std::string render_prompt(std::string_view user_text, int max_steps = kDefaultMaxSteps);

struct ParsedPlan {
  std::string goal;
  std::vector<std::string> steps;
  std::string raw;
  bool truncated = false;

  bool operator==(const ParsedPlan&) const = default;
};

void to_json(nlohmann::json& j, const ParsedPlan& p);
void from_json(const nlohmann::json& j, ParsedPlan& p);

class PlanParseError : public Error {
 public:
  PlanParseError(const std::string& message, std::string raw) : Error(message, "plan_parse_error"), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

ParsedPlan parse_plan(std::string_view llm_output, int max_steps = kDefaultMaxSteps);
// The response shape parse_plan accepts: "Goal: ..." then "1. ...", one per line.
std::string format_plan(const ParsedPlan& plan);

// ---------------------------------------------------------------------------
// LLM clients

struct LlmRequest {
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 512;
};

struct LlmResponse {
  std::string text;
  nlohmann::json usage = nlohmann::json::object();
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual LlmResponse complete(const LlmRequest& request) = 0;
  virtual std::string identity() const = 0;
  virtual bool reachable() const { return true; }
};

std::string prompt_key(std::string_view prompt);

// Replays stored responses keyed by prompt hash. A key may hold several
// responses, served in order (the last one repeats). Unknown prompts go to
// the fallback client, or raise NotFoundError when there is none.
class CannedLlmClient final : public LlmClient {
 public:
  CannedLlmClient() = default;
  explicit CannedLlmClient(std::shared_ptr<LlmClient> fallback) : fallback_(std::move(fallback)) {}

  void add(std::string_view prompt, std::string response);
  void add_keyed(const std::string& key, std::string response);
  // {"<key>": "text" | ["text", ...], ...}
  void load(const nlohmann::json& table);

  LlmResponse complete(const LlmRequest& request) override;
  std::string identity() const override { return "canned"; }
  std::size_t calls() const { return calls_; }

 private:
  std::map<std::string, std::vector<std::string>> responses_;
  std::map<std::string, std::size_t> served_;
  std::shared_ptr<LlmClient> fallback_;
  std::size_t calls_ = 0;
  std::mutex mutex_;
};

// Offline planner for the synthetic world: finds a color and shape in the
// user text (defaulting to the first of each) and answers with the fill
// steps in increasing order.
class SyntheticLlmClient final : public LlmClient {
 public:
  explicit SyntheticLlmClient(synthetic::SyntheticSpec spec = {});
  LlmResponse complete(const LlmRequest& request) override;
  std::string identity() const override { return "synthetic"; }

 private:
  synthetic::Generator generator_;
};

struct HttpLlmConfig {
  std::string base_url;  // OpenAI-compatible, e.g. http://host:8000/v1
  std::string model;
  std::string api_key;
  double timeout_s = 60.0;

  // STACKDIFF_LLM_URL, STACKDIFF_LLM_MODEL, STACKDIFF_LLM_API_KEY, STACKDIFF_LLM_TIMEOUT
  static HttpLlmConfig from_env();
};

class HttpLlmClient final : public LlmClient {
 public:
  explicit HttpLlmClient(HttpLlmConfig config);
  LlmResponse complete(const LlmRequest& request) override;
  std::string identity() const override { return "http:" + config_.model; }
  bool reachable() const override;  // GET {base_url}/models within two seconds

 private:
  HttpLlmConfig config_;
};

class PlanError : public Error {
 public:
  PlanError(const std::string& message, std::vector<std::string> attempts)
      : Error(message, "plan_error"), attempts_(std::move(attempts)) {}
  const std::vector<std::string>& attempts() const noexcept { return attempts_; }

 private:
  std::vector<std::string> attempts_;
};

extern const char* const kFormatReminder;

// Queries until a response parses, making at most retries + 1 attempts.
// Retries append kFormatReminder to the prompt.
ParsedPlan plan_from_prompt(const std::string& prompt, LlmClient& client, int retries, int max_steps);
ParsedPlan plan(std::string_view user_text, LlmClient& client, int retries = 2, int max_steps = kDefaultMaxSteps);

std::string render_follow_up_prompt(const ParsedPlan& previous, std::string_view user_text,
                                    int max_steps = kDefaultMaxSteps);

// ---------------------------------------------------------------------------
// Generation

enum class Mode { Stacked, IndependentFrozen, IndependentFinetuned, RetrievalStep, RetrievalGoal };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

// A loaded denoiser with everything needed to sample and decode.
struct DiffusionModel {
  std::shared_ptr<const Denoiser> denoiser;
  std::shared_ptr<const embed::TextEncoder> encoder;
  CodecConfig codec;
  ConditioningOptions conditioning;
  diffusion::NoiseSchedule schedule;
  diffusion::Parameterization parameterization = diffusion::Parameterization::V;
  int n_steps = 1;
  int image_size = 48;

  // Reads codec, conditioning, N and image size from the checkpoint metadata.
  static DiffusionModel from_checkpoint(Checkpoint checkpoint, std::shared_ptr<const embed::TextEncoder> encoder);
  int latent_height() const { return image_size / codec.spatial_reduction; }
};

// Training corpus indexed by semantic embeddings of its images and goals.
class RetrievalIndex {
 public:
  RetrievalIndex(std::vector<corpus::Article> corpus, std::shared_ptr<const embed::SemanticEmbedder> embedder);

  const std::vector<corpus::Article>& corpus() const { return corpus_; }
  // (article, step) of the image most similar to `text`.
  std::pair<std::size_t, std::size_t> nearest_image(const std::string& text) const;
  std::size_t nearest_article(const std::string& goal) const;

 private:
  std::vector<corpus::Article> corpus_;
  std::shared_ptr<const embed::SemanticEmbedder> embedder_;
  std::vector<std::pair<std::size_t, std::size_t>> image_keys_;
  std::vector<Vector> image_vectors_;
  std::vector<Vector> goal_vectors_;
};

// The independent modes fall back to `stacked` when their own model is absent.
struct ModelBundle {
  std::optional<DiffusionModel> stacked;
  std::optional<DiffusionModel> frozen;
  std::optional<DiffusionModel> finetuned;
  std::shared_ptr<const RetrievalIndex> retrieval;
};

struct GenerationConfig {
  diffusion::SamplerConfig sampler;
  double empty_threshold = 12.0;  // mean absolute deviation from the empty frame, 0..255
};

void to_json(nlohmann::json& j, const GenerationConfig& c);
void from_json(const nlohmann::json& j, GenerationConfig& c);

struct GeneratedArticle {
  std::string goal;
  std::vector<std::string> steps;
  std::vector<Image> images;
  Mode mode = Mode::Stacked;
  std::uint64_t seed = 0;
  std::vector<double> band_deviation;  // stacked: every decoded band
  int trimmed = 0;                     // dummy bands removed
  int nonempty_dummies = 0;            // dummy bands above the empty threshold
  nlohmann::json details = nlohmann::json::object();

  corpus::Article as_article(const std::string& goal_id = {}) const;
};

nlohmann::json article_record(const GeneratedArticle& a);  // everything except pixels

GeneratedArticle generate_article(const ParsedPlan& plan, Mode mode, const ModelBundle& bundle,
                                  const GenerationConfig& config);

// Pads the plan to the model's N, samples once, untiles and decodes. Dummy
// bands past the plan's steps are dropped.
GeneratedArticle generate_stacked(const ParsedPlan& plan, const DiffusionModel& model, const GenerationConfig& config);

// One sample per step i, conditioned on the goal followed by step i alone and
// seeded with derive_seed(seed, {i}) (i from 1).
GeneratedArticle generate_independent(const ParsedPlan& plan, const DiffusionModel& model, const GenerationConfig& config,
                                      Mode mode = Mode::IndependentFinetuned);

// ---------------------------------------------------------------------------
// Sessions

struct Turn {
  std::string user_text;
  std::string prompt;
  ParsedPlan plan;
  GeneratedArticle article;
};

struct Session {
  std::string id;
  std::string created_at;  // ISO 8601 UTC
  std::vector<Turn> turns;
};

std::string utc_timestamp();

Session start_session(std::string id, std::string_view user_text, LlmClient& client, Mode mode, const ModelBundle& bundle,
                      const GenerationConfig& config, int retries = 2);
// Appends a turn planned from the previous turn's plan plus the new text.
void follow_up(Session& session, std::string_view user_text, LlmClient& client, Mode mode, const ModelBundle& bundle,
               const GenerationConfig& config, int retries = 2);

// ---------------------------------------------------------------------------
// Output

// `image_refs[i]` is the src of step i's image. When `root` is given every
// ref must name an existing file below it.
std::string render_article_html(const GeneratedArticle& article, const std::vector<std::string>& image_refs,
                                const std::filesystem::path* root = nullptr);

// Writes step_NN.png, plan.json and index.html into `dir`.
void write_article_bundle(const GeneratedArticle& article, const ParsedPlan& plan, const std::filesystem::path& dir);
// Missing step images come back empty.
corpus::Article read_article_bundle(const std::filesystem::path& dir);

}  // namespace stackdiff::instruct
