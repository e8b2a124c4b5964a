#include "stackdiff/instructor.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <limits>
#include <regex>
#include <sstream>

#include <httplib.h>

#include "stackdiff/util.hpp"

namespace stackdiff::instruct {

using nlohmann::json;

std::string format_instruction(int max_steps) {
  return "Write your response in the form of a goal \"Goal: {GOAL}\" followed by concise numbered headline steps, "
         "each one line, without any other text. Use at most " +
         std::to_string(max_steps) + " steps.";
}

std::string prompt_template(int max_steps) { return "{INPUT_TEXT} " + format_instruction(max_steps); }

bool is_bare_goal(std::string_view user_text) {
  return trim(user_text).find_first_of(".?!") == std::string::npos;
}

std::string render_prompt(std::string_view user_text, int max_steps) {
  std::string text = trim(user_text);
  if (text.empty()) throw Error("user text is empty", "invalid_argument");
  if (max_steps < 1) throw Error("max_steps must be positive", "invalid_argument");
  if (is_bare_goal(text)) {
    // Lowercase a title-cased first word, but not an acronym.
    if (text.size() > 1 && std::isupper(static_cast<unsigned char>(text[0])) &&
        !std::isupper(static_cast<unsigned char>(text[1])))
      text[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(text[0])));
    text = "How can I " + text + "?";
  }
  return text + " " + format_instruction(max_steps);
}

void to_json(json& j, const ParsedPlan& p) {
  j = {{"goal", p.goal}, {"steps", p.steps}, {"raw", p.raw}, {"truncated", p.truncated}};
}

void from_json(const json& j, ParsedPlan& p) {
  p.goal = j.at("goal").get<std::string>();
  p.steps = j.at("steps").get<std::vector<std::string>>();
  p.raw = j.value("raw", std::string());
  p.truncated = j.value("truncated", false);
}

namespace {

std::string strip_emphasis(std::string s) {
  const auto first = s.find_first_not_of("*_ \t");
  if (first == std::string::npos) return {};
  s = trim(s.substr(first, s.find_last_not_of("*_ \t") - first + 1));
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim(s.substr(1, s.size() - 2));
  return s;
}

}  // namespace

ParsedPlan parse_plan(std::string_view llm_output, int max_steps) {
  if (max_steps < 1) throw Error("max_steps must be positive", "invalid_argument");
  static const std::regex goal_re(R"(^\s*[*_#]*\s*goal\s*[*_]*\s*:\s*[*_]*\s*(.*\S)\s*$)", std::regex::icase);
  static const std::regex step_re(R"(^\s*[*_]*\s*(?:step\s*)?(\d+)\s*[.):]\s*[*_]*\s*(.*\S)\s*$)", std::regex::icase);

  ParsedPlan plan;
  plan.raw = std::string(llm_output);
  std::vector<std::string> steps;
  for (const auto& line : split_lines(llm_output)) {
    std::smatch m;
    if (plan.goal.empty() && std::regex_match(line, m, goal_re)) {
      plan.goal = strip_emphasis(m[1].str());
    } else if (!plan.goal.empty() && std::regex_match(line, m, step_re)) {
      auto text = strip_emphasis(m[2].str());
      if (!text.empty()) steps.push_back(std::move(text));
    }
  }
  if (plan.goal.empty()) throw PlanParseError("LLM response has no \"Goal:\" line", plan.raw);
  if (steps.empty()) throw PlanParseError("LLM response has no numbered steps", plan.raw);
  if (static_cast<int>(steps.size()) > max_steps) {
    steps.resize(static_cast<std::size_t>(max_steps));
    plan.truncated = true;
  }
  plan.steps = std::move(steps);
  return plan;
}

std::string format_plan(const ParsedPlan& plan) {
  std::string out = "Goal: " + plan.goal;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) out += "\n" + std::to_string(i + 1) + ". " + plan.steps[i];
  return out;
}

// ---------------------------------------------------------------------------

std::string prompt_key(std::string_view prompt) { return to_hex(fnv1a(prompt)); }

void CannedLlmClient::add(std::string_view prompt, std::string response) { add_keyed(prompt_key(prompt), std::move(response)); }

void CannedLlmClient::add_keyed(const std::string& key, std::string response) {
  std::lock_guard lock(mutex_);
  responses_[key].push_back(std::move(response));
}

void CannedLlmClient::load(const json& table) {
  for (const auto& [key, value] : table.items()) {
    if (value.is_string()) {
      add_keyed(key, value.get<std::string>());
    } else {
      for (const auto& v : value) add_keyed(key, v.get<std::string>());
    }
  }
}

LlmResponse CannedLlmClient::complete(const LlmRequest& request) {
  const auto key = prompt_key(request.prompt);
  {
    std::lock_guard lock(mutex_);
    ++calls_;
    auto it = responses_.find(key);
    if (it != responses_.end()) {
      auto& n = served_[key];
      const auto& text = it->second[std::min(n, it->second.size() - 1)];
      ++n;
      return {text, {{"canned", true}, {"key", key}}};
    }
  }
  if (fallback_) return fallback_->complete(request);
  throw NotFoundError("no canned response for prompt " + key);
}

SyntheticLlmClient::SyntheticLlmClient(synthetic::SyntheticSpec spec) : generator_(std::move(spec)) {}

LlmResponse SyntheticLlmClient::complete(const LlmRequest& request) {
  // Only the user's part of the prompt is inspected.
  std::string text = request.prompt;
  const auto cut = text.find("Write your response in the form");
  if (cut != std::string::npos) text.resize(cut);
  const std::string lower = to_lower(text);

  // For follow-ups the newest mention wins.
  const auto says = lower.rfind("the user now says:");
  const std::string latest = says == std::string::npos ? lower : lower.substr(says);
  auto color = generator_.parse_color(latest);
  auto shape = generator_.parse_shape(latest);
  if (!color) color = generator_.parse_color(lower);
  if (!shape) shape = generator_.parse_shape(lower);

  int max_steps = kDefaultMaxSteps;
  static const std::regex at_most(R"(Use at most (\d+) steps)");
  std::smatch m;
  if (std::regex_search(request.prompt, m, at_most)) max_steps = std::stoi(m[1].str());

  ParsedPlan p;
  p.goal = generator_.goal_text(color.value_or(0), shape.value_or(0));
  const int levels = static_cast<int>(generator_.vocabulary().levels.size());
  const int n = std::min({levels, max_steps, generator_.spec().n_steps});
  // The n highest fill levels, in increasing order.
  for (int i = 0; i < n; ++i) p.steps.push_back(generator_.step_text(levels - n + i));
  return {format_plan(p), {{"synthetic", true}}};
}

HttpLlmConfig HttpLlmConfig::from_env() {
  HttpLlmConfig c;
  auto env = [](const char* name) -> std::string {
    const char* v = std::getenv(name);
    return v ? v : "";
  };
  c.base_url = env("STACKDIFF_LLM_URL");
  c.model = env("STACKDIFF_LLM_MODEL");
  c.api_key = env("STACKDIFF_LLM_API_KEY");
  if (auto t = env("STACKDIFF_LLM_TIMEOUT"); !t.empty()) c.timeout_s = std::stod(t);
  if (c.base_url.empty()) throw ConfigError("STACKDIFF_LLM_URL is not set");
  return c;
}

HttpLlmClient::HttpLlmClient(HttpLlmConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw ConfigError("LLM base URL is empty");
}

namespace {

std::pair<std::string, std::string> split_base_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash == std::string::npos) return {url, ""};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

bool HttpLlmClient::reachable() const {
  const auto [host, prefix] = split_base_url(config_.base_url);
  httplib::Client client(host);
  client.set_connection_timeout(2, 0);
  client.set_read_timeout(2, 0);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  auto res = client.Get(prefix + "/models", headers);
  return res && res->status < 500;
}

LlmResponse HttpLlmClient::complete(const LlmRequest& request) {
  const auto [host, prefix] = split_base_url(config_.base_url);
  httplib::Client client(host);
  const auto secs = static_cast<time_t>(std::max(1.0, config_.timeout_s));
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  const json body = {{"model", config_.model},
                     {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
                     {"temperature", request.temperature},
                     {"max_tokens", request.max_tokens}};
  auto res = client.Post(prefix + "/chat/completions", headers, body.dump(), "application/json");
  if (!res) throw IoError("LLM endpoint unreachable at " + config_.base_url + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw IoError("LLM endpoint returned HTTP " + std::to_string(res->status));
  try {
    const json j = json::parse(res->body);
    return {j.at("choices").at(0).at("message").at("content").get<std::string>(), j.value("usage", json::object())};
  } catch (const json::exception& e) {
    throw ParseError(std::string("unexpected LLM response: ") + e.what());
  }
}

const char* const kFormatReminder =
    "\nReply with exactly one line \"Goal: {GOAL}\" and then numbered steps like \"1. ...\", one per line.";

ParsedPlan plan_from_prompt(const std::string& prompt, LlmClient& client, int retries, int max_steps) {
  if (retries < 0) throw Error("retries must be >= 0", "invalid_argument");
  std::vector<std::string> attempts;
  std::string current = prompt;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    const auto response = client.complete({current, 0.0, 512});
    attempts.push_back(response.text);
    try {
      return parse_plan(response.text, max_steps);
    } catch (const PlanParseError&) {
      current = prompt + kFormatReminder;
    }
  }
  throw PlanError("no parsable plan after " + std::to_string(attempts.size()) + " attempt(s)", std::move(attempts));
}

ParsedPlan plan(std::string_view user_text, LlmClient& client, int retries, int max_steps) {
  return plan_from_prompt(render_prompt(user_text, max_steps), client, retries, max_steps);
}

std::string render_follow_up_prompt(const ParsedPlan& previous, std::string_view user_text, int max_steps) {
  const std::string text = trim(user_text);
  if (text.empty()) throw Error("follow-up text is empty", "invalid_argument");
  std::string numbered;
  for (std::size_t i = 0; i < previous.steps.size(); ++i)
    numbered += (i ? "\n" : "") + std::to_string(i + 1) + ". " + previous.steps[i];
  return "Previously you gave this plan:\nGoal: " + previous.goal + "\n" + numbered + "\nThe user now says: " + text +
         ". " + format_instruction(max_steps);
}

// ---------------------------------------------------------------------------

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Stacked: return "stacked";
    case Mode::IndependentFrozen: return "independent_frozen";
    case Mode::IndependentFinetuned: return "independent_finetuned";
    case Mode::RetrievalStep: return "retrieval_step";
    case Mode::RetrievalGoal: return "retrieval_goal";
  }
  return "stacked";
}

Mode parse_mode(const std::string& s) {
  for (auto m : {Mode::Stacked, Mode::IndependentFrozen, Mode::IndependentFinetuned, Mode::RetrievalStep,
                 Mode::RetrievalGoal})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown generation mode '" + s + "'");
}

DiffusionModel DiffusionModel::from_checkpoint(Checkpoint checkpoint, std::shared_ptr<const embed::TextEncoder> encoder) {
  if (!encoder) throw ConfigError("a text encoder is required");
  DiffusionModel m;
  const auto& extra = checkpoint.meta.extra;
  if (extra.contains("codec")) m.codec = extra.at("codec").get<CodecConfig>();
  if (extra.contains("conditioning")) {
    m.conditioning.positional = extra.at("conditioning").value("positional", true);
    m.conditioning.gain = extra.at("conditioning").value("gain", 1.0);
  }
  m.n_steps = extra.value("N", 1);
  m.image_size = extra.value("image_size", 48);
  m.schedule = checkpoint.meta.schedule;
  m.parameterization = checkpoint.meta.parameterization;
  if (encoder->dim() != checkpoint.model->config().cond_dim)
    throw ConfigError("text encoder dimension " + std::to_string(encoder->dim()) + " does not match the model's " +
                      std::to_string(checkpoint.model->config().cond_dim));
  if (m.codec.latent_channels() != checkpoint.model->config().in_channels)
    throw ConfigError("checkpoint codec does not match the model's input channels");
  m.denoiser = std::move(checkpoint.model);
  m.encoder = std::move(encoder);
  return m;
}

RetrievalIndex::RetrievalIndex(std::vector<corpus::Article> corpus, std::shared_ptr<const embed::SemanticEmbedder> embedder)
    : corpus_(std::move(corpus)), embedder_(std::move(embedder)) {
  if (!embedder_) throw ConfigError("retrieval needs a semantic embedder");
  for (std::size_t a = 0; a < corpus_.size(); ++a) {
    goal_vectors_.push_back(embedder_->embed_text(corpus_[a].goal).vector);
    for (std::size_t s = 0; s < corpus_[a].images.size(); ++s) {
      image_keys_.emplace_back(a, s);
      image_vectors_.push_back(embedder_->embed_image(corpus_[a].images[s]).vector);
    }
  }
}

namespace {

std::size_t argmax_similarity(const Vector& q, const std::vector<Vector>& pool) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double s = q.dot(pool[i]);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

}  // namespace

std::pair<std::size_t, std::size_t> RetrievalIndex::nearest_image(const std::string& text) const {
  if (image_vectors_.empty()) throw NotFoundError("retrieval index has no images");
  return image_keys_[argmax_similarity(embedder_->embed_text(text).vector, image_vectors_)];
}

std::size_t RetrievalIndex::nearest_article(const std::string& goal) const {
  if (goal_vectors_.empty()) throw NotFoundError("retrieval index has no articles");
  return argmax_similarity(embedder_->embed_text(goal).vector, goal_vectors_);
}

void to_json(json& j, const GenerationConfig& c) {
  j = {{"sampler", c.sampler}, {"empty_threshold", c.empty_threshold}};
}

void from_json(const json& j, GenerationConfig& c) {
  GenerationConfig d;
  if (j.contains("sampler")) c.sampler = j.at("sampler").get<diffusion::SamplerConfig>();
  c.empty_threshold = j.value("empty_threshold", d.empty_threshold);
}

corpus::Article GeneratedArticle::as_article(const std::string& goal_id) const {
  corpus::Article a;
  a.goal_id = goal_id;
  a.goal = goal;
  a.steps = steps;
  a.images = images;
  return a;
}

json article_record(const GeneratedArticle& a) {
  return {{"goal", a.goal},
          {"steps", a.steps},
          {"mode", to_string(a.mode)},
          {"seed", a.seed},
          {"band_deviation", a.band_deviation},
          {"trimmed", a.trimmed},
          {"nonempty_dummies", a.nonempty_dummies},
          {"details", a.details}};
}

namespace {

void check_plan(const ParsedPlan& plan, int n_steps) {
  if (plan.goal.empty()) throw Error("plan has no goal", "invalid_argument");
  if (plan.steps.empty()) throw Error("plan has no steps", "invalid_argument");
  if (static_cast<int>(plan.steps.size()) > n_steps)
    throw Error("plan has " + std::to_string(plan.steps.size()) + " steps but the model generates at most " +
                    std::to_string(n_steps),
                "plan_too_long");
}

std::vector<Image> sample_bands(const DiffusionModel& model, const std::string& goal, std::vector<std::string> steps,
                                const diffusion::SamplerConfig& sampler) {
  steps.resize(static_cast<std::size_t>(model.n_steps), corpus::kDummyStepText);
  const auto cond = condition_texts(*model.encoder, goal, steps, model.conditioning);
  const auto uncond = null_conditioning(*model.encoder, model.conditioning);
  const int h = model.latent_height();
  const auto z = diffusion::sample(*model.denoiser, cond, uncond, model.schedule, model.parameterization, sampler,
                                   model.codec.latent_channels(), h, h, model.n_steps);
  const PatchCodec codec(model.codec);
  std::vector<Image> out;
  for (const auto& g : untile(z, model.n_steps)) out.push_back(codec.decode(g));
  return out;
}

}  // namespace

GeneratedArticle generate_stacked(const ParsedPlan& plan, const DiffusionModel& model, const GenerationConfig& config) {
  check_plan(plan, model.n_steps);
  GeneratedArticle out;
  out.goal = plan.goal;
  out.steps = plan.steps;
  out.mode = Mode::Stacked;
  out.seed = config.sampler.seed;
  auto bands = sample_bands(model, plan.goal, plan.steps, config.sampler);
  for (std::size_t i = 0; i < bands.size(); ++i) {
    const double dev = empty_frame_deviation(bands[i]);
    out.band_deviation.push_back(dev);
    if (i >= plan.steps.size()) {
      ++out.trimmed;
      if (dev >= config.empty_threshold) ++out.nonempty_dummies;
    }
  }
  bands.resize(plan.steps.size());
  out.images = std::move(bands);
  out.details = {{"N", model.n_steps}, {"empty_threshold", config.empty_threshold}};
  return out;
}

GeneratedArticle generate_independent(const ParsedPlan& plan, const DiffusionModel& model, const GenerationConfig& config,
                                      Mode mode) {
  if (plan.goal.empty() || plan.steps.empty()) throw Error("plan needs a goal and at least one step", "invalid_argument");
  GeneratedArticle out;
  out.goal = plan.goal;
  out.steps = plan.steps;
  out.mode = mode;
  out.seed = config.sampler.seed;
  json seeds = json::array();
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    auto sampler = config.sampler;
    sampler.seed = derive_seed(config.sampler.seed, {i + 1});
    seeds.push_back(sampler.seed);
    out.images.push_back(sample_bands(model, plan.goal, {plan.steps[i]}, sampler).front());
  }
  out.details = {{"step_seeds", seeds}, {"N", model.n_steps}};
  return out;
}

GeneratedArticle generate_article(const ParsedPlan& plan, Mode mode, const ModelBundle& bundle,
                                  const GenerationConfig& config) {
  switch (mode) {
    case Mode::Stacked:
      if (!bundle.stacked) throw ConfigError("stacked mode needs a stacked model");
      return generate_stacked(plan, *bundle.stacked, config);
    case Mode::IndependentFrozen:
    case Mode::IndependentFinetuned: {
      const auto& own = mode == Mode::IndependentFrozen ? bundle.frozen : bundle.finetuned;
      const auto& model = own ? own : bundle.stacked;
      if (!model) throw ConfigError(to_string(mode) + " mode needs a model");
      auto out = generate_independent(plan, *model, config, mode);
      out.details["fallback_to_stacked"] = !own.has_value();
      return out;
    }
    case Mode::RetrievalStep: {
      if (!bundle.retrieval) throw ConfigError("retrieval_step mode needs a retrieval index");
      if (plan.steps.empty()) throw Error("plan has no steps", "invalid_argument");
      GeneratedArticle out;
      out.goal = plan.goal;
      out.steps = plan.steps;
      out.mode = mode;
      out.seed = config.sampler.seed;
      json sources = json::array();
      for (const auto& s : plan.steps) {
        const auto [a, k] = bundle.retrieval->nearest_image(plan.goal + " " + s);
        const auto& art = bundle.retrieval->corpus()[a];
        out.images.push_back(art.images[k]);
        sources.push_back({{"goal_id", art.goal_id}, {"step", k + 1}});
      }
      out.details = {{"sources", sources}};
      return out;
    }
    case Mode::RetrievalGoal: {
      if (!bundle.retrieval) throw ConfigError("retrieval_goal mode needs a retrieval index");
      const auto& art = bundle.retrieval->corpus()[bundle.retrieval->nearest_article(plan.goal)];
      GeneratedArticle out;
      out.goal = art.goal;
      out.steps = art.steps;
      out.images = art.images;
      out.mode = mode;
      out.seed = config.sampler.seed;
      out.details = {{"source_goal_id", art.goal_id}, {"requested_goal", plan.goal}};
      return out;
    }
  }
  throw ConfigError("unhandled generation mode");
}

// ---------------------------------------------------------------------------

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

int model_steps(const ModelBundle& bundle, Mode mode) {
  if (mode == Mode::Stacked && bundle.stacked) return bundle.stacked->n_steps;
  return kDefaultMaxSteps;
}

}  // namespace

Session start_session(std::string id, std::string_view user_text, LlmClient& client, Mode mode, const ModelBundle& bundle,
                      const GenerationConfig& config, int retries) {
  Session s;
  s.id = std::move(id);
  s.created_at = utc_timestamp();
  Turn t;
  t.user_text = trim(user_text);
  const int n = model_steps(bundle, mode);
  t.prompt = render_prompt(t.user_text, n);
  t.plan = plan_from_prompt(t.prompt, client, retries, n);
  t.article = generate_article(t.plan, mode, bundle, config);
  s.turns.push_back(std::move(t));
  return s;
}

void follow_up(Session& session, std::string_view user_text, LlmClient& client, Mode mode, const ModelBundle& bundle,
               const GenerationConfig& config, int retries) {
  if (session.turns.empty()) throw Error("session has no turns to follow up on", "invalid_argument");
  Turn t;
  t.user_text = trim(user_text);
  const int n = model_steps(bundle, mode);
  t.prompt = render_follow_up_prompt(session.turns.back().plan, t.user_text, n);
  t.plan = plan_from_prompt(t.prompt, client, retries, n);
  t.article = generate_article(t.plan, mode, bundle, config);
  session.turns.push_back(std::move(t));
}

// ---------------------------------------------------------------------------

std::string render_article_html(const GeneratedArticle& article, const std::vector<std::string>& image_refs,
                                const std::filesystem::path* root) {
  if (image_refs.size() != article.images.size())
    throw Error("expected " + std::to_string(article.images.size()) + " image references", "invalid_argument");
  if (root)
    for (const auto& ref : image_refs)
      if (!std::filesystem::exists(*root / ref)) throw NotFoundError("image " + ref + " does not exist");

  std::ostringstream os;
  os << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(article.goal) << "</title>\n"
     << "<style>body{font-family:sans-serif;max-width:40em;margin:auto}.step{display:flex;gap:1em;align-items:center}"
        ".step img{width:144px;height:144px;image-rendering:pixelated}</style>\n"
     << "</head><body>\n<h1>" << html_escape(article.goal) << "</h1>\n<ol class=\"steps\">\n";
  for (std::size_t i = 0; i < article.steps.size(); ++i) {
    os << "<li class=\"step\"><p>" << html_escape(article.steps[i]) << "</p>";
    if (i < image_refs.size())
      os << "<img src=\"" << html_escape(image_refs[i]) << "\" alt=\"step " << i + 1 << "\">";
    os << "</li>\n";
  }
  os << "</ol>\n</body></html>\n";
  return os.str();
}

void write_article_bundle(const GeneratedArticle& article, const ParsedPlan& plan, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> refs;
  for (std::size_t i = 0; i < article.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "step_%02zu.png", i + 1);
    write_png(article.images[i], dir / name);
    refs.emplace_back(name);
  }
  json record = article_record(article);
  record["plan"] = plan;
  write_file_atomic(dir / "plan.json", record.dump(2) + "\n");
  write_file_atomic(dir / "index.html", render_article_html(article, refs, &dir));
}

corpus::Article read_article_bundle(const std::filesystem::path& dir) {
  const auto record_path = dir / "plan.json";
  if (!std::filesystem::exists(record_path)) throw NotFoundError("no plan.json in " + dir.string());
  const json record = json::parse(read_file(record_path));
  corpus::Article a;
  a.goal_id = dir.filename().string();
  a.goal = record.at("goal").get<std::string>();
  a.steps = record.at("steps").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "step_%02zu.png", i + 1);
    const auto path = dir / name;
    a.images.push_back(std::filesystem::exists(path) ? read_png(path) : Image{});
  }
  return a;
}

}  // namespace stackdiff::instruct
