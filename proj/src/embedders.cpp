#include "stackdiff/embedders.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff::embed {

using nlohmann::json;

double semantic_similarity(const SemanticEmbedding& a, const SemanticEmbedding& b) {
  if (a.vector.size() != b.vector.size())
    throw ShapeError("semantic embeddings differ in dimension (" + std::to_string(a.vector.size()) + " vs " +
                     std::to_string(b.vector.size()) + ")");
  return a.vector.dot(b.vector);
}

SemanticEmbedding make_semantic(Vector v, Modality modality) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw Error("cannot normalize a zero or non-finite embedding");
  return SemanticEmbedding{v / n, modality};
}

namespace {

Vector gaussian_vector(std::uint64_t seed, int dim, double scale) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// HashTextEncoder

HashTextEncoder::HashTextEncoder(int dim, int context_limit, std::uint64_t seed)
    : dim_(dim), context_limit_(context_limit), seed_(seed) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("text encoder dimension must be even and >= 2");
  if (context_limit < 1) throw ConfigError("text encoder context limit must be >= 1");
}

std::vector<std::string> HashTextEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Vector HashTextEncoder::word_vector(std::string_view word) const {
  return gaussian_vector(derive_seed(seed_, {fnv1a(word)}), dim_, std::sqrt(0.5));
}

TokenEmbeddingSequence HashTextEncoder::encode(std::string_view text) const {
  auto tokens = tokenize(text);
  TokenEmbeddingSequence seq;
  seq.source_text = std::string(text);
  if (tokens.empty()) {
    seq.vectors = word_vector("\x01null").transpose();
    return seq;
  }
  if (static_cast<int>(tokens.size()) > context_limit_) {
    tokens.resize(static_cast<std::size_t>(context_limit_));
    seq.truncated = true;
  }
  seq.vectors.resize(static_cast<Eigen::Index>(tokens.size()), dim_);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    Vector v = word_vector(tokens[j]);
    // Weak within-text order signal.
    for (int k = 0; k < dim_ / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * k / dim_);
      v[2 * k] += 0.1 * std::sin(static_cast<double>(j) * freq);
      v[2 * k + 1] += 0.1 * std::cos(static_cast<double>(j) * freq);
    }
    seq.vectors.row(static_cast<Eigen::Index>(j)) = v.transpose();
  }
  return seq;
}

std::string HashTextEncoder::identity() const {
  return "hash-text(d=" + std::to_string(dim_) + ",L=" + std::to_string(context_limit_) + ",seed=" + std::to_string(seed_) + ")";
}

// ---------------------------------------------------------------------------
// Test doubles

HashSemanticEmbedder::HashSemanticEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ConfigError("semantic dimension must be positive");
}

SemanticEmbedding HashSemanticEmbedder::embed_image(const Image& image) const {
  return make_semantic(gaussian_vector(derive_seed(seed_, {1, image_hash(image)}), dim_, 1.0), Modality::Image);
}

SemanticEmbedding HashSemanticEmbedder::embed_text(std::string_view text) const {
  return make_semantic(gaussian_vector(derive_seed(seed_, {2, fnv1a(text)}), dim_, 1.0), Modality::Text);
}

std::string HashSemanticEmbedder::identity() const {
  return "hash-semantic(d=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_) + ")";
}

ConstantSemanticEmbedder::ConstantSemanticEmbedder(int dim, std::uint64_t seed)
    : texts_(dim, seed), constant_(make_semantic(gaussian_vector(derive_seed(seed, {3}), dim, 1.0), Modality::Image).vector) {}

SemanticEmbedding ConstantSemanticEmbedder::embed_image(const Image&) const {
  return SemanticEmbedding{constant_, Modality::Image};
}

SemanticEmbedding ConstantSemanticEmbedder::embed_text(std::string_view text) const { return texts_.embed_text(text); }

std::string ConstantSemanticEmbedder::identity() const { return "constant-semantic/" + texts_.identity(); }

OracleSemanticEmbedder::OracleSemanticEmbedder(synthetic::SyntheticSpec spec) : generator_(std::move(spec)) {}

std::string OracleSemanticEmbedder::caption(const synthetic::Attributes& a) const {
  return generator_.goal_text(a.color, a.shape) + " " + generator_.step_text(a.level);
}

SemanticEmbedding OracleSemanticEmbedder::embed_image(const Image& image) const {
  auto e = embed_text(caption(generator_.classify(image)));
  e.modality = Modality::Image;
  return e;
}

SemanticEmbedding OracleSemanticEmbedder::embed_text(std::string_view text) const {
  const auto& vocab = generator_.vocabulary();
  const int nc = static_cast<int>(vocab.colors.size());
  const int ns = static_cast<int>(vocab.shapes.size());
  const int nl = static_cast<int>(vocab.levels.size());
  Vector v = Vector::Zero(nc + ns + nl + 1);
  const std::string s(text);
  if (auto c = generator_.parse_color(s)) v[*c] = 1.0;
  if (auto sh = generator_.parse_shape(s)) v[nc + *sh] = 1.0;
  if (auto l = generator_.parse_level(s)) {
    // Neighbouring fill levels stay partially similar so nearest wins strictly.
    for (int k = 0; k < nl; ++k) {
      const double d = static_cast<double>(k - *l);
      v[nc + ns + k] = std::exp(-d * d / (2.0 * 0.6 * 0.6));
    }
  }
  v[nc + ns + nl] = 0.1;
  return make_semantic(std::move(v), Modality::Text);
}

std::string OracleSemanticEmbedder::identity() const {
  json j = generator_.spec();
  return "oracle-semantic(" + j.dump() + ")";
}

PooledPixelEmbedder::PooledPixelEmbedder(int grid) : grid_(grid) {
  if (grid < 1) throw ConfigError("pooled embedder grid must be positive");
}

VisualEmbedding PooledPixelEmbedder::embed(const Image& image) const {
  if (image.empty()) throw Error("cannot embed an empty image");
  if (image.width < grid_ || image.height < grid_) throw ShapeError("image smaller than the pooling grid");
  Vector v = Vector::Zero(grid_ * grid_ * 3);
  for (int gy = 0; gy < grid_; ++gy) {
    const int y0 = gy * image.height / grid_, y1 = (gy + 1) * image.height / grid_;
    for (int gx = 0; gx < grid_; ++gx) {
      const int x0 = gx * image.width / grid_, x1 = (gx + 1) * image.width / grid_;
      const double inv = 1.0 / (255.0 * (y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          for (int c = 0; c < 3; ++c) v[(gy * grid_ + gx) * 3 + c] += image.at(x, y, c) * inv;
    }
  }
  return VisualEmbedding{std::move(v)};
}

std::string PooledPixelEmbedder::identity() const { return "pooled-pixels(grid=" + std::to_string(grid_) + ")"; }

ConstantVisualEmbedder::ConstantVisualEmbedder(int dim) : dim_(dim) {}

VisualEmbedding ConstantVisualEmbedder::embed(const Image&) const { return VisualEmbedding{Vector::Ones(dim_)}; }

std::string ConstantVisualEmbedder::identity() const { return "constant-visual(d=" + std::to_string(dim_) + ")"; }

// ---------------------------------------------------------------------------
// Remote adapters

RemoteClient::RemoteClient(std::string base_url, double timeout_s)
    : base_url_(std::move(base_url)), timeout_s_(timeout_s) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

namespace {

// Splits "http://host:port/prefix" into ("http://host:port", "/prefix").
std::pair<std::string, std::string> split_url(const std::string& url) {
  auto scheme = url.find("://");
  auto path = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path == std::string::npos) return {url, ""};
  return {url.substr(0, path), url.substr(path)};
}

Vector json_vector(const json& j) {
  if (!j.is_array() || j.empty()) throw ParseError("embedding response is not a nonempty array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

json RemoteClient::post(const json& body) const {
  std::lock_guard lock(mutex_);
  auto [host, prefix] = split_url(base_url_);
  httplib::Client client(host);
  const auto secs = static_cast<time_t>(timeout_s_);
  const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  auto res = client.Post(prefix + "/embed", body.dump(), "application/json");
  if (!res) throw IoError("embedding service unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw IoError("embedding service returned HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("embedding service sent invalid JSON: ") + e.what());
  }
}

RemoteSemanticEmbedder::RemoteSemanticEmbedder(std::shared_ptr<RemoteClient> client) : client_(std::move(client)) {}

SemanticEmbedding RemoteSemanticEmbedder::embed_image(const Image& image) const {
  const auto png = encode_png(image);
  auto res = client_->post({{"kind", "image"}, {"png_base64", base64_encode(png)}});
  return make_semantic(json_vector(res.at("vector")), Modality::Image);
}

SemanticEmbedding RemoteSemanticEmbedder::embed_text(std::string_view text) const {
  auto res = client_->post({{"kind", "text"}, {"text", std::string(text)}});
  return make_semantic(json_vector(res.at("vector")), Modality::Text);
}

std::string RemoteSemanticEmbedder::identity() const { return "remote-semantic(" + client_->base_url() + ")"; }

RemoteVisualEmbedder::RemoteVisualEmbedder(std::shared_ptr<RemoteClient> client, int dim)
    : client_(std::move(client)), dim_(dim) {}

VisualEmbedding RemoteVisualEmbedder::embed(const Image& image) const {
  const auto png = encode_png(image);
  auto res = client_->post({{"kind", "visual"}, {"png_base64", base64_encode(png)}});
  Vector v = json_vector(res.at("vector"));
  if (v.size() != dim_) throw ShapeError("remote visual embedding has unexpected dimension");
  return VisualEmbedding{std::move(v)};
}

std::string RemoteVisualEmbedder::identity() const { return "remote-visual(" + client_->base_url() + ")"; }

RemoteTextEncoder::RemoteTextEncoder(std::shared_ptr<RemoteClient> client, int dim, int context_limit)
    : client_(std::move(client)), dim_(dim), context_limit_(context_limit) {}

TokenEmbeddingSequence RemoteTextEncoder::encode(std::string_view text) const {
  auto res = client_->post({{"kind", "tokens"}, {"text", std::string(text)}});
  const auto& rows = res.at("vectors");
  if (!rows.is_array() || rows.empty()) throw ParseError("token response must be a nonempty array");
  TokenEmbeddingSequence seq;
  seq.source_text = std::string(text);
  const auto n = std::min<std::size_t>(rows.size(), static_cast<std::size_t>(context_limit_));
  seq.truncated = rows.size() > n;
  seq.vectors.resize(static_cast<Eigen::Index>(n), dim_);
  for (std::size_t i = 0; i < n; ++i) {
    Vector v = json_vector(rows[i]);
    if (v.size() != dim_) throw ShapeError("remote token embedding has unexpected dimension");
    seq.vectors.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return seq;
}

std::string RemoteTextEncoder::identity() const { return "remote-text(" + client_->base_url() + ")"; }

// ---------------------------------------------------------------------------
// Cache

EmbeddingCache::EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

bool EmbeddingCache::get(const std::string& key, Vector& out) const {
  const auto path = dir_ / (to_hex(fnv1a(key)) + ".vec");
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n == 0 || n > (1u << 20)) return false;
  out.resize(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return static_cast<bool>(in);
}

void EmbeddingCache::put(const std::string& key, const Vector& v) const {
  std::string blob(sizeof(std::uint64_t) + static_cast<std::size_t>(v.size()) * sizeof(double), '\0');
  const std::uint64_t n = static_cast<std::uint64_t>(v.size());
  std::memcpy(blob.data(), &n, sizeof(n));
  std::memcpy(blob.data() + sizeof(n), v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
  write_file_atomic(dir_ / (to_hex(fnv1a(key)) + ".vec"), blob);
}

CachedSemanticEmbedder::CachedSemanticEmbedder(std::shared_ptr<const SemanticEmbedder> inner,
                                               std::shared_ptr<EmbeddingCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

SemanticEmbedding CachedSemanticEmbedder::embed_image(const Image& image) const {
  const auto key = inner_->identity() + "|image|" + to_hex(image_hash(image));
  Vector v;
  if (cache_->get(key, v)) return SemanticEmbedding{std::move(v), Modality::Image};
  auto e = inner_->embed_image(image);
  cache_->put(key, e.vector);
  return e;
}

SemanticEmbedding CachedSemanticEmbedder::embed_text(std::string_view text) const {
  const auto key = inner_->identity() + "|text|" + to_hex(fnv1a(text));
  Vector v;
  if (cache_->get(key, v)) return SemanticEmbedding{std::move(v), Modality::Text};
  auto e = inner_->embed_text(text);
  cache_->put(key, e.vector);
  return e;
}

TemplatedSemanticEmbedder::TemplatedSemanticEmbedder(std::shared_ptr<const SemanticEmbedder> inner,
                                                     std::string text_template)
    : inner_(std::move(inner)), template_(std::move(text_template)) {
  if (template_.find("{}") == std::string::npos) throw ConfigError("semantic text template must contain {}");
}

SemanticEmbedding TemplatedSemanticEmbedder::embed_text(std::string_view text) const {
  std::string s = template_;
  s.replace(s.find("{}"), 2, text);
  return inner_->embed_text(s);
}

std::string TemplatedSemanticEmbedder::identity() const { return inner_->identity() + "|template=" + template_; }

// ---------------------------------------------------------------------------
// Factories

std::shared_ptr<const TextEncoder> make_text_encoder(const json& config) {
  const auto kind = config.value("kind", std::string("hash"));
  if (kind == "hash")
    return std::make_shared<HashTextEncoder>(config.value("dim", 64), config.value("context_limit", 16),
                                             config.value("seed", std::uint64_t{0x7e47}));
  if (kind == "remote")
    return std::make_shared<RemoteTextEncoder>(std::make_shared<RemoteClient>(config.at("url").get<std::string>(),
                                                                              config.value("timeout_s", 30.0)),
                                               config.value("dim", 64), config.value("context_limit", 77));
  throw ConfigError("unknown text_encoder kind '" + kind + "'");
}

std::shared_ptr<const SemanticEmbedder> make_semantic_embedder(const json& config) {
  const auto kind = config.value("kind", std::string("hash"));
  std::shared_ptr<const SemanticEmbedder> e;
  if (kind == "oracle") {
    synthetic::SyntheticSpec spec;
    if (config.contains("synthetic")) spec = config.at("synthetic").get<synthetic::SyntheticSpec>();
    e = std::make_shared<OracleSemanticEmbedder>(spec);
  } else if (kind == "hash") {
    e = std::make_shared<HashSemanticEmbedder>(config.value("dim", 64), config.value("seed", std::uint64_t{0x5e11}));
  } else if (kind == "constant") {
    e = std::make_shared<ConstantSemanticEmbedder>(config.value("dim", 64), config.value("seed", std::uint64_t{0xc0}));
  } else if (kind == "remote") {
    e = std::make_shared<RemoteSemanticEmbedder>(
        std::make_shared<RemoteClient>(config.at("url").get<std::string>(), config.value("timeout_s", 30.0)));
  } else {
    throw ConfigError("unknown semantic embedder kind '" + kind + "'");
  }
  const auto tmpl = config.value("template", std::string("{}"));
  if (tmpl != "{}") e = std::make_shared<TemplatedSemanticEmbedder>(e, tmpl);
  if (config.contains("cache_dir"))
    e = std::make_shared<CachedSemanticEmbedder>(
        e, std::make_shared<EmbeddingCache>(config.at("cache_dir").get<std::string>()));
  return e;
}

std::shared_ptr<const VisualEmbedder> make_visual_embedder(const json& config) {
  const auto kind = config.value("kind", std::string("pooled"));
  if (kind == "pooled") return std::make_shared<PooledPixelEmbedder>(config.value("grid", 8));
  if (kind == "constant") return std::make_shared<ConstantVisualEmbedder>(config.value("dim", 16));
  if (kind == "remote")
    return std::make_shared<RemoteVisualEmbedder>(
        std::make_shared<RemoteClient>(config.at("url").get<std::string>(), config.value("timeout_s", 30.0)),
        config.at("dim").get<int>());
  throw ConfigError("unknown visual embedder kind '" + kind + "'");
}

EmbedderSet make_embedders(const json& config) {
  EmbedderSet set;
  set.text_encoder = make_text_encoder(config.value("text_encoder", json::object()));
  set.semantic = make_semantic_embedder(config.value("semantic", json::object()));
  set.visual = make_visual_embedder(config.value("visual", json::object()));
  return set;
}

}  // namespace stackdiff::embed
