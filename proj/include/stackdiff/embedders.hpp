#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "stackdiff/image.hpp"
#include "stackdiff/synthetic.hpp"

namespace stackdiff {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace stackdiff

namespace stackdiff::embed {

// Output of the conditioning text encoder: one d-dimensional row per token.
struct TokenEmbeddingSequence {
  RowMatrix vectors;
  std::string source_text;
  bool truncated = false;

  int length() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }
};

enum class Modality { Image, Text };

struct SemanticEmbedding {
  Vector vector;  // unit norm
  Modality modality = Modality::Text;
};

struct VisualEmbedding {
  Vector vector;
};

// Dot product of two unit vectors; throws ShapeError on dimension mismatch.
double semantic_similarity(const SemanticEmbedding& a, const SemanticEmbedding& b);

SemanticEmbedding make_semantic(Vector v, Modality modality);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TokenEmbeddingSequence encode(std::string_view text) const = 0;
  virtual int dim() const = 0;
  virtual int context_limit() const = 0;
  virtual std::string identity() const = 0;
};

// Frozen toy encoder: lowercase word tokens, each mapped to a seeded
// pseudo-random vector with a small within-text position term. The empty
// string (or text with no word characters) maps to a single null token.
class HashTextEncoder final : public TextEncoder {
 public:
  explicit HashTextEncoder(int dim = 64, int context_limit = 16, std::uint64_t seed = 0x7e47);
  TokenEmbeddingSequence encode(std::string_view text) const override;
  int dim() const override { return dim_; }
  int context_limit() const override { return context_limit_; }
  std::string identity() const override;

  static std::vector<std::string> tokenize(std::string_view text);

 private:
  Vector word_vector(std::string_view word) const;
  int dim_;
  int context_limit_;
  std::uint64_t seed_;
};

class SemanticEmbedder {
 public:
  virtual ~SemanticEmbedder() = default;
  virtual SemanticEmbedding embed_image(const Image& image) const = 0;
  virtual SemanticEmbedding embed_text(std::string_view text) const = 0;
  virtual std::string identity() const = 0;
};

class VisualEmbedder {
 public:
  virtual ~VisualEmbedder() = default;
  virtual VisualEmbedding embed(const Image& image) const = 0;
  virtual int dim() const = 0;
  virtual std::string identity() const = 0;
};

// Seeded hash of the input bytes to a pseudo-random unit vector.
class HashSemanticEmbedder final : public SemanticEmbedder {
 public:
  explicit HashSemanticEmbedder(int dim = 64, std::uint64_t seed = 0x5e11);
  SemanticEmbedding embed_image(const Image& image) const override;
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

// Every image maps to the same vector; texts are hashed. Pins GF/SF at chance.
class ConstantSemanticEmbedder final : public SemanticEmbedder {
 public:
  explicit ConstantSemanticEmbedder(int dim = 64, std::uint64_t seed = 0xc0);
  SemanticEmbedding embed_image(const Image& image) const override;
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override;

 private:
  HashSemanticEmbedder texts_;
  Vector constant_;
};

// Ground-truth embedder for the synthetic corpus. Texts are parsed for color,
// shape, and fill keywords; images are classified to the nearest clean
// rendering and embedded as the caption "<goal> <step>" of that rendering.
class OracleSemanticEmbedder final : public SemanticEmbedder {
 public:
  explicit OracleSemanticEmbedder(synthetic::SyntheticSpec spec);
  SemanticEmbedding embed_image(const Image& image) const override;
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override;

  std::string caption(const synthetic::Attributes& a) const;
  const synthetic::Generator& generator() const { return generator_; }

 private:
  synthetic::Generator generator_;
};

// Average-pooled RGB over a grid x grid partition, scaled to [0, 1].
class PooledPixelEmbedder final : public VisualEmbedder {
 public:
  explicit PooledPixelEmbedder(int grid = 8);
  VisualEmbedding embed(const Image& image) const override;
  int dim() const override { return grid_ * grid_ * 3; }
  std::string identity() const override;

 private:
  int grid_;
};

class ConstantVisualEmbedder final : public VisualEmbedder {
 public:
  explicit ConstantVisualEmbedder(int dim = 16);
  VisualEmbedding embed(const Image& image) const override;
  int dim() const override { return dim_; }
  std::string identity() const override;

 private:
  int dim_;
};

// Client for an external embedding service (CLIP-, DINO-, or encoder-role
// models run out of process). Requests are serialized over one connection.
//   POST {base_url}/embed  {"kind": "text"|"image"|"tokens", "text": ..., "png_base64": ...}
//   -> {"vector": [...]} or {"vectors": [[...], ...]}
class RemoteClient {
 public:
  RemoteClient(std::string base_url, double timeout_s = 30.0);
  nlohmann::json post(const nlohmann::json& body) const;
  const std::string& base_url() const { return base_url_; }

 private:
  std::string base_url_;
  double timeout_s_;
  mutable std::mutex mutex_;
};

class RemoteSemanticEmbedder final : public SemanticEmbedder {
 public:
  explicit RemoteSemanticEmbedder(std::shared_ptr<RemoteClient> client);
  SemanticEmbedding embed_image(const Image& image) const override;
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override;

 private:
  std::shared_ptr<RemoteClient> client_;
};

class RemoteVisualEmbedder final : public VisualEmbedder {
 public:
  RemoteVisualEmbedder(std::shared_ptr<RemoteClient> client, int dim);
  VisualEmbedding embed(const Image& image) const override;
  int dim() const override { return dim_; }
  std::string identity() const override;

 private:
  std::shared_ptr<RemoteClient> client_;
  int dim_;
};

class RemoteTextEncoder final : public TextEncoder {
 public:
  RemoteTextEncoder(std::shared_ptr<RemoteClient> client, int dim, int context_limit);
  TokenEmbeddingSequence encode(std::string_view text) const override;
  int dim() const override { return dim_; }
  int context_limit() const override { return context_limit_; }
  std::string identity() const override;

 private:
  std::shared_ptr<RemoteClient> client_;
  int dim_;
  int context_limit_;
};

// On-disk cache of embedding vectors keyed by (embedder identity, content hash).
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir);
  bool get(const std::string& key, Vector& out) const;
  void put(const std::string& key, const Vector& v) const;

 private:
  std::filesystem::path dir_;
};

class CachedSemanticEmbedder final : public SemanticEmbedder {
 public:
  CachedSemanticEmbedder(std::shared_ptr<const SemanticEmbedder> inner, std::shared_ptr<EmbeddingCache> cache);
  SemanticEmbedding embed_image(const Image& image) const override;
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override { return inner_->identity(); }

 private:
  std::shared_ptr<const SemanticEmbedder> inner_;
  std::shared_ptr<EmbeddingCache> cache_;
};

// Wraps text with a prompt template ("{}" is replaced by the text) before
// delegating. The default template is the raw text.
class TemplatedSemanticEmbedder final : public SemanticEmbedder {
 public:
  TemplatedSemanticEmbedder(std::shared_ptr<const SemanticEmbedder> inner, std::string text_template);
  SemanticEmbedding embed_image(const Image& image) const override { return inner_->embed_image(image); }
  SemanticEmbedding embed_text(std::string_view text) const override;
  std::string identity() const override;

 private:
  std::shared_ptr<const SemanticEmbedder> inner_;
  std::string template_;
};

// Config-driven construction. Each section is {"kind": ..., params...}.
//   text_encoder: hash {dim, context_limit, seed} | remote {url, dim, context_limit}
//   semantic:     oracle {synthetic: SyntheticSpec} | hash {dim, seed} | constant {dim, seed} | remote {url}
//                 plus optional "template" and "cache_dir"
//   visual:       pooled {grid} | constant {dim} | remote {url, dim}
std::shared_ptr<const TextEncoder> make_text_encoder(const nlohmann::json& config);
std::shared_ptr<const SemanticEmbedder> make_semantic_embedder(const nlohmann::json& config);
std::shared_ptr<const VisualEmbedder> make_visual_embedder(const nlohmann::json& config);

struct EmbedderSet {
  std::shared_ptr<const TextEncoder> text_encoder;
  std::shared_ptr<const SemanticEmbedder> semantic;
  std::shared_ptr<const VisualEmbedder> visual;
};

EmbedderSet make_embedders(const nlohmann::json& config);

}  // namespace stackdiff::embed
