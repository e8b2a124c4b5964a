#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "stackdiff/embedders.hpp"
#include "stackdiff/image.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff {

// Channel-first real array, C x H x W.
struct LatentGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  LatentGrid() = default;
  LatentGrid(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t size() const { return values.size(); }
  double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool same_shape(const LatentGrid& o) const { return channels == o.channels && height == o.height && width == o.width; }
  bool operator==(const LatentGrid&) const = default;
};

// N per-step latents stacked along the height axis: C x (N * H_l) x W.
struct LatentStack : LatentGrid {
  int n_steps = 1;

  LatentStack() = default;
  LatentStack(int c, int step_h, int w, int n, double fill = 0.0) : LatentGrid(c, step_h * n, w, fill), n_steps(n) {}

  int step_height() const { return n_steps > 0 ? height / n_steps : 0; }
  bool operator==(const LatentStack&) const = default;
};

LatentStack tile(const std::vector<LatentGrid>& latents);
std::vector<LatentGrid> untile(const LatentStack& stack, int n_steps);

std::string serialize_latent_stack(const LatentStack& stack);
LatentStack deserialize_latent_stack(std::string_view bytes);

// ---------------------------------------------------------------------------
// Codec

enum class CodecKind { Patch, PooledPatch };

// Patch: pixel rearrangement with factor r, H x W x 3 -> (3 r^2) x (H/r) x (W/r),
// exactly invertible. PooledPatch: average-pool by `pool` first, then patchify
// by r / pool; exactly invertible on images constant over pool x pool blocks.
struct CodecConfig {
  CodecKind kind = CodecKind::PooledPatch;
  int spatial_reduction = 8;
  int pool = 4;

  void validate() const;
  int patch() const { return kind == CodecKind::Patch ? spatial_reduction : spatial_reduction / pool; }
  int latent_channels() const { return 3 * patch() * patch(); }
};

void to_json(nlohmann::json& j, const CodecConfig& c);
void from_json(const nlohmann::json& j, CodecConfig& c);

class PatchCodec {
 public:
  explicit PatchCodec(CodecConfig config = {});
  const CodecConfig& config() const { return config_; }

  LatentGrid encode(const Image& image) const;
  Image decode(const LatentGrid& latent) const;
  LatentGrid empty_latent(int width, int height) const { return encode(empty_frame(width, height)); }

 private:
  CodecConfig config_;
};

// ---------------------------------------------------------------------------
// Conditioning

// Fixed sinusoidal code of the step index: even dims sin(i w_k), odd dims
// cos(i w_k), w_k = 10000^(-2k/d), times `gain`. Index 0 marks the goal.
Vector step_positional_code(int index, int dim, double gain = 1.0);

struct ConditioningSequence {
  RowMatrix vectors;          // one row per token
  std::vector<int> segments;  // 0 = goal, i = step i
  int n_steps = 0;

  int length() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }
  bool operator==(const ConditioningSequence& o) const {
    return segments == o.segments && n_steps == o.n_steps && vectors.rows() == o.vectors.rows() &&
           vectors.cols() == o.vectors.cols() && vectors == o.vectors;
  }
};

struct ConditioningOptions {
  bool positional = true;  // false reproduces the no-positional-code ablation
  double gain = 1.0;
};

ConditioningSequence build_conditioning(const embed::TokenEmbeddingSequence& goal,
                                        const std::vector<embed::TokenEmbeddingSequence>& steps,
                                        const ConditioningOptions& options = {});

// Encodes goal and step texts with `encoder` and assembles the sequence.
ConditioningSequence condition_texts(const embed::TextEncoder& encoder, const std::string& goal,
                                     const std::vector<std::string>& steps, const ConditioningOptions& options = {});

// Unconditional branch: the empty-string goal with no steps.
ConditioningSequence null_conditioning(const embed::TextEncoder& encoder, const ConditioningOptions& options = {});

// Returns `null_cond` with probability p, otherwise `cond`. Consumes exactly one draw.
const ConditioningSequence& drop_conditioning(const ConditioningSequence& cond, const ConditioningSequence& null_cond,
                                              double p, Rng& rng);

std::string serialize_conditioning(const ConditioningSequence& cond);
ConditioningSequence deserialize_conditioning(std::string_view bytes);

}  // namespace stackdiff
