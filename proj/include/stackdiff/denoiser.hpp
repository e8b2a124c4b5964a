#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackdiff/diffusion.hpp"
#include "stackdiff/nn/layers.hpp"
#include "stackdiff/stacking.hpp"

namespace stackdiff {

struct DenoiserConfig {
  int in_channels = 12;
  int base_channels = 32;
  std::vector<int> multipliers{1, 2, 4};
  int blocks_per_scale = 1;
  std::vector<int> attention_scales{1, 2};  // indices into multipliers
  int cond_dim = 64;
  int context_dim = 64;
  int time_embed_dim = 64;
  int heads = 4;
  int groups = 8;
  std::uint64_t init_seed = 0;

  void validate() const;
  int scales() const { return static_cast<int>(multipliers.size()); }
  bool attends_at(int scale) const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Stable hex digest of the architecture-defining fields.
std::string config_hash(const DenoiserConfig& config);

// Sinusoidal embedding of the integer timestep: first half sines, second half
// cosines, frequencies exp(-ln(10000) k / (dim/2)).
Vector timestep_embedding(int t, int dim);

// Converts between channel-first latents and the NHWC batch tensors the network uses.
nn::Var to_batch(const std::vector<const LatentGrid*>& latents);
LatentStack from_batch(const nn::Var& batch, int index, int n_steps);

// Pads conditioning sequences to a common length. Returns [B, L, d] and the real lengths.
std::pair<nn::Var, std::vector<int>> pack_conditioning(const std::vector<const ConditioningSequence*>& conds, int dim);

// Conditional U-Net over tiled latents. Convolutions and attention carry all
// parameters, so any step count whose tiled height fits is accepted.
class Denoiser final : public diffusion::Predictor {
 public:
  explicit Denoiser(DenoiserConfig config);

  const DenoiserConfig& config() const { return config_; }
  nn::ParameterStore& parameters() { return params_; }
  const nn::ParameterStore& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }
  std::string hash() const { return config_hash(config_); }

  // z: [B, H, W, C]; one timestep and one conditioning sequence per sample.
  nn::Var forward(const nn::Var& z, const std::vector<int>& t, const std::vector<const ConditioningSequence*>& cond) const;

  std::vector<LatentStack> predict_batch(const std::vector<const LatentStack*>& z, const std::vector<int>& t,
                                         const std::vector<const ConditioningSequence*>& cond) const;
  LatentStack predict(const LatentStack& z_t, int t, const ConditioningSequence& cond) const override;
  // Equal conditionings are evaluated once, so both results match predict() exactly.
  std::pair<LatentStack, LatentStack> predict_pair(const LatentStack& z_t, int t, const ConditioningSequence& cond,
                                                   const ConditioningSequence& uncond) const override;

  // Copies values for every parameter present in `named` (shapes must agree).
  // Returns the number of tensors assigned.
  std::size_t import_parameters(const std::map<std::string, std::vector<double>>& named);

 private:
  struct Level {
    std::vector<nn::ResBlock> down_blocks;
    std::vector<nn::SpatialTransformer> down_attn;
    nn::Conv2d downsample;
    std::vector<nn::ResBlock> up_blocks;
    std::vector<nn::SpatialTransformer> up_attn;
    nn::Conv2d upsample_conv;
  };

  DenoiserConfig config_;
  nn::ParameterStore params_;
  nn::Linear time_in_, time_out_;
  nn::Linear ctx_in_, ctx_out_;
  nn::LayerNorm ctx_norm_;
  nn::MultiHeadAttention ctx_attn_;
  nn::Conv2d conv_in_;
  std::vector<Level> levels_;
  nn::ResBlock mid_block_;
  nn::SpatialTransformer mid_attn_;
  nn::GroupNorm out_norm_;
  nn::Conv2d conv_out_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// File layout (little-endian):
//   4 bytes  magic "SDCK"
//   u32      format version (1)
//   u64      header length in bytes
//   header   UTF-8 JSON: {config, config_hash, step, schedule, parameterization,
//            extra, tensors: [{name, shape, offset, count}], payload_fnv1a}
//   payload  float64 values of every tensor, concatenated in header order

struct CheckpointMeta {
  std::int64_t step = 0;
  diffusion::NoiseSchedule schedule;
  diffusion::Parameterization parameterization = diffusion::Parameterization::V;
  nlohmann::json extra = nlohmann::json::object();  // codec, conditioning options, train config, ...
};

struct Checkpoint {
  std::unique_ptr<Denoiser> model;
  CheckpointMeta meta;
  std::map<std::string, std::vector<double>> aux;  // optimizer state and other named blobs
};

void save_checkpoint(const Denoiser& model, const CheckpointMeta& meta, const std::filesystem::path& path,
                     const std::map<std::string, std::vector<double>>& aux = {});

// Verifies magic, payload checksum, header/config hash consistency, and that
// every tensor matches the architecture. When `expected` is given its hash
// must equal the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path, const DenoiserConfig* expected = nullptr);

}  // namespace stackdiff
