#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stackdiff/corpus.hpp"
#include "stackdiff/denoiser.hpp"
#include "stackdiff/diffusion.hpp"
#include "stackdiff/error.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/stacking.hpp"

namespace stackdiff::train {

struct TrainConfig {
  int steps = 14000;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double cond_dropout = 0.05;
  int batch_size = 16;
  int n_steps = 6;
  int image_size = 48;  // images are resized to image_size x image_size
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 0;  // linear ramp from 0; 0 disables

  diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::Linear;
  int T = 1000;
  bool zero_terminal_snr = true;
  diffusion::Parameterization parameterization = diffusion::Parameterization::V;

  ConditioningOptions conditioning;
  CodecConfig codec;
  DenoiserConfig model;
  nlohmann::json embedders = nlohmann::json::object();

  int checkpoint_every = 0;  // 0 = only at the end
  int eval_every = 0;

  void validate() const;
  diffusion::NoiseSchedule schedule() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;    // before clipping
  double update_norm = 0.0;  // after clipping
  double learning_rate = 0.0;
  int dropped_conditions = 0;
  double wall_s = 0.0;
};

// Append-only record of a run: one entry per optimizer step plus free-form events.
struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<nlohmann::json> events;

  double mean_loss(std::size_t first, std::size_t count) const;
  std::string to_jsonl() const;
  static TrainLog from_jsonl(const std::string& text);
};

struct TrainResult {
  std::unique_ptr<Denoiser> model;
  CheckpointMeta meta;
  std::map<std::string, std::vector<double>> optimizer_state;
  TrainLog log;
};

// Article prepared for training: tiled latents and assembled conditioning.
struct TrainingExample {
  std::string goal_id;
  LatentStack latents;
  ConditioningSequence conditioning;
  int real_count = 0;
};

std::vector<TrainingExample> prepare_examples(const std::vector<corpus::Article>& articles, const TrainConfig& config,
                                              const embed::TextEncoder& encoder, std::size_t* dropped = nullptr);

using EvalHook = std::function<nlohmann::json(const Denoiser& model, std::int64_t step)>;

struct TrainOptions {
  std::filesystem::path out_dir;  // empty = keep everything in memory
  EvalHook eval;
  std::function<void(const StepRecord&)> on_step;
};

TrainResult train(const std::vector<corpus::Article>& articles, const TrainConfig& config,
                  const embed::TextEncoder& encoder, const TrainOptions& options = {});

// Continues a run from `checkpoint` up to config.steps total optimizer steps.
TrainResult resume(Checkpoint checkpoint, const std::vector<corpus::Article>& articles, const TrainConfig& config,
                   const embed::TextEncoder& encoder, const TrainOptions& options = {});

void save_result(const TrainResult& result, const std::filesystem::path& path);

// Thrown when the loss stops being finite; carries the step it happened at.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::int64_t step) : Error(message, "divergence"), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace stackdiff::train
