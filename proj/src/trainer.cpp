#include "stackdiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "stackdiff/util.hpp"

namespace stackdiff::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train steps must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
  if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ConfigError("cond_dropout must be in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (n_steps < 1) throw ConfigError("N must be >= 1");
  if (image_size < 1 || image_size % codec.spatial_reduction != 0)
    throw ConfigError("image_size must be a positive multiple of the codec reduction");
  if (T < 1) throw ConfigError("T must be >= 1");
  if (zero_terminal_snr && parameterization == diffusion::Parameterization::Epsilon)
    throw ConfigError("zero terminal SNR requires v prediction");
  if (warmup_steps < 0 || checkpoint_every < 0 || eval_every < 0) throw ConfigError("step intervals must be >= 0");
  codec.validate();
  model.validate();
  if (model.in_channels != codec.latent_channels())
    throw ConfigError("denoiser in_channels (" + std::to_string(model.in_channels) + ") must equal codec latent channels (" +
                      std::to_string(codec.latent_channels()) + ")");
}

diffusion::NoiseSchedule TrainConfig::schedule() const {
  auto s = diffusion::make_schedule(schedule_kind, T);
  return zero_terminal_snr ? diffusion::rescale_zero_terminal_snr(s) : s;
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"grad_clip_norm", c.grad_clip_norm},
       {"cond_dropout", c.cond_dropout},
       {"batch_size", c.batch_size},
       {"N", c.n_steps},
       {"image_size", c.image_size},
       {"seed", c.seed},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"warmup_steps", c.warmup_steps},
       {"schedule", diffusion::to_string(c.schedule_kind)},
       {"T", c.T},
       {"zero_terminal_snr", c.zero_terminal_snr},
       {"parameterization", diffusion::to_string(c.parameterization)},
       {"positional_codes", c.conditioning.positional},
       {"positional_gain", c.conditioning.gain},
       {"codec", c.codec},
       {"model", c.model},
       {"embedders", c.embedders},
       {"checkpoint_every", c.checkpoint_every},
       {"eval_every", c.eval_every}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
  c.cond_dropout = j.value("cond_dropout", d.cond_dropout);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_steps = j.value("N", d.n_steps);
  c.image_size = j.value("image_size", d.image_size);
  c.seed = j.value("seed", d.seed);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.schedule_kind = diffusion::parse_schedule_kind(j.value("schedule", std::string("linear")));
  c.T = j.value("T", d.T);
  c.zero_terminal_snr = j.value("zero_terminal_snr", d.zero_terminal_snr);
  c.parameterization = diffusion::parse_parameterization(
      j.value("parameterization", std::string(c.zero_terminal_snr ? "v" : "epsilon")));
  c.conditioning.positional = j.value("positional_codes", d.conditioning.positional);
  c.conditioning.gain = j.value("positional_gain", d.conditioning.gain);
  if (j.contains("codec")) c.codec = j.at("codec").get<CodecConfig>();
  if (j.contains("model")) c.model = j.at("model").get<DenoiserConfig>();
  c.embedders = j.value("embedders", json::object());
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.eval_every = j.value("eval_every", d.eval_every);
}

double TrainLog::mean_loss(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > steps.size()) throw ConfigError("loss window out of range");
  double s = 0.0;
  for (std::size_t i = first; i < first + count; ++i) s += steps[i].loss;
  return s / static_cast<double>(count);
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& s : steps) {
    json j = {{"step", s.step},
              {"loss", s.loss},
              {"grad_norm", s.grad_norm},
              {"update_norm", s.update_norm},
              {"lr", s.learning_rate},
              {"dropped", s.dropped_conditions},
              {"wall_s", s.wall_s}};
    out += j.dump() + "\n";
  }
  for (const auto& e : events) out += e.dump() + "\n";
  return out;
}

TrainLog TrainLog::from_jsonl(const std::string& text) {
  TrainLog log;
  for (const auto& line : split_lines(text)) {
    if (trim(line).empty()) continue;
    const json j = json::parse(line);
    if (j.contains("event")) {
      log.events.push_back(j);
      continue;
    }
    StepRecord s;
    s.step = j.at("step").get<std::int64_t>();
    s.loss = j.at("loss").get<double>();
    s.grad_norm = j.at("grad_norm").get<double>();
    s.update_norm = j.at("update_norm").get<double>();
    s.learning_rate = j.at("lr").get<double>();
    s.dropped_conditions = j.at("dropped").get<int>();
    s.wall_s = j.at("wall_s").get<double>();
    log.steps.push_back(s);
  }
  return log;
}

std::vector<TrainingExample> prepare_examples(const std::vector<corpus::Article>& articles, const TrainConfig& config,
                                              const embed::TextEncoder& encoder, std::size_t* dropped) {
  const PatchCodec codec(config.codec);
  std::vector<TrainingExample> out;
  std::size_t bad = 0;
  for (const auto& a : articles) {
    bool ok = !a.images.empty() && a.images.size() == a.steps.size();
    for (const auto& img : a.images) ok = ok && !img.empty();
    if (!ok) {
      ++bad;
      continue;
    }
    corpus::Article sized = a;
    for (auto& img : sized.images)
      if (img.width != config.image_size || img.height != config.image_size)
        img = resize_nearest(img, config.image_size, config.image_size);
    const auto padded = corpus::normalize_length(sized, config.n_steps);
    std::vector<LatentGrid> grids;
    for (const auto& img : padded.images) grids.push_back(codec.encode(img));
    TrainingExample ex;
    ex.goal_id = a.goal_id;
    ex.latents = tile(grids);
    ex.conditioning = condition_texts(encoder, padded.goal, padded.steps, config.conditioning);
    ex.real_count = padded.real_count;
    out.push_back(std::move(ex));
  }
  if (dropped) *dropped = bad;
  return out;
}

namespace {

struct AdamState {
  std::vector<std::vector<double>> m, v;
};

std::map<std::string, std::vector<double>> export_adam(const Denoiser& model, const AdamState& adam) {
  std::map<std::string, std::vector<double>> out;
  const auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out["adam.m/" + entries[i].first] = adam.m[i];
    out["adam.v/" + entries[i].first] = adam.v[i];
  }
  return out;
}

AdamState init_adam(const Denoiser& model) {
  AdamState s;
  for (const auto& [_, var] : model.parameters().entries()) {
    s.m.emplace_back(var.size(), 0.0);
    s.v.emplace_back(var.size(), 0.0);
  }
  return s;
}

AdamState import_adam(const Denoiser& model, const std::map<std::string, std::vector<double>>& aux) {
  AdamState s = init_adam(model);
  const auto& entries = model.parameters().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto m = aux.find("adam.m/" + entries[i].first);
    auto v = aux.find("adam.v/" + entries[i].first);
    if (m == aux.end() || v == aux.end()) throw IntegrityError("checkpoint lacks optimizer state for " + entries[i].first);
    if (m->second.size() != s.m[i].size() || v->second.size() != s.v[i].size())
      throw IntegrityError("optimizer state for " + entries[i].first + " has the wrong size");
    s.m[i] = m->second;
    s.v[i] = v->second;
  }
  return s;
}

CheckpointMeta make_meta(const TrainConfig& config, std::int64_t step) {
  CheckpointMeta meta;
  meta.step = step;
  meta.schedule = config.schedule();
  meta.parameterization = config.parameterization;
  meta.extra = {{"train_config", config},
                {"codec", config.codec},
                {"conditioning", {{"positional", config.conditioning.positional}, {"gain", config.conditioning.gain}}},
                {"N", config.n_steps},
                {"image_size", config.image_size},
                {"embedders", config.embedders}};
  return meta;
}

void run(Denoiser& model, AdamState& adam, std::int64_t start, const std::vector<TrainingExample>& examples,
         const TrainConfig& config, const ConditioningSequence& null_cond, const TrainOptions& options, TrainLog& log) {
  const auto schedule = config.schedule();
  auto& entries = model.parameters().entries();
  const auto t_begin = std::chrono::steady_clock::now();

  for (std::int64_t step = start + 1; step <= config.steps; ++step) {
    Rng rng = make_rng(config.seed, {0xba7c4, static_cast<std::uint64_t>(step)});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<LatentStack> noisy;
    std::vector<const ConditioningSequence*> conds;
    std::vector<int> ts;
    std::vector<LatentStack> targets;
    int dropped = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& ex = examples[rng() % examples.size()];
      const int t = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(schedule.T));
      LatentStack eps = ex.latents;
      for (auto& v : eps.values) v = normal(rng);
      const auto& cond = drop_conditioning(ex.conditioning, null_cond, config.cond_dropout, rng);
      if (&cond == &null_cond) ++dropped;
      noisy.push_back(diffusion::add_noise(ex.latents, t, eps, schedule));
      targets.push_back(diffusion::training_target(ex.latents, eps, schedule.ab(t), config.parameterization));
      conds.push_back(&cond);
      ts.push_back(t);
    }
    std::vector<const LatentGrid*> zin, tin;
    for (const auto& z : noisy) zin.push_back(&z);
    for (const auto& z : targets) tin.push_back(&z);
    const nn::Var target_batch = to_batch(tin);

    model.parameters().zero_grad();
    nn::Var loss = nn::mse(model.forward(to_batch(zin), ts, conds), target_batch.value());
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        save_checkpoint(model, make_meta(config, step - 1), options.out_dir / "diverged.ckpt", export_adam(model, adam));
      }
      throw DivergenceError("non-finite loss at step " + std::to_string(step), step);
    }
    loss.backward();

    double sq = 0.0;
    for (auto& [_, var] : entries)
      for (double g : var.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = norm > config.grad_clip_norm ? config.grad_clip_norm / norm : 1.0;

    double lr = config.learning_rate;
    if (config.warmup_steps > 0 && step <= config.warmup_steps)
      lr *= static_cast<double>(step) / config.warmup_steps;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      nn::Var var = entries[i].second;
      auto& p = var.mutable_value();
      const auto& g = var.grad();
      auto& m = adam.m[i];
      auto& v = adam.v[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k] * clip;
        m[k] = config.adam_beta1 * m[k] + (1.0 - config.adam_beta1) * gk;
        v[k] = config.adam_beta2 * v[k] + (1.0 - config.adam_beta2) * gk * gk;
        p[k] *= 1.0 - lr * config.weight_decay;
        p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.adam_eps);
      }
    }

    StepRecord rec;
    rec.step = step;
    rec.loss = loss_value;
    rec.grad_norm = norm;
    rec.update_norm = norm * clip;
    rec.learning_rate = lr;
    rec.dropped_conditions = dropped;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    log.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);

    if (config.eval_every > 0 && options.eval && step % config.eval_every == 0) {
      json e = options.eval(model, step);
      log.events.push_back({{"event", "eval"}, {"step", step}, {"result", e}});
    }
    if (config.checkpoint_every > 0 && !options.out_dir.empty() && step % config.checkpoint_every == 0) {
      std::filesystem::create_directories(options.out_dir);
      save_checkpoint(model, make_meta(config, step), options.out_dir / ("step_" + std::to_string(step) + ".ckpt"),
                      export_adam(model, adam));
    }
  }
}

TrainResult finish(std::unique_ptr<Denoiser> model, const AdamState& adam, const TrainConfig& config, TrainLog log,
                   const TrainOptions& options) {
  TrainResult r;
  r.meta = make_meta(config, std::max<std::int64_t>(config.steps, 0));
  r.optimizer_state = export_adam(*model, adam);
  r.model = std::move(model);
  r.log = std::move(log);
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    save_result(r, options.out_dir / "model.ckpt");
    write_file_atomic(options.out_dir / "train_log.jsonl", r.log.to_jsonl());
  }
  return r;
}

std::vector<TrainingExample> checked_examples(const std::vector<corpus::Article>& articles, const TrainConfig& config,
                                              const embed::TextEncoder& encoder, TrainLog& log) {
  if (articles.empty()) throw ConfigError("training corpus is empty");
  if (encoder.dim() != config.model.cond_dim)
    throw ConfigError("text encoder width " + std::to_string(encoder.dim()) + " differs from model cond_dim " +
                      std::to_string(config.model.cond_dim));
  std::size_t dropped = 0;
  auto examples = prepare_examples(articles, config, encoder, &dropped);
  log.events.push_back({{"event", "data"}, {"articles", articles.size()}, {"usable", examples.size()}, {"dropped", dropped}});
  if (examples.empty()) throw ConfigError("no usable training articles");
  return examples;
}

}  // namespace

TrainResult train(const std::vector<corpus::Article>& articles, const TrainConfig& config,
                  const embed::TextEncoder& encoder, const TrainOptions& options) {
  config.validate();
  TrainLog log;
  log.events.push_back({{"event", "start"}, {"config", config}});
  const auto examples = checked_examples(articles, config, encoder, log);
  DenoiserConfig mc = config.model;
  mc.init_seed = config.seed;
  auto model = std::make_unique<Denoiser>(mc);
  AdamState adam = init_adam(*model);
  const auto null_cond = null_conditioning(encoder, config.conditioning);
  run(*model, adam, 0, examples, config, null_cond, options, log);
  return finish(std::move(model), adam, config, std::move(log), options);
}

TrainResult resume(Checkpoint checkpoint, const std::vector<corpus::Article>& articles, const TrainConfig& config,
                   const embed::TextEncoder& encoder, const TrainOptions& options) {
  config.validate();
  if (config_hash(config.model) != checkpoint.model->hash())
    throw ConfigError("checkpoint architecture hash " + checkpoint.model->hash() + " does not match config " +
                      config_hash(config.model));
  TrainLog log;
  json changes = json::array();
  if (checkpoint.meta.extra.contains("train_config")) {
    const json before = checkpoint.meta.extra.at("train_config");
    const json after = config;
    for (const auto& [key, value] : after.items())
      if (key != "steps" && (!before.contains(key) || before.at(key) != value))
        changes.push_back({{"key", key}, {"from", before.value(key, json())}, {"to", value}});
  }
  log.events.push_back({{"event", "resume"}, {"from_step", checkpoint.meta.step}, {"config_changes", changes}});
  const auto examples = checked_examples(articles, config, encoder, log);
  AdamState adam = import_adam(*checkpoint.model, checkpoint.aux);
  const auto null_cond = null_conditioning(encoder, config.conditioning);
  run(*checkpoint.model, adam, checkpoint.meta.step, examples, config, null_cond, options, log);
  return finish(std::move(checkpoint.model), adam, config, std::move(log), options);
}

void save_result(const TrainResult& result, const std::filesystem::path& path) {
  save_checkpoint(*result.model, result.meta, path, result.optimizer_state);
}

}  // namespace stackdiff::train
