#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "stackdiff/synthetic.hpp"
#include "stackdiff/trainer.hpp"
#include "test_support.hpp"

using namespace stackdiff;
using namespace stackdiff::train;

namespace {

std::vector<corpus::Article> small_corpus(int articles = 12) {
  synthetic::SyntheticSpec spec;
  spec.articles = articles;
  spec.image_size = 16;
  spec.block = 2;
  return synthetic::generate_synthetic_corpus(spec, 5);
}

TrainConfig small_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  c.n_steps = 3;
  c.image_size = 16;
  c.T = 20;
  c.seed = 21;
  c.model = testing::tiny_denoiser_config(12, 8);
  return c;
}

const embed::HashTextEncoder& encoder() {
  static embed::HashTextEncoder enc(8);
  return enc;
}

bool same_parameters(const Denoiser& a, const Denoiser& b) {
  const auto& x = a.parameters().entries();
  const auto& y = b.parameters().entries();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].second.value() != y[i].second.value()) return false;
  return true;
}

}  // namespace

TEST_CASE("examples are tiled and conditioned per article") {
  auto arts = small_corpus(4);
  auto cfg = small_config(1);
  auto ex = prepare_examples(arts, cfg, encoder());
  REQUIRE(ex.size() == 4);
  CHECK(ex[0].latents.n_steps == 3);
  CHECK(ex[0].latents.channels == 12);
  CHECK(ex[0].latents.height == 6);
  CHECK(ex[0].conditioning.n_steps == 3);
  CHECK(ex[0].real_count == 3);
  CHECK(ex[0].goal_id == arts[0].goal_id);
  CHECK(ex[0].conditioning == condition_texts(encoder(), arts[0].goal, arts[0].steps, cfg.conditioning));
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto arts = small_corpus();
  auto a = train::train(arts, small_config(4), encoder());
  auto b = train::train(arts, small_config(4), encoder());
  CHECK(same_parameters(*a.model, *b.model));
  REQUIRE(a.log.steps.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.log.steps[i].loss == b.log.steps[i].loss);

  auto cfg = small_config(4);
  cfg.seed = 22;
  auto c = train::train(arts, cfg, encoder());
  CHECK_FALSE(same_parameters(*a.model, *c.model));
}

TEST_CASE("zero steps returns the initial model") {
  auto arts = small_corpus();
  auto cfg = small_config(0);
  auto r = train::train(arts, cfg, encoder());
  auto init = cfg.model;
  init.init_seed = cfg.seed;
  Denoiser fresh(init);
  CHECK(same_parameters(*r.model, fresh));
  CHECK(r.log.steps.empty());
  CHECK(r.meta.step == 0);
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  testing::TempDir dir("resume");
  auto arts = small_corpus();
  auto whole = train::train(arts, small_config(6), encoder());

  auto first = train::train(arts, small_config(3), encoder());
  save_result(first, dir / "half.ckpt");
  auto ck = load_checkpoint(dir / "half.ckpt");
  auto rest = resume(std::move(ck), arts, small_config(6), encoder());
  CHECK(same_parameters(*whole.model, *rest.model));
  CHECK(rest.meta.step == 6);
  REQUIRE(rest.log.steps.size() == 3);
  CHECK(rest.log.steps.back().loss == whole.log.steps.back().loss);

  auto mismatched = small_config(6);
  mismatched.model.base_channels = 8;
  CHECK_THROWS_AS(resume(load_checkpoint(dir / "half.ckpt"), arts, mismatched, encoder()), ConfigError);
}

TEST_CASE("gradient clipping bounds the applied update norm") {
  auto arts = small_corpus();
  auto cfg = small_config(5);
  cfg.grad_clip_norm = 1e-3;
  auto r = train::train(arts, cfg, encoder());
  for (const auto& s : r.log.steps) {
    CHECK(s.update_norm <= cfg.grad_clip_norm * (1 + 1e-12));
    CHECK(s.grad_norm >= s.update_norm);
  }
}

TEST_CASE("warmup ramps the learning rate") {
  auto arts = small_corpus();
  auto cfg = small_config(4);
  cfg.warmup_steps = 4;
  auto r = train::train(arts, cfg, encoder());
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.log.steps[i].learning_rate == doctest::Approx(cfg.learning_rate * (i + 1) / 4.0));
}

TEST_CASE("conditioning dropout rate matches the configured probability") {
  auto arts = small_corpus();
  auto cfg = small_config(100);
  cfg.batch_size = 10;
  cfg.cond_dropout = 0.3;
  cfg.model.base_channels = 2;
  cfg.model.heads = 1;
  cfg.model.groups = 1;
  int dropped = 0;
  auto r = train::train(arts, cfg, encoder());
  for (const auto& s : r.log.steps) dropped += s.dropped_conditions;
  // 1000 Bernoulli(0.3) draws: four standard deviations is about 0.058.
  CHECK(std::abs(dropped / 1000.0 - 0.3) < 0.06);
}

TEST_CASE("divergence is reported with its step") {
  auto arts = small_corpus();
  auto cfg = small_config(10);
  cfg.learning_rate = 1e200;
  cfg.weight_decay = 0.0;
  try {
    train::train(arts, cfg, encoder());
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() >= 2);
    CHECK(e.step() <= 10);
  }
}

TEST_CASE("config validation and json round trip") {
  auto cfg = small_config(3);
  nlohmann::json j = cfg;
  auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  auto bad = cfg;
  bad.model.in_channels = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.parameterization = diffusion::Parameterization::Epsilon;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.image_size = 20;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(train::train({}, cfg, encoder()), ConfigError);
  embed::HashTextEncoder wide(16);
  CHECK_THROWS_AS(train::train(small_corpus(), cfg, wide), ConfigError);
}

TEST_CASE("train log jsonl round trip") {
  auto r = train::train(small_corpus(), small_config(3), encoder());
  r.log.events.push_back({{"event", "note"}});
  auto back = TrainLog::from_jsonl(r.log.to_jsonl());
  REQUIRE(back.steps.size() == 3);
  CHECK(back.steps[1].loss == r.log.steps[1].loss);
  CHECK(back.events == r.log.events);
  CHECK(back.events.back() == nlohmann::json{{"event", "note"}});
  CHECK(r.log.mean_loss(0, 3) == doctest::Approx((r.log.steps[0].loss + r.log.steps[1].loss + r.log.steps[2].loss) / 3));
  CHECK_THROWS_AS(r.log.mean_loss(2, 5), ConfigError);
}

TEST_CASE("outputs land in the run directory") {
  testing::TempDir dir("run");
  auto cfg = small_config(4);
  cfg.checkpoint_every = 2;
  cfg.eval_every = 2;
  TrainOptions opts;
  opts.out_dir = dir.path();
  int evals = 0;
  opts.eval = [&](const Denoiser&, std::int64_t step) {
    ++evals;
    return nlohmann::json{{"step", step}};
  };
  auto r = train::train(small_corpus(), cfg, encoder(), opts);
  CHECK(evals == 2);
  CHECK(std::filesystem::exists(dir / "model.ckpt"));
  CHECK(std::filesystem::exists(dir / "step_2.ckpt"));
  CHECK(std::filesystem::exists(dir / "train_log.jsonl"));
  CHECK(std::count_if(r.log.events.begin(), r.log.events.end(), [](const nlohmann::json& e) { return e.at("event") == "eval"; }) == 2);
  CHECK(load_checkpoint(dir / "model.ckpt").meta.step == 4);
}
