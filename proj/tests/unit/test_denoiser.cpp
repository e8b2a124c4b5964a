#include <cmath>
#include <fstream>

#include "doctest.h"
#include "stackdiff/denoiser.hpp"
#include "stackdiff/embedders.hpp"
#include "stackdiff/error.hpp"
#include "stackdiff/nn/ops.hpp"
#include "test_support.hpp"

using namespace stackdiff;

namespace {

LatentStack noise_stack(int c, int h, int w, int n, std::uint64_t seed) {
  LatentStack s(c, h, w, n);
  s.values = testing::normal_values(s.size(), seed);
  return s;
}

ConditioningSequence cond_for(const std::string& goal, const std::vector<std::string>& steps) {
  embed::HashTextEncoder enc(8);
  return condition_texts(enc, goal, steps);
}

double max_abs_diff(const LatentStack& a, const LatentStack& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

}  // namespace

TEST_CASE("output matches the input shape for several step counts") {
  Denoiser net(testing::tiny_denoiser_config());
  for (int n : {1, 3, 6}) {
    auto z = noise_stack(12, 4, 4, n, static_cast<std::uint64_t>(n));
    std::vector<std::string> steps(static_cast<std::size_t>(n), "do it");
    auto out = net.predict(z, 10, cond_for("goal", steps));
    CHECK(out.channels == 12);
    CHECK(out.height == 4 * n);
    CHECK(out.width == 4);
    CHECK(out.n_steps == n);
    for (double v : out.values) CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS(net.predict(noise_stack(5, 4, 4, 1, 1), 1, cond_for("g", {})), ShapeError);
  embed::HashTextEncoder wide(16);
  CHECK_THROWS_AS(net.predict(noise_stack(12, 4, 4, 1, 1), 1, condition_texts(wide, "g", {})), ShapeError);
}

TEST_CASE("construction is deterministic and parameter count is stable") {
  auto cfg = testing::tiny_denoiser_config();
  Denoiser a(cfg), b(cfg);
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.parameter_count() < 10000);
  for (std::size_t i = 0; i < a.parameters().entries().size(); ++i)
    CHECK(a.parameters().entries()[i].second.value() == b.parameters().entries()[i].second.value());
  auto z = noise_stack(12, 4, 4, 3, 2);
  auto c = cond_for("goal", {"a", "b", "c"});
  CHECK(a.predict(z, 5, c) == b.predict(z, 5, c));

  cfg.init_seed = 4;
  Denoiser other(cfg);
  CHECK(other.parameter_count() == a.parameter_count());
  CHECK(other.hash() == a.hash());
  cfg.base_channels = 8;
  CHECK(config_hash(cfg) != a.hash());
}

TEST_CASE("predictions depend on conditioning and timestep") {
  Denoiser net(testing::tiny_denoiser_config());
  auto z = noise_stack(12, 4, 4, 3, 3);
  auto c1 = cond_for("red circle", {"fill the bottom quarter", "fill the bottom half", "fill it to the top"});
  auto c2 = cond_for("blue square", {"fill the bottom quarter", "fill the bottom half", "fill it to the top"});
  CHECK(max_abs_diff(net.predict(z, 10, c1), net.predict(z, 10, c2)) > 1e-8);
  CHECK(max_abs_diff(net.predict(z, 10, c1), net.predict(z, 90, c1)) > 1e-8);

  auto [cond, uncond] = net.predict_pair(z, 10, c1, c2);
  CHECK(max_abs_diff(cond, net.predict(z, 10, c1)) <= 1e-12);
  CHECK(max_abs_diff(uncond, net.predict(z, 10, c2)) <= 1e-12);
  auto [same_c, same_u] = net.predict_pair(z, 10, c1, cond_for("red circle", {"fill the bottom quarter", "fill the bottom half", "fill it to the top"}));
  CHECK(same_c == net.predict(z, 10, c1));
  CHECK(same_u == same_c);
}

TEST_CASE("batched and single predictions agree") {
  Denoiser net(testing::tiny_denoiser_config());
  auto z1 = noise_stack(12, 4, 4, 2, 5), z2 = noise_stack(12, 4, 4, 2, 6);
  auto c1 = cond_for("one", {"a", "b"}), c2 = cond_for("two words here", {"c", "d e f"});
  auto batch = net.predict_batch({&z1, &z2}, {7, 40}, {&c1, &c2});
  REQUIRE(batch.size() == 2);
  CHECK(max_abs_diff(batch[0], net.predict(z1, 7, c1)) <= 1e-10);
  CHECK(max_abs_diff(batch[1], net.predict(z2, 40, c2)) <= 1e-10);
}

TEST_CASE("timestep embedding layout") {
  auto e = timestep_embedding(0, 8);
  REQUIRE(e.size() == 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(e[k] == 0.0);
    CHECK(e[k + 4] == 1.0);
  }
  auto e5 = timestep_embedding(5, 8);
  CHECK(e5[0] == doctest::Approx(std::sin(5.0)));
  CHECK(e5[5] == doctest::Approx(std::cos(5.0 * std::exp(-std::log(10000.0) / 4.0))));
  CHECK_THROWS_AS(timestep_embedding(1, 7), ConfigError);
}

TEST_CASE("analytic gradients match central differences") {
  Denoiser net(testing::tiny_denoiser_config());
  REQUIRE(net.parameter_count() <= 10000);
  // Move away from the initial point so no parameter sits in a flat spot.
  Rng jitter(11);
  std::normal_distribution<double> d(0.0, 0.05);
  for (const auto& entry : net.parameters().entries()) {
    auto var = entry.second;
    for (auto& v : var.mutable_value()) v += d(jitter);
  }

  auto z = noise_stack(12, 4, 4, 2, 7);
  auto target = noise_stack(12, 4, 4, 2, 8);
  auto cond = cond_for("goal text", {"first", "second"});
  auto loss_at = [&] {
    auto x = to_batch({&z});
    return nn::mse(net.forward(x, {30}, {&cond}), target.values);
  };

  net.parameters().zero_grad();
  auto loss = loss_at();
  loss.backward();

  Rng pick(12);
  const auto& entries = net.parameters().entries();
  std::uniform_int_distribution<std::size_t> which(0, entries.size() - 1);
  int checked = 0, attempts = 0;
  const double h = 1e-4;
  while (checked < 24 && attempts < 2000) {
    ++attempts;
    auto var = entries[which(pick)].second;
    std::uniform_int_distribution<std::size_t> idx(0, var.size() - 1);
    const std::size_t i = idx(pick);
    const double analytic = var.grad().empty() ? 0.0 : var.grad()[i];
    if (std::abs(analytic) < 1e-6) continue;
    double& p = var.mutable_value()[i];
    const double saved = p;
    double up, down;
    {
      nn::NoGradGuard guard;
      p = saved + h;
      up = loss_at().item();
      p = saved - h;
      down = loss_at().item();
    }
    p = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    INFO("analytic ", analytic, " numeric ", numeric);
    CHECK(rel <= 1e-3);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("checkpoints round trip and detect damage") {
  testing::TempDir dir("ckpt");
  auto cfg = testing::tiny_denoiser_config();
  Denoiser net(cfg);
  CheckpointMeta meta;
  meta.step = 42;
  meta.schedule = diffusion::rescale_zero_terminal_snr(diffusion::make_schedule(diffusion::ScheduleKind::Linear, 10));
  meta.extra = {{"note", "x"}};
  const auto path = dir / "model.ckpt";
  save_checkpoint(net, meta, path, {{"adam.m", {1.0, 2.0}}});

  auto ck = load_checkpoint(path, &cfg);
  CHECK(ck.meta.step == 42);
  CHECK(ck.meta.schedule == meta.schedule);
  CHECK(ck.meta.extra == meta.extra);
  CHECK(ck.aux.at("adam.m") == std::vector<double>{1.0, 2.0});
  auto z = noise_stack(12, 4, 4, 3, 9);
  auto c = cond_for("g", {"a", "b", "c"});
  CHECK(ck.model->predict(z, 3, c) == net.predict(z, 3, c));

  auto other = cfg;
  other.base_channels = 8;
  CHECK_THROWS_AS(load_checkpoint(path, &other), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

  auto bytes = read_file(path);
  auto flipped = bytes;
  flipped[flipped.size() - 3] = static_cast<char>(flipped[flipped.size() - 3] ^ 0x10);
  write_file_atomic(dir / "flipped.ckpt", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "flipped.ckpt"), IntegrityError);
  write_file_atomic(dir / "short.ckpt", bytes.substr(0, 10));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), ParseError);
}

TEST_CASE("parameter import copies matching tensors") {
  Denoiser a(testing::tiny_denoiser_config());
  auto cfg = testing::tiny_denoiser_config();
  cfg.init_seed = 9;
  Denoiser b(cfg);
  std::map<std::string, std::vector<double>> named;
  for (const auto& [name, var] : a.parameters().entries()) named[name].assign(var.value().begin(), var.value().end());
  CHECK(b.import_parameters(named) == a.parameters().entries().size());
  auto z = noise_stack(12, 4, 4, 1, 10);
  auto c = cond_for("g", {"a"});
  CHECK(a.predict(z, 2, c) == b.predict(z, 2, c));
  named.begin()->second.pop_back();
  CHECK_THROWS_AS(b.import_parameters(named), ShapeError);
}
