#include "stackdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "stackdiff/error.hpp"

namespace stackdiff::diffusion {

using nlohmann::json;

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }
std::string to_string(Parameterization p) { return p == Parameterization::V ? "v" : "epsilon"; }

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

Parameterization parse_parameterization(const std::string& s) {
  if (s == "v") return Parameterization::V;
  if (s == "epsilon" || s == "eps") return Parameterization::Epsilon;
  throw ConfigError("unknown parameterization '" + s + "'");
}

double NoiseSchedule::ab(int t) const {
  if (t < 1 || t > T) throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

void to_json(json& j, const NoiseSchedule& s) {
  j = {{"kind", to_string(s.kind)}, {"T", s.T}, {"zero_terminal_snr", s.zero_terminal_snr}, {"alpha_bar", s.alpha_bar}};
}

void from_json(const json& j, NoiseSchedule& s) {
  s.kind = parse_schedule_kind(j.at("kind").get<std::string>());
  s.T = j.at("T").get<int>();
  s.zero_terminal_snr = j.at("zero_terminal_snr").get<bool>();
  s.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
  if (static_cast<int>(s.alpha_bar.size()) != s.T) throw ParseError("schedule alpha_bar length differs from T");
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  if (kind == ScheduleKind::Linear) {
    const double scale = 1000.0 / T;
    const double b0 = 1e-4 * scale, b1 = 0.02 * scale;
    for (int i = 0; i < T; ++i) {
      const double beta = T == 1 ? b0 : b0 + (b1 - b0) * i / (T - 1);
      prod *= 1.0 - std::min(beta, 0.999);
      s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
  } else {
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / T + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 1; i <= T; ++i) {
      const double beta = std::min(1.0 - f(i) / f(i - 1), 0.999);
      prod *= 1.0 - beta;
      s.alpha_bar[static_cast<std::size_t>(i - 1)] = prod;
    }
  }
  return s;
}

NoiseSchedule rescale_zero_terminal_snr(const NoiseSchedule& schedule) {
  if (schedule.T < 1 || schedule.alpha_bar.empty()) throw ConfigError("empty schedule");
  if (!(schedule.alpha_bar.front() < 1.0)) throw ConfigError("rescale requires alpha_bar_1 < 1");
  NoiseSchedule out = schedule;
  out.zero_terminal_snr = true;
  if (schedule.alpha_bar.back() == 0.0) return out;
  const double first = std::sqrt(schedule.alpha_bar.front());
  const double last = std::sqrt(schedule.alpha_bar.back());
  if (!(first > last)) throw ConfigError("cannot rescale a constant schedule");
  for (auto& a : out.alpha_bar) {
    const double s = (std::sqrt(a) - last) * first / (first - last);
    a = s * s;
  }
  return out;
}

double snr(const NoiseSchedule& schedule, int t) {
  const double a = schedule.ab(t);
  if (a == 1.0) return std::numeric_limits<double>::infinity();
  return a / (1.0 - a);
}

namespace {

void require_same(const LatentGrid& a, const LatentGrid& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": latent shapes differ");
}

// out = ca * a + cb * b elementwise, keeping a's stack metadata.
LatentStack affine(const LatentStack& a, double ca, const LatentStack& b, double cb) {
  LatentStack out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = ca * a.values[i] + cb * b.values[i];
  return out;
}

}  // namespace

LatentStack add_noise(const LatentStack& z, int t, const LatentStack& eps, const NoiseSchedule& schedule) {
  require_same(z, eps, "add_noise");
  const double a = schedule.ab(t);
  return affine(z, std::sqrt(a), eps, std::sqrt(1.0 - a));
}

LatentStack v_target(const LatentStack& z, const LatentStack& eps, double ab) {
  require_same(z, eps, "v_target");
  return affine(eps, std::sqrt(ab), z, -std::sqrt(1.0 - ab));
}

LatentStack eps_from_v(const LatentStack& z_t, const LatentStack& v, double ab) {
  require_same(z_t, v, "eps_from_v");
  return affine(z_t, std::sqrt(1.0 - ab), v, std::sqrt(ab));
}

LatentStack x0_from_v(const LatentStack& z_t, const LatentStack& v, double ab) {
  require_same(z_t, v, "x0_from_v");
  return affine(z_t, std::sqrt(ab), v, -std::sqrt(1.0 - ab));
}

LatentStack x0_from_eps(const LatentStack& z_t, const LatentStack& eps, double ab) {
  require_same(z_t, eps, "x0_from_eps");
  if (!(ab > 0.0)) throw ConfigError("epsilon prediction cannot recover the clean latent at zero signal");
  const double s = std::sqrt(ab);
  return affine(z_t, 1.0 / s, eps, -std::sqrt(1.0 - ab) / s);
}

LatentStack training_target(const LatentStack& z, const LatentStack& eps, double ab, Parameterization p) {
  return p == Parameterization::V ? v_target(z, eps, ab) : eps;
}

void check_parameterization(const NoiseSchedule& schedule, int t, Parameterization p) {
  if (p == Parameterization::Epsilon && schedule.ab(t) == 0.0)
    throw ConfigError("epsilon parameterization is undefined at a zero-SNR timestep; use v prediction");
}

double training_loss(const PredictFn& model, const LatentStack& z, const ConditioningSequence& cond, int t,
                     const LatentStack& eps, const NoiseSchedule& schedule, Parameterization p) {
  check_parameterization(schedule, t, p);
  const LatentStack z_t = add_noise(z, t, eps, schedule);
  const LatentStack target = training_target(z, eps, schedule.ab(t), p);
  const LatentStack pred = model(z_t, t, cond);
  require_same(pred, target, "training_loss");
  double sum = 0.0;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    const double d = target.values[i] - pred.values[i];
    sum += d * d;
  }
  return sum / static_cast<double>(target.values.size());
}

LatentStack cfg_combine(const LatentStack& uncond, const LatentStack& cond, double w) {
  require_same(uncond, cond, "cfg_combine");
  if (!std::isfinite(w)) throw ConfigError("guidance scale must be finite");
  if (w == 1.0) return cond;
  if (w == 0.0) return uncond;
  LatentStack out = uncond;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = uncond.values[i] + w * (cond.values[i] - uncond.values[i]);
  return out;
}

void to_json(json& j, const SamplerConfig& c) {
  j = {{"kind", c.kind == SamplerKind::Ancestral ? "ancestral" : "deterministic"},
       {"steps", c.steps},
       {"guidance_scale", c.guidance_scale},
       {"guidance", c.guidance},
       {"clip_x0", c.clip_x0},
       {"seed", c.seed}};
}

void from_json(const json& j, SamplerConfig& c) {
  SamplerConfig d;
  const auto kind = j.value("kind", std::string("ancestral"));
  if (kind == "ancestral") {
    c.kind = SamplerKind::Ancestral;
  } else if (kind == "deterministic") {
    c.kind = SamplerKind::Deterministic;
  } else {
    throw ConfigError("unknown sampler kind '" + kind + "'");
  }
  c.steps = j.value("steps", d.steps);
  c.guidance_scale = j.value("guidance_scale", d.guidance_scale);
  c.guidance = j.value("guidance", d.guidance);
  c.clip_x0 = j.value("clip_x0", d.clip_x0);
  c.seed = j.value("seed", d.seed);
}

std::vector<int> timestep_sequence(int T, int steps) {
  if (steps < 1) throw ConfigError("sampler needs at least one step");
  if (steps > T) throw ConfigError("sampler steps (" + std::to_string(steps) + ") exceed T (" + std::to_string(T) + ")");
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int j = 0; j < steps; ++j)
    ts[static_cast<std::size_t>(j)] = T - static_cast<int>((static_cast<long long>(j) * T) / steps);
  return ts;
}

LatentStack sample(const Predictor& model, const ConditioningSequence& cond, const ConditioningSequence& uncond,
                   const NoiseSchedule& schedule, Parameterization p, const SamplerConfig& config, int channels,
                   int step_height, int width, int n_steps, const LatentStack* initial) {
  if (!std::isfinite(config.guidance_scale) || config.guidance_scale < 0.0)
    throw ConfigError("guidance scale must be finite and nonnegative");
  const auto ts = timestep_sequence(schedule.T, config.steps);
  check_parameterization(schedule, ts.front(), p);
  Rng rng = make_rng(config.seed, {0x5a4d1e});
  std::normal_distribution<double> normal(0.0, 1.0);

  LatentStack z(channels, step_height, width, n_steps);
  if (initial) {
    if (!initial->same_shape(z)) throw ShapeError("initial latent does not match the requested shape");
    z.values = initial->values;
  } else {
    for (auto& v : z.values) v = normal(rng);
  }
  const double eta = config.kind == SamplerKind::Ancestral ? 1.0 : 0.0;

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const double a = schedule.ab(t);
    const double a_prev = k + 1 < ts.size() ? schedule.ab(ts[k + 1]) : 1.0;

    LatentStack pred;
    if (config.guidance) {
      auto [c, u] = model.predict_pair(z, t, cond, uncond);
      pred = cfg_combine(u, c, config.guidance_scale);
    } else {
      pred = model.predict(z, t, cond);
    }
    require_same(pred, z, "sampler prediction");

    LatentStack x0, eps;
    if (p == Parameterization::V) {
      x0 = x0_from_v(z, pred, a);
      eps = eps_from_v(z, pred, a);
    } else {
      eps = pred;
      x0 = x0_from_eps(z, pred, a);
    }
    if (config.clip_x0 > 0.0) {
      for (auto& v : x0.values) v = std::clamp(v, -config.clip_x0, config.clip_x0);
      if (a < 1.0) eps = affine(z, 1.0 / std::sqrt(1.0 - a), x0, -std::sqrt(a) / std::sqrt(1.0 - a));
    }

    double sigma = 0.0;
    if (eta > 0.0 && a < 1.0 && a_prev > 0.0) sigma = eta * std::sqrt((1.0 - a_prev) / (1.0 - a) * (1.0 - a / a_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
    z = affine(x0, std::sqrt(a_prev), eps, dir);
    if (sigma > 0.0)
      for (auto& v : z.values) v += sigma * normal(rng);
  }
  return z;
}

}  // namespace stackdiff::diffusion
