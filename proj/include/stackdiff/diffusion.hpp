#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "stackdiff/stacking.hpp"

namespace stackdiff::diffusion {

enum class ScheduleKind { Linear, Cosine };
enum class Parameterization { Epsilon, V };

std::string to_string(ScheduleKind k);
std::string to_string(Parameterization p);
ScheduleKind parse_schedule_kind(const std::string& s);
Parameterization parse_parameterization(const std::string& s);

// Timesteps are 1-based: alpha_bar[t - 1] is the cumulative signal coefficient at t.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Linear;
  int T = 0;
  std::vector<double> alpha_bar;
  bool zero_terminal_snr = false;

  double ab(int t) const;
  bool operator==(const NoiseSchedule&) const = default;
};

void to_json(nlohmann::json& j, const NoiseSchedule& s);
void from_json(const nlohmann::json& j, NoiseSchedule& s);

// Linear: betas from 1e-4 to 0.02 scaled by 1000 / T (capped at 0.999), so
// short schedules reach a comparable terminal noise level. Cosine: the
// squared-cosine alpha-bar curve with offset 0.008, betas capped at 0.999.
NoiseSchedule make_schedule(ScheduleKind kind, int T);

// Shifts and scales sqrt(alpha_bar) so the last value is 0 and the first is kept.
NoiseSchedule rescale_zero_terminal_snr(const NoiseSchedule& schedule);

double snr(const NoiseSchedule& schedule, int t);

// z_t = sqrt(ab) z + sqrt(1 - ab) eps
LatentStack add_noise(const LatentStack& z, int t, const LatentStack& eps, const NoiseSchedule& schedule);

// v = sqrt(ab) eps - sqrt(1 - ab) z
LatentStack v_target(const LatentStack& z, const LatentStack& eps, double ab);
LatentStack eps_from_v(const LatentStack& z_t, const LatentStack& v, double ab);
LatentStack x0_from_v(const LatentStack& z_t, const LatentStack& v, double ab);
LatentStack x0_from_eps(const LatentStack& z_t, const LatentStack& eps, double ab);

// Regression target for the given parameterization.
LatentStack training_target(const LatentStack& z, const LatentStack& eps, double ab, Parameterization p);

// Throws ConfigError when epsilon prediction meets a timestep with no signal.
void check_parameterization(const NoiseSchedule& schedule, int t, Parameterization p);

using PredictFn = std::function<LatentStack(const LatentStack& z_t, int t, const ConditioningSequence& cond)>;

// Mean over all elements of (target - prediction)^2.
double training_loss(const PredictFn& model, const LatentStack& z, const ConditioningSequence& cond, int t,
                     const LatentStack& eps, const NoiseSchedule& schedule, Parameterization p);

LatentStack cfg_combine(const LatentStack& uncond, const LatentStack& cond, double w);

// Anything the sampler can query for predictions.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual LatentStack predict(const LatentStack& z_t, int t, const ConditioningSequence& cond) const = 0;
  // Conditional and unconditional predictions; implementations may batch them.
  virtual std::pair<LatentStack, LatentStack> predict_pair(const LatentStack& z_t, int t, const ConditioningSequence& cond,
                                                           const ConditioningSequence& uncond) const {
    return {predict(z_t, t, cond), predict(z_t, t, uncond)};
  }
};

class FunctionPredictor final : public Predictor {
 public:
  explicit FunctionPredictor(PredictFn fn) : fn_(std::move(fn)) {}
  LatentStack predict(const LatentStack& z_t, int t, const ConditioningSequence& cond) const override {
    return fn_(z_t, t, cond);
  }

 private:
  PredictFn fn_;
};

enum class SamplerKind { Ancestral, Deterministic };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ancestral;
  int steps = 100;
  double guidance_scale = 5.0;
  bool guidance = true;  // false: single conditional call per step
  double clip_x0 = 0.0;  // > 0 clamps the predicted clean latent to [-clip, clip]
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);

// Descending timesteps T = tau_0 > ... > tau_{steps-1} >= 1.
std::vector<int> timestep_sequence(int T, int steps);

// Reverse process from pure noise (or from `initial` when given).
LatentStack sample(const Predictor& model, const ConditioningSequence& cond, const ConditioningSequence& uncond,
                   const NoiseSchedule& schedule, Parameterization p, const SamplerConfig& config, int channels,
                   int step_height, int width, int n_steps, const LatentStack* initial = nullptr);

}  // namespace stackdiff::diffusion
