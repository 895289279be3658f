#pragma once

#include "magnaforge/blockset.hpp"
#include "magnaforge/kvconfig.hpp"
#include "magnaforge/nets.hpp"
#include "magnaforge/simenv.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace magnaforge {

// GAE ----------------------------------------------------------------------------

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t, A_t = delta_t + gamma lambda (1 - done_t) A_{t+1};
/// V_T is `bootstrap`. Throws LengthMismatch.
Advantages gae(std::span<const double> rewards, std::span<const double> values, std::span<const bool> dones,
               double bootstrap, double gamma, double lambda);

// Curriculum ---------------------------------------------------------------------

struct CurriculumState {
  std::vector<double> success_rates;
  std::vector<double> probs;
  double tau = 0.2;
  double temp = 0.5;
  double decay = 0.99;

  static CurriculumState uniform(int n_blueprints, double tau = 0.2, double temp = 0.5, double decay = 0.99);
};

struct EpisodeResult {
  int blueprint = 0;
  bool success = false;
};

/// EMA per result, one decay of every rate, then probs = softmax((1 - rates) / temp).
/// Throws std::out_of_range for an unknown blueprint index.
void curriculum_update(CurriculumState& cs, std::span<const EpisodeResult> results);
/// probs = softmax((1 - rates) / temp) without touching the rates.
void refresh_probs(CurriculumState& cs);

enum class SamplingMode { curriculum, uniform };
int sample_blueprint(const CurriculumState& cs, Rng& rng, SamplingMode mode);

// PPO ------------------------------------------------------------------------------

struct PPOConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  int epochs = 4;
  int minibatch_size = 256;
  double learning_rate = 3e-4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double max_grad_norm = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int rollout_length = 100;  // steps per env per iteration
  int envs_per_worker = 4;
  int n_workers = 8;

  void validate() const;
};

/// One transition as seen by the learner.
struct Sample {
  GraphObs obs;
  Action action;
  double log_prob = 0.0;
  double value = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

struct LossStats {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
};

/// Minibatch loss -E[min(rho A, clip(rho) A)] + c_v E[(V - R)^2] - c_e E[H] and its exact
/// parameter gradient; advantages are used as given.
template <typename Scalar>
std::pair<LossStats, ParamSet<Scalar>> ppo_loss(const AgentParams<Scalar>& params, std::span<const Sample* const> batch,
                                                 const PPOConfig& cfg);

/// Scales advantages to mean 0 and standard deviation 1.
void normalize_advantages(std::span<Sample> samples);

struct Adam {
  AdamState state;
  void step(ParamSet<float>& params, const ParamSet<float>& grads, const PPOConfig& cfg);
};

/// Clips by global norm in place; returns the norm before clipping.
double clip_grad_norm(ParamSet<float>& grads, double max_norm);

/// Epochs over shuffled minibatches. Throws NonFiniteLoss and leaves params and optimizer untouched.
LossStats ppo_update(AgentParams<float>& params, Adam& adam, std::vector<Sample>& samples, const PPOConfig& cfg, Rng& rng);

// Policies ---------------------------------------------------------------------------

/// Wraps network parameters as an env controller (argmax choice and mean moves when deterministic).
EnvPolicy agent_policy(std::shared_ptr<const AgentParams<float>> params, bool deterministic, std::uint64_t seed = 0);

using PolicyFactory = std::function<EnvPolicy(std::uint64_t seed)>;

// Evaluation ------------------------------------------------------------------------

struct EvalReport {
  std::map<std::string, double> per_blueprint;
  std::map<std::string, int> blueprint_sizes;
  std::map<std::string, std::optional<double>> buckets;  // train2_6, train7_11, train12_16, test12_16
  std::optional<double> test_all;
  int episodes_per_blueprint = 0;

  std::string to_json() const;
  /// Mean over every evaluated blueprint.
  double overall() const;
};

enum class EvalSplit { train, test, all };
EvalSplit parse_split(const std::string& text);

/// Deterministic episodes from scattered resets; blueprints run in parallel across `workers`.
EvalReport evaluate(const PolicyFactory& policy, const BlueprintLibrary& lib, EvalSplit split, int n_episodes,
                    std::shared_ptr<const BlockSet> bs, const EnvConfig& env, std::uint64_t seed, int workers = 1);

struct ResetFreeReport {
  double mean = 0.0;
  double std = 0.0;
  std::vector<std::vector<bool>> per_episode;
  std::string to_json() const;
};

/// Paper protocol: `episodes` persistent worlds, each given `targets` goals from the train split
/// with at least `min_blocks` blocks, 100 steps per goal.
ResetFreeReport reset_free_eval(const PolicyFactory& policy, const BlueprintLibrary& lib, int episodes, int targets,
                                int min_blocks, int per_target_cap, std::shared_ptr<const BlockSet> bs,
                                const EnvConfig& env, std::uint64_t seed);

// Training ------------------------------------------------------------------------------

struct TrainConfig {
  EnvConfig env;
  NetConfig net;
  PPOConfig ppo;
  double curriculum_tau = 0.2;
  double curriculum_temp = 0.5;
  double curriculum_decay = 0.99;
  bool use_curriculum = true;
  std::string blockset_path;               // empty: default blockset
  std::string library_path;                // empty: generated or curated by `library`
  std::string library = "generated";       // generated | curated, when no path is given
  std::string blueprints;                  // comma-separated ids; empty: the whole train split
  long long total_env_steps = 1000000;
  int eval_every = 10;                     // iterations; 0 disables
  int eval_episodes = 40;
  double stop_success = 0.0;               // stop once the evaluated success reaches this; 0 disables
  int checkpoint_every = 10;
  std::uint64_t seed = 0;
  std::string run_dir = "run";

  void validate() const;
  KeyValues to_kv() const;
  /// Throws ConfigError on unknown keys.
  static TrainConfig from_kv(const KeyValues& kv);
};

/// Mode overlays: multi, single:<id>, no-attention, resnet, single-gripper, no-curriculum, delay:<k>.
void apply_mode(TrainConfig& cfg, const std::string& mode);

/// MAGNAFORGE_WORKERS wins over the configured count.
int resolve_workers(int configured);

struct IterationMetrics {
  long long iteration = 0;
  long long env_steps = 0;
  LossStats loss;
  double mean_episode_return = 0.0;
  double episode_success = 0.0;
  int episodes = 0;
  double wall_seconds = 0.0;
  std::optional<EvalReport> eval;

  std::string to_json() const;
};

struct TrainResult {
  AgentParams<float> params;
  std::vector<IterationMetrics> history;
  std::optional<EvalReport> last_eval;
  long long env_steps = 0;
  bool stopped_early = false;
};

struct TrainContext {
  std::shared_ptr<const BlockSet> blockset;
  BlueprintLibrary library;   // evaluation library
  std::vector<Blueprint> tasks;  // training blueprints
};

/// Loads the blockset and library and selects training tasks per the config.
TrainContext load_context(const TrainConfig& cfg);

/// Writes metrics.jsonl, config.cfg and checkpoints under run_dir. With `resume`, continues
/// from that checkpoint (the env config may differ; the net config must match).
TrainResult train(const TrainConfig& cfg, const TrainContext& ctx, const std::optional<std::filesystem::path>& resume = {},
                  const std::function<void(const IterationMetrics&)>& on_iteration = {});

// Attention dump ---------------------------------------------------------------------------

/// One JSON line per step, layer and head: {"step","layer","head","n","matrix"}.
std::vector<std::string> attention_dump(const AgentParams<float>& params, std::span<const GraphObs> trajectory);

}  // namespace magnaforge
