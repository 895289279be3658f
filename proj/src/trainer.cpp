#include "magnaforge/trainer.hpp"

#include "magnaforge/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace magnaforge {
namespace {

using json = nlohmann::json;

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr int kMoveDims = 6;

Rng derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

/// Runs fn(i) for i in [0, n) on `workers` threads; rethrows the first failure.
void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = n;
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

// GAE ----------------------------------------------------------------------------

Advantages gae(std::span<const double> rewards, std::span<const double> values, std::span<const bool> dones,
               double bootstrap, double gamma, double lambda) {
  if (rewards.size() != values.size() || rewards.size() != dones.size())
    throw LengthMismatch("gae: rewards, values and dones must have equal length");
  const std::size_t n = rewards.size();
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap, next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    double live = dones[i] ? 0.0 : 1.0;
    double delta = rewards[i] + gamma * next_value * live - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return out;
}

// Curriculum ---------------------------------------------------------------------

CurriculumState CurriculumState::uniform(int n_blueprints, double tau, double temp, double decay) {
  if (n_blueprints <= 0) throw ConfigError("curriculum needs at least one blueprint");
  CurriculumState cs;
  cs.success_rates.assign(n_blueprints, 0.0);
  cs.probs.assign(n_blueprints, 1.0 / static_cast<double>(n_blueprints));
  cs.tau = tau;
  cs.temp = temp;
  cs.decay = decay;
  return cs;
}

void curriculum_update(CurriculumState& cs, std::span<const EpisodeResult> results) {
  const int k = static_cast<int>(cs.success_rates.size());
  for (const auto& r : results)
    if (r.blueprint < 0 || r.blueprint >= k) throw std::out_of_range("curriculum: unknown blueprint index " + std::to_string(r.blueprint));
  for (const auto& r : results)
    cs.success_rates[r.blueprint] = (1.0 - cs.tau) * cs.success_rates[r.blueprint] + cs.tau * (r.success ? 1.0 : 0.0);
  for (double& rate : cs.success_rates) rate *= cs.decay;
  refresh_probs(cs);
}

void refresh_probs(CurriculumState& cs) {
  const int k = static_cast<int>(cs.success_rates.size());
  double top = -std::numeric_limits<double>::infinity();
  std::vector<double> z(k);
  for (int i = 0; i < k; ++i) top = std::max(top, z[i] = (1.0 - cs.success_rates[i]) / cs.temp);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += z[i] = std::exp(z[i] - top);
  cs.probs.resize(k);
  for (int i = 0; i < k; ++i) cs.probs[i] = z[i] / sum;
}

int sample_blueprint(const CurriculumState& cs, Rng& rng, SamplingMode mode) {
  const int k = static_cast<int>(cs.probs.size());
  if (mode == SamplingMode::uniform) return std::uniform_int_distribution<int>(0, k - 1)(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng), acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += cs.probs[i];
    if (r < acc) return i;
  }
  return k - 1;
}

// PPO ------------------------------------------------------------------------------

void PPOConfig::validate() const {
  if (!(gamma > 0 && gamma <= 1) || !(lambda > 0 && lambda <= 1)) throw ConfigError("ppo: gamma and lambda must be in (0, 1]");
  if (!(clip > 0)) throw ConfigError("ppo: clip must be positive");
  if (epochs <= 0 || minibatch_size <= 0 || rollout_length <= 0 || envs_per_worker <= 0 || n_workers <= 0)
    throw ConfigError("ppo: counts must be positive");
  if (!(learning_rate > 0) || value_coef < 0 || entropy_coef < 0 || !(max_grad_norm > 0))
    throw ConfigError("ppo: bad coefficients");
}

template <typename Scalar>
std::pair<LossStats, ParamSet<Scalar>> ppo_loss(const AgentParams<Scalar>& params, std::span<const Sample* const> batch,
                                                 const PPOConfig& cfg) {
  if (batch.empty()) throw ShapeError("ppo_loss: empty minibatch");
  std::vector<GraphObs> obs;
  obs.reserve(batch.size());
  for (const Sample* s : batch) obs.push_back(s->obs);
  const ObsBatch<Scalar> ob = make_batch<Scalar>(obs, params.config);
  Tape<Scalar> tape;
  const ForwardGraph<Scalar> f = build_forward(tape, params, ob);

  const int b_count = static_cast<int>(batch.size());
  const int g_count = params.config.n_grippers;
  const int n = params.config.n_blocks;
  const Mat<Scalar>& logits = tape.value(f.logits);
  const Mat<Scalar>& mean = tape.value(f.move_mean);
  const Mat<Scalar>& log_std = tape.value(f.log_std);
  const Mat<Scalar>& value = tape.value(f.value);

  Mat<Scalar> d_logits = Mat<Scalar>::Zero(logits.rows(), logits.cols());
  Mat<Scalar> d_mean = Mat<Scalar>::Zero(mean.rows(), mean.cols());
  Mat<Scalar> d_log_std = Mat<Scalar>::Zero(1, kMoveDims);
  Mat<Scalar> d_value = Mat<Scalar>::Zero(b_count, 1);

  LossStats st;
  const double inv_b = 1.0 / b_count;
  const double gauss_entropy_const = kMoveDims * (kHalfLog2Pi + 0.5);
  double sum_log_std = 0.0;
  for (int k = 0; k < kMoveDims; ++k) sum_log_std += static_cast<double>(log_std(0, k));

  for (int i = 0; i < b_count; ++i) {
    const Sample& s = *batch[i];
    if (static_cast<int>(s.action.gripper_choice.size()) != g_count || s.action.block_moves.rows() != n)
      throw ShapeError("ppo_loss: action does not match the network");
    double logp = 0.0, entropy = 0.0;
    std::vector<Eigen::VectorXd> probs(g_count);
    std::vector<Eigen::VectorXd> logps(g_count);
    for (int g = 0; g < g_count; ++g) {
      Eigen::VectorXd z = logits.row(i * g_count + g).transpose().template cast<double>();
      double top = z.maxCoeff();
      Eigen::VectorXd lp = (z.array() - top - std::log((z.array() - top).exp().sum())).matrix();
      logps[g] = lp;
      probs[g] = lp.array().exp().matrix();
      logp += lp[s.action.gripper_choice[g]];
      entropy -= (probs[g].array() * lp.array()).sum();
    }
    entropy += g_count * (sum_log_std + gauss_entropy_const);
    const std::vector<int> chosen = chosen_blocks(s.action.gripper_choice);
    for (int b : chosen)
      for (int k = 0; k < kMoveDims; ++k) {
        double ls = static_cast<double>(log_std(0, k));
        double z = (s.action.block_moves(b, k) - static_cast<double>(mean(i * n + b, k))) * std::exp(-ls);
        logp += -0.5 * z * z - ls - kHalfLog2Pi;
      }

    const double ratio = std::exp(logp - s.log_prob);
    const double a = s.advantage;
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    const bool unclipped_active = ratio * a <= clipped * a;
    st.policy += -std::min(ratio * a, clipped * a) * inv_b;
    const double v = static_cast<double>(value(i, 0));
    st.value += (v - s.ret) * (v - s.ret) * inv_b;
    st.entropy += entropy * inv_b;
    st.approx_kl += (s.log_prob - logp) * inv_b;
    if (std::abs(ratio - 1.0) > cfg.clip) st.clip_fraction += inv_b;

    // d loss / d logp of this sample
    const double d_logp = unclipped_active ? -ratio * a * inv_b : 0.0;
    const double d_h = -cfg.entropy_coef * inv_b;
    for (int g = 0; g < g_count; ++g) {
      const double h_g = -(probs[g].array() * logps[g].array()).sum();
      for (int j = 0; j < n; ++j) {
        double dlp = (j == s.action.gripper_choice[g] ? 1.0 : 0.0) - probs[g][j];
        double dh = -probs[g][j] * (logps[g][j] + h_g);
        d_logits(i * g_count + g, j) += static_cast<Scalar>(d_logp * dlp + d_h * dh);
      }
    }
    for (int b : chosen)
      for (int k = 0; k < kMoveDims; ++k) {
        double ls = static_cast<double>(log_std(0, k));
        double sigma_inv = std::exp(-ls);
        double z = (s.action.block_moves(b, k) - static_cast<double>(mean(i * n + b, k))) * sigma_inv;
        d_mean(i * n + b, k) += static_cast<Scalar>(d_logp * z * sigma_inv);
        d_log_std(0, k) += static_cast<Scalar>(d_logp * (z * z - 1.0));
      }
    for (int k = 0; k < kMoveDims; ++k) d_log_std(0, k) += static_cast<Scalar>(d_h * g_count);
    d_value(i, 0) = static_cast<Scalar>(2.0 * cfg.value_coef * (v - s.ret) * inv_b);
  }
  st.total = st.policy + cfg.value_coef * st.value - cfg.entropy_coef * st.entropy;

  tape.seed(f.logits, d_logits);
  tape.seed(f.move_mean, d_mean);
  tape.seed(f.log_std, d_log_std);
  tape.seed(f.value, d_value);
  tape.backward();
  ParamSet<Scalar> grads = params.params.zeros_like();
  for (auto [tag, var] : tape.params())
    if (tape.grad(var).size()) grads.values[tag] += tape.grad(var);
  return {st, std::move(grads)};
}

template std::pair<LossStats, ParamSet<float>> ppo_loss<float>(const AgentParams<float>&, std::span<const Sample* const>, const PPOConfig&);
template std::pair<LossStats, ParamSet<double>> ppo_loss<double>(const AgentParams<double>&, std::span<const Sample* const>, const PPOConfig&);

void normalize_advantages(std::span<Sample> samples) {
  if (samples.empty()) return;
  double mean = 0.0;
  for (const auto& s : samples) mean += s.advantage;
  mean /= static_cast<double>(samples.size());
  double var = 0.0;
  for (const auto& s : samples) var += (s.advantage - mean) * (s.advantage - mean);
  var /= static_cast<double>(samples.size());
  const double sd = std::sqrt(var);
  for (auto& s : samples) s.advantage = sd > 1e-12 ? (s.advantage - mean) / sd : s.advantage - mean;
}

void Adam::step(ParamSet<float>& params, const ParamSet<float>& grads, const PPOConfig& cfg) {
  if (state.m.size() == 0) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
  const float step = static_cast<float>(cfg.learning_rate / c1);
  const float eps = static_cast<float>(cfg.adam_eps);
  const float root_c2 = static_cast<float>(std::sqrt(c2));
  for (int i = 0; i < params.size(); ++i) {
    auto& m = state.m.values[i];
    auto& v = state.v.values[i];
    const auto& g = grads.values[i];
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    params.values[i].array() -= step * m.array() / (v.array().sqrt() / root_c2 + eps);
  }
}

double clip_grad_norm(ParamSet<float>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads.values) sq += g.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0)
    for (auto& g : grads.values) g *= static_cast<float>(max_norm / norm);
  return norm;
}

LossStats ppo_update(AgentParams<float>& params, Adam& adam, std::vector<Sample>& samples, const PPOConfig& cfg, Rng& rng) {
  if (samples.empty()) throw ShapeError("ppo_update: empty batch");
  normalize_advantages(samples);
  const AgentParams<float> saved_params = params;
  const AdamState saved_adam = adam.state;
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  LossStats mean;
  int count = 0;
  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
        std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch_size));
        std::vector<const Sample*> mb;
        for (std::size_t j = start; j < end; ++j) mb.push_back(&samples[order[j]]);
        auto [st, grads] = ppo_loss<float>(params, mb, cfg);
        bool finite = std::isfinite(st.total);
        for (const auto& g : grads.values) finite = finite && g.allFinite();
        if (!finite) {
          std::ostringstream msg;
          msg << "non-finite PPO loss at epoch " << epoch << " (policy " << st.policy << ", value " << st.value
              << ", entropy " << st.entropy << ")";
          throw NonFiniteLoss(msg.str());
        }
        st.grad_norm = clip_grad_norm(grads, cfg.max_grad_norm);
        adam.step(params.params, grads, cfg);
        mean.total += st.total;
        mean.policy += st.policy;
        mean.value += st.value;
        mean.entropy += st.entropy;
        mean.approx_kl += st.approx_kl;
        mean.clip_fraction += st.clip_fraction;
        mean.grad_norm += st.grad_norm;
        ++count;
      }
    }
  } catch (const NonFiniteLoss&) {
    params = saved_params;
    adam.state = saved_adam;
    throw;
  }
  const double inv = 1.0 / count;
  for (double* x : {&mean.total, &mean.policy, &mean.value, &mean.entropy, &mean.approx_kl, &mean.clip_fraction, &mean.grad_norm})
    *x *= inv;
  return mean;
}

// Policies -----------------------------------------------------------------------------

EnvPolicy agent_policy(std::shared_ptr<const AgentParams<float>> params, bool deterministic, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [params, deterministic, rng](AssemblyEnv&, const GraphObs& obs) {
    return sample_action(policy_forward(*params, obs), *rng, deterministic).action;
  };
}

// Evaluation ------------------------------------------------------------------------------

std::string EvalReport::to_json() const {
  json j;
  j["episodes_per_blueprint"] = episodes_per_blueprint;
  json per = json::object();
  for (const auto& [id, rate] : per_blueprint) per[id] = {{"success", rate}, {"n_blocks", blueprint_sizes.at(id)}};
  j["per_blueprint"] = per;
  json b = json::object();
  for (const auto& [name, rate] : buckets) b[name] = optional_json(rate);
  j["buckets"] = b;
  j["test_all"] = optional_json(test_all);
  j["overall"] = per_blueprint.empty() ? json(nullptr) : json(overall());
  return j.dump(2);
}

double EvalReport::overall() const {
  if (per_blueprint.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [id, rate] : per_blueprint) sum += rate;
  return sum / static_cast<double>(per_blueprint.size());
}

EvalSplit parse_split(const std::string& text) {
  if (text == "train") return EvalSplit::train;
  if (text == "test") return EvalSplit::test;
  if (text == "all") return EvalSplit::all;
  throw ConfigError("unknown split '" + text + "' (train, test, all)");
}

EvalReport evaluate(const PolicyFactory& policy, const BlueprintLibrary& lib, EvalSplit split, int n_episodes,
                    std::shared_ptr<const BlockSet> bs, const EnvConfig& env, std::uint64_t seed, int workers) {
  if (n_episodes <= 0) throw ConfigError("evaluate: episodes must be positive");
  struct Task {
    const Blueprint* bp;
    bool test;
  };
  std::vector<Task> tasks;
  if (split != EvalSplit::test)
    for (const auto& bp : lib.train) tasks.push_back({&bp, false});
  if (split != EvalSplit::train)
    for (const auto& bp : lib.test) tasks.push_back({&bp, true});

  const int total = static_cast<int>(tasks.size()) * n_episodes;
  std::vector<char> success(total, 0);
  parallel_for(total, workers, [&](int job) {
    const int t = job / n_episodes, e = job % n_episodes;
    Rng rng = derived_rng(seed, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(e), 0xE7A1);
    AssemblyEnv env_inst(bs, env);
    EnvPolicy pi = policy(rng());
    StepResult r = env_inst.reset(*tasks[t].bp, ResetMode::scattered(), rng);
    while (!env_inst.done()) {
      r = env_inst.step(pi(env_inst, r.obs));
      if (r.info.success) success[job] = 1;
    }
  });

  EvalReport rep;
  rep.episodes_per_blueprint = n_episodes;
  std::map<std::string, std::pair<double, int>> acc = {
      {"train2_6", {0, 0}}, {"train7_11", {0, 0}}, {"train12_16", {0, 0}}, {"test12_16", {0, 0}}};
  double test_sum = 0.0;
  int test_count = 0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    int wins = 0;
    for (int e = 0; e < n_episodes; ++e) wins += success[t * n_episodes + e];
    const double rate = static_cast<double>(wins) / n_episodes;
    const Blueprint& bp = *tasks[t].bp;
    rep.per_blueprint[bp.id] = rate;
    rep.blueprint_sizes[bp.id] = bp.n_blocks_used;
    const int k = bp.n_blocks_used;
    std::string bucket;
    if (tasks[t].test) {
      test_sum += rate;
      ++test_count;
      if (k >= 12 && k <= 16) bucket = "test12_16";
    } else if (k >= 2 && k <= 6) {
      bucket = "train2_6";
    } else if (k >= 7 && k <= 11) {
      bucket = "train7_11";
    } else if (k >= 12 && k <= 16) {
      bucket = "train12_16";
    }
    if (!bucket.empty()) {
      acc[bucket].first += rate;
      acc[bucket].second += 1;
    }
  }
  for (const auto& [name, sc] : acc)
    rep.buckets[name] = sc.second ? std::optional<double>(sc.first / sc.second) : std::nullopt;
  if (test_count) rep.test_all = test_sum / test_count;
  return rep;
}

std::string ResetFreeReport::to_json() const {
  json j;
  j["mean"] = mean;
  j["std"] = std;
  j["per_episode"] = per_episode;
  return j.dump(2);
}

ResetFreeReport reset_free_eval(const PolicyFactory& policy, const BlueprintLibrary& lib, int episodes, int targets,
                                int min_blocks, int per_target_cap, std::shared_ptr<const BlockSet> bs,
                                const EnvConfig& env, std::uint64_t seed) {
  std::vector<Blueprint> goals;
  for (const auto& bp : lib.train)
    if (bp.n_blocks_used >= min_blocks) goals.push_back(bp);
  if (goals.empty()) throw ConfigError("reset-free: no training blueprint has at least " + std::to_string(min_blocks) + " blocks");
  ResetFreeReport rep;
  std::vector<double> rates;
  for (int e = 0; e < episodes; ++e) {
    Rng rng = derived_rng(seed, static_cast<std::uint64_t>(e), 0, 0x4F4E);
    AssemblyEnv env_inst(bs, env);
    EnvPolicy pi = policy(rng());
    std::vector<bool> res = reset_free_run(env_inst, pi, goals, targets, per_target_cap, rng);
    rates.push_back(static_cast<double>(std::count(res.begin(), res.end(), true)) / static_cast<double>(res.size()));
    rep.per_episode.push_back(std::move(res));
  }
  const double count = static_cast<double>(rates.size());
  rep.mean = std::accumulate(rates.begin(), rates.end(), 0.0) / count;
  for (double r : rates) rep.std += (r - rep.mean) * (r - rep.mean);
  rep.std = std::sqrt(rep.std / count);
  return rep;
}

// Training config ------------------------------------------------------------------------------

void TrainConfig::validate() const {
  env.validate();
  net.validate();
  ppo.validate();
  if (!(curriculum_tau > 0 && curriculum_tau <= 1) || !(curriculum_temp > 0) || !(curriculum_decay > 0 && curriculum_decay <= 1))
    throw ConfigError("curriculum: tau in (0, 1], temp > 0, decay in (0, 1]");
  if (library != "generated" && library != "curated") throw ConfigError("run.library must be generated or curated");
  if (total_env_steps <= 0 || eval_episodes <= 0 || eval_every < 0 || checkpoint_every < 0)
    throw ConfigError("run: step and episode counts must be positive");
  if (stop_success < 0 || stop_success > 1) throw ConfigError("run.stop_success must be in [0, 1]");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv = env.to_kv();
  kv.merge(net.to_kv());
  kv.set("ppo.gamma", ppo.gamma);
  kv.set("ppo.lambda", ppo.lambda);
  kv.set("ppo.clip", ppo.clip);
  kv.set("ppo.epochs", ppo.epochs);
  kv.set("ppo.minibatch_size", ppo.minibatch_size);
  kv.set("ppo.learning_rate", ppo.learning_rate);
  kv.set("ppo.value_coef", ppo.value_coef);
  kv.set("ppo.entropy_coef", ppo.entropy_coef);
  kv.set("ppo.max_grad_norm", ppo.max_grad_norm);
  kv.set("ppo.adam_beta1", ppo.adam_beta1);
  kv.set("ppo.adam_beta2", ppo.adam_beta2);
  kv.set("ppo.adam_eps", ppo.adam_eps);
  kv.set("ppo.rollout_length", ppo.rollout_length);
  kv.set("ppo.envs_per_worker", ppo.envs_per_worker);
  kv.set("ppo.n_workers", ppo.n_workers);
  kv.set("curriculum.tau", curriculum_tau);
  kv.set("curriculum.temp", curriculum_temp);
  kv.set("curriculum.decay", curriculum_decay);
  kv.set("curriculum.enabled", use_curriculum);
  kv.set("run.blockset", blockset_path);
  kv.set("run.library_path", library_path);
  kv.set("run.library", library);
  kv.set("run.blueprints", blueprints);
  kv.set("run.total_env_steps", total_env_steps);
  kv.set("run.eval_every", eval_every);
  kv.set("run.eval_episodes", eval_episodes);
  kv.set("run.stop_success", stop_success);
  kv.set("run.checkpoint_every", checkpoint_every);
  kv.set("run.seed", std::to_string(seed));
  kv.set("run.dir", run_dir);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  static const std::set<std::string> known = [] {
    std::set<std::string> k;
    const KeyValues defaults = TrainConfig{}.to_kv();
    for (const auto& [name, value] : defaults.entries()) k.insert(name);
    return k;
  }();
  auto unknown = kv.unknown_keys(known);
  if (!unknown.empty()) throw ConfigError("unknown config key '" + unknown.front() + "'");
  TrainConfig c;
  c.env = EnvConfig::from_kv(kv);
  c.net = NetConfig::from_kv(kv);
  c.ppo.gamma = kv.get("ppo.gamma", c.ppo.gamma);
  c.ppo.lambda = kv.get("ppo.lambda", c.ppo.lambda);
  c.ppo.clip = kv.get("ppo.clip", c.ppo.clip);
  c.ppo.epochs = kv.get("ppo.epochs", c.ppo.epochs);
  c.ppo.minibatch_size = kv.get("ppo.minibatch_size", c.ppo.minibatch_size);
  c.ppo.learning_rate = kv.get("ppo.learning_rate", c.ppo.learning_rate);
  c.ppo.value_coef = kv.get("ppo.value_coef", c.ppo.value_coef);
  c.ppo.entropy_coef = kv.get("ppo.entropy_coef", c.ppo.entropy_coef);
  c.ppo.max_grad_norm = kv.get("ppo.max_grad_norm", c.ppo.max_grad_norm);
  c.ppo.adam_beta1 = kv.get("ppo.adam_beta1", c.ppo.adam_beta1);
  c.ppo.adam_beta2 = kv.get("ppo.adam_beta2", c.ppo.adam_beta2);
  c.ppo.adam_eps = kv.get("ppo.adam_eps", c.ppo.adam_eps);
  c.ppo.rollout_length = kv.get("ppo.rollout_length", c.ppo.rollout_length);
  c.ppo.envs_per_worker = kv.get("ppo.envs_per_worker", c.ppo.envs_per_worker);
  c.ppo.n_workers = kv.get("ppo.n_workers", c.ppo.n_workers);
  c.curriculum_tau = kv.get("curriculum.tau", c.curriculum_tau);
  c.curriculum_temp = kv.get("curriculum.temp", c.curriculum_temp);
  c.curriculum_decay = kv.get("curriculum.decay", c.curriculum_decay);
  c.use_curriculum = kv.get("curriculum.enabled", c.use_curriculum);
  c.blockset_path = kv.get("run.blockset", c.blockset_path);
  c.library_path = kv.get("run.library_path", c.library_path);
  c.library = kv.get("run.library", c.library);
  c.blueprints = kv.get("run.blueprints", c.blueprints);
  c.total_env_steps = kv.get("run.total_env_steps", c.total_env_steps);
  c.eval_every = kv.get("run.eval_every", c.eval_every);
  c.eval_episodes = kv.get("run.eval_episodes", c.eval_episodes);
  c.stop_success = kv.get("run.stop_success", c.stop_success);
  c.checkpoint_every = kv.get("run.checkpoint_every", c.checkpoint_every);
  const std::string seed_text = kv.get("run.seed", std::string("0"));
  try {
    std::size_t used = 0;
    c.seed = std::stoull(seed_text, &used);
    if (used != seed_text.size()) throw std::invalid_argument(seed_text);
  } catch (const std::exception&) {
    throw ConfigError("run.seed: '" + seed_text + "' is not an unsigned integer");
  }
  c.run_dir = kv.get("run.dir", c.run_dir);
  c.validate();
  return c;
}

void apply_mode(TrainConfig& cfg, const std::string& mode) {
  if (mode == "multi") return;
  if (mode.rfind("single:", 0) == 0 && mode.size() > 7) {
    cfg.blueprints = mode.substr(7);
  } else if (mode == "no-attention") {
    cfg.net.architecture = Architecture::no_attention;
  } else if (mode == "resnet") {
    cfg.net.architecture = Architecture::resnet;
  } else if (mode == "single-gripper") {
    cfg.env.n_grippers = 1;
    cfg.net.n_grippers = 1;
  } else if (mode == "no-curriculum") {
    cfg.use_curriculum = false;
  } else if (mode.rfind("delay:", 0) == 0) {
    try {
      std::size_t used = 0;
      int k = std::stoi(mode.substr(6), &used);
      if (used != mode.size() - 6 || k < 0) throw std::invalid_argument(mode);
      cfg.env.gripper_transition_delay = k;
    } catch (const std::exception&) {
      throw ConfigError("bad mode '" + mode + "': delay needs a non-negative integer");
    }
  } else {
    throw ConfigError("unknown mode '" + mode + "'");
  }
  cfg.validate();
}

int resolve_workers(int configured) {
  if (const char* env = std::getenv("MAGNAFORGE_WORKERS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0) throw ConfigError("MAGNAFORGE_WORKERS must be a positive integer");
    return static_cast<int>(v);
  }
  return configured;
}

std::string IterationMetrics::to_json() const {
  json j;
  j["iteration"] = iteration;
  j["step"] = env_steps;
  j["loss"] = {{"total", loss.total}, {"policy", loss.policy}, {"value", loss.value}, {"entropy", loss.entropy}};
  j["approx_kl"] = loss.approx_kl;
  j["clip_frac"] = loss.clip_fraction;
  j["grad_norm"] = loss.grad_norm;
  j["mean_episode_return"] = mean_episode_return;
  j["episode_success"] = episode_success;
  j["episodes"] = episodes;
  j["wall_seconds"] = wall_seconds;
  if (eval) {
    json b = json::object();
    for (const auto& [name, rate] : eval->buckets) b[name] = optional_json(rate);
    j["eval"] = {{"overall", eval->overall()}, {"buckets", b}, {"per_blueprint", eval->per_blueprint}};
  }
  return j.dump();
}

TrainContext load_context(const TrainConfig& cfg) {
  TrainContext ctx;
  ctx.blockset = std::make_shared<const BlockSet>(cfg.blockset_path.empty() ? default_blockset() : load_blockset(cfg.blockset_path));
  if (!cfg.library_path.empty())
    ctx.library = load_library(cfg.library_path, *ctx.blockset);
  else if (cfg.library == "curated")
    ctx.library = curated_blueprints(*ctx.blockset);
  else
    ctx.library = generate_blueprints(*ctx.blockset, cfg.seed, 200, 2, std::min(16, ctx.blockset->size()));
  if (cfg.blueprints.empty()) {
    ctx.tasks = ctx.library.train;
  } else {
    for (const auto& id : split_csv(cfg.blueprints)) {
      const Blueprint* bp = ctx.library.find(id);
      if (!bp) throw ConfigError("blueprint '" + id + "' is not in the library");
      ctx.tasks.push_back(*bp);
    }
  }
  if (ctx.tasks.empty()) throw ConfigError("no training blueprints selected");
  return ctx;
}

// Rollouts -----------------------------------------------------------------------------

namespace {

struct WorkerOutput {
  std::vector<Sample> samples;
  std::vector<EpisodeResult> results;
  std::vector<double> episode_returns;
};

struct RolloutSpec {
  const TrainConfig* cfg;
  const TrainContext* ctx;
  std::shared_ptr<const AgentParams<float>> params;
  const CurriculumState* curriculum;
  long long iteration;
};

std::vector<double> batch_values(const AgentParams<float>& params, std::span<const GraphObs> obs) {
  std::vector<double> v;
  if (obs.empty()) return v;
  for (const auto& out : policy_forward_batch(params, obs)) v.push_back(out.value);
  return v;
}

WorkerOutput run_worker(const RolloutSpec& spec, int worker) {
  const TrainConfig& cfg = *spec.cfg;
  const auto& tasks = spec.ctx->tasks;
  Rng rng = derived_rng(cfg.seed, static_cast<std::uint64_t>(spec.iteration), static_cast<std::uint64_t>(worker), 0x5201);
  const int m = cfg.ppo.envs_per_worker, t_len = cfg.ppo.rollout_length;
  const SamplingMode mode = cfg.use_curriculum ? SamplingMode::curriculum : SamplingMode::uniform;

  std::vector<AssemblyEnv> envs;
  std::vector<int> task_of(m);
  std::vector<GraphObs> obs(m);
  std::vector<double> ep_return(m, 0.0);
  std::bernoulli_distribution prebuilt(cfg.env.blueprint_reset_prob);
  std::uniform_int_distribution<int> any_task(0, static_cast<int>(tasks.size()) - 1);
  auto start_episode = [&](int e) {
    task_of[e] = sample_blueprint(*spec.curriculum, rng, mode);
    const Blueprint& goal = tasks[task_of[e]];
    if (prebuilt(rng)) {
      const Blueprint& start = tasks[any_task(rng)];
      obs[e] = envs[e].reset(goal, ResetMode::from_blueprint(start), rng).obs;
    } else {
      obs[e] = envs[e].reset(goal, ResetMode::scattered(), rng).obs;
    }
    ep_return[e] = 0.0;
  };
  for (int e = 0; e < m; ++e) {
    envs.emplace_back(spec.ctx->blockset, cfg.env);
    start_episode(e);
  }

  struct Step {
    Sample sample;
    double reward = 0.0;
    bool done = false;
  };
  std::vector<std::vector<Step>> traj(m);
  WorkerOutput out;
  for (int t = 0; t < t_len; ++t) {
    const auto outputs = policy_forward_batch(*spec.params, std::span<const GraphObs>(obs));
    std::vector<GraphObs> truncated_obs;
    std::vector<int> truncated_env;
    for (int e = 0; e < m; ++e) {
      ActionSample a = sample_action(outputs[e], rng, false);
      Step st;
      st.sample.obs = obs[e];
      st.sample.value = outputs[e].value;
      st.sample.log_prob = a.log_prob;
      StepResult r = envs[e].step(a.action);
      st.sample.action = std::move(a.action);
      st.reward = r.reward;
      st.done = r.done;
      ep_return[e] += r.reward;
      if (r.done) {
        if (!r.info.success) {
          truncated_obs.push_back(std::move(r.obs));
          truncated_env.push_back(e);
        }
        out.results.push_back({task_of[e], r.info.success});
        out.episode_returns.push_back(ep_return[e]);
        start_episode(e);
      } else {
        obs[e] = std::move(r.obs);
      }
      traj[e].push_back(std::move(st));
    }
    // time limits are not terminal: fold the value of the cut-off state into the reward
    const auto tail = batch_values(*spec.params, truncated_obs);
    for (std::size_t k = 0; k < truncated_env.size(); ++k) traj[truncated_env[k]].back().reward += cfg.ppo.gamma * tail[k];
  }
  const auto bootstrap = batch_values(*spec.params, obs);
  for (int e = 0; e < m; ++e) {
    std::vector<double> r, v;
    std::vector<char> d;
    for (const auto& st : traj[e]) {
      r.push_back(st.reward);
      v.push_back(st.sample.value);
      d.push_back(st.done);
    }
    std::unique_ptr<bool[]> dones(new bool[d.size()]);
    for (std::size_t i = 0; i < d.size(); ++i) dones[i] = d[i] != 0;
    Advantages adv = gae(r, v, std::span<const bool>(dones.get(), d.size()), bootstrap[e], cfg.ppo.gamma, cfg.ppo.lambda);
    for (std::size_t i = 0; i < traj[e].size(); ++i) {
      traj[e][i].sample.advantage = adv.advantages[i];
      traj[e][i].sample.ret = adv.returns[i];
      out.samples.push_back(std::move(traj[e][i].sample));
    }
  }
  return out;
}

std::string checkpoint_extra(const TrainContext& ctx) {
  json j;
  std::vector<std::string> ids;
  for (const auto& bp : ctx.tasks) ids.push_back(bp.id);
  j["blueprints"] = ids;
  return j.dump();
}

}  // namespace

TrainResult train(const TrainConfig& cfg_in, const TrainContext& ctx, const std::optional<std::filesystem::path>& resume,
                  const std::function<void(const IterationMetrics&)>& on_iteration) {
  TrainConfig cfg = cfg_in;
  cfg.net.n_blocks = ctx.blockset->size();
  cfg.net.n_grippers = cfg.env.n_grippers;
  cfg.ppo.n_workers = resolve_workers(cfg.ppo.n_workers);
  cfg.validate();

  const int k = static_cast<int>(ctx.tasks.size());
  CurriculumState cs = CurriculumState::uniform(k, cfg.curriculum_tau, cfg.curriculum_temp, cfg.curriculum_decay);
  AgentParams<float> params;
  Adam adam;
  long long iteration = 0, env_steps = 0;
  if (resume) {
    Checkpoint ck = load_checkpoint(*resume);
    const AgentParams<float> expected = init_params<float>(cfg.net, 0);
    if (!expected.params.same_shapes(ck.agent.params) || ck.agent.config.architecture != cfg.net.architecture)
      throw ShapeError("checkpoint does not match the configured network");
    params = std::move(ck.agent);
    params.config = cfg.net;
    adam.state = std::move(ck.adam);
    iteration = ck.iteration;
    env_steps = ck.env_steps;
    if (static_cast<int>(ck.curriculum_rates.size()) == k) {
      cs.success_rates = ck.curriculum_rates;
      refresh_probs(cs);
    }
  } else {
    params = init_params<float>(cfg.net, cfg.seed);
  }

  std::filesystem::create_directories(cfg.run_dir);
  const std::filesystem::path dir(cfg.run_dir);
  cfg.to_kv().save(dir / "config.cfg");
  std::ofstream metrics(dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);

  auto save = [&](const std::string& name) {
    Checkpoint ck;
    ck.agent = params;
    ck.adam = adam.state;
    ck.iteration = iteration;
    ck.env_steps = env_steps;
    ck.curriculum_rates = cs.success_rates;
    ck.extra_json = checkpoint_extra(ctx);
    save_checkpoint(ck, dir / name);
  };

  BlueprintLibrary eval_lib;
  eval_lib.train = ctx.tasks;
  TrainResult result;
  const long long per_iteration = static_cast<long long>(cfg.ppo.n_workers) * cfg.ppo.envs_per_worker * cfg.ppo.rollout_length;
  const auto t0 = std::chrono::steady_clock::now();

  while (env_steps < cfg.total_env_steps) {
    auto snapshot = std::make_shared<const AgentParams<float>>(params);
    RolloutSpec spec{&cfg, &ctx, snapshot, &cs, iteration};
    std::vector<WorkerOutput> outs(cfg.ppo.n_workers);
    parallel_for(cfg.ppo.n_workers, cfg.ppo.n_workers, [&](int w) { outs[w] = run_worker(spec, w); });

    std::vector<Sample> samples;
    std::vector<EpisodeResult> results;
    IterationMetrics im;
    for (auto& o : outs) {
      for (auto& s : o.samples) samples.push_back(std::move(s));
      results.insert(results.end(), o.results.begin(), o.results.end());
      for (double r : o.episode_returns) im.mean_episode_return += r;
    }
    im.episodes = static_cast<int>(results.size());
    if (im.episodes) {
      im.mean_episode_return /= im.episodes;
      for (const auto& r : results) im.episode_success += r.success ? 1.0 : 0.0;
      im.episode_success /= im.episodes;
    }

    Rng learner = derived_rng(cfg.seed, static_cast<std::uint64_t>(iteration), 0, 0x1EA4);
    im.loss = ppo_update(params, adam, samples, cfg.ppo, learner);
    curriculum_update(cs, results);
    ++iteration;
    env_steps += per_iteration;
    im.iteration = iteration;
    im.env_steps = env_steps;

    const bool last = env_steps >= cfg.total_env_steps;
    if (cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || last)) {
      auto eval_params = std::make_shared<const AgentParams<float>>(params);
      im.eval = evaluate([eval_params](std::uint64_t s) { return agent_policy(eval_params, true, s); }, eval_lib,
                         EvalSplit::train, cfg.eval_episodes, ctx.blockset, cfg.env,
                         cfg.seed ^ static_cast<std::uint64_t>(iteration), cfg.ppo.n_workers);
      result.last_eval = im.eval;
    }
    im.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << im.to_json() << '\n';
    metrics.flush();
    if (cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0) save("latest.ckpt");
    if (on_iteration) on_iteration(im);
    result.history.push_back(im);
    if (cfg.stop_success > 0 && im.eval && im.eval->overall() >= cfg.stop_success) {
      result.stopped_early = true;
      break;
    }
  }
  save("final.ckpt");
  result.params = params;
  result.env_steps = env_steps;
  return result;
}

// Attention dump ---------------------------------------------------------------------------

std::vector<std::string> attention_dump(const AgentParams<float>& params, std::span<const GraphObs> trajectory) {
  std::vector<std::string> lines;
  for (std::size_t step = 0; step < trajectory.size(); ++step) {
    const auto layers = attention_matrices(params, trajectory[step]);
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (std::size_t h = 0; h < layers[l].size(); ++h) {
        const Eigen::MatrixXd& a = layers[l][h];
        json rows = json::array();
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          std::vector<double> row(a.cols());
          for (Eigen::Index j = 0; j < a.cols(); ++j) row[j] = a(i, j);
          rows.push_back(row);
        }
        json rec = {{"step", step}, {"layer", l}, {"head", h}, {"n", a.rows()}, {"matrix", rows}};
        lines.push_back(rec.dump());
      }
  }
  return lines;
}

}  // namespace magnaforge
