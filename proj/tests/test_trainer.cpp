#include <doctest.h>

#include "fixtures.hpp"
#include "magnaforge/errors.hpp"
#include "magnaforge/trainer.hpp"
#include "magnaforge/trajectory.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>

using namespace magnaforge;
using namespace magnaforge::testing;

namespace {

Advantages gae_vec(const std::vector<double>& r, const std::vector<double>& v, const std::vector<char>& d, double boot,
                   double gamma, double lambda) {
  std::unique_ptr<bool[]> dones(new bool[d.size()]);
  for (std::size_t i = 0; i < d.size(); ++i) dones[i] = d[i];
  return gae(r, v, std::span<const bool>(dones.get(), d.size()), boot, gamma, lambda);
}

/// Samples drawn from the network itself on random observations.
std::vector<Sample> on_policy_samples(const AgentParams<double>& p, const MicroScene& scene, Rng& rng) {
  std::vector<Sample> out;
  std::normal_distribution<double> n(0.0, 1.0);
  for (const auto& obs : scene.obs) {
    Sample s;
    s.obs = obs;
    auto a = sample_action(policy_forward(p, obs), rng);
    s.action = a.action;
    s.log_prob = a.log_prob;
    s.value = policy_forward(p, obs).value;
    s.advantage = n(rng);
    s.ret = n(rng);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& s) {
  std::vector<const Sample*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

TrainConfig micro_train_config(const std::filesystem::path& dir) {
  TrainConfig cfg;
  cfg.net = micro_net(Architecture::gat, 3);
  cfg.env.arena_half_size = 0.4;
  cfg.env.episode_len = 10;
  cfg.ppo.n_workers = 2;
  cfg.ppo.envs_per_worker = 2;
  cfg.ppo.rollout_length = 12;
  cfg.ppo.minibatch_size = 16;
  cfg.ppo.epochs = 2;
  cfg.total_env_steps = 2 * 2 * 12 * 2;
  cfg.eval_every = 0;
  cfg.checkpoint_every = 1;
  cfg.seed = 5;
  cfg.run_dir = dir.string();
  return cfg;
}

TrainContext micro_context() {
  TrainContext ctx;
  ctx.blockset = first_blocks(4);
  ctx.library = curated_blueprints(*ctx.blockset);
  return ctx;
}

}  // namespace

TEST_CASE("gae") {
  SUBCASE("single terminal step") {
    auto a = gae_vec({2.0}, {0.5}, {1}, 7.0, 0.9, 0.8);
    CHECK(a.advantages[0] == doctest::Approx(1.5));
    CHECK(a.returns[0] == doctest::Approx(2.0));
  }
  SUBCASE("lambda zero gives one-step TD") {
    auto a = gae_vec({1.0, 2.0, 3.0}, {0.1, 0.2, 0.3}, {0, 0, 0}, 0.5, 0.9, 1e-300);
    CHECK(a.advantages[0] == doctest::Approx(1.0 + 0.9 * 0.2 - 0.1));
    CHECK(a.advantages[1] == doctest::Approx(2.0 + 0.9 * 0.3 - 0.2));
    CHECK(a.advantages[2] == doctest::Approx(3.0 + 0.9 * 0.5 - 0.3));
  }
  SUBCASE("three-step hand sequence") {
    auto a = gae_vec({1, 0, 1}, {0.5, 0.2, 0.1}, {0, 0, 0}, 0.0, 0.9, 0.8);
    CHECK(a.advantages[2] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(a.advantages[1] == doctest::Approx(0.538).epsilon(1e-12));
    CHECK(a.advantages[0] == doctest::Approx(1.06736).epsilon(1e-12));
    CHECK(a.returns[0] == doctest::Approx(1.56736).epsilon(1e-12));
  }
  SUBCASE("matches the truncated sum of discounted residuals") {
    Rng rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    std::bernoulli_distribution done(0.15);
    for (int trial = 0; trial < 100; ++trial) {
      const int len = 1 + trial % 17;
      std::vector<double> r(len), v(len);
      std::vector<char> d(len);
      for (int i = 0; i < len; ++i) r[i] = n(rng), v[i] = n(rng), d[i] = done(rng);
      const double boot = n(rng), gamma = 0.97, lambda = 0.9;
      auto a = gae_vec(r, v, d, boot, gamma, lambda);
      for (int t = 0; t < len; ++t) {
        double sum = 0.0, w = 1.0;
        for (int l = t; l < len; ++l) {
          double next = l + 1 < len ? v[l + 1] : boot;
          sum += w * (r[l] + gamma * next * (d[l] ? 0.0 : 1.0) - v[l]);
          if (d[l]) break;
          w *= gamma * lambda;
        }
        CHECK(std::abs(a.advantages[t] - sum) < 1e-9);
      }
    }
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(gae_vec({1, 2}, {1}, {0, 0}, 0, 0.9, 0.9), LengthMismatch);
  }
}

TEST_CASE("curriculum") {
  SUBCASE("uniform start") {
    auto cs = CurriculumState::uniform(7);
    for (double p : cs.probs) CHECK(p == 1.0 / 7.0);
    for (double r : cs.success_rates) CHECK(r == 0.0);
  }
  SUBCASE("two blueprints, one success") {
    auto cs = CurriculumState::uniform(2);
    std::vector<EpisodeResult> res{{0, true}};
    curriculum_update(cs, res);
    CHECK(cs.success_rates[0] == doctest::Approx(0.198).epsilon(1e-12));
    CHECK(cs.success_rates[1] == 0.0);
    const double e = std::exp(1.604 - 2.0);
    CHECK(cs.probs[0] == doctest::Approx(e / (1 + e)).epsilon(1e-12));
    CHECK(cs.probs[0] == doctest::Approx(0.402).epsilon(1e-3));
    CHECK(cs.probs[1] == doctest::Approx(0.598).epsilon(1e-3));
  }
  SUBCASE("mastered blueprints are sampled less") {
    auto cs = CurriculumState::uniform(3);
    std::vector<EpisodeResult> res{{1, true}, {1, true}, {2, false}};
    curriculum_update(cs, res);
    CHECK(cs.probs[1] < cs.probs[0]);
    CHECK(cs.probs[0] == doctest::Approx(cs.probs[2]));
  }
  SUBCASE("probabilities stay a simplex with a positive floor") {
    Rng rng(9);
    auto cs = CurriculumState::uniform(5);
    std::uniform_int_distribution<int> pick(0, 4);
    std::bernoulli_distribution win(0.7);
    for (int i = 0; i < 500; ++i) {
      std::vector<EpisodeResult> res;
      for (int j = 0; j < 8; ++j) res.push_back({pick(rng), win(rng)});
      curriculum_update(cs, res);
      double sum = 0.0;
      for (double p : cs.probs) {
        sum += p;
        CHECK(p >= std::exp(-1.0 / cs.temp) / 5.0);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
      for (double r : cs.success_rates) CHECK((r >= 0.0 && r <= 1.0));
    }
  }
  SUBCASE("unknown blueprint") {
    auto cs = CurriculumState::uniform(2);
    std::vector<EpisodeResult> res{{2, true}};
    CHECK_THROWS_AS(curriculum_update(cs, res), std::out_of_range);
  }
}

TEST_CASE("blueprint sampling") {
  CurriculumState cs = CurriculumState::uniform(4);
  cs.probs = {0.1, 0.2, 0.3, 0.4};
  Rng a(1), b(1);
  for (int i = 0; i < 50; ++i) CHECK(sample_blueprint(cs, a, SamplingMode::curriculum) == sample_blueprint(cs, b, SamplingMode::curriculum));
  const int draws = 100000;
  for (auto mode : {SamplingMode::curriculum, SamplingMode::uniform}) {
    std::vector<int> counts(4, 0);
    Rng rng(17);
    for (int i = 0; i < draws; ++i) ++counts[sample_blueprint(cs, rng, mode)];
    for (int k = 0; k < 4; ++k) {
      const double p = mode == SamplingMode::uniform ? 0.25 : cs.probs[k];
      const double sigma = std::sqrt(draws * p * (1 - p));
      CHECK(std::abs(counts[k] - draws * p) < 3 * sigma);
    }
  }
}

TEST_CASE("ppo loss gradient matches finite differences") {
  for (auto arch : {Architecture::gat, Architecture::no_attention, Architecture::resnet}) {
    CAPTURE(to_string(arch));
    MicroScene scene(3, 4, 21);
    AgentParams<double> p = init_params<double>(micro_net(arch, 3), 4);
    Rng rng(2);
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& v : p.params.values)
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += n(rng);
    auto samples = on_policy_samples(p, scene, rng);
    // ratios well inside and well outside the clip range, away from the kinks
    const double shifts[] = {0.05, -0.6, 0.7, -0.1};
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i].log_prob += shifts[i];
    PPOConfig cfg;
    auto ptrs = pointers(samples);
    auto [st, g] = ppo_loss<double>(p, ptrs, cfg);
    const double h = 1e-6;
    for (int k = 0; k < p.params.size(); ++k)
      for (Eigen::Index i = 0; i < p.params.values[k].size(); ++i) {
        double& x = p.params.values[k].data()[i];
        const double keep = x;
        x = keep + h;
        double up = ppo_loss<double>(p, ptrs, cfg).first.total;
        x = keep - h;
        double down = ppo_loss<double>(p, ptrs, cfg).first.total;
        x = keep;
        double fd = (up - down) / (2 * h), an = g.values[k].data()[i];
        INFO(p.params.names[k], "[", i, "] analytic ", an, " numeric ", fd);
        CHECK(std::abs(an - fd) <= 1e-6 + 1e-3 * std::max(std::abs(an), std::abs(fd)));
      }
  }
}

TEST_CASE("ppo ratio identity and zero advantages") {
  MicroScene scene(3, 6, 8);
  AgentParams<double> p = init_params<double>(micro_net(Architecture::gat, 3), 1);
  Rng rng(4);
  auto samples = on_policy_samples(p, scene, rng);
  PPOConfig cfg;
  auto [st, g] = ppo_loss<double>(p, pointers(samples), cfg);
  double mean_adv = 0.0;
  for (const auto& s : samples) mean_adv += s.advantage / samples.size();
  CHECK(st.clip_fraction == 0.0);
  CHECK(std::abs(st.approx_kl) < 1e-9);
  CHECK(st.policy == doctest::Approx(-mean_adv).epsilon(1e-9));

  for (auto& s : samples) s.advantage = 0.0;
  auto zero = ppo_loss<double>(p, pointers(samples), cfg).first;
  CHECK(zero.policy == 0.0);
}

TEST_CASE("advantage normalization") {
  std::vector<Sample> s(37);
  Rng rng(5);
  std::normal_distribution<double> n(3.0, 7.0);
  for (auto& x : s) x.advantage = n(rng);
  normalize_advantages(s);
  double mean = 0.0, var = 0.0;
  for (const auto& x : s) mean += x.advantage / s.size();
  for (const auto& x : s) var += (x.advantage - mean) * (x.advantage - mean) / s.size();
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
}

TEST_CASE("adam step and gradient clipping") {
  ParamSet<float> p, g;
  p.add("w", Mat<float>::Constant(1, 2, 1.0f));
  g.add("w", (Mat<float>(1, 2) << 3.0f, -4.0f).finished());
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.values[0](0, 0) == doctest::Approx(0.6f));
  PPOConfig cfg;
  Adam adam;
  adam.step(p, g, cfg);
  // first bias-corrected step moves each weight by lr against the gradient sign
  CHECK(p.values[0](0, 0) == doctest::Approx(1.0 - cfg.learning_rate).epsilon(1e-5));
  CHECK(p.values[0](0, 1) == doctest::Approx(1.0 + cfg.learning_rate).epsilon(1e-5));
  CHECK(adam.state.t == 1);
}

TEST_CASE("non-finite loss leaves parameters untouched") {
  MicroScene scene(3, 4, 2);
  AgentParams<double> pd = init_params<double>(micro_net(Architecture::gat, 3), 3);
  Rng rng(1);
  auto samples = on_policy_samples(pd, scene, rng);
  samples[1].ret = std::numeric_limits<double>::quiet_NaN();
  AgentParams<float> p = pd.cast<float>();
  const AgentParams<float> before = p;
  Adam adam;
  PPOConfig cfg;
  cfg.minibatch_size = 2;
  CHECK_THROWS_AS(ppo_update(p, adam, samples, cfg, rng), NonFiniteLoss);
  for (int k = 0; k < p.params.size(); ++k) CHECK(p.params.values[k] == before.params.values[k]);
  CHECK(adam.state.t == 0);
}

TEST_CASE("train config") {
  TrainConfig c;
  c.ppo.epochs = 3;
  c.blueprints = "a,b";
  c.seed = 12345678901234ULL;
  TrainConfig r = TrainConfig::from_kv(c.to_kv());
  CHECK(r.to_kv().dump() == c.to_kv().dump());
  KeyValues bad = c.to_kv();
  bad.set("ppo.epoch", 3);
  CHECK_THROWS_AS(TrainConfig::from_kv(bad), ConfigError);

  apply_mode(c, "delay:2");
  CHECK(c.env.gripper_transition_delay == 2);
  apply_mode(c, "single:cur-02-cubes");
  CHECK(c.blueprints == "cur-02-cubes");
  apply_mode(c, "no-attention");
  CHECK(c.net.architecture == Architecture::no_attention);
  apply_mode(c, "single-gripper");
  CHECK(c.env.n_grippers == 1);
  apply_mode(c, "no-curriculum");
  CHECK_FALSE(c.use_curriculum);
  CHECK_THROWS_AS(apply_mode(c, "delay:x"), ConfigError);
  CHECK_THROWS_AS(apply_mode(c, "fast"), ConfigError);

  setenv("MAGNAFORGE_WORKERS", "3", 1);
  CHECK(resolve_workers(8) == 3);
  unsetenv("MAGNAFORGE_WORKERS");
  CHECK(resolve_workers(8) == 8);
}

TEST_CASE("evaluation harness") {
  auto bs = std::shared_ptr<const BlockSet>(first_blocks(4));
  BlueprintLibrary lib = curated_blueprints(*bs);
  EnvConfig env;
  env.arena_half_size = 0.4;

  auto oracle = evaluate(teleport_oracle, lib, EvalSplit::all, 3, bs, env, 1, 2);
  for (const auto& [id, rate] : oracle.per_blueprint) CHECK(rate == 1.0);
  CHECK(oracle.buckets.size() == 4);
  for (const char* key : {"train2_6", "train7_11", "train12_16", "test12_16"}) CHECK(oracle.buckets.count(key) == 1);
  CHECK(oracle.buckets.at("train2_6") == 1.0);
  CHECK_FALSE(oracle.buckets.at("train7_11").has_value());
  CHECK_FALSE(oracle.test_all.has_value());
  auto parsed = nlohmann::json::parse(oracle.to_json());
  CHECK(parsed["buckets"]["test12_16"].is_null());

  auto params = std::make_shared<const AgentParams<float>>(init_params<float>(micro_net(Architecture::gat, 4), 0));
  auto untrained = evaluate([params](std::uint64_t s) { return agent_policy(params, true, s); }, lib, EvalSplit::train, 1,
                            bs, env, 2);
  for (const auto& [id, rate] : untrained.per_blueprint) CHECK((rate == 0.0 || rate == 1.0));
  CHECK(untrained.per_blueprint.at("cur-04-chain") == 0.0);

  CHECK(parse_split("test") == EvalSplit::test);
  CHECK_THROWS_AS(parse_split("val"), ConfigError);
}

TEST_CASE("reset-free harness with the oracle") {
  auto bs = std::shared_ptr<const BlockSet>(first_blocks(4));
  BlueprintLibrary lib = curated_blueprints(*bs);
  EnvConfig env;
  env.arena_half_size = 0.4;
  auto rep = reset_free_eval(teleport_oracle, lib, 3, 10, 3, 100, bs, env, 4);
  CHECK(rep.mean == 1.0);
  CHECK(rep.std == 0.0);
  REQUIRE(rep.per_episode.size() == 3);
  for (const auto& ep : rep.per_episode) CHECK(ep.size() == 10);
  auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j.contains("mean"));
  CHECK(j.contains("std"));
  CHECK(j["per_episode"].size() == 3);
  CHECK_THROWS_AS(reset_free_eval(teleport_oracle, lib, 1, 1, 12, 100, bs, env, 4), ConfigError);
}

TEST_CASE("training is deterministic and resumable") {
  const auto root = std::filesystem::temp_directory_path() / "magnaforge_train_test";
  std::filesystem::remove_all(root);
  TrainContext ctx = micro_context();
  ctx.tasks = {ctx.library.train[0], ctx.library.train[1]};

  TrainConfig cfg = micro_train_config(root / "a");
  auto a = train(cfg, ctx);
  cfg.run_dir = (root / "b").string();
  auto b = train(cfg, ctx);
  REQUIRE(a.history.size() == 2);
  for (int k = 0; k < a.params.params.size(); ++k) CHECK(a.params.params.values[k] == b.params.params.values[k]);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    auto ja = nlohmann::json::parse(a.history[i].to_json()), jb = nlohmann::json::parse(b.history[i].to_json());
    ja.erase("wall_seconds");
    jb.erase("wall_seconds");
    CHECK(ja == jb);
  }
  CHECK(std::filesystem::exists(root / "a" / "final.ckpt"));
  CHECK(std::filesystem::exists(root / "a" / "metrics.jsonl"));

  TrainConfig half = micro_train_config(root / "c");
  half.total_env_steps /= 2;
  train(half, ctx);
  TrainConfig rest = micro_train_config(root / "d");
  auto resumed = train(rest, ctx, root / "c" / "final.ckpt");
  REQUIRE(resumed.history.size() == 1);
  CHECK(resumed.history[0].iteration == 2);
  for (int k = 0; k < a.params.params.size(); ++k) CHECK(resumed.params.params.values[k] == a.params.params.values[k]);

  TrainConfig other = rest;
  other.net.d_model = 16;
  CHECK_THROWS_AS(train(other, ctx, root / "c" / "final.ckpt"), ShapeError);
  std::filesystem::remove_all(root);
}

TEST_CASE("attention dump") {
  MicroScene scene(4, 3, 6);
  AgentParams<float> p = init_params<float>(micro_net(Architecture::gat, 4), 2);
  auto lines = attention_dump(p, scene.obs);
  CHECK(lines.size() == 3 * 2 * 2);
  for (const auto& line : lines) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["n"] == 4);
    const auto& m = j["matrix"];
    REQUIRE(m.size() == 4);
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int k = 0; k < 4; ++k) sum += m[i][k].get<double>();
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
      CHECK(m[i][i].get<double>() == 0.0);
    }
  }
  // relabeling the blocks relabels the matrices
  const std::vector<int> perm{2, 0, 3, 1};
  GraphObs permuted = permute_obs(scene.obs[0], perm);
  auto base = attention_matrices(p, scene.obs[0]);
  auto moved = attention_matrices(p, permuted);
  for (std::size_t l = 0; l < base.size(); ++l)
    for (std::size_t h = 0; h < base[l].size(); ++h)
      for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 4; ++k) CHECK(std::abs(moved[l][h](perm[i], perm[k]) - base[l][h](i, k)) < 1e-5);
}

TEST_CASE("trajectory replay") {
  auto bs = std::shared_ptr<const BlockSet>(first_blocks(4));
  BlueprintLibrary lib = curated_blueprints(*bs);
  EnvConfig env;
  env.arena_half_size = 0.4;
  auto log = record_trajectory(bs, env, lib.train[1], random_policy(3), {11, &lib.train[0], 40});
  CHECK(log.lines.size() == 41);
  auto rep = replay_trajectory(log);
  CHECK(rep.identical);
  CHECK(rep.steps == 40);
  CHECK(trajectory_observations(log).size() == 40);

  auto tampered = log;
  auto rec = nlohmann::json::parse(tampered.lines[6]);
  rec["action"]["block_moves"][rec["action"]["gripper_choice"][0].get<int>()][0] = 1.25;
  tampered.lines[6] = rec.dump();
  auto bad = replay_trajectory(tampered);
  CHECK_FALSE(bad.identical);
  CHECK(bad.first_divergent_step == 5);

  TrajectoryLog junk;
  junk.lines = {"{\"type\":\"step\"}"};
  CHECK_THROWS_AS(replay_trajectory(junk), ParseError);
}
