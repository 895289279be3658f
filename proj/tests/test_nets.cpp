#include <doctest.h>

#include "fixtures.hpp"
#include "magnaforge/errors.hpp"
#include "magnaforge/nets.hpp"

#include <filesystem>
#include <fstream>

using namespace magnaforge;
using namespace magnaforge::testing;

namespace {

// Random linear functional of the outputs: L = <R, outputs>.
OutputGrads<double> random_probe(const NetConfig& cfg, int batch, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  auto fill = [&](int r, int c) {
    Mat<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
  };
  return {fill(batch * cfg.n_grippers, cfg.n_blocks), fill(batch * cfg.n_blocks, 6), fill(1, 6), fill(batch, 1)};
}

double probe_loss(const AgentParams<double>& p, const ObsBatch<double>& batch, const OutputGrads<double>& r) {
  Tape<double> t;
  auto f = build_forward(t, p, batch);
  return (t.value(f.logits).array() * r.logits.array()).sum() + (t.value(f.move_mean).array() * r.move_mean.array()).sum() +
         (t.value(f.log_std).array() * r.log_std.array()).sum() + (t.value(f.value).array() * r.value.array()).sum();
}

void check_gradients(Architecture arch, std::uint64_t seed) {
  MicroScene scene(3, 2, seed);
  NetConfig cfg = micro_net(arch, 3);
  AgentParams<double> p = init_params<double>(cfg, seed);
  // non-trivial norm parameters and biases
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& v : p.params.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += n(rng);
  ObsBatch<double> batch = make_batch<double>(scene.obs, cfg);
  OutputGrads<double> probe = random_probe(cfg, batch.batch, rng);
  ParamSet<double> g = backward(p, batch, probe);
  int checked = 0;
  const double h = 1e-6;
  for (int k = 0; k < p.params.size(); ++k) {
    for (Eigen::Index i = 0; i < p.params.values[k].size(); ++i) {
      double& x = p.params.values[k].data()[i];
      const double keep = x;
      x = keep + h;
      double up = probe_loss(p, batch, probe);
      x = keep - h;
      double down = probe_loss(p, batch, probe);
      x = keep;
      double fd = (up - down) / (2 * h);
      double an = g.values[k].data()[i];
      INFO(p.params.names[k], "[", i, "] analytic ", an, " numeric ", fd);
      CHECK(std::abs(an - fd) <= 1e-6 + 1e-3 * std::max(std::abs(an), std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked == p.params.count());
}

}  // namespace

TEST_CASE("net config round trip and validation") {
  NetConfig c = micro_net(Architecture::no_attention, 5);
  NetConfig back = NetConfig::from_kv(KeyValues::parse(c.to_kv().dump()));
  CHECK(back.architecture == Architecture::no_attention);
  CHECK(back.d_model == 8);
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(parse_architecture("mlp"), ConfigError);
}

TEST_CASE("initializer follows fan-out variance scaling") {
  NetConfig c;
  AgentParams<double> p = init_params<double>(c, 1);
  const auto& w = p.params["critic.fc1.w"];  // 128 x 512
  double limit = std::sqrt(3 * 0.333 / 512);
  CHECK(w.cwiseAbs().maxCoeff() <= limit);
  CHECK(w.cwiseAbs().maxCoeff() > 0.9 * limit);
  // uniform(-a, a) variance a^2 / 3 = scale / fan_out
  double var = w.array().square().mean();
  CHECK(var == doctest::Approx(0.333 / 512).epsilon(0.05));
  CHECK(p.params["critic.fc1.b"].isZero(0.0));
  CHECK(p.params["head.log_std"].isApproxToConstant(std::log(0.5)));
  CHECK(init_params<double>(c, 1).params.values == p.params.values);
}

TEST_CASE("gradients match finite differences: graph attention") { check_gradients(Architecture::gat, 3); }
TEST_CASE("gradients match finite differences: uniform aggregation") { check_gradients(Architecture::no_attention, 4); }
TEST_CASE("gradients match finite differences: flat residual network") { check_gradients(Architecture::resnet, 5); }

TEST_CASE("gradient of a constant loss is zero") {
  MicroScene scene(3, 1, 9);
  NetConfig cfg = micro_net(Architecture::gat, 3);
  auto p = init_params<double>(cfg, 2);
  auto batch = make_batch<double>(scene.obs, cfg);
  OutputGrads<double> zero{Mat<double>::Zero(2, 3), Mat<double>::Zero(3, 6), Mat<double>::Zero(1, 6), Mat<double>::Zero(1, 1)};
  auto g = backward(p, batch, zero);
  for (const auto& v : g.values) CHECK(v.isZero(0.0));
}

TEST_CASE("zero weights and offsets give zero embeddings") {
  MicroScene scene(3, 1, 10);
  auto p = init_params<double>(micro_net(Architecture::gat, 3), 2);
  for (auto& v : p.params.values) v.setZero();
  auto [node_h, global_h] = encode(p, scene.obs[0]);
  CHECK(node_h.isZero(0.0));
  CHECK(global_h.isZero(0.0));
}

TEST_CASE("batched forward equals per-observation forward") {
  MicroScene scene(4, 5, 11);
  for (auto arch : {Architecture::gat, Architecture::no_attention, Architecture::resnet}) {
    auto p = init_params<double>(micro_net(arch, 4), 3);
    auto all = policy_forward_batch(p, scene.obs);
    for (std::size_t i = 0; i < scene.obs.size(); ++i) {
      auto one = policy_forward(p, scene.obs[i]);
      CHECK((one.select_logits - all[i].select_logits).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((one.move_mean - all[i].move_mean).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(one.value == doctest::Approx(all[i].value).epsilon(1e-12));
    }
  }
}

TEST_CASE("policy is permutation equivariant") {
  auto bs = std::make_shared<BlockSet>(default_blockset());
  EnvConfig cfg;
  BlueprintLibrary lib = generate_blueprints(*bs, 2, 4, 3, 8);
  NetConfig nc = micro_net(Architecture::gat, 16);
  nc.d_model = 16;
  for (auto arch : {Architecture::gat, Architecture::no_attention}) {
    nc.architecture = arch;
    auto p = init_params<double>(nc, 4);
    Rng rng(12);
    for (int i = 0; i < 10; ++i) {
      const Blueprint& bp = lib.train[i % lib.train.size()];
      WorldState s = random_world(*bs, bp, cfg, rng);
      auto perm = type_preserving_permutation(*bs, rng);
      auto [ps, pbp] = relabeled(s, bp, perm);
      PolicyOutput a = policy_forward(p, build_obs(s, bp, *bs, cfg));
      PolicyOutput b = policy_forward(p, build_obs(ps, pbp, *bs, cfg));
      for (int blk = 0; blk < 16; ++blk) {
        CHECK((a.select_logits.col(blk) - b.select_logits.col(perm[blk])).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((a.move_mean.row(blk) - b.move_mean.row(perm[blk])).cwiseAbs().maxCoeff() < 1e-9);
      }
      CHECK(a.value == doctest::Approx(b.value).epsilon(1e-9));
    }
  }
}

TEST_CASE("flat network is not permutation equivariant") {
  auto bs = std::make_shared<BlockSet>(default_blockset());
  EnvConfig cfg;
  BlueprintLibrary lib = generate_blueprints(*bs, 2, 4, 3, 8);
  auto p = init_params<double>(micro_net(Architecture::resnet, 16), 4);
  Rng rng(13);
  const Blueprint& bp = lib.train.front();
  WorldState s = random_world(*bs, bp, cfg, rng);
  std::vector<int> perm = type_preserving_permutation(*bs, rng);
  std::swap(perm[0], perm[1]);  // guarantee a non-identity relabeling of two cubes
  auto [ps, pbp] = relabeled(s, bp, perm);
  PolicyOutput a = resnet_forward(p, build_obs(s, bp, *bs, cfg));
  PolicyOutput b = resnet_forward(p, build_obs(ps, pbp, *bs, cfg));
  double diff = 0;
  for (int blk = 0; blk < 16; ++blk) diff = std::max(diff, (a.select_logits.col(blk) - b.select_logits.col(perm[blk])).cwiseAbs().maxCoeff());
  CHECK(diff > 1e-6);
  // fixed input width
  MicroScene small(3, 1, 1);
  CHECK_THROWS_AS(resnet_forward(p, small.obs[0]), ShapeError);
}

TEST_CASE("attention rows are probability vectors") {
  MicroScene scene(5, 3, 14);
  NetConfig nc = micro_net(Architecture::gat, 5);
  auto p = init_params<double>(nc, 5);
  for (const auto& o : scene.obs) {
    auto att = attention_matrices(p, o);
    REQUIRE(att.size() == 2);
    for (const auto& layer : att) {
      REQUIRE(layer.size() == 2);
      for (const auto& m : layer) {
        CHECK(m.rows() == 5);
        CHECK(m.minCoeff() >= 0.0);
        CHECK(m.diagonal().isZero(0.0));
        for (int r = 0; r < 5; ++r) CHECK(m.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("uniform aggregation") {
  MicroScene scene(4, 1, 15);
  auto p = init_params<double>(micro_net(Architecture::gat, 4), 6);
  // differs from attention on an asymmetric state
  auto [ha, ga] = encode(p, scene.obs[0]);
  auto [hu, gu] = encode_no_attention(p, scene.obs[0]);
  CHECK((ha - hu).cwiseAbs().maxCoeff() > 1e-6);
  // with all query maps zero every score is equal, so attention is uniform
  for (int l = 0; l < 2; ++l) {
    p.params.values[p.params.index("layer" + std::to_string(l) + ".query")].setZero();
    p.params.values[p.params.index("layer" + std::to_string(l) + ".global_query")].setZero();
  }
  auto [hz, gz] = encode(p, scene.obs[0]);
  auto [hzu, gzu] = encode_no_attention(p, scene.obs[0]);
  CHECK((hz - hzu).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((gz - gzu).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("key scaling scales logits and keeps the argmax") {
  MicroScene scene(4, 1, 16);
  auto p = init_params<double>(micro_net(Architecture::gat, 4), 7);
  PolicyOutput a = policy_forward(p, scene.obs[0]);
  p.params.values[p.params.index("head.key.w")] *= 2.5;
  p.params.values[p.params.index("head.key.b")] *= 2.5;
  PolicyOutput b = policy_forward(p, scene.obs[0]);
  CHECK((b.select_logits - 2.5 * a.select_logits).cwiseAbs().maxCoeff() < 1e-12);
  for (int g = 0; g < 2; ++g) {
    Eigen::Index ia, ib;
    a.select_logits.row(g).maxCoeff(&ia);
    b.select_logits.row(g).maxCoeff(&ib);
    CHECK(ia == ib);
  }
}

TEST_CASE("value equals the critic applied to the global embedding") {
  MicroScene scene(3, 1, 17);
  auto p = init_params<double>(micro_net(Architecture::gat, 3), 8);
  for (auto& v : p.params.values) v.array() += 0.01;
  auto [h, g] = encode(p, scene.obs[0]);
  auto dense = [&](const Mat<double>& x, const std::string& name) -> Mat<double> {
    return (x * p.params[name + ".w"]).rowwise() + p.params[name + ".b"].row(0);
  };
  Mat<double> c = dense(g, "critic.fc1").cwiseMax(0.0);
  c = dense(c, "critic.fc2").cwiseMax(0.0);
  double v = dense(c, "critic.fc3")(0, 0);
  CHECK(policy_forward(p, scene.obs[0]).value == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("action distribution") {
  PolicyOutput out;
  out.select_logits.resize(2, 3);
  out.select_logits << 0.5, -1.0, 2.0, 0.0, 0.0, 0.0;
  out.move_mean.setZero(3, 6);
  out.move_mean.row(2) << 0.1, -0.2, 0.3, 0.0, 1.0, -1.0;
  out.move_log_std.setConstant(std::log(0.5));

  SUBCASE("deterministic mode") {
    Rng a(1), b(2);
    ActionSample s = sample_action(out, a, true);
    ActionSample t = sample_action(out, b, true);
    CHECK(s.action.gripper_choice == std::vector<int>{2, 0});
    CHECK(s.action.block_moves == t.action.block_moves);
    CHECK(s.action.block_moves == out.move_mean);
  }
  SUBCASE("log-prob by hand") {
    Action act;
    act.gripper_choice = {2, 2};
    act.block_moves = out.move_mean;
    act.block_moves(2, 0) += 0.5;
    Eigen::Vector3d z(0.5, -1.0, 2.0);
    double lse = std::log(z.array().exp().sum());
    double cat = (2.0 - lse) + std::log(1.0 / 3.0);
    // only block 2 counts, once; one coordinate is one sigma off
    double gauss = 6 * (-std::log(0.5) - 0.5 * std::log(2 * M_PI)) - 0.5;
    CHECK(log_prob(out, act) == doctest::Approx(cat + gauss).epsilon(1e-12));
  }
  SUBCASE("sampled moves average to the mean") {
    Rng rng(3);
    const int n = 100000;
    Eigen::Matrix<double, 6, 1> sum = Eigen::Matrix<double, 6, 1>::Zero();
    int count = 0;
    std::vector<int> hits(3, 0);
    for (int i = 0; i < n; ++i) {
      ActionSample s = sample_action(out, rng);
      hits[s.action.gripper_choice[1]]++;
      CHECK(std::isfinite(s.log_prob));
      if (s.action.gripper_choice[0] == 2) {
        sum += s.action.block_moves.row(2).transpose();
        ++count;
      }
    }
    Eigen::Matrix<double, 6, 1> mean = sum / count;
    for (int k = 0; k < 6; ++k) CHECK(std::abs(mean[k] - out.move_mean(2, k)) < 3 * 0.5 / std::sqrt(count));
    for (int j = 0; j < 3; ++j) CHECK(std::abs(hits[j] / double(n) - 1.0 / 3) < 3 * std::sqrt(2.0 / 9 / n));
  }
  SUBCASE("entropy by hand") {
    Eigen::Vector3d z(0.5, -1.0, 2.0);
    Eigen::Vector3d pr = z.array().exp() / z.array().exp().sum();
    double h = -(pr.array() * pr.array().log()).sum() + std::log(3.0);
    h += 2 * 6 * (std::log(0.5) + 0.5 * std::log(2 * M_PI * M_E));
    CHECK(entropy(out) == doctest::Approx(h).epsilon(1e-12));
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint ck;
  ck.agent = init_params<float>(micro_net(Architecture::gat, 4), 9);
  ck.adam.m = ck.agent.params.zeros_like();
  ck.adam.v = ck.agent.params.zeros_like();
  ck.adam.m.values[3].setConstant(0.25f);
  ck.adam.t = 17;
  ck.iteration = 5;
  ck.env_steps = 12345;
  ck.curriculum_rates = {0.1, 0.2};
  ck.extra_json = R"({"run":"x"})";
  auto path = std::filesystem::temp_directory_path() / "magnaforge_ck_test.bin";
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.agent.params.names == ck.agent.params.names);
  CHECK(back.agent.params.values == ck.agent.params.values);
  CHECK(back.adam.m.values == ck.adam.m.values);
  CHECK(back.adam.t == 17);
  CHECK(back.iteration == 5);
  CHECK(back.env_steps == 12345);
  CHECK(back.curriculum_rates == ck.curriculum_rates);
  CHECK(back.extra_json == ck.extra_json);
  CHECK(back.agent.config.d_model == 8);
  {
    std::ofstream junk(path, std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}
