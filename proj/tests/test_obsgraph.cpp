#include <doctest.h>

#include "magnaforge/obsgraph.hpp"
#include "magnaforge/simenv.hpp"

#include <numeric>

using namespace magnaforge;

namespace {

struct Scene {
  std::shared_ptr<BlockSet> bs = std::make_shared<BlockSet>(default_blockset());
  EnvConfig cfg;
  BlueprintLibrary lib = generate_blueprints(*bs, 31, 8, 3, 10);
};

// Random world: some blueprint pairs prebuilt, random grippers and velocities.
WorldState random_state(const Scene& sc, const Blueprint& bp, Rng& rng) {
  WorldState s = prebuilt_world(bp, *sc.bs, sc.cfg, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> pick(-1, sc.bs->size() - 1);
  for (auto& p : s.poses) {
    p.position += 0.02 * Vec3d(n(rng), n(rng), std::abs(n(rng)));
    p.orientation = normalized<double>(from_rotation_vector<double>(0.2 * Vec3d(n(rng), n(rng), n(rng))) * p.orientation);
  }
  for (int g = 0; g < sc.cfg.n_grippers; ++g) {
    int c = pick(rng);
    if (c >= 0) s.gripper_holding[g] = c;
    s.gripper_linear_velocity[g] = Vec3d(n(rng), n(rng), n(rng));
    s.gripper_angular_velocity[g] = Vec3d(n(rng), n(rng), n(rng));
  }
  return s;
}

WorldState transformed(WorldState s, const Posed& g) {
  for (auto& p : s.poses) p = compose(g, p);
  return s;
}

}  // namespace

TEST_CASE("layout and shapes") {
  ObsDims d = obs_dims(16, 2);
  CHECK(d.d_node == 3);
  CHECK(d.n_edges == 240);
  CHECK(d.d_edge == 23);
  CHECK(d.d_global == 2 * 26);
  CHECK(d.flat_size() == 16 * 3 + 240 * 23 + 52);
  for (int n : {2, 5}) {
    std::vector<bool> seen(n * (n - 1), false);
    for (int s = 0; s < n; ++s)
      for (int t = 0; t < n; ++t)
        if (s != t) seen[edge_index(n, s, t)] = true;
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
  }
}

TEST_CASE("realized blueprint has zero blueprint error") {
  Scene sc;
  Rng rng(1);
  for (const auto& bp : sc.lib.train) {
    WorldState s = prebuilt_world(bp, *sc.bs, sc.cfg, rng);
    GraphObs obs = build_obs(s, bp, *sc.bs, sc.cfg);
    const int n = sc.bs->size();
    for (int e = 0; e < obs.edges.rows(); ++e) {
      auto row = obs.edges.row(e);
      CHECK(row.segment<3>(edge_feature::blueprint_dp).norm() < 1e-9);
      CHECK(row.segment<6>(edge_feature::blueprint_dq).norm() < 1e-9);
      if (row[edge_feature::should_connect] == 1.0) {
        CHECK(row[edge_feature::is_connected] == 1.0);
        CHECK(row.segment<9>(edge_feature::magnet_dp).norm() < 1e-9);
      }
      int rev = edge_index(n, obs.dst[e], obs.src[e]);
      CHECK(obs.edges(rev, edge_feature::should_connect) == row[edge_feature::should_connect]);
      CHECK(obs.edges(rev, edge_feature::is_connected) == row[edge_feature::is_connected]);
    }
    CHECK(obs.nodes.col(0).minCoeff() >= 0.0);
  }
}

TEST_CASE("non-blueprint pairs carry zeroed blueprint features") {
  Scene sc;
  Rng rng(2);
  const Blueprint& bp = sc.lib.train.front();
  GraphObs obs = build_obs(random_state(sc, bp, rng), bp, *sc.bs, sc.cfg);
  for (int e = 0; e < obs.edges.rows(); ++e) {
    if (bp.connection_between(obs.src[e], obs.dst[e])) continue;
    CHECK(obs.edges.row(e).segment<18>(0).isZero(0.0));
    CHECK(obs.edges(e, edge_feature::should_connect) == 0.0);
  }
}

TEST_CASE("magnet features point at the partner magnet") {
  auto bs = std::make_shared<BlockSet>(default_blockset());
  bs->instance_type.assign(2, 0);
  EnvConfig cfg;
  Blueprint bp = build_blueprint(*bs, "pair", 0, {{{0, 0}, {1, 1}, 0.0}});
  WorldState s = empty_world(*bs, cfg);
  s.poses[0] = Posed(Vec3d(0, 0, 0.05), rot_z(0.3));
  s.poses[1] = Posed(Vec3d(0.5, 0.2, 0.05), rot_z(-0.4));
  GraphObs obs = build_obs(s, bp, *bs, cfg);
  auto row = obs.edges.row(edge_index(2, 1, 0));
  // moving block 1 by R1 * dp brings its magnet onto block 0's magnet
  Vec3d dp = row.segment<3>(edge_feature::magnet_dp);
  Vec3d want = magnet_anchor(*bs, s.poses[0], {0, 0}) - magnet_anchor(*bs, s.poses[1], {1, 1});
  CHECK((s.poses[1].rotation() * dp + want).norm() < 1e-12);
  // misalignment is the 0.7 rad yaw difference
  Eigen::Matrix<double, 6, 1> dq = row.segment<6>(edge_feature::magnet_dq);
  Mat3d r = Mat3d::Identity();
  r.col(0) += dq.head<3>();
  r.col(1) += dq.tail<3>();
  CHECK(std::acos(std::clamp(r(0, 0), -1.0, 1.0)) == doctest::Approx(0.7));
}

TEST_CASE("global features") {
  Scene sc;
  Rng rng(3);
  const Blueprint& bp = sc.lib.train.front();
  WorldState s = random_state(sc, bp, rng);
  s.gripper_holding = {4, std::nullopt};
  GraphObs obs = build_obs(s, bp, *sc.bs, sc.cfg);
  const int w = global_feature::width(16);
  for (int g = 0; g < 2; ++g) CHECK(obs.global.segment(g * w + global_feature::held, 17).sum() == 1.0);
  CHECK(obs.global[global_feature::held + 4] == 1.0);
  CHECK(obs.global[w + global_feature::held + 16] == 1.0);
  CHECK(obs.global.segment<3>(w + global_feature::up).isZero(0.0));
  CHECK(obs.nodes(4, 1) == 1.0);
  Eigen::VectorXd inv = invariant_global(obs);
  CHECK(inv.size() == 20);
  CHECK(inv[9] == 0.0);
  CHECK(inv[19] == 1.0);
}

TEST_CASE("ground-preserving rigid motion leaves the observation unchanged") {
  Scene sc;
  Rng rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const Blueprint& bp = sc.lib.train[i % sc.lib.train.size()];
    WorldState s = random_state(sc, bp, rng);
    Posed g(Vec3d(u(rng), u(rng), 0.0), rot_z(u(rng)));
    GraphObs a = build_obs(s, bp, *sc.bs, sc.cfg);
    GraphObs b = build_obs(transformed(s, g), bp, *sc.bs, sc.cfg);
    CHECK((flat_features(a) - flat_features(b)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("edge features are invariant to any rigid motion") {
  Scene sc;
  Rng rng(5);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 50; ++i) {
    const Blueprint& bp = sc.lib.train[i % sc.lib.train.size()];
    WorldState s = random_state(sc, bp, rng);
    Posed g(Vec3d(n(rng), n(rng), n(rng)), Quatd(n(rng), n(rng), n(rng), n(rng)).normalized());
    GraphObs a = build_obs(s, bp, *sc.bs, sc.cfg);
    GraphObs b = build_obs(transformed(s, g), bp, *sc.bs, sc.cfg);
    CHECK((a.edges - b.edges).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("relabeling blocks permutes the observation") {
  Scene sc;
  Rng rng(6);
  const int n = sc.bs->size();
  for (int i = 0; i < 20; ++i) {
    const Blueprint& bp = sc.lib.train[i % sc.lib.train.size()];
    WorldState s = random_state(sc, bp, rng);
    GraphObs obs = build_obs(s, bp, *sc.bs, sc.cfg);

    // permute among blocks of the same type so the relabeled world is physically the same
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int t = 0; t < static_cast<int>(sc.bs->types.size()); ++t) {
      std::vector<int> same;
      for (int b = 0; b < n; ++b)
        if (sc.bs->instance_type[b] == t) same.push_back(b);
      std::vector<int> shuffled = same;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      for (std::size_t k = 0; k < same.size(); ++k) perm[same[k]] = shuffled[k];
    }
    WorldState ps = s;
    for (int b = 0; b < n; ++b) ps.poses[perm[b]] = s.poses[b];
    for (auto& h : ps.gripper_holding)
      if (h) h = perm[*h];
    for (auto& c : ps.connections) c = Connection::make({perm[c.a.block], c.a.magnet}, {perm[c.b.block], c.b.magnet});
    std::sort(ps.connections.begin(), ps.connections.end());
    Blueprint pbp = bp;
    pbp.connections.clear();
    for (const auto& c : bp.connections)
      pbp.connections.push_back(Connection::make({perm[c.a.block], c.a.magnet}, {perm[c.b.block], c.b.magnet}));
    std::sort(pbp.connections.begin(), pbp.connections.end());
    pbp.relative_poses.clear();
    for (const auto& [k, p] : bp.relative_poses) {
      int a = perm[k.first], b = perm[k.second];
      pbp.relative_poses[{std::min(a, b), std::max(a, b)}] = a < b ? p : inverse(p);
    }
    GraphObs direct = build_obs(ps, pbp, *sc.bs, sc.cfg);
    GraphObs permuted = permute_obs(obs, perm);
    CHECK((direct.nodes - permuted.nodes).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((direct.edges - permuted.edges).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((direct.global - permuted.global).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("flat export layout") {
  Scene sc;
  Rng rng(7);
  const Blueprint& bp = sc.lib.train.front();
  GraphObs obs = build_obs(random_state(sc, bp, rng), bp, *sc.bs, sc.cfg);
  FlatObs flat = export_flat(obs);
  CHECK(flat.dims == obs.dims());
  REQUIRE(static_cast<int>(flat.features.size()) == flat.dims.flat_size());
  CHECK(flat.features[0] == obs.nodes(0, 0));
  CHECK(flat.features[4] == obs.nodes(1, 1));
  const int edge0 = 16 * 3;
  CHECK(flat.features[edge0 + 23 * 5 + 7] == obs.edges(5, 7));
  CHECK(flat.features.back() == obs.global[obs.global.size() - 1]);
  CHECK(flat.edge_index.size() == 2 * 240);
  CHECK(flat.edge_index[2 * 17] == obs.src[17]);
  CHECK(flat.edge_index[2 * 17 + 1] == obs.dst[17]);
}
