#include "magnaforge/simenv.hpp"

#include "magnaforge/collision.hpp"
#include "magnaforge/errors.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace magnaforge {
namespace {

constexpr double kContactTolerance = 1e-7;
constexpr double kWeldDistance = 1e-6;
constexpr double kWeldAngle = 1e-5;
constexpr int kPushIterations = 8;
constexpr double kSettleTolerance = 1e-12;

struct Twist {
  Vec3d linear = Vec3d::Zero();  // world frame
  Vec3d angular = Vec3d::Zero();
};

Vec3d clamp_norm(const Vec3d& v, double limit) {
  double n = v.norm();
  return n > limit ? Vec3d(v * (limit / n)) : v;
}

Posed integrate(const Posed& p, const Vec3d& pivot, const Twist& t, double dt) {
  if (t.angular.isZero(0.0)) return Posed(p.position + t.linear * dt, p.orientation);
  Quatd dq = from_rotation_vector<double>(t.angular * dt);
  return Posed(pivot + t.linear * dt + dq * (p.position - pivot), normalized<double>(dq * p.orientation));
}

Obb box_of(const BlockSet& bs, const WorldState& s, int b) { return make_obb(s.poses[b], bs.half_extents(b)); }

void translate(WorldState& s, std::span<const int> members, const Vec3d& delta) {
  for (int k : members) s.poses[k].position += delta;
}

std::vector<std::vector<int>> group_members(const std::vector<int>& group) {
  std::vector<std::vector<int>> members(group.size());
  for (int b = 0; b < static_cast<int>(group.size()); ++b) members[group[b]].push_back(b);
  return members;
}

// Pushes one moving group out of the ground and every other block, deepest contact first.
double resolve_collisions(WorldState& s, const BlockSet& bs, std::span<const int> members, const std::vector<int>& group) {
  const int n = bs.size();
  const int gid = group[members.front()];
  double total = 0.0;
  for (int it = 0; it < kPushIterations; ++it) {
    Contact deepest;
    deepest.depth = 0.0;
    for (int k : members) {
      Obb bk = box_of(bs, s, k);
      double below = -lowest_point(bk);
      if (below > kContactTolerance && below > deepest.depth) deepest = {below, Vec3d::UnitZ()};
      for (int j = 0; j < n; ++j) {
        if (group[j] == gid) continue;
        auto hit = penetration(bk, box_of(bs, s, j), kContactTolerance);
        if (hit && hit->depth > deepest.depth) deepest = *hit;
      }
    }
    if (deepest.depth <= 0.0) break;
    translate(s, members, deepest.normal * deepest.depth);
    total += deepest.depth;
  }
  return total;
}

// Unheld groups fall straight down onto the ground or whatever is beneath them.
void settle(WorldState& s, const BlockSet& bs, std::span<const int> held) {
  const int n = bs.size();
  std::vector<int> group = rigid_groups(n, s.connections);
  auto members = group_members(group);
  std::vector<char> is_held(n, 0);
  for (int b : held) is_held[group[b]] = 1;

  std::vector<std::pair<double, int>> order;
  for (int gid = 0; gid < n; ++gid) {
    if (members[gid].empty() || is_held[gid]) continue;
    double low = std::numeric_limits<double>::infinity();
    for (int k : members[gid]) low = std::min(low, lowest_point(box_of(bs, s, k)));
    order.emplace_back(low, gid);
  }
  std::sort(order.begin(), order.end());
  for (auto [low, gid] : order) {
    if (low < -kSettleTolerance) {
      translate(s, members[gid], Vec3d(0, 0, -low));
      continue;
    }
    double drop = low;
    for (int k : members[gid]) {
      Obb bk = box_of(bs, s, k);
      for (int j = 0; j < n; ++j) {
        if (group[j] == gid) continue;
        if (auto d = drop_distance(bk, box_of(bs, s, j))) drop = std::min(drop, *d);
      }
    }
    if (drop > kSettleTolerance) translate(s, members[gid], Vec3d(0, 0, -drop));
  }
}

bool opposite(const BlockSet& bs, MagnetSlot x, MagnetSlot y) {
  return bs.magnet(x.block, x.magnet).polarity != bs.magnet(y.block, y.magnet).polarity;
}

std::set<MagnetSlot> occupied(const std::vector<Connection>& connections) {
  std::set<MagnetSlot> out;
  for (const auto& c : connections) {
    out.insert(c.a);
    out.insert(c.b);
  }
  return out;
}

std::vector<MagnetSlot> all_slots(const BlockSet& bs) {
  std::vector<MagnetSlot> out;
  for (int b = 0; b < bs.size(); ++b)
    for (int m = 0; m < bs.magnet_count(b); ++m) out.push_back({b, m});
  return out;
}

double shaping(double distance, double angle, double scale) {
  return std::exp(-distance / scale) * 0.5 * (1.0 + std::cos(angle));
}

}  // namespace

// Config ---------------------------------------------------------------------

void EnvConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("env config: ") + name + " must be positive");
  };
  if (n_grippers != 1 && n_grippers != 2) throw ConfigError("env config: n_grippers must be 1 or 2");
  if (episode_len <= 0) throw ConfigError("env config: episode_len must be positive");
  positive(dt, "dt");
  positive(v_max, "v_max");
  positive(w_max, "w_max");
  positive(d_snap, "d_snap");
  positive(theta_snap, "theta_snap");
  positive(detach_stretch, "detach_stretch");
  positive(magnet_shaping_scale, "magnet_shaping_scale");
  positive(pose_shaping_scale, "pose_shaping_scale");
  positive(eps_pos, "eps_pos");
  positive(eps_rot, "eps_rot");
  positive(arena_half_size, "arena_half_size");
  if (c_force < 0 || c_magnet_dense < 0 || c_pose_dense < 0) throw ConfigError("env config: reward coefficients must be >= 0");
  if (blueprint_reset_prob < 0 || blueprint_reset_prob > 1) throw ConfigError("env config: blueprint_reset_prob in [0, 1]");
  if (gripper_transition_delay < 0) throw ConfigError("env config: gripper_transition_delay must be >= 0");
  if (placement_clearance < 0 || placement_attempts <= 0) throw ConfigError("env config: bad placement settings");
}

KeyValues EnvConfig::to_kv() const {
  KeyValues kv;
  kv.set("env.n_grippers", n_grippers);
  kv.set("env.episode_len", episode_len);
  kv.set("env.dt", dt);
  kv.set("env.blueprint_reset_prob", blueprint_reset_prob);
  kv.set("env.v_max", v_max);
  kv.set("env.w_max", w_max);
  kv.set("env.d_snap", d_snap);
  kv.set("env.theta_snap", theta_snap);
  kv.set("env.detach_stretch", detach_stretch);
  kv.set("env.c_force", c_force);
  kv.set("env.c_magnet_dense", c_magnet_dense);
  kv.set("env.c_pose_dense", c_pose_dense);
  kv.set("env.magnet_shaping_scale", magnet_shaping_scale);
  kv.set("env.pose_shaping_scale", pose_shaping_scale);
  kv.set("env.eps_pos", eps_pos);
  kv.set("env.eps_rot", eps_rot);
  kv.set("env.gripper_transition_delay", gripper_transition_delay);
  kv.set("env.arena_half_size", arena_half_size);
  kv.set("env.placement_clearance", placement_clearance);
  kv.set("env.placement_attempts", placement_attempts);
  return kv;
}

EnvConfig EnvConfig::from_kv(const KeyValues& kv) {
  EnvConfig c;
  c.n_grippers = kv.get("env.n_grippers", c.n_grippers);
  c.episode_len = kv.get("env.episode_len", c.episode_len);
  c.dt = kv.get("env.dt", c.dt);
  c.blueprint_reset_prob = kv.get("env.blueprint_reset_prob", c.blueprint_reset_prob);
  c.v_max = kv.get("env.v_max", c.v_max);
  c.w_max = kv.get("env.w_max", c.w_max);
  c.d_snap = kv.get("env.d_snap", c.d_snap);
  c.theta_snap = kv.get("env.theta_snap", c.theta_snap);
  c.detach_stretch = kv.get("env.detach_stretch", c.detach_stretch);
  c.c_force = kv.get("env.c_force", c.c_force);
  c.c_magnet_dense = kv.get("env.c_magnet_dense", c.c_magnet_dense);
  c.c_pose_dense = kv.get("env.c_pose_dense", c.c_pose_dense);
  c.magnet_shaping_scale = kv.get("env.magnet_shaping_scale", c.magnet_shaping_scale);
  c.pose_shaping_scale = kv.get("env.pose_shaping_scale", c.pose_shaping_scale);
  c.eps_pos = kv.get("env.eps_pos", c.eps_pos);
  c.eps_rot = kv.get("env.eps_rot", c.eps_rot);
  c.gripper_transition_delay = kv.get("env.gripper_transition_delay", c.gripper_transition_delay);
  c.arena_half_size = kv.get("env.arena_half_size", c.arena_half_size);
  c.placement_clearance = kv.get("env.placement_clearance", c.placement_clearance);
  c.placement_attempts = kv.get("env.placement_attempts", c.placement_attempts);
  c.validate();
  return c;
}

const std::set<std::string>& EnvConfig::keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const KeyValues kv = EnvConfig{}.to_kv();
    for (const auto& [name, value] : kv.entries()) k.insert(name);
    return k;
  }();
  return keys;
}

// World ----------------------------------------------------------------------

bool WorldState::connected(int a, int b) const {
  for (const auto& c : connections)
    if ((c.a.block == a && c.b.block == b) || (c.a.block == b && c.b.block == a)) return true;
  return false;
}

std::vector<int> rigid_groups(int n_blocks, std::span<const Connection> connections) {
  std::vector<int> parent(n_blocks);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& c : connections) {
    int ra = find(c.a.block), rb = find(c.b.block);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }
  std::vector<int> group(n_blocks);
  for (int b = 0; b < n_blocks; ++b) group[b] = find(b);
  return group;
}

WorldState empty_world(const BlockSet& bs, const EnvConfig& cfg) {
  WorldState s;
  s.poses.assign(bs.size(), Posed::identity());
  s.gripper_holding.assign(cfg.n_grippers, std::nullopt);
  s.gripper_target.assign(cfg.n_grippers, std::nullopt);
  s.gripper_disabled_until.assign(cfg.n_grippers, 0);
  s.gripper_linear_velocity.assign(cfg.n_grippers, Vec3d::Zero());
  s.gripper_angular_velocity.assign(cfg.n_grippers, Vec3d::Zero());
  return s;
}

namespace {

// Places every block not in `fixed` flat on the ground without touching anything.
bool scatter_rest(WorldState& s, const std::vector<char>& fixed, const BlockSet& bs, const EnvConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> yaw_dist(-M_PI, M_PI);
  const Vec3d pad = Vec3d::Constant(cfg.placement_clearance);
  std::vector<int> placed;
  for (int b = 0; b < bs.size(); ++b)
    if (fixed[b]) placed.push_back(b);
  for (int b = 0; b < bs.size(); ++b) {
    if (fixed[b]) continue;
    const Vec3d& he = bs.half_extents(b);
    double reach = std::hypot(he.x(), he.y());
    double lim = std::max(0.0, cfg.arena_half_size - reach);
    std::uniform_real_distribution<double> xy(-lim, lim);
    bool ok = false;
    for (int attempt = 0; attempt < cfg.placement_attempts && !ok; ++attempt) {
      double x = xy(rng), y = xy(rng), yaw = yaw_dist(rng);
      Posed p(Vec3d(x, y, he.z()), rot_z(yaw));
      Obb grown = make_obb(p, he + pad);
      ok = std::none_of(placed.begin(), placed.end(), [&](int j) { return penetration(grown, box_of(bs, s, j)).has_value(); });
      if (ok) s.poses[b] = p;
    }
    if (!ok) return false;
    placed.push_back(b);
  }
  return true;
}

constexpr int kLayoutRestarts = 20;

}  // namespace

WorldState scattered_world(const BlockSet& bs, const EnvConfig& cfg, Rng& rng) {
  for (int restart = 0; restart < kLayoutRestarts; ++restart) {
    WorldState s = empty_world(bs, cfg);
    if (scatter_rest(s, std::vector<char>(bs.size(), 0), bs, cfg, rng)) return s;
  }
  throw PlacementFailure("could not scatter blocks without overlap");
}

WorldState prebuilt_world(const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg, Rng& rng) {
  auto realized = realize_blueprint(bp, bs);
  std::uniform_real_distribution<double> yaw_dist(-M_PI, M_PI);
  for (int restart = 0; restart < kLayoutRestarts; ++restart) {
    WorldState s = empty_world(bs, cfg);
    Quatd yaw = rot_z(yaw_dist(rng));
    Vec3d lo = Vec3d::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    std::vector<char> fixed(bs.size(), 0);
    for (const auto& [b, p] : realized) {
      s.poses[b] = Posed(yaw * p.position, normalized<double>(yaw * p.orientation));
      Obb box = box_of(bs, s, b);
      Vec3d ext;
      for (int k = 0; k < 3; ++k) ext[k] = box.half.dot(box.axes.row(k).transpose().cwiseAbs());
      lo = lo.cwiseMin(box.center - ext);
      hi = hi.cwiseMax(box.center + ext);
      fixed[b] = 1;
    }
    Vec3d center = 0.5 * (lo + hi);
    Vec3d half = 0.5 * (hi - lo);
    double lim_x = std::max(0.0, cfg.arena_half_size - half.x());
    double lim_y = std::max(0.0, cfg.arena_half_size - half.y());
    double x = std::uniform_real_distribution<double>(-lim_x, lim_x)(rng);
    double y = std::uniform_real_distribution<double>(-lim_y, lim_y)(rng);
    Vec3d shift(x - center.x(), y - center.y(), -lo.z());
    for (const auto& [b, p] : realized) s.poses[b].position += shift;
    s.connections = bp.connections;
    if (scatter_rest(s, fixed, bs, cfg, rng)) return s;
  }
  throw PlacementFailure("could not place blueprint '" + bp.id + "' and scatter the remaining blocks");
}

// Step phases ----------------------------------------------------------------

GripperAssignment assign_grippers(const WorldState& state, std::span<const int> choice, const EnvConfig& cfg) {
  const int g_count = cfg.n_grippers;
  GripperAssignment out;
  out.target = state.gripper_target;
  out.disabled_until = state.gripper_disabled_until;
  out.effective.assign(g_count, std::nullopt);
  for (int g = 0; g < g_count; ++g) {
    const int c = choice[g];
    if (cfg.gripper_transition_delay > 0 && out.target[g].has_value() && *out.target[g] != c) {
      out.disabled_until[g] = state.step_count + cfg.gripper_transition_delay;
    }
    out.target[g] = c;
    if (state.step_count >= out.disabled_until[g]) out.effective[g] = c;
  }
  for (int g = 1; g < g_count; ++g)
    for (int h = 0; h < g; ++h)
      if (out.effective[g] && out.effective[h] == out.effective[g]) out.effective[g].reset();
  return out;
}

WorldState update_magnets(WorldState state, std::span<const double> stretch, std::span<const int> held,
                          const BlockSet& bs, const EnvConfig& cfg) {
  const int n = bs.size();
  {
    std::vector<Connection> kept;
    for (std::size_t i = 0; i < state.connections.size(); ++i)
      if (i >= stretch.size() || stretch[i] <= cfg.detach_stretch) kept.push_back(state.connections[i]);
    state.connections = std::move(kept);
  }
  const auto slots = all_slots(bs);
  for (;;) {
    std::vector<int> group = rigid_groups(n, state.connections);
    std::set<MagnetSlot> busy = occupied(state.connections);
    double best = std::numeric_limits<double>::infinity();
    std::optional<std::pair<MagnetSlot, MagnetSlot>> pick;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      MagnetSlot x = slots[i];
      if (busy.count(x)) continue;
      Vec3d xa = magnet_anchor(bs, state.poses[x.block], x), xn = magnet_axis(bs, state.poses[x.block], x);
      for (std::size_t k = i + 1; k < slots.size(); ++k) {
        MagnetSlot y = slots[k];
        if (busy.count(y) || group[x.block] == group[y.block] || !opposite(bs, x, y)) continue;
        double dist = (xa - magnet_anchor(bs, state.poses[y.block], y)).norm();
        if (dist >= cfg.d_snap || dist >= best) continue;
        if (vector_angle<double>(xn, -magnet_axis(bs, state.poses[y.block], y)) >= cfg.theta_snap) continue;
        best = dist;
        pick = std::make_pair(x, y);
      }
    }
    if (!pick) break;

    auto [x, y] = *pick;
    auto group_held = [&](int gid) {
      return std::any_of(held.begin(), held.end(), [&](int b) { return group[b] == gid; });
    };
    int gx = group[x.block], gy = group[y.block];
    // the unheld side moves; otherwise the group with the larger lowest id
    bool move_x = group_held(gx) != group_held(gy) ? !group_held(gx) : gx > gy;
    MagnetSlot mover = move_x ? x : y, anchor = move_x ? y : x;
    const int gid = group[mover.block];
    Vec3d from = magnet_anchor(bs, state.poses[mover.block], mover);
    Vec3d to = magnet_anchor(bs, state.poses[anchor.block], anchor);
    Quatd r = rotation_between<double>(magnet_axis(bs, state.poses[mover.block], mover),
                                       -magnet_axis(bs, state.poses[anchor.block], anchor));
    for (int k = 0; k < n; ++k) {
      if (group[k] != gid) continue;
      Posed& p = state.poses[k];
      p = Posed(to + r * (p.position - from), normalized<double>(r * p.orientation));
    }
    state.connections.push_back(Connection::make(x, y));

    // welding may close loops inside the merged group
    group = rigid_groups(n, state.connections);
    busy = occupied(state.connections);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      MagnetSlot u = slots[i];
      if (busy.count(u)) continue;
      for (std::size_t k = i + 1; k < slots.size(); ++k) {
        MagnetSlot v = slots[k];
        if (busy.count(v) || u.block == v.block || group[u.block] != group[v.block] || !opposite(bs, u, v)) continue;
        const Posed& pu = state.poses[u.block];
        const Posed& pv = state.poses[v.block];
        if ((magnet_anchor(bs, pu, u) - magnet_anchor(bs, pv, v)).norm() < kWeldDistance &&
            vector_angle<double>(magnet_axis(bs, pu, u), -magnet_axis(bs, pv, v)) < kWeldAngle) {
          state.connections.push_back(Connection::make(u, v));
          busy.insert(u);
          busy.insert(v);
          break;
        }
      }
    }
    std::sort(state.connections.begin(), state.connections.end());
  }
  std::sort(state.connections.begin(), state.connections.end());
  return state;
}

Potential compute_potential(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg) {
  int correct = 0;
  for (const auto& c : state.connections)
    if (std::binary_search(bp.connections.begin(), bp.connections.end(), c)) ++correct;
  const int wrong = static_cast<int>(state.connections.size()) - correct;

  double magnet_sum = 0.0;
  for (const auto& c : bp.connections) {
    const Posed& pa = state.poses[c.a.block];
    const Posed& pb = state.poses[c.b.block];
    double dist = (magnet_anchor(bs, pa, c.a) - magnet_anchor(bs, pb, c.b)).norm();
    double ang = vector_angle<double>(magnet_axis(bs, pa, c.a), -magnet_axis(bs, pb, c.b));
    magnet_sum += shaping(dist, ang, cfg.magnet_shaping_scale);
  }
  double pose_sum = 0.0;
  for (const auto& [key, want] : bp.relative_poses) {
    Posed live = relative(state.poses[key.first], state.poses[key.second]);
    pose_sum += shaping((live.position - want.position).norm(), quat_angle(live.orientation, want.orientation),
                        cfg.pose_shaping_scale);
  }

  Potential p;
  p.terms["force"] = -cfg.c_force * state.penetration;
  p.terms["wrong_connections"] = -static_cast<double>(wrong);
  p.terms["correct_connections"] = static_cast<double>(correct);
  p.terms["magnet_dense"] = cfg.c_magnet_dense * magnet_sum;
  p.terms["pose_dense"] = cfg.c_pose_dense * pose_sum;
  for (const auto& [name, v] : p.terms) p.value += v;
  return p;
}

bool check_success(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg) {
  if (state.connections != bp.connections) return false;
  for (const auto& [key, want] : bp.relative_poses) {
    Posed live = relative(state.poses[key.first], state.poses[key.second]);
    if ((live.position - want.position).norm() > cfg.eps_pos) return false;
    if (quat_angle(live.orientation, want.orientation) > cfg.eps_rot) return false;
  }
  return true;
}

// Env ------------------------------------------------------------------------

AssemblyEnv::AssemblyEnv(std::shared_ptr<const BlockSet> blockset, EnvConfig config)
    : blockset_(std::move(blockset)), config_(config) {
  config_.validate();
  state_ = empty_world(*blockset_, config_);
}

GraphObs AssemblyEnv::observe() const { return build_obs(state_, target_, *blockset_, config_); }

StepResult AssemblyEnv::reset(const Blueprint& target, ResetMode mode, Rng& rng) {
  target_ = target;
  state_ = mode.prebuilt ? prebuilt_world(*mode.prebuilt, *blockset_, config_, rng) : scattered_world(*blockset_, config_, rng);
  potential_ = compute_potential(state_, target_, *blockset_, config_);
  done_ = false;
  StepResult r;
  r.obs = observe();
  r.info.potential = potential_.value;
  return r;
}

StepResult AssemblyEnv::retarget(const Blueprint& target) {
  target_ = target;
  state_.step_count = 0;
  potential_ = compute_potential(state_, target_, *blockset_, config_);
  done_ = false;
  StepResult r;
  r.obs = observe();
  r.info.potential = potential_.value;
  return r;
}

void AssemblyEnv::set_state(WorldState state) {
  state_ = std::move(state);
  potential_ = compute_potential(state_, target_, *blockset_, config_);
  done_ = false;
}

StepResult AssemblyEnv::step(const Action& action) {
  const BlockSet& bs = *blockset_;
  const int n = bs.size();
  const int g_count = config_.n_grippers;
  if (done_) throw std::logic_error("step() called on a finished episode");
  if (static_cast<int>(action.gripper_choice.size()) != g_count || action.block_moves.rows() != n)
    throw ShapeError("action shape does not match (n_grippers, n_blocks)");
  for (int c : action.gripper_choice)
    if (c < 0 || c >= n) throw ShapeError("gripper choice out of range");
  if (!action.block_moves.allFinite()) throw ShapeError("block moves must be finite");

  // (1) grippers
  GripperAssignment assign = assign_grippers(state_, action.gripper_choice, config_);
  std::vector<int> held;
  std::vector<std::optional<Twist>> twist(n);
  WorldState next = state_;
  for (int g = 0; g < g_count; ++g) {
    next.gripper_linear_velocity[g].setZero();
    next.gripper_angular_velocity[g].setZero();
    if (!assign.effective[g]) continue;
    const int b = *assign.effective[g];
    held.push_back(b);
    Vec3d v = clamp_norm(action.block_moves.row(b).head<3>().transpose(), config_.v_max);
    Vec3d w = clamp_norm(action.block_moves.row(b).tail<3>().transpose(), config_.w_max);
    next.gripper_linear_velocity[g] = v;
    next.gripper_angular_velocity[g] = w;
    const Quatd& q = state_.poses[b].orientation;
    twist[b] = Twist{q * v, q * w};
  }

  // (2) kinematics: per-connection stretch from individually commanded motions, then
  // each held rigid group follows the lowest-index gripper holding it
  std::vector<Posed> commanded = state_.poses;
  for (int b = 0; b < n; ++b)
    if (twist[b]) commanded[b] = integrate(state_.poses[b], state_.poses[b].position, *twist[b], config_.dt);
  std::vector<double> stretch(state_.connections.size());
  std::vector<Connection> kept;
  for (std::size_t i = 0; i < state_.connections.size(); ++i) {
    const auto& c = state_.connections[i];
    stretch[i] = (magnet_anchor(bs, commanded[c.a.block], c.a) - magnet_anchor(bs, commanded[c.b.block], c.b)).norm();
    if (stretch[i] <= config_.detach_stretch) kept.push_back(c);
  }
  std::vector<int> group = rigid_groups(n, kept);
  auto members = group_members(group);
  std::vector<int> moved_groups;
  for (int b : held) {
    const int gid = group[b];
    if (std::find(moved_groups.begin(), moved_groups.end(), gid) != moved_groups.end()) continue;
    moved_groups.push_back(gid);
    const Vec3d pivot = state_.poses[b].position;
    for (int k : members[gid]) next.poses[k] = integrate(state_.poses[k], pivot, *twist[b], config_.dt);
  }

  // (3) collisions
  double pen = 0.0;
  for (int gid : moved_groups) pen += resolve_collisions(next, bs, members[gid], group);

  // (4) magnets
  next = update_magnets(std::move(next), stretch, held, bs, config_);

  // (5) gravity
  settle(next, bs, held);

  next.penetration = pen;
  next.gripper_holding = assign.effective;
  next.gripper_target = assign.target;
  next.gripper_disabled_until = assign.disabled_until;
  next.step_count = state_.step_count + 1;

  // (6) potential-difference reward
  Potential after = compute_potential(next, target_, bs, config_);
  StepResult r;
  r.reward = after.value - potential_.value;
  for (const auto& [name, v] : after.terms) r.info.reward_terms[name] = v - potential_.terms[name];
  r.info.potential = after.value;

  // (7) success
  r.info.success = check_success(next, target_, bs, config_);
  r.done = r.info.success || next.step_count >= config_.episode_len;
  r.info.truncated = r.done && !r.info.success;

  state_ = std::move(next);
  potential_ = std::move(after);
  done_ = r.done;
  r.obs = observe();
  return r;
}

Action zero_action(const BlockSet& bs, const EnvConfig& cfg) {
  Action a;
  a.gripper_choice.resize(cfg.n_grippers);
  for (int g = 0; g < cfg.n_grippers; ++g) a.gripper_choice[g] = g % bs.size();
  a.block_moves.setZero(bs.size(), 6);
  return a;
}

std::vector<bool> reset_free_run(AssemblyEnv& env, const EnvPolicy& policy, std::span<const Blueprint> goals,
                                 int n_targets, int per_target_cap, Rng& rng) {
  if (goals.empty()) throw ConfigError("reset-free run needs at least one goal blueprint");
  std::uniform_int_distribution<std::size_t> pick(0, goals.size() - 1);
  std::vector<bool> results;
  for (int k = 0; k < n_targets; ++k) {
    const Blueprint& goal = goals[pick(rng)];
    StepResult r = k == 0 ? env.reset(goal, ResetMode::scattered(), rng) : env.retarget(goal);
    bool success = false;
    for (int t = 0; t < per_target_cap && !env.done(); ++t) {
      r = env.step(policy(env, r.obs));
      if (r.info.success) {
        success = true;
        break;
      }
    }
    results.push_back(success);
  }
  return results;
}

EnvPolicy teleport_oracle(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](AssemblyEnv& env, const GraphObs&) {
    WorldState s = prebuilt_world(env.target(), env.blockset(), env.config(), *rng);
    const WorldState& cur = env.state();
    s.step_count = cur.step_count;
    s.gripper_holding = cur.gripper_holding;
    s.gripper_target = cur.gripper_target;
    s.gripper_disabled_until = cur.gripper_disabled_until;
    env.set_state(std::move(s));
    return zero_action(env.blockset(), env.config());
  };
}

EnvPolicy random_policy(std::uint64_t seed, double move_std) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng, move_std](AssemblyEnv& env, const GraphObs&) {
    const int n = env.blockset().size();
    Action a;
    std::uniform_int_distribution<int> pick(0, n - 1);
    std::normal_distribution<double> noise(0.0, move_std);
    for (int g = 0; g < env.config().n_grippers; ++g) a.gripper_choice.push_back(pick(*rng));
    a.block_moves.resize(n, 6);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 6; ++k) a.block_moves(i, k) = noise(*rng);
    return a;
  };
}

}  // namespace magnaforge
