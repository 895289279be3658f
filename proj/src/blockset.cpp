#include "magnaforge/blockset.hpp"

#include "magnaforge/collision.hpp"
#include "magnaforge/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

namespace magnaforge {

using nlohmann::json;

namespace {

constexpr double kSurfaceTolerance = 1e-9;
constexpr double kJointTolerance = 1e-6;
constexpr double kPenetrationTolerance = 1e-4;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(e.what());
  }
}

const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw SchemaError(std::string("missing field '") + key + "'");
  return j.at(key);
}

template <typename T>
T get_as(const json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw SchemaError(std::string("bad value for '") + what + "'");
  }
}

void check_version(const json& j) {
  if (get_as<int>(require(j, "format_version"), "format_version") != kFormatVersion)
    throw SchemaError("unsupported format_version");
}

Vec3d vec3_from(const json& j, const char* what) {
  auto a = get_as<std::vector<double>>(j, what);
  if (a.size() != 3) throw SchemaError(std::string(what) + " must have 3 entries");
  return {a[0], a[1], a[2]};
}

json vec3_to(const Vec3d& v) { return json::array({v.x(), v.y(), v.z()}); }

json pose_to(const Posed& p) {
  auto a = to_array(p);
  return json(std::vector<double>(a.begin(), a.end()));
}

Posed pose_from(const json& j) {
  auto a = get_as<std::vector<double>>(j, "pose");
  if (a.size() != 7) throw SchemaError("pose must have 7 entries");
  std::array<double, 7> arr;
  std::copy(a.begin(), a.end(), arr.begin());
  return from_array(arr);
}

bool slot_valid(const BlockSet& bs, MagnetSlot s) {
  return s.block >= 0 && s.block < bs.size() && s.magnet >= 0 && s.magnet < bs.magnet_count(s.block);
}

struct JointError {
  double distance;
  double angle;
};

JointError joint_error(const BlockSet& bs, const Posed& pa, const Posed& pb, const Connection& c) {
  Vec3d xa = magnet_anchor(bs, pa, c.a), xb = magnet_anchor(bs, pb, c.b);
  Vec3d na = magnet_axis(bs, pa, c.a), nb = magnet_axis(bs, pb, c.b);
  return {(xa - xb).norm(), vector_angle<double>(na, -nb)};
}

std::vector<std::vector<int>> adjacency(const Blueprint& bp, int n) {
  std::vector<std::vector<int>> adj(n);
  for (const auto& c : bp.connections) {
    if (c.a.block < 0 || c.a.block >= n || c.b.block < 0 || c.b.block >= n) continue;
    adj[c.a.block].push_back(c.b.block);
    adj[c.b.block].push_back(c.a.block);
  }
  return adj;
}

}  // namespace

const char* to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::UnknownBlock: return "UnknownBlock";
    case ViolationKind::UnknownMagnet: return "UnknownMagnet";
    case ViolationKind::SelfConnection: return "SelfConnection";
    case ViolationKind::DuplicateSlot: return "DuplicateSlot";
    case ViolationKind::PolarityMismatch: return "PolarityMismatch";
    case ViolationKind::Disconnected: return "Disconnected";
    case ViolationKind::MissingRelativePose: return "MissingRelativePose";
    case ViolationKind::BlockCountMismatch: return "BlockCountMismatch";
    case ViolationKind::Inconsistent: return "Inconsistent";
    case ViolationKind::Penetration: return "Penetration";
  }
  return "?";
}

std::optional<Posed> Blueprint::relative_pose(int a, int b) const {
  if (a < b) {
    auto it = relative_poses.find({a, b});
    if (it != relative_poses.end()) return it->second;
  } else {
    auto it = relative_poses.find({b, a});
    if (it != relative_poses.end()) return inverse(it->second);
  }
  return std::nullopt;
}

std::optional<Connection> Blueprint::connection_between(int from, int to) const {
  for (const auto& c : connections) {
    if (c.a.block == from && c.b.block == to) return c;
    if (c.b.block == from && c.a.block == to) return Connection{c.b, c.a};
  }
  return std::nullopt;
}

bool Blueprint::uses(int block) const { return std::binary_search(blocks.begin(), blocks.end(), block); }

const Blueprint* BlueprintLibrary::find(const std::string& id) const {
  for (const auto& bp : train)
    if (bp.id == id) return &bp;
  for (const auto& bp : test)
    if (bp.id == id) return &bp;
  return nullptr;
}

// Blockset -------------------------------------------------------------------

void check_block_geometry(const BlockType& type) {
  if (type.magnets.empty()) throw GeometryError("block type '" + type.name + "' has no magnets");
  if ((type.half_extents.array() <= 0).any()) throw GeometryError("block type '" + type.name + "' has bad extents");
  for (std::size_t m = 0; m < type.magnets.size(); ++m) {
    const auto& mag = type.magnets[m];
    if (std::abs(mag.axis.norm() - 1.0) > 1e-9)
      throw GeometryError("magnet " + std::to_string(m) + " of '" + type.name + "' has a non-unit axis");
    int face = -1;
    mag.axis.cwiseAbs().maxCoeff(&face);
    Vec3d normal = Vec3d::Zero();
    normal[face] = mag.axis[face] > 0 ? 1.0 : -1.0;
    if ((mag.axis - normal).norm() > 1e-9)
      throw GeometryError("magnet " + std::to_string(m) + " of '" + type.name + "' axis is not a face normal");
    bool on_face = std::abs(mag.anchor[face] - normal[face] * type.half_extents[face]) <= kSurfaceTolerance;
    for (int k = 0; k < 3; ++k)
      if (k != face && std::abs(mag.anchor[k]) > type.half_extents[k] + kSurfaceTolerance) on_face = false;
    if (!on_face)
      throw GeometryError("magnet " + std::to_string(m) + " of '" + type.name + "' is off the block surface");
  }
}

BlockSet parse_blockset(const std::string& text) {
  json j = parse_json(text);
  check_version(j);
  BlockSet bs;
  for (const auto& jt : get_as<json::array_t>(require(j, "types"), "types")) {
    BlockType t;
    t.id = get_as<int>(require(jt, "id"), "id");
    t.name = jt.value("name", std::string("type") + std::to_string(t.id));
    t.half_extents = vec3_from(require(jt, "half_extents"), "half_extents");
    t.mass = get_as<double>(require(jt, "mass"), "mass");
    for (const auto& jm : get_as<json::array_t>(require(jt, "magnets"), "magnets")) {
      MagnetSpec m;
      m.anchor = vec3_from(require(jm, "anchor"), "anchor");
      m.axis = vec3_from(require(jm, "axis"), "axis");
      auto pol = get_as<std::string>(require(jm, "polarity"), "polarity");
      if (pol == "+") m.polarity = Polarity::positive;
      else if (pol == "-") m.polarity = Polarity::negative;
      else throw SchemaError("polarity must be '+' or '-'");
      t.magnets.push_back(m);
    }
    if (t.id != static_cast<int>(bs.types.size())) throw SchemaError("type ids must be dense and ordered");
    check_block_geometry(t);
    bs.types.push_back(std::move(t));
  }
  const auto& inst = get_as<json::array_t>(require(j, "instances"), "instances");
  bs.instance_type.assign(inst.size(), -1);
  for (const auto& ji : inst) {
    auto pair = get_as<std::vector<int>>(ji, "instances");
    if (pair.size() != 2) throw SchemaError("instance entries are [instance_id, type_id]");
    int id = pair[0], type = pair[1];
    if (id < 0 || id >= static_cast<int>(inst.size()) || bs.instance_type[id] != -1)
      throw SchemaError("instance ids must be dense 0..N-1");
    if (type < 0 || type >= static_cast<int>(bs.types.size())) throw SchemaError("unknown type id in instances");
    bs.instance_type[id] = type;
  }
  if (bs.instance_type.empty()) throw SchemaError("blockset has no instances");
  return bs;
}

BlockSet load_blockset(const std::filesystem::path& path) { return parse_blockset(read_file(path)); }

std::string blockset_to_json(const BlockSet& bs) {
  json j;
  j["format_version"] = kFormatVersion;
  j["types"] = json::array();
  for (const auto& t : bs.types) {
    json jt;
    jt["id"] = t.id;
    jt["name"] = t.name;
    jt["half_extents"] = vec3_to(t.half_extents);
    jt["mass"] = t.mass;
    jt["magnets"] = json::array();
    for (const auto& m : t.magnets)
      jt["magnets"].push_back(
          {{"anchor", vec3_to(m.anchor)}, {"axis", vec3_to(m.axis)}, {"polarity", m.polarity == Polarity::positive ? "+" : "-"}});
    j["types"].push_back(jt);
  }
  j["instances"] = json::array();
  for (int i = 0; i < bs.size(); ++i) j["instances"].push_back({i, bs.instance_type[i]});
  return j.dump(2) + "\n";
}

BlockSet default_blockset() {
  auto face = [](const Vec3d& he, int axis, int sign, Polarity p) {
    Vec3d n = Vec3d::Zero();
    n[axis] = sign;
    MagnetSpec m;
    m.axis = n;
    m.anchor = n.cwiseProduct(he);
    m.polarity = p;
    return m;
  };
  constexpr auto P = Polarity::positive;
  constexpr auto N = Polarity::negative;
  auto make = [&](int id, const char* name, Vec3d he, double mass, std::vector<std::tuple<int, int, Polarity>> mags) {
    BlockType t;
    t.id = id;
    t.name = name;
    t.half_extents = he;
    t.mass = mass;
    for (auto [axis, sign, pol] : mags) t.magnets.push_back(face(he, axis, sign, pol));
    return t;
  };
  BlockSet bs;
  bs.types.push_back(make(0, "cube", {0.05, 0.05, 0.05}, 0.1, {{0, 1, P}, {0, -1, N}}));
  bs.types.push_back(make(1, "bar", {0.15, 0.05, 0.05}, 0.3, {{0, 1, P}, {0, -1, N}}));
  bs.types.push_back(make(2, "plank", {0.10, 0.05, 0.025}, 0.1, {{0, 1, P}, {0, -1, N}}));
  bs.types.push_back(make(3, "l_half", {0.075, 0.05, 0.05}, 0.15, {{0, -1, N}, {2, 1, P}}));
  bs.types.push_back(make(4, "cube4", {0.05, 0.05, 0.05}, 0.1, {{0, 1, P}, {0, -1, N}, {1, 1, P}, {1, -1, N}}));
  bs.types.push_back(make(5, "slab", {0.10, 0.10, 0.025}, 0.2, {{2, 1, P}, {2, -1, N}}));
  bs.instance_type = {0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 4, 5, 5};
  return bs;
}

// Blueprints -----------------------------------------------------------------

Blueprint parse_blueprint_json(const json& j, const BlockSet& bs) {
  check_version(j);
  Blueprint bp;
  bp.id = get_as<std::string>(require(j, "id"), "id");
  bp.n_blocks_used = get_as<int>(require(j, "n_blocks_used"), "n_blocks_used");
  std::set<MagnetSlot> seen;
  for (const auto& jc : get_as<json::array_t>(require(j, "connections"), "connections")) {
    auto v = get_as<std::vector<int>>(jc, "connections");
    if (v.size() != 4) throw SchemaError("connections are [block_a, magnet_a, block_b, magnet_b]");
    MagnetSlot a{v[0], v[1]}, b{v[2], v[3]};
    if (!slot_valid(bs, a) || !slot_valid(bs, b)) throw SchemaError("connection references an unknown block or magnet");
    if (a.block == b.block) throw SchemaError("connection joins a block to itself");
    if (!seen.insert(a).second || !seen.insert(b).second) throw SchemaError("magnet slot used by more than one connection");
    if (bs.magnet(a.block, a.magnet).polarity == bs.magnet(b.block, b.magnet).polarity)
      throw SchemaError("connection pairs magnets of equal polarity");
    bp.connections.push_back(Connection::make(a, b));
  }
  std::sort(bp.connections.begin(), bp.connections.end());
  for (const auto& jr : get_as<json::array_t>(require(j, "relative_poses"), "relative_poses")) {
    int a = get_as<int>(require(jr, "a"), "a");
    int b = get_as<int>(require(jr, "b"), "b");
    Posed p = pose_from(require(jr, "pose"));
    if (a == b) throw SchemaError("relative pose of a block to itself");
    if (a < b) bp.relative_poses[{a, b}] = p;
    else bp.relative_poses[{b, a}] = inverse(p);
  }
  std::set<int> used;
  if (j.contains("blocks")) {
    for (int b : get_as<std::vector<int>>(j.at("blocks"), "blocks")) used.insert(b);
  } else {
    for (const auto& c : bp.connections) used.insert({c.a.block, c.b.block});
    if (used.empty() && bp.n_blocks_used == 1) used.insert(0);
  }
  for (int b : used)
    if (b < 0 || b >= bs.size()) throw SchemaError("blueprint references an unknown block");
  for (const auto& c : bp.connections)
    if (!used.count(c.a.block) || !used.count(c.b.block)) throw SchemaError("connection block missing from blocks");
  bp.blocks.assign(used.begin(), used.end());
  if (bp.n_blocks_used != static_cast<int>(bp.blocks.size())) throw SchemaError("n_blocks_used does not match blocks");
  return bp;
}

Blueprint parse_blueprint(const std::string& text, const BlockSet& bs) { return parse_blueprint_json(parse_json(text), bs); }

Blueprint load_blueprint(const std::filesystem::path& path, const BlockSet& bs) { return parse_blueprint(read_file(path), bs); }

json blueprint_json(const Blueprint& bp) {
  json j;
  j["format_version"] = kFormatVersion;
  j["id"] = bp.id;
  j["n_blocks_used"] = bp.n_blocks_used;
  j["blocks"] = bp.blocks;
  j["connections"] = json::array();
  for (const auto& c : bp.connections) j["connections"].push_back({c.a.block, c.a.magnet, c.b.block, c.b.magnet});
  j["relative_poses"] = json::array();
  for (const auto& [key, pose] : bp.relative_poses)
    j["relative_poses"].push_back({{"a", key.first}, {"b", key.second}, {"pose", pose_to(pose)}});
  return j;
}

std::string blueprint_to_json(const Blueprint& bp) { return blueprint_json(bp).dump(2) + "\n"; }

void save_blueprint(const Blueprint& bp, const std::filesystem::path& path) { write_file(path, blueprint_to_json(bp)); }

std::string library_to_json(const BlueprintLibrary& lib) {
  json j;
  j["format_version"] = kFormatVersion;
  j["train"] = json::array();
  j["test"] = json::array();
  for (const auto& bp : lib.train) j["train"].push_back(blueprint_json(bp));
  for (const auto& bp : lib.test) j["test"].push_back(blueprint_json(bp));
  return j.dump(1) + "\n";
}

void save_library(const BlueprintLibrary& lib, const std::filesystem::path& path) { write_file(path, library_to_json(lib)); }

BlueprintLibrary load_library(const std::filesystem::path& path, const BlockSet& bs) {
  json j = parse_json(read_file(path));
  check_version(j);
  BlueprintLibrary lib;
  std::set<std::string> ids;
  for (const auto& jb : get_as<json::array_t>(require(j, "train"), "train")) lib.train.push_back(parse_blueprint_json(jb, bs));
  for (const auto& jb : get_as<json::array_t>(require(j, "test"), "test")) lib.test.push_back(parse_blueprint_json(jb, bs));
  for (const auto* split : {&lib.train, &lib.test})
    for (const auto& bp : *split)
      if (!ids.insert(bp.id).second) throw SchemaError("duplicate blueprint id '" + bp.id + "'");
  return lib;
}

// Geometry -------------------------------------------------------------------

Vec3d magnet_anchor(const BlockSet& bs, const Posed& pose, MagnetSlot slot) {
  return pose.transform_point(bs.magnet(slot.block, slot.magnet).anchor);
}

Vec3d magnet_axis(const BlockSet& bs, const Posed& pose, MagnetSlot slot) {
  return pose.rotate(bs.magnet(slot.block, slot.magnet).axis);
}

Posed mating_pose(const BlockSet& bs, MagnetSlot on_a, MagnetSlot on_b, double twist) {
  const auto& ma = bs.magnet(on_a.block, on_a.magnet);
  const auto& mb = bs.magnet(on_b.block, on_b.magnet);
  Quatd flip = rotation_between<double>(mb.axis, -ma.axis);
  Quatd q = normalized<double>(axis_angle<double>(ma.axis, twist) * flip);
  return Posed(ma.anchor - q * mb.anchor, q);
}

std::map<int, Posed> realize_blueprint(const Blueprint& bp, const BlockSet& bs) {
  std::map<int, Posed> poses;
  if (bp.blocks.empty()) return poses;
  const int root = bp.blocks.front();
  poses[root] = Posed::identity();
  std::map<int, std::vector<int>> adj;
  for (const auto& [key, pose] : bp.relative_poses) {
    adj[key.first].push_back(key.second);
    adj[key.second].push_back(key.first);
  }
  std::queue<int> frontier;
  frontier.push(root);
  while (!frontier.empty()) {
    int a = frontier.front();
    frontier.pop();
    for (int b : adj[a]) {
      if (poses.count(b)) continue;
      poses[b] = compose(poses[a], *bp.relative_pose(a, b));
      frontier.push(b);
    }
  }
  for (int b : bp.blocks)
    if (!poses.count(b)) throw InconsistentBlueprint("block " + std::to_string(b) + " is not reachable from the root");
  for (const auto& [key, rel] : bp.relative_poses) {
    if (!poses.count(key.first) || !poses.count(key.second))
      throw InconsistentBlueprint("relative pose references a block outside the blueprint");
    Posed live = relative(poses[key.first], poses[key.second]);
    if ((live.position - rel.position).norm() > kJointTolerance ||
        quat_angle(live.orientation, rel.orientation) > kJointTolerance)
      throw InconsistentBlueprint("relative poses around a cycle disagree");
  }
  for (const auto& c : bp.connections) {
    if (!poses.count(c.a.block) || !poses.count(c.b.block))
      throw InconsistentBlueprint("connection references a block outside the blueprint");
    auto err = joint_error(bs, poses[c.a.block], poses[c.b.block], c);
    if (err.distance > kJointTolerance || err.angle > kJointTolerance)
      throw InconsistentBlueprint("relative pose does not join magnets " + std::to_string(c.a.block) + ":" +
                                  std::to_string(c.a.magnet) + " and " + std::to_string(c.b.block) + ":" +
                                  std::to_string(c.b.magnet));
  }
  return poses;
}

std::vector<Violation> validate_blueprint(const Blueprint& bp, const BlockSet& bs) {
  std::vector<Violation> out;
  auto add = [&](ViolationKind k, std::string d) { out.push_back({k, std::move(d)}); };
  const int n = bs.size();
  for (int b : bp.blocks)
    if (b < 0 || b >= n) add(ViolationKind::UnknownBlock, "block " + std::to_string(b));
  if (bp.n_blocks_used != static_cast<int>(bp.blocks.size()))
    add(ViolationKind::BlockCountMismatch, "n_blocks_used " + std::to_string(bp.n_blocks_used));
  std::set<MagnetSlot> seen;
  for (const auto& c : bp.connections) {
    bool known = true;
    for (const auto& s : {c.a, c.b}) {
      if (s.block < 0 || s.block >= n || !bp.uses(s.block)) {
        add(ViolationKind::UnknownBlock, "block " + std::to_string(s.block));
        known = false;
      } else if (s.magnet < 0 || s.magnet >= bs.magnet_count(s.block)) {
        add(ViolationKind::UnknownMagnet, std::to_string(s.block) + ":" + std::to_string(s.magnet));
        known = false;
      }
      if (!seen.insert(s).second) add(ViolationKind::DuplicateSlot, std::to_string(s.block) + ":" + std::to_string(s.magnet));
    }
    if (c.a.block == c.b.block) add(ViolationKind::SelfConnection, "block " + std::to_string(c.a.block));
    if (known && bs.magnet(c.a.block, c.a.magnet).polarity == bs.magnet(c.b.block, c.b.magnet).polarity)
      add(ViolationKind::PolarityMismatch, std::to_string(c.a.block) + "-" + std::to_string(c.b.block));
    if (!bp.relative_pose(c.a.block, c.b.block))
      add(ViolationKind::MissingRelativePose, std::to_string(c.a.block) + "-" + std::to_string(c.b.block));
  }
  if (!out.empty()) return out;

  // connectivity over used blocks
  if (bp.blocks.size() > 1) {
    auto adj = adjacency(bp, n);
    std::set<int> reached{bp.blocks.front()};
    std::vector<int> stack{bp.blocks.front()};
    while (!stack.empty()) {
      int a = stack.back();
      stack.pop_back();
      for (int b : adj[a])
        if (reached.insert(b).second) stack.push_back(b);
    }
    if (reached.size() != bp.blocks.size()) {
      add(ViolationKind::Disconnected, std::to_string(reached.size()) + " of " + std::to_string(bp.blocks.size()) + " reachable");
      return out;
    }
  }

  std::map<int, Posed> poses;
  try {
    poses = realize_blueprint(bp, bs);
  } catch (const InconsistentBlueprint& e) {
    add(ViolationKind::Inconsistent, e.what());
    return out;
  }
  for (std::size_t i = 0; i < bp.blocks.size(); ++i) {
    for (std::size_t k = i + 1; k < bp.blocks.size(); ++k) {
      int a = bp.blocks[i], b = bp.blocks[k];
      auto hit = penetration(make_obb(poses[a], bs.half_extents(a)), make_obb(poses[b], bs.half_extents(b)),
                             kPenetrationTolerance);
      if (hit) add(ViolationKind::Penetration, std::to_string(a) + "-" + std::to_string(b));
    }
  }
  return out;
}

// Generation -----------------------------------------------------------------

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool in_train_split(const std::string& id, double train_fraction) {
  return static_cast<double>(fnv1a64(id) % 10000) < train_fraction * 10000.0;
}

namespace {

struct Partial {
  std::map<int, Posed> pose;
  std::vector<Connection> connections;
  std::set<MagnetSlot> used;
};

// Joins `incoming` onto `existing`; returns false when the placement penetrates the
// structure or leaves an unconnected magnet pair close enough to snap.
bool attach(Partial& s, const BlockSet& bs, MagnetSlot existing, MagnetSlot incoming, double twist,
            const GeneratorOptions& opt) {
  const int u = incoming.block;
  Posed pu = compose(s.pose.at(existing.block), mating_pose(bs, existing, incoming, twist));
  Obb box = make_obb(pu, bs.half_extents(u));
  for (const auto& [b, pb] : s.pose)
    if (penetration(box, make_obb(pb, bs.half_extents(b)), kPenetrationTolerance)) return false;

  std::vector<Connection> extra;
  std::set<MagnetSlot> claimed{existing};
  for (int m = 0; m < bs.magnet_count(u); ++m) {
    MagnetSlot x{u, m};
    if (x == incoming) continue;
    Vec3d xa = magnet_anchor(bs, pu, x), xn = magnet_axis(bs, pu, x);
    for (const auto& [b, pb] : s.pose) {
      for (int k = 0; k < bs.magnet_count(b); ++k) {
        MagnetSlot y{b, k};
        if (s.used.count(y) || claimed.count(y)) continue;
        if (bs.magnet(u, m).polarity == bs.magnet(b, k).polarity) continue;
        double dist = (xa - magnet_anchor(bs, pb, y)).norm();
        double ang = vector_angle<double>(xn, -magnet_axis(bs, pb, y));
        if (dist < 1e-7 && ang < 1e-7) {
          extra.push_back(Connection::make(x, y));
          claimed.insert(y);
          goto next_magnet;
        }
        if (dist < opt.snap_guard_distance && ang < opt.snap_guard_angle) return false;
      }
    }
  next_magnet:;
  }
  s.pose[u] = pu;
  s.connections.push_back(Connection::make(existing, incoming));
  s.used.insert(existing);
  s.used.insert(incoming);
  for (const auto& c : extra) {
    s.connections.push_back(c);
    s.used.insert(c.a);
    s.used.insert(c.b);
  }
  return true;
}

Blueprint finish(const Partial& s, const std::string& id) {
  Blueprint bp;
  bp.id = id;
  for (const auto& [b, p] : s.pose) bp.blocks.push_back(b);
  bp.n_blocks_used = static_cast<int>(bp.blocks.size());
  const Posed root = s.pose.at(bp.blocks.front());
  std::map<int, Posed> canon;
  for (const auto& [b, p] : s.pose) canon[b] = b == bp.blocks.front() ? Posed::identity() : relative(root, p);
  bp.connections = s.connections;
  std::sort(bp.connections.begin(), bp.connections.end());
  for (const auto& c : bp.connections) {
    int a = std::min(c.a.block, c.b.block), b = std::max(c.a.block, c.b.block);
    bp.relative_poses[{a, b}] = relative(canon[a], canon[b]);
  }
  return bp;
}

std::optional<Blueprint> generate_one(const BlockSet& bs, int n, std::mt19937_64& rng, const GeneratorOptions& opt,
                                      const std::string& id) {
  std::uniform_int_distribution<int> twist_dist(0, 3);
  std::vector<int> order(bs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Partial s;
  s.pose[order[0]] = Posed::identity();
  while (static_cast<int>(s.pose.size()) < n) {
    bool placed = false;
    for (int attempt = 0; attempt < opt.attempts_per_attachment && !placed; ++attempt) {
      std::vector<MagnetSlot> open;
      for (const auto& [b, p] : s.pose)
        for (int m = 0; m < bs.magnet_count(b); ++m)
          if (!s.used.count({b, m})) open.push_back({b, m});
      if (open.empty()) return std::nullopt;
      MagnetSlot existing = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
      Polarity want = bs.magnet(existing.block, existing.magnet).polarity == Polarity::positive ? Polarity::negative
                                                                                               : Polarity::positive;
      std::vector<MagnetSlot> candidates;
      for (int b : order) {
        if (s.pose.count(b)) continue;
        for (int m = 0; m < bs.magnet_count(b); ++m)
          if (bs.magnet(b, m).polarity == want) candidates.push_back({b, m});
      }
      if (candidates.empty()) continue;
      MagnetSlot incoming = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
      double twist = twist_dist(rng) * (M_PI / 2.0);
      placed = attach(s, bs, existing, incoming, twist, opt);
    }
    if (!placed) return std::nullopt;
  }
  return finish(s, id);
}

}  // namespace

BlueprintLibrary generate_blueprints(const BlockSet& bs, std::uint64_t seed, int count, int min_blocks, int max_blocks,
                                     const GeneratorOptions& options) {
  if (min_blocks < 2 || max_blocks > bs.size() || min_blocks > max_blocks)
    throw ConfigError("block range must lie within [2, " + std::to_string(bs.size()) + "] with min <= max");
  BlueprintLibrary lib;
  std::mt19937_64 rng(seed);
  const int span = max_blocks - min_blocks + 1;
  for (int k = 0; k < count; ++k) {
    int n = min_blocks + k % span;
    char id[64];
    std::snprintf(id, sizeof id, "gen-%llu-%03d-%02db", static_cast<unsigned long long>(seed), k, n);
    std::optional<Blueprint> bp;
    for (int attempt = 0; attempt < options.attempts_per_blueprint && !bp; ++attempt) {
      bp = generate_one(bs, n, rng, options, id);
      if (bp && !validate_blueprint(*bp, bs).empty()) bp.reset();
    }
    if (!bp) throw GenerationExhausted("could not generate a " + std::to_string(n) + "-block blueprint");
    (in_train_split(bp->id, options.train_fraction) ? lib.train : lib.test).push_back(std::move(*bp));
  }
  return lib;
}

Blueprint build_blueprint(const BlockSet& bs, const std::string& id, int root, const std::vector<Attachment>& steps) {
  Partial s;
  s.pose[root] = Posed::identity();
  GeneratorOptions opt;
  opt.snap_guard_distance = 0.0;
  for (const auto& st : steps) {
    if (!s.pose.count(st.existing.block) || s.pose.count(st.incoming.block))
      throw SchemaError("attachment must join a new block onto a placed one");
    if (!attach(s, bs, st.existing, st.incoming, st.twist, opt))
      throw GeometryError("attachment of block " + std::to_string(st.incoming.block) + " penetrates the structure");
  }
  return finish(s, id);
}

BlueprintLibrary curated_blueprints(const BlockSet& bs) {
  // cube magnets: 0 = +x (+), 1 = -x (-); cube ids 0..3, bar 4..6 with the same layout
  BlueprintLibrary lib;
  lib.train.push_back(build_blueprint(bs, "cur-02-cubes", 0, {{{0, 0}, {1, 1}, 0.0}}));
  lib.train.push_back(build_blueprint(bs, "cur-03-chain", 0, {{{0, 0}, {1, 1}, 0.0}, {{1, 0}, {2, 1}, 0.0}}));
  lib.train.push_back(
      build_blueprint(bs, "cur-04-chain", 0, {{{0, 0}, {1, 1}, 0.0}, {{1, 0}, {2, 1}, 0.0}, {{2, 0}, {3, 1}, 0.0}}));
  return lib;
}

}  // namespace magnaforge
