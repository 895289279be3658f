#pragma once

#include "magnaforge/geom.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace magnaforge {

inline constexpr int kFormatVersion = 1;

enum class Polarity { positive, negative };

struct MagnetSpec {
  Vec3d anchor;  // on the block surface, block frame
  Vec3d axis;    // outward face normal, unit
  Polarity polarity = Polarity::positive;
};

struct BlockType {
  int id = 0;
  std::string name;
  Vec3d half_extents = Vec3d::Zero();
  double mass = 1.0;
  std::vector<MagnetSpec> magnets;
};

struct BlockSet {
  std::vector<BlockType> types;
  std::vector<int> instance_type;  // block id -> type id

  int size() const { return static_cast<int>(instance_type.size()); }
  const BlockType& type_of(int block) const { return types.at(instance_type.at(block)); }
  const MagnetSpec& magnet(int block, int m) const { return type_of(block).magnets.at(m); }
  int magnet_count(int block) const { return static_cast<int>(type_of(block).magnets.size()); }
  const Vec3d& half_extents(int block) const { return type_of(block).half_extents; }
};

struct MagnetSlot {
  int block = 0;
  int magnet = 0;
  auto operator<=>(const MagnetSlot&) const = default;
};

/// An undirected magnet link, stored with a < b.
struct Connection {
  MagnetSlot a;
  MagnetSlot b;

  static Connection make(MagnetSlot x, MagnetSlot y) { return x < y ? Connection{x, y} : Connection{y, x}; }
  auto operator<=>(const Connection&) const = default;
};

using BlockPair = std::pair<int, int>;

struct Blueprint {
  std::string id;
  std::vector<int> blocks;                      // sorted used block ids
  std::vector<Connection> connections;          // sorted, canonical
  std::map<BlockPair, Posed> relative_poses;    // key (a, b) with a < b: pose of b in a's frame
  int n_blocks_used = 0;

  bool operator==(const Blueprint&) const = default;

  /// Relative pose of b in a's frame for a blueprint pair, in either key order.
  std::optional<Posed> relative_pose(int a, int b) const;
  /// First connection (by slot order) between two blocks, oriented so that .a is on block `from`.
  std::optional<Connection> connection_between(int from, int to) const;
  bool uses(int block) const;
};

struct BlueprintLibrary {
  std::vector<Blueprint> train;
  std::vector<Blueprint> test;

  const Blueprint* find(const std::string& id) const;
};

enum class ViolationKind {
  UnknownBlock,
  UnknownMagnet,
  SelfConnection,
  DuplicateSlot,
  PolarityMismatch,
  Disconnected,
  MissingRelativePose,
  BlockCountMismatch,
  Inconsistent,
  Penetration,
};

struct Violation {
  ViolationKind kind;
  std::string detail;
};

const char* to_string(ViolationKind kind);

// File formats ---------------------------------------------------------------

BlockSet load_blockset(const std::filesystem::path& path);
BlockSet parse_blockset(const std::string& text);
std::string blockset_to_json(const BlockSet& blockset);

/// Throws GeometryError when a magnet is not on its block's surface.
void check_block_geometry(const BlockType& type);

/// The stand-in blockset: 6 cuboid types, 16 instances.
BlockSet default_blockset();

Blueprint load_blueprint(const std::filesystem::path& path, const BlockSet& blockset);
Blueprint parse_blueprint(const std::string& text, const BlockSet& blockset);
void save_blueprint(const Blueprint& bp, const std::filesystem::path& path);
std::string blueprint_to_json(const Blueprint& bp);

BlueprintLibrary load_library(const std::filesystem::path& path, const BlockSet& blockset);
void save_library(const BlueprintLibrary& lib, const std::filesystem::path& path);
std::string library_to_json(const BlueprintLibrary& lib);

// Geometry -------------------------------------------------------------------

/// World-frame magnet anchor and outward axis for a block at `pose`.
Vec3d magnet_anchor(const BlockSet& bs, const Posed& pose, MagnetSlot slot);
Vec3d magnet_axis(const BlockSet& bs, const Posed& pose, MagnetSlot slot);

/// Block poses with the lowest-id used block at identity.
std::map<int, Posed> realize_blueprint(const Blueprint& bp, const BlockSet& bs);

std::vector<Violation> validate_blueprint(const Blueprint& bp, const BlockSet& bs);

/// Relative pose that joins slot `on_b` of block b onto slot `on_a` of block a,
/// anchors coincident, axes antiparallel, with a twist about the connection axis.
Posed mating_pose(const BlockSet& bs, MagnetSlot on_a, MagnetSlot on_b, double twist);

// Generation -----------------------------------------------------------------

struct GeneratorOptions {
  double train_fraction = 0.85;
  int attempts_per_blueprint = 400;
  int attempts_per_attachment = 60;
  double snap_guard_distance = 0.035;  // reject unconnected near-mating magnet pairs
  double snap_guard_angle = 0.6;
};

BlueprintLibrary generate_blueprints(const BlockSet& bs, std::uint64_t seed, int count, int min_blocks,
                                     int max_blocks, const GeneratorOptions& options = {});

/// Builds a blueprint from an explicit chain/tree of (placed slot, new slot, twist) attachments.
struct Attachment {
  MagnetSlot existing;
  MagnetSlot incoming;
  double twist = 0.0;
};
Blueprint build_blueprint(const BlockSet& bs, const std::string& id, int root, const std::vector<Attachment>& steps);

/// Small hand-picked library: 2-, 3- and 4-block chains on the default blockset.
BlueprintLibrary curated_blueprints(const BlockSet& bs);

std::uint64_t fnv1a64(const std::string& text);
bool in_train_split(const std::string& id, double train_fraction);

}  // namespace magnaforge
