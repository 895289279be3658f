#pragma once

#include "magnaforge/kvconfig.hpp"
#include "magnaforge/obsgraph.hpp"
#include "magnaforge/simenv.hpp"
#include "magnaforge/tape.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace magnaforge {

enum class Architecture { gat, no_attention, resnet };

const char* to_string(Architecture a);
/// Throws ConfigError.
Architecture parse_architecture(const std::string& text);

struct NetConfig {
  Architecture architecture = Architecture::gat;
  int n_blocks = 16;
  int n_grippers = 2;
  int d_model = 128;
  int heads = 4;
  int d_key = 64;
  int ff = 256;
  int layers = 3;
  int critic_hidden = 512;
  int resnet_hidden = 1024;
  int resnet_blocks = 4;
  double init_scale = 0.333;
  double init_log_std = std::log(0.5);

  void validate() const;
  KeyValues to_kv() const;
  static NetConfig from_kv(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Named parameter tensors in creation order.
template <typename Scalar>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Mat<Scalar>> values;

  int add(const std::string& name, Mat<Scalar> value);
  /// Throws ShapeError for unknown names.
  int index(const std::string& name) const;
  const Mat<Scalar>& operator[](const std::string& name) const { return values[index(name)]; }
  int size() const { return static_cast<int>(values.size()); }
  long long count() const;
  ParamSet zeros_like() const;
  bool same_shapes(const ParamSet& other) const;

  template <typename To>
  ParamSet<To> cast() const {
    ParamSet<To> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<To>());
    return out;
  }
};

template <typename Scalar>
struct AgentParams {
  NetConfig config;
  ParamSet<Scalar> params;

  template <typename To>
  AgentParams<To> cast() const {
    return {config, params.template cast<To>()};
  }
};

/// Variance-scaling (fan-out, uniform) weights, zero biases, unit norm gains.
template <typename Scalar>
AgentParams<Scalar> init_params(const NetConfig& config, std::uint64_t seed);

/// Observations stacked for one batched forward pass.
template <typename Scalar>
struct ObsBatch {
  int batch = 0;
  int n_blocks = 0;
  int n_grippers = 0;
  Mat<Scalar> nodes;   // batch*N x d_node
  Mat<Scalar> edges;   // batch*E x d_edge
  Mat<Scalar> global;  // batch x invariant global width
  Mat<Scalar> flat;    // batch x flat size (flat architecture only)
  IndexPtr src, dst, edge_iota;        // per edge, offset into the stacked nodes
  IndexPtr node_sample, node_iota;     // per node
  IndexPtr query_rows, key_rows;       // per (sample, gripper, block)
};

template <typename Scalar>
ObsBatch<Scalar> make_batch(std::span<const GraphObs> obs, const NetConfig& config);

template <typename Scalar>
struct ForwardGraph {
  Var<Scalar> node_h, global_h;
  Var<Scalar> logits;     // batch*G x N
  Var<Scalar> move_mean;  // batch*N x 6
  Var<Scalar> log_std;    // 1 x 6 (clamped)
  Var<Scalar> value;      // batch x 1
  std::vector<Var<Scalar>> node_attention;    // per layer, batch*E x heads
  std::vector<Var<Scalar>> global_attention;  // per layer, batch*N x heads
};

/// Records the full forward pass on `tape`; the no-attention architecture aggregates with equal weights.
template <typename Scalar>
ForwardGraph<Scalar> build_forward(Tape<Scalar>& tape, const AgentParams<Scalar>& params, const ObsBatch<Scalar>& batch);

struct PolicyOutput {
  Eigen::MatrixXd select_logits;  // n_grippers x N
  Eigen::Matrix<double, Eigen::Dynamic, 6, Eigen::RowMajor> move_mean;
  Eigen::Matrix<double, 6, 1> move_log_std;
  double value = 0.0;
};

template <typename Scalar>
std::vector<PolicyOutput> policy_forward_batch(const AgentParams<Scalar>& params, std::span<const GraphObs> obs);

template <typename Scalar>
PolicyOutput policy_forward(const AgentParams<Scalar>& params, const GraphObs& obs);

/// Node embeddings (N x d_model) and global embedding (1 x d_model) of the graph encoders.
template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> encode(const AgentParams<Scalar>& params, const GraphObs& obs);
/// Same contract with every attention distribution replaced by a uniform mean.
template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> encode_no_attention(const AgentParams<Scalar>& params, const GraphObs& obs);
/// The flat-input residual network; requires Architecture::resnet parameters.
template <typename Scalar>
PolicyOutput resnet_forward(const AgentParams<Scalar>& params, const GraphObs& obs);

/// Loss gradients with respect to the policy outputs of a batch.
template <typename Scalar>
struct OutputGrads {
  Mat<Scalar> logits;     // batch*G x N
  Mat<Scalar> move_mean;  // batch*N x 6
  Mat<Scalar> log_std;    // 1 x 6
  Mat<Scalar> value;      // batch x 1
};

/// Exact parameter gradients for the given output gradients.
template <typename Scalar>
ParamSet<Scalar> backward(const AgentParams<Scalar>& params, const ObsBatch<Scalar>& batch, const OutputGrads<Scalar>& grads);

/// Attention matrices of one observation: [layer][head] N x N, row = receiving block.
template <typename Scalar>
std::vector<std::vector<Eigen::MatrixXd>> attention_matrices(const AgentParams<Scalar>& params, const GraphObs& obs);

// Action distribution -----------------------------------------------------------
// Independent categorical per gripper; Gaussian moves for the distinct chosen blocks.

struct ActionSample {
  Action action;
  double log_prob = 0.0;
  double entropy = 0.0;
};

ActionSample sample_action(const PolicyOutput& out, Rng& rng, bool deterministic = false);
double log_prob(const PolicyOutput& out, const Action& action);
double entropy(const PolicyOutput& out);

/// Distinct chosen blocks in gripper order.
std::vector<int> chosen_blocks(std::span<const int> choice);

// Checkpoints ---------------------------------------------------------------------

struct AdamState {
  ParamSet<float> m;
  ParamSet<float> v;
  long long t = 0;
};

struct Checkpoint {
  AgentParams<float> agent;
  AdamState adam;
  long long iteration = 0;
  long long env_steps = 0;
  std::vector<double> curriculum_rates;
  std::string extra_json = "{}";  // free-form metadata
};

/// Binary file: magic, JSON header (config, tensor index), then raw row-major float data.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
/// Throws ParseError or ShapeError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace magnaforge
