#include "magnaforge/nets.hpp"

#include "magnaforge/errors.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace magnaforge {

const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::gat: return "gat";
    case Architecture::no_attention: return "no-attention";
    case Architecture::resnet: return "resnet";
  }
  return "?";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "gat") return Architecture::gat;
  if (text == "no-attention") return Architecture::no_attention;
  if (text == "resnet") return Architecture::resnet;
  throw ConfigError("unknown architecture '" + text + "'");
}

// Config -----------------------------------------------------------------------

void NetConfig::validate() const {
  if (n_blocks < 2) throw ConfigError("net config: n_blocks must be >= 2");
  if (n_grippers != 1 && n_grippers != 2) throw ConfigError("net config: n_grippers must be 1 or 2");
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0) throw ConfigError("net config: d_model must be a positive multiple of heads");
  if (d_key <= 0 || ff <= 0 || layers <= 0 || critic_hidden <= 0) throw ConfigError("net config: widths must be positive");
  if (resnet_hidden <= 0 || resnet_blocks <= 0) throw ConfigError("net config: resnet widths must be positive");
  if (!(init_scale > 0)) throw ConfigError("net config: init_scale must be positive");
  if (init_log_std < kLogStdMin || init_log_std > kLogStdMax) throw ConfigError("net config: init_log_std out of range");
}

KeyValues NetConfig::to_kv() const {
  KeyValues kv;
  kv.set("net.architecture", to_string(architecture));
  kv.set("net.n_blocks", n_blocks);
  kv.set("net.n_grippers", n_grippers);
  kv.set("net.d_model", d_model);
  kv.set("net.heads", heads);
  kv.set("net.d_key", d_key);
  kv.set("net.ff", ff);
  kv.set("net.layers", layers);
  kv.set("net.critic_hidden", critic_hidden);
  kv.set("net.resnet_hidden", resnet_hidden);
  kv.set("net.resnet_blocks", resnet_blocks);
  kv.set("net.init_scale", init_scale);
  kv.set("net.init_log_std", init_log_std);
  return kv;
}

NetConfig NetConfig::from_kv(const KeyValues& kv) {
  NetConfig c;
  c.architecture = parse_architecture(kv.get("net.architecture", std::string(to_string(c.architecture))));
  c.n_blocks = kv.get("net.n_blocks", c.n_blocks);
  c.n_grippers = kv.get("net.n_grippers", c.n_grippers);
  c.d_model = kv.get("net.d_model", c.d_model);
  c.heads = kv.get("net.heads", c.heads);
  c.d_key = kv.get("net.d_key", c.d_key);
  c.ff = kv.get("net.ff", c.ff);
  c.layers = kv.get("net.layers", c.layers);
  c.critic_hidden = kv.get("net.critic_hidden", c.critic_hidden);
  c.resnet_hidden = kv.get("net.resnet_hidden", c.resnet_hidden);
  c.resnet_blocks = kv.get("net.resnet_blocks", c.resnet_blocks);
  c.init_scale = kv.get("net.init_scale", c.init_scale);
  c.init_log_std = kv.get("net.init_log_std", c.init_log_std);
  c.validate();
  return c;
}

const std::set<std::string>& NetConfig::keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const KeyValues kv = NetConfig{}.to_kv();
    for (const auto& [name, value] : kv.entries()) k.insert(name);
    return k;
  }();
  return keys;
}

// Params -----------------------------------------------------------------------

template <typename Scalar>
int ParamSet<Scalar>::add(const std::string& name, Mat<Scalar> value) {
  names.push_back(name);
  values.push_back(std::move(value));
  return size() - 1;
}

template <typename Scalar>
int ParamSet<Scalar>::index(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ShapeError("no parameter named '" + name + "'");
  return static_cast<int>(it - names.begin());
}

template <typename Scalar>
long long ParamSet<Scalar>::count() const {
  long long n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

template <typename Scalar>
ParamSet<Scalar> ParamSet<Scalar>::zeros_like() const {
  ParamSet out;
  out.names = names;
  for (const auto& v : values) out.values.push_back(Mat<Scalar>::Zero(v.rows(), v.cols()));
  return out;
}

template <typename Scalar>
bool ParamSet<Scalar>::same_shapes(const ParamSet& other) const {
  if (names != other.names) return false;
  for (int i = 0; i < size(); ++i)
    if (values[i].rows() != other.values[i].rows() || values[i].cols() != other.values[i].cols()) return false;
  return true;
}

namespace {

constexpr int kMoveDims = 6;

struct Initializer {
  std::mt19937_64 rng;
  double scale;
  ParamSet<double> out;

  void weight(const std::string& name, int in, int outw) {
    double limit = std::sqrt(3.0 * scale / outw);
    std::uniform_real_distribution<double> u(-limit, limit);
    Mat<double> w(in, outw);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    out.add(name, std::move(w));
  }
  void bias(const std::string& name, int width) { out.add(name, Mat<double>::Zero(1, width)); }
  void dense(const std::string& name, int in, int outw) {
    weight(name + ".w", in, outw);
    bias(name + ".b", outw);
  }
  void norm(const std::string& name, int width) {
    out.add(name + ".gain", Mat<double>::Ones(1, width));
    out.add(name + ".offset", Mat<double>::Zero(1, width));
  }
};

std::string layer_name(int l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

}  // namespace

template <typename Scalar>
AgentParams<Scalar> init_params(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init{std::mt19937_64(seed), config.init_scale, {}};
  const int d = config.d_model;
  const ObsDims dims = obs_dims(config.n_blocks, config.n_grippers);
  if (config.architecture == Architecture::resnet) {
    const int hid = config.resnet_hidden;
    init.dense("resnet.in", dims.flat_size(), hid);
    for (int k = 0; k < config.resnet_blocks; ++k) {
      std::string b = "resnet.block" + std::to_string(k);
      init.dense(b + ".fc1", hid, hid);
      init.dense(b + ".fc2", hid, hid);
      init.norm(b + ".norm", hid);
    }
    init.dense("resnet.nodes", hid, config.n_blocks * d);
    init.dense("resnet.global", hid, d);
  } else {
    const bool attend = config.architecture == Architecture::gat;
    init.dense("embed.node", dims.d_node, d);
    init.dense("embed.edge", dims.d_edge, d);
    init.dense("embed.global", config.n_grippers * global_feature::invariant_width, d);
    for (int l = 0; l < config.layers; ++l) {
      init.norm(layer_name(l, "node_norm"), d);
      if (attend) init.weight(layer_name(l, "query"), d, d);
      if (attend) init.weight(layer_name(l, "key_node"), d, d);
      if (attend) init.weight(layer_name(l, "key_edge"), d, d);
      init.weight(layer_name(l, "value_node"), d, d);
      init.weight(layer_name(l, "value_edge"), d, d);
      init.dense(layer_name(l, "out"), d, d);
      init.norm(layer_name(l, "ff_norm"), d);
      init.dense(layer_name(l, "ff1"), d, config.ff);
      init.dense(layer_name(l, "ff2"), config.ff, d);
      init.norm(layer_name(l, "global_norm"), d);
      init.norm(layer_name(l, "global_src_norm"), d);
      if (attend) init.weight(layer_name(l, "global_query"), d, d);
      if (attend) init.weight(layer_name(l, "global_key"), d, d);
      init.weight(layer_name(l, "global_value"), d, d);
      init.dense(layer_name(l, "global_out"), d, d);
      init.norm(layer_name(l, "global_ff_norm"), d);
      init.dense(layer_name(l, "global_ff1"), d, config.ff);
      init.dense(layer_name(l, "global_ff2"), config.ff, d);
    }
    init.norm("final.node_norm", d);
    init.norm("final.global_norm", d);
  }
  init.dense("head.key", d, config.d_key);
  init.dense("head.query", d, config.n_grippers * config.d_key);
  init.dense("head.move", d, kMoveDims);
  init.out.add("head.log_std", Mat<double>::Constant(1, kMoveDims, config.init_log_std));
  init.dense("critic.fc1", d, config.critic_hidden);
  init.dense("critic.fc2", config.critic_hidden, config.critic_hidden);
  init.dense("critic.fc3", config.critic_hidden, 1);
  return {config, init.out.template cast<Scalar>()};
}

// Batching ---------------------------------------------------------------------

template <typename Scalar>
ObsBatch<Scalar> make_batch(std::span<const GraphObs> obs, const NetConfig& config) {
  const int n = config.n_blocks, g_count = config.n_grippers;
  const ObsDims want = obs_dims(n, g_count);
  ObsBatch<Scalar> b;
  b.batch = static_cast<int>(obs.size());
  b.n_blocks = n;
  b.n_grippers = g_count;
  const int m = b.batch, e_count = want.n_edges;
  for (const auto& o : obs)
    if (!(o.dims() == want)) throw ShapeError("observation dims do not match the network config");

  if (config.architecture == Architecture::resnet) {
    b.flat.resize(m, want.flat_size());
    for (int s = 0; s < m; ++s) b.flat.row(s) = flat_features(obs[s]).transpose().template cast<Scalar>();
  } else {
    b.nodes.resize(m * n, want.d_node);
    b.edges.resize(m * e_count, want.d_edge);
    b.global.resize(m, g_count * global_feature::invariant_width);
    Index src(m * e_count), dst(m * e_count), iota(m * e_count);
    for (int s = 0; s < m; ++s) {
      b.nodes.middleRows(s * n, n) = obs[s].nodes.template cast<Scalar>();
      b.edges.middleRows(s * e_count, e_count) = obs[s].edges.template cast<Scalar>();
      b.global.row(s) = invariant_global(obs[s]).transpose().template cast<Scalar>();
      for (int e = 0; e < e_count; ++e) {
        src[s * e_count + e] = s * n + obs[s].src[e];
        dst[s * e_count + e] = s * n + obs[s].dst[e];
      }
    }
    std::iota(iota.begin(), iota.end(), 0);
    b.src = make_index(std::move(src));
    b.dst = make_index(std::move(dst));
    b.edge_iota = make_index(std::move(iota));
  }
  Index sample(m * n), node_iota(m * n);
  for (int i = 0; i < m * n; ++i) sample[i] = i / n;
  std::iota(node_iota.begin(), node_iota.end(), 0);
  b.node_sample = make_index(std::move(sample));
  b.node_iota = make_index(std::move(node_iota));
  Index qr(m * g_count * n), kr(m * g_count * n);
  for (int s = 0; s < m; ++s)
    for (int g = 0; g < g_count; ++g)
      for (int j = 0; j < n; ++j) {
        int k = (s * g_count + g) * n + j;
        qr[k] = s * g_count + g;
        kr[k] = s * n + j;
      }
  b.query_rows = make_index(std::move(qr));
  b.key_rows = make_index(std::move(kr));
  return b;
}

// Forward ----------------------------------------------------------------------

namespace {

template <typename Scalar>
struct Builder {
  Tape<Scalar>& t;
  const ParamSet<Scalar>& ps;
  std::vector<Var<Scalar>> cache;

  Builder(Tape<Scalar>& tape, const ParamSet<Scalar>& params) : t(tape), ps(params), cache(params.size()) {}

  Var<Scalar> p(const std::string& name) {
    int i = ps.index(name);
    if (!cache[i].valid()) cache[i] = t.param(ps.values[i], i);
    return cache[i];
  }
  Var<Scalar> dense(Var<Scalar> x, const std::string& name) { return linear(t, x, p(name + ".w"), p(name + ".b")); }
  Var<Scalar> norm(Var<Scalar> x, const std::string& name) {
    return layer_norm(t, x, p(name + ".gain"), p(name + ".offset"));
  }
  Var<Scalar> mlp(Var<Scalar> x, const std::string& a, const std::string& b) {
    return dense(relu(t, dense(x, a)), b);
  }
};

template <typename Scalar>
Var<Scalar> uniform_weights(Tape<Scalar>& t, const Index& seg, int n_seg, int heads) {
  std::vector<int> count(n_seg, 0);
  for (int s : seg) ++count[s];
  Mat<Scalar> w(static_cast<Eigen::Index>(seg.size()), heads);
  for (std::size_t e = 0; e < seg.size(); ++e) w.row(e).setConstant(Scalar(1) / count[seg[e]]);
  return t.input(std::move(w));
}

}  // namespace

template <typename Scalar>
ForwardGraph<Scalar> build_forward(Tape<Scalar>& t, const AgentParams<Scalar>& params, const ObsBatch<Scalar>& batch) {
  const NetConfig& cfg = params.config;
  if (batch.n_blocks != cfg.n_blocks || batch.n_grippers != cfg.n_grippers)
    throw ShapeError("batch shape does not match the network config");
  Builder<Scalar> B(t, params.params);
  ForwardGraph<Scalar> out;
  const int m = batch.batch, n = cfg.n_blocks, d = cfg.d_model, h_count = cfg.heads;

  if (cfg.architecture == Architecture::resnet) {
    if (batch.flat.rows() != m) throw ShapeError("resnet needs the flat observation");
    Var<Scalar> x = B.dense(t.input(batch.flat), "resnet.in");
    for (int k = 0; k < cfg.resnet_blocks; ++k) {
      std::string b = "resnet.block" + std::to_string(k);
      x = B.norm(add(t, x, B.mlp(x, b + ".fc1", b + ".fc2")), b + ".norm");
    }
    out.node_h = reshape(t, B.dense(x, "resnet.nodes"), m * n, d);
    out.global_h = B.dense(x, "resnet.global");
  } else {
    const bool attend = cfg.architecture == Architecture::gat;
    const Scalar head_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d / h_count));
    Var<Scalar> h = B.dense(t.input(batch.nodes), "embed.node");
    Var<Scalar> e = B.dense(t.input(batch.edges), "embed.edge");
    Var<Scalar> g = B.dense(t.input(batch.global), "embed.global");
    Var<Scalar> node_uniform, global_uniform;
    if (!attend) {
      node_uniform = uniform_weights(t, *batch.dst, m * n, h_count);
      global_uniform = uniform_weights(t, *batch.node_sample, m, h_count);
    }
    for (int l = 0; l < cfg.layers; ++l) {
      auto P = [&](const char* part) { return B.p(layer_name(l, part)); };
      // nodes attend over incoming edges; keys and values mix the sender with the edge
      Var<Scalar> hn = B.norm(h, layer_name(l, "node_norm"));
      Var<Scalar> value = add(t, gather_rows(t, matmul(t, hn, P("value_node")), batch.src), matmul(t, e, P("value_edge")));
      Var<Scalar> w;
      if (attend) {
        Var<Scalar> q = matmul(t, hn, P("query"));
        Var<Scalar> key = add(t, gather_rows(t, matmul(t, hn, P("key_node")), batch.src), matmul(t, e, P("key_edge")));
        w = segment_softmax(t, pair_scores(t, q, key, batch.dst, batch.edge_iota, h_count, head_scale), batch.dst, m * n);
      } else {
        w = node_uniform;
      }
      out.node_attention.push_back(w);
      Var<Scalar> msg = head_aggregate(t, w, value, batch.edge_iota, batch.dst, m * n, h_count);
      h = add(t, h, B.dense(msg, layer_name(l, "out")));
      h = add(t, h, B.mlp(B.norm(h, layer_name(l, "ff_norm")), layer_name(l, "ff1"), layer_name(l, "ff2")));

      // the global node attends over all blocks of its sample
      Var<Scalar> gn = B.norm(g, layer_name(l, "global_norm"));
      Var<Scalar> hs = B.norm(h, layer_name(l, "global_src_norm"));
      Var<Scalar> gv = matmul(t, hs, P("global_value"));
      Var<Scalar> gw;
      if (attend) {
        Var<Scalar> gq = matmul(t, gn, P("global_query"));
        Var<Scalar> gk = matmul(t, hs, P("global_key"));
        gw = segment_softmax(t, pair_scores(t, gq, gk, batch.node_sample, batch.node_iota, h_count, head_scale),
                             batch.node_sample, m);
      } else {
        gw = global_uniform;
      }
      out.global_attention.push_back(gw);
      Var<Scalar> gm = head_aggregate(t, gw, gv, batch.node_iota, batch.node_sample, m, h_count);
      g = add(t, g, B.dense(gm, layer_name(l, "global_out")));
      g = add(t, g, B.mlp(B.norm(g, layer_name(l, "global_ff_norm")), layer_name(l, "global_ff1"), layer_name(l, "global_ff2")));
    }
    out.node_h = B.norm(h, "final.node_norm");
    out.global_h = B.norm(g, "final.global_norm");
  }

  // decoders
  Var<Scalar> keys = B.dense(out.node_h, "head.key");
  Var<Scalar> queries = reshape(t, B.dense(out.global_h, "head.query"), m * cfg.n_grippers, cfg.d_key);
  const Scalar key_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg.d_key));
  out.logits = reshape(t, pair_scores(t, queries, keys, batch.query_rows, batch.key_rows, 1, key_scale), m * cfg.n_grippers, n);
  out.move_mean = B.dense(out.node_h, "head.move");
  out.log_std = clamp(t, B.p("head.log_std"), Scalar(kLogStdMin), Scalar(kLogStdMax));
  Var<Scalar> c = relu(t, B.dense(out.global_h, "critic.fc1"));
  c = relu(t, B.dense(c, "critic.fc2"));
  out.value = B.dense(c, "critic.fc3");
  return out;
}

namespace {

template <typename Scalar>
std::vector<PolicyOutput> read_outputs(const Tape<Scalar>& t, const ForwardGraph<Scalar>& f, int m, const NetConfig& cfg) {
  const int n = cfg.n_blocks, g_count = cfg.n_grippers;
  const auto& logits = t.value(f.logits);
  const auto& mean = t.value(f.move_mean);
  const auto& log_std = t.value(f.log_std);
  const auto& value = t.value(f.value);
  std::vector<PolicyOutput> out(m);
  for (int s = 0; s < m; ++s) {
    out[s].select_logits = logits.middleRows(s * g_count, g_count).template cast<double>();
    out[s].move_mean = mean.middleRows(s * n, n).template cast<double>();
    out[s].move_log_std = log_std.row(0).transpose().template cast<double>();
    out[s].value = static_cast<double>(value(s, 0));
  }
  return out;
}

template <typename Scalar>
AgentParams<Scalar> with_architecture(const AgentParams<Scalar>& params, Architecture a) {
  AgentParams<Scalar> copy = params;
  copy.config.architecture = a;
  return copy;
}

}  // namespace

template <typename Scalar>
std::vector<PolicyOutput> policy_forward_batch(const AgentParams<Scalar>& params, std::span<const GraphObs> obs) {
  ObsBatch<Scalar> batch = make_batch<Scalar>(obs, params.config);
  Tape<Scalar> t;
  auto f = build_forward(t, params, batch);
  return read_outputs(t, f, batch.batch, params.config);
}

template <typename Scalar>
PolicyOutput policy_forward(const AgentParams<Scalar>& params, const GraphObs& obs) {
  return policy_forward_batch(params, std::span<const GraphObs>(&obs, 1)).front();
}

template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> encode(const AgentParams<Scalar>& params, const GraphObs& obs) {
  ObsBatch<Scalar> batch = make_batch<Scalar>(std::span<const GraphObs>(&obs, 1), params.config);
  Tape<Scalar> t;
  auto f = build_forward(t, params, batch);
  return {t.value(f.node_h), t.value(f.global_h)};
}

template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> encode_no_attention(const AgentParams<Scalar>& params, const GraphObs& obs) {
  if (params.config.architecture == Architecture::resnet) throw ShapeError("encode_no_attention needs graph parameters");
  // attention-only tensors are simply left unused
  return encode(with_architecture(params, Architecture::no_attention), obs);
}

template <typename Scalar>
PolicyOutput resnet_forward(const AgentParams<Scalar>& params, const GraphObs& obs) {
  if (params.config.architecture != Architecture::resnet) throw ShapeError("resnet_forward needs resnet parameters");
  return policy_forward(params, obs);
}

template <typename Scalar>
ParamSet<Scalar> backward(const AgentParams<Scalar>& params, const ObsBatch<Scalar>& batch, const OutputGrads<Scalar>& grads) {
  Tape<Scalar> t;
  auto f = build_forward(t, params, batch);
  t.seed(f.logits, grads.logits);
  t.seed(f.move_mean, grads.move_mean);
  t.seed(f.log_std, grads.log_std);
  t.seed(f.value, grads.value);
  t.backward();
  ParamSet<Scalar> out = params.params.zeros_like();
  for (auto [tag, v] : t.params())
    if (t.grad(v).size()) out.values[tag] += t.grad(v);
  return out;
}

template <typename Scalar>
std::vector<std::vector<Eigen::MatrixXd>> attention_matrices(const AgentParams<Scalar>& params, const GraphObs& obs) {
  if (params.config.architecture == Architecture::resnet) throw ShapeError("the flat network has no attention");
  ObsBatch<Scalar> batch = make_batch<Scalar>(std::span<const GraphObs>(&obs, 1), params.config);
  Tape<Scalar> t;
  auto f = build_forward(t, params, batch);
  const int n = params.config.n_blocks;
  std::vector<std::vector<Eigen::MatrixXd>> out;
  for (auto w : f.node_attention) {
    const auto& W = t.value(w);
    std::vector<Eigen::MatrixXd> per_head(W.cols(), Eigen::MatrixXd::Zero(n, n));
    for (Eigen::Index e = 0; e < W.rows(); ++e)
      for (Eigen::Index h = 0; h < W.cols(); ++h) per_head[h]((*batch.dst)[e], (*batch.src)[e]) = W(e, h);
    out.push_back(std::move(per_head));
  }
  return out;
}

// Distribution -----------------------------------------------------------------

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Eigen::VectorXd log_softmax(const Eigen::VectorXd& z) {
  double top = z.maxCoeff();
  double lse = top + std::log((z.array() - top).exp().sum());
  return z.array() - lse;
}

}  // namespace

std::vector<int> chosen_blocks(std::span<const int> choice) {
  std::vector<int> out;
  for (int c : choice)
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  return out;
}

ActionSample sample_action(const PolicyOutput& out, Rng& rng, bool deterministic) {
  const int g_count = static_cast<int>(out.select_logits.rows());
  const int n = static_cast<int>(out.select_logits.cols());
  ActionSample s;
  s.action.gripper_choice.resize(g_count);
  for (int g = 0; g < g_count; ++g) {
    Eigen::VectorXd lp = log_softmax(out.select_logits.row(g).transpose());
    if (deterministic) {
      Eigen::Index best;
      lp.maxCoeff(&best);
      s.action.gripper_choice[g] = static_cast<int>(best);
    } else {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      double r = u(rng), acc = 0.0;
      int pick = n - 1;
      for (int j = 0; j < n; ++j) {
        acc += std::exp(lp[j]);
        if (r < acc) {
          pick = j;
          break;
        }
      }
      s.action.gripper_choice[g] = pick;
    }
  }
  s.action.block_moves = out.move_mean;
  if (!deterministic) {
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int b : chosen_blocks(s.action.gripper_choice))
      for (int k = 0; k < kMoveDims; ++k) s.action.block_moves(b, k) += std::exp(out.move_log_std[k]) * noise(rng);
  }
  s.log_prob = log_prob(out, s.action);
  s.entropy = entropy(out);
  return s;
}

double log_prob(const PolicyOutput& out, const Action& action) {
  double lp = 0.0;
  for (int g = 0; g < static_cast<int>(action.gripper_choice.size()); ++g)
    lp += log_softmax(out.select_logits.row(g).transpose())[action.gripper_choice[g]];
  for (int b : chosen_blocks(action.gripper_choice))
    for (int k = 0; k < kMoveDims; ++k) {
      double ls = out.move_log_std[k];
      double z = (action.block_moves(b, k) - out.move_mean(b, k)) * std::exp(-ls);
      lp += -0.5 * z * z - ls - kHalfLog2Pi;
    }
  return lp;
}

double entropy(const PolicyOutput& out) {
  double h = 0.0;
  const int g_count = static_cast<int>(out.select_logits.rows());
  for (int g = 0; g < g_count; ++g) {
    Eigen::VectorXd lp = log_softmax(out.select_logits.row(g).transpose());
    h -= (lp.array().exp() * lp.array()).sum();
  }
  h += g_count * (out.move_log_std.array() + kHalfLog2Pi + 0.5).sum();
  return h;
}

#define MAGNAFORGE_NETS_INSTANTIATE(S)                                                                        \
  template struct ParamSet<S>;                                                                                \
  template AgentParams<S> init_params<S>(const NetConfig&, std::uint64_t);                                    \
  template ObsBatch<S> make_batch<S>(std::span<const GraphObs>, const NetConfig&);                            \
  template ForwardGraph<S> build_forward<S>(Tape<S>&, const AgentParams<S>&, const ObsBatch<S>&);             \
  template std::vector<PolicyOutput> policy_forward_batch<S>(const AgentParams<S>&, std::span<const GraphObs>); \
  template PolicyOutput policy_forward<S>(const AgentParams<S>&, const GraphObs&);                            \
  template std::pair<Mat<S>, Mat<S>> encode<S>(const AgentParams<S>&, const GraphObs&);                       \
  template std::pair<Mat<S>, Mat<S>> encode_no_attention<S>(const AgentParams<S>&, const GraphObs&);          \
  template PolicyOutput resnet_forward<S>(const AgentParams<S>&, const GraphObs&);                            \
  template ParamSet<S> backward<S>(const AgentParams<S>&, const ObsBatch<S>&, const OutputGrads<S>&);         \
  template std::vector<std::vector<Eigen::MatrixXd>> attention_matrices<S>(const AgentParams<S>&, const GraphObs&);

MAGNAFORGE_NETS_INSTANTIATE(float)
MAGNAFORGE_NETS_INSTANTIATE(double)

}  // namespace magnaforge
