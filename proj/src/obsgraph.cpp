#include "magnaforge/obsgraph.hpp"

#include "magnaforge/simenv.hpp"

namespace magnaforge {

ObsDims obs_dims(int n_blocks, int n_grippers) {
  ObsDims d;
  d.n_nodes = n_blocks;
  d.d_node = 1 + n_grippers;
  d.n_edges = n_blocks * (n_blocks - 1);
  d.d_edge = edge_feature::width;
  d.d_global = n_grippers * global_feature::width(n_blocks);
  d.n_grippers = n_grippers;
  return d;
}

ObsDims GraphObs::dims() const { return obs_dims(n_blocks(), n_grippers); }

namespace {

Eigen::Matrix<double, 6, 1> rotation_delta_6d(const Mat3d& r) { return rotation_6d<double>(r - Mat3d::Identity()); }

}  // namespace

GraphObs build_obs(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg) {
  namespace ef = edge_feature;
  namespace gf = global_feature;
  const int n = bs.size();
  const int g_count = cfg.n_grippers;
  const ObsDims dims = obs_dims(n, g_count);

  GraphObs obs;
  obs.n_grippers = g_count;
  obs.nodes = Eigen::MatrixXd::Zero(n, dims.d_node);
  obs.edges = Eigen::MatrixXd::Zero(dims.n_edges, dims.d_edge);
  obs.src.resize(dims.n_edges);
  obs.dst.resize(dims.n_edges);
  obs.global = Eigen::VectorXd::Zero(dims.d_global);

  std::vector<Mat3d> rot(n);
  for (int b = 0; b < n; ++b) {
    rot[b] = state.poses[b].rotation();
    obs.nodes(b, 0) = state.poses[b].position.z();
    for (int g = 0; g < g_count; ++g)
      if (state.gripper_holding[g] == b) obs.nodes(b, 1 + g) = 1.0;
  }

  for (int a = 0; a < n; ++a) {
    const Posed& pa = state.poses[a];
    const Mat3d ra_t = rot[a].transpose();
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      const int e = edge_index(n, a, b);
      obs.src[e] = a;
      obs.dst[e] = b;
      auto row = obs.edges.row(e);
      const Posed& pb = state.poses[b];
      row.segment<3>(ef::com_dp) = ra_t * (pb.position - pa.position);
      row[ef::is_connected] = state.connected(a, b) ? 1.0 : 0.0;

      auto c = bp.connection_between(a, b);
      if (!c) continue;
      row[ef::should_connect] = 1.0;
      Vec3d anchor_a = magnet_anchor(bs, pa, c->a), anchor_b = magnet_anchor(bs, pb, c->b);
      Vec3d axis_a = magnet_axis(bs, pa, c->a), axis_b = magnet_axis(bs, pb, c->b);
      row.segment<3>(ef::magnet_dp) = ra_t * (anchor_a - anchor_b);
      Mat3d align = rotation_between<double>(axis_b, -axis_a).toRotationMatrix();
      row.segment<6>(ef::magnet_dq) = rotation_delta_6d(ra_t * align * rot[a]);

      Posed live = relative(pa, pb);
      Posed want = *bp.relative_pose(a, b);
      row.segment<3>(ef::blueprint_dp) = live.position - want.position;
      Mat3d err = want.rotation() * live.rotation().transpose();
      row.segment<6>(ef::blueprint_dq) = rotation_delta_6d(err);
    }
  }

  const int width = gf::width(n);
  for (int g = 0; g < g_count; ++g) {
    auto seg = obs.global.segment(g * width, width);
    const auto& held = state.gripper_holding[g];
    if (held) seg.segment<3>(gf::up) = rot[*held].transpose() * Vec3d::UnitZ();
    seg.segment<3>(gf::linear_velocity) = state.gripper_linear_velocity[g];
    seg.segment<3>(gf::angular_velocity) = state.gripper_angular_velocity[g];
    seg[gf::held + (held ? *held : n)] = 1.0;
  }
  return obs;
}

Eigen::VectorXd invariant_global(const GraphObs& obs) {
  namespace gf = global_feature;
  const int n = obs.n_blocks();
  const int width = gf::width(n);
  Eigen::VectorXd out(obs.n_grippers * gf::invariant_width);
  for (int g = 0; g < obs.n_grippers; ++g) {
    out.segment<9>(g * gf::invariant_width) = obs.global.segment<9>(g * width);
    out[g * gf::invariant_width + 9] = obs.global[g * width + gf::held + n];
  }
  return out;
}

FlatObs export_flat(const GraphObs& obs) {
  FlatObs flat;
  flat.dims = obs.dims();
  Eigen::VectorXd f = flat_features(obs);
  flat.features.assign(f.data(), f.data() + f.size());
  flat.edge_index.reserve(2 * obs.src.size());
  for (std::size_t e = 0; e < obs.src.size(); ++e) {
    flat.edge_index.push_back(obs.src[e]);
    flat.edge_index.push_back(obs.dst[e]);
  }
  return flat;
}

Eigen::VectorXd flat_features(const GraphObs& obs) {
  const ObsDims d = obs.dims();
  Eigen::VectorXd out(d.flat_size());
  int k = 0;
  for (int i = 0; i < obs.nodes.rows(); ++i)
    for (int j = 0; j < obs.nodes.cols(); ++j) out[k++] = obs.nodes(i, j);
  for (int i = 0; i < obs.edges.rows(); ++i)
    for (int j = 0; j < obs.edges.cols(); ++j) out[k++] = obs.edges(i, j);
  for (int i = 0; i < obs.global.size(); ++i) out[k++] = obs.global[i];
  return out;
}

GraphObs permute_obs(const GraphObs& obs, std::span<const int> perm) {
  const int n = obs.n_blocks();
  GraphObs out = obs;
  for (int b = 0; b < n; ++b) out.nodes.row(perm[b]) = obs.nodes.row(b);
  for (int e = 0; e < static_cast<int>(obs.src.size()); ++e)
    out.edges.row(edge_index(n, perm[obs.src[e]], perm[obs.dst[e]])) = obs.edges.row(e);
  const int width = global_feature::width(n);
  for (int g = 0; g < obs.n_grippers; ++g)
    for (int b = 0; b < n; ++b)
      out.global[g * width + global_feature::held + perm[b]] = obs.global[g * width + global_feature::held + b];
  return out;
}

}  // namespace magnaforge
