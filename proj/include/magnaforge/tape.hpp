#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace magnaforge {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = std::vector<int>;
using IndexPtr = std::shared_ptr<const Index>;

inline IndexPtr make_index(Index idx) { return std::make_shared<const Index>(std::move(idx)); }

/// Reverse-mode tape over row-major matrices. Nodes are appended in evaluation order;
/// backward() walks them in reverse.
template <typename Scalar>
class Tape {
 public:
  using Matrix = Mat<Scalar>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  /// Constant input; receives no gradient.
  Var input(Matrix value);
  /// Parameter leaf referencing external storage, which must outlive the tape.
  Var param(const Matrix& value, int tag);

  const Matrix& value(Var v) const { return nodes_[v.id].ref ? *nodes_[v.id].ref : nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Adds `g` to the gradient of `v`; call for each output before backward().
  void seed(Var v, const Matrix& g);
  void backward();

  /// Gradient of a node after backward(); zero-sized if it never received one.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  int param_tag(Var v) const { return nodes_[v.id].tag; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Used by op implementations.
  using Backward = std::function<void(Tape&, int self)>;
  Var push(Matrix value, std::vector<int> parents, Backward backward);
  Matrix& grad_ref(int id);
  const Matrix& value_of(int id) const { return nodes_[id].ref ? *nodes_[id].ref : nodes_[id].value; }
  const Matrix& grad_of(int id) const { return nodes_[id].grad; }
  bool needs(int id) const { return nodes_[id].needs_grad; }

  std::vector<std::pair<int, Var>> params() const;

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
    int tag = -1;
  };
  std::vector<Node> nodes_;
};

template <typename Scalar>
using Var = typename Tape<Scalar>::Var;

// Ops -------------------------------------------------------------------------

template <typename Scalar> Var<Scalar> matmul(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b);
/// a * b^T
template <typename Scalar> Var<Scalar> matmul_nt(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> add(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b);
/// Adds a 1 x cols row to every row.
template <typename Scalar> Var<Scalar> add_row(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> row);
template <typename Scalar> Var<Scalar> scale(Tape<Scalar>& t, Var<Scalar> a, Scalar s);
template <typename Scalar> Var<Scalar> relu(Tape<Scalar>& t, Var<Scalar> a);
template <typename Scalar> Var<Scalar> clamp(Tape<Scalar>& t, Var<Scalar> a, Scalar lo, Scalar hi);
/// Row-wise normalization with gain and offset rows.
template <typename Scalar>
Var<Scalar> layer_norm(Tape<Scalar>& t, Var<Scalar> x, Var<Scalar> gain, Var<Scalar> offset, Scalar eps = Scalar(1e-5));
template <typename Scalar> Var<Scalar> gather_rows(Tape<Scalar>& t, Var<Scalar> a, IndexPtr rows);
/// Row-major reinterpretation.
template <typename Scalar> Var<Scalar> reshape(Tape<Scalar>& t, Var<Scalar> a, int rows, int cols);

/// out[e, h] = s * <q[qi[e], head h], k[ki[e], head h]>; q and k have `heads` equal column blocks.
template <typename Scalar>
Var<Scalar> pair_scores(Tape<Scalar>& t, Var<Scalar> q, Var<Scalar> k, IndexPtr qi, IndexPtr ki, int heads, Scalar s);
/// Softmax of each column over the rows sharing a segment id.
template <typename Scalar> Var<Scalar> segment_softmax(Tape<Scalar>& t, Var<Scalar> scores, IndexPtr seg, int n_seg);
/// out[seg[e], head h] += w[e, h] * v[vi[e], head h].
template <typename Scalar>
Var<Scalar> head_aggregate(Tape<Scalar>& t, Var<Scalar> w, Var<Scalar> v, IndexPtr vi, IndexPtr seg, int n_seg, int heads);

/// x * w + b
template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& t, Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
  return add_row(t, matmul(t, x, w), b);
}

}  // namespace magnaforge
