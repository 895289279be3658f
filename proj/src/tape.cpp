#include "magnaforge/tape.hpp"

#include "magnaforge/errors.hpp"

#include <cmath>
#include <string>

namespace magnaforge {
namespace {

template <typename Scalar>
void require(bool ok, const char* op, const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (!ok)
    throw ShapeError(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

template <typename Scalar>
typename Tape<Scalar>::Var Tape<Scalar>::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
typename Tape<Scalar>::Var Tape<Scalar>::param(const Matrix& value, int tag) {
  Node n;
  n.ref = &value;
  n.needs_grad = true;
  n.tag = tag;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
typename Tape<Scalar>::Var Tape<Scalar>::push(Matrix value, std::vector<int> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename Scalar>
typename Tape<Scalar>::Matrix& Tape<Scalar>::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value_of(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

template <typename Scalar>
void Tape<Scalar>::seed(Var v, const Matrix& g) {
  const Matrix& val = value(v);
  require<Scalar>(g.rows() == val.rows() && g.cols() == val.cols(), "seed", val, g);
  grad_ref(v.id) += g;
}

template <typename Scalar>
void Tape<Scalar>::backward() {
  for (int i = size() - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

template <typename Scalar>
std::vector<std::pair<int, typename Tape<Scalar>::Var>> Tape<Scalar>::params() const {
  std::vector<std::pair<int, Var>> out;
  for (int i = 0; i < size(); ++i)
    if (nodes_[i].tag >= 0) out.emplace_back(nodes_[i].tag, Var{i});
  return out;
}

// Ops ------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require<Scalar>(A.cols() == B.rows(), "matmul", A, B);
  Mat<Scalar> out;
  out.noalias() = A * B;
  return t.push(std::move(out), {a.id, b.id}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    if (t.needs(a.id)) t.grad_ref(a.id).noalias() += g * t.value_of(b.id).transpose();
    if (t.needs(b.id)) t.grad_ref(b.id).noalias() += t.value_of(a.id).transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> matmul_nt(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require<Scalar>(A.cols() == B.cols(), "matmul_nt", A, B);
  Mat<Scalar> out;
  out.noalias() = A * B.transpose();
  return t.push(std::move(out), {a.id, b.id}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    if (t.needs(a.id)) t.grad_ref(a.id).noalias() += g * t.value_of(b.id);
    if (t.needs(b.id)) t.grad_ref(b.id).noalias() += g.transpose() * t.value_of(a.id);
  });
}

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require<Scalar>(A.rows() == B.rows() && A.cols() == B.cols(), "add", A, B);
  return t.push(A + B, {a.id, b.id}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    if (t.needs(a.id)) t.grad_ref(a.id) += g;
    if (t.needs(b.id)) t.grad_ref(b.id) += g;
  });
}

template <typename Scalar>
Var<Scalar> add_row(Tape<Scalar>& t, Var<Scalar> a, Var<Scalar> row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  require<Scalar>(R.rows() == 1 && R.cols() == A.cols(), "add_row", A, R);
  Mat<Scalar> out = A.rowwise() + R.row(0);
  return t.push(std::move(out), {a.id, row.id}, [a, row](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    if (t.needs(a.id)) t.grad_ref(a.id) += g;
    if (t.needs(row.id)) t.grad_ref(row.id) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> scale(Tape<Scalar>& t, Var<Scalar> a, Scalar s) {
  return t.push(t.value(a) * s, {a.id}, [a, s](Tape<Scalar>& t, int self) { t.grad_ref(a.id) += t.grad_of(self) * s; });
}

template <typename Scalar>
Var<Scalar> relu(Tape<Scalar>& t, Var<Scalar> a) {
  return t.push(t.value(a).cwiseMax(Scalar(0)), {a.id}, [a](Tape<Scalar>& t, int self) {
    t.grad_ref(a.id) += (t.value_of(a.id).array() > Scalar(0)).select(t.grad_of(self), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> clamp(Tape<Scalar>& t, Var<Scalar> a, Scalar lo, Scalar hi) {
  return t.push(t.value(a).cwiseMax(lo).cwiseMin(hi), {a.id}, [a, lo, hi](Tape<Scalar>& t, int self) {
    const auto& x = t.value_of(a.id).array();
    t.grad_ref(a.id) += (x >= lo && x <= hi).select(t.grad_of(self), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(Tape<Scalar>& t, Var<Scalar> x, Var<Scalar> gain, Var<Scalar> offset, Scalar eps) {
  const auto& X = t.value(x);
  const auto& G = t.value(gain);
  const auto& B = t.value(offset);
  require<Scalar>(G.rows() == 1 && G.cols() == X.cols() && B.rows() == 1 && B.cols() == X.cols(), "layer_norm", X, G);
  const Eigen::Index n = X.rows(), d = X.cols();
  auto xhat = std::make_shared<Mat<Scalar>>(n, d);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar mean = X.row(i).mean();
    auto centered = X.row(i).array() - mean;
    Scalar var = centered.square().mean();
    Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    xhat->row(i) = centered * is;
  }
  Mat<Scalar> out = (xhat->array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  return t.push(std::move(out), {x.id, gain.id, offset.id}, [x, gain, offset, xhat, inv_std](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    if (t.needs(gain.id)) t.grad_ref(gain.id) += (g.array() * xhat->array()).colwise().sum().matrix();
    if (t.needs(offset.id)) t.grad_ref(offset.id) += g.colwise().sum();
    if (!t.needs(x.id)) return;
    const auto& G = t.value_of(gain.id);
    Mat<Scalar> dxhat = g.array().rowwise() * G.row(0).array();
    auto& gx = t.grad_ref(x.id);
    const Scalar d = static_cast<Scalar>(dxhat.cols());
    for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
      Scalar m1 = dxhat.row(i).sum() / d;
      Scalar m2 = dxhat.row(i).dot(xhat->row(i)) / d;
      gx.row(i).array() += (*inv_std)[i] * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
    }
  });
}

template <typename Scalar>
Var<Scalar> gather_rows(Tape<Scalar>& t, Var<Scalar> a, IndexPtr rows) {
  const auto& A = t.value(a);
  const Index& idx = *rows;
  Mat<Scalar> out(static_cast<Eigen::Index>(idx.size()), A.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(r) = A.row(idx[r]);
  }
  return t.push(std::move(out), {a.id}, [a, rows](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    auto& ga = t.grad_ref(a.id);
    const Index& idx = *rows;
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(r);
  });
}

template <typename Scalar>
Var<Scalar> reshape(Tape<Scalar>& t, Var<Scalar> a, int rows, int cols) {
  const auto& A = t.value(a);
  if (static_cast<Eigen::Index>(rows) * cols != A.size()) throw ShapeError("reshape: element count mismatch");
  Mat<Scalar> out = Eigen::Map<const Mat<Scalar>>(A.data(), rows, cols);
  return t.push(std::move(out), {a.id}, [a](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    auto& ga = t.grad_ref(a.id);
    Eigen::Map<Mat<Scalar>>(ga.data(), g.rows(), g.cols()) += g;
  });
}

template <typename Scalar>
Var<Scalar> pair_scores(Tape<Scalar>& t, Var<Scalar> q, Var<Scalar> k, IndexPtr qi, IndexPtr ki, int heads, Scalar s) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  require<Scalar>(Q.cols() == K.cols() && Q.cols() % heads == 0, "pair_scores", Q, K);
  if (qi->size() != ki->size()) throw ShapeError("pair_scores: index lists differ in length");
  const int dh = static_cast<int>(Q.cols()) / heads;
  const auto m = static_cast<Eigen::Index>(qi->size());
  Mat<Scalar> out(m, heads);
  for (Eigen::Index e = 0; e < m; ++e) {
    const int a = (*qi)[e], b = (*ki)[e];
    if (a < 0 || a >= Q.rows() || b < 0 || b >= K.rows()) throw ShapeError("pair_scores: index out of range");
    for (int h = 0; h < heads; ++h) out(e, h) = s * Q.row(a).segment(h * dh, dh).dot(K.row(b).segment(h * dh, dh));
  }
  return t.push(std::move(out), {q.id, k.id}, [q, k, qi, ki, heads, s, dh](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    const auto& Q = t.value_of(q.id);
    const auto& K = t.value_of(k.id);
    const bool need_q = t.needs(q.id), need_k = t.needs(k.id);
    Mat<Scalar>* gq = need_q ? &t.grad_ref(q.id) : nullptr;
    Mat<Scalar>* gk = need_k ? &t.grad_ref(k.id) : nullptr;
    for (Eigen::Index e = 0; e < g.rows(); ++e) {
      const int a = (*qi)[e], b = (*ki)[e];
      for (int h = 0; h < heads; ++h) {
        const Scalar c = s * g(e, h);
        if (gq) gq->row(a).segment(h * dh, dh) += c * K.row(b).segment(h * dh, dh);
        if (gk) gk->row(b).segment(h * dh, dh) += c * Q.row(a).segment(h * dh, dh);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> segment_softmax(Tape<Scalar>& t, Var<Scalar> scores, IndexPtr seg, int n_seg) {
  const auto& S = t.value(scores);
  const Index& sg = *seg;
  if (static_cast<Eigen::Index>(sg.size()) != S.rows()) throw ShapeError("segment_softmax: segment list length");
  const Eigen::Index cols = S.cols();
  Mat<Scalar> top = Mat<Scalar>::Constant(n_seg, cols, -std::numeric_limits<Scalar>::infinity());
  for (Eigen::Index e = 0; e < S.rows(); ++e) top.row(sg[e]) = top.row(sg[e]).cwiseMax(S.row(e));
  Mat<Scalar> out(S.rows(), cols);
  Mat<Scalar> total = Mat<Scalar>::Zero(n_seg, cols);
  for (Eigen::Index e = 0; e < S.rows(); ++e) {
    out.row(e) = (S.row(e) - top.row(sg[e])).array().exp().matrix();
    total.row(sg[e]) += out.row(e);
  }
  for (Eigen::Index e = 0; e < S.rows(); ++e) out.row(e).array() /= total.row(sg[e]).array();
  return t.push(std::move(out), {scores.id}, [scores, seg, n_seg](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    const auto& y = t.value_of(self);
    const Index& sg = *seg;
    Mat<Scalar> dot = Mat<Scalar>::Zero(n_seg, y.cols());
    for (Eigen::Index e = 0; e < y.rows(); ++e) dot.row(sg[e]) += (g.row(e).array() * y.row(e).array()).matrix();
    auto& gs = t.grad_ref(scores.id);
    for (Eigen::Index e = 0; e < y.rows(); ++e)
      gs.row(e).array() += y.row(e).array() * (g.row(e) - dot.row(sg[e])).array();
  });
}

template <typename Scalar>
Var<Scalar> head_aggregate(Tape<Scalar>& t, Var<Scalar> w, Var<Scalar> v, IndexPtr vi, IndexPtr seg, int n_seg, int heads) {
  const auto& W = t.value(w);
  const auto& V = t.value(v);
  require<Scalar>(W.cols() == heads && V.cols() % heads == 0, "head_aggregate", W, V);
  if (vi->size() != seg->size() || static_cast<Eigen::Index>(seg->size()) != W.rows())
    throw ShapeError("head_aggregate: index lists do not match weight rows");
  const int dh = static_cast<int>(V.cols()) / heads;
  Mat<Scalar> out = Mat<Scalar>::Zero(n_seg, V.cols());
  for (Eigen::Index e = 0; e < W.rows(); ++e) {
    const int src = (*vi)[e], dst = (*seg)[e];
    if (src < 0 || src >= V.rows() || dst < 0 || dst >= n_seg) throw ShapeError("head_aggregate: index out of range");
    for (int h = 0; h < heads; ++h) out.row(dst).segment(h * dh, dh) += W(e, h) * V.row(src).segment(h * dh, dh);
  }
  return t.push(std::move(out), {w.id, v.id}, [w, v, vi, seg, heads, dh](Tape<Scalar>& t, int self) {
    const auto& g = t.grad_of(self);
    const auto& W = t.value_of(w.id);
    const auto& V = t.value_of(v.id);
    Mat<Scalar>* gw = t.needs(w.id) ? &t.grad_ref(w.id) : nullptr;
    Mat<Scalar>* gv = t.needs(v.id) ? &t.grad_ref(v.id) : nullptr;
    for (Eigen::Index e = 0; e < W.rows(); ++e) {
      const int src = (*vi)[e], dst = (*seg)[e];
      for (int h = 0; h < heads; ++h) {
        if (gw) (*gw)(e, h) += g.row(dst).segment(h * dh, dh).dot(V.row(src).segment(h * dh, dh));
        if (gv) gv->row(src).segment(h * dh, dh) += W(e, h) * g.row(dst).segment(h * dh, dh);
      }
    }
  });
}

#define MAGNAFORGE_TAPE_INSTANTIATE(S)                                                                       \
  template class Tape<S>;                                                                                    \
  template Var<S> matmul(Tape<S>&, Var<S>, Var<S>);                                                          \
  template Var<S> matmul_nt(Tape<S>&, Var<S>, Var<S>);                                                       \
  template Var<S> add(Tape<S>&, Var<S>, Var<S>);                                                             \
  template Var<S> add_row(Tape<S>&, Var<S>, Var<S>);                                                         \
  template Var<S> scale(Tape<S>&, Var<S>, S);                                                                \
  template Var<S> relu(Tape<S>&, Var<S>);                                                                    \
  template Var<S> clamp(Tape<S>&, Var<S>, S, S);                                                             \
  template Var<S> layer_norm(Tape<S>&, Var<S>, Var<S>, Var<S>, S);                                           \
  template Var<S> gather_rows(Tape<S>&, Var<S>, IndexPtr);                                                   \
  template Var<S> reshape(Tape<S>&, Var<S>, int, int);                                                       \
  template Var<S> pair_scores(Tape<S>&, Var<S>, Var<S>, IndexPtr, IndexPtr, int, S);                         \
  template Var<S> segment_softmax(Tape<S>&, Var<S>, IndexPtr, int);                                          \
  template Var<S> head_aggregate(Tape<S>&, Var<S>, Var<S>, IndexPtr, IndexPtr, int, int);

MAGNAFORGE_TAPE_INSTANTIATE(float)
MAGNAFORGE_TAPE_INSTANTIATE(double)

}  // namespace magnaforge
