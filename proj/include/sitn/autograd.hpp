#pragma once

// A small reverse-mode differentiation engine over dense row-major matrices.
//
// Every value in a computation is a Var (shared node). Parameters are long
// lived leaf nodes; intermediate nodes keep their parents alive until the
// root of the graph is released. Gradients accumulate into Node::grad.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sitn/error.hpp"

namespace sitn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Matrix& grad_ref() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix::Zero(value.rows(), value.cols());
    }
    return grad;
  }
  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

inline Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->zero_grad();
  return n;
}

inline double scalar(const Var& v) {
  if (v->value.size() != 1) throw ShapeError("scalar(): value is not 1x1");
  return v->value(0, 0);
}

namespace detail {

inline Var make_node(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return n;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a->rows()) + "x" +
                     std::to_string(a->cols()) + " vs " + std::to_string(b->rows()) + "x" +
                     std::to_string(b->cols()));
  }
}

}  // namespace detail

// Runs reverse accumulation from a 1x1 root. Leaf gradients are accumulated,
// not overwritten; callers zero parameter gradients between steps.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw ShapeError("backward(): root must be 1x1");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_ref()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra ops.

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_node(a->value + b->value, {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_ref() += self.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_node(a->value - b->value, {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_ref() += self.grad;
    if (self.parents[1]->requires_grad) self.parents[1]->grad_ref() -= self.grad;
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make_node(a->value * s, {a}, [s](Node& self) {
    self.parents[0]->grad_ref() += self.grad * s;
  });
}

// a (r x c) + b (1 x c) broadcast over rows.
inline Var add_row(const Var& a, const Var& b) {
  if (b->rows() != 1 || b->cols() != a->cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix out = a->value.rowwise() + b->value.row(0);
  return detail::make_node(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad_ref() += self.grad;
    if (self.parents[1]->requires_grad) self.parents[1]->grad_ref() += self.grad.colwise().sum();
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows()) throw ShapeError("matmul: inner dimension mismatch");
  return detail::make_node(a->value * b->value, {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) A->grad_ref().noalias() += self.grad * B->value.transpose();
    if (B->requires_grad) B->grad_ref().noalias() += A->value.transpose() * self.grad;
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a->cols() != b->cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  return detail::make_node(a->value * b->value.transpose(), {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) A->grad_ref().noalias() += self.grad * B->value;
    if (B->requires_grad) B->grad_ref().noalias() += self.grad.transpose() * A->value;
  });
}

// a^T * b
inline Var matmul_tn(const Var& a, const Var& b) {
  if (a->rows() != b->rows()) throw ShapeError("matmul_tn: inner dimension mismatch");
  return detail::make_node(a->value.transpose() * b->value, {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) A->grad_ref().noalias() += B->value * self.grad.transpose();
    if (B->requires_grad) B->grad_ref().noalias() += A->value * self.grad;
  });
}

inline Var tanh(const Var& a) {
  Matrix out = a->value.array().tanh().matrix();
  return detail::make_node(out, {a}, [out](Node& self) {
    self.parents[0]->grad_ref().array() += self.grad.array() * (1.0 - out.array().square());
  });
}

inline Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a->value.sum();
  return detail::make_node(std::move(out), {a}, [](Node& self) {
    self.parents[0]->grad_ref().array() += self.grad(0, 0);
  });
}

// Row-wise dot product of two equally shaped matrices, producing r x 1.
inline Var row_dot(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "row_dot");
  Matrix out = (a->value.array() * b->value.array()).rowwise().sum().matrix();
  return detail::make_node(std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) A->grad_ref() += (B->value.array().colwise() * self.grad.col(0).array()).matrix();
    if (B->requires_grad) B->grad_ref() += (A->value.array().colwise() * self.grad.col(0).array()).matrix();
  });
}

// Numerically stable log-sum-exp over each row, producing r x 1.
inline Var row_logsumexp(const Var& a) {
  const Eigen::Index r = a->rows();
  Matrix out(r, 1);
  Matrix soft(a->rows(), a->cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    const double m = a->value.row(i).maxCoeff();
    soft.row(i) = (a->value.row(i).array() - m).exp().matrix();
    const double s = soft.row(i).sum();
    soft.row(i) /= s;
    out(i, 0) = m + std::log(s);
  }
  return detail::make_node(std::move(out), {a}, [soft = std::move(soft)](Node& self) {
    self.parents[0]->grad_ref() += (soft.array().colwise() * self.grad.col(0).array()).matrix();
  });
}

inline Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var row_softmax(const Var& a) {
  Matrix out = softmax_rows(a->value);
  return detail::make_node(out, {a}, [out](Node& self) {
    Matrix dot = (self.grad.array() * out.array()).rowwise().sum().matrix();
    self.parents[0]->grad_ref() +=
        (out.array() * (self.grad.array().colwise() - dot.col(0).array())).matrix();
  });
}

// Row-wise L2 normalization.
inline Var l2_normalize_rows(const Var& a, double eps = 1e-12) {
  Eigen::VectorXd norms = a->value.rowwise().norm();
  norms = norms.array().max(eps);
  Matrix out = (a->value.array().colwise() / norms.array()).matrix();
  return detail::make_node(out, {a}, [out, norms](Node& self) {
    Eigen::VectorXd proj = (self.grad.array() * out.array()).rowwise().sum();
    Matrix g = ((self.grad.array() - (out.array().colwise() * proj.array())).colwise() / norms.array()).matrix();
    self.parents[0]->grad_ref() += g;
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

// Row lookup. With padding_zero set, index 0 yields a zero row and never
// receives gradient.
inline Var gather_rows(const Var& table, std::vector<int> indices, bool padding_zero) {
  const Eigen::Index cols = table->cols();
  Matrix out(static_cast<Eigen::Index>(indices.size()), cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int idx = indices[r];
    if (idx < 0 || idx >= table->rows()) throw ShapeError("gather_rows: index out of range");
    if (padding_zero && idx == 0) {
      out.row(static_cast<Eigen::Index>(r)).setZero();
    } else {
      out.row(static_cast<Eigen::Index>(r)) = table->value.row(idx);
    }
  }
  return detail::make_node(std::move(out), {table}, [indices = std::move(indices), padding_zero](Node& self) {
    Matrix& g = self.parents[0]->grad_ref();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      if (padding_zero && indices[r] == 0) continue;
      g.row(indices[r]) += self.grad.row(static_cast<Eigen::Index>(r));
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || start + len > a->cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a->value.middleCols(start, len);
  return detail::make_node(std::move(out), {a}, [start, len](Node& self) {
    self.parents[0]->grad_ref().middleCols(start, len) += self.grad;
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front()->rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p->rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p->cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p->cols()) = p->value;
    at += p->cols();
  }
  return detail::make_node(std::move(out), parts, [](Node& self) {
    Eigen::Index at = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) p->grad_ref() += self.grad.middleCols(at, p->cols());
      at += p->cols();
    }
  });
}

// Zeroes rows whose mask entry is false.
inline Var mask_rows(const Var& a, std::vector<char> mask) {
  if (static_cast<Eigen::Index>(mask.size()) != a->rows()) throw ShapeError("mask_rows: mask length");
  Matrix out = a->value;
  for (std::size_t r = 0; r < mask.size(); ++r)
    if (!mask[r]) out.row(static_cast<Eigen::Index>(r)).setZero();
  return detail::make_node(std::move(out), {a}, [mask = std::move(mask)](Node& self) {
    Matrix& g = self.parents[0]->grad_ref();
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r]) g.row(static_cast<Eigen::Index>(r)) += self.grad.row(static_cast<Eigen::Index>(r));
  });
}

// Layer normalization over each row with learned gain and bias (1 x c).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Eigen::Index r = x->rows(), c = x->cols();
  if (gain->rows() != 1 || gain->cols() != c || bias->rows() != 1 || bias->cols() != c)
    throw ShapeError("layer_norm: gain/bias shape mismatch");
  Matrix xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mean = x->value.row(i).mean();
    const double var = (x->value.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x->value.row(i).array() - mean) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gain->value.row(0).array()).matrix();
  out.rowwise() += bias->value.row(0);
  return detail::make_node(std::move(out), {x, gain, bias}, [xhat, inv_std](Node& self) {
    const auto& X = self.parents[0];
    const auto& G = self.parents[1];
    const auto& B = self.parents[2];
    if (G->requires_grad) G->grad_ref() += (self.grad.array() * xhat.array()).colwise().sum().matrix();
    if (B->requires_grad) B->grad_ref() += self.grad.colwise().sum();
    if (X->requires_grad) {
      const double c = static_cast<double>(xhat.cols());
      Matrix dxhat = (self.grad.array().rowwise() * G->value.row(0).array()).matrix();
      Matrix& gx = X->grad_ref();
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double m1 = dxhat.row(i).sum();
        const double m2 = dxhat.row(i).dot(xhat.row(i));
        gx.row(i).array() += inv_std(i) / c * (c * dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
    }
  });
}

// Scaled dot-product attention applied independently to `blocks` groups of
// rows. Q has blocks*lq rows, K and V have blocks*lk rows. Keys with a false
// mask entry get zero weight; a query with no valid keys yields a zero row.
inline Var block_attention(const Var& q, const Var& k, const Var& v, std::vector<char> key_mask,
                           Eigen::Index blocks) {
  if (blocks <= 0) throw ShapeError("block_attention: blocks must be positive");
  if (q->cols() != k->cols()) throw ShapeError("block_attention: query/key width mismatch");
  if (k->rows() != v->rows()) throw ShapeError("block_attention: key/value row mismatch");
  if (q->rows() % blocks != 0 || k->rows() % blocks != 0)
    throw ShapeError("block_attention: rows not divisible by block count");
  if (static_cast<Eigen::Index>(key_mask.size()) != k->rows())
    throw ShapeError("block_attention: mask length mismatch");
  const Eigen::Index lq = q->rows() / blocks, lk = k->rows() / blocks;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q->cols()));

  Matrix weights = Matrix::Zero(q->rows(), lk);
  Matrix out = Matrix::Zero(q->rows(), v->cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const auto kb = k->value.middleRows(b * lk, lk);
    const auto vb = v->value.middleRows(b * lk, lk);
    bool any_valid = false;
    for (Eigen::Index j = 0; j < lk; ++j) any_valid = any_valid || key_mask[b * lk + j];
    if (!any_valid) continue;
    Matrix scores = q->value.middleRows(b * lq, lq) * kb.transpose() * inv_sqrt_d;
    for (Eigen::Index i = 0; i < lq; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < lk; ++j)
        if (key_mask[b * lk + j]) m = std::max(m, scores(i, j));
      double s = 0.0;
      for (Eigen::Index j = 0; j < lk; ++j) {
        const double w = key_mask[b * lk + j] ? std::exp(scores(i, j) - m) : 0.0;
        weights(b * lq + i, j) = w;
        s += w;
      }
      weights.row(b * lq + i) /= s;
    }
    out.middleRows(b * lq, lq).noalias() = weights.middleRows(b * lq, lq) * vb;
  }
  return detail::make_node(
      std::move(out), {q, k, v}, [weights = std::move(weights), blocks, lq, lk, inv_sqrt_d](Node& self) {
        const auto& Q = self.parents[0];
        const auto& K = self.parents[1];
        const auto& V = self.parents[2];
        for (Eigen::Index b = 0; b < blocks; ++b) {
          const auto w = weights.middleRows(b * lq, lq);
          const auto g = self.grad.middleRows(b * lq, lq);
          if (V->requires_grad) V->grad_ref().middleRows(b * lk, lk).noalias() += w.transpose() * g;
          if (!Q->requires_grad && !K->requires_grad) continue;
          Matrix dw = g * V->value.middleRows(b * lk, lk).transpose();
          Matrix ds = (w.array() * (dw.array().colwise() - (dw.array() * w.array()).rowwise().sum())).matrix();
          ds *= inv_sqrt_d;
          if (Q->requires_grad)
            Q->grad_ref().middleRows(b * lq, lq).noalias() += ds * K->value.middleRows(b * lk, lk);
          if (K->requires_grad)
            K->grad_ref().middleRows(b * lk, lk).noalias() += ds.transpose() * Q->value.middleRows(b * lq, lq);
        }
      });
}

// Mean over the valid rows of each block: X has blocks*len rows, output is
// blocks x cols.
inline Var masked_mean_pool(const Var& x, std::vector<char> mask, Eigen::Index blocks) {
  if (blocks <= 0 || x->rows() % blocks != 0) throw ShapeError("masked_mean_pool: bad block count");
  if (static_cast<Eigen::Index>(mask.size()) != x->rows()) throw ShapeError("masked_mean_pool: mask length");
  const Eigen::Index len = x->rows() / blocks;
  Matrix out = Matrix::Zero(blocks, x->cols());
  std::vector<double> inv_count(static_cast<std::size_t>(blocks));
  for (Eigen::Index b = 0; b < blocks; ++b) {
    int count = 0;
    for (Eigen::Index j = 0; j < len; ++j) {
      if (!mask[b * len + j]) continue;
      out.row(b) += x->value.row(b * len + j);
      ++count;
    }
    if (count == 0) throw DataError("masked_mean_pool: sequence has no valid positions");
    inv_count[b] = 1.0 / count;
    out.row(b) *= inv_count[b];
  }
  return detail::make_node(std::move(out), {x}, [mask = std::move(mask), inv_count, len](Node& self) {
    Matrix& g = self.parents[0]->grad_ref();
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (!mask[r]) continue;
      const auto b = static_cast<Eigen::Index>(r) / len;
      g.row(static_cast<Eigen::Index>(r)) += self.grad.row(b) * inv_count[b];
    }
  });
}

// Summed binary cross-entropy on sigmoid(logits) with the probability clamped
// to [eps, 1-eps]. Where the clamp is active the gradient is zero.
inline Var bce_with_logits_sum(const Var& logits, std::vector<int> labels, double eps = 1e-7) {
  if (logits->cols() != 1 || static_cast<Eigen::Index>(labels.size()) != logits->rows())
    throw ShapeError("bce_with_logits_sum: expected n x 1 logits matching labels");
  Matrix dlogit(logits->rows(), 1);
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits->rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y != 0 && y != 1) throw DataError("bce: label must be 0 or 1");
    const double z = logits->value(i, 0);
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double pc = std::clamp(p, eps, 1.0 - eps);
    total += -(y * std::log(pc) + (1 - y) * std::log(1.0 - pc));
    dlogit(i, 0) = (p < eps || p > 1.0 - eps) ? 0.0 : p - y;
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return detail::make_node(std::move(out), {logits}, [dlogit = std::move(dlogit)](Node& self) {
    self.parents[0]->grad_ref() += dlogit * self.grad(0, 0);
  });
}

}  // namespace ag
}  // namespace sitn
