#pragma once

// Cross-domain contrastive objectives.
//
// Instance-to-instance: symmetric InfoNCE between the same user's pooled
// source and target representations, dot-product similarity, summed over the
// batch.
//
// Instance-to-cluster: trainable prototype matrices are soft-assigned to the
// batch to form batch-conditioned "new" clusters U; each instance's top-k new
// clusters are fused into a multi-view cluster q; an instance is contrasted
// against the other domain's q (positive) and all of the other domain's new
// clusters (negatives). The loss is summed over every interest space.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sitn/autograd.hpp"
#include "sitn/encoder.hpp"
#include "sitn/error.hpp"

namespace sitn::ssl {

using ag::Var;

enum class Activation { tanh, linear };

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "linear"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + s + "'");
}

// Two-layer perceptron fusing k concatenated clusters (k*D) into one D vector.
struct FusionMlp {
  Var w1, b1, w2, b2;
  Activation activation = Activation::tanh;

  Eigen::Index input_width() const { return w1->rows(); }

  Var forward(const Var& x) const {
    if (x->cols() != w1->rows()) throw ConfigError("fusion MLP: input width mismatch");
    Var h = ag::add_row(ag::matmul(x, w1), b1);
    if (activation == Activation::tanh) h = ag::tanh(h);
    return ag::add_row(ag::matmul(h, w2), b2);
  }

  std::vector<std::pair<std::string, Var>> named_parameters(const std::string& prefix) const {
    return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
  }
};

inline FusionMlp init_fusion(int k_top, int dim, std::mt19937_64& rng, Activation act = Activation::tanh) {
  FusionMlp f;
  f.activation = act;
  f.w1 = ag::parameter(enc::gaussian(k_top * dim, dim, 1.0 / std::sqrt(static_cast<double>(k_top * dim)), rng));
  f.b1 = ag::parameter(Matrix::Zero(1, dim));
  f.w2 = ag::parameter(enc::gaussian(dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng));
  f.b2 = ag::parameter(Matrix::Zero(1, dim));
  return f;
}

// Identity map on the first D inputs (linear activation).
inline FusionMlp identity_fusion(int k_top, int dim) {
  FusionMlp f;
  f.activation = Activation::linear;
  Matrix w1 = Matrix::Zero(k_top * dim, dim);
  w1.topRows(dim).setIdentity();
  f.w1 = ag::parameter(std::move(w1));
  f.b1 = ag::parameter(Matrix::Zero(1, dim));
  f.w2 = ag::parameter(Matrix::Identity(dim, dim));
  f.b2 = ag::parameter(Matrix::Zero(1, dim));
  return f;
}

// One granularity: a K x D prototype matrix per domain plus per-domain fusion.
struct InterestSpace {
  Var source_clusters;
  Var target_clusters;
  int k_top = 2;
  FusionMlp source_fusion;
  FusionMlp target_fusion;

  int num_clusters() const { return static_cast<int>(source_clusters->rows()); }

  std::vector<std::pair<std::string, Var>> named_parameters(const std::string& prefix, bool with_fusion = true) const {
    std::vector<std::pair<std::string, Var>> out{{prefix + ".source_clusters", source_clusters},
                                                 {prefix + ".target_clusters", target_clusters}};
    if (with_fusion) {
      for (auto& kv : source_fusion.named_parameters(prefix + ".source_fusion")) out.push_back(std::move(kv));
      for (auto& kv : target_fusion.named_parameters(prefix + ".target_fusion")) out.push_back(std::move(kv));
    }
    return out;
  }
};

using GranularitySet = std::vector<InterestSpace>;

inline void validate(const InterestSpace& s) {
  const int k = s.num_clusters();
  if (k < 1) throw ConfigError("interest space: K must be >= 1");
  if (s.k_top < 1 || s.k_top > k) throw ConfigError("interest space: k_top must be in [1, K]");
  if (s.target_clusters->rows() != k || s.target_clusters->cols() != s.source_clusters->cols())
    throw ConfigError("interest space: source/target cluster shapes differ");
}

// Prototypes drawn from N(0, 1/sqrt(D)).
inline InterestSpace init_space(int num_clusters, int dim, int k_top, std::mt19937_64& rng,
                                Activation act = Activation::tanh) {
  if (num_clusters < 1) throw ConfigError("interest space: K must be >= 1");
  if (k_top < 1 || k_top > num_clusters) throw ConfigError("interest space: k_top must be in [1, K]");
  InterestSpace s;
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  s.source_clusters = ag::parameter(enc::gaussian(num_clusters, dim, sd, rng));
  s.target_clusters = ag::parameter(enc::gaussian(num_clusters, dim, sd, rng));
  s.k_top = k_top;
  s.source_fusion = init_fusion(k_top, dim, rng, act);
  s.target_fusion = init_fusion(k_top, dim, rng, act);
  return s;
}

struct ContrastOptions {
  double temperature = 0.1;
  bool use_mv = true;      // false: positive is the nearest new cluster, no fusion
  bool normalize = false;  // L2-normalize instances before any similarity
};

namespace detail {

inline void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be > 0");
}

inline void check_pair(const Var& ps, const Var& pt) {
  if (ps->rows() != pt->rows() || ps->cols() != pt->cols())
    throw ShapeError("source and target instance matrices must be index-aligned with equal shapes");
  if (ps->rows() < 1) throw ShapeError("empty instance batch");
  if (!ps->value.allFinite() || !pt->value.allFinite()) throw NumericError("non-finite instance representation");
}

// -sum_k [ a_k . b_k / tau - logsumexp_i(a_k . b_i / tau) ]
inline Var infonce_direction(const Var& a, const Var& b, double tau) {
  Var scores = ag::scale(ag::matmul_nt(a, b), 1.0 / tau);
  Var pos = ag::scale(ag::row_dot(a, b), 1.0 / tau);
  return ag::sum(ag::sub(ag::row_logsumexp(scores), pos));
}

}  // namespace detail

inline Var i2i_loss(const Var& ps, const Var& pt, double tau) {
  detail::check_temperature(tau);
  detail::check_pair(ps, pt);
  return ag::add(detail::infonce_direction(ps, pt, tau), detail::infonce_direction(pt, ps, tau));
}

inline double i2i_loss(const Matrix& ps, const Matrix& pt, double tau) {
  return ag::scalar(i2i_loss(ag::constant(ps), ag::constant(pt), tau));
}

struct NewClusters {
  Var clusters;     // K x D
  Var assignments;  // n x K soft assignment, rows sum to one
};

// u_k = sum_i softmax_k(c_k . p_i) p_i
inline NewClusters compute_new_clusters(const Var& prototypes, const Var& instances) {
  if (prototypes->cols() != instances->cols()) throw ShapeError("compute_new_clusters: dimension mismatch");
  if (!prototypes->value.allFinite() || !instances->value.allFinite())
    throw NumericError("compute_new_clusters: non-finite input");
  Var pi = ag::row_softmax(ag::matmul_nt(instances, prototypes));
  return {ag::matmul_tn(pi, instances), pi};
}

inline Matrix compute_new_clusters(const Matrix& prototypes, const Matrix& instances) {
  return compute_new_clusters(ag::constant(prototypes), ag::constant(instances)).clusters->value;
}

// Indices of the k largest dot products p . u_k, descending; ties go to the
// lower index.
inline std::vector<int> top_k_interests(const RowVector& p, const Matrix& clusters, int k_top) {
  const int k = static_cast<int>(clusters.rows());
  if (k_top < 1 || k_top > k) throw ConfigError("top_k_interests: k_top must be in [1, K]");
  if (p.cols() != clusters.cols()) throw ShapeError("top_k_interests: dimension mismatch");
  Eigen::VectorXd sims = clusters * p.transpose();
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return sims(a) > sims(b); });
  idx.resize(static_cast<std::size_t>(k_top));
  return idx;
}

// Multi-view cluster per instance: concatenate the instance's top-k new
// clusters in similarity order and fuse them. Selection is not
// differentiated; gradients reach the selected clusters and the fusion MLP.
// With `fusion == nullptr` the nearest new cluster is returned unchanged.
inline Var mv_cluster(const Var& instances, const Var& new_clusters, int k_top, const FusionMlp* fusion) {
  if (instances->cols() != new_clusters->cols()) throw ShapeError("mv_cluster: dimension mismatch");
  const Eigen::Index n = instances->rows();
  const int take = fusion ? k_top : 1;
  if (fusion && fusion->input_width() != static_cast<Eigen::Index>(k_top) * new_clusters->cols())
    throw ConfigError("mv_cluster: fusion input width must equal k_top * D");
  std::vector<std::vector<int>> columns(static_cast<std::size_t>(take), std::vector<int>(static_cast<std::size_t>(n)));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto top = top_k_interests(instances->value.row(i), new_clusters->value, take);
    for (int j = 0; j < take; ++j) columns[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = top[static_cast<std::size_t>(j)];
  }
  std::vector<Var> parts;
  for (auto& col : columns) parts.push_back(ag::gather_rows(new_clusters, std::move(col), false));
  if (!fusion) return parts.front();
  Var concat = parts.size() == 1 ? parts.front() : ag::concat_cols(parts);
  return fusion->forward(concat);
}

namespace detail {

// -sum_k log( exp(a_k.q_k/tau) / (exp(a_k.q_k/tau) + sum_i exp(a_k.u_i/tau)) )
inline Var i2c_direction(const Var& a, const Var& q, const Var& u, double tau) {
  Var pos = ag::scale(ag::row_dot(a, q), 1.0 / tau);
  Var neg = ag::scale(ag::matmul_nt(a, u), 1.0 / tau);
  return ag::sum(ag::sub(ag::row_logsumexp(ag::concat_cols({pos, neg})), pos));
}

}  // namespace detail

struct SpaceTerms {
  Var loss;
  Var source_new;  // U^s
  Var target_new;  // U^t
};

inline SpaceTerms i2c_space_terms(const Var& ps, const Var& pt, const InterestSpace& space,
                                  const ContrastOptions& opt) {
  detail::check_temperature(opt.temperature);
  detail::check_pair(ps, pt);
  validate(space);
  if (space.source_clusters->cols() != ps->cols()) throw ShapeError("i2c: cluster and instance widths differ");
  Var us = compute_new_clusters(space.source_clusters, ps).clusters;
  Var ut = compute_new_clusters(space.target_clusters, pt).clusters;
  Var qs = mv_cluster(ps, us, space.k_top, opt.use_mv ? &space.source_fusion : nullptr);
  Var qt = mv_cluster(pt, ut, space.k_top, opt.use_mv ? &space.target_fusion : nullptr);
  Var s2t = detail::i2c_direction(ps, qt, ut, opt.temperature);
  Var t2s = detail::i2c_direction(pt, qs, us, opt.temperature);
  return {ag::add(s2t, t2s), us, ut};
}

inline Var i2c_space_loss(const Var& ps, const Var& pt, const InterestSpace& space, const ContrastOptions& opt) {
  return i2c_space_terms(ps, pt, space, opt).loss;
}

inline Var i2c_loss(const Var& ps, const Var& pt, const GranularitySet& spaces, const ContrastOptions& opt) {
  if (spaces.empty()) throw ConfigError("i2c_loss: at least one interest space is required");
  Var total = i2c_space_loss(ps, pt, spaces.front(), opt);
  for (std::size_t i = 1; i < spaces.size(); ++i) total = ag::add(total, i2c_space_loss(ps, pt, spaces[i], opt));
  return total;
}

struct SslLoss {
  Var total;
  double i2i = 0.0;
  double i2c = 0.0;
};

// L_ssl = L_i2i + L_i2c with either term switchable for ablations.
inline SslLoss ssl_loss(const Var& ps_in, const Var& pt_in, const GranularitySet& spaces, const ContrastOptions& opt,
                        bool use_i2i = true, bool use_i2c = true) {
  if (!use_i2i && !use_i2c) throw ConfigError("ssl_loss: both contrastive terms are disabled");
  detail::check_temperature(opt.temperature);
  detail::check_pair(ps_in, pt_in);
  Var ps = opt.normalize ? ag::l2_normalize_rows(ps_in) : ps_in;
  Var pt = opt.normalize ? ag::l2_normalize_rows(pt_in) : pt_in;
  SslLoss out;
  Var i2i, i2c;
  if (use_i2i) {
    i2i = i2i_loss(ps, pt, opt.temperature);
    out.i2i = ag::scalar(i2i);
  }
  if (use_i2c) {
    i2c = i2c_loss(ps, pt, spaces, opt);
    out.i2c = ag::scalar(i2c);
  }
  out.total = (use_i2i && use_i2c) ? ag::add(i2i, i2c) : (use_i2i ? i2i : i2c);
  return out;
}

}  // namespace sitn::ssl
