#pragma once

// Metrics, ablation runner, interest-correspondence diagnostics and 2-D
// projections of interest clusters.

#include <algorithm>
#include <chrono>
#include <functional>
#include <limits>
#include <optional>
#include <tuple>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "sitn/data.hpp"
#include "sitn/error.hpp"
#include "sitn/ssl_losses.hpp"
#include "sitn/training.hpp"

namespace sitn::eval {

// Mann-Whitney AUC: probability that a random positive outscores a random
// negative, ties counting one half.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("auc: scores and labels differ in length");
  std::size_t pos = 0, neg = 0;
  for (int y : labels) {
    if (y == 1) ++pos;
    else if (y == 0) ++neg;
    else throw DataError("auc: labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw DataError("auc: undefined without both positive and negative labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

inline double mean_logloss(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("mean_logloss: scores and labels differ in length");
  if (scores.empty()) throw DataError("mean_logloss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) total += train::bce_loss(labels[i], scores[i]);
  return total / static_cast<double>(scores.size());
}

struct MetricsReport {
  std::string variant;
  double auc = 0.5;
  double logloss = 0.0;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  double runtime_seconds = 0.0;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"variant", r.variant}, {"auc", r.auc}, {"logloss", r.logloss}, {"seed", r.seed},
          {"dataset_hash", r.dataset_hash}, {"runtime_seconds", r.runtime_seconds}};
}

inline MetricsReport evaluate(const train::SitnModel& m, const std::vector<data::CdrExample>& test) {
  const auto scores = train::predict_all(m, test);
  std::vector<int> labels;
  for (const auto& e : test) labels.push_back(e.label);
  MetricsReport r;
  r.auc = auc(scores, labels);
  r.logloss = mean_logloss(scores, labels);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation variants.

struct Variant {
  std::string name;
  std::string label;
  bool pretrain = true;
  bool use_i2i = true;
  bool use_i2c = true;
  bool use_mv = true;
  bool use_mg = true;
};

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{
      {"sitn", "SITN", true, true, true, true, true},
      {"wo_i2c_i2i", "w/o L_i2c & L_i2i", false, false, false, true, true},
      {"wo_i2c", "w/o L_i2c", true, true, false, true, true},
      {"wo_i2i", "w/o L_i2i", true, false, true, true, true},
      {"wo_mg_mv", "w/o MG & MV", true, true, true, false, false},
      {"wo_mg", "w/o MG", true, true, true, true, false},
      {"wo_mv", "w/o MV", true, true, true, false, true},
  };
  return v;
}

inline const Variant& variant_by_name(const std::string& name) {
  for (const auto& v : all_variants())
    if (v.name == name) return v;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

inline std::vector<std::string> loss_ablation_variants() { return {"wo_i2c_i2i", "wo_i2c", "wo_i2i", "sitn"}; }
inline std::vector<std::string> view_ablation_variants() { return {"wo_mg_mv", "wo_mg", "wo_mv", "sitn"}; }

inline train::TrainConfig apply_variant(train::TrainConfig tc, const Variant& v) {
  tc.use_i2i = v.use_i2i;
  tc.use_i2c = v.use_i2c;
  tc.use_mv = v.use_mv;
  tc.use_mg = v.use_mg;
  return tc;
}

struct AblationRun {
  MetricsReport report;
  std::optional<train::Checkpoint> pretrained;  // kept when requested
  std::optional<train::Checkpoint> finetuned;
};

struct AblationOptions {
  bool keep_checkpoints = false;
  std::function<void(const AblationRun&)> on_run;
};

// Trains and evaluates every (seed, variant) pair from a fresh seeded
// initialisation. Pretraining uses target histories with the held-out click
// removed.
inline std::vector<AblationRun> run_ablations(const data::Dataset& ds, const data::Stage2Split& split,
                                              const train::ModelConfig& mc, const train::TrainConfig& base,
                                              const std::vector<std::string>& variants,
                                              const std::vector<std::uint64_t>& seeds,
                                              const AblationOptions& opt = {}) {
  std::vector<Variant> chosen;
  for (const auto& name : variants) chosen.push_back(variant_by_name(name));
  if (split.test.empty() || split.train.empty()) throw DataError("run_ablations: empty train or test split");
  const data::Dataset pre = data::without_last_target_click(ds);
  const std::string dhash = data::dataset_hash(ds);
  std::vector<AblationRun> runs;
  for (std::uint64_t seed : seeds) {
    for (const auto& v : chosen) {
      const auto t0 = std::chrono::steady_clock::now();
      train::TrainConfig tc = apply_variant(base, v);
      tc.seed = seed;
      train::SitnModel model = train::build_model(ds, mc, tc);
      AblationRun run;
      if (v.pretrain) {
        auto pr = train::pretrain(pre, model, tc);
        if (pr.aborted) throw NumericError("pretraining aborted for " + v.name + ": " + pr.abort_reason);
        if (opt.keep_checkpoints) run.pretrained = std::move(pr.checkpoint);
      }
      auto fr = train::finetune(split.train, model, tc);
      if (opt.keep_checkpoints) run.finetuned = std::move(fr.checkpoint);
      run.report = evaluate(model, split.test);
      run.report.variant = v.name;
      run.report.seed = seed;
      run.report.dataset_hash = dhash;
      run.report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (opt.on_run) opt.on_run(run);
      runs.push_back(std::move(run));
    }
  }
  return runs;
}

struct VariantSummary {
  std::string variant;
  std::size_t runs = 0;
  double auc_mean = 0.0, auc_std = 0.0;
  double logloss_mean = 0.0, logloss_std = 0.0;
};

inline std::vector<VariantSummary> summarize(const std::vector<MetricsReport>& reports) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsReport*>> by;
  for (const auto& r : reports) {
    if (!by.count(r.variant)) order.push_back(r.variant);
    by[r.variant].push_back(&r);
  }
  auto mean_std = [](const std::vector<double>& xs) {
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    return std::pair{m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
  };
  std::vector<VariantSummary> out;
  for (const auto& name : order) {
    std::vector<double> a, l;
    for (const auto* r : by[name]) {
      a.push_back(r->auc);
      l.push_back(r->logloss);
    }
    VariantSummary s;
    s.variant = name;
    s.runs = a.size();
    std::tie(s.auc_mean, s.auc_std) = mean_std(a);
    std::tie(s.logloss_mean, s.logloss_std) = mean_std(l);
    out.push_back(s);
  }
  return out;
}

// One row per variant x seed, then per-variant mean and std.
inline void write_report_table(std::ostream& out, const std::vector<MetricsReport>& reports) {
  out << std::left << std::setw(14) << "variant" << std::setw(8) << "seed" << std::setw(10) << "auc" << std::setw(10)
      << "logloss" << "runtime_s\n";
  out << std::fixed;
  for (const auto& r : reports)
    out << std::setw(14) << r.variant << std::setw(8) << r.seed << std::setprecision(4) << std::setw(10) << r.auc
        << std::setw(10) << r.logloss << std::setprecision(1) << r.runtime_seconds << '\n';
  out << '\n' << std::setw(14) << "variant" << std::setw(6) << "runs" << "auc (mean +- std)     logloss (mean +- std)\n";
  for (const auto& s : summarize(reports))
    out << std::setw(14) << s.variant << std::setw(6) << s.runs << std::setprecision(4) << s.auc_mean << " +- "
        << s.auc_std << "     " << s.logloss_mean << " +- " << s.logloss_std << '\n';
}

// ---------------------------------------------------------------------------
// Interest correspondence.

// Labels every cluster with the planted group that receives the most soft
// assignment mass from member instances. An instance with several groups
// splits its mass evenly across them.
inline std::vector<int> label_clusters_by_mass(const Matrix& prototypes, const Matrix& instances,
                                               const std::vector<std::vector<int>>& instance_groups,
                                               int num_groups) {
  if (static_cast<std::size_t>(instances.rows()) != instance_groups.size())
    throw DataError("label_clusters_by_mass: one group list per instance is required");
  if (num_groups < 1) throw DataError("label_clusters_by_mass: missing planted pairing");
  const Matrix pi = ag::softmax_rows(instances * prototypes.transpose());
  Matrix mass = Matrix::Zero(prototypes.rows(), num_groups);
  for (Eigen::Index i = 0; i < instances.rows(); ++i) {
    const auto& gs = instance_groups[static_cast<std::size_t>(i)];
    if (gs.empty()) continue;
    for (int g : gs) {
      if (g < 0 || g >= num_groups) throw DataError("label_clusters_by_mass: group out of range");
      mass.col(g) += pi.row(i).transpose() / static_cast<double>(gs.size());
    }
  }
  std::vector<int> labels(static_cast<std::size_t>(prototypes.rows()));
  for (Eigen::Index k = 0; k < prototypes.rows(); ++k) {
    Eigen::Index best = 0;
    mass.row(k).maxCoeff(&best);
    labels[static_cast<std::size_t>(k)] = static_cast<int>(best);
  }
  return labels;
}

// Fraction of source clusters whose nearest (dot product) target cluster
// carries the same planted group label.
inline double cluster_correspondence(const Matrix& source_clusters, const Matrix& target_clusters,
                                     const std::vector<int>& source_labels, const std::vector<int>& target_labels) {
  if (source_labels.empty() || target_labels.empty()) throw DataError("cluster_correspondence: missing planted pairing");
  if (source_clusters.rows() != target_clusters.rows() || source_clusters.cols() != target_clusters.cols())
    throw ShapeError("cluster_correspondence: source and target cluster matrices must match in shape");
  if (static_cast<Eigen::Index>(source_labels.size()) != source_clusters.rows() ||
      static_cast<Eigen::Index>(target_labels.size()) != target_clusters.rows())
    throw DataError("cluster_correspondence: one label per cluster is required");
  const Matrix sims = source_clusters * target_clusters.transpose();
  int hits = 0;
  for (Eigen::Index k = 0; k < sims.rows(); ++k) {
    Eigen::Index j = 0;
    sims.row(k).maxCoeff(&j);
    hits += target_labels[static_cast<std::size_t>(j)] == source_labels[static_cast<std::size_t>(k)];
  }
  return static_cast<double>(hits) / static_cast<double>(sims.rows());
}

struct CorrespondenceResult {
  double on_new_clusters = 0.0;  // U^s vs U^t over the whole dataset
  double on_prototypes = 0.0;    // C^s vs C^t
  std::vector<int> source_labels;
  std::vector<int> target_labels;
  Matrix source_new, target_new;
};

// Pooled representations of every user, encoded in batches.
inline std::pair<Matrix, Matrix> encode_users(const train::SitnModel& m, const data::Dataset& ds,
                                              std::size_t batch = 256) {
  Matrix ps(static_cast<Eigen::Index>(ds.users.size()), m.model_config.dim);
  Matrix pt(ps.rows(), ps.cols());
  for (std::size_t at = 0; at < ds.users.size(); at += batch) {
    std::vector<data::ClickSequence> s, t;
    for (std::size_t i = at; i < std::min(ds.users.size(), at + batch); ++i) {
      s.push_back(ds.users[i].source);
      t.push_back(ds.users[i].target);
    }
    ps.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(s.size())) =
        enc::encode_batch(m.source, s).pooled->value;
    pt.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(t.size())) =
        enc::encode_batch(m.target, t).pooled->value;
  }
  return {ps, pt};
}

// Correspondence of one trained interest space against the planted groups.
// `ds.users` must line up with `planted.user_groups`.
inline CorrespondenceResult interest_correspondence(const train::SitnModel& m, const data::Dataset& ds,
                                                    const std::vector<std::vector<int>>& user_groups, int num_groups,
                                                    std::size_t space_index = 0) {
  if (space_index >= m.spaces.size()) throw ConfigError("interest_correspondence: no such interest space");
  if (user_groups.size() != ds.users.size()) throw DataError("interest_correspondence: missing planted pairing");
  const auto& space = m.spaces[space_index];
  auto [ps, pt] = encode_users(m, ds);
  CorrespondenceResult r;
  r.source_labels = label_clusters_by_mass(space.source_clusters->value, ps, user_groups, num_groups);
  r.target_labels = label_clusters_by_mass(space.target_clusters->value, pt, user_groups, num_groups);
  r.source_new = ssl::compute_new_clusters(space.source_clusters->value, ps);
  r.target_new = ssl::compute_new_clusters(space.target_clusters->value, pt);
  r.on_new_clusters = cluster_correspondence(r.source_new, r.target_new, r.source_labels, r.target_labels);
  r.on_prototypes = cluster_correspondence(space.source_clusters->value, space.target_clusters->value,
                                           r.source_labels, r.target_labels);
  return r;
}

// ---------------------------------------------------------------------------
// Projection.

enum class Projector { pca, tsne };

inline Projector projector_from_string(const std::string& s) {
  if (s == "pca") return Projector::pca;
  if (s == "tsne") return Projector::tsne;
  throw ConfigError("unknown projector '" + s + "' (expected pca or tsne)");
}

struct ProjectionRow {
  int space = 0;
  std::string domain;
  int cluster = 0;
  double x = 0.0, y = 0.0;
};

struct ProjectionExport {
  std::string projector;
  std::vector<ProjectionRow> rows;
  std::vector<std::string> warnings;
};

// Projection onto the two leading principal axes. Each axis is signed so its
// largest-magnitude loading is positive.
inline Matrix pca_2d(const Matrix& points) {
  if (points.rows() < 1) throw DataError("pca: no points");
  Matrix centered = points.rowwise() - points.colwise().mean();
  Matrix cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(points.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  const Eigen::Index d = cov.rows();
  Matrix axes = Matrix::Zero(d, 2);
  for (Eigen::Index a = 0; a < std::min<Eigen::Index>(2, d); ++a) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - a);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(a) = v;
  }
  return centered * axes;
}

// Exact t-SNE (small point sets), deterministic for a seed.
inline Matrix tsne_2d(const Matrix& points, std::uint64_t seed, double perplexity = 30.0, int iterations = 750) {
  const Eigen::Index n = points.rows();
  if (n < 3) throw DataError("tsne: needs at least 3 points");
  perplexity = std::min(perplexity, static_cast<double>(n - 1) / 3.0);
  Matrix d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (points.row(i) - points.row(j)).squaredNorm();
  Matrix p = Matrix::Zero(n, n);
  const double target = std::log(perplexity);
  for (Eigen::Index i = 0; i < n; ++i) {
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    for (int it = 0; it < 100; ++it) {
      double sum = 0.0, h = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        p(i, j) = std::exp(-d2(i, j) * beta);
        sum += p(i, j);
      }
      sum = std::max(sum, 1e-300);
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        p(i, j) /= sum;
        if (p(i, j) > 1e-300) h -= p(i, j) * std::log(p(i, j));
      }
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  Matrix pj = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  pj = pj.cwiseMax(1e-12);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1e-4);
  Matrix y(n, 2), vel = Matrix::Zero(n, 2), gains = Matrix::Ones(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = nd(rng);
  const double lr = 100.0;
  for (int it = 0; it < iterations; ++it) {
    const double exag = it < 100 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    Matrix num(n, n);
    double qsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        qsum += num(i, j);
      }
    Matrix grad = Matrix::Zero(n, 2);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num(i, j) / qsum, 1e-12);
        grad.row(i) += 4.0 * (exag * pj(i, j) - q) * num(i, j) * (y.row(i) - y.row(j));
      }
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      double& g = gains.data()[i];
      g = ((grad.data()[i] > 0) != (vel.data()[i] > 0)) ? g + 0.2 : std::max(0.01, g * 0.8);
      vel.data()[i] = momentum * vel.data()[i] - lr * g * grad.data()[i];
      y.data()[i] += vel.data()[i];
    }
    y.rowwise() -= y.colwise().mean();
  }
  return y;
}

// Joint 2-D embedding of the source and target clusters of every space
// (each space projected separately). t-SNE falls back to PCA below 3 points.
inline ProjectionExport export_projection(const ssl::GranularitySet& spaces, Projector projector,
                                          std::uint64_t seed = 0) {
  ProjectionExport out;
  out.projector = projector == Projector::pca ? "pca" : "tsne";
  for (std::size_t s = 0; s < spaces.size(); ++s) {
    const Matrix& cs = spaces[s].source_clusters->value;
    const Matrix& ct = spaces[s].target_clusters->value;
    Matrix joint(cs.rows() + ct.rows(), cs.cols());
    joint << cs, ct;
    Matrix xy;
    if (projector == Projector::tsne && joint.rows() < 3) {
      out.warnings.push_back("space " + std::to_string(s) + ": fewer than 3 clusters, falling back to PCA");
      xy = pca_2d(joint);
    } else {
      xy = projector == Projector::pca ? pca_2d(joint) : tsne_2d(joint, seed);
    }
    for (Eigen::Index r = 0; r < joint.rows(); ++r) {
      const bool src = r < cs.rows();
      out.rows.push_back({static_cast<int>(s), src ? "source" : "target",
                          static_cast<int>(src ? r : r - cs.rows()), xy(r, 0), xy(r, 1)});
    }
  }
  return out;
}

inline void write_projection_csv(std::ostream& out, const ProjectionExport& p) {
  out << "space,domain,cluster,x,y\n";
  out << std::setprecision(17);
  for (const auto& r : p.rows) out << r.space << ',' << r.domain << ',' << r.cluster << ',' << r.x << ',' << r.y << '\n';
}

}  // namespace sitn::eval
