#pragma once

// Two-stage training: self-supervised pretraining of both encoders and the
// interest spaces, then CTR fine-tuning with encoders initialised from the
// pretraining checkpoint.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sitn/autograd.hpp"
#include "sitn/checkpoint.hpp"
#include "sitn/data.hpp"
#include "sitn/encoder.hpp"
#include "sitn/error.hpp"
#include "sitn/optimizer.hpp"
#include "sitn/ssl_losses.hpp"

namespace sitn::train {

using ag::Var;

struct ModelConfig {
  int dim = 64;
  int heads = 2;
  int layers = 1;
  bool positional = true;
  bool residual = false;
  bool layer_norm = false;
  std::vector<int> clusters{32, 64};  // one interest space per entry
  int top_k = 2;
  int no_mg_clusters = 64;  // K of the single space used when use_mg is off
  std::string fusion_activation = "tanh";
  std::vector<int> ctr_hidden{64, 32};
};

struct TrainConfig {
  int pretrain_epochs = 10;
  int max_pretrain_steps = 0;  // 0 = no cap
  int finetune_epochs = 10;
  double lr_pretrain = 1e-3;
  double lr_finetune = 1e-3;
  int batch_size = 64;
  int finetune_batch_size = 64;
  double temperature = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool use_i2i = true;
  bool use_i2c = true;
  bool use_mv = true;
  bool use_mg = true;
  bool normalize = false;
  bool freeze_encoders = false;
  std::uint64_t seed = 7;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr_pretrain > 0.0) || !(c.lr_finetune > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (c.pretrain_epochs < 0 || c.finetune_epochs < 0 || c.max_pretrain_steps < 0)
    throw ConfigError("train: epochs and step caps must be >= 0");
  if (c.batch_size < 1 || c.finetune_batch_size < 1) throw ConfigError("train: batch sizes must be >= 1");
  if (!(c.temperature > 0.0)) throw ConfigError("train: temperature must be > 0");
}

inline void validate(const ModelConfig& c) {
  if (c.clusters.empty()) throw ConfigError("model: at least one interest space is required");
  for (int k : c.clusters)
    if (k < 1) throw ConfigError("model: cluster counts must be >= 1");
  if (c.top_k < 1) throw ConfigError("model: top_k must be >= 1");
  if (c.no_mg_clusters < 1) throw ConfigError("model: no_mg_clusters must be >= 1");
  for (int h : c.ctr_hidden)
    if (h < 1) throw ConfigError("model: CTR hidden widths must be >= 1");
  ssl::activation_from_string(c.fusion_activation);
}

// Prediction MLP over concat(u_s, u_t, v); tanh hidden layers, one logit.
struct CtrHead {
  std::vector<Var> weights;
  std::vector<Var> biases;

  Var forward(const Var& x) const {
    Var h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = ag::add_row(ag::matmul(h, weights[l]), biases[l]);
      if (l + 1 < weights.size()) h = ag::tanh(h);
    }
    return h;
  }

  NamedParams named_parameters(const std::string& prefix) const {
    NamedParams out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.emplace_back(prefix + ".w" + std::to_string(l), weights[l]);
      out.emplace_back(prefix + ".b" + std::to_string(l), biases[l]);
    }
    return out;
  }
};

inline CtrHead init_ctr_head(int input, const std::vector<int>& hidden, std::mt19937_64& rng) {
  CtrHead h;
  int in = input;
  std::vector<int> widths = hidden;
  widths.push_back(1);
  for (int out : widths) {
    h.weights.push_back(ag::parameter(enc::gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)));
    h.biases.push_back(ag::parameter(Matrix::Zero(1, out)));
    in = out;
  }
  return h;
}

// Interest-space cluster counts after applying the multi-granularity flag.
inline std::vector<int> effective_clusters(const ModelConfig& m, const TrainConfig& t) {
  return t.use_mg ? m.clusters : std::vector<int>{m.no_mg_clusters};
}

struct SitnModel {
  ModelConfig model_config;
  enc::EncoderParams source;
  enc::EncoderParams target;
  ssl::GranularitySet spaces;
  CtrHead head;

  NamedParams encoder_parameters() const {
    NamedParams out = source.named_parameters("source");
    for (auto& kv : target.named_parameters("target")) out.push_back(std::move(kv));
    return out;
  }

  NamedParams space_parameters(bool with_fusion = true) const {
    NamedParams out;
    for (std::size_t i = 0; i < spaces.size(); ++i)
      for (auto& kv : spaces[i].named_parameters("space" + std::to_string(i), with_fusion)) out.push_back(std::move(kv));
    return out;
  }

  NamedParams head_parameters() const { return head.named_parameters("head"); }

  NamedParams all_parameters() const {
    NamedParams out = encoder_parameters();
    for (auto& kv : space_parameters()) out.push_back(std::move(kv));
    for (auto& kv : head_parameters()) out.push_back(std::move(kv));
    return out;
  }
};

namespace detail {

inline std::mt19937_64 component_rng(std::uint64_t seed, std::uint64_t component) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(component)};
  return std::mt19937_64(seq);
}

inline enc::EncoderConfig encoder_config(const ModelConfig& m, const data::Vocabulary& v, int max_len) {
  enc::EncoderConfig c;
  c.num_items = v.size();
  c.num_categories = v.num_categories();
  c.dim = m.dim;
  c.heads = m.heads;
  c.layers = m.layers;
  c.max_len = max_len;
  c.positional = m.positional;
  c.residual = m.residual;
  c.layer_norm = m.layer_norm;
  return c;
}

}  // namespace detail

// Fresh seeded initialisation. Each component draws from its own stream, so
// the encoders start identically across ablation variants with one seed.
inline SitnModel build_model(const data::Dataset& ds, const ModelConfig& mc, const TrainConfig& tc) {
  validate(mc);
  validate(tc);
  SitnModel m;
  m.model_config = mc;
  auto rs = detail::component_rng(tc.seed, 1);
  auto rt = detail::component_rng(tc.seed, 2);
  auto rc = detail::component_rng(tc.seed, 3);
  auto rh = detail::component_rng(tc.seed, 4);
  m.source = enc::init_encoder(detail::encoder_config(mc, ds.source_vocab, ds.max_len), ds.source_vocab.item_category, rs);
  m.target = enc::init_encoder(detail::encoder_config(mc, ds.target_vocab, ds.max_len), ds.target_vocab.item_category, rt);
  const auto act = ssl::activation_from_string(mc.fusion_activation);
  for (int k : effective_clusters(mc, tc)) m.spaces.push_back(ssl::init_space(k, mc.dim, std::min(mc.top_k, k), rc, act));
  m.head = init_ctr_head(3 * mc.dim, mc.ctr_hidden, rh);
  return m;
}

inline Checkpoint to_checkpoint(const SitnModel& m, std::string stage, std::uint64_t step, std::string config_hash) {
  Checkpoint c = snapshot(m.all_parameters());
  c.stage = std::move(stage);
  c.step = step;
  c.config_hash = std::move(config_hash);
  return c;
}

// Copies only the two sequence encoders from a checkpoint.
inline void load_encoders(SitnModel& m, const Checkpoint& c) { assign(m.encoder_parameters(), c); }

inline void load_all(SitnModel& m, const Checkpoint& c) { assign(m.all_parameters(), c); }

// ---------------------------------------------------------------------------
// Stage 1.

struct StepLog {
  std::uint64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double i2i = 0.0;
  double i2c = 0.0;
  double wall_seconds = 0.0;
};

using StepCallback = std::function<void(const StepLog&)>;

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> history;
  bool aborted = false;
  std::string abort_reason;
  std::size_t skipped_steps = 0;
};

inline ssl::ContrastOptions contrast_options(const TrainConfig& tc) {
  ssl::ContrastOptions o;
  o.temperature = tc.temperature;
  o.use_mv = tc.use_mv;
  o.normalize = tc.normalize;
  return o;
}

// Stage-1 objective for one aligned batch.
inline ssl::SslLoss stage1_loss(const SitnModel& m, std::span<const data::ClickSequence> src,
                                std::span<const data::ClickSequence> tgt, const TrainConfig& tc) {
  auto es = enc::encode_batch(m.source, src);
  auto et = enc::encode_batch(m.target, tgt);
  return ssl::ssl_loss(es.pooled, et.pooled, m.spaces, contrast_options(tc), tc.use_i2i, tc.use_i2c);
}

inline NamedParams stage1_parameters(const SitnModel& m, const TrainConfig& tc) {
  NamedParams p = m.encoder_parameters();
  if (tc.use_i2c)
    for (auto& kv : m.space_parameters(tc.use_mv)) p.push_back(std::move(kv));
  return p;
}

inline PretrainResult pretrain(const data::Dataset& ds, SitnModel& m, const TrainConfig& tc,
                               const std::string& config_hash = {}, const StepCallback& on_step = {}) {
  validate(tc);
  if (ds.users.empty()) throw DataError("pretrain: empty dataset");
  PretrainResult r;
  const auto params = stage1_parameters(m, tc);
  Adam opt({tc.lr_pretrain, tc.beta1, tc.beta2, tc.epsilon});
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), ds.users.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t step = 0;
  const bool run = tc.use_i2i || tc.use_i2c;
  for (int epoch = 0; run && epoch < tc.pretrain_epochs; ++epoch) {
    data::BatchIterator<data::UserSequences> it(ds.users, n, tc.seed * 1000003ULL + static_cast<std::uint64_t>(epoch), true);
    while (auto batch = it.next()) {
      if (tc.max_pretrain_steps > 0 && step >= static_cast<std::uint64_t>(tc.max_pretrain_steps)) break;
      const auto src = data::source_sequences(*batch);
      const auto tgt = data::target_sequences(*batch);
      zero_grads(params);
      ssl::SslLoss loss;
      try {
        loss = stage1_loss(m, src, tgt, tc);
      } catch (const NumericError& e) {
        r.aborted = true;
        r.abort_reason = e.what();
        break;
      }
      const double value = ag::scalar(loss.total);
      if (!std::isfinite(value)) {
        r.aborted = true;
        r.abort_reason = "non-finite loss at step " + std::to_string(step);
        break;
      }
      ag::backward(loss.total);
      opt.step(params);
      StepLog log{step, epoch, value, loss.i2i, loss.i2c,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      r.history.push_back(log);
      if (on_step) on_step(log);
      ++step;
    }
    if (r.aborted) break;
  }
  r.skipped_steps = opt.skipped_steps();
  r.checkpoint = to_checkpoint(m, "pretrain", step, config_hash);
  return r;
}

// ---------------------------------------------------------------------------
// Stage 2.

// Logits (n x 1) for a batch of stage-2 examples.
inline Var ctr_logits(const SitnModel& m, std::span<const data::CdrExample* const> batch) {
  std::vector<data::ClickSequence> src, tgt;
  std::vector<int> cand;
  for (const auto* e : batch) {
    src.push_back(e->source_seq);
    tgt.push_back(e->target_seq);
    cand.push_back(e->candidate_item);
  }
  auto zs = enc::encode_batch(m.source, src);
  auto zt = enc::encode_batch(m.target, tgt);
  Var v = enc::embed_items(m.target, cand);
  Var us = enc::target_attention(v, zs);
  Var ut = enc::target_attention(v, zt);
  return m.head.forward(ag::concat_cols({us, ut, v}));
}

inline std::vector<int> labels_of(std::span<const data::CdrExample* const> batch) {
  std::vector<int> y;
  for (const auto* e : batch) y.push_back(e->label);
  return y;
}

// Summed binary cross-entropy over a batch.
inline Var stage2_loss(const SitnModel& m, std::span<const data::CdrExample* const> batch) {
  return ag::bce_with_logits_sum(ctr_logits(m, batch), labels_of(batch));
}

inline constexpr double kProbabilityEpsilon = 1e-7;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double bce_loss(int y, double y_hat, double eps = kProbabilityEpsilon) {
  if (y != 0 && y != 1) throw DataError("bce_loss: label must be 0 or 1");
  const double p = std::clamp(y_hat, eps, 1.0 - eps);
  return -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
}

inline double predict_ctr(const SitnModel& m, const data::CdrExample& e) {
  const data::CdrExample* p = &e;
  return sigmoid(ag::scalar(ctr_logits(m, std::span<const data::CdrExample* const>(&p, 1))));
}

inline std::vector<double> predict_all(const SitnModel& m, const std::vector<data::CdrExample>& examples,
                                       std::size_t batch_size = 256) {
  std::vector<double> out;
  out.reserve(examples.size());
  for (std::size_t at = 0; at < examples.size(); at += batch_size) {
    std::vector<const data::CdrExample*> b;
    for (std::size_t i = at; i < std::min(examples.size(), at + batch_size); ++i) b.push_back(&examples[i]);
    Var z = ctr_logits(m, b);
    for (Eigen::Index i = 0; i < z->rows(); ++i) out.push_back(sigmoid(z->value(i, 0)));
  }
  return out;
}

inline NamedParams stage2_parameters(const SitnModel& m, const TrainConfig& tc) {
  NamedParams p = m.head_parameters();
  if (!tc.freeze_encoders)
    for (auto& kv : m.encoder_parameters()) p.push_back(std::move(kv));
  return p;
}

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<StepLog> history;
  std::vector<double> epoch_loss;  // mean per-example loss of each epoch
  std::size_t skipped_steps = 0;
};

// Trains the CTR model in place. Interest spaces are carried along unchanged.
inline FinetuneResult finetune(const std::vector<data::CdrExample>& train, SitnModel& m, const TrainConfig& tc,
                               const std::string& config_hash = {}, const StepCallback& on_step = {}) {
  validate(tc);
  if (train.empty()) throw DataError("finetune: no training examples");
  FinetuneResult r;
  const auto params = stage2_parameters(m, tc);
  Adam opt({tc.lr_finetune, tc.beta1, tc.beta2, tc.epsilon});
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(tc.finetune_batch_size), train.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < tc.finetune_epochs; ++epoch) {
    data::BatchIterator<data::CdrExample> it(train, n, tc.seed * 7919ULL + 17ULL + static_cast<std::uint64_t>(epoch), false);
    double total = 0.0;
    while (auto batch = it.next()) {
      zero_grads(params);
      Var loss = stage2_loss(m, batch->items);
      const double value = ag::scalar(loss);
      if (!std::isfinite(value)) throw NumericError("finetune: non-finite loss at step " + std::to_string(step));
      ag::backward(loss);
      opt.step(params);
      total += value;
      StepLog log{step, epoch, value, 0.0, 0.0,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      r.history.push_back(log);
      if (on_step) on_step(log);
      ++step;
    }
    r.epoch_loss.push_back(total / static_cast<double>(train.size()));
  }
  r.skipped_steps = opt.skipped_steps();
  r.checkpoint = to_checkpoint(m, "finetune", step, config_hash);
  return r;
}

// Builds a fresh model, copies the pretrained encoders (if any) and fine-tunes.
inline FinetuneResult finetune(const std::vector<data::CdrExample>& train, const Checkpoint* pretrained,
                               const data::Dataset& vocab_source, const ModelConfig& mc, const TrainConfig& tc,
                               SitnModel* out_model = nullptr, const std::string& config_hash = {}) {
  SitnModel m = build_model(vocab_source, mc, tc);
  if (pretrained) load_encoders(m, *pretrained);
  auto r = finetune(train, m, tc, config_hash);
  if (out_model) *out_model = std::move(m);
  return r;
}

}  // namespace sitn::train
