#pragma once

// Per-domain sequence encoder: item (+ category, + optional position)
// embeddings, multi-head self-attention, masked mean pooling, and the
// stage-2 target-attention readout.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sitn/autograd.hpp"
#include "sitn/data.hpp"
#include "sitn/error.hpp"

namespace sitn::enc {

using ag::Var;

struct EncoderConfig {
  int num_items = 1;       // vocabulary size including the padding row
  int num_categories = 1;  // including the padding row
  int dim = 64;
  int heads = 2;
  int layers = 1;
  int max_len = 100;
  bool positional = true;
  bool residual = false;
  bool layer_norm = false;
};

inline void validate(const EncoderConfig& c) {
  if (c.num_items < 2) throw ConfigError("encoder: vocabulary must hold at least one item");
  if (c.num_categories < 1) throw ConfigError("encoder: num_categories must be positive");
  if (c.dim < 1 || c.heads < 1 || c.layers < 1 || c.max_len < 1)
    throw ConfigError("encoder: dim, heads, layers and max_len must be positive");
  if (c.dim % c.heads != 0)
    throw ConfigError("encoder: model width " + std::to_string(c.dim) + " is not divisible by " +
                      std::to_string(c.heads) + " heads");
}

struct AttentionLayer {
  Var wq, wk, wv, wo;
  Var ln_gain, ln_bias;  // only used with layer_norm
};

struct EncoderParams {
  EncoderConfig config;
  std::vector<int> item_category;  // vocabulary index -> category index
  Var item_emb;
  Var cat_emb;
  Var pos_emb;  // null when positions are disabled
  std::vector<AttentionLayer> layers;

  int head_dim() const { return config.dim / config.heads; }

  std::vector<std::pair<std::string, Var>> named_parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Var>> out{{prefix + ".item_emb", item_emb}, {prefix + ".cat_emb", cat_emb}};
    if (pos_emb) out.emplace_back(prefix + ".pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l);
      out.emplace_back(p + ".wq", layers[l].wq);
      out.emplace_back(p + ".wk", layers[l].wk);
      out.emplace_back(p + ".wv", layers[l].wv);
      out.emplace_back(p + ".wo", layers[l].wo);
      if (config.layer_norm) {
        out.emplace_back(p + ".ln_gain", layers[l].ln_gain);
        out.emplace_back(p + ".ln_bias", layers[l].ln_bias);
      }
    }
    return out;
  }
};

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline EncoderParams init_encoder(const EncoderConfig& cfg, std::vector<int> item_category, std::mt19937_64& rng) {
  validate(cfg);
  if (static_cast<int>(item_category.size()) != cfg.num_items)
    throw ConfigError("encoder: item_category table does not match vocabulary size");
  for (int c : item_category)
    if (c < 0 || c >= cfg.num_categories) throw ConfigError("encoder: item category out of range");
  EncoderParams p;
  p.config = cfg;
  p.item_category = std::move(item_category);
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  Matrix items = gaussian(cfg.num_items, cfg.dim, s, rng);
  items.row(0).setZero();
  p.item_emb = ag::parameter(std::move(items));
  Matrix cats = gaussian(cfg.num_categories, cfg.dim, s, rng);
  cats.row(0).setZero();
  p.cat_emb = ag::parameter(std::move(cats));
  if (cfg.positional) p.pos_emb = ag::parameter(gaussian(cfg.max_len, cfg.dim, s, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    AttentionLayer layer;
    layer.wq = ag::parameter(gaussian(cfg.dim, cfg.dim, s, rng));
    layer.wk = ag::parameter(gaussian(cfg.dim, cfg.dim, s, rng));
    layer.wv = ag::parameter(gaussian(cfg.dim, cfg.dim, s, rng));
    layer.wo = ag::parameter(gaussian(cfg.dim, cfg.dim, s, rng));
    if (cfg.layer_norm) {
      layer.ln_gain = ag::parameter(Matrix::Ones(1, cfg.dim));
      layer.ln_bias = ag::parameter(Matrix::Zero(1, cfg.dim));
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// Plain (single block) masked attention on values; rows of `queries` attend
// over the rows of `keys` whose mask entry is set.
inline Matrix scaled_dot_product_attention(const Matrix& queries, const Matrix& keys, const Matrix& values,
                                           const std::vector<char>& key_mask) {
  return ag::block_attention(ag::constant(queries), ag::constant(keys), ag::constant(values), key_mask, 1)->value;
}

// Multi-head self-attention over `blocks` padded sequences stacked row-wise.
// Query, key and value are all the input; padded rows are masked out as keys
// and zeroed in the output.
inline Var multi_head_self_attention(const Var& x, const AttentionLayer& layer, int heads,
                                     const std::vector<char>& mask, Eigen::Index blocks) {
  if (heads < 1 || x->cols() % heads != 0)
    throw ConfigError("attention: model width not divisible by head count");
  const Eigen::Index dk = x->cols() / heads;
  Var q = ag::matmul(x, layer.wq);
  Var k = ag::matmul(x, layer.wk);
  Var v = ag::matmul(x, layer.wv);
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    if (heads == 1) {
      outs.push_back(ag::block_attention(q, k, v, mask, blocks));
    } else {
      outs.push_back(ag::block_attention(ag::slice_cols(q, h * dk, dk), ag::slice_cols(k, h * dk, dk),
                                         ag::slice_cols(v, h * dk, dk), mask, blocks));
    }
  }
  Var concat = heads == 1 ? outs.front() : ag::concat_cols(outs);
  return ag::mask_rows(ag::matmul(concat, layer.wo), mask);
}

struct EncodedBatch {
  Var states;              // (n * len) x D, padded rows zero
  Var pooled;              // n x D
  std::vector<char> mask;  // n * len
  Eigen::Index len = 0;
  Eigen::Index count = 0;
};

// Embeds a flat list of (item, position) pairs; item 0 is padding and yields
// a zero row.
inline Var embed(const EncoderParams& p, const std::vector<int>& items, const std::vector<int>* positions) {
  std::vector<int> cats(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] < 0 || items[i] >= static_cast<int>(p.item_category.size()))
      throw ShapeError("encoder: item index outside the vocabulary");
    cats[i] = p.item_category[static_cast<std::size_t>(items[i])];
  }
  Var x = ag::add(ag::gather_rows(p.item_emb, items, true), ag::gather_rows(p.cat_emb, std::move(cats), true));
  if (positions && p.pos_emb) x = ag::add(x, ag::gather_rows(p.pos_emb, *positions, false));
  return x;
}

// Candidate item representation (no position).
inline Var embed_items(const EncoderParams& p, const std::vector<int>& items) { return embed(p, items, nullptr); }

inline EncodedBatch encode_batch(const EncoderParams& p, std::span<const data::ClickSequence> seqs) {
  if (seqs.empty()) throw DataError("encode_batch: empty batch");
  // Trim to the longest valid prefix in the batch; padded tail positions are
  // masked everywhere so the result does not depend on the trim.
  int len = 0;
  for (const auto& s : seqs) {
    if (s.max_len() > p.config.max_len) throw ShapeError("encode_batch: sequence longer than encoder max_len");
    int last = 0;
    for (int j = 0; j < s.max_len(); ++j)
      if (s.mask[static_cast<std::size_t>(j)]) last = j + 1;
    if (last == 0) throw DataError("encode_batch: sequence for user " + s.user_id + " has no valid items");
    len = std::max(len, last);
  }
  EncodedBatch out;
  out.len = len;
  out.count = static_cast<Eigen::Index>(seqs.size());
  std::vector<int> items, positions;
  items.reserve(seqs.size() * static_cast<std::size_t>(len));
  for (const auto& s : seqs) {
    for (int j = 0; j < len; ++j) {
      const bool valid = s.mask[static_cast<std::size_t>(j)] != 0;
      items.push_back(valid ? s.item_indices[static_cast<std::size_t>(j)] : 0);
      positions.push_back(j);
      out.mask.push_back(valid ? 1 : 0);
    }
  }
  Var x = ag::mask_rows(embed(p, items, &positions), out.mask);
  for (const auto& layer : p.layers) {
    Var h = multi_head_self_attention(x, layer, p.config.heads, out.mask, out.count);
    if (p.config.residual) h = ag::add(h, x);
    if (p.config.layer_norm) h = ag::mask_rows(ag::layer_norm(h, layer.ln_gain, layer.ln_bias), out.mask);
    x = h;
  }
  out.states = x;
  out.pooled = ag::masked_mean_pool(x, out.mask, out.count);
  return out;
}

inline Var encode_sequence(const EncoderParams& p, const data::ClickSequence& seq) {
  return encode_batch(p, std::span<const data::ClickSequence>(&seq, 1)).pooled;
}

// Attention readout of encoded histories with one query per block.
inline Var target_attention(const Var& candidates, const EncodedBatch& history) {
  if (candidates->rows() != history.count) throw ShapeError("target_attention: one candidate per history required");
  for (Eigen::Index b = 0; b < history.count; ++b) {
    bool any = false;
    for (Eigen::Index j = 0; j < history.len; ++j) any = any || history.mask[b * history.len + j];
    if (!any) throw DataError("target_attention: empty history");
  }
  return ag::block_attention(candidates, history.states, history.states, history.mask, history.count);
}

}  // namespace sitn::enc
