#pragma once

// Experiment configuration: a JSON document with dot-path overrides and a
// stable hash embedded in every artifact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sitn/data.hpp"
#include "sitn/error.hpp"
#include "sitn/hash.hpp"
#include "sitn/training.hpp"

namespace sitn::config {

using nlohmann::json;

struct DatasetSpec {
  std::string kind = "synthetic";  // "synthetic" or "amazon"
  data::SyntheticConfig synthetic;
  std::string amazon_source;  // review-dump paths (amazon only)
  std::string amazon_target;
  data::IngestOptions ingest;
  int negatives = 4;
  double holdout = 0.2;
};

struct AblationSpec {
  std::vector<std::string> variants{"wo_i2c_i2i", "wo_i2c", "wo_i2i", "sitn"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct ExperimentConfig {
  DatasetSpec dataset;
  train::ModelConfig model;
  train::TrainConfig train;
  AblationSpec ablation;
  std::string output_dir;  // not part of the hash
  std::uint64_t seed = 7;
};

inline json to_json(const ExperimentConfig& c) {
  const auto& s = c.dataset.synthetic;
  const auto& m = c.model;
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"negatives", c.dataset.negatives},
        {"holdout", c.dataset.holdout},
        {"synthetic",
         {{"num_users", s.num_users},
          {"num_groups", s.num_groups},
          {"source_items_per_group", s.source_items_per_group},
          {"target_items_per_group", s.target_items_per_group},
          {"interests_per_user", s.interests_per_user},
          {"source_len_min", s.source_len_min},
          {"source_len_max", s.source_len_max},
          {"target_len_min", s.target_len_min},
          {"target_len_max", s.target_len_max},
          {"noise", s.noise},
          {"num_categories", s.num_categories}}},
        {"amazon",
         {{"source", c.dataset.amazon_source},
          {"target", c.dataset.amazon_target},
          {"min_rating", c.dataset.ingest.min_rating},
          {"min_source_len", c.dataset.ingest.min_source_len},
          {"max_len", c.dataset.ingest.max_len}}}}},
      {"model",
       {{"dim", m.dim},
        {"heads", m.heads},
        {"layers", m.layers},
        {"positional", m.positional},
        {"residual", m.residual},
        {"layer_norm", m.layer_norm},
        {"clusters", m.clusters},
        {"top_k", m.top_k},
        {"no_mg_clusters", m.no_mg_clusters},
        {"fusion_activation", m.fusion_activation},
        {"ctr_hidden", m.ctr_hidden}}},
      {"train",
       {{"pretrain_epochs", t.pretrain_epochs},
        {"max_pretrain_steps", t.max_pretrain_steps},
        {"finetune_epochs", t.finetune_epochs},
        {"lr_pretrain", t.lr_pretrain},
        {"lr_finetune", t.lr_finetune},
        {"batch_size", t.batch_size},
        {"finetune_batch_size", t.finetune_batch_size},
        {"temperature", t.temperature},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"epsilon", t.epsilon},
        {"use_i2i", t.use_i2i},
        {"use_i2c", t.use_i2c},
        {"use_mv", t.use_mv},
        {"use_mg", t.use_mg},
        {"normalize", t.normalize},
        {"freeze_encoders", t.freeze_encoders}}},
      {"ablation", {{"variants", c.ablation.variants}, {"seeds", c.ablation.seeds}}},
  };
}

namespace detail {

// Rejects keys the defaults do not know and type-mismatched values, naming
// the offending dot path.
inline void check_against(const json& given, const json& reference, const std::string& path) {
  if (reference.is_object()) {
    if (!given.is_object()) throw ConfigError("config key '" + path + "' must be an object");
    for (auto it = given.begin(); it != given.end(); ++it) {
      const std::string p = path.empty() ? it.key() : path + "." + it.key();
      if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
      check_against(it.value(), reference.at(it.key()), p);
    }
    return;
  }
  const bool ok = (reference.is_number() && given.is_number()) || (reference.is_boolean() && given.is_boolean()) ||
                  (reference.is_string() && given.is_string()) || (reference.is_array() && given.is_array());
  if (!ok) throw ConfigError("config key '" + path + "' has the wrong type");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + path + "." + key + "' has an invalid value");
  }
}

}  // namespace detail

// Missing keys keep their defaults.
inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  detail::check_against(j, to_json(c), "");
  detail::read(j, "seed", c.seed, "");
  detail::read(j, "output_dir", c.output_dir, "");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::read(d, "kind", c.dataset.kind, "dataset");
    detail::read(d, "negatives", c.dataset.negatives, "dataset");
    detail::read(d, "holdout", c.dataset.holdout, "dataset");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      auto& o = c.dataset.synthetic;
      const std::string p = "dataset.synthetic";
      detail::read(s, "num_users", o.num_users, p);
      detail::read(s, "num_groups", o.num_groups, p);
      detail::read(s, "source_items_per_group", o.source_items_per_group, p);
      detail::read(s, "target_items_per_group", o.target_items_per_group, p);
      detail::read(s, "interests_per_user", o.interests_per_user, p);
      detail::read(s, "source_len_min", o.source_len_min, p);
      detail::read(s, "source_len_max", o.source_len_max, p);
      detail::read(s, "target_len_min", o.target_len_min, p);
      detail::read(s, "target_len_max", o.target_len_max, p);
      detail::read(s, "noise", o.noise, p);
      detail::read(s, "num_categories", o.num_categories, p);
    }
    if (d.contains("amazon")) {
      const auto& a = d.at("amazon");
      const std::string p = "dataset.amazon";
      detail::read(a, "source", c.dataset.amazon_source, p);
      detail::read(a, "target", c.dataset.amazon_target, p);
      detail::read(a, "min_rating", c.dataset.ingest.min_rating, p);
      detail::read(a, "min_source_len", c.dataset.ingest.min_source_len, p);
      detail::read(a, "max_len", c.dataset.ingest.max_len, p);
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    auto& o = c.model;
    detail::read(m, "dim", o.dim, "model");
    detail::read(m, "heads", o.heads, "model");
    detail::read(m, "layers", o.layers, "model");
    detail::read(m, "positional", o.positional, "model");
    detail::read(m, "residual", o.residual, "model");
    detail::read(m, "layer_norm", o.layer_norm, "model");
    detail::read(m, "clusters", o.clusters, "model");
    detail::read(m, "top_k", o.top_k, "model");
    detail::read(m, "no_mg_clusters", o.no_mg_clusters, "model");
    detail::read(m, "fusion_activation", o.fusion_activation, "model");
    detail::read(m, "ctr_hidden", o.ctr_hidden, "model");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    auto& o = c.train;
    detail::read(t, "pretrain_epochs", o.pretrain_epochs, "train");
    detail::read(t, "max_pretrain_steps", o.max_pretrain_steps, "train");
    detail::read(t, "finetune_epochs", o.finetune_epochs, "train");
    detail::read(t, "lr_pretrain", o.lr_pretrain, "train");
    detail::read(t, "lr_finetune", o.lr_finetune, "train");
    detail::read(t, "batch_size", o.batch_size, "train");
    detail::read(t, "finetune_batch_size", o.finetune_batch_size, "train");
    detail::read(t, "temperature", o.temperature, "train");
    detail::read(t, "beta1", o.beta1, "train");
    detail::read(t, "beta2", o.beta2, "train");
    detail::read(t, "epsilon", o.epsilon, "train");
    detail::read(t, "use_i2i", o.use_i2i, "train");
    detail::read(t, "use_i2c", o.use_i2c, "train");
    detail::read(t, "use_mv", o.use_mv, "train");
    detail::read(t, "use_mg", o.use_mg, "train");
    detail::read(t, "normalize", o.normalize, "train");
    detail::read(t, "freeze_encoders", o.freeze_encoders, "train");
  }
  if (j.contains("ablation")) {
    detail::read(j.at("ablation"), "variants", c.ablation.variants, "ablation");
    detail::read(j.at("ablation"), "seeds", c.ablation.seeds, "ablation");
  }
  c.train.seed = c.seed;
  c.dataset.synthetic.seed = c.seed;
  return c;
}

inline void validate(const ExperimentConfig& c) {
  if (c.dataset.kind != "synthetic" && c.dataset.kind != "amazon")
    throw ConfigError("config key 'dataset.kind' must be 'synthetic' or 'amazon'");
  if (c.dataset.kind == "synthetic") data::validate(c.dataset.synthetic);
  if (c.dataset.kind == "amazon" && (c.dataset.amazon_source.empty() || c.dataset.amazon_target.empty()))
    throw ConfigError("config keys 'dataset.amazon.source' and 'dataset.amazon.target' are required");
  if (c.dataset.ingest.max_len < 1 || c.dataset.ingest.min_source_len < 0)
    throw ConfigError("config key 'dataset.amazon.max_len' must be positive");
  if (c.dataset.negatives < 0) throw ConfigError("config key 'dataset.negatives' must be >= 0");
  if (!(c.dataset.holdout > 0.0 && c.dataset.holdout < 1.0))
    throw ConfigError("config key 'dataset.holdout' must be in (0,1)");
  train::validate(c.model);
  train::validate(c.train);
  if (c.model.dim % c.model.heads != 0) throw ConfigError("config key 'model.dim' is not divisible by 'model.heads'");
  for (const auto& v : c.ablation.variants)
    if (v != "sitn" && v != "wo_i2c_i2i" && v != "wo_i2c" && v != "wo_i2i" && v != "wo_mg_mv" && v != "wo_mg" &&
        v != "wo_mv")
      throw ConfigError("config key 'ablation.variants' names unknown variant '" + v + "'");
  if (c.ablation.seeds.empty()) throw ConfigError("config key 'ablation.seeds' must not be empty");
}

// Sets `path` (dot separated) in `j`. The value is parsed as JSON when it
// parses, otherwise taken as a string. The key must already exist.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[part];
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = value;
}

// Defaults, then the file (if any), then overrides in order.
inline ExperimentConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json j = to_json(ExperimentConfig{});
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    json given = json::parse(in, nullptr, false);
    if (given.is_discarded()) throw ConfigError("config file " + file.string() + " is not valid JSON");
    detail::check_against(given, j, "");
    j.merge_patch(given);
  }
  for (const auto& o : overrides) apply_override(j, o);
  auto c = from_json(j);
  validate(c);
  return c;
}

// Hash over the canonical (key-sorted) serialisation, excluding output_dir.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return hash_hex(j.dump());
}

}  // namespace sitn::config
