#pragma once

// Dataset records, review-log ingestion, planted synthetic data, stage-2
// example construction and mini-batch iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sitn/error.hpp"
#include "sitn/hash.hpp"

namespace sitn::data {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

struct Interaction {
  std::string user_id;
  std::string item_id;
  Domain domain = Domain::source;
  std::int64_t timestamp = 0;
  std::optional<int> rating;
  std::string category;
};

inline bool is_valid(const Interaction& r) {
  if (r.user_id.empty() || r.item_id.empty()) return false;
  if (r.timestamp < 0) return false;
  if (r.rating && (*r.rating < 1 || *r.rating > 5)) return false;
  return true;
}

// Fixed-length, right-padded index sequence. Index 0 is padding.
struct ClickSequence {
  std::string user_id;
  Domain domain = Domain::source;
  std::vector<int> item_indices;
  std::vector<char> mask;

  static ClickSequence make(std::string user, Domain domain, const std::vector<int>& items, int max_len) {
    if (max_len <= 0) throw ConfigError("ClickSequence: max_len must be positive");
    if (static_cast<int>(items.size()) > max_len) throw DataError("ClickSequence: more items than max_len");
    ClickSequence s;
    s.user_id = std::move(user);
    s.domain = domain;
    s.item_indices.assign(static_cast<std::size_t>(max_len), 0);
    s.mask.assign(static_cast<std::size_t>(max_len), 0);
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i] <= 0) throw DataError("ClickSequence: item index must be positive");
      s.item_indices[i] = items[i];
      s.mask[i] = 1;
    }
    return s;
  }

  int max_len() const { return static_cast<int>(item_indices.size()); }
  int length() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }
  std::vector<int> valid_items() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(item_indices[i]);
    return out;
  }
};

// Throws DataError when a sequence breaks its padding/mask contract.
inline void check_sequence(const ClickSequence& s, int vocab_size, int max_len) {
  if (s.max_len() != max_len || s.mask.size() != s.item_indices.size())
    throw DataError("sequence for user " + s.user_id + " has wrong padded length");
  bool in_padding = false;
  for (std::size_t i = 0; i < s.mask.size(); ++i) {
    const int idx = s.item_indices[i];
    if (s.mask[i]) {
      if (in_padding) throw DataError("sequence for user " + s.user_id + " has a gap in its mask");
      if (idx <= 0 || idx >= vocab_size) throw DataError("sequence for user " + s.user_id + " has invalid index");
    } else {
      in_padding = true;
      if (idx != 0) throw DataError("sequence for user " + s.user_id + " has a non-zero padded index");
    }
  }
}

// Per-domain item universe. Row 0 is reserved for padding.
struct Vocabulary {
  std::vector<std::string> item_ids{""};
  std::vector<int> item_category{0};
  std::vector<std::string> category_names{""};
  std::unordered_map<std::string, int> index_of;

  int size() const { return static_cast<int>(item_ids.size()); }
  int num_categories() const { return static_cast<int>(category_names.size()); }

  int add(const std::string& item_id, int category) {
    if (index_of.count(item_id)) throw DataError("Vocabulary: duplicate item " + item_id);
    if (category < 0 || category >= num_categories()) throw DataError("Vocabulary: bad category index");
    const int idx = size();
    item_ids.push_back(item_id);
    item_category.push_back(category);
    index_of.emplace(item_id, idx);
    return idx;
  }

  int add_category(const std::string& name) {
    category_names.push_back(name);
    return num_categories() - 1;
  }
};

struct UserSequences {
  std::string user_id;
  ClickSequence source;
  ClickSequence target;
};

struct Dataset {
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::vector<UserSequences> users;
  int max_len = 100;

  const Vocabulary& vocab(Domain d) const { return d == Domain::source ? source_vocab : target_vocab; }
};

inline void check_dataset(const Dataset& ds) {
  for (const auto& u : ds.users) {
    check_sequence(u.source, ds.source_vocab.size(), ds.max_len);
    check_sequence(u.target, ds.target_vocab.size(), ds.max_len);
  }
}

// Content fingerprint over vocabularies and sequences.
inline std::string dataset_hash(const Dataset& ds) {
  std::uint64_t h = fnv1a64("sitn-dataset");
  for (const auto* v : {&ds.source_vocab, &ds.target_vocab}) {
    for (int i = 0; i < v->size(); ++i) {
      h = fnv1a64(v->item_ids[static_cast<std::size_t>(i)], h);
      h = fnv1a64(std::to_string(v->item_category[static_cast<std::size_t>(i)]), h);
    }
  }
  for (const auto& u : ds.users) {
    h = fnv1a64(u.user_id, h);
    for (int x : u.source.valid_items()) h = fnv1a64(std::to_string(x) + ",", h);
    h = fnv1a64("|", h);
    for (int x : u.target.valid_items()) h = fnv1a64(std::to_string(x) + ",", h);
  }
  return hex64(h);
}

// ---------------------------------------------------------------------------
// Review-log ingestion.

struct IngestOptions {
  int min_rating = 4;
  int min_source_len = 5;
  int max_len = 100;
};

struct IngestStats {
  std::size_t records_read = 0;
  std::size_t malformed = 0;
  std::size_t below_min_rating = 0;
  std::size_t clicks_source = 0;
  std::size_t clicks_target = 0;
  std::size_t users_source = 0;
  std::size_t users_target = 0;
  std::size_t shared_users = 0;
  std::size_t dropped_short_source = 0;
  std::size_t truncated_source = 0;
  std::size_t truncated_target = 0;
  std::size_t final_users = 0;
  std::vector<std::string> warnings;
};

struct IngestResult {
  Dataset dataset;
  IngestStats stats;
};

// Parses one JSON record. Accepts the compact keys (user, item, rating,
// timestamp, category) and the raw review-dump keys (reviewerID, asin,
// overall, unixReviewTime). Returns nullopt for malformed lines.
inline std::optional<Interaction> parse_record(const std::string& line, Domain domain) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (!j.is_object()) return std::nullopt;
  auto pick = [&](std::initializer_list<const char*> keys) -> const nlohmann::json* {
    for (const char* k : keys) {
      auto it = j.find(k);
      if (it != j.end() && !it->is_null()) return &*it;
    }
    return nullptr;
  };
  auto as_string = [](const nlohmann::json& v) -> std::optional<std::string> {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    return std::nullopt;
  };
  const auto* user = pick({"user", "reviewerID", "user_id"});
  const auto* item = pick({"item", "asin", "item_id"});
  const auto* rating = pick({"rating", "overall"});
  const auto* ts = pick({"timestamp", "unixReviewTime"});
  if (!user || !item || !rating || !ts) return std::nullopt;
  Interaction r;
  r.domain = domain;
  auto u = as_string(*user);
  auto i = as_string(*item);
  if (!u || !i) return std::nullopt;
  r.user_id = *u;
  r.item_id = *i;
  if (!rating->is_number()) return std::nullopt;
  const double rv = rating->get<double>();
  if (rv != std::floor(rv)) return std::nullopt;
  r.rating = static_cast<int>(rv);
  if (!ts->is_number_integer()) return std::nullopt;
  r.timestamp = ts->get<std::int64_t>();
  if (const auto* cat = pick({"category", "main_cat"})) {
    if (cat->is_string()) {
      r.category = cat->get<std::string>();
    } else if (cat->is_array() && !cat->empty() && cat->back().is_string()) {
      r.category = cat->back().get<std::string>();
    }
  }
  if (!is_valid(r)) return std::nullopt;
  return r;
}

namespace detail {

struct Click {
  std::int64_t timestamp;
  std::string item_id;
};

inline std::map<std::string, std::vector<Click>> read_clicks(std::istream& in, Domain domain, int min_rating,
                                                             std::map<std::string, std::string>& item_category,
                                                             IngestStats& stats, std::size_t& click_counter) {
  std::map<std::string, std::vector<Click>> by_user;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++stats.records_read;
    auto rec = parse_record(line, domain);
    if (!rec) {
      ++stats.malformed;
      if (stats.warnings.size() < 20)
        stats.warnings.push_back(std::string(to_string(domain)) + " line " + std::to_string(line_no) +
                                 ": malformed record skipped");
      continue;
    }
    if (*rec->rating < min_rating) {
      ++stats.below_min_rating;
      continue;
    }
    ++click_counter;
    by_user[rec->user_id].push_back({rec->timestamp, rec->item_id});
    auto& cat = item_category[rec->item_id];
    if (!rec->category.empty() && (cat.empty() || rec->category < cat)) cat = rec->category;
  }
  return by_user;
}

inline void sort_and_truncate(std::vector<Click>& clicks, int max_len, std::size_t& truncated_counter) {
  std::sort(clicks.begin(), clicks.end(), [](const Click& a, const Click& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.item_id < b.item_id;
  });
  if (static_cast<int>(clicks.size()) > max_len) {
    clicks.erase(clicks.begin(), clicks.end() - max_len);
    ++truncated_counter;
  }
}

inline Vocabulary build_vocab(const std::set<std::string>& items, const std::map<std::string, std::string>& item_category) {
  Vocabulary v;
  std::map<std::string, int> cat_index;
  for (const auto& item : items) {
    auto it = item_category.find(item);
    const std::string name = (it == item_category.end() || it->second.empty()) ? "unknown" : it->second;
    cat_index.emplace(name, 0);
  }
  for (auto& [name, idx] : cat_index) idx = v.add_category(name);
  for (const auto& item : items) {
    auto it = item_category.find(item);
    const std::string name = (it == item_category.end() || it->second.empty()) ? "unknown" : it->second;
    v.add(item, cat_index.at(name));
  }
  return v;
}

}  // namespace detail

// Builds the shared-user dual-domain dataset from two review logs:
// ratings >= min_rating become clicks, clicks are ordered by (timestamp,
// item id), users need at least one click in both domains and at least
// min_source_len source clicks, and each sequence keeps its max_len most
// recent clicks.
inline IngestResult ingest_amazon(std::istream& source_reviews, std::istream& target_reviews,
                                  const IngestOptions& opt = {}) {
  if (opt.min_rating < 1 || opt.min_rating > 5) throw ConfigError("ingest: min_rating must be in [1,5]");
  if (opt.min_source_len < 1) throw ConfigError("ingest: min_source_len must be positive");
  if (opt.max_len < 1) throw ConfigError("ingest: max_len must be positive");
  IngestResult result;
  auto& st = result.stats;
  std::map<std::string, std::string> src_cat, tgt_cat;
  auto src = detail::read_clicks(source_reviews, Domain::source, opt.min_rating, src_cat, st, st.clicks_source);
  auto tgt = detail::read_clicks(target_reviews, Domain::target, opt.min_rating, tgt_cat, st, st.clicks_target);
  st.users_source = src.size();
  st.users_target = tgt.size();

  std::vector<std::string> kept;
  for (auto& [user, clicks] : src) {
    auto it = tgt.find(user);
    if (it == tgt.end()) continue;
    ++st.shared_users;
    if (static_cast<int>(clicks.size()) < opt.min_source_len) {
      ++st.dropped_short_source;
      continue;
    }
    detail::sort_and_truncate(clicks, opt.max_len, st.truncated_source);
    detail::sort_and_truncate(it->second, opt.max_len, st.truncated_target);
    kept.push_back(user);
  }
  if (kept.empty()) throw DataError("ingest: no users survive filtering (empty dataset)");

  std::set<std::string> src_items, tgt_items;
  for (const auto& user : kept) {
    for (const auto& c : src.at(user)) src_items.insert(c.item_id);
    for (const auto& c : tgt.at(user)) tgt_items.insert(c.item_id);
  }
  auto& ds = result.dataset;
  ds.max_len = opt.max_len;
  ds.source_vocab = detail::build_vocab(src_items, src_cat);
  ds.target_vocab = detail::build_vocab(tgt_items, tgt_cat);
  for (const auto& user : kept) {
    std::vector<int> s, t;
    for (const auto& c : src.at(user)) s.push_back(ds.source_vocab.index_of.at(c.item_id));
    for (const auto& c : tgt.at(user)) t.push_back(ds.target_vocab.index_of.at(c.item_id));
    ds.users.push_back({user, ClickSequence::make(user, Domain::source, s, opt.max_len),
                        ClickSequence::make(user, Domain::target, t, opt.max_len)});
  }
  st.final_users = ds.users.size();
  check_dataset(ds);
  return result;
}

// ---------------------------------------------------------------------------
// Planted synthetic data.

struct SyntheticConfig {
  int num_users = 2000;
  int num_groups = 8;
  int source_items_per_group = 40;
  int target_items_per_group = 40;
  int interests_per_user = 2;
  int source_len_min = 10;
  int source_len_max = 20;
  int target_len_min = 3;
  int target_len_max = 6;
  double noise = 0.1;
  int num_categories = 4;
  std::uint64_t seed = 7;
};

inline constexpr long long kMaxVocabularyItems = 50'000'000;

inline void validate(const SyntheticConfig& c) {
  if (c.num_users < 1) throw ConfigError("synthetic: num_users must be positive");
  if (c.num_groups < 1) throw ConfigError("synthetic: num_groups must be >= 1");
  if (c.source_items_per_group < 1 || c.target_items_per_group < 1)
    throw ConfigError("synthetic: items_per_group must be positive");
  if (c.interests_per_user < 1 || c.interests_per_user > c.num_groups)
    throw ConfigError("synthetic: interests_per_user must be in [1, num_groups]");
  if (c.source_len_min < 1 || c.source_len_max < c.source_len_min)
    throw ConfigError("synthetic: bad source length range");
  if (c.target_len_min < 1 || c.target_len_max < c.target_len_min)
    throw ConfigError("synthetic: bad target length range");
  if (!(c.noise >= 0.0 && c.noise < 0.5)) throw ConfigError("synthetic: noise must be in [0, 0.5)");
  if (c.num_categories < 1) throw ConfigError("synthetic: num_categories must be positive");
  const long long src = 1LL * c.source_items_per_group * c.num_groups;
  const long long tgt = 1LL * c.target_items_per_group * c.num_groups;
  if (src > kMaxVocabularyItems || tgt > kMaxVocabularyItems)
    throw ConfigError("synthetic: items_per_group x num_groups exceeds the vocabulary bound");
}

// Ground truth for a planted dataset. Item tables are indexed by vocabulary
// index (entry 0, padding, is -1).
struct PlantedTables {
  std::vector<int> source_item_group;
  std::vector<int> target_item_group;
  std::vector<std::vector<int>> user_groups;
  int num_groups = 0;
};

struct SyntheticDataset {
  Dataset dataset;
  PlantedTables planted;
};

inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(cfg.seed);
  SyntheticDataset out;
  auto& ds = out.dataset;
  auto& pl = out.planted;
  pl.num_groups = cfg.num_groups;
  ds.max_len = std::max(cfg.source_len_max, cfg.target_len_max);

  auto build = [&](Vocabulary& v, std::vector<int>& groups, int per_group, char prefix) {
    for (int c = 0; c < cfg.num_categories; ++c) v.add_category("c" + std::to_string(c));
    groups.assign(1, -1);
    std::uniform_int_distribution<int> cat(1, cfg.num_categories);
    for (int g = 0; g < cfg.num_groups; ++g) {
      for (int i = 0; i < per_group; ++i) {
        v.add(std::string(1, prefix) + std::to_string(g * per_group + i), cat(rng));
        groups.push_back(g);
      }
    }
  };
  build(ds.source_vocab, pl.source_item_group, cfg.source_items_per_group, 's');
  build(ds.target_vocab, pl.target_item_group, cfg.target_items_per_group, 't');

  std::vector<int> all_groups(static_cast<std::size_t>(cfg.num_groups));
  std::iota(all_groups.begin(), all_groups.end(), 0);
  const int width = static_cast<int>(std::to_string(cfg.num_users).size());

  auto sample_seq = [&](const std::vector<int>& own, int per_group, int len) {
    std::vector<char> owned(static_cast<std::size_t>(cfg.num_groups), 0);
    for (int g : own) owned[static_cast<std::size_t>(g)] = 1;
    const int off_items = (cfg.num_groups - static_cast<int>(own.size())) * per_group;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<int> seq;
    for (int t = 0; t < len; ++t) {
      int group;
      if (coin(rng) < cfg.noise && off_items > 0) {
        std::uniform_int_distribution<int> pick(0, cfg.num_groups - static_cast<int>(own.size()) - 1);
        int k = pick(rng);
        group = 0;
        for (int g = 0; g < cfg.num_groups; ++g) {
          if (owned[static_cast<std::size_t>(g)]) continue;
          if (k-- == 0) {
            group = g;
            break;
          }
        }
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, own.size() - 1);
        group = own[pick(rng)];
      }
      std::uniform_int_distribution<int> item(0, per_group - 1);
      seq.push_back(1 + group * per_group + item(rng));
    }
    return seq;
  };

  for (int u = 0; u < cfg.num_users; ++u) {
    std::string id = std::to_string(u);
    id = "u" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    std::vector<int> groups = all_groups;
    std::shuffle(groups.begin(), groups.end(), rng);
    groups.resize(static_cast<std::size_t>(cfg.interests_per_user));
    std::sort(groups.begin(), groups.end());
    std::uniform_int_distribution<int> slen(cfg.source_len_min, cfg.source_len_max);
    std::uniform_int_distribution<int> tlen(cfg.target_len_min, cfg.target_len_max);
    const int ls = slen(rng);
    const int lt = tlen(rng);
    auto s = sample_seq(groups, cfg.source_items_per_group, ls);
    auto t = sample_seq(groups, cfg.target_items_per_group, lt);
    ds.users.push_back({id, ClickSequence::make(id, Domain::source, s, ds.max_len),
                        ClickSequence::make(id, Domain::target, t, ds.max_len)});
    pl.user_groups.push_back(std::move(groups));
  }
  check_dataset(ds);
  return out;
}

// ---------------------------------------------------------------------------
// Stage-2 examples.

struct CdrExample {
  std::string user_id;
  ClickSequence source_seq;
  ClickSequence target_seq;
  int candidate_item = 0;
  int label = 0;
  std::size_t user_index = 0;  // position of the user in the source dataset
};

struct Stage2Split {
  std::vector<CdrExample> train;
  std::vector<CdrExample> test;
  std::size_t excluded_users = 0;
};

// The last target click of each user becomes the positive candidate and the
// rest the target history (earlier repeats of the candidate are dropped from
// the history so it never leaks). Negatives are drawn uniformly, without
// replacement, from target items the user never clicked.
inline Stage2Split build_stage2_examples(const Dataset& ds, int negatives_per_positive, double holdout_fraction,
                                         std::uint64_t seed) {
  if (negatives_per_positive < 0) throw ConfigError("stage2: negatives_per_positive must be >= 0");
  if (!(holdout_fraction >= 0.0 && holdout_fraction <= 1.0))
    throw ConfigError("stage2: holdout_fraction must be in [0,1]");
  std::mt19937_64 rng(seed);
  Stage2Split split;
  std::vector<std::vector<CdrExample>> per_user;
  const int vt = ds.target_vocab.size();
  for (std::size_t ui = 0; ui < ds.users.size(); ++ui) {
    const auto& u = ds.users[ui];
    auto items = u.target.valid_items();
    if (items.empty()) throw DataError("stage2: user " + u.user_id + " has an empty target sequence");
    const int positive = items.back();
    std::vector<int> history;
    for (std::size_t i = 0; i + 1 < items.size(); ++i)
      if (items[i] != positive) history.push_back(items[i]);
    if (history.empty()) {
      ++split.excluded_users;
      continue;
    }
    std::unordered_set<int> clicked(items.begin(), items.end());
    const int available = vt - 1 - static_cast<int>(clicked.size());
    if (available < negatives_per_positive)
      throw DataError("stage2: not enough unclicked target items to sample negatives for " + u.user_id);
    auto tseq = ClickSequence::make(u.user_id, Domain::target, history, ds.max_len);
    std::vector<CdrExample> ex;
    ex.push_back({u.user_id, u.source, tseq, positive, 1, ui});
    std::uniform_int_distribution<int> pick(1, vt - 1);
    std::unordered_set<int> used;
    while (static_cast<int>(used.size()) < negatives_per_positive) {
      const int cand = pick(rng);
      if (clicked.count(cand) || !used.insert(cand).second) continue;
      ex.push_back({u.user_id, u.source, tseq, cand, 0, ui});
    }
    per_user.push_back(std::move(ex));
  }
  std::vector<std::size_t> order(per_user.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(order.size())));
  std::vector<char> is_test(per_user.size(), 0);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = 1;
  for (std::size_t i = 0; i < per_user.size(); ++i) {
    auto& dst = is_test[i] ? split.test : split.train;
    for (auto& e : per_user[i]) dst.push_back(std::move(e));
  }
  return split;
}

// Dataset whose target sequences are the stage-2 histories (positive held out),
// so self-supervised pretraining never sees a held-out click.
inline Dataset without_last_target_click(const Dataset& ds) {
  Dataset out;
  out.source_vocab = ds.source_vocab;
  out.target_vocab = ds.target_vocab;
  out.max_len = ds.max_len;
  for (const auto& u : ds.users) {
    auto items = u.target.valid_items();
    if (items.empty()) continue;
    const int positive = items.back();
    std::vector<int> history;
    for (std::size_t i = 0; i + 1 < items.size(); ++i)
      if (items[i] != positive) history.push_back(items[i]);
    if (history.empty()) continue;
    out.users.push_back({u.user_id, u.source, ClickSequence::make(u.user_id, Domain::target, history, ds.max_len)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mini-batches.

template <typename T>
struct Batch {
  std::vector<const T*> items;
  std::size_t size() const { return items.size(); }
};

inline std::vector<ClickSequence> source_sequences(const Batch<UserSequences>& b) {
  std::vector<ClickSequence> out;
  for (const auto* u : b.items) out.push_back(u->source);
  return out;
}

inline std::vector<ClickSequence> target_sequences(const Batch<UserSequences>& b) {
  std::vector<ClickSequence> out;
  for (const auto* u : b.items) out.push_back(u->target);
  return out;
}

// One seeded pass over `records` in shuffled order. Single consumer.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const std::vector<T>& records, std::size_t batch_size, std::uint64_t seed, bool drop_incomplete = true)
      : records_(&records), batch_size_(batch_size), drop_incomplete_(drop_incomplete) {
    if (batch_size == 0) throw ConfigError("batch_iterator: batch size must be >= 1");
    if (drop_incomplete && batch_size > records.size())
      throw DataError("batch_iterator: batch size exceeds dataset size with drop-incomplete set");
    order_.resize(records.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t num_batches() const {
    const std::size_t full = order_.size() / batch_size_;
    return (drop_incomplete_ || order_.size() % batch_size_ == 0) ? full : full + 1;
  }

  std::optional<Batch<T>> next() {
    const std::size_t remaining = order_.size() - pos_;
    if (remaining == 0 || (drop_incomplete_ && remaining < batch_size_)) return std::nullopt;
    Batch<T> b;
    const std::size_t take = std::min(batch_size_, remaining);
    for (std::size_t i = 0; i < take; ++i) b.items.push_back(&(*records_)[order_[pos_ + i]]);
    pos_ += take;
    return b;
  }

 private:
  const std::vector<T>* records_;
  std::size_t batch_size_;
  bool drop_incomplete_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset directory: vocabulary tables, sequences, manifest, optional
// planted tables.

namespace detail {

inline void write_vocab(const std::filesystem::path& p, const Vocabulary& v) {
  std::ofstream out(p);
  out << "index\titem_id\tcategory_index\tcategory\n";
  for (int i = 1; i < v.size(); ++i) {
    const auto cat = v.item_category[static_cast<std::size_t>(i)];
    out << i << '\t' << v.item_ids[static_cast<std::size_t>(i)] << '\t' << cat << '\t'
        << v.category_names[static_cast<std::size_t>(cat)] << '\n';
  }
}

inline Vocabulary read_vocab(const std::filesystem::path& p, const std::vector<std::string>& categories) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open " + p.string());
  Vocabulary v;
  for (std::size_t c = 1; c < categories.size(); ++c) v.add_category(categories[c]);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string idx, id, cidx, cname;
    if (!std::getline(ls, idx, '\t') || !std::getline(ls, id, '\t') || !std::getline(ls, cidx, '\t') ||
        !std::getline(ls, cname))
      throw ParseError("malformed vocabulary row in " + p.string());
    int index = 0, cat = 0;
    try {
      index = std::stoi(idx);
      cat = std::stoi(cidx);
    } catch (const std::logic_error&) {
      throw ParseError("malformed vocabulary row in " + p.string());
    }
    if (index != v.size()) throw ParseError("non-contiguous index in " + p.string());
    if (cat < 1 || cat >= v.num_categories()) throw ParseError("unknown category index in " + p.string());
    v.add(id, cat);
  }
  return v;
}

inline std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(xs[i]);
  }
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::logic_error&) {
      throw ParseError("bad integer '" + tok + "'");
    }
  }
  return out;
}

}  // namespace detail

inline nlohmann::json planted_to_json(const PlantedTables& p) {
  return {{"num_groups", p.num_groups},
          {"source_item_group", p.source_item_group},
          {"target_item_group", p.target_item_group},
          {"user_groups", p.user_groups}};
}

inline PlantedTables planted_from_json(const nlohmann::json& j) {
  PlantedTables p;
  try {
    p.num_groups = j.at("num_groups").get<int>();
    p.source_item_group = j.at("source_item_group").get<std::vector<int>>();
    p.target_item_group = j.at("target_item_group").get<std::vector<int>>();
    p.user_groups = j.at("user_groups").get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("planted tables: ") + e.what());
  }
  return p;
}

// Writes vocabularies, sequences and manifest.json. `extra` is merged into
// the manifest (config hash, ingestion counts, ...).
inline void write_dataset_dir(const std::filesystem::path& dir, const Dataset& ds,
                              const nlohmann::json& extra = nlohmann::json::object(),
                              const PlantedTables* planted = nullptr) {
  std::filesystem::create_directories(dir);
  detail::write_vocab(dir / "source_vocab.tsv", ds.source_vocab);
  detail::write_vocab(dir / "target_vocab.tsv", ds.target_vocab);
  {
    std::ofstream out(dir / "sequences.tsv");
    out << "user_id\tsource_items\ttarget_items\n";
    for (const auto& u : ds.users)
      out << u.user_id << '\t' << detail::join(u.source.valid_items()) << '\t'
          << detail::join(u.target.valid_items()) << '\n';
  }
  if (planted) std::ofstream(dir / "planted.json") << planted_to_json(*planted).dump() << '\n';
  nlohmann::json manifest = {{"format_version", 1},
                             {"num_users", ds.users.size()},
                             {"source_items", ds.source_vocab.size() - 1},
                             {"target_items", ds.target_vocab.size() - 1},
                             {"max_len", ds.max_len},
                             {"dataset_hash", dataset_hash(ds)},
                             {"source_categories", ds.source_vocab.category_names},
                             {"target_categories", ds.target_vocab.category_names},
                             {"has_planted", planted != nullptr}};
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline Dataset read_dataset_dir(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw ParseError("missing manifest.json in " + dir.string());
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("corrupt manifest.json: " + std::string(e.what()));
    }
  }
  Dataset ds;
  ds.max_len = manifest.value("max_len", 100);
  try {
    ds.source_vocab = detail::read_vocab(dir / "source_vocab.tsv",
                                         manifest.at("source_categories").get<std::vector<std::string>>());
    ds.target_vocab = detail::read_vocab(dir / "target_vocab.tsv",
                                         manifest.at("target_categories").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest.json: " + std::string(e.what()));
  }
  std::ifstream in(dir / "sequences.tsv");
  if (!in) throw ParseError("missing sequences.tsv in " + dir.string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string user, s, t;
    if (!std::getline(ls, user, '\t') || !std::getline(ls, s, '\t') || !std::getline(ls, t))
      throw ParseError("malformed sequences row");
    ds.users.push_back({user, ClickSequence::make(user, Domain::source, detail::split_ints(s), ds.max_len),
                        ClickSequence::make(user, Domain::target, detail::split_ints(t), ds.max_len)});
  }
  check_dataset(ds);
  if (manifest.contains("dataset_hash") && manifest["dataset_hash"] != dataset_hash(ds))
    throw ParseError("dataset hash mismatch in " + dir.string());
  return ds;
}

inline std::optional<PlantedTables> read_planted(const std::filesystem::path& dir) {
  std::ifstream in(dir / "planted.json");
  if (!in) return std::nullopt;
  try {
    return planted_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corrupt planted.json: ") + e.what());
  }
}

}  // namespace sitn::data
