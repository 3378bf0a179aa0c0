// sitn_cli: ingest, synthesise, train, evaluate and export SITN experiments.
//
// Every command works inside one experiment directory (--out, else the
// config's output_dir, else $SITN_OUTPUT_ROOT/<config hash>, else
// runs/<config hash>) and writes <command>.manifest.json next to its outputs.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "sitn/sitn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sitn;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::vector<std::string> variants;
  std::string projector = "pca";
  std::string data_dir;
  std::string checkpoint;
  std::string source, target;
  std::string verify_dir;
};

struct Context {
  config::ExperimentConfig cfg;
  std::string hash;
  fs::path out;
  fs::path data;
};

json versions() {
  return {{"sitn", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hash_hex(bytes);
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

Context make_context(const Options& o) {
  std::vector<std::string> ov = o.overrides;
  if (o.seed) ov.push_back("seed=" + std::to_string(*o.seed));
  if (!o.source.empty()) ov.push_back("dataset.amazon.source=\"" + o.source + "\"");
  if (!o.target.empty()) ov.push_back("dataset.amazon.target=\"" + o.target + "\"");
  Context c;
  c.cfg = config::load(o.config_file, ov);
  c.hash = config::config_hash(c.cfg);
  if (!o.out.empty()) c.out = o.out;
  else if (!c.cfg.output_dir.empty()) c.out = c.cfg.output_dir;
  else if (const char* root = std::getenv("SITN_OUTPUT_ROOT"); root && *root) c.out = fs::path(root) / c.hash;
  else c.out = fs::path("runs") / c.hash;
  c.data = o.data_dir.empty() ? c.out / "data" : fs::path(o.data_dir);
  fs::create_directories(c.out);
  auto snapshot = config::to_json(c.cfg);
  snapshot["config_hash"] = c.hash;
  snapshot.erase("output_dir");
  write_json(c.out / "config.json", snapshot);
  return c;
}

// Manifests carry no timestamps so reruns reproduce them byte for byte.
void write_manifest(const Context& c, const std::string& command, const json& inputs,
                    const std::vector<std::string>& hashed_outputs, const std::vector<std::string>& other_outputs) {
  json outputs = json::object();
  for (const auto& f : hashed_outputs) outputs[f] = file_hash(c.out / f);
  for (const auto& f : other_outputs) outputs[f] = nullptr;
  write_json(c.out / (command + ".manifest.json"), {{"command", command},
                                                    {"config_hash", c.hash},
                                                    {"seed", c.cfg.seed},
                                                    {"versions", versions()},
                                                    {"inputs", inputs},
                                                    {"outputs", outputs}});
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

data::Dataset load_data(const Context& c) {
  if (!fs::exists(c.data / "manifest.json"))
    throw ConfigError("no dataset at " + c.data.string() + " (run synth or ingest first, or pass --data)");
  return data::read_dataset_dir(c.data);
}

data::Stage2Split split_of(const Context& c, const data::Dataset& ds) {
  return data::build_stage2_examples(ds, c.cfg.dataset.negatives, c.cfg.dataset.holdout, c.cfg.seed);
}

fs::path checkpoint_path(const Options& o, const Context& c, const std::string& fallback) {
  return o.checkpoint.empty() ? c.out / fallback : fs::path(o.checkpoint);
}

train::Checkpoint read_checkpoint(const fs::path& p, const Context& c) {
  std::vector<std::string> warnings;
  auto ckpt = train::load_checkpoint(p, c.hash, &warnings);
  print_warnings(warnings);
  return ckpt;
}

json stats_json(const data::IngestStats& s) {
  return {{"records_read", s.records_read},
          {"malformed", s.malformed},
          {"below_min_rating", s.below_min_rating},
          {"clicks_source", s.clicks_source},
          {"clicks_target", s.clicks_target},
          {"users_source", s.users_source},
          {"users_target", s.users_target},
          {"shared_users", s.shared_users},
          {"dropped_short_source", s.dropped_short_source},
          {"truncated_source", s.truncated_source},
          {"truncated_target", s.truncated_target},
          {"final_users", s.final_users},
          {"warnings", s.warnings}};
}

json metrics_json(const eval::MetricsReport& r, const std::string& hash) {
  json j = eval::to_json(r);
  j["config_hash"] = hash;
  return j;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Options& o) {
  Context c = make_context(o);
  const auto& d = c.cfg.dataset;
  if (d.amazon_source.empty() || d.amazon_target.empty())
    throw ConfigError("config keys 'dataset.amazon.source' and 'dataset.amazon.target' are required for ingest");
  std::ifstream src(d.amazon_source), tgt(d.amazon_target);
  if (!src) throw ParseError("cannot open " + d.amazon_source);
  if (!tgt) throw ParseError("cannot open " + d.amazon_target);
  auto r = data::ingest_amazon(src, tgt, d.ingest);
  print_warnings(r.stats.warnings);
  data::write_dataset_dir(c.data, r.dataset, {{"config_hash", c.hash}, {"kind", "amazon"}});
  auto stats = stats_json(r.stats);
  stats["config_hash"] = c.hash;
  write_json(c.out / "ingest_stats.json", stats);
  write_manifest(c, "ingest",
                 {{"source", d.amazon_source},
                  {"target", d.amazon_target},
                  {"source_hash", file_hash(d.amazon_source)},
                  {"target_hash", file_hash(d.amazon_target)}},
                 {"ingest_stats.json"}, {});
  std::cout << "ingested " << r.stats.final_users << " users (" << r.stats.shared_users << " shared, "
            << r.stats.dropped_short_source << " dropped for short source histories) into " << c.data.string()
            << '\n';
  return 0;
}

int cmd_synth(const Options& o) {
  Context c = make_context(o);
  auto s = data::generate_synthetic(c.cfg.dataset.synthetic);
  data::write_dataset_dir(c.data, s.dataset, {{"config_hash", c.hash}, {"kind", "synthetic"}}, &s.planted);
  write_manifest(c, "synth", {{"dataset_hash", data::dataset_hash(s.dataset)}}, {}, {});
  std::cout << "wrote " << s.dataset.users.size() << " synthetic users to " << c.data.string() << " (dataset "
            << data::dataset_hash(s.dataset) << ")\n";
  return 0;
}

int cmd_pretrain(const Options& o) {
  Context c = make_context(o);
  const auto ds = load_data(c);
  auto model = train::build_model(ds, c.cfg.model, c.cfg.train);
  std::ofstream log(c.out / "pretrain_log.jsonl");
  auto r = train::pretrain(data::without_last_target_click(ds), model, c.cfg.train, c.hash,
                           [&](const train::StepLog& s) {
                             log << json{{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss}, {"i2i", s.i2i},
                                         {"i2c", s.i2c}, {"wall_seconds", s.wall_seconds}, {"config_hash", c.hash}}
                                        .dump()
                                 << '\n';
                           });
  log.close();
  train::save_checkpoint(c.out / "pretrain.ckpt", r.checkpoint);
  std::vector<std::string> hashed{"pretrain.ckpt"};
  if (auto planted = data::read_planted(c.data)) {
    json corr = json::array();
    for (std::size_t s = 0; s < model.spaces.size(); ++s) {
      const auto cr = eval::interest_correspondence(model, ds, planted->user_groups, planted->num_groups, s);
      corr.push_back({{"space", s},
                      {"clusters", model.spaces[s].num_clusters()},
                      {"on_new_clusters", cr.on_new_clusters},
                      {"on_prototypes", cr.on_prototypes}});
    }
    write_json(c.out / "correspondence.json", {{"config_hash", c.hash}, {"spaces", corr}});
    hashed.push_back("correspondence.json");
  }
  write_manifest(c, "pretrain", {{"dataset_hash", data::dataset_hash(ds)}}, hashed, {"pretrain_log.jsonl"});
  if (r.aborted) {
    std::cerr << "error: pretraining aborted: " << r.abort_reason << " (last good state saved)\n";
    return 2;
  }
  std::cout << "pretrained " << r.history.size() << " steps";
  if (!r.history.empty()) std::cout << ", final loss " << r.history.back().loss;
  std::cout << '\n';
  return 0;
}

int cmd_finetune(const Options& o) {
  Context c = make_context(o);
  const auto ds = load_data(c);
  const auto split = split_of(c, ds);
  const fs::path pre = checkpoint_path(o, c, "pretrain.ckpt");
  std::optional<train::Checkpoint> pretrained;
  if (fs::exists(pre)) pretrained = read_checkpoint(pre, c);
  else if (!o.checkpoint.empty()) throw ParseError("cannot open checkpoint " + pre.string());
  else std::cerr << "note: no pretrained checkpoint at " << pre.string() << ", fine-tuning from scratch\n";
  train::SitnModel model;
  auto r = train::finetune(split.train, pretrained ? &*pretrained : nullptr, ds, c.cfg.model, c.cfg.train, &model,
                           c.hash);
  {
    std::ofstream log(c.out / "finetune_log.jsonl");
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
      log << json{{"epoch", e}, {"loss", r.epoch_loss[e]}, {"config_hash", c.hash}}.dump() << '\n';
  }
  train::save_checkpoint(c.out / "finetune.ckpt", r.checkpoint);
  auto report = eval::evaluate(model, split.test);
  report.variant = pretrained ? "pretrained" : "scratch";
  report.seed = c.cfg.seed;
  report.dataset_hash = data::dataset_hash(ds);
  write_json(c.out / "finetune_metrics.json", metrics_json(report, c.hash));
  json inputs{{"dataset_hash", report.dataset_hash}};
  if (pretrained) inputs["pretrained_checkpoint"] = file_hash(pre);
  write_manifest(c, "finetune", inputs, {"finetune.ckpt", "finetune_log.jsonl"}, {"finetune_metrics.json"});
  std::cout << std::setprecision(4) << "test AUC " << report.auc << ", logloss " << report.logloss << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  Context c = make_context(o);
  const auto ds = load_data(c);
  const auto split = split_of(c, ds);
  const fs::path path = checkpoint_path(o, c, "finetune.ckpt");
  const auto ckpt = read_checkpoint(path, c);
  auto model = train::build_model(ds, c.cfg.model, c.cfg.train);
  train::load_all(model, ckpt);
  const auto t0 = std::chrono::steady_clock::now();
  auto report = eval::evaluate(model, split.test);
  report.variant = "checkpoint";
  report.seed = c.cfg.seed;
  report.dataset_hash = data::dataset_hash(ds);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(c.out / "metrics.json", metrics_json(report, c.hash));
  write_manifest(c, "evaluate", {{"dataset_hash", report.dataset_hash}, {"checkpoint", file_hash(path)}}, {},
                 {"metrics.json"});
  std::cout << std::setprecision(4) << "test AUC " << report.auc << ", logloss " << report.logloss << " on "
            << split.test.size() << " examples\n";
  return 0;
}

int cmd_ablate(const Options& o) {
  Context c = make_context(o);
  const auto ds = load_data(c);
  const auto split = split_of(c, ds);
  const auto variants = o.variants.empty() ? c.cfg.ablation.variants : o.variants;
  std::ofstream runs_log(c.out / "ablation_runs.jsonl");
  eval::AblationOptions opt;
  opt.on_run = [&](const eval::AblationRun& r) {
    runs_log << metrics_json(r.report, c.hash).dump() << '\n';
    runs_log.flush();
    std::cerr << r.report.variant << " seed " << r.report.seed << ": AUC " << r.report.auc << '\n';
  };
  const auto runs = eval::run_ablations(ds, split, c.cfg.model, c.cfg.train, variants, c.cfg.ablation.seeds, opt);
  std::vector<eval::MetricsReport> reports;
  for (const auto& r : runs) reports.push_back(r.report);
  {
    std::ofstream table(c.out / "ablation_report.txt");
    table << "# config_hash " << c.hash << '\n';
    eval::write_report_table(table, reports);
  }
  json summary = json::array();
  for (const auto& s : eval::summarize(reports))
    summary.push_back({{"variant", s.variant},
                       {"runs", s.runs},
                       {"auc_mean", s.auc_mean},
                       {"auc_std", s.auc_std},
                       {"logloss_mean", s.logloss_mean},
                       {"logloss_std", s.logloss_std}});
  write_json(c.out / "ablation_summary.json", {{"config_hash", c.hash}, {"variants", summary}});
  write_manifest(c, "ablate", {{"dataset_hash", data::dataset_hash(ds)}, {"variants", variants}}, {},
                 {"ablation_report.txt", "ablation_runs.jsonl", "ablation_summary.json"});
  eval::write_report_table(std::cout, reports);
  return 0;
}

int cmd_project(const Options& o) {
  Context c = make_context(o);
  const auto projector = eval::projector_from_string(o.projector);
  const auto ds = load_data(c);
  const fs::path path = checkpoint_path(o, c, "pretrain.ckpt");
  const auto ckpt = read_checkpoint(path, c);
  auto model = train::build_model(ds, c.cfg.model, c.cfg.train);
  train::assign(model.space_parameters(), ckpt);
  const auto e = eval::export_projection(model.spaces, projector, c.cfg.seed);
  print_warnings(e.warnings);
  const std::string name = "projection_" + o.projector + ".csv";
  {
    std::ofstream out(c.out / name);
    out << "# config_hash " << c.hash << " projector " << e.projector << '\n';
    eval::write_projection_csv(out, e);
  }
  write_manifest(c, "project", {{"checkpoint", file_hash(path)}, {"projector", o.projector}}, {name}, {});
  std::cout << "wrote " << e.rows.size() << " rows to " << (c.out / name).string() << '\n';
  return 0;
}

// Collects the config hash embedded in every artifact of a run directory and
// checks they agree.
int cmd_verify(const Options& o) {
  fs::path dir = o.verify_dir.empty() ? fs::path(o.out) : fs::path(o.verify_dir);
  if (dir.empty()) throw ConfigError("verify needs a run directory (--out or positional)");
  if (!fs::is_directory(dir)) throw ConfigError("no run directory " + dir.string());
  std::map<std::string, std::string> seen;  // artifact -> hash
  std::vector<std::string> problems;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    const std::string rel = fs::relative(p, dir).string();
    const std::string ext = p.extension().string();
    try {
      if (ext == ".json") {
        const auto j = read_json(p);
        if (p.filename() == "planted.json") continue;
        if (!j.is_object() || !j.contains("config_hash")) {
          problems.push_back(rel + ": no config hash");
          continue;
        }
        seen[rel] = j.at("config_hash").get<std::string>();
      } else if (ext == ".jsonl") {
        std::ifstream in(p);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto h = json::parse(line).value("config_hash", std::string());
          const std::string key = rel + ":" + std::to_string(++n);
          if (h.empty()) problems.push_back(key + ": no config hash");
          else seen[key] = h;
        }
      } else if (ext == ".ckpt") {
        seen[rel] = train::load_checkpoint(p).config_hash;
      } else if (ext == ".txt" || ext == ".csv") {
        std::ifstream in(p);
        std::string first;
        std::getline(in, first);
        std::istringstream ls(first);
        std::string hash_mark, tag, h;
        ls >> hash_mark >> tag >> h;
        if (hash_mark != "#" || tag != "config_hash") problems.push_back(rel + ": no config hash");
        else seen[rel] = h;
      }
    } catch (const std::exception& e) {
      problems.push_back(rel + ": " + e.what());
    }
  }
  std::map<std::string, std::vector<std::string>> by_hash;
  for (const auto& [artifact, h] : seen) by_hash[h].push_back(artifact);
  for (const auto& p : problems) std::cerr << "problem: " << p << '\n';
  if (by_hash.size() > 1) {
    std::cerr << "config hashes disagree:\n";
    for (const auto& [h, artifacts] : by_hash) {
      std::cerr << "  " << h << ": " << artifacts.size() << " artifact(s), e.g. " << artifacts.front() << '\n';
    }
  }
  if (!problems.empty() || by_hash.size() != 1) return 2;
  std::cout << "ok: " << seen.size() << " artifacts share config hash " << by_hash.begin()->first << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SITN cross-domain recommendation experiments"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_file, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Experiment seed (overrides the config)");
    sub->add_option("--out", o.out, "Experiment output directory");
    sub->add_option("--override", o.overrides, "Config override key.path=value (repeatable)");
    sub->add_option("--data", o.data_dir, "Dataset directory (default <out>/data)");
  };
  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Entry entries[] = {
      {"ingest", "Build a dataset from two Amazon review dumps", cmd_ingest},
      {"synth", "Generate a planted synthetic dataset", cmd_synth},
      {"pretrain", "Stage 1: contrastive pretraining", cmd_pretrain},
      {"finetune", "Stage 2: CTR fine-tuning", cmd_finetune},
      {"evaluate", "Evaluate a fine-tuned checkpoint", cmd_evaluate},
      {"ablate", "Run the ablation matrix", cmd_ablate},
      {"project", "Export 2-D projections of the interest clusters", cmd_project},
      {"verify", "Check that a run directory's artifacts share one config hash", cmd_verify},
  };
  std::map<CLI::App*, int (*)(const Options&)> handlers;
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    handlers[sub] = e.run;
    if (std::string(e.name) == "verify") {
      sub->add_option("--out", o.out, "Run directory");
      sub->add_option("dir", o.verify_dir, "Run directory");
      continue;
    }
    common(sub);
    if (std::string(e.name) == "ingest") {
      sub->add_option("--source", o.source, "Source-domain review dump (JSON lines)");
      sub->add_option("--target", o.target, "Target-domain review dump (JSON lines)");
    }
    if (std::string(e.name) == "ablate") sub->add_option("--variant", o.variants, "Variant name (repeatable)");
    if (std::string(e.name) == "project")
      sub->add_option("--projector", o.projector, "pca or tsne")->check(CLI::IsMember({"pca", "tsne"}));
    if (std::string(e.name) == "finetune" || std::string(e.name) == "evaluate" || std::string(e.name) == "project")
      sub->add_option("--checkpoint", o.checkpoint, "Checkpoint to start from or evaluate");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    for (auto* sub : app.get_subcommands()) return handlers.at(sub)(o);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
