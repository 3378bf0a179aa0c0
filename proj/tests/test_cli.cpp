#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sitn/hash.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(SITN_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "sitn_test_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path small_config(const fs::path& dir, int users = 120, int items = 6) {
  const auto p = dir / "config.in.json";
  std::ofstream(p) << R"({"dataset": {"synthetic": {"num_users": )" << users
                   << R"(, "num_groups": 3, "source_items_per_group": )" << items
                   << R"(, "target_items_per_group": 5, "source_len_min": 3, "source_len_max": 6}},
 "model": {"dim": 4, "heads": 2, "clusters": [3], "no_mg_clusters": 3, "ctr_hidden": [4]},
 "train": {"pretrain_epochs": 1, "finetune_epochs": 1, "batch_size": 32},
 "ablation": {"seeds": [1]}})";
  return p;
}

std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = sitn::hash_hex(slurp(e.path()));
  return out;
}

}  // namespace

TEST(Cli, FullPipelineVerifies) {
  const auto dir = scratch("pipeline");
  const auto cfg = small_config(dir);
  const auto out = dir / "run";
  const std::string base = "--config " + cfg.string() + " --out " + out.string();
  for (const char* cmd : {"synth", "pretrain", "finetune", "evaluate"}) {
    const auto r = run(std::string(cmd) + " " + base);
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.output;
  }
  const auto p = run("project " + base + " --projector pca");
  ASSERT_EQ(p.code, 0) << p.output;
  for (const char* f : {"config.json", "data/manifest.json", "data/planted.json", "pretrain.ckpt", "pretrain_log.jsonl",
                        "finetune.ckpt", "metrics.json", "projection_pca.csv", "pretrain.manifest.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto v = run("verify " + out.string());
  EXPECT_EQ(v.code, 0) << v.output;
  EXPECT_NE(v.output.find("ok:"), std::string::npos);
  // 3 source + 3 target clusters plus the comment and header lines
  const std::string csv = slurp(out / "projection_pca.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
}

TEST(Cli, RerunsAreByteIdentical) {
  const auto dir = scratch("rerun");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  ASSERT_EQ(run("synth " + base).code, 0);
  ASSERT_EQ(run("pretrain " + base).code, 0);
  ASSERT_EQ(run("finetune " + base).code, 0);
  const auto pm = slurp(dir / "run" / "pretrain.manifest.json");
  const auto fm = slurp(dir / "run" / "finetune.manifest.json");
  const auto ck = slurp(dir / "run" / "finetune.ckpt");
  const auto metrics = slurp(dir / "run" / "finetune_metrics.json");
  ASSERT_EQ(run("pretrain " + base).code, 0);
  ASSERT_EQ(run("finetune " + base).code, 0);
  EXPECT_EQ(slurp(dir / "run" / "pretrain.manifest.json"), pm);
  EXPECT_EQ(slurp(dir / "run" / "finetune.manifest.json"), fm);
  EXPECT_EQ(slurp(dir / "run" / "finetune.ckpt"), ck);
  EXPECT_NE(pm.find("config_hash"), std::string::npos);
  // metrics carry a runtime field; the scores themselves must agree
  auto strip_runtime = [](const std::string& s) {
    std::string out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);)
      if (line.find("runtime_seconds") == std::string::npos) out += line + "\n";
    return out;
  };
  EXPECT_EQ(strip_runtime(slurp(dir / "run" / "finetune_metrics.json")), strip_runtime(metrics));
}

TEST(Cli, CommandsDoNotMutateInputs) {
  const auto dir = scratch("inputs");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  ASSERT_EQ(run("synth " + base).code, 0);
  const auto data_before = tree_hashes(dir / "run" / "data");
  const auto cfg_before = slurp(cfg);
  ASSERT_EQ(run("pretrain " + base).code, 0);
  const auto ckpt_before = slurp(dir / "run" / "pretrain.ckpt");
  ASSERT_EQ(run("finetune " + base).code, 0);
  ASSERT_EQ(run("project " + base).code, 0);
  EXPECT_EQ(tree_hashes(dir / "run" / "data"), data_before);
  EXPECT_EQ(slurp(cfg), cfg_before);
  EXPECT_EQ(slurp(dir / "run" / "pretrain.ckpt"), ckpt_before);
}

TEST(Cli, EvaluateWithOtherVocabularyIsShapeError) {
  const auto dir = scratch("vocab");
  const auto cfg_a = small_config(dir);
  const std::string a = "--config " + cfg_a.string() + " --out " + (dir / "a").string();
  ASSERT_EQ(run("synth " + a).code, 0);
  ASSERT_EQ(run("finetune " + a).code, 0);
  const auto dir_b = scratch("vocab_b");
  const auto cfg_b = small_config(dir_b, 120, 9);  // more source items
  const std::string b = "--config " + cfg_b.string() + " --out " + (dir_b / "b").string();
  ASSERT_EQ(run("synth " + b).code, 0);
  const auto r = run("evaluate " + b + " --checkpoint " + (dir / "a" / "finetune.ckpt").string());
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("shape error"), std::string::npos) << r.output;
}

TEST(Cli, UsageErrorsExitOneAndNameTheKey) {
  const auto dir = scratch("usage");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  auto r = run("synth " + base + " --override model.width=3");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("model.width"), std::string::npos) << r.output;
  std::ofstream(dir / "typo.json") << R"({"train": {"lr": 0.1}})";
  r = run("synth --config " + (dir / "typo.json").string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("train.lr"), std::string::npos) << r.output;
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("project " + base + " --projector umap").code, 1);
  EXPECT_EQ(run("synth --config /nonexistent.json").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, UnknownVariantFailsBeforeTraining) {
  const auto dir = scratch("variant");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  ASSERT_EQ(run("synth " + base).code, 0);
  const auto r = run("ablate " + base + " --variant sitn --variant bogus");
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("bogus"), std::string::npos);
  EXPECT_TRUE(slurp(dir / "run" / "ablation_runs.jsonl").empty());
}

TEST(Cli, AblateWritesTableAndOneRunPerVariant) {
  const auto dir = scratch("ablate");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  ASSERT_EQ(run("synth " + base).code, 0);
  const auto r = run("ablate " + base + " --variant wo_mg_mv --variant wo_mg --variant wo_mv --variant sitn");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto runs = slurp(dir / "run" / "ablation_runs.jsonl");
  EXPECT_EQ(std::count(runs.begin(), runs.end(), '\n'), 4);
  const auto table = slurp(dir / "run" / "ablation_report.txt");
  for (const char* v : {"wo_mg_mv", "wo_mg", "wo_mv", "sitn"}) EXPECT_NE(table.find(v), std::string::npos);
  EXPECT_EQ(run("verify " + (dir / "run").string()).code, 0);
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto dir = scratch("env");
  const auto cfg = small_config(dir);
  const auto r = run("synth --config " + cfg.string(), "SITN_OUTPUT_ROOT=" + (dir / "root").string());
  ASSERT_EQ(r.code, 0) << r.output;
  ASSERT_TRUE(fs::is_directory(dir / "root"));
  const auto runs = std::distance(fs::directory_iterator(dir / "root"), fs::directory_iterator{});
  EXPECT_EQ(runs, 1);
  const auto run_dir = fs::directory_iterator(dir / "root")->path();
  EXPECT_EQ(run_dir.filename().string().size(), 16u);  // the config hash
  EXPECT_TRUE(fs::exists(run_dir / "data" / "planted.json"));
}

TEST(Cli, VerifyCatchesMixedConfigs) {
  const auto dir = scratch("mixed");
  const auto cfg = small_config(dir);
  const std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  ASSERT_EQ(run("synth " + base).code, 0);
  ASSERT_EQ(run("pretrain " + base).code, 0);
  // fine-tune under a different config in the same directory
  const auto r = run("finetune " + base + " --override train.lr_finetune=0.002");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("warning"), std::string::npos) << r.output;
  const auto v = run("verify " + (dir / "run").string());
  EXPECT_EQ(v.code, 2) << v.output;
  EXPECT_NE(v.output.find("disagree"), std::string::npos);
}

TEST(Cli, IngestAppliesFilters) {
  const auto dir = scratch("ingest");
  std::ofstream src(dir / "books.json"), tgt(dir / "movies.json");
  // u1: 5 good source clicks; u2: 4 good + 1 low rating; u3: no target clicks
  for (int i = 0; i < 5; ++i) {
    src << R"({"reviewerID": "u1", "asin": "b)" << i << R"(", "overall": 5.0, "unixReviewTime": )" << 100 + i << "}\n";
    src << R"({"reviewerID": "u2", "asin": "b)" << i << R"(", "overall": )" << (i == 4 ? 3.0 : 4.0)
        << R"(, "unixReviewTime": )" << 100 + i << "}\n";
    src << R"({"reviewerID": "u3", "asin": "b)" << i << R"(", "overall": 5.0, "unixReviewTime": 1})" << "\n";
  }
  src << "not json\n";
  tgt << R"({"reviewerID": "u1", "asin": "m1", "overall": 4.0, "unixReviewTime": 5})" << "\n";
  tgt << R"({"reviewerID": "u2", "asin": "m2", "overall": 5.0, "unixReviewTime": 5})" << "\n";
  src.close();
  tgt.close();
  const auto r = run("ingest --out " + (dir / "run").string() + " --source " + (dir / "books.json").string() +
                     " --target " + (dir / "movies.json").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto stats = slurp(dir / "run" / "ingest_stats.json");
  EXPECT_NE(stats.find("\"final_users\": 1"), std::string::npos) << stats;
  EXPECT_NE(stats.find("\"malformed\": 1"), std::string::npos) << stats;
  EXPECT_NE(stats.find("\"below_min_rating\": 1"), std::string::npos) << stats;
  EXPECT_NE(stats.find("\"dropped_short_source\": 1"), std::string::npos) << stats;
  const auto missing = run("ingest --out " + (dir / "run2").string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.output.find("dataset.amazon.source"), std::string::npos);
}
