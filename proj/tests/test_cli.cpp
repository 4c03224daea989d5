#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "btok/embedding_io.hpp"
#include "btok/retrieval.hpp"
#include "btok/run_config.hpp"
#include "btok/verify.hpp"
#include "cli.hpp"
#include "support.hpp"

namespace btok {
namespace {

using namespace btok::testing;
namespace fs = std::filesystem;

const char* kSmallConfig = R"(# small desk run
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.max_seq_len = 64
trainer.global_batch = 8
trainer.sub_batch = 4
trainer.total_steps = 3
trainer.warmup_steps = 1
objective.lambda.boundary_step = 2
btok.count = 2
run.checkpoint_every = 2
run.eval_tasks = payload
task.payload.corpus_size = 32
task.payload.query_count = 32
)";

struct Result {
  int code = 0;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    config = dir / "run.cfg";
    spit(config, kSmallConfig);
  }
  void TearDown() override { fs::remove_all(dir); }

  Result train(const fs::path& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--config", config.string(), "--out", out.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  }

  fs::path dir, config;
};

TEST_F(Cli, TrainWritesLogsCheckpointsAndConfigEcho) {
  const auto r = train(dir / "a");
  ASSERT_EQ(r.code, cli::ok) << r.err;
  EXPECT_EQ(lines_of(slurp(dir / "a" / "train.log")).size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "a" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "a" / "checkpoints" / "step-000002.ckpt"));
  EXPECT_EQ(slurp(dir / "a" / "config.txt"), kSmallConfig);
  for (const char* f : {"config.resolved.txt", "provenance.txt", "report.txt", "results.tsv", "index/payload.idx"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  const std::string prov = slurp(dir / "a" / "provenance.txt");
  EXPECT_NE(prov.find("seed=0\n"), std::string::npos);
  EXPECT_NE(prov.find("checkpoint_format="), std::string::npos);
  EXPECT_NE(prov.find("index_format="), std::string::npos);
  EXPECT_NE(prov.find("embedding_format="), std::string::npos);
}

TEST_F(Cli, SingleStepRunHasOneLogLine) {
  spit(config, std::string(kSmallConfig) + "trainer.total_steps = 1\ntrainer.warmup_steps = 0\nobjective.lambda.boundary_step = 1\n");
  const auto r = train(dir / "one");
  ASSERT_EQ(r.code, cli::ok) << r.err;
  EXPECT_EQ(lines_of(slurp(dir / "one" / "train.log")).size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "one" / "final.ckpt"));
  EXPECT_TRUE(fs::is_empty(dir / "one" / "checkpoints"));
}

TEST_F(Cli, RepeatedRunsAreIdentical) {
  ASSERT_EQ(train(dir / "a").code, cli::ok);
  ASSERT_EQ(train(dir / "b").code, cli::ok);
  auto strip_wall = [](const std::string& log) {
    std::string out;
    for (const auto& l : lines_of(log)) out += l.substr(0, l.find("wall_ms=")) + "\n";
    return out;
  };
  EXPECT_EQ(strip_wall(slurp(dir / "a" / "train.log")), strip_wall(slurp(dir / "b" / "train.log")));
  EXPECT_EQ(slurp(dir / "a" / "final.ckpt"), slurp(dir / "b" / "final.ckpt"));
  EXPECT_EQ(slurp(dir / "a" / "results.tsv"), slurp(dir / "b" / "results.tsv"));
  EXPECT_EQ(slurp(dir / "a" / "index" / "payload.idx"), slurp(dir / "b" / "index" / "payload.idx"));

  ASSERT_EQ(train(dir / "c", {"--seed", "7"}).code, cli::ok);
  EXPECT_NE(slurp(dir / "a" / "final.ckpt"), slurp(dir / "c" / "final.ckpt"));
  EXPECT_NE(slurp(dir / "c" / "provenance.txt").find("seed=7\n"), std::string::npos);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  ASSERT_EQ(train(dir / "full").code, cli::ok);
  ASSERT_EQ(train(dir / "resumed", {"--resume", (dir / "full" / "checkpoints" / "step-000002.ckpt").string()}).code,
            cli::ok);
  const auto full = lines_of(slurp(dir / "full" / "train.log"));
  const auto resumed = lines_of(slurp(dir / "resumed" / "train.log"));
  ASSERT_EQ(resumed.size(), 1u);
  auto no_wall = [](const std::string& l) { return l.substr(0, l.find("wall_ms=")); };
  EXPECT_EQ(no_wall(resumed[0]), no_wall(full[2]));
  EXPECT_EQ(slurp(dir / "full" / "final.ckpt"), slurp(dir / "resumed" / "final.ckpt"));
}

TEST_F(Cli, DtypeFlagSelectsF64) {
  ASSERT_EQ(train(dir / "d", {"--dtype", "f64"}).code, cli::ok);
  EXPECT_EQ(read_checkpoint_info(dir / "d" / "final.ckpt").dtype, DType::f64);
  EXPECT_EQ(run_cli({"train", "--config", config.string(), "--dtype", "f16"}).code, cli::config_error);
}

TEST_F(Cli, ConfigErrorsNameTheField) {
  spit(config, std::string(kSmallConfig) + "trainer.nonsense = 1\n");
  const auto r = train(dir / "bad");
  EXPECT_EQ(r.code, cli::config_error);
  EXPECT_NE(r.err.find("trainer.nonsense"), std::string::npos);
  spit(config, std::string(kSmallConfig) + "trainer.sub_batch = 3\n");
  const auto r2 = train(dir / "bad");
  EXPECT_EQ(r2.code, cli::config_error);
  EXPECT_NE(r2.err.find("trainer.sub_batch"), std::string::npos);
  EXPECT_EQ(run_cli({"frobnicate"}).code, cli::config_error);
  EXPECT_EQ(run_cli({"train", "--config", (dir / "missing.cfg").string()}).code, cli::failure);
}

TEST_F(Cli, CorruptCheckpointIsAFormatError) {
  ASSERT_EQ(train(dir / "a").code, cli::ok);
  std::string bytes = slurp(dir / "a" / "final.ckpt");
  bytes[0] = 'X';
  spit(dir / "bad.ckpt", bytes);
  spit(dir / "in.txt", "2 3 4\n");
  EXPECT_EQ(run_cli({"embed", "--checkpoint", (dir / "bad.ckpt").string(), "--input", (dir / "in.txt").string(),
                     "--output", (dir / "o.emb").string()})
                .code,
            cli::format_error);
  EXPECT_EQ(run_cli({"eval", "--config", config.string(), "--checkpoint", (dir / "bad.ckpt").string(), "--out",
                     (dir / "e").string()})
                .code,
            cli::format_error);
}

TEST_F(Cli, EmbedMatchesInProcessAndIsDeterministic) {
  ASSERT_EQ(train(dir / "a").code, cli::ok);
  const auto ckpt = dir / "a" / "final.ckpt";
  spit(dir / "in.txt", "5 6 7 8\n2\n\n9 10 11 12 13 14 15\n");
  auto embed = [&](const fs::path& in, const fs::path& out) {
    return run_cli({"embed", "--checkpoint", ckpt.string(), "--input", in.string(), "--output", out.string()}).code;
  };
  ASSERT_EQ(embed(dir / "in.txt", dir / "x.emb"), cli::ok);
  ASSERT_EQ(embed(dir / "in.txt", dir / "y.emb"), cli::ok);
  EXPECT_EQ(slurp(dir / "x.emb"), slurp(dir / "y.emb"));
  EXPECT_TRUE(fs::exists(dir / "x.emb.provenance.txt"));

  const auto file = load_embeddings(dir / "x.emb");
  ASSERT_EQ(file.records.size(), 4u);
  EXPECT_EQ(file.produced_by, PoolingKind::btok_mean);
  const auto loaded = load_checkpoint<float>(ckpt);
  const auto embedder = make_embedder(loaded.state, TrainerConfig{});
  const std::vector<TokenSequence> seqs{{5, 6, 7, 8}, {2}, {}, {9, 10, 11, 12, 13, 14, 15}};
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const RowVector<float> want = embedder(seqs[i]).values.cast<float>();
    EXPECT_TRUE(file.records[i] == want) << i;
  }

  spit(dir / "empty.txt", "");
  ASSERT_EQ(embed(dir / "empty.txt", dir / "e.emb"), cli::ok);
  EXPECT_EQ(slurp(dir / "e.emb").size(), 16u);
  EXPECT_TRUE(load_embeddings(dir / "e.emb").records.empty());

  spit(dir / "oov.txt", "1 2\n3 64\n");
  std::ostringstream out, err;
  EXPECT_EQ(cli::run({"embed", "--checkpoint", ckpt.string(), "--input", (dir / "oov.txt").string(), "--output",
                      (dir / "oov.emb").string()},
                     out, err),
            cli::format_error);
  EXPECT_NE(err.str().find("64"), std::string::npos);
}

TEST_F(Cli, EmbedEosCheckpointRecordsPooling) {
  spit(config, std::string(kSmallConfig) + "trainer.pooling = eos\n");
  ASSERT_EQ(train(dir / "eos").code, cli::ok);
  spit(dir / "in.txt", "5 6 7\n");
  ASSERT_EQ(run_cli({"embed", "--checkpoint", (dir / "eos" / "final.ckpt").string(), "--input",
                     (dir / "in.txt").string(), "--output", (dir / "x.emb").string()})
                .code,
            cli::ok);
  EXPECT_EQ(load_embeddings(dir / "x.emb").produced_by, PoolingKind::eos_last);
}

// Under a random ranking the number of hits over 32 queries is Binomial(32, 1/32);
// P(hits >= 8) is below 1e-4, so an untrained model should stay under 0.25.
TEST_F(Cli, UntrainedEvalIsNearChance) {
  const auto cfg = parse_run_config(kSmallConfig);
  RunConfig f = cfg;
  f.finalize();
  Trainer<float> t(f.model, f.trainer, [&](Index step) {
    return training_batch(f.task("payload"), f.vocabulary(), f.trainer.global_batch, 0, step);
  });
  t.save(dir / "init.ckpt");
  const auto r = run_cli({"eval", "--config", config.string(), "--checkpoint", (dir / "init.ckpt").string(), "--out",
                          (dir / "e").string()});
  ASSERT_EQ(r.code, cli::ok) << r.err;
  const auto rows = lines_of(slurp(dir / "e" / "results.tsv"));
  ASSERT_EQ(rows.size(), 2u);
  std::istringstream ls(rows[1]);
  std::string task, arm, k, acc;
  std::getline(ls, task, '\t');
  std::getline(ls, arm, '\t');
  std::getline(ls, k, '\t');
  std::getline(ls, acc, '\t');
  EXPECT_EQ(task, "payload");
  EXPECT_EQ(arm, "full");
  EXPECT_LT(std::stod(acc), 0.25);
  EXPECT_TRUE(fs::exists(dir / "e" / "provenance.txt"));
}

TEST_F(Cli, AblateSingleArmAndKSweep) {
  spit(config, std::string(kSmallConfig) + "ablate.arms = full\nablate.seeds = 0\n");
  const auto r = run_cli({"ablate", "--config", config.string(), "--out", (dir / "one").string()});
  ASSERT_EQ(r.code, cli::ok) << r.err;
  EXPECT_EQ(lines_of(slurp(dir / "one" / "results.tsv")).size(), 2u);
  EXPECT_EQ(slurp(dir / "one" / "arm_diffs.txt"), "full: \n");

  spit(config, std::string(kSmallConfig) + "ablate.arms =\nablate.seeds = 0\nablate.k_sweep = 1,2,4,8\n");
  const auto s = run_cli({"ablate", "--config", config.string(), "--out", (dir / "sweep").string()});
  ASSERT_EQ(s.code, cli::ok) << s.err;
  const auto rows = lines_of(slurp(dir / "sweep" / "results.tsv"));
  ASSERT_EQ(rows.size(), 5u);
  std::vector<std::string> ks;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::istringstream ls(rows[i]);
    std::string task, arm, k;
    std::getline(ls, task, '\t');
    std::getline(ls, arm, '\t');
    std::getline(ls, k, '\t');
    EXPECT_EQ(task, "payload");
    ks.push_back(k);
  }
  EXPECT_EQ(ks, (std::vector<std::string>{"1", "2", "4", "8"}));
}

TEST_F(Cli, ReportAggregatesRuns) {
  ASSERT_EQ(train(dir / "a").code, cli::ok);
  ASSERT_EQ(train(dir / "b", {"--seed", "3"}).code, cli::ok);
  const auto r = run_cli({"report", "--run", (dir / "a").string(), "--run", (dir / "b").string(), "--out",
                          (dir / "sum").string()});
  ASSERT_EQ(r.code, cli::ok) << r.err;
  const auto rows = lines_of(slurp(dir / "sum" / "summary.txt"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NE(rows[1].find("full"), std::string::npos);
  EXPECT_EQ(rows[1].substr(rows[1].size() - 1), "2");
  EXPECT_EQ(run_cli({"report", "--run", (dir / "nowhere").string()}).code, cli::failure);
}

TEST_F(Cli, OutRootEnvironmentIsHonored) {
  ::setenv(cli::kOutRootEnv, (dir / "root").c_str(), 1);
  const auto r = run_cli({"train", "--config", config.string()});
  ::unsetenv(cli::kOutRootEnv);
  ASSERT_EQ(r.code, cli::ok) << r.err;
  ASSERT_TRUE(fs::exists(dir / "root"));
  const auto entry = *fs::directory_iterator(dir / "root");
  EXPECT_EQ(entry.path().filename().string().rfind("train-", 0), 0u);
  EXPECT_TRUE(fs::exists(entry.path() / "final.ckpt"));
}

TEST_F(Cli, VerifyPassesAndPrintsOneLinePerCheck) {
  const auto r = run_cli({"verify", "--out", (dir / "v").string()});
  ASSERT_EQ(r.code, cli::ok) << r.out;
  int checks = 0;
  for (const auto& l : lines_of(r.out))
    if (l.find("delta=") != std::string::npos) {
      ++checks;
      EXPECT_NE(l.find("PASS"), std::string::npos) << l;
    }
  EXPECT_GE(checks, 9);
  EXPECT_TRUE(fs::exists(dir / "v" / "verify.txt"));
  EXPECT_TRUE(fs::exists(dir / "v" / "provenance.txt"));

  const auto eq = run_cli({"verify-equivalence"});
  EXPECT_EQ(eq.code, cli::ok);
  EXPECT_NE(eq.out.find("max|dlogit|"), std::string::npos);
}

// Negative control: a builder that leaves target->query attention open must be caught.
TEST(VerifyNegativeControl, LeakyMaskFailsShortcutProbes) {
  auto leaky = [](const SegmentLayout& l) {
    auto m = build_mask(l);
    for (Index i = l.query_len + l.btok_count; i < l.total(); ++i)
      for (Index j = 0; j < l.query_len; ++j) m.dense.set(i, j, true);
    return m;
  };
  EXPECT_FALSE(check_shortcut_freeze(0, 10, leaky).passed);
  EXPECT_FALSE(check_mask_blocks(0, leaky).passed);
  EXPECT_TRUE(check_shortcut_freeze(0, 10, build_mask).passed);
  VerifyOptions o;
  o.mask_builder = leaky;
  o.finite_differences = false;
  const auto r = run_verify(o);
  EXPECT_FALSE(r.all_passed());
  EXPECT_NE(r.to_text().find("FAIL"), std::string::npos);
}

}  // namespace
}  // namespace btok
