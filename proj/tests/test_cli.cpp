#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "srlb/commands.hpp"
#include "support.hpp"

using namespace srlb;
using testsupport::temp_dir;

namespace {

// Small enough that a full grid cell runs in milliseconds.
RunConfig tiny_run(const std::string& out) {
  ConfigSources src;
  src.use_env = false;
  src.overrides = {{"model_blocks", "2"}, {"model_hidden", "16"}, {"model_heads", "2"}, {"model_ffn", "32"},
                   {"model_max_seq", "16"}, {"calib_t", "8"},    {"calib_n", "4"},      {"test_n", "4"},
                   {"recon_epochs", "1"},   {"recon_batch_size", "2"}, {"grid_seeds", "0"},
                   {"gen_filter", "accept_all"}, {"out", out}};
  return resolve_config(src);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct CliRun {
  int code;
  std::string err;
};

CliRun run_cli(const std::string& args, const std::string& dir) {
  const std::string err_path = dir + "/stderr.txt";
  const int status = std::system((std::string(SRLB_CLI_PATH) + " " + args + " >/dev/null 2>" + err_path).c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err_path)};
}

}  // namespace

TEST(RunConfig, DefaultsMatchTheToyProtocol) {
  RunConfig c;
  EXPECT_EQ(c.model.n_blocks, 4u);
  EXPECT_EQ(c.model.hidden, 64u);
  EXPECT_EQ(c.model.n_heads, 4u);
  EXPECT_EQ(c.model.ffn_dim, 256u);
  EXPECT_EQ(c.model.vocab, 258u);
  EXPECT_EQ(c.model.max_seq, 64u);
  EXPECT_EQ(c.sparsity, 0.5);
  EXPECT_EQ(c.recon_epochs, 10u);
  EXPECT_EQ(c.recon_batch_size, 8u);
  EXPECT_FLOAT_EQ(c.recon_lr, 2e-4f);
  EXPECT_EQ(c.calib_n, 32u);
  EXPECT_EQ(c.calib_t, 64u);
  EXPECT_EQ(c.test_n, 32u);
  EXPECT_NO_THROW(validate(c));
}

TEST(RunConfig, ParsesKeyValueText) {
  RunConfig c;
  apply_config_text(c, "# comment\nsparsity = 0.25  # trailing\n\n  pruner=wanda\nmodel_blocks = 3\ngen_greedy = true\n");
  EXPECT_EQ(c.sparsity, 0.25);
  EXPECT_EQ(c.pruner, "wanda");
  EXPECT_EQ(c.model.n_blocks, 3u);
  EXPECT_TRUE(c.gen_greedy);
  EXPECT_THROW(apply_config_text(c, "no_such_key = 1"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "sparsity 0.5"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "recon_epochs = ten"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "gen_greedy = maybe"), ConfigError);
}

TEST(RunConfig, SerializeRoundTrips) {
  RunConfig a;
  set_key(a, "recon_lr", "0.000123");
  set_key(a, "grid_methods", "LR,BR");
  RunConfig b;
  apply_config_text(b, serialize(a));
  EXPECT_EQ(serialize(b), serialize(a));
  EXPECT_EQ(config_hash(b), config_hash(a));
  RunConfig c;
  apply_config_text(c, resolved_config_text(a));
  EXPECT_EQ(config_hash(c), config_hash(a));
}

TEST(RunConfig, EnvironmentThenOverrides) {
  ::setenv("SRLB_RECON_EPOCHS", "3", 1);
  ::setenv("SRLB_PRUNER", "wanda", 1);
  ConfigSources src;
  src.overrides = {{"pruner", "magnitude"}};
  RunConfig c = resolve_config(src);
  EXPECT_EQ(c.recon_epochs, 3u);
  EXPECT_EQ(c.pruner, "magnitude");
  src.use_env = false;
  EXPECT_EQ(resolve_config(src).recon_epochs, 10u);
  ::unsetenv("SRLB_RECON_EPOCHS");
  ::unsetenv("SRLB_PRUNER");
}

TEST(RunConfig, FileSource) {
  const std::string dir = temp_dir("cfgfile");
  std::ofstream(dir + "/run.cfg") << "seed = 7\nmethod = LR\n";
  ConfigSources src;
  src.use_env = false;
  src.file = dir + "/run.cfg";
  src.overrides = {{"seed", "8"}};
  RunConfig c = resolve_config(src);
  EXPECT_EQ(c.seed, 8u);
  EXPECT_EQ(c.method, "LR");
  src.file = dir + "/missing.cfg";
  EXPECT_THROW(resolve_config(src), IoError);
}

TEST(RunConfig, Validation) {
  auto bad = [](const std::string& k, const std::string& v) {
    RunConfig c;
    set_key(c, k, v);
    EXPECT_THROW(validate(c), ConfigError) << k << "=" << v;
  };
  bad("sparsity", "1");
  bad("pruner", "random");
  bad("method", "GP");
  bad("calib_source", "web");
  bad("model_heads", "5");
  bad("calib_t", "65");
  bad("grid_methods", "LR,XX");
  bad("gen_filter", "english");
  bad("recon_epochs", "0");
}

TEST(RunConfig, HashIgnoresOutputDirOnly) {
  RunConfig a, b;
  b.out = "/elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(RunConfig, TypedViews) {
  RunConfig c;
  set_key(c, "granularity", "per_matrix");
  set_key(c, "sparsity", "0.3");
  auto p = pruner_spec(c, "wanda");
  EXPECT_EQ(p.method, PruneMethod::wanda);
  EXPECT_EQ(p.resolved_granularity(), Granularity::per_matrix);
  EXPECT_EQ(p.sparsity, 0.3);
  auto r = recon_config(c, 42);
  EXPECT_EQ(r.seed, 42u);
  EXPECT_EQ(r.epochs, 10u);
  auto g = generation_params(c, 5);
  EXPECT_EQ(g.count, 5u);
  EXPECT_EQ(g.window, c.calib_t);
  EXPECT_EQ(split_list(" a, b ,,c "), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Commands, EndToEndArtifactsCarryTheConfigHash) {
  const std::string dir = temp_dir("cmds");
  RunConfig rc = tiny_run(dir);
  set_key(rc, "method", "BR");
  const std::string hash = config_hash(rc);

  cmd_init_model(rc, dir + "/dense.srlb");
  EXPECT_EQ(load_container(dir + "/dense.srlb").meta.at("config_hash"), hash);
  EXPECT_NE(slurp(dir + "/dense.srlb.config.txt").find("config_hash = " + hash), std::string::npos);

  auto calib = cmd_gen_calib(rc, dir + "/dense.srlb", 4, dir + "/calib.srtk");
  EXPECT_EQ(calib.tokens.rows, 4u);
  EXPECT_EQ(calib.tokens.cols, 8u);
  EXPECT_EQ(load_tokens(dir + "/calib.srtk"), calib.tokens);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir + "/calib.srtk.meta.json")).at("config_hash"), hash);
  auto test = cmd_gen_calib(rc, dir + "/dense.srlb", 3, dir + "/test.srtk", true);
  EXPECT_EQ(test.tokens.rows, 3u);
  EXPECT_NE(test.tokens, calib.tokens);

  auto mask = cmd_prune(rc, dir + "/dense.srlb", dir + "/calib.srtk", dir + "/prune");
  EXPECT_EQ(load_mask(dir + "/prune/mask.srlb"), mask);
  EXPECT_EQ(load_container(dir + "/prune/mask.srlb").meta.at("config_hash"), hash);
  EXPECT_EQ(load_container(dir + "/prune/masked.srlb").meta.at("config_hash"), hash);

  auto r1 = cmd_reconstruct(rc, dir + "/dense.srlb", dir + "/prune/mask.srlb", dir + "/calib.srtk", dir + "/test.srtk",
                            dir + "/r1");
  auto r2 = cmd_reconstruct(rc, dir + "/dense.srlb", dir + "/prune/mask.srlb", dir + "/calib.srtk", dir + "/test.srtk",
                            dir + "/r2");
  EXPECT_EQ(slurp(dir + "/r1/sparse.srlb"), slurp(dir + "/r2/sparse.srlb"));
  EXPECT_EQ(slurp(dir + "/r1/trace.json"), slurp(dir + "/r2/trace.json"));
  const auto tj = nlohmann::json::parse(slurp(dir + "/r1/trace.json"));
  EXPECT_EQ(tj.at("config_hash"), hash);
  EXPECT_EQ(tj.at("method"), "BR");
  EXPECT_EQ(r1.trace.blocks.size(), 2u);
  EXPECT_GT(r1.trace.blocks[1].e_test, 0.0);

  auto rep = cmd_eval(rc, dir + "/r1/sparse.srlb", {{"test", dir + "/test.srtk"}, {"calib", dir + "/calib.srtk"}},
                      dir + "/eval");
  ASSERT_EQ(rep.perplexity.size(), 1u);
  EXPECT_EQ(rep.perplexity[0].values.size(), 2u);
  const EvalReport back = load_report(dir + "/eval/report.json");
  EXPECT_EQ(back.run_meta.at("config_hash"), hash);
  EXPECT_EQ(back.run_meta.at("model_config_hash"), hash);
  EXPECT_EQ(back.perplexity, rep.perplexity);
}

TEST(Commands, SelfGeneratedCalibrationFile) {
  const std::string dir = temp_dir("cmds_gen");
  RunConfig rc = tiny_run(dir);
  set_key(rc, "calib_source", "self_generated");
  cmd_init_model(rc, dir + "/dense.srlb");
  auto set = cmd_gen_calib(rc, dir + "/dense.srlb", 3, dir + "/gen.srtk");
  EXPECT_EQ(set.source, CalibSource::self_generated);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir + "/gen.srtk.meta.json")).at("source"), "self_generated");
  EXPECT_THROW(cmd_gen_calib(rc, dir + "/dense.srlb", 3, dir + "/x.srtk", true), ConfigError);
}

TEST(Commands, MissingInputsSurfaceIoErrors) {
  const std::string dir = temp_dir("cmds_missing");
  RunConfig rc = tiny_run(dir);
  EXPECT_THROW(cmd_prune(rc, dir + "/nope.srlb", dir + "/nope.srtk", dir + "/p"), IoError);
  EXPECT_THROW(cmd_eval(rc, dir + "/nope.srlb", {}, dir + "/e"), ConfigError);
}

TEST(Experiment, ZeroSparsityGivesZeroTraces) {
  const std::string dir = temp_dir("exp_zero");
  RunConfig rc = tiny_run(dir);
  set_key(rc, "sparsity", "0");
  set_key(rc, "save_checkpoints", "false");
  auto res = cmd_experiment(rc);
  ASSERT_EQ(res.report.error_trace.size(), 2u * 5u);
  for (const auto& t : res.report.error_trace) {
    for (const auto& b : t.blocks) {
      EXPECT_EQ(b.e_calib, 0.0) << t.method;
      EXPECT_EQ(b.e_test, 0.0) << t.method;
    }
    EXPECT_EQ(t.logit_error, 0.0);
  }
}

TEST(Experiment, GridCardinalityAndOutputs) {
  const std::string dir = temp_dir("exp_grid");
  RunConfig rc = tiny_run(dir);
  set_key(rc, "grid_methods", "LR,BR,BR_GP,BR_GP_CR");
  auto res = cmd_experiment(rc);
  EXPECT_EQ(res.run_dir, dir + "/run-" + config_hash(rc));
  const EvalReport rep = load_report(res.run_dir + "/report.json");
  EXPECT_EQ(rep.error_trace.size(), 8u);
  EXPECT_EQ(rep.perplexity.size(), 9u);  // dense + 8 cells
  EXPECT_EQ(rep.run_meta.at("config_hash"), config_hash(rc));
  EXPECT_EQ(rep.param_counts.size(), 5u);
  const auto summary = nlohmann::json::parse(slurp(res.run_dir + "/summary.json"));
  EXPECT_EQ(summary.at("cells").size(), 9u);
  for (const char* p : {"magnitude", "wanda"}) {
    const std::string svg = slurp(res.run_dir + "/errors_" + std::string(p) + "_corpus.svg");
    EXPECT_NE(svg.find("config_hash " + config_hash(rc)), std::string::npos);
  }
  for (const char* f : {"dense.srlb", "test.srtk", "calib_corpus.srtk", "magnitude_corpus_mask.srlb",
                        "wanda_corpus_BR_GP_CR.srlb"}) {
    EXPECT_TRUE(std::filesystem::exists(res.run_dir + "/seed-0/" + f)) << f;
  }
  EXPECT_NE(slurp(res.run_dir + "/config.txt").find(config_hash(rc)), std::string::npos);
}

TEST(Binary, ErrorsAreOneMachineParsableLine) {
  const std::string dir = temp_dir("cli_bin");
  auto r = run_cli("prune --model " + dir + "/missing.srlb --calib x --out " + dir + "/p", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error kind=io msg=", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  r = run_cli("init_model --out " + dir + "/m.srlb --set sparsity=2", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error kind=config msg=", 0), 0u) << r.err;

  r = run_cli("no_such_command", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error kind=usage msg=", 0), 0u) << r.err;
}

TEST(Binary, InitModelMatchesLibrary) {
  const std::string dir = temp_dir("cli_init");
  auto r = run_cli("init_model --out " + dir + "/m.srlb --seed 3 --set model_blocks=1 --set model_hidden=8 "
                   "--set model_heads=2 --set model_ffn=8",
                   dir);
  ASSERT_EQ(r.code, 0) << r.err;
  RunConfig rc;
  set_key(rc, "seed", "3");
  set_key(rc, "model_blocks", "1");
  set_key(rc, "model_hidden", "8");
  set_key(rc, "model_heads", "2");
  set_key(rc, "model_ffn", "8");
  EXPECT_TRUE(load_checkpoint(dir + "/m.srlb").bit_equal(init_random(rc.model, 3)));
}
