#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "srlb/eval.hpp"
#include "support.hpp"

using namespace srlb;
using testsupport::random_tokens;
using testsupport::temp_dir;
using testsupport::tiny_config;

namespace {

// Whole-set forward, long-double log-sum-exp without max shift.
double nll_oracle_ppl(const Model& m, const TokenMatrix& data) {
  const Tensor logits = forward_full(m, data);
  const std::size_t v = m.config.vocab;
  long double total = 0;
  for (std::size_t r = 0; r < data.rows; ++r)
    for (std::size_t t = 0; t + 1 < data.cols; ++t) {
      const std::size_t base = (r * data.cols + t) * v;
      long double z = 0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<long double>(logits[base + j]));
      total += std::log(z) - logits[base + data.ids[r * data.cols + t + 1]];
    }
  return static_cast<double>(std::exp(total / static_cast<long double>(data.rows * (data.cols - 1))));
}

ErrorTrace trace(const std::string& method, std::vector<std::pair<double, double>> errs, std::uint64_t seed = 0) {
  ErrorTrace t;
  t.pruner = "magnitude";
  t.method = method;
  t.calib_source = "corpus";
  t.seed = seed;
  for (std::size_t i = 0; i < errs.size(); ++i) t.blocks.push_back({i, errs[i].first, errs[i].second});
  t.logit_error = 0.125;
  return t;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  Model m = init_random(tiny_config(1), 1);
  std::fill(m.head.data().begin(), m.head.data().end(), 0.0f);
  EXPECT_NEAR(perplexity(m, random_tokens(3, 10, 2)), 258.0, 1e-3);
}

TEST(Perplexity, MatchesIndependentNllOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Model m = init_random(tiny_config(2), seed);
    const auto data = random_tokens(11, 16, 50 + seed, 258);
    const double p = perplexity(m, data, 4), o = nll_oracle_ppl(m, data);
    EXPECT_NEAR(p / o, 1.0, 1e-6) << p << " vs " << o;
    EXPECT_GE(p, 1.0);
  }
}

TEST(Perplexity, InvariantToDuplicationAndChunking) {
  Model m = init_random(tiny_config(1), 4);
  const auto data = random_tokens(5, 8, 6);
  TokenMatrix twice = data;
  twice.rows *= 2;
  twice.ids.insert(twice.ids.end(), data.ids.begin(), data.ids.end());
  const double p = perplexity(m, data);
  EXPECT_NEAR(perplexity(m, twice), p, 1e-9 * p);
  EXPECT_NEAR(perplexity(m, data, 1), p, 1e-9 * p);
}

TEST(Perplexity, Errors) {
  Model m = init_random(tiny_config(1), 1);
  EXPECT_THROW(perplexity(m, TokenMatrix{}), ContractError);
  EXPECT_THROW(perplexity(m, random_tokens(2, 1, 1)), ContractError);
  m.head[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(perplexity(m, random_tokens(2, 4, 1)), NumericalError);
}

TEST(GeneralizationGap, Differences) {
  auto g = generalization_gap(trace("BR", {{1.0, 1.5}, {2.0, 1.0}}));
  EXPECT_EQ(g.per_block, (std::vector<double>{0.5, -1.0}));
  EXPECT_EQ(g.final_gap, -1.0);
  auto z = generalization_gap(trace("BR", {{3.0, 3.0}, {4.0, 4.0}}));
  EXPECT_EQ(z.final_gap, 0.0);
}

TEST(GeneralizationGap, CalibrationAsTestIsZero) {
  Model dense = init_random(tiny_config(2), 3);
  const auto calib = random_tokens(8, 8, 4);
  PrunerSpec p;
  ReconConfig rc;
  rc.epochs = 1;
  auto res = run_pipeline(dense, p, ReconMethod::BR, calib, calib, rc);
  for (double g : generalization_gap(res.trace).per_block) EXPECT_EQ(g, 0.0);
}

TEST(ParamAccounting, ClosedFormCounts) {
  ModelConfig c;
  c.n_blocks = 4;
  c.hidden = 64;
  c.n_heads = 4;
  c.ffn_dim = 256;
  // 4 attention (64x64 + 64), w1 (256x64 + 256), w2 (64x256 + 64), 2 layer norms (2 * 64 each).
  const std::uint64_t block = 4 * (64 * 64 + 64) + (256 * 64 + 256) + (64 * 256 + 64) + 2 * 128;
  EXPECT_EQ(block, 49984u);
  EXPECT_EQ(param_accounting(ReconMethod::BR, c), block);
  EXPECT_EQ(param_accounting(ReconMethod::BR_GP, c), block);
  EXPECT_EQ(param_accounting(ReconMethod::BR_GP_CR, c), 2 * block);
  EXPECT_EQ(param_accounting(ReconMethod::none, c), 0u);
  // Largest layer (w1 or w2) keeps half of 16384 weights.
  EXPECT_EQ(param_accounting(ReconMethod::LR, c, 0.5), 8192u);
  EXPECT_EQ(param_accounting(ReconMethod::LR, c, 0.5, Granularity::per_row, Scope::attention_only), 2048u);
  EXPECT_EQ(param_accounting(ReconMethod::LR, c, 0.0), 16384u);
}

TEST(ParamAccounting, OrderingHoldsAcrossConfigs) {
  for (std::size_t h : {8u, 16u, 64u})
    for (std::size_t f : {4u, 32u, 256u})
      for (double s : {0.0, 0.3, 0.5, 0.9}) {
        ModelConfig c = tiny_config(2);
        c.hidden = h;
        c.ffn_dim = f;
        for (Granularity g : {Granularity::per_row, Granularity::per_matrix}) {
          auto m = param_counts(c, s, g);
          EXPECT_LE(m["LR"], m["BR"]);
          EXPECT_EQ(m["BR"], m["BR_GP"]);
          EXPECT_LT(m["BR_GP"], m["BR_GP_CR"]);
        }
      }
}

TEST(Report, RoundTripsThroughJson) {
  EvalReport r;
  r.run_meta = {{"config_hash", "0123456789abcdef"}, {"sparsity", 0.5}};
  r.perplexity.push_back({"dense", "dense", "-", 0, {{"test", 260.5}, {"generated", 250.25}}});
  r.perplexity.push_back({"wanda", "BR", "corpus", 3, {{"test", 261.0}}});
  r.error_trace = {trace("BR", {{0.1, 0.2}, {0.3, 0.4}}, 3), trace("LR", {{1e-7, 2e-7}}, 4)};
  r.param_counts = param_counts(tiny_config(2), 0.5, Granularity::per_row);
  const std::string text = dump_report(r);
  EvalReport back = parse_report(text);
  EXPECT_EQ(back.run_meta, r.run_meta);
  EXPECT_EQ(back.perplexity, r.perplexity);
  EXPECT_EQ(back.error_trace, r.error_trace);
  EXPECT_EQ(back.param_counts, r.param_counts);
  EXPECT_EQ(dump_report(back), text);

  const auto j = nlohmann::json::parse(text);
  for (const char* k : {"run_meta", "perplexity", "error_trace", "param_counts"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_DOUBLE_EQ(j["error_trace"][0]["generalization_gap"]["final"].get<double>(), 0.4 - 0.3);

  const std::string dir = temp_dir("report");
  const std::string path = emit_report(r, dir);
  EXPECT_EQ(std::filesystem::path(path).filename(), "report.json");
  EXPECT_EQ(dump_report(load_report(path)), text);
}

TEST(Report, RejectsBadInput) {
  EvalReport r;
  r.perplexity.push_back({"dense", "dense", "-", 0, {{"test", 0.5}}});
  EXPECT_THROW(report_to_json(r), ContractError);
  EXPECT_THROW(parse_report("{not json"), FormatError);
  EXPECT_THROW(parse_report("{\"run_meta\": {}}"), FormatError);
  EXPECT_THROW(load_report("/nonexistent/dir/report.json"), IoError);
  EXPECT_THROW(emit_report(EvalReport{}, "/proc/definitely/not/writable"), IoError);
}

TEST(Plot, SingleBlockTraceIsASinglePoint) {
  const std::string svg = render_plot_svg(mean_series({trace("BR", {{2e-5, 3e-5}})}), "t");
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_EQ(count(svg, "<circle"), 1u);
  EXPECT_EQ(count(svg, "<polyline"), 0u);
}

TEST(Plot, OneLegendEntryPerMethod) {
  std::vector<ErrorTrace> ts{trace("BR", {{1e-4, 0}, {2e-4, 0}}, 0), trace("BR", {{3e-4, 0}, {4e-4, 0}}, 1),
                             trace("LR", {{1e-3, 0}, {5e-3, 0}}, 0)};
  const auto series = mean_series(ts);
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[0].label, "BR");
  EXPECT_DOUBLE_EQ(series[0].values[0], 2e-4);
  EXPECT_DOUBLE_EQ(series[0].values[1], 3e-4);
  const std::string svg = render_plot_svg(series, "a < b & c", "config_hash=abc");
  EXPECT_EQ(count(svg, "class=\"legend\""), 2u);
  EXPECT_EQ(count(svg, "class=\"series\""), 2u);
  EXPECT_NE(svg.find("a &lt; b &amp; c"), std::string::npos);
  EXPECT_NE(svg.find("<!-- config_hash=abc -->"), std::string::npos);
}

TEST(Plot, ZeroErrorsStillRender) {
  const std::string svg = render_plot_svg(mean_series({trace("none", {{0, 0}, {0, 0}})}), "zeros");
  EXPECT_EQ(svg.find("nan"), std::string::npos);
  EXPECT_EQ(svg.find("inf"), std::string::npos);
  EXPECT_EQ(count(svg, "<circle"), 2u);
}

TEST(Plot, MismatchedBlockCountsAreRejected) {
  EXPECT_THROW(mean_series({trace("BR", {{1, 1}}), trace("BR", {{1, 1}, {1, 1}})}), DimensionError);
}
