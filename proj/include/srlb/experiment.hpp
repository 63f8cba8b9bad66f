#pragma once

// Data preparation shared by the commands, and the full ablation grid
// {pruner x method x calibration source} over seeds.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "srlb/calibration.hpp"
#include "srlb/checkpoint.hpp"
#include "srlb/eval.hpp"
#include "srlb/run_config.hpp"

namespace srlb {

// Seed salts, so each stream is independent of the others.
inline constexpr std::uint64_t kSaltCalib = 1;
inline constexpr std::uint64_t kSaltTest = 2;
inline constexpr std::uint64_t kSaltGenerate = 3;
inline constexpr std::uint64_t kSaltAugment = 4;
inline constexpr std::uint64_t kSaltGenEval = 5;
inline constexpr std::uint64_t kSaltRecon = 6;

using Logger = std::function<void(const std::string&)>;

struct CorpusSplit {
  std::vector<std::uint32_t> calib, test;
};

inline CorpusSplit load_split_corpus(const RunConfig& rc) {
  const auto all = load_corpus(rc.corpus);
  auto [a, b] = split_corpus(all, rc.corpus_split);
  return {std::move(a), std::move(b)};
}

inline CalibrationSet build_calibration(const RunConfig& rc, const Model& dense, CalibSource source, std::size_t n,
                                        std::uint64_t seed, const CorpusSplit* corpus = nullptr) {
  std::optional<CorpusSplit> own;
  auto corp = [&]() -> const CorpusSplit& {
    if (corpus) return *corpus;
    if (!own) own = load_split_corpus(rc);
    return *own;
  };
  CalibrationSet set;
  if (source == CalibSource::self_generated) {
    set = self_generate(dense, generation_params(rc, n), generation_filter(rc), mix_seed(seed, kSaltGenerate));
  } else {
    set = sample_from_corpus(corp().calib, n, rc.calib_t, mix_seed(seed, kSaltCalib));
    if (rc.mix_ratio > 0.0) {
      const CalibrationSet gen =
          self_generate(dense, generation_params(rc, n), generation_filter(rc), mix_seed(seed, kSaltGenerate));
      set = augment(set, gen, rc.mix_ratio, mix_seed(seed, kSaltAugment));
    }
  }
  validate_calibration(set, dense.config.vocab, dense.config.bos_token_id);
  return set;
}

// Held-out corpus windows, disjoint from the calibration part of the corpus.
inline CalibrationSet build_test_set(const RunConfig& rc, std::uint64_t seed, const CorpusSplit* corpus = nullptr) {
  std::optional<CorpusSplit> own;
  if (!corpus) corpus = &own.emplace(load_split_corpus(rc));
  return sample_from_corpus(corpus->test, rc.test_n, rc.calib_t, mix_seed(seed, kSaltTest));
}

// Sequences drawn from the dense model itself, separate from any calibration draw.
inline CalibrationSet build_generated_eval_set(const RunConfig& rc, const Model& dense, std::uint64_t seed) {
  return self_generate(dense, generation_params(rc, rc.test_n), generation_filter(rc), mix_seed(seed, kSaltGenEval));
}

// Token files carry no header metadata, so they get a JSON sidecar.
inline void save_tokens_with_sidecar(const CalibrationSet& set, const std::string& path, const std::string& hash) {
  save_tokens(set.tokens, path);
  nlohmann::json meta = {{"config_hash", hash},     {"source", to_string(set.source)}, {"seed", set.seed},
                         {"mix_ratio", set.mix_ratio}, {"rows", set.tokens.rows},       {"cols", set.tokens.cols}};
  write_text_file(path + ".meta.json", meta.dump(2) + "\n");
}

inline void write_resolved_config(const RunConfig& rc, const std::string& path) {
  write_text_file(path, resolved_config_text(rc));
}

inline nlohmann::json run_meta_json(const RunConfig& rc) {
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& f : detail::fields())
    if (std::string(f.key) != "out") cfg[f.key] = f.get(rc);
  return {{"config_hash", config_hash(rc)},
          {"config", cfg},
          {"model", config_to_json(rc.model)},
          {"sparsity", rc.sparsity},
          {"pruners", split_list(rc.grid_pruners)},
          {"methods", split_list(rc.grid_methods)},
          {"calib_sources", split_list(rc.grid_calib_sources)},
          {"seeds", split_list(rc.grid_seeds)},
          {"calib_n", rc.calib_n},
          {"calib_t", rc.calib_t},
          {"test_n", rc.test_n}};
}

struct ExperimentResult {
  std::string run_dir;
  EvalReport report;
};

inline std::string run_dir_for(const RunConfig& rc) {
  return (std::filesystem::path(rc.out) / ("run-" + config_hash(rc))).string();
}

// Mean of each (pruner, calib source, method) cell over seeds.
inline nlohmann::json summarize(const EvalReport& r) {
  std::map<std::string, std::vector<const ErrorTrace*>> groups;
  for (const auto& t : r.error_trace) groups[t.pruner + "/" + t.calib_source + "/" + t.method].push_back(&t);
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [key, ts] : groups) {
    double ec = 0, et = 0, le = 0;
    for (const ErrorTrace* t : ts) {
      ec += t->blocks.back().e_calib;
      et += t->blocks.back().e_test;
      le += t->logit_error;
    }
    const double n = static_cast<double>(ts.size());
    out[key] = {{"final_e_calib", ec / n}, {"final_e_test", et / n}, {"logit_error", le / n}, {"seeds", ts.size()}};
  }
  std::map<std::string, std::pair<std::map<std::string, double>, std::size_t>> ppl;
  for (const auto& p : r.perplexity) {
    auto& [sum, n] = ppl[p.pruner + "/" + p.calib_source + "/" + p.method];
    for (const auto& [name, v] : p.values) sum[name] += v;
    ++n;
  }
  for (auto& [key, sn] : ppl) {
    for (auto& [name, v] : sn.first) v /= static_cast<double>(sn.second);
    out[key]["perplexity"] = sn.first;
  }
  return out;
}

inline ExperimentResult run_experiment(const RunConfig& rc, const Logger& log = {}) {
  validate(rc);
  const std::string hash = config_hash(rc);
  const std::string dir = run_dir_for(rc);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  write_resolved_config(rc, (std::filesystem::path(dir) / "config.txt").string());

  const auto pruners = split_list(rc.grid_pruners);
  const auto methods = split_list(rc.grid_methods);
  const auto sources = split_list(rc.grid_calib_sources);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(rc.grid_seeds)) seeds.push_back(detail::parse_num<std::uint64_t>("grid_seeds", s));
  if (pruners.empty() || methods.empty() || sources.empty() || seeds.empty()) {
    throw ConfigError("experiment: grid_pruners, grid_methods, grid_calib_sources and grid_seeds must be non-empty");
  }

  const CorpusSplit corpus = load_split_corpus(rc);
  EvalReport report;
  report.run_meta = run_meta_json(rc);
  const Granularity report_gran = rc.granularity == "default" ? default_granularity(parse_prune_method(pruners.front()))
                                                              : parse_granularity(rc.granularity);
  report.param_counts = param_counts(rc.model, rc.sparsity, report_gran, parse_scope(rc.scope));

  for (std::uint64_t seed : seeds) {
    const std::filesystem::path sdir = std::filesystem::path(dir) / ("seed-" + std::to_string(seed));
    std::filesystem::create_directories(sdir, ec);
    if (ec) throw IoError("cannot create '" + sdir.string() + "': " + ec.message());
    if (log) log("seed " + std::to_string(seed) + ": init + data");

    const Model dense = init_random(rc.model, seed);
    const CalibrationSet test = build_test_set(rc, seed, &corpus);
    const CalibrationSet gen_eval = build_generated_eval_set(rc, dense, seed);
    const auto eval_all = [&](const Model& m) {
      return std::map<std::string, double>{{"test", perplexity(m, test.tokens)}, {"generated", perplexity(m, gen_eval.tokens)}};
    };
    report.perplexity.push_back({"dense", "dense", "-", seed, eval_all(dense)});
    if (rc.save_checkpoints) {
      save_checkpoint(dense, (sdir / "dense.srlb").string(), hash);
      save_tokens_with_sidecar(test, (sdir / "test.srtk").string(), hash);
      save_tokens_with_sidecar(gen_eval, (sdir / "generated_eval.srtk").string(), hash);
    }

    for (const auto& src_name : sources) {
      const CalibSource src = parse_calib_source(src_name);
      const CalibrationSet calib = build_calibration(rc, dense, src, rc.calib_n, seed, &corpus);
      if (rc.save_checkpoints) save_tokens_with_sidecar(calib, (sdir / ("calib_" + src_name + ".srtk")).string(), hash);

      for (const auto& pr : pruners) {
        const PrunerSpec spec = pruner_spec(rc, pr);
        const SparsityMask mask = compute_mask(dense, spec, &calib.tokens);
        const std::string stem = pr + "_" + src_name;
        if (rc.save_checkpoints) save_mask(mask, (sdir / (stem + "_mask.srlb")).string(), hash);

        for (const auto& mname : methods) {
          if (log) log("seed " + std::to_string(seed) + ": " + pr + " / " + src_name + " / " + mname);
          const ReconMethod method = parse_recon_method(mname);
          PipelineResult res = reconstruct_with_mask(dense, mask, method, calib.tokens, test.tokens,
                                                     recon_config(rc, mix_seed(seed, kSaltRecon)));
          res.trace.calib_source = src_name;
          res.trace.seed = seed;
          report.error_trace.push_back(res.trace);
          report.perplexity.push_back({pr, mname, src_name, seed, eval_all(res.sparse)});
          if (rc.save_checkpoints) save_checkpoint(res.sparse, (sdir / (stem + "_" + mname + ".srlb")).string(), hash);
        }
      }
    }
  }

  emit_report(report, dir);
  nlohmann::json summary = {{"config_hash", hash}, {"cells", summarize(report)}};
  write_text_file((std::filesystem::path(dir) / "summary.json").string(), summary.dump(2) + "\n");
  for (const auto& pr : pruners) {
    for (const auto& src : sources) {
      std::vector<ErrorTrace> sel;
      for (const auto& t : report.error_trace)
        if (t.pruner == pr && t.calib_source == src) sel.push_back(t);
      emit_plot(sel, (std::filesystem::path(dir) / ("errors_" + pr + "_" + src + ".svg")).string(),
                pr + " pruning, " + src + " calibration: mean per-block error", "config_hash " + hash);
    }
  }
  return {dir, std::move(report)};
}

}  // namespace srlb
