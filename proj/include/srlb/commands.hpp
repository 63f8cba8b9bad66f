#pragma once

// Subcommand bodies behind tools/srlb. Each writes its resolved config next
// to its outputs and stamps the config hash into every artifact.

#include <filesystem>
#include <string>
#include <vector>

#include "srlb/experiment.hpp"

namespace srlb {

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace detail

// Seeded dense checkpoint at `out`; config beside it as <out>.config.txt.
inline void cmd_init_model(const RunConfig& rc, const std::string& out) {
  validate(rc);
  detail::ensure_parent(out);
  save_checkpoint(init_random(rc.model, rc.seed), out, config_hash(rc));
  write_resolved_config(rc, out + ".config.txt");
}

// Token file from the configured source. `held_out` samples the test part of
// the corpus instead (corpus source only).
inline CalibrationSet cmd_gen_calib(const RunConfig& rc, const std::string& model_path, std::size_t count,
                                    const std::string& out, bool held_out = false) {
  validate(rc);
  const Model dense = load_checkpoint(model_path);
  RunConfig local = rc;
  CalibrationSet set;
  if (held_out) {
    if (parse_calib_source(rc.calib_source) != CalibSource::corpus) {
      throw ConfigError("gen_calib: held-out sets come from the corpus; set calib_source=corpus");
    }
    local.test_n = count;
    set = build_test_set(local, rc.seed);
  } else {
    set = build_calibration(rc, dense, parse_calib_source(rc.calib_source), count, rc.seed);
  }
  detail::ensure_parent(out);
  save_tokens_with_sidecar(set, out, config_hash(rc));
  write_resolved_config(rc, out + ".config.txt");
  return set;
}

// <out>/mask.srlb and <out>/masked.srlb (the dense model with the mask applied).
inline SparsityMask cmd_prune(const RunConfig& rc, const std::string& model_path, const std::string& calib_path,
                              const std::string& out) {
  validate(rc);
  const Model dense = load_checkpoint(model_path);
  const TokenMatrix calib = load_tokens(calib_path);
  const SparsityMask mask = compute_mask(dense, pruner_spec(rc, rc.pruner), &calib);
  Model masked = dense;
  apply_mask(masked, mask);
  detail::ensure_dir(out);
  const std::string hash = config_hash(rc);
  save_mask(mask, detail::join(out, "mask.srlb"), hash);
  save_checkpoint(masked, detail::join(out, "masked.srlb"), hash);
  write_resolved_config(rc, detail::join(out, "config.txt"));
  return mask;
}

// <out>/sparse.srlb and <out>/trace.json. An empty test path skips test errors.
inline PipelineResult cmd_reconstruct(const RunConfig& rc, const std::string& model_path, const std::string& mask_path,
                                      const std::string& calib_path, const std::string& test_path,
                                      const std::string& out) {
  validate(rc);
  const Model dense = load_checkpoint(model_path);
  const SparsityMask mask = load_mask(mask_path);
  const TokenMatrix calib = load_tokens(calib_path);
  const TokenMatrix test = test_path.empty() ? TokenMatrix{} : load_tokens(test_path);
  PipelineResult res = reconstruct_with_mask(dense, mask, parse_recon_method(rc.method), calib, test,
                                             recon_config(rc, mix_seed(rc.seed, kSaltRecon)));
  res.trace.calib_source = rc.calib_source;
  res.trace.seed = rc.seed;
  detail::ensure_dir(out);
  const std::string hash = config_hash(rc);
  save_checkpoint(res.sparse, detail::join(out, "sparse.srlb"), hash);
  nlohmann::json tj = trace_to_json(res.trace);
  tj["config_hash"] = hash;
  write_text_file(detail::join(out, "trace.json"), tj.dump(2) + "\n");
  write_resolved_config(rc, detail::join(out, "config.txt"));
  return res;
}

struct NamedDataset {
  std::string name;
  std::string path;
};

// Perplexity of one checkpoint on each dataset, written as <out>/report.json.
inline EvalReport cmd_eval(const RunConfig& rc, const std::string& model_path, const std::vector<NamedDataset>& datasets,
                           const std::string& out) {
  validate(rc);
  if (datasets.empty()) throw ConfigError("eval: at least one dataset is required");
  const Model m = load_checkpoint(model_path);
  const Container c = load_container(model_path);
  PerplexityRecord rec{rc.pruner, rc.method, rc.calib_source, rc.seed, {}};
  for (const auto& d : datasets) rec.values[d.name] = perplexity(m, load_tokens(d.path));
  EvalReport r;
  r.run_meta = run_meta_json(rc);
  r.run_meta["model_path"] = model_path;
  if (c.meta.contains("config_hash")) r.run_meta["model_config_hash"] = c.meta["config_hash"];
  r.perplexity.push_back(std::move(rec));
  const Granularity g = rc.granularity == "default" ? default_granularity(parse_prune_method(rc.pruner))
                                                    : parse_granularity(rc.granularity);
  r.param_counts = param_counts(m.config, rc.sparsity, g, parse_scope(rc.scope));
  emit_report(r, out);
  write_resolved_config(rc, detail::join(out, "config.txt"));
  return r;
}

inline ExperimentResult cmd_experiment(const RunConfig& rc, const Logger& log = {}) { return run_experiment(rc, log); }

}  // namespace srlb
