#pragma once

// Run configuration: `key = value` text with `#` comments.
// Resolution order: defaults, config file, SRLB_<KEY> environment variables,
// then explicit overrides (command-line flags).

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "srlb/calibration.hpp"
#include "srlb/eval.hpp"
#include "srlb/pruning.hpp"
#include "srlb/reconstruction.hpp"

#ifndef SRLB_DATA_DIR
#define SRLB_DATA_DIR "data"
#endif

namespace srlb {

struct RunConfig {
  ModelConfig model;
  std::uint64_t seed = 0;

  double sparsity = 0.5;
  std::string pruner = "magnitude";
  std::string granularity = "default";  // "default": per-method choice
  std::string scope = "all";
  std::string method = "BR_GP";

  std::size_t recon_epochs = 10;
  std::size_t recon_batch_size = 8;
  float recon_lr = 2e-4f;
  double recon_ridge = 0.01;

  std::string calib_source = "corpus";
  std::size_t calib_n = 32;
  std::size_t calib_t = 64;
  double mix_ratio = 0.0;
  std::size_t test_n = 32;
  std::string corpus = SRLB_DATA_DIR "/corpus.txt";
  double corpus_split = 0.5;  // leading fraction for calibration, rest held out for test

  std::size_t gen_len = 0;  // 0: model max_seq
  std::size_t gen_greedy_prefix = 4;
  float gen_temperature = 1.0f;
  bool gen_greedy = false;
  std::size_t gen_top_k = 0;
  std::size_t gen_retry_cap = 100;
  std::string gen_filter = "printable";  // printable | accept_all
  double gen_filter_threshold = 0.6;
  bool gen_filter_whole_text = false;

  std::string grid_pruners = "magnitude,wanda";
  std::string grid_methods = "none,LR,BR,BR_GP,BR_GP_CR";
  std::string grid_calib_sources = "corpus";
  std::string grid_seeds = "0,1,2,3,4";
  bool save_checkpoints = true;

  std::string out = "out";  // not part of the hash: where results go does not change them
};

namespace detail {

template <class T>
std::string num_to_string(T v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_num(const std::string& key, const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc{} || r.ptr != e) throw ConfigError("config: key '" + key + "' has invalid value '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field num_field(const char* key, T RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return num_to_string(c.*member); },
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_num<T>(key, v); }};
}

template <class T>
Field model_field(const char* key, T ModelConfig::*member) {
  return {key, [member](const RunConfig& c) { return num_to_string(c.model.*member); },
          [key, member](RunConfig& c, const std::string& v) { c.model.*member = parse_num<T>(key, v); }};
}

inline Field str_field(const char* key, std::string RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return c.*member; },
          [member](RunConfig& c, const std::string& v) { c.*member = v; }};
}

inline Field bool_field(const char* key, bool RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

// Canonical key order; serialization follows it.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      model_field("model_blocks", &ModelConfig::n_blocks),
      model_field("model_hidden", &ModelConfig::hidden),
      model_field("model_heads", &ModelConfig::n_heads),
      model_field("model_ffn", &ModelConfig::ffn_dim),
      model_field("model_vocab", &ModelConfig::vocab),
      model_field("model_max_seq", &ModelConfig::max_seq),
      num_field("seed", &RunConfig::seed),
      num_field("sparsity", &RunConfig::sparsity),
      str_field("pruner", &RunConfig::pruner),
      str_field("granularity", &RunConfig::granularity),
      str_field("scope", &RunConfig::scope),
      str_field("method", &RunConfig::method),
      num_field("recon_epochs", &RunConfig::recon_epochs),
      num_field("recon_batch_size", &RunConfig::recon_batch_size),
      num_field("recon_lr", &RunConfig::recon_lr),
      num_field("recon_ridge", &RunConfig::recon_ridge),
      str_field("calib_source", &RunConfig::calib_source),
      num_field("calib_n", &RunConfig::calib_n),
      num_field("calib_t", &RunConfig::calib_t),
      num_field("mix_ratio", &RunConfig::mix_ratio),
      num_field("test_n", &RunConfig::test_n),
      str_field("corpus", &RunConfig::corpus),
      num_field("corpus_split", &RunConfig::corpus_split),
      num_field("gen_len", &RunConfig::gen_len),
      num_field("gen_greedy_prefix", &RunConfig::gen_greedy_prefix),
      num_field("gen_temperature", &RunConfig::gen_temperature),
      bool_field("gen_greedy", &RunConfig::gen_greedy),
      num_field("gen_top_k", &RunConfig::gen_top_k),
      num_field("gen_retry_cap", &RunConfig::gen_retry_cap),
      str_field("gen_filter", &RunConfig::gen_filter),
      num_field("gen_filter_threshold", &RunConfig::gen_filter_threshold),
      bool_field("gen_filter_whole_text", &RunConfig::gen_filter_whole_text),
      str_field("grid_pruners", &RunConfig::grid_pruners),
      str_field("grid_methods", &RunConfig::grid_methods),
      str_field("grid_calib_sources", &RunConfig::grid_calib_sources),
      str_field("grid_seeds", &RunConfig::grid_seeds),
      bool_field("save_checkpoints", &RunConfig::save_checkpoints),
      str_field("out", &RunConfig::out),
  };
  return f;
}

inline const Field& field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace detail

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
  detail::field(key).set(c, detail::trim(value));
}

inline std::string get_key(const RunConfig& c, const std::string& key) { return detail::field(key).get(c); }

// "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(lineno) + " has no '='");
    set_key(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

// SRLB_<UPPERCASE KEY>, e.g. SRLB_RECON_EPOCHS=2.
inline void apply_env_overrides(RunConfig& c) {
  for (const auto& f : detail::fields()) {
    std::string name = "SRLB_";
    for (const char* p = f.key; *p; ++p) name += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    if (const char* v = std::getenv(name.c_str())) f.set(c, detail::trim(v));
  }
}

// Checks values and the names of enumerated options.
inline void validate(const RunConfig& c) {
  c.model.validate();
  if (!(c.sparsity >= 0.0 && c.sparsity < 1.0)) throw ConfigError("config: sparsity must be in [0, 1)");
  (void)parse_prune_method(c.pruner);
  if (c.granularity != "default") (void)parse_granularity(c.granularity);
  (void)parse_scope(c.scope);
  (void)parse_recon_method(c.method);
  (void)parse_calib_source(c.calib_source);
  if (c.calib_t < 2 || c.calib_t > c.model.max_seq) throw ConfigError("config: calib_t must be in [2, model_max_seq]");
  if (c.gen_len > c.model.max_seq) throw ConfigError("config: gen_len exceeds model_max_seq");
  if (!(c.mix_ratio >= 0.0 && c.mix_ratio <= 1.0)) throw ConfigError("config: mix_ratio must be in [0, 1]");
  if (!(c.corpus_split > 0.0 && c.corpus_split < 1.0)) throw ConfigError("config: corpus_split must be in (0, 1)");
  if (c.gen_filter != "printable" && c.gen_filter != "accept_all") {
    throw ConfigError("config: gen_filter must be printable or accept_all");
  }
  for (const auto& p : split_list(c.grid_pruners)) (void)parse_prune_method(p);
  for (const auto& m : split_list(c.grid_methods)) (void)parse_recon_method(m);
  for (const auto& s : split_list(c.grid_calib_sources)) (void)parse_calib_source(s);
  for (const auto& s : split_list(c.grid_seeds)) (void)detail::parse_num<std::uint64_t>("grid_seeds", s);
  ReconConfig rc;
  rc.epochs = c.recon_epochs;
  rc.batch_size = c.recon_batch_size;
  rc.base_lr = c.recon_lr;
  rc.ridge_fraction = c.recon_ridge;
  rc.validate();
}

inline std::string serialize(const RunConfig& c, bool include_out = true) {
  std::string s;
  for (const auto& f : detail::fields()) {
    if (!include_out && std::string(f.key) == "out") continue;
    s += f.key;
    s += " = ";
    s += f.get(c);
    s += '\n';
  }
  return s;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(serialize(c, false))));
  return buf;
}

// Resolved-config file written next to outputs.
inline std::string resolved_config_text(const RunConfig& c) {
  return "# resolved run configuration\n# config_hash = " + config_hash(c) + "\n" + serialize(c);
}

struct ConfigSources {
  std::string file;                                              // optional config file
  std::vector<std::pair<std::string, std::string>> overrides;  // applied last
  bool use_env = true;
};

inline RunConfig resolve_config(const ConfigSources& src) {
  RunConfig c;
  if (!src.file.empty()) apply_config_text(c, read_text_file(src.file));
  if (src.use_env) apply_env_overrides(c);
  for (const auto& [k, v] : src.overrides) set_key(c, k, v);
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Typed views

inline PrunerSpec pruner_spec(const RunConfig& c, const std::string& pruner) {
  PrunerSpec p;
  p.method = parse_prune_method(pruner);
  p.sparsity = c.sparsity;
  if (c.granularity != "default") p.granularity = parse_granularity(c.granularity);
  p.scope = parse_scope(c.scope);
  return p;
}

inline ReconConfig recon_config(const RunConfig& c, std::uint64_t seed) {
  ReconConfig r;
  r.epochs = c.recon_epochs;
  r.batch_size = c.recon_batch_size;
  r.base_lr = c.recon_lr;
  r.ridge_fraction = c.recon_ridge;
  r.seed = seed;
  return r;
}

inline GenerationParams generation_params(const RunConfig& c, std::size_t count) {
  GenerationParams p;
  p.count = count;
  p.gen_len = c.gen_len;
  p.window = c.calib_t;
  p.greedy_prefix = c.gen_greedy_prefix;
  p.temperature = c.gen_temperature;
  p.greedy = c.gen_greedy;
  p.top_k = c.gen_top_k;
  p.retry_cap = c.gen_retry_cap;
  p.filter_whole_text = c.gen_filter_whole_text;
  return p;
}

inline GenerationFilter generation_filter(const RunConfig& c) {
  return c.gen_filter == "accept_all" ? accept_all_filter() : printable_filter(c.gen_filter_threshold);
}

}  // namespace srlb
