#pragma once

// Calibration and test token sets: byte-level tokenizer, corpus window
// sampling, self-generation from the dense model, and the SRTK token file.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "srlb/container.hpp"
#include "srlb/model.hpp"
#include "srlb/reconstruction.hpp"
#include "srlb/tokens.hpp"

namespace srlb {

inline constexpr std::uint32_t kEosId = 256;
inline constexpr std::uint32_t kBosId = 257;
inline constexpr std::size_t kByteVocab = 258;

inline std::vector<std::uint32_t> tokenize(std::string_view text) {
  std::vector<std::uint32_t> ids;
  ids.reserve(text.size());
  for (unsigned char ch : text) ids.push_back(ch);
  return ids;
}

// Reserved and out-of-range ids render as sentinels instead of failing.
inline std::string detokenize(std::span<const std::uint32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::uint32_t id : ids) {
    if (id < 256)
      out.push_back(static_cast<char>(id));
    else if (id == kEosId)
      out += "<eos>";
    else if (id == kBosId)
      out += "<bos>";
    else
      out += "<unk>";
  }
  return out;
}

enum class CalibSource { corpus, self_generated };

inline const char* to_string(CalibSource s) { return s == CalibSource::corpus ? "corpus" : "self_generated"; }

inline CalibSource parse_calib_source(const std::string& s) {
  if (s == "corpus") return CalibSource::corpus;
  if (s == "self_generated") return CalibSource::self_generated;
  throw ConfigError("unknown calibration source '" + s + "' (expected corpus|self_generated)");
}

struct CalibrationSet {
  TokenMatrix tokens;
  CalibSource source = CalibSource::corpus;
  std::uint64_t seed = 0;
  double mix_ratio = 0.0;  // fraction of a generated set mixed in by augment()

  std::size_t size() const noexcept { return tokens.rows; }
};

// ids < vocab everywhere, BOS only at position 0.
inline void validate_calibration(const CalibrationSet& set, std::size_t vocab, std::uint32_t bos = kBosId) {
  const TokenMatrix& t = set.tokens;
  if (t.ids.size() != t.rows * t.cols) throw ContractError("calibration: ragged token matrix");
  for (std::size_t r = 0; r < t.rows; ++r)
    for (std::size_t c = 0; c < t.cols; ++c) {
      const std::uint32_t id = t.ids[r * t.cols + c];
      if (id >= vocab) throw ContractError("calibration: token id " + std::to_string(id) + " >= vocab");
      if (c > 0 && id == bos) throw ContractError("calibration: BOS after position 0 in row " + std::to_string(r));
    }
}

// ---------------------------------------------------------------------------
// Corpus sampling

inline std::vector<std::uint32_t> load_corpus(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return tokenize(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// First `fraction` of the corpus for calibration, the rest held out for test.
inline std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>> split_corpus(
    std::span<const std::uint32_t> corpus, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("corpus split fraction must be in (0, 1)");
  const auto cut = static_cast<std::size_t>(static_cast<double>(corpus.size()) * fraction);
  return {{corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cut)},
          {corpus.begin() + static_cast<std::ptrdiff_t>(cut), corpus.end()}};
}

// N windows of length T at uniform offsets, drawn with replacement.
inline CalibrationSet sample_from_corpus(std::span<const std::uint32_t> corpus, std::size_t n, std::size_t t,
                                         std::uint64_t seed) {
  if (t == 0) throw ConfigError("sample_from_corpus: window length must be positive");
  if (corpus.size() < t) {
    throw ConfigError("sample_from_corpus: corpus has " + std::to_string(corpus.size()) +
                      " tokens, shorter than window " + std::to_string(t));
  }
  CalibrationSet set;
  set.source = CalibSource::corpus;
  set.seed = seed;
  set.tokens.rows = n;
  set.tokens.cols = t;
  set.tokens.ids.reserve(n * t);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - t);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = offset(rng);
    set.tokens.ids.insert(set.tokens.ids.end(), corpus.begin() + static_cast<std::ptrdiff_t>(o),
                          corpus.begin() + static_cast<std::ptrdiff_t>(o + t));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Self-generation

struct GenerationFilter {
  std::string name;
  std::function<bool(std::string_view)> accept;
};

// Fraction of bytes that are printable ASCII or common whitespace.
inline double printable_ratio(std::string_view text) {
  if (text.empty()) return 1.0;
  std::size_t ok = 0;
  for (unsigned char ch : text)
    if ((ch >= 0x20 && ch < 0x7F) || ch == '\n' || ch == '\t' || ch == '\r') ++ok;
  return static_cast<double>(ok) / static_cast<double>(text.size());
}

inline GenerationFilter printable_filter(double threshold = 0.9) {
  return {"printable_ratio>=" + std::to_string(threshold),
          [threshold](std::string_view s) { return printable_ratio(s) >= threshold; }};
}

inline GenerationFilter accept_all_filter() {
  return {"accept_all", [](std::string_view) { return true; }};
}

struct GenerationParams {
  std::size_t count = 1;
  std::size_t gen_len = 0;  // 0: model max_seq
  std::size_t window = 0;   // 0: gen_len
  std::size_t greedy_prefix = 4;
  float temperature = 1.0f;
  bool greedy = false;  // zero-temperature limit for the stochastic phase
  std::size_t top_k = 0;
  std::size_t retry_cap = 100;
  bool filter_whole_text = false;
};

namespace detail {

// Greedy pick; ties go to the smaller id. Reserved ids are never chosen.
inline std::uint32_t argmax_token(std::span<const float> logits, std::uint32_t eos, std::uint32_t bos, bool allow_eos) {
  std::uint32_t best = 0;
  float best_v = -std::numeric_limits<float>::infinity();
  bool found = false;
  for (std::uint32_t i = 0; i < logits.size(); ++i) {
    if (i == bos || (!allow_eos && i == eos)) continue;
    if (!found || logits[i] > best_v) {
      best = i;
      best_v = logits[i];
      found = true;
    }
  }
  return best;
}

inline std::uint32_t sample_token(std::span<const float> logits, float temperature, std::size_t top_k,
                                  std::uint32_t bos, std::mt19937_64& rng) {
  std::vector<std::uint32_t> cand;
  cand.reserve(logits.size());
  for (std::uint32_t i = 0; i < logits.size(); ++i)
    if (i != bos) cand.push_back(i);
  if (top_k > 0 && top_k < cand.size()) {
    std::stable_sort(cand.begin(), cand.end(), [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b]; });
    cand.resize(top_k);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::uint32_t i : cand) mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
  std::vector<double> w(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) w[i] = std::exp(static_cast<double>(logits[cand[i]]) / temperature - mx);
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return cand[dist(rng)];
}

inline std::vector<float> next_logits(const Model& m, const std::vector<std::uint32_t>& seq) {
  TokenMatrix tm(1, seq.size(), seq);
  Tensor logits = forward_full(m, tm);
  const std::size_t v = m.config.vocab;
  return {logits.ptr() + (seq.size() - 1) * v, logits.ptr() + seq.size() * v};
}

}  // namespace detail

// One sequence of exactly `window` tokens (before EOS padding). Throws when
// the filter rejects `retry_cap` consecutive attempts.
inline std::vector<std::uint32_t> generate_sequence(const Model& m, const GenerationParams& p,
                                                    const GenerationFilter& filter, std::uint64_t seq_seed) {
  const ModelConfig& c = m.config;
  const std::size_t len = p.gen_len ? p.gen_len : c.max_seq;
  const std::size_t window = p.window ? p.window : len;
  if (len > c.max_seq) throw ConfigError("self_generate: gen_len exceeds model max_seq");
  if (window > len) throw ConfigError("self_generate: window must be <= gen_len");
  if (p.temperature <= 0.0f && !p.greedy) throw ConfigError("self_generate: temperature must be positive");

  std::mt19937_64 rng(seq_seed);
  std::vector<std::uint32_t> start_ids;
  for (std::uint32_t i = 0; i < c.vocab; ++i)
    if (i != c.eos_token_id && i != c.bos_token_id) start_ids.push_back(i);
  std::uniform_int_distribution<std::size_t> pick(0, start_ids.size() - 1);

  for (std::size_t attempt = 0; attempt < p.retry_cap; ++attempt) {
    std::vector<std::uint32_t> seq{start_ids[pick(rng)]};
    for (std::size_t i = 0; i < p.greedy_prefix && seq.size() < len; ++i) {
      seq.push_back(detail::argmax_token(detail::next_logits(m, seq), c.eos_token_id, c.bos_token_id, false));
    }
    if (!filter.accept(detokenize(seq))) continue;

    while (seq.size() < len && seq.back() != c.eos_token_id) {
      auto logits = detail::next_logits(m, seq);
      seq.push_back(p.greedy ? detail::argmax_token(logits, c.eos_token_id, c.bos_token_id, true)
                             : detail::sample_token(logits, p.temperature, p.top_k, c.bos_token_id, rng));
    }
    if (p.filter_whole_text && !filter.accept(detokenize(seq))) continue;

    if (seq.size() > window) {
      // Interior window: never starts at position 0.
      std::uniform_int_distribution<std::size_t> off(1, seq.size() - window);
      const std::size_t o = off(rng);
      return {seq.begin() + static_cast<std::ptrdiff_t>(o), seq.begin() + static_cast<std::ptrdiff_t>(o + window)};
    }
    seq.resize(window, c.eos_token_id);
    return seq;
  }
  throw GenerationError("self_generate: filter '" + filter.name + "' rejected " + std::to_string(p.retry_cap) +
                        " consecutive attempts");
}

// Sequence i uses seed mix_seed(seed, i), so sequences are independent of
// each other and of generation order.
inline CalibrationSet self_generate(const Model& dense, const GenerationParams& p, const GenerationFilter& filter,
                                    std::uint64_t seed) {
  if (p.count == 0) throw ConfigError("self_generate: count must be >= 1");
  CalibrationSet set;
  set.source = CalibSource::self_generated;
  set.seed = seed;
  const std::size_t len = p.gen_len ? p.gen_len : dense.config.max_seq;
  set.tokens.cols = p.window ? p.window : len;
  set.tokens.rows = p.count;
  for (std::size_t i = 0; i < p.count; ++i) {
    auto seq = generate_sequence(dense, p, filter, mix_seed(seed, i));
    set.tokens.ids.insert(set.tokens.ids.end(), seq.begin(), seq.end());
  }
  return set;
}

// Base plus round(ratio * |generated|) generated rows (seeded subset), shuffled.
// ratio 0 returns the base set untouched.
inline CalibrationSet augment(const CalibrationSet& base, const CalibrationSet& generated, double ratio,
                              std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("augment: ratio must be in [0, 1]");
  if (ratio == 0.0) return base;
  if (base.tokens.rows > 0 && generated.tokens.rows > 0 && base.tokens.cols != generated.tokens.cols) {
    throw DimensionError("augment: sequence length mismatch (" + std::to_string(base.tokens.cols) + " vs " +
                         std::to_string(generated.tokens.cols) + ")");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> gen_idx(generated.tokens.rows);
  std::iota(gen_idx.begin(), gen_idx.end(), std::size_t{0});
  std::shuffle(gen_idx.begin(), gen_idx.end(), rng);
  gen_idx.resize(static_cast<std::size_t>(std::llround(ratio * static_cast<double>(generated.tokens.rows))));

  CalibrationSet out;
  out.source = base.source;
  out.seed = seed;
  out.mix_ratio = ratio;
  out.tokens.cols = base.tokens.rows ? base.tokens.cols : generated.tokens.cols;
  std::vector<const std::uint32_t*> rows;
  for (std::size_t r = 0; r < base.tokens.rows; ++r) rows.push_back(base.tokens.ids.data() + r * base.tokens.cols);
  for (std::size_t r : gen_idx) rows.push_back(generated.tokens.ids.data() + r * generated.tokens.cols);
  std::shuffle(rows.begin(), rows.end(), rng);
  out.tokens.rows = rows.size();
  for (const std::uint32_t* r : rows) out.tokens.ids.insert(out.tokens.ids.end(), r, r + out.tokens.cols);
  return out;
}

// ---------------------------------------------------------------------------
// Token file: "SRTK" | u32 version | u64 N | u64 T | N*T u32 ids

inline constexpr char kTokenMagic[4] = {'S', 'R', 'T', 'K'};
inline constexpr std::uint32_t kTokenVersion = 1;

inline std::vector<unsigned char> encode_tokens(const TokenMatrix& t) {
  std::vector<unsigned char> out(24 + t.ids.size() * 4);
  std::memcpy(out.data(), kTokenMagic, 4);
  std::memcpy(out.data() + 4, &kTokenVersion, 4);
  const std::uint64_t n = t.rows, cols = t.cols;
  std::memcpy(out.data() + 8, &n, 8);
  std::memcpy(out.data() + 16, &cols, 8);
  if (!t.ids.empty()) std::memcpy(out.data() + 24, t.ids.data(), t.ids.size() * 4);
  return out;
}

inline TokenMatrix decode_tokens(const std::vector<unsigned char>& buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kTokenMagic, 4) != 0) throw BadMagicError("token file: bad magic");
  if (buf.size() < 24) throw TruncatedError("token file: truncated preamble");
  std::uint32_t ver = 0;
  std::memcpy(&ver, buf.data() + 4, 4);
  if (ver != kTokenVersion) throw VersionMismatchError("token file: version " + std::to_string(ver));
  std::uint64_t n = 0, cols = 0;
  std::memcpy(&n, buf.data() + 8, 8);
  std::memcpy(&cols, buf.data() + 16, 8);
  if (cols != 0 && n > (buf.size() - 24) / 4 / cols) throw TruncatedError("token file: body shorter than N*T ids");
  if ((buf.size() - 24) != n * cols * 4) throw HeaderMismatchError("token file: body length disagrees with N*T");
  TokenMatrix t;
  t.rows = n;
  t.cols = cols;
  t.ids.resize(n * cols);
  if (!t.ids.empty()) std::memcpy(t.ids.data(), buf.data() + 24, t.ids.size() * 4);
  return t;
}

inline void save_tokens(const TokenMatrix& t, const std::string& path) { write_file_bytes(path, encode_tokens(t)); }
inline TokenMatrix load_tokens(const std::string& path) { return decode_tokens(read_file_bytes(path)); }

}  // namespace srlb
