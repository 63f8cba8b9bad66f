#pragma once

// Perplexity, generalization gap, parameter accounting, report and plot output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "srlb/reconstruction.hpp"

namespace srlb {

// exp of the mean next-token NLL (nats) over all N (T-1) predicted positions.
inline double perplexity(const Model& m, const TokenMatrix& data, std::size_t chunk_rows = 8) {
  if (data.rows == 0) throw ContractError("perplexity: empty dataset");
  if (data.cols < 2) throw ContractError("perplexity: need T >= 2 to predict anything");
  const std::size_t v = m.config.vocab;
  double nll = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t r0 = 0; r0 < data.rows; r0 += chunk_rows) {
    idx.clear();
    for (std::size_t r = r0; r < std::min(data.rows, r0 + chunk_rows); ++r) idx.push_back(r);
    const TokenMatrix part = data.gather(idx);
    const Tensor logits = forward_full(m, part);
    for (std::size_t r = 0; r < part.rows; ++r) {
      for (std::size_t t = 0; t + 1 < part.cols; ++t) {
        const float* z = logits.ptr() + (r * part.cols + t) * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) {
          if (!std::isfinite(z[j])) {
            throw NumericalError("perplexity: non-finite logit at row " + std::to_string(r0 + r) + ", position " +
                                 std::to_string(t));
          }
          mx = std::max(mx, static_cast<double>(z[j]));
        }
        double se = 0.0;
        for (std::size_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(z[j]) - mx);
        const std::uint32_t next = part.ids[r * part.cols + t + 1];
        nll += mx + std::log(se) - static_cast<double>(z[next]);
      }
    }
  }
  return std::exp(nll / static_cast<double>(data.rows * (data.cols - 1)));
}

struct GeneralizationGap {
  std::vector<double> per_block;  // e_test - e_calib
  double final_gap = 0.0;
};

inline GeneralizationGap generalization_gap(const ErrorTrace& trace) {
  GeneralizationGap g;
  for (const BlockError& b : trace.blocks) g.per_block.push_back(b.e_test - b.e_calib);
  if (!g.per_block.empty()) g.final_gap = g.per_block.back();
  return g;
}

// Parameters optimized simultaneously by one reconstruction unit. LR solves
// one layer at a time, so it counts the kept weights of the largest in-scope
// layer; BR variants train one block, CR two.
inline std::uint64_t param_accounting(ReconMethod method, const ModelConfig& c, double sparsity = 0.5,
                                      Granularity granularity = Granularity::per_row, Scope scope = Scope::all) {
  c.validate();
  const std::uint64_t block = block_param_count(c);
  switch (method) {
    case ReconMethod::none: return 0;
    case ReconMethod::LR: {
      std::uint64_t best = 0;
      for (MatrixKind k : kAllMatrices) {
        if (!in_scope(scope, k)) continue;
        const TransformerBlock probe = TransformerBlock::zeros(c);
        const Tensor& w = probe.matrix(k);
        const std::size_t rows = w.dim(0), cols = w.dim(1);
        const std::uint64_t kept = granularity == Granularity::per_row ? rows * kept_count(cols, sparsity)
                                                                       : kept_count(rows * cols, sparsity);
        best = std::max(best, kept);
      }
      return best;
    }
    case ReconMethod::BR:
    case ReconMethod::BR_GP: return block;
    case ReconMethod::BR_GP_CR: return 2 * block;
  }
  return 0;
}

inline std::map<std::string, std::uint64_t> param_counts(const ModelConfig& c, double sparsity,
                                                         Granularity granularity, Scope scope = Scope::all) {
  std::map<std::string, std::uint64_t> out;
  for (ReconMethod m : kAllReconMethods) out[to_string(m)] = param_accounting(m, c, sparsity, granularity, scope);
  const auto lr = out["LR"], br = out["BR"], gp = out["BR_GP"], cr = out["BR_GP_CR"];
  if (!(lr <= br && br == gp && gp < cr)) throw ContractError("param_accounting: ordering LR <= BR = BR_GP < CR violated");
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct PerplexityRecord {
  std::string pruner;  // "dense" for the unpruned model
  std::string method;
  std::string calib_source;
  std::uint64_t seed = 0;
  std::map<std::string, double> values;  // dataset name -> perplexity

  bool operator==(const PerplexityRecord&) const = default;
};

struct EvalReport {
  nlohmann::json run_meta = nlohmann::json::object();
  std::vector<PerplexityRecord> perplexity;
  std::vector<ErrorTrace> error_trace;
  std::map<std::string, std::uint64_t> param_counts;
};

inline nlohmann::json trace_to_json(const ErrorTrace& t) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockError& b : t.blocks) blocks.push_back({{"index", b.index}, {"e_calib", b.e_calib}, {"e_test", b.e_test}});
  const GeneralizationGap gap = generalization_gap(t);
  return {{"pruner", t.pruner},           {"method", t.method},
          {"calib_source", t.calib_source}, {"seed", t.seed},
          {"blocks", blocks},               {"logit_error", t.logit_error},
          {"generalization_gap", {{"per_block", gap.per_block}, {"final", gap.final_gap}}}};
}

inline ErrorTrace trace_from_json(const nlohmann::json& j) {
  ErrorTrace t;
  t.pruner = j.at("pruner").get<std::string>();
  t.method = j.at("method").get<std::string>();
  t.calib_source = j.at("calib_source").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.logit_error = j.at("logit_error").get<double>();
  for (const auto& b : j.at("blocks")) {
    t.blocks.push_back({b.at("index").get<std::size_t>(), b.at("e_calib").get<double>(), b.at("e_test").get<double>()});
  }
  return t;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json ppl = nlohmann::json::array();
  for (const auto& p : r.perplexity) {
    for (const auto& [name, v] : p.values) {
      if (!(v >= 1.0)) throw ContractError("report: perplexity " + std::to_string(v) + " for '" + name + "' is below 1");
    }
    ppl.push_back({{"pruner", p.pruner},
                   {"method", p.method},
                   {"calib_source", p.calib_source},
                   {"seed", p.seed},
                   {"values", p.values}});
  }
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : r.error_trace) traces.push_back(trace_to_json(t));
  return {{"run_meta", r.run_meta}, {"perplexity", ppl}, {"error_trace", traces}, {"param_counts", r.param_counts}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.run_meta = j.at("run_meta");
    for (const auto& p : j.at("perplexity")) {
      r.perplexity.push_back({p.at("pruner").get<std::string>(), p.at("method").get<std::string>(),
                              p.at("calib_source").get<std::string>(), p.at("seed").get<std::uint64_t>(),
                              p.at("values").get<std::map<std::string, double>>()});
    }
    for (const auto& t : j.at("error_trace")) r.error_trace.push_back(trace_from_json(t));
    r.param_counts = j.at("param_counts").get<std::map<std::string, std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

inline std::string dump_report(const EvalReport& r) { return report_to_json(r).dump(2) + "\n"; }

inline EvalReport parse_report(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return report_from_json(j);
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Writes <dir>/report.json and returns its path.
inline std::string emit_report(const EvalReport& r, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  const std::string path = (std::filesystem::path(dir) / "report.json").string();
  write_text_file(path, dump_report(r));
  return path;
}

inline EvalReport load_report(const std::string& path) { return parse_report(read_text_file(path)); }

// ---------------------------------------------------------------------------
// Plot

struct PlotSeries {
  std::string label;
  std::vector<double> values;  // one per block
};

// Mean per-block error across seeds, one series per method, in first-seen order.
inline std::vector<PlotSeries> mean_series(const std::vector<ErrorTrace>& traces, bool test_error = false) {
  std::vector<PlotSeries> out;
  std::vector<std::size_t> counts;
  for (const ErrorTrace& t : traces) {
    auto it = std::find_if(out.begin(), out.end(), [&](const PlotSeries& s) { return s.label == t.method; });
    if (it == out.end()) {
      out.push_back({t.method, std::vector<double>(t.blocks.size(), 0.0)});
      counts.push_back(0);
      it = out.end() - 1;
    }
    if (it->values.size() != t.blocks.size()) throw DimensionError("mean_series: traces disagree on block count");
    for (std::size_t i = 0; i < t.blocks.size(); ++i) it->values[i] += test_error ? t.blocks[i].e_test : t.blocks[i].e_calib;
    ++counts[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t s = 0; s < out.size(); ++s)
    for (double& v : out[s].values) v /= static_cast<double>(counts[s]);
  return out;
}

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    switch (ch) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += ch;
    }
  }
  return o;
}

// Per-block error line chart, log-scale y. Values <= 0 are drawn at the
// floor of the axis (an exact zero has no logarithm).
inline std::string render_plot_svg(const std::vector<PlotSeries>& series, const std::string& title,
                                   const std::string& comment = {}) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2"};
  const double W = 640, H = 400, L = 70, R = 150, T = 40, Bm = 50;
  std::size_t nblocks = 0;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& s : series) {
    nblocks = std::max(nblocks, s.values.size());
    for (double v : s.values) {
      if (v > 0) lo = std::min(lo, v), hi = std::max(hi, v);
    }
  }
  if (!(hi > 0)) lo = 1e-12, hi = 1e-11;
  int dlo = static_cast<int>(std::floor(std::log10(lo)));
  int dhi = static_cast<int>(std::ceil(std::log10(hi)));
  if (dhi <= dlo) dhi = dlo + 1;
  const double pw = W - L - R, ph = H - T - Bm;
  auto xpos = [&](std::size_t i) { return nblocks <= 1 ? L + pw / 2 : L + pw * static_cast<double>(i) / static_cast<double>(nblocks - 1); };
  auto ypos = [&](double v) {
    const double lv = v > 0 ? std::log10(v) : static_cast<double>(dlo);
    return T + ph * (1.0 - (lv - dlo) / static_cast<double>(dhi - dlo));
  };

  std::ostringstream o;
  o.precision(6);
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  if (!comment.empty()) o << "<!-- " << svg_escape(comment) << " -->\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << L + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << svg_escape(title)
    << "</text>\n";
  o << "<g font-size=\"11\" stroke=\"#ccc\">\n";
  for (int d = dlo; d <= dhi; ++d) {
    const double y = ypos(std::pow(10.0, d));
    o << "<line x1=\"" << L << "\" y1=\"" << y << "\" x2=\"" << L + pw << "\" y2=\"" << y << "\"/>";
    o << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" stroke=\"none\">1e" << d << "</text>\n";
  }
  for (std::size_t i = 0; i < nblocks; ++i) {
    o << "<text x=\"" << xpos(i) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\" stroke=\"none\">" << i + 1
      << "</text>\n";
  }
  o << "</g>\n";
  o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">block</text>\n";
  o << "<text transform=\"translate(18," << T + ph / 2
    << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">normalized error (log)</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = kColors[s % std::size(kColors)];
    const auto& vals = series[s].values;
    o << "<g class=\"series\" data-label=\"" << svg_escape(series[s].label) << "\">\n";
    if (vals.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < vals.size(); ++i) o << (i ? " " : "") << xpos(i) << ',' << ypos(vals[i]);
      o << "\"/>\n";
    }
    for (std::size_t i = 0; i < vals.size(); ++i)
      o << "<circle cx=\"" << xpos(i) << "\" cy=\"" << ypos(vals[i]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    o << "</g>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(s);
    o << "<g class=\"legend\"><line x1=\"" << L + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 32 << "\" y2=\""
      << ly << "\" stroke=\"" << col << "\" stroke-width=\"2\"/><text x=\"" << L + pw + 38 << "\" y=\"" << ly + 4
      << "\" font-size=\"11\">" << svg_escape(series[s].label) << "</text></g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline void emit_plot(const std::vector<ErrorTrace>& traces, const std::string& path, const std::string& title = "per-block error",
                      const std::string& comment = {}) {
  write_text_file(path, render_plot_svg(mean_series(traces), title, comment));
}

}  // namespace srlb
