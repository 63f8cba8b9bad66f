// srlb: command-line front end.
//
//   srlb init_model  --out dense.srlb [--seed N]
//   srlb gen_calib   --model dense.srlb --count N --out calib.srtk [--held-out]
//   srlb prune       --model dense.srlb --calib calib.srtk --out prune_dir
//   srlb reconstruct --model dense.srlb --mask prune_dir/mask.srlb --calib calib.srtk [--test test.srtk] --out dir
//   srlb eval        --model m.srlb --data name=path [--data ...] --out dir
//   srlb experiment  [--out dir]
//
// Every subcommand accepts --config FILE and repeated --set key=value.
// Errors: one line on stderr, "error kind=<kind> msg=<message>", exit code 1
// (2 for usage errors).

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "srlb/commands.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const std::string& kind, const std::string& msg, int code = 1) {
  std::cerr << "error kind=" << kind << " msg=" << one_line(msg) << std::endl;
  return code;
}

std::pair<std::string, std::string> split_kv(const std::string& s, const char* what) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw srlb::ConfigError(std::string(what) + " expects key=value, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse reconstruction lab: prune and reconstruct toy transformers"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "run config file (key = value)");
    sub->add_option("--set", sets, "override a config key, key=value (repeatable)");
  };

  std::string out, model, calib, test, mask;
  std::size_t count = 0;
  bool held_out = false;
  std::vector<std::string> data;
  std::string seed;

  auto* init = app.add_subcommand("init_model", "create a seeded dense checkpoint");
  common(init);
  init->add_option("--out", out, "checkpoint path")->required();
  init->add_option("--seed", seed, "model seed (same as --set seed=N)");

  auto* gen = app.add_subcommand("gen_calib", "sample calibration tokens from the corpus or the model");
  common(gen);
  gen->add_option("--model", model, "dense checkpoint")->required();
  gen->add_option("--count", count, "number of sequences")->required();
  gen->add_option("--out", out, "token file path")->required();
  gen->add_flag("--held-out", held_out, "sample the held-out part of the corpus");
  gen->add_option("--seed", seed, "sampling seed");

  auto* prune = app.add_subcommand("prune", "compute a sparsity mask and a masked checkpoint");
  common(prune);
  prune->add_option("--model", model, "dense checkpoint")->required();
  prune->add_option("--calib", calib, "calibration token file")->required();
  prune->add_option("--out", out, "output directory")->required();

  auto* recon = app.add_subcommand("reconstruct", "reconstruct a pruned model and trace its errors");
  common(recon);
  recon->add_option("--model", model, "dense checkpoint")->required();
  recon->add_option("--mask", mask, "mask file")->required();
  recon->add_option("--calib", calib, "calibration token file")->required();
  recon->add_option("--test", test, "test token file");
  recon->add_option("--out", out, "output directory")->required();
  recon->add_option("--seed", seed, "reconstruction seed");

  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on token files");
  common(eval);
  eval->add_option("--model", model, "checkpoint")->required();
  eval->add_option("--data", data, "dataset as name=path (repeatable)")->required();
  eval->add_option("--out", out, "output directory")->required();

  auto* exp = app.add_subcommand("experiment", "run the full ablation grid");
  common(exp);
  exp->add_option("--out", out, "output root (same as --set out=DIR)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    srlb::ConfigSources src;
    src.file = config_file;
    for (const auto& s : sets) src.overrides.push_back(split_kv(s, "--set"));
    if (!seed.empty()) src.overrides.emplace_back("seed", seed);
    if (*exp && !out.empty()) src.overrides.emplace_back("out", out);
    const srlb::RunConfig rc = srlb::resolve_config(src);

    if (*init) {
      srlb::cmd_init_model(rc, out);
      std::cout << "wrote " << out << " config_hash=" << srlb::config_hash(rc) << "\n";
    } else if (*gen) {
      const auto set = srlb::cmd_gen_calib(rc, model, count, out, held_out);
      std::cout << "wrote " << out << " (" << set.tokens.rows << "x" << set.tokens.cols << ", "
                << srlb::to_string(set.source) << ")\n";
    } else if (*prune) {
      srlb::cmd_prune(rc, model, calib, out);
      std::cout << "wrote " << out << "/mask.srlb and " << out << "/masked.srlb\n";
    } else if (*recon) {
      const auto res = srlb::cmd_reconstruct(rc, model, mask, calib, test, out);
      for (const auto& b : res.trace.blocks)
        std::cout << "block " << b.index + 1 << " e_calib=" << b.e_calib << " e_test=" << b.e_test << "\n";
      std::cout << "wrote " << out << "/sparse.srlb\n";
    } else if (*eval) {
      std::vector<srlb::NamedDataset> ds;
      for (const auto& d : data) {
        auto [name, path] = split_kv(d, "--data");
        ds.push_back({name, path});
      }
      const auto r = srlb::cmd_eval(rc, model, ds, out);
      for (const auto& [name, v] : r.perplexity.front().values) std::cout << name << " perplexity=" << v << "\n";
    } else if (*exp) {
      const auto res = srlb::cmd_experiment(rc, [](const std::string& m) { std::cerr << m << std::endl; });
      std::cout << "wrote " << res.run_dir << "\n";
    }
  } catch (const srlb::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
