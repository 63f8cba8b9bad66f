// Prune a small random model to 50% and compare reconstruction methods
// block by block on held-out corpus windows.
#include <cstdio>

#include "srlb/experiment.hpp"

int main() {
  using namespace srlb;
  RunConfig rc;
  rc.recon_epochs = 4;
  const Model dense = init_random(rc.model, 0);
  const CorpusSplit corpus = load_split_corpus(rc);
  const auto calib = build_calibration(rc, dense, CalibSource::corpus, rc.calib_n, 0, &corpus);
  const auto test = build_test_set(rc, 0, &corpus);
  const SparsityMask mask = compute_mask(dense, pruner_spec(rc, "magnitude"), &calib.tokens);

  std::printf("%-9s", "method");
  for (std::size_t b = 0; b < rc.model.n_blocks; ++b) std::printf("   block %zu", b);
  std::printf("   test ppl\n");
  std::printf("%-9s", "dense");
  for (std::size_t b = 0; b < rc.model.n_blocks; ++b) std::printf("  %9s", "-");
  std::printf("  %9.3f\n", perplexity(dense, test.tokens));

  for (ReconMethod m : kAllReconMethods) {
    const auto res = reconstruct_with_mask(dense, mask, m, calib.tokens, test.tokens, recon_config(rc, 0));
    std::printf("%-9s", to_string(m));
    for (const auto& e : res.trace.blocks) std::printf("  %9.2e", e.e_test);
    std::printf("  %9.3f\n", perplexity(res.sparse, test.tokens));
  }
}
