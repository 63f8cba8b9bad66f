// Draw a few calibration sequences from a random model and print them.
#include <cstdio>

#include "srlb/experiment.hpp"

int main(int argc, char** argv) {
  using namespace srlb;
  const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 0;
  RunConfig rc;
  const Model dense = init_random(rc.model, seed);
  GenerationParams p = generation_params(rc, 4);
  p.window = 0;  // keep whole sequences
  const CalibrationSet set = self_generate(dense, p, generation_filter(rc), seed);
  for (std::size_t r = 0; r < set.size(); ++r) {
    std::string text = detokenize(set.tokens.row(r));
    for (char& ch : text)
      if (static_cast<unsigned char>(ch) < 0x20 || static_cast<unsigned char>(ch) >= 0x7F) ch = '.';
    std::printf("[%zu] %s\n", r, text.c_str());
  }
}
