#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "srlb/model.hpp"
#include "srlb/tokens.hpp"

namespace testsupport {

// Small config that keeps unit tests fast while exercising every code path.
inline srlb::ModelConfig tiny_config(std::size_t blocks = 2) {
  srlb::ModelConfig c;
  c.n_blocks = blocks;
  c.hidden = 16;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.vocab = 258;
  c.max_seq = 16;
  return c;
}

inline srlb::TokenMatrix random_tokens(std::size_t n, std::size_t t, std::uint64_t seed, std::uint32_t vocab = 256) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> d(0, vocab - 1);
  srlb::TokenMatrix m;
  m.rows = n;
  m.cols = t;
  for (std::size_t i = 0; i < n * t; ++i) m.ids.push_back(d(rng));
  return m;
}

inline srlb::Tensor random_tensor(srlb::Shape s, std::uint64_t seed, float sd = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, sd);
  srlb::Tensor t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Fresh empty directory under the system temp dir.
inline std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("srlb_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testsupport
