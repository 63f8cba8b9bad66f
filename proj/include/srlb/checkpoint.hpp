#pragma once

#include <string>

#include "json.hpp"
#include "srlb/container.hpp"
#include "srlb/model.hpp"

namespace srlb {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks}, {"hidden", c.hidden},   {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},   {"vocab", c.vocab},     {"max_seq", c.max_seq},
          {"eos_token_id", c.eos_token_id}, {"bos_token_id", c.bos_token_id}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.eos_token_id = j.at("eos_token_id").get<std::uint32_t>();
    c.bos_token_id = j.at("bos_token_id").get<std::uint32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw HeaderMismatchError(std::string("checkpoint: bad config in header: ") + e.what());
  }
  return c;
}

inline Container checkpoint_container(const Model& m, const std::string& config_hash = {}) {
  Container c;
  c.meta = {{"kind", "checkpoint"}, {"config", config_to_json(m.config)}};
  if (!config_hash.empty()) c.meta["config_hash"] = config_hash;
  for (auto& [name, t] : m.named_tensors()) c.entries.push_back(make_f32_entry(name, *t));
  return c;
}

inline Model model_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "checkpoint") throw HeaderMismatchError("checkpoint: container is not a checkpoint");
  Model m;
  m.config = config_from_json(c.meta.at("config"));
  try {
    m.config.validate();
  } catch (const ConfigError& e) {
    throw HeaderMismatchError(std::string("checkpoint: ") + e.what());
  }
  // Shapes come from a zero-initialized template built from the header config.
  const std::size_t h = m.config.hidden;
  m.tok_embed = Tensor::zeros({m.config.vocab, h});
  m.pos_embed = Tensor::zeros({m.config.max_seq, h});
  m.final_gain = Tensor::zeros({h});
  m.final_bias = Tensor::zeros({h});
  m.head = Tensor::zeros({h, m.config.vocab});
  m.blocks.assign(m.config.n_blocks, TransformerBlock::zeros(m.config));

  auto named = m.named_tensors();
  if (named.size() != c.entries.size()) {
    throw HeaderMismatchError("checkpoint: expected " + std::to_string(named.size()) + " tensors, header lists " +
                              std::to_string(c.entries.size()));
  }
  for (auto& [name, t] : named) {
    const ContainerEntry* e = c.find(name);
    if (!e) throw HeaderMismatchError("checkpoint: tensor '" + name + "' missing from header");
    if (e->shape != t->shape()) {
      throw HeaderMismatchError("checkpoint: tensor '" + name + "' has shape " + shape_str(e->shape) +
                                ", config implies " + shape_str(t->shape()));
    }
    *t = entry_to_tensor(*e);
  }
  return m;
}

inline void save_checkpoint(const Model& m, const std::string& path, const std::string& config_hash = {}) {
  save_container(path, checkpoint_container(m, config_hash));
}

inline Model load_checkpoint(const std::string& path) { return model_from_container(load_container(path)); }

}  // namespace srlb
