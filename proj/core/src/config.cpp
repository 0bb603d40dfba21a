// SPDX-License-Identifier: Apache-2.0
#include "peftlab/config.hpp"

#include <nlohmann/json.hpp>

namespace peftlab {

Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ValidationError("unknown activation: " + s);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
  }
  return "?";
}

Positional positional_from_string(const std::string& s) {
  if (s == "rope") return Positional::rope;
  if (s == "sinusoidal") return Positional::sinusoidal;
  throw ValidationError("unknown positional encoding: " + s);
}

std::string to_string(Positional p) {
  return p == Positional::rope ? "rope" : "sinusoidal";
}

std::string config_to_json(const ModelConfig& cfg) {
  nlohmann::json j{
      {"n_layers", cfg.n_layers},       {"d_model", cfg.d_model},
      {"d_ffn", cfg.d_ffn},             {"n_heads", cfg.n_heads},
      {"vocab_size", cfg.vocab_size},   {"max_seq_len", cfg.max_seq_len},
      {"ffn_activation", to_string(cfg.ffn_activation)},
      {"positional", to_string(cfg.positional)},
  };
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config parse error: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.n_layers = j.at("n_layers").get<std::uint32_t>();
    cfg.d_model = j.at("d_model").get<std::uint32_t>();
    cfg.d_ffn = j.at("d_ffn").get<std::uint32_t>();
    cfg.n_heads = j.at("n_heads").get<std::uint32_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<std::uint32_t>();
    if (j.contains("ffn_activation"))
      cfg.ffn_activation = activation_from_string(j.at("ffn_activation").get<std::string>());
    if (j.contains("positional"))
      cfg.positional = positional_from_string(j.at("positional").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config field error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace peftlab
