// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "peftlab/errors.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

enum class Positional { rope, sinusoidal };

/// Architecture dimensions of the decoder-only backbone.
struct ModelConfig {
  std::uint32_t n_layers = 2;
  std::uint32_t d_model = 64;
  std::uint32_t d_ffn = 172;
  std::uint32_t n_heads = 4;
  std::uint32_t vocab_size = 64;
  std::uint32_t max_seq_len = 512;
  Activation ffn_activation = Activation::silu;
  Positional positional = Positional::rope;

  std::uint32_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || d_model == 0 || d_ffn == 0 || n_heads == 0 || vocab_size == 0 ||
        max_seq_len == 0)
      throw ValidationError("ModelConfig: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ValidationError("ModelConfig: d_model " + std::to_string(d_model) +
                            " not divisible by n_heads " + std::to_string(n_heads));
    if (positional == Positional::rope && head_dim() % 2 != 0)
      throw ValidationError("ModelConfig: rope requires even head_dim, got " +
                            std::to_string(head_dim()));
  }

  bool operator==(const ModelConfig&) const = default;
};

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);
Positional positional_from_string(const std::string& s);
std::string to_string(Positional p);

/// JSON round-trip for the config sidecar.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace peftlab
