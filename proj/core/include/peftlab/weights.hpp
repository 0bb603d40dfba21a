// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

/// One transformer layer's frozen parameters (pre-norm, RMS norm, gated FFN).
template <typename T>
struct LayerWeights {
  Matrix<T> w_q, w_k, w_v, w_o;   // d_model x d_model
  Matrix<T> w_gate, w_up;         // d_model x d_ffn
  Matrix<T> w_down;               // d_ffn x d_model
  Matrix<T> attn_norm, ffn_norm;  // 1 x d_model RMS-norm gains
};

/// Frozen transformer parameters. Immutable during adapter training and
/// shareable across concurrent sessions.
template <typename T>
struct BackboneWeights {
  ModelConfig config;
  Matrix<T> token_embedding;  // vocab x d_model
  std::vector<LayerWeights<T>> layers;
  Matrix<T> final_norm;  // 1 x d_model
  Matrix<T> lm_head;     // d_model x vocab

  /// Gaussian(0, 0.02) projections, unit norm gains.
  static BackboneWeights random_init(const ModelConfig& cfg, Rng& rng);

  /// Structural hash over config + all parameter bytes (fnv1a), for run metadata.
  std::uint64_t content_hash() const;
};

/// Binary weight container:
///   magic "PLWB" | u32 version | u8 dtype (0=f32,1=f64) | config block |
///   u32 tensor count | per tensor: u32 name length, name bytes,
///   u64 rows, u64 cols, little-endian scalar payload.
/// A JSON config sidecar is written next to the file (path + ".json").
/// Round-trips are bit-exact.
template <typename T>
void save_weights(const BackboneWeights<T>& w, const std::string& path);

template <typename T>
BackboneWeights<T> load_weights(const std::string& path);

}  // namespace peftlab
