// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

enum class AdapterMethod { none, para, lora, ia3 };

AdapterMethod adapter_method_from_string(const std::string& s);
std::string to_string(AdapterMethod m);

// ---------------------------------------------------------------------------
// Prompt-aware vector generator (one per layer)
// ---------------------------------------------------------------------------

/// Per-request scaling vectors emitted by a vector generator. l_q and l_v
/// scale the Query/Value projections columnwise, l_u the FFN Up projection.
template <typename T>
struct AdjustingVectors {
  Matrix<T> l_q;  // 1 x d_model
  Matrix<T> l_v;  // 1 x d_model
  Matrix<T> l_u;  // 1 x d_ffn
};

/// Bottleneck generator: pooled prompt state -> down-projection -> GELU ->
/// up-projection + bias, split into (l_q, l_v, l_u) in that pinned order.
template <typename T>
struct VectorGeneratorParams {
  Matrix<T> w_down;  // d_model x r
  Matrix<T> w_up;    // r x d_out, d_out = 2*d_model + d_ffn
  Matrix<T> b_up;    // 1 x d_out
  std::uint32_t r = 12;
  Activation activation = Activation::gelu;

  std::uint32_t d_out() const { return static_cast<std::uint32_t>(w_up.cols()); }

  bool operator==(const VectorGeneratorParams&) const = default;
};

/// Row of the final prompt token.
template <typename T>
Matrix<T> pooler(const Matrix<T>& prompt_hidden);

/// l = g(Pooler(h) . W_down) . W_up + b_up, split (l_q, l_v, l_u).
template <typename T>
AdjustingVectors<T> generate_vectors(const VectorGeneratorParams<T>& vg,
                                     const Matrix<T>& prompt_hidden);

/// Columnwise broadcast applications. K and Gate hidden states are never
/// scaled by this adapter.
template <typename T>
Matrix<T> apply_q(const Matrix<T>& l_q, const Matrix<T>& q) {
  return colwise_scale(q, l_q);
}
template <typename T>
Matrix<T> apply_v(const Matrix<T>& l_v, const Matrix<T>& v) {
  return colwise_scale(v, l_v);
}
template <typename T>
Matrix<T> apply_u(const Matrix<T>& l_u, const Matrix<T>& u) {
  return colwise_scale(u, l_u);
}

// ---------------------------------------------------------------------------
// LoRA
// ---------------------------------------------------------------------------

enum class LoraTarget : std::uint8_t { w_q = 0, w_k = 1, w_v = 2, w_o = 3 };

LoraTarget lora_target_from_string(const std::string& s);
std::string to_string(LoraTarget t);

/// Low-rank delta for one targeted matrix; B starts at zero so the initial
/// delta vanishes.
template <typename T>
struct LoRAParams {
  Matrix<T> a;  // d_in x rank
  Matrix<T> b;  // rank x d_out
  std::uint32_t rank = 16;
  T scaling = T(1);  // alpha / rank

  bool operator==(const LoRAParams&) const = default;
};

/// x.W + scaling*(x.A).B, always evaluated un-merged.
template <typename T>
Matrix<T> lora_forward(const Matrix<T>& x, const Matrix<T>& w, const LoRAParams<T>& lora);

// ---------------------------------------------------------------------------
// (IA)^3
// ---------------------------------------------------------------------------

/// Static learned scaling vectors, ones at init: l_k and l_v on the attention
/// Key/Value projections, l_ff on the gated FFN intermediate.
template <typename T>
struct IA3Params {
  Matrix<T> l_k;   // 1 x d_model
  Matrix<T> l_v;   // 1 x d_model
  Matrix<T> l_ff;  // 1 x d_ffn

  bool operator==(const IA3Params&) const = default;
};

// ---------------------------------------------------------------------------
// AdapterSet
// ---------------------------------------------------------------------------

struct AdapterHyper {
  std::uint32_t r = 12;            // vector-generator bottleneck
  std::uint32_t rank = 16;         // LoRA rank
  double alpha = 16.0;             // LoRA alpha
  std::vector<LoraTarget> targets = {LoraTarget::w_q, LoraTarget::w_v};

  bool operator==(const AdapterHyper&) const = default;
};

struct AdapterMeta {
  std::string tenant_id;
  std::uint64_t seed = 0;
  std::string run_id;

  bool operator==(const AdapterMeta&) const = default;
};

/// Tagged union over the supported methods, serializable per tenant.
/// Parameter blocks are immutable during inference and shareable.
template <typename T>
struct AdapterSet {
  AdapterMethod method = AdapterMethod::none;
  ModelConfig model_config;  // dims this set was built for
  AdapterHyper hyper;
  AdapterMeta meta;

  std::vector<VectorGeneratorParams<T>> vg;       // para: one per layer
  std::vector<std::vector<LoRAParams<T>>> lora;   // lora: per layer, per target
  std::vector<IA3Params<T>> ia3;                  // ia3: one per layer

  /// Freshly initialized set: identity behavior for every method.
  /// para: W_down ~ N(0, 0.02), W_up = 0, b_up = 1.
  /// lora: A ~ N(0, 0.02), B = 0. ia3: all ones.
  static AdapterSet init(AdapterMethod method, const ModelConfig& cfg, const AdapterHyper& hyper,
                         Rng& rng);

  bool operator==(const AdapterSet&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

struct ParamCount {
  std::uint64_t headline = 0;   // reported tunable parameters
  std::uint64_t with_bias = 0;  // headline + bias terms (para only differs)
};

/// Tunable-parameter count per method.
/// para headline = n_layers * (d_model*r + r*(2*d_model + d_ffn)); the b_up
/// bias is trained but reported separately in with_bias.
ParamCount count_params(const ModelConfig& cfg, AdapterMethod method, const AdapterHyper& hyper);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Adapter container:
///   magic "PLAD" | u32 version | u8 dtype | u8 method | config block |
///   hyper block (r, rank, alpha, targets) | metadata (tenant, seed, run id) |
///   per-layer parameter tensors. Split order of the generated vector is
///   recorded in the header as "qvu". Bit-exact round trip.
template <typename T>
std::vector<std::uint8_t> serialize_adapter(const AdapterSet<T>& set);

template <typename T>
AdapterSet<T> deserialize_adapter(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_adapter(const AdapterSet<T>& set, const std::string& path);

template <typename T>
AdapterSet<T> load_adapter(const std::string& path);

/// JSON sidecar content (method, dims, hyper, metadata, split order).
template <typename T>
std::string adapter_meta_json(const AdapterSet<T>& set);

}  // namespace peftlab
