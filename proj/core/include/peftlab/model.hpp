// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/config.hpp"
#include "peftlab/weights.hpp"

namespace peftlab {

using TokenId = std::int32_t;

inline constexpr double kRmsNormEps = 1e-5;

/// Row-wise RMS norm with a learned per-column gain. Shared by the inference
/// and training paths so both produce identical floating-point results.
template <typename T>
Matrix<T> rmsnorm_rows(const Matrix<T>& x, const Matrix<T>& weight);

/// Per-layer cached keys/values. Rows are appended post-RoPE for K and
/// post-adapter-scaling for V; storage is preallocated at session creation so
/// decode steps never reallocate.
template <typename T>
struct LayerCache {
  Matrix<T> k;  // capacity x d_model
  Matrix<T> v;  // capacity x d_model
};

template <typename T>
class Session;

/// Rotates query/key rows in place with rotary position embeddings.
/// Adjacent pairs (2j, 2j+1) inside each head are rotated by
/// pos * 10000^(-2j/head_dim); `start_pos` is the absolute position of row 0.
template <typename T>
void rope_rotate_inplace(Matrix<T>& x, std::uint32_t n_heads, std::size_t start_pos);

/// Causal multi-head attention over `x` (already normed, consumed). Appends
/// this call's K/V rows to the cache, runs Q/V through the session's adapter
/// before use, scales scores by 1/sqrt(head_dim), and projects by W_O.
template <typename T>
Matrix<T> attention_forward(Matrix<T> x, const LayerWeights<T>& lw, Session<T>& session,
                            std::size_t layer);

/// Gated FFN: (g(x.W_gate) ⊙ U') . W_down with the Up projection run through
/// the session's adapter. Consumes `x`.
template <typename T>
Matrix<T> ffn_forward(Matrix<T> x, const LayerWeights<T>& lw, Session<T>& session,
                      std::size_t layer);

/// One generation session: KV cache plus, for prompt-aware adapters, the
/// per-layer adjusting vectors frozen at prefill. Owned by one thread at a
/// time; the backbone and adapter it points at are immutable and shared.
template <typename T>
class Session {
 public:
  Session(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter, std::size_t capacity);

  const BackboneWeights<T>& weights() const { return *weights_; }
  const ModelConfig& config() const { return weights_->config; }
  const AdapterSet<T>* adapter() const { return adapter_; }

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }

  /// Forward over the whole prompt; populates the cache and, for prompt-aware
  /// adapters, invokes each layer's vector generator exactly once on the
  /// first `vg_prompt_len` rows of that layer's input hidden states
  /// (default: the whole prompt). Returns last-position logits.
  Matrix<T> prefill(std::span<const TokenId> prompt);
  Matrix<T> prefill(std::span<const TokenId> prompt, std::size_t vg_prompt_len);

  /// As prefill, but returns logits for every position (rows == prompt size).
  Matrix<T> prefill_all(std::span<const TokenId> prompt, std::size_t vg_prompt_len);

  /// Appends one token; adjusting vectors are read from the session, never
  /// recomputed. Returns next-token logits (1 x vocab).
  Matrix<T> decode_step(TokenId token);

  /// Vector-generator invocations made on behalf of this request, shared
  /// across beam clones.
  std::uint64_t vg_invocations() const { return *vg_invocations_; }

  /// Beam expansion: duplicates cache contents; the frozen adjusting vectors
  /// are immutable after prefill and shared between clones.
  Session clone() const;

  const AdjustingVectors<T>& vectors(std::size_t layer) const { return (*para_vectors_)[layer]; }
  bool has_vectors() const { return para_vectors_ && !para_vectors_->empty(); }

  // internal to the forward pass
  LayerCache<T>& cache(std::size_t layer) { return caches_[layer]; }
  void bump_vg_invocations() { ++*vg_invocations_; }

 private:
  Matrix<T> forward_rows(std::span<const TokenId> tokens, std::size_t vg_prompt_len,
                         bool all_positions);
  Matrix<T> embed(std::span<const TokenId> tokens, std::size_t start_pos) const;

  const BackboneWeights<T>* weights_;
  const AdapterSet<T>* adapter_;  // nullptr or method none => frozen backbone only
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  bool prefilled_ = false;
  std::vector<LayerCache<T>> caches_;
  std::shared_ptr<std::vector<AdjustingVectors<T>>> para_vectors_;
  std::shared_ptr<std::uint64_t> vg_invocations_;
};

struct GenerateOptions {
  std::size_t max_new_tokens = 32;
  std::size_t beam_size = 1;
};

template <typename T>
struct GenerateResult {
  std::vector<TokenId> tokens;
  std::uint64_t vg_invocations = 0;
};

/// Greedy (beam_size 1) or beam-search generation. Beam search ranks by
/// length-normalized log-probability; ties break toward the lower token id,
/// then the lower beam index. Beam expansion copies the KV cache.
template <typename T>
GenerateResult<T> generate(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter,
                           std::span<const TokenId> prompt, const GenerateOptions& opts);

}  // namespace peftlab
