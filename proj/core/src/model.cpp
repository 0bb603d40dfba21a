// SPDX-License-Identifier: Apache-2.0
#include "peftlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace peftlab {

namespace {

template <typename T>
Matrix<T> submatrix(const Matrix<T>& m, std::size_t r0, std::size_t r1, std::size_t c0,
                    std::size_t c1) {
  Matrix<T> out(r1 - r0, c1 - c0);
  for (std::size_t i = r0; i < r1; ++i)
    std::memcpy(out.data() + (i - r0) * out.cols(), m.data() + i * m.cols() + c0,
                out.cols() * sizeof(T));
  return out;
}

template <typename T>
void paste(Matrix<T>& dst, const Matrix<T>& src, std::size_t r0, std::size_t c0) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    std::memcpy(dst.data() + (r0 + i) * dst.cols() + c0, src.data() + i * src.cols(),
                src.cols() * sizeof(T));
}

// Column slice written directly in transposed layout, so attention can form
// K^T without materializing the intermediate slice.
template <typename T>
Matrix<T> transposed_submatrix(const Matrix<T>& m, std::size_t r0, std::size_t r1, std::size_t c0,
                               std::size_t c1) {
  Matrix<T> out(c1 - c0, r1 - r0);
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = c0; j < c1; ++j) out(j - c0, i - r0) = m(i, j);
  return out;
}

template <typename T>
const LoRAParams<T>* lora_for(const AdapterSet<T>* adapter, std::size_t layer, LoraTarget target) {
  if (!adapter || adapter->method != AdapterMethod::lora) return nullptr;
  const auto& targets = adapter->hyper.targets;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] == target) return &adapter->lora[layer][i];
  return nullptr;
}

template <typename T>
Matrix<T> project(const Matrix<T>& x, const Matrix<T>& w, const LoRAParams<T>* lora) {
  return lora ? lora_forward(x, w, *lora) : matmul(x, w);
}

}  // namespace

template <typename T>
Matrix<T> rmsnorm_rows(const Matrix<T>& x, const Matrix<T>& weight) {
  if (weight.rows() != 1 || weight.cols() != x.cols())
    throw DimensionError("rmsnorm: weight must be 1 x cols");
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T ss = T(0);
    for (std::size_t j = 0; j < x.cols(); ++j) ss += x(i, j) * x(i, j);
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(x.cols()) + static_cast<T>(kRmsNormEps));
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv * weight.data()[j];
  }
  return out;
}

template <typename T>
void rope_rotate_inplace(Matrix<T>& x, std::uint32_t n_heads, std::size_t start_pos) {
  const std::size_t d = x.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("rope: width not divisible by head count");
  const std::size_t hd = d / n_heads;
  if (hd % 2 != 0) throw DimensionError("rope: head_dim must be even");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double pos = static_cast<double>(start_pos + i);
    T* row = x.data() + i * d;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* head = row + h * hd;
      for (std::size_t j = 0; j * 2 < hd; ++j) {
        const double theta = pos * std::pow(10000.0, -2.0 * static_cast<double>(j) /
                                                         static_cast<double>(hd));
        const T c = static_cast<T>(std::cos(theta));
        const T s = static_cast<T>(std::sin(theta));
        const T x0 = head[2 * j];
        const T x1 = head[2 * j + 1];
        head[2 * j] = x0 * c - x1 * s;
        head[2 * j + 1] = x0 * s + x1 * c;
      }
    }
  }
}

template <typename T>
Matrix<T> attention_forward(Matrix<T> x, const LayerWeights<T>& lw, Session<T>& session,
                            std::size_t layer) {
  const ModelConfig& cfg = session.config();
  const std::size_t rows = x.rows();
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  const std::size_t start = session.length();
  const std::size_t total = start + rows;
  const AdapterSet<T>* adapter = session.adapter();

  Matrix<T> q = project(x, lw.w_q, lora_for(adapter, layer, LoraTarget::w_q));
  {
    Matrix<T> k = project(x, lw.w_k, lora_for(adapter, layer, LoraTarget::w_k));
    Matrix<T> v = project(x, lw.w_v, lora_for(adapter, layer, LoraTarget::w_v));
    x = Matrix<T>();

    if (session.has_vectors()) {
      const AdjustingVectors<T>& av = session.vectors(layer);
      colwise_scale_inplace(q, av.l_q);
      colwise_scale_inplace(v, av.l_v);
    } else if (adapter && adapter->method == AdapterMethod::ia3) {
      colwise_scale_inplace(k, adapter->ia3[layer].l_k);
      colwise_scale_inplace(v, adapter->ia3[layer].l_v);
    }

    if (cfg.positional == Positional::rope) {
      rope_rotate_inplace(q, cfg.n_heads, start);
      rope_rotate_inplace(k, cfg.n_heads, start);
    }

    LayerCache<T>& cache = session.cache(layer);
    paste(cache.k, k, start, 0);
    paste(cache.v, v, start, 0);
  }

  const LayerCache<T>& cache = session.cache(layer);
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  Matrix<T> concat(rows, d);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Matrix<T> qh = submatrix(q, 0, rows, h * hd, (h + 1) * hd);
    Matrix<T> kh_t = transposed_submatrix(cache.k, 0, total, h * hd, (h + 1) * hd);
    Matrix<T> scores = matmul(qh, kh_t);
    kh_t = Matrix<T>();
    for (std::size_t i = 0; i < rows; ++i) {
      T* srow = scores.data() + i * total;
      const std::size_t visible = start + i + 1;
      for (std::size_t j = 0; j < visible; ++j) srow[j] *= inv_scale;
      for (std::size_t j = visible; j < total; ++j) srow[j] = neg_inf;
    }
    softmax_rows_inplace(scores);
    Matrix<T> vh = submatrix(cache.v, 0, total, h * hd, (h + 1) * hd);
    Matrix<T> out_h = matmul(scores, vh);
    paste(concat, out_h, 0, h * hd);
  }
  q = Matrix<T>();
  return project(concat, lw.w_o, lora_for(adapter, layer, LoraTarget::w_o));
}

template <typename T>
Matrix<T> ffn_forward(Matrix<T> x, const LayerWeights<T>& lw, Session<T>& session,
                      std::size_t layer) {
  const ModelConfig& cfg = session.config();
  const AdapterSet<T>* adapter = session.adapter();
  Matrix<T> gate = matmul(x, lw.w_gate);
  for (std::size_t i = 0; i < gate.size(); ++i)
    gate.data()[i] = apply_activation(cfg.ffn_activation, gate.data()[i]);
  {
    Matrix<T> up = matmul(x, lw.w_up);
    x = Matrix<T>();
    if (session.has_vectors()) colwise_scale_inplace(up, session.vectors(layer).l_u);
    hadamard_inplace(gate, up);
  }
  if (adapter && adapter->method == AdapterMethod::ia3)
    colwise_scale_inplace(gate, adapter->ia3[layer].l_ff);
  return matmul(gate, lw.w_down);
}

template <typename T>
Session<T>::Session(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter,
                    std::size_t capacity)
    : weights_(&weights), adapter_(adapter), capacity_(capacity) {
  const ModelConfig& cfg = weights.config;
  cfg.validate();
  if (capacity == 0) throw ValidationError("session capacity must be positive");
  if (capacity > cfg.max_seq_len)
    throw CapacityError("session capacity " + std::to_string(capacity) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (adapter_ && adapter_->method != AdapterMethod::none &&
      !(adapter_->model_config == cfg))
    throw ValidationError("adapter was built for a different model configuration");
  caches_.reserve(cfg.n_layers);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    caches_.push_back({Matrix<T>(capacity, cfg.d_model), Matrix<T>(capacity, cfg.d_model)});
  vg_invocations_ = std::make_shared<std::uint64_t>(0);
}

template <typename T>
Matrix<T> Session<T>::embed(std::span<const TokenId> tokens, std::size_t start_pos) const {
  const ModelConfig& cfg = weights_->config;
  Matrix<T> x(tokens.size(), cfg.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t < 0 || static_cast<std::uint32_t>(t) >= cfg.vocab_size)
      throw ValidationError("token id " + std::to_string(t) + " outside vocabulary");
    std::memcpy(x.data() + i * cfg.d_model,
                weights_->token_embedding.data() + static_cast<std::size_t>(t) * cfg.d_model,
                cfg.d_model * sizeof(T));
  }
  if (cfg.positional == Positional::sinusoidal) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const double pos = static_cast<double>(start_pos + i);
      T* row = x.data() + i * cfg.d_model;
      for (std::size_t j = 0; j * 2 < cfg.d_model; ++j) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) /
                                                  static_cast<double>(cfg.d_model));
        row[2 * j] += static_cast<T>(std::sin(pos * freq));
        if (2 * j + 1 < cfg.d_model) row[2 * j + 1] += static_cast<T>(std::cos(pos * freq));
      }
    }
  }
  return x;
}

template <typename T>
Matrix<T> Session<T>::forward_rows(std::span<const TokenId> tokens, std::size_t vg_prompt_len,
                                   bool all_positions) {
  const ModelConfig& cfg = weights_->config;
  if (tokens.empty()) throw ValidationError("forward: empty token span");
  if (length_ + tokens.size() > capacity_)
    throw CapacityError("forward: session capacity exhausted");

  const bool make_vectors =
      !prefilled_ && adapter_ && adapter_->method == AdapterMethod::para;
  if (make_vectors) {
    para_vectors_ = std::make_shared<std::vector<AdjustingVectors<T>>>();
    para_vectors_->resize(cfg.n_layers);
  }

  Matrix<T> x = embed(tokens, length_);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights<T>& lw = weights_->layers[l];
    if (make_vectors) {
      const Matrix<T> pooled_input = submatrix(x, vg_prompt_len - 1, vg_prompt_len, 0, x.cols());
      (*para_vectors_)[l] = generate_vectors(adapter_->vg[l], pooled_input);
      bump_vg_invocations();
    }
    Matrix<T> a = attention_forward(rmsnorm_rows(x, lw.attn_norm), lw, *this, l);
    add_inplace(x, a);
    a = Matrix<T>();
    Matrix<T> f = ffn_forward(rmsnorm_rows(x, lw.ffn_norm), lw, *this, l);
    add_inplace(x, f);
  }
  length_ += tokens.size();
  prefilled_ = true;

  Matrix<T> h = rmsnorm_rows(x, weights_->final_norm);
  Matrix<T> logits = all_positions
                         ? matmul(h, weights_->lm_head)
                         : matmul(submatrix(h, h.rows() - 1, h.rows(), 0, h.cols()),
                                  weights_->lm_head);
  if (!all_finite(logits)) throw NumericalError("forward produced non-finite logits");
  return logits;
}

template <typename T>
Matrix<T> Session<T>::prefill(std::span<const TokenId> prompt) {
  return prefill(prompt, prompt.size());
}

template <typename T>
Matrix<T> Session<T>::prefill(std::span<const TokenId> prompt, std::size_t vg_prompt_len) {
  if (prefilled_) throw ValidationError("session already prefilled");
  if (prompt.empty()) throw ValidationError("prefill: empty prompt");
  if (vg_prompt_len == 0 || vg_prompt_len > prompt.size())
    throw ValidationError("prefill: vg_prompt_len outside prompt");
  return forward_rows(prompt, vg_prompt_len, false);
}

template <typename T>
Matrix<T> Session<T>::prefill_all(std::span<const TokenId> prompt, std::size_t vg_prompt_len) {
  if (prefilled_) throw ValidationError("session already prefilled");
  if (prompt.empty()) throw ValidationError("prefill: empty prompt");
  if (vg_prompt_len == 0 || vg_prompt_len > prompt.size())
    throw ValidationError("prefill: vg_prompt_len outside prompt");
  return forward_rows(prompt, vg_prompt_len, true);
}

template <typename T>
Matrix<T> Session<T>::decode_step(TokenId token) {
  if (!prefilled_) throw ValidationError("decode_step before prefill");
  const TokenId t = token;
  return forward_rows({&t, 1}, 0, false);
}

template <typename T>
Session<T> Session<T>::clone() const {
  return *this;
}

namespace {

template <typename T>
std::size_t argmax_row(const Matrix<T>& logits) {
  const T* row = logits.data() + (logits.rows() - 1) * logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

template <typename T>
std::vector<T> log_softmax_last_row(const Matrix<T>& logits) {
  const T* row = logits.data() + (logits.rows() - 1) * logits.cols();
  const std::size_t n = logits.cols();
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
  const T lse = std::log(sum) + mx;
  std::vector<T> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = row[j] - lse;
  return out;
}

}  // namespace

template <typename T>
GenerateResult<T> generate(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter,
                           std::span<const TokenId> prompt, const GenerateOptions& opts) {
  if (opts.beam_size == 0) throw ValidationError("generate: beam_size must be positive");
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  GenerateResult<T> result;
  const std::size_t capacity = prompt.size() + opts.max_new_tokens;

  if (opts.beam_size == 1) {
    Session<T> s(weights, adapter, capacity);
    Matrix<T> logits = s.prefill(prompt);
    for (std::size_t step = 0; step < opts.max_new_tokens; ++step) {
      const auto next = static_cast<TokenId>(argmax_row(logits));
      result.tokens.push_back(next);
      if (step + 1 < opts.max_new_tokens) logits = s.decode_step(next);
    }
    result.vg_invocations = s.vg_invocations();
    return result;
  }

  struct Beam {
    Session<T> session;
    std::vector<TokenId> tokens;
    double score = 0.0;  // cumulative log-probability
    std::vector<T> next_logprobs;
  };
  struct Candidate {
    double score;
    std::size_t beam;
    TokenId token;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return a.beam < b.beam;
  };

  std::vector<Beam> beams;
  {
    Session<T> root(weights, adapter, capacity);
    Matrix<T> logits = root.prefill(prompt);
    Beam b{std::move(root), {}, 0.0, log_softmax_last_row(logits)};
    beams.push_back(std::move(b));
  }

  for (std::size_t step = 0; step < opts.max_new_tokens; ++step) {
    std::vector<Candidate> candidates;
    candidates.reserve(beams.size() * weights.config.vocab_size);
    for (std::size_t bi = 0; bi < beams.size(); ++bi)
      for (std::size_t t = 0; t < beams[bi].next_logprobs.size(); ++t)
        candidates.push_back({beams[bi].score + static_cast<double>(beams[bi].next_logprobs[t]),
                              bi, static_cast<TokenId>(t)});
    const std::size_t keep = std::min(opts.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + keep, candidates.end(), better);

    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      Beam nb{beams[cand.beam].session.clone(), beams[cand.beam].tokens, cand.score, {}};
      nb.tokens.push_back(cand.token);
      if (step + 1 < opts.max_new_tokens) {
        Matrix<T> logits = nb.session.decode_step(cand.token);
        nb.next_logprobs = log_softmax_last_row(logits);
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  std::size_t best = 0;
  double best_norm = -std::numeric_limits<double>::infinity();
  for (std::size_t bi = 0; bi < beams.size(); ++bi) {
    const double norm =
        beams[bi].score / static_cast<double>(std::max<std::size_t>(1, beams[bi].tokens.size()));
    if (norm > best_norm) {
      best_norm = norm;
      best = bi;
    }
  }
  result.tokens = beams[best].tokens;
  result.vg_invocations = beams[best].session.vg_invocations();
  return result;
}

template Matrix<float> rmsnorm_rows<float>(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> rmsnorm_rows<double>(const Matrix<double>&, const Matrix<double>&);
template void rope_rotate_inplace<float>(Matrix<float>&, std::uint32_t, std::size_t);
template void rope_rotate_inplace<double>(Matrix<double>&, std::uint32_t, std::size_t);
template Matrix<float> attention_forward<float>(Matrix<float>, const LayerWeights<float>&,
                                                Session<float>&, std::size_t);
template Matrix<double> attention_forward<double>(Matrix<double>, const LayerWeights<double>&,
                                                  Session<double>&, std::size_t);
template Matrix<float> ffn_forward<float>(Matrix<float>, const LayerWeights<float>&,
                                          Session<float>&, std::size_t);
template Matrix<double> ffn_forward<double>(Matrix<double>, const LayerWeights<double>&,
                                            Session<double>&, std::size_t);
template class Session<float>;
template class Session<double>;
template GenerateResult<float> generate<float>(const BackboneWeights<float>&,
                                               const AdapterSet<float>*,
                                               std::span<const TokenId>, const GenerateOptions&);
template GenerateResult<double> generate<double>(const BackboneWeights<double>&,
                                                 const AdapterSet<double>*,
                                                 std::span<const TokenId>, const GenerateOptions&);

}  // namespace peftlab
