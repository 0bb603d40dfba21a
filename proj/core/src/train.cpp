// SPDX-License-Identifier: Apache-2.0
#include "peftlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

namespace peftlab {

TaskKind task_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "shift_k" || s == "shift") return TaskKind::shift_k;
  if (s == "keyed_lookup") return TaskKind::keyed_lookup;
  throw ValidationError("unknown task: " + s);
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::shift_k: return "shift";
    case TaskKind::keyed_lookup: return "keyed_lookup";
  }
  throw ValidationError("invalid task tag");
}

TaskDataset make_task(const TaskSpec& spec) {
  if (spec.vocab_size < 4) throw ValidationError("make_task: vocab_size must be at least 4");
  if (spec.min_content == 0 || spec.min_content > spec.max_content)
    throw ValidationError("make_task: bad content-length range");
  if (spec.n_train == 0 || spec.n_dev == 0 || spec.n_test == 0)
    throw ValidationError("make_task: all splits must be nonempty");
  const TokenId first_content = kSepToken + 1;
  std::uint32_t key_base = spec.vocab_size;
  if (spec.kind == TaskKind::keyed_lookup) {
    if (spec.key_slots < 2) throw ValidationError("make_task: keyed_lookup needs >= 2 slots");
    key_base = spec.vocab_size - spec.key_slots;
    if (key_base <= static_cast<std::uint32_t>(first_content) + 1)
      throw ValidationError("make_task: vocab too small for key range plus content");
  }

  Rng rng(spec.seed);
  const std::size_t total =
      static_cast<std::size_t>(spec.n_train) + spec.n_dev + spec.n_test;
  std::set<std::vector<TokenId>> seen;
  std::vector<Example> all;
  all.reserve(total);
  std::size_t attempts = 0;
  const std::size_t max_attempts = total * 1000 + 1000;
  while (all.size() < total) {
    if (++attempts > max_attempts)
      throw ValidationError("make_task: task space too small for the requested split sizes");
    Example ex;
    if (spec.kind == TaskKind::keyed_lookup) {
      std::vector<TokenId> payload(spec.key_slots);
      for (auto& t : payload)
        t = first_content + static_cast<TokenId>(rng.uniform_int(key_base - first_content));
      const auto slot = rng.uniform_int(spec.key_slots);
      ex.prompt.push_back(kBosToken);
      ex.prompt.insert(ex.prompt.end(), payload.begin(), payload.end());
      ex.prompt.push_back(kSepToken);
      ex.prompt.push_back(static_cast<TokenId>(key_base + slot));
      ex.target.push_back(payload[slot]);
    } else {
      const auto len = spec.min_content + rng.uniform_int(spec.max_content - spec.min_content + 1);
      std::vector<TokenId> content(len);
      for (auto& t : content)
        t = first_content +
            static_cast<TokenId>(rng.uniform_int(spec.vocab_size - first_content));
      ex.prompt.push_back(kBosToken);
      ex.prompt.insert(ex.prompt.end(), content.begin(), content.end());
      ex.prompt.push_back(kSepToken);
      switch (spec.kind) {
        case TaskKind::copy:
          ex.target = content;
          break;
        case TaskKind::reverse:
          ex.target.assign(content.rbegin(), content.rend());
          break;
        case TaskKind::shift_k:
          ex.target.resize(len);
          for (std::size_t i = 0; i < len; ++i)
            ex.target[i] = static_cast<TokenId>(
                (static_cast<std::uint32_t>(content[i]) + spec.shift) % spec.vocab_size);
          break;
        case TaskKind::keyed_lookup:
          break;
      }
    }
    if (seen.insert(ex.prompt).second) all.push_back(std::move(ex));
  }

  TaskDataset data;
  data.spec = spec;
  data.name = spec.kind == TaskKind::shift_k ? "shift_" + std::to_string(spec.shift)
                                             : to_string(spec.kind);
  data.train.assign(all.begin(), all.begin() + spec.n_train);
  data.dev.assign(all.begin() + spec.n_train, all.begin() + spec.n_train + spec.n_dev);
  data.test.assign(all.begin() + spec.n_train + spec.n_dev, all.end());
  return data;
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ValidationError("TrainConfig: lr must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
    throw ValidationError("TrainConfig: warmup_fraction must be in [0, 1)");
  if (batch_size == 0 || max_epochs == 0)
    throw ValidationError("TrainConfig: batch_size and max_epochs must be positive");
  if (patience == 0) throw ValidationError("TrainConfig: patience must be at least 1");
}

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params(AdapterSet<T>& set) {
  std::vector<std::pair<std::string, Matrix<T>*>> out;
  switch (set.method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para:
      for (std::size_t l = 0; l < set.vg.size(); ++l) {
        const std::string p = "layer." + std::to_string(l) + ".vg.";
        out.emplace_back(p + "w_down", &set.vg[l].w_down);
        out.emplace_back(p + "w_up", &set.vg[l].w_up);
        out.emplace_back(p + "b_up", &set.vg[l].b_up);
      }
      break;
    case AdapterMethod::lora:
      for (std::size_t l = 0; l < set.lora.size(); ++l)
        for (std::size_t t = 0; t < set.lora[l].size(); ++t) {
          const std::string p =
              "layer." + std::to_string(l) + ".lora." + to_string(set.hyper.targets[t]) + ".";
          out.emplace_back(p + "a", &set.lora[l][t].a);
          out.emplace_back(p + "b", &set.lora[l][t].b);
        }
      break;
    case AdapterMethod::ia3:
      for (std::size_t l = 0; l < set.ia3.size(); ++l) {
        const std::string p = "layer." + std::to_string(l) + ".ia3.";
        out.emplace_back(p + "l_k", &set.ia3[l].l_k);
        out.emplace_back(p + "l_v", &set.ia3[l].l_v);
        out.emplace_back(p + "l_ff", &set.ia3[l].l_ff);
      }
      break;
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params(BackboneWeights<T>& w) {
  std::vector<std::pair<std::string, Matrix<T>*>> out;
  out.emplace_back("token_embedding", &w.token_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    out.emplace_back(p + "w_q", &lw.w_q);
    out.emplace_back(p + "w_k", &lw.w_k);
    out.emplace_back(p + "w_v", &lw.w_v);
    out.emplace_back(p + "w_o", &lw.w_o);
    out.emplace_back(p + "w_gate", &lw.w_gate);
    out.emplace_back(p + "w_up", &lw.w_up);
    out.emplace_back(p + "w_down", &lw.w_down);
    out.emplace_back(p + "attn_norm", &lw.attn_norm);
    out.emplace_back(p + "ffn_norm", &lw.ffn_norm);
  }
  out.emplace_back("final_norm", &w.final_norm);
  out.emplace_back("lm_head", &w.lm_head);
  return out;
}

template <typename T>
AdamW<T>::AdamW(std::vector<Matrix<T>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      wd_matrix_(cfg.weight_decay_matrix),
      wd_vector_(cfg.weight_decay_vector) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Matrix<T>* p : params_) {
    m_.emplace_back(p->rows(), p->cols());
    v_.emplace_back(p->rows(), p->cols());
  }
}

template <typename T>
void AdamW<T>::step(double lr, const std::vector<const Matrix<T>*>& grads) {
  if (grads.size() != params_.size())
    throw DimensionError("AdamW: gradient list does not match parameter list");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix<T>& p = *params_[i];
    const Matrix<T>* g = grads[i];
    if (g && !g->empty() && !g->same_shape(p))
      throw DimensionError("AdamW: gradient shape mismatch");
    const double wd = p.rows() == 1 ? wd_vector_ : wd_matrix_;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = (g && !g->empty()) ? static_cast<double>(g->data()[k]) : 0.0;
      const double mk = beta1_ * static_cast<double>(m_[i].data()[k]) + (1.0 - beta1_) * gk;
      const double vk = beta2_ * static_cast<double>(v_[i].data()[k]) + (1.0 - beta2_) * gk * gk;
      m_[i].data()[k] = static_cast<T>(mk);
      v_[i].data()[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      const double pk = static_cast<double>(p.data()[k]);
      p.data()[k] = static_cast<T>(pk - lr * (mhat / (std::sqrt(vhat) + eps_) + wd * pk));
    }
  }
}

namespace {

template <typename T>
Matrix<T> sinusoidal_pe(const ModelConfig& cfg, std::size_t rows) {
  Matrix<T> pe(rows, cfg.d_model);
  for (std::size_t i = 0; i < rows; ++i) {
    const double pos = static_cast<double>(i);
    T* row = pe.data() + i * cfg.d_model;
    for (std::size_t j = 0; j * 2 < cfg.d_model; ++j) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(cfg.d_model));
      row[2 * j] = static_cast<T>(std::sin(pos * freq));
      if (2 * j + 1 < cfg.d_model) row[2 * j + 1] = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

template <typename T>
NodeId tape_project(Tape<T>& tape, NodeCache<T>& cache, NodeId input, const Matrix<T>& w,
                    const LoRAParams<T>* lp) {
  NodeId base = tape.matmul(input, cache.of(tape, w));
  if (!lp) return base;
  NodeId delta = tape.matmul(tape.matmul(input, cache.of(tape, lp->a)), cache.of(tape, lp->b));
  return tape.add(base, tape.scale_const(delta, lp->scaling));
}

template <typename T>
const LoRAParams<T>* tape_lora_for(const AdapterSet<T>* adapter, std::size_t layer,
                                   LoraTarget target) {
  if (!adapter || adapter->method != AdapterMethod::lora) return nullptr;
  for (std::size_t i = 0; i < adapter->hyper.targets.size(); ++i)
    if (adapter->hyper.targets[i] == target) return &adapter->lora[layer][i];
  return nullptr;
}

}  // namespace

template <typename T>
NodeId build_sequence_forward(Tape<T>& tape, const BackboneWeights<T>& weights,
                              const AdapterSet<T>* adapter, NodeCache<T>& cache,
                              std::span<const TokenId> tokens, std::size_t vg_prompt_len) {
  const ModelConfig& cfg = weights.config;
  if (tokens.empty()) throw ValidationError("forward: empty token span");
  if (tokens.size() > cfg.max_seq_len) throw CapacityError("forward: sequence exceeds max_seq_len");
  const bool para = adapter && adapter->method == AdapterMethod::para;
  const bool ia3 = adapter && adapter->method == AdapterMethod::ia3;
  if (para && (vg_prompt_len == 0 || vg_prompt_len > tokens.size()))
    throw ValidationError("forward: vg_prompt_len outside sequence");

  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  NodeId x = tape.embedding(cache.of(tape, weights.token_embedding),
                            std::vector<TokenId>(tokens.begin(), tokens.end()));
  if (cfg.positional == Positional::sinusoidal)
    x = tape.add(x, tape.constant(sinusoidal_pe<T>(cfg, tokens.size())));

  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights<T>& lw = weights.layers[l];
    NodeId l_q = 0, l_v = 0, l_u = 0;
    if (para) {
      const VectorGeneratorParams<T>& vg = adapter->vg[l];
      NodeId pooled = tape.slice_rows(x, vg_prompt_len - 1, vg_prompt_len);
      NodeId z = tape.activation(vg.activation,
                                 tape.matmul(pooled, cache.of(tape, vg.w_down)));
      NodeId lvec = tape.add(tape.matmul(z, cache.of(tape, vg.w_up)), cache.of(tape, vg.b_up));
      l_q = tape.slice_cols(lvec, 0, d);
      l_v = tape.slice_cols(lvec, d, 2 * d);
      l_u = tape.slice_cols(lvec, 2 * d, 2 * d + cfg.d_ffn);
    }

    NodeId h = tape.rmsnorm(x, cache.of(tape, lw.attn_norm));
    NodeId q = tape_project(tape, cache, h, lw.w_q, tape_lora_for(adapter, l, LoraTarget::w_q));
    NodeId k = tape_project(tape, cache, h, lw.w_k, tape_lora_for(adapter, l, LoraTarget::w_k));
    NodeId v = tape_project(tape, cache, h, lw.w_v, tape_lora_for(adapter, l, LoraTarget::w_v));
    if (para) {
      q = tape.colwise_scale(q, l_q);
      v = tape.colwise_scale(v, l_v);
    } else if (ia3) {
      k = tape.colwise_scale(k, cache.of(tape, adapter->ia3[l].l_k));
      v = tape.colwise_scale(v, cache.of(tape, adapter->ia3[l].l_v));
    }
    if (cfg.positional == Positional::rope) {
      q = tape.rope(q, cfg.n_heads, 0);
      k = tape.rope(k, cfg.n_heads, 0);
    }

    std::vector<NodeId> heads;
    heads.reserve(cfg.n_heads);
    for (std::uint32_t hh = 0; hh < cfg.n_heads; ++hh) {
      NodeId qh = tape.slice_cols(q, hh * hd, (hh + 1) * hd);
      NodeId kh = tape.slice_cols(k, hh * hd, (hh + 1) * hd);
      NodeId vh = tape.slice_cols(v, hh * hd, (hh + 1) * hd);
      NodeId probs = tape.causal_softmax(tape.matmul(qh, tape.transpose(kh)), inv_scale);
      heads.push_back(tape.matmul(probs, vh));
    }
    NodeId attn = tape_project(tape, cache, tape.concat_cols(heads), lw.w_o,
                               tape_lora_for(adapter, l, LoraTarget::w_o));
    x = tape.add(x, attn);

    NodeId h2 = tape.rmsnorm(x, cache.of(tape, lw.ffn_norm));
    NodeId gate = tape.activation(cfg.ffn_activation, tape.matmul(h2, cache.of(tape, lw.w_gate)));
    NodeId up = tape.matmul(h2, cache.of(tape, lw.w_up));
    if (para) up = tape.colwise_scale(up, l_u);
    NodeId prod = tape.hadamard(gate, up);
    if (ia3) prod = tape.colwise_scale(prod, cache.of(tape, adapter->ia3[l].l_ff));
    x = tape.add(x, tape.matmul(prod, cache.of(tape, lw.w_down)));
  }

  NodeId hf = tape.rmsnorm(x, cache.of(tape, weights.final_norm));
  return tape.matmul(hf, cache.of(tape, weights.lm_head));
}

template <typename T>
NodeId sequence_loss(Tape<T>& tape, NodeId logits, std::size_t prompt_len,
                     std::span<const TokenId> target) {
  if (target.empty()) throw ValidationError("loss: empty target");
  if (prompt_len == 0) throw ValidationError("loss: empty prompt");
  const std::size_t rows = tape.value(logits).rows();
  if (prompt_len + target.size() != rows)
    throw DimensionError("loss: logits rows must equal prompt plus target length");
  NodeId pred = tape.slice_rows(logits, prompt_len - 1, prompt_len - 1 + target.size());
  return tape.cross_entropy_mean(pred, std::vector<TokenId>(target.begin(), target.end()));
}

namespace {

double lr_at(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps,
             std::uint64_t warmup_steps) {
  if (warmup_steps > 0 && step <= warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::uint64_t decay_span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
  const std::uint64_t remaining = total_steps > step ? total_steps - step : 0;
  return cfg.lr * static_cast<double>(remaining) / static_cast<double>(decay_span);
}

}  // namespace

template <typename T>
TrainResult train(BackboneWeights<T>& weights, AdapterSet<T>* adapter, const TaskDataset& data,
                  const TrainConfig& cfg, Clock& clock, std::ostream* history_jsonl) {
  cfg.validate();
  if (data.train.empty() || data.dev.empty())
    throw ValidationError("train: train and dev splits must be nonempty");
  const bool adapter_mode = adapter && adapter->method != AdapterMethod::none;
  AdapterSet<T>* active = adapter_mode ? adapter : nullptr;
  auto named = adapter_mode ? named_trainable_params(*adapter) : named_trainable_params(weights);
  if (named.empty()) throw ValidationError("train: nothing to train");
  std::vector<Matrix<T>*> params;
  params.reserve(named.size());
  for (auto& [name, p] : named) params.push_back(p);

  AdamW<T> opt(params, cfg);
  const std::uint64_t steps_per_epoch =
      (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total_steps = steps_per_epoch * cfg.max_epochs;
  const std::uint64_t warmup_steps =
      static_cast<std::uint64_t>(cfg.warmup_fraction * static_cast<double>(total_steps));
  const std::uint64_t eval_every =
      cfg.eval_every > 0 ? cfg.eval_every : std::max<std::uint64_t>(10, steps_per_epoch / 5);

  TrainResult result;
  Rng rng(cfg.seed ^ 0x7261696e5f726e67ull);
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<Matrix<T>> best_values;
  bool have_best = false;
  std::uint32_t bad_evals = 0;
  double last_train_loss = 0.0;
  bool stop = false;

  auto run_eval = [&](std::uint64_t step, double lr, bool count_patience) {
    const EvalResult dev = evaluate(weights, static_cast<const AdapterSet<T>*>(active), data.dev);
    HistoryEntry entry{step, lr, last_train_loss, dev.loss, dev.token_accuracy,
                       clock.now_seconds()};
    result.history.push_back(entry);
    if (history_jsonl) {
      nlohmann::json j;
      j["step"] = entry.step;
      j["lr"] = entry.lr;
      j["train_loss"] = entry.train_loss;
      j["dev_loss"] = entry.dev_loss;
      j["dev_accuracy"] = entry.dev_accuracy;
      j["wall_seconds"] = entry.wall_seconds;
      (*history_jsonl) << j.dump() << "\n";
    }
    if (dev.loss < result.best_dev_loss) {
      result.best_dev_loss = dev.loss;
      result.best_step = step;
      best_values.clear();
      for (const Matrix<T>* p : params) best_values.push_back(*p);
      have_best = true;
      bad_evals = 0;
    } else if (count_patience && ++bad_evals >= cfg.patience) {
      result.early_stopped = true;
      stop = true;
    }
  };

  std::uint64_t step = 0;
  for (std::uint32_t epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);

      Tape<T> tape;
      NodeCache<T> cache;
      std::vector<NodeId> param_nodes;
      param_nodes.reserve(params.size());
      for (Matrix<T>* p : params) {
        const NodeId id = tape.param(*p);
        cache.bound.emplace(p, id);
        param_nodes.push_back(id);
      }
      std::vector<NodeId> losses;
      losses.reserve(end - start);
      for (std::size_t bi = start; bi < end; ++bi) {
        const Example& ex = data.train[order[bi]];
        std::vector<TokenId> full = ex.prompt;
        full.insert(full.end(), ex.target.begin(), ex.target.end());
        const NodeId logits =
            build_sequence_forward(tape, weights, active, cache, full, ex.prompt.size());
        losses.push_back(sequence_loss(tape, logits, ex.prompt.size(), ex.target));
      }
      const NodeId loss = tape.mean_of(losses);
      const double loss_value = static_cast<double>(tape.value(loss)(0, 0));
      if (!std::isfinite(loss_value))
        throw NumericalError("training diverged: non-finite loss at step " +
                             std::to_string(step + 1));
      tape.backward(loss);
      ++step;
      const double lr = lr_at(cfg, step, total_steps, warmup_steps);
      std::vector<const Matrix<T>*> grads;
      grads.reserve(param_nodes.size());
      for (const NodeId id : param_nodes) grads.push_back(&tape.grad(id));
      opt.step(lr, grads);
      last_train_loss = loss_value;

      if (step % eval_every == 0) run_eval(step, lr, true);
    }
  }
  result.steps = step;
  if (step > 0 && (result.history.empty() || result.history.back().step != step))
    run_eval(step, lr_at(cfg, step, total_steps, warmup_steps), false);

  if (have_best)
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = best_values[i];
  return result;
}

template <typename T>
EvalResult evaluate(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter,
                    const std::vector<Example>& examples) {
  if (examples.empty()) throw ValidationError("evaluate: empty example list");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const Example& ex : examples) {
    if (ex.target.empty()) throw ValidationError("evaluate: example with empty target");
    std::vector<TokenId> full = ex.prompt;
    full.insert(full.end(), ex.target.begin(), ex.target.end());
    Session<T> session(weights, adapter, full.size());
    const Matrix<T> logits = session.prefill_all(full, ex.prompt.size());
    double ex_loss = 0.0;
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      const std::size_t row = ex.prompt.size() - 1 + i;
      const T* z = logits.data() + row * logits.cols();
      double mx = static_cast<double>(z[0]);
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (static_cast<double>(z[j]) > static_cast<double>(z[best])) best = j;
        mx = std::max(mx, static_cast<double>(z[j]));
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < logits.cols(); ++j)
        sum += std::exp(static_cast<double>(z[j]) - mx);
      const auto tgt = static_cast<std::size_t>(ex.target[i]);
      ex_loss += std::log(sum) + mx - static_cast<double>(z[tgt]);
      if (best == tgt) ++correct;
      ++total;
    }
    loss_sum += ex_loss / static_cast<double>(ex.target.size());
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(examples.size());
  r.token_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  return r;
}

template <typename T>
GradCheckReport gradcheck(BackboneWeights<T>& weights, AdapterSet<T>* adapter,
                          const Example& example, double eps, double tolerance) {
  if (example.target.empty()) throw ValidationError("gradcheck: example needs a target");
  const bool adapter_mode = adapter && adapter->method != AdapterMethod::none;
  AdapterSet<T>* active = adapter_mode ? adapter : nullptr;
  auto named = adapter_mode ? named_trainable_params(*adapter) : named_trainable_params(weights);
  std::vector<TokenId> full = example.prompt;
  full.insert(full.end(), example.target.begin(), example.target.end());

  auto loss_value = [&]() {
    Tape<T> tape;
    NodeCache<T> cache;
    const NodeId logits =
        build_sequence_forward(tape, weights, active, cache, full, example.prompt.size());
    const NodeId loss = sequence_loss(tape, logits, example.prompt.size(), example.target);
    return static_cast<double>(tape.value(loss)(0, 0));
  };

  // analytic gradients at the unperturbed point
  std::vector<Matrix<T>> analytic;
  {
    Tape<T> tape;
    NodeCache<T> cache;
    std::vector<NodeId> param_nodes;
    for (auto& [name, p] : named) {
      const NodeId id = tape.param(*p);
      cache.bound.emplace(p, id);
      param_nodes.push_back(id);
    }
    const NodeId logits =
        build_sequence_forward(tape, weights, active, cache, full, example.prompt.size());
    const NodeId loss = sequence_loss(tape, logits, example.prompt.size(), example.target);
    tape.backward(loss);
    for (std::size_t i = 0; i < named.size(); ++i) {
      const Matrix<T>& g = tape.grad(param_nodes[i]);
      analytic.push_back(g.empty() ? Matrix<T>(named[i].second->rows(), named[i].second->cols())
                                   : g);
    }
  }

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t i = 0; i < named.size(); ++i) {
    GradBlockReport block;
    block.name = named[i].first;
    Matrix<T>& p = *named[i].second;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const T orig = p.data()[k];
      p.data()[k] = orig + static_cast<T>(eps);
      const double up = loss_value();
      p.data()[k] = orig - static_cast<T>(eps);
      const double down = loss_value();
      p.data()[k] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double an = static_cast<double>(analytic[i].data()[k]);
      const double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      block.max_rel_err = std::max(block.max_rel_err, rel);
    }
    report.worst = std::max(report.worst, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }
  report.pass = report.worst < tolerance;
  return report;
}

#define PEFTLAB_INSTANTIATE_TRAIN(T)                                                          \
  template std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params<T>(        \
      AdapterSet<T>&);                                                                        \
  template std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params<T>(        \
      BackboneWeights<T>&);                                                                   \
  template class AdamW<T>;                                                                    \
  template NodeId build_sequence_forward<T>(Tape<T>&, const BackboneWeights<T>&,              \
                                            const AdapterSet<T>*, NodeCache<T>&,              \
                                            std::span<const TokenId>, std::size_t);           \
  template NodeId sequence_loss<T>(Tape<T>&, NodeId, std::size_t, std::span<const TokenId>); \
  template TrainResult train<T>(BackboneWeights<T>&, AdapterSet<T>*, const TaskDataset&,      \
                                const TrainConfig&, Clock&, std::ostream*);                  \
  template EvalResult evaluate<T>(const BackboneWeights<T>&, const AdapterSet<T>*,            \
                                  const std::vector<Example>&);                               \
  template GradCheckReport gradcheck<T>(BackboneWeights<T>&, AdapterSet<T>*, const Example&,  \
                                        double, double);

PEFTLAB_INSTANTIATE_TRAIN(float)
PEFTLAB_INSTANTIATE_TRAIN(double)
#undef PEFTLAB_INSTANTIATE_TRAIN

}  // namespace peftlab
