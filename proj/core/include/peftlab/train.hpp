// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/autograd.hpp"
#include "peftlab/clock.hpp"
#include "peftlab/model.hpp"
#include "peftlab/weights.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

inline constexpr TokenId kBosToken = 0;
inline constexpr TokenId kSepToken = 1;

struct Example {
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
};

enum class TaskKind { copy, reverse, shift_k, keyed_lookup };

TaskKind task_from_string(const std::string& s);
std::string to_string(TaskKind k);

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::uint32_t vocab_size = 16;
  std::uint32_t min_content = 6;   // content tokens per prompt, inclusive
  std::uint32_t max_content = 10;  // inclusive
  std::uint32_t shift = 1;         // shift_k offset
  std::uint32_t key_slots = 4;     // keyed_lookup payload length
  std::uint32_t n_train = 256;
  std::uint32_t n_dev = 64;
  std::uint32_t n_test = 64;
  std::uint64_t seed = 0;
};

struct TaskDataset {
  std::string name;
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

/// Deterministic synthetic datasets with disjoint train/dev/test splits.
/// Prompts are framed [BOS, content..., SEP] (keyed_lookup appends its key
/// after SEP). copy: target == content; reverse: target == reversed content;
/// shift_k: target[i] == (content[i] + k) mod vocab, e.g. k=1 at vocab 10 maps
/// content [5,9,2] to [6,0,3]; keyed_lookup: the final prompt token selects
/// which payload slot the single-token target copies.
TaskDataset make_task(const TaskSpec& spec);

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double warmup_fraction = 0.06;  // linear warmup from 0, then linear decay to 0
  std::uint32_t batch_size = 8;
  std::uint32_t max_epochs = 10;
  std::uint32_t eval_every = 0;  // 0: auto, max(10, steps_per_epoch/5); full scale uses 200
  std::uint32_t patience = 10;   // consecutive non-improving evals before stopping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay_matrix = 0.01;  // params with more than one row
  double weight_decay_vector = 0.0;   // 1-row params: scaling vectors, biases, norms
  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalResult {
  double loss = 0.0;
  double token_accuracy = 0.0;
};

struct HistoryEntry {
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<HistoryEntry> history;
  std::uint64_t best_step = 0;
  double best_dev_loss = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
  bool early_stopped = false;
};

// ---------------------------------------------------------------------------
// Trainable parameters and optimizer
// ---------------------------------------------------------------------------

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params(AdapterSet<T>& set);
template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> named_trainable_params(BackboneWeights<T>& w);

/// Decoupled-weight-decay Adam over externally owned matrices. The learning
/// rate is supplied per step so schedules live outside the optimizer.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Matrix<T>*> params, const TrainConfig& cfg);

  /// grads[i] may be empty (treated as all-zero).
  void step(double lr, const std::vector<const Matrix<T>*>& grads);

  std::uint64_t steps_taken() const { return t_; }

 private:
  std::vector<Matrix<T>*> params_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  double beta1_, beta2_, eps_, wd_matrix_, wd_vector_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Tape construction
// ---------------------------------------------------------------------------

/// Maps parameter matrices to their tape nodes; everything else enters the
/// tape once as a constant.
template <typename T>
struct NodeCache {
  std::unordered_map<const Matrix<T>*, NodeId> bound;

  NodeId of(Tape<T>& tape, const Matrix<T>& m) {
    auto it = bound.find(&m);
    if (it != bound.end()) return it->second;
    const NodeId id = tape.constant(m);
    bound.emplace(&m, id);
    return id;
  }
};

/// Records the full teacher-forced forward over `tokens` (prompt followed by
/// target) and returns the all-position logits node. Reproduces the inference
/// path bit for bit, including the adapter hooks and the vector-generator
/// pooling over the first vg_prompt_len rows.
template <typename T>
NodeId build_sequence_forward(Tape<T>& tape, const BackboneWeights<T>& weights,
                              const AdapterSet<T>* adapter, NodeCache<T>& cache,
                              std::span<const TokenId> tokens, std::size_t vg_prompt_len);

/// Mean cross-entropy over the target positions of one sequence.
template <typename T>
NodeId sequence_loss(Tape<T>& tape, NodeId logits, std::size_t prompt_len,
                     std::span<const TokenId> target);

// ---------------------------------------------------------------------------
// Train / evaluate / verify
// ---------------------------------------------------------------------------

/// Trains the adapter in place (or, when `adapter` is null or method none,
/// the backbone itself: the pretraining mode). Linear warmup/decay schedule,
/// periodic dev evaluation, early stopping on patience, restores the best-dev
/// checkpoint before returning. Emits one JSON line per evaluation when
/// `history_jsonl` is given. Throws NumericalError if the loss diverges.
template <typename T>
TrainResult train(BackboneWeights<T>& weights, AdapterSet<T>* adapter, const TaskDataset& data,
                  const TrainConfig& cfg, Clock& clock, std::ostream* history_jsonl = nullptr);

/// Teacher-forced dev/test metrics through the inference path. Loss is the
/// mean over examples of each example's mean target cross-entropy; accuracy
/// counts argmax hits over all target tokens.
template <typename T>
EvalResult evaluate(const BackboneWeights<T>& weights, const AdapterSet<T>* adapter,
                    const std::vector<Example>& examples);

struct GradBlockReport {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradBlockReport> blocks;
  double tolerance = 1e-5;
  double worst = 0.0;
  bool pass = false;
};

/// Central-difference verification of every trainable coordinate against the
/// tape gradients: rel = |fd - analytic| / max(|fd|, |analytic|, 1e-6).
/// Run with T = double; eps defaults to 1e-4.
template <typename T>
GradCheckReport gradcheck(BackboneWeights<T>& weights, AdapterSet<T>* adapter,
                          const Example& example, double eps = 1e-4, double tolerance = 1e-5);

}  // namespace peftlab
