// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/clock.hpp"
#include "peftlab/model.hpp"
#include "peftlab/weights.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Multi-tenant registry
// ---------------------------------------------------------------------------

/// One shared frozen backbone, one adapter set per tenant. Registration is
/// exclusive; resolution is concurrent. Sessions produced by a factory are
/// independent per request.
template <typename T>
class TenantRegistry {
 public:
  explicit TenantRegistry(const BackboneWeights<T>& weights) : weights_(&weights) {}

  class Factory {
   public:
    Session<T> make(std::size_t capacity) const {
      return Session<T>(*weights_, adapter_.get(), capacity);
    }
    const AdapterSet<T>* adapter() const { return adapter_.get(); }
    const BackboneWeights<T>& weights() const { return *weights_; }

   private:
    friend class TenantRegistry;
    Factory(const BackboneWeights<T>* w, std::shared_ptr<const AdapterSet<T>> a)
        : weights_(w), adapter_(std::move(a)) {}
    const BackboneWeights<T>* weights_;
    std::shared_ptr<const AdapterSet<T>> adapter_;
  };

  void register_tenant(const std::string& id, AdapterSet<T> adapter) {
    if (adapter.method != AdapterMethod::none && !(adapter.model_config == weights_->config))
      throw TenantError("tenant " + id + ": adapter dimensions do not match the backbone");
    std::unique_lock lock(mu_);
    if (tenants_.count(id)) throw TenantError("tenant " + id + " already registered");
    tenants_.emplace(id, std::make_shared<const AdapterSet<T>>(std::move(adapter)));
  }

  Factory resolve(const std::string& id) const {
    std::shared_lock lock(mu_);
    auto it = tenants_.find(id);
    if (it == tenants_.end()) throw TenantError("unknown tenant " + id);
    return Factory(weights_, it->second);
  }

  bool has(const std::string& id) const {
    std::shared_lock lock(mu_);
    return tenants_.count(id) > 0;
  }

  std::vector<std::string> tenant_ids() const {
    std::shared_lock lock(mu_);
    std::vector<std::string> ids;
    ids.reserve(tenants_.size());
    for (const auto& [id, a] : tenants_) ids.push_back(id);
    return ids;
  }

  const BackboneWeights<T>& weights() const { return *weights_; }

 private:
  const BackboneWeights<T>* weights_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<const AdapterSet<T>>> tenants_;
};

// ---------------------------------------------------------------------------
// Latency / memory benchmark
// ---------------------------------------------------------------------------

struct BenchSpec {
  std::uint32_t prompt_length = 274;
  std::uint32_t max_new_tokens = 32;
  std::vector<std::uint32_t> beam_sizes = {1, 3};
  std::uint32_t repetitions = 100;
  std::uint32_t warmup_runs = 5;
  std::vector<std::string> tenants;  // registry ids to benchmark
  std::uint64_t seed = 0;

  void validate(const ModelConfig& cfg) const;
};

struct BenchCell {
  std::string tenant;
  AdapterMethod method = AdapterMethod::none;
  std::uint32_t beam = 1;
  double tps_mean = 0.0;
  double tps_median = 0.0;
  double tps_stdev = 0.0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t vg_invocations = 0;
  std::uint32_t samples = 0;
  std::vector<TokenId> tokens;  // generated ids, identical across repetitions
};

struct BenchReport {
  std::vector<BenchCell> cells;
  BenchSpec spec;
  ModelConfig model;
  std::uint64_t weights_hash = 0;
  std::string precision;

  const BenchCell& cell(const std::string& tenant, std::uint32_t beam) const;
};

/// Runs every (tenant, beam) combination on one fixed seeded prompt. Warmup
/// runs are discarded; each measured repetition times a full generate call
/// (prefill + decodes) and must reproduce the untimed reference tokens.
/// Peak allocation is read from AllocCounter around the measured section.
template <typename T>
BenchReport run_bench(const TenantRegistry<T>& registry, const BenchSpec& spec, Clock& clock);

std::string bench_report_to_json(const BenchReport& report);
std::string bench_report_to_csv(const BenchReport& report);

// ---------------------------------------------------------------------------
// Decode-cost model
// ---------------------------------------------------------------------------

/// Closed-form multiply counts for one decode step (weight matrices only;
/// attention-context terms are excluded since they are method-independent).
struct FlopModel {
  std::uint64_t base = 0;      // backbone multiplies per token
  std::uint64_t overhead = 0;  // adapter multiplies per token
  std::uint64_t total() const { return base + overhead; }
};

/// PARA and (IA)3 cost 2*d_model + d_ffn extra multiplies per layer per token;
/// un-merged LoRA costs rank*(d_in + d_out) per targeted matrix per layer.
/// PARA's generator cost is amortized into prefill and contributes nothing
/// per decoded token.
FlopModel flop_model(const ModelConfig& cfg, AdapterMethod method, const AdapterHyper& hyper);

}  // namespace peftlab
