// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks for the hot paths: raw matmul, prefill, single-token
// decode, and end-to-end generation per adapter method. Run with
// --benchmark_filter=<regex> to narrow.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/model.hpp"
#include "peftlab/tensor.hpp"
#include "peftlab/weights.hpp"

using namespace peftlab;

namespace {

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 256;
  cfg.d_ffn = 172;
  cfg.n_heads = 4;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 512;
  return cfg;
}

template <typename T>
void randomize_adapter(AdapterSet<T>& set, std::uint64_t seed) {
  Rng rng(seed);
  if (set.method == AdapterMethod::para) {
    for (auto& vg : set.vg) {
      rng.fill_normal(vg.w_down, T(0), T(0.05));
      rng.fill_normal(vg.w_up, T(0), T(0.05));
      rng.fill_normal(vg.b_up, T(1), T(0.05));
    }
  } else if (set.method == AdapterMethod::lora) {
    for (auto& layer : set.lora)
      for (auto& lp : layer) {
        rng.fill_normal(lp.a, T(0), T(0.05));
        rng.fill_normal(lp.b, T(0), T(0.05));
      }
  } else if (set.method == AdapterMethod::ia3) {
    for (auto& p : set.ia3) {
      rng.fill_normal(p.l_k, T(1), T(0.05));
      rng.fill_normal(p.l_v, T(1), T(0.05));
      rng.fill_normal(p.l_ff, T(1), T(0.05));
    }
  }
}

struct Fixture {
  ModelConfig cfg = bench_config();
  BackboneWeights<float> weights;
  std::vector<AdapterSet<float>> adapters;  // para, lora, ia3
  std::vector<TokenId> prompt;

  Fixture() : weights(make_weights()) {
    const AdapterMethod methods[3] = {AdapterMethod::para, AdapterMethod::lora,
                                      AdapterMethod::ia3};
    for (int m = 0; m < 3; ++m) {
      Rng rng(81 + static_cast<std::uint64_t>(m));
      auto set = AdapterSet<float>::init(methods[m], cfg, AdapterHyper{}, rng);
      randomize_adapter(set, 91 + static_cast<std::uint64_t>(m));
      adapters.push_back(std::move(set));
    }
    Rng pr(7);
    prompt.resize(274);
    for (auto& t : prompt) t = static_cast<TokenId>(pr.uniform_int(cfg.vocab_size));
  }

  BackboneWeights<float> make_weights() const {
    Rng wr(71);
    return BackboneWeights<float>::random_init(cfg, wr);
  }

  const AdapterSet<float>* adapter(const std::string& name) const {
    if (name == "para") return &adapters[0];
    if (name == "lora") return &adapters[1];
    if (name == "ia3") return &adapters[2];
    return nullptr;
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Matrix<float> a(n, n), b(n, n);
  rng.fill_normal(a, 0.0f, 1.0f);
  rng.fill_normal(b, 0.0f, 1.0f);
  for (auto _ : state) {
    auto c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(2 * n * n * n));
}

void bm_prefill(benchmark::State& state, const std::string& method) {
  const Fixture& f = fixture();
  const auto* adapter = f.adapter(method);
  for (auto _ : state) {
    Session<float> s(f.weights, adapter, f.prompt.size());
    auto logits = s.prefill(f.prompt);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(f.prompt.size()));
}

void bm_decode(benchmark::State& state, const std::string& method) {
  const Fixture& f = fixture();
  const auto* adapter = f.adapter(method);
  Session<float> s(f.weights, adapter, f.cfg.max_seq_len);
  s.prefill(f.prompt);
  std::size_t pos = f.prompt.size();
  TokenId tok = 3;
  for (auto _ : state) {
    if (pos + 1 >= f.cfg.max_seq_len) {
      state.PauseTiming();
      s = Session<float>(f.weights, adapter, f.cfg.max_seq_len);
      s.prefill(f.prompt);
      pos = f.prompt.size();
      state.ResumeTiming();
    }
    auto logits = s.decode_step(tok);
    benchmark::DoNotOptimize(logits.data());
    ++pos;
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()));
}

void bm_generate(benchmark::State& state, const std::string& method) {
  const Fixture& f = fixture();
  const auto* adapter = f.adapter(method);
  const GenerateOptions opts{32, static_cast<std::size_t>(state.range(0))};
  for (auto _ : state) {
    auto res = generate(f.weights, adapter, std::span<const TokenId>(f.prompt), opts);
    benchmark::DoNotOptimize(res.tokens.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 32);
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(64)->Arg(256);

BENCHMARK_CAPTURE(bm_prefill, none, "none");
BENCHMARK_CAPTURE(bm_prefill, para, "para");
BENCHMARK_CAPTURE(bm_prefill, lora, "lora");
BENCHMARK_CAPTURE(bm_prefill, ia3, "ia3");

BENCHMARK_CAPTURE(bm_decode, none, "none");
BENCHMARK_CAPTURE(bm_decode, para, "para");
BENCHMARK_CAPTURE(bm_decode, lora, "lora");
BENCHMARK_CAPTURE(bm_decode, ia3, "ia3");

BENCHMARK_CAPTURE(bm_generate, none, "none")->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_generate, para, "para")->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_generate, lora, "lora")->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_generate, ia3, "ia3")->Arg(1)->Arg(3)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
