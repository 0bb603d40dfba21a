// SPDX-License-Identifier: Apache-2.0
#include "peftlab/serving.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace peftlab {

void BenchSpec::validate(const ModelConfig& cfg) const {
  if (repetitions == 0) throw ValidationError("BenchSpec: repetitions must be at least 1");
  if (prompt_length == 0) throw ValidationError("BenchSpec: prompt_length must be positive");
  if (beam_sizes.empty()) throw ValidationError("BenchSpec: no beam sizes");
  if (tenants.empty()) throw ValidationError("BenchSpec: no tenants to benchmark");
  for (const auto beam : beam_sizes) {
    if (beam == 0) throw ValidationError("BenchSpec: beam size must be positive");
    if (prompt_length + static_cast<std::uint64_t>(max_new_tokens) * beam > cfg.max_seq_len)
      throw ValidationError("BenchSpec: prompt plus beam-scaled new tokens exceeds max_seq_len");
  }
}

const BenchCell& BenchReport::cell(const std::string& tenant, std::uint32_t beam) const {
  for (const auto& c : cells)
    if (c.tenant == tenant && c.beam == beam) return c;
  throw ValidationError("BenchReport: no cell for tenant " + tenant + " at beam " +
                        std::to_string(beam));
}

namespace {

struct TpsStats {
  double mean = 0.0;
  double median = 0.0;
  double stdev = 0.0;
};

TpsStats tps_stats(std::vector<double> samples) {
  TpsStats s;
  const double n = static_cast<double>(samples.size());
  for (const double v : samples) s.mean += v;
  s.mean /= n;
  double var = 0.0;
  for (const double v : samples) var += (v - s.mean) * (v - s.mean);
  s.stdev = samples.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  s.median = samples.size() % 2 == 1 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
  return s;
}

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
BenchReport run_bench(const TenantRegistry<T>& registry, const BenchSpec& spec, Clock& clock) {
  const ModelConfig& cfg = registry.weights().config;
  spec.validate(cfg);

  Rng rng(spec.seed);
  std::vector<TokenId> prompt(spec.prompt_length);
  for (auto& t : prompt) t = static_cast<TokenId>(rng.uniform_int(cfg.vocab_size));

  BenchReport report;
  report.spec = spec;
  report.model = cfg;
  report.weights_hash = registry.weights().content_hash();
  report.precision = precision_name<T>();

  struct CellRun {
    std::string tenant;
    const AdapterSet<T>* adapter;
    GenerateOptions opts;
    GenerateResult<T> reference;
    std::vector<double> tps;
    std::size_t peak_bytes = 0;
  };

  std::vector<CellRun> runs;
  for (const std::string& tenant : spec.tenants) {
    const auto factory = registry.resolve(tenant);
    for (const auto beam : spec.beam_sizes) {
      CellRun run;
      run.tenant = tenant;
      run.adapter = factory.adapter();
      run.opts.max_new_tokens = spec.max_new_tokens;
      run.opts.beam_size = beam;
      run.reference = generate(registry.weights(), run.adapter, prompt, run.opts);
      run.tps.reserve(spec.repetitions);
      runs.push_back(std::move(run));
    }
  }

  for (std::uint32_t w = 0; w < spec.warmup_runs; ++w)
    for (const CellRun& run : runs) generate(registry.weights(), run.adapter, prompt, run.opts);

  // Repetitions are interleaved across cells so that slow drift in machine
  // state (frequency scaling, cache temperature) spreads evenly over methods
  // instead of biasing whichever tenant happens to run first.
  for (std::uint32_t r = 0; r < spec.repetitions; ++r) {
    for (CellRun& run : runs) {
      AllocCounter::reset_peak();
      const std::size_t baseline = AllocCounter::current_bytes();
      const double t0 = clock.now_seconds();
      const GenerateResult<T> out = generate(registry.weights(), run.adapter, prompt, run.opts);
      const double t1 = clock.now_seconds();
      if (out.tokens != run.reference.tokens)
        throw ValidationError("bench: timed run diverged from untimed reference for tenant " +
                              run.tenant);
      const double elapsed = t1 - t0;
      if (elapsed <= 0.0) throw NumericalError("bench: non-positive elapsed time");
      run.tps.push_back(static_cast<double>(out.tokens.size()) / elapsed);
      const std::size_t peak = AllocCounter::peak_bytes();
      run.peak_bytes = std::max(run.peak_bytes, peak > baseline ? peak - baseline : 0);
    }
  }

  for (CellRun& run : runs) {
    BenchCell cell;
    cell.tenant = run.tenant;
    cell.method = run.adapter ? run.adapter->method : AdapterMethod::none;
    cell.beam = run.opts.beam_size;
    const TpsStats stats = tps_stats(std::move(run.tps));
    cell.tps_mean = stats.mean;
    cell.tps_median = stats.median;
    cell.tps_stdev = stats.stdev;
    cell.peak_bytes = run.peak_bytes;
    cell.vg_invocations = run.reference.vg_invocations;
    cell.samples = spec.repetitions;
    cell.tokens = std::move(run.reference.tokens);
    report.cells.push_back(std::move(cell));
  }
  return report;
}

std::string bench_report_to_json(const BenchReport& report) {
  nlohmann::json j;
  j["model"] = nlohmann::json::parse(config_to_json(report.model));
  j["weights_hash"] = report.weights_hash;
  j["precision"] = report.precision;
  j["spec"]["prompt_length"] = report.spec.prompt_length;
  j["spec"]["max_new_tokens"] = report.spec.max_new_tokens;
  j["spec"]["beam_sizes"] = report.spec.beam_sizes;
  j["spec"]["repetitions"] = report.spec.repetitions;
  j["spec"]["warmup_runs"] = report.spec.warmup_runs;
  j["spec"]["seed"] = report.spec.seed;
  auto cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    nlohmann::json jc;
    jc["tenant"] = c.tenant;
    jc["method"] = to_string(c.method);
    jc["beam"] = c.beam;
    jc["tps_mean"] = c.tps_mean;
    jc["tps_median"] = c.tps_median;
    jc["tps_stdev"] = c.tps_stdev;
    jc["peak_bytes"] = c.peak_bytes;
    jc["vg_invocations"] = c.vg_invocations;
    jc["samples"] = c.samples;
    jc["tokens"] = c.tokens;
    cells.push_back(std::move(jc));
  }
  j["cells"] = std::move(cells);
  return j.dump(2) + "\n";
}

std::string bench_report_to_csv(const BenchReport& report) {
  std::ostringstream out;
  out << "tenant,method,beam,tps_mean,tps_median,tps_stdev,peak_bytes,vg_invocations,samples\n";
  for (const auto& c : report.cells)
    out << c.tenant << ',' << to_string(c.method) << ',' << c.beam << ',' << c.tps_mean << ','
        << c.tps_median << ',' << c.tps_stdev << ',' << c.peak_bytes << ',' << c.vg_invocations
        << ',' << c.samples << '\n';
  return out.str();
}

FlopModel flop_model(const ModelConfig& cfg, AdapterMethod method, const AdapterHyper& hyper) {
  cfg.validate();
  const std::uint64_t n = cfg.n_layers;
  const std::uint64_t d = cfg.d_model;
  const std::uint64_t f = cfg.d_ffn;
  FlopModel m;
  m.base = n * (4 * d * d + 3 * d * f) + d * cfg.vocab_size;
  switch (method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para:
    case AdapterMethod::ia3:
      m.overhead = n * (2 * d + f);
      break;
    case AdapterMethod::lora:
      m.overhead = n * hyper.targets.size() * hyper.rank * (d + d);
      break;
  }
  return m;
}

template BenchReport run_bench<float>(const TenantRegistry<float>&, const BenchSpec&, Clock&);
template BenchReport run_bench<double>(const TenantRegistry<double>&, const BenchSpec&, Clock&);

}  // namespace peftlab
