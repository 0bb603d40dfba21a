// SPDX-License-Identifier: Apache-2.0
// Command-line front end: model/adapter lifecycle, training, generation,
// benchmarking, parameter counting, and gradient verification, driven by a
// JSON run-config. Exit codes: 0 ok, 1 usage, 2 validation, 3 numerical.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "peftlab/adapters.hpp"
#include "peftlab/clock.hpp"
#include "peftlab/model.hpp"
#include "peftlab/serving.hpp"
#include "peftlab/train.hpp"
#include "peftlab/weights.hpp"

namespace {

using namespace peftlab;
namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct RunConfig {
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::string output_dir = "out";
  ModelConfig model;
  AdapterMethod method = AdapterMethod::para;
  AdapterHyper hyper;
  TaskSpec task;
  TrainConfig train_cfg;
  TrainConfig pretrain_cfg;
  TaskSpec pretrain_task;
  BenchSpec bench;
  bool bench_stub_clock = false;
  std::string weights_file;  // defaults to <output_dir>/backbone.plw
  std::string adapter_file;  // defaults to <output_dir>/adapter_<method>.pla
};

template <typename V>
V field(const json& j, const std::string& section, const char* key, V fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError("config field " + section + "." + key + " has the wrong type");
  }
}

TaskSpec parse_task(const json& j, const std::string& section, TaskSpec base) {
  base.kind = task_from_string(field<std::string>(j, section, "kind", to_string(base.kind)));
  base.vocab_size = field<std::uint32_t>(j, section, "vocab_size", base.vocab_size);
  base.min_content = field<std::uint32_t>(j, section, "min_content", base.min_content);
  base.max_content = field<std::uint32_t>(j, section, "max_content", base.max_content);
  base.shift = field<std::uint32_t>(j, section, "shift", base.shift);
  base.key_slots = field<std::uint32_t>(j, section, "key_slots", base.key_slots);
  base.n_train = field<std::uint32_t>(j, section, "n_train", base.n_train);
  base.n_dev = field<std::uint32_t>(j, section, "n_dev", base.n_dev);
  base.n_test = field<std::uint32_t>(j, section, "n_test", base.n_test);
  base.seed = field<std::uint64_t>(j, section, "seed", base.seed);
  return base;
}

TrainConfig parse_train(const json& j, const std::string& section, TrainConfig base) {
  base.lr = field<double>(j, section, "lr", base.lr);
  base.warmup_fraction = field<double>(j, section, "warmup_fraction", base.warmup_fraction);
  base.batch_size = field<std::uint32_t>(j, section, "batch_size", base.batch_size);
  base.max_epochs = field<std::uint32_t>(j, section, "max_epochs", base.max_epochs);
  base.eval_every = field<std::uint32_t>(j, section, "eval_every", base.eval_every);
  base.patience = field<std::uint32_t>(j, section, "patience", base.patience);
  base.weight_decay_matrix =
      field<double>(j, section, "weight_decay_matrix", base.weight_decay_matrix);
  base.weight_decay_vector =
      field<double>(j, section, "weight_decay_vector", base.weight_decay_vector);
  base.seed = field<std::uint64_t>(j, section, "seed", base.seed);
  return base;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }

  RunConfig cfg;
  cfg.seed = field<std::uint64_t>(j, "", "seed", cfg.seed);
  cfg.precision = field<std::string>(j, "", "precision", cfg.precision);
  if (cfg.precision != "f32" && cfg.precision != "f64")
    throw ValidationError("config field precision must be f32 or f64");
  cfg.output_dir = field<std::string>(j, "", "output_dir", cfg.output_dir);

  if (j.contains("model")) cfg.model = config_from_json(j.at("model").dump());

  if (j.contains("adapter")) {
    const json& a = j.at("adapter");
    cfg.method =
        adapter_method_from_string(field<std::string>(a, "adapter", "method", "para"));
    cfg.hyper.r = field<std::uint32_t>(a, "adapter", "r", cfg.hyper.r);
    cfg.hyper.rank = field<std::uint32_t>(a, "adapter", "rank", cfg.hyper.rank);
    cfg.hyper.alpha = field<double>(a, "adapter", "alpha", cfg.hyper.alpha);
    if (a.contains("targets")) {
      cfg.hyper.targets.clear();
      for (const auto& t : field<std::vector<std::string>>(a, "adapter", "targets", {}))
        cfg.hyper.targets.push_back(lora_target_from_string(t));
    }
  }

  cfg.task.vocab_size = cfg.model.vocab_size;
  if (j.contains("task")) cfg.task = parse_task(j.at("task"), "task", cfg.task);

  cfg.train_cfg.seed = cfg.seed;
  if (j.contains("train")) cfg.train_cfg = parse_train(j.at("train"), "train", cfg.train_cfg);

  cfg.pretrain_task = cfg.task;
  cfg.pretrain_task.kind = TaskKind::copy;
  cfg.pretrain_cfg = cfg.train_cfg;
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    if (p.contains("task")) cfg.pretrain_task = parse_task(p.at("task"), "pretrain.task", cfg.pretrain_task);
    if (p.contains("train"))
      cfg.pretrain_cfg = parse_train(p.at("train"), "pretrain.train", cfg.pretrain_cfg);
  }

  cfg.bench.tenants = {"para", "lora", "ia3"};
  cfg.bench.seed = cfg.seed;
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    cfg.bench.prompt_length =
        field<std::uint32_t>(b, "bench", "prompt_length", cfg.bench.prompt_length);
    cfg.bench.max_new_tokens =
        field<std::uint32_t>(b, "bench", "max_new_tokens", cfg.bench.max_new_tokens);
    cfg.bench.beam_sizes =
        field<std::vector<std::uint32_t>>(b, "bench", "beam_sizes", cfg.bench.beam_sizes);
    cfg.bench.repetitions =
        field<std::uint32_t>(b, "bench", "repetitions", cfg.bench.repetitions);
    cfg.bench.warmup_runs =
        field<std::uint32_t>(b, "bench", "warmup_runs", cfg.bench.warmup_runs);
    cfg.bench.tenants = field<std::vector<std::string>>(b, "bench", "methods", cfg.bench.tenants);
    cfg.bench.seed = field<std::uint64_t>(b, "bench", "seed", cfg.bench.seed);
    cfg.bench_stub_clock = field<bool>(b, "bench", "stub_clock", cfg.bench_stub_clock);
  }

  cfg.weights_file =
      field<std::string>(j, "", "weights_file", cfg.output_dir + "/backbone.plw");
  cfg.adapter_file = field<std::string>(j, "", "adapter_file", "");
  return cfg;
}

std::string default_adapter_file(const RunConfig& cfg) {
  return cfg.adapter_file.empty()
             ? cfg.output_dir + "/adapter_" + to_string(cfg.method) + ".pla"
             : cfg.adapter_file;
}

std::string format_thousands(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  int n = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (n > 0 && n % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++n;
  }
  return {out.rbegin(), out.rend()};
}

std::vector<TokenId> parse_prompt(const std::string& text) {
  std::vector<TokenId> ids;
  std::string piece;
  std::istringstream in(text);
  while (std::getline(in, piece, ',')) {
    if (piece.empty()) continue;
    try {
      ids.push_back(static_cast<TokenId>(std::stol(piece)));
    } catch (const std::exception&) {
      throw ValidationError("bad token id in prompt: " + piece);
    }
  }
  if (ids.empty()) throw ValidationError("prompt contains no token ids");
  return ids;
}

// ---------------------------------------------------------------------------
// Commands (templated over engine precision)
// ---------------------------------------------------------------------------

template <typename T>
int cmd_init(const RunConfig& cfg, bool pretrain) {
  fs::create_directories(cfg.output_dir);
  Rng rng(cfg.seed);
  BackboneWeights<T> weights = BackboneWeights<T>::random_init(cfg.model, rng);
  if (pretrain) {
    const TaskDataset data = make_task(cfg.pretrain_task);
    SteadyClock clock;
    std::ofstream hist(cfg.output_dir + "/pretrain_history.jsonl");
    const TrainResult r = train(weights, static_cast<AdapterSet<T>*>(nullptr), data,
                                cfg.pretrain_cfg, clock, &hist);
    const EvalResult test = evaluate(weights, static_cast<const AdapterSet<T>*>(nullptr), data.test);
    std::cout << "pretrained on " << data.name << ": steps=" << r.steps
              << " best_dev_loss=" << r.best_dev_loss << " test_acc=" << test.token_accuracy
              << "\n";
  }
  save_weights(weights, cfg.weights_file);
  std::cout << "weights written to " << cfg.weights_file << " (hash " << weights.content_hash()
            << ")\n";
  return kExitOk;
}

template <typename T>
int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  BackboneWeights<T> weights = load_weights<T>(cfg.weights_file);
  if (cfg.task.vocab_size > weights.config.vocab_size)
    throw ValidationError("task vocab exceeds model vocab");
  const TaskDataset data = make_task(cfg.task);
  Rng rng(cfg.seed + 1);
  AdapterSet<T> adapter = AdapterSet<T>::init(cfg.method, weights.config, cfg.hyper, rng);
  adapter.meta.seed = cfg.seed;
  adapter.meta.run_id = to_string(cfg.method) + "-" + data.name;
  adapter.meta.tenant_id = to_string(cfg.method);

  SteadyClock clock;
  std::ofstream hist(cfg.output_dir + "/history_" + to_string(cfg.method) + ".jsonl");
  const TrainResult r = train(weights, &adapter, data, cfg.train_cfg, clock, &hist);
  const EvalResult dev = evaluate(weights, &adapter, data.dev);
  const EvalResult test = evaluate(weights, &adapter, data.test);

  const std::string out_path = default_adapter_file(cfg);
  save_adapter(adapter, out_path);
  std::cout << "trained " << to_string(cfg.method) << " on " << data.name << ": steps=" << r.steps
            << " best_dev_loss=" << r.best_dev_loss << " dev_acc=" << dev.token_accuracy
            << " test_acc=" << test.token_accuracy << "\n"
            << "adapter written to " << out_path << "\n";
  return kExitOk;
}

template <typename T>
int cmd_generate(const RunConfig& cfg, const std::string& prompt_text, std::uint32_t max_new,
                 std::uint32_t beam, const std::string& adapter_path) {
  BackboneWeights<T> weights = load_weights<T>(cfg.weights_file);
  std::optional<AdapterSet<T>> adapter;
  if (!adapter_path.empty()) adapter = load_adapter<T>(adapter_path);

  const std::vector<TokenId> prompt = parse_prompt(prompt_text);
  GenerateOptions opts;
  opts.max_new_tokens = max_new;
  opts.beam_size = beam;
  const GenerateResult<T> result =
      generate(weights, adapter ? &*adapter : nullptr, prompt, opts);
  for (std::size_t i = 0; i < result.tokens.size(); ++i) {
    if (i) std::cout << ' ';
    std::cout << result.tokens[i];
  }
  std::cout << "\n";
  return kExitOk;
}

template <typename T>
int cmd_bench(const RunConfig& cfg, bool stub_clock_flag) {
  fs::create_directories(cfg.output_dir);
  BackboneWeights<T> weights = [&] {
    if (fs::exists(cfg.weights_file)) return load_weights<T>(cfg.weights_file);
    Rng rng(cfg.seed);
    return BackboneWeights<T>::random_init(cfg.model, rng);
  }();

  TenantRegistry<T> registry(weights);
  std::uint64_t salt = 1;
  for (const std::string& name : cfg.bench.tenants) {
    Rng rng(cfg.seed + salt++);
    AdapterSet<T> set =
        AdapterSet<T>::init(adapter_method_from_string(name), weights.config, cfg.hyper, rng);
    set.meta.tenant_id = name;
    set.meta.seed = cfg.seed;
    registry.register_tenant(name, std::move(set));
  }

  const bool stub = stub_clock_flag || cfg.bench_stub_clock;
  SteadyClock steady;
  StubClock stubbed;
  Clock& clock = stub ? static_cast<Clock&>(stubbed) : static_cast<Clock&>(steady);
  const BenchReport report = run_bench(registry, cfg.bench, clock);

  const std::string json_path = cfg.output_dir + "/bench_report.json";
  const std::string csv_path = cfg.output_dir + "/bench_report.csv";
  {
    std::ofstream jf(json_path);
    jf << bench_report_to_json(report);
    std::ofstream cf(csv_path);
    cf << bench_report_to_csv(report);
  }
  std::cout << bench_report_to_csv(report);
  std::cout << "report written to " << json_path << " and " << csv_path << "\n";

  if (stub) return kExitOk;  // stubbed timings carry no ordering information

  auto contains = [&](const std::string& t) {
    return std::find(cfg.bench.tenants.begin(), cfg.bench.tenants.end(), t) !=
           cfg.bench.tenants.end();
  };
  bool ok = true;
  for (const auto beam : cfg.bench.beam_sizes) {
    if (contains("para") && contains("lora")) {
      const auto& p = report.cell("para", beam);
      const auto& l = report.cell("lora", beam);
      if (!(p.tps_median > l.tps_median)) {
        std::cerr << "ordering failure at beam " << beam << ": para median tps " << p.tps_median
                  << " <= lora " << l.tps_median << "\n";
        ok = false;
      }
    }
    if (contains("para") && contains("ia3")) {
      const auto& p = report.cell("para", beam);
      const auto& i = report.cell("ia3", beam);
      const double gap = std::abs(p.tps_median - i.tps_median) / i.tps_median;
      if (!(gap <= 0.10)) {
        std::cerr << "ordering failure at beam " << beam << ": |para-ia3|/ia3 = " << gap
                  << " > 0.10\n";
        ok = false;
      }
    }
  }
  return ok ? kExitOk : kExitNumerical;
}

int cmd_count_params(const RunConfig& cfg) {
  std::cout << "method    headline        with_bias\n";
  for (const AdapterMethod m :
       {AdapterMethod::none, AdapterMethod::para, AdapterMethod::lora, AdapterMethod::ia3}) {
    const ParamCount pc = count_params(cfg.model, m, cfg.hyper);
    std::string name = to_string(m);
    name.resize(10, ' ');
    std::string headline = format_thousands(pc.headline);
    headline.resize(std::max<std::size_t>(headline.size(), 16), ' ');
    std::cout << name << headline << format_thousands(pc.with_bias) << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  // Verification always runs in 64-bit, per the tolerance contract.
  Rng rng(cfg.seed);
  BackboneWeights<double> weights = BackboneWeights<double>::random_init(cfg.model, rng);
  Rng arng(cfg.seed + 1);
  AdapterSet<double> adapter =
      AdapterSet<double>::init(cfg.method, cfg.model, cfg.hyper, arng);
  // Nudge the adapter off its identity initialization so every block
  // contributes to the loss surface.
  for (auto& [name, p] : named_trainable_params(adapter))
    rng.fill_normal(*p, 0.0, 0.05);

  TaskSpec task = cfg.task;
  task.vocab_size = std::min(task.vocab_size, cfg.model.vocab_size);
  task.n_train = 1;
  task.n_dev = 1;
  task.n_test = 1;
  const TaskDataset data = make_task(task);

  const GradCheckReport report = gradcheck(weights, &adapter, data.train[0]);
  for (const auto& block : report.blocks)
    std::cout << block.name << " max_rel_err=" << block.max_rel_err << "\n";
  std::cout << (report.pass ? "PASS" : "FAIL") << " worst=" << report.worst
            << " tolerance=" << report.tolerance << "\n";
  return report.pass ? kExitOk : kExitNumerical;
}

template <typename Fn>
int dispatch_precision(const RunConfig& cfg, Fn&& fn) {
  if (cfg.precision == "f64") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale adapter engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::string prompt_text;
  std::string adapter_path;
  std::uint32_t max_new = 32;
  std::uint32_t beam = 1;
  bool pretrain = false;
  bool stub_clock = false;

  CLI::App* init = app.add_subcommand("init", "create (and optionally pretrain) a backbone");
  init->add_option("--config", config_path)->required();
  init->add_flag("--pretrain", pretrain, "pretrain on the copy task before saving");

  CLI::App* train_cmd = app.add_subcommand("train", "train an adapter on the configured task");
  train_cmd->add_option("--config", config_path)->required();

  CLI::App* gen = app.add_subcommand("generate", "generate token ids from a prompt");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--prompt", prompt_text, "comma-separated token ids")->required();
  gen->add_option("--max-new", max_new);
  gen->add_option("--beam", beam);
  gen->add_option("--adapter", adapter_path, "adapter file (default: none)");

  CLI::App* bench = app.add_subcommand("bench", "latency/memory benchmark across methods");
  bench->add_option("--config", config_path)->required();
  bench->add_flag("--stub-clock", stub_clock, "deterministic timer for reproducible artifacts");

  CLI::App* count = app.add_subcommand("count-params", "tunable-parameter table");
  count->add_option("--config", config_path)->required();

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--config", config_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig cfg = load_run_config(config_path);
    if (init->parsed())
      return dispatch_precision(cfg, [&](auto tag) { return cmd_init<decltype(tag)>(cfg, pretrain); });
    if (train_cmd->parsed())
      return dispatch_precision(cfg, [&](auto tag) { return cmd_train<decltype(tag)>(cfg); });
    if (gen->parsed())
      return dispatch_precision(cfg, [&](auto tag) {
        return cmd_generate<decltype(tag)>(cfg, prompt_text, max_new, beam, adapter_path);
      });
    if (bench->parsed())
      return dispatch_precision(cfg,
                                [&](auto tag) { return cmd_bench<decltype(tag)>(cfg, stub_clock); });
    if (count->parsed()) return cmd_count_params(cfg);
    if (gc->parsed()) return cmd_gradcheck(cfg);
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const EngineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
