// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "peftlab/adapters.hpp"
#include "peftlab/model.hpp"

using namespace peftlab;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 64;
  cfg.d_ffn = 172;
  cfg.n_heads = 4;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 512;
  return cfg;
}

ModelConfig paper_7b_config() {
  ModelConfig cfg;
  cfg.n_layers = 32;
  cfg.d_model = 4096;
  cfg.d_ffn = 11008;
  cfg.n_heads = 32;
  cfg.vocab_size = 32000;
  cfg.max_seq_len = 4096;
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

}  // namespace

TEST_CASE("pooler selects the final prompt row") {
  Matrix<double> h(3, 4);
  for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] = static_cast<double>(i);
  const Matrix<double> p = pooler(h);
  CHECK(p.rows() == 1);
  CHECK(p.cols() == 4);
  for (std::size_t j = 0; j < 4; ++j) CHECK(p(0, j) == h(2, j));
  CHECK_THROWS_AS(pooler(Matrix<double>()), DimensionError);
}

// Hand-worked generator case (d_model=2, d_ffn=3, r=1), values frozen from a
// 40-digit computation: z = 0.7*0.1 + (-1.3)*(-0.2) = 0.33, a = gelu(z),
// l = a*W_up + 1.
TEST_CASE("vector generator matches a frozen hand computation") {
  VectorGeneratorParams<double> vg;
  vg.r = 1;
  vg.activation = Activation::gelu;
  vg.w_down = Matrix<double>(2, 1);
  vg.w_down(0, 0) = 0.1;
  vg.w_down(1, 0) = -0.2;
  vg.w_up = Matrix<double>(1, 7);
  const double w_up_vals[7] = {0.3, -0.1, 0.2, 0.5, -0.4, 0.25, -0.15};
  for (std::size_t j = 0; j < 7; ++j) vg.w_up(0, j) = w_up_vals[j];
  vg.b_up = Matrix<double>::ones(1, 7);

  Matrix<double> hidden(1, 2);
  hidden(0, 0) = 0.7;
  hidden(0, 1) = -1.3;

  const AdjustingVectors<double> av = generate_vectors(vg, hidden);
  REQUIRE(av.l_q.cols() == 2);
  REQUIRE(av.l_v.cols() == 2);
  REQUIRE(av.l_u.cols() == 3);

  CHECK(av.l_q(0, 0) == doctest::Approx(1.0622996170238733176).epsilon(1e-15));
  CHECK(av.l_q(0, 1) == doctest::Approx(0.97923346099204222745).epsilon(1e-15));
  CHECK(av.l_v(0, 0) == doctest::Approx(1.0415330780159155451).epsilon(1e-15));
  CHECK(av.l_v(0, 1) == doctest::Approx(1.1038326950397888627).epsilon(1e-15));
  CHECK(av.l_u(0, 0) == doctest::Approx(0.91693384396816890981).epsilon(1e-15));
  CHECK(av.l_u(0, 1) == doctest::Approx(1.0519163475198944314).epsilon(1e-15));
  CHECK(av.l_u(0, 2) == doctest::Approx(0.96885019148806334118).epsilon(1e-15));
}

TEST_CASE("generator pooling uses the last row of multi-row input") {
  VectorGeneratorParams<double> vg;
  vg.r = 1;
  vg.activation = Activation::gelu;
  vg.w_down = Matrix<double>(2, 1);
  vg.w_down(0, 0) = 0.1;
  vg.w_down(1, 0) = -0.2;
  vg.w_up = Matrix<double>(1, 7, 0.25);
  vg.b_up = Matrix<double>::ones(1, 7);

  Matrix<double> multi(3, 2, 9.0);
  multi(2, 0) = 0.7;
  multi(2, 1) = -1.3;
  Matrix<double> single(1, 2);
  single(0, 0) = 0.7;
  single(0, 1) = -1.3;

  const auto a = generate_vectors(vg, multi);
  const auto b = generate_vectors(vg, single);
  CHECK(a.l_q == b.l_q);
  CHECK(a.l_v == b.l_v);
  CHECK(a.l_u == b.l_u);
}

TEST_CASE("fresh adapters of every method are identity transforms") {
  const ModelConfig cfg = desk_config();
  AdapterHyper hyper;
  Rng rng(17);

  const auto para = AdapterSet<double>::init(AdapterMethod::para, cfg, hyper, rng);
  for (const auto& vg : para.vg) {
    for (std::size_t i = 0; i < vg.w_up.size(); ++i) CHECK(vg.w_up.data()[i] == 0.0);
    for (std::size_t i = 0; i < vg.b_up.size(); ++i) CHECK(vg.b_up.data()[i] == 1.0);
  }
  Matrix<double> hidden(1, cfg.d_model, 0.4);
  const auto av = generate_vectors(para.vg[0], hidden);
  for (std::size_t i = 0; i < av.l_q.size(); ++i) CHECK(av.l_q.data()[i] == 1.0);
  for (std::size_t i = 0; i < av.l_u.size(); ++i) CHECK(av.l_u.data()[i] == 1.0);

  const auto lora = AdapterSet<double>::init(AdapterMethod::lora, cfg, hyper, rng);
  for (const auto& layer : lora.lora)
    for (const auto& lp : layer)
      for (std::size_t i = 0; i < lp.b.size(); ++i) CHECK(lp.b.data()[i] == 0.0);

  const auto ia3 = AdapterSet<double>::init(AdapterMethod::ia3, cfg, hyper, rng);
  for (const auto& p : ia3.ia3) {
    for (std::size_t i = 0; i < p.l_k.size(); ++i) CHECK(p.l_k.data()[i] == 1.0);
    for (std::size_t i = 0; i < p.l_ff.size(); ++i) CHECK(p.l_ff.data()[i] == 1.0);
  }
}

TEST_CASE("lora_forward adds the scaled low-rank delta") {
  LoRAParams<double> lp;
  lp.rank = 1;
  lp.scaling = 2.0;
  lp.a = Matrix<double>(2, 1);
  lp.a(0, 0) = 1.0;
  lp.a(1, 0) = -1.0;
  lp.b = Matrix<double>(1, 2);
  lp.b(0, 0) = 0.5;
  lp.b(0, 1) = 0.25;

  Matrix<double> w(2, 2);
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  Matrix<double> x(1, 2);
  x(0, 0) = 3.0;
  x(0, 1) = 1.0;

  // base = x (identity weight); xa = 3 - 1 = 2; delta = [1.0, 0.5]
  const Matrix<double> out = lora_forward(x, w, lp);
  CHECK(out(0, 0) == doctest::Approx(3.0 + 2.0 * 1.0).epsilon(1e-15));
  CHECK(out(0, 1) == doctest::Approx(1.0 + 2.0 * 0.5).epsilon(1e-15));
}

TEST_CASE("parameter counts reproduce the published adapter sizes") {
  const ModelConfig big = paper_7b_config();
  AdapterHyper hyper;  // r=12, rank=16, targets {w_q, w_v}

  const ParamCount para = count_params(big, AdapterMethod::para, hyper);
  CHECK(para.headline == 8945664u);
  CHECK(para.with_bias == 9560064u);

  const ParamCount lora = count_params(big, AdapterMethod::lora, hyper);
  CHECK(lora.headline == 8388608u);
  CHECK(lora.with_bias == 8388608u);

  const ParamCount ia3 = count_params(big, AdapterMethod::ia3, hyper);
  CHECK(ia3.headline == 614400u);

  const ParamCount none = count_params(big, AdapterMethod::none, hyper);
  CHECK(none.headline == 0u);

  const ModelConfig desk = desk_config();
  const ParamCount desk_para = count_params(desk, AdapterMethod::para, hyper);
  CHECK(desk_para.headline == 8736u);
  CHECK(desk_para.with_bias == 8736u + 600u);
}

TEST_CASE("adapters round trip through bytes bit-exactly") {
  const ModelConfig cfg = desk_config();
  AdapterHyper hyper;
  for (const AdapterMethod m : {AdapterMethod::para, AdapterMethod::lora, AdapterMethod::ia3}) {
    Rng rng(100 + static_cast<std::uint64_t>(m));
    auto set = AdapterSet<float>::init(m, cfg, hyper, rng);
    randomize_adapter(set, 200 + static_cast<std::uint64_t>(m));
    set.meta.tenant_id = "tenant-x";
    set.meta.seed = 42;
    set.meta.run_id = "run-1";

    const auto bytes = serialize_adapter(set);
    const auto back = deserialize_adapter<float>(bytes);
    CHECK(back == set);
  }
}

TEST_CASE("adapter files round trip and carry a json sidecar") {
  const ModelConfig cfg = desk_config();
  AdapterHyper hyper;
  Rng rng(7);
  auto set = AdapterSet<double>::init(AdapterMethod::para, cfg, hyper, rng);
  randomize_adapter(set, 8);
  set.meta.tenant_id = "t0";

  const std::string path =
      (std::filesystem::temp_directory_path() / "peftlab_adapter.pla").string();
  save_adapter(set, path);
  const auto back = load_adapter<double>(path);
  CHECK(back == set);
  CHECK(std::filesystem::exists(path + ".json"));

  const std::string meta = adapter_meta_json(set);
  CHECK(meta.find("para") != std::string::npos);
  CHECK(meta.find("t0") != std::string::npos);

  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("adapter loader raises typed errors on corruption") {
  const ModelConfig cfg = desk_config();
  AdapterHyper hyper;
  Rng rng(9);
  auto set = AdapterSet<float>::init(AdapterMethod::ia3, cfg, hyper, rng);
  auto bytes = serialize_adapter(set);

  SUBCASE("bad magic") {
    bytes[0] ^= 0xff;
    try {
      deserialize_adapter<float>(bytes);
      FAIL("expected SerializationError");
    } catch (const SerializationError& e) {
      CHECK(e.kind() == SerializationError::Kind::bad_magic);
    }
  }
  SUBCASE("truncation") {
    bytes.resize(bytes.size() - 7);
    try {
      deserialize_adapter<float>(bytes);
      FAIL("expected SerializationError");
    } catch (const SerializationError& e) {
      CHECK(e.kind() == SerializationError::Kind::truncated);
    }
  }
  SUBCASE("wrong precision") {
    try {
      deserialize_adapter<double>(bytes);
      FAIL("expected SerializationError");
    } catch (const SerializationError& e) {
      CHECK(e.kind() == SerializationError::Kind::config_mismatch);
    }
  }
}

TEST_CASE("method and target names round trip through strings") {
  for (const AdapterMethod m :
       {AdapterMethod::none, AdapterMethod::para, AdapterMethod::lora, AdapterMethod::ia3})
    CHECK(adapter_method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(adapter_method_from_string("nope"), ValidationError);
  for (const LoraTarget t :
       {LoraTarget::w_q, LoraTarget::w_k, LoraTarget::w_v, LoraTarget::w_o})
    CHECK(lora_target_from_string(to_string(t)) == t);
}

TEST_CASE("init validates hyper-parameters") {
  const ModelConfig cfg = desk_config();
  Rng rng(1);
  AdapterHyper bad;
  bad.r = 0;
  CHECK_THROWS_AS(AdapterSet<float>::init(AdapterMethod::para, cfg, bad, rng), ValidationError);
  AdapterHyper no_targets;
  no_targets.targets.clear();
  CHECK_THROWS_AS(AdapterSet<float>::init(AdapterMethod::lora, cfg, no_targets, rng),
                  ValidationError);
}
