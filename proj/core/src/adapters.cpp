// SPDX-License-Identifier: Apache-2.0
#include "peftlab/adapters.hpp"

#include <cstring>

#include <nlohmann/json.hpp>

#include "peftlab/serialize_util.hpp"

namespace peftlab {

AdapterMethod adapter_method_from_string(const std::string& s) {
  if (s == "none") return AdapterMethod::none;
  if (s == "para") return AdapterMethod::para;
  if (s == "lora") return AdapterMethod::lora;
  if (s == "ia3") return AdapterMethod::ia3;
  throw ValidationError("unknown adapter method: " + s);
}

std::string to_string(AdapterMethod m) {
  switch (m) {
    case AdapterMethod::none: return "none";
    case AdapterMethod::para: return "para";
    case AdapterMethod::lora: return "lora";
    case AdapterMethod::ia3: return "ia3";
  }
  throw ValidationError("invalid adapter method tag");
}

LoraTarget lora_target_from_string(const std::string& s) {
  if (s == "w_q") return LoraTarget::w_q;
  if (s == "w_k") return LoraTarget::w_k;
  if (s == "w_v") return LoraTarget::w_v;
  if (s == "w_o") return LoraTarget::w_o;
  throw ValidationError("unknown lora target: " + s);
}

std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::w_q: return "w_q";
    case LoraTarget::w_k: return "w_k";
    case LoraTarget::w_v: return "w_v";
    case LoraTarget::w_o: return "w_o";
  }
  throw ValidationError("invalid lora target tag");
}

template <typename T>
Matrix<T> pooler(const Matrix<T>& prompt_hidden) {
  if (prompt_hidden.rows() == 0)
    throw DimensionError("pooler: prompt hidden states are empty");
  Matrix<T> out(1, prompt_hidden.cols());
  const auto last = prompt_hidden.rows() - 1;
  std::memcpy(out.data(), prompt_hidden.data() + last * prompt_hidden.cols(),
              prompt_hidden.cols() * sizeof(T));
  return out;
}

template <typename T>
AdjustingVectors<T> generate_vectors(const VectorGeneratorParams<T>& vg,
                                     const Matrix<T>& prompt_hidden) {
  const auto d_model = vg.w_down.rows();
  if (prompt_hidden.cols() != d_model)
    throw DimensionError("generate_vectors: hidden width does not match generator");
  const auto d_out = vg.w_up.cols();
  const auto d_ffn = d_out - 2 * d_model;
  if (d_out < 2 * d_model || d_ffn == 0)
    throw DimensionError("generate_vectors: generator output too narrow to split");

  const Matrix<T> pooled = pooler(prompt_hidden);
  Matrix<T> z = matmul(pooled, vg.w_down);
  z = map_activation(vg.activation, z);
  Matrix<T> l = matmul(z, vg.w_up);
  add_inplace(l, vg.b_up);

  AdjustingVectors<T> out;
  out.l_q = Matrix<T>(1, d_model);
  out.l_v = Matrix<T>(1, d_model);
  out.l_u = Matrix<T>(1, d_ffn);
  std::memcpy(out.l_q.data(), l.data(), d_model * sizeof(T));
  std::memcpy(out.l_v.data(), l.data() + d_model, d_model * sizeof(T));
  std::memcpy(out.l_u.data(), l.data() + 2 * d_model, d_ffn * sizeof(T));
  return out;
}

template <typename T>
Matrix<T> lora_forward(const Matrix<T>& x, const Matrix<T>& w, const LoRAParams<T>& lora) {
  if (lora.a.rows() != w.rows() || lora.b.cols() != w.cols() || lora.a.cols() != lora.b.rows())
    throw DimensionError("lora_forward: adapter dims do not match base matrix");
  Matrix<T> out = matmul(x, w);
  Matrix<T> delta = matmul(matmul(x, lora.a), lora.b);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += lora.scaling * delta.data()[i];
  return out;
}

template <typename T>
AdapterSet<T> AdapterSet<T>::init(AdapterMethod method, const ModelConfig& cfg,
                                  const AdapterHyper& hyper, Rng& rng) {
  cfg.validate();
  if (hyper.r == 0 || hyper.rank == 0)
    throw ValidationError("AdapterSet: bottleneck and rank must be positive");
  AdapterSet<T> set;
  set.method = method;
  set.model_config = cfg;
  set.hyper = hyper;
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ffn;
  const std::size_t d_out = 2 * d + f;
  switch (method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para:
      set.vg.resize(cfg.n_layers);
      for (auto& g : set.vg) {
        g.r = hyper.r;
        g.activation = Activation::gelu;
        g.w_down = Matrix<T>(d, hyper.r);
        rng.fill_normal(g.w_down, 0.0, 0.02);
        g.w_up = Matrix<T>::zeros(hyper.r, d_out);
        g.b_up = Matrix<T>::ones(1, d_out);
      }
      break;
    case AdapterMethod::lora:
      if (hyper.targets.empty()) throw ValidationError("lora: no target matrices configured");
      set.lora.resize(cfg.n_layers);
      for (auto& per_layer : set.lora) {
        per_layer.resize(hyper.targets.size());
        for (auto& p : per_layer) {
          p.rank = hyper.rank;
          p.scaling = static_cast<T>(hyper.alpha / hyper.rank);
          p.a = Matrix<T>(d, hyper.rank);
          rng.fill_normal(p.a, 0.0, 0.02);
          p.b = Matrix<T>::zeros(hyper.rank, d);
        }
      }
      break;
    case AdapterMethod::ia3:
      set.ia3.resize(cfg.n_layers);
      for (auto& p : set.ia3) {
        p.l_k = Matrix<T>::ones(1, d);
        p.l_v = Matrix<T>::ones(1, d);
        p.l_ff = Matrix<T>::ones(1, f);
      }
      break;
  }
  return set;
}

ParamCount count_params(const ModelConfig& cfg, AdapterMethod method, const AdapterHyper& hyper) {
  cfg.validate();
  const std::uint64_t n = cfg.n_layers;
  const std::uint64_t d = cfg.d_model;
  const std::uint64_t f = cfg.d_ffn;
  const std::uint64_t d_out = 2 * d + f;
  ParamCount pc;
  switch (method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para:
      pc.headline = n * (d * hyper.r + hyper.r * d_out);
      pc.with_bias = pc.headline + n * d_out;
      break;
    case AdapterMethod::lora:
      pc.headline = n * hyper.targets.size() * hyper.rank * (d + d);
      pc.with_bias = pc.headline;
      break;
    case AdapterMethod::ia3:
      pc.headline = n * d_out;
      pc.with_bias = pc.headline;
      break;
  }
  return pc;
}

namespace {

constexpr char kAdapterMagic[4] = {'P', 'L', 'A', 'D'};
constexpr std::uint32_t kAdapterVersion = 1;
constexpr const char* kSplitOrder = "qvu";

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_adapter(const AdapterSet<T>& set) {
  detail::ByteWriter out;
  out.raw(kAdapterMagic, 4);
  out.u32(kAdapterVersion);
  out.u8(detail::dtype_tag<T>());
  out.u8(static_cast<std::uint8_t>(set.method));
  detail::write_config(out, set.model_config);

  out.u32(set.hyper.r);
  out.u32(set.hyper.rank);
  static_assert(sizeof(double) == 8);
  out.raw(&set.hyper.alpha, sizeof set.hyper.alpha);
  out.u32(static_cast<std::uint32_t>(set.hyper.targets.size()));
  for (auto t : set.hyper.targets) out.u8(static_cast<std::uint8_t>(t));

  out.str(set.meta.tenant_id);
  out.u64(set.meta.seed);
  out.str(set.meta.run_id);
  out.str(kSplitOrder);

  switch (set.method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para: {
      std::uint8_t act = set.vg.empty() ? static_cast<std::uint8_t>(Activation::gelu)
                                        : static_cast<std::uint8_t>(set.vg[0].activation);
      out.u8(act);
      for (std::size_t l = 0; l < set.vg.size(); ++l) {
        const std::string p = "layer." + std::to_string(l) + ".vg.";
        detail::write_named_matrix(out, p + "w_down", set.vg[l].w_down);
        detail::write_named_matrix(out, p + "w_up", set.vg[l].w_up);
        detail::write_named_matrix(out, p + "b_up", set.vg[l].b_up);
      }
      break;
    }
    case AdapterMethod::lora:
      for (std::size_t l = 0; l < set.lora.size(); ++l) {
        for (std::size_t t = 0; t < set.lora[l].size(); ++t) {
          const std::string p =
              "layer." + std::to_string(l) + ".lora." + to_string(set.hyper.targets[t]) + ".";
          detail::write_named_matrix(out, p + "a", set.lora[l][t].a);
          detail::write_named_matrix(out, p + "b", set.lora[l][t].b);
        }
      }
      break;
    case AdapterMethod::ia3:
      for (std::size_t l = 0; l < set.ia3.size(); ++l) {
        const std::string p = "layer." + std::to_string(l) + ".ia3.";
        detail::write_named_matrix(out, p + "l_k", set.ia3[l].l_k);
        detail::write_named_matrix(out, p + "l_v", set.ia3[l].l_v);
        detail::write_named_matrix(out, p + "l_ff", set.ia3[l].l_ff);
      }
      break;
  }
  return out.bytes();
}

template <typename T>
AdapterSet<T> deserialize_adapter(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  char magic[4];
  in.raw(magic, 4);
  if (std::memcmp(magic, kAdapterMagic, 4) != 0)
    throw SerializationError(SerializationError::Kind::bad_magic, "adapter file: bad magic");
  const auto version = in.u32();
  if (version != kAdapterVersion)
    throw SerializationError(SerializationError::Kind::bad_version,
                             "adapter file: unsupported version " + std::to_string(version));
  if (in.u8() != detail::dtype_tag<T>())
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "adapter file: precision does not match engine precision");
  const auto method_tag = in.u8();
  if (method_tag > static_cast<std::uint8_t>(AdapterMethod::ia3))
    throw SerializationError(SerializationError::Kind::method_mismatch,
                             "adapter file: unknown method tag " + std::to_string(method_tag));

  AdapterSet<T> set;
  set.method = static_cast<AdapterMethod>(method_tag);
  set.model_config = detail::read_config(in);
  try {
    set.model_config.validate();
  } catch (const ValidationError& e) {
    throw SerializationError(SerializationError::Kind::config_mismatch, e.what());
  }

  set.hyper.r = in.u32();
  set.hyper.rank = in.u32();
  in.raw(&set.hyper.alpha, sizeof set.hyper.alpha);
  const auto n_targets = in.u32();
  if (n_targets > 4)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "adapter file: too many lora targets");
  set.hyper.targets.clear();
  for (std::uint32_t i = 0; i < n_targets; ++i) {
    const auto tag = in.u8();
    if (tag > static_cast<std::uint8_t>(LoraTarget::w_o))
      throw SerializationError(SerializationError::Kind::config_mismatch,
                               "adapter file: unknown lora target tag");
    set.hyper.targets.push_back(static_cast<LoraTarget>(tag));
  }

  set.meta.tenant_id = in.str();
  set.meta.seed = in.u64();
  set.meta.run_id = in.str();
  const auto split = in.str();
  if (split != kSplitOrder)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "adapter file: unsupported split order " + split);

  const std::size_t d = set.model_config.d_model;
  const std::size_t f = set.model_config.d_ffn;
  const std::size_t d_out = 2 * d + f;
  const std::size_t n = set.model_config.n_layers;
  auto expect = [&](const Matrix<T>& m, std::size_t r, std::size_t c, const std::string& what) {
    if (m.rows() != r || m.cols() != c)
      throw SerializationError(SerializationError::Kind::config_mismatch,
                               "adapter file: " + what + " shape does not match config");
  };

  switch (set.method) {
    case AdapterMethod::none:
      break;
    case AdapterMethod::para: {
      const auto act = in.u8();
      if (act > 2)
        throw SerializationError(SerializationError::Kind::config_mismatch,
                                 "adapter file: unknown generator activation tag");
      set.vg.resize(n);
      for (std::size_t l = 0; l < n; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".vg.";
        set.vg[l].r = set.hyper.r;
        set.vg[l].activation = static_cast<Activation>(act);
        set.vg[l].w_down = detail::read_named_matrix<T>(in, p + "w_down");
        set.vg[l].w_up = detail::read_named_matrix<T>(in, p + "w_up");
        set.vg[l].b_up = detail::read_named_matrix<T>(in, p + "b_up");
        expect(set.vg[l].w_down, d, set.hyper.r, p + "w_down");
        expect(set.vg[l].w_up, set.hyper.r, d_out, p + "w_up");
        expect(set.vg[l].b_up, 1, d_out, p + "b_up");
      }
      break;
    }
    case AdapterMethod::lora:
      set.lora.resize(n);
      for (std::size_t l = 0; l < n; ++l) {
        set.lora[l].resize(set.hyper.targets.size());
        for (std::size_t t = 0; t < set.hyper.targets.size(); ++t) {
          const std::string p =
              "layer." + std::to_string(l) + ".lora." + to_string(set.hyper.targets[t]) + ".";
          auto& lp = set.lora[l][t];
          lp.rank = set.hyper.rank;
          lp.scaling = static_cast<T>(set.hyper.alpha / set.hyper.rank);
          lp.a = detail::read_named_matrix<T>(in, p + "a");
          lp.b = detail::read_named_matrix<T>(in, p + "b");
          expect(lp.a, d, set.hyper.rank, p + "a");
          expect(lp.b, set.hyper.rank, d, p + "b");
        }
      }
      break;
    case AdapterMethod::ia3:
      set.ia3.resize(n);
      for (std::size_t l = 0; l < n; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".ia3.";
        set.ia3[l].l_k = detail::read_named_matrix<T>(in, p + "l_k");
        set.ia3[l].l_v = detail::read_named_matrix<T>(in, p + "l_v");
        set.ia3[l].l_ff = detail::read_named_matrix<T>(in, p + "l_ff");
        expect(set.ia3[l].l_k, 1, d, p + "l_k");
        expect(set.ia3[l].l_v, 1, d, p + "l_v");
        expect(set.ia3[l].l_ff, 1, f, p + "l_ff");
      }
      break;
  }
  if (!in.at_end())
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "adapter file: trailing bytes after last tensor");
  return set;
}

template <typename T>
void save_adapter(const AdapterSet<T>& set, const std::string& path) {
  detail::write_file(path, serialize_adapter(set));
  detail::write_text_file(path + ".json", adapter_meta_json(set));
}

template <typename T>
AdapterSet<T> load_adapter(const std::string& path) {
  return deserialize_adapter<T>(detail::read_file(path));
}

template <typename T>
std::string adapter_meta_json(const AdapterSet<T>& set) {
  nlohmann::json j;
  j["method"] = to_string(set.method);
  j["model"] = nlohmann::json::parse(config_to_json(set.model_config));
  j["hyper"]["r"] = set.hyper.r;
  j["hyper"]["rank"] = set.hyper.rank;
  j["hyper"]["alpha"] = set.hyper.alpha;
  auto targets = nlohmann::json::array();
  for (auto t : set.hyper.targets) targets.push_back(to_string(t));
  j["hyper"]["targets"] = targets;
  j["meta"]["tenant_id"] = set.meta.tenant_id;
  j["meta"]["seed"] = set.meta.seed;
  j["meta"]["run_id"] = set.meta.run_id;
  j["split_order"] = kSplitOrder;
  j["params"] = count_params(set.model_config, set.method, set.hyper).headline;
  return j.dump(2) + "\n";
}

template Matrix<float> pooler<float>(const Matrix<float>&);
template Matrix<double> pooler<double>(const Matrix<double>&);
template AdjustingVectors<float> generate_vectors<float>(const VectorGeneratorParams<float>&,
                                                         const Matrix<float>&);
template AdjustingVectors<double> generate_vectors<double>(const VectorGeneratorParams<double>&,
                                                           const Matrix<double>&);
template Matrix<float> lora_forward<float>(const Matrix<float>&, const Matrix<float>&,
                                           const LoRAParams<float>&);
template Matrix<double> lora_forward<double>(const Matrix<double>&, const Matrix<double>&,
                                             const LoRAParams<double>&);
template struct AdapterSet<float>;
template struct AdapterSet<double>;
template std::vector<std::uint8_t> serialize_adapter<float>(const AdapterSet<float>&);
template std::vector<std::uint8_t> serialize_adapter<double>(const AdapterSet<double>&);
template AdapterSet<float> deserialize_adapter<float>(const std::vector<std::uint8_t>&);
template AdapterSet<double> deserialize_adapter<double>(const std::vector<std::uint8_t>&);
template void save_adapter<float>(const AdapterSet<float>&, const std::string&);
template void save_adapter<double>(const AdapterSet<double>&, const std::string&);
template AdapterSet<float> load_adapter<float>(const std::string&);
template AdapterSet<double> load_adapter<double>(const std::string&);
template std::string adapter_meta_json<float>(const AdapterSet<float>&);
template std::string adapter_meta_json<double>(const AdapterSet<double>&);

}  // namespace peftlab
