// SPDX-License-Identifier: Apache-2.0
#include "peftlab/weights.hpp"

#include <cstring>

#include "peftlab/serialize_util.hpp"

namespace peftlab {

template <typename T>
BackboneWeights<T> BackboneWeights<T>::random_init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneWeights<T> w;
  w.config = cfg;
  w.token_embedding = Matrix<T>(cfg.vocab_size, cfg.d_model);
  rng.fill_normal(w.token_embedding, 0.0, 0.02);
  w.layers.resize(cfg.n_layers);
  for (auto& lw : w.layers) {
    lw.w_q = Matrix<T>(cfg.d_model, cfg.d_model);
    lw.w_k = Matrix<T>(cfg.d_model, cfg.d_model);
    lw.w_v = Matrix<T>(cfg.d_model, cfg.d_model);
    lw.w_o = Matrix<T>(cfg.d_model, cfg.d_model);
    lw.w_gate = Matrix<T>(cfg.d_model, cfg.d_ffn);
    lw.w_up = Matrix<T>(cfg.d_model, cfg.d_ffn);
    lw.w_down = Matrix<T>(cfg.d_ffn, cfg.d_model);
    for (Matrix<T>* m : {&lw.w_q, &lw.w_k, &lw.w_v, &lw.w_o, &lw.w_gate, &lw.w_up, &lw.w_down})
      rng.fill_normal(*m, 0.0, 0.02);
    lw.attn_norm = Matrix<T>::ones(1, cfg.d_model);
    lw.ffn_norm = Matrix<T>::ones(1, cfg.d_model);
  }
  w.final_norm = Matrix<T>::ones(1, cfg.d_model);
  w.lm_head = Matrix<T>(cfg.d_model, cfg.vocab_size);
  rng.fill_normal(w.lm_head, 0.0, 0.02);
  return w;
}

namespace {

// Walks every tensor in a fixed, documented order. W is BackboneWeights<T>
// or const BackboneWeights<T>.
template <typename W, typename Fn>
void for_each_named_tensor(W& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    fn(p + "w_q", lw.w_q);
    fn(p + "w_k", lw.w_k);
    fn(p + "w_v", lw.w_v);
    fn(p + "w_o", lw.w_o);
    fn(p + "w_gate", lw.w_gate);
    fn(p + "w_up", lw.w_up);
    fn(p + "w_down", lw.w_down);
    fn(p + "attn_norm", lw.attn_norm);
    fn(p + "ffn_norm", lw.ffn_norm);
  }
  fn("final_norm", w.final_norm);
  fn("lm_head", w.lm_head);
}

constexpr char kWeightMagic[4] = {'P', 'L', 'W', 'B'};
constexpr std::uint32_t kWeightVersion = 1;

}  // namespace

template <typename T>
std::uint64_t BackboneWeights<T>::content_hash() const {
  detail::Fnv1a h;
  h.update(&config.n_layers, sizeof config.n_layers);
  h.update(&config.d_model, sizeof config.d_model);
  h.update(&config.d_ffn, sizeof config.d_ffn);
  h.update(&config.n_heads, sizeof config.n_heads);
  h.update(&config.vocab_size, sizeof config.vocab_size);
  for_each_named_tensor(*this, [&](const std::string& name, const Matrix<T>& m) {
    h.update(name.data(), name.size());
    h.update(m.data(), m.size() * sizeof(T));
  });
  return h.value();
}

template <typename T>
void save_weights(const BackboneWeights<T>& w, const std::string& path) {
  detail::ByteWriter out;
  out.raw(kWeightMagic, 4);
  out.u32(kWeightVersion);
  out.u8(detail::dtype_tag<T>());
  detail::write_config(out, w.config);

  std::uint32_t count = 0;
  for_each_named_tensor(w, [&](const std::string&, const Matrix<T>&) { ++count; });
  out.u32(count);
  for_each_named_tensor(w, [&](const std::string& name, const Matrix<T>& m) {
    detail::write_named_matrix(out, name, m);
  });
  detail::write_file(path, out.bytes());
  detail::write_text_file(path + ".json", config_to_json(w.config));
}

template <typename T>
BackboneWeights<T> load_weights(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader in(bytes);
  char magic[4];
  in.raw(magic, 4);
  if (std::memcmp(magic, kWeightMagic, 4) != 0)
    throw SerializationError(SerializationError::Kind::bad_magic, "weight file: bad magic");
  const auto version = in.u32();
  if (version != kWeightVersion)
    throw SerializationError(SerializationError::Kind::bad_version,
                             "weight file: unsupported version " + std::to_string(version));
  if (in.u8() != detail::dtype_tag<T>())
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "weight file: precision does not match engine precision");
  BackboneWeights<T> w;
  w.config = detail::read_config(in);
  w.config.validate();
  w.layers.resize(w.config.n_layers);
  const auto count = in.u32();
  std::size_t seen = 0;
  for_each_named_tensor(w, [&](const std::string& name, Matrix<T>& m) {
    if (seen++ >= count)
      throw SerializationError(SerializationError::Kind::truncated,
                               "weight file: missing tensor " + name);
    m = detail::read_named_matrix<T>(in, name);
  });
  if (seen != count)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "weight file: unexpected extra tensors");
  if (!in.at_end())
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "weight file: trailing bytes after last tensor");
  const auto d = static_cast<std::size_t>(w.config.d_model);
  const auto f = static_cast<std::size_t>(w.config.d_ffn);
  const auto v = static_cast<std::size_t>(w.config.vocab_size);
  auto expect = [&](const Matrix<T>& m, std::size_t r, std::size_t c, const char* what) {
    if (m.rows() != r || m.cols() != c)
      throw SerializationError(SerializationError::Kind::config_mismatch,
                               std::string("weight file: ") + what + " shape does not match config");
  };
  expect(w.token_embedding, v, d, "token_embedding");
  for (const auto& lw : w.layers) {
    expect(lw.w_q, d, d, "w_q");
    expect(lw.w_k, d, d, "w_k");
    expect(lw.w_v, d, d, "w_v");
    expect(lw.w_o, d, d, "w_o");
    expect(lw.w_gate, d, f, "w_gate");
    expect(lw.w_up, d, f, "w_up");
    expect(lw.w_down, f, d, "w_down");
    expect(lw.attn_norm, 1, d, "attn_norm");
    expect(lw.ffn_norm, 1, d, "ffn_norm");
  }
  expect(w.final_norm, 1, d, "final_norm");
  expect(w.lm_head, d, v, "lm_head");
  return w;
}

template struct BackboneWeights<float>;
template struct BackboneWeights<double>;
template void save_weights<float>(const BackboneWeights<float>&, const std::string&);
template void save_weights<double>(const BackboneWeights<double>&, const std::string&);
template BackboneWeights<float> load_weights<float>(const std::string&);
template BackboneWeights<double> load_weights<double>(const std::string&);

}  // namespace peftlab
