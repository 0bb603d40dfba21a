// SPDX-License-Identifier: Apache-2.0
// Byte-level helpers shared by the weight and adapter file formats.
// All multi-byte integers are little-endian. Readers bounds-check every
// access and raise SerializationError instead of reading past the end.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab::detail {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

template <typename T>
constexpr std::uint8_t dtype_tag();
template <>
constexpr std::uint8_t dtype_tag<float>() {
  return 0;
}
template <>
constexpr std::uint8_t dtype_tag<double>() {
  return 1;
}

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : buf_(bytes) {}

  void raw(void* p, std::size_t n) {
    if (n > buf_.size() - pos_)
      throw SerializationError(SerializationError::Kind::truncated,
                               "file ends before expected field");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = u32();
    if (n > buf_.size() - pos_)
      throw SerializationError(SerializationError::Kind::truncated,
                               "file ends inside a string field");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

class Fnv1a {
 public:
  void update(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

inline void write_config(ByteWriter& out, const ModelConfig& cfg) {
  out.u32(static_cast<std::uint32_t>(cfg.n_layers));
  out.u32(static_cast<std::uint32_t>(cfg.d_model));
  out.u32(static_cast<std::uint32_t>(cfg.d_ffn));
  out.u32(static_cast<std::uint32_t>(cfg.n_heads));
  out.u32(static_cast<std::uint32_t>(cfg.vocab_size));
  out.u32(static_cast<std::uint32_t>(cfg.max_seq_len));
  out.u8(static_cast<std::uint8_t>(cfg.ffn_activation));
  out.u8(static_cast<std::uint8_t>(cfg.positional));
}

inline ModelConfig read_config(ByteReader& in) {
  ModelConfig cfg;
  cfg.n_layers = in.u32();
  cfg.d_model = in.u32();
  cfg.d_ffn = in.u32();
  cfg.n_heads = in.u32();
  cfg.vocab_size = in.u32();
  cfg.max_seq_len = in.u32();
  const auto act = in.u8();
  if (act > 2)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "config block: unknown activation tag");
  cfg.ffn_activation = static_cast<Activation>(act);
  const auto pos = in.u8();
  if (pos > 1)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "config block: unknown positional-encoding tag");
  cfg.positional = static_cast<Positional>(pos);
  return cfg;
}

template <typename T>
void write_named_matrix(ByteWriter& out, const std::string& name, const Matrix<T>& m) {
  out.str(name);
  out.u64(m.rows());
  out.u64(m.cols());
  out.raw(m.data(), m.size() * sizeof(T));
}

template <typename T>
Matrix<T> read_named_matrix(ByteReader& in, const std::string& expected_name) {
  const auto name = in.str();
  if (name != expected_name)
    throw SerializationError(SerializationError::Kind::config_mismatch,
                             "tensor name mismatch: expected " + expected_name + ", found " + name);
  const auto rows = in.u64();
  const auto cols = in.u64();
  constexpr std::uint64_t kMaxElems = 1ull << 32;
  if (rows == 0 || cols == 0 || rows > kMaxElems || cols > kMaxElems || rows * cols > kMaxElems)
    throw SerializationError(SerializationError::Kind::truncated,
                             "tensor " + expected_name + ": implausible shape");
  Matrix<T> m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  in.raw(m.data(), m.size() * sizeof(T));
  return m;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw SerializationError(SerializationError::Kind::io, "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw SerializationError(SerializationError::Kind::io, "short write: " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw SerializationError(SerializationError::Kind::io, "cannot open for reading: " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw SerializationError(SerializationError::Kind::io, "short read: " + path);
  return bytes;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f)
    throw SerializationError(SerializationError::Kind::io, "cannot open for writing: " + path);
  f << text;
  if (!f) throw SerializationError(SerializationError::Kind::io, "short write: " + path);
}

}  // namespace peftlab::detail
