// SPDX-License-Identifier: Apache-2.0
// Matrix-level reverse-mode autodiff on a recording tape. Insertion order is
// topological order; backward walks the tape once in reverse. Constants never
// receive gradient buffers, so frozen backbone weights cost nothing extra
// during adapter training.
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <vector>

#include "peftlab/errors.hpp"
#include "peftlab/model.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

using NodeId = std::size_t;

template <typename T>
void rope_rotate_inverse_inplace(Matrix<T>& x, std::uint32_t n_heads, std::size_t start_pos);

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  const Matrix<T>& value(NodeId id) const { return nodes_.at(id).value; }
  /// Empty matrix if no gradient reached this node.
  const Matrix<T>& grad(NodeId id) const { return nodes_.at(id).grad; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  NodeId param(Matrix<T> v) { return push(std::move(v), true, {}); }
  NodeId constant(Matrix<T> v) { return push(std::move(v), false, {}); }

  NodeId matmul(NodeId a, NodeId b) {
    Matrix<T> v = peftlab::matmul(value(a), value(b));
    return push(std::move(v), requires_grad(a) || requires_grad(b), [a, b, id = next_id()](Tape& t) {
      const Matrix<T>& g = t.nodes_[id].grad;
      if (t.requires_grad(a)) t.accum(a, peftlab::matmul(g, peftlab::transpose(t.value(b))));
      if (t.requires_grad(b)) t.accum(b, peftlab::matmul(peftlab::transpose(t.value(a)), g));
    });
  }

  NodeId transpose(NodeId a) {
    return push(peftlab::transpose(value(a)), requires_grad(a), [a, id = next_id()](Tape& t) {
      if (t.requires_grad(a)) t.accum(a, peftlab::transpose(t.nodes_[id].grad));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    return push(peftlab::add(value(a), value(b)), requires_grad(a) || requires_grad(b),
                [a, b, id = next_id()](Tape& t) {
                  const Matrix<T>& g = t.nodes_[id].grad;
                  if (t.requires_grad(a)) t.accum(a, g);
                  if (t.requires_grad(b)) t.accum(b, g);
                });
  }

  NodeId hadamard(NodeId a, NodeId b) {
    return push(peftlab::hadamard(value(a), value(b)), requires_grad(a) || requires_grad(b),
                [a, b, id = next_id()](Tape& t) {
                  const Matrix<T>& g = t.nodes_[id].grad;
                  if (t.requires_grad(a)) t.accum(a, peftlab::hadamard(g, t.value(b)));
                  if (t.requires_grad(b)) t.accum(b, peftlab::hadamard(g, t.value(a)));
                });
  }

  /// out(i,j) = v(0,j) * m(i,j), v broadcast over rows.
  NodeId colwise_scale(NodeId m, NodeId v) {
    Matrix<T> out = peftlab::colwise_scale(value(m), value(v));
    return push(std::move(out), requires_grad(m) || requires_grad(v),
                [m, v, id = next_id()](Tape& t) {
                  const Matrix<T>& g = t.nodes_[id].grad;
                  const Matrix<T>& mv = t.value(m);
                  const Matrix<T>& vv = t.value(v);
                  if (t.requires_grad(m)) t.accum(m, peftlab::colwise_scale(g, vv));
                  if (t.requires_grad(v)) {
                    Matrix<T> gv(1, vv.cols());
                    for (std::size_t i = 0; i < mv.rows(); ++i)
                      for (std::size_t j = 0; j < mv.cols(); ++j)
                        gv.data()[j] += g(i, j) * mv(i, j);
                    t.accum(v, gv);
                  }
                });
  }

  NodeId scale_const(NodeId a, T s) {
    return push(peftlab::scale(value(a), s), requires_grad(a), [a, s, id = next_id()](Tape& t) {
      if (t.requires_grad(a)) t.accum(a, peftlab::scale(t.nodes_[id].grad, s));
    });
  }

  NodeId activation(Activation act, NodeId a) {
    return push(map_activation(act, value(a)), requires_grad(a),
                [a, act, id = next_id()](Tape& t) {
                  if (!t.requires_grad(a)) return;
                  const Matrix<T>& g = t.nodes_[id].grad;
                  const Matrix<T>& x = t.value(a);
                  Matrix<T> gx(x.rows(), x.cols());
                  for (std::size_t i = 0; i < x.size(); ++i)
                    gx.data()[i] = g.data()[i] * activation_grad(act, x.data()[i]);
                  t.accum(a, gx);
                });
  }

  NodeId rmsnorm(NodeId x, NodeId w) {
    Matrix<T> out = rmsnorm_rows(value(x), value(w));
    return push(std::move(out), requires_grad(x) || requires_grad(w),
                [x, w, id = next_id()](Tape& t) {
                  const Matrix<T>& g = t.nodes_[id].grad;
                  const Matrix<T>& xv = t.value(x);
                  const Matrix<T>& wv = t.value(w);
                  const std::size_t n = xv.cols();
                  Matrix<T> gx;
                  if (t.requires_grad(x)) gx = Matrix<T>(xv.rows(), n);
                  Matrix<T> gw;
                  if (t.requires_grad(w)) gw = Matrix<T>(1, n);
                  for (std::size_t i = 0; i < xv.rows(); ++i) {
                    T ss = T(0);
                    for (std::size_t j = 0; j < n; ++j) ss += xv(i, j) * xv(i, j);
                    const T inv =
                        T(1) / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kRmsNormEps));
                    if (t.requires_grad(x)) {
                      T dot = T(0);
                      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * wv.data()[j] * xv(i, j);
                      const T k = inv * inv * inv * dot / static_cast<T>(n);
                      for (std::size_t j = 0; j < n; ++j)
                        gx(i, j) = g(i, j) * wv.data()[j] * inv - xv(i, j) * k;
                    }
                    if (t.requires_grad(w))
                      for (std::size_t j = 0; j < n; ++j) gw.data()[j] += g(i, j) * xv(i, j) * inv;
                  }
                  if (t.requires_grad(x)) t.accum(x, gx);
                  if (t.requires_grad(w)) t.accum(w, gw);
                });
  }

  /// Rotary embedding on rows starting at absolute position start_pos.
  NodeId rope(NodeId x, std::uint32_t n_heads, std::size_t start_pos) {
    Matrix<T> out = value(x);
    rope_rotate_inplace(out, n_heads, start_pos);
    return push(std::move(out), requires_grad(x),
                [x, n_heads, start_pos, id = next_id()](Tape& t) {
                  if (!t.requires_grad(x)) return;
                  Matrix<T> gx = t.nodes_[id].grad;
                  rope_rotate_inverse_inplace(gx, n_heads, start_pos);
                  t.accum(x, gx);
                });
  }

  /// Scales row i's first (i+1) entries by inv_scale, masks the rest to -inf,
  /// then applies a row softmax. Matches the inference attention exactly for
  /// a full-sequence forward (row position == row index).
  NodeId causal_softmax(NodeId scores, T inv_scale) {
    const Matrix<T>& s = value(scores);
    if (s.rows() > s.cols()) throw DimensionError("causal_softmax: more rows than key positions");
    Matrix<T> masked = s;
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < masked.rows(); ++i) {
      T* row = masked.data() + i * masked.cols();
      const std::size_t visible = i + 1;
      for (std::size_t j = 0; j < visible; ++j) row[j] *= inv_scale;
      for (std::size_t j = visible; j < masked.cols(); ++j) row[j] = neg_inf;
    }
    Matrix<T> probs = softmax_rows(masked);
    return push(std::move(probs), requires_grad(scores),
                [scores, inv_scale, id = next_id()](Tape& t) {
                  if (!t.requires_grad(scores)) return;
                  const Matrix<T>& g = t.nodes_[id].grad;
                  const Matrix<T>& p = t.nodes_[id].value;
                  Matrix<T> gs(p.rows(), p.cols());
                  for (std::size_t i = 0; i < p.rows(); ++i) {
                    T dot = T(0);
                    for (std::size_t j = 0; j < p.cols(); ++j) dot += g(i, j) * p(i, j);
                    const std::size_t visible = i + 1;
                    for (std::size_t j = 0; j < visible; ++j)
                      gs(i, j) = inv_scale * p(i, j) * (g(i, j) - dot);
                  }
                  t.accum(scores, gs);
                });
  }

  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
    const Matrix<T>& v = value(a);
    if (r0 >= r1 || r1 > v.rows()) throw DimensionError("slice_rows: range out of bounds");
    Matrix<T> out(r1 - r0, v.cols());
    std::memcpy(out.data(), v.data() + r0 * v.cols(), out.size() * sizeof(T));
    return push(std::move(out), requires_grad(a), [a, r0, id = next_id()](Tape& t) {
      if (!t.requires_grad(a)) return;
      const Matrix<T>& g = t.nodes_[id].grad;
      const Matrix<T>& v = t.value(a);
      Matrix<T> ga(v.rows(), v.cols());
      std::memcpy(ga.data() + r0 * ga.cols(), g.data(), g.size() * sizeof(T));
      t.accum(a, ga);
    });
  }

  NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
    const Matrix<T>& v = value(a);
    if (c0 >= c1 || c1 > v.cols()) throw DimensionError("slice_cols: range out of bounds");
    Matrix<T> out(v.rows(), c1 - c0);
    for (std::size_t i = 0; i < v.rows(); ++i)
      std::memcpy(out.data() + i * out.cols(), v.data() + i * v.cols() + c0,
                  out.cols() * sizeof(T));
    return push(std::move(out), requires_grad(a), [a, c0, id = next_id()](Tape& t) {
      if (!t.requires_grad(a)) return;
      const Matrix<T>& g = t.nodes_[id].grad;
      const Matrix<T>& v = t.value(a);
      Matrix<T> ga(v.rows(), v.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        std::memcpy(ga.data() + i * ga.cols() + c0, g.data() + i * g.cols(),
                    g.cols() * sizeof(T));
      t.accum(a, ga);
    });
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    bool rg = false;
    for (NodeId p : parts) {
      if (value(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
      cols += value(p).cols();
      rg = rg || requires_grad(p);
    }
    Matrix<T> out(rows, cols);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const Matrix<T>& v = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(out.data() + i * cols + off, v.data() + i * v.cols(),
                    v.cols() * sizeof(T));
      off += v.cols();
    }
    return push(std::move(out), rg, [parts, id = next_id()](Tape& t) {
      const Matrix<T>& g = t.nodes_[id].grad;
      std::size_t off = 0;
      for (NodeId p : parts) {
        const std::size_t w = t.value(p).cols();
        if (t.requires_grad(p)) {
          Matrix<T> gp(g.rows(), w);
          for (std::size_t i = 0; i < g.rows(); ++i)
            std::memcpy(gp.data() + i * w, g.data() + i * g.cols() + off, w * sizeof(T));
          t.accum(p, gp);
        }
        off += w;
      }
    });
  }

  /// Row gather from an embedding table; scatter-add on the way back.
  NodeId embedding(NodeId table, std::vector<TokenId> tokens) {
    const Matrix<T>& tab = value(table);
    Matrix<T> out(tokens.size(), tab.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto t_ = tokens[i];
      if (t_ < 0 || static_cast<std::size_t>(t_) >= tab.rows())
        throw ValidationError("embedding: token id outside table");
      std::memcpy(out.data() + i * tab.cols(), tab.data() + static_cast<std::size_t>(t_) * tab.cols(),
                  tab.cols() * sizeof(T));
    }
    return push(std::move(out), requires_grad(table),
                [table, tokens = std::move(tokens), id = next_id()](Tape& t) {
                  if (!t.requires_grad(table)) return;
                  const Matrix<T>& g = t.nodes_[id].grad;
                  const Matrix<T>& tab = t.value(table);
                  Matrix<T> gt(tab.rows(), tab.cols());
                  for (std::size_t i = 0; i < tokens.size(); ++i) {
                    T* dst = gt.data() + static_cast<std::size_t>(tokens[i]) * gt.cols();
                    const T* src = g.data() + i * g.cols();
                    for (std::size_t j = 0; j < g.cols(); ++j) dst[j] += src[j];
                  }
                  t.accum(table, gt);
                });
  }

  /// Mean cross-entropy of row i against targets[i]; returns a 1x1 scalar.
  NodeId cross_entropy_mean(NodeId logits, std::vector<TokenId> targets) {
    const Matrix<T>& z = value(logits);
    if (targets.size() != z.rows())
      throw DimensionError("cross_entropy_mean: one target per logits row required");
    Matrix<T> probs(z.rows(), z.cols());
    T total = T(0);
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const auto t_ = targets[i];
      if (t_ < 0 || static_cast<std::size_t>(t_) >= z.cols())
        throw ValidationError("cross_entropy_mean: target id outside vocabulary");
      const T* row = z.data() + i * z.cols();
      T mx = row[0];
      for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (std::size_t j = 0; j < z.cols(); ++j) sum += std::exp(row[j] - mx);
      const T lse = std::log(sum) + mx;
      for (std::size_t j = 0; j < z.cols(); ++j) probs(i, j) = std::exp(row[j] - lse);
      total += lse - row[static_cast<std::size_t>(t_)];
    }
    Matrix<T> loss(1, 1);
    loss(0, 0) = total / static_cast<T>(z.rows());
    return push(std::move(loss), requires_grad(logits),
                [logits, targets = std::move(targets), probs = std::move(probs),
                 id = next_id()](Tape& t) {
                  if (!t.requires_grad(logits)) return;
                  const T g = t.nodes_[id].grad(0, 0);
                  const T invn = T(1) / static_cast<T>(probs.rows());
                  Matrix<T> gz = probs;
                  for (std::size_t i = 0; i < gz.rows(); ++i) {
                    gz(i, static_cast<std::size_t>(targets[i])) -= T(1);
                    for (std::size_t j = 0; j < gz.cols(); ++j) gz(i, j) *= g * invn;
                  }
                  t.accum(logits, gz);
                });
  }

  /// Mean of 1x1 scalars (batch loss over sequences).
  NodeId mean_of(const std::vector<NodeId>& scalars) {
    if (scalars.empty()) throw DimensionError("mean_of: no inputs");
    Matrix<T> out(1, 1);
    bool rg = false;
    for (NodeId s : scalars) {
      if (value(s).rows() != 1 || value(s).cols() != 1)
        throw DimensionError("mean_of: inputs must be scalars");
      out(0, 0) += value(s)(0, 0);
      rg = rg || requires_grad(s);
    }
    out(0, 0) /= static_cast<T>(scalars.size());
    return push(std::move(out), rg, [scalars, id = next_id()](Tape& t) {
      const T g = t.nodes_[id].grad(0, 0) / static_cast<T>(scalars.size());
      Matrix<T> gs(1, 1);
      gs(0, 0) = g;
      for (NodeId s : scalars)
        if (t.requires_grad(s)) t.accum(s, gs);
    });
  }

  /// Seeds d(root) = 1 and replays the tape in reverse. Root must be 1x1.
  void backward(NodeId root) {
    if (value(root).rows() != 1 || value(root).cols() != 1)
      throw DimensionError("backward: root must be a scalar");
    nodes_.at(root).grad = Matrix<T>::ones(1, 1);
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.back) n.back(*this);
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  NodeId next_id() const { return nodes_.size(); }

  NodeId push(Matrix<T> v, bool rg, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = rg;
    if (rg) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void accum(NodeId id, const Matrix<T>& g) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      add_inplace(n.grad, g);
    }
  }

  std::vector<Node> nodes_;
};

/// Adjoint of rope_rotate_inplace: rotation by the negated angles.
template <typename T>
void rope_rotate_inverse_inplace(Matrix<T>& x, std::uint32_t n_heads, std::size_t start_pos) {
  const std::size_t d = x.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("rope: width not divisible by head count");
  const std::size_t hd = d / n_heads;
  if (hd % 2 != 0) throw DimensionError("rope: head_dim must be even");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double pos = static_cast<double>(start_pos + i);
    T* row = x.data() + i * d;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* head = row + h * hd;
      for (std::size_t j = 0; j * 2 < hd; ++j) {
        const double theta = pos * std::pow(10000.0, -2.0 * static_cast<double>(j) /
                                                         static_cast<double>(hd));
        const T c = static_cast<T>(std::cos(theta));
        const T s = static_cast<T>(std::sin(theta));
        const T x0 = head[2 * j];
        const T x1 = head[2 * j + 1];
        head[2 * j] = x0 * c + x1 * s;
        head[2 * j + 1] = -x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace peftlab
