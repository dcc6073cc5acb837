#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/core/graph.hpp"
#include "plab/core/kernels.hpp"
#include "plab/core/rng.hpp"
#include "plab/core/tensor.hpp"

namespace plab::ops {

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw Error("operation on a detached variable");
  return *a.graph;
}

inline void same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw Error("operands live on different graphs");
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(t.shape));
  }
}

/// True when `inner` matches the trailing dims of `outer`.
inline bool trailing_match(const Shape& outer, const Shape& inner) {
  if (inner.size() > outer.size()) return false;
  return std::equal(inner.rbegin(), inner.rend(), outer.rbegin());
}

}  // namespace detail

/// Matrix product. Rank-2 [m,k]x[k,n] or batched rank-3 [b,m,k]x[b,k,n].
inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b);
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  if (av.rank() == 2 && bv.rank() == 2) {
    m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) throw ShapeError("matmul: inner dims differ " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  } else if (av.rank() == 3 && bv.rank() == 3) {
    batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    if (bv.dim(0) != batch || bv.dim(1) != k) {
      throw ShapeError("matmul: batched dims differ " + shape_string(av.shape) + " x " + shape_string(bv.shape));
    }
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  }
  Shape out_shape = av.rank() == 2 ? Shape{m, n} : Shape{batch, m, n};
  Tensor out(out_shape, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    kernels::gemm_nn(av.data.data() + s * m * k, bv.data.data() + s * k * n, out.data.data() + s * m * n, m, k, n);
  }
  const NodeId ia = a.id, ib = b.id;
  return g.emit(std::move(out), {ia, ib},
                [ia, ib, batch, m, k, n](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    const Tensor& bv = gr.value(ib);
                    for (std::size_t s = 0; s < batch; ++s) {
                      kernels::gemm_nt(go.data.data() + s * m * n, bv.data.data() + s * k * n,
                                       ga->data.data() + s * m * k, m, n, k);
                    }
                  }
                  if (Tensor* gb = gr.grad_buffer(ib)) {
                    const Tensor& av = gr.value(ia);
                    for (std::size_t s = 0; s < batch; ++s) {
                      kernels::gemm_tn(av.data.data() + s * m * k, go.data.data() + s * m * n,
                                       gb->data.data() + s * k * n, m, k, n);
                    }
                  }
                },
                "matmul");
}

/// Affine map over the last axis: x[..., in] * w[in, out] + bias[out].
inline Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt) {
  detail::same_graph(x, w);
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_rank(wv, 2, "linear");
  if (xv.rank() < 1 || xv.shape.back() != wv.dim(0)) {
    throw ShapeError("linear: input " + shape_string(xv.shape) + " does not match weight " + shape_string(wv.shape));
  }
  const std::size_t in = wv.dim(0), outd = wv.dim(1), rows = xv.size() / in;
  Shape out_shape = xv.shape;
  out_shape.back() = outd;
  Tensor out(out_shape, 0.0);
  std::vector<NodeId> inputs{x.id, w.id};
  if (bias) {
    detail::same_graph(x, *bias);
    const Tensor& bv = bias->value();
    if (bv.rank() != 1 || bv.dim(0) != outd) throw ShapeError("linear: bias shape " + shape_string(bv.shape));
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + r * outd);
    inputs.push_back(bias->id);
  }
  kernels::gemm_nn(xv.data.data(), wv.data.data(), out.data.data(), rows, in, outd);
  const NodeId ix = x.id, iw = w.id;
  const std::optional<NodeId> ib = bias ? std::optional<NodeId>(bias->id) : std::nullopt;
  return g.emit(std::move(out), std::move(inputs),
                [ix, iw, ib, rows, in, outd](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    kernels::gemm_nt(go.data.data(), gr.value(iw).data.data(), gx->data.data(), rows, outd, in);
                  }
                  if (Tensor* gw = gr.grad_buffer(iw)) {
                    kernels::gemm_tn(gr.value(ix).data.data(), go.data.data(), gw->data.data(), rows, in, outd);
                  }
                  if (ib) {
                    if (Tensor* gb = gr.grad_buffer(*ib)) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const double* gr_row = go.data.data() + r * outd;
                        for (std::size_t j = 0; j < outd; ++j) (*gb)[j] += gr_row[j];
                      }
                    }
                  }
                },
                "linear");
}

/// Elementwise sum. `b` may match `a` or only its trailing dims (broadcast).
inline Var add(Var a, Var b) {
  detail::same_graph(a, b);
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::trailing_match(av.shape, bv.shape)) {
    throw ShapeError("add: cannot broadcast " + shape_string(bv.shape) + " onto " + shape_string(av.shape));
  }
  const std::size_t inner = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  const NodeId ia = a.id, ib = b.id;
  return g.emit(std::move(out), {ia, ib},
                [ia, ib, inner](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  }
                  if (Tensor* gb = gr.grad_buffer(ib)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % inner] += go[i];
                  }
                },
                "add");
}

/// Elementwise product with the same broadcasting rule as add().
inline Var mul(Var a, Var b) {
  detail::same_graph(a, b);
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::trailing_match(av.shape, bv.shape)) {
    throw ShapeError("mul: cannot broadcast " + shape_string(bv.shape) + " onto " + shape_string(av.shape));
  }
  const std::size_t inner = bv.size();
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % inner];
  const NodeId ia = a.id, ib = b.id;
  return g.emit(std::move(out), {ia, ib},
                [ia, ib, inner](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& av = gr.value(ia);
                  const Tensor& bv = gr.value(ib);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bv[i % inner];
                  }
                  if (Tensor* gb = gr.grad_buffer(ib)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % inner] += go[i] * av[i];
                  }
                },
                "mul");
}

inline Var scale(Var a, double c) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  const NodeId ia = a.id;
  return g.emit(std::move(out), {ia},
                [ia, c](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += c * go[i];
                  }
                },
                "scale");
}

inline Var add_scalar(Var a, double c) {
  Graph& g = detail::graph_of(a);
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  const NodeId ia = a.id;
  return g.emit(std::move(out), {ia},
                [ia](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  }
                },
                "add_scalar");
}

/// Axis permutation for tensors of rank <= 4.
inline Var permute(Var a, const std::vector<std::size_t>& perm) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  const std::size_t r = av.rank();
  if (perm.size() != r || r > 4) throw ShapeError("permute: bad permutation for shape " + shape_string(av.shape));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid axis order");
    seen[p] = true;
  }
  std::array<std::size_t, 4> in_dims{1, 1, 1, 1}, in_strides{0, 0, 0, 0};
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_dims[i] = av.dim(i);
    in_strides[i] = stride;
    stride *= av.dim(i);
  }
  Shape out_shape(r);
  std::array<std::size_t, 4> out_dims{1, 1, 1, 1}, src_strides{0, 0, 0, 0};
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_dims[perm[i]];
    out_dims[i] = out_shape[i];
    src_strides[i] = in_strides[perm[i]];
  }
  // Map each output linear index to its source index once; reused by backward.
  std::vector<std::size_t> src(av.size());
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < out_dims[0]; ++i0)
    for (std::size_t i1 = 0; i1 < out_dims[1]; ++i1)
      for (std::size_t i2 = 0; i2 < out_dims[2]; ++i2)
        for (std::size_t i3 = 0; i3 < out_dims[3]; ++i3)
          src[o++] = i0 * src_strides[0] + i1 * src_strides[1] + i2 * src_strides[2] + i3 * src_strides[3];
  Tensor out(out_shape, 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = av[src[i]];
  const NodeId ia = a.id;
  return g.emit(std::move(out), {ia},
                [ia, src = std::move(src)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < src.size(); ++i) (*ga)[src[i]] += go[i];
                  }
                },
                "permute");
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Var transpose(Var a) {
  const std::size_t r = a.value().rank();
  if (r == 2) return permute(a, {1, 0});
  if (r == 3) return permute(a, {0, 2, 1});
  throw ShapeError("transpose: expected rank 2 or 3, got " + shape_string(a.value().shape));
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = detail::graph_of(a);
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("reshape: " + shape_string(a.value().shape) + " -> " + shape_string(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  const NodeId ia = a.id;
  return g.emit(std::move(out), {ia},
                [ia](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  }
                },
                "reshape");
}

/// Concatenation along `axis`; all other dims must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = detail::graph_of(parts.front());
  const Shape& first = parts.front().value().shape;
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    detail::same_graph(parts.front(), p);
    const Shape& s = p.value().shape;
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) throw ShapeError("concat: dim mismatch " + shape_string(s) + " vs " + shape_string(first));
    }
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  for (const Var& p : parts) widths.push_back(p.value().shape[axis] * inner);
  const std::size_t out_row = out_shape[axis] * inner;
  Tensor out(out_shape, 0.0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data.begin() + o * widths[k], widths[k], out.data.begin() + o * out_row + offset);
    }
    offset += widths[k];
  }
  return g.emit(std::move(out), ids,
                [ids, widths, outer, out_row](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (Tensor* gp = gr.grad_buffer(ids[k])) {
                      for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t j = 0; j < widths[k]; ++j) (*gp)[o * widths[k] + j] += go[o * out_row + off + j];
                      }
                    }
                    off += widths[k];
                  }
                },
                "concat");
}

/// Contiguous range [start, start+len) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = a.value();
  if (axis >= av.rank() || start + len > av.dim(axis) || len == 0) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " of " + shape_string(av.shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= av.dim(d);
  for (std::size_t d = axis + 1; d < av.rank(); ++d) inner *= av.dim(d);
  const std::size_t in_row = av.dim(axis) * inner, out_row = len * inner, off = start * inner;
  Shape out_shape = av.shape;
  out_shape[axis] = len;
  Tensor out(out_shape, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data.begin() + o * in_row + off, out_row, out.data.begin() + o * out_row);
  }
  const NodeId ia = a.id;
  return g.emit(std::move(out), {ia},
                [ia, outer, in_row, out_row, off](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* ga = gr.grad_buffer(ia)) {
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t j = 0; j < out_row; ++j) (*ga)[o * in_row + off + j] += go[o * out_row + j];
                    }
                  }
                },
                "slice");
}

/// Row lookup: table[V,D] indexed by ids (with shape ids_shape) -> ids_shape + [D].
inline Var embedding(Var table, std::span<const int> ids, const Shape& ids_shape) {
  Graph& g = detail::graph_of(table);
  const Tensor& tv = table.value();
  detail::require_rank(tv, 2, "embedding");
  if (shape_size(ids_shape) != ids.size()) throw ShapeError("embedding: id count does not match id shape");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out(out_shape, 0.0);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(idx[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(tv.data.begin() + static_cast<std::size_t>(idx[i]) * d, d, out.data.begin() + i * d);
  }
  const NodeId it = table.id;
  return g.emit(std::move(out), {it},
                [it, idx = std::move(idx), d](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gt = gr.grad_buffer(it)) {
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                      double* row = gt->data.data() + static_cast<std::size_t>(idx[i]) * d;
                      for (std::size_t j = 0; j < d; ++j) row[j] += go[i * d + j];
                    }
                  }
                },
                "embedding");
}

/// Row gather on a rank-2 tensor: x[N,D] -> x[indices,:].
inline Var gather_rows(Var x, std::vector<std::size_t> indices) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "gather_rows");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor out(Shape{indices.size(), d}, 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data.begin() + indices[i] * d, d, out.data.begin() + i * d);
  }
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, indices = std::move(indices), d](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (std::size_t i = 0; i < indices.size(); ++i) {
                      for (std::size_t j = 0; j < d; ++j) (*gx)[indices[i] * d + j] += go[i * d + j];
                    }
                  }
                },
                "gather_rows");
}

/// Layer normalization over the last axis with affine gamma/beta.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape.back();
  if (gamma.value().shape != Shape{d} || beta.value().shape != Shape{d}) {
    throw ShapeError("layernorm: affine params must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = xv.size() / d;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape, 0.0);
  std::vector<double> xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const NodeId ix = x.id, ig = gamma.id, ib = beta.id;
  return g.emit(std::move(out), {ix, ig, ib},
                [ix, ig, ib, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& gv = gr.value(ig);
                  if (Tensor* gg = gr.grad_buffer(ig)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gg)[i % d] += go[i] * xhat[i];
                  }
                  if (Tensor* gb = gr.grad_buffer(ib)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i % d] += go[i];
                  }
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double sum_dh = 0.0, sum_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = go[r * d + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * d + j];
                      }
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = go[r * d + j] * gv[j];
                        (*gx)[r * d + j] += inv_std[r] * (dh - inv_d * sum_dh - xhat[r * d + j] * inv_d * sum_dh_h);
                      }
                    }
                  }
                },
                "layernorm");
}

namespace detail {

inline Var softmax_impl(Var x, const Tensor* mask) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("softmax: scalar input");
  if (mask != nullptr && mask->shape != xv.shape) {
    throw ShapeError("masked_softmax: mask " + shape_string(mask->shape) + " vs input " + shape_string(xv.shape));
  }
  const std::size_t d = xv.shape.back(), rows = xv.size() / d;
  Tensor out(xv.shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data.data() + r * d;
    double* yr = out.data.data() + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < d; ++j) {
      if (mask != nullptr && (*mask)[r * d + j] == 0.0) continue;
      mx = std::max(mx, xr[j]);
      any = true;
    }
    if (!any) continue;  // fully masked row stays zero
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (mask != nullptr && (*mask)[r * d + j] == 0.0) continue;
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
  }
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, d, rows](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& y = gr.value(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
                      for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += y[r * d + j] * (go[r * d + j] - dot);
                    }
                  }
                },
                mask != nullptr ? "masked_softmax" : "softmax");
}

}  // namespace detail

/// Softmax over the last axis.
inline Var softmax(Var x) { return detail::softmax_impl(x, nullptr); }

/// Softmax over the last axis restricted to entries where mask != 0. Masked
/// entries get probability 0; a fully masked row yields all zeros.
inline Var masked_softmax(Var x, const Tensor& mask) { return detail::softmax_impl(x, &mask); }

/// Exact (erf-based) GELU.
inline Var gelu(Var x) {
  Graph& g = detail::graph_of(x);
  Tensor out = x.value();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& xv = gr.value(ix);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    constexpr double inv_sqrt2 = 0.70710678118654752440;
                    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                    for (std::size_t i = 0; i < go.size(); ++i) {
                      const double v = xv[i];
                      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                      (*gx)[i] += go[i] * (cdf + v * pdf);
                    }
                  }
                },
                "gelu");
}

/// Inverted dropout. The keep mask is a pure function of (seed, element index),
/// so equal seeds give equal masks. p == 0 returns x unchanged.
inline Var dropout(Var x, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (p == 0.0) return x;
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(xv.size());
  Tensor out(xv.shape, 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = unit_double(mix64(seed ^ mix64(i))) < p ? 0.0 : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, mask = std::move(mask)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * mask[i];
                  }
                },
                "dropout");
}

inline Var sum(Var x) {
  Graph& g = detail::graph_of(x);
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const NodeId ix = x.id;
  return g.emit(Tensor::scalar(s), {ix},
                [ix](Graph& gr, NodeId self) {
                  const double go = gr.grad(self).item();
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (double& v : gx->data) v += go;
                  }
                },
                "sum");
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Sum along one axis (the axis is removed).
inline Var sum_axis(Var x, std::size_t axis) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw ShapeError("sum_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = xv.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= xv.dim(d);
  for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.dim(d);
  Shape out_shape = xv.shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, outer, len, inner](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t l = 0; l < len; ++l)
                        for (std::size_t i = 0; i < inner; ++i) (*gx)[(o * len + l) * inner + i] += go[o * inner + i];
                  }
                },
                "sum_axis");
}

inline Var mean_axis(Var x, std::size_t axis) {
  const std::size_t len = x.value().shape.at(axis);
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(len));
}

/// Mean cross-entropy of logits[N,V] against integer targets over rows with
/// weight != 0. Each selected row contributes weight * CE; the result is
/// divided by the total weight.
inline Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> row_weights = {}) {
  Graph& g = detail::graph_of(logits);
  const Tensor& lv = logits.value();
  detail::require_rank(lv, 2, "cross_entropy");
  const std::size_t n = lv.dim(0), v = lv.dim(1);
  if (targets.size() != n) throw ShapeError("cross_entropy: target count differs from row count");
  std::vector<double> w(n, 1.0);
  if (!row_weights.empty()) {
    if (row_weights.size() != n) throw ShapeError("cross_entropy: weight count differs from row count");
    w.assign(row_weights.begin(), row_weights.end());
  }
  double total_w = 0.0;
  for (double x : w) total_w += x;
  if (total_w <= 0.0) throw Error("cross_entropy: no target rows selected");
  std::vector<double> probs(lv.size(), 0.0);
  std::vector<int> tgt(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (w[r] == 0.0) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) throw ShapeError("cross_entropy: target id out of range");
    const double* lr = lv.data.data() + r * v;
    const double mx = *std::max_element(lr, lr + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(lr[j] - mx);
      s += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= s;
    loss += w[r] * (std::log(s) + mx - lr[static_cast<std::size_t>(tgt[r])]);
  }
  loss /= total_w;
  const NodeId il = logits.id;
  return g.emit(Tensor::scalar(loss), {il},
                [il, n, v, total_w, w = std::move(w), probs = std::move(probs), tgt = std::move(tgt)](Graph& gr,
                                                                                                         NodeId self) {
                  const double go = gr.grad(self).item();
                  if (Tensor* gl = gr.grad_buffer(il)) {
                    for (std::size_t r = 0; r < n; ++r) {
                      if (w[r] == 0.0) continue;
                      const double c = go * w[r] / total_w;
                      for (std::size_t j = 0; j < v; ++j) (*gl)[r * v + j] += c * probs[r * v + j];
                      (*gl)[r * v + static_cast<std::size_t>(tgt[r])] -= c;
                    }
                  }
                },
                "cross_entropy");
}

/// Scales every vector along the last axis to unit L2 norm (norm guarded by eps).
inline Var l2_normalize(Var x, double eps = 1e-12) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape.back(), rows = xv.size() / d;
  Tensor out(xv.shape, 0.0);
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
  }
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, d, rows, norms = std::move(norms)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& y = gr.value(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
                      for (std::size_t j = 0; j < d; ++j) {
                        (*gx)[r * d + j] += (go[r * d + j] - y[r * d + j] * dot) / norms[r];
                      }
                    }
                  }
                },
                "l2_normalize");
}

/// Mean over positions with mask != 0: h[B,T,D], mask[B,T] -> [B,D].
inline Var masked_mean_pool(Var h, const Tensor& mask) {
  Graph& g = detail::graph_of(h);
  const Tensor& hv = h.value();
  detail::require_rank(hv, 3, "masked_mean_pool");
  const std::size_t b = hv.dim(0), t = hv.dim(1), d = hv.dim(2);
  if (mask.shape != Shape{b, t}) throw ShapeError("masked_mean_pool: mask shape " + shape_string(mask.shape));
  std::vector<double> inv_count(b, 0.0);
  Tensor out(Shape{b, d}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    double c = 0.0;
    for (std::size_t p = 0; p < t; ++p) c += mask[i * t + p] != 0.0 ? 1.0 : 0.0;
    if (c == 0.0) throw Error("masked_mean_pool: row " + std::to_string(i) + " is all padding");
    inv_count[i] = 1.0 / c;
    for (std::size_t p = 0; p < t; ++p) {
      if (mask[i * t + p] == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += hv[(i * t + p) * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv_count[i];
  }
  const NodeId ih = h.id;
  return g.emit(std::move(out), {ih},
                [ih, b, t, d, mask, inv_count = std::move(inv_count)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  if (Tensor* gh = gr.grad_buffer(ih)) {
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t p = 0; p < t; ++p) {
                        if (mask[i * t + p] == 0.0) continue;
                        for (std::size_t j = 0; j < d; ++j) (*gh)[(i * t + p) * d + j] += go[i * d + j] * inv_count[i];
                      }
                  }
                },
                "masked_mean_pool");
}

/// Column standardization over rows: (x - mean) / sqrt(var + eps), population variance.
inline Var standardize_columns(Var x, double eps = 1e-5) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = x.value();
  detail::require_rank(xv, 2, "standardize_columns");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor out(xv.shape, 0.0);
  std::vector<double> inv_std(d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xv[i * d + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xv[i * d + j] - mean) * (xv[i * d + j] - mean);
    var /= static_cast<double>(n);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[i * d + j] = (xv[i * d + j] - mean) * inv_std[j];
  }
  const NodeId ix = x.id;
  return g.emit(std::move(out), {ix},
                [ix, n, d, inv_std = std::move(inv_std)](Graph& gr, NodeId self) {
                  const Tensor& go = gr.grad(self);
                  const Tensor& y = gr.value(self);
                  if (Tensor* gx = gr.grad_buffer(ix)) {
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t j = 0; j < d; ++j) {
                      double s = 0.0, sy = 0.0;
                      for (std::size_t i = 0; i < n; ++i) {
                        s += go[i * d + j];
                        sy += go[i * d + j] * y[i * d + j];
                      }
                      for (std::size_t i = 0; i < n; ++i) {
                        (*gx)[i * d + j] += inv_std[j] * (go[i * d + j] - inv_n * s - inv_n * y[i * d + j] * sy);
                      }
                    }
                  }
                },
                "standardize_columns");
}

}  // namespace plab::ops
