#pragma once

// Differentiable free functions over Tensor<S>. Every op computes its value
// eagerly and, when a Tape is active and some input needs gradients, records
// a closure that propagates the output gradient to its inputs.
//
// Determinism contract: all reduction orders are fixed by tensor shapes,
// never by the worker count. Parallel loops only split work whose per-item
// arithmetic is independent (disjoint output ranges, or whole GEMM batch
// elements), so results are bitwise reproducible for a given build.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <vector>

#include "fb/tensor.hpp"
#include "fb/threading.hpp"

namespace fb {

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, index_t start, index_t len);
template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm);

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const index_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const index_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Per-dimension element strides for reading `in` while iterating an index
// over `out`; broadcast dimensions get stride zero. `in` is right-aligned.
inline std::vector<index_t> bcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size(), ri = in.size();
  std::vector<index_t> strides(r, 0);
  const std::vector<index_t> in_strides = row_major_strides(in);
  for (std::size_t i = 0; i < ri; ++i) {
    strides[r - ri + i] = (in[i] == 1) ? 0 : in_strides[i];
  }
  return strides;
}

inline Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

// True when `small` (after dropping leading 1-extents) equals the trailing
// dims of `full`, so its flat index is simply (i mod numel(small)).
inline bool is_suffix_shape(const Shape& small, const Shape& full) {
  const Shape s = strip_leading_ones(small);
  if (s.size() > full.size()) return false;
  return std::equal(s.rbegin(), s.rend(), full.rbegin());
}

constexpr index_t kElemChunk = 1 << 15;

template <typename F>
void for_chunks(index_t n, F f) {
  const index_t chunks = (n + kElemChunk - 1) / kElemChunk;
  if (chunks <= 1) {
    f(index_t{0}, n);
    return;
  }
  parallel_for(chunks, [&](index_t c) {
    const index_t lo = c * kElemChunk;
    f(lo, std::min(n, lo + kElemChunk));
  });
}

template <typename S, typename F>
Tensor<S> map_unary(const Tensor<S>& a, F f) {
  Tensor<S> out(a.shape());
  const S* src = a.data();
  S* dst = out.data();
  for_chunks(a.numel(), [&](index_t lo, index_t hi) {
    for (index_t i = lo; i < hi; ++i) dst[i] = f(src[i]);
  });
  return out;
}

// Elementwise combine of two same-shape arrays (no broadcasting).
template <typename S, typename F>
Tensor<S> zip_same(const Tensor<S>& a, const Tensor<S>& b, F f) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* dst = out.data();
  for_chunks(a.numel(), [&](index_t lo, index_t hi) {
    for (index_t i = lo; i < hi; ++i) dst[i] = f(pa[i], pb[i]);
  });
  return out;
}

template <typename S, typename F>
Tensor<S> ew_binary(const Tensor<S>& a, const Tensor<S>& b, F f) {
  if (a.shape() == b.shape()) return zip_same(a, b, f);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor<S> out(out_shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* dst = out.data();
  const index_t n = out.numel();
  if (a.shape() == out_shape && is_suffix_shape(b.shape(), out_shape)) {
    const index_t bn = std::max<index_t>(b.numel(), 1);
    for_chunks(n, [&](index_t lo, index_t hi) {
      for (index_t i = lo; i < hi; ++i) dst[i] = f(pa[i], pb[i % bn]);
    });
    return out;
  }
  if (b.shape() == out_shape && is_suffix_shape(a.shape(), out_shape)) {
    const index_t an = std::max<index_t>(a.numel(), 1);
    for_chunks(n, [&](index_t lo, index_t hi) {
      for (index_t i = lo; i < hi; ++i) dst[i] = f(pa[i % an], pb[i]);
    });
    return out;
  }
  // General case: walk the output with a multi-index and per-input strides.
  const std::vector<index_t> sa = bcast_strides(a.shape(), out_shape);
  const std::vector<index_t> sb = bcast_strides(b.shape(), out_shape);
  const std::size_t r = out_shape.size();
  std::vector<index_t> idx(r, 0);
  index_t oa = 0, ob = 0;
  for (index_t i = 0; i < n; ++i) {
    dst[i] = f(pa[oa], pb[ob]);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
    }
  }
  return out;
}

// Sums `g` down to `target` (the reverse of broadcasting). Accumulation
// follows g's flat order, which depends only on shapes.
template <typename S>
Tensor<S> reduce_to_shape(const Tensor<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<S> out(target);
  const S* src = g.data();
  S* dst = out.data();
  const index_t n = g.numel();
  if (is_suffix_shape(target, g.shape())) {
    const index_t tn = std::max<index_t>(out.numel(), 1);
    for (index_t i = 0; i < n; ++i) dst[i % tn] += src[i];
    return out;
  }
  const Shape& gs = g.shape();
  const std::vector<index_t> st = bcast_strides(target, gs);
  const std::size_t r = gs.size();
  std::vector<index_t> idx(r, 0);
  index_t off = 0;
  for (index_t i = 0; i < n; ++i) {
    dst[off] += src[i];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < gs[d]) break;
      idx[d] = 0;
      off -= st[d] * gs[d];
    }
  }
  return out;
}

template <typename S>
void maybe_record(Tensor<S>& out, Tape<S>* tp, std::initializer_list<int> ins,
                  typename Tape<S>::BackFn back) {
  bool needs = false;
  for (int i : ins) needs = needs || tp->needs_grad(i);
  if (!needs) return;
  out.attach(tp, tp->record(out.shape(), ins, std::move(back)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style trailing broadcast)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary(a, b, [](S x, S y) { return x + y; });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a), nb = tp->node_of(b);
    detail::maybe_record(out, tp, {na, nb},
                         [na, nb, ash = a.shape(), bsh = b.shape()](Tape<S>& t, const Tensor<S>& g) {
                           if (t.wants(na)) t.accumulate(na, detail::reduce_to_shape(g, ash));
                           if (t.wants(nb)) t.accumulate(nb, detail::reduce_to_shape(g, bsh));
                         });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary(a, b, [](S x, S y) { return x - y; });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a), nb = tp->node_of(b);
    detail::maybe_record(out, tp, {na, nb},
                         [na, nb, ash = a.shape(), bsh = b.shape()](Tape<S>& t, const Tensor<S>& g) {
                           if (t.wants(na)) t.accumulate(na, detail::reduce_to_shape(g, ash));
                           if (t.wants(nb)) {
                             Tensor<S> ng = detail::map_unary(g, [](S x) { return -x; });
                             t.accumulate(nb, detail::reduce_to_shape(ng, bsh));
                           }
                         });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary(a, b, [](S x, S y) { return x * y; });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a), nb = tp->node_of(b);
    detail::maybe_record(
        out, tp, {na, nb},
        [na, nb, av = a.detach(), bv = b.detach()](Tape<S>& t, const Tensor<S>& g) {
          if (t.wants(na)) {
            Tensor<S> gb = detail::ew_binary(g, bv, [](S x, S y) { return x * y; });
            t.accumulate(na, detail::reduce_to_shape(gb, av.shape()));
          }
          if (t.wants(nb)) {
            Tensor<S> ga = detail::ew_binary(g, av, [](S x, S y) { return x * y; });
            t.accumulate(nb, detail::reduce_to_shape(ga, bv.shape()));
          }
        });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::map_unary(a, [c](S x) { return x * c; });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, c](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, detail::map_unary(g, [c](S x) { return x * c; }));
    });
  }
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<S> out(shape, std::vector<S>(a.vec()));
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, Tensor<S>(ash, std::vector<S>(g.vec())));
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
  const std::size_t r = a.shape().size();
  if (perm.size() != r) {
    throw ShapeError("permute: " + std::to_string(perm.size()) + " axes for rank " + std::to_string(r));
  }
  std::vector<char> seen(r, 0);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= r || seen[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid axis list");
    }
    seen[static_cast<std::size_t>(p)] = 1;
  }
  Shape out_shape(r);
  const std::vector<index_t> in_strides = row_major_strides(a.shape());
  std::vector<index_t> strides(r);
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = a.shape()[static_cast<std::size_t>(perm[d])];
    strides[d] = in_strides[static_cast<std::size_t>(perm[d])];
  }
  Tensor<S> out(out_shape);
  const S* src = a.data();
  S* dst = out.data();
  const index_t n = out.numel();
  if (r == 0 || n == 0) {
    if (n == 1) dst[0] = src[0];
    return out;
  }
  // Parallel over the leading output dimension; inner walk uses a
  // multi-index so arbitrary rank works.
  const index_t outer = out_shape[0];
  const index_t inner = n / std::max<index_t>(outer, 1);
  parallel_for(outer, [&](index_t o) {
    std::vector<index_t> idx(r, 0);
    idx[0] = o;
    index_t src_off = o * strides[0];
    index_t dst_off = o * inner;
    for (index_t i = 0; i < inner; ++i) {
      dst[dst_off + i] = src[src_off];
      for (std::size_t d = r; d-- > 1;) {
        ++idx[d];
        src_off += strides[d];
        if (idx[d] < out_shape[d]) break;
        idx[d] = 0;
        src_off -= strides[d] * out_shape[d];
      }
    }
  });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    std::vector<int> inv(r);
    for (std::size_t d = 0; d < r; ++d) inv[static_cast<std::size_t>(perm[d])] = static_cast<int>(d);
    detail::maybe_record(out, tp, {na}, [na, inv](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, permute(g, inv));
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  const int r = a.rank();
  if (r < 2) throw ShapeError("transpose_last2: rank " + std::to_string(r) + " tensor");
  std::vector<int> perm(static_cast<std::size_t>(r));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<std::size_t>(r - 2)], perm[static_cast<std::size_t>(r - 1)]);
  return permute(a, perm);
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  const int r = a.rank();
  if (b.rank() != r) throw ShapeError("concat: rank mismatch");
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  for (int d = 0; d < r; ++d) {
    if (d != axis && a.shape()[static_cast<std::size_t>(d)] != b.shape()[static_cast<std::size_t>(d)]) {
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " differ off axis " + std::to_string(axis));
    }
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] += b.shape()[static_cast<std::size_t>(axis)];
  Tensor<S> out(out_shape);
  index_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
  const index_t ma = a.shape()[static_cast<std::size_t>(axis)] * inner;
  const index_t mb = b.shape()[static_cast<std::size_t>(axis)] * inner;
  const S* pa = a.data();
  const S* pb = b.data();
  S* dst = out.data();
  for (index_t o = 0; o < outer; ++o) {
    std::memcpy(dst + o * (ma + mb), pa + o * ma, static_cast<std::size_t>(ma) * sizeof(S));
    std::memcpy(dst + o * (ma + mb) + ma, pb + o * mb, static_cast<std::size_t>(mb) * sizeof(S));
  }
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a), nb = tp->node_of(b);
    const index_t la = a.shape()[static_cast<std::size_t>(axis)];
    const index_t lb = b.shape()[static_cast<std::size_t>(axis)];
    detail::maybe_record(out, tp, {na, nb},
                         [na, nb, axis, la, lb](Tape<S>& t, const Tensor<S>& g) {
                           if (t.wants(na)) t.accumulate(na, slice(g, axis, index_t{0}, la));
                           if (t.wants(nb)) t.accumulate(nb, slice(g, axis, la, lb));
                         });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, index_t start, index_t len) {
  const int r = a.rank();
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  const index_t extent = a.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || len < 0 || start + len > extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") exceeds extent " + std::to_string(extent));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<S> out(out_shape);
  index_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];
  const S* src = a.data();
  S* dst = out.data();
  for (index_t o = 0; o < outer; ++o) {
    std::memcpy(dst + o * len * inner, src + (o * extent + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(S));
  }
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na},
                         [na, axis, start, extent, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
                           Tensor<S> ga(ash);
                           index_t outer2 = 1, inner2 = 1;
                           for (int d = 0; d < axis; ++d) outer2 *= ash[static_cast<std::size_t>(d)];
                           for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < ash.size(); ++d) {
                             inner2 *= ash[d];
                           }
                           const index_t len2 = g.shape()[static_cast<std::size_t>(axis)];
                           const S* gs = g.data();
                           S* gd = ga.data();
                           for (index_t o = 0; o < outer2; ++o) {
                             std::memcpy(gd + (o * extent + start) * inner2, gs + o * len2 * inner2,
                                         static_cast<std::size_t>(len2 * inner2) * sizeof(S));
                           }
                           t.accumulate(na, std::move(ga));
                         });
  }
  return out;
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape) {
  const Shape check = detail::broadcast_shape(a.shape(), shape);
  if (check != shape) {
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " +
                     shape_str(shape));
  }
  Tensor<S> zero(shape);
  Tensor<S> out = detail::ew_binary(a, zero, [](S x, S) { return x; });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, detail::reduce_to_shape(g, ash));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  const S* src = a.data();
  S acc = 0;
  const index_t n = a.numel();
  for (index_t i = 0; i < n; ++i) acc += src[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, Tensor<S>::full(ash, g.item()));
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const index_t n = a.numel();
  if (n == 0) throw ShapeError("mean: empty tensor");
  const S* src = a.data();
  S acc = 0;
  for (index_t i = 0; i < n; ++i) acc += src[i];
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, n, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, Tensor<S>::full(ash, g.item() / static_cast<S>(n)));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiplication (batched, broadcasting over batch dims)
// ---------------------------------------------------------------------------

namespace detail {

// C = op(A) * op(B) over broadcast batch dims, one Eigen GEMM per batch
// element. The batch split is fixed by the shapes, so the result does not
// depend on how many workers run.
template <typename S>
Tensor<S> batched_gemm(const Tensor<S>& a, const Tensor<S>& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t ra = a.shape().size(), rb = b.shape().size();
  const index_t a0 = a.shape()[ra - 2], a1 = a.shape()[ra - 1];
  const index_t b0 = b.shape()[rb - 2], b1 = b.shape()[rb - 1];
  const index_t m = ta ? a1 : a0, k = ta ? a0 : a1;
  const index_t kb = tb ? b1 : b0, n = tb ? b0 : b1;
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(a_batch, b_batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);

  std::vector<index_t> sa = bcast_strides(a_batch, batch);
  std::vector<index_t> sb = bcast_strides(b_batch, batch);
  const index_t mat_a = a0 * a1, mat_b = b0 * b1, mat_c = m * n;
  for (auto& s : sa) s *= mat_a;
  for (auto& s : sb) s *= mat_b;
  const index_t total = numel_of(batch);
  const std::size_t r = batch.size();
  const S* pa = a.data();
  const S* pb = b.data();
  S* pc = out.data();

  parallel_for(total, [&](index_t bi) {
    index_t rem = bi, ao = 0, bo = 0;
    for (std::size_t d = r; d-- > 0;) {
      const index_t id = rem % batch[d];
      rem /= batch[d];
      ao += id * sa[d];
      bo += id * sb[d];
    }
    ECMap<S> A(pa + ao, a0, a1);
    ECMap<S> B(pb + bo, b0, b1);
    EMap<S> C(pc + bi * mat_c, m, n);
    if (!ta && !tb) {
      C.noalias() = A * B;
    } else if (!ta && tb) {
      C.noalias() = A * B.transpose();
    } else if (ta && !tb) {
      C.noalias() = A.transpose() * B;
    } else {
      C.noalias() = A.transpose() * B.transpose();
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::batched_gemm(a, b, false, false);
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a), nb = tp->node_of(b);
    detail::maybe_record(
        out, tp, {na, nb},
        [na, nb, av = a.detach(), bv = b.detach()](Tape<S>& t, const Tensor<S>& g) {
          if (t.wants(na)) {
            Tensor<S> ga = detail::batched_gemm(g, bv, false, true);
            t.accumulate(na, detail::reduce_to_shape(ga, av.shape()));
          }
          if (t.wants(nb)) {
            Tensor<S> gb = detail::batched_gemm(av, g, true, false);
            t.accumulate(nb, detail::reduce_to_shape(gb, bv.shape()));
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-sequential matmul: x [..., d_in] times W [d_in, d_out].
//
// Every output row is produced by the identical accumulation sequence
// (ascending k, one chain per output column), independent of the row's
// position in the batch. Composed with other position-independent kernels
// this makes whole token-mixing stacks exactly equivariant under token
// permutation, which the plain blocked GEMM path does not guarantee at the
// bit level.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void rowseq_gemm(const S* x, const S* w, S* out, index_t rows, index_t din, index_t dout) {
  parallel_for(rows, [&](index_t r) {
    const S* xr = x + r * din;
    S* o = out + r * dout;
    for (index_t j = 0; j < dout; ++j) o[j] = S(0);
    for (index_t k = 0; k < din; ++k) {
      const S xv = xr[k];
      const S* wr = w + k * dout;
      for (index_t j = 0; j < dout; ++j) o[j] += xv * wr[j];
    }
  });
}

}  // namespace detail

template <typename S>
Tensor<S> matmul_rowseq(const Tensor<S>& x, const Tensor<S>& w) {
  if (x.rank() < 1 || w.rank() != 2) {
    throw ShapeError("matmul_rowseq: need x rank >= 1 and rank-2 weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const index_t din = x.shape().back();
  if (din != w.shape()[0]) {
    throw ShapeError("matmul_rowseq: inner dimensions differ: " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const index_t dout = w.shape()[1];
  const index_t rows = x.numel() / std::max<index_t>(din, 1);
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<S> out(out_shape);
  detail::rowseq_gemm(x.data(), w.data(), out.data(), rows, din, dout);
  if (Tape<S>* tp = Tape<S>::current()) {
    const int nx = tp->node_of(x), nw = tp->node_of(w);
    detail::maybe_record(
        out, tp, {nx, nw},
        [nx, nw, xv = x.detach(), wv = w.detach(), rows, din, dout](Tape<S>& t, const Tensor<S>& g) {
          detail::ECMap<S> G(g.data(), rows, dout);
          if (t.wants(nx)) {
            Tensor<S> gx(xv.shape());
            detail::EMap<S> GX(gx.data(), rows, din);
            detail::ECMap<S> W(wv.data(), din, dout);
            GX.noalias() = G * W.transpose();
            t.accumulate(nx, std::move(gx));
          }
          if (t.wants(nw)) {
            Tensor<S> gw(wv.shape());
            detail::EMap<S> GW(gw.data(), din, dout);
            detail::ECMap<S> X(xv.data(), rows, din);
            GW.noalias() = X.transpose() * G;
            t.accumulate(nw, std::move(gw));
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last dimension, with an optional additive mask whose
// entries are 0 (keep) or -inf (drop). Dropped positions come out exactly 0.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void softmax_rows(const S* src, S* dst, index_t rows, index_t cols) {
  parallel_for(rows, [&](index_t r) {
    const S* in = src + r * cols;
    S* out = dst + r * cols;
    S m = -std::numeric_limits<S>::infinity();
    for (index_t j = 0; j < cols; ++j) m = std::max(m, in[j]);
    if (!(m > -std::numeric_limits<S>::infinity())) {
      throw Error("softmax: fully masked row");
    }
    S den = 0;
    for (index_t j = 0; j < cols; ++j) {
      const S e = std::isinf(in[j]) && in[j] < 0 ? S(0) : std::exp(in[j] - m);
      out[j] = e;
      den += e;
    }
    for (index_t j = 0; j < cols; ++j) out[j] /= den;
  });
}

}  // namespace detail

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a, const Tensor<S>* mask = nullptr) {
  if (a.rank() < 1 || a.shape().back() == 0) {
    throw ShapeError("softmax: needs a non-empty last dimension, got " + shape_str(a.shape()));
  }
  if (mask && mask->requires_grad()) {
    throw ContractError("softmax: mask must not require gradients");
  }
  Tensor<S> masked =
      mask ? detail::ew_binary(a, *mask, [](S x, S m) { return x + m; }) : a.detach();
  const index_t cols = a.shape().back();
  const index_t rows = masked.numel() / cols;
  Tensor<S> out(masked.shape());
  detail::softmax_rows(masked.data(), out.data(), rows, cols);
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(
        out, tp, {na},
        [na, yv = out.detach(), rows, cols, ash = a.shape()](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> dx(yv.shape());
          const S* y = yv.data();
          const S* gp = g.data();
          S* d = dx.data();
          parallel_for(rows, [&](index_t r) {
            const index_t off = r * cols;
            S dot = 0;
            for (index_t j = 0; j < cols; ++j) dot += gp[off + j] * y[off + j];
            for (index_t j = 0; j < cols; ++j) {
              d[off + j] = (gp[off + j] - dot) * y[off + j];
            }
          });
          t.accumulate(na, detail::reduce_to_shape(dx, ash));
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
inline S gelu_fwd(S x) {
  constexpr S c = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S a = S(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename S>
inline S gelu_bwd(S x) {
  constexpr S c = S(0.7978845608028654);
  constexpr S a = S(0.044715);
  const S u = c * (x + a * x * x * x);
  const S th = std::tanh(u);
  const S sech2 = S(1) - th * th;
  return S(0.5) * (S(1) + th) + S(0.5) * x * sech2 * c * (S(1) + S(3) * a * x * x);
}

template <typename S>
inline S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace detail

// Gaussian error linear unit, tanh approximation.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  Tensor<S> out = detail::map_unary(a, [](S x) { return detail::gelu_fwd(x); });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, av = a.detach()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, detail::zip_same(g, av, [](S gi, S x) { return gi * detail::gelu_bwd(x); }));
    });
  }
  return out;
}

// x * sigmoid(x), exact.
template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  Tensor<S> out = detail::map_unary(a, [](S x) { return x * detail::sigmoid(x); });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int na = tp->node_of(a);
    detail::maybe_record(out, tp, {na}, [na, av = a.detach()](Tape<S>& t, const Tensor<S>& g) {
      t.accumulate(na, detail::zip_same(g, av, [](S gi, S x) {
                     const S s = detail::sigmoid(x);
                     return gi * s * (S(1) + x * (S(1) - s));
                   }));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation over the last dimension
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, S eps) {
  const index_t L = x.rank() >= 1 ? x.shape().back() : 0;
  if (L == 0) throw ShapeError("layernorm: needs a non-empty last dimension");
  if (w.shape() != Shape{L} || b.shape() != Shape{L}) {
    throw ShapeError("layernorm: weight/bias must have shape [" + std::to_string(L) + "]");
  }
  const index_t rows = x.numel() / L;
  Tensor<S> out(x.shape());
  Tensor<S> xhat(x.shape());
  Tensor<S> inv_std({rows});
  const S* xp = x.data();
  const S* wp = w.data();
  const S* bp = b.data();
  S* op = out.data();
  S* hp = xhat.data();
  S* ip = inv_std.data();
  parallel_for(rows, [&](index_t r) {
    const S* row = xp + r * L;
    S mu = 0;
    for (index_t j = 0; j < L; ++j) mu += row[j];
    mu /= static_cast<S>(L);
    S var = 0;
    for (index_t j = 0; j < L; ++j) {
      const S d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<S>(L);
    const S inv = S(1) / std::sqrt(var + eps);
    ip[r] = inv;
    for (index_t j = 0; j < L; ++j) {
      const S h = (row[j] - mu) * inv;
      hp[r * L + j] = h;
      op[r * L + j] = h * wp[j] + bp[j];
    }
  });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int nx = tp->node_of(x), nw = tp->node_of(w), nb = tp->node_of(b);
    detail::maybe_record(
        out, tp, {nx, nw, nb},
        [nx, nw, nb, xh = xhat.detach(), is = inv_std.detach(), wv = w.detach(), rows,
         L](Tape<S>& t, const Tensor<S>& g) {
          const S* gp = g.data();
          const S* hp2 = xh.data();
          const S* ip2 = is.data();
          const S* wp2 = wv.data();
          if (t.wants(nx)) {
            Tensor<S> dx(xh.shape());
            S* dp = dx.data();
            parallel_for(rows, [&](index_t r) {
              const index_t off = r * L;
              S mean_dh = 0, mean_dh_h = 0;
              for (index_t j = 0; j < L; ++j) {
                const S dh = gp[off + j] * wp2[j];
                mean_dh += dh;
                mean_dh_h += dh * hp2[off + j];
              }
              mean_dh /= static_cast<S>(L);
              mean_dh_h /= static_cast<S>(L);
              for (index_t j = 0; j < L; ++j) {
                const S dh = gp[off + j] * wp2[j];
                dp[off + j] = ip2[r] * (dh - mean_dh - hp2[off + j] * mean_dh_h);
              }
            });
            t.accumulate(nx, std::move(dx));
          }
          if (t.wants(nw)) {
            Tensor<S> dw({L});
            S* dwp = dw.data();
            for (index_t r = 0; r < rows; ++r) {
              for (index_t j = 0; j < L; ++j) dwp[j] += gp[r * L + j] * hp2[r * L + j];
            }
            t.accumulate(nw, std::move(dw));
          }
          if (t.wants(nb)) {
            Tensor<S> db({L});
            S* dbp = db.data();
            for (index_t r = 0; r < rows; ++r) {
              for (index_t j = 0; j < L; ++j) dbp[j] += gp[r * L + j];
            }
            t.accumulate(nb, std::move(db));
          }
        });
  }
  return out;
}

// Root-mean-square norm: y = x / sqrt(mean(x^2) + eps) * w. Token-local,
// so it commutes exactly with token permutations.
template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& w, S eps) {
  const index_t L = x.rank() >= 1 ? x.shape().back() : 0;
  if (L == 0) throw ShapeError("rmsnorm: needs a non-empty last dimension");
  if (w.shape() != Shape{L}) {
    throw ShapeError("rmsnorm: weight must have shape [" + std::to_string(L) + "]");
  }
  const index_t rows = x.numel() / L;
  Tensor<S> out(x.shape());
  Tensor<S> inv_rms({rows});
  const S* xp = x.data();
  const S* wp = w.data();
  S* op = out.data();
  S* ip = inv_rms.data();
  parallel_for(rows, [&](index_t r) {
    const S* row = xp + r * L;
    S ms = 0;
    for (index_t j = 0; j < L; ++j) ms += row[j] * row[j];
    ms /= static_cast<S>(L);
    const S inv = S(1) / std::sqrt(ms + eps);
    ip[r] = inv;
    for (index_t j = 0; j < L; ++j) op[r * L + j] = row[j] * inv * wp[j];
  });
  if (Tape<S>* tp = Tape<S>::current()) {
    const int nx = tp->node_of(x), nw = tp->node_of(w);
    detail::maybe_record(
        out, tp, {nx, nw},
        [nx, nw, xv = x.detach(), iv = inv_rms.detach(), wv = w.detach(), rows, L](
            Tape<S>& t, const Tensor<S>& g) {
          const S* gp = g.data();
          const S* xp2 = xv.data();
          const S* ip2 = iv.data();
          const S* wp2 = wv.data();
          if (t.wants(nx)) {
            Tensor<S> dx(xv.shape());
            S* dp = dx.data();
            parallel_for(rows, [&](index_t r) {
              const index_t off = r * L;
              const S inv = ip2[r];
              S dot = 0;
              for (index_t j = 0; j < L; ++j) dot += gp[off + j] * wp2[j] * xp2[off + j];
              const S k = dot * inv * inv * inv / static_cast<S>(L);
              for (index_t j = 0; j < L; ++j) {
                dp[off + j] = gp[off + j] * wp2[j] * inv - xp2[off + j] * k;
              }
            });
            t.accumulate(nx, std::move(dx));
          }
          if (t.wants(nw)) {
            Tensor<S> dw({L});
            S* dwp = dw.data();
            for (index_t r = 0; r < rows; ++r) {
              for (index_t j = 0; j < L; ++j) {
                dwp[j] += gp[r * L + j] * xp2[r * L + j] * ip2[r];
              }
            }
            t.accumulate(nw, std::move(dw));
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mean cross-entropy from raw logits [B, K] and integer labels.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<index_t>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [batch, classes], got " +
                     shape_str(logits.shape()));
  }
  const index_t B = logits.shape()[0], K = logits.shape()[1];
  if (B == 0 || K == 0) throw ShapeError("cross_entropy: empty logits");
  if (static_cast<index_t>(labels.size()) != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(B));
  }
  for (index_t i = 0; i < B; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= K) {
      throw Error("cross_entropy: label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                  " out of range for " + std::to_string(K) + " classes");
    }
  }
  Tensor<S> probs(logits.shape());
  detail::softmax_rows(logits.data(), probs.data(), B, K);
  const S* pp = probs.data();
  S loss = 0;
  for (index_t i = 0; i < B; ++i) {
    loss -= std::log(pp[i * K + labels[static_cast<std::size_t>(i)]]);
  }
  Tensor<S> out = Tensor<S>::scalar(loss / static_cast<S>(B));
  if (Tape<S>* tp = Tape<S>::current()) {
    const int nl = tp->node_of(logits);
    detail::maybe_record(out, tp, {nl},
                         [nl, pv = probs.detach(), labels, B, K](Tape<S>& t, const Tensor<S>& g) {
                           Tensor<S> dl(pv.shape());
                           const S* p = pv.data();
                           S* d = dl.data();
                           const S go = g.item() / static_cast<S>(B);
                           for (index_t i = 0; i < B; ++i) {
                             for (index_t j = 0; j < K; ++j) d[i * K + j] = p[i * K + j] * go;
                             d[i * K + labels[static_cast<std::size_t>(i)]] -= go;
                           }
                           t.accumulate(nl, std::move(dl));
                         });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention core.
//
// q, k, v: [B, H, T, hd]. keep_mask: empty, or B*T bytes, nonzero = real
// token. Masked keys receive exactly zero attention weight; a fully masked
// sequence is an error.
//
// canonical_order = false: per-(b,h) Eigen GEMMs, softmax in index order.
// canonical_order = true: every reduction that crosses the token axis runs
// in an order determined by the *values* (sorted), or is exactly
// order-invariant (max, fixed-k dot products), making the forward pass
// bitwise equivariant under token permutations. The backward pass always
// uses the fast path; only forward outputs carry the equivariance
// guarantee.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                         const std::vector<std::uint8_t>& keep_mask, S att_scale,
                         bool canonical_order) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q/k/v must share shape [B, H, T, hd], got " +
                     shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  }
  const index_t B = q.shape()[0], H = q.shape()[1], T = q.shape()[2], hd = q.shape()[3];
  const bool masked = !keep_mask.empty();
  if (masked) {
    if (static_cast<index_t>(keep_mask.size()) != B * T) {
      throw ShapeError("attention: mask has " + std::to_string(keep_mask.size()) +
                       " entries, expected " + std::to_string(B * T));
    }
    for (index_t b = 0; b < B; ++b) {
      bool any = false;
      for (index_t t = 0; t < T; ++t) any = any || keep_mask[static_cast<std::size_t>(b * T + t)];
      if (!any) throw Error("attention: sequence " + std::to_string(b) + " is fully masked");
    }
  }
  Tensor<S> out(q.shape());
  Tensor<S> probs({B, H, T, T});
  const S* qp = q.data();
  const S* kp = k.data();
  const S* vp = v.data();
  S* op = out.data();
  S* pp = probs.data();

  parallel_for(B * H, [&](index_t bh) {
    const index_t b = bh / H;
    const index_t off = bh * T * hd;
    const index_t poff = bh * T * T;
    const std::uint8_t* mrow = masked ? keep_mask.data() + b * T : nullptr;

    if (!canonical_order) {
      detail::ECMap<S> Q(qp + off, T, hd);
      detail::ECMap<S> K(kp + off, T, hd);
      detail::ECMap<S> V(vp + off, T, hd);
      detail::EMap<S> P(pp + poff, T, T);
      detail::EMap<S> O(op + off, T, hd);
      P.noalias() = Q * K.transpose();
      P *= att_scale;
      for (index_t i = 0; i < T; ++i) {
        S* row = pp + poff + i * T;
        S m = -std::numeric_limits<S>::infinity();
        for (index_t j = 0; j < T; ++j) {
          if (mrow && !mrow[j]) continue;
          m = std::max(m, row[j]);
        }
        S den = 0;
        for (index_t j = 0; j < T; ++j) {
          if (mrow && !mrow[j]) {
            row[j] = 0;
            continue;
          }
          row[j] = std::exp(row[j] - m);
          den += row[j];
        }
        for (index_t j = 0; j < T; ++j) row[j] /= den;
      }
      O.noalias() = P * V;
      return;
    }

    // Canonical path: scalar score dots (fixed k order, identical for every
    // token position), softmax denominator summed over ascending values,
    // and the value mix accumulated in an order keyed by (weight, V row),
    // which depends only on values, not token positions.
    std::vector<S> exps(static_cast<std::size_t>(T));
    std::vector<int> order(static_cast<std::size_t>(T));
    for (index_t i = 0; i < T; ++i) {
      S* prow = pp + poff + i * T;
      const S* qrow = qp + off + i * hd;
      S m = -std::numeric_limits<S>::infinity();
      for (index_t j = 0; j < T; ++j) {
        if (mrow && !mrow[j]) {
          prow[j] = 0;
          continue;
        }
        const S* krow = kp + off + j * hd;
        S s = 0;
        for (index_t c = 0; c < hd; ++c) s += qrow[c] * krow[c];
        s *= att_scale;
        prow[j] = s;
        m = std::max(m, s);
      }
      int n_ok = 0;
      for (index_t j = 0; j < T; ++j) {
        if (mrow && !mrow[j]) continue;
        const S e = std::exp(prow[j] - m);
        prow[j] = e;
        exps[static_cast<std::size_t>(n_ok++)] = e;
      }
      std::sort(exps.begin(), exps.begin() + n_ok);
      S den = 0;
      for (int j = 0; j < n_ok; ++j) den += exps[static_cast<std::size_t>(j)];
      for (index_t j = 0; j < T; ++j) {
        if (mrow && !mrow[j]) continue;
        prow[j] /= den;
      }
      n_ok = 0;
      for (index_t j = 0; j < T; ++j) {
        if (mrow && !mrow[j]) continue;
        order[static_cast<std::size_t>(n_ok++)] = static_cast<int>(j);
      }
      std::sort(order.begin(), order.begin() + n_ok, [&](int x, int y) {
        if (prow[x] != prow[y]) return prow[x] < prow[y];
        const S* vx = vp + off + static_cast<index_t>(x) * hd;
        const S* vy = vp + off + static_cast<index_t>(y) * hd;
        for (index_t c = 0; c < hd; ++c) {
          if (vx[c] != vy[c]) return vx[c] < vy[c];
        }
        return false;
      });
      S* orow = op + off + i * hd;
      for (index_t c = 0; c < hd; ++c) orow[c] = S(0);
      for (int jj = 0; jj < n_ok; ++jj) {
        const index_t j = order[static_cast<std::size_t>(jj)];
        const S wgt = prow[j];
        const S* vrow = vp + off + j * hd;
        for (index_t c = 0; c < hd; ++c) orow[c] += wgt * vrow[c];
      }
    }
  });

  if (Tape<S>* tp = Tape<S>::current()) {
    const int nq = tp->node_of(q), nk = tp->node_of(k), nv = tp->node_of(v);
    detail::maybe_record(
        out, tp, {nq, nk, nv},
        [nq, nk, nv, qv = q.detach(), kv = k.detach(), vv = v.detach(), pv = probs.detach(), B, H,
         T, hd, att_scale](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
          const S* qp2 = qv.data();
          const S* kp2 = kv.data();
          const S* vp2 = vv.data();
          const S* pp2 = pv.data();
          const S* gp = g.data();
          S* dqp = dq.data();
          S* dkp = dk.data();
          S* dvp = dv.data();
          parallel_for(B * H, [&](index_t bh) {
            const index_t off = bh * T * hd;
            const index_t poff = bh * T * T;
            detail::ECMap<S> Q(qp2 + off, T, hd);
            detail::ECMap<S> K(kp2 + off, T, hd);
            detail::ECMap<S> V(vp2 + off, T, hd);
            detail::ECMap<S> P(pp2 + poff, T, T);
            detail::ECMap<S> G(gp + off, T, hd);
            detail::EMap<S> DQ(dqp + off, T, hd);
            detail::EMap<S> DK(dkp + off, T, hd);
            detail::EMap<S> DV(dvp + off, T, hd);
            detail::EMat<S> DP(T, T);
            DP.noalias() = G * V.transpose();
            DV.noalias() = P.transpose() * G;
            detail::EMat<S> DS(T, T);
            for (index_t i = 0; i < T; ++i) {
              S dot = 0;
              for (index_t j = 0; j < T; ++j) dot += DP(i, j) * P(i, j);
              for (index_t j = 0; j < T; ++j) DS(i, j) = P(i, j) * (DP(i, j) - dot);
            }
            DQ.noalias() = DS * K;
            DQ *= att_scale;
            DK.noalias() = DS.transpose() * Q;
            DK *= att_scale;
          });
          if (t.wants(nq)) t.accumulate(nq, std::move(dq));
          if (t.wants(nk)) t.accumulate(nk, std::move(dk));
          if (t.wants(nv)) t.accumulate(nv, std::move(dv));
        });
  }
  return out;
}

}  // namespace fb
