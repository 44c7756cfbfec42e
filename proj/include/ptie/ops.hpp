#pragma once

// Differentiable operations over Tensor<S>: the set a transformer needs.
// Forward paths run with or without the tape; backward closures accumulate
// into parent grads. Group loops write disjoint outputs so they can run in
// parallel; cross-group reductions stay serial (or a single GEMM) to keep
// results deterministic for a fixed thread count.

#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

#include "ptie/tensor.hpp"

namespace ptie {

namespace detail {

// Splits an (m x k) * (k x n) product into row blocks across threads.
template <class S>
void gemm_rows_parallel(const S* a, int64_t m, int64_t k, const S* b, int64_t n, bool tb,
                        S* c) {
  const int64_t flops = 2 * m * k * n;
  const int threads = hardware_threads();
  const int64_t want_blocks = threads > 1 && flops >= (int64_t(1) << 21) ? threads : 1;
  const int64_t nb = std::max<int64_t>(1, std::min<int64_t>(want_blocks, m / 64));
  if (nb <= 1) {
    if (tb) gemm<S>(a, m, k, false, b, n, k, true, c, false);
    else gemm<S>(a, m, k, false, b, k, n, false, c, false);
    return;
  }
  const int64_t rows_per = (m + nb - 1) / nb;
  parallel_for(nb, [&](int64_t bi) {
    const int64_t r0 = bi * rows_per;
    const int64_t rows = std::min(rows_per, m - r0);
    if (rows <= 0) return;
    if (tb) gemm<S>(a + r0 * k, rows, k, false, b, n, k, true, c + r0 * n, false);
    else gemm<S>(a + r0 * k, rows, k, false, b, k, n, false, c + r0 * n, false);
  });
}

}  // namespace detail

// ----------------------------- matmul -----------------------------
// a: [m,k] or [G,m,k]; b: [k,n] / [n,k] (tb) broadcast over groups, or
// [G,k,n] / [G,n,k] matching groups.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool tb = false) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("matmul: a must be 2-D or 3-D");
  if (b.ndim() != 2 && b.ndim() != 3) throw ShapeError("matmul: b must be 2-D or 3-D");
  const bool batched_a = a.ndim() == 3;
  const bool batched_b = b.ndim() == 3;
  if (batched_b && !batched_a) throw ShapeError("matmul: batched b needs batched a");
  const int64_t G = batched_a ? a.dim(0) : 1;
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t bk = tb ? b.dim(-1) : b.dim(-2);
  const int64_t n = tb ? b.dim(-2) : b.dim(-1);
  if (bk != k)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                     shape_str(b.shape) + (tb ? "^T" : ""));
  if (batched_b && b.dim(0) != G) throw ShapeError("matmul: group counts disagree");

  Shape out_shape = batched_a ? Shape{G, m, n} : Shape{m, n};
  const int64_t bstride = batched_b ? b.dim(-2) * b.dim(-1) : 0;

  Tensor<S> out = detail::make_result<S>(
      std::move(out_shape), {a, b}, [G, m, k, n, tb, bstride](const Tensor<S>& o) {
        const Tensor<S>& A = o.node->parents[0];
        const Tensor<S>& B = o.node->parents[1];
        const S* gp = o.gptr();
        if (A.requires_grad) {
          S* ga = A.grad->data();
          const S* bp = B.ptr();
          // dA[g] = dC[g] * B or dC[g] * B^T depending on tb.
          parallel_for(G, [&](int64_t g) {
            const S* dg = gp + g * m * n;
            const S* bg = bp + g * bstride;
            if (tb) detail::gemm<S>(dg, m, n, false, bg, n, k, false, ga + g * m * k, true);
            else detail::gemm<S>(dg, m, n, false, bg, k, n, true, ga + g * m * k, true);
          });
        }
        if (B.requires_grad) {
          S* gb = B.grad->data();
          const S* ap = A.ptr();
          if (bstride == 0) {
            // Broadcast weight: one flat GEMM keeps accumulation deterministic.
            if (tb) detail::gemm<S>(gp, G * m, n, true, ap, G * m, k, false, gb, true);
            else detail::gemm<S>(ap, G * m, k, true, gp, G * m, n, false, gb, true);
          } else {
            parallel_for(G, [&](int64_t g) {
              const S* dg = gp + g * m * n;
              const S* ag = ap + g * m * k;
              if (tb) detail::gemm<S>(dg, m, n, true, ag, m, k, false, gb + g * bstride, true);
              else detail::gemm<S>(ag, m, k, true, dg, m, n, false, gb + g * bstride, true);
            });
          }
        }
      });

  const S* ap = a.ptr();
  const S* bp = b.ptr();
  S* cp = out.ptr();
  if (!batched_a) {
    detail::gemm_rows_parallel(ap, m, k, bp, n, tb, cp);
  } else {
    parallel_for(G, [&](int64_t g) {
      const S* bg = bp + g * bstride;
      if (tb) detail::gemm<S>(ap + g * m * k, m, k, false, bg, n, k, true, cp + g * m * n, false);
      else detail::gemm<S>(ap + g * m * k, m, k, false, bg, k, n, false, cp + g * m * n, false);
    });
  }
  return out;
}

// ----------------------------- elementwise -----------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) throw ShapeError("add: shape mismatch");
  Tensor<S> out = detail::make_result<S>(a.shape, {a, b}, [](const Tensor<S>& o) {
    const S* g = o.gptr();
    const int64_t n = o.numel();
    for (int p = 0; p < 2; ++p) {
      const Tensor<S>& par = o.node->parents[p];
      if (!par.requires_grad) continue;
      S* pg = par.grad->data();
      parallel_for(n, [&](int64_t i) { pg[i] += g[i]; }, int64_t(1) << 14);
    }
  });
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* pc = out.ptr();
  const int64_t n = out.numel();
  parallel_for(n, [&](int64_t i) { pc[i] = pa[i] + pb[i]; }, int64_t(1) << 14);
  return out;
}

template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  const int64_t d = x.dim(-1);
  if (bias.ndim() != 1 || bias.dim(0) != d) throw ShapeError("add_bias: bias size mismatch");
  const int64_t rows = x.numel() / d;
  Tensor<S> out = detail::make_result<S>(x.shape, {x, bias}, [rows, d](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    const Tensor<S>& B = o.node->parents[1];
    const S* g = o.gptr();
    if (X.requires_grad) {
      S* xg = X.grad->data();
      const int64_t n = o.numel();
      parallel_for(n, [&](int64_t i) { xg[i] += g[i]; }, int64_t(1) << 14);
    }
    if (B.requires_grad) {
      S* bg = B.grad->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * d;
        for (int64_t c = 0; c < d; ++c) bg[c] += gr[c];
      }
    }
  });
  const S* px = x.ptr();
  const S* pb = bias.ptr();
  S* pc = out.ptr();
  parallel_for(rows, [&](int64_t r) {
    const S* xr = px + r * d;
    S* cr = pc + r * d;
    for (int64_t c = 0; c < d; ++c) cr[c] = xr[c] + pb[c];
  }, 64);
  return out;
}

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_bias(matmul(x, w), b);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) throw ShapeError("mul: shape mismatch");
  Tensor<S> out = detail::make_result<S>(a.shape, {a, b}, [](const Tensor<S>& o) {
    const Tensor<S>& A = o.node->parents[0];
    const Tensor<S>& B = o.node->parents[1];
    const S* g = o.gptr();
    const int64_t n = o.numel();
    if (A.requires_grad) {
      S* ag = A.grad->data();
      const S* bv = B.ptr();
      parallel_for(n, [&](int64_t i) { ag[i] += g[i] * bv[i]; }, int64_t(1) << 14);
    }
    if (B.requires_grad) {
      S* bg = B.grad->data();
      const S* av = A.ptr();
      parallel_for(n, [&](int64_t i) { bg[i] += g[i] * av[i]; }, int64_t(1) << 14);
    }
  });
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* pc = out.ptr();
  const int64_t n = out.numel();
  parallel_for(n, [&](int64_t i) { pc[i] = pa[i] * pb[i]; }, int64_t(1) << 14);
  return out;
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = detail::make_result<S>(Shape{1}, {x}, [](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S g = (*o.grad)[0];
    S* xg = X.grad->data();
    const int64_t n = X.numel();
    parallel_for(n, [&](int64_t i) { xg[i] += g; }, int64_t(1) << 14);
  });
  const S* px = x.ptr();
  S total = 0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) total += px[i];
  (*out.data)[0] = total;
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> out = detail::make_result<S>(x.shape, {x}, [c](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    S* xg = X.grad->data();
    const int64_t n = o.numel();
    parallel_for(n, [&](int64_t i) { xg[i] += c * g[i]; }, int64_t(1) << 14);
  });
  const S* px = x.ptr();
  S* pc = out.ptr();
  const int64_t n = out.numel();
  parallel_for(n, [&](int64_t i) { pc[i] = c * px[i]; }, int64_t(1) << 14);
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = detail::make_result<S>(x.shape, {x}, [](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    const S* xv = X.ptr();
    S* xg = X.grad->data();
    const int64_t n = o.numel();
    parallel_for(n, [&](int64_t i) { xg[i] += xv[i] > S(0) ? g[i] : S(0); }, int64_t(1) << 14);
  });
  const S* px = x.ptr();
  S* pc = out.ptr();
  const int64_t n = out.numel();
  parallel_for(n, [&](int64_t i) { pc[i] = px[i] > S(0) ? px[i] : S(0); }, int64_t(1) << 14);
  return out;
}

// Inverted dropout. p == 0 or a null rng is the identity.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<S>>(n);
  const S keep_scale = S(1.0 / (1.0 - p));
  for (int64_t i = 0; i < n; ++i) (*mask)[i] = rng->uniform() >= p ? keep_scale : S(0);
  Tensor<S> out = detail::make_result<S>(x.shape, {x}, [mask](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    const S* m = mask->data();
    S* xg = X.grad->data();
    const int64_t nn = o.numel();
    parallel_for(nn, [&](int64_t i) { xg[i] += m[i] * g[i]; }, int64_t(1) << 14);
  });
  const S* px = x.ptr();
  const S* m = mask->data();
  S* pc = out.ptr();
  parallel_for(n, [&](int64_t i) { pc[i] = m[i] * px[i]; }, int64_t(1) << 14);
  return out;
}

// ----------------------------- row/position helpers -----------------------------

// x: [G*L, d]; adds P[l] to every row with position l. P may have more than L rows.
template <class S>
Tensor<S> add_position_rows(const Tensor<S>& x, const Tensor<S>& pos, int64_t L) {
  if (x.ndim() != 2 || pos.ndim() != 2) throw ShapeError("add_position_rows: need 2-D");
  const int64_t R = x.dim(0), d = x.dim(1);
  if (R % L != 0 || pos.dim(0) < L || pos.dim(1) != d)
    throw ShapeError("add_position_rows: layout mismatch");
  const int64_t G = R / L;
  Tensor<S> out = detail::make_result<S>(x.shape, {x, pos}, [G, L, d](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    const Tensor<S>& P = o.node->parents[1];
    const S* g = o.gptr();
    if (X.requires_grad) {
      S* xg = X.grad->data();
      const int64_t n = o.numel();
      parallel_for(n, [&](int64_t i) { xg[i] += g[i]; }, int64_t(1) << 14);
    }
    if (P.requires_grad) {
      S* pg = P.grad->data();
      parallel_for(L, [&](int64_t l) {
        S* row = pg + l * d;
        for (int64_t gi = 0; gi < G; ++gi) {
          const S* gr = g + (gi * L + l) * d;
          for (int64_t c = 0; c < d; ++c) row[c] += gr[c];
        }
      });
    }
  });
  const S* px = x.ptr();
  const S* pp = pos.ptr();
  S* pc = out.ptr();
  parallel_for(R, [&](int64_t r) {
    const S* prow = pp + (r % L) * d;
    const S* xr = px + r * d;
    S* cr = pc + r * d;
    for (int64_t c = 0; c < d; ++c) cr[c] = xr[c] + prow[c];
  }, 64);
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, int64_t r0, int64_t count) {
  if (x.ndim() < 1) throw ShapeError("slice_rows: scalar input");
  const int64_t R = x.dim(0);
  if (r0 < 0 || count < 0 || r0 + count > R) throw ShapeError("slice_rows: out of range");
  const int64_t rowsz = x.numel() / R;
  Shape shp = x.shape;
  shp[0] = count;
  Tensor<S> out = detail::make_result<S>(std::move(shp), {x}, [r0, rowsz](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    S* xg = X.grad->data() + r0 * rowsz;
    const int64_t n = o.numel();
    parallel_for(n, [&](int64_t i) { xg[i] += g[i]; }, int64_t(1) << 14);
  });
  std::copy(x.ptr() + r0 * rowsz, x.ptr() + (r0 + count) * rowsz, out.ptr());
  return out;
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int64_t rowsz = parts[0].numel() / parts[0].dim(0);
  int64_t rows = 0;
  for (const auto& p : parts) {
    if (p.numel() / p.dim(0) != rowsz) throw ShapeError("concat_rows: trailing dims differ");
    rows += p.dim(0);
  }
  Shape shp = parts[0].shape;
  shp[0] = rows;
  Tensor<S> out = detail::make_result<S>(std::move(shp), parts, [rowsz](const Tensor<S>& o) {
    const S* g = o.gptr();
    int64_t off = 0;
    for (const auto& p : o.node->parents) {
      const int64_t n = p.numel();
      if (p.requires_grad) {
        S* pg = p.grad->data();
        const S* src = g + off;
        parallel_for(n, [&](int64_t i) { pg[i] += src[i]; }, int64_t(1) << 14);
      }
      off += n;
    }
  });
  S* dst = out.ptr();
  for (const auto& p : parts) {
    std::copy(p.ptr(), p.ptr() + p.numel(), dst);
    dst += p.numel();
  }
  return out;
}

// x: [(S*B*L), d] laid out stream-major; returns [(E*B*L), d] where block e is
// a copy of stream streams[e]. Streams may be referenced by several takers.
template <class S>
Tensor<S> select_stream_rows(const Tensor<S>& x, const std::vector<int>& streams, int64_t B,
                             int64_t L) {
  if (x.ndim() != 2) throw ShapeError("select_stream_rows: need 2-D");
  const int64_t d = x.dim(1);
  const int64_t block = B * L;
  const int64_t S_count = x.dim(0) / block;
  if (x.dim(0) % block != 0) throw ShapeError("select_stream_rows: rows not divisible");
  for (int s : streams)
    if (s < 0 || s >= S_count) throw ShapeError("select_stream_rows: stream out of range");
  const int64_t E = static_cast<int64_t>(streams.size());
  Tensor<S> out = detail::make_result<S>(
      Shape{E * block, d}, {x}, [streams, block, d](const Tensor<S>& o) {
        const Tensor<S>& X = o.node->parents[0];
        if (!X.requires_grad) return;
        const S* g = o.gptr();
        S* xg = X.grad->data();
        // Serial over takers: several may map to one stream.
        for (size_t e = 0; e < streams.size(); ++e) {
          const S* src = g + e * block * d;
          S* dst = xg + streams[e] * block * d;
          const int64_t n = block * d;
          parallel_for(n, [&](int64_t i) { dst[i] += src[i]; }, int64_t(1) << 14);
        }
      });
  S* dst = out.ptr();
  const S* src = x.ptr();
  for (int64_t e = 0; e < E; ++e)
    std::copy(src + streams[e] * block * d, src + (streams[e] + 1) * block * d,
              dst + e * block * d);
  return out;
}

// ----------------------------- heads -----------------------------

// [G, L, D] -> [G*H, L, D/H]
template <class S>
Tensor<S> split_heads(const Tensor<S>& x, int64_t H) {
  if (x.ndim() != 3) throw ShapeError("split_heads: need [G, L, D]");
  const int64_t G = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (D % H != 0) throw ShapeError("split_heads: D not divisible by heads");
  const int64_t hd = D / H;
  Tensor<S> out = detail::make_result<S>(Shape{G * H, L, hd}, {x},
                                         [G, L, D, H, hd](const Tensor<S>& o) {
                                           const Tensor<S>& X = o.node->parents[0];
                                           if (!X.requires_grad) return;
                                           const S* g = o.gptr();
                                           S* xg = X.grad->data();
                                           parallel_for(G * L, [&](int64_t r) {
                                             const int64_t gi = r / L, l = r % L;
                                             S* xrow = xg + (gi * L + l) * D;
                                             for (int64_t h = 0; h < H; ++h) {
                                               const S* orow =
                                                   g + (((gi * H + h) * L) + l) * hd;
                                               for (int64_t c = 0; c < hd; ++c)
                                                 xrow[h * hd + c] += orow[c];
                                             }
                                           }, 16);
                                         });
  const S* px = x.ptr();
  S* pc = out.ptr();
  parallel_for(G * L, [&](int64_t r) {
    const int64_t gi = r / L, l = r % L;
    const S* xrow = px + (gi * L + l) * D;
    for (int64_t h = 0; h < H; ++h) {
      S* orow = pc + (((gi * H + h) * L) + l) * hd;
      for (int64_t c = 0; c < hd; ++c) orow[c] = xrow[h * hd + c];
    }
  }, 16);
  return out;
}

// [G*H, L, hd] -> [G, L, H*hd]
template <class S>
Tensor<S> merge_heads(const Tensor<S>& x, int64_t H) {
  if (x.ndim() != 3) throw ShapeError("merge_heads: need [G*H, L, hd]");
  const int64_t GH = x.dim(0), L = x.dim(1), hd = x.dim(2);
  if (GH % H != 0) throw ShapeError("merge_heads: groups not divisible by heads");
  const int64_t G = GH / H, D = H * hd;
  Tensor<S> out = detail::make_result<S>(Shape{G, L, D}, {x},
                                         [G, L, D, H, hd](const Tensor<S>& o) {
                                           const Tensor<S>& X = o.node->parents[0];
                                           if (!X.requires_grad) return;
                                           const S* g = o.gptr();
                                           S* xg = X.grad->data();
                                           parallel_for(G * L, [&](int64_t r) {
                                             const int64_t gi = r / L, l = r % L;
                                             const S* orow = g + (gi * L + l) * D;
                                             for (int64_t h = 0; h < H; ++h) {
                                               S* xrow =
                                                   xg + (((gi * H + h) * L) + l) * hd;
                                               for (int64_t c = 0; c < hd; ++c)
                                                 xrow[c] += orow[h * hd + c];
                                             }
                                           }, 16);
                                         });
  const S* px = x.ptr();
  S* pc = out.ptr();
  parallel_for(G * L, [&](int64_t r) {
    const int64_t gi = r / L, l = r % L;
    S* orow = pc + (gi * L + l) * D;
    for (int64_t h = 0; h < H; ++h) {
      const S* xrow = px + (((gi * H + h) * L) + l) * hd;
      for (int64_t c = 0; c < hd; ++c) orow[h * hd + c] = xrow[c];
    }
  }, 16);
  return out;
}

// ----------------------------- embedding -----------------------------

template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int64_t>& ids) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be [V, d]");
  const int64_t V = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= V) throw VocabError("embedding: id " + std::to_string(id) + " out of range");
  const int64_t N = static_cast<int64_t>(ids.size());
  Tensor<S> out = detail::make_result<S>(Shape{N, d}, {table}, [ids, d](const Tensor<S>& o) {
    const Tensor<S>& T = o.node->parents[0];
    if (!T.requires_grad) return;
    const S* g = o.gptr();
    S* tg = T.grad->data();
    // Serial scatter: repeated ids accumulate in a fixed order.
    for (size_t r = 0; r < ids.size(); ++r) {
      S* row = tg + ids[r] * d;
      const S* gr = g + r * d;
      for (int64_t c = 0; c < d; ++c) row[c] += gr[c];
    }
  });
  const S* tp = table.ptr();
  S* pc = out.ptr();
  parallel_for(N, [&](int64_t r) {
    std::copy(tp + ids[r] * d, tp + (ids[r] + 1) * d, pc + r * d);
  }, 64);
  return out;
}

// ----------------------------- layer norm -----------------------------

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  const int64_t d = x.dim(-1);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must match last axis");
  const int64_t rows = x.numel() / d;
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  auto xhat = std::make_shared<std::vector<S>>(x.numel());

  Tensor<S> out = detail::make_result<S>(
      x.shape, {x, gain, bias}, [rows, d, inv_std, xhat](const Tensor<S>& o) {
        const Tensor<S>& X = o.node->parents[0];
        const Tensor<S>& G = o.node->parents[1];
        const Tensor<S>& B = o.node->parents[2];
        const S* g = o.gptr();
        const S* gv = G.ptr();
        if (X.requires_grad) {
          S* xg = X.grad->data();
          parallel_for(rows, [&](int64_t r) {
            const S* gr = g + r * d;
            const S* xh = xhat->data() + r * d;
            S* xgr = xg + r * d;
            S sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int64_t c = 0; c < d; ++c) {
              const S dxh = gr[c] * gv[c];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xh[c];
            }
            const S istd = (*inv_std)[r];
            const S inv_d = S(1) / S(d);
            for (int64_t c = 0; c < d; ++c) {
              const S dxh = gr[c] * gv[c];
              xgr[c] += istd * (dxh - inv_d * sum_dxhat - xh[c] * inv_d * sum_dxhat_xhat);
            }
          }, 16);
        }
        if (G.requires_grad || B.requires_grad) {
          S* gg = G.requires_grad ? G.grad->data() : nullptr;
          S* bg = B.requires_grad ? B.grad->data() : nullptr;
          for (int64_t r = 0; r < rows; ++r) {
            const S* gr = g + r * d;
            const S* xh = xhat->data() + r * d;
            for (int64_t c = 0; c < d; ++c) {
              if (gg) gg[c] += gr[c] * xh[c];
              if (bg) bg[c] += gr[c];
            }
          }
        }
      });

  const S* px = x.ptr();
  const S* pg = gain.ptr();
  const S* pb = bias.ptr();
  S* pc = out.ptr();
  parallel_for(rows, [&](int64_t r) {
    const S* xr = px + r * d;
    S mean = 0;
    for (int64_t c = 0; c < d; ++c) mean += xr[c];
    mean /= S(d);
    S var = 0;
    for (int64_t c = 0; c < d; ++c) {
      const S t = xr[c] - mean;
      var += t * t;
    }
    var /= S(d);
    const S istd = S(1) / std::sqrt(var + S(eps));
    (*inv_std)[r] = istd;
    S* xh = xhat->data() + r * d;
    S* cr = pc + r * d;
    for (int64_t c = 0; c < d; ++c) {
      xh[c] = (xr[c] - mean) * istd;
      cr[c] = pg[c] * xh[c] + pb[c];
    }
  }, 16);
  return out;
}

// ----------------------------- softmax -----------------------------

template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  auto probs = std::make_shared<std::vector<S>>(x.numel());

  Tensor<S> out = detail::make_result<S>(x.shape, {x}, [rows, d, probs](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    S* xg = X.grad->data();
    parallel_for(rows, [&](int64_t r) {
      const S* p = probs->data() + r * d;
      const S* gr = g + r * d;
      S dot = 0;
      for (int64_t c = 0; c < d; ++c) dot += gr[c] * p[c];
      S* xgr = xg + r * d;
      for (int64_t c = 0; c < d; ++c) xgr[c] += p[c] * (gr[c] - dot);
    }, 16);
  });

  const S* px = x.ptr();
  S* pc = out.ptr();
  std::atomic<bool> degenerate{false};
  parallel_for(rows, [&](int64_t r) {
    const S* xr = px + r * d;
    S m = xr[0];
    for (int64_t c = 1; c < d; ++c) m = std::max(m, xr[c]);
    if (!(m > -std::numeric_limits<S>::infinity())) {
      degenerate.store(true);
      return;
    }
    S* pr = probs->data() + r * d;
    S sum = 0;
    for (int64_t c = 0; c < d; ++c) {
      pr[c] = std::exp(xr[c] - m);
      sum += pr[c];
    }
    const S inv = S(1) / sum;
    S* cr = pc + r * d;
    for (int64_t c = 0; c < d; ++c) {
      pr[c] *= inv;
      cr[c] = pr[c];
    }
  }, 16);
  if (degenerate.load())
    throw NumericError("softmax: fully masked row (all scores are -inf)");
  return out;
}

// scores: [..., L, L]; adds -inf above the diagonal.
template <class S>
Tensor<S> add_causal_mask(const Tensor<S>& x) {
  const int64_t L = x.dim(-1);
  if (x.dim(-2) != L) throw ShapeError("add_causal_mask: last two dims must be equal");
  const int64_t G = x.numel() / (L * L);
  Tensor<S> out = detail::make_result<S>(x.shape, {x}, [](const Tensor<S>& o) {
    const Tensor<S>& X = o.node->parents[0];
    if (!X.requires_grad) return;
    const S* g = o.gptr();
    S* xg = X.grad->data();
    const int64_t n = o.numel();
    parallel_for(n, [&](int64_t i) { xg[i] += g[i]; }, int64_t(1) << 14);
  });
  const S* px = x.ptr();
  S* pc = out.ptr();
  const S ninf = -std::numeric_limits<S>::infinity();
  parallel_for(G * L, [&](int64_t r) {
    const int64_t t = r % L;
    const S* xr = px + r * L;
    S* cr = pc + r * L;
    for (int64_t c = 0; c <= t; ++c) cr[c] = xr[c];
    for (int64_t c = t + 1; c < L; ++c) cr[c] = ninf;
  }, 64);
  return out;
}

// scores: [(S*B*H), Lq, Lk]; alpha: [(S*H), Lq, Lk]; group (s,b,h) gets
// alpha (s,h). Tiles the per-stream positional attention over the batch.
template <class S>
Tensor<S> add_positional_scores(const Tensor<S>& scores, const Tensor<S>& alpha, int64_t B,
                                int64_t H) {
  if (scores.ndim() != 3 || alpha.ndim() != 3) throw ShapeError("add_positional_scores: 3-D");
  const int64_t G = scores.dim(0), Lq = scores.dim(1), Lk = scores.dim(2);
  if (alpha.dim(1) != Lq || alpha.dim(2) != Lk || G != B * alpha.dim(0) ||
      alpha.dim(0) % H != 0)
    throw ShapeError("add_positional_scores: layout mismatch");
  const int64_t plane = Lq * Lk;
  Tensor<S> out = detail::make_result<S>(
      scores.shape, {scores, alpha}, [B, H, plane](const Tensor<S>& o) {
        const Tensor<S>& Sc = o.node->parents[0];
        const Tensor<S>& Al = o.node->parents[1];
        const S* g = o.gptr();
        if (Sc.requires_grad) {
          S* sg = Sc.grad->data();
          const int64_t n = o.numel();
          parallel_for(n, [&](int64_t i) { sg[i] += g[i]; }, int64_t(1) << 14);
        }
        if (Al.requires_grad) {
          S* ag = Al.grad->data();
          const int64_t SH = Al.dim(0);
          parallel_for(SH, [&](int64_t sh) {
            const int64_t s = sh / H, h = sh % H;
            S* dst = ag + sh * plane;
            for (int64_t b = 0; b < B; ++b) {
              const S* src = g + (((s * B + b) * H) + h) * plane;
              for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
            }
          });
        }
      });
  const S* ps = scores.ptr();
  const S* pa = alpha.ptr();
  S* pc = out.ptr();
  parallel_for(G, [&](int64_t g) {
    const int64_t h = g % H;
    const int64_t s = g / (B * H);
    const S* arow = pa + (s * H + h) * plane;
    const S* srow = ps + g * plane;
    S* crow = pc + g * plane;
    for (int64_t i = 0; i < plane; ++i) crow[i] = srow[i] + arow[i];
  });
  return out;
}

// ----------------------------- cross entropy -----------------------------

// Mean negative log-likelihood over non-pad positions.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int64_t>& targets,
                        int64_t pad_class) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [N, cls]");
  const int64_t N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    throw ShapeError("cross_entropy: target count mismatch");
  int64_t count = 0;
  for (int64_t t : targets) {
    if (t == pad_class) continue;
    if (t < 0 || t >= C) throw VocabError("cross_entropy: target out of range");
    ++count;
  }
  if (count == 0) throw NumericError("cross_entropy: every position is pad");

  auto probs = std::make_shared<std::vector<S>>(logits.numel());
  const S* lp = logits.ptr();
  std::vector<S> row_loss(N, S(0));
  parallel_for(N, [&](int64_t r) {
    const S* xr = lp + r * C;
    S m = xr[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, xr[c]);
    S sum = 0;
    S* pr = probs->data() + r * C;
    for (int64_t c = 0; c < C; ++c) {
      pr[c] = std::exp(xr[c] - m);
      sum += pr[c];
    }
    const S inv = S(1) / sum;
    for (int64_t c = 0; c < C; ++c) pr[c] *= inv;
    if (targets[r] != pad_class)
      row_loss[r] = std::log(sum) + m - xr[targets[r]];
  }, 16);
  S total = 0;
  for (int64_t r = 0; r < N; ++r) total += row_loss[r];

  Tensor<S> out = detail::make_result<S>(
      Shape{1}, {logits}, [targets, pad_class, probs, count, C](const Tensor<S>& o) {
        const Tensor<S>& L = o.node->parents[0];
        if (!L.requires_grad) return;
        const S g = (*o.grad)[0] / S(count);
        S* lg = L.grad->data();
        const int64_t N2 = L.dim(0);
        parallel_for(N2, [&](int64_t r) {
          if (targets[r] == pad_class) return;
          const S* pr = probs->data() + r * C;
          S* gr = lg + r * C;
          for (int64_t c = 0; c < C; ++c) gr[c] += g * pr[c];
          gr[targets[r]] -= g;
        }, 16);
      });
  (*out.data)[0] = total / S(count);
  return out;
}

}  // namespace ptie
