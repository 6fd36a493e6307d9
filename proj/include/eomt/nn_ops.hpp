// Network primitives: softmax, layer norm, GELU, sigmoid, convolutions and the
// two supervised-loss kernels. Each op carries its analytic backward.
#pragma once

#include "eomt/autodiff.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace eomt {

template <typename S>
constexpr S neg_inf() {
  return -std::numeric_limits<S>::infinity();
}

// Softmax over the last axis. -inf entries map to exactly 0; a row of all
// -inf violates the contract (callers guarantee a fallback).
template <typename S>
Var<S> softmax_lastdim(const Var<S>& a) {
  const int n = a.value().dim(a.value().rank() - 1);
  const std::int64_t rows = a.numel() / n;
  Tensor<S> out(a.shape());
  const S* x = a.value().data();
  S* y = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * n;
    S* yr = y + r * n;
    S m = xr[0];
    for (int j = 1; j < n; ++j) m = std::max(m, xr[j]);
    check(m != neg_inf<S>(), "softmax_lastdim: row has no finite entry");
    S denom = S(0);
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - m);  // exp(-inf) == 0 exactly
      denom += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= denom;
  }
  auto an = a.node();
  bool ta = a.tracked();
  Tensor<S> saved = out;
  return detail::make_op<S>(std::move(out), {&a}, [an, ta, saved, n, rows](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    const S* yv = saved.data();
    const S* gv = g.data();
    S* gx = gg.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* yr = yv + r * n;
      const S* gr = gv + r * n;
      S dot = S(0);
      for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < n; ++j) gx[r * n + j] = yr[j] * (gr[j] - dot);
    }
    an->accumulate(gg);
  });
}

// Per-last-axis standardization followed by affine; gamma/beta are [D].
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-6)) {
  const int d = x.value().dim(x.value().rank() - 1);
  check(gamma.value().rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma shape");
  check(beta.value().rank() == 1 && beta.dim(0) == d, "layer_norm: beta shape");
  const std::int64_t rows = x.numel() / d;
  Tensor<S> out(x.shape());
  Tensor<S> xhat(x.shape());
  Tensor<S> inv_std(Shape{static_cast<int>(rows)});
  const S* xv = x.value().data();
  const S* gv = gamma.value().data();
  const S* bv = beta.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = xv + r * d;
    S mu = S(0);
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (int j = 0; j < d; ++j) {
      const S xh = (xr[j] - mu) * inv;
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
  return detail::make_op<S>(
      std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, tx, tg, tb, xhat, inv_std, d, rows](const Tensor<S>& g) {
        const S* gm = gn->value.data();
        if (tx) {
          Tensor<S> gx(xn->value.shape());
          for (std::int64_t r = 0; r < rows; ++r) {
            S mean_gy = S(0), mean_gyx = S(0);
            for (int j = 0; j < d; ++j) {
              const S gy = g[r * d + j] * gm[j];
              mean_gy += gy;
              mean_gyx += gy * xhat[r * d + j];
            }
            mean_gy /= static_cast<S>(d);
            mean_gyx /= static_cast<S>(d);
            for (int j = 0; j < d; ++j) {
              const S gy = g[r * d + j] * gm[j];
              gx[r * d + j] = inv_std[r] * (gy - mean_gy - xhat[r * d + j] * mean_gyx);
            }
          }
          xn->accumulate(gx);
        }
        if (tg) {
          Tensor<S> gg(gn->value.shape());
          for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
          gn->accumulate(gg);
        }
        if (tb) {
          Tensor<S> gb(bn->value.shape());
          for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) gb[j] += g[r * d + j];
          bn->accumulate(gb);
        }
      });
}

namespace detail {

template <typename S>
S gauss_cdf(S x) {
  return S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
}

template <typename S>
S gauss_pdf(S x) {
  return std::exp(S(-0.5) * x * x) * S(0.39894228040143268);
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

// Exact erf form: x * Phi(x).
template <typename S>
Var<S> gelu(const Var<S>& a) {
  Tensor<S> out(a.shape());
  const S* x = a.value().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = x[i] * detail::gauss_cdf(x[i]);
  auto an = a.node();
  bool ta = a.tracked();
  return detail::make_op<S>(std::move(out), {&a}, [an, ta](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    const S* x = an->value.data();
    for (std::int64_t i = 0; i < gg.numel(); ++i)
      gg[i] = g[i] * (detail::gauss_cdf(x[i]) + x[i] * detail::gauss_pdf(x[i]));
    an->accumulate(gg);
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out(a.shape());
  const S* x = a.value().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = detail::stable_sigmoid(x[i]);
  auto an = a.node();
  bool ta = a.tracked();
  Tensor<S> saved = out;
  return detail::make_op<S>(std::move(out), {&a}, [an, ta, saved](const Tensor<S>& g) {
    if (!ta) return;
    Tensor<S> gg(an->value.shape());
    for (std::int64_t i = 0; i < gg.numel(); ++i)
      gg[i] = g[i] * saved[i] * (S(1) - saved[i]);
    an->accumulate(gg);
  });
}

// ---- convolutions (channel-first rank-3 activations) ----

// x: [Cin x H x W], w: [Cout x Cin x kh x kw], b: [Cout]
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int pad) {
  check(x.value().rank() == 3 && w.value().rank() == 4, "conv2d: x rank-3, w rank-4");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == cin, "conv2d: channel mismatch");
  check(b.value().rank() == 1 && b.dim(0) == cout, "conv2d: bias shape");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho >= 1 && wo >= 1, "conv2d: non-positive output extent");

  auto widx = [=](int co, int ci, int ky, int kx) {
    return ((static_cast<std::int64_t>(co) * cin + ci) * kh + ky) * kw + kx;
  };
  Tensor<S> out(Shape{cout, ho, wo});
  const S* xv = x.value().data();
  const S* wv = w.value().data();
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        S acc = b.value()[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xv[(static_cast<std::int64_t>(ci) * h + iy) * wd + ix] *
                     wv[widx(co, ci, ky, kx)];
            }
          }
        out.at(co, oy, ox) = acc;
      }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  bool tx = x.tracked(), tw = w.tracked(), tb = b.tracked();
  return detail::make_op<S>(
      std::move(out), {&x, &w, &b},
      [=](const Tensor<S>& g) {
        Tensor<S> gx = tx ? Tensor<S>(xn->value.shape()) : Tensor<S>();
        Tensor<S> gw = tw ? Tensor<S>(wn->value.shape()) : Tensor<S>();
        Tensor<S> gb = tb ? Tensor<S>(bn->value.shape()) : Tensor<S>();
        const S* xv2 = xn->value.data();
        const S* wv2 = wn->value.data();
        for (int co = 0; co < cout; ++co)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const S go = g.at(co, oy, ox);
              if (tb) gb[co] += go;
              for (int ci = 0; ci < cin; ++ci)
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const std::int64_t xi = (static_cast<std::int64_t>(ci) * h + iy) * wd + ix;
                    if (tx) gx[xi] += go * wv2[widx(co, ci, ky, kx)];
                    if (tw) gw[widx(co, ci, ky, kx)] += go * xv2[xi];
                  }
                }
            }
        if (tx) xn->accumulate(gx);
        if (tw) wn->accumulate(gw);
        if (tb) bn->accumulate(gb);
      });
}

// x: [Cin x H x W], w: [Cin x Cout x kh x kw], b: [Cout]; no padding, so a
// 2x2 kernel with stride 2 doubles both spatial extents exactly.
template <typename S>
Var<S> conv_transpose2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride) {
  check(x.value().rank() == 3 && w.value().rank() == 4, "conv_transpose2d: x rank-3, w rank-4");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  check(w.dim(0) == cin, "conv_transpose2d: channel mismatch");
  const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check(b.value().rank() == 1 && b.dim(0) == cout, "conv_transpose2d: bias shape");
  const int ho = (h - 1) * stride + kh;
  const int wo = (wd - 1) * stride + kw;

  auto widx = [=](int ci, int co, int ky, int kx) {
    return ((static_cast<std::int64_t>(ci) * cout + co) * kh + ky) * kw + kx;
  };
  Tensor<S> out(Shape{cout, ho, wo});
  for (int co = 0; co < cout; ++co)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i)
      out[static_cast<std::int64_t>(co) * ho * wo + i] = b.value()[co];
  const S* xv = x.value().data();
  const S* wv = w.value().data();
  for (int ci = 0; ci < cin; ++ci)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < wd; ++ix) {
        const S xi = xv[(static_cast<std::int64_t>(ci) * h + iy) * wd + ix];
        for (int co = 0; co < cout; ++co)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx)
              out.at(co, iy * stride + ky, ix * stride + kx) += xi * wv[widx(ci, co, ky, kx)];
      }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  bool tx = x.tracked(), tw = w.tracked(), tb = b.tracked();
  return detail::make_op<S>(
      std::move(out), {&x, &w, &b},
      [=](const Tensor<S>& g) {
        Tensor<S> gx = tx ? Tensor<S>(xn->value.shape()) : Tensor<S>();
        Tensor<S> gw = tw ? Tensor<S>(wn->value.shape()) : Tensor<S>();
        Tensor<S> gb = tb ? Tensor<S>(bn->value.shape()) : Tensor<S>();
        const S* xv2 = xn->value.data();
        const S* wv2 = wn->value.data();
        if (tb)
          for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < ho; ++oy)
              for (int ox = 0; ox < wo; ++ox) gb[co] += g.at(co, oy, ox);
        for (int ci = 0; ci < cin; ++ci)
          for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < wd; ++ix) {
              const std::int64_t xi = (static_cast<std::int64_t>(ci) * h + iy) * wd + ix;
              for (int co = 0; co < cout; ++co)
                for (int ky = 0; ky < kh; ++ky)
                  for (int kx = 0; kx < kw; ++kx) {
                    const S go = g.at(co, iy * stride + ky, ix * stride + kx);
                    if (tx) gx[xi] += go * wv2[widx(ci, co, ky, kx)];
                    if (tw) gw[widx(ci, co, ky, kx)] += go * xv2[xi];
                  }
            }
        if (tx) xn->accumulate(gx);
        if (tw) wn->accumulate(gw);
        if (tb) bn->accumulate(gb);
      });
}

// x: [C x H x W], w: [C x kh x kw], b: [C]; stride 1.
template <typename S>
Var<S> conv_depthwise(const Var<S>& x, const Var<S>& w, const Var<S>& b, int pad) {
  check(x.value().rank() == 3 && w.value().rank() == 3, "conv_depthwise: x, w rank-3");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  check(w.dim(0) == c, "conv_depthwise: channel mismatch");
  const int kh = w.dim(1), kw = w.dim(2);
  check(b.value().rank() == 1 && b.dim(0) == c, "conv_depthwise: bias shape");
  const int ho = h + 2 * pad - kh + 1;
  const int wo = wd + 2 * pad - kw + 1;
  check(ho >= 1 && wo >= 1, "conv_depthwise: non-positive output extent");

  Tensor<S> out(Shape{c, ho, wo});
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        S acc = b.value()[ci];
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= wd) continue;
            acc += x.value().at(ci, iy, ix) * w.value().at(ci, ky, kx);
          }
        }
        out.at(ci, oy, ox) = acc;
      }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  bool tx = x.tracked(), tw = w.tracked(), tb = b.tracked();
  return detail::make_op<S>(
      std::move(out), {&x, &w, &b},
      [=](const Tensor<S>& g) {
        Tensor<S> gx = tx ? Tensor<S>(xn->value.shape()) : Tensor<S>();
        Tensor<S> gw = tw ? Tensor<S>(wn->value.shape()) : Tensor<S>();
        Tensor<S> gb = tb ? Tensor<S>(bn->value.shape()) : Tensor<S>();
        for (int ci = 0; ci < c; ++ci)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const S go = g.at(ci, oy, ox);
              if (tb) gb[ci] += go;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  if (tx) gx.at(ci, iy, ix) += go * wn->value.at(ci, ky, kx);
                  if (tw) gw.at(ci, ky, kx) += go * xn->value.at(ci, iy, ix);
                }
              }
            }
        if (tx) xn->accumulate(gx);
        if (tw) wn->accumulate(gw);
        if (tb) bn->accumulate(gb);
      });
}

// ---- loss kernels ----

// Pixel-weighted mean of -[y log s(x) + (1-y) log(1-s(x))]; weights empty
// means uniform. Targets and weights are constants.
template <typename S>
Var<S> bce_with_logits_mean(const Var<S>& x, const Tensor<S>& target, const Tensor<S>& weight) {
  check(x.value().same_shape(target), "bce: target shape mismatch");
  const bool weighted = weight.numel() != 0;
  if (weighted) check(x.value().same_shape(weight), "bce: weight shape mismatch");
  S wsum = S(0), acc = S(0);
  const S* xv = x.value().data();
  const S* yv = target.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S wt = weighted ? weight[i] : S(1);
    const S xi = xv[i];
    // max(x,0) - x*y + log(1+exp(-|x|))
    const S l = std::max(xi, S(0)) - xi * yv[i] + std::log1p(std::exp(-std::abs(xi)));
    acc += wt * l;
    wsum += wt;
  }
  check(wsum > S(0), "bce: zero total weight");
  auto xn = x.node();
  bool tx = x.tracked();
  Tensor<S> tgt = target, wgt = weight;
  return detail::make_op<S>(
      Tensor<S>::scalar(acc / wsum), {&x},
      [xn, tx, tgt, wgt, weighted, wsum](const Tensor<S>& g) {
        if (!tx) return;
        Tensor<S> gx(xn->value.shape());
        const S* xv2 = xn->value.data();
        for (std::int64_t i = 0; i < gx.numel(); ++i) {
          const S wt = weighted ? wgt[i] : S(1);
          gx[i] = g[0] * wt * (detail::stable_sigmoid(xv2[i]) - tgt[i]) / wsum;
        }
        xn->accumulate(gx);
      });
}

// Weighted cross entropy over rows of [K x M] logits; per-class weights,
// normalized by the total weight of the realized targets.
template <typename S>
Var<S> cross_entropy_rows(const Var<S>& logits, const std::vector<int>& targets,
                          const std::vector<S>& class_weights) {
  check(logits.value().rank() == 2, "cross_entropy_rows: rank-2 logits");
  const int k = logits.dim(0), m = logits.dim(1);
  check(static_cast<int>(targets.size()) == k, "cross_entropy_rows: one target per row");
  check(static_cast<int>(class_weights.size()) == m, "cross_entropy_rows: one weight per class");
  Tensor<S> probs(logits.shape());
  S acc = S(0), wsum = S(0);
  for (int i = 0; i < k; ++i) {
    const int t = targets[i];
    check(0 <= t && t < m, "cross_entropy_rows: target out of range");
    S mx = logits.value().at(i, 0);
    for (int j = 1; j < m; ++j) mx = std::max(mx, logits.value().at(i, j));
    S denom = S(0);
    for (int j = 0; j < m; ++j) {
      probs.at(i, j) = std::exp(logits.value().at(i, j) - mx);
      denom += probs.at(i, j);
    }
    for (int j = 0; j < m; ++j) probs.at(i, j) /= denom;
    acc += class_weights[t] * -std::log(probs.at(i, t));
    wsum += class_weights[t];
  }
  check(wsum > S(0), "cross_entropy_rows: zero total weight");
  auto ln = logits.node();
  bool tl = logits.tracked();
  std::vector<int> tgts = targets;
  std::vector<S> cw = class_weights;
  return detail::make_op<S>(
      Tensor<S>::scalar(acc / wsum), {&logits},
      [ln, tl, probs, tgts, cw, wsum, k, m](const Tensor<S>& g) {
        if (!tl) return;
        Tensor<S> gl(ln->value.shape());
        for (int i = 0; i < k; ++i) {
          const S wt = cw[tgts[i]] / wsum;
          for (int j = 0; j < m; ++j)
            gl.at(i, j) = g[0] * wt * (probs.at(i, j) - (j == tgts[i] ? S(1) : S(0)));
        }
        ln->accumulate(gl);
      });
}

}  // namespace eomt
