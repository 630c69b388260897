// Independent straight-line forward references for whole blocks, written
// against raw value vectors only. These never call the library's primitives.
#pragma once

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "uninas/dsm.hpp"
#include "uninas/gops.hpp"

namespace blockref {

using Vec = std::vector<double>;

inline double gelu1(double x) { return x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline void gelu_inplace(Vec& v) {
  for (double& x : v) x = gelu1(x);
}

// training-mode batch norm over [B,C,H,W]
inline void bn_train_inplace(Vec& v, int B, int C, int HW, const Vec& gamma, const Vec& beta,
                             double eps = 1e-5) {
  for (int c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) mean += v[(b * C + c) * HW + i];
    mean /= B * HW;
    double var = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        double d = v[(b * C + c) * HW + i] - mean;
        var += d * d;
      }
    var /= B * HW;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        double& x = v[(b * C + c) * HW + i];
        x = (x - mean) * inv * gamma[c] + beta[c];
      }
  }
}

// layer norm over the last axis of [R,C]
inline void ln_inplace(Vec& v, int R, int C, const Vec& gamma, const Vec& beta, double eps = 1e-6) {
  for (int r = 0; r < R; ++r) {
    double mean = 0.0;
    for (int c = 0; c < C; ++c) mean += v[r * C + c];
    mean /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double d = v[r * C + c] - mean;
      var += d * d;
    }
    var /= C;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < C; ++c) {
      double& x = v[r * C + c];
      x = (x - mean) * inv * gamma[c] + beta[c];
    }
  }
}

// [R,Cin] x [Cin,Cout] + bias
inline Vec linear_ref(const Vec& x, int R, int Cin, const Vec& w, int Cout, const Vec& b) {
  Vec y(static_cast<std::size_t>(R) * Cout, 0.0);
  for (int r = 0; r < R; ++r)
    for (int o = 0; o < Cout; ++o) {
      double s = b[o];
      for (int i = 0; i < Cin; ++i) s += x[r * Cin + i] * w[i * Cout + o];
      y[r * Cout + o] = s;
    }
  return y;
}

// tokens [B,N,C] -> spatial [B,C,H,W]
inline Vec to_spatial(const Vec& t, int B, int H, int W, int C) {
  Vec s(t.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          s[((b * C + c) * H + i) * W + j] = t[(b * H * W + i * W + j) * C + c];
  return s;
}

inline Vec to_tokens(const Vec& s, int B, int C, int H, int W) {
  Vec t(s.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          t[(b * H * W + i * W + j) * C + c] = s[((b * C + c) * H + i) * W + j];
  return t;
}

inline Vec conv_block_ref(const Vec& x, int B, int c, int H, int W, int e, bool depthwise,
                          const uninas::BlockWeights& w) {
  const int ec = e * c;
  const int HW = H * W;
  Vec t = oracle::conv2d_ref(x, B, c, H, W, w.proj_up.values(), ec, 1, 1, 1, 0, 1);
  bn_train_inplace(t, B, ec, HW, w.bn1.gamma.values(), w.bn1.beta.values());
  gelu_inplace(t);
  t = oracle::conv2d_ref(t, B, ec, H, W, w.inner_conv.values(), ec, 3, 3, 1, 1, depthwise ? ec : 1);
  bn_train_inplace(t, B, ec, HW, w.bn2.gamma.values(), w.bn2.beta.values());
  gelu_inplace(t);
  t = oracle::conv2d_ref(t, B, ec, H, W, w.proj_down.values(), c, 1, 1, 1, 0, 1);
  bn_train_inplace(t, B, c, HW, w.bn3.gamma.values(), w.bn3.beta.values());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += x[i];
  return t;
}

// attention among an explicit token subset; q/k/v are [R,C] row-major
inline Vec attention_subset_ref(const Vec& q, const Vec& k, const Vec& v,
                                const std::vector<int>& q_rows, const std::vector<int>& kv_rows,
                                int C, int heads) {
  const int hd = C / heads;
  Vec out(q_rows.size() * static_cast<std::size_t>(C), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (std::size_t qi = 0; qi < q_rows.size(); ++qi) {
      std::vector<double> scores(kv_rows.size());
      for (std::size_t kj = 0; kj < kv_rows.size(); ++kj) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d)
          s += q[q_rows[qi] * C + h * hd + d] * k[kv_rows[kj] * C + h * hd + d];
        scores[kj] = s / std::sqrt(static_cast<double>(hd));
      }
      auto probs = oracle::softmax_ref(scores);
      for (int d = 0; d < hd; ++d) {
        double s = 0.0;
        for (std::size_t kj = 0; kj < kv_rows.size(); ++kj)
          s += probs[kj] * v[kv_rows[kj] * C + h * hd + d];
        out[qi * C + h * hd + d] = s;
      }
    }
  }
  return out;
}

// window == 0 means global attention; otherwise explicit non-overlapping
// windows over the H x W grid (edge windows simply contain fewer tokens)
inline Vec transformer_block_ref(const Vec& x, int B, int H, int W, int c, int e, int window,
                                 const uninas::BlockWeights& w) {
  const int N = H * W;
  const int heads = c / 32;
  // CPE
  Vec xs = to_spatial(x, B, H, W, c);
  Vec pe = oracle::conv2d_ref(xs, B, c, H, W, w.cpe_w.values(), c, 3, 3, 1, 1, c);
  for (int b = 0; b < B; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < N; ++i) pe[(b * c + ch) * N + i] += w.cpe_b.values()[ch];
  Vec h = x;
  {
    Vec pet = to_tokens(pe, B, c, H, W);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += pet[i];
  }

  Vec n1 = h;
  ln_inplace(n1, B * N, c, w.ln1_g.values(), w.ln1_b.values());
  Vec q = linear_ref(n1, B * N, c, w.wq.values(), c, w.bq.values());
  Vec k = linear_ref(n1, B * N, c, w.wk.values(), c, w.bk.values());
  Vec v = linear_ref(n1, B * N, c, w.wv.values(), c, w.bv.values());

  Vec ctx(static_cast<std::size_t>(B) * N * c, 0.0);
  for (int b = 0; b < B; ++b) {
    if (window <= 0) {
      std::vector<int> rows(N);
      for (int i = 0; i < N; ++i) rows[i] = b * N + i;
      Vec o = attention_subset_ref(q, k, v, rows, rows, c, heads);
      for (int i = 0; i < N; ++i)
        for (int ch = 0; ch < c; ++ch) ctx[(b * N + i) * c + ch] = o[i * c + ch];
    } else {
      for (int wi = 0; wi * window < H; ++wi) {
        for (int wj = 0; wj * window < W; ++wj) {
          std::vector<int> rows;
          std::vector<int> local;
          for (int u = 0; u < window; ++u)
            for (int t = 0; t < window; ++t) {
              const int gi = wi * window + u, gj = wj * window + t;
              if (gi < H && gj < W) {
                rows.push_back(b * N + gi * W + gj);
                local.push_back(gi * W + gj);
              }
            }
          Vec o = attention_subset_ref(q, k, v, rows, rows, c, heads);
          for (std::size_t r = 0; r < rows.size(); ++r)
            for (int ch = 0; ch < c; ++ch) ctx[(b * N + local[r]) * c + ch] = o[r * c + ch];
        }
      }
    }
  }
  Vec attn_out = linear_ref(ctx, B * N, c, w.wo.values(), c, w.bo.values());
  Vec y1 = h;
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] += attn_out[i];

  Vec n2 = y1;
  ln_inplace(n2, B * N, c, w.ln2_g.values(), w.ln2_b.values());
  const int ec = e * c;
  Vec f = linear_ref(n2, B * N, c, w.fc1_w.values(), ec, w.fc1_b.values());
  gelu_inplace(f);
  f = linear_ref(f, B * N, ec, w.fc2_w.values(), c, w.fc2_b.values());
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] += f[i];
  return y1;
}

inline Vec mlp_block_ref(const Vec& x, int B, int N, int c, int e, const uninas::BlockWeights& w) {
  const int nt = w.tmix1_w.shape()[1];
  Vec n1 = x;
  ln_inplace(n1, B * N, c, w.ln1_g.values(), w.ln1_b.values());
  // transpose to [B,c,N], mix the token axis, transpose back
  Vec mixed(static_cast<std::size_t>(B) * N * c, 0.0);
  for (int b = 0; b < B; ++b) {
    Vec t(static_cast<std::size_t>(c) * N);
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < N; ++i) t[ch * N + i] = n1[(b * N + i) * c + ch];
    Vec hmid = linear_ref(t, c, N, w.tmix1_w.values(), nt, w.tmix1_b.values());
    gelu_inplace(hmid);
    Vec back = linear_ref(hmid, c, nt, w.tmix2_w.values(), N, w.tmix2_b.values());
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < N; ++i) mixed[(b * N + i) * c + ch] = back[ch * N + i];
  }
  Vec y1 = x;
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] += mixed[i];

  Vec n2 = y1;
  ln_inplace(n2, B * N, c, w.ln2_g.values(), w.ln2_b.values());
  const int ec = e * c;
  Vec f = linear_ref(n2, B * N, c, w.fc1_w.values(), ec, w.fc1_b.values());
  gelu_inplace(f);
  f = linear_ref(f, B * N, ec, w.fc2_w.values(), c, w.fc2_b.values());
  for (std::size_t i = 0; i < y1.size(); ++i) y1[i] += f[i];
  return y1;
}

}  // namespace blockref
