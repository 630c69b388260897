// Test-only reference implementations, independent of the library's
// primitives. These are the oracles the unit and acceptance suites compare
// against; keep them naive and obviously correct.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "uninas/rng.hpp"
#include "uninas/tensor.hpp"

namespace oracle {

// plain triple loop, no blocking
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

// direct six-loop convolution (plus batch), zero padding
inline std::vector<double> conv2d_ref(const std::vector<double>& x, int B, int Cin, int H, int W,
                                      const std::vector<double>& w, int Cout, int kh, int kw,
                                      int stride, int pad, int groups) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int gc_in = Cin / groups;
  const int gc_out = Cout / groups;
  std::vector<double> y(static_cast<std::size_t>(B) * Cout * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double s = 0.0;
          const int gi = oc / gc_out;
          for (int icl = 0; icl < gc_in; ++icl)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int ih = oh * stride - pad + u;
                const int iw = ow * stride - pad + v;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                const int ic = gi * gc_in + icl;
                s += x[((b * Cin + ic) * H + ih) * W + iw] *
                     w[((oc * gc_in + icl) * kh + u) * kw + v];
              }
          y[((b * Cout + oc) * Ho + oh) * Wo + ow] = s;
        }
  return y;
}

inline std::vector<double> softmax_ref(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> y(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    s += y[i];
  }
  for (double& v : y) v /= s;
  return y;
}

// tau^2 * CE(softmax(zs/tau), softmax(zt/tau)) for one row
inline double kd_loss_ref(const std::vector<double>& zs, const std::vector<double>& zt, double tau) {
  std::vector<double> s(zs), t(zt);
  for (double& v : s) v /= tau;
  for (double& v : t) v /= tau;
  auto ps = softmax_ref(s);
  auto pt = softmax_ref(t);
  double ce = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) ce -= pt[i] * std::log(ps[i]);
  return tau * tau * ce;
}

struct FdResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

// Central finite differences against tape gradients. loss_fn must rebuild the
// forward pass from the current parameter values on every call. Checks up to
// max_coords randomly chosen coordinates of each parameter.
inline FdResult fd_check(const std::function<uninas::Tensor()>& loss_fn,
                         std::vector<uninas::Tensor> params, int max_coords, uninas::DetRng& rng,
                         double eps = 1e-5) {
  using uninas::GradTape;
  using uninas::Tensor;
  for (auto& p : params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (auto& p : params) analytic.push_back(p.grad());

  FdResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    const std::int64_t n = static_cast<std::int64_t>(vals.size());
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords; ++i) {
        coords.push_back(static_cast<std::int64_t>(rng.uniform() * static_cast<double>(n)));
      }
    }
    for (std::int64_t c : coords) {
      const double keep = vals[c];
      vals[c] = keep + eps;
      const double fp = loss_fn().item();
      vals[c] = keep - eps;
      const double fm = loss_fn().item();
      vals[c] = keep;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[pi][c];
      const double denom = std::max(std::abs(fd), std::abs(an));
      // differences below the central-difference noise floor count as exact
      double rel;
      if (std::abs(fd - an) < 1e-7) {
        rel = 0.0;
      } else if (denom < 1e-6) {
        rel = 1.0;
      } else {
        rel = std::abs(fd - an) / denom;
      }
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace oracle
