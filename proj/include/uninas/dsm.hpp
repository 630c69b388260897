#pragma once

#include <string>
#include <vector>

#include "uninas/gops.hpp"
#include "uninas/tensor.hpp"

namespace uninas {

/// Stage-boundary downsampling modules distinguished by the context they
/// aggregate: L uses a strided local convolution, G attends to all input
/// tokens from a sequence-downsampled query, LG from a grid-downsampled one.
enum class DsmKind { L, LG, G };

constexpr int kNumDsmKinds = 3;

const char* to_string(DsmKind kind);
DsmKind dsm_from_string(const std::string& name);

struct DsmParams {
  DsmKind kind = DsmKind::L;
  int c_in = 0;
  int c_out = 0;
  int stride = 2;  // 1 or 2

  int heads() const { return c_out / kHeadDim; }
  void validate() const;
};

struct DsmWeights {
  DsmKind kind = DsmKind::L;
  int stride = 2;

  // L: strided conv + BN
  Tensor conv_w;
  BnState bn;

  // LG / G attention path
  Tensor ln_g, ln_b;
  Tensor q_conv_w, q_conv_b;    // LG: 3x3 conv2d; G: first conv1d
  Tensor q_conv2_w, q_conv2_b;  // G at stride 2: second conv1d
  Tensor wk, bk, wv, bv, wo, bo;
  Tensor short_w, short_b;  // projection on the pooled shortcut

  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
  void set_all_zero();
  void set_requires_grad(bool flag);
};

DsmWeights init_dsm_weights(const DsmParams& p, DetRng& rng);

// x [B,c_in,H,W] -> [B,c_out,H/s,W/s]
Tensor forward_l_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w, bool training);

// x [B,N,c_in] -> [B,N/s^2,c_out]; every output token attends to all inputs
Tensor forward_g_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w,
                     AttnProbe* probe = nullptr);

// x [B,N,c_in] with N == H*W -> [B,(H/s)*(W/s),c_out]
Tensor forward_lg_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w, int grid_h,
                      int grid_w, AttnProbe* probe = nullptr);

}  // namespace uninas
