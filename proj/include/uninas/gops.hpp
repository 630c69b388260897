#pragma once

#include <string>
#include <vector>

#include "uninas/tensor.hpp"

namespace uninas {

/// The five general operators. Each is expressed in the same residual form
/// y = x + Operation(x) and configured by the (kind, channels, expansion)
/// triple.
enum class GopKind { Conv, DWConv, SA, LSA, MLP };

constexpr int kNumGopKinds = 5;
constexpr int kHeadDim = 32;
constexpr int kWindowSize = 7;
constexpr int kConvKernel = 3;

const char* to_string(GopKind kind);
GopKind gop_from_string(const std::string& name);
bool is_conv_family(GopKind kind);   // Conv, DWConv
bool is_attention(GopKind kind);     // SA, LSA
bool is_token_layout(GopKind kind);  // SA, LSA, MLP

struct BlockParams {
  GopKind kind = GopKind::Conv;
  int channels = 0;
  int expansion = 0;  // hidden width is expansion * channels

  int heads() const { return channels / kHeadDim; }
  int hidden() const { return expansion * channels; }
  void validate() const;
};

// Batch-norm parameter/buffer bundle for one normalized width.
struct BnState {
  Tensor gamma, beta, running_mean, running_var;
  static BnState make(int channels);
};

/// All weights of one block. Shapes are fully determined by BlockParams
/// (plus the stage token count for MLP token mixing).
struct BlockWeights {
  GopKind kind = GopKind::Conv;

  // conv bottleneck
  Tensor proj_up, inner_conv, proj_down;
  BnState bn1, bn2, bn3;

  // transformer
  Tensor cpe_w, cpe_b;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;

  // mlp token mixing; fixed token count chosen at construction
  Tensor tmix1_w, tmix1_b, tmix2_w, tmix2_b;
  int token_count = 0;

  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
  void set_all_zero();
  void set_requires_grad(bool flag);
};

// token_count is required for MLP blocks and ignored otherwise
BlockWeights init_block_weights(const BlockParams& p, DetRng& rng, int token_count = 0);

/// Captures attention probability tensors of a forward pass, one entry per
/// attention application, shaped [batch, heads, queries, keys].
struct AttnProbe {
  std::vector<Tensor> probs;
};

// q [B,Nq,c], k/v [B,Nk,c]; mask (optional) broadcasts onto the score tensor
// [B,heads,Nq,Nk] and is added before the softmax.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const Tensor* mask = nullptr, AttnProbe* probe = nullptr);

// x [B,c,H,W] -> same shape; Conv or DWConv bottleneck
Tensor forward_conv_block(const Tensor& x, const BlockParams& p, const BlockWeights& w,
                          bool training);

// x [B,N,c] with N == H*W -> same shape; SA or LSA
Tensor forward_transformer_block(const Tensor& x, const BlockParams& p, const BlockWeights& w,
                                 int grid_h, int grid_w, AttnProbe* probe = nullptr);

// x [B,N,c] with N fixed at construction -> same shape
Tensor forward_mlp_block(const Tensor& x, const BlockParams& p, const BlockWeights& w);

// layout-appropriate dispatch: conv family takes [B,c,H,W], the rest [B,N,c]
Tensor forward_block(const Tensor& x, const BlockParams& p, const BlockWeights& w, int grid_h,
                     int grid_w, bool training, AttnProbe* probe = nullptr);

// [B,c,H,W] <-> [B,H*W,c]
Tensor spatial_to_tokens(const Tensor& x);
Tensor tokens_to_spatial(const Tensor& x, int grid_h, int grid_w);

}  // namespace uninas
