#include "uninas/dsm.hpp"

#include <stdexcept>

namespace uninas {

const char* to_string(DsmKind kind) {
  switch (kind) {
    case DsmKind::L: return "l";
    case DsmKind::LG: return "lg";
    case DsmKind::G: return "g";
  }
  throw std::logic_error("unknown DsmKind");
}

DsmKind dsm_from_string(const std::string& name) {
  if (name == "l") return DsmKind::L;
  if (name == "lg") return DsmKind::LG;
  if (name == "g") return DsmKind::G;
  throw std::invalid_argument("unknown downsampling kind: " + name);
}

void DsmParams::validate() const {
  if (c_in <= 0 || c_out <= 0) throw std::invalid_argument("dsm channels must be positive");
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("dsm stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (kind != DsmKind::L && c_out % kHeadDim != 0) {
    throw std::invalid_argument("attention dsm output channels must be divisible by " +
                                std::to_string(kHeadDim) + ", got " + std::to_string(c_out));
  }
}

std::vector<Tensor> DsmWeights::parameters() const {
  std::vector<Tensor> out;
  if (kind == DsmKind::L) {
    out.push_back(conv_w);
    out.push_back(bn.gamma);
    out.push_back(bn.beta);
    return out;
  }
  out.push_back(ln_g);
  out.push_back(ln_b);
  out.push_back(q_conv_w);
  out.push_back(q_conv_b);
  if (kind == DsmKind::G && stride == 2) {
    out.push_back(q_conv2_w);
    out.push_back(q_conv2_b);
  }
  for (const Tensor& t : {wk, bk, wv, bv, wo, bo, short_w, short_b}) out.push_back(t);
  return out;
}

std::int64_t DsmWeights::parameter_count() const {
  std::int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.size();
  return n;
}

void DsmWeights::set_all_zero() {
  for (Tensor t : parameters()) std::fill(t.values().begin(), t.values().end(), 0.0);
}

void DsmWeights::set_requires_grad(bool flag) {
  for (Tensor t : parameters()) t.set_requires_grad(flag);
}

DsmWeights init_dsm_weights(const DsmParams& p, DetRng& rng) {
  p.validate();
  DsmWeights w;
  w.kind = p.kind;
  w.stride = p.stride;
  if (p.kind == DsmKind::L) {
    w.conv_w = Tensor::he_uniform_conv({p.c_out, p.c_in, kConvKernel, kConvKernel}, rng, true);
    w.bn = BnState::make(p.c_out);
    return w;
  }
  w.ln_g = Tensor::full({p.c_in}, 1.0, true);
  w.ln_b = Tensor::zeros({p.c_in}, true);
  if (p.kind == DsmKind::LG) {
    w.q_conv_w = Tensor::he_uniform_conv({p.c_out, p.c_in, kConvKernel, kConvKernel}, rng, true);
    w.q_conv_b = Tensor::zeros({p.c_out}, true);
  } else {
    w.q_conv_w = Tensor::trunc_normal({p.c_out, p.c_in, kConvKernel}, rng, 0.02, true);
    w.q_conv_b = Tensor::zeros({p.c_out}, true);
    if (p.stride == 2) {
      w.q_conv2_w = Tensor::trunc_normal({p.c_out, p.c_out, kConvKernel}, rng, 0.02, true);
      w.q_conv2_b = Tensor::zeros({p.c_out}, true);
    }
  }
  w.wk = Tensor::trunc_normal({p.c_in, p.c_out}, rng, 0.02, true);
  w.bk = Tensor::zeros({p.c_out}, true);
  w.wv = Tensor::trunc_normal({p.c_in, p.c_out}, rng, 0.02, true);
  w.bv = Tensor::zeros({p.c_out}, true);
  w.wo = Tensor::trunc_normal({p.c_out, p.c_out}, rng, 0.02, true);
  w.bo = Tensor::zeros({p.c_out}, true);
  w.short_w = Tensor::trunc_normal({p.c_in, p.c_out}, rng, 0.02, true);
  w.short_b = Tensor::zeros({p.c_out}, true);
  return w;
}

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

// pooled shortcut: avg pool with kernel == stride, then a linear projection
Tensor shortcut_from_grid(const Tensor& tokens, const DsmParams& p, const DsmWeights& w,
                          int grid_h, int grid_w) {
  Tensor spatial = tokens_to_spatial(tokens, grid_h, grid_w);
  Tensor pooled = avg_pool2d(spatial, p.stride, p.stride, p.stride, p.stride);
  return linear(spatial_to_tokens(pooled), w.short_w, w.short_b);
}

Tensor shortcut_from_sequence(const Tensor& tokens, const DsmParams& p, const DsmWeights& w) {
  const int B = tokens.shape()[0];
  const int n = tokens.shape()[1];
  const int win = p.stride * p.stride;
  Tensor seq = reshape(permute(tokens, {0, 2, 1}), {B, p.c_in, 1, n});
  Tensor pooled = avg_pool2d(seq, 1, win, 1, win);
  Tensor back = permute(reshape(pooled, {B, p.c_in, n / win}), {0, 2, 1});
  return linear(back, w.short_w, w.short_b);
}

}  // namespace

Tensor forward_l_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w, bool training) {
  p.validate();
  if (p.kind != DsmKind::L) throw std::invalid_argument("forward_l_dsm: wrong kind");
  if (x.dim() != 4 || x.shape()[1] != p.c_in) {
    throw std::invalid_argument("l_dsm expects [B," + std::to_string(p.c_in) + ",H,W], got " +
                                shape_str(x.shape()));
  }
  if (x.shape()[2] % p.stride != 0 || x.shape()[3] % p.stride != 0) {
    throw std::invalid_argument("l_dsm: spatial dims not divisible by stride");
  }
  Tensor rm = w.bn.running_mean, rv = w.bn.running_var;
  Tensor t = conv2d(x, w.conv_w, p.stride, 1, 1);
  return batch_norm(t, w.bn.gamma, w.bn.beta, rm, rv, training);
}

Tensor forward_g_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w, AttnProbe* probe) {
  p.validate();
  if (p.kind != DsmKind::G) throw std::invalid_argument("forward_g_dsm: wrong kind");
  if (x.dim() != 3 || x.shape()[2] != p.c_in) {
    throw std::invalid_argument("g_dsm expects [B,N," + std::to_string(p.c_in) + "], got " +
                                shape_str(x.shape()));
  }
  const int B = x.shape()[0];
  const int n = x.shape()[1];
  if (p.stride == 2 && n % 4 != 0) {
    throw std::invalid_argument("g_dsm: token count " + std::to_string(n) +
                                " not divisible by 4 at stride 2");
  }
  Tensor norm = layer_norm(x, w.ln_g, w.ln_b);

  // query: strided 1-d convolution over the flattened sequence
  Tensor seq = permute(norm, {0, 2, 1});  // [B,c_in,N]
  Tensor q;
  if (p.stride == 2) {
    Tensor h = conv1d(seq, w.q_conv_w, 2, 1);
    h = add(h, reshape(w.q_conv_b, {p.c_out, 1}));
    h = conv1d(h, w.q_conv2_w, 2, 1);
    h = add(h, reshape(w.q_conv2_b, {p.c_out, 1}));
    q = permute(h, {0, 2, 1});
  } else {
    Tensor h = conv1d(seq, w.q_conv_w, 1, 1);
    h = add(h, reshape(w.q_conv_b, {p.c_out, 1}));
    q = permute(h, {0, 2, 1});
  }

  Tensor k = linear(norm, w.wk, w.bk);
  Tensor v = linear(norm, w.wv, w.bv);
  Tensor ctx = multi_head_attention(q, k, v, p.heads(), nullptr, probe);
  Tensor out = linear(ctx, w.wo, w.bo);
  (void)B;
  return add(out, shortcut_from_sequence(x, p, w));
}

Tensor forward_lg_dsm(const Tensor& x, const DsmParams& p, const DsmWeights& w, int grid_h,
                      int grid_w, AttnProbe* probe) {
  p.validate();
  if (p.kind != DsmKind::LG) throw std::invalid_argument("forward_lg_dsm: wrong kind");
  if (x.dim() != 3 || x.shape()[2] != p.c_in) {
    throw std::invalid_argument("lg_dsm expects [B,N," + std::to_string(p.c_in) + "], got " +
                                shape_str(x.shape()));
  }
  if (x.shape()[1] != grid_h * grid_w) {
    throw std::invalid_argument("lg_dsm: token count does not match the grid");
  }
  if (grid_h % p.stride != 0 || grid_w % p.stride != 0) {
    throw std::invalid_argument("lg_dsm: grid not divisible by stride");
  }
  Tensor norm = layer_norm(x, w.ln_g, w.ln_b);

  // query: reshape to the grid, strided 3x3 conv, flatten back
  Tensor spatial = tokens_to_spatial(norm, grid_h, grid_w);
  Tensor qs = conv2d(spatial, w.q_conv_w, p.stride, 1, 1);
  qs = add(qs, reshape(w.q_conv_b, {p.c_out, 1, 1}));
  Tensor q = spatial_to_tokens(qs);

  Tensor k = linear(norm, w.wk, w.bk);
  Tensor v = linear(norm, w.wv, w.bv);
  Tensor ctx = multi_head_attention(q, k, v, p.heads(), nullptr, probe);
  Tensor out = linear(ctx, w.wo, w.bo);
  return add(out, shortcut_from_grid(x, p, w, grid_h, grid_w));
}

}  // namespace uninas
