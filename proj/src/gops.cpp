#include "uninas/gops.hpp"

#include <cmath>
#include <stdexcept>

namespace uninas {

const char* to_string(GopKind kind) {
  switch (kind) {
    case GopKind::Conv: return "conv";
    case GopKind::DWConv: return "dwconv";
    case GopKind::SA: return "sa";
    case GopKind::LSA: return "lsa";
    case GopKind::MLP: return "mlp";
  }
  throw std::logic_error("unknown GopKind");
}

GopKind gop_from_string(const std::string& name) {
  if (name == "conv") return GopKind::Conv;
  if (name == "dwconv") return GopKind::DWConv;
  if (name == "sa") return GopKind::SA;
  if (name == "lsa") return GopKind::LSA;
  if (name == "mlp") return GopKind::MLP;
  throw std::invalid_argument("unknown operator kind: " + name);
}

bool is_conv_family(GopKind kind) { return kind == GopKind::Conv || kind == GopKind::DWConv; }
bool is_attention(GopKind kind) { return kind == GopKind::SA || kind == GopKind::LSA; }
bool is_token_layout(GopKind kind) { return !is_conv_family(kind); }

void BlockParams::validate() const {
  if (channels <= 0) throw std::invalid_argument("block channels must be positive");
  if (expansion < 2 || expansion > 6) {
    throw std::invalid_argument("expansion must be in {2..6}, got " + std::to_string(expansion));
  }
  if (is_attention(kind) && channels % kHeadDim != 0) {
    throw std::invalid_argument("attention channels must be divisible by " +
                                std::to_string(kHeadDim) + ", got " + std::to_string(channels));
  }
}

BnState BnState::make(int channels) {
  BnState s;
  s.gamma = Tensor::full({channels}, 1.0, true);
  s.beta = Tensor::zeros({channels}, true);
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0);
  return s;
}

namespace {

constexpr double kInitSigma = 0.02;

Tensor linear_w(int in, int out, DetRng& rng) {
  return Tensor::trunc_normal({in, out}, rng, kInitSigma, true);
}

Tensor zeros_p(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void push_bn(std::vector<Tensor>& out, const BnState& s) {
  out.push_back(s.gamma);
  out.push_back(s.beta);
}

// x [B,N,c] @ w [c,out] + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

Tensor ffn(const Tensor& x, const BlockWeights& w) {
  Tensor h = gelu(linear(x, w.fc1_w, w.fc1_b));
  return linear(h, w.fc2_w, w.fc2_b);
}

// depthwise 3x3 over the token grid, added residually
Tensor apply_cpe(const Tensor& tokens, const BlockWeights& w, int c, int grid_h, int grid_w) {
  Tensor spatial = tokens_to_spatial(tokens, grid_h, grid_w);
  Tensor pe = conv2d(spatial, w.cpe_w, 1, 1, c);
  pe = add(pe, reshape(w.cpe_b, {c, 1, 1}));
  return add(tokens, spatial_to_tokens(pe));
}

// [B,N,c] -> [B*nwin,49,c] over a padded ceil(H/7) x ceil(W/7) window grid
Tensor partition_windows(const Tensor& tokens, int grid_h, int grid_w, int pad_h, int pad_w) {
  const int B = tokens.shape()[0];
  const int c = tokens.shape()[2];
  const int hp = grid_h + pad_h, wp = grid_w + pad_w;
  const int nh = hp / kWindowSize, nw = wp / kWindowSize;
  Tensor spatial = tokens_to_spatial(tokens, grid_h, grid_w);
  spatial = pad_bottom_right(spatial, pad_h, pad_w);
  Tensor t = reshape(spatial, {B, c, nh, kWindowSize, nw, kWindowSize});
  t = permute(t, {0, 2, 4, 3, 5, 1});
  return reshape(t, {B * nh * nw, kWindowSize * kWindowSize, c});
}

Tensor merge_windows(const Tensor& win, int batch, int grid_h, int grid_w, int pad_h, int pad_w) {
  const int c = win.shape()[2];
  const int hp = grid_h + pad_h, wp = grid_w + pad_w;
  const int nh = hp / kWindowSize, nw = wp / kWindowSize;
  Tensor t = reshape(win, {batch, nh, nw, kWindowSize, kWindowSize, c});
  t = permute(t, {0, 5, 1, 3, 2, 4});
  t = reshape(t, {batch, c, hp, wp});
  t = crop_bottom_right(t, grid_h, grid_w);
  return spatial_to_tokens(t);
}

}  // namespace

std::vector<Tensor> BlockWeights::parameters() const {
  std::vector<Tensor> out;
  if (is_conv_family(kind)) {
    out.push_back(proj_up);
    out.push_back(inner_conv);
    out.push_back(proj_down);
    push_bn(out, bn1);
    push_bn(out, bn2);
    push_bn(out, bn3);
    return out;
  }
  out.push_back(ln1_g);
  out.push_back(ln1_b);
  out.push_back(ln2_g);
  out.push_back(ln2_b);
  if (is_attention(kind)) {
    out.push_back(cpe_w);
    out.push_back(cpe_b);
    for (const Tensor& t : {wq, bq, wk, bk, wv, bv, wo, bo}) out.push_back(t);
  } else {
    for (const Tensor& t : {tmix1_w, tmix1_b, tmix2_w, tmix2_b}) out.push_back(t);
  }
  for (const Tensor& t : {fc1_w, fc1_b, fc2_w, fc2_b}) out.push_back(t);
  return out;
}

std::int64_t BlockWeights::parameter_count() const {
  std::int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.size();
  return n;
}

void BlockWeights::set_all_zero() {
  for (Tensor t : parameters()) {
    std::fill(t.values().begin(), t.values().end(), 0.0);
  }
}

void BlockWeights::set_requires_grad(bool flag) {
  for (Tensor t : parameters()) t.set_requires_grad(flag);
}

BlockWeights init_block_weights(const BlockParams& p, DetRng& rng, int token_count) {
  p.validate();
  BlockWeights w;
  w.kind = p.kind;
  const int c = p.channels;
  const int ec = p.hidden();
  if (is_conv_family(p.kind)) {
    const int groups = (p.kind == GopKind::DWConv) ? ec : 1;
    w.proj_up = Tensor::he_uniform_conv({ec, c, 1, 1}, rng, true);
    w.inner_conv = Tensor::he_uniform_conv({ec, ec / groups, kConvKernel, kConvKernel}, rng, true);
    w.proj_down = Tensor::he_uniform_conv({c, ec, 1, 1}, rng, true);
    w.bn1 = BnState::make(ec);
    w.bn2 = BnState::make(ec);
    w.bn3 = BnState::make(c);
    return w;
  }
  w.ln1_g = Tensor::full({c}, 1.0, true);
  w.ln1_b = zeros_p({c});
  w.ln2_g = Tensor::full({c}, 1.0, true);
  w.ln2_b = zeros_p({c});
  w.fc1_w = linear_w(c, ec, rng);
  w.fc1_b = zeros_p({ec});
  w.fc2_w = linear_w(ec, c, rng);
  w.fc2_b = zeros_p({c});
  if (is_attention(p.kind)) {
    w.cpe_w = Tensor::he_uniform_conv({c, 1, kConvKernel, kConvKernel}, rng, true);
    w.cpe_b = zeros_p({c});
    w.wq = linear_w(c, c, rng);
    w.bq = zeros_p({c});
    w.wk = linear_w(c, c, rng);
    w.bk = zeros_p({c});
    w.wv = linear_w(c, c, rng);
    w.bv = zeros_p({c});
    w.wo = linear_w(c, c, rng);
    w.bo = zeros_p({c});
  } else {
    if (token_count <= 0) throw std::invalid_argument("MLP block needs a positive token count");
    w.token_count = token_count;
    // token-mix hidden width is half the token count
    const int nt = std::max<int>(1, static_cast<int>(std::llround(0.5 * token_count)));
    w.tmix1_w = linear_w(token_count, nt, rng);
    w.tmix1_b = zeros_p({nt});
    w.tmix2_w = linear_w(nt, token_count, rng);
    w.tmix2_b = zeros_p({token_count});
  }
  return w;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const Tensor* mask, AttnProbe* probe) {
  const int B = q.shape()[0];
  const int nq = q.shape()[1];
  const int nk = k.shape()[1];
  const int c = q.shape()[2];
  if (c % heads != 0) throw std::invalid_argument("attention width not divisible by heads");
  const int hd = c / heads;

  auto split = [&](const Tensor& t, int n) {
    return permute(reshape(t, {B, n, heads, hd}), {0, 2, 1, 3});
  };
  Tensor qh = split(q, nq);
  Tensor kh = split(k, nk);
  Tensor vh = split(v, nk);

  Tensor scores = scale(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (mask) scores = add(scores, *mask);
  Tensor attn = softmax(scores, 3);
  if (probe) probe->probs.push_back(attn);
  Tensor ctx = matmul(attn, vh);
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, nq, c});
  return ctx;
}

Tensor spatial_to_tokens(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("spatial_to_tokens: expected [B,C,H,W]");
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

Tensor tokens_to_spatial(const Tensor& x, int grid_h, int grid_w) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("tokens_to_spatial: expected [B,N,C]");
  if (s[1] != grid_h * grid_w) {
    throw std::invalid_argument("tokens_to_spatial: token count " + std::to_string(s[1]) +
                                " does not match grid " + std::to_string(grid_h) + "x" +
                                std::to_string(grid_w));
  }
  return permute(reshape(x, {s[0], grid_h, grid_w, s[2]}), {0, 3, 1, 2});
}

Tensor forward_conv_block(const Tensor& x, const BlockParams& p, const BlockWeights& w,
                          bool training) {
  p.validate();
  if (!is_conv_family(p.kind)) throw std::invalid_argument("forward_conv_block: wrong kind");
  if (x.dim() != 4 || x.shape()[1] != p.channels) {
    throw std::invalid_argument("conv block expects [B," + std::to_string(p.channels) +
                                ",H,W], got " + shape_str(x.shape()));
  }
  const int groups = (p.kind == GopKind::DWConv) ? p.hidden() : 1;
  // tensor handles share storage, so running stats update through the copies
  Tensor rm1 = w.bn1.running_mean, rv1 = w.bn1.running_var;
  Tensor rm2 = w.bn2.running_mean, rv2 = w.bn2.running_var;
  Tensor rm3 = w.bn3.running_mean, rv3 = w.bn3.running_var;
  Tensor t = conv2d(x, w.proj_up, 1, 0, 1);
  t = batch_norm(t, w.bn1.gamma, w.bn1.beta, rm1, rv1, training);
  t = gelu(t);
  t = conv2d(t, w.inner_conv, 1, 1, groups);
  t = batch_norm(t, w.bn2.gamma, w.bn2.beta, rm2, rv2, training);
  t = gelu(t);
  t = conv2d(t, w.proj_down, 1, 0, 1);
  t = batch_norm(t, w.bn3.gamma, w.bn3.beta, rm3, rv3, training);
  return add(x, t);
}

Tensor forward_transformer_block(const Tensor& x, const BlockParams& p, const BlockWeights& w,
                                 int grid_h, int grid_w, AttnProbe* probe) {
  p.validate();
  if (!is_attention(p.kind)) throw std::invalid_argument("forward_transformer_block: wrong kind");
  if (x.dim() != 3 || x.shape()[2] != p.channels) {
    throw std::invalid_argument("transformer block expects [B,N," + std::to_string(p.channels) +
                                "], got " + shape_str(x.shape()));
  }
  if (x.shape()[1] != grid_h * grid_w) {
    throw std::invalid_argument("transformer block: token count does not match the grid");
  }
  const int B = x.shape()[0];
  const int c = p.channels;

  Tensor h = apply_cpe(x, w, c, grid_h, grid_w);

  Tensor n1 = layer_norm(h, w.ln1_g, w.ln1_b);
  Tensor q = linear(n1, w.wq, w.bq);
  Tensor k = linear(n1, w.wk, w.bk);
  Tensor v = linear(n1, w.wv, w.bv);

  Tensor ctx;
  if (p.kind == GopKind::SA) {
    ctx = multi_head_attention(q, k, v, p.heads(), nullptr, probe);
  } else {
    const int pad_h = (kWindowSize - grid_h % kWindowSize) % kWindowSize;
    const int pad_w = (kWindowSize - grid_w % kWindowSize) % kWindowSize;
    const int nh = (grid_h + pad_h) / kWindowSize, nw = (grid_w + pad_w) / kWindowSize;
    Tensor qw = partition_windows(q, grid_h, grid_w, pad_h, pad_w);
    Tensor kw = partition_windows(k, grid_h, grid_w, pad_h, pad_w);
    Tensor vw = partition_windows(v, grid_h, grid_w, pad_h, pad_w);
    Tensor win_mask;
    const Tensor* mask_ptr = nullptr;
    if (pad_h > 0 || pad_w > 0) {
      // padded key positions get -inf-like scores and thus exactly zero weight
      const int n2 = kWindowSize * kWindowSize;
      std::vector<double> m(static_cast<std::size_t>(B) * nh * nw * n2, 0.0);
      std::size_t pos = 0;
      for (int b = 0; b < B; ++b) {
        for (int wi = 0; wi < nh; ++wi) {
          for (int wj = 0; wj < nw; ++wj) {
            for (int u = 0; u < kWindowSize; ++u) {
              for (int t = 0; t < kWindowSize; ++t) {
                const int gi = wi * kWindowSize + u;
                const int gj = wj * kWindowSize + t;
                m[pos++] = (gi < grid_h && gj < grid_w) ? 0.0 : -1e30;
              }
            }
          }
        }
      }
      win_mask = Tensor::from_data({B * nh * nw, 1, 1, n2}, std::move(m));
      mask_ptr = &win_mask;
    }
    Tensor cw = multi_head_attention(qw, kw, vw, p.heads(), mask_ptr, probe);
    ctx = merge_windows(cw, B, grid_h, grid_w, pad_h, pad_w);
  }
  Tensor attn_out = linear(ctx, w.wo, w.bo);
  Tensor y1 = add(h, attn_out);

  Tensor n2t = layer_norm(y1, w.ln2_g, w.ln2_b);
  return add(y1, ffn(n2t, w));
}

Tensor forward_mlp_block(const Tensor& x, const BlockParams& p, const BlockWeights& w) {
  p.validate();
  if (p.kind != GopKind::MLP) throw std::invalid_argument("forward_mlp_block: wrong kind");
  if (x.dim() != 3 || x.shape()[2] != p.channels) {
    throw std::invalid_argument("mlp block expects [B,N," + std::to_string(p.channels) + "], got " +
                                shape_str(x.shape()));
  }
  if (x.shape()[1] != w.token_count) {
    throw std::invalid_argument("mlp block built for " + std::to_string(w.token_count) +
                                " tokens, got " + std::to_string(x.shape()[1]));
  }
  Tensor n1 = layer_norm(x, w.ln1_g, w.ln1_b);
  Tensor t = permute(n1, {0, 2, 1});  // [B,c,N]
  t = gelu(add(matmul(t, w.tmix1_w), w.tmix1_b));
  t = add(matmul(t, w.tmix2_w), w.tmix2_b);
  t = permute(t, {0, 2, 1});
  Tensor y1 = add(x, t);

  Tensor n2 = layer_norm(y1, w.ln2_g, w.ln2_b);
  return add(y1, ffn(n2, w));
}

Tensor forward_block(const Tensor& x, const BlockParams& p, const BlockWeights& w, int grid_h,
                     int grid_w, bool training, AttnProbe* probe) {
  if (is_conv_family(p.kind)) return forward_conv_block(x, p, w, training);
  if (is_attention(p.kind)) return forward_transformer_block(x, p, w, grid_h, grid_w, probe);
  return forward_mlp_block(x, p, w);
}

}  // namespace uninas
