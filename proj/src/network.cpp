#include "uninas/network.hpp"

#include <stdexcept>

namespace uninas {

namespace {

// measured MAC delta of a closure, accumulated into *slot when counting
template <typename Fn>
void probed_slot(std::int64_t* slot, Fn&& fn) {
  if (!slot) {
    fn();
    return;
  }
  MacCounter counter;
  fn();
  *slot += counter.count();
}

}  // namespace

std::vector<Tensor> StemModule::parameters() const {
  return {conv1_w, bn1.gamma, bn1.beta, conv2_w, bn2.gamma, bn2.beta};
}

std::vector<Tensor> HeadModule::parameters() const { return {w, b}; }

Network materialize(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec = spec;
  DetRng rng(seed ^ 0x9E3779B97F4A7C15ull);

  net.stem.conv1_w = Tensor::he_uniform_conv({spec.stem.channels[0], 3, 3, 3}, rng, true);
  net.stem.bn1 = BnState::make(spec.stem.channels[0]);
  net.stem.conv2_w =
      Tensor::he_uniform_conv({spec.stem.channels[1], spec.stem.channels[0], 3, 3}, rng, true);
  net.stem.bn2 = BnState::make(spec.stem.channels[1]);

  const GridPlan plan = grid_plan(spec, spec.input_size);
  int prev_channels = spec.stem.channels[1];
  int prev_stride = spec.stem.stride;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& st = spec.stages[s];
    Network::Stage stage;
    stage.side = plan.stage_sides[s];
    if (s > 0) {
      DsmModule dsm;
      dsm.params.kind = st.dsm;
      dsm.params.c_in = prev_channels;
      dsm.params.c_out = st.channels;
      dsm.params.stride = st.stride_in / prev_stride;
      dsm.weights = init_dsm_weights(dsm.params, rng);
      stage.dsm = std::move(dsm);
    }
    for (int r = 0; r < st.repeats; ++r) {
      GopBlockModule block;
      block.params.kind = st.gop;
      block.params.channels = st.channels;
      block.params.expansion = st.expansion;
      block.weights = init_block_weights(block.params, rng, stage.side * stage.side);
      stage.blocks.push_back(std::move(block));
    }
    net.stages.push_back(std::move(stage));
    prev_channels = st.channels;
    prev_stride = st.stride_in;
  }

  net.head.w = Tensor::trunc_normal({prev_channels, spec.classes}, rng, 0.02, true);
  net.head.b = Tensor::zeros({spec.classes}, true);
  return net;
}

Tensor Network::forward(const Tensor& images, bool training, CostProbe* probe) const {
  if (images.dim() != 4 || images.shape()[1] != 3 || images.shape()[2] != spec.input_size ||
      images.shape()[3] != spec.input_size) {
    throw std::invalid_argument("network expects [B,3," + std::to_string(spec.input_size) + "," +
                                std::to_string(spec.input_size) + "], got " +
                                shape_str(images.shape()));
  }
  if (probe) {
    probe->stem_macs = 0;
    probe->head_macs = 0;
    probe->dsm_macs.assign(stages.size(), 0);
    probe->stage_macs.assign(stages.size(), 0);
  }

  Tensor x;
  probed_slot(probe ? &probe->stem_macs : nullptr, [&] {
    Tensor rm1 = stem.bn1.running_mean, rv1 = stem.bn1.running_var;
    Tensor rm2 = stem.bn2.running_mean, rv2 = stem.bn2.running_var;
    x = conv2d(images, stem.conv1_w, 2, 1, 1);
    x = batch_norm(x, stem.bn1.gamma, stem.bn1.beta, rm1, rv1, training);
    x = gelu(x);
    x = conv2d(x, stem.conv2_w, 2, 1, 1);
    x = batch_norm(x, stem.bn2.gamma, stem.bn2.beta, rm2, rv2, training);
    x = gelu(x);
  });

  bool tokens = false;  // stem output is spatial
  int side = stages.empty() ? 0 : stages[0].side;
  int prev_side = side;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const Stage& stage = stages[s];
    if (stage.dsm) {
      const DsmModule& d = *stage.dsm;
      probed_slot(probe ? &probe->dsm_macs[s] : nullptr, [&] {
        if (d.params.kind == DsmKind::L) {
          if (tokens) x = tokens_to_spatial(x, prev_side, prev_side);
          x = forward_l_dsm(x, d.params, d.weights, training);
          tokens = false;
        } else {
          if (!tokens) x = spatial_to_tokens(x);
          if (d.params.kind == DsmKind::LG) {
            x = forward_lg_dsm(x, d.params, d.weights, prev_side, prev_side);
          } else {
            x = forward_g_dsm(x, d.params, d.weights);
          }
          tokens = true;
        }
      });
    }
    side = stage.side;
    probed_slot(probe ? &probe->stage_macs[s] : nullptr, [&] {
      for (const GopBlockModule& block : stage.blocks) {
        const bool want_tokens = is_token_layout(block.params.kind);
        if (want_tokens && !tokens) {
          x = spatial_to_tokens(x);
          tokens = true;
        } else if (!want_tokens && tokens) {
          x = tokens_to_spatial(x, side, side);
          tokens = false;
        }
        x = forward_block(x, block.params, block.weights, side, side, training);
      }
    });
    prev_side = side;
  }

  Tensor logits;
  probed_slot(probe ? &probe->head_macs : nullptr, [&] {
    if (tokens) x = tokens_to_spatial(x, side, side);
    Tensor pooled = global_avg_pool(x);
    logits = add(matmul(pooled, head.w), head.b);
  });
  return logits;
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out = stem.parameters();
  for (const Stage& stage : stages) {
    if (stage.dsm) {
      for (Tensor t : stage.dsm->weights.parameters()) out.push_back(t);
    }
    for (const GopBlockModule& b : stage.blocks) {
      for (Tensor t : b.weights.parameters()) out.push_back(t);
    }
  }
  for (Tensor t : head.parameters()) out.push_back(t);
  return out;
}

std::int64_t Network::parameter_count() const {
  std::int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.size();
  return n;
}

void Network::set_requires_grad(bool flag) {
  for (Tensor t : parameters()) t.set_requires_grad(flag);
}

}  // namespace uninas
