#include "uninas/cost_model.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "uninas/network.hpp"

namespace uninas {

namespace {

std::int64_t conv_out(std::int64_t in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

std::int64_t sq(std::int64_t x) { return x * x; }

int mlp_hidden_tokens(int token_count) {
  return std::max<int>(1, static_cast<int>(std::llround(0.5 * token_count)));
}

}  // namespace

std::int64_t block_macs(const BlockParams& p, int grid_h, int grid_w) {
  p.validate();
  const std::int64_t n = static_cast<std::int64_t>(grid_h) * grid_w;
  if (n == 0) return 0;
  const std::int64_t c = p.channels;
  const std::int64_t ec = p.hidden();
  if (is_conv_family(p.kind)) {
    const std::int64_t inner =
        (p.kind == GopKind::DWConv) ? n * ec * 9 : n * ec * ec * 9;
    return n * ec * c + inner + n * c * ec;
  }
  const std::int64_t ffn = 2 * n * c * ec;
  if (p.kind == GopKind::MLP) {
    const std::int64_t nt = mlp_hidden_tokens(static_cast<int>(n));
    return 2 * c * n * nt + ffn;
  }
  const std::int64_t cpe = n * c * 9;
  const std::int64_t qkv = 3 * n * c * c;
  const std::int64_t out_proj = n * c * c;
  std::int64_t attn;
  if (p.kind == GopKind::SA) {
    attn = 2 * n * n * c;
  } else {
    const std::int64_t nwin = ((grid_h + kWindowSize - 1) / kWindowSize) *
                              static_cast<std::int64_t>((grid_w + kWindowSize - 1) / kWindowSize);
    attn = 2 * nwin * sq(kWindowSize * kWindowSize) * c;
  }
  return cpe + qkv + attn + out_proj + ffn;
}

std::int64_t block_params(const BlockParams& p, int token_count) {
  p.validate();
  const std::int64_t c = p.channels;
  const std::int64_t ec = p.hidden();
  if (is_conv_family(p.kind)) {
    const std::int64_t inner = (p.kind == GopKind::DWConv) ? ec * 9 : ec * ec * 9;
    return ec * c + 2 * ec + inner + 2 * ec + c * ec + 2 * c;
  }
  const std::int64_t lns = 4 * c;
  const std::int64_t ffn = c * ec + ec + ec * c + c;
  if (p.kind == GopKind::MLP) {
    if (token_count <= 0) throw std::invalid_argument("block_params: MLP needs a token count");
    const std::int64_t n = token_count;
    const std::int64_t nt = mlp_hidden_tokens(token_count);
    return lns + n * nt + nt + nt * n + n + ffn;
  }
  const std::int64_t cpe = 9 * c + c;
  const std::int64_t qkvo = 4 * (c * c + c);
  return lns + cpe + qkvo + ffn;
}

std::int64_t dsm_macs(const DsmParams& p, int in_h, int in_w) {
  p.validate();
  const std::int64_t n_in = static_cast<std::int64_t>(in_h) * in_w;
  if (n_in == 0) return 0;
  const std::int64_t ci = p.c_in, co = p.c_out;
  if (p.kind == DsmKind::L) {
    const std::int64_t oh = conv_out(in_h, 3, p.stride, 1);
    const std::int64_t ow = conv_out(in_w, 3, p.stride, 1);
    return oh * ow * co * ci * 9;
  }
  std::int64_t query, n_out;
  if (p.kind == DsmKind::LG) {
    const std::int64_t oh = conv_out(in_h, 3, p.stride, 1);
    const std::int64_t ow = conv_out(in_w, 3, p.stride, 1);
    n_out = oh * ow;
    query = n_out * co * ci * 9;
  } else if (p.stride == 2) {
    const std::int64_t n1 = conv_out(n_in, 3, 2, 1);
    const std::int64_t n2 = conv_out(n1, 3, 2, 1);
    query = n1 * co * ci * 3 + n2 * co * co * 3;
    n_out = n2;
  } else {
    n_out = conv_out(n_in, 3, 1, 1);
    query = n_out * co * ci * 3;
  }
  const std::int64_t kv = 2 * n_in * ci * co;
  const std::int64_t attn = 2 * n_out * n_in * co;
  const std::int64_t out_proj = n_out * co * co;
  const std::int64_t shortcut = n_out * ci * co;
  return query + kv + attn + out_proj + shortcut;
}

std::int64_t dsm_params(const DsmParams& p) {
  p.validate();
  const std::int64_t ci = p.c_in, co = p.c_out;
  if (p.kind == DsmKind::L) return co * ci * 9 + 2 * co;
  const std::int64_t ln = 2 * ci;
  std::int64_t query;
  if (p.kind == DsmKind::LG) {
    query = co * ci * 9 + co;
  } else if (p.stride == 2) {
    query = co * ci * 3 + co + co * co * 3 + co;
  } else {
    query = co * ci * 3 + co;
  }
  const std::int64_t kv = 2 * (ci * co + co);
  const std::int64_t out_proj = co * co + co;
  const std::int64_t shortcut = ci * co + co;
  return ln + query + kv + out_proj + shortcut;
}

CostReport arch_cost(const ArchitectureSpec& spec) { return arch_cost(spec, spec.input_size); }

CostReport arch_cost(const ArchitectureSpec& spec, int input_size) {
  spec.validate();
  if (input_size <= 0 || input_size % spec.stages.back().stride_in != 0) {
    throw std::invalid_argument("arch_cost: input size must be divisible by the total stride");
  }
  CostReport r;
  r.input_size = input_size;
  const GridPlan plan = grid_plan(spec, input_size);

  const std::int64_t s1 = plan.stem_mid;
  const std::int64_t s2 = plan.stage_sides[0];
  const int cs1 = spec.stem.channels[0], cs2 = spec.stem.channels[1];
  r.stem_macs = s1 * s1 * cs1 * 3 * 9 + s2 * s2 * cs2 * cs1 * 9;
  r.stem_params = static_cast<std::int64_t>(cs1) * 3 * 9 + 2 * cs1 +
                  static_cast<std::int64_t>(cs2) * cs1 * 9 + 2 * cs2;

  int prev_channels = cs2;
  int prev_stride = spec.stem.stride;
  int prev_side = plan.stage_sides[0];
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& st = spec.stages[s];
    const int side = plan.stage_sides[s];
    if (s > 0) {
      DsmParams dp;
      dp.kind = st.dsm;
      dp.c_in = prev_channels;
      dp.c_out = st.channels;
      dp.stride = st.stride_in / prev_stride;
      r.per_boundary_dsm_macs.push_back(dsm_macs(dp, prev_side, prev_side));
      r.per_boundary_dsm_params.push_back(dsm_params(dp));
    }
    BlockParams bp;
    bp.kind = st.gop;
    bp.channels = st.channels;
    bp.expansion = st.expansion;
    r.per_stage_macs.push_back(st.repeats * block_macs(bp, side, side));
    r.per_stage_params.push_back(st.repeats * block_params(bp, side * side));
    prev_channels = st.channels;
    prev_stride = st.stride_in;
    prev_side = side;
  }

  r.head_macs = static_cast<std::int64_t>(prev_channels) * spec.classes;
  r.head_params = static_cast<std::int64_t>(prev_channels) * spec.classes + spec.classes;

  r.total_macs = r.stem_macs + r.head_macs;
  for (std::int64_t v : r.per_stage_macs) r.total_macs += v;
  for (std::int64_t v : r.per_boundary_dsm_macs) r.total_macs += v;
  r.total_params = r.stem_params + r.head_params;
  for (std::int64_t v : r.per_stage_params) r.total_params += v;
  for (std::int64_t v : r.per_boundary_dsm_params) r.total_params += v;
  return r;
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["cost"] = {{"input_size", input_size},
               {"per_stage_macs", per_stage_macs},
               {"per_boundary_dsm_macs", per_boundary_dsm_macs},
               {"stem_macs", stem_macs},
               {"head_macs", head_macs},
               {"total_macs", total_macs},
               {"per_stage_params", per_stage_params},
               {"per_boundary_dsm_params", per_boundary_dsm_params},
               {"stem_params", stem_params},
               {"head_params", head_params},
               {"total_params", total_params}};
  return j.dump(2) + "\n";
}

std::vector<CountPair> verify_against_counting(const ArchitectureSpec& spec, std::uint64_t seed) {
  Network net = materialize(spec, seed);
  const CostReport analytic = arch_cost(spec);

  CostProbe probe;
  DetRng rng(seed + 17);
  Tensor images = Tensor::randn({1, 3, spec.input_size, spec.input_size}, rng, 0.5);
  net.forward(images, false, &probe);

  std::vector<CountPair> pairs;
  pairs.push_back({"stem/macs", analytic.stem_macs, probe.stem_macs});
  for (std::size_t s = 1; s < net.stages.size(); ++s) {
    pairs.push_back({"dsm_" + std::to_string(s) + "/macs",
                     analytic.per_boundary_dsm_macs[s - 1], probe.dsm_macs[s]});
  }
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    pairs.push_back({"stage_" + std::to_string(s) + "/macs", analytic.per_stage_macs[s],
                     probe.stage_macs[s]});
  }
  pairs.push_back({"head/macs", analytic.head_macs, probe.head_macs});

  auto count_params = [](const std::vector<Tensor>& ts) {
    std::int64_t n = 0;
    for (const Tensor& t : ts) n += t.size();
    return n;
  };
  pairs.push_back({"stem/params", analytic.stem_params, count_params(net.stem.parameters())});
  for (std::size_t s = 1; s < net.stages.size(); ++s) {
    pairs.push_back({"dsm_" + std::to_string(s) + "/params",
                     analytic.per_boundary_dsm_params[s - 1],
                     count_params(net.stages[s].dsm->weights.parameters())});
  }
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    std::int64_t measured = 0;
    for (const GopBlockModule& b : net.stages[s].blocks) measured += b.weights.parameter_count();
    pairs.push_back({"stage_" + std::to_string(s) + "/params", analytic.per_stage_params[s], measured});
  }
  pairs.push_back({"head/params", analytic.head_params, count_params(net.head.parameters())});
  pairs.push_back({"total/params", analytic.total_params, net.parameter_count()});
  return pairs;
}

}  // namespace uninas
