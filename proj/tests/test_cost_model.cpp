#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uninas/cost_model.hpp"
#include "uninas/network.hpp"

using namespace uninas;

namespace {

BlockParams bp(GopKind kind, int c, int e) {
  BlockParams p;
  p.kind = kind;
  p.channels = c;
  p.expansion = e;
  return p;
}

bool within(double value, double target, double tol) {
  return std::abs(value - target) <= tol * target;
}

ArchitectureSpec micro_two_stage() {
  ArchitectureSpec spec;
  spec.input_size = 32;
  spec.classes = 10;
  spec.stem.channels = {16, 32};
  spec.stem.stride = 4;
  spec.stages.push_back({GopKind::DWConv, DsmKind::L, 2, 32, 1, 4});
  spec.stages.push_back({GopKind::SA, DsmKind::LG, 2, 32, 2, 8});
  return spec;
}

}  // namespace

TEST_CASE("hand-counted DWConv block cost") {
  // proj up 2048 + depthwise 2304 + proj down 2048
  CHECK(block_macs(bp(GopKind::DWConv, 8, 2), 4, 4) == 6400);
  CHECK(block_macs(bp(GopKind::DWConv, 8, 2), 4, 4) == 2048 + 2304 + 2048);
}

TEST_CASE("hand-counted SA block cost") {
  // qkv 12288 + scores 512 + weighted sum 512 + out 4096 + ffn 16384
  // + positional conv 1152 (the depthwise 3x3 runs inside the block)
  const std::int64_t macs = block_macs(bp(GopKind::SA, 32, 2), 2, 2);
  CHECK(macs == 12288 + 512 + 512 + 4096 + 16384 + 1152);
  CHECK(macs == 34944);
}

TEST_CASE("zero-sized grids cost nothing") {
  for (GopKind kind : {GopKind::Conv, GopKind::DWConv, GopKind::SA, GopKind::LSA, GopKind::MLP}) {
    CHECK(block_macs(bp(kind, 32, 3), 0, 0) == 0);
  }
}

TEST_CASE("baseline stage costs reproduce the published table") {
  ArchitectureSpec b0 = family("b0");
  CostReport r = arch_cost(b0, 160);
  const double expect[5] = {68e6, 135e6, 42e6, 63e6, 187e6};
  for (int s = 0; s < 5; ++s) {
    INFO("stage " << s << " macs " << r.per_stage_macs[s]);
    CHECK(within(static_cast<double>(r.per_stage_macs[s]), expect[s], 0.08));
  }
  INFO("total " << r.total_macs);
  CHECK(within(static_cast<double>(r.total_macs), 555e6, 0.10));
  INFO("params " << r.total_params);
  CHECK(within(static_cast<double>(r.total_params), 11.5e6, 0.15));
}

TEST_CASE("doubling the input side quadruples conv-stage cost") {
  ArchitectureSpec b0 = family("b0");
  CostReport a = arch_cost(b0, 160);
  CostReport b = arch_cost(b0, 320);
  for (int s = 0; s < 3; ++s) {  // conv stages
    CHECK(b.per_stage_macs[s] == 4 * a.per_stage_macs[s]);
  }
}

TEST_CASE("cost is monotone in channels, expansion, repeats, and input") {
  ArchitectureSpec b0 = family("b0");
  CostReport base = arch_cost(b0);

  ArchitectureSpec more_e = b0;
  more_e.stages[2].expansion += 1;
  CHECK(arch_cost(more_e).total_macs > base.total_macs);

  ArchitectureSpec more_r = b0;
  more_r.stages[1].repeats += 1;
  CHECK(arch_cost(more_r).total_macs > base.total_macs);

  ArchitectureSpec more_c = b0;
  more_c.stages[4].channels += 32;
  CHECK(arch_cost(more_c).total_macs > base.total_macs);

  CHECK(arch_cost(b0, 192).total_macs > base.total_macs);
  CHECK(arch_cost(more_e).total_params > base.total_params);
  CHECK(arch_cost(more_c).total_params > base.total_params);
}

TEST_CASE("analytic equals instrumented for every GOP kind at micro size") {
  DetRng rng(401);
  for (GopKind kind : {GopKind::Conv, GopKind::DWConv, GopKind::SA, GopKind::LSA, GopKind::MLP}) {
    BlockParams p = bp(kind, 32, 2);
    BlockWeights w = init_block_weights(p, rng, 64);
    Tensor x = is_conv_family(kind) ? Tensor::randn({1, 32, 8, 8}, rng, 0.5)
                                    : Tensor::randn({1, 64, 32}, rng, 0.5);
    MacCounter counter;
    forward_block(x, p, w, 8, 8, false);
    INFO(to_string(kind));
    CHECK(counter.count() == block_macs(p, 8, 8));
    CHECK(w.parameter_count() == block_params(p, 64));
  }
}

TEST_CASE("analytic equals instrumented for every DSM kind at micro size") {
  DetRng rng(409);
  for (DsmKind kind : {DsmKind::L, DsmKind::LG, DsmKind::G}) {
    for (int stride : {1, 2}) {
      DsmParams p;
      p.kind = kind;
      p.c_in = 32;
      p.c_out = 32;
      p.stride = stride;
      DsmWeights w = init_dsm_weights(p, rng);
      MacCounter counter;
      if (kind == DsmKind::L) {
        forward_l_dsm(Tensor::randn({1, 32, 8, 8}, rng, 0.5), p, w, false);
      } else if (kind == DsmKind::LG) {
        forward_lg_dsm(Tensor::randn({1, 64, 32}, rng, 0.5), p, w, 8, 8);
      } else {
        forward_g_dsm(Tensor::randn({1, 64, 32}, rng, 0.5), p, w);
      }
      INFO(to_string(kind) << " stride " << stride);
      CHECK(counter.count() == dsm_macs(p, 8, 8));
      CHECK(w.parameter_count() == dsm_params(p));
    }
  }
}

TEST_CASE("full micro network: analytic equals instrumented exactly") {
  auto pairs = verify_against_counting(micro_two_stage(), 7);
  for (const CountPair& pair : pairs) {
    INFO(pair.component << " analytic=" << pair.analytic << " counted=" << pair.counted);
    CHECK(pair.analytic == pair.counted);
  }
}

TEST_CASE("micro network with all operator kinds: analytic equals instrumented") {
  ArchitectureSpec spec;
  spec.input_size = 32;
  spec.classes = 4;
  spec.stem.channels = {8, 16};
  spec.stem.stride = 4;
  spec.stages.push_back({GopKind::Conv, DsmKind::L, 2, 16, 1, 4});
  spec.stages.push_back({GopKind::MLP, DsmKind::G, 3, 32, 1, 8});
  spec.stages.push_back({GopKind::LSA, DsmKind::LG, 2, 32, 2, 16});
  auto pairs = verify_against_counting(spec, 11);
  for (const CountPair& pair : pairs) {
    INFO(pair.component << " analytic=" << pair.analytic << " counted=" << pair.counted);
    CHECK(pair.analytic == pair.counted);
  }
}

TEST_CASE("materialized baseline parameter count equals the analytic count exactly") {
  ArchitectureSpec b0 = family("b0");
  Network net = materialize(b0, 3);
  CHECK(net.parameter_count() == arch_cost(b0).total_params);
}

TEST_CASE("cost report serializes to json") {
  CostReport r = arch_cost(family("b0"));
  std::string j = r.to_json();
  CHECK(j.find("\"total_macs\"") != std::string::npos);
  CHECK(j.find("\"cost\"") != std::string::npos);
}
