#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "uninas/archspace.hpp"
#include "uninas/network.hpp"

using namespace uninas;

namespace {

TokenSequence random_tokens(DetRng& rng) {
  TokenSequence t{};
  for (int i = 0; i < kTotalTokens; ++i) {
    t[i] = static_cast<int>(rng.uniform() * kTokenArity[i % kDecisionsPerStage]);
  }
  return t;
}

// a micro base so materialization stays cheap in property tests
ReferenceBase micro_base() {
  ReferenceBase base;
  base.base_channels = {8, 16, 16, 32, 32};
  base.base_repeats = {1, 1, 1, 1, 1};
  base.stage_strides = {4, 8, 16, 16, 32};
  base.input_size = 32;
  base.classes = 10;
  return base;
}

}  // namespace

TEST_CASE("search space arithmetic") {
  CHECK(space_size_per_stage() == 1875);
  CHECK(space_size_total() == 23174285888671875ull);
  CHECK(space_size_total(1) == space_size_per_stage());
}

TEST_CASE("all-zero tokens decode to the first element of every domain") {
  TokenSequence zeros{};
  StageChoices c = detokenize(zeros);
  for (int s = 0; s < kNumStages; ++s) {
    CHECK(c[s].gop == GopKind::Conv);
    CHECK(c[s].dsm == DsmKind::L);
    CHECK(c[s].expansion == 2);
    CHECK(c[s].c_mult == 0.5);
    CHECK(c[s].r_delta == -2);
  }
}

TEST_CASE("tokenize/detokenize is a bijection, exhaustively per stage") {
  // every one of the 1875 per-stage combinations, held in stage 2
  for (int g = 0; g < 5; ++g)
    for (int d = 0; d < 3; ++d)
      for (int e = 0; e < 5; ++e)
        for (int m = 0; m < 5; ++m)
          for (int r = 0; r < 5; ++r) {
            TokenSequence t{};
            t[2 * 5 + 0] = g;
            t[2 * 5 + 1] = d;
            t[2 * 5 + 2] = e;
            t[2 * 5 + 3] = m;
            t[2 * 5 + 4] = r;
            TokenSequence back = tokenize(detokenize(t));
            REQUIRE(back == t);
          }
}

TEST_CASE("tokenize/detokenize round-trips over the full space") {
  DetRng rng(307);
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSequence t = random_tokens(rng);
    CHECK(tokenize(detokenize(t)) == t);
  }
}

TEST_CASE("detokenize rejects out-of-range tokens") {
  TokenSequence t{};
  t[1] = 3;  // dsm arity is 3
  CHECK_THROWS_AS(detokenize(t), std::invalid_argument);
  t[1] = -1;
  CHECK_THROWS_AS(detokenize(t), std::invalid_argument);
}

TEST_CASE("the searched baseline has a stable documented token sequence") {
  const TokenSequence expect = {1, 0, 2, 4, 2, 1, 0, 4, 3, 2, 1, 0, 1, 2, 2,
                                2, 1, 0, 2, 2, 2, 1, 3, 2, 2};
  CHECK(b0_tokens() == expect);
  CHECK(detokenize(expect) == b0_choices());
}

TEST_CASE("channel rounding rules") {
  CHECK(round_channels(128 * 1.25, GopKind::SA) == 160);
  CHECK(round_channels(64 * 1.25, GopKind::SA) == 96);
  CHECK(round_channels(64 * 1.25, GopKind::LSA) == 96);
  CHECK(round_channels(48.0, GopKind::DWConv) == 48);
  CHECK(round_channels(60.0, GopKind::Conv) == 64);
  CHECK(round_channels(4.0, GopKind::Conv) == 8);
  CHECK(round_channels(16.0, GopKind::SA) == 32);
}

TEST_CASE("identity choices reproduce the reference base") {
  ReferenceBase base = default_reference_base();
  StageChoices identity;
  for (int s = 0; s < kNumStages; ++s) {
    identity[s] = {GopKind::DWConv, DsmKind::L, 4, 1.0, 0};
  }
  ArchitectureSpec spec = resolve(identity, base);
  for (int s = 0; s < kNumStages; ++s) {
    CHECK(spec.stages[s].channels == base.base_channels[s]);
    CHECK(spec.stages[s].repeats == base.base_repeats[s]);
    CHECK(spec.stages[s].stride_in == base.stage_strides[s]);
  }
}

TEST_CASE("resolving the baseline choices yields the bundled b0") {
  ArchitectureSpec b0 = family("b0");
  ArchitectureSpec resolved = resolve(b0_choices(), default_reference_base());
  CHECK(b0 == resolved);
  const std::array<int, 5> c = {48, 80, 128, 128, 256};
  const std::array<int, 5> r = {2, 4, 4, 4, 8};
  const std::array<int, 5> e = {4, 6, 3, 2, 5};
  for (int s = 0; s < 5; ++s) {
    CHECK(b0.stages[s].channels == c[s]);
    CHECK(b0.stages[s].repeats == r[s]);
    CHECK(b0.stages[s].expansion == e[s]);
  }
  CHECK(b0.input_size == 160);
  CHECK(b0.stages[4].gop == GopKind::SA);
  CHECK(b0.stages[4].dsm == DsmKind::LG);
}

TEST_CASE("resolve is idempotent under recovered choices") {
  DetRng rng(311);
  ReferenceBase base = default_reference_base();
  for (int trial = 0; trial < 100; ++trial) {
    StageChoices choices = detokenize(random_tokens(rng));
    ArchitectureSpec spec = resolve(choices, base);
    // recover any choice tuple consistent with the resolved spec
    StageChoices recovered = choices;
    for (int s = 0; s < kNumStages; ++s) {
      for (double m : kChannelMults) {
        if (round_channels(base.base_channels[s] * m, choices[s].gop) == spec.stages[s].channels) {
          recovered[s].c_mult = m;
          break;
        }
      }
      for (int d : kRepeatDeltas) {
        if (std::max(1, base.base_repeats[s] + d) == spec.stages[s].repeats) {
          recovered[s].r_delta = d;
          break;
        }
      }
    }
    ArchitectureSpec again = resolve(recovered, base);
    CHECK(spec == again);
  }
}

TEST_CASE("family data matches the bundled tables") {
  ArchitectureSpec b0 = family("b0");
  CHECK(b0.stages[4] == StageSpec{GopKind::SA, DsmKind::LG, 5, 256, 8, 32});

  ArchitectureSpec b3 = family("b3");
  const std::array<int, 5> c3 = {56, 96, 160, 160, 288};
  const std::array<int, 5> r3 = {3, 7, 7, 7, 14};
  for (int s = 0; s < 5; ++s) {
    CHECK(b3.stages[s].channels == c3[s]);
    CHECK(b3.stages[s].repeats == r3[s]);
  }
  CHECK(b3.input_size == 288);

  ArchitectureSpec b6 = family("b6");
  const std::array<int, 5> c6 = {96, 160, 256, 256, 512};
  const std::array<int, 5> r6 = {6, 12, 12, 12, 24};
  for (int s = 0; s < 5; ++s) {
    CHECK(b6.stages[s].channels == c6[s]);
    CHECK(b6.stages[s].repeats == r6[s]);
  }
  CHECK(b6.input_size == 448);

  for (const std::string& name : family_names()) {
    ArchitectureSpec spec = family(name);
    CHECK_NOTHROW(spec.validate());
    CHECK(spec.stages.back().stride_in == 32);
    CHECK(spec.input_size % 32 == 0);
  }
  CHECK_THROWS_AS(family("b9"), std::invalid_argument);
}

TEST_CASE("compound scaling") {
  ArchitectureSpec b0 = family("b0");
  ArchitectureSpec same = compound_scale(b0, 1.0, 1.0, b0.input_size);
  CHECK(same == b0);

  ArchitectureSpec deep = compound_scale(b0, 1.5, 1.0, 192);
  const std::array<int, 5> r = {3, 6, 6, 6, 12};
  for (int s = 0; s < 5; ++s) {
    CHECK(deep.stages[s].repeats == r[s]);
    CHECK(deep.stages[s].channels == b0.stages[s].channels);
    CHECK(deep.stages[s].gop == b0.stages[s].gop);
  }
  CHECK(deep.input_size == 192);

  CHECK_THROWS_AS(compound_scale(b0, 0.9, 1.0, 160), std::invalid_argument);

  DetRng rng(313);
  for (int trial = 0; trial < 50; ++trial) {
    double d = 1.0 + rng.uniform() * 1.5;
    double w = 1.0 + rng.uniform() * 1.5;
    ArchitectureSpec scaled = compound_scale(b0, d, w, 32 * (5 + static_cast<int>(rng.uniform() * 10)));
    CHECK_NOTHROW(scaled.validate());
  }
}

TEST_CASE("architecture json round-trips losslessly") {
  DetRng rng(317);
  for (const std::string& name : family_names()) {
    ArchitectureSpec spec = family(name);
    ArchitectureSpec back = ArchitectureSpec::from_json(spec.to_json());
    CHECK(back == spec);
    CHECK(back.to_json() == spec.to_json());
  }
  for (int trial = 0; trial < 50; ++trial) {
    ArchitectureSpec spec = resolve(detokenize(random_tokens(rng)), default_reference_base());
    CHECK(ArchitectureSpec::from_json(spec.to_json()) == spec);
  }
  CHECK_THROWS(ArchitectureSpec::from_json("{ not json"));
  CHECK_THROWS(ArchitectureSpec::from_json("{\"schema_version\": 1}"));
}

TEST_CASE("grid plan for the baseline at 160") {
  ArchitectureSpec b0 = family("b0");
  GridPlan plan = grid_plan(b0, 160);
  CHECK(plan.stage_sides == std::vector<int>{40, 20, 10, 10, 5});
}

TEST_CASE("a 2-stage micro spec forwards to finite logits") {
  ArchitectureSpec spec;
  spec.input_size = 32;
  spec.classes = 10;
  spec.stem.channels = {16, 32};
  spec.stem.stride = 4;
  spec.stages.push_back({GopKind::DWConv, DsmKind::L, 2, 32, 1, 4});
  spec.stages.push_back({GopKind::SA, DsmKind::L, 2, 32, 1, 8});
  Network net = materialize(spec, 5);
  DetRng rng(331);
  Tensor x = Tensor::randn({1, 3, 32, 32}, rng, 1.0);
  Tensor logits = net.forward(x, false);
  CHECK(logits.shape() == Shape{1, 10});
  for (double v : logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("every resolvable spec materializes and produces the right logits shape") {
  DetRng rng(337);
  ReferenceBase base = micro_base();
  int tried = 0;
  for (int trial = 0; trial < 200; ++trial) {
    StageChoices choices = detokenize(random_tokens(rng));
    ArchitectureSpec spec = resolve(choices, base);
    Network net = materialize(spec, 1000 + trial);
    Tensor x = Tensor::randn({1, 3, 32, 32}, rng, 1.0);
    Tensor logits = net.forward(x, false);
    REQUIRE(logits.shape() == Shape{1, 10});
    ++tried;
  }
  CHECK(tried == 200);
}

TEST_CASE("materialization is deterministic in the seed") {
  ArchitectureSpec spec = resolve(detokenize(b0_tokens()), micro_base());
  Network a = materialize(spec, 42);
  Network b = materialize(spec, 42);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].values() == pb[i].values());
}

TEST_CASE("spec validation rejects broken specs") {
  ArchitectureSpec spec = family("b0");
  spec.stages[3].channels = 100;  // not divisible by 32 on an SA stage
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

  ArchitectureSpec bad_stride = family("b0");
  bad_stride.stages[4].stride_in = 16;  // total stride != 32
  CHECK_THROWS_AS(bad_stride.validate(), std::invalid_argument);

  ArchitectureSpec bad_r = family("b0");
  bad_r.stages[0].repeats = 0;
  CHECK_THROWS_AS(bad_r.validate(), std::invalid_argument);
}
