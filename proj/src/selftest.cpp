#include "uninas/selftest.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "uninas/cost_model.hpp"
#include "uninas/network.hpp"
#include "uninas/search.hpp"

namespace uninas {

namespace {

// central-difference spot check over a few coordinates of each parameter
double fd_max_rel_err(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                      int coords, DetRng& rng) {
  for (auto& p : params) p.zero_grad();
  {
    GradTape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    const std::int64_t n = static_cast<std::int64_t>(vals.size());
    for (int k = 0; k < coords; ++k) {
      const std::int64_t c =
          (n <= coords) ? (k % n) : static_cast<std::int64_t>(rng.uniform() * n);
      const double keep = vals[c];
      vals[c] = keep + eps;
      const double fp = loss_fn().item();
      vals[c] = keep - eps;
      const double fm = loss_fn().item();
      vals[c] = keep;
      const double fd = (fp - fm) / (2 * eps);
      const double an = analytic[pi][c];
      if (std::abs(fd - an) < 1e-7) continue;
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

SelfTestResult check(const std::string& name, bool ok, const std::string& detail) {
  return {name, ok, detail};
}

}  // namespace

std::vector<SelfTestResult> run_selftests(bool inject_fault) {
  std::vector<SelfTestResult> results;
  DetRng rng(0xDECADE);

  {  // gradient checks across one block of each layout family and each DSM
    double worst = 0.0;
    {
      BlockParams p{GopKind::DWConv, 8, 2};
      BlockWeights w = init_block_weights(p, rng);
      Tensor x = Tensor::randn({1, 8, 4, 4}, rng, 1.0, true);
      Tensor probe = Tensor::randn({1, 8, 4, 4}, rng, 1.0);
      auto params = w.parameters();
      params.push_back(x);
      worst = std::max(worst, fd_max_rel_err(
                                  [&] { return sum_all(mul(forward_conv_block(x, p, w, true), probe)); },
                                  params, 3, rng));
    }
    {
      BlockParams p{GopKind::SA, 32, 2};
      BlockWeights w = init_block_weights(p, rng);
      Tensor x = Tensor::randn({1, 16, 32}, rng, 1.0, true);
      Tensor probe = Tensor::randn({1, 16, 32}, rng, 1.0);
      auto params = w.parameters();
      params.push_back(x);
      worst = std::max(worst,
                       fd_max_rel_err(
                           [&] {
                             return sum_all(mul(forward_transformer_block(x, p, w, 4, 4), probe));
                           },
                           params, 3, rng));
    }
    {
      DsmParams p{DsmKind::LG, 32, 32, 2};
      DsmWeights w = init_dsm_weights(p, rng);
      Tensor x = Tensor::randn({1, 16, 32}, rng, 1.0, true);
      Tensor probe = Tensor::randn({1, 4, 32}, rng, 1.0);
      auto params = w.parameters();
      params.push_back(x);
      worst = std::max(worst, fd_max_rel_err(
                                  [&] { return sum_all(mul(forward_lg_dsm(x, p, w, 4, 4), probe)); },
                                  params, 3, rng));
    }
    std::ostringstream os;
    os << "max rel err " << worst;
    results.push_back(check("gradient-checks", worst < 1e-4, os.str()));
  }

  {  // analytic cost equals instrumented counting on a mixed micro network
    ArchitectureSpec spec;
    spec.input_size = 32;
    spec.classes = 4;
    spec.stem.channels = {8, 16};
    spec.stem.stride = 4;
    spec.stages.push_back({GopKind::DWConv, DsmKind::L, 2, 16, 1, 4});
    spec.stages.push_back({GopKind::SA, DsmKind::LG, 2, 32, 1, 8});
    auto pairs = verify_against_counting(spec, 1);
    bool ok = true;
    std::string failing;
    for (auto& pr : pairs) {
      std::int64_t analytic = pr.analytic;
      if (inject_fault && pr.component == "stem/macs") analytic += 1;
      if (analytic != pr.counted) {
        ok = false;
        failing = pr.component;
      }
    }
    results.push_back(check("cost-oracle-equality", ok,
                            ok ? std::to_string(pairs.size()) + " components matched"
                               : "mismatch at " + failing));
  }

  {  // token and config round trips
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      TokenSequence t{};
      for (int i = 0; i < kTotalTokens; ++i) {
        t[i] = static_cast<int>(rng.uniform() * kTokenArity[i % kDecisionsPerStage]);
      }
      ok = tokenize(detokenize(t)) == t;
    }
    for (const std::string& name : family_names()) {
      if (!ok) break;
      ArchitectureSpec spec = family(name);
      ok = ArchitectureSpec::from_json(spec.to_json()) == spec;
    }
    results.push_back(check("round-trips", ok, "tokens x200, family configs"));
  }

  {  // reward contract
    RewardConfig cfg;
    bool ok = std::abs(reward(0.5, cfg.target_macs, cfg) - 0.5) < 1e-12;
    RewardConfig zero{550e6, 0.0};
    ok = ok && std::abs(reward(0.7, 123e6, zero) - 0.7) < 1e-12;
    ok = ok && std::abs(reward(0.79, 555e6, cfg) - 0.78950) < 1e-5;
    results.push_back(check("reward-contract", ok, "unit ratio, alpha 0, derived value"));
  }

  return results;
}

}  // namespace uninas
