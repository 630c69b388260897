#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "uninas/cost_model.hpp"
#include "uninas/network.hpp"
#include "uninas/search.hpp"
#include "uninas/selftest.hpp"

using namespace uninas;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

// reference base for the proxy evaluator: micro inputs the trainer can afford
ReferenceBase proxy_reference_base() {
  ReferenceBase base;
  base.base_channels = {8, 16, 16, 32, 32};
  base.base_repeats = {1, 1, 1, 1, 1};
  base.stage_strides = {4, 8, 16, 16, 32};
  base.input_size = 32;
  base.classes = 2;
  return base;
}

int cmd_space_info(const std::string& format) {
  const std::uint64_t per_stage = space_size_per_stage();
  const std::uint64_t total = space_size_total();
  if (format == "json") {
    nlohmann::ordered_json j;
    j["per_stage_size"] = per_stage;
    j["total_size"] = total;
    j["stages"] = kNumStages;
    j["decisions"] = {{"gop", {"conv", "dwconv", "sa", "lsa", "mlp"}},
                      {"dsm", {"l", "lg", "g"}},
                      {"expansion", kExpansions},
                      {"channel_mult", kChannelMults},
                      {"repeat_delta", kRepeatDeltas}};
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "per-stage size S : " << per_stage << "\n";
  std::cout << "total size S^" << kNumStages << "  : " << total << "\n";
  std::cout << "decisions per stage:\n";
  std::cout << "  gop          : conv dwconv sa lsa mlp\n";
  std::cout << "  dsm          : l lg g\n";
  std::cout << "  expansion    : 2 3 4 5 6\n";
  std::cout << "  channel mult : 0.5 0.75 1.0 1.25 1.5\n";
  std::cout << "  repeat delta : -2 -1 0 1 2\n";
  return kExitOk;
}

ArchitectureSpec load_arch(const std::string& model, const std::string& arch_file) {
  if (!model.empty()) return family(model);
  std::ifstream in(arch_file);
  if (!in) throw std::invalid_argument("cannot open " + arch_file);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ArchitectureSpec::from_json(text);
}

int cmd_cost(const std::string& model, const std::string& arch_file, int input,
             const std::string& format) {
  ArchitectureSpec spec = load_arch(model, arch_file);
  const int at_input = input > 0 ? input : spec.input_size;
  CostReport report = arch_cost(spec, at_input);
  if (format == "json") {
    std::cout << report.to_json();
    return kExitOk;
  }
  std::printf("input %d, FLOPs convention: 1 FLOP = 1 multiply-accumulate\n", at_input);
  std::printf("%-6s %-7s %-4s %3s %5s %3s %12s %12s\n", "stage", "gop", "dsm", "e", "c", "r",
              "macs", "params");
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& st = spec.stages[s];
    std::printf("%-6zu %-7s %-4s %3d %5d %3d %12lld %12lld\n", s, to_string(st.gop),
                to_string(st.dsm), st.expansion, st.channels, st.repeats,
                static_cast<long long>(report.per_stage_macs[s]),
                static_cast<long long>(report.per_stage_params[s]));
  }
  for (std::size_t b = 0; b < report.per_boundary_dsm_macs.size(); ++b) {
    std::printf("dsm %zu->%zu %26s %12lld %12lld\n", b, b + 1, "",
                static_cast<long long>(report.per_boundary_dsm_macs[b]),
                static_cast<long long>(report.per_boundary_dsm_params[b]));
  }
  std::printf("stem %37s %12lld %12lld\n", "", static_cast<long long>(report.stem_macs),
              static_cast<long long>(report.stem_params));
  std::printf("head %37s %12lld %12lld\n", "", static_cast<long long>(report.head_macs),
              static_cast<long long>(report.head_params));
  std::printf("total %36s %12lld %12lld\n", "", static_cast<long long>(report.total_macs),
              static_cast<long long>(report.total_params));
  std::printf("total: %.1f MFLOPs, %.2f M params\n", report.total_macs / 1e6,
              report.total_params / 1e6);
  return kExitOk;
}

int cmd_search(const std::string& evaluator_name, int samples, double target_flops, double alpha,
               std::uint64_t seed, const std::string& out_dir, int topk, int workers,
               const std::string& format) {
  RewardConfig reward_cfg{target_flops, alpha};
  SearchConfig cfg;
  cfg.num_samples = samples;
  cfg.topk = topk;
  cfg.seed = seed;
  cfg.workers = workers;

  std::unique_ptr<Evaluator> evaluator;
  ReferenceBase base;
  if (evaluator_name == "surrogate") {
    base = default_reference_base();
    evaluator = std::make_unique<SurrogateEvaluator>();
  } else if (evaluator_name == "proxy") {
    base = proxy_reference_base();
    ProxyTrainConfig pcfg;
    evaluator = std::make_unique<ProxyTrainEvaluator>(pcfg, seed);
  } else {
    throw std::invalid_argument("unknown evaluator: " + evaluator_name);
  }

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path history_path = std::filesystem::path(out_dir) / "history.csv";
  std::ofstream history_file(history_path, std::ios::trunc);
  if (!history_file) throw std::invalid_argument("cannot write " + history_path.string());
  history_file << SearchHistory::csv_header() << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  HistorySink sink = [&](const HistoryRow& row) {
    history_file << SearchHistory::row_to_csv(row) << "\n";
    history_file.flush();
  };
  SearchOutcome outcome = run_search(base, *evaluator, reward_cfg, cfg, sink);
  const double elapsed =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0)
          .count() /
      1000.0;
  history_file.close();

  std::vector<std::string> topk_files;
  for (std::size_t i = 0; i < outcome.topk.size(); ++i) {
    const auto path = std::filesystem::path(out_dir) / ("topk_" + std::to_string(i + 1) + ".json");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::invalid_argument("cannot write " + path.string());
    f << outcome.topk[i].spec.to_json();
    topk_files.push_back(path.string());
  }

  if (format == "json") {
    nlohmann::ordered_json j;
    j["history"] = history_path.string();
    j["topk_files"] = topk_files;
    j["topk"] = nlohmann::ordered_json::array();
    for (const TopEntry& e : outcome.topk) {
      std::string toks;
      for (int t = 0; t < kTotalTokens; ++t) toks += (t ? ";" : "") + std::to_string(e.tokens[t]);
      j["topk"].push_back({{"index", e.index},
                           {"tokens", toks},
                           {"macs", e.macs},
                           {"accuracy", e.accuracy},
                           {"reward", e.reward}});
    }
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("%-4s %-6s %14s %10s %10s\n", "rank", "index", "macs", "accuracy", "reward");
    for (std::size_t i = 0; i < outcome.topk.size(); ++i) {
      const TopEntry& e = outcome.topk[i];
      std::printf("%-4zu %-6d %14lld %10.5f %10.5f\n", i + 1, e.index,
                  static_cast<long long>(e.macs), e.accuracy, e.reward);
    }
    std::printf("history: %s\n", history_path.string().c_str());
  }
  std::fprintf(stderr, "search: %d samples in %.1fs (%d workers)\n", samples, elapsed,
               resolve_worker_count(workers));
  return kExitOk;
}

int cmd_selftest(bool inject_fault) {
  auto results = run_selftests(inject_fault);
  bool all_ok = true;
  for (const SelfTestResult& r : results) {
    std::printf("%-22s %-4s %s\n", r.name.c_str(), r.passed ? "ok" : "FAIL", r.detail.c_str());
    all_ok = all_ok && r.passed;
  }
  return all_ok ? kExitOk : kExitInternal;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified architecture search over conv/transformer/mlp operator blocks"};
  app.require_subcommand(1);

  std::string format = "table";
  std::uint64_t seed = 0;
  app.add_option("--format", format, "output format")->check(CLI::IsMember({"table", "json"}));
  app.add_option("--seed", seed, "global random seed");

  auto* sp_info = app.add_subcommand("space-info", "print search-space sizes and domains");
  sp_info->fallthrough();

  auto* sp_cost = app.add_subcommand("cost", "analytic FLOPs/parameter report");
  sp_cost->fallthrough();
  std::string model, arch_file;
  int input = 0;
  sp_cost->add_option("--model", model, "bundled model id (b0..b6)");
  sp_cost->add_option("--arch", arch_file, "architecture json file");
  sp_cost->add_option("--input", input, "override input resolution");

  auto* sp_search = app.add_subcommand("search", "run the controller-driven search");
  sp_search->fallthrough();
  std::string evaluator_name = "surrogate";
  int samples = 2000;
  double target_flops = 550e6;
  double alpha = 0.07;
  std::string out_dir = "search-out";
  int topk = 5;
  int workers = 1;
  sp_search->add_option("--evaluator", evaluator_name, "surrogate|proxy");
  sp_search->add_option("--samples", samples, "architectures to sample");
  sp_search->add_option("--target-flops", target_flops, "reward target t");
  sp_search->add_option("--alpha", alpha, "reward exponent");
  sp_search->add_option("--out", out_dir, "output directory");
  sp_search->add_option("--topk", topk, "architectures to keep");
  sp_search->add_option("--workers", workers, "parallel evaluations (capped by UNINAS_THREADS)");

  auto* sp_self = app.add_subcommand("selftest", "gradient, cost-oracle, and round-trip checks");
  sp_self->fallthrough();
  bool inject_fault = false;
  sp_self->add_flag("--inject-fault", inject_fault)->group("");  // hidden, used by tests

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    if (sp_info->parsed()) return cmd_space_info(format);
    if (sp_cost->parsed()) {
      if (model.empty() == arch_file.empty()) {
        std::cerr << "cost: pass exactly one of --model or --arch\n";
        return kExitUser;
      }
      return cmd_cost(model, arch_file, input, format);
    }
    if (sp_search->parsed()) {
      return cmd_search(evaluator_name, samples, target_flops, alpha, seed, out_dir, topk, workers,
                        format);
    }
    if (sp_self->parsed()) return cmd_selftest(inject_fault);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUser;
}
