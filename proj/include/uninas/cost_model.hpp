#pragma once

#include <string>
#include <vector>

#include "uninas/archspace.hpp"

namespace uninas {

/// Exact integer multiply-accumulate and parameter accounting. The FLOPs
/// convention equates FLOPs with MACs; normalization, activation, and
/// pooling work is excluded from MACs while their parameters are counted.
struct CostReport {
  int input_size = 0;
  std::vector<std::int64_t> per_stage_macs;        // blocks only
  std::vector<std::int64_t> per_boundary_dsm_macs; // one per stage boundary
  std::int64_t stem_macs = 0;
  std::int64_t head_macs = 0;
  std::int64_t total_macs = 0;

  std::vector<std::int64_t> per_stage_params;
  std::vector<std::int64_t> per_boundary_dsm_params;
  std::int64_t stem_params = 0;
  std::int64_t head_params = 0;
  std::int64_t total_params = 0;

  std::string to_json() const;
};

// token_count matters only for MLP blocks (token-mix weights)
std::int64_t block_macs(const BlockParams& p, int grid_h, int grid_w);
std::int64_t block_params(const BlockParams& p, int token_count);

std::int64_t dsm_macs(const DsmParams& p, int in_h, int in_w);
std::int64_t dsm_params(const DsmParams& p);

CostReport arch_cost(const ArchitectureSpec& spec);
CostReport arch_cost(const ArchitectureSpec& spec, int input_size);

/// One analytic-vs-measured pair from an instrumented run.
struct CountPair {
  std::string component;
  std::int64_t analytic = 0;
  std::int64_t counted = 0;
  bool matches() const { return analytic == counted; }
};

// Materializes the spec, runs one instrumented forward at batch 1, and pairs
// every component's analytic MACs and parameters with the measured values.
std::vector<CountPair> verify_against_counting(const ArchitectureSpec& spec, std::uint64_t seed);

}  // namespace uninas
