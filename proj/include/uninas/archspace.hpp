#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uninas/dsm.hpp"
#include "uninas/gops.hpp"

namespace uninas {

constexpr int kNumStages = 5;
constexpr int kDecisionsPerStage = 5;  // gop, dsm, expansion, channel mult, repeat delta
constexpr int kTotalTokens = kNumStages * kDecisionsPerStage;

inline constexpr std::array<double, 5> kChannelMults = {0.5, 0.75, 1.0, 1.25, 1.5};
inline constexpr std::array<int, 5> kRepeatDeltas = {-2, -1, 0, 1, 2};
inline constexpr std::array<int, 5> kExpansions = {2, 3, 4, 5, 6};
inline constexpr std::array<int, kDecisionsPerStage> kTokenArity = {5, 3, 5, 5, 5};

/// One stage's point in the per-stage search space.
struct StageChoice {
  GopKind gop = GopKind::Conv;
  DsmKind dsm = DsmKind::L;
  int expansion = 2;     // value, not index
  double c_mult = 1.0;   // value from kChannelMults
  int r_delta = 0;       // value from kRepeatDeltas
  bool operator==(const StageChoice&) const = default;
};

using StageChoices = std::array<StageChoice, kNumStages>;
using TokenSequence = std::array<int, kTotalTokens>;

/// Reference architecture the relative size choices resolve against.
struct ReferenceBase {
  std::array<int, kNumStages> base_channels;
  std::array<int, kNumStages> base_repeats;
  std::array<int, kNumStages> stage_strides;  // input stride of each stage
  int input_size = 160;
  int classes = 1000;
};

ReferenceBase default_reference_base();

struct StageSpec {
  GopKind gop = GopKind::Conv;
  DsmKind dsm = DsmKind::L;
  int expansion = 0;
  int channels = 0;
  int repeats = 0;
  int stride_in = 0;
  bool operator==(const StageSpec&) const = default;
};

struct StemSpec {
  std::vector<int> channels;  // two 3x3 convs, stride 2 each
  int stride = 4;
  bool operator==(const StemSpec&) const = default;
};

/// Fully resolved network description. The boundary DSM of stage i is the one
/// named in stage i's row; stage 0 has none (the stem covers stride 4).
struct ArchitectureSpec {
  int schema_version = 1;
  int input_size = 0;
  StemSpec stem;
  std::vector<StageSpec> stages;
  int classes = 1000;

  void validate() const;
  std::string to_json() const;
  static ArchitectureSpec from_json(const std::string& text);
  std::uint64_t digest() const;
  std::string digest_hex() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

// ---- search-space arithmetic ----

std::uint64_t space_size_per_stage();             // 5*3*5*5*5
std::uint64_t space_size_total(int stages = kNumStages);

// ---- token encoding ----

TokenSequence tokenize(const StageChoices& choices);
StageChoices detokenize(const TokenSequence& tokens);

// channel rounding: up to a multiple of 32 where attention is involved,
// nearest multiple of 8 (minimum 8) otherwise. A stage needs the attention
// rounding when its operator is SA/LSA or when its instantiated boundary
// DSM is LG/G (their head width is fixed at 32).
int round_channels(double raw, bool attention_width);
int round_channels(double raw, GopKind gop);

ArchitectureSpec resolve(const StageChoices& choices, const ReferenceBase& base);

// choices reproducing the searched baseline under the default reference base
StageChoices b0_choices();
TokenSequence b0_tokens();

// bundled family ("b0" .. "b6")
ArchitectureSpec family(const std::string& model);
std::vector<std::string> family_names();

ArchitectureSpec compound_scale(const ArchitectureSpec& spec, double depth_coef, double width_coef,
                                int new_input);

// spatial sides of the stem outputs and every stage for a given input
struct GridPlan {
  int stem_mid = 0;                 // after the first stem conv
  std::vector<int> stage_sides;     // side length at each stage's blocks
};
GridPlan grid_plan(const ArchitectureSpec& spec, int input_size);

}  // namespace uninas
