#pragma once

#include <optional>
#include <vector>

#include "uninas/archspace.hpp"

namespace uninas {

struct StemModule {
  Tensor conv1_w, conv2_w;
  BnState bn1, bn2;
  std::vector<Tensor> parameters() const;
};

struct HeadModule {
  Tensor w, b;
  std::vector<Tensor> parameters() const;
};

struct GopBlockModule {
  BlockParams params;
  BlockWeights weights;
};

struct DsmModule {
  DsmParams params;
  DsmWeights weights;
};

/// Per-component multiply-accumulate counts measured by an instrumented
/// forward pass (batch 1 convention; scale by the batch you ran).
struct CostProbe {
  std::int64_t stem_macs = 0;
  std::vector<std::int64_t> dsm_macs;    // entry per stage; stage 0 stays 0
  std::vector<std::int64_t> stage_macs;  // blocks only
  std::int64_t head_macs = 0;
};

/// Executable network: stem, per-stage boundary DSM + repeated blocks, head.
class Network {
 public:
  struct Stage {
    std::optional<DsmModule> dsm;
    std::vector<GopBlockModule> blocks;
    int side = 0;  // spatial side at this stage's blocks
  };

  ArchitectureSpec spec;
  StemModule stem;
  std::vector<Stage> stages;
  HeadModule head;

  // images [B,3,input,input] -> logits [B,classes]
  Tensor forward(const Tensor& images, bool training, CostProbe* probe = nullptr) const;

  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
  void set_requires_grad(bool flag);
};

Network materialize(const ArchitectureSpec& spec, std::uint64_t seed);

}  // namespace uninas
