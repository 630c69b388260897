#include "uninas/archspace.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace uninas {

namespace {

int conv_out_side(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

int index_of_mult(double m) {
  for (std::size_t i = 0; i < kChannelMults.size(); ++i) {
    if (kChannelMults[i] == m) return static_cast<int>(i);
  }
  throw std::invalid_argument("channel multiplier not in the search domain");
}

int index_of_delta(int d) {
  for (std::size_t i = 0; i < kRepeatDeltas.size(); ++i) {
    if (kRepeatDeltas[i] == d) return static_cast<int>(i);
  }
  throw std::invalid_argument("repeat delta not in the search domain");
}

int index_of_expansion(int e) {
  for (std::size_t i = 0; i < kExpansions.size(); ++i) {
    if (kExpansions[i] == e) return static_cast<int>(i);
  }
  throw std::invalid_argument("expansion not in the search domain");
}

}  // namespace

ReferenceBase default_reference_base() {
  ReferenceBase base;
  base.base_channels = {32, 64, 128, 128, 256};
  base.base_repeats = {2, 4, 4, 4, 8};
  base.stage_strides = {4, 8, 16, 16, 32};
  base.input_size = 160;
  base.classes = 1000;
  return base;
}

std::uint64_t space_size_per_stage() {
  std::uint64_t s = 1;
  for (int a : kTokenArity) s *= static_cast<std::uint64_t>(a);
  return s;
}

std::uint64_t space_size_total(int stages) {
  if (stages < 1) throw std::invalid_argument("space_size_total: need at least one stage");
  const std::uint64_t s = space_size_per_stage();
  std::uint64_t total = 1;
  for (int i = 0; i < stages; ++i) {
    if (total > UINT64_MAX / s) throw std::overflow_error("space size exceeds 64 bits");
    total *= s;
  }
  return total;
}

TokenSequence tokenize(const StageChoices& choices) {
  TokenSequence t{};
  for (int s = 0; s < kNumStages; ++s) {
    const StageChoice& c = choices[s];
    t[s * 5 + 0] = static_cast<int>(c.gop);
    t[s * 5 + 1] = static_cast<int>(c.dsm);
    t[s * 5 + 2] = index_of_expansion(c.expansion);
    t[s * 5 + 3] = index_of_mult(c.c_mult);
    t[s * 5 + 4] = index_of_delta(c.r_delta);
  }
  return t;
}

StageChoices detokenize(const TokenSequence& tokens) {
  StageChoices out;
  for (int i = 0; i < kTotalTokens; ++i) {
    const int arity = kTokenArity[i % kDecisionsPerStage];
    if (tokens[i] < 0 || tokens[i] >= arity) {
      throw std::invalid_argument("token " + std::to_string(i) + " out of range: " +
                                  std::to_string(tokens[i]));
    }
  }
  for (int s = 0; s < kNumStages; ++s) {
    StageChoice c;
    c.gop = static_cast<GopKind>(tokens[s * 5 + 0]);
    c.dsm = static_cast<DsmKind>(tokens[s * 5 + 1]);
    c.expansion = kExpansions[tokens[s * 5 + 2]];
    c.c_mult = kChannelMults[tokens[s * 5 + 3]];
    c.r_delta = kRepeatDeltas[tokens[s * 5 + 4]];
    out[s] = c;
  }
  return out;
}

int round_channels(double raw, bool attention_width) {
  if (attention_width) {
    const int c = static_cast<int>(std::ceil(raw / kHeadDim)) * kHeadDim;
    return std::max(c, kHeadDim);
  }
  const int c = static_cast<int>(std::llround(raw / 8.0)) * 8;
  return std::max(c, 8);
}

int round_channels(double raw, GopKind gop) { return round_channels(raw, is_attention(gop)); }

namespace {

// stage 0 has no boundary DSM, so only its operator constrains the width
bool needs_attention_width(const GopKind gop, const DsmKind dsm, std::size_t stage) {
  return is_attention(gop) || (stage > 0 && dsm != DsmKind::L);
}

}  // namespace

ArchitectureSpec resolve(const StageChoices& choices, const ReferenceBase& base) {
  ArchitectureSpec spec;
  spec.input_size = base.input_size;
  spec.classes = base.classes;
  spec.stages.resize(kNumStages);
  for (int s = 0; s < kNumStages; ++s) {
    const StageChoice& c = choices[s];
    StageSpec& st = spec.stages[s];
    st.gop = c.gop;
    st.dsm = c.dsm;
    st.expansion = c.expansion;
    st.channels = round_channels(base.base_channels[s] * c.c_mult,
                                 needs_attention_width(c.gop, c.dsm, s));
    st.repeats = std::max(1, base.base_repeats[s] + c.r_delta);
    st.stride_in = base.stage_strides[s];
  }
  const int c0 = spec.stages[0].channels;
  spec.stem.channels = {std::max(8, c0 / 2), c0};
  spec.stem.stride = 4;
  spec.validate();
  return spec;
}

StageChoices b0_choices() {
  StageChoices c;
  c[0] = {GopKind::DWConv, DsmKind::L, 4, 1.5, 0};
  c[1] = {GopKind::DWConv, DsmKind::L, 6, 1.25, 0};
  c[2] = {GopKind::DWConv, DsmKind::L, 3, 1.0, 0};
  c[3] = {GopKind::SA, DsmKind::LG, 2, 1.0, 0};
  c[4] = {GopKind::SA, DsmKind::LG, 5, 1.0, 0};
  return c;
}

TokenSequence b0_tokens() { return tokenize(b0_choices()); }

namespace {

ArchitectureSpec family_member(const std::array<int, 5>& channels, const std::array<int, 5>& repeats,
                               int input) {
  // the whole family keeps the searched baseline's operator pattern
  const std::array<GopKind, 5> gops = {GopKind::DWConv, GopKind::DWConv, GopKind::DWConv,
                                       GopKind::SA, GopKind::SA};
  const std::array<DsmKind, 5> dsms = {DsmKind::L, DsmKind::L, DsmKind::L, DsmKind::LG,
                                       DsmKind::LG};
  const std::array<int, 5> expansions = {4, 6, 3, 2, 5};
  const std::array<int, 5> strides = {4, 8, 16, 16, 32};
  ArchitectureSpec spec;
  spec.input_size = input;
  spec.classes = 1000;
  spec.stages.resize(kNumStages);
  for (int s = 0; s < kNumStages; ++s) {
    spec.stages[s] = {gops[s], dsms[s], expansions[s], channels[s], repeats[s], strides[s]};
  }
  spec.stem.channels = {channels[0] / 2, channels[0]};
  spec.stem.stride = 4;
  spec.validate();
  return spec;
}

}  // namespace

ArchitectureSpec family(const std::string& model) {
  if (model == "b0") return resolve(b0_choices(), default_reference_base());
  if (model == "b1") return family_member({48, 80, 128, 128, 256}, {2, 4, 4, 4, 8}, 224);
  if (model == "b2") return family_member({48, 80, 128, 128, 256}, {3, 6, 6, 6, 12}, 256);
  if (model == "b3") return family_member({56, 96, 160, 160, 288}, {3, 7, 7, 7, 14}, 288);
  if (model == "b4") return family_member({64, 112, 192, 192, 352}, {4, 9, 9, 9, 18}, 320);
  if (model == "b5") return family_member({64, 112, 224, 224, 448}, {5, 10, 10, 10, 20}, 384);
  if (model == "b6") return family_member({96, 160, 256, 256, 512}, {6, 12, 12, 12, 24}, 448);
  throw std::invalid_argument("unknown family member: " + model);
}

std::vector<std::string> family_names() { return {"b0", "b1", "b2", "b3", "b4", "b5", "b6"}; }

ArchitectureSpec compound_scale(const ArchitectureSpec& spec, double depth_coef, double width_coef,
                                int new_input) {
  if (depth_coef < 1.0 || width_coef < 1.0) {
    throw std::invalid_argument("compound_scale: coefficients must be >= 1");
  }
  if (new_input <= 0) throw std::invalid_argument("compound_scale: bad input size");
  ArchitectureSpec out = spec;
  out.input_size = new_input;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    StageSpec& st = out.stages[s];
    st.repeats = static_cast<int>(std::ceil(st.repeats * depth_coef));
    st.channels = round_channels(st.channels * width_coef,
                                 needs_attention_width(st.gop, st.dsm, s));
  }
  const int c0 = out.stages.empty() ? 0 : out.stages[0].channels;
  if (!out.stem.channels.empty()) out.stem.channels = {std::max(8, c0 / 2), c0};
  out.validate();
  return out;
}

void ArchitectureSpec::validate() const {
  if (input_size <= 0) throw std::invalid_argument("spec: input size must be positive");
  if (stages.empty()) throw std::invalid_argument("spec: no stages");
  if (stem.channels.size() != 2 || stem.stride != 4) {
    throw std::invalid_argument("spec: stem must be two stride-2 convolutions (total stride 4)");
  }
  if (classes < 2) throw std::invalid_argument("spec: need at least two classes");
  int prev_stride = stem.stride;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& st = stages[s];
    if (st.channels <= 0) throw std::invalid_argument("spec: stage channels must be positive");
    if (st.repeats < 1) throw std::invalid_argument("spec: stage repeats must be >= 1");
    if (st.expansion < 2 || st.expansion > 6) {
      throw std::invalid_argument("spec: expansion outside {2..6}");
    }
    if (is_attention(st.gop) && st.channels % kHeadDim != 0) {
      throw std::invalid_argument("spec: attention stage channels must be divisible by 32");
    }
    if (s > 0 && st.dsm != DsmKind::L && st.channels % kHeadDim != 0) {
      throw std::invalid_argument("spec: stages entered through an attention DSM need 32-divisible channels");
    }
    if (s == 0) {
      if (st.stride_in != stem.stride) {
        throw std::invalid_argument("spec: stage 0 stride must equal the stem stride");
      }
    } else {
      const int ratio = st.stride_in / prev_stride;
      if (ratio * prev_stride != st.stride_in || (ratio != 1 && ratio != 2)) {
        throw std::invalid_argument("spec: boundary strides must be 1 or 2");
      }
    }
    prev_stride = st.stride_in;
  }
  if (stages.size() == kNumStages && stages.back().stride_in != 32) {
    throw std::invalid_argument("spec: total downsampling stride must be 32");
  }
  if (input_size % stages.back().stride_in != 0) {
    throw std::invalid_argument("spec: input size must be divisible by the total stride");
  }
}

std::string ArchitectureSpec::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = schema_version;
  j["input_size"] = input_size;
  j["stem"] = {{"channels", stem.channels}, {"stride", stem.stride}};
  j["stages"] = nlohmann::ordered_json::array();
  for (const StageSpec& st : stages) {
    j["stages"].push_back({{"gop", to_string(st.gop)},
                           {"dsm", to_string(st.dsm)},
                           {"expansion", st.expansion},
                           {"channels", st.channels},
                           {"repeats", st.repeats},
                           {"stride_in", st.stride_in}});
  }
  j["head"] = {{"classes", classes}};
  return j.dump(2) + "\n";
}

ArchitectureSpec ArchitectureSpec::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ArchitectureSpec spec;
  spec.schema_version = j.at("schema_version").get<int>();
  if (spec.schema_version != 1) {
    throw std::invalid_argument("unsupported schema_version " + std::to_string(spec.schema_version));
  }
  spec.input_size = j.at("input_size").get<int>();
  spec.stem.channels = j.at("stem").at("channels").get<std::vector<int>>();
  spec.stem.stride = j.at("stem").at("stride").get<int>();
  for (const auto& js : j.at("stages")) {
    StageSpec st;
    st.gop = gop_from_string(js.at("gop").get<std::string>());
    st.dsm = dsm_from_string(js.at("dsm").get<std::string>());
    st.expansion = js.at("expansion").get<int>();
    st.channels = js.at("channels").get<int>();
    st.repeats = js.at("repeats").get<int>();
    st.stride_in = js.at("stride_in").get<int>();
    spec.stages.push_back(st);
  }
  spec.classes = j.at("head").at("classes").get<int>();
  spec.validate();
  return spec;
}

std::uint64_t ArchitectureSpec::digest() const { return fnv1a64(to_json()); }

std::string ArchitectureSpec::digest_hex() const {
  std::ostringstream os;
  os << std::hex << digest();
  return os.str();
}

GridPlan grid_plan(const ArchitectureSpec& spec, int input_size) {
  GridPlan plan;
  plan.stem_mid = conv_out_side(input_size, 3, 2, 1);
  int side = conv_out_side(plan.stem_mid, 3, 2, 1);
  int prev_stride = spec.stem.stride;
  for (const StageSpec& st : spec.stages) {
    const int ratio = st.stride_in / prev_stride;
    if (ratio == 2) side = conv_out_side(side, 3, 2, 1);
    prev_stride = st.stride_in;
    plan.stage_sides.push_back(side);
  }
  return plan;
}

}  // namespace uninas
