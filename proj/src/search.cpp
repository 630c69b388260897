#include "uninas/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace uninas {

double reward(double accuracy, double macs, const RewardConfig& cfg) {
  if (cfg.target_macs <= 0.0) throw std::invalid_argument("reward: target FLOPs must be positive");
  if (cfg.alpha < 0.0) throw std::invalid_argument("reward: alpha must be nonnegative");
  if (macs <= 0.0) throw std::invalid_argument("reward: FLOPs must be positive");
  if (accuracy < 0.0 || accuracy > 1.0) {
    throw std::invalid_argument("reward: accuracy must lie in [0,1]");
  }
  return accuracy * std::pow(cfg.target_macs / macs, cfg.alpha);
}

// ---- Adam ----

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double lr, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i].values();
    const auto& g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(g[j])) throw std::runtime_error("Adam: non-finite gradient");
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

// ---- controller ----

namespace {

int token_arity(int step) { return kTokenArity[step % kDecisionsPerStage]; }

Tensor onehot_rows(const std::vector<int>& idx, int arity) {
  std::vector<double> data(idx.size() * static_cast<std::size_t>(arity), 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) data[r * arity + idx[r]] = 1.0;
  return Tensor::from_data({static_cast<int>(idx.size()), arity}, std::move(data));
}

}  // namespace

Controller::Controller(const ControllerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.lstm_layers < 1 || cfg.hidden < 1) throw std::invalid_argument("controller: bad config");
  DetRng rng(seed ^ 0xC0FFEE123456789ull);
  const int H = cfg.hidden;
  auto u = [&](Shape shape) {
    return Tensor::uniform(std::move(shape), rng, -cfg.init_range, cfg.init_range, true);
  };
  start_ = u({1, H});
  params_.push_back(start_);
  for (int i = 1; i < kTotalTokens; ++i) {
    embeddings_.push_back(u({token_arity(i - 1), H}));
    params_.push_back(embeddings_.back());
  }
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    LstmLayer layer;
    for (int gate = 0; gate < 4; ++gate) {
      layer.wx[gate] = u({H, H});
      layer.wh[gate] = u({H, H});
      layer.b[gate] = u({H});
      params_.push_back(layer.wx[gate]);
      params_.push_back(layer.wh[gate]);
      params_.push_back(layer.b[gate]);
    }
    layers_.push_back(std::move(layer));
  }
  for (int i = 0; i < kTotalTokens; ++i) {
    head_w_.push_back(u({H, token_arity(i)}));
    head_b_.push_back(u({token_arity(i)}));
    params_.push_back(head_w_.back());
    params_.push_back(head_b_.back());
  }
  opt_ = std::make_unique<AdamOptimizer>(params_, cfg.learning_rate);
}

struct ControllerOps {
  // advances the recurrent state in place and returns the step's logits
  static Tensor step(const Controller& ctrl, int step_idx, const Tensor& x, std::vector<Tensor>& h,
                     std::vector<Tensor>& c) {
    Tensor in = x;
    for (std::size_t l = 0; l < ctrl.layers_.size(); ++l) {
      const auto& layer = ctrl.layers_[l];
      auto gate = [&](int g) {
        return add(add(matmul(in, layer.wx[g]), matmul(h[l], layer.wh[g])), layer.b[g]);
      };
      Tensor ig = sigmoid(gate(0));
      Tensor fg = sigmoid(gate(1));
      Tensor gg = tanh(gate(2));
      Tensor og = sigmoid(gate(3));
      c[l] = add(mul(fg, c[l]), mul(ig, gg));
      h[l] = mul(og, tanh(c[l]));
      in = h[l];
    }
    return add(matmul(in, ctrl.head_w_[step_idx]), ctrl.head_b_[step_idx]);
  }

  static Tensor start_rows(const Controller& ctrl, int n) {
    return add(Tensor::zeros({n, ctrl.cfg_.hidden}), ctrl.start_);
  }

  static Tensor embed(const Controller& ctrl, int step_idx, const std::vector<int>& prev_tokens) {
    return matmul(onehot_rows(prev_tokens, token_arity(step_idx - 1)),
                  ctrl.embeddings_[step_idx - 1]);
  }

  static std::vector<Tensor> fresh_state(const Controller& ctrl, int n) {
    std::vector<Tensor> s;
    for (int l = 0; l < ctrl.cfg_.lstm_layers; ++l) s.push_back(Tensor::zeros({n, ctrl.cfg_.hidden}));
    return s;
  }

  static AdamOptimizer& optimizer(Controller& ctrl) { return *ctrl.opt_; }
};

std::vector<SampledSequence> Controller::sample_batch(int n, DetRng& rng) {
  if (n < 1) throw std::invalid_argument("sample_batch: need at least one sequence");
  std::vector<SampledSequence> out(n);
  std::vector<Tensor> h = ControllerOps::fresh_state(*this, n);
  std::vector<Tensor> c = ControllerOps::fresh_state(*this, n);
  Tensor x = ControllerOps::start_rows(*this, n);
  std::vector<int> prev(n, 0);
  for (int step = 0; step < kTotalTokens; ++step) {
    Tensor logits = ControllerOps::step(*this, step, x, h, c);
    Tensor lsm = log_softmax(logits, 1);
    const int arity = token_arity(step);
    for (int r = 0; r < n; ++r) {
      std::vector<double> probs(arity);
      for (int a = 0; a < arity; ++a) probs[a] = std::exp(lsm.values()[r * arity + a]);
      const int tok = rng.categorical(probs);
      out[r].tokens[step] = tok;
      out[r].log_probs[step] = lsm.values()[r * arity + tok];
      out[r].total_log_prob += out[r].log_probs[step];
      prev[r] = tok;
    }
    if (step + 1 < kTotalTokens) x = ControllerOps::embed(*this, step + 1, prev);
  }
  return out;
}

SampledSequence Controller::sample(DetRng& rng) { return sample_batch(1, rng)[0]; }

TokenSequence Controller::sample_greedy() {
  std::vector<Tensor> h = ControllerOps::fresh_state(*this, 1);
  std::vector<Tensor> c = ControllerOps::fresh_state(*this, 1);
  Tensor x = ControllerOps::start_rows(*this, 1);
  TokenSequence tokens{};
  for (int step = 0; step < kTotalTokens; ++step) {
    Tensor logits = ControllerOps::step(*this, step, x, h, c);
    const int arity = token_arity(step);
    int best = 0;
    for (int a = 1; a < arity; ++a) {
      if (logits.values()[a] > logits.values()[best]) best = a;
    }
    tokens[step] = best;
    if (step + 1 < kTotalTokens) x = ControllerOps::embed(*this, step + 1, {best});
  }
  return tokens;
}

std::vector<std::vector<double>> Controller::step_distributions(const TokenSequence& tokens) {
  std::vector<Tensor> h = ControllerOps::fresh_state(*this, 1);
  std::vector<Tensor> c = ControllerOps::fresh_state(*this, 1);
  Tensor x = ControllerOps::start_rows(*this, 1);
  std::vector<std::vector<double>> out;
  for (int step = 0; step < kTotalTokens; ++step) {
    Tensor probs = softmax(ControllerOps::step(*this, step, x, h, c), 1);
    out.push_back(probs.values());
    if (step + 1 < kTotalTokens) x = ControllerOps::embed(*this, step + 1, {tokens[step]});
  }
  return out;
}

Tensor Controller::ppo_loss(const std::vector<PpoSample>& batch,
                            const std::vector<double>& advantages, PpoDiagnostics* diag) {
  if (batch.empty()) throw std::invalid_argument("ppo_loss: empty batch");
  if (advantages.size() != batch.size()) throw std::invalid_argument("ppo_loss: advantage size");
  const int n = static_cast<int>(batch.size());
  const PpoConfig& ppo = cfg_.ppo;

  Tensor adv_t = Tensor::from_data({n}, advantages);
  std::vector<Tensor> h = ControllerOps::fresh_state(*this, n);
  std::vector<Tensor> c = ControllerOps::fresh_state(*this, n);
  Tensor x = ControllerOps::start_rows(*this, n);
  Tensor objective = Tensor::zeros({1});
  double kl_acc = 0.0;
  std::int64_t clipped = 0;
  for (int step = 0; step < kTotalTokens; ++step) {
    std::vector<int> toks(n);
    std::vector<double> old(n);
    for (int i = 0; i < n; ++i) {
      toks[i] = batch[i].tokens[step];
      old[i] = batch[i].old_log_probs[step];
    }
    Tensor old_lp = Tensor::from_data({n}, old);
    Tensor logits = ControllerOps::step(*this, step, x, h, c);
    Tensor lsm = log_softmax(logits, 1);
    Tensor lp = gather_last(lsm, toks);
    Tensor ratio = exp(sub(lp, old_lp));
    Tensor unclipped = mul(ratio, adv_t);
    Tensor clipped_term = mul(clamp(ratio, 1.0 - ppo.clip_ratio, 1.0 + ppo.clip_ratio), adv_t);
    objective = add(objective, sum_all(minimum(unclipped, clipped_term)));
    if (ppo.entropy_coef != 0.0) {
      Tensor probs = softmax(logits, 1);
      Tensor entropy = scale(sum_all(mul(probs, lsm)), -1.0);
      objective = add(objective, scale(entropy, ppo.entropy_coef));
    }
    for (int i = 0; i < n; ++i) {
      kl_acc += old[i] - lp.values()[i];
      if (std::abs(ratio.values()[i] - 1.0) > ppo.clip_ratio) ++clipped;
    }
    if (step + 1 < kTotalTokens) x = ControllerOps::embed(*this, step + 1, toks);
  }
  if (diag) {
    diag->kl_estimate = kl_acc / (static_cast<double>(n) * kTotalTokens);
    diag->clip_fraction = static_cast<double>(clipped) / (static_cast<double>(n) * kTotalTokens);
  }
  return scale(objective, -1.0 / n);
}

PpoDiagnostics ppo_update(Controller& ctrl, const std::vector<PpoSample>& batch) {
  if (batch.empty()) throw std::invalid_argument("ppo_update: empty batch");
  const int n = static_cast<int>(batch.size());
  const PpoConfig& ppo = ctrl.config().ppo;

  double mean_reward = 0.0;
  for (const PpoSample& s : batch) mean_reward += s.reward;
  mean_reward /= n;

  if (!ctrl.baseline_initialized()) {
    ctrl.set_baseline(mean_reward);
  }
  std::vector<double> adv(n);
  for (int i = 0; i < n; ++i) adv[i] = batch[i].reward - ctrl.baseline();
  ctrl.set_baseline(ppo.baseline_decay * ctrl.baseline() + (1.0 - ppo.baseline_decay) * mean_reward);

  if (ppo.normalize_advantages && n > 1) {
    double am = 0.0;
    for (double a : adv) am += a;
    am /= n;
    double sd = 0.0;
    for (double a : adv) sd += (a - am) * (a - am);
    sd = std::sqrt(sd / n);
    if (sd > 1e-12) {
      for (double& a : adv) a = (a - am) / sd;
    }
  }

  PpoDiagnostics diag;
  diag.mean_reward = mean_reward;
  AdamOptimizer& opt = ControllerOps::optimizer(ctrl);
  for (int epoch = 0; epoch < std::max(1, ppo.epochs_per_batch); ++epoch) {
    opt.zero_grad();
    GradTape tape;
    Tensor loss = ctrl.ppo_loss(batch, adv, &diag);
    tape.backward(loss);
    opt.step();
    diag.loss = loss.item();
    if (ppo.target_kl > 0.0 && diag.kl_estimate > ppo.target_kl) break;
  }
  return diag;
}

// ---- surrogate landscape ----

namespace {

// stage-wise preferences mirroring the searched baseline
constexpr std::array<int, 5> kPrefChannels = {48, 80, 128, 128, 256};
constexpr std::array<int, 5> kPrefExpansion = {4, 6, 3, 2, 5};
constexpr std::array<int, 5> kPrefRepeats = {2, 4, 4, 4, 8};

double gop_penalty(int stage, GopKind gop) {
  const bool shallow = stage < 3;
  switch (gop) {
    case GopKind::Conv: return shallow ? 0.05 : 0.08;
    case GopKind::DWConv: return shallow ? 0.0 : 0.06;
    case GopKind::SA: return shallow ? 0.08 : 0.0;
    case GopKind::LSA: return shallow ? 0.06 : 0.04;
    case GopKind::MLP: return 0.10;
  }
  return 0.10;
}

double dsm_penalty(GopKind gop, DsmKind dsm) {
  if (is_conv_family(gop)) {
    switch (dsm) {
      case DsmKind::L: return 0.0;
      case DsmKind::LG: return 0.05;
      case DsmKind::G: return 0.08;
    }
  }
  switch (dsm) {
    case DsmKind::L: return 0.05;
    case DsmKind::LG: return 0.0;
    case DsmKind::G: return 0.04;
  }
  return 0.0;
}

}  // namespace

double SurrogateEvaluator::evaluate(const ArchitectureSpec& spec) {
  double penalty = 0.0;
  const int stages = static_cast<int>(spec.stages.size());
  penalty += 0.1 * std::abs(stages - 5);
  for (int s = 0; s < std::min(stages, 5); ++s) {
    const StageSpec& st = spec.stages[s];
    penalty += gop_penalty(s, st.gop);
    penalty += dsm_penalty(st.gop, st.dsm);
    penalty += 0.02 * std::abs(st.expansion - kPrefExpansion[s]);
    penalty += 0.125 * std::abs(std::log2(static_cast<double>(st.channels) / kPrefChannels[s]));
    penalty += 0.03 * std::abs(st.repeats - kPrefRepeats[s]);
  }
  const CostReport cost = arch_cost(spec);
  std::int64_t conv_macs = 0, attn_macs = 0;
  for (int s = 0; s < stages; ++s) {
    if (is_conv_family(spec.stages[s].gop)) conv_macs += cost.per_stage_macs[s];
    if (is_attention(spec.stages[s].gop)) attn_macs += cost.per_stage_macs[s];
  }
  if (conv_macs == 0 || attn_macs == 0) {
    penalty += 0.02;
  } else {
    const double imbalance = std::abs(std::log2(static_cast<double>(conv_macs) / attn_macs));
    penalty += 0.02 * std::min(1.0, imbalance);
  }
  return 0.92 * std::exp(-penalty);
}

TokenSequence SurrogateEvaluator::optimal_tokens() { return b0_tokens(); }

double SurrogateEvaluator::optimum_reward(const ReferenceBase& base, const RewardConfig& cfg) {
  SurrogateEvaluator ev;
  const ArchitectureSpec spec = resolve(detokenize(optimal_tokens()), base);
  const double acc = ev.evaluate(spec);
  return reward(acc, static_cast<double>(arch_cost(spec).total_macs), cfg);
}

// ---- synthetic data ----

SyntheticDataset make_texture_dataset(int n, int classes, int input, std::uint64_t seed) {
  if (n < 1 || classes < 2 || classes > 10 || input < 8 || input > 64) {
    throw std::invalid_argument("make_texture_dataset: unsupported size");
  }
  SyntheticDataset d;
  d.classes = classes;
  d.input = input;
  d.images.resize(static_cast<std::size_t>(n) * 3 * input * input);
  d.labels.resize(n);
  DetRng rng(seed ^ 0x7E87E87E87E87E8ull);
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    d.labels[i] = label;
    const double theta = pi * label / classes + rng.uniform(-0.08, 0.08);
    const double freq = rng.uniform(2.0, 4.0);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double cx = std::cos(theta), sx = std::sin(theta);
    for (int ch = 0; ch < 3; ++ch) {
      const double chphase = phase + 0.7 * ch;
      double* img = d.images.data() +
                    (static_cast<std::size_t>(i) * 3 + ch) * input * input;
      for (int y = 0; y < input; ++y) {
        for (int x = 0; x < input; ++x) {
          const double proj = (x * cx + y * sx) / input;
          img[y * input + x] =
              std::sin(2.0 * pi * freq * proj + chphase) + 0.15 * rng.normal();
        }
      }
    }
  }
  return d;
}

namespace {

Tensor dataset_batch(const SyntheticDataset& data, const std::vector<int>& idx) {
  const int plane = 3 * data.input * data.input;
  std::vector<double> out(idx.size() * static_cast<std::size_t>(plane));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::memcpy(out.data() + r * plane, data.images.data() + static_cast<std::size_t>(idx[r]) * plane,
                sizeof(double) * plane);
  }
  return Tensor::from_data({static_cast<int>(idx.size()), 3, data.input, data.input}, std::move(out));
}

}  // namespace

double dataset_accuracy(const Network& net, const SyntheticDataset& data, int batch) {
  int correct = 0;
  for (int start = 0; start < data.size(); start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    Tensor logits = net.forward(dataset_batch(data, idx), false);
    const int classes = logits.shape()[1];
    for (std::size_t r = 0; r < idx.size(); ++r) {
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (logits.values()[r * classes + c] > logits.values()[r * classes + best]) best = c;
      }
      if (best == data.labels[idx[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / data.size();
}

ProxyTrainEvaluator::ProxyTrainEvaluator(ProxyTrainConfig cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed) {
  train_ = make_texture_dataset(cfg.train_size, cfg.classes, cfg.input, cfg.data_seed);
  test_ = make_texture_dataset(cfg.test_size, cfg.classes, cfg.input, cfg.data_seed + 0x5EED);
}

double ProxyTrainEvaluator::evaluate(const ArchitectureSpec& spec) {
  ProxyTrainResult res = train_and_score(spec);
  return res.diverged ? 0.0 : res.heldout_accuracy;
}

ProxyTrainResult ProxyTrainEvaluator::train_and_score(const ArchitectureSpec& spec) const {
  if (spec.input_size != cfg_.input) {
    throw std::invalid_argument("proxy evaluator: spec input " + std::to_string(spec.input_size) +
                                " does not match the dataset input " + std::to_string(cfg_.input));
  }
  if (spec.classes != cfg_.classes) {
    throw std::invalid_argument("proxy evaluator: class count mismatch");
  }
  const std::uint64_t eval_seed = seed_ ^ spec.digest();
  Network net = materialize(spec, eval_seed);
  AdamOptimizer opt(net.parameters(), cfg_.lr);
  DetRng rng(eval_seed + 0xBA7C4);
  ProxyTrainResult res;
  for (int step = 0; step < cfg_.steps; ++step) {
    std::vector<int> idx(cfg_.batch);
    std::vector<int> labels(cfg_.batch);
    for (int i = 0; i < cfg_.batch; ++i) {
      idx[i] = static_cast<int>(rng.uniform() * train_.size());
      labels[i] = train_.labels[idx[i]];
    }
    try {
      opt.zero_grad();
      GradTape tape;
      Tensor logits = net.forward(dataset_batch(train_, idx), true);
      Tensor loss = softmax_cross_entropy(logits, labels);
      tape.backward(loss);
      opt.step();
    } catch (const std::runtime_error& e) {
      res.diverged = true;
      res.diagnostic = e.what();
      return res;
    }
  }
  res.train_accuracy = dataset_accuracy(net, train_);
  res.heldout_accuracy = dataset_accuracy(net, test_);
  return res;
}

// ---- history ----

void SearchHistory::append(HistoryRow row) {
  if (!rows_.empty() && row.index <= rows_.back().index) {
    throw std::invalid_argument("history: indices must be strictly increasing");
  }
  rows_.push_back(std::move(row));
}

std::string SearchHistory::csv_header() { return "index,tokens,macs,accuracy,reward,wall_ms"; }

std::string SearchHistory::row_to_csv(const HistoryRow& row) {
  std::ostringstream os;
  os << row.index << ',';
  for (int i = 0; i < kTotalTokens; ++i) {
    if (i) os << ';';
    os << row.tokens[i];
  }
  char buf[64];
  os << ',' << row.macs;
  std::snprintf(buf, sizeof(buf), "%.17g", row.accuracy);
  os << ',' << buf;
  std::snprintf(buf, sizeof(buf), "%.17g", row.reward);
  os << ',' << buf;
  os << ',' << row.wall_ms;
  return os.str();
}

std::string SearchHistory::to_csv() const {
  std::string out = csv_header() + "\n";
  for (const HistoryRow& row : rows_) out += row_to_csv(row) + "\n";
  return out;
}

SearchHistory SearchHistory::from_csv(const std::string& text) {
  SearchHistory hist;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != csv_header()) {
    throw std::invalid_argument("history csv: bad header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    HistoryRow row;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    row.index = std::stoi(field);
    std::getline(ls, field, ',');
    {
      std::istringstream ts(field);
      std::string tok;
      int i = 0;
      while (std::getline(ts, tok, ';')) {
        if (i >= kTotalTokens) throw std::invalid_argument("history csv: too many tokens");
        row.tokens[i++] = std::stoi(tok);
      }
      if (i != kTotalTokens) throw std::invalid_argument("history csv: expected 25 tokens");
    }
    std::getline(ls, field, ',');
    row.macs = std::stoll(field);
    std::getline(ls, field, ',');
    row.accuracy = std::strtod(field.c_str(), nullptr);
    std::getline(ls, field, ',');
    row.reward = std::strtod(field.c_str(), nullptr);
    std::getline(ls, field, ',');
    row.wall_ms = std::stoll(field);
    hist.append(std::move(row));
  }
  return hist;
}

// ---- search loop ----

int resolve_worker_count(int requested) {
  int cap = std::numeric_limits<int>::max();
  if (const char* env = std::getenv("UNINAS_THREADS"); env && *env) {
    cap = std::max(1, std::atoi(env));
  }
  return std::max(1, std::min(requested, cap));
}

SearchOutcome run_search(const ReferenceBase& base, Evaluator& evaluator,
                         const RewardConfig& reward_cfg, const SearchConfig& search_cfg,
                         const HistorySink& sink) {
  if (search_cfg.topk < 1 || search_cfg.num_samples < search_cfg.topk) {
    throw std::invalid_argument("search: need num_samples >= topk >= 1");
  }
  ControllerConfig ctrl_cfg;
  ctrl_cfg.learning_rate = search_cfg.controller_lr;
  ctrl_cfg.ppo.epochs_per_batch = search_cfg.ppo_epochs_per_batch;
  ctrl_cfg.ppo.batch_size = search_cfg.batch_size;
  ctrl_cfg.ppo.target_kl = search_cfg.target_kl;
  Controller ctrl(ctrl_cfg, search_cfg.seed ^ 0xAB5C155ull);

  DetRng sample_rng(search_cfg.seed * 0x9E3779B97F4A7C15ull + 0x51u);
  const int workers = resolve_worker_count(search_cfg.workers);

  SearchOutcome outcome;
  std::vector<TopEntry> best;
  int index = 0;
  double entropy = search_cfg.entropy_coef;
  while (index < search_cfg.num_samples) {
    ctrl.set_entropy_coef(entropy);
    const int n = std::min(search_cfg.batch_size, search_cfg.num_samples - index);
    std::vector<SampledSequence> samples = ctrl.sample_batch(n, sample_rng);

    std::vector<ArchitectureSpec> specs(n);
    std::vector<std::int64_t> macs(n);
    for (int i = 0; i < n; ++i) {
      specs[i] = resolve(detokenize(samples[i].tokens), base);
      macs[i] = arch_cost(specs[i]).total_macs;
    }

    std::vector<double> accuracy(n, 0.0);
    std::vector<char> failed(n, 0);
    auto eval_range = [&](int worker) {
      for (int i = worker; i < n; i += workers) {
        try {
          const double a = evaluator.evaluate(specs[i]);
          if (!(a >= 0.0 && a <= 1.0) || !std::isfinite(a)) throw std::runtime_error("accuracy out of range");
          accuracy[i] = a;
        } catch (...) {
          failed[i] = 1;
          accuracy[i] = 0.0;
        }
      }
    };
    if (workers <= 1 || n == 1) {
      eval_range(0);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < std::min(workers, n); ++w) pool.emplace_back(eval_range, w);
      for (std::thread& t : pool) t.join();
    }

    std::vector<PpoSample> ppo_batch(n);
    for (int i = 0; i < n; ++i) {
      const double r = failed[i] ? 0.0 : reward(accuracy[i], static_cast<double>(macs[i]), reward_cfg);
      HistoryRow row;
      row.index = index + i;
      row.tokens = samples[i].tokens;
      row.spec_digest = specs[i].digest_hex();
      row.macs = macs[i];
      row.accuracy = accuracy[i];
      row.reward = r;
      row.wall_ms = 0;
      outcome.history.append(row);
      if (sink) sink(row);

      TopEntry entry;
      entry.index = index + i;
      entry.tokens = samples[i].tokens;
      entry.spec = specs[i];
      entry.macs = macs[i];
      entry.accuracy = accuracy[i];
      entry.reward = r;
      best.push_back(std::move(entry));

      ppo_batch[i].tokens = samples[i].tokens;
      ppo_batch[i].old_log_probs = samples[i].log_probs;
      ppo_batch[i].reward = r;
    }
    std::stable_sort(best.begin(), best.end(), [](const TopEntry& a, const TopEntry& b) {
      if (a.reward != b.reward) return a.reward > b.reward;
      return a.index < b.index;
    });
    if (static_cast<int>(best.size()) > search_cfg.topk) best.resize(search_cfg.topk);

    outcome.updates.push_back(ppo_update(ctrl, ppo_batch));
    entropy = std::max(search_cfg.entropy_floor, entropy * search_cfg.entropy_decay);
    index += n;
  }
  outcome.topk = std::move(best);
  return outcome;
}

}  // namespace uninas
