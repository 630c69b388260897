#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "uninas/archspace.hpp"
#include "uninas/cost_model.hpp"
#include "uninas/network.hpp"

namespace uninas {

// ---- reward ----

struct RewardConfig {
  double target_macs = 550e6;  // t
  double alpha = 0.07;
};

// a * (t / f)^alpha
double reward(double accuracy, double macs, const RewardConfig& cfg);

// ---- optimizer ----

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void zero_grad();
  void step();  // throws on non-finite gradients
  double learning_rate() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// ---- controller ----

struct PpoConfig {
  double clip_ratio = 0.2;
  int epochs_per_batch = 1;
  int batch_size = 16;
  double entropy_coef = 1e-3;
  double baseline_decay = 0.95;
  bool normalize_advantages = true;
  double target_kl = 0.0;  // > 0 stops inner epochs once the KL estimate passes it
};

struct ControllerConfig {
  int lstm_layers = 2;
  int hidden = 100;
  double learning_rate = 5e-4;
  double init_range = 0.1;  // weights start uniform in [-init_range, init_range]
  PpoConfig ppo;
};

struct SampledSequence {
  TokenSequence tokens{};
  std::array<double, kTotalTokens> log_probs{};
  double total_log_prob = 0.0;
};

/// Two-layer LSTM policy emitting the 25 architecture tokens autoregressively.
/// Each step embeds the previous token (a learned start vector for step 0)
/// and decodes through a per-step head sized to that decision's arity.
class Controller {
 public:
  Controller(const ControllerConfig& cfg, std::uint64_t seed);

  SampledSequence sample(DetRng& rng);
  std::vector<SampledSequence> sample_batch(int n, DetRng& rng);
  TokenSequence sample_greedy();  // temperature -> 0 limit

  // per-step probability vectors along a fixed token path
  std::vector<std::vector<double>> step_distributions(const TokenSequence& tokens);

  std::vector<Tensor> parameters() const { return params_; }
  const ControllerConfig& config() const { return cfg_; }

  double baseline() const { return baseline_; }
  bool baseline_initialized() const { return baseline_init_; }
  void set_entropy_coef(double coef) { cfg_.ppo.entropy_coef = coef; }
  void set_baseline(double b) {
    baseline_ = b;
    baseline_init_ = true;
  }

  // negated clipped-surrogate objective with entropy bonus, mean over the
  // batch; records onto the active tape so it can be differentiated
  Tensor ppo_loss(const std::vector<struct PpoSample>& batch,
                  const std::vector<double>& advantages, struct PpoDiagnostics* diag = nullptr);

 private:
  friend struct ControllerOps;
  ControllerConfig cfg_;
  // per layer, gate order i,f,g,o: W_x*, W_h*, b_*
  struct LstmLayer {
    std::array<Tensor, 4> wx, wh, b;
  };
  std::vector<LstmLayer> layers_;
  Tensor start_;                    // [1, hidden]
  std::vector<Tensor> embeddings_;  // step i>0 uses table i-1: [arity(i-1), hidden]
  std::vector<Tensor> head_w_, head_b_;
  std::vector<Tensor> params_;
  double baseline_ = 0.0;
  bool baseline_init_ = false;
  std::unique_ptr<AdamOptimizer> opt_;
};

struct PpoSample {
  TokenSequence tokens{};
  std::array<double, kTotalTokens> old_log_probs{};
  double reward = 0.0;
};

struct PpoDiagnostics {
  double mean_reward = 0.0;
  double kl_estimate = 0.0;
  double clip_fraction = 0.0;
  double loss = 0.0;
};

// clipped-surrogate update on advantage = reward - moving baseline
PpoDiagnostics ppo_update(Controller& ctrl, const std::vector<PpoSample>& batch);

// ---- evaluators ----

/// Scores an architecture; must be pure with respect to (spec, seed) and
/// safe to call concurrently.
struct Evaluator {
  virtual ~Evaluator() = default;
  virtual double evaluate(const ArchitectureSpec& spec) = 0;
};

/// Deterministic closed-form accuracy landscape at desk scale. Prefers
/// depthwise convolutions in shallow stages and global attention in deep
/// ones, local downsampling on conv stages and local-global on attention
/// stages, sizes near the searched baseline, and a balanced conv/attention
/// compute split. The global optimum is the documented baseline sequence.
class SurrogateEvaluator : public Evaluator {
 public:
  double evaluate(const ArchitectureSpec& spec) override;
  static TokenSequence optimal_tokens();
  // reward of the optimum under a config, resolved against the given base
  static double optimum_reward(const ReferenceBase& base, const RewardConfig& cfg);
};

// ---- synthetic data + proxy training ----

struct SyntheticDataset {
  int classes = 0;
  int input = 0;
  std::vector<double> images;  // [n, 3, input, input]
  std::vector<int> labels;
  int size() const { return static_cast<int>(labels.size()); }
};

// oriented sinusoidal textures, one orientation band per class
SyntheticDataset make_texture_dataset(int n, int classes, int input, std::uint64_t seed);

struct ProxyTrainConfig {
  int classes = 2;
  int input = 32;
  int train_size = 256;
  int test_size = 200;
  int steps = 500;
  int batch = 8;
  double lr = 2e-3;
  std::uint64_t data_seed = 1234;
};

struct ProxyTrainResult {
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  bool diverged = false;
  std::string diagnostic;
};

/// Materializes the spec, trains it with softmax cross-entropy and Adam on
/// the bundled synthetic set, and reports held-out accuracy. Deterministic
/// given (spec, seed); a non-finite loss yields accuracy 0.
class ProxyTrainEvaluator : public Evaluator {
 public:
  ProxyTrainEvaluator(ProxyTrainConfig cfg, std::uint64_t seed);
  double evaluate(const ArchitectureSpec& spec) override;
  ProxyTrainResult train_and_score(const ArchitectureSpec& spec) const;
  const ProxyTrainConfig& config() const { return cfg_; }

 private:
  ProxyTrainConfig cfg_;
  std::uint64_t seed_;
  SyntheticDataset train_, test_;
};

double dataset_accuracy(const Network& net, const SyntheticDataset& data, int batch = 32);

// ---- history ----

struct HistoryRow {
  int index = 0;
  TokenSequence tokens{};
  std::string spec_digest;
  std::int64_t macs = 0;
  double accuracy = 0.0;
  double reward = 0.0;
  std::int64_t wall_ms = 0;  // persisted as 0 so identical runs match bytewise
};

class SearchHistory {
 public:
  void append(HistoryRow row);
  const std::vector<HistoryRow>& rows() const { return rows_; }
  std::string to_csv() const;
  static std::string csv_header();
  static std::string row_to_csv(const HistoryRow& row);
  static SearchHistory from_csv(const std::string& text);

 private:
  std::vector<HistoryRow> rows_;
};

// ---- search loop ----

struct SearchConfig {
  int num_samples = 2000;
  int topk = 5;
  int proxy_epochs = 5;
  std::uint64_t seed = 0;
  int workers = 1;
  // desk-scale controller training; the appendix constants stay on
  // ControllerConfig defaults (see notes in the repository docs)
  double controller_lr = 5e-3;
  int ppo_epochs_per_batch = 16;
  int batch_size = 16;
  // exploration schedule: the entropy bonus starts here and decays by the
  // given factor after every controller update, never below the floor
  double entropy_coef = 1e-2;
  double entropy_decay = 0.92;
  double entropy_floor = 3e-3;
  double target_kl = 0.05;
};

struct TopEntry {
  int index = 0;
  TokenSequence tokens{};
  ArchitectureSpec spec;
  std::int64_t macs = 0;
  double accuracy = 0.0;
  double reward = 0.0;
};

struct SearchOutcome {
  std::vector<TopEntry> topk;
  SearchHistory history;
  std::vector<PpoDiagnostics> updates;
};

// env var cap on evaluation workers
int resolve_worker_count(int requested);

using HistorySink = std::function<void(const HistoryRow&)>;

SearchOutcome run_search(const ReferenceBase& base, Evaluator& evaluator,
                         const RewardConfig& reward_cfg, const SearchConfig& search_cfg,
                         const HistorySink& sink = HistorySink());

}  // namespace uninas
