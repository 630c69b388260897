#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "uninas/rng.hpp"

namespace uninas {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorAccess;
}

/// Dense row-major tensor of 64-bit floats with optional reverse-mode
/// gradients. Copies share storage; once a tensor has entered a recorded
/// computation it must not be mutated until the tape has been consumed.
///
/// Every compute primitive checks its output for NaN/Inf and throws, so a
/// finite input contract propagates through whole networks.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, DetRng& rng, double sigma, bool requires_grad = false);
  static Tensor trunc_normal(Shape shape, DetRng& rng, double sigma, bool requires_grad = false);
  static Tensor uniform(Shape shape, DetRng& rng, double lo, double hi, bool requires_grad = false);
  // He-uniform with fan_out = out_channels * kernel_h * kernel_w; expects a
  // 4-d conv weight shape [out, in/g, kh, kw].
  static Tensor he_uniform_conv(Shape shape, DetRng& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim() const;
  std::int64_t size() const;
  double item() const;
  std::vector<double>& values();
  const std::vector<double>& values() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  // Deep copy of values; gradients and graph membership are not copied.
  Tensor clone() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  friend struct detail::TensorAccess;
};

/// Tape of executed primitives. Activates for the constructing thread and
/// records every primitive whose inputs participate in gradients. backward()
/// replays adjoints in strict reverse execution order, exactly once.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // loss must be a scalar produced under this tape
  void backward(const Tensor& loss);

  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> records_;
  std::uint64_t id_ = 0;
  bool consumed_ = false;
  friend struct detail::TensorAccess;
};

/// Counts multiply-accumulates executed by matmul/conv primitives on this
/// thread while in scope. Counts are nominal (zero padding included), the
/// usual FLOPs-table convention.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::int64_t count() const { return count_; }
  void reset() { count_ = 0; }

 private:
  std::int64_t count_ = 0;
  MacCounter* prev_ = nullptr;
  friend struct detail::TensorAccess;
};

// ---- shape/layout primitives (no arithmetic, no finiteness check) ----

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
// zero-pad the last two axes at the bottom/right edges
Tensor pad_bottom_right(const Tensor& x, int pad_h, int pad_w);
// keep the top-left new_h x new_w region of the last two axes
Tensor crop_bottom_right(const Tensor& x, int new_h, int new_w);

// ---- arithmetic primitives ----

// b broadcasts against a by right-alignment (each trailing dim equal or 1)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

// 2-d a[M,K] x b[K,N], or batched a[...,M,K] x b[...,K,N]; b may stay 2-d
// while a is batched (shared weights).
Tensor matmul(const Tensor& a, const Tensor& b);

// x[B,Cin,H,W], w[Cout,Cin/g,kh,kw]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding, int groups = 1);
Tensor conv2d_rect(const Tensor& x, const Tensor& w, int stride_h, int stride_w, int pad_h,
                   int pad_w, int groups = 1);
// x[B,Cin,N], w[Cout,Cin,k]
Tensor conv1d(const Tensor& x, const Tensor& w, int stride, int padding);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// x[B,C,H,W]; normalizes per channel over (B,H,W); updates running stats
// in-place when training. Biased variance throughout.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double eps = 1e-5, double momentum = 0.1);
// normalizes over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// exact erf form: x * Phi(x)
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// x[B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, int kernel_h, int kernel_w, int stride_h, int stride_w);

// x[...,A]; one index per leading position; result drops the last axis
Tensor gather_last(const Tensor& x, const std::vector<int>& indices);

// ---- losses ----

// mean over batch of -sum_c onehot(label) . log_softmax(logits)
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// tau^2 * CE(softmax(z_s/tau), softmax(z_t/tau)) averaged over the batch,
// CE(p, q) = -sum q . log p
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau);

}  // namespace uninas
