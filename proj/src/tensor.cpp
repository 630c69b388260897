#include "uninas/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace uninas {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Tensor::Impl {
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;            // lazily sized by the first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;        // nonzero when produced under that tape
};

namespace detail {
struct TensorAccess {
  using Impl = Tensor::Impl;
  using ImplPtr = std::shared_ptr<Impl>;

  static const ImplPtr& impl(const Tensor& t) {
    if (!t.impl_) throw std::logic_error("operation on default-constructed tensor");
    return t.impl_;
  }
  static Tensor make(ImplPtr impl) { return Tensor(std::move(impl)); }

  static GradTape*& tape_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }
  static MacCounter*& counter_slot() {
    thread_local MacCounter* slot = nullptr;
    return slot;
  }
  static std::uint64_t tape_id(const GradTape& t) { return t.id_; }
  static void push(GradTape& t, std::function<void()> fn) {
    if (t.consumed_) throw std::logic_error("recording on a consumed GradTape");
    t.records_.push_back(std::move(fn));
  }
  static void set_tape_id(GradTape& t, std::uint64_t id) { t.id_ = id; }
  static std::vector<std::function<void()>>& records(GradTape& t) { return t.records_; }
  static bool& consumed(GradTape& t) { return t.consumed_; }
  static void counter_link(MacCounter& c, MacCounter* prev) { c.prev_ = prev; }
  static MacCounter* counter_prev(MacCounter& c) { return c.prev_; }
  static void counter_add(MacCounter& c, std::int64_t n) { c.count_ += n; }
};
}  // namespace detail

namespace {

using TA = detail::TensorAccess;
using ImplPtr = TA::ImplPtr;

ImplPtr alloc(Shape shape) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TA::Impl>();
  impl->v.assign(static_cast<std::size_t>(numel(shape)), 0.0);
  impl->shape = std::move(shape);
  return impl;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

void ensure_grad(TA::Impl& im) {
  if (im.g.size() != im.v.size()) im.g.assign(im.v.size(), 0.0);
}

// true when gradients must flow into this tensor under the tape with id tid
bool needs_grad(const ImplPtr& p, std::uint64_t tid) {
  return p->requires_grad || (p->tape_id != 0 && p->tape_id == tid);
}

struct Rec {
  GradTape* tape = nullptr;
  std::uint64_t tid = 0;
  explicit Rec(std::initializer_list<ImplPtr> inputs) {
    GradTape* t = TA::tape_slot();
    if (!t) return;
    std::uint64_t id = TA::tape_id(*t);
    for (const auto& in : inputs) {
      if (needs_grad(in, id)) {
        tape = t;
        tid = id;
        return;
      }
    }
  }
  bool active() const { return tape != nullptr; }
  void attach(const ImplPtr& out, std::function<void()> fn) const {
    out->tape_id = tid;
    TA::push(*tape, std::move(fn));
  }
};

void mac_add(std::int64_t n) {
  MacCounter* c = TA::counter_slot();
  if (c) TA::counter_add(*c, n);
}

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

int normalize_axis(int axis, int dim, const char* op) {
  if (axis < 0) axis += dim;
  if (axis < 0 || axis >= dim) throw std::invalid_argument(std::string(op) + ": axis out of range");
  return axis;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  std::fill(impl->v.begin(), impl->v.end(), value);
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  if (static_cast<std::int64_t>(data.size()) != numel(impl->shape)) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(impl->shape));
  }
  impl->v = std::move(data);
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::randn(Shape shape, DetRng& rng, double sigma, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  for (double& x : impl->v) x = rng.normal() * sigma;
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::trunc_normal(Shape shape, DetRng& rng, double sigma, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  for (double& x : impl->v) x = rng.trunc_normal(sigma);
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::uniform(Shape shape, DetRng& rng, double lo, double hi, bool requires_grad) {
  auto impl = alloc(std::move(shape));
  for (double& x : impl->v) x = rng.uniform(lo, hi);
  impl->requires_grad = requires_grad;
  return TA::make(impl);
}

Tensor Tensor::he_uniform_conv(Shape shape, DetRng& rng, bool requires_grad) {
  if (shape.size() != 4) throw std::invalid_argument("he_uniform_conv expects a 4-d conv weight shape");
  double fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
  double bound = std::sqrt(6.0 / fan_out);
  return uniform(std::move(shape), rng, -bound, bound, requires_grad);
}

const Shape& Tensor::shape() const { return TA::impl(*this)->shape; }
int Tensor::dim() const { return static_cast<int>(TA::impl(*this)->shape.size()); }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(TA::impl(*this)->v.size()); }

double Tensor::item() const {
  const auto& im = TA::impl(*this);
  if (im->v.size() != 1) throw std::invalid_argument("item: tensor has shape " + shape_str(im->shape));
  return im->v[0];
}

std::vector<double>& Tensor::values() { return TA::impl(*this)->v; }
const std::vector<double>& Tensor::values() const { return TA::impl(*this)->v; }

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& im = TA::impl(*this);
  if (idx.size() != im->shape.size()) throw std::invalid_argument("at: rank mismatch");
  auto st = strides_of(im->shape);
  std::int64_t lin = 0;
  int k = 0;
  for (int i : idx) {
    if (i < 0 || i >= im->shape[k]) throw std::invalid_argument("at: index out of range");
    lin += st[k++] * i;
  }
  return im->v[static_cast<std::size_t>(lin)];
}

bool Tensor::requires_grad() const { return TA::impl(*this)->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  TA::impl(*this)->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const {
  const auto& im = TA::impl(*this);
  return im->g.size() == im->v.size();
}

const std::vector<double>& Tensor::grad() const {
  const auto& im = TA::impl(*this);
  if (im->g.size() != im->v.size()) {
    throw std::logic_error("grad: no gradient has been accumulated for this tensor");
  }
  return im->g;
}

void Tensor::zero_grad() {
  auto& im = TA::impl(*this);
  im->g.assign(im->v.size(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& im = TA::impl(*this);
  auto out = alloc(im->shape);
  out->v = im->v;
  return TA::make(out);
}

// ---- GradTape ----

GradTape::GradTape() {
  GradTape*& slot = TA::tape_slot();
  if (slot != nullptr) throw std::logic_error("a GradTape is already active on this thread");
  static std::atomic<std::uint64_t> next_id{1};
  id_ = next_id.fetch_add(1);
  slot = this;
}

GradTape::~GradTape() { TA::tape_slot() = nullptr; }

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed; rebuild the forward pass");
  const auto& im = TA::impl(loss);
  if (im->v.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(im->shape));
  }
  if (im->tape_id != id_) {
    throw std::invalid_argument("backward: loss is detached from this tape");
  }
  im->g.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  consumed_ = true;
}

// ---- MacCounter ----

MacCounter::MacCounter() {
  MacCounter*& slot = TA::counter_slot();
  prev_ = slot;
  slot = this;
}

MacCounter::~MacCounter() { TA::counter_slot() = prev_; }

// ---- layout primitives ----

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& xi = TA::impl(x);
  if (numel(shape) != static_cast<std::int64_t>(xi->v.size())) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(xi->shape) + " as " + shape_str(shape));
  }
  auto out = alloc(std::move(shape));
  out->v = xi->v;
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::size_t i = 0; i < out->g.size(); ++i) xi->g[i] += out->g[i];
    });
  }
  return TA::make(out);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const auto& xi = TA::impl(x);
  const int d = static_cast<int>(xi->shape.size());
  if (static_cast<int>(axes.size()) != d) throw std::invalid_argument("permute: axes rank mismatch");
  std::vector<bool> seen(d, false);
  Shape oshape(d);
  for (int k = 0; k < d; ++k) {
    int a = axes[k];
    if (a < 0 || a >= d || seen[a]) throw std::invalid_argument("permute: invalid axis list");
    seen[a] = true;
    oshape[k] = xi->shape[a];
  }
  auto out = alloc(oshape);
  auto xst = strides_of(xi->shape);
  auto ost = strides_of(oshape);
  const std::int64_t n = static_cast<std::int64_t>(out->v.size());
  // gather: out linear index -> source linear index
  std::vector<std::int64_t> src(n);
  {
    std::vector<int> coord(d, 0);
    for (std::int64_t o = 0; o < n; ++o) {
      std::int64_t s = 0;
      for (int k = 0; k < d; ++k) s += xst[axes[k]] * coord[k];
      src[o] = s;
      for (int k = d - 1; k >= 0; --k) {
        if (++coord[k] < oshape[k]) break;
        coord[k] = 0;
      }
    }
  }
  for (std::int64_t o = 0; o < n; ++o) out->v[o] = xi->v[src[o]];
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, src]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::size_t o = 0; o < out->g.size(); ++o) xi->g[src[o]] += out->g[o];
    });
  }
  return TA::make(out);
}

Tensor pad_bottom_right(const Tensor& x, int pad_h, int pad_w) {
  const auto& xi = TA::impl(x);
  if (xi->shape.size() < 2) throw std::invalid_argument("pad_bottom_right: needs at least 2 axes");
  if (pad_h < 0 || pad_w < 0) throw std::invalid_argument("pad_bottom_right: negative padding");
  Shape oshape = xi->shape;
  const int d = static_cast<int>(oshape.size());
  const int H = oshape[d - 2], W = oshape[d - 1];
  oshape[d - 2] += pad_h;
  oshape[d - 1] += pad_w;
  auto out = alloc(oshape);
  const std::int64_t lead = numel(xi->shape) / (static_cast<std::int64_t>(H) * W);
  const int Ho = H + pad_h, Wo = W + pad_w;
  for (std::int64_t l = 0; l < lead; ++l) {
    for (int i = 0; i < H; ++i) {
      const double* sp = xi->v.data() + (l * H + i) * W;
      double* dp = out->v.data() + (l * Ho + i) * Wo;
      std::memcpy(dp, sp, sizeof(double) * W);
    }
  }
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, lead, H, W, Ho, Wo]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t l = 0; l < lead; ++l) {
        for (int i = 0; i < H; ++i) {
          const double* gp = out->g.data() + (l * Ho + i) * Wo;
          double* dp = xi->g.data() + (l * H + i) * W;
          for (int j = 0; j < W; ++j) dp[j] += gp[j];
        }
      }
    });
  }
  return TA::make(out);
}

Tensor crop_bottom_right(const Tensor& x, int new_h, int new_w) {
  const auto& xi = TA::impl(x);
  if (xi->shape.size() < 2) throw std::invalid_argument("crop_bottom_right: needs at least 2 axes");
  const int d = static_cast<int>(xi->shape.size());
  const int H = xi->shape[d - 2], W = xi->shape[d - 1];
  if (new_h < 1 || new_w < 1 || new_h > H || new_w > W) {
    throw std::invalid_argument("crop_bottom_right: invalid target size");
  }
  Shape oshape = xi->shape;
  oshape[d - 2] = new_h;
  oshape[d - 1] = new_w;
  auto out = alloc(oshape);
  const std::int64_t lead = numel(xi->shape) / (static_cast<std::int64_t>(H) * W);
  for (std::int64_t l = 0; l < lead; ++l) {
    for (int i = 0; i < new_h; ++i) {
      const double* sp = xi->v.data() + (l * H + i) * W;
      double* dp = out->v.data() + (l * new_h + i) * new_w;
      std::memcpy(dp, sp, sizeof(double) * new_w);
    }
  }
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, lead, H, W, new_h, new_w]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t l = 0; l < lead; ++l) {
        for (int i = 0; i < new_h; ++i) {
          const double* gp = out->g.data() + (l * new_h + i) * new_w;
          double* dp = xi->g.data() + (l * H + i) * W;
          for (int j = 0; j < new_w; ++j) dp[j] += gp[j];
        }
      }
    });
  }
  return TA::make(out);
}

// ---- broadcast elementwise ----

namespace {

// strides of b aligned to a's axes; 0 stride on broadcast axes
std::vector<std::int64_t> broadcast_strides(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size()) {
    throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  }
  auto bst = strides_of(b);
  std::vector<std::int64_t> st(a.size(), 0);
  const int off = static_cast<int>(a.size() - b.size());
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (b[k] == a[off + k]) {
      st[off + k] = bst[k];
    } else if (b[k] == 1) {
      st[off + k] = 0;
    } else {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    }
  }
  return st;
}

template <typename Fwd, typename Bwd>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Bwd bwd) {
  const auto& ai = TA::impl(a);
  const auto& bi = TA::impl(b);
  auto bst = broadcast_strides(ai->shape, bi->shape, op);
  auto out = alloc(ai->shape);
  const Shape shape = ai->shape;
  const int d = static_cast<int>(shape.size());
  const std::int64_t n = static_cast<std::int64_t>(out->v.size());
  std::vector<int> coord(d, 0);
  if (static_cast<std::int64_t>(bi->v.size()) == n && bi->shape == ai->shape) {
    for (std::int64_t i = 0; i < n; ++i) out->v[i] = fwd(ai->v[i], bi->v[i]);
  } else {
    std::int64_t boff = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      out->v[i] = fwd(ai->v[i], bi->v[boff]);
      for (int k = d - 1; k >= 0; --k) {
        boff += bst[k];
        if (++coord[k] < shape[k]) break;
        coord[k] = 0;
        boff -= static_cast<std::int64_t>(bst[k]) * shape[k];
      }
    }
  }
  check_finite(out->v, op);
  Rec rec{ai, bi};
  if (rec.active()) {
    bool na = needs_grad(ai, rec.tid), nb = needs_grad(bi, rec.tid);
    rec.attach(out, [ai, bi, out, bst, shape, d, n, na, nb, bwd]() {
      if (out->g.empty()) return;
      if (na) ensure_grad(*ai);
      if (nb) ensure_grad(*bi);
      std::vector<int> coord(d, 0);
      std::int64_t boff = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        bwd(out->g[i], ai->v[i], bi->v[boff], na ? &ai->g[i] : nullptr, nb ? &bi->g[boff] : nullptr);
        for (int k = d - 1; k >= 0; --k) {
          boff += bst[k];
          if (++coord[k] < shape[k]) break;
          coord[k] = 0;
          boff -= static_cast<std::int64_t>(bst[k]) * shape[k];
        }
      }
    });
  }
  return TA::make(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g * y;
        if (db) *db += g * x;
      });
}

// ---- elementwise unary ----

namespace {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, const char* op, Fwd fwd, Dfn dfn) {
  const auto& xi = TA::impl(x);
  auto out = alloc(xi->shape);
  const std::int64_t n = static_cast<std::int64_t>(out->v.size());
  for (std::int64_t i = 0; i < n; ++i) out->v[i] = fwd(xi->v[i]);
  check_finite(out->v, op);
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, n, dfn]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t i = 0; i < n; ++i) xi->g[i] += out->g[i] * dfn(xi->v[i], out->v[i]);
    });
  }
  return TA::make(out);
}

}  // namespace

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, "gelu", [](double v) { return v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        double phi_cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return phi_cdf + v * phi_pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid", [](double v) { return stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      x, "clamp", [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  const auto& ai = TA::impl(a);
  const auto& bi = TA::impl(b);
  if (ai->shape != bi->shape) {
    throw std::invalid_argument("minimum: shape mismatch " + shape_str(ai->shape) + " vs " + shape_str(bi->shape));
  }
  return broadcast_binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double g, double x, double y, double* da, double* db) {
        if (x <= y) {
          if (da) *da += g;
        } else if (db) {
          *db += g;
        }
      });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& ai = TA::impl(a);
  const auto& bi = TA::impl(b);
  const auto& as = ai->shape;
  const auto& bs = bi->shape;
  if (as.size() < 2 || bs.size() < 2) throw std::invalid_argument("matmul: operands must have rank >= 2");
  const bool shared_b = (bs.size() == 2 && as.size() > 2);
  if (!shared_b && as.size() != bs.size()) {
    throw std::invalid_argument("matmul: rank mismatch " + shape_str(as) + " x " + shape_str(bs));
  }
  const int M = as[as.size() - 2];
  const int K = as[as.size() - 1];
  const int Kb = bs[bs.size() - 2];
  const int N = bs[bs.size() - 1];
  if (K != Kb) throw std::invalid_argument("matmul: dimension mismatch " + shape_str(as) + " x " + shape_str(bs));
  std::int64_t batch = 1;
  Shape oshape;
  for (std::size_t k = 0; k + 2 < as.size(); ++k) {
    if (!shared_b && bs[k] != as[k]) {
      throw std::invalid_argument("matmul: batch mismatch " + shape_str(as) + " x " + shape_str(bs));
    }
    batch *= as[k];
    oshape.push_back(as[k]);
  }
  oshape.push_back(M);
  oshape.push_back(N);
  auto out = alloc(oshape);
  const std::int64_t a_step = static_cast<std::int64_t>(M) * K;
  const std::int64_t b_step = shared_b ? 0 : static_cast<std::int64_t>(K) * N;
  const std::int64_t o_step = static_cast<std::int64_t>(M) * N;
  for (std::int64_t t = 0; t < batch; ++t) {
    const double* A = ai->v.data() + t * a_step;
    const double* B = bi->v.data() + t * b_step;
    double* C = out->v.data() + t * o_step;
    for (int i = 0; i < M; ++i) {
      for (int k = 0; k < K; ++k) {
        const double av = A[i * K + k];
        const double* brow = B + k * N;
        double* crow = C + i * N;
        for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  }
  mac_add(batch * static_cast<std::int64_t>(M) * K * N);
  check_finite(out->v, "matmul");
  Rec rec{ai, bi};
  if (rec.active()) {
    bool na = needs_grad(ai, rec.tid), nb = needs_grad(bi, rec.tid);
    rec.attach(out, [ai, bi, out, batch, M, K, N, a_step, b_step, o_step, na, nb]() {
      if (out->g.empty()) return;
      if (na) ensure_grad(*ai);
      if (nb) ensure_grad(*bi);
      for (std::int64_t t = 0; t < batch; ++t) {
        const double* A = ai->v.data() + t * a_step;
        const double* B = bi->v.data() + t * b_step;
        const double* G = out->g.data() + t * o_step;
        if (na) {
          double* dA = ai->g.data() + t * a_step;
          for (int i = 0; i < M; ++i) {
            for (int j = 0; j < N; ++j) {
              const double gv = G[i * N + j];
              const double* brow = B + j;
              double* darow = dA + i * K;
              for (int k = 0; k < K; ++k) darow[k] += gv * brow[static_cast<std::int64_t>(k) * N];
            }
          }
        }
        if (nb) {
          double* dB = bi->g.data() + t * b_step;
          for (int i = 0; i < M; ++i) {
            for (int k = 0; k < K; ++k) {
              const double av = A[i * K + k];
              const double* grow = G + i * N;
              double* dbrow = dB + k * N;
              for (int j = 0; j < N; ++j) dbrow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return TA::make(out);
}

// ---- convolution ----

Tensor conv2d_rect(const Tensor& x, const Tensor& w, int stride_h, int stride_w, int pad_h,
                   int pad_w, int groups) {
  const auto& xi = TA::impl(x);
  const auto& wi = TA::impl(w);
  if (xi->shape.size() != 4 || wi->shape.size() != 4) {
    throw std::invalid_argument("conv2d: expected 4-d input and weight, got " + shape_str(xi->shape) +
                                " and " + shape_str(wi->shape));
  }
  if (stride_h < 1 || stride_w < 1 || pad_h < 0 || pad_w < 0 || groups < 1) {
    throw std::invalid_argument("conv2d: invalid stride/padding/groups");
  }
  const int B = xi->shape[0], Cin = xi->shape[1], H = xi->shape[2], W = xi->shape[3];
  const int Cout = wi->shape[0], Cw = wi->shape[1], kh = wi->shape[2], kw = wi->shape[3];
  if (Cin % groups != 0 || Cout % groups != 0) {
    throw std::invalid_argument("conv2d: channels not divisible by groups (Cin=" + std::to_string(Cin) +
                                ", Cout=" + std::to_string(Cout) + ", g=" + std::to_string(groups) + ")");
  }
  if (Cw != Cin / groups) {
    throw std::invalid_argument("conv2d: weight shape " + shape_str(wi->shape) +
                                " inconsistent with Cin/g=" + std::to_string(Cin / groups));
  }
  const int Ho = (H + 2 * pad_h - kh) / stride_h + 1;
  const int Wo = (W + 2 * pad_w - kw) / stride_w + 1;
  if (H + 2 * pad_h < kh || W + 2 * pad_w < kw) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  auto out = alloc({B, Cout, Ho, Wo});
  const int gc_out = Cout / groups;
  const int gc_in = Cin / groups;
  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Cout; ++oc) {
      const int gi = oc / gc_out;
      for (int oh = 0; oh < Ho; ++oh) {
        const int ih0 = oh * stride_h - pad_h;
        for (int ow = 0; ow < Wo; ++ow) {
          const int iw0 = ow * stride_w - pad_w;
          double acc = 0.0;
          for (int icl = 0; icl < gc_in; ++icl) {
            const int ic = gi * gc_in + icl;
            const double* xp = xi->v.data() + ((static_cast<std::int64_t>(b) * Cin + ic) * H) * W;
            const double* wp = wi->v.data() + ((static_cast<std::int64_t>(oc) * gc_in + icl) * kh) * kw;
            for (int u = 0; u < kh; ++u) {
              const int ih = ih0 + u;
              if (ih < 0 || ih >= H) continue;
              for (int v = 0; v < kw; ++v) {
                const int iw = iw0 + v;
                if (iw < 0 || iw >= W) continue;
                acc += xp[static_cast<std::int64_t>(ih) * W + iw] * wp[u * kw + v];
              }
            }
          }
          out->v[((static_cast<std::int64_t>(b) * Cout + oc) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }
  mac_add(static_cast<std::int64_t>(B) * Cout * Ho * Wo * gc_in * kh * kw);
  check_finite(out->v, "conv2d");
  Rec rec{xi, wi};
  if (rec.active()) {
    bool nx = needs_grad(xi, rec.tid), nw = needs_grad(wi, rec.tid);
    const int sh = stride_h, sw = stride_w, ph = pad_h, pw = pad_w;
    rec.attach(out, [xi, wi, out, B, Cin, H, W, Cout, Ho, Wo, kh, kw, gc_in, gc_out, sh, sw, ph, pw,
                     nx, nw]() {
      if (out->g.empty()) return;
      if (nx) ensure_grad(*xi);
      if (nw) ensure_grad(*wi);
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < Cout; ++oc) {
          const int gi = oc / gc_out;
          for (int oh = 0; oh < Ho; ++oh) {
            const int ih0 = oh * sh - ph;
            for (int ow = 0; ow < Wo; ++ow) {
              const int iw0 = ow * sw - pw;
              const double gv = out->g[((static_cast<std::int64_t>(b) * Cout + oc) * Ho + oh) * Wo + ow];
              if (gv == 0.0) continue;
              for (int icl = 0; icl < gc_in; ++icl) {
                const int ic = gi * gc_in + icl;
                const std::int64_t xbase = ((static_cast<std::int64_t>(b) * Cin + ic) * H) * W;
                const std::int64_t wbase = ((static_cast<std::int64_t>(oc) * gc_in + icl) * kh) * kw;
                for (int u = 0; u < kh; ++u) {
                  const int ih = ih0 + u;
                  if (ih < 0 || ih >= H) continue;
                  for (int v = 0; v < kw; ++v) {
                    const int iw = iw0 + v;
                    if (iw < 0 || iw >= W) continue;
                    if (nx) xi->g[xbase + static_cast<std::int64_t>(ih) * W + iw] += gv * wi->v[wbase + u * kw + v];
                    if (nw) wi->g[wbase + u * kw + v] += gv * xi->v[xbase + static_cast<std::int64_t>(ih) * W + iw];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return TA::make(out);
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding, int groups) {
  return conv2d_rect(x, w, stride, stride, padding, padding, groups);
}

Tensor conv1d(const Tensor& x, const Tensor& w, int stride, int padding) {
  const auto& xs = TA::impl(x)->shape;
  const auto& ws = TA::impl(w)->shape;
  if (xs.size() != 3 || ws.size() != 3) {
    throw std::invalid_argument("conv1d: expected 3-d input and weight, got " + shape_str(xs) + " and " +
                                shape_str(ws));
  }
  Tensor x4 = reshape(x, {xs[0], xs[1], 1, xs[2]});
  Tensor w4 = reshape(w, {ws[0], ws[1], 1, ws[2]});
  Tensor y4 = conv2d_rect(x4, w4, 1, stride, 0, padding, 1);
  const auto& ys = y4.shape();
  return reshape(y4, {ys[0], ys[1], ys[3]});
}

// ---- softmax family ----

namespace {

struct AxisView {
  std::int64_t outer, len, inner;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[axis], 1};
  for (int k = 0; k < axis; ++k) v.outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) v.inner *= s[k];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const auto& xi = TA::impl(x);
  axis = normalize_axis(axis, static_cast<int>(xi->shape.size()), "softmax");
  auto out = alloc(xi->shape);
  const AxisView av = axis_view(xi->shape, axis);
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t in = 0; in < av.inner; ++in) {
      const std::int64_t base = o * av.len * av.inner + in;
      double mx = xi->v[base];
      for (std::int64_t k = 1; k < av.len; ++k) mx = std::max(mx, xi->v[base + k * av.inner]);
      double sum = 0.0;
      for (std::int64_t k = 0; k < av.len; ++k) {
        double e = std::exp(xi->v[base + k * av.inner] - mx);
        out->v[base + k * av.inner] = e;
        sum += e;
      }
      for (std::int64_t k = 0; k < av.len; ++k) out->v[base + k * av.inner] /= sum;
    }
  }
  check_finite(out->v, "softmax");
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, av]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        for (std::int64_t in = 0; in < av.inner; ++in) {
          const std::int64_t base = o * av.len * av.inner + in;
          double dot = 0.0;
          for (std::int64_t k = 0; k < av.len; ++k) {
            dot += out->g[base + k * av.inner] * out->v[base + k * av.inner];
          }
          for (std::int64_t k = 0; k < av.len; ++k) {
            const std::int64_t idx = base + k * av.inner;
            xi->g[idx] += out->v[idx] * (out->g[idx] - dot);
          }
        }
      }
    });
  }
  return TA::make(out);
}

Tensor log_softmax(const Tensor& x, int axis) {
  const auto& xi = TA::impl(x);
  axis = normalize_axis(axis, static_cast<int>(xi->shape.size()), "log_softmax");
  auto out = alloc(xi->shape);
  const AxisView av = axis_view(xi->shape, axis);
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t in = 0; in < av.inner; ++in) {
      const std::int64_t base = o * av.len * av.inner + in;
      double mx = xi->v[base];
      for (std::int64_t k = 1; k < av.len; ++k) mx = std::max(mx, xi->v[base + k * av.inner]);
      double sum = 0.0;
      for (std::int64_t k = 0; k < av.len; ++k) sum += std::exp(xi->v[base + k * av.inner] - mx);
      const double lse = mx + std::log(sum);
      for (std::int64_t k = 0; k < av.len; ++k) {
        out->v[base + k * av.inner] = xi->v[base + k * av.inner] - lse;
      }
    }
  }
  check_finite(out->v, "log_softmax");
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, av]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        for (std::int64_t in = 0; in < av.inner; ++in) {
          const std::int64_t base = o * av.len * av.inner + in;
          double gsum = 0.0;
          for (std::int64_t k = 0; k < av.len; ++k) gsum += out->g[base + k * av.inner];
          for (std::int64_t k = 0; k < av.len; ++k) {
            const std::int64_t idx = base + k * av.inner;
            xi->g[idx] += out->g[idx] - std::exp(out->v[idx]) * gsum;
          }
        }
      }
    });
  }
  return TA::make(out);
}

// ---- normalization ----

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double eps, double momentum) {
  const auto& xi = TA::impl(x);
  if (xi->shape.size() != 4) {
    throw std::invalid_argument("batch_norm: expected 4-d input, got " + shape_str(xi->shape));
  }
  const int B = xi->shape[0], C = xi->shape[1], H = xi->shape[2], W = xi->shape[3];
  const auto& gi = TA::impl(gamma);
  const auto& bi = TA::impl(beta);
  if (gi->shape != Shape{C} || bi->shape != Shape{C}) {
    throw std::invalid_argument("batch_norm: gamma/beta must have shape [C]");
  }
  const std::int64_t n = static_cast<std::int64_t>(B) * H * W;
  if (training && n < 2) {
    throw std::invalid_argument("batch_norm: fewer than 2 elements per channel");
  }
  auto& rm = TA::impl(running_mean)->v;
  auto& rv = TA::impl(running_var)->v;
  if (rm.size() != static_cast<std::size_t>(C) || rv.size() != static_cast<std::size_t>(C)) {
    throw std::invalid_argument("batch_norm: running stats must have shape [C]");
  }

  std::vector<double> mean(C, 0.0), var(C, 0.0);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xi->v.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[c] = s / static_cast<double>(n);
      double sv = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = xi->v.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean[c];
          sv += d * d;
        }
      }
      var[c] = sv / static_cast<double>(n);
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c];
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = rm[c];
      var[c] = rv[c];
    }
  }

  auto out = alloc(xi->shape);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + eps);
      const double g = gi->v[c], be = bi->v[c], m = mean[c];
      const double* p = xi->v.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      double* q = out->v.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = (p[i] - m) * inv * g + be;
    }
  }
  check_finite(out->v, "batch_norm");
  Rec rec{xi, gi, bi};
  if (rec.active()) {
    bool nx = needs_grad(xi, rec.tid), ng = needs_grad(gi, rec.tid), nb = needs_grad(bi, rec.tid);
    rec.attach(out, [xi, gi, bi, out, mean, var, eps, B, C, plane, n, training, nx, ng, nb]() {
      if (out->g.empty()) return;
      if (nx) ensure_grad(*xi);
      if (ng) ensure_grad(*gi);
      if (nb) ensure_grad(*bi);
      for (int c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + eps);
        const double m = mean[c], g = gi->v[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int b = 0; b < B; ++b) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double dy = out->g[base + i];
            sum_dy += dy;
            sum_dy_xhat += dy * (xi->v[base + i] - m) * inv;
          }
        }
        if (ng) gi->g[c] += sum_dy_xhat;
        if (nb) bi->g[c] += sum_dy;
        if (nx) {
          const double dn = static_cast<double>(n);
          for (int b = 0; b < B; ++b) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              const double dy = out->g[base + i];
              if (training) {
                const double xhat = (xi->v[base + i] - m) * inv;
                xi->g[base + i] += g * inv * (dy - sum_dy / dn - xhat * sum_dy_xhat / dn);
              } else {
                xi->g[base + i] += g * inv * dy;
              }
            }
          }
        }
      }
    });
  }
  return TA::make(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto& xi = TA::impl(x);
  if (xi->shape.empty()) throw std::invalid_argument("layer_norm: scalar input");
  const int C = xi->shape.back();
  if (C < 2) throw std::invalid_argument("layer_norm: fewer than 2 elements along the normalized axis");
  const auto& gi = TA::impl(gamma);
  const auto& bi = TA::impl(beta);
  if (gi->shape != Shape{C} || bi->shape != Shape{C}) {
    throw std::invalid_argument("layer_norm: gamma/beta must have shape [C]");
  }
  const std::int64_t rows = static_cast<std::int64_t>(xi->v.size()) / C;
  auto out = alloc(xi->shape);
  std::vector<double> mean(rows), inv(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* p = xi->v.data() + r * C;
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += p[c];
    const double m = s / C;
    double sv = 0.0;
    for (int c = 0; c < C; ++c) {
      const double d = p[c] - m;
      sv += d * d;
    }
    mean[r] = m;
    inv[r] = 1.0 / std::sqrt(sv / C + eps);
    double* q = out->v.data() + r * C;
    for (int c = 0; c < C; ++c) q[c] = (p[c] - m) * inv[r] * gi->v[c] + bi->v[c];
  }
  check_finite(out->v, "layer_norm");
  Rec rec{xi, gi, bi};
  if (rec.active()) {
    bool nx = needs_grad(xi, rec.tid), ng = needs_grad(gi, rec.tid), nb = needs_grad(bi, rec.tid);
    rec.attach(out, [xi, gi, bi, out, mean, inv, rows, C, nx, ng, nb]() {
      if (out->g.empty()) return;
      if (nx) ensure_grad(*xi);
      if (ng) ensure_grad(*gi);
      if (nb) ensure_grad(*bi);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = xi->v.data() + r * C;
        const double* dy = out->g.data() + r * C;
        const double m = mean[r], iv = inv[r];
        double sum_dyh = 0.0, sum_dyh_xhat = 0.0;
        for (int c = 0; c < C; ++c) {
          const double xhat = (p[c] - m) * iv;
          const double dyh = dy[c] * gi->v[c];
          sum_dyh += dyh;
          sum_dyh_xhat += dyh * xhat;
          if (ng) gi->g[c] += dy[c] * xhat;
          if (nb) bi->g[c] += dy[c];
        }
        if (nx) {
          double* dx = xi->g.data() + r * C;
          for (int c = 0; c < C; ++c) {
            const double xhat = (p[c] - m) * iv;
            const double dyh = dy[c] * gi->v[c];
            dx[c] += iv * (dyh - sum_dyh / C - xhat * sum_dyh_xhat / C);
          }
        }
      }
    });
  }
  return TA::make(out);
}

// ---- reductions / pooling ----

Tensor sum_all(const Tensor& x) {
  const auto& xi = TA::impl(x);
  double s = 0.0;
  for (double v : xi->v) s += v;
  auto out = alloc({1});
  out->v[0] = s;
  check_finite(out->v, "sum_all");
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      const double g = out->g[0];
      for (double& d : xi->g) d += g;
    });
  }
  return TA::make(out);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

Tensor global_avg_pool(const Tensor& x) {
  const auto& xi = TA::impl(x);
  if (xi->shape.size() != 4) {
    throw std::invalid_argument("global_avg_pool: expected 4-d input, got " + shape_str(xi->shape));
  }
  const int B = xi->shape[0], C = xi->shape[1];
  const std::int64_t plane = static_cast<std::int64_t>(xi->shape[2]) * xi->shape[3];
  auto out = alloc({B, C});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* p = xi->v.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      double s = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      out->v[static_cast<std::int64_t>(b) * C + c] = s / static_cast<double>(plane);
    }
  }
  check_finite(out->v, "global_avg_pool");
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, B, C, plane]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const double g = out->g[static_cast<std::int64_t>(b) * C + c] / static_cast<double>(plane);
          double* p = xi->g.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) p[i] += g;
        }
      }
    });
  }
  return TA::make(out);
}

Tensor avg_pool2d(const Tensor& x, int kernel_h, int kernel_w, int stride_h, int stride_w) {
  const auto& xi = TA::impl(x);
  if (xi->shape.size() != 4) {
    throw std::invalid_argument("avg_pool2d: expected 4-d input, got " + shape_str(xi->shape));
  }
  if (kernel_h < 1 || kernel_w < 1 || stride_h < 1 || stride_w < 1) {
    throw std::invalid_argument("avg_pool2d: invalid kernel/stride");
  }
  const int B = xi->shape[0], C = xi->shape[1], H = xi->shape[2], W = xi->shape[3];
  if (H < kernel_h || W < kernel_w) throw std::invalid_argument("avg_pool2d: kernel larger than input");
  const int Ho = (H - kernel_h) / stride_h + 1;
  const int Wo = (W - kernel_w) / stride_w + 1;
  auto out = alloc({B, C, Ho, Wo});
  const double inv = 1.0 / (static_cast<double>(kernel_h) * kernel_w);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* p = xi->v.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
      double* q = out->v.data() + (static_cast<std::int64_t>(b) * C + c) * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          double s = 0.0;
          for (int u = 0; u < kernel_h; ++u) {
            for (int v = 0; v < kernel_w; ++v) {
              s += p[static_cast<std::int64_t>(oh * stride_h + u) * W + ow * stride_w + v];
            }
          }
          q[static_cast<std::int64_t>(oh) * Wo + ow] = s * inv;
        }
      }
    }
  }
  check_finite(out->v, "avg_pool2d");
  Rec rec{xi};
  if (rec.active()) {
    rec.attach(out, [xi, out, B, C, H, W, Ho, Wo, kernel_h, kernel_w, stride_h, stride_w, inv]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          double* p = xi->g.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
          const double* q = out->g.data() + (static_cast<std::int64_t>(b) * C + c) * Ho * Wo;
          for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
              const double g = q[static_cast<std::int64_t>(oh) * Wo + ow] * inv;
              for (int u = 0; u < kernel_h; ++u) {
                for (int v = 0; v < kernel_w; ++v) {
                  p[static_cast<std::int64_t>(oh * stride_h + u) * W + ow * stride_w + v] += g;
                }
              }
            }
          }
        }
      }
    });
  }
  return TA::make(out);
}

Tensor gather_last(const Tensor& x, const std::vector<int>& indices) {
  const auto& xi = TA::impl(x);
  if (xi->shape.empty()) throw std::invalid_argument("gather_last: scalar input");
  const int A = xi->shape.back();
  const std::int64_t lead = static_cast<std::int64_t>(xi->v.size()) / A;
  if (static_cast<std::int64_t>(indices.size()) != lead) {
    throw std::invalid_argument("gather_last: expected " + std::to_string(lead) + " indices, got " +
                                std::to_string(indices.size()));
  }
  Shape oshape(xi->shape.begin(), xi->shape.end() - 1);
  if (oshape.empty()) oshape = {1};
  auto out = alloc(oshape);
  for (std::int64_t r = 0; r < lead; ++r) {
    const int a = indices[r];
    if (a < 0 || a >= A) throw std::invalid_argument("gather_last: index out of range");
    out->v[r] = xi->v[r * A + a];
  }
  Rec rec{xi};
  if (rec.active()) {
    const std::vector<int> idx = indices;
    rec.attach(out, [xi, out, idx, lead, A]() {
      if (out->g.empty()) return;
      ensure_grad(*xi);
      for (std::int64_t r = 0; r < lead; ++r) xi->g[r * A + idx[r]] += out->g[r];
    });
  }
  return TA::make(out);
}

// ---- losses ----

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2) {
    throw std::invalid_argument("softmax_cross_entropy: expected [B,C] logits, got " + shape_str(logits.shape()));
  }
  const int B = logits.shape()[0];
  Tensor lsm = log_softmax(logits, 1);
  Tensor picked = gather_last(lsm, labels);
  return scale(sum_all(picked), -1.0 / static_cast<double>(B));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("kd_loss: tau must be positive");
  if (student_logits.shape() != teacher_logits.shape()) {
    throw std::invalid_argument("kd_loss: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                                shape_str(teacher_logits.shape()));
  }
  if (student_logits.dim() != 2) {
    throw std::invalid_argument("kd_loss: expected [B,C] logits, got " + shape_str(student_logits.shape()));
  }
  const int B = student_logits.shape()[0];
  Tensor log_ps = log_softmax(scale(student_logits, 1.0 / tau), 1);
  Tensor pt = softmax(scale(teacher_logits, 1.0 / tau), 1);
  Tensor ce = scale(sum_all(mul(pt, log_ps)), -1.0);
  return scale(ce, tau * tau / static_cast<double>(B));
}

}  // namespace uninas
