#pragma once

#include <array>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "common.hpp"

// Reverse-mode autodiff over dense real tensors. Ops record onto a
// thread-local tape (one tape per training step); backward replays adjoints
// in reverse execution order and accumulates into requires_grad leaves.
// Feature maps use (H, W, C) layout, matrices (rows, cols).

namespace tpd::ad {

enum class Scalar : uint8_t { F32 = 0, F64 = 1 };

Scalar default_scalar();
void set_default_scalar(Scalar s);

using Shape = std::vector<int64_t>;
int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Storage {
  Scalar dt = Scalar::F32;
  std::vector<float> f32;
  std::vector<double> f64;

  Storage() = default;
  explicit Storage(Scalar t) : dt(t) {}
  size_t size() const { return dt == Scalar::F32 ? f32.size() : f64.size(); }
  void resize(size_t n, double v = 0.0) {
    if (dt == Scalar::F32) f32.assign(n, float(v));
    else f64.assign(n, v);
  }
  double get(size_t i) const { return dt == Scalar::F32 ? double(f32[i]) : f64[i]; }
  void set(size_t i, double v) {
    if (dt == Scalar::F32) f32[i] = float(v);
    else f64[i] = v;
  }
  void fill(double v) {
    if (dt == Scalar::F32) std::fill(f32.begin(), f32.end(), float(v));
    else std::fill(f64.begin(), f64.end(), v);
  }
};

struct Payload {
  Shape shape;
  Storage value;
  std::unique_ptr<Storage> grad;  // leaf accumulator, filled by backward
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s) { return zeros(s, default_scalar()); }
  static Tensor zeros(const Shape& s, Scalar dt);
  static Tensor full(const Shape& s, double v) { return full(s, v, default_scalar()); }
  static Tensor full(const Shape& s, double v, Scalar dt);
  static Tensor from_vector(const Shape& s, const std::vector<double>& v) {
    return from_vector(s, v, default_scalar());
  }
  static Tensor from_vector(const Shape& s, const std::vector<double>& v, Scalar dt);
  static Tensor randn(const Shape& s, Rng& rng) { return randn(s, rng, default_scalar()); }
  static Tensor randn(const Shape& s, Rng& rng, Scalar dt);

  bool defined() const { return bool(p_); }
  const Shape& shape() const { return p_->shape; }
  int ndim() const { return int(p_->shape.size()); }
  int64_t dim(int i) const { return p_->shape[size_t(i)]; }
  int64_t numel() const { return shape_numel(p_->shape); }
  Scalar dtype() const { return p_->value.dt; }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    p_->requires_grad = b;
    return *this;
  }

  double item() const;
  double at(int64_t i) const { return p_->value.get(size_t(i)); }
  void set(int64_t i, double v) { p_->value.set(size_t(i), v); }
  std::vector<double> to_vector() const;

  // Leaf gradient accumulated by backward; empty tensor if absent.
  Tensor grad() const;
  void zero_grad();

  // Deep copy with requires_grad cleared (graph-free constant).
  Tensor detach() const;
  Tensor clone() const;
  // Lossless when widening f32 -> f64.
  Tensor astype(Scalar dt) const;

  Payload* payload() const { return p_.get(); }
  std::shared_ptr<Payload> p_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  void clear();

  struct Record {
    const char* name;
    std::function<void(Tape&)> back;
    std::vector<std::shared_ptr<Payload>> inputs;
    std::shared_ptr<Payload> output;
  };
  std::vector<Record> records;
  std::unordered_set<Payload*> produced;
  std::unordered_map<Payload*, Storage> adjoints;
  std::vector<Payload*> touched;

  Storage* adjoint_of(Payload* p);
  Storage& adjoint_accum(Payload* p);

 private:
  Tape* prev_ = nullptr;
};

// Accumulates dloss/dleaf on every requires_grad leaf of the active tape,
// then clears the tape. Non-leaf adjoints are discarded.
void backward(const Tensor& loss);

// As backward, but deposits leaf gradients into the sink instead of the
// payloads. Lets independent per-item graphs run on worker threads and merge
// in a fixed order afterwards.
using GradSink = std::unordered_map<Payload*, Storage>;
void backward_into(const Tensor& loss, GradSink& sink);

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;
};

// Compares backward grads of a scalar-valued f against central finite
// differences at the given points (which are marked requires_grad).
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> points, double step, double tol);

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// out = op(a) * op(b), 2-D only; ta/tb transpose the respective operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// x: (H, W, Cin), kernel: (KH, KW, Cin, Cout), bias: (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);
Tensor upsample2x(const Tensor& x);

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdim);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdim);
// Max over axes; gradient routes to the first maximal element per cell.
Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdim);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Broadcast along one axis whose extent is 1.
Tensor expand(const Tensor& x, int axis, int64_t n);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t from, int64_t to);
Tensor reshape(const Tensor& x, const Shape& s);

Tensor lrelu(const Tensor& x, double alpha);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor square(const Tensor& x);
Tensor rsqrt(const Tensor& x, double eps);

// Row-wise stable softmax over the last axis.
Tensor softmax_rows(const Tensor& x);

// q: (Nq, D), k/v: (Nk, D); rows of softmax(q k^T scale) sum to 1.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

// plane: (H, W, C); uv: (N, 2) with uv[:,0] the row coord and uv[:,1] the col
// coord, both in [-1, 1] (align-corners grid; out-of-range clamps to border).
Tensor bilinear_sample(const Tensor& plane, const Tensor& uv);

// v + beta * tanh(gamma) * a (use_gate), or v + beta * a. beta/gamma are
// 1-element tensors. When the effective scale is exactly 0 the forward output
// is a verbatim copy of v; gradients still flow through beta and gamma.
Tensor gated_residual(const Tensor& v, const Tensor& a, const Tensor& beta, const Tensor& gamma,
                      bool use_gate);

// Emission-absorption compositing. sigma: (R, S) nonneg, rgb: (R, S, 3),
// deltas: per-sample segment lengths (R*S, > 0), bg: background color.
// Returns (R, 4): composited rgb plus final transmittance per ray.
Tensor composite(const Tensor& sigma, const Tensor& rgb, const std::vector<double>& deltas,
                 const std::array<double, 3>& bg);

// sum(a * b) as a scalar; used to inject custom adjoints (the SDS gradient):
// d/da inner(a, const g) == g.
Tensor inner(const Tensor& a, const Tensor& b);

}  // namespace tpd::ad
