#include "tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <sstream>

namespace tpd::ad {

namespace {
std::atomic<Scalar> g_default_scalar{Scalar::F32};
thread_local Tape* g_tape = nullptr;

struct TapeSuspend {
  Tape* saved;
  TapeSuspend() : saved(g_tape) { g_tape = nullptr; }
  ~TapeSuspend() { g_tape = saved; }
};

template <class T>
T* data(Storage& s);
template <>
float* data<float>(Storage& s) {
  return s.f32.data();
}
template <>
double* data<double>(Storage& s) {
  return s.f64.data();
}
template <class T>
const T* cdata(const Storage& s);
template <>
const float* cdata<float>(const Storage& s) {
  return s.f32.data();
}
template <>
const double* cdata<double>(const Storage& s) {
  return s.f64.data();
}

#define TPD_DISPATCH(DT, ...)    \
  do {                           \
    if ((DT) == Scalar::F32) {   \
      using T = float;           \
      __VA_ARGS__                \
    } else {                     \
      using T = double;          \
      __VA_ARGS__                \
    }                            \
  } while (0)

void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

Tensor make_out(Shape s, Scalar dt, bool rg) {
  Tensor t = Tensor::zeros(s, dt);
  t.p_->requires_grad = rg;
  return t;
}

bool tracked(const Tensor& t) { return t.requires_grad(); }

void record(const char* name, std::initializer_list<Tensor> ins, const Tensor& out,
            std::function<void(Tape&)> back) {
  Tape* t = Tape::current();
  if (!t || !out.requires_grad()) return;
  Tape::Record r;
  r.name = name;
  r.back = std::move(back);
  r.output = out.p_;
  for (const auto& i : ins) r.inputs.push_back(i.p_);
  t->produced.insert(out.p_.get());
  t->records.push_back(std::move(r));
}

void check_dtype_match(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mismatch");
}

// Promote an f32/f64 pair to f64 (used by grad_check's high-precision
// finite-difference path, where mixed pipelines are expected).
void promote_pair(Tensor& a, Tensor& b) {
  if (a.dtype() == b.dtype()) return;
  if (a.dtype() == Scalar::F32) a = a.astype(Scalar::F64);
  else b = b.astype(Scalar::F64);
}

struct Idx {
  // row-major strides for arbitrary rank
  static std::vector<int64_t> strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = int(s.size()) - 1; i >= 0; --i) {
      st[size_t(i)] = acc;
      acc *= s[size_t(i)];
    }
    return st;
  }
};

}  // namespace

Scalar default_scalar() { return g_default_scalar.load(); }
void set_default_scalar(Scalar s) { g_default_scalar.store(s); }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw ContractError("shape dims must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, Scalar dt) {
  Tensor t;
  t.p_ = std::make_shared<Payload>();
  t.p_->shape = s;
  t.p_->value.dt = dt;
  t.p_->value.resize(size_t(shape_numel(s)), 0.0);
  return t;
}

Tensor Tensor::full(const Shape& s, double v, Scalar dt) {
  Tensor t = zeros(s, dt);
  t.p_->value.fill(v);
  return t;
}

Tensor Tensor::from_vector(const Shape& s, const std::vector<double>& v, Scalar dt) {
  if (int64_t(v.size()) != shape_numel(s))
    throw ContractError("from_vector: size mismatch for shape " + shape_str(s));
  Tensor t = zeros(s, dt);
  for (size_t i = 0; i < v.size(); ++i) t.p_->value.set(i, v[i]);
  return t;
}

Tensor Tensor::randn(const Shape& s, Rng& rng, Scalar dt) {
  Tensor t = zeros(s, dt);
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.p_->value.set(size_t(i), rng.gaussian());
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
  return p_->value.get(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> v(static_cast<size_t>(numel()));
  for (size_t i = 0; i < v.size(); ++i) v[i] = p_->value.get(i);
  return v;
}

Tensor Tensor::grad() const {
  if (!p_->grad) return Tensor();
  Tensor g = Tensor::zeros(shape(), dtype());
  g.p_->value = *p_->grad;
  return g;
}

void Tensor::zero_grad() { p_->grad.reset(); }

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.p_->requires_grad = false;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.p_ = std::make_shared<Payload>();
  t.p_->shape = p_->shape;
  t.p_->value = p_->value;
  t.p_->requires_grad = p_->requires_grad;
  return t;
}

Tensor Tensor::astype(Scalar dt) const {
  if (dt == dtype()) return clone().set_requires_grad(requires_grad());
  Tensor out = make_out(shape(), dt, requires_grad());
  int64_t n = numel();
  for (int64_t i = 0; i < n; ++i) out.p_->value.set(size_t(i), p_->value.get(size_t(i)));
  Tensor self = *this;
  record("astype", {self}, out, [pin = p_, pout = out.p_](Tape& t) {
    const Storage& dout = *t.adjoint_of(pout.get());
    if (!pin->requires_grad) return;
    Storage& din = t.adjoint_accum(pin.get());
    size_t n = dout.size();
    for (size_t i = 0; i < n; ++i) din.set(i, din.get(i) + dout.get(i));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Tape / backward
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(g_tape) { g_tape = this; }
Tape::~Tape() { g_tape = prev_; }
Tape* Tape::current() { return g_tape; }

void Tape::clear() {
  records.clear();
  produced.clear();
  adjoints.clear();
  touched.clear();
}

Storage* Tape::adjoint_of(Payload* p) {
  auto it = adjoints.find(p);
  return it == adjoints.end() ? nullptr : &it->second;
}

Storage& Tape::adjoint_accum(Payload* p) {
  auto it = adjoints.find(p);
  if (it == adjoints.end()) {
    Storage s(p->value.dt);
    s.resize(p->value.size(), 0.0);
    it = adjoints.emplace(p, std::move(s)).first;
  }
  touched.push_back(p);
  return it->second;
}

namespace {
void check_finite_storage(const Storage& s, const char* op) {
  size_t n = s.size();
  if (s.dt == Scalar::F32) {
    for (size_t i = 0; i < n; ++i)
      if (!std::isfinite(s.f32[i]))
        throw NumericError(std::string("backward: non-finite adjoint produced by op '") + op + "'");
  } else {
    for (size_t i = 0; i < n; ++i)
      if (!std::isfinite(s.f64[i]))
        throw NumericError(std::string("backward: non-finite adjoint produced by op '") + op + "'");
  }
}
}  // namespace

namespace {

void backward_impl(const Tensor& loss, GradSink* sink) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  Tape* t = Tape::current();
  auto deposit_to = [&](Payload* p, const Storage& a) {
    if (sink) {
      auto it = sink->find(p);
      if (it == sink->end()) {
        Storage s(p->value.dt);
        s.resize(p->value.size(), 0.0);
        it = sink->emplace(p, std::move(s)).first;
      }
      for (size_t i = 0; i < a.size(); ++i) it->second.set(i, it->second.get(i) + a.get(i));
    } else {
      if (!p->grad) {
        p->grad = std::make_unique<Storage>(p->value.dt);
        p->grad->resize(p->value.size(), 0.0);
      }
      for (size_t i = 0; i < a.size(); ++i) p->grad->set(i, p->grad->get(i) + a.get(i));
    }
  };
  if (!t) {
    if (!loss.requires_grad()) throw ContractError("backward: no recorded graph");
    Storage g(loss.dtype());
    g.resize(1, 1.0);
    deposit_to(loss.payload(), g);
    return;
  }
  t->adjoints.clear();
  {
    Storage seed(loss.dtype());
    seed.resize(size_t(loss.numel()), 1.0);
    t->adjoints.emplace(loss.payload(), std::move(seed));
  }
  for (auto it = t->records.rbegin(); it != t->records.rend(); ++it) {
    if (!t->adjoint_of(it->output.get())) continue;
    t->touched.clear();
    it->back(*t);
    for (Payload* p : t->touched) check_finite_storage(t->adjoints.at(p), it->name);
  }
  // accumulate into leaves: inputs with requires_grad never produced on this tape
  std::unordered_set<Payload*> done;
  auto deposit = [&](const std::shared_ptr<Payload>& p) {
    if (!p->requires_grad || t->produced.count(p.get()) || done.count(p.get())) return;
    done.insert(p.get());
    Storage* a = t->adjoint_of(p.get());
    if (!a) return;
    deposit_to(p.get(), *a);
  };
  for (const auto& r : t->records)
    for (const auto& in : r.inputs) deposit(in);
  deposit(loss.p_);
  t->clear();
}

}  // namespace

void backward(const Tensor& loss) { backward_impl(loss, nullptr); }
void backward_into(const Tensor& loss, GradSink& sink) { backward_impl(loss, &sink); }

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace {

template <class T, class F>
void map2(const T* a, const T* b, T* o, int64_t n, F f) {
  for (int64_t i = 0; i < n; ++i) o[i] = T(f(double(a[i]), double(b[i])));
}

template <class T, class F>
void map1(const T* a, T* o, int64_t n, F f) {
  for (int64_t i = 0; i < n; ++i) o[i] = T(f(double(a[i])));
}

// dst += s * src
template <class T>
void axpy(T* dst, const T* src, int64_t n, double s) {
  for (int64_t i = 0; i < n; ++i) dst[i] = T(double(dst[i]) + s * double(src[i]));
}

Tensor binary_ew(const char* name, const Tensor& a0, const Tensor& b0,
                 double (*fwd)(double, double), double (*dfa)(double, double),
                 double (*dfb)(double, double)) {
  Tensor a = a0, b = b0;
  promote_pair(a, b);
  if (a.shape() != b.shape())
    throw ContractError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  Tensor out = make_out(a.shape(), a.dtype(), tracked(a) || tracked(b));
  int64_t n = a.numel();
  TPD_DISPATCH(a.dtype(), {
    map2(cdata<T>(a.p_->value), cdata<T>(b.p_->value), data<T>(out.p_->value), n, fwd);
  });
  record(name, {a, b}, out, [pa = a.p_, pb = b.p_, po = out.p_, dfa, dfb](Tape& t) {
    const Storage& dout = *t.adjoint_of(po.get());
    int64_t n = int64_t(dout.size());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* av = cdata<T>(pa->value);
      const T* bv = cdata<T>(pb->value);
      if (pa->requires_grad) {
        T* ga = data<T>(t.adjoint_accum(pa.get()));
        for (int64_t i = 0; i < n; ++i)
          ga[i] = T(double(ga[i]) + dfa(double(av[i]), double(bv[i])) * double(d[i]));
      }
      if (pb->requires_grad) {
        T* gb = data<T>(t.adjoint_accum(pb.get()));
        for (int64_t i = 0; i < n; ++i)
          gb[i] = T(double(gb[i]) + dfb(double(av[i]), double(bv[i])) * double(d[i]));
      }
    });
  });
  return out;
}

Tensor unary_ew(const char* name, const Tensor& x, double (*fwd)(double),
                double (*dydx)(double x, double y)) {
  Tensor out = make_out(x.shape(), x.dtype(), tracked(x));
  int64_t n = x.numel();
  TPD_DISPATCH(x.dtype(), { map1(cdata<T>(x.p_->value), data<T>(out.p_->value), n, fwd); });
  record(name, {x}, out, [px = x.p_, po = out.p_, dydx](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    int64_t n = int64_t(dout.size());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* xv = cdata<T>(px->value);
      const T* yv = cdata<T>(po->value);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t i = 0; i < n; ++i)
        g[i] = T(double(g[i]) + dydx(double(xv[i]), double(yv[i])) * double(d[i]));
    });
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = make_out(a.shape(), a.dtype(), tracked(a));
  int64_t n = a.numel();
  TPD_DISPATCH(a.dtype(), {
    const T* av = cdata<T>(a.p_->value);
    T* o = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) o[i] = T(double(av[i]) + c);
  });
  record("add_scalar", {a}, out, [pa = a.p_, po = out.p_](Tape& t) {
    if (!pa->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      axpy(data<T>(t.adjoint_accum(pa.get())), cdata<T>(dout), int64_t(dout.size()), 1.0);
    });
  });
  return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out = make_out(a.shape(), a.dtype(), tracked(a));
  int64_t n = a.numel();
  TPD_DISPATCH(a.dtype(), {
    const T* av = cdata<T>(a.p_->value);
    T* o = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) o[i] = T(double(av[i]) * c);
  });
  record("mul_scalar", {a}, out, [pa = a.p_, po = out.p_, c](Tape& t) {
    if (!pa->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      axpy(data<T>(t.adjoint_accum(pa.get())), cdata<T>(dout), int64_t(dout.size()), c);
    });
  });
  return out;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C (+)= A(M,K) * B(K,N), row-major, fixed ikj order
template <class T>
void gemm(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N, bool accumulate) {
  parallel_for(M, 16, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* crow = C + i * N;
      if (!accumulate)
        for (int64_t j = 0; j < N; ++j) crow[j] = T(0);
      const T* arow = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        T a = arow[k];
        const T* brow = B + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

template <class T>
std::vector<T> transpose_copy(const T* src, int64_t rows, int64_t cols) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[size_t(c * rows + r)] = src[r * cols + c];
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a0, const Tensor& b0, bool ta, bool tb) {
  Tensor a = a0, b = b0;
  promote_pair(a, b);
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
  int64_t M = ta ? a.dim(1) : a.dim(0);
  int64_t K = ta ? a.dim(0) : a.dim(1);
  int64_t Kb = tb ? b.dim(1) : b.dim(0);
  int64_t N = tb ? b.dim(0) : b.dim(1);
  require(K == Kb, "matmul: inner dimension mismatch");
  Tensor out = make_out({M, N}, a.dtype(), tracked(a) || tracked(b));
  TPD_DISPATCH(a.dtype(), {
    const T* ap = cdata<T>(a.p_->value);
    const T* bp = cdata<T>(b.p_->value);
    std::vector<T> at, bt;
    if (ta) {
      at = transpose_copy(ap, a.dim(0), a.dim(1));
      ap = at.data();
    }
    if (tb) {
      bt = transpose_copy(bp, b.dim(0), b.dim(1));
      bp = bt.data();
    }
    gemm(ap, bp, data<T>(out.p_->value), M, K, N, false);
  });
  record("matmul", {a, b}, out,
         [pa = a.p_, pb = b.p_, po = out.p_, ta, tb, M, K, N](Tape& t) {
           const Storage& dout = *t.adjoint_of(po.get());
           TPD_DISPATCH(dout.dt, {
             const T* d = cdata<T>(dout);
             // effective A' (M,K), B' (K,N)
             std::vector<T> aeff, beff;
             const T* ap = cdata<T>(pa->value);
             const T* bp = cdata<T>(pb->value);
             int64_t ar = int64_t(pa->shape[0]), ac = int64_t(pa->shape[1]);
             int64_t br = int64_t(pb->shape[0]), bc = int64_t(pb->shape[1]);
             if (ta) {
               aeff = transpose_copy(ap, ar, ac);
               ap = aeff.data();
             }
             if (tb) {
               beff = transpose_copy(bp, br, bc);
               bp = beff.data();
             }
             if (pa->requires_grad) {
               // dA' = dO * B'^T
               std::vector<T> bt = transpose_copy(bp, K, N);
               std::vector<T> da(static_cast<size_t>(M * K));
               gemm(d, bt.data(), da.data(), M, N, K, false);
               T* g = data<T>(t.adjoint_accum(pa.get()));
               if (!ta) {
                 axpy(g, da.data(), M * K, 1.0);
               } else {
                 for (int64_t i = 0; i < M; ++i)
                   for (int64_t k = 0; k < K; ++k) g[k * M + i] += da[size_t(i * K + k)];
               }
             }
             if (pb->requires_grad) {
               // dB' = A'^T * dO
               std::vector<T> at2 = transpose_copy(ap, M, K);
               std::vector<T> db(static_cast<size_t>(K * N));
               gemm(at2.data(), d, db.data(), K, M, N, false);
               T* g = data<T>(t.adjoint_accum(pb.get()));
               if (!tb) {
                 axpy(g, db.data(), K * N, 1.0);
               } else {
                 for (int64_t k = 0; k < K; ++k)
                   for (int64_t j = 0; j < N; ++j) g[j * K + k] += db[size_t(k * N + j)];
               }
             }
           });
         });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d / upsample
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x0, const Tensor& k0, const Tensor& bias, int stride, int pad) {
  Tensor x = x0, k = k0;
  promote_pair(x, k);
  require(x.ndim() == 3 && k.ndim() == 4, "conv2d: x must be (H,W,Cin), kernel (KH,KW,Cin,Cout)");
  int64_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
  int64_t KH = k.dim(0), KW = k.dim(1);
  require(k.dim(2) == Ci, "conv2d: kernel input channels mismatch");
  int64_t Co = k.dim(3);
  require(stride >= 1, "conv2d: stride must be >= 1");
  int64_t Ho = (H + 2 * pad - KH) / stride + 1;
  int64_t Wo = (W + 2 * pad - KW) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: empty output");
  bool has_bias = bias.defined();
  if (has_bias) {
    check_dtype_match(x, bias, "conv2d");
    require(bias.numel() == Co, "conv2d: bias size mismatch");
  }
  bool rg = tracked(x) || tracked(k) || (has_bias && tracked(bias));
  Tensor out = make_out({Ho, Wo, Co}, x.dtype(), rg);
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    const T* kp = cdata<T>(k.p_->value);
    const T* bp = has_bias ? cdata<T>(bias.p_->value) : nullptr;
    T* op = data<T>(out.p_->value);
    parallel_for(Ho, 4, [&](int64_t y0, int64_t y1) {
      std::vector<T> acc(static_cast<size_t>(Co));
      for (int64_t oy = y0; oy < y1; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          if (bp)
            for (int64_t c = 0; c < Co; ++c) acc[size_t(c)] = bp[c];
          else
            std::fill(acc.begin(), acc.end(), T(0));
          for (int64_t ky = 0; ky < KH; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < KW; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              const T* xr = xp + (iy * W + ix) * Ci;
              const T* kr = kp + ((ky * KW + kx) * Ci) * Co;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                T a = xr[ci];
                const T* kc = kr + ci * Co;
                for (int64_t c = 0; c < Co; ++c) acc[size_t(c)] += a * kc[c];
              }
            }
          }
          T* orow = op + (oy * Wo + ox) * Co;
          for (int64_t c = 0; c < Co; ++c) orow[c] = acc[size_t(c)];
        }
      }
    });
  });
  std::shared_ptr<Payload> pbias = has_bias ? bias.p_ : nullptr;
  auto back = [px = x.p_, pk = k.p_, pbias, po = out.p_, H, W, Ci, KH, KW, Co, Ho, Wo, stride,
               pad](Tape& t) {
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* xp = cdata<T>(px->value);
      const T* kp = cdata<T>(pk->value);
      T* gx = px->requires_grad ? data<T>(t.adjoint_accum(px.get())) : nullptr;
      T* gk = pk->requires_grad ? data<T>(t.adjoint_accum(pk.get())) : nullptr;
      T* gb = (pbias && pbias->requires_grad) ? data<T>(t.adjoint_accum(pbias.get())) : nullptr;
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
          const T* drow = d + (oy * Wo + ox) * Co;
          if (gb)
            for (int64_t c = 0; c < Co; ++c) gb[c] += drow[c];
          for (int64_t ky = 0; ky < KH; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < KW; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              const T* xr = xp + (iy * W + ix) * Ci;
              T* gxr = gx ? gx + (iy * W + ix) * Ci : nullptr;
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const T* kc = kp + (((ky * KW + kx) * Ci) + ci) * Co;
                T* gkc = gk ? gk + (((ky * KW + kx) * Ci) + ci) * Co : nullptr;
                T acc = T(0);
                for (int64_t c = 0; c < Co; ++c) {
                  acc += kc[c] * drow[c];
                  if (gkc) gkc[c] += xr[ci] * drow[c];
                }
                if (gxr) gxr[ci] += acc;
              }
            }
          }
        }
      }
    });
  };
  if (has_bias)
    record("conv2d", {x, k, bias}, out, back);
  else
    record("conv2d", {x, k}, out, back);
  return out;
}

Tensor upsample2x(const Tensor& x) {
  require(x.ndim() == 3, "upsample2x: expects (H,W,C)");
  int64_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  Tensor out = make_out({2 * H, 2 * W, C}, x.dtype(), tracked(x));
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xcol = 0; xcol < W; ++xcol) {
        const T* src = xp + (y * W + xcol) * C;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            T* dst = op + ((2 * y + a) * 2 * W + (2 * xcol + b)) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
          }
      }
  });
  record("upsample2x", {x}, out, [px = x.p_, po = out.p_, H, W, C](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xcol = 0; xcol < W; ++xcol) {
          T* gr = g + (y * W + xcol) * C;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              const T* dr = d + ((2 * y + a) * 2 * W + (2 * xcol + b)) * C;
              for (int64_t c = 0; c < C; ++c) gr[c] += dr[c];
            }
        }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions / shape ops
// ---------------------------------------------------------------------------

namespace {

// For each input linear index, the linear index of the reduced output cell.
std::vector<int64_t> reduction_map(const Shape& in, const std::vector<int>& axes, Shape& out_shape,
                                   bool keepdim) {
  std::vector<bool> red(in.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= int(in.size())) throw ContractError("reduce: axis out of range");
    red[size_t(a)] = true;
  }
  out_shape.clear();
  for (size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(in[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<int64_t> out_strides;
  {
    std::vector<int64_t> kept_dims;
    for (size_t i = 0; i < in.size(); ++i)
      if (!red[i]) kept_dims.push_back(in[i]);
    if (kept_dims.empty()) kept_dims.push_back(1);
    out_strides.assign(in.size(), 0);
    int64_t acc = 1;
    // strides over kept axes, zero on reduced ones
    for (int i = int(in.size()) - 1; i >= 0; --i) {
      if (!red[size_t(i)]) {
        out_strides[size_t(i)] = acc;
        acc *= in[size_t(i)];
      }
    }
  }
  int64_t n = shape_numel(in);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> in_strides = Idx::strides(in);
  for (int64_t lin = 0; lin < n; ++lin) {
    int64_t rem = lin, oidx = 0;
    for (size_t dgt = 0; dgt < in.size(); ++dgt) {
      int64_t c = rem / in_strides[dgt];
      rem %= in_strides[dgt];
      oidx += c * out_strides[dgt];
    }
    map[size_t(lin)] = oidx;
  }
  return map;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  Shape out_shape;
  std::vector<int64_t> map = reduction_map(x.shape(), axes, out_shape, keepdim);
  Tensor out = make_out(out_shape, x.dtype(), tracked(x));
  int64_t n = x.numel();
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) op[map[size_t(i)]] += xp[i];
  });
  record("reduce_sum", {x}, out, [px = x.p_, po = out.p_, map = std::move(map)](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      T* g = data<T>(t.adjoint_accum(px.get()));
      int64_t n = int64_t(map.size());
      for (int64_t i = 0; i < n; ++i) g[i] += d[map[size_t(i)]];
    });
  });
  return out;
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  int64_t cnt = 1;
  for (int a : axes) cnt *= x.dim(a);
  return mul_scalar(reduce_sum(x, axes, keepdim), 1.0 / double(cnt));
}

Tensor reduce_max(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  Shape out_shape;
  std::vector<int64_t> map = reduction_map(x.shape(), axes, out_shape, keepdim);
  Tensor out = make_out(out_shape, x.dtype(), tracked(x));
  int64_t n = x.numel();
  std::vector<int64_t> argmax(size_t(out.numel()), -1);
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) {
      int64_t o = map[size_t(i)];
      if (argmax[size_t(o)] < 0 || double(xp[i]) > double(op[o])) {
        op[o] = xp[i];
        argmax[size_t(o)] = i;
      }
    }
  });
  record("reduce_max", {x}, out, [px = x.p_, po = out.p_, argmax = std::move(argmax)](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (size_t o = 0; o < argmax.size(); ++o)
        if (argmax[o] >= 0) g[argmax[o]] += d[o];
    });
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(size_t(x.ndim()));
  for (int i = 0; i < x.ndim(); ++i) axes[size_t(i)] = i;
  return reduce_sum(x, axes, false);
}

Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0 / double(x.numel())); }

Tensor expand(const Tensor& x, int axis, int64_t n) {
  require(axis >= 0 && axis < x.ndim(), "expand: axis out of range");
  require(x.dim(axis) == 1, "expand: axis extent must be 1");
  Shape out_shape = x.shape();
  out_shape[size_t(axis)] = n;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  Tensor out = make_out(out_shape, x.dtype(), tracked(x));
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t r = 0; r < n; ++r)
        for (int64_t i = 0; i < inner; ++i) op[(o * n + r) * inner + i] = xp[o * inner + i];
  });
  record("expand", {x}, out, [px = x.p_, po = out.p_, outer, inner, n](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t r = 0; r < n; ++r)
          for (int64_t i = 0; i < inner; ++i) g[o * inner + i] += d[(o * n + r) * inner + i];
    });
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  require(axis >= 0 && axis < int(s0.size()), "concat: axis out of range");
  int64_t axis_total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.ndim() == int(s0.size()), "concat: rank mismatch");
    check_dtype_match(parts[0], p, "concat");
    for (int i = 0; i < p.ndim(); ++i)
      if (i != axis) require(p.dim(i) == s0[size_t(i)], "concat: shape mismatch off-axis");
    axis_total += p.dim(axis);
    rg = rg || tracked(p);
  }
  Shape out_shape = s0;
  out_shape[size_t(axis)] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[size_t(i)];
  for (int i = axis + 1; i < int(s0.size()); ++i) inner *= s0[size_t(i)];
  Tensor out = make_out(out_shape, parts[0].dtype(), rg);
  TPD_DISPATCH(out.dtype(), {
    T* op = data<T>(out.p_->value);
    int64_t off = 0;
    for (const auto& p : parts) {
      const T* pp = cdata<T>(p.p_->value);
      int64_t ax = p.dim(axis);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t r = 0; r < ax; ++r)
          for (int64_t i = 0; i < inner; ++i)
            op[(o * axis_total + off + r) * inner + i] = pp[(o * ax + r) * inner + i];
      off += ax;
    }
  });
  std::vector<std::shared_ptr<Payload>> ppl;
  std::vector<int64_t> axes_sizes;
  for (const auto& p : parts) {
    ppl.push_back(p.p_);
    axes_sizes.push_back(p.dim(axis));
  }
  Tape* tp = Tape::current();
  if (tp && rg) {
    Tape::Record r;
    r.name = "concat";
    r.inputs = ppl;
    r.output = out.p_;
    r.back = [ppl, axes_sizes, po = out.p_, outer, inner, axis_total](Tape& t) {
      const Storage& dout = *t.adjoint_of(po.get());
      TPD_DISPATCH(dout.dt, {
        const T* d = cdata<T>(dout);
        int64_t off = 0;
        for (size_t pi = 0; pi < ppl.size(); ++pi) {
          int64_t ax = axes_sizes[pi];
          if (ppl[pi]->requires_grad) {
            T* g = data<T>(t.adjoint_accum(ppl[pi].get()));
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t r2 = 0; r2 < ax; ++r2)
                for (int64_t i = 0; i < inner; ++i)
                  g[(o * ax + r2) * inner + i] += d[(o * axis_total + off + r2) * inner + i];
          }
          off += ax;
        }
      });
    };
    tp->produced.insert(out.p_.get());
    tp->records.push_back(std::move(r));
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t from, int64_t to) {
  require(axis >= 0 && axis < x.ndim(), "slice: axis out of range");
  require(0 <= from && from < to && to <= x.dim(axis), "slice: bad range");
  Shape out_shape = x.shape();
  int64_t span = to - from;
  out_shape[size_t(axis)] = span;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  int64_t ax = x.dim(axis);
  Tensor out = make_out(out_shape, x.dtype(), tracked(x));
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t r = 0; r < span; ++r)
        for (int64_t i = 0; i < inner; ++i)
          op[(o * span + r) * inner + i] = xp[(o * ax + from + r) * inner + i];
  });
  record("slice", {x}, out, [px = x.p_, po = out.p_, outer, inner, ax, from, span](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t r = 0; r < span; ++r)
          for (int64_t i = 0; i < inner; ++i)
            g[(o * ax + from + r) * inner + i] += d[(o * span + r) * inner + i];
    });
  });
  return out;
}

Tensor reshape(const Tensor& x, const Shape& s) {
  require(shape_numel(s) == x.numel(), "reshape: element count mismatch");
  Tensor out = make_out(s, x.dtype(), tracked(x));
  out.p_->value = x.p_->value;
  record("reshape", {x}, out, [px = x.p_, po = out.p_](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      axpy(data<T>(t.adjoint_accum(px.get())), cdata<T>(dout), int64_t(dout.size()), 1.0);
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Tensor lrelu(const Tensor& x, double alpha) {
  Tensor out = make_out(x.shape(), x.dtype(), tracked(x));
  int64_t n = x.numel();
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) {
      double v = double(xp[i]);
      op[i] = T(v > 0 ? v : alpha * v);
    }
  });
  record("lrelu", {x}, out, [px = x.p_, po = out.p_, alpha](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    int64_t n = int64_t(dout.size());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* xv = cdata<T>(px->value);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t i = 0; i < n; ++i)
        g[i] = T(double(g[i]) + (double(xv[i]) > 0 ? 1.0 : alpha) * double(d[i]));
    });
  });
  return out;
}

static double softplus_f(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
static double sigmoid_f(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor softplus(const Tensor& x) {
  return unary_ew("softplus", x, &softplus_f, [](double xv, double) { return sigmoid_f(xv); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_ew("sigmoid", x, &sigmoid_f, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_t(const Tensor& x) {
  return unary_ew(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& x) {
  return unary_ew(
      "square", x, [](double v) { return v * v; }, [](double xv, double) { return 2.0 * xv; });
}

Tensor rsqrt(const Tensor& x, double eps) {
  Tensor out = make_out(x.shape(), x.dtype(), tracked(x));
  int64_t n = x.numel();
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t i = 0; i < n; ++i) op[i] = T(1.0 / std::sqrt(double(xp[i]) + eps));
  });
  record("rsqrt", {x}, out, [px = x.p_, po = out.p_](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    int64_t n = int64_t(dout.size());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* yv = cdata<T>(po->value);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t i = 0; i < n; ++i) {
        double y = double(yv[i]);
        g[i] = T(double(g[i]) - 0.5 * y * y * y * double(d[i]));
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / attention
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require(x.ndim() >= 1, "softmax: needs at least 1-D");
  int64_t D = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / D;
  Tensor out = make_out(x.shape(), x.dtype(), tracked(x));
  TPD_DISPATCH(x.dtype(), {
    const T* xp = cdata<T>(x.p_->value);
    T* op = data<T>(out.p_->value);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = xp + r * D;
      T* orow = op + r * D;
      double m = double(xr[0]);
      for (int64_t j = 1; j < D; ++j) m = std::max(m, double(xr[j]));
      double s = 0.0;
      for (int64_t j = 0; j < D; ++j) {
        double e = std::exp(double(xr[j]) - m);
        orow[j] = T(e);
        s += e;
      }
      double inv = 1.0 / s;
      for (int64_t j = 0; j < D; ++j) orow[j] = T(double(orow[j]) * inv);
    }
  });
  record("softmax", {x}, out, [px = x.p_, po = out.p_, rows, D](Tape& t) {
    if (!px->requires_grad) return;
    const Storage& dout = *t.adjoint_of(po.get());
    TPD_DISPATCH(dout.dt, {
      const T* d = cdata<T>(dout);
      const T* yv = cdata<T>(po->value);
      T* g = data<T>(t.adjoint_accum(px.get()));
      for (int64_t r = 0; r < rows; ++r) {
        const T* dr = d + r * D;
        const T* yr = yv + r * D;
        T* gr = g + r * D;
        double dot = 0.0;
        for (int64_t j = 0; j < D; ++j) dot += double(dr[j]) * double(yr[j]);
        for (int64_t j = 0; j < D; ++j)
          gr[j] = T(double(gr[j]) + double(yr[j]) * (double(dr[j]) - dot));
      }
    });
  });
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention: 2-D operands expected");
  if (k.dim(0) == 0) throw ContractError("attention: empty key set");
  require(q.dim(1) == k.dim(1), "attention: q/k inner dim mismatch");
  require(k.dim(0) == v.dim(0), "attention: k/v row mismatch");
  Tensor scores = mul_scalar(matmul(q, k, false, true), scale);
  Tensor w = softmax_rows(scores);
  return matmul(w, v);
}

// ---------------------------------------------------------------------------
// bilinear_sample
// ---------------------------------------------------------------------------

Tensor bilinear_sample(const Tensor& plane0, const Tensor& uv0) {
  Tensor plane = plane0, uv = uv0;
  promote_pair(plane, uv);
  require(plane.ndim() == 3, "bilinear_sample: plane must be (H,W,C)");
  require(uv.ndim() == 2 && uv.dim(1) == 2, "bilinear_sample: uv must be (N,2)");
  int64_t H = plane.dim(0), W = plane.dim(1), C = plane.dim(2), N = uv.dim(0);
  Tensor out = make_out({N, C}, plane.dtype(), tracked(plane) || tracked(uv));
  TPD_DISPATCH(plane.dtype(), {
    const T* pp = cdata<T>(plane.p_->value);
    const T* up = cdata<T>(uv.p_->value);
    T* op = data<T>(out.p_->value);
    parallel_for(N, 256, [&](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        double r = (double(up[i * 2 + 0]) + 1.0) * 0.5 * double(H - 1);
        double c = (double(up[i * 2 + 1]) + 1.0) * 0.5 * double(W - 1);
        r = clampd(r, 0.0, double(H - 1));
        c = clampd(c, 0.0, double(W - 1));
        int64_t r0 = int64_t(std::floor(r)), c0 = int64_t(std::floor(c));
        int64_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
        double wr = r - double(r0), wc = c - double(c0);
        const T* p00 = pp + (r0 * W + c0) * C;
        const T* p01 = pp + (r0 * W + c1) * C;
        const T* p10 = pp + (r1 * W + c0) * C;
        const T* p11 = pp + (r1 * W + c1) * C;
        T* orow = op + i * C;
        for (int64_t ch = 0; ch < C; ++ch) {
          double top = (1.0 - wc) * double(p00[ch]) + wc * double(p01[ch]);
          double bot = (1.0 - wc) * double(p10[ch]) + wc * double(p11[ch]);
          orow[ch] = T((1.0 - wr) * top + wr * bot);
        }
      }
    });
  });
  record("bilinear_sample", {plane, uv}, out,
         [pp_ = plane.p_, pu = uv.p_, po = out.p_, H, W, C, N](Tape& t) {
           const Storage& dout = *t.adjoint_of(po.get());
           TPD_DISPATCH(dout.dt, {
             const T* d = cdata<T>(dout);
             const T* pp = cdata<T>(pp_->value);
             const T* up = cdata<T>(pu->value);
             T* gplane = pp_->requires_grad ? data<T>(t.adjoint_accum(pp_.get())) : nullptr;
             T* guv = pu->requires_grad ? data<T>(t.adjoint_accum(pu.get())) : nullptr;
             for (int64_t i = 0; i < N; ++i) {
               double ru = double(up[i * 2 + 0]), cu = double(up[i * 2 + 1]);
               double r = (ru + 1.0) * 0.5 * double(H - 1);
               double c = (cu + 1.0) * 0.5 * double(W - 1);
               bool rin = (r > 0.0 && r < double(H - 1));
               bool cin = (c > 0.0 && c < double(W - 1));
               r = clampd(r, 0.0, double(H - 1));
               c = clampd(c, 0.0, double(W - 1));
               int64_t r0 = int64_t(std::floor(r)), c0 = int64_t(std::floor(c));
               int64_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
               double wr = r - double(r0), wc = c - double(c0);
               const T* drow = d + i * C;
               double acc_dr = 0.0, acc_dc = 0.0;
               for (int64_t ch = 0; ch < C; ++ch) {
                 double g = double(drow[ch]);
                 double v00 = double(pp[(r0 * W + c0) * C + ch]);
                 double v01 = double(pp[(r0 * W + c1) * C + ch]);
                 double v10 = double(pp[(r1 * W + c0) * C + ch]);
                 double v11 = double(pp[(r1 * W + c1) * C + ch]);
                 if (gplane) {
                   gplane[(r0 * W + c0) * C + ch] += T((1 - wr) * (1 - wc) * g);
                   gplane[(r0 * W + c1) * C + ch] += T((1 - wr) * wc * g);
                   gplane[(r1 * W + c0) * C + ch] += T(wr * (1 - wc) * g);
                   gplane[(r1 * W + c1) * C + ch] += T(wr * wc * g);
                 }
                 acc_dr += g * ((1 - wc) * (v10 - v00) + wc * (v11 - v01));
                 acc_dc += g * ((1 - wr) * (v01 - v00) + wr * (v11 - v10));
               }
               if (guv) {
                 // clamped coordinates have zero gradient by the border rule
                 if (rin) guv[i * 2 + 0] += T(acc_dr * 0.5 * double(H - 1));
                 if (cin) guv[i * 2 + 1] += T(acc_dc * 0.5 * double(W - 1));
               }
             }
           });
         });
  return out;
}

// ---------------------------------------------------------------------------
// gated residual
// ---------------------------------------------------------------------------

Tensor gated_residual(const Tensor& v, const Tensor& a, const Tensor& beta, const Tensor& gamma,
                      bool use_gate) {
  check_dtype_match(v, a, "gated_residual");
  require(v.shape() == a.shape(), "gated_residual: v/a shape mismatch");
  require(beta.numel() == 1 && gamma.numel() == 1, "gated_residual: beta/gamma must be scalars");
  double bv = beta.at(0), gv = gamma.at(0);
  double s = use_gate ? bv * std::tanh(gv) : bv;
  bool rg = tracked(v) || tracked(a) || tracked(beta) || tracked(gamma);
  Tensor out = make_out(v.shape(), v.dtype(), rg);
  int64_t n = v.numel();
  TPD_DISPATCH(v.dtype(), {
    const T* vp = cdata<T>(v.p_->value);
    const T* ap = cdata<T>(a.p_->value);
    T* op = data<T>(out.p_->value);
    if (s == 0.0) {
      std::copy(vp, vp + n, op);  // exact identity at zero gate
    } else {
      for (int64_t i = 0; i < n; ++i) op[i] = T(double(vp[i]) + s * double(ap[i]));
    }
  });
  record("gated_residual", {v, a, beta, gamma}, out,
         [pv = v.p_, pa = a.p_, pb = beta.p_, pg = gamma.p_, po = out.p_, use_gate](Tape& t) {
           const Storage& dout = *t.adjoint_of(po.get());
           double bv = pb->value.get(0), gv = pg->value.get(0);
           double th = std::tanh(gv);
           double s = use_gate ? bv * th : bv;
           int64_t n = int64_t(dout.size());
           TPD_DISPATCH(dout.dt, {
             const T* d = cdata<T>(dout);
             const T* av = cdata<T>(pa->value);
             if (pv->requires_grad)
               axpy(data<T>(t.adjoint_accum(pv.get())), d, n, 1.0);
             if (pa->requires_grad)
               axpy(data<T>(t.adjoint_accum(pa.get())), d, n, s);
             if (pb->requires_grad || pg->requires_grad) {
               double r = 0.0;
               for (int64_t i = 0; i < n; ++i) r += double(d[i]) * double(av[i]);
               if (pb->requires_grad) {
                 Storage& gb = t.adjoint_accum(pb.get());
                 gb.set(0, gb.get(0) + (use_gate ? th : 1.0) * r);
               }
               if (use_gate && pg->requires_grad) {
                 Storage& gg = t.adjoint_accum(pg.get());
                 gg.set(0, gg.get(0) + bv * (1.0 - th * th) * r);
               }
             }
           });
         });
  return out;
}

// ---------------------------------------------------------------------------
// volume compositing
// ---------------------------------------------------------------------------

Tensor composite(const Tensor& sigma, const Tensor& rgb, const std::vector<double>& deltas,
                 const std::array<double, 3>& bg) {
  check_dtype_match(sigma, rgb, "composite");
  require(sigma.ndim() == 2, "composite: sigma must be (R,S)");
  require(rgb.ndim() == 3 && rgb.dim(2) == 3, "composite: rgb must be (R,S,3)");
  int64_t R = sigma.dim(0), S = sigma.dim(1);
  require(rgb.dim(0) == R && rgb.dim(1) == S, "composite: sigma/rgb shape mismatch");
  require(S >= 1, "composite: need at least one sample");
  require(int64_t(deltas.size()) == R * S, "composite: deltas size mismatch");
  for (double dl : deltas)
    if (!(dl > 0.0)) throw ContractError("composite: sample depths must be strictly increasing");
  bool rg = tracked(sigma) || tracked(rgb);
  Tensor out = make_out({R, 4}, sigma.dtype(), rg);
  TPD_DISPATCH(sigma.dtype(), {
    const T* sp = cdata<T>(sigma.p_->value);
    const T* cp = cdata<T>(rgb.p_->value);
    T* op = data<T>(out.p_->value);
    parallel_for(R, 64, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        double trans = 1.0;
        double pix[3] = {0, 0, 0};
        for (int64_t i = 0; i < S; ++i) {
          double u = std::exp(-double(sp[r * S + i]) * deltas[size_t(r * S + i)]);
          double w = trans * (1.0 - u);
          const T* crow = cp + (r * S + i) * 3;
          for (int ch = 0; ch < 3; ++ch) pix[ch] += w * double(crow[ch]);
          trans *= u;
        }
        for (int ch = 0; ch < 3; ++ch) op[r * 4 + ch] = T(pix[ch] + trans * bg[ch]);
        op[r * 4 + 3] = T(trans);
      }
    });
  });
  record("composite", {sigma, rgb}, out,
         [ps = sigma.p_, pc = rgb.p_, po = out.p_, deltas, bg, R, S](Tape& t) {
           const Storage& dout = *t.adjoint_of(po.get());
           TPD_DISPATCH(dout.dt, {
             const T* d = cdata<T>(dout);
             const T* sp = cdata<T>(ps->value);
             const T* cp = cdata<T>(pc->value);
             T* gs = ps->requires_grad ? data<T>(t.adjoint_accum(ps.get())) : nullptr;
             T* gc = pc->requires_grad ? data<T>(t.adjoint_accum(pc.get())) : nullptr;
             size_t ss = size_t(S);
             std::vector<double> u(ss), tr(ss + 1), w(ss), gdot(ss);
             for (int64_t r = 0; r < R; ++r) {
               const T* dpix = d + r * 4;
               double dtf = double(dpix[3]);
               double h = dtf;
               for (int ch = 0; ch < 3; ++ch) h += double(dpix[ch]) * bg[ch];
               tr[0] = 1.0;
               for (int64_t i = 0; i < S; ++i) {
                 u[size_t(i)] = std::exp(-double(sp[r * S + i]) * deltas[size_t(r * S + i)]);
                 w[size_t(i)] = tr[size_t(i)] * (1.0 - u[size_t(i)]);
                 tr[size_t(i) + 1] = tr[size_t(i)] * u[size_t(i)];
                 const T* crow = cp + (r * S + i) * 3;
                 double gd = 0.0;
                 for (int ch = 0; ch < 3; ++ch) gd += double(dpix[ch]) * double(crow[ch]);
                 gdot[size_t(i)] = gd;
               }
               double tfinal = tr[size_t(S)];
               if (gc) {
                 for (int64_t i = 0; i < S; ++i) {
                   T* gcr = gc + (r * S + i) * 3;
                   for (int ch = 0; ch < 3; ++ch)
                     gcr[ch] += T(w[size_t(i)] * double(dpix[ch]));
                 }
               }
               if (gs) {
                 double suffix = 0.0;  // sum_{i>k} gdot_i * w_i
                 for (int64_t k = S - 1; k >= 0; --k) {
                   double dl = deltas[size_t(r * S + k)];
                   double dsig = -dl * (suffix + h * tfinal) +
                                 dl * u[size_t(k)] * gdot[size_t(k)] * tr[size_t(k)];
                   gs[r * S + k] += T(dsig);
                   suffix += gdot[size_t(k)] * w[size_t(k)];
                 }
               }
             }
           });
         });
  return out;
}

Tensor inner(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> points, double step, double tol) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be > 0");
  for (auto& p : points) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> ad_grads;
  {
    Tape tape;
    Tensor loss = f(points);
    if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    backward(loss);
  }
  for (auto& p : points) {
    Tensor g = p.grad();
    ad_grads.push_back(g.defined() ? g.to_vector() : std::vector<double>(size_t(p.numel()), 0.0));
  }

  // High-precision finite differences: evaluate f on f64 copies so the oracle
  // noise floor sits well below both tolerances.
  TapeSuspend suspend;
  std::vector<Tensor> pts64;
  for (auto& p : points) pts64.push_back(p.detach().astype(Scalar::F64));
  GradCheckReport rep;
  double scale = 1e-12;
  std::vector<std::vector<double>> fd_grads(points.size());
  for (size_t pi = 0; pi < points.size(); ++pi) {
    int64_t n = points[pi].numel();
    fd_grads[pi].resize(size_t(n));
    for (int64_t j = 0; j < n; ++j) {
      double orig = pts64[pi].at(j);
      double h = step * std::max(1.0, std::fabs(orig));
      pts64[pi].set(j, orig + h);
      double fp = f(pts64).item();
      pts64[pi].set(j, orig - h);
      double fm = f(pts64).item();
      pts64[pi].set(j, orig);
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: f non-finite at perturbed point");
      double fd = (fp - fm) / (2.0 * h);
      fd_grads[pi][size_t(j)] = fd;
      scale = std::max(scale, std::fabs(fd) + std::fabs(ad_grads[pi][size_t(j)]));
    }
  }
  double floor = 1e-3 * std::max(1e-12, scale);
  for (size_t pi = 0; pi < points.size(); ++pi) {
    for (size_t j = 0; j < fd_grads[pi].size(); ++j) {
      double a = ad_grads[pi][j], b = fd_grads[pi][j];
      double rel = std::fabs(a - b) / std::max(std::fabs(a) + std::fabs(b), floor);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        char buf[160];
        std::snprintf(buf, sizeof buf, "input %zu elem %zu: ad=%.9g fd=%.9g", pi, j, a, b);
        rep.worst = buf;
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace tpd::ad
