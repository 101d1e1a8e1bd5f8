#include "plm/ops.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace plm {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace {

std::atomic<bool> g_finite_checks{false};
thread_local std::uint64_t g_macs = 0;

template <typename Scalar>
Var<Scalar> record(const char* op, Tensor<Scalar> value, std::initializer_list<const Var<Scalar>*> inputs,
                   std::function<void(Node<Scalar>&)> backward_fn) {
  if (g_finite_checks.load(std::memory_order_relaxed) && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op + " with shape " + to_string(value.shape()));
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->name = op;
  Tape<Scalar>* tape = active_tape<Scalar>();
  bool needs = false;
  for (const Var<Scalar>* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    for (const Var<Scalar>* in : inputs) {
      if (in->defined()) node->inputs.push_back(in->shared());
    }
    node->backward_fn = std::move(backward_fn);
    tape->record(node);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
Var<Scalar> record_n(const char* op, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                     std::function<void(Node<Scalar>&)> backward_fn) {
  if (g_finite_checks.load(std::memory_order_relaxed) && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op);
  }
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->name = op;
  Tape<Scalar>* tape = active_tape<Scalar>();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward_fn = std::move(backward_fn);
    tape->record(node);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
bool wants(const Node<Scalar>& n) {
  return n.requires_grad;
}

Index normalize_axis(Index axis, Index rank, const Shape& shape) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + to_string(shape));
  }
  return a;
}

// In-place softmax of one contiguous row; exp and sum share a single packet pass.
template <typename Scalar>
void softmax_row(Scalar* p, Index n) {
  using namespace Eigen::internal;
  using Packet = typename packet_traits<Scalar>::type;
  constexpr Index width = packet_traits<Scalar>::size;
  Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> row(p, n);
  const Scalar top = row.maxCoeff();
  const Packet shift = pset1<Packet>(top);
  Packet acc = pset1<Packet>(Scalar(0));
  Index j = 0;
  for (; j + width <= n; j += width) {
    const Packet e = pexp(psub(ploadu<Packet>(p + j), shift));
    pstoreu(p + j, e);
    acc = padd(acc, e);
  }
  Scalar total = predux(acc);
  for (; j < n; ++j) {
    p[j] = std::exp(p[j] - top);
    total += p[j];
  }
  row *= Scalar(1) / total;
}

struct AxisSplit {
  Index outer = 1;
  Index len = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

template <typename Scalar>
void check_suffix(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + " shape mismatch: " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
}

}  // namespace

void retain_heap_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }
std::uint64_t mac_count() { return g_macs; }
void reset_mac_count() { g_macs = 0; }
void add_macs(std::uint64_t n) { g_macs += n; }

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(av.shape()) + " and " +
                         to_string(bv.shape()));
  }
  const Index m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
  const Shape abatch(av.shape().begin(), av.shape().end() - 2);
  const Shape bbatch(bv.shape().begin(), bv.shape().end() - 2);
  const bool shared_b = bv.rank() == 2;
  if (bv.dim(-2) != k || (!shared_b && abatch != bbatch)) {
    throw DimensionError("matmul shape mismatch: " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  const Index batch = numel(abatch);
  Shape out_shape = abatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  for (Index i = 0; i < batch; ++i) {
    ConstMatrixMap<Scalar> A(av.data() + i * m * k, m, k);
    ConstMatrixMap<Scalar> B(bv.data() + (shared_b ? 0 : i * k * n), k, n);
    MatrixMap<Scalar> C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  add_macs(static_cast<std::uint64_t>(batch * m * k * n));
  return record<Scalar>("matmul", std::move(out), {&a, &b}, [batch, m, k, n, shared_b](Node<Scalar>& self) {
    Node<Scalar>& an = *self.inputs[0];
    Node<Scalar>& bn = *self.inputs[1];
    for (Index i = 0; i < batch; ++i) {
      ConstMatrixMap<Scalar> dC(self.grad.data() + i * m * n, m, n);
      if (wants(an)) {
        ConstMatrixMap<Scalar> B(bn.value.data() + (shared_b ? 0 : i * k * n), k, n);
        MatrixMap<Scalar> dA(an.grad_buffer().data() + i * m * k, m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (wants(bn)) {
        ConstMatrixMap<Scalar> A(an.value.data() + i * m * k, m, k);
        MatrixMap<Scalar> dB(bn.grad_buffer().data() + (shared_b ? 0 : i * k * n), k, n);
        dB.noalias() += A.transpose() * dC;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Tensor<Scalar>& xv = x.value();
  const Tensor<Scalar>& wv = weight.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.dim(-1) != wv.dim(1)) {
    throw DimensionError("linear shape mismatch: input " + to_string(xv.shape()) + ", weight " +
                         to_string(wv.shape()));
  }
  const Index d_in = wv.dim(1), d_out = wv.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().rank() != 1 || bias.value().dim(0) != d_out)) {
    throw DimensionError("linear bias shape " + to_string(bias.shape()) + " does not match weight " +
                         to_string(wv.shape()));
  }
  const Index rows = xv.size() / d_in;
  Shape out_shape = xv.shape();
  out_shape.back() = d_out;
  auto out = Tensor<Scalar>::uninitialized(out_shape);
  {
    ConstMatrixMap<Scalar> X(xv.data(), rows, d_in);
    ConstMatrixMap<Scalar> W(wv.data(), d_out, d_in);
    MatrixMap<Scalar> Y(out.data(), rows, d_out);
    Y.noalias() = X * W.transpose();
    if (has_bias) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.value().data(), d_out);
      Y.rowwise() += b;
    }
  }
  add_macs(static_cast<std::uint64_t>(rows * d_in * d_out));
  return record<Scalar>("linear", std::move(out), {&x, &weight, &bias},
                        [rows, d_in, d_out, has_bias](Node<Scalar>& self) {
                          Node<Scalar>& xn = *self.inputs[0];
                          Node<Scalar>& wn = *self.inputs[1];
                          ConstMatrixMap<Scalar> dY(self.grad.data(), rows, d_out);
                          if (wants(xn)) {
                            ConstMatrixMap<Scalar> W(wn.value.data(), d_out, d_in);
                            MatrixMap<Scalar> dX(xn.grad_buffer().data(), rows, d_in);
                            dX.noalias() += dY * W;
                          }
                          if (wants(wn)) {
                            ConstMatrixMap<Scalar> X(xn.value.data(), rows, d_in);
                            MatrixMap<Scalar> dW(wn.grad_buffer().data(), d_out, d_in);
                            dW.noalias() += dY.transpose() * X;
                          }
                          if (has_bias) {
                            Node<Scalar>& bn = *self.inputs[2];
                            if (wants(bn)) {
                              Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> db(bn.grad_buffer().data(), d_out);
                              db += dY.colwise().sum();
                            }
                          }
                        });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  check_suffix("add", a, b);
  const Index inner = b.value().size();
  const Index reps = inner == 0 ? 0 : a.value().size() / inner;
  Tensor<Scalar> out = a.value();
  for (Index r = 0; r < reps; ++r) out.array().segment(r * inner, inner) += b.value().array();
  return record<Scalar>("add", std::move(out), {&a, &b}, [reps, inner](Node<Scalar>& self) {
    Node<Scalar>& an = *self.inputs[0];
    Node<Scalar>& bn = *self.inputs[1];
    if (wants(an)) an.grad_buffer().array() += self.grad.array();
    if (wants(bn)) {
      auto& g = bn.grad_buffer().array();
      for (Index r = 0; r < reps; ++r) g += self.grad.array().segment(r * inner, inner);
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  check_suffix("sub", a, b);
  const Index inner = b.value().size();
  const Index reps = inner == 0 ? 0 : a.value().size() / inner;
  Tensor<Scalar> out = a.value();
  for (Index r = 0; r < reps; ++r) out.array().segment(r * inner, inner) -= b.value().array();
  return record<Scalar>("sub", std::move(out), {&a, &b}, [reps, inner](Node<Scalar>& self) {
    Node<Scalar>& an = *self.inputs[0];
    Node<Scalar>& bn = *self.inputs[1];
    if (wants(an)) an.grad_buffer().array() += self.grad.array();
    if (wants(bn)) {
      auto& g = bn.grad_buffer().array();
      for (Index r = 0; r < reps; ++r) g -= self.grad.array().segment(r * inner, inner);
    }
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  check_suffix("mul", a, b);
  const Index inner = b.value().size();
  const Index reps = inner == 0 ? 0 : a.value().size() / inner;
  Tensor<Scalar> out = a.value();
  for (Index r = 0; r < reps; ++r) out.array().segment(r * inner, inner) *= b.value().array();
  return record<Scalar>("mul", std::move(out), {&a, &b}, [reps, inner](Node<Scalar>& self) {
    Node<Scalar>& an = *self.inputs[0];
    Node<Scalar>& bn = *self.inputs[1];
    if (wants(an)) {
      auto& g = an.grad_buffer().array();
      for (Index r = 0; r < reps; ++r) {
        g.segment(r * inner, inner) += self.grad.array().segment(r * inner, inner) * bn.value.array();
      }
    }
    if (wants(bn)) {
      auto& g = bn.grad_buffer().array();
      for (Index r = 0; r < reps; ++r) {
        g += self.grad.array().segment(r * inner, inner) * an.value.array().segment(r * inner, inner);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tensor<Scalar> out = x.value();
  out.array() *= factor;
  return record<Scalar>("scale", std::move(out), {&x}, [factor](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += self.grad.array() * factor;
  });
}

template <typename Scalar>
Var<Scalar> scale_by(const Var<Scalar>& x, const Var<Scalar>& s) {
  if (s.value().size() != 1) {
    throw DimensionError("scale_by expects a single-element factor, got " + to_string(s.shape()));
  }
  const Scalar factor = s.value()[0];
  Tensor<Scalar> out = x.value();
  out.array() *= factor;
  return record<Scalar>("scale_by", std::move(out), {&x, &s}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    Node<Scalar>& sn = *self.inputs[1];
    if (wants(xn)) xn.grad_buffer().array() += self.grad.array() * sn.value[0];
    if (wants(sn)) sn.grad_buffer()[0] += (self.grad.array() * xn.value.array()).sum();
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.array() = out.array().tanh();
  return record<Scalar>("tanh", std::move(out), {&x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += self.grad.array() * (Scalar(1) - self.value.array().square());
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const Scalar k = static_cast<Scalar>(0.044715);
  const auto& xa = x.value().array();
  Tensor<Scalar> out(x.shape());
  out.array() = Scalar(0.5) * xa * (Scalar(1) + (c * (xa + k * xa.cube())).tanh());
  return record<Scalar>("gelu", std::move(out), {&x}, [c, k](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    const auto& xa = xn.value.array();
    const auto t = (c * (xa + k * xa.cube())).tanh().eval();
    const auto d = (Scalar(0.5) * (Scalar(1) + t) +
                    Scalar(0.5) * xa * (Scalar(1) - t.square()) * c * (Scalar(1) + Scalar(3) * k * xa.square()))
                       .eval();
    xn.grad_buffer().array() += self.grad.array() * d;
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.array() = out.array().square();
  return record<Scalar>("square", std::move(out), {&x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += Scalar(2) * self.grad.array() * xn.value.array();
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis) {
  const Index ax = normalize_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  Scalar* o = out.data();
  for (Index a = 0; a < s.outer; ++a) {
    for (Index c = 0; c < s.inner; ++c) {
      const Index base = a * s.len * s.inner + c;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < s.len; ++j) mx = std::max(mx, in[base + j * s.inner]);
      Scalar total = 0;
      for (Index j = 0; j < s.len; ++j) {
        const Scalar e = std::exp(in[base + j * s.inner] - mx);
        o[base + j * s.inner] = e;
        total += e;
      }
      for (Index j = 0; j < s.len; ++j) o[base + j * s.inner] /= total;
    }
  }
  return record<Scalar>("softmax", std::move(out), {&x}, [s](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    const Scalar* y = self.value.data();
    const Scalar* dy = self.grad.data();
    Scalar* dx = xn.grad_buffer().data();
    for (Index a = 0; a < s.outer; ++a) {
      for (Index c = 0; c < s.inner; ++c) {
        const Index base = a * s.len * s.inner + c;
        Scalar dot = 0;
        for (Index j = 0; j < s.len; ++j) dot += dy[base + j * s.inner] * y[base + j * s.inner];
        for (Index j = 0; j < s.len; ++j) {
          const Index i = base + j * s.inner;
          dx[i] += y[i] * (dy[i] - dot);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& weight, Scalar eps) {
  const Index d = weight.value().size();
  if (weight.rank() != 1 || x.rank() < 1 || x.dim(-1) != d) {
    throw DimensionError("rms_norm shape mismatch: input " + to_string(x.shape()) + ", weight " +
                         to_string(weight.shape()));
  }
  const Index rows = x.value().size() / std::max<Index>(d, 1);
  Tensor<Scalar> out(x.shape());
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv(rows);
  ConstMatrixMap<Scalar> X(x.value().data(), rows, d);
  MatrixMap<Scalar> Y(out.data(), rows, d);
  Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> w(weight.value().data(), d);
  for (Index r = 0; r < rows; ++r) {
    inv[r] = Scalar(1) / std::sqrt(X.row(r).squaredNorm() / static_cast<Scalar>(d) + eps);
    Y.row(r) = (X.row(r).array() * inv[r] * w).matrix();
  }
  return record<Scalar>("rms_norm", std::move(out), {&x, &weight}, [rows, d, inv](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    Node<Scalar>& wn = *self.inputs[1];
    ConstMatrixMap<Scalar> X(xn.value.data(), rows, d);
    ConstMatrixMap<Scalar> dY(self.grad.data(), rows, d);
    Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> w(wn.value.data(), d);
    if (wants(xn)) {
      MatrixMap<Scalar> dX(xn.grad_buffer().data(), rows, d);
      for (Index r = 0; r < rows; ++r) {
        const auto n = (X.row(r).array() * inv[r]).eval();
        const auto g = (dY.row(r).array() * w).eval();
        const Scalar m = (g * n).sum() / static_cast<Scalar>(d);
        dX.row(r).array() += inv[r] * (g - n * m);
      }
    }
    if (wants(wn)) {
      Eigen::Map<Eigen::Array<Scalar, 1, Eigen::Dynamic>> dw(wn.grad_buffer().data(), d);
      for (Index r = 0; r < rows; ++r) dw += dY.row(r).array() * X.row(r).array() * inv[r];
    }
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Scalar eps) {
  const Index d = weight.value().size();
  if (weight.rank() != 1 || bias.shape() != weight.shape() || x.rank() < 1 || x.dim(-1) != d) {
    throw DimensionError("layer_norm shape mismatch: input " + to_string(x.shape()) + ", weight " +
                         to_string(weight.shape()));
  }
  const Index rows = x.value().size() / std::max<Index>(d, 1);
  Tensor<Scalar> out(x.shape());
  Eigen::Array<Scalar, Eigen::Dynamic, 1> rstd(rows), mu(rows);
  ConstMatrixMap<Scalar> X(x.value().data(), rows, d);
  MatrixMap<Scalar> Y(out.data(), rows, d);
  Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> w(weight.value().data(), d);
  Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> b(bias.value().data(), d);
  for (Index r = 0; r < rows; ++r) {
    mu[r] = X.row(r).mean();
    const Scalar var = (X.row(r).array() - mu[r]).square().mean();
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    Y.row(r) = ((X.row(r).array() - mu[r]) * rstd[r] * w + b).matrix();
  }
  return record<Scalar>("layer_norm", std::move(out), {&x, &weight, &bias},
                        [rows, d, rstd, mu](Node<Scalar>& self) {
                          Node<Scalar>& xn = *self.inputs[0];
                          Node<Scalar>& wn = *self.inputs[1];
                          Node<Scalar>& bn = *self.inputs[2];
                          ConstMatrixMap<Scalar> X(xn.value.data(), rows, d);
                          ConstMatrixMap<Scalar> dY(self.grad.data(), rows, d);
                          Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> w(wn.value.data(), d);
                          for (Index r = 0; r < rows; ++r) {
                            const auto xhat = ((X.row(r).array() - mu[r]) * rstd[r]).eval();
                            if (wants(xn)) {
                              const auto g = (dY.row(r).array() * w).eval();
                              MatrixMap<Scalar> dX(xn.grad_buffer().data(), rows, d);
                              dX.row(r).array() += rstd[r] * (g - g.mean() - xhat * (g * xhat).mean());
                            }
                            if (wants(wn)) {
                              Eigen::Map<Eigen::Array<Scalar, 1, Eigen::Dynamic>> dw(wn.grad_buffer().data(), d);
                              dw += dY.row(r).array() * xhat;
                            }
                            if (wants(bn)) {
                              Eigen::Map<Eigen::Array<Scalar, 1, Eigen::Dynamic>> db(bn.grad_buffer().data(), d);
                              db += dY.row(r).array();
                            }
                          }
                        });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  const Index ax = normalize_axis(axis, static_cast<Index>(ref.size()), ref);
  Shape out_shape = ref;
  out_shape[ax] = 0;
  std::vector<Index> lens;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != ref.size()) {
      throw DimensionError("concat rank mismatch: " + to_string(ref) + " and " + to_string(probe));
    }
    lens.push_back(probe[ax]);
    probe[ax] = ref[ax];
    if (probe != ref) throw DimensionError("concat shape mismatch: " + to_string(ref) + " and " + to_string(p.shape()));
    out_shape[ax] += lens.back();
  }
  const AxisSplit s = split_at(out_shape, ax);
  Tensor<Scalar> out(out_shape);
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Index chunk = lens[p] * s.inner;
    for (Index a = 0; a < s.outer; ++a) {
      out.array().segment(a * s.len * s.inner + offset, chunk) = parts[p].value().array().segment(a * chunk, chunk);
    }
    offset += chunk;
  }
  return record_n<Scalar>("concat", std::move(out), parts, [s, lens](Node<Scalar>& self) {
    Index offset = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      const Index chunk = lens[p] * s.inner;
      Node<Scalar>& in = *self.inputs[p];
      if (wants(in)) {
        auto& g = in.grad_buffer().array();
        for (Index a = 0; a < s.outer; ++a) {
          g.segment(a * chunk, chunk) += self.grad.array().segment(a * s.len * s.inner + offset, chunk);
        }
      }
      offset += chunk;
    }
  });
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& x, Index axis, Index begin, Index end) {
  const Index ax = normalize_axis(axis, x.rank(), x.shape());
  const Index len = x.shape()[ax];
  if (begin < 0 || end > len || begin > end) {
    throw IndexError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis " +
                     std::to_string(axis) + " of " + to_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<Scalar> out(out_shape);
  const Index chunk = (end - begin) * s.inner;
  for (Index a = 0; a < s.outer; ++a) {
    out.array().segment(a * chunk, chunk) = x.value().array().segment(a * s.len * s.inner + begin * s.inner, chunk);
  }
  return record<Scalar>("slice", std::move(out), {&x}, [s, begin, chunk](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    auto& g = xn.grad_buffer().array();
    for (Index a = 0; a < s.outer; ++a) {
      g.segment(a * s.len * s.inner + begin * s.inner, chunk) += self.grad.array().segment(a * chunk, chunk);
    }
  });
}

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<Index>& order) {
  const Shape& in_shape = x.shape();
  const Index rank = x.rank();
  if (static_cast<Index>(order.size()) != rank) {
    throw DimensionError("permute order has wrong length for shape " + to_string(in_shape));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (Index i = 0; i < rank; ++i) {
    const Index o = order[i];
    if (o < 0 || o >= rank || seen[o]) throw DimensionError("permute order is not a permutation");
    seen[o] = true;
    out_shape[i] = in_shape[o];
  }
  std::vector<Index> in_strides(rank, 1);
  for (Index i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  const Index total = x.value().size();
  auto src = std::make_shared<std::vector<Index>>(total);
  std::vector<Index> counter(rank, 0);
  for (Index lin = 0; lin < total; ++lin) {
    Index off = 0;
    for (Index i = 0; i < rank; ++i) off += counter[i] * in_strides[order[i]];
    (*src)[lin] = off;
    for (Index i = rank - 1; i >= 0; --i) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  Tensor<Scalar> out(out_shape);
  for (Index lin = 0; lin < total; ++lin) out[lin] = x.value()[(*src)[lin]];
  return record<Scalar>("permute", std::move(out), {&x}, [src](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    Scalar* g = xn.grad_buffer().data();
    const Index total = static_cast<Index>(src->size());
    for (Index lin = 0; lin < total; ++lin) g[(*src)[lin]] += self.grad[lin];
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<Index> order(x.rank());
  std::iota(order.begin(), order.end(), Index{0});
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return record<Scalar>("reshape", std::move(out), {&x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> broadcast_batch(const Var<Scalar>& x, Index count) {
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  Tensor<Scalar> out(out_shape);
  const Index n = x.value().size();
  for (Index b = 0; b < count; ++b) out.array().segment(b * n, n) = x.value().array();
  return record<Scalar>("broadcast_batch", std::move(out), {&x}, [count, n](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    auto& g = xn.grad_buffer().array();
    for (Index b = 0; b < count; ++b) g += self.grad.array().segment(b * n, n);
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x, Index axis) {
  const Index ax = normalize_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  Tensor<Scalar> out(out_shape);
  for (Index a = 0; a < s.outer; ++a) {
    for (Index j = 0; j < s.len; ++j) {
      out.array().segment(a * s.inner, s.inner) += x.value().array().segment((a * s.len + j) * s.inner, s.inner);
    }
  }
  return record<Scalar>("sum", std::move(out), {&x}, [s](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    auto& g = xn.grad_buffer().array();
    for (Index a = 0; a < s.outer; ++a) {
      for (Index j = 0; j < s.len; ++j) {
        g.segment((a * s.len + j) * s.inner, s.inner) += self.grad.array().segment(a * s.inner, s.inner);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x, Index axis) {
  const Index ax = normalize_axis(axis, x.rank(), x.shape());
  const Index len = x.shape()[ax];
  if (len == 0) throw DimensionError("mean over empty axis of " + to_string(x.shape()));
  return scale(sum(x, ax), Scalar(1) / static_cast<Scalar>(len));
}

template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().array().sum());
  return record<Scalar>("sum_all", std::move(out), {&x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const int> ids, Shape ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + to_string(table.shape()));
  if (numel(ids_shape) != static_cast<Index>(ids.size())) {
    throw DimensionError("embedding ids length does not match shape " + to_string(ids_shape));
  }
  const Index vocab = table.dim(0), d = table.dim(1);
  std::vector<int> kept(ids.begin(), ids.end());
  for (int id : kept) {
    if (id < 0 || id >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor<Scalar> out(out_shape);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    out.array().segment(static_cast<Index>(i) * d, d) = table.value().array().segment(kept[i] * d, d);
  }
  return record<Scalar>("embedding", std::move(out), {&table}, [kept = std::move(kept), d](Node<Scalar>& self) {
    Node<Scalar>& tn = *self.inputs[0];
    if (!wants(tn)) return;
    auto& g = tn.grad_buffer().array();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      g.segment(kept[i] * d, d) += self.grad.array().segment(static_cast<Index>(i) * d, d);
    }
  });
}

template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& x, Index axis, std::span<const Index> indices) {
  const Index ax = normalize_axis(axis, x.rank(), x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<Index> idx(indices.begin(), indices.end());
  for (Index i : idx) {
    if (i < 0 || i >= s.len) {
      throw IndexError("index " + std::to_string(i) + " out of range for axis of length " + std::to_string(s.len));
    }
  }
  Shape out_shape = x.shape();
  out_shape[ax] = static_cast<Index>(idx.size());
  const Index m = static_cast<Index>(idx.size());
  Tensor<Scalar> out(out_shape);
  for (Index a = 0; a < s.outer; ++a) {
    for (Index j = 0; j < m; ++j) {
      out.array().segment((a * m + j) * s.inner, s.inner) =
          x.value().array().segment((a * s.len + idx[j]) * s.inner, s.inner);
    }
  }
  return record<Scalar>("index_select", std::move(out), {&x}, [s, m, idx = std::move(idx)](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    auto& g = xn.grad_buffer().array();
    for (Index a = 0; a < s.outer; ++a) {
      for (Index j = 0; j < m; ++j) {
        g.segment((a * s.len + idx[j]) * s.inner, s.inner) += self.grad.array().segment((a * m + j) * s.inner, s.inner);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, const std::vector<std::vector<Index>>& rows) {
  if (x.rank() != 3 || static_cast<Index>(rows.size()) != x.dim(0)) {
    throw DimensionError("gather_rows expects [B, n, d] with one index list per batch element, got " +
                         to_string(x.shape()));
  }
  const Index batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  const Index m = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  for (const auto& r : rows) {
    if (static_cast<Index>(r.size()) != m) throw DimensionError("gather_rows index lists differ in length");
    for (Index i : r) {
      if (i < 0 || i >= n) throw IndexError("gather_rows index " + std::to_string(i) + " out of range");
    }
  }
  Tensor<Scalar> out({batch, m, d});
  for (Index b = 0; b < batch; ++b) {
    for (Index j = 0; j < m; ++j) {
      out.array().segment((b * m + j) * d, d) = x.value().array().segment((b * n + rows[b][j]) * d, d);
    }
  }
  return record<Scalar>("gather_rows", std::move(out), {&x}, [rows, n, m, d](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (!wants(xn)) return;
    auto& g = xn.grad_buffer().array();
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const Index bi = static_cast<Index>(b);
      for (Index j = 0; j < m; ++j) {
        g.segment((bi * n + rows[b][j]) * d, d) += self.grad.array().segment((bi * m + j) * d, d);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> mask_fill(const Var<Scalar>& scores, std::span<const std::uint8_t> allow) {
  if (scores.rank() < 2) throw DimensionError("mask_fill needs rank >= 2 scores");
  const Index block = scores.dim(-2) * scores.dim(-1);
  if (static_cast<Index>(allow.size()) != block) {
    throw DimensionError("mask size " + std::to_string(allow.size()) + " does not match scores " +
                         to_string(scores.shape()));
  }
  std::vector<std::uint8_t> keep(allow.begin(), allow.end());
  Tensor<Scalar> out = scores.value();
  const Scalar hidden = -std::numeric_limits<Scalar>::max();
  const Index reps = out.size() / std::max<Index>(block, 1);
  for (Index r = 0; r < reps; ++r) {
    for (Index i = 0; i < block; ++i) {
      if (!keep[i]) out[r * block + i] = hidden;
    }
  }
  return record<Scalar>("mask_fill", std::move(out), {&scores}, [keep = std::move(keep), block, reps](Node<Scalar>& self) {
    Node<Scalar>& sn = *self.inputs[0];
    if (!wants(sn)) return;
    Scalar* g = sn.grad_buffer().data();
    for (Index r = 0; r < reps; ++r) {
      for (Index i = 0; i < block; ++i) {
        if (keep[i]) g[r * block + i] += self.grad[r * block + i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index n_heads,
                      std::span<const std::uint8_t> allow) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) ||
      n_heads <= 0 || q.dim(2) % n_heads != 0) {
    throw DimensionError("attention shape mismatch: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()) + ", heads " + std::to_string(n_heads));
  }
  const Index batch = q.dim(0), sq = q.dim(1), sk = k.dim(1), d = q.dim(2), dh = d / n_heads;
  if (!allow.empty() && static_cast<Index>(allow.size()) != sq * sk) {
    throw DimensionError("attention mask size " + std::to_string(allow.size()) + " does not match [" +
                         std::to_string(sq) + ", " + std::to_string(sk) + "]");
  }
  using Strided = Eigen::Map<const RowMatrix<Scalar>, 0, Eigen::OuterStride<>>;
  using StridedOut = Eigen::Map<RowMatrix<Scalar>, 0, Eigen::OuterStride<>>;
  const Scalar factor = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Scalar hidden = -std::numeric_limits<Scalar>::max();
  // Probabilities are kept for backward only when something upstream wants a gradient;
  // otherwise one head-sized buffer is reused.
  const bool keep = active_tape<Scalar>() != nullptr && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  auto probs = std::make_shared<Tensor<Scalar>>(
      keep ? Tensor<Scalar>::uninitialized({batch, n_heads, sq, sk}) : Tensor<Scalar>::uninitialized({sq, sk}));
  auto out = Tensor<Scalar>::uninitialized({batch, sq, d});
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < n_heads; ++h) {
      Strided Q(q.value().data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d));
      Strided K(k.value().data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
      Strided V(v.value().data() + b * sk * d + h * dh, sk, dh, Eigen::OuterStride<>(d));
      MatrixMap<Scalar> P(probs->data() + (keep ? (b * n_heads + h) * sq * sk : 0), sq, sk);
      P.noalias() = (Q * factor) * K.transpose();
      for (Index r = 0; r < sq; ++r) {
        Scalar* row = P.data() + r * sk;
        if (!allow.empty()) {
          const std::uint8_t* keep = allow.data() + r * sk;
          for (Index c = 0; c < sk; ++c) {
            if (!keep[c]) row[c] = hidden;
          }
        }
        softmax_row(row, sk);
      }
      StridedOut O(out.data() + b * sq * d + h * dh, sq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  }
  add_macs(static_cast<std::uint64_t>(2 * batch * n_heads * sq * sk * dh));
  return record<Scalar>(
      "attention", std::move(out), {&q, &k, &v}, [probs, batch, n_heads, sq, sk, d, dh, factor](Node<Scalar>& self) {
        Node<Scalar>& qn = *self.inputs[0];
        Node<Scalar>& kn = *self.inputs[1];
        Node<Scalar>& vn = *self.inputs[2];
        RowMatrix<Scalar> dP(sq, sk);
        // Transposed products land in a column-major buffer, which Eigen fills much faster.
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> keyside(sk, dh);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < n_heads; ++h) {
            const Index qoff = b * sq * d + h * dh, koff = b * sk * d + h * dh;
            ConstMatrixMap<Scalar> P(probs->data() + (b * n_heads + h) * sq * sk, sq, sk);
            Strided dO(self.grad.data() + qoff, sq, dh, Eigen::OuterStride<>(d));
            Strided Q(qn.value.data() + qoff, sq, dh, Eigen::OuterStride<>(d));
            Strided K(kn.value.data() + koff, sk, dh, Eigen::OuterStride<>(d));
            Strided V(vn.value.data() + koff, sk, dh, Eigen::OuterStride<>(d));
            if (wants(vn)) {
              StridedOut dV(vn.grad_buffer().data() + koff, sk, dh, Eigen::OuterStride<>(d));
              keyside.noalias() = P.transpose() * dO;
              dV += keyside;
            }
            if (!wants(qn) && !wants(kn)) continue;
            dP.noalias() = dO * V.transpose();
            for (Index r = 0; r < sq; ++r) {
              Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> g(dP.data() + r * sk, sk);
              Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> p(P.data() + r * sk, sk);
              const Scalar inner = (g * p).sum();
              g = p * (g - inner) * factor;
            }
            if (wants(qn)) {
              StridedOut dQ(qn.grad_buffer().data() + qoff, sq, dh, Eigen::OuterStride<>(d));
              dQ.noalias() += dP * K;
            }
            if (wants(kn)) {
              StridedOut dK(kn.grad_buffer().data() + koff, sk, dh, Eigen::OuterStride<>(d));
              keyside.noalias() = dP.transpose() * Q;
              dK += keyside;
            }
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, bool training, Rng* rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  if (rng == nullptr) throw std::logic_error("training-mode dropout needs a random generator");
  // One 64-bit draw per element compared against a fixed threshold.
  const auto threshold = static_cast<std::uint64_t>(p * 18446744073709551616.0);
  const Scalar factor = static_cast<Scalar>(1.0 / (1.0 - p));
  Tensor<Scalar> mask(x.shape());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = (*rng)() >= threshold ? factor : Scalar(0);
  Tensor<Scalar> out = x.value();
  out.array() *= mask.array();
  return record<Scalar>("dropout", std::move(out), {&x}, [mask = std::move(mask)](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.inputs[0];
    if (wants(xn)) xn.grad_buffer().array() += self.grad.array() * mask.array();
  });
}

template <typename Scalar>
Var<Scalar> smoothed_cross_entropy(const Var<Scalar>& logits, std::span<const int> targets, Scalar eps,
                                   std::span<const std::uint8_t> mask) {
  if (logits.rank() < 1) throw DimensionError("cross entropy needs logits of rank >= 1");
  if (!(eps >= 0 && eps < 1)) throw ConfigError("label smoothing must lie in [0, 1)");
  const Index vocab = logits.dim(-1);
  const Index rows = logits.value().size() / std::max<Index>(vocab, 1);
  if (static_cast<Index>(targets.size()) != rows || static_cast<Index>(mask.size()) != rows) {
    throw DimensionError("cross entropy expects " + std::to_string(rows) + " targets and mask entries");
  }
  Index count = 0;
  for (Index r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw IndexError("target id " + std::to_string(targets[r]) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) throw EmptyLossError("every position is masked; the loss is empty");
  ConstMatrixMap<Scalar> X(logits.value().data(), rows, vocab);
  RowMatrix<Scalar> probs(rows, vocab);
  double total = 0;
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  for (Index r = 0; r < rows; ++r) {
    if (!msk[r]) continue;
    const Scalar mx = X.row(r).maxCoeff();
    const auto e = (X.row(r).array() - mx).exp().eval();
    const Scalar z = e.sum();
    const Scalar lse = mx + std::log(z);
    probs.row(r) = (e / z).matrix();
    const Scalar nll_target = lse - X(r, tgt[r]);
    const Scalar nll_mean = lse - X.row(r).mean();
    total += static_cast<double>((Scalar(1) - eps) * nll_target + eps * nll_mean);
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(count)));
  return record<Scalar>(
      "smoothed_cross_entropy", std::move(out), {&logits},
      [probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk), rows, vocab, count, eps](Node<Scalar>& self) {
        Node<Scalar>& ln = *self.inputs[0];
        if (!wants(ln)) return;
        const Scalar g = self.grad[0] / static_cast<Scalar>(count);
        MatrixMap<Scalar> dX(ln.grad_buffer().data(), rows, vocab);
        const Scalar uniform = eps / static_cast<Scalar>(vocab);
        for (Index r = 0; r < rows; ++r) {
          if (!msk[r]) continue;
          dX.row(r).array() += g * (probs.row(r).array() - uniform);
          dX(r, tgt[r]) -= g * (Scalar(1) - eps);
        }
      });
}

#define PLM_INSTANTIATE_OPS(S)                                                                           \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> scale(const Var<S>&, S);                                                               \
  template Var<S> scale_by(const Var<S>&, const Var<S>&);                                                \
  template Var<S> tanh(const Var<S>&);                                                                   \
  template Var<S> gelu(const Var<S>&);                                                                   \
  template Var<S> square(const Var<S>&);                                                                 \
  template Var<S> softmax(const Var<S>&, Index);                                                         \
  template Var<S> rms_norm(const Var<S>&, const Var<S>&, S);                                             \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                            \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                                             \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                                             \
  template Var<S> permute(const Var<S>&, const std::vector<Index>&);                                     \
  template Var<S> transpose(const Var<S>&);                                                              \
  template Var<S> reshape(const Var<S>&, Shape);                                                         \
  template Var<S> broadcast_batch(const Var<S>&, Index);                                                 \
  template Var<S> sum(const Var<S>&, Index);                                                             \
  template Var<S> mean(const Var<S>&, Index);                                                            \
  template Var<S> sum_all(const Var<S>&);                                                                \
  template Var<S> embedding(const Var<S>&, std::span<const int>, Shape);                                 \
  template Var<S> index_select(const Var<S>&, Index, std::span<const Index>);                            \
  template Var<S> gather_rows(const Var<S>&, const std::vector<std::vector<Index>>&);                    \
  template Var<S> mask_fill(const Var<S>&, std::span<const std::uint8_t>);                               \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, Index, std::span<const std::uint8_t>); \
  template Var<S> dropout(const Var<S>&, double, bool, Rng*);                                            \
  template Var<S> smoothed_cross_entropy(const Var<S>&, std::span<const int>, S, std::span<const std::uint8_t>);

PLM_INSTANTIATE_OPS(float)
PLM_INSTANTIATE_OPS(double)

}  // namespace plm
