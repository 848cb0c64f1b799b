#include "mqe_align/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <string>
#include <thread>

#include "mqe_align/error.hpp"

namespace mqe::ops {

namespace {

std::size_t g_threads = [] {
  if (const char* env = std::getenv("MQE_ALIGN_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::size_t{1};
}();

template <typename Real>
using Impl = detail::TensorImpl<Real>;
template <typename Real>
using ImplPtr = std::shared_ptr<Impl<Real>>;

template <typename Real>
bool needs_grad(const Tensor<Real>& t) {
  return t.defined() && t.requires_grad();
}

// Gradient buffer of an input, or nullptr when the input does not take one.
template <typename Real>
Real* grad_buffer(const ImplPtr<Real>& p) {
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

template <typename Real, typename Fn>
Tensor<Real> record(Shape shape, std::vector<Real> data,
                    std::initializer_list<const Tensor<Real>*> inputs, Fn&& fn) {
  Tensor<Real> out(std::move(shape), std::move(data));
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const auto* t : inputs) any = any || needs_grad(*t);
  if (!any) return out;
  auto* impl = out.impl();
  impl->requires_grad = true;
  for (const auto* t : inputs) {
    if (needs_grad(*t)) impl->parents.push_back(t->impl_ptr());
  }
  impl->backward_fn = std::forward<Fn>(fn);
  return out;
}

[[noreturn]] void dim_error(const char* op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

template <typename Real>
void require_matrix(const char* op, const Tensor<Real>& t, const char* name) {
  if (!t.defined()) dim_error(op, std::string(name) + " is undefined");
  if (t.rank() != 1 && t.rank() != 2) {
    dim_error(op, std::string(name) + " must be a matrix, got " + shape_str(t.shape()));
  }
}

// C[m,n] (+)= A[m,k] · B[k,n], rows [r0, r1).
template <typename Real>
void gemm_rows(const Real* a, const Real* b, Real* c, std::size_t k, std::size_t n,
               std::size_t r0, std::size_t r1) {
  for (std::size_t i = r0; i < r1; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename Real>
void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t threads = std::min(g_threads, m);
  if (threads <= 1 || m * k * n < (1u << 18)) {
    gemm_rows(a, b, c, k, n, 0, m);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (m + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t r0 = t * chunk, r1 = std::min(m, r0 + chunk);
    if (r0 >= r1) break;
    pool.emplace_back([=] { gemm_rows(a, b, c, k, n, r0, r1); });
  }
  for (auto& th : pool) th.join();
}

// dA[m,k] += dC[m,n] · B[k,n]^T
template <typename Real>
void gemm_nt_acc(const Real* dc, const Real* b, Real* da, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* dci = dc + i * n;
    Real* dai = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real* bp = b + p * n;
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += dci[j] * bp[j];
      dai[p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T · dC[m,n]
template <typename Real>
void gemm_tn_acc(const Real* a, const Real* dc, Real* db, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    const Real* dci = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      Real* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += av * dci[j];
    }
  }
}

template <typename Real>
Real gelu_value(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
}

template <typename Real>
Real gelu_derivative(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace

std::size_t kernel_threads() { return g_threads; }
void set_kernel_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_matrix("matmul", a, "lhs");
  require_matrix("matmul", b, "rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    dim_error("matmul", "inner dims differ: lhs " + shape_str(a.shape()) + " vs rhs " +
                            shape_str(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  gemm(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto pa = a.impl_ptr(), pb = b.impl_ptr();
  return record<Real>(Shape{m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](Impl<Real>& self) {
    if (Real* ga = grad_buffer<Real>(pa)) gemm_nt_acc(self.grad.data(), pb->data.data(), ga, m, k, n);
    if (Real* gb = grad_buffer<Real>(pb)) gemm_tn_acc(pa->data.data(), self.grad.data(), gb, m, k, n);
  });
}

template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& bias) {
  require_matrix("linear", x, "input");
  require_matrix("linear", w, "weight");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k) {
    dim_error("linear", "input width " + std::to_string(k) + " does not match weight " +
                            shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != n) {
    dim_error("linear", "bias " + shape_str(bias.shape()) + " does not match output width " +
                            std::to_string(n));
  }
  std::vector<Real> out(m * n, Real(0));
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.data().data(), n, out.data() + i * n);
  }
  gemm(x.data().data(), w.data().data(), out.data(), m, k, n);
  auto px = x.impl_ptr(), pw = w.impl_ptr(), pb = bias.impl_ptr();
  return record<Real>(Shape{m, n}, std::move(out), {&x, &w, &bias},
                      [px, pw, pb, m, k, n](Impl<Real>& self) {
                        const Real* g = self.grad.data();
                        if (Real* gx = grad_buffer<Real>(px)) gemm_nt_acc(g, pw->data.data(), gx, m, k, n);
                        if (Real* gw = grad_buffer<Real>(pw)) gemm_tn_acc(px->data.data(), g, gw, m, k, n);
                        if (Real* gb = grad_buffer<Real>(pb)) {
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                        }
                      });
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    dim_error("add", "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto pa = a.impl_ptr(), pb = b.impl_ptr();
  return record<Real>(a.shape(), std::move(out), {&a, &b}, [pa, pb](Impl<Real>& self) {
    const std::size_t n = self.grad.size();
    if (Real* ga = grad_buffer<Real>(pa))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (Real* gb = grad_buffer<Real>(pb))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i];
  });
}

template <typename Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& row) {
  require_matrix("add_row", x, "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (row.numel() != n) {
    dim_error("add_row", "row " + shape_str(row.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + row[j];
  auto px = x.impl_ptr(), pr = row.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x, &row}, [px, pr, m, n](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += self.grad[i];
    if (Real* gr = grad_buffer<Real>(pr))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += self.grad[i * n + j];
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto px = x.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x}, [px, factor](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, const Tensor<Real>& s) {
  if (s.numel() != 1) dim_error("mul_scalar", "factor must have one element, got " + shape_str(s.shape()));
  const Real f = s[0];
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
  auto px = x.impl_ptr(), ps = s.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x, &s}, [px, ps](Impl<Real>& self) {
    const Real f = ps->data[0];
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * f;
    if (Real* gs = grad_buffer<Real>(ps)) {
      Real acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->data[i];
      gs[0] += acc;
    }
  });
}

template <typename Real>
Tensor<Real> select(const Tensor<Real>& v, std::size_t index) {
  if (index >= v.numel()) {
    dim_error("select", "index " + std::to_string(index) + " out of " + shape_str(v.shape()));
  }
  auto pv = v.impl_ptr();
  return record<Real>(Shape{1}, std::vector<Real>{v[index]}, {&v}, [pv, index](Impl<Real>& self) {
    if (Real* gv = grad_buffer<Real>(pv)) gv[index] += self.grad[0];
  });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x[i]);
  auto px = x.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x}, [px](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gx[i] += self.grad[i] * gelu_derivative(px->data[i]);
  });
}

template <typename Real>
Tensor<Real> activate(const Tensor<Real>& x, Activation act) {
  return act == Activation::gelu ? gelu(x) : x;
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, bool order_invariant) {
  require_matrix("softmax", x, "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) dim_error("softmax", "empty last axis");
  std::vector<Real> out(m * n);
  std::vector<Real> scratch;
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data().data() + i * n;
    Real* yi = out.data() + i * n;
    const Real mx = *std::max_element(xi, xi + n);
    for (std::size_t j = 0; j < n; ++j) yi[j] = std::exp(xi[j] - mx);
    Real total = 0;
    if (order_invariant) {
      scratch.assign(yi, yi + n);
      std::sort(scratch.begin(), scratch.end());
      for (Real e : scratch) total += e;
    } else {
      for (std::size_t j = 0; j < n; ++j) total += yi[j];
    }
    for (std::size_t j = 0; j < n; ++j) yi[j] /= total;
  }
  auto px = x.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x}, [px, m, n](Impl<Real>& self) {
    Real* gx = grad_buffer<Real>(px);
    if (!gx) return;
    for (std::size_t i = 0; i < m; ++i) {
      const Real* y = self.data.data() + i * n;
      const Real* gy = self.grad.data() + i * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        double eps) {
  require_matrix("layer_norm", x, "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    dim_error("layer_norm", "gain " + shape_str(gain.shape()) + " / bias " +
                                shape_str(bias.shape()) + " vs width " + std::to_string(n));
  }
  std::vector<Real> out(m * n);
  std::vector<Real> xhat(m * n), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xi = x.data().data() + i * n;
    Real mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= Real(n);
    rstd[i] = Real(1) / std::sqrt(var + Real(eps));
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  auto px = x.impl_ptr(), pg = gain.impl_ptr(), pb = bias.impl_ptr();
  return record<Real>(x.shape(), std::move(out), {&x, &gain, &bias},
                      [px, pg, pb, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Impl<Real>& self) {
                        const Real* g = self.grad.data();
                        if (Real* gg = grad_buffer<Real>(pg))
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                        if (Real* gb = grad_buffer<Real>(pb))
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                        Real* gx = grad_buffer<Real>(px);
                        if (!gx) return;
                        const Real* gain = pg->data.data();
                        for (std::size_t i = 0; i < m; ++i) {
                          Real s1 = 0, s2 = 0;
                          for (std::size_t j = 0; j < n; ++j) {
                            const Real d = g[i * n + j] * gain[j];
                            s1 += d;
                            s2 += d * xhat[i * n + j];
                          }
                          s1 /= Real(n);
                          s2 /= Real(n);
                          for (std::size_t j = 0; j < n; ++j) {
                            const Real d = g[i * n + j] * gain[j];
                            gx[i * n + j] += rstd[i] * (d - s1 - xhat[i * n + j] * s2);
                          }
                        }
                      });
}

template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids) {
  require_matrix("embedding", table, "table");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<Real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      dim_error("embedding", "id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(v) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto pt = table.impl_ptr();
  std::vector<int> saved(ids.begin(), ids.end());
  return record<Real>(Shape{ids.size(), d}, std::move(out), {&table},
                      [pt, d, saved = std::move(saved)](Impl<Real>& self) {
                        if (Real* gt = grad_buffer<Real>(pt))
                          for (std::size_t i = 0; i < saved.size(); ++i)
                            for (std::size_t j = 0; j < d; ++j)
                              gt[static_cast<std::size_t>(saved[i]) * d + j] += self.grad[i * d + j];
                      });
}

template <typename Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) dim_error("concat_rows", "no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p, "part");
    if (p.cols() != n) {
      dim_error("concat_rows", "column counts differ: " + std::to_string(n) + " vs " +
                                   std::to_string(p.cols()));
    }
    m += p.rows();
  }
  std::vector<Real> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

  Tensor<Real> result(Shape{m, n}, std::move(out));
  if (!grad_mode_enabled()) return result;
  bool any = false;
  for (const auto& p : parts) any = any || needs_grad(p);
  if (!any) return result;
  std::vector<ImplPtr<Real>> inputs;
  for (const auto& p : parts) inputs.push_back(p.impl_ptr());
  auto* impl = result.impl();
  impl->requires_grad = true;
  for (const auto& p : parts)
    if (needs_grad(p)) impl->parents.push_back(p.impl_ptr());
  impl->backward_fn = [inputs = std::move(inputs)](Impl<Real>& self) {
    std::size_t offset = 0;
    for (const auto& in : inputs) {
      const std::size_t len = in->data.size();
      if (Real* g = grad_buffer<Real>(in))
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      offset += len;
    }
  };
  return result;
}

template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, std::size_t begin, std::size_t end) {
  require_matrix("slice_rows", x, "input");
  const std::size_t n = x.cols();
  if (begin > end || end > x.rows()) {
    dim_error("slice_rows", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") outside " + shape_str(x.shape()));
  }
  std::vector<Real> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  auto px = x.impl_ptr();
  return record<Real>(Shape{end - begin, n}, std::move(out), {&x}, [px, begin, n](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * n + i] += self.grad[i];
  });
}

template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x) {
  require_matrix("mean_rows", x, "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (m == 0) dim_error("mean_rows", "no rows");
  std::vector<Real> out(n, Real(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (auto& v : out) v /= Real(m);
  auto px = x.impl_ptr();
  return record<Real>(Shape{1, n}, std::move(out), {&x}, [px, m, n](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j] / Real(m);
  });
}

template <typename Real>
Tensor<Real> max_pool_rows(const Tensor<Real>& x, std::size_t group) {
  require_matrix("max_pool_rows", x, "input");
  const std::size_t rows = x.rows(), n = x.cols();
  if (group == 0 || rows % group != 0) {
    dim_error("max_pool_rows", std::to_string(rows) + " rows not divisible into groups of " +
                                   std::to_string(group));
  }
  const std::size_t m = rows / group;
  std::vector<Real> out(m * n);
  std::vector<std::size_t> argmax(m * n);
  for (std::size_t g = 0; g < m; ++g)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t best = g * group;
      for (std::size_t r = g * group + 1; r < (g + 1) * group; ++r)
        if (x[r * n + j] > x[best * n + j]) best = r;
      argmax[g * n + j] = best;
      out[g * n + j] = x[best * n + j];
    }
  auto px = x.impl_ptr();
  return record<Real>(Shape{m, n}, std::move(out), {&x},
                      [px, n, argmax = std::move(argmax)](Impl<Real>& self) {
                        if (Real* gx = grad_buffer<Real>(px))
                          for (std::size_t i = 0; i < argmax.size(); ++i)
                            gx[argmax[i] * n + i % n] += self.grad[i];
                      });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  auto px = x.impl_ptr();
  return record<Real>(Shape{1}, std::vector<Real>{total}, {&x}, [px](Impl<Real>& self) {
    if (Real* gx = grad_buffer<Real>(px))
      for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += self.grad[0];
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  if (x.numel() == 0) dim_error("mean", "empty input");
  return scale(sum(x), Real(1) / Real(x.numel()));
}

namespace {

// Fills probs[h][i][j] and returns key-limit per row.
template <typename Real>
void attention_probs(const Real* q, const Real* k, std::size_t tq, std::size_t tk, std::size_t d,
                     std::size_t heads, bool causal, std::vector<Real>& probs) {
  const std::size_t dh = d / heads;
  const Real inv = Real(1) / std::sqrt(Real(dh));
  probs.assign(heads * tq * tk, Real(0));
  const std::size_t shift = tk - tq;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t limit = causal ? std::min(tk, i + shift + 1) : tk;
      Real* p = probs.data() + (h * tq + i) * tk;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < limit; ++j) {
        Real s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + c0 + c] * k[j * d + c0 + c];
        p[j] = s * inv;
        mx = std::max(mx, p[j]);
      }
      Real total = 0;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j < limit; ++j) p[j] /= total;
    }
  }
}

template <typename Real>
void check_attention(const Tensor<Real>& q, const Tensor<Real>& k, std::size_t heads, bool causal) {
  require_matrix("attention", q, "query");
  require_matrix("attention", k, "key");
  if (q.cols() != k.cols()) {
    dim_error("attention", "query width " + std::to_string(q.cols()) + " vs key width " +
                               std::to_string(k.cols()));
  }
  if (heads == 0 || q.cols() % heads != 0) {
    dim_error("attention", "width " + std::to_string(q.cols()) + " not divisible by " +
                               std::to_string(heads) + " heads");
  }
  if (causal && k.rows() < q.rows()) {
    dim_error("attention", "causal attention needs at least as many keys as queries");
  }
  if (k.rows() == 0) dim_error("attention", "no keys");
}

}  // namespace

template <typename Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       std::size_t heads, bool causal) {
  check_attention(q, k, heads, causal);
  if (v.rows() != k.rows() || v.cols() != k.cols()) {
    dim_error("attention", "value " + shape_str(v.shape()) + " vs key " + shape_str(k.shape()));
  }
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols(), dh = d / heads;
  std::vector<Real> probs;
  attention_probs(q.data().data(), k.data().data(), tq, tk, d, heads, causal, probs);
  std::vector<Real> out(tq * d, Real(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < tq; ++i) {
      const Real* p = probs.data() + (h * tq + i) * tk;
      Real* oi = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        if (p[j] == Real(0)) continue;
        const Real* vj = v.data().data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
      }
    }
  auto pq = q.impl_ptr(), pk = k.impl_ptr(), pv = v.impl_ptr();
  return record<Real>(
      Shape{tq, d}, std::move(out), {&q, &k, &v},
      [pq, pk, pv, tq, tk, d, dh, heads, probs = std::move(probs)](Impl<Real>& self) {
        Real* gq = grad_buffer<Real>(pq);
        Real* gk = grad_buffer<Real>(pk);
        Real* gv = grad_buffer<Real>(pv);
        const Real inv = Real(1) / std::sqrt(Real(dh));
        const Real* qd = pq->data.data();
        const Real* kd = pk->data.data();
        const Real* vd = pv->data.data();
        std::vector<Real> dp(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < tq; ++i) {
            const Real* p = probs.data() + (h * tq + i) * tk;
            const Real* go = self.grad.data() + i * d + c0;
            Real dot = 0;
            for (std::size_t j = 0; j < tk; ++j) {
              Real s = 0;
              for (std::size_t c = 0; c < dh; ++c) s += go[c] * vd[j * d + c0 + c];
              dp[j] = s;
              dot += p[j] * s;
              if (gv && p[j] != Real(0))
                for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * go[c];
            }
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == Real(0)) continue;
              const Real ds = p[j] * (dp[j] - dot) * inv;
              if (gq)
                for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds * kd[j * d + c0 + c];
              if (gk)
                for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds * qd[i * d + c0 + c];
            }
          }
        }
      });
}

template <typename Real>
Tensor<Real> attention_weights(const Tensor<Real>& q, const Tensor<Real>& k, std::size_t heads,
                               bool causal) {
  check_attention(q, k, heads, causal);
  std::vector<Real> probs;
  attention_probs(q.data().data(), k.data().data(), q.rows(), k.rows(), q.cols(), heads, causal,
                  probs);
  return Tensor<Real>(Shape{heads * q.rows(), k.rows()}, std::move(probs));
}

template <typename Real>
Tensor<Real> cross_entropy_masked(const Tensor<Real>& logits, std::span<const int> targets,
                                  std::span<const std::uint8_t> mask) {
  require_matrix("cross_entropy_masked", logits, "logits");
  const std::size_t t = logits.rows(), vocab = logits.cols();
  if (targets.size() != t || mask.size() != t) {
    dim_error("cross_entropy_masked", "logits have " + std::to_string(t) + " rows but " +
                                          std::to_string(targets.size()) + " targets and " +
                                          std::to_string(mask.size()) + " mask flags");
  }
  std::size_t count = 0;
  for (auto f : mask) count += f ? 1 : 0;
  if (count == 0) throw ContractError("cross_entropy_masked: every position is excluded (empty loss)");

  std::vector<Real> probs(t * vocab, Real(0));
  Real total = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      dim_error("cross_entropy_masked", "target " + std::to_string(targets[i]) +
                                            " outside vocabulary of " + std::to_string(vocab));
    }
    const Real* li = logits.data().data() + i * vocab;
    const Real mx = *std::max_element(li, li + vocab);
    Real z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(li[j] - mx);
    const Real log_z = mx + std::log(z);
    total += log_z - li[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(li[j] - log_z);
  }
  const Real inv_count = Real(1) / Real(count);
  auto pl = logits.impl_ptr();
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return record<Real>(Shape{1}, std::vector<Real>{total * inv_count}, {&logits},
                      [pl, t, vocab, inv_count, probs = std::move(probs), tgt = std::move(tgt),
                       msk = std::move(msk)](Impl<Real>& self) {
                        Real* gl = grad_buffer<Real>(pl);
                        if (!gl) return;
                        const Real g = self.grad[0] * inv_count;
                        for (std::size_t i = 0; i < t; ++i) {
                          if (!msk[i]) continue;
                          for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += g * probs[i * vocab + j];
                          gl[i * vocab + static_cast<std::size_t>(tgt[i])] -= g;
                        }
                      });
}

#define MQE_INSTANTIATE_OPS(Real)                                                                 \
  template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                         \
  template Tensor<Real> linear(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);    \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                            \
  template Tensor<Real> add_row(const Tensor<Real>&, const Tensor<Real>&);                        \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                         \
  template Tensor<Real> mul_scalar(const Tensor<Real>&, const Tensor<Real>&);                     \
  template Tensor<Real> select(const Tensor<Real>&, std::size_t);                                 \
  template Tensor<Real> gelu(const Tensor<Real>&);                                                \
  template Tensor<Real> activate(const Tensor<Real>&, Activation);                                \
  template Tensor<Real> softmax(const Tensor<Real>&, bool);                                       \
  template Tensor<Real> layer_norm(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, \
                                   double);                                                       \
  template Tensor<Real> embedding(const Tensor<Real>&, std::span<const int>);                     \
  template Tensor<Real> concat_rows(const std::vector<Tensor<Real>>&);                            \
  template Tensor<Real> slice_rows(const Tensor<Real>&, std::size_t, std::size_t);                \
  template Tensor<Real> mean_rows(const Tensor<Real>&);                                           \
  template Tensor<Real> max_pool_rows(const Tensor<Real>&, std::size_t);                          \
  template Tensor<Real> sum(const Tensor<Real>&);                                                 \
  template Tensor<Real> mean(const Tensor<Real>&);                                                \
  template Tensor<Real> attention(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&,  \
                                  std::size_t, bool);                                             \
  template Tensor<Real> attention_weights(const Tensor<Real>&, const Tensor<Real>&, std::size_t,  \
                                          bool);                                                  \
  template Tensor<Real> cross_entropy_masked(const Tensor<Real>&, std::span<const int>,           \
                                             std::span<const std::uint8_t>);

MQE_INSTANTIATE_OPS(float)
MQE_INSTANTIATE_OPS(double)

#undef MQE_INSTANTIATE_OPS

}  // namespace mqe::ops
