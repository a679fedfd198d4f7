#include "rlkv/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "rlkv/detail/kernels.hpp"

namespace rlkv {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::int64_t> g_next_id{1};

std::int64_t product(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::int64_t id = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

namespace {

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<float> data) {
  if (shape.empty()) throw ShapeError("tensor: rank-0 shapes are not supported, use {1}");
  for (int d : shape)
    if (d <= 0) throw ShapeError("tensor: nonpositive dimension in shape " + shape_str(shape));
  if (product(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match buffer size " +
                     std::to_string(data.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

TensorImpl* need(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
  return t.impl();
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Wires an op result into the graph. `fn` must accumulate (+=) into parent
// grad buffers, which the backward driver guarantees are allocated and zeroed.
Tensor make_op(const char* name, Shape shape, std::vector<float> data,
               std::vector<std::shared_ptr<TensorImpl>> parents,
               std::function<void(TensorImpl&)> fn) {
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->op = name;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (g_grad_enabled && any) {
    impl->requires_grad = true;
    impl->leaf = false;
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(fn);
  }
  return Tensor(std::move(impl));
}

int last_dim(const Tensor& t) { return t.shape().back(); }

std::int64_t row_count(const Tensor& t) { return t.numel() / last_dim(t); }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = product(shape);
  auto impl = new_impl(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), 0.0f));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = product(shape);
  auto impl = new_impl(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return need(*this, "shape")->shape; }
std::int64_t Tensor::numel() const { return need(*this, "numel")->numel(); }

int Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw std::out_of_range("Tensor::dim: axis out of range");
  return s[static_cast<std::size_t>(i)];
}

float* Tensor::data() { return need(*this, "data")->data.data(); }
const float* Tensor::data() const { return need(*this, "data")->data.data(); }

float Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor has shape " + shape_str(shape()) + ", expected one element");
  return data()[0];
}

float Tensor::at(int i) const {
  if (i < 0 || i >= numel()) throw std::out_of_range("Tensor::at: index out of range");
  return data()[i];
}

float Tensor::at2(int i, int j) const {
  const auto& s = shape();
  if (s.size() != 2) throw ShapeError("at2: tensor is not rank-2: " + shape_str(s));
  if (i < 0 || i >= s[0] || j < 0 || j >= s[1])
    throw std::out_of_range("Tensor::at2: index out of range");
  return data()[static_cast<std::size_t>(i) * s[1] + j];
}

bool Tensor::requires_grad() const { return need(*this, "requires_grad")->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  auto* impl = need(*this, "set_requires_grad");
  if (!impl->leaf)
    throw std::logic_error("set_requires_grad: only leaf tensors may be toggled");
  impl->requires_grad = v;
  if (!v) impl->grad.clear();
}

bool Tensor::grad_allocated() const { return !need(*this, "grad_allocated")->grad.empty(); }

const float* Tensor::grad_data() const {
  auto* impl = need(*this, "grad_data");
  return impl->grad.empty() ? nullptr : impl->grad.data();
}

float* Tensor::grad_data() {
  auto* impl = need(*this, "grad_data");
  return impl->grad.empty() ? nullptr : impl->grad.data();
}

Tensor Tensor::grad() const {
  auto* impl = need(*this, "grad");
  if (impl->grad.empty())
    throw std::logic_error("grad: no gradient has been accumulated for this tensor");
  return from_data(impl->shape, impl->grad);
}

void Tensor::zero_grad() {
  auto* impl = need(*this, "zero_grad");
  if (!impl->grad.empty()) std::fill(impl->grad.begin(), impl->grad.end(), 0.0f);
}

std::int64_t Tensor::node_id() const { return need(*this, "node_id")->id; }
const char* Tensor::op_name() const { return need(*this, "op_name")->op; }
bool Tensor::is_leaf() const { return need(*this, "is_leaf")->leaf; }

Tensor Tensor::detach() const {
  auto* impl = need(*this, "detach");
  return from_data(impl->shape, impl->data);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// backward driver
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  auto* root = need(loss, "backward");
  if (root->numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(root->shape));
  if (!root->requires_grad)
    throw std::invalid_argument("backward: loss does not require grad");

  // Post-order DFS over grad-tracked parents: parents land before children,
  // so the reversed order is a valid backprop schedule.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  visited.insert(root);
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      ++stack.back().second;
      TensorImpl* p = node->parents[idx].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Fresh buffers each pass: accumulation never leaks across backward() calls.
  for (auto* n : order) n->grad.assign(n->data.size(), 0.0f);
  root->grad[0] = 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// arithmetic primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  need(a, "add");
  need(b, "add");
  check_same_shape("add", a, b);
  std::vector<float> out(a.impl()->data.size());
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("add", a.shape(), std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi](TensorImpl& self) {
                   const auto& g = self.grad;
                   if (ai->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
                   if (bi->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  need(a, "sub");
  need(b, "sub");
  check_same_shape("sub", a, b);
  std::vector<float> out(a.impl()->data.size());
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("sub", a.shape(), std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi](TensorImpl& self) {
                   const auto& g = self.grad;
                   if (ai->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
                   if (bi->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  need(a, "mul");
  need(b, "mul");
  check_same_shape("mul", a, b);
  std::vector<float> out(a.impl()->data.size());
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("mul", a.shape(), std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi](TensorImpl& self) {
                   const auto& g = self.grad;
                   if (ai->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
                   if (bi->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
                 });
}

Tensor scale(const Tensor& x, float c) {
  need(x, "scale");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * c;
  TensorImpl* xi = x.impl();
  return make_op("scale", x.shape(), std::move(out), {x.impl_ptr()}, [xi, c](TensorImpl& self) {
    if (!xi->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i] * c;
  });
}

Tensor scale(const Tensor& x, const Tensor& s) {
  need(x, "scale");
  need(s, "scale");
  if (s.numel() != 1)
    throw ShapeError("scale: scalar factor must have one element, got " + shape_str(s.shape()));
  float sv = s.data()[0];
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * sv;
  TensorImpl* xi = x.impl();
  TensorImpl* si = s.impl();
  return make_op("scale", x.shape(), std::move(out), {x.impl_ptr(), s.impl_ptr()},
                 [xi, si](TensorImpl& self) {
                   const auto& g = self.grad;
                   float sv = si->data[0];
                   if (xi->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i] * sv;
                   if (si->requires_grad) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < g.size(); ++i)
                       acc += static_cast<double>(g[i]) * xi->data[i];
                     si->grad[0] += static_cast<float>(acc);
                   }
                 });
}

Tensor one_minus(const Tensor& x) {
  need(x, "one_minus");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f - px[i];
  TensorImpl* xi = x.impl();
  return make_op("one_minus", x.shape(), std::move(out), {x.impl_ptr()}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] -= self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

namespace {

void require_rank2(const char* op, const Tensor& t) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  need(a, "matmul");
  need(b, "matmul");
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  detail::matmul(a.data(), b.data(), out.data(), m, k, n);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("matmul", {m, n}, std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi, m, k, n](TensorImpl& self) {
                   if (ai->requires_grad) {
                     std::vector<float> tmp(static_cast<std::size_t>(m) * k);
                     detail::matmul_nt(self.grad.data(), bi->data.data(), tmp.data(), m, n, k);
                     for (std::size_t i = 0; i < tmp.size(); ++i) ai->grad[i] += tmp[i];
                   }
                   if (bi->requires_grad) {
                     std::vector<float> tmp(static_cast<std::size_t>(k) * n);
                     detail::matmul_tn(ai->data.data(), self.grad.data(), tmp.data(), k, m, n);
                     for (std::size_t i = 0; i < tmp.size(); ++i) bi->grad[i] += tmp[i];
                   }
                 });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  need(a, "matmul_nt");
  need(b, "matmul_nt");
  require_rank2("matmul_nt", a);
  require_rank2("matmul_nt", b);
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()) + "^T");
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  detail::matmul_nt(a.data(), b.data(), out.data(), m, k, n);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("matmul_nt", {m, n}, std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi, m, k, n](TensorImpl& self) {
                   if (ai->requires_grad) {
                     std::vector<float> tmp(static_cast<std::size_t>(m) * k);
                     detail::matmul(self.grad.data(), bi->data.data(), tmp.data(), m, n, k);
                     for (std::size_t i = 0; i < tmp.size(); ++i) ai->grad[i] += tmp[i];
                   }
                   if (bi->requires_grad) {
                     std::vector<float> tmp(static_cast<std::size_t>(n) * k);
                     detail::matmul_tn(self.grad.data(), ai->data.data(), tmp.data(), n, m, k);
                     for (std::size_t i = 0; i < tmp.size(); ++i) bi->grad[i] += tmp[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// row-structured ops
// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  need(x, "softmax_lastdim");
  int n = last_dim(x);
  std::int64_t rows = row_count(x);
  std::vector<float> out(x.impl()->data.size());
  for (std::int64_t r = 0; r < rows; ++r)
    detail::softmax_row(x.data() + r * n, out.data() + r * n, n);
  TensorImpl* xi = x.impl();
  return make_op("softmax_lastdim", x.shape(), std::move(out), {x.impl_ptr()},
                 [xi, n, rows](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const float* s = self.data.data() + r * n;
                     const float* g = self.grad.data() + r * n;
                     float* gx = xi->grad.data() + r * n;
                     double dot = 0.0;
                     for (int i = 0; i < n; ++i)
                       dot += static_cast<double>(g[i]) * s[i];
                     for (int i = 0; i < n; ++i)
                       gx[i] += static_cast<float>(s[i] * (static_cast<double>(g[i]) - dot));
                   }
                 });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  need(x, "log_softmax_lastdim");
  int n = last_dim(x);
  std::int64_t rows = row_count(x);
  std::vector<float> out(x.impl()->data.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * n;
    double lse = detail::logsumexp_row(xr, n);
    float* o = out.data() + r * n;
    for (int i = 0; i < n; ++i) o[i] = static_cast<float>(xr[i] - lse);
  }
  TensorImpl* xi = x.impl();
  return make_op("log_softmax_lastdim", x.shape(), std::move(out), {x.impl_ptr()},
                 [xi, n, rows](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const float* y = self.data.data() + r * n;
                     const float* g = self.grad.data() + r * n;
                     float* gx = xi->grad.data() + r * n;
                     double gsum = 0.0;
                     for (int i = 0; i < n; ++i) gsum += g[i];
                     for (int i = 0; i < n; ++i)
                       gx[i] += static_cast<float>(g[i] - std::exp(static_cast<double>(y[i])) * gsum);
                   }
                 });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  need(x, "layernorm");
  need(gain, "layernorm");
  need(bias, "layernorm");
  int n = last_dim(x);
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layernorm: gain/bias must match feature dim " + std::to_string(n) +
                     ", got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  std::int64_t rows = row_count(x);
  std::vector<float> out(x.impl()->data.size());
  for (std::int64_t r = 0; r < rows; ++r)
    detail::layernorm_row(x.data() + r * n, gain.data(), bias.data(), out.data() + r * n, n, eps);
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gain.impl();
  TensorImpl* bi = bias.impl();
  return make_op(
      "layernorm", x.shape(), std::move(out), {x.impl_ptr(), gain.impl_ptr(), bias.impl_ptr()},
      [xi, gi, bi, n, rows, eps](TensorImpl& self) {
        std::vector<double> ggain(static_cast<std::size_t>(n), 0.0);
        std::vector<double> gbias(static_cast<std::size_t>(n), 0.0);
        std::vector<double> xhat(static_cast<std::size_t>(n));
        for (std::int64_t r = 0; r < rows; ++r) {
          const float* xr = xi->data.data() + r * n;
          const float* g = self.grad.data() + r * n;
          double mean = 0.0;
          for (int i = 0; i < n; ++i) mean += xr[i];
          mean /= n;
          double var = 0.0;
          for (int i = 0; i < n; ++i) {
            double d = xr[i] - mean;
            var += d * d;
          }
          var /= n;
          double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
          for (int i = 0; i < n; ++i) xhat[static_cast<std::size_t>(i)] = (xr[i] - mean) * inv;
          if (gi->requires_grad || bi->requires_grad) {
            for (int i = 0; i < n; ++i) {
              ggain[static_cast<std::size_t>(i)] += static_cast<double>(g[i]) * xhat[static_cast<std::size_t>(i)];
              gbias[static_cast<std::size_t>(i)] += g[i];
            }
          }
          if (xi->requires_grad) {
            double m1 = 0.0, m2 = 0.0;
            for (int i = 0; i < n; ++i) {
              double a = static_cast<double>(g[i]) * gi->data[i];
              m1 += a;
              m2 += a * xhat[static_cast<std::size_t>(i)];
            }
            m1 /= n;
            m2 /= n;
            float* gx = xi->grad.data() + r * n;
            for (int i = 0; i < n; ++i) {
              double a = static_cast<double>(g[i]) * gi->data[i];
              gx[i] += static_cast<float>(inv * (a - m1 - xhat[static_cast<std::size_t>(i)] * m2));
            }
          }
        }
        if (gi->requires_grad)
          for (int i = 0; i < n; ++i) gi->grad[i] += static_cast<float>(ggain[static_cast<std::size_t>(i)]);
        if (bi->requires_grad)
          for (int i = 0; i < n; ++i) bi->grad[i] += static_cast<float>(gbias[static_cast<std::size_t>(i)]);
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  need(table, "embedding_lookup");
  require_rank2("embedding_lookup", table);
  int vocab = table.dim(0);
  int dim = table.dim(1);
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab));
  int t = static_cast<int>(ids.size());
  std::vector<float> out(static_cast<std::size_t>(t) * dim);
  for (int r = 0; r < t; ++r)
    std::memcpy(out.data() + static_cast<std::size_t>(r) * dim,
                table.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(r)]) * dim,
                sizeof(float) * static_cast<std::size_t>(dim));
  TensorImpl* ti = table.impl();
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return make_op("embedding_lookup", {t, dim}, std::move(out), {table.impl_ptr()},
                 [ti, dim, ids_copy = std::move(ids_copy)](TensorImpl& self) {
                   if (!ti->requires_grad) return;
                   for (std::size_t r = 0; r < ids_copy.size(); ++r) {
                     const float* g = self.grad.data() + r * static_cast<std::size_t>(dim);
                     float* gt = ti->grad.data() +
                                 static_cast<std::size_t>(ids_copy[r]) * static_cast<std::size_t>(dim);
                     for (int i = 0; i < dim; ++i) gt[i] += g[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

Tensor gelu(const Tensor& x) {
  need(x, "gelu");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_scalar(px[i]);
  TensorImpl* xi = x.impl();
  return make_op("gelu", x.shape(), std::move(out), {x.impl_ptr()}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xi->grad[i] += self.grad[i] * detail::gelu_grad_scalar(xi->data[i]);
  });
}

Tensor exp(const Tensor& x) {
  need(x, "exp");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(std::exp(static_cast<double>(px[i])));
  TensorImpl* xi = x.impl();
  return make_op("exp", x.shape(), std::move(out), {x.impl_ptr()}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xi->grad[i] += self.grad[i] * self.data[i];
  });
}

Tensor abs(const Tensor& x) {
  need(x, "abs");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(px[i]);
  TensorImpl* xi = x.impl();
  return make_op("abs", x.shape(), std::move(out), {x.impl_ptr()}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      float v = xi->data[i];
      float s = v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f);  // subgradient 0 at 0
      xi->grad[i] += self.grad[i] * s;
    }
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  need(a, "minimum");
  need(b, "minimum");
  check_same_shape("minimum", a, b);
  std::vector<float> out(a.impl()->data.size());
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] <= pb[i] ? pa[i] : pb[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return make_op("minimum", a.shape(), std::move(out), {a.impl_ptr(), b.impl_ptr()},
                 [ai, bi](TensorImpl& self) {
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     bool take_a = ai->data[i] <= bi->data[i];
                     if (take_a && ai->requires_grad) ai->grad[i] += self.grad[i];
                     if (!take_a && bi->requires_grad) bi->grad[i] += self.grad[i];
                   }
                 });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  need(x, "clamp");
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = px[i] < lo ? lo : (px[i] > hi ? hi : px[i]);
  TensorImpl* xi = x.impl();
  return make_op("clamp", x.shape(), std::move(out), {x.impl_ptr()},
                 [xi, lo, hi](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     float v = xi->data[i];
                     if (v >= lo && v <= hi) xi->grad[i] += self.grad[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// reductions and indexing
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  need(x, "sum_all");
  double acc = 0.0;
  const float* px = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  TensorImpl* xi = x.impl();
  return make_op("sum_all", {1}, {static_cast<float>(acc)}, {x.impl_ptr()},
                 [xi](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   float g = self.grad[0];
                   for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
                 });
}

Tensor mean_all(const Tensor& x) {
  need(x, "mean_all");
  double acc = 0.0;
  const float* px = x.data();
  std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  TensorImpl* xi = x.impl();
  return make_op("mean_all", {1}, {static_cast<float>(acc / static_cast<double>(n))},
                 {x.impl_ptr()}, [xi, n](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   float g = self.grad[0] / static_cast<float>(n);
                   for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
                 });
}

Tensor take_element(const Tensor& x, std::int64_t flat_index) {
  need(x, "take_element");
  if (flat_index < 0 || flat_index >= x.numel())
    throw std::out_of_range("take_element: index " + std::to_string(flat_index) +
                            " out of range for " + shape_str(x.shape()));
  TensorImpl* xi = x.impl();
  return make_op("take_element", {1}, {x.data()[flat_index]}, {x.impl_ptr()},
                 [xi, flat_index](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   xi->grad[static_cast<std::size_t>(flat_index)] += self.grad[0];
                 });
}

Tensor gather_per_row(const Tensor& x, std::span<const int> ids) {
  need(x, "gather_per_row");
  require_rank2("gather_per_row", x);
  int t = x.dim(0), v = x.dim(1);
  if (static_cast<int>(ids.size()) != t)
    throw ShapeError("gather_per_row: got " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(t) + " rows");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::out_of_range("gather_per_row: column id " + std::to_string(id) + " out of range");
  std::vector<float> out(static_cast<std::size_t>(t));
  for (int r = 0; r < t; ++r)
    out[static_cast<std::size_t>(r)] =
        x.data()[static_cast<std::size_t>(r) * v + ids[static_cast<std::size_t>(r)]];
  TensorImpl* xi = x.impl();
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return make_op("gather_per_row", {t}, std::move(out), {x.impl_ptr()},
                 [xi, v, ids_copy = std::move(ids_copy)](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   for (std::size_t r = 0; r < ids_copy.size(); ++r)
                     xi->grad[r * static_cast<std::size_t>(v) +
                              static_cast<std::size_t>(ids_copy[r])] += self.grad[r];
                 });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no inputs");
  for (const auto& p : parts) need(p, "concat_lastdim");
  Shape lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    int pd = pl.back();
    pl.pop_back();
    if (pl != lead)
      throw ShapeError("concat_lastdim: leading dimensions disagree, " +
                       shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total += pd;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::int64_t rows = 1;
  for (int d : lead) rows *= d;
  std::vector<float> out(static_cast<std::size_t>(rows) * total);
  std::vector<int> widths;
  widths.reserve(parts.size());
  {
    int off = 0;
    for (const auto& p : parts) {
      int w = p.shape().back();
      widths.push_back(w);
      for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * total + off, p.data() + r * w,
                    sizeof(float) * static_cast<std::size_t>(w));
      off += w;
    }
  }
  std::vector<std::shared_ptr<TensorImpl>> parent_ptrs;
  std::vector<TensorImpl*> raw;
  for (const auto& p : parts) {
    parent_ptrs.push_back(p.impl_ptr());
    raw.push_back(p.impl());
  }
  return make_op("concat_lastdim", std::move(out_shape), std::move(out), std::move(parent_ptrs),
                 [raw = std::move(raw), widths = std::move(widths), rows, total](TensorImpl& self) {
                   int off = 0;
                   for (std::size_t pi = 0; pi < raw.size(); ++pi) {
                     int w = widths[pi];
                     if (raw[pi]->requires_grad) {
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const float* g = self.grad.data() + r * total + off;
                         float* gp = raw[pi]->grad.data() + r * w;
                         for (int i = 0; i < w; ++i) gp[i] += g[i];
                       }
                     }
                     off += w;
                   }
                 });
}

Tensor slice_lastdim(const Tensor& x, int offset, int len) {
  need(x, "slice_lastdim");
  int n = last_dim(x);
  if (offset < 0 || len <= 0 || offset + len > n)
    throw ShapeError("slice_lastdim: window [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") outside last dim " + std::to_string(n));
  Shape out_shape = x.shape();
  out_shape.back() = len;
  std::int64_t rows = row_count(x);
  std::vector<float> out(static_cast<std::size_t>(rows) * len);
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, x.data() + r * n + offset,
                sizeof(float) * static_cast<std::size_t>(len));
  TensorImpl* xi = x.impl();
  return make_op("slice_lastdim", std::move(out_shape), std::move(out), {x.impl_ptr()},
                 [xi, offset, len, n, rows](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const float* g = self.grad.data() + r * len;
                     float* gx = xi->grad.data() + r * n + offset;
                     for (int i = 0; i < len; ++i) gx[i] += g[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// mask_fill
// ---------------------------------------------------------------------------

namespace {

void check_mask(const Tensor& x, const Tensor& mask) {
  const Shape& xs = x.shape();
  const Shape& ms = mask.shape();
  bool suffix = ms.size() <= xs.size();
  if (suffix)
    for (std::size_t i = 0; i < ms.size(); ++i)
      if (ms[ms.size() - 1 - i] != xs[xs.size() - 1 - i]) {
        suffix = false;
        break;
      }
  if (!suffix)
    throw ShapeError("mask_fill: mask shape " + shape_str(ms) +
                     " is not a trailing suffix of " + shape_str(xs));
  const float* pm = mask.data();
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (pm[i] != 0.0f && pm[i] != 1.0f)
      throw std::invalid_argument("mask_fill: mask must be 0/1 valued");
  if (mask.requires_grad())
    throw std::invalid_argument("mask_fill: mask is not differentiable");
}

}  // namespace

Tensor mask_fill(const Tensor& x, const Tensor& mask, const Tensor& fill) {
  need(x, "mask_fill");
  need(mask, "mask_fill");
  need(fill, "mask_fill");
  if (fill.numel() != 1)
    throw ShapeError("mask_fill: fill must have one element, got " + shape_str(fill.shape()));
  check_mask(x, mask);
  float fv = fill.data()[0];
  std::int64_t mn = mask.numel();
  std::vector<float> out(x.impl()->data.size());
  const float* px = x.data();
  const float* pm = mask.data();
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[static_cast<std::size_t>(i)] = pm[i % mn] != 0.0f ? px[i] : fv;
  TensorImpl* xi = x.impl();
  TensorImpl* mi = mask.impl();
  TensorImpl* fi = fill.impl();
  return make_op("mask_fill", x.shape(), std::move(out),
                 {x.impl_ptr(), mask.impl_ptr(), fill.impl_ptr()},
                 [xi, mi, fi, mn](TensorImpl& self) {
                   const auto& g = self.grad;
                   const float* pm = mi->data.data();
                   if (xi->requires_grad)
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (pm[static_cast<std::int64_t>(i) % mn] != 0.0f) xi->grad[i] += g[i];
                   if (fi->requires_grad) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (pm[static_cast<std::int64_t>(i) % mn] == 0.0f) acc += g[i];
                     fi->grad[0] += static_cast<float>(acc);
                   }
                 });
}

Tensor mask_fill(const Tensor& x, const Tensor& mask, float fill) {
  return mask_fill(x, mask, Tensor::scalar(fill));
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> row_mask, Reduction reduction) {
  need(logits, "cross_entropy");
  require_rank2("cross_entropy", logits);
  int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t)
    throw ShapeError("cross_entropy: got " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(t) + " rows");
  if (!row_mask.empty() && static_cast<int>(row_mask.size()) != t)
    throw ShapeError("cross_entropy: row mask length " + std::to_string(row_mask.size()) +
                     " does not match " + std::to_string(t) + " rows");
  for (int id : targets)
    if (id < 0 || id >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(id) + " out of range");

  std::vector<std::uint8_t> mask_copy;
  if (row_mask.empty())
    mask_copy.assign(static_cast<std::size_t>(t), 1);
  else
    mask_copy.assign(row_mask.begin(), row_mask.end());

  std::int64_t count = 0;
  for (auto m : mask_copy) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: no rows selected by mask");

  double total = 0.0;
  for (int r = 0; r < t; ++r) {
    if (!mask_copy[static_cast<std::size_t>(r)]) continue;
    const float* row = logits.data() + static_cast<std::size_t>(r) * v;
    total += detail::logsumexp_row(row, v) - row[targets[static_cast<std::size_t>(r)]];
  }
  if (reduction == Reduction::Mean) total /= static_cast<double>(count);

  TensorImpl* li = logits.impl();
  std::vector<int> targets_copy(targets.begin(), targets.end());
  bool mean = reduction == Reduction::Mean;
  return make_op(
      "cross_entropy", {1}, {static_cast<float>(total)}, {logits.impl_ptr()},
      [li, v, t, mean, count, targets_copy = std::move(targets_copy),
       mask_copy = std::move(mask_copy)](TensorImpl& self) {
        if (!li->requires_grad) return;
        double w = self.grad[0];
        if (mean) w /= static_cast<double>(count);
        std::vector<float> soft(static_cast<std::size_t>(v));
        for (int r = 0; r < t; ++r) {
          if (!mask_copy[static_cast<std::size_t>(r)]) continue;
          const float* row = li->data.data() + static_cast<std::size_t>(r) * v;
          detail::softmax_row(row, soft.data(), v);
          float* gx = li->grad.data() + static_cast<std::size_t>(r) * v;
          int tgt = targets_copy[static_cast<std::size_t>(r)];
          for (int i = 0; i < v; ++i) {
            double p = soft[static_cast<std::size_t>(i)];
            if (i == tgt) p -= 1.0;
            gx[i] += static_cast<float>(w * p);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// rotary encoding
// ---------------------------------------------------------------------------

RopeTable::RopeTable(int head_dim_, int max_positions_, double base)
    : head_dim(head_dim_), max_positions(max_positions_) {
  if (head_dim <= 0 || head_dim % 2 != 0)
    throw std::invalid_argument("RopeTable: head_dim must be positive and even");
  if (max_positions <= 0) throw std::invalid_argument("RopeTable: max_positions must be positive");
  int half = head_dim / 2;
  cos_tab.resize(static_cast<std::size_t>(max_positions) * half);
  sin_tab.resize(static_cast<std::size_t>(max_positions) * half);
  for (int p = 0; p < max_positions; ++p) {
    for (int i = 0; i < half; ++i) {
      double freq = std::pow(base, -2.0 * i / head_dim);
      double angle = static_cast<double>(p) * freq;
      cos_tab[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::cos(angle));
      sin_tab[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

Tensor rope(const Tensor& x, const std::shared_ptr<const RopeTable>& table, int start_pos) {
  need(x, "rope");
  require_rank2("rope", x);
  if (!table) throw std::invalid_argument("rope: null table");
  int t = x.dim(0), d = x.dim(1);
  if (d != table->head_dim)
    throw ShapeError("rope: tensor width " + std::to_string(d) + " does not match table dim " +
                     std::to_string(table->head_dim));
  if (start_pos < 0 || start_pos + t > table->max_positions)
    throw std::out_of_range("rope: positions [" + std::to_string(start_pos) + ", " +
                            std::to_string(start_pos + t) + ") outside table of " +
                            std::to_string(table->max_positions));
  int half = d / 2;
  std::vector<float> out(x.impl()->data.size());
  std::memcpy(out.data(), x.data(), sizeof(float) * out.size());
  for (int r = 0; r < t; ++r)
    detail::rope_row(out.data() + static_cast<std::size_t>(r) * d,
                     table->cos_tab.data() + static_cast<std::size_t>(start_pos + r) * half,
                     table->sin_tab.data() + static_cast<std::size_t>(start_pos + r) * half, d, +1);
  TensorImpl* xi = x.impl();
  return make_op("rope", x.shape(), std::move(out), {x.impl_ptr()},
                 [xi, table, start_pos, t, d, half](TensorImpl& self) {
                   if (!xi->requires_grad) return;
                   std::vector<float> row(static_cast<std::size_t>(d));
                   for (int r = 0; r < t; ++r) {
                     std::memcpy(row.data(), self.grad.data() + static_cast<std::size_t>(r) * d,
                                 sizeof(float) * static_cast<std::size_t>(d));
                     detail::rope_row(
                         row.data(),
                         table->cos_tab.data() + static_cast<std::size_t>(start_pos + r) * half,
                         table->sin_tab.data() + static_cast<std::size_t>(start_pos + r) * half, d,
                         -1);
                     float* gx = xi->grad.data() + static_cast<std::size_t>(r) * d;
                     for (int i = 0; i < d; ++i) gx[i] += row[static_cast<std::size_t>(i)];
                   }
                 });
}

// ---------------------------------------------------------------------------
// dispatcher
// ---------------------------------------------------------------------------

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::SoftmaxLastDim: return "softmax_lastdim";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::EmbeddingLookup: return "embedding_lookup";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Scale: return "scale";
    case OpKind::MaskFill: return "mask_fill";
    case OpKind::ConcatLastDim: return "concat_lastdim";
  }
  return "unknown";
}

namespace {

void expect_arity(OpKind kind, const std::vector<Tensor>& inputs, std::size_t n) {
  if (inputs.size() != n)
    throw std::invalid_argument(std::string("forward_primitive(") + op_kind_name(kind) +
                                "): expected " + std::to_string(n) + " inputs, got " +
                                std::to_string(inputs.size()));
}

std::vector<int> as_int_ids(const Tensor& t, const char* what) {
  std::vector<int> ids(static_cast<std::size_t>(t.numel()));
  const float* p = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    float v = p[i];
    if (v != std::floor(v))
      throw std::invalid_argument(std::string(what) + ": expected integer values, got " +
                                  std::to_string(v));
    ids[static_cast<std::size_t>(i)] = static_cast<int>(v);
  }
  return ids;
}

}  // namespace

Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs) {
  switch (kind) {
    case OpKind::Matmul:
      expect_arity(kind, inputs, 2);
      return matmul(inputs[0], inputs[1]);
    case OpKind::Add:
      expect_arity(kind, inputs, 2);
      return add(inputs[0], inputs[1]);
    case OpKind::Mul:
      expect_arity(kind, inputs, 2);
      return mul(inputs[0], inputs[1]);
    case OpKind::SoftmaxLastDim:
      expect_arity(kind, inputs, 1);
      return softmax_lastdim(inputs[0]);
    case OpKind::LayerNorm:
      expect_arity(kind, inputs, 3);
      return layernorm(inputs[0], inputs[1], inputs[2]);
    case OpKind::EmbeddingLookup: {
      expect_arity(kind, inputs, 2);
      auto ids = as_int_ids(inputs[1], "embedding_lookup ids");
      return embedding_lookup(inputs[0], ids);
    }
    case OpKind::CrossEntropy: {
      expect_arity(kind, inputs, 2);
      auto targets = as_int_ids(inputs[1], "cross_entropy targets");
      return cross_entropy(inputs[0], targets);
    }
    case OpKind::Scale:
      expect_arity(kind, inputs, 2);
      return scale(inputs[0], inputs[1]);
    case OpKind::MaskFill:
      expect_arity(kind, inputs, 3);
      return mask_fill(inputs[0], inputs[1], inputs[2]);
    case OpKind::ConcatLastDim:
      if (inputs.empty())
        throw std::invalid_argument("forward_primitive(concat_lastdim): no inputs");
      return concat_lastdim(inputs);
  }
  throw std::invalid_argument("forward_primitive: unknown op kind");
}

}  // namespace rlkv
