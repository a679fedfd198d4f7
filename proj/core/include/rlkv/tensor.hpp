#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlkv {

// Dense float32 row-major tensors with reverse-mode autodiff.
//
// Every op validates shapes exactly (the only broadcast anywhere is the mask
// argument of mask_fill) and throws ShapeError naming the op and the offending
// shapes. Internally all reductions accumulate in double and round to float
// once per output element, which keeps independently-ordered evaluation paths
// of the same math within a few ulp of each other.

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);  // shape {1}

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  int dim(int i) const;

  float* data();
  const float* data() const;
  float item() const;              // requires numel() == 1
  float at(int i) const;           // flat index
  float at2(int i, int j) const;   // rank-2 convenience

  bool requires_grad() const;
  // Leaf-only toggle: flipping grad tracking on an op output would detach it
  // from its recorded parents.
  void set_requires_grad(bool v);

  bool grad_allocated() const;
  const float* grad_data() const;
  float* grad_data();
  Tensor grad() const;  // copy of the gradient as a fresh leaf (no grad tracking)
  void zero_grad();

  std::int64_t node_id() const;
  const char* op_name() const;
  bool is_leaf() const;

  Tensor detach() const;  // fresh leaf sharing nothing with the graph

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Scoped switch that disables graph recording (forward-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Runs reverse-mode accumulation from a scalar loss. Gradient buffers of every
// reachable grad-tracked node are zeroed first, so each call stands alone;
// read out what you need before the next backward() on the same leaves.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& x, float c);                // constant factor
Tensor scale(const Tensor& x, const Tensor& s);        // s has shape {1}, grads flow to both
Tensor one_minus(const Tensor& x);                     // 1 - x
Tensor matmul(const Tensor& a, const Tensor& b);       // [m,k] @ [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);    // [m,k] @ [n,k]^T -> [m,n]
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);                           // d|x|/dx at 0 taken as 0
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, float lo, float hi);
Tensor sum_all(const Tensor& x);                       // -> {1}
Tensor mean_all(const Tensor& x);                      // -> {1}
Tensor take_element(const Tensor& x, std::int64_t flat_index);     // -> {1}
Tensor gather_per_row(const Tensor& x, std::span<const int> ids);  // [t,v] -> {t}, y[t]=x[t][ids[t]]
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, int offset, int len);

// out = mask ? x : fill. mask entries must be exactly 0 or 1; mask shape must
// equal x's shape or a trailing suffix of it (repeated over leading dims).
Tensor mask_fill(const Tensor& x, const Tensor& mask, float fill);
Tensor mask_fill(const Tensor& x, const Tensor& mask, const Tensor& fill);

enum class Reduction { Mean, Sum };

// Mean (or sum) of -log softmax(logits)[target] over rows where row_mask is
// nonzero. row_mask may be empty meaning all rows count. Throws if no row
// is selected.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> row_mask = {},
                     Reduction reduction = Reduction::Mean);

// Rotary tables are plain constant data shared by the training graph and the
// incremental decoder so both see bit-identical angles.
struct RopeTable {
  int head_dim = 0;
  int max_positions = 0;
  std::vector<float> cos_tab;  // [max_positions, head_dim/2]
  std::vector<float> sin_tab;

  RopeTable() = default;
  RopeTable(int head_dim, int max_positions, double base = 10000.0);
};

// Applies rotary position encoding to rows [start_pos, start_pos + nrows) of a
// [nrows, head_dim] tensor.
Tensor rope(const Tensor& x, const std::shared_ptr<const RopeTable>& table, int start_pos);

// ---------------------------------------------------------------------------
// generic dispatch over the primitive set, used by property tests
// ---------------------------------------------------------------------------

enum class OpKind {
  Matmul,
  Add,
  Mul,
  SoftmaxLastDim,
  LayerNorm,
  EmbeddingLookup,
  CrossEntropy,
  Scale,
  MaskFill,
  ConcatLastDim,
};

const char* op_kind_name(OpKind kind);

// Uniform entry point: integer-valued operands (lookup ids, targets) are
// passed as float tensors and validated. CrossEntropy reduces with Mean over
// all rows; MaskFill takes (x, mask, fill{1}).
Tensor forward_primitive(OpKind kind, const std::vector<Tensor>& inputs);

}  // namespace rlkv
