#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace charbot {

namespace detail {
struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major f64 tensor. Copies are shallow (shared storage); use
// clone() for a deep copy. Gradients live next to the data and accumulate
// additively across backward passes until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double item() const;
  double operator()(std::size_t i) const { return impl_->data[i]; }
  double operator()(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }
  double& at(std::size_t i) { return impl_->data[i]; }
  double& at(std::size_t i, std::size_t j) { return impl_->data[i * cols() + j]; }

  const std::vector<double>& values() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const double* data() const { return impl_->data.data(); }
  double* data() { return impl_->data.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  // Creates a zero-filled buffer on first use.
  std::vector<double>& grad_buffer();
  std::vector<double> grad_or_zero() const;
  void zero_grad() { impl_->grad.clear(); }

  bool all_finite() const;
  void check_finite(const std::string& what) const;

  Tensor clone() const;

  // Identity of the underlying storage; stable for the tensor's lifetime.
  const void* id() const { return impl_.get(); }

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Append-on-forward, reverse-on-backward tape. Creating a Graph makes it the
// current recording target for the constructing thread; destruction restores
// the previous one. Ops record themselves only while a graph is current and
// at least one input requires grad.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current();

  std::size_t node_count() const { return nodes_.size(); }
  const char* node_tag(std::size_t i) const { return nodes_[i].tag; }

  void record(const char* tag, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward_fn);

  // Reverse sweep from a scalar loss node. Intermediate adjoints are reset on
  // every call; leaf gradients accumulate across calls.
  void backward_from(const Tensor& loss);

 private:
  struct Node {
    const char* tag;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  Graph* prev_ = nullptr;
};

void backward(const Tensor& loss, Graph& graph);

// --- differentiable ops -----------------------------------------------------

// c[i][j] = sum_k a[i][k] * b[k][j]
Tensor matmul(const Tensor& a, const Tensor& b);
// c = a * b^T  with a:[m x n], b:[p x n] -> c:[m x p]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// x:[m x n] + bias:[n], broadcast over rows. The only broadcast in the library.
Tensor add_bias_row(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& a);
// Row-wise layer norm with per-feature gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Gathers table rows; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Row i is softmaxed over columns 0..i; later columns get probability zero.
Tensor causal_softmax_rows(const Tensor& scores);
Tensor sum_all(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width);
Tensor concat_cols(const std::vector<Tensor>& xs);

// -log softmax(logits)[target], max-subtracted for stability. 1-D logits.
Tensor softmax_cross_entropy(const Tensor& logits, int target);
// Mean cross entropy over rows with mask!=0. logits:[L x V].
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Independent of the tape; the oracle half of every gradient check.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& at,
                        double h);

// Non-differentiating helpers.
std::vector<double> softmax_row(const double* logits, std::size_t n);
double log_softmax_at(const double* logits, std::size_t n, std::size_t index);

}  // namespace charbot
