#include "charbot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "charbot/errors.hpp"

namespace charbot {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2)
    throw ShapeMismatch(std::string(who) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

thread_local Graph* g_current_graph = nullptr;

// --- raw kernels, all accumulate into c ---

// c[m x p] += a[m x n] * b[n x p]
void mm_nn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double av = arow[k];
      const double* brow = b + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x p] += a[m x n] * b[p x n]^T
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b + j * n;
      double s0 = 0.0, s1 = 0.0;
      std::size_t k = 0;
      for (; k + 1 < n; k += 2) {
        s0 += arow[k] * brow[k];
        s1 += arow[k + 1] * brow[k + 1];
      }
      if (k < n) s0 += arow[k] * brow[k];
      crow[j] += s0 + s1;
    }
  }
}

// c[n x p] += a[m x n]^T * b[m x p]
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t p) {
  for (std::size_t k = 0; k < m; ++k) {
    const double* arow = a + k * n;
    const double* brow = b + k * p;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

bool any_requires_grad(const Tensor& a) { return a.requires_grad(); }
bool any_requires_grad(const Tensor& a, const Tensor& b) {
  return a.requires_grad() || b.requires_grad();
}

// Records a node when recording is active. `out` inherits requires_grad.
template <typename... Inputs>
void maybe_record(const char* tag, Tensor out, std::function<void()> backward_fn,
                  const Inputs&... inputs) {
  const bool rg = (inputs.requires_grad() || ...);
  if (!rg) return;
  out.set_requires_grad(true);
  Graph* g = Graph::current();
  if (g) g->record(tag, {inputs...}, out, std::move(backward_fn));
}

}  // namespace

// --- Tensor -----------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
  if (data.size() != shape_numel(shape))
    throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return impl_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeMismatch("item(): tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw Error("grad(): no gradient has been accumulated");
  return impl_->grad;
}

std::vector<double>& Tensor::grad_buffer() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::vector<double> Tensor::grad_or_zero() const {
  if (has_grad()) return impl_->grad;
  return std::vector<double>(impl_->data.size(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const std::string& what) const {
  if (!all_finite()) throw NonFiniteTensor(what + ": tensor contains NaN or Inf");
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data, false);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// --- Graph ------------------------------------------------------------------

Graph::Graph() {
  prev_ = g_current_graph;
  g_current_graph = this;
}

Graph::~Graph() { g_current_graph = prev_; }

Graph* Graph::current() { return g_current_graph; }

void Graph::record(const char* tag, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward_fn) {
  nodes_.push_back(Node{tag, std::move(inputs), std::move(output), std::move(backward_fn)});
}

void Graph::backward_from(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw NonScalarLoss("backward: loss must be a scalar tensor");

  // Adjoints of produced (non-leaf) tensors are transient per call; leaves
  // keep accumulating. A tensor is a leaf here iff no node outputs it.
  std::unordered_set<const void*> produced;
  produced.reserve(nodes_.size());
  for (auto& n : nodes_) {
    auto* impl = n.output.impl();
    impl->grad.assign(impl->data.size(), 0.0);
    produced.insert(n.output.id());
  }
  if (!produced.count(loss.id())) return;  // constant loss: nothing to propagate

  loss.impl()->grad = {1.0};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.has_grad()) it->backward_fn();
  }
}

void backward(const Tensor& loss, Graph& graph) { graph.backward_from(loss); }

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  if (b.rows() != n)
    throw ShapeMismatch("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  Tensor c = Tensor::zeros({m, p});
  mm_nn_acc(a.data(), b.data(), c.data(), m, n, p);

  maybe_record(
      "matmul", c,
      [a, b, c, m, n, p]() mutable {
        const double* dc = c.grad().data();
        if (a.requires_grad()) mm_nt_acc(dc, b.data(), a.grad_buffer().data(), m, p, n);
        if (b.requires_grad()) mm_tn_acc(a.data(), dc, b.grad_buffer().data(), m, n, p);
      },
      a, b);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), n = a.cols(), p = b.rows();
  if (b.cols() != n)
    throw ShapeMismatch("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()) + "^T");
  Tensor c = Tensor::zeros({m, p});
  mm_nt_acc(a.data(), b.data(), c.data(), m, n, p);

  maybe_record(
      "matmul_nt", c,
      [a, b, c, m, n, p]() mutable {
        const double* dc = c.grad().data();
        if (a.requires_grad()) mm_nn_acc(dc, b.data(), a.grad_buffer().data(), m, p, n);
        if (b.requires_grad()) mm_tn_acc(dc, a.data(), b.grad_buffer().data(), m, p, n);
      },
      a, b);
  return c;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(who) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) c.at(i) = a(i) + b(i);
  maybe_record(
      "add", c,
      [a, b, c, n]() mutable {
        const double* dc = c.grad().data();
        if (a.requires_grad()) {
          double* da = a.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
        }
        if (b.requires_grad()) {
          double* db = b.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) db[i] += dc[i];
        }
      },
      a, b);
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) c.at(i) = a(i) - b(i);
  maybe_record(
      "sub", c,
      [a, b, c, n]() mutable {
        const double* dc = c.grad().data();
        if (a.requires_grad()) {
          double* da = a.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) da[i] += dc[i];
        }
        if (b.requires_grad()) {
          double* db = b.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) db[i] -= dc[i];
        }
      },
      a, b);
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) c.at(i) = a(i) * b(i);
  maybe_record(
      "mul", c,
      [a, b, c, n]() mutable {
        const double* dc = c.grad().data();
        if (a.requires_grad()) {
          double* da = a.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) da[i] += dc[i] * b(i);
        }
        if (b.requires_grad()) {
          double* db = b.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) db[i] += dc[i] * a(i);
        }
      },
      a, b);
  return c;
}

Tensor scale(const Tensor& a, double k) {
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) c.at(i) = a(i) * k;
  maybe_record(
      "scale", c,
      [a, c, k, n]() mutable {
        const double* dc = c.grad().data();
        double* da = a.grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) da[i] += dc[i] * k;
      },
      a);
  return c;
}

Tensor add_bias_row(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_bias_row");
  if (bias.ndim() != 1 || bias.numel() != x.cols())
    throw ShapeMismatch("add_bias_row: bias " + shape_str(bias.shape()) + " does not match " +
                        shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Tensor c = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = x(i, j) + bias(j);
  maybe_record(
      "add_bias_row", c,
      [x, bias, c, m, n]() mutable {
        const double* dc = c.grad().data();
        if (x.requires_grad()) {
          double* dx = x.grad_buffer().data();
          for (std::size_t i = 0; i < m * n; ++i) dx[i] += dc[i];
        }
        if (bias.requires_grad()) {
          double* db = bias.grad_buffer().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) db[j] += dc[i * n + j];
        }
      },
      x, bias);
  return c;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
  Tensor c = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a(i);
    c.at(i) = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  maybe_record(
      "gelu", c,
      [a, c, n]() mutable {
        const double* dc = c.grad().data();
        double* da = a.grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) {
          const double x = a(i);
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          da[i] += dc[i] * (cdf + x * pdf);
        }
      },
      a);
  return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeMismatch("layer_norm: gain/bias length must equal feature dim");
  Tensor c = Tensor::zeros({m, n});
  // Saved statistics for the backward pass.
  auto mean = std::make_shared<std::vector<double>>(m);
  auto rstd = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = (row[j] - mu) * rs * gain(j) + bias(j);
  }
  maybe_record(
      "layer_norm", c,
      [x, gain, bias, c, mean, rstd, m, n]() mutable {
        const double* dc = c.grad().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = x.data() + i * n;
          const double* drow = dc + i * n;
          const double mu = (*mean)[i];
          const double rs = (*rstd)[i];
          if (x.requires_grad()) {
            // dxhat = dy * g; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double xh = (row[j] - mu) * rs;
              const double dxh = drow[j] * gain(j);
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh;
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            double* dx = x.grad_buffer().data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
              const double xh = (row[j] - mu) * rs;
              const double dxh = drow[j] * gain(j);
              dx[j] += rs * (dxh - sum_dxh * inv_n - xh * sum_dxh_xh * inv_n);
            }
          }
          if (gain.requires_grad()) {
            double* dg = gain.grad_buffer().data();
            for (std::size_t j = 0; j < n; ++j) dg[j] += drow[j] * (row[j] - mu) * rs;
          }
          if (bias.requires_grad()) {
            double* db = bias.grad_buffer().data();
            for (std::size_t j = 0; j < n; ++j) db[j] += drow[j];
          }
        }
      },
      x, gain, bias);
  return c;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_rows");
  const std::size_t n = table.cols();
  const std::size_t rows = table.rows();
  Tensor c = Tensor::zeros({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= rows)
      throw TargetOutOfRange("embedding_rows: id " + std::to_string(id) + " outside table of " +
                             std::to_string(rows) + " rows");
    std::copy_n(table.data() + static_cast<std::size_t>(id) * n, n, c.data() + i * n);
  }
  maybe_record(
      "embedding_rows", c,
      [table, c, ids, n]() mutable {
        const double* dc = c.grad().data();
        double* dt = table.grad_buffer().data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* drow = dt + static_cast<std::size_t>(ids[i]) * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += dc[i * n + j];
        }
      },
      table);
  return c;
}

Tensor causal_softmax_rows(const Tensor& scores) {
  require_2d(scores, "causal_softmax_rows");
  const std::size_t m = scores.rows(), n = scores.cols();
  Tensor c = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t limit = std::min(i + 1, n);
    const double* row = scores.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* crow = c.data() + i * n;
    for (std::size_t j = 0; j < limit; ++j) {
      crow[j] = std::exp(row[j] - mx);
      denom += crow[j];
    }
    for (std::size_t j = 0; j < limit; ++j) crow[j] /= denom;
  }
  maybe_record(
      "causal_softmax_rows", c,
      [scores, c, m, n]() mutable {
        const double* dc = c.grad().data();
        double* ds = scores.grad_buffer().data();
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t limit = std::min(i + 1, n);
          const double* p = c.data() + i * n;
          const double* dp = dc + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < limit; ++j) dot += dp[j] * p[j];
          double* drow = ds + i * n;
          for (std::size_t j = 0; j < limit; ++j) drow[j] += p[j] * (dp[j] - dot);
        }
      },
      scores);
  return c;
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) s += a(i);
  Tensor c = Tensor::scalar(s);
  maybe_record(
      "sum_all", c,
      [a, c, n]() mutable {
        const double d = c.grad()[0];
        double* da = a.grad_buffer().data();
        for (std::size_t i = 0; i < n; ++i) da[i] += d;
      },
      a);
  return c;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeMismatch("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor c(std::move(shape), a.values());
  maybe_record(
      "reshape", c,
      [a, c]() mutable {
        const double* dc = c.grad().data();
        double* da = a.grad_buffer().data();
        for (std::size_t i = 0; i < c.numel(); ++i) da[i] += dc[i];
      },
      a);
  return c;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width) {
  require_2d(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (start + width > n)
    throw ShapeMismatch("slice_cols: [" + std::to_string(start) + ", " +
                        std::to_string(start + width) + ") outside " + shape_str(x.shape()));
  Tensor c = Tensor::zeros({m, width});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data() + i * n + start, width, c.data() + i * width);
  maybe_record(
      "slice_cols", c,
      [x, c, start, width, m, n]() mutable {
        const double* dc = c.grad().data();
        double* dx = x.grad_buffer().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < width; ++j) dx[i * n + start + j] += dc[i * width + j];
      },
      x);
  return c;
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_cols: no inputs");
  const std::size_t m = xs.front().rows();
  std::size_t total = 0;
  for (const Tensor& t : xs) {
    require_2d(t, "concat_cols");
    if (t.rows() != m) throw ShapeMismatch("concat_cols: row counts differ");
    total += t.cols();
  }
  Tensor c = Tensor::zeros({m, total});
  std::size_t off = 0;
  for (const Tensor& t : xs) {
    const std::size_t w = t.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(t.data() + i * w, w, c.data() + i * total + off);
    off += w;
  }

  bool rg = false;
  for (const Tensor& t : xs) rg = rg || t.requires_grad();
  if (rg) {
    Tensor out = c;
    out.set_requires_grad(true);
    Graph* g = Graph::current();
    if (g) {
      std::vector<Tensor> inputs = xs;
      g->record("concat_cols", inputs, out, [xs, c, m, total]() mutable {
        const double* dc = c.grad().data();
        std::size_t off = 0;
        for (Tensor t : xs) {
          const std::size_t w = t.cols();
          if (t.requires_grad()) {
            double* dt = t.grad_buffer().data();
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < w; ++j) dt[i * w + j] += dc[i * total + off + j];
          }
          off += w;
        }
      });
    }
  }
  return c;
}

std::vector<double> softmax_row(const double* logits, std::size_t n) {
  double mx = logits[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  std::vector<double> p(n);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

double log_softmax_at(const double* logits, std::size_t n, std::size_t index) {
  double mx = logits[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) denom += std::exp(logits[i] - mx);
  return logits[index] - mx - std::log(denom);
}

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
  if (logits.ndim() != 1)
    throw ShapeMismatch("softmax_cross_entropy: logits must be 1-D, got " +
                        shape_str(logits.shape()));
  const std::size_t v = logits.numel();
  if (target < 0 || static_cast<std::size_t>(target) >= v)
    throw TargetOutOfRange("softmax_cross_entropy: target " + std::to_string(target) +
                           " outside vocabulary of " + std::to_string(v));
  const double loss = -log_softmax_at(logits.data(), v, static_cast<std::size_t>(target));
  Tensor c = Tensor::scalar(loss);
  maybe_record(
      "softmax_cross_entropy", c,
      [logits, c, target, v]() mutable {
        const double d = c.grad()[0];
        std::vector<double> p = softmax_row(logits.data(), v);
        double* dl = logits.grad_buffer().data();
        for (std::size_t i = 0; i < v; ++i)
          dl[i] += d * (p[i] - (static_cast<int>(i) == target ? 1.0 : 0.0));
      },
      logits);
  return c;
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  require_2d(logits, "masked_cross_entropy");
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows || mask.size() != rows)
    throw ShapeMismatch("masked_cross_entropy: targets/mask length must equal row count");
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw TargetOutOfRange("masked_cross_entropy: target " + std::to_string(t) + " at row " +
                             std::to_string(i));
    total -= log_softmax_at(logits.data() + i * v, v, static_cast<std::size_t>(t));
    ++counted;
  }
  if (counted == 0) throw ValidationError("masked_cross_entropy: mask selects no rows");
  Tensor c = Tensor::scalar(total / static_cast<double>(counted));
  maybe_record(
      "masked_cross_entropy", c,
      [logits, c, targets, mask, rows, v, counted]() mutable {
        const double d = c.grad()[0] / static_cast<double>(counted);
        double* dl = logits.grad_buffer().data();
        for (std::size_t i = 0; i < rows; ++i) {
          if (!mask[i]) continue;
          std::vector<double> p = softmax_row(logits.data() + i * v, v);
          double* drow = dl + i * v;
          for (std::size_t j = 0; j < v; ++j)
            drow[j] += d * (p[j] - (static_cast<int>(j) == targets[i] ? 1.0 : 0.0));
        }
      },
      logits);
  return c;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& at,
                        double h) {
  if (h <= 0.0) throw ValidationError("finite_diff_grad: h must be positive");
  Tensor probe = at.clone();
  probe.set_requires_grad(false);
  Tensor out = Tensor::zeros(at.shape());
  for (std::size_t i = 0; i < at.numel(); ++i) {
    const double orig = probe(i);
    probe.at(i) = orig + h;
    const double hi = f(probe);
    probe.at(i) = orig - h;
    const double lo = f(probe);
    probe.at(i) = orig;
    out.at(i) = (hi - lo) / (2.0 * h);
  }
  return out;
}

}  // namespace charbot
