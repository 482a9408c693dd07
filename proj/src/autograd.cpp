#include "gcd/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace gcd::ad {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(const Mat&)>;

Var make_result(Mat value, std::vector<NodePtr> parents, BackwardFn fn) {
  Var out(std::move(value), false);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(fn);
  }
  return out;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

void Node::add_grad(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double v, bool requires_grad) {
  Mat m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m), requires_grad);
}

Mat Var::grad() const {
  if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar Var");
  return node_->value(0, 0);
}

void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("backward() requires a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->add_grad(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(n->grad);
  }
  // Intermediate gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var detach(const Var& x) { return Var(x.value(), false); }
Var constant(Mat value) { return Var(std::move(value), false); }

// --- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Mat out = a.value() * b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g * bn->value.transpose());
    if (bn->requires_grad) bn->add_grad(an->value.transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Mat out = a.value() * b.value().transpose();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g * bn->value);
    if (bn->requires_grad) bn->add_grad(g.transpose() * an->value);
  });
}

Var transpose(const Var& a) {
  Mat out = a.value().transpose();
  auto an = a.node();
  return make_result(std::move(out), {an}, [an](const Mat& g) { an->add_grad(g.transpose()); });
}

// --- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Mat out = a.value() + b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g);
    if (bn->requires_grad) bn->add_grad(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Mat out = a.value() - b.value();
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g);
    if (bn->requires_grad) bn->add_grad(-g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Mat out = a.value().cwiseProduct(b.value());
  auto an = a.node(), bn = b.node();
  return make_result(std::move(out), {an, bn}, [an, bn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->add_grad(g.cwiseProduct(an->value));
  });
}

Var scale(const Var& a, double s) {
  Mat out = a.value() * s;
  auto an = a.node();
  return make_result(std::move(out), {an}, [an, s](const Mat& g) { an->add_grad(g * s); });
}

Var add_scalar(const Var& a, double s) {
  Mat out = a.value().array() + s;
  auto an = a.node();
  return make_result(std::move(out), {an}, [an](const Mat& g) { an->add_grad(g); });
}

Var exp(const Var& a) {
  Mat out = a.value().array().exp();
  auto an = a.node();
  Mat y = out;
  return make_result(std::move(out), {an}, [an, y](const Mat& g) { an->add_grad(g.cwiseProduct(y)); });
}

Var log(const Var& a) {
  Mat out = a.value().array().log();
  auto an = a.node();
  return make_result(std::move(out), {an},
                     [an](const Mat& g) { an->add_grad(g.array() / an->value.array()); });
}

Var softplus(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  auto an = a.node();
  return make_result(std::move(out), {an}, [an](const Mat& g) {
    Mat sig = an->value.unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    an->add_grad(g.cwiseProduct(sig));
  });
}

Var gelu(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  auto an = a.node();
  return make_result(std::move(out), {an}, [an](const Mat& g) {
    Mat d = an->value.unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    });
    an->add_grad(g.cwiseProduct(d));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  auto an = a.node(), rn = row.node();
  return make_result(std::move(out), {an, rn}, [an, rn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g);
    if (rn->requires_grad) rn->add_grad(g.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: shape mismatch");
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  auto an = a.node(), rn = row.node();
  return make_result(std::move(out), {an, rn}, [an, rn](const Mat& g) {
    if (an->requires_grad) an->add_grad(g.array().rowwise() * rn->value.row(0).array());
    if (rn->requires_grad) rn->add_grad(g.cwiseProduct(an->value).colwise().sum());
  });
}

Var scale_rows(const Var& a, const Vec& w) {
  if (w.size() != a.rows()) throw std::invalid_argument("scale_rows: weight length mismatch");
  Mat out = a.value().array().colwise() * w.array();
  auto an = a.node();
  return make_result(std::move(out), {an},
                     [an, w](const Mat& g) { an->add_grad(g.array().colwise() * w.array()); });
}

// --- reductions -----------------------------------------------------------

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  auto an = a.node();
  return make_result(std::move(out), {an}, [an](const Mat& g) {
    an->add_grad(Mat::Constant(an->value.rows(), an->value.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw std::invalid_argument("mean_rows of empty matrix");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Mat out = a.value().colwise().sum() * inv;
  auto an = a.node();
  return make_result(std::move(out), {an}, [an, inv](const Mat& g) {
    Mat full = g.replicate(an->value.rows(), 1) * inv;
    an->add_grad(full);
  });
}

Var row_sum(const Var& a) {
  Mat out = a.value().rowwise().sum();
  auto an = a.node();
  return make_result(std::move(out), {an},
                     [an](const Mat& g) { an->add_grad(g.replicate(1, an->value.cols())); });
}

Var weighted_sum(const Var& a, const Vec& w) {
  if (a.cols() != 1 || a.rows() != w.size()) throw std::invalid_argument("weighted_sum: shape mismatch");
  Mat out(1, 1);
  out(0, 0) = a.value().col(0).dot(w);
  auto an = a.node();
  return make_result(std::move(out), {an}, [an, w](const Mat& g) {
    Mat d = w * g(0, 0);
    an->add_grad(d);
  });
}

// --- row-wise nonlinear ---------------------------------------------------

namespace {

Mat softmax_value(const Mat& x) {
  Mat y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

}  // namespace

Var softmax_rows(const Var& a) {
  Mat y = softmax_value(a.value());
  auto an = a.node();
  Mat saved = y;
  return make_result(std::move(y), {an}, [an, saved](const Mat& g) {
    Vec dot = g.cwiseProduct(saved).rowwise().sum();
    Mat d = saved.array() * (g.colwise() - dot).array();
    an->add_grad(d);
  });
}

Var log_softmax_rows(const Var& a) {
  const Mat& x = a.value();
  Vec mx = x.rowwise().maxCoeff();
  Mat shifted = x.colwise() - mx;
  Vec lse = shifted.array().exp().rowwise().sum().log();
  Mat out = shifted.colwise() - lse;
  auto an = a.node();
  Mat probs = out.array().exp();
  return make_result(std::move(out), {an}, [an, probs](const Mat& g) {
    Vec gs = g.rowwise().sum();
    Mat d = g - (probs.array().colwise() * gs.array()).matrix();
    an->add_grad(d);
  });
}

Var normalize_rows(const Var& a, double eps) {
  Vec norms = a.value().rowwise().norm().cwiseMax(eps);
  Mat y = a.value().array().colwise() / norms.array();
  auto an = a.node();
  Mat saved = y;
  return make_result(std::move(y), {an}, [an, saved, norms](const Mat& g) {
    Vec dot = g.cwiseProduct(saved).rowwise().sum();
    Mat d = (g - (saved.array().colwise() * dot.array()).matrix()).array().colwise() / norms.array();
    an->add_grad(d);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Mat& x = a.value();
  const double n = static_cast<double>(x.cols());
  Vec mu = x.rowwise().mean();
  Mat centered = x.colwise() - mu;
  Vec inv_std = (centered.array().square().rowwise().sum() / n + eps).rsqrt();
  Mat y = centered.array().colwise() * inv_std.array();
  auto an = a.node();
  Mat saved = y;
  return make_result(std::move(y), {an}, [an, saved, inv_std, n](const Mat& g) {
    Vec g_mean = g.rowwise().sum() / n;
    Vec gy_mean = g.cwiseProduct(saved).rowwise().sum() / n;
    Mat d = g.colwise() - g_mean;
    d -= (saved.array().colwise() * gy_mean.array()).matrix();
    d = d.array().colwise() * inv_std.array();
    an->add_grad(d);
  });
}

// --- structural -----------------------------------------------------------

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<NodePtr> nodes;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.rows();
  }
  auto captured = nodes;
  return make_result(std::move(out), std::move(nodes), [captured, offsets](const Mat& g) {
    for (std::size_t i = 0; i < captured.size(); ++i) {
      if (captured[i]->requires_grad) {
        captured[i]->add_grad(g.middleRows(offsets[i], captured[i]->value.rows()));
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<NodePtr> nodes;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  auto captured = nodes;
  return make_result(std::move(out), std::move(nodes), [captured, offsets](const Mat& g) {
    for (std::size_t i = 0; i < captured.size(); ++i) {
      if (captured[i]->requires_grad) {
        captured[i]->add_grad(g.middleCols(offsets[i], captured[i]->value.cols()));
      }
    }
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Mat out = a.value().middleRows(start, count);
  auto an = a.node();
  return make_result(std::move(out), {an}, [an, start, count](const Mat& g) {
    Mat full = Mat::Zero(an->value.rows(), an->value.cols());
    full.middleRows(start, count) = g;
    an->add_grad(full);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  Mat out = a.value().middleCols(start, count);
  auto an = a.node();
  return make_result(std::move(out), {an}, [an, start, count](const Mat& g) {
    Mat full = Mat::Zero(an->value.rows(), an->value.cols());
    full.middleCols(start, count) = g;
    an->add_grad(full);
  });
}

Var gather_rows(const Var& a, std::span<const Index> idx) {
  Mat out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(r)) = a.value().row(idx[r]);
  }
  auto an = a.node();
  std::vector<Index> saved(idx.begin(), idx.end());
  return make_result(std::move(out), {an}, [an, saved](const Mat& g) {
    Mat full = Mat::Zero(an->value.rows(), an->value.cols());
    for (std::size_t r = 0; r < saved.size(); ++r) full.row(saved[r]) += g.row(static_cast<Index>(r));
    an->add_grad(full);
  });
}

Var gather(const Var& a, Index out_rows, Index out_cols, std::span<const Index> src) {
  if (static_cast<Index>(src.size()) != out_rows * out_cols) throw std::invalid_argument("gather: size mismatch");
  const Index n_in = a.value().size();
  Mat out(out_rows, out_cols);
  const double* in = a.value().data();
  double* o = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (src[k] < 0 || src[k] >= n_in) throw std::out_of_range("gather: index out of range");
    o[k] = in[src[k]];
  }
  auto an = a.node();
  std::vector<Index> saved(src.begin(), src.end());
  return make_result(std::move(out), {an}, [an, saved](const Mat& g) {
    Mat full = Mat::Zero(an->value.rows(), an->value.cols());
    double* f = full.data();
    const double* gd = g.data();
    for (std::size_t k = 0; k < saved.size(); ++k) f[saved[k]] += gd[k];
    an->add_grad(full);
  });
}

Var self_attention(const Var& qkv, Index n_seq, Index seq_len, int heads, Mat* cls_attn) {
  const Index total = n_seq * seq_len;
  if (qkv.rows() != total || qkv.cols() % 3 != 0) throw std::invalid_argument("self_attention: bad qkv shape");
  const Index d = qkv.cols() / 3;
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("self_attention: heads must divide width");
  const Index dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& x = qkv.value();

  const bool record = g_grad_enabled && qkv.requires_grad();
  auto probs = std::make_shared<std::vector<Mat>>();
  if (record) probs->reserve(static_cast<std::size_t>(n_seq * heads));
  if (cls_attn) *cls_attn = Mat::Zero(n_seq, seq_len - 1);

  Mat out(total, d);
  for (Index s = 0; s < n_seq; ++s) {
    const Index r0 = s * seq_len;
    for (int h = 0; h < heads; ++h) {
      auto q = x.block(r0, h * dh, seq_len, dh);
      auto k = x.block(r0, d + h * dh, seq_len, dh);
      auto v = x.block(r0, 2 * d + h * dh, seq_len, dh);
      Mat p = softmax_value((q * k.transpose()) * inv_scale);
      out.block(r0, h * dh, seq_len, dh).noalias() = p * v;
      if (cls_attn && seq_len > 1) cls_attn->row(s) += p.row(0).tail(seq_len - 1) / static_cast<double>(heads);
      if (record) probs->push_back(std::move(p));
    }
    if (cls_attn && seq_len > 1) {
      const double z = cls_attn->row(s).sum();
      if (z > 0.0) cls_attn->row(s) /= z;
    }
  }

  auto xn = qkv.node();
  return make_result(std::move(out), {xn}, [xn, probs, n_seq, seq_len, heads, d, dh, inv_scale](const Mat& g) {
    const Mat& xv = xn->value;
    Mat dx = Mat::Zero(xv.rows(), xv.cols());
    for (Index s = 0; s < n_seq; ++s) {
      const Index r0 = s * seq_len;
      for (int h = 0; h < heads; ++h) {
        const Mat& p = (*probs)[static_cast<std::size_t>(s * heads + h)];
        auto q = xv.block(r0, h * dh, seq_len, dh);
        auto k = xv.block(r0, d + h * dh, seq_len, dh);
        auto v = xv.block(r0, 2 * d + h * dh, seq_len, dh);
        auto go = g.block(r0, h * dh, seq_len, dh);
        Mat dp = go * v.transpose();
        Vec dot = dp.cwiseProduct(p).rowwise().sum();
        Mat ds = (p.array() * (dp.colwise() - dot).array()).matrix() * inv_scale;
        dx.block(r0, h * dh, seq_len, dh).noalias() += ds * k;
        dx.block(r0, d + h * dh, seq_len, dh).noalias() += ds.transpose() * q;
        dx.block(r0, 2 * d + h * dh, seq_len, dh).noalias() += p.transpose() * go;
      }
    }
    xn->add_grad(dx);
  });
}

}  // namespace gcd::ad
