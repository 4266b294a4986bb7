#include "volrep/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace volrep::ad {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(std::string("autodiff: ") + what);
}

// Creates the result node; records parents and the backward closure only if
// some input needs a gradient and recording is enabled.
Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(const Matrix&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.ptr());
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

Var make_result_vec(Matrix value, const std::vector<Var>& inputs,
                    std::function<void(const Matrix&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.ptr());
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

template <class Expr>
void acc(Node* n, const Expr& g) {
  if (n->requires_grad) n->accumulate(g);
}

Matrix row_softmax(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const double m = a.row(r).maxCoeff();
    out.row(r) = (a.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

double Var::item() const {
  require(rows() == 1 && cols() == 1, "item() on non-scalar");
  return node_->value(0, 0);
}

Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward() root must be 1x1");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Matrix seed(1, 1);
  seed(0, 0) = 1.0;
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(n->grad);
  }
  // Free interior gradients; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

// ---- elementwise / linear algebra -------------------------------------

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(a.value() + b.value(), {a, b}, [na, nb](const Matrix& g) {
    acc(na, g);
    acc(nb, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(a.value() - b.value(), {a, b}, [na, nb](const Matrix& g) {
    acc(na, g);
    acc(nb, Matrix(-g));
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [na, nb](const Matrix& g) {
    acc(na, Matrix(g.cwiseProduct(nb->value)));
    acc(nb, Matrix(g.cwiseProduct(na->value)));
  });
}

Var scale(const Var& a, double s) {
  Node* na = a.node();
  return make_result(a.value() * s, {a}, [na, s](const Matrix& g) { acc(na, Matrix(g * s)); });
}

Var add_scalar(const Var& a, double s) {
  Node* na = a.node();
  return make_result((a.value().array() + s).matrix(), {a}, [na](const Matrix& g) { acc(na, g); });
}

Var scale_by(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "scale_by expects a 1x1 scale");
  Node* na = a.node();
  Node* ns = s.node();
  return make_result(a.value() * s.value()(0, 0), {a, s}, [na, ns](const Matrix& g) {
    acc(na, Matrix(g * ns->value(0, 0)));
    Matrix gs(1, 1);
    gs(0, 0) = g.cwiseProduct(na->value).sum();
    acc(ns, gs);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul inner dimension mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    if (na->requires_grad) na->accumulate(g * nb->value.transpose());
    if (nb->requires_grad) nb->accumulate(na->value.transpose() * g);
  });
}

Var transpose(const Var& a) {
  Node* na = a.node();
  return make_result(a.value().transpose(), {a},
                     [na](const Matrix& g) { acc(na, Matrix(g.transpose())); });
}

Var add_rowvec(const Var& a, const Var& b) {
  require(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value().rowwise() + b.value().row(0);
  return make_result(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    acc(na, g);
    acc(nb, Matrix(g.colwise().sum()));
  });
}

Var mul_colvec(const Var& a, const Var& b) {
  require(b.cols() == 1 && b.rows() == a.rows(), "mul_colvec shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value().array().colwise() * b.value().col(0).array();
  return make_result(std::move(out), {a, b}, [na, nb](const Matrix& g) {
    if (na->requires_grad) {
      Matrix ga = g.array().colwise() * nb->value.col(0).array();
      na->accumulate(ga);
    }
    if (nb->requires_grad) {
      Matrix gb = g.cwiseProduct(na->value).rowwise().sum();
      nb->accumulate(gb);
    }
  });
}

Var exp(const Var& a) {
  Node* na = a.node();
  Matrix out = a.value().array().exp().matrix();
  auto res = make_result(std::move(out), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self](const Matrix& g) { acc(na, Matrix(g.cwiseProduct(self->value))); };
  }
  return res;
}

Var log(const Var& a) {
  Node* na = a.node();
  return make_result(a.value().array().log().matrix(), {a}, [na](const Matrix& g) {
    acc(na, Matrix(g.array() / na->value.array()));
  });
}

Var relu(const Var& a) {
  Node* na = a.node();
  return make_result(a.value().cwiseMax(0.0), {a}, [na](const Matrix& g) {
    acc(na, Matrix((na->value.array() > 0.0).select(g.array(), 0.0)));
  });
}

Var gelu(const Var& a) {
  // tanh approximation
  constexpr double k = kGeluK;
  constexpr double c = kGeluC;
  Node* na = a.node();
  const auto& x = a.value().array();
  Matrix out = (0.5 * x * (1.0 + (k * (x + c * x.cube())).tanh())).matrix();
  return make_result(std::move(out), {a}, [na](const Matrix& g) {
    constexpr double k = kGeluK;
    constexpr double c = kGeluC;
    const auto& x = na->value.array();
    auto inner = k * (x + c * x.cube());
    auto t = inner.tanh();
    auto d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * k * (1.0 + 3.0 * c * x.square());
    acc(na, Matrix(g.array() * d));
  });
}

Var sigmoid(const Var& a) {
  Node* na = a.node();
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  auto res = make_result(std::move(out), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self](const Matrix& g) {
      const auto& s = self->value.array();
      acc(na, Matrix(g.array() * s * (1.0 - s)));
    };
  }
  return res;
}

Var tanh(const Var& a) {
  Node* na = a.node();
  auto res = make_result(a.value().array().tanh().matrix(), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self](const Matrix& g) {
      acc(na, Matrix(g.array() * (1.0 - self->value.array().square())));
    };
  }
  return res;
}

Var square(const Var& a) {
  Node* na = a.node();
  return make_result(a.value().array().square().matrix(), {a}, [na](const Matrix& g) {
    acc(na, Matrix(2.0 * g.array() * na->value.array()));
  });
}

// ---- reductions -------------------------------------------------------

Var sum(const Var& a) {
  Node* na = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [na](const Matrix& g) {
    acc(na, Matrix::Constant(na->value.rows(), na->value.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Node* na = a.node();
  Matrix out = a.value().rowwise().sum();
  return make_result(std::move(out), {a}, [na](const Matrix& g) {
    Matrix ga = g.col(0).replicate(1, na->value.cols());
    acc(na, ga);
  });
}

// ---- shape ------------------------------------------------------------

Var reshape(const Var& a, Index rows, Index cols) {
  require(rows * cols == a.value().size(), "reshape size mismatch");
  Node* na = a.node();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_result(std::move(out), {a}, [na](const Matrix& g) {
    acc(na, Matrix(Eigen::Map<const Matrix>(g.data(), na->value.rows(), na->value.cols())));
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows out of range");
  Node* na = a.node();
  return make_result(a.value().middleRows(start, count), {a}, [na, start, count](const Matrix& g) {
    Matrix ga = Matrix::Zero(na->value.rows(), na->value.cols());
    ga.middleRows(start, count) = g;
    acc(na, ga);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols out of range");
  Node* na = a.node();
  return make_result(a.value().middleCols(start, count), {a}, [na, start, count](const Matrix& g) {
    Matrix ga = Matrix::Zero(na->value.rows(), na->value.cols());
    ga.middleCols(start, count) = g;
    acc(na, ga);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Node*> nodes;
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    nodes.push_back(p.node());
  }
  return make_result_vec(std::move(out), parts, [nodes](const Matrix& g) {
    Index r = 0;
    for (Node* n : nodes) {
      const Index h = n->value.rows();
      if (n->requires_grad) n->accumulate(g.middleRows(r, h));
      r += h;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Node*> nodes;
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    nodes.push_back(p.node());
  }
  return make_result_vec(std::move(out), parts, [nodes](const Matrix& g) {
    Index c = 0;
    for (Node* n : nodes) {
      const Index w = n->value.cols();
      if (n->requires_grad) n->accumulate(g.middleCols(c, w));
      c += w;
    }
  });
}

Var gather_flat(const Var& a, std::shared_ptr<const std::vector<std::int32_t>> index, Index rows,
                Index cols) {
  require(static_cast<Index>(index->size()) == rows * cols, "gather_flat index size mismatch");
  Node* na = a.node();
  Matrix out(rows, cols);
  const double* src = a.value().data();
  double* dst = out.data();
  const auto n_src = a.value().size();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto j = (*index)[i];
    require(j >= 0 && j < n_src, "gather_flat index out of range");
    dst[i] = src[j];
  }
  return make_result(std::move(out), {a}, [na, index](const Matrix& g) {
    Matrix ga = Matrix::Zero(na->value.rows(), na->value.cols());
    double* d = ga.data();
    const double* s = g.data();
    for (std::size_t i = 0; i < index->size(); ++i) d[(*index)[i]] += s[i];
    acc(na, ga);
  });
}

Var gather_rows(const std::vector<Var>& sources, const std::vector<RowPick>& picks) {
  require(!sources.empty(), "gather_rows without sources");
  const Index cols = sources.front().cols();
  for (const auto& s : sources) require(s.cols() == cols, "gather_rows column mismatch");
  Matrix out(static_cast<Index>(picks.size()), cols);
  for (std::size_t r = 0; r < picks.size(); ++r) {
    const auto& p = picks[r];
    require(p.source >= 0 && p.source < static_cast<std::int32_t>(sources.size()),
            "gather_rows bad source");
    require(p.row >= 0 && p.row < sources[p.source].rows(), "gather_rows bad row");
    out.row(static_cast<Index>(r)) = sources[p.source].value().row(p.row);
  }
  std::vector<Node*> nodes;
  for (const auto& s : sources) nodes.push_back(s.node());
  return make_result_vec(std::move(out), sources, [nodes, picks](const Matrix& g) {
    std::vector<Matrix> grads(nodes.size());
    for (std::size_t r = 0; r < picks.size(); ++r) {
      const auto& p = picks[r];
      Node* n = nodes[p.source];
      if (!n->requires_grad) continue;
      auto& gm = grads[p.source];
      if (gm.size() == 0) gm = Matrix::Zero(n->value.rows(), n->value.cols());
      gm.row(p.row) += g.row(static_cast<Index>(r));
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (grads[i].size() != 0) nodes[i]->accumulate(grads[i]);
    }
  });
}

Var gather_rows(const Var& source, const std::vector<std::int32_t>& rows) {
  std::vector<RowPick> picks;
  picks.reserve(rows.size());
  for (auto r : rows) picks.push_back({0, r});
  return gather_rows(std::vector<Var>{source}, picks);
}

// ---- special ----------------------------------------------------------

Var detach(const Var& a) { return constant(a.value()); }

Var fill_diagonal(const Var& a, double value) {
  Node* na = a.node();
  Matrix out = a.value();
  const Index n = std::min(out.rows(), out.cols());
  for (Index i = 0; i < n; ++i) out(i, i) = value;
  return make_result(std::move(out), {a}, [na, n](const Matrix& g) {
    Matrix ga = g;
    for (Index i = 0; i < n; ++i) ga(i, i) = 0.0;
    acc(na, ga);
  });
}

Var softmax_rows(const Var& a) {
  Node* na = a.node();
  auto res = make_result(row_softmax(a.value()), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self](const Matrix& g) {
      const Matrix& p = self->value;
      Eigen::VectorXd dots = g.cwiseProduct(p).rowwise().sum();
      Matrix ga = p.cwiseProduct(g - dots.replicate(1, g.cols()));
      acc(na, ga);
    };
  }
  return res;
}

Var log_softmax_rows(const Var& a) {
  Node* na = a.node();
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const double m = a.value().row(r).maxCoeff();
    const double lse = m + std::log((a.value().row(r).array() - m).exp().sum());
    out.row(r) = a.value().row(r).array() - lse;
  }
  auto res = make_result(std::move(out), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self](const Matrix& g) {
      Matrix p = self->value.array().exp().matrix();
      Eigen::VectorXd gs = g.rowwise().sum();
      Matrix ga = g - p.cwiseProduct(gs.replicate(1, g.cols()));
      acc(na, ga);
    };
  }
  return res;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
          "layer_norm parameter shape");
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  for (Index r = 0; r < n; ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (x.value().row(r).array() - mu) * (*inv_std)(r);
  }
  Matrix out = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  Node* nx = x.node();
  Node* ng = gamma.node();
  Node* nb = beta.node();
  return make_result(std::move(out), {x, gamma, beta}, [nx, ng, nb, xhat, inv_std, d](const Matrix& g) {
    if (ng->requires_grad) ng->accumulate(g.cwiseProduct(*xhat).colwise().sum());
    if (nb->requires_grad) nb->accumulate(g.colwise().sum());
    if (nx->requires_grad) {
      Matrix dxhat = g.array().rowwise() * ng->value.row(0).array();
      Eigen::VectorXd m1 = dxhat.rowwise().mean();
      Eigen::VectorXd m2 = dxhat.cwiseProduct(*xhat).rowwise().mean();
      Matrix dx = dxhat - m1.replicate(1, d) - xhat->cwiseProduct(m2.replicate(1, d));
      dx = dx.array().colwise() * inv_std->array();
      nx->accumulate(dx);
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  Node* na = a.node();
  auto norms = std::make_shared<Eigen::VectorXd>(a.value().rowwise().norm());
  for (Index r = 0; r < norms->size(); ++r) (*norms)(r) = std::max((*norms)(r), eps);
  Matrix out = a.value().array().colwise() / norms->array();
  auto res = make_result(std::move(out), {a}, nullptr);
  Node* self = res.node();
  if (res.requires_grad()) {
    self->backward = [na, self, norms](const Matrix& g) {
      const Matrix& y = self->value;
      Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
      Matrix ga = g - y.cwiseProduct(dots.replicate(1, y.cols()));
      ga = ga.array().colwise() / norms->array();
      acc(na, ga);
    };
  }
  return res;
}

// ---- losses -----------------------------------------------------------

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  const Index n = logits.rows();
  require(n > 0 && static_cast<Index>(targets.size()) == n, "cross_entropy target count");
  auto probs = std::make_shared<Matrix>(row_softmax(logits.value()));
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    require(t >= 0 && t < logits.cols(), "cross_entropy target out of range");
    const double m = logits.value().row(r).maxCoeff();
    const double lse = m + std::log((logits.value().row(r).array() - m).exp().sum());
    loss += lse - logits.value()(r, t);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  Node* nl = logits.node();
  return make_result(std::move(out), {logits}, [nl, probs, targets, n](const Matrix& g) {
    Matrix ga = *probs;
    for (Index r = 0; r < n; ++r) ga(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
    ga *= g(0, 0) / static_cast<double>(n);
    acc(nl, ga);
  });
}

Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& pos_weight) {
  require(targets.rows() == logits.rows() && targets.cols() == logits.cols(), "bce target shape");
  require(pos_weight.rows() == 1 && pos_weight.cols() == logits.cols(), "bce pos_weight shape");
  const auto& x = logits.value();
  const double count = static_cast<double>(x.size());
  double loss = 0.0;
  auto softplus = [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const double y = targets(r, c);
      const double w = pos_weight(0, c);
      // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
      loss += w * y * softplus(-x(r, c)) + (1.0 - y) * softplus(x(r, c));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = loss / count;
  Node* nl = logits.node();
  return make_result(std::move(out), {logits}, [nl, targets, pos_weight, count](const Matrix& g) {
    const auto& x = nl->value;
    Matrix ga(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        const double s = 1.0 / (1.0 + std::exp(-x(r, c)));
        const double y = targets(r, c);
        ga(r, c) = -pos_weight(0, c) * y * (1.0 - s) + (1.0 - y) * s;
      }
    }
    acc(nl, Matrix(ga * (g(0, 0) / count)));
  });
}

Var mse(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mse shape mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  const double n = static_cast<double>(a.value().size());
  Matrix out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / n;
  return make_result(std::move(out), {a, b}, [na, nb, n](const Matrix& g) {
    Matrix d = (na->value - nb->value) * (2.0 * g(0, 0) / n);
    if (na->requires_grad) na->accumulate(d);
    if (nb->requires_grad) nb->accumulate(-d);
  });
}

// ---- attention --------------------------------------------------------

Var segmented_attention(const Var& q, const Var& k, const Var& v, const std::vector<Segment>& segments,
                        int heads, bool causal) {
  const Index total = q.rows();
  const Index width = q.cols();
  require(k.rows() == total && v.rows() == total && k.cols() == width && v.cols() == width,
          "attention q/k/v shapes differ");
  require(heads > 0 && width % heads == 0, "attention width not divisible by heads");
  const Index dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& s : segments) {
    require(s.start >= 0 && s.length > 0 && s.start + s.length <= total, "attention bad segment");
  }

  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(segments.size() * static_cast<std::size_t>(heads));
  Matrix out = Matrix::Zero(total, width);
  for (const auto& s : segments) {
    for (int h = 0; h < heads; ++h) {
      auto qs = q.value().block(s.start, h * dh, s.length, dh);
      auto ks = k.value().block(s.start, h * dh, s.length, dh);
      auto vs = v.value().block(s.start, h * dh, s.length, dh);
      Matrix scores = (qs * ks.transpose()) * inv_sqrt;
      if (causal) {
        for (Index i = 0; i < s.length; ++i) {
          for (Index j = i + 1; j < s.length; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
      Matrix p = row_softmax(scores);
      out.block(s.start, h * dh, s.length, dh) = p * vs;
      probs->push_back(std::move(p));
    }
  }

  Node* nq = q.node();
  Node* nk = k.node();
  Node* nv = v.node();
  return make_result(std::move(out), {q, k, v},
                     [nq, nk, nv, probs, segments, heads, dh, inv_sqrt](const Matrix& g) {
    Matrix gq = Matrix::Zero(nq->value.rows(), nq->value.cols());
    Matrix gk = Matrix::Zero(nk->value.rows(), nk->value.cols());
    Matrix gv = Matrix::Zero(nv->value.rows(), nv->value.cols());
    std::size_t idx = 0;
    for (const auto& s : segments) {
      for (int h = 0; h < heads; ++h, ++idx) {
        const Matrix& p = (*probs)[idx];
        auto qs = nq->value.block(s.start, h * dh, s.length, dh);
        auto ks = nk->value.block(s.start, h * dh, s.length, dh);
        auto vs = nv->value.block(s.start, h * dh, s.length, dh);
        auto go = g.block(s.start, h * dh, s.length, dh);
        gv.block(s.start, h * dh, s.length, dh) += p.transpose() * go;
        Matrix gp = go * vs.transpose();
        Eigen::VectorXd dots = gp.cwiseProduct(p).rowwise().sum();
        Matrix gs = p.cwiseProduct(gp - dots.replicate(1, gp.cols())) * inv_sqrt;
        gq.block(s.start, h * dh, s.length, dh) += gs * ks;
        gk.block(s.start, h * dh, s.length, dh) += gs.transpose() * qs;
      }
    }
    acc(nq, gq);
    acc(nk, gk);
    acc(nv, gv);
  });
}

}  // namespace volrep::ad
