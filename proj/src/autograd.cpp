#include "laser/autograd.hpp"

#include "laser/error.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

namespace laser::ad {

namespace {

thread_local bool g_grad_enabled = true;

void accumulate(Node& n, const Matrix& delta) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the output node. `fn` is only attached when a gradient is needed.
Tensor make_node(Matrix value, std::vector<std::shared_ptr<Node>> parents, bool track,
                 std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void check_shape(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(std::string("shape mismatch in ") + what);
}

}  // namespace

Tensor Tensor::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  check_shape(loss.rows() == 1 && loss.cols() == 1, "backward (loss must be 1x1)");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior gradients are no longer needed; parameters keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_shape(a.cols() == b.rows(), "matmul");
  Matrix out = a.value() * b.value();
  bool track = any_requires_grad({&a, &b});
  auto pa = a.shared(), pb = b.shared();
  return make_node(std::move(out), {pa, pb}, track, [pa, pb](Node& self) {
    if (pa->requires_grad) accumulate(*pa, self.grad * pb->value.transpose());
    if (pb->requires_grad) accumulate(*pb, pa->value.transpose() * self.grad);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Matrix out = a.value() + b.value();
  bool track = any_requires_grad({&a, &b});
  auto pa = a.shared(), pb = b.shared();
  return make_node(std::move(out), {pa, pb}, track, [pa, pb](Node& self) {
    accumulate(*pa, self.grad);
    accumulate(*pb, self.grad);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  check_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  bool track = any_requires_grad({&a, &row});
  auto pa = a.shared(), pr = row.shared();
  return make_node(std::move(out), {pa, pr}, track, [pa, pr](Node& self) {
    accumulate(*pa, self.grad);
    if (pr->requires_grad) accumulate(*pr, self.grad.colwise().sum());
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  bool track = any_requires_grad({&a});
  auto pa = a.shared();
  return make_node(std::move(out), {pa}, track,
                   [pa, s](Node& self) { accumulate(*pa, self.grad * s); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  bool track = any_requires_grad({&a, &b});
  auto pa = a.shared(), pb = b.shared();
  return make_node(std::move(out), {pa, pb}, track, [pa, pb](Node& self) {
    if (pa->requires_grad) accumulate(*pa, self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) accumulate(*pb, self.grad.cwiseProduct(pa->value));
  });
}

Tensor relu(const Tensor& x) {
  Matrix out = x.value().cwiseMax(0.0);
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  return make_node(std::move(out), {px}, track, [px](Node& self) {
    Matrix g = self.grad;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      if (px->value.data()[i] <= 0.0) g.data()[i] = 0.0;
    }
    accumulate(*px, g);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

// tanh(u) as sign(u) * (1 - e) / (1 + e) with e = exp(-2|u|): no overflow, and
// Eigen vectorizes exp but not tanh for doubles.
Eigen::ArrayXXd gelu_tanh(const Matrix& z) {
  const Eigen::ArrayXXd a = z.array();
  const Eigen::ArrayXXd u = kGeluC * (a + kGeluA * a.cube());
  const Eigen::ArrayXXd e = (-2.0 * u.abs()).exp();
  return u.sign() * (1.0 - e) / (1.0 + e);
}

Tensor gelu(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out = (0.5 * v.array() * (1.0 + gelu_tanh(v))).matrix();
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  return make_node(std::move(out), {px}, track, [px](Node& self) {
    const Eigen::ArrayXXd z = px->value.array();
    const Eigen::ArrayXXd t = gelu_tanh(px->value);
    const Eigen::ArrayXXd d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
    accumulate(*px, (self.grad.array() * d).matrix());
  });
}

Tensor sigmoid(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double z = v.data()[i];
    out.data()[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  Matrix saved = track ? out : Matrix();
  return make_node(std::move(out), {px}, track, [px, saved](Node& self) {
    Matrix d = saved.cwiseProduct((1.0 - saved.array()).matrix());
    accumulate(*px, self.grad.cwiseProduct(d));
  });
}

Tensor softmax_rows(const Tensor& x) {
  Matrix out = x.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  Matrix saved = track ? out : Matrix();
  return make_node(std::move(out), {px}, track, [px, saved](Node& self) {
    Matrix g(saved.rows(), saved.cols());
    for (Eigen::Index r = 0; r < saved.rows(); ++r) {
      double dot = self.grad.row(r).dot(saved.row(r));
      g.row(r) = saved.row(r).cwiseProduct((self.grad.row(r).array() - dot).matrix());
    }
    accumulate(*px, g);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Matrix& v = x.value();
  const Eigen::Index n = v.cols();
  check_shape(gamma.cols() == n && beta.cols() == n && gamma.rows() == 1 && beta.rows() == 1,
              "layer_norm");
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double mu = v.row(r).mean();
    double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = ((v.row(r).array() - mu) * inv_std(r)).matrix();
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  bool track = any_requires_grad({&x, &gamma, &beta});
  auto px = x.shared(), pg = gamma.shared(), pb = beta.shared();
  return make_node(std::move(out), {px, pg, pb}, track,
                   [px, pg, pb, xhat = track ? xhat : Matrix(), inv_std](Node& self) {
                     const Matrix& g = self.grad;
                     if (pg->requires_grad) accumulate(*pg, g.cwiseProduct(xhat).colwise().sum());
                     if (pb->requires_grad) accumulate(*pb, g.colwise().sum());
                     if (!px->requires_grad) return;
                     const double nn = static_cast<double>(xhat.cols());
                     Matrix dxhat = (g.array().rowwise() * pg->value.row(0).array()).matrix();
                     Matrix dx(g.rows(), g.cols());
                     for (Eigen::Index r = 0; r < g.rows(); ++r) {
                       double s1 = dxhat.row(r).sum();
                       double s2 = dxhat.row(r).dot(xhat.row(r));
                       dx.row(r) = ((nn * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2) *
                                    (inv_std(r) / nn))
                                       .matrix();
                     }
                     accumulate(*px, dx);
                   });
}

Tensor gather_rows(const Tensor& table, std::span<const int> index) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), t.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    int r = index[i];
    if (r < 0 || r >= t.rows()) throw InvalidArgument("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(r);
  }
  bool track = any_requires_grad({&table});
  auto pt = table.shared();
  std::vector<int> idx(index.begin(), index.end());
  return make_node(std::move(out), {pt}, track, [pt, idx = std::move(idx)](Node& self) {
    if (pt->grad.size() == 0) pt->grad = Matrix::Zero(pt->value.rows(), pt->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      pt->grad.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool track = false;
  std::vector<std::shared_ptr<Node>> parents;
  for (const Tensor& p : parts) {
    check_shape(p.rows() == rows, "concat_cols");
    cols += p.cols();
    track = track || (g_grad_enabled && p.requires_grad());
    parents.push_back(p.shared());
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Tensor& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_node(std::move(out), parents, track, [parents](Node& self) {
    Eigen::Index off = 0;
    for (const auto& p : parents) {
      const Eigen::Index c = p->value.cols();
      if (p->requires_grad) accumulate(*p, self.grad.middleCols(off, c));
      off += c;
    }
  });
}

Tensor slice_cols(const Tensor& x, Eigen::Index begin, Eigen::Index count) {
  check_shape(begin >= 0 && count > 0 && begin + count <= x.cols(), "slice_cols");
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  return make_node(x.value().middleCols(begin, count), {px}, track, [px, begin, count](Node& self) {
    Matrix g = Matrix::Zero(px->value.rows(), px->value.cols());
    g.middleCols(begin, count) = self.grad;
    accumulate(*px, g);
  });
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const Eigen::Index T = q.rows();
  const Eigen::Index d = q.cols();
  check_shape(k.rows() == T && v.rows() == T && k.cols() == d && v.cols() == d && heads > 0 &&
                  d % heads == 0,
              "causal_self_attention");
  const Eigen::Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(T, d);
  std::vector<Matrix> probs(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix s = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose();
    s *= inv;
    for (Eigen::Index i = 0; i < T; ++i) {
      double mx = s.row(i).head(i + 1).maxCoeff();
      double total = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        total += s(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= total;
      for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0.0;
    }
    out.middleCols(h * dh, dh) = s * v.value().middleCols(h * dh, dh);
    probs[static_cast<size_t>(h)] = std::move(s);
  }
  bool track = any_requires_grad({&q, &k, &v});
  if (!track) probs.clear();
  auto pq = q.shared(), pk = k.shared(), pv = v.shared();
  return make_node(std::move(out), {pq, pk, pv}, track,
                   [pq, pk, pv, probs = std::move(probs), heads, dh, inv](Node& self) {
                     const Eigen::Index T = self.grad.rows();
                     const Eigen::Index d = self.grad.cols();
                     Matrix dq = Matrix::Zero(T, d), dk = Matrix::Zero(T, d),
                            dv = Matrix::Zero(T, d);
                     for (int h = 0; h < heads; ++h) {
                       const Matrix& p = probs[static_cast<size_t>(h)];
                       auto go = self.grad.middleCols(h * dh, dh);
                       dv.middleCols(h * dh, dh) = p.transpose() * go;
                       Matrix dp = go * pv->value.middleCols(h * dh, dh).transpose();
                       Matrix ds(T, T);
                       for (Eigen::Index i = 0; i < T; ++i) {
                         double dot = dp.row(i).dot(p.row(i));
                         ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
                       }
                       dq.middleCols(h * dh, dh) = ds * pk->value.middleCols(h * dh, dh) * inv;
                       dk.middleCols(h * dh, dh) =
                           ds.transpose() * pq->value.middleCols(h * dh, dh) * inv;
                     }
                     accumulate(*pq, dq);
                     accumulate(*pk, dk);
                     accumulate(*pv, dv);
                   });
}

Tensor target_attention(const Tensor& query, const Tensor& keys, const Tensor& values,
                        const Matrix& mask, Matrix* weights_out) {
  const Eigen::Index B = query.rows();
  const Eigen::Index L = mask.cols();
  const Eigen::Index d = query.cols();
  check_shape(mask.rows() == B && keys.rows() == B * L && values.rows() == B * L &&
                  keys.cols() == d,
              "target_attention");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix w = Matrix::Zero(B, L);
  for (Eigen::Index b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index l = 0; l < L; ++l) {
      if (mask(b, l) == 0.0) continue;
      w(b, l) = query.value().row(b).dot(keys.value().row(b * L + l)) * inv;
      mx = std::max(mx, w(b, l));
    }
    double total = 0.0;
    for (Eigen::Index l = 0; l < L; ++l) {
      if (mask(b, l) == 0.0) continue;
      w(b, l) = std::exp(w(b, l) - mx);
      total += w(b, l);
    }
    if (total > 0.0) w.row(b) /= total;
  }
  Matrix out = Matrix::Zero(B, values.cols());
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index l = 0; l < L; ++l) {
      if (w(b, l) != 0.0) out.row(b) += w(b, l) * values.value().row(b * L + l);
    }
  }
  if (weights_out) *weights_out = w;
  bool track = any_requires_grad({&query, &keys, &values});
  auto pq = query.shared(), pk = keys.shared(), pv = values.shared();
  return make_node(std::move(out), {pq, pk, pv}, track,
                   [pq, pk, pv, w = track ? w : Matrix(), L, inv](Node& self) {
                     const Eigen::Index B = w.rows();
                     Matrix dq = Matrix::Zero(pq->value.rows(), pq->value.cols());
                     Matrix dk = Matrix::Zero(pk->value.rows(), pk->value.cols());
                     Matrix dv = Matrix::Zero(pv->value.rows(), pv->value.cols());
                     for (Eigen::Index b = 0; b < B; ++b) {
                       auto g = self.grad.row(b);
                       Eigen::VectorXd dw(L);
                       double dot = 0.0;
                       for (Eigen::Index l = 0; l < L; ++l) {
                         dw(l) = g.dot(pv->value.row(b * L + l));
                         dot += dw(l) * w(b, l);
                         dv.row(b * L + l) = w(b, l) * g;
                       }
                       for (Eigen::Index l = 0; l < L; ++l) {
                         double ds = w(b, l) * (dw(l) - dot) * inv;
                         if (ds == 0.0) continue;
                         dq.row(b) += ds * pk->value.row(b * L + l);
                         dk.row(b * L + l) += ds * pq->value.row(b);
                       }
                     }
                     accumulate(*pq, dq);
                     accumulate(*pk, dk);
                     accumulate(*pv, dv);
                   });
}

Tensor masked_group_mean(const Tensor& values, const Matrix& mask) {
  const Eigen::Index B = mask.rows();
  const Eigen::Index L = mask.cols();
  check_shape(values.rows() == B * L, "masked_group_mean");
  Matrix out = Matrix::Zero(B, values.cols());
  Eigen::VectorXd inv_count(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    double c = mask.row(b).sum();
    inv_count(b) = c > 0 ? 1.0 / c : 0.0;
    for (Eigen::Index l = 0; l < L; ++l) {
      if (mask(b, l) != 0.0) out.row(b) += values.value().row(b * L + l);
    }
    out.row(b) *= inv_count(b);
  }
  bool track = any_requires_grad({&values});
  auto pv = values.shared();
  return make_node(std::move(out), {pv}, track, [pv, mask, inv_count](Node& self) {
    const Eigen::Index B = mask.rows(), L = mask.cols();
    Matrix g = Matrix::Zero(pv->value.rows(), pv->value.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index l = 0; l < L; ++l) {
        if (mask(b, l) != 0.0) g.row(b * L + l) = self.grad.row(b) * inv_count(b);
      }
    }
    accumulate(*pv, g);
  });
}

Tensor mixture(const Tensor& alpha, std::span<const Tensor> experts) {
  const Eigen::Index J = alpha.cols();
  check_shape(static_cast<Eigen::Index>(experts.size()) == J && J > 0, "mixture");
  const Eigen::Index B = alpha.rows();
  const Eigen::Index o = experts[0].cols();
  Matrix out = Matrix::Zero(B, o);
  bool track = g_grad_enabled && alpha.requires_grad();
  std::vector<std::shared_ptr<Node>> parents{alpha.shared()};
  for (Eigen::Index j = 0; j < J; ++j) {
    const Tensor& e = experts[static_cast<size_t>(j)];
    check_shape(e.rows() == B && e.cols() == o, "mixture");
    out += (e.value().array().colwise() * alpha.value().col(j).array()).matrix();
    track = track || (g_grad_enabled && e.requires_grad());
    parents.push_back(e.shared());
  }
  return make_node(std::move(out), parents, track, [parents](Node& self) {
    const auto& pa = parents[0];
    const Eigen::Index J = pa->value.cols();
    Matrix da(pa->value.rows(), J);
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto& pe = parents[static_cast<size_t>(j) + 1];
      da.col(j) = self.grad.cwiseProduct(pe->value).rowwise().sum();
      if (pe->requires_grad) {
        accumulate(*pe, (self.grad.array().colwise() * pa->value.col(j).array()).matrix());
      }
    }
    accumulate(*pa, da);
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  check_shape(z.rows() == static_cast<Eigen::Index>(targets.size()) && z.rows() > 0,
              "cross_entropy");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= z.cols()) throw InvalidArgument("cross_entropy: target out of range");
    double mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp().matrix();
    double s = probs.row(r).sum();
    probs.row(r) /= s;
    total += (mx + std::log(s)) - z(r, t);
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  bool track = any_requires_grad({&logits});
  auto pl = logits.shared();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_node(std::move(out), {pl}, track,
                   [pl, probs = std::move(probs), tg = std::move(tg), n](Node& self) {
                     Matrix g = probs;
                     for (size_t r = 0; r < tg.size(); ++r) g(static_cast<Eigen::Index>(r), tg[r]) -= 1.0;
                     accumulate(*pl, g * (self.grad(0, 0) / n));
                   });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  const Matrix& z = logits.value();
  check_shape(z.cols() == 1 && z.rows() == static_cast<Eigen::Index>(labels.size()) && z.rows() > 0,
              "bce_with_logits");
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double x = z(r, 0), y = labels[static_cast<size_t>(r)];
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  bool track = any_requires_grad({&logits});
  auto pl = logits.shared();
  std::vector<double> y(labels.begin(), labels.end());
  return make_node(std::move(out), {pl}, track, [pl, y = std::move(y), n](Node& self) {
    Matrix g(pl->value.rows(), 1);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      double x = pl->value(r, 0);
      double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g(r, 0) = (s - y[static_cast<size_t>(r)]) * self.grad(0, 0) / n;
    }
    accumulate(*pl, g);
  });
}

Tensor sum_all(const Tensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  bool track = any_requires_grad({&x});
  auto px = x.shared();
  return make_node(std::move(out), {px}, track, [px](Node& self) {
    accumulate(*px, Matrix::Constant(px->value.rows(), px->value.cols(), self.grad(0, 0)));
  });
}

void Sgd::step(std::span<Tensor> params) const {
  for (Tensor& p : params) {
    if (p.has_grad()) p.mutable_value() -= lr_ * p.grad();
  }
}

void Adam::step(std::span<Tensor> params) {
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (m_.size() != params.size()) throw InvalidArgument("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad();
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad().cwiseProduct(p.grad());
    p.mutable_value().array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace laser::ad
