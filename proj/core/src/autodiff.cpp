#include "eptlab/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "eptlab/errors.hpp"

namespace eptlab {

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(const std::string& name, const Tensor& value, bool trainable) {
  if (auto it = named_.find(name); it != named_.end()) return Var(this, it->second);
  Node node;
  node.value = value;
  node.name = name;
  node.trainable = trainable;
  node.requires_grad = trainable;
  nodes_.push_back(std::move(node));
  named_.emplace(name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::bind(const ParameterStore& store, const std::string& name, const std::set<std::string>& mask) {
  auto it = store.find(name);
  if (it == store.end()) throw ContractError("unknown parameter '" + name + "'");
  return parameter(name, it->second, mask.contains(name));
}

Var Graph::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_[p].requires_grad; });
  node.parents = std::move(parents);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

GradientMap Graph::backward(Var loss) const {
  if (&loss.graph() != this) throw ContractError("loss belongs to a different graph");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ContractError("backward requires a scalar loss, got shape " + lv.shape_string());

  std::vector<Tensor> grads(nodes_.size());
  if (nodes_[loss.id()].requires_grad) grads[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || grads[i].empty() || !node.backward) continue;
    slots.clear();
    for (std::size_t p : node.parents) {
      if (!nodes_[p].requires_grad) {
        slots.push_back(nullptr);
        continue;
      }
      if (grads[p].empty()) grads[p] = Tensor(nodes_[p].value.shape(), 0.0);
      slots.push_back(&grads[p]);
    }
    node.backward(grads[i], slots);
  }

  GradientMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.trainable) continue;
    out.emplace(node.name, grads[i].empty() ? Tensor(node.value.shape(), 0.0) : std::move(grads[i]));
  }
  return out;
}

GradientMap backward(Graph& graph, Var loss) { return graph.backward(loss); }

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() && !(a.rows() == b.rows() && a.cols() == b.cols())) {
    throw DimensionError(std::string(op) + " shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
  }
}

Tensor as_matrix(const Tensor& t) { return Tensor({t.rows(), t.cols()}, t.data()); }

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = a.graph();
  Tensor out = dense::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [&g, ia, ib](const Tensor& go, std::vector<Tensor*>& pg) {
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (pg[0]) {
      Tensor& ga = *pg[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (pg[1]) {
      Tensor& gb = *pg[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av_ip = av[i * k + p];
          if (av_ip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av_ip * go[i * n + j];
        }
    }
  });
}

Var transpose(Var a) {
  Graph& g = a.graph();
  Tensor out = dense::transpose(a.value());
  return g.record(std::move(out), {a.id()}, [](const Tensor& go, std::vector<Tensor*>& pg) {
    Tensor& ga = *pg[0];
    const std::size_t r = go.rows(), c = go.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[j * r + i] += go[i * c + j];
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = as_matrix(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph().record(std::move(out), {a.id(), b.id()}, [](const Tensor& go, std::vector<Tensor*>& pg) {
    accumulate(pg[0], go);
    accumulate(pg[1], go);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = as_matrix(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph().record(std::move(out), {a.id(), b.id()}, [](const Tensor& go, std::vector<Tensor*>& pg) {
    accumulate(pg[0], go);
    if (pg[1])
      for (std::size_t i = 0; i < go.size(); ++i) (*pg[1])[i] -= go[i];
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape("hadamard", a.value(), b.value());
  Graph& g = a.graph();
  Tensor out = as_matrix(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [&g, ia, ib](const Tensor& go, std::vector<Tensor*>& pg) {
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    if (pg[0])
      for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i] * bv[i];
    if (pg[1])
      for (std::size_t i = 0; i < go.size(); ++i) (*pg[1])[i] += go[i] * av[i];
  });
}

Var scale(Var a, double factor) {
  Tensor out = as_matrix(a.value());
  for (auto& v : out.data()) v *= factor;
  return a.graph().record(std::move(out), {a.id()}, [factor](const Tensor& go, std::vector<Tensor*>& pg) {
    for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += factor * go[i];
  });
}

Var add_column_broadcast(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.rows()) {
    throw DimensionError("bias of shape " + bv.shape_string() + " does not broadcast over " + av.shape_string());
  }
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = as_matrix(av);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[i];
  return a.graph().record(std::move(out), {a.id(), bias.id()}, [r, c](const Tensor& go, std::vector<Tensor*>& pg) {
    accumulate(pg[0], go);
    if (pg[1])
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += go[i * c + j];
        (*pg[1])[i] += s;
      }
  });
}

Var scale_columns(Var a, Var s) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  const std::size_t r = av.rows(), c = av.cols();
  if (sv.size() != c) {
    throw DimensionError("column scale of shape " + sv.shape_string() + " does not match " + av.shape_string());
  }
  Tensor out = as_matrix(av);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= sv[j];
  const std::size_t ia = a.id(), is = s.id();
  return g.record(std::move(out), {ia, is}, [&g, ia, is, r, c](const Tensor& go, std::vector<Tensor*>& pg) {
    const Tensor& av = g.value(ia);
    const Tensor& sv = g.value(is);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        if (pg[0]) (*pg[0])[i * c + j] += go[i * c + j] * sv[j];
        if (pg[1]) (*pg[1])[j] += go[i * c + j] * av[i * c + j];
      }
  });
}

Var relu(Var a) {
  Graph& g = a.graph();
  Tensor out = as_matrix(a.value());
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [&g, ia](const Tensor& go, std::vector<Tensor*>& pg) {
    const Tensor& av = g.value(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (av[i] > 0.0) (*pg[0])[i] += go[i];
  });
}

Var softmax_columns(Var m) {
  Graph& g = m.graph();
  Tensor out = dense::softmax_columns(m.value());
  // The backward reads this node's own output, which lands at index size().
  const std::size_t self = g.size();
  return g.record(std::move(out), {m.id()}, [&g, self](const Tensor& go, std::vector<Tensor*>& pg) {
    const Tensor& s = g.value(self);
    const std::size_t r = s.rows(), c = s.cols();
    for (std::size_t j = 0; j < c; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < r; ++i) dot += go[i * c + j] * s[i * c + j];
      for (std::size_t i = 0; i < r; ++i) (*pg[0])[i * c + j] += s[i * c + j] * (go[i * c + j] - dot);
    }
  });
}

Var column_range(Var m) {
  const Tensor& mv = m.value();
  const std::size_t r = mv.rows(), c = mv.cols();
  if (r == 0) throw DimensionError("column_range of empty matrix");
  Tensor out = Tensor::matrix(1, c);
  std::vector<std::size_t> arg_max(c, 0), arg_min(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 1; i < r; ++i) {
      if (mv[i * c + j] > mv[arg_max[j] * c + j]) arg_max[j] = i;
      if (mv[i * c + j] < mv[arg_min[j] * c + j]) arg_min[j] = i;
    }
    out[j] = mv[arg_max[j] * c + j] - mv[arg_min[j] * c + j];
  }
  return m.graph().record(std::move(out), {m.id()},
                          [c, arg_max = std::move(arg_max), arg_min = std::move(arg_min)](
                              const Tensor& go, std::vector<Tensor*>& pg) {
                            for (std::size_t j = 0; j < c; ++j) {
                              (*pg[0])[arg_max[j] * c + j] += go[j];
                              (*pg[0])[arg_min[j] * c + j] -= go[j];
                            }
                          });
}

Var tile_rows(Var p, std::size_t rows) {
  const Tensor& pv = p.value();
  const std::size_t pr = pv.rows(), c = pv.cols();
  if (pr == 0) throw DimensionError("tile_rows of a matrix with no rows");
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = pv[(i % pr) * c + j];
  return p.graph().record(std::move(out), {p.id()}, [pr, c](const Tensor& go, std::vector<Tensor*>& pg) {
    const std::size_t rows = go.rows();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) (*pg[0])[(i % pr) * c + j] += go[i * c + j];
  });
}

Var concat_rows(Var top, Var bottom) {
  const Tensor& tv = top.value();
  const Tensor& bv = bottom.value();
  if (tv.cols() != bv.cols()) {
    throw DimensionError("concat_rows column mismatch: " + tv.shape_string() + " over " + bv.shape_string());
  }
  const std::size_t tr = tv.rows(), br = bv.rows(), c = tv.cols();
  Tensor out = Tensor::matrix(tr + br, c);
  std::copy(tv.data().begin(), tv.data().end(), out.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(tr * c));
  return top.graph().record(std::move(out), {top.id(), bottom.id()},
                            [tr, br, c](const Tensor& go, std::vector<Tensor*>& pg) {
                              if (pg[0])
                                for (std::size_t i = 0; i < tr * c; ++i) (*pg[0])[i] += go[i];
                              if (pg[1])
                                for (std::size_t i = 0; i < br * c; ++i) (*pg[1])[i] += go[tr * c + i];
                            });
}

Var concat_cols(Var left, Var right) {
  const Tensor& lv = left.value();
  const Tensor& rv = right.value();
  if (lv.rows() != rv.rows()) {
    throw DimensionError("concat_cols row mismatch: " + lv.shape_string() + " beside " + rv.shape_string());
  }
  const std::size_t r = lv.rows(), lc = lv.cols(), rc = rv.cols(), c = lc + rc;
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < lc; ++j) out[i * c + j] = lv[i * lc + j];
    for (std::size_t j = 0; j < rc; ++j) out[i * c + lc + j] = rv[i * rc + j];
  }
  return left.graph().record(std::move(out), {left.id(), right.id()},
                             [r, lc, rc, c](const Tensor& go, std::vector<Tensor*>& pg) {
                               for (std::size_t i = 0; i < r; ++i) {
                                 if (pg[0])
                                   for (std::size_t j = 0; j < lc; ++j) (*pg[0])[i * lc + j] += go[i * c + j];
                                 if (pg[1])
                                   for (std::size_t j = 0; j < rc; ++j) (*pg[1])[i * rc + j] += go[i * c + lc + j];
                               }
                             });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.rows()) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         av.shape_string());
  }
  const std::size_t c = av.cols();
  Tensor out = Tensor::matrix(end - begin, c);
  std::copy(av.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
            av.data().begin() + static_cast<std::ptrdiff_t>(end * c), out.data().begin());
  return a.graph().record(std::move(out), {a.id()}, [begin, c](const Tensor& go, std::vector<Tensor*>& pg) {
    for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[begin * c + i] += go[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin > end || end > av.cols()) {
    throw DimensionError("column slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         av.shape_string());
  }
  const std::size_t r = av.rows(), c = av.cols(), w = end - begin;
  Tensor out = Tensor::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + begin + j];
  return a.graph().record(std::move(out), {a.id()}, [r, c, w, begin](const Tensor& go, std::vector<Tensor*>& pg) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) (*pg[0])[i * c + begin + j] += go[i * w + j];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record(Tensor::scalar(s), {a.id()}, [](const Tensor& go, std::vector<Tensor*>& pg) {
    for (auto& v : pg[0]->data()) v += go[0];
  });
}

Var layer_norm_columns(Var x, Var gamma, Var beta, double eps) {
  Graph& g = x.graph();
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != r || beta.value().size() != r) {
    throw DimensionError("layer norm parameters do not match " + xv.shape_string());
  }
  Tensor normalized = Tensor::matrix(r, c);
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < r; ++i) mean += xv[i * c + j];
    mean /= static_cast<double>(r);
    double var = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double d = xv[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(r);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < r; ++i) normalized[i * c + j] = (xv[i * c + j] - mean) * inv_std[j];
  }
  Tensor out = Tensor::matrix(r, c);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = normalized[i * c + j] * gv[i] + bv[i];
  const std::size_t ig = gamma.id();
  return g.record(std::move(out), {x.id(), gamma.id(), beta.id()},
                  [&g, ig, r, c, normalized = std::move(normalized), inv_std = std::move(inv_std)](
                      const Tensor& go, std::vector<Tensor*>& pg) {
                    const Tensor& gv = g.value(ig);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        if (pg[1]) (*pg[1])[i] += go[i * c + j] * normalized[i * c + j];
                        if (pg[2]) (*pg[2])[i] += go[i * c + j];
                      }
                    if (!pg[0]) return;
                    const double inv_r = 1.0 / static_cast<double>(r);
                    for (std::size_t j = 0; j < c; ++j) {
                      double mean_dn = 0.0, mean_dn_n = 0.0;
                      for (std::size_t i = 0; i < r; ++i) {
                        const double dn = go[i * c + j] * gv[i];
                        mean_dn += dn;
                        mean_dn_n += dn * normalized[i * c + j];
                      }
                      mean_dn *= inv_r;
                      mean_dn_n *= inv_r;
                      for (std::size_t i = 0; i < r; ++i) {
                        const double dn = go[i * c + j] * gv[i];
                        (*pg[0])[i * c + j] += inv_std[j] * (dn - mean_dn - normalized[i * c + j] * mean_dn_n);
                      }
                    }
                  });
}

Var softmax_cross_entropy(Var logits, std::size_t target) {
  Graph& g = logits.graph();
  const Tensor& lv = logits.value();
  if (lv.cols() != 1) throw DimensionError("cross-entropy expects a logit column, got " + lv.shape_string());
  if (target >= lv.rows()) throw ContractError("cross-entropy target out of range");
  Tensor probs = dense::softmax_columns(as_matrix(lv));
  double hi = -INFINITY;
  for (double v : lv.data()) hi = std::max(hi, v);
  double total = 0.0;
  for (double v : lv.data()) total += std::exp(v - hi);
  const double loss = hi + std::log(total) - lv[target];
  return g.record(Tensor::scalar(loss), {logits.id()},
                  [target, probs = std::move(probs)](const Tensor& go, std::vector<Tensor*>& pg) {
                    for (std::size_t i = 0; i < probs.size(); ++i)
                      (*pg[0])[i] += go[0] * (probs[i] - (i == target ? 1.0 : 0.0));
                  });
}

Var sigmoid_binary_cross_entropy(Var logits, const std::vector<double>& targets) {
  Graph& g = logits.graph();
  const Tensor& lv = logits.value();
  if (lv.size() != targets.size()) {
    throw DimensionError("binary cross-entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         lv.shape_string());
  }
  const double inv = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  std::vector<double> probs(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = lv[i];
    // log(1 + e^{-|z|}) form: stable for large |z|.
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    probs[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return g.record(Tensor::scalar(loss * inv), {logits.id()},
                  [inv, targets, probs = std::move(probs)](const Tensor& go, std::vector<Tensor*>& pg) {
                    for (std::size_t i = 0; i < probs.size(); ++i) (*pg[0])[i] += go[0] * inv * (probs[i] - targets[i]);
                  });
}

}  // namespace eptlab
