#include "transx/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "transx/errors.hpp"
#include "transx/rng.hpp"

namespace transx {

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}
Var::Var(std::shared_ptr<const Tensor> value) : value_(std::move(value)) {}

bool GradSink::wants(std::size_t slot) const { return slot < inputs_.size() && inputs_[slot] >= 0; }

void GradSink::add(std::size_t slot, Tensor grad) {
  if (!wants(slot)) return;
  Tensor& dst = grads_[static_cast<std::size_t>(inputs_[slot])];
  if (dst.empty() && dst.shape().empty()) {
    dst = std::move(grad);
  } else {
    axpy(dst, grad);
  }
}

const Tensor& Gradients::of(const Var& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw std::out_of_range("Gradients::of: not a leaf of this tape");
  return it->second;
}

Var Tape::push(std::shared_ptr<const Tensor> value, Node node) {
  node.shape = value->shape();
  Var v(std::move(value));
  v.tape_ = this;
  v.id_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return v;
}

Var Tape::leaf(Tensor value) { return leaf(std::make_shared<const Tensor>(std::move(value))); }

Var Tape::leaf(std::shared_ptr<const Tensor> value) {
  Node n;
  n.leaf = true;
  return push(std::move(value), std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Var& in : inputs) {
    if (!in.tracked()) continue;
    if (tape && tape != in.tape()) throw std::logic_error("Tape::record: inputs from different tapes");
    tape = in.tape();
  }
  if (!tape) return Var(std::move(value));
  Node n;
  n.backward = std::move(backward);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) n.inputs.push_back(in.tracked() ? in.id() : -1);
  return tape->push(std::make_shared<const Tensor>(std::move(value)), std::move(n));
}

Gradients Tape::backward(const Var& loss) const {
  if (!loss.tracked() || loss.tape() != this) throw std::logic_error("Tape::backward: loss not on this tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("Tape::backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id())] = Tensor(loss.shape(), 1.0);
  for (NodeId i = loss.id(); i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    const Node& node = nodes_[idx];
    if (node.leaf || grads[idx].shape().empty()) continue;
    for (NodeId in : node.inputs) {
      if (in >= i) throw std::logic_error("Tape::backward: cycle detected at node " + std::to_string(i));
    }
    GradSink sink(node.inputs, grads);
    node.backward(grads[idx], sink);
    grads[idx] = Tensor();
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].leaf) continue;
    Tensor g = grads[i].shape().empty() ? Tensor(nodes_[i].shape) : std::move(grads[i]);
    finalize(g, "backward");
    out.grads_.emplace(static_cast<NodeId>(i), std::move(g));
  }
  return out;
}

namespace ad {

Var matmul(const Var& a, const Var& b) {
  auto pa = a.value_ptr();
  auto pb = b.value_ptr();
  return Tape::record(transx::matmul(*pa, *pb), {a, b}, [pa, pb](const Tensor& g, GradSink& s) {
    if (s.wants(0)) s.add(0, matmul_nt(g, *pb));
    if (s.wants(1)) s.add(1, matmul_tn(*pa, g));
  });
}

Var add(const Var& a, const Var& b) {
  return Tape::record(transx::add(a.value(), b.value()), {a, b}, [](const Tensor& g, GradSink& s) {
    s.add(0, g);
    s.add(1, g);
  });
}

Var sub(const Var& a, const Var& b) {
  return Tape::record(transx::sub(a.value(), b.value()), {a, b}, [](const Tensor& g, GradSink& s) {
    s.add(0, g);
    if (s.wants(1)) s.add(1, transx::scale(g, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  auto pa = a.value_ptr();
  auto pb = b.value_ptr();
  return Tape::record(hadamard(*pa, *pb), {a, b}, [pa, pb](const Tensor& g, GradSink& s) {
    if (s.wants(0)) s.add(0, hadamard(g, *pb));
    if (s.wants(1)) s.add(1, hadamard(g, *pa));
  });
}

Var scale(const Var& a, double k) {
  return Tape::record(transx::scale(a.value(), k), {a},
                      [k](const Tensor& g, GradSink& s) { s.add(0, transx::scale(g, k)); });
}

Var add_row(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.numel() != xv.cols()) {
    throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " vs " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  finalize(out, "add_row");
  Shape bshape = bv.shape();
  return Tape::record(std::move(out), {x, bias}, [bshape](const Tensor& g, GradSink& s) {
    s.add(0, g);
    if (s.wants(1)) {
      Tensor gb(bshape);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
      s.add(1, std::move(gb));
    }
  });
}

Var sum(const Var& a) {
  Shape shape = a.shape();
  return Tape::record(Tensor::scalar(transx::sum(a.value())), {a},
                      [shape](const Tensor& g, GradSink& s) { s.add(0, Tensor(shape, g.item())); });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

Var weighted_sum(const Var& a, const Tensor& w) {
  if (a.shape() != w.shape()) throw ShapeError("weighted_sum: weight shape mismatch");
  auto pw = std::make_shared<const Tensor>(w);
  Tensor out = Tensor::scalar(dot(a.value().data(), w.data()));
  finalize(out, "weighted_sum");
  return Tape::record(std::move(out), {a},
                      [pw](const Tensor& g, GradSink& s) { s.add(0, transx::scale(*pw, g.item())); });
}

namespace {
Eigen::Map<const Eigen::ArrayXd> arr(const Tensor& t) {
  return Eigen::Map<const Eigen::ArrayXd>(t.raw(), static_cast<Eigen::Index>(t.numel()));
}
Eigen::Map<Eigen::ArrayXd> arr(Tensor& t) { return Eigen::Map<Eigen::ArrayXd>(t.raw(), static_cast<Eigen::Index>(t.numel())); }

Tensor logistic(const Tensor& z) {
  Tensor out(z.shape());
  arr(out) = (1.0 + (-arr(z)).exp()).inverse();
  return out;
}
}  // namespace

Var silu(const Var& a) {
  auto pa = a.value_ptr();
  auto sg = std::make_shared<const Tensor>(logistic(*pa));
  Tensor out(pa->shape());
  arr(out) = arr(*pa) * arr(*sg);
  finalize(out, "silu");
  return Tape::record(std::move(out), {a}, [pa, sg](const Tensor& g, GradSink& s) {
    Tensor d(g.shape());
    arr(d) = arr(g) * arr(*sg) * (1.0 + arr(*pa) * (1.0 - arr(*sg)));
    s.add(0, std::move(d));
  });
}

Var sigmoid(const Var& a) {
  Tensor out = logistic(a.value());
  finalize(out, "sigmoid");
  auto po = std::make_shared<const Tensor>(out);
  return Tape::record(std::move(out), {a}, [po](const Tensor& g, GradSink& s) {
    Tensor d(g.shape());
    arr(d) = arr(g) * arr(*po) * (1.0 - arr(*po));
    s.add(0, std::move(d));
  });
}

Var rmsnorm(const Var& x, const Var& gain, double eps) {
  if (eps <= 0) throw DomainError("rmsnorm: eps must be positive");
  auto px = x.value_ptr();
  auto pg = gain.value_ptr();
  const std::size_t rows = px->rows();
  const std::size_t d = px->cols();
  if (pg->numel() != d) throw ShapeError("rmsnorm: gain length does not match last dim");
  auto inv = std::make_shared<std::vector<double>>(rows);
  Tensor out(px->shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = px->row(r);
    const double ms = dot(xr, xr) / static_cast<double>(d);
    const double ri = 1.0 / std::sqrt(ms + eps);
    (*inv)[r] = ri;
    auto orow = out.row(r);
    for (std::size_t c = 0; c < d; ++c) orow[c] = xr[c] * ri * (*pg)[c];
  }
  finalize(out, "rmsnorm");
  return Tape::record(std::move(out), {x, gain}, [px, pg, inv, rows, d](const Tensor& g, GradSink& s) {
    Tensor dx(px->shape());
    Tensor dg(pg->shape());
    for (std::size_t r = 0; r < rows; ++r) {
      auto xr = px->row(r);
      auto gr = g.row(r);
      const double ri = (*inv)[r];
      double proj = 0.0;
      for (std::size_t c = 0; c < d; ++c) proj += xr[c] * gr[c] * (*pg)[c];
      const double k = ri * ri * ri * proj / static_cast<double>(d);
      auto dxr = dx.row(r);
      for (std::size_t c = 0; c < d; ++c) {
        dxr[c] = ri * gr[c] * (*pg)[c] - xr[c] * k;
        dg[c] += gr[c] * xr[c] * ri;
      }
    }
    s.add(0, std::move(dx));
    s.add(1, std::move(dg));
  });
}

Var embedding(const Var& weight, std::span<const int> ids) {
  const Tensor& w = weight.value();
  const std::size_t vocab = w.rows();
  const std::size_t d = w.cols();
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DomainError("embedding: id " + std::to_string(ids[r]) + " out of range");
    }
    auto src = w.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  auto kept = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  Shape wshape = w.shape();
  return Tape::record(std::move(out), {weight}, [kept, wshape, d](const Tensor& g, GradSink& s) {
    Tensor dw(wshape);
    for (std::size_t r = 0; r < kept->size(); ++r) {
      auto dst = dw.row(static_cast<std::size_t>((*kept)[r]));
      auto src = g.row(r);
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    s.add(0, std::move(dw));
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  auto pl = logits.value_ptr();
  const std::size_t rows = pl->rows();
  const std::size_t vocab = pl->cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: targets/mask length must equal logits rows");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DomainError("cross_entropy: target out of range");
    }
  }
  if (count == 0) throw DomainError("cross_entropy: empty mask");
  auto lse = std::make_shared<std::vector<double>>(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    auto lr = pl->row(r);
    const double mx = *std::max_element(lr.begin(), lr.end());
    double z = 0.0;
    for (double v : lr) z += std::exp(v - mx);
    (*lse)[r] = mx + std::log(z);
    total += (*lse)[r] - lr[static_cast<std::size_t>(targets[r])];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  finalize(out, "cross_entropy");
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto mk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  return Tape::record(std::move(out), {logits}, [pl, lse, tg, mk, count](const Tensor& g, GradSink& s) {
    Tensor d(pl->shape());
    const double k = g.item() / static_cast<double>(count);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      if (!(*mk)[r]) continue;
      auto lr = pl->row(r);
      auto dr = d.row(r);
      for (std::size_t c = 0; c < dr.size(); ++c) dr[c] = k * std::exp(lr[c] - (*lse)[r]);
      dr[static_cast<std::size_t>((*tg)[r])] -= k;
    }
    s.add(0, std::move(d));
  });
}

}  // namespace ad

double GradientReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

double gradient_rel_error(double ad, double fd) {
  const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
  return std::abs(ad - fd) / denom;
}

GradientReport grad_check(const ScalarFunction& f, const std::vector<Tensor>& params,
                          const GradCheckOptions& options) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-3)) throw DomainError("grad_check: eps outside [1e-7, 1e-3]");

  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  const Var loss = f(leaves);
  const Gradients grads = tape.backward(loss);

  std::vector<std::shared_ptr<Tensor>> work;
  std::vector<Var> consts;
  for (const Tensor& p : params) {
    work.push_back(std::make_shared<Tensor>(p));
    consts.emplace_back(std::shared_ptr<const Tensor>(work.back()));
  }
  auto evaluate = [&]() {
    const double v = f(consts).value().item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: function is non-finite at a perturbed point");
    return v;
  };

  GradientReport report;
  report.tolerance = options.tolerance;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& g = grads.of(leaves[k]);
    const std::size_t n = params[k].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.max_coords) {
      Rng rng(options.seed, k);
      for (std::size_t i = 0; i < options.max_coords; ++i) {
        std::swap(coords[i], coords[i + rng.below(n - i)]);
      }
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    GradientReport::Entry entry;
    entry.param = k;
    entry.coords_checked = coords.size();
    for (std::size_t idx : coords) {
      const double orig = (*work[k])[idx];
      (*work[k])[idx] = orig + options.eps;
      const double fp = evaluate();
      (*work[k])[idx] = orig - options.eps;
      const double fm = evaluate();
      (*work[k])[idx] = orig;
      const double fd = (fp - fm) / (2.0 * options.eps);
      const double err = gradient_rel_error(g[idx], fd);
      if (err > entry.max_rel_error || (entry.max_rel_error == 0.0 && idx == coords.front())) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        entry.worst_index = idx;
        entry.ad_at_worst = g[idx];
        entry.fd_at_worst = fd;
      }
    }
    report.entries.push_back(entry);
  }
  report.passed = report.max_rel_error() < options.tolerance;
  return report;
}

}  // namespace transx
