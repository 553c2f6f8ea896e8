#include "ood/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "ood/kernels.hpp"

namespace ood::autodiff {

namespace ker = ood::kernels;

std::size_t shape_numel(const Shape& s) {
  if (s.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace {

std::string shape_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out.empty() ? "<empty>" : out;
}

// Interprets a tensor as rows x cols: 2-D as is, 1-D as a single row.
void as_2d(const Shape& s, std::size_t& rows, std::size_t& cols, const char* op) {
  if (s.size() == 1) {
    rows = 1;
    cols = s[0];
  } else if (s.size() == 2) {
    rows = s[0];
    cols = s[1];
  } else {
    throw ShapeError(std::string(op) + ": expected a 1-D or 2-D tensor, got " + shape_str(s));
  }
}

} // namespace

const Shape& Tensor::shape() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  return tape_->node(id_).shape;
}

std::size_t Tensor::numel() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  return tape_->node(id_).values.size();
}

bool Tensor::requires_grad() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  return tape_->node(id_).requires_grad;
}

std::span<const double> Tensor::values() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  const auto& n = tape_->node(id_);
  return {n.values.data(), n.values.size()};
}

double Tensor::value() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  const auto& n = tape_->node(id_);
  if (n.values.size() != 1) {
    throw UsageError("value() on a tensor with " + std::to_string(n.values.size()) + " elements");
  }
  return n.values[0];
}

std::span<const double> Tensor::grad() const {
  if (!tape_) throw UsageError("use of a default-constructed tensor");
  if (!tape_->node(id_).requires_grad) {
    throw UsageError("gradient requested for a tensor that does not require grad");
  }
  tape_->grad_buf(id_);
  const auto& n = tape_->node(id_);
  return {n.grad.data(), n.grad.size()};
}

std::vector<double>& Tape::grad_buf(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

Tensor Tape::make_node(Shape shape, std::vector<double> values, bool requires_grad) {
  nodes_.push_back(Node{std::move(shape), std::move(values), {}, requires_grad});
  return Tensor(this, nodes_.size() - 1);
}

void Tape::record(std::function<void()> backprop) {
  records_.push_back(std::move(backprop));
}

void Tape::check_owned(Tensor t, const char* op) const {
  if (t.tape_ != this) {
    throw UsageError(std::string(op) + ": tensor does not belong to this tape");
  }
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  if (n == 0) throw ShapeError("leaf: empty shape");
  if (values.size() != n) {
    throw ShapeError("leaf: shape " + shape_str(shape) + " expects " + std::to_string(n) +
                     " values, got " + std::to_string(values.size()));
  }
  return make_node(std::move(shape), std::move(values), requires_grad);
}

Tensor Tape::scalar(double value, bool requires_grad) {
  return make_node({1}, {value}, requires_grad);
}

Tensor Tape::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  if (n == 0) throw ShapeError("zeros: empty shape");
  return make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

std::vector<double>& Tape::adj_buf(std::size_t id) {
  auto& a = adj_[id];
  if (a.empty()) a.assign(nodes_[id].values.size(), 0.0);
  return a;
}

const std::vector<double>* Tape::adj_in(std::size_t id) const {
  const auto& a = adj_[id];
  return a.empty() ? nullptr : &a;
}

void Tape::backward(Tensor loss) {
  check_owned(loss, "backward");
  const Node& ln = node(loss.id_);
  if (ln.values.size() != 1) {
    throw UsageError("backward: loss must have one element, got " +
                     std::to_string(ln.values.size()));
  }
  if (!ln.requires_grad) {
    throw UsageError("backward: loss has no gradient path to any leaf");
  }

  adj_.assign(nodes_.size(), {});
  adj_[loss.id_] = {1.0};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();

  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || adj_[id].empty()) continue;
    if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
    ker::add(n.grad.data(), adj_[id].data(), n.grad.data(), n.grad.size());
  }
  adj_.clear();
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
}

namespace {

// dst += src, in place
void acc(std::vector<double>& dst, const double* src, std::size_t n) {
  ker::add(dst.data(), src, dst.data(), n);
}

} // namespace

Tensor Tape::add(Tensor a, Tensor b) {
  check_owned(a, "add");
  check_owned(b, "add");
  const Node& na = node(a.id_);
  const Node& nb = node(b.id_);
  const std::size_t an = na.values.size(), bn = nb.values.size();
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t aid = a.id_, bid = b.id_;

  if (na.shape == nb.shape) {
    std::vector<double> out(an);
    ker::add(na.values.data(), nb.values.data(), out.data(), an);
    Tensor t = make_node(na.shape, std::move(out), rg);
    if (rg) {
      record([this, aid, bid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        if (wants_grad(aid)) acc(adj_buf(aid), g->data(), g->size());
        if (wants_grad(bid)) acc(adj_buf(bid), g->data(), g->size());
      });
    }
    return t;
  }
  if (an == 1 || bn == 1) {
    const bool b_is_scalar = bn == 1;
    const Node& nt = b_is_scalar ? na : nb; // tensor operand
    const double s = (b_is_scalar ? nb : na).values[0];
    std::vector<double> out(nt.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = nt.values[i] + s;
    Tensor t = make_node(nt.shape, std::move(out), rg);
    if (rg) {
      const std::size_t tid = b_is_scalar ? aid : bid;
      const std::size_t sid = b_is_scalar ? bid : aid;
      record([this, tid, sid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        if (wants_grad(tid)) acc(adj_buf(tid), g->data(), g->size());
        if (wants_grad(sid)) adj_buf(sid)[0] += ker::reduce_sum(g->data(), g->size());
      });
    }
    return t;
  }
  throw ShapeError("add: shapes " + shape_str(na.shape) + " and " + shape_str(nb.shape) +
                   " do not match");
}

Tensor Tape::sub(Tensor a, Tensor b) {
  check_owned(a, "sub");
  check_owned(b, "sub");
  const Node& na = node(a.id_);
  const Node& nb = node(b.id_);
  const std::size_t an = na.values.size(), bn = nb.values.size();
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t aid = a.id_, bid = b.id_;

  if (na.shape == nb.shape) {
    std::vector<double> out(an);
    ker::sub(na.values.data(), nb.values.data(), out.data(), an);
    Tensor t = make_node(na.shape, std::move(out), rg);
    if (rg) {
      record([this, aid, bid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        if (wants_grad(aid)) acc(adj_buf(aid), g->data(), g->size());
        if (wants_grad(bid)) ker::axpy(-1.0, g->data(), adj_buf(bid).data(), g->size());
      });
    }
    return t;
  }
  if (bn == 1) {
    const double s = nb.values[0];
    std::vector<double> out(an);
    for (std::size_t i = 0; i < an; ++i) out[i] = na.values[i] - s;
    Tensor t = make_node(na.shape, std::move(out), rg);
    if (rg) {
      record([this, aid, bid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        if (wants_grad(aid)) acc(adj_buf(aid), g->data(), g->size());
        if (wants_grad(bid)) adj_buf(bid)[0] -= ker::reduce_sum(g->data(), g->size());
      });
    }
    return t;
  }
  if (an == 1) {
    const double s = na.values[0];
    std::vector<double> out(bn);
    for (std::size_t i = 0; i < bn; ++i) out[i] = s - nb.values[i];
    Tensor t = make_node(nb.shape, std::move(out), rg);
    if (rg) {
      record([this, aid, bid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        if (wants_grad(aid)) adj_buf(aid)[0] += ker::reduce_sum(g->data(), g->size());
        if (wants_grad(bid)) ker::axpy(-1.0, g->data(), adj_buf(bid).data(), g->size());
      });
    }
    return t;
  }
  throw ShapeError("sub: shapes " + shape_str(na.shape) + " and " + shape_str(nb.shape) +
                   " do not match");
}

Tensor Tape::mul(Tensor a, Tensor b) {
  check_owned(a, "mul");
  check_owned(b, "mul");
  const Node& na = node(a.id_);
  const Node& nb = node(b.id_);
  const std::size_t an = na.values.size(), bn = nb.values.size();
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t aid = a.id_, bid = b.id_;

  if (na.shape == nb.shape) {
    std::vector<double> out(an);
    ker::mul(na.values.data(), nb.values.data(), out.data(), an);
    Tensor t = make_node(na.shape, std::move(out), rg);
    if (rg) {
      record([this, aid, bid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        const std::size_t n = g->size();
        std::vector<double> tmp(n);
        if (wants_grad(aid)) {
          ker::mul(g->data(), node(bid).values.data(), tmp.data(), n);
          acc(adj_buf(aid), tmp.data(), n);
        }
        if (wants_grad(bid)) {
          ker::mul(g->data(), node(aid).values.data(), tmp.data(), n);
          acc(adj_buf(bid), tmp.data(), n);
        }
      });
    }
    return t;
  }
  if (an == 1 || bn == 1) {
    const bool b_is_scalar = bn == 1;
    const Node& nt = b_is_scalar ? na : nb;
    const double s = (b_is_scalar ? nb : na).values[0];
    std::vector<double> out(nt.values.size());
    ker::scale(nt.values.data(), s, out.data(), out.size());
    Tensor t = make_node(nt.shape, std::move(out), rg);
    if (rg) {
      const std::size_t tid = b_is_scalar ? aid : bid;
      const std::size_t sid = b_is_scalar ? bid : aid;
      record([this, tid, sid, oid = t.id_] {
        const auto* g = adj_in(oid);
        if (!g) return;
        const std::size_t n = g->size();
        const double sv = node(sid).values[0];
        if (wants_grad(tid)) ker::axpy(sv, g->data(), adj_buf(tid).data(), n);
        if (wants_grad(sid)) {
          adj_buf(sid)[0] += ker::dot(g->data(), node(tid).values.data(), n);
        }
      });
    }
    return t;
  }
  throw ShapeError("mul: shapes " + shape_str(na.shape) + " and " + shape_str(nb.shape) +
                   " do not match");
}

Tensor Tape::neg(Tensor t) {
  check_owned(t, "neg");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  ker::scale(n.values.data(), -1.0, out.data(), out.size());
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      ker::axpy(-1.0, g->data(), adj_buf(tid).data(), g->size());
    });
  }
  return r;
}

Tensor Tape::relu(Tensor t) {
  check_owned(t, "relu");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  ker::relu(n.values.data(), out.data(), out.size());
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      ker::relu_backward(node(tid).values.data(), g->data(), adj_buf(tid).data(), g->size());
    });
  }
  return r;
}

Tensor Tape::exp(Tensor t) {
  check_owned(t, "exp");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(n.values[i]);
    if (!std::isfinite(out[i])) {
      throw ValueError("exp: overflow for input " + std::to_string(n.values[i]));
    }
  }
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      const std::size_t sz = g->size();
      std::vector<double> tmp(sz);
      ker::mul(g->data(), node(oid).values.data(), tmp.data(), sz);
      acc(adj_buf(tid), tmp.data(), sz);
    });
  }
  return r;
}

Tensor Tape::log(Tensor t) {
  check_owned(t, "log");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(n.values[i] > 0.0)) {
      throw ValueError("log: non-positive input " + std::to_string(n.values[i]));
    }
    out[i] = std::log(n.values[i]);
  }
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      auto& gt = adj_buf(tid);
      const auto& v = node(tid).values;
      for (std::size_t i = 0; i < g->size(); ++i) gt[i] += (*g)[i] / v[i];
    });
  }
  return r;
}

Tensor Tape::scale(Tensor t, double alpha) {
  check_owned(t, "scale");
  if (!std::isfinite(alpha)) throw ValueError("scale: factor must be finite");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  ker::scale(n.values.data(), alpha, out.data(), out.size());
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, alpha, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      ker::axpy(alpha, g->data(), adj_buf(tid).data(), g->size());
    });
  }
  return r;
}

Tensor Tape::add_scalar(Tensor t, double c) {
  check_owned(t, "add_scalar");
  if (!std::isfinite(c)) throw ValueError("add_scalar: addend must be finite");
  const Node& n = node(t.id_);
  std::vector<double> out(n.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.values[i] + c;
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      acc(adj_buf(tid), g->data(), g->size());
    });
  }
  return r;
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Node& na = node(a.id_);
  const Node& nb = node(b.id_);
  if (na.shape.size() != 2 || nb.shape.size() != 2) {
    throw ShapeError("matmul: expected 2-D tensors, got " + shape_str(na.shape) + " and " +
                     shape_str(nb.shape));
  }
  const std::size_t m = na.shape[0], k = na.shape[1];
  const std::size_t k2 = nb.shape[0], n = nb.shape[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(na.shape) + " vs " +
                     shape_str(nb.shape) + ")");
  }
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = na.values.data() + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      ker::axpy(arow[p], nb.values.data() + p * n, orow, n);
    }
  }
  const bool rg = na.requires_grad || nb.requires_grad;
  Tensor r = make_node({m, n}, std::move(out), rg);
  if (rg) {
    record([this, m, k, n, aid = a.id_, bid = b.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      const auto& av = node(aid).values;
      const auto& bv = node(bid).values;
      if (wants_grad(aid)) {
        auto& ga = adj_buf(aid);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g->data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            ga[i * k + p] += ker::dot(grow, bv.data() + p * n, n);
          }
        }
      }
      if (wants_grad(bid)) {
        auto& gb = adj_buf(bid);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g->data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            ker::axpy(av[i * k + p], grow, gb.data() + p * n, n);
          }
        }
      }
    });
  }
  return r;
}

Tensor Tape::add_rowvec(Tensor m, Tensor v) {
  check_owned(m, "add_rowvec");
  check_owned(v, "add_rowvec");
  const Node& nm = node(m.id_);
  const Node& nv = node(v.id_);
  if (nm.shape.size() != 2) {
    throw ShapeError("add_rowvec: expected a 2-D matrix, got " + shape_str(nm.shape));
  }
  const std::size_t rows = nm.shape[0], cols = nm.shape[1];
  if (nv.values.size() != cols) {
    throw ShapeError("add_rowvec: vector has " + std::to_string(nv.values.size()) +
                     " elements, matrix rows have " + std::to_string(cols));
  }
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    ker::add(nm.values.data() + i * cols, nv.values.data(), out.data() + i * cols, cols);
  }
  const bool rg = nm.requires_grad || nv.requires_grad;
  Tensor r = make_node(nm.shape, std::move(out), rg);
  if (rg) {
    record([this, rows, cols, mid = m.id_, vid = v.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      if (wants_grad(mid)) acc(adj_buf(mid), g->data(), g->size());
      if (wants_grad(vid)) {
        auto& gv = adj_buf(vid);
        for (std::size_t i = 0; i < rows; ++i) {
          ker::add(gv.data(), g->data() + i * cols, gv.data(), cols);
        }
      }
    });
  }
  return r;
}

Tensor Tape::softmax(Tensor logits, double tau) {
  check_owned(logits, "softmax");
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ValueError("softmax: temperature must be positive and finite, got " +
                     std::to_string(tau));
  }
  const Node& n = node(logits.id_);
  std::size_t rows, cols;
  as_2d(n.shape, rows, cols, "softmax");
  std::vector<double> out(n.values.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = n.values.data() + i * cols;
    double* orow = out.data() + i * cols;
    const double mx = ker::reduce_max(row, cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      orow[j] = std::exp((row[j] - mx) / tau);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < cols; ++j) orow[j] /= sum;
  }
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, tau, rows, cols, tid = logits.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      const auto& y = node(oid).values;
      auto& gt = adj_buf(tid);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* grow = g->data() + i * cols;
        const double* yrow = y.data() + i * cols;
        const double inner = ker::dot(grow, yrow, cols);
        for (std::size_t j = 0; j < cols; ++j) {
          gt[i * cols + j] += yrow[j] * (grow[j] - inner) / tau;
        }
      }
    });
  }
  return r;
}

Tensor Tape::sum(Tensor t) {
  check_owned(t, "sum");
  const Node& n = node(t.id_);
  const double total = ker::reduce_sum(n.values.data(), n.values.size());
  Tensor r = make_node({1}, {total}, n.requires_grad);
  if (n.requires_grad) {
    record([this, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      const double g0 = (*g)[0];
      auto& gt = adj_buf(tid);
      for (double& x : gt) x += g0;
    });
  }
  return r;
}

Tensor Tape::sum_rows(Tensor m) {
  check_owned(m, "sum_rows");
  const Node& n = node(m.id_);
  std::size_t rows, cols;
  as_2d(n.shape, rows, cols, "sum_rows");
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    out[i] = ker::reduce_sum(n.values.data() + i * cols, cols);
  }
  Tensor r = make_node({rows}, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, rows, cols, tid = m.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      auto& gt = adj_buf(tid);
      for (std::size_t i = 0; i < rows; ++i) {
        const double gi = (*g)[i];
        double* grow = gt.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) grow[j] += gi;
      }
    });
  }
  return r;
}

Tensor Tape::row_max(Tensor m) {
  check_owned(m, "row_max");
  const Node& n = node(m.id_);
  std::size_t rows, cols;
  as_2d(n.shape, rows, cols, "row_max");
  if (cols == 0) throw ShapeError("row_max: empty rows");
  std::vector<double> out(rows);
  auto argmax = std::make_shared<std::vector<std::size_t>>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = n.values.data() + i * cols;
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = row[best];
    (*argmax)[i] = best;
  }
  Tensor r = make_node({rows}, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, cols, argmax, tid = m.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      auto& gt = adj_buf(tid);
      for (std::size_t i = 0; i < g->size(); ++i) {
        gt[i * cols + (*argmax)[i]] += (*g)[i];
      }
    });
  }
  return r;
}

Tensor Tape::hstack(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw UsageError("hstack: no columns");
  for (Tensor c : cols) check_owned(c, "hstack");
  const std::size_t rows = node(cols[0].id_).values.size();
  bool rg = false;
  for (Tensor c : cols) {
    const Node& n = node(c.id_);
    if (n.shape.size() != 1 || n.values.size() != rows) {
      throw ShapeError("hstack: columns must be 1-D with equal length");
    }
    rg = rg || n.requires_grad;
  }
  const std::size_t k = cols.size();
  std::vector<double> out(rows * k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto& v = node(cols[j].id_).values;
    for (std::size_t i = 0; i < rows; ++i) out[i * k + j] = v[i];
  }
  Tensor r = make_node({rows, k}, std::move(out), rg);
  if (rg) {
    auto ids = std::make_shared<std::vector<std::size_t>>();
    ids->reserve(k);
    for (Tensor c : cols) ids->push_back(c.id_);
    record([this, rows, k, ids, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t cid = (*ids)[j];
        if (!wants_grad(cid)) continue;
        auto& gc = adj_buf(cid);
        for (std::size_t i = 0; i < rows; ++i) gc[i] += (*g)[i * k + j];
      }
    });
  }
  return r;
}

Tensor Tape::dropout(Tensor t, double p, std::mt19937_64& rng) {
  check_owned(t, "dropout");
  if (!(p >= 0.0) || p >= 1.0) {
    throw ValueError("dropout: p must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return t;
  const Node& n = node(t.id_);
  const std::size_t sz = n.values.size();
  const double inv_keep = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(sz);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < sz; ++i) {
    (*mask)[i] = unit(rng) >= p ? inv_keep : 0.0;
  }
  std::vector<double> out(sz);
  ker::mul(n.values.data(), mask->data(), out.data(), sz);
  Tensor r = make_node(n.shape, std::move(out), n.requires_grad);
  if (n.requires_grad) {
    record([this, mask, tid = t.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      const std::size_t sz2 = g->size();
      std::vector<double> tmp(sz2);
      ker::mul(g->data(), mask->data(), tmp.data(), sz2);
      acc(adj_buf(tid), tmp.data(), sz2);
    });
  }
  return r;
}

Tensor Tape::cross_entropy_with_logits(Tensor logits, const std::vector<int>& labels) {
  check_owned(logits, "cross_entropy_with_logits");
  const Node& n = node(logits.id_);
  if (n.shape.size() != 2) {
    throw ShapeError("cross_entropy_with_logits: expected 2-D logits, got " +
                     shape_str(n.shape));
  }
  const std::size_t rows = n.shape[0], cols = n.shape[1];
  if (labels.size() != rows) {
    throw UsageError("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
  // d(loss)/d(logit) = (softmax - onehot) / rows, precomputed while the
  // stabilized probabilities are at hand
  auto dlogits = std::make_shared<std::vector<double>>(rows * cols);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= cols) {
      throw ValueError("cross_entropy_with_logits: label " + std::to_string(label) +
                       " outside [0, " + std::to_string(cols) + ") at row " + std::to_string(i));
    }
    const double* row = n.values.data() + i * cols;
    const double mx = ker::reduce_max(row, cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[label];
    double* drow = dlogits->data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      drow[j] = std::exp(row[j] - lse) / static_cast<double>(rows);
    }
    drow[label] -= 1.0 / static_cast<double>(rows);
  }
  Tensor r = make_node({1}, {total / static_cast<double>(rows)}, n.requires_grad);
  if (n.requires_grad) {
    record([this, dlogits, tid = logits.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      ker::axpy((*g)[0], dlogits->data(), adj_buf(tid).data(), dlogits->size());
    });
  }
  return r;
}

Tensor Tape::bce_mean(Tensor probs, const std::vector<double>& targets) {
  check_owned(probs, "bce_mean");
  const Node& n = node(probs.id_);
  std::size_t rows, cols;
  as_2d(n.shape, rows, cols, "bce_mean");
  if (targets.size() != n.values.size()) {
    throw UsageError("bce_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n.values.size()) + " probabilities");
  }
  // Probabilities are clamped away from 0 and 1 inside the loss only; the
  // gradient is zero where the clamp is active.
  constexpr double kEps = 1e-12;
  auto dprobs = std::make_shared<std::vector<double>>(n.values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < n.values.size(); ++i) {
    const double p = n.values[i];
    const double t = targets[i];
    const bool clamped = p < kEps || p > 1.0 - kEps;
    const double pc = std::clamp(p, kEps, 1.0 - kEps);
    total -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
    (*dprobs)[i] =
        clamped ? 0.0 : -(t / pc - (1.0 - t) / (1.0 - pc)) / static_cast<double>(rows);
  }
  Tensor r = make_node({1}, {total / static_cast<double>(rows)}, n.requires_grad);
  if (n.requires_grad) {
    record([this, dprobs, tid = probs.id_, oid = r.id_] {
      const auto* g = adj_in(oid);
      if (!g) return;
      ker::axpy((*g)[0], dprobs->data(), adj_buf(tid).data(), dprobs->size());
    });
  }
  return r;
}

} // namespace ood::autodiff
