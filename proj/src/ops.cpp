#include "rfc/ops.hpp"

#include <cmath>

#include "rfc/errors.hpp"

namespace rfc {

using detail::Node;
using detail::accumulate;
using NodePtr = std::shared_ptr<Node>;

namespace {

NodePtr fresh(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

void attach(const NodePtr& n, std::initializer_list<Var> parents) {
  for (const Var& p : parents) {
    check_dim(p.defined(), "op received an undefined Var");
    n->parents.push_back(p.node());
    if (p.node()->requires_grad) n->requires_grad = true;
  }
}

void require_rank(const Var& x, std::size_t r, const char* what) {
  check_dim(x.value().rank() == r, std::string(what) + ": unexpected rank");
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.value().dim(0), k = a.value().dim(1);
  const std::size_t k2 = b.value().dim(0), n = b.value().dim(1);
  check_dim(k == k2, "matmul: inner extents disagree");
  Tensor out({m, n});
  out.matrix(m, n) = a.value().matrix(m, k) * b.value().matrix(k2, n);
  auto node = fresh(std::move(out));
  attach(node, {a, b});
  if (node->requires_grad) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb, m, k, n](Node& self) {
      auto g = self.grad.matrix(m, n);
      if (pa->requires_grad) {
        Tensor ga({m, k});
        ga.matrix(m, k) = g * pb->value.matrix(k, n).transpose();
        accumulate(*pa, ga);
      }
      if (pb->requires_grad) {
        Tensor gb({k, n});
        gb.matrix(k, n) = pa->value.matrix(m, k).transpose() * g;
        accumulate(*pb, gb);
      }
    };
  }
  return Var(node);
}

Var add(const Var& a, const Var& b) {
  check_dim(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() + b.value().array();
  auto node = fresh(std::move(out));
  attach(node, {a, b});
  if (node->requires_grad) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb](Node& self) {
      if (pa->requires_grad) accumulate(*pa, self.grad);
      if (pb->requires_grad) accumulate(*pb, self.grad);
    };
  }
  return Var(node);
}

Var sub(const Var& a, const Var& b) {
  check_dim(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() - b.value().array();
  auto node = fresh(std::move(out));
  attach(node, {a, b});
  if (node->requires_grad) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb](Node& self) {
      if (pa->requires_grad) accumulate(*pa, self.grad);
      if (pb->requires_grad) {
        Tensor gb(self.grad.shape());
        gb.array() = -self.grad.array();
        accumulate(*pb, gb);
      }
    };
  }
  return Var(node);
}

Var mul(const Var& a, const Var& b) {
  check_dim(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() * b.value().array();
  auto node = fresh(std::move(out));
  attach(node, {a, b});
  if (node->requires_grad) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb](Node& self) {
      if (pa->requires_grad) {
        Tensor ga(self.grad.shape());
        ga.array() = self.grad.array() * pb->value.array();
        accumulate(*pa, ga);
      }
      if (pb->requires_grad) {
        Tensor gb(self.grad.shape());
        gb.array() = self.grad.array() * pa->value.array();
        accumulate(*pb, gb);
      }
    };
  }
  return Var(node);
}

Var add_rowvec(const Var& m, const Var& v) {
  require_rank(m, 2, "add_rowvec matrix");
  const std::size_t r = m.value().dim(0), c = m.value().dim(1);
  check_dim(v.value().size() == c, "add_rowvec: vector size != columns");
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = m.value().at(i, j) + v.value()[j];
  auto node = fresh(std::move(out));
  attach(node, {m, v});
  if (node->requires_grad) {
    auto pm = m.node(), pv = v.node();
    node->backprop = [pm, pv, r, c](Node& self) {
      if (pm->requires_grad) accumulate(*pm, self.grad);
      if (pv->requires_grad) {
        Tensor gv(pv->value.shape());
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += self.grad.at(i, j);
        accumulate(*pv, gv);
      }
    };
  }
  return Var(node);
}

Var mul_rowvec(const Var& m, const Var& v) {
  require_rank(m, 2, "mul_rowvec matrix");
  const std::size_t r = m.value().dim(0), c = m.value().dim(1);
  check_dim(v.value().size() == c, "mul_rowvec: vector size != columns");
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.at(i, j) = m.value().at(i, j) * v.value()[j];
  auto node = fresh(std::move(out));
  attach(node, {m, v});
  if (node->requires_grad) {
    auto pm = m.node(), pv = v.node();
    node->backprop = [pm, pv, r, c](Node& self) {
      if (pm->requires_grad) {
        Tensor gm({r, c});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gm.at(i, j) = self.grad.at(i, j) * pv->value[j];
        accumulate(*pm, gm);
      }
      if (pv->requires_grad) {
        Tensor gv(pv->value.shape());
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gv[j] += self.grad.at(i, j) * pm->value.at(i, j);
        accumulate(*pv, gv);
      }
    };
  }
  return Var(node);
}

Var scale(const Var& x, double c) {
  Tensor out(x.value().shape());
  out.array() = x.value().array() * c;
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, c](Node& self) {
      Tensor g(self.grad.shape());
      g.array() = self.grad.array() * c;
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var div_scalar(const Var& x, const Var& s) {
  check_dim(s.value().size() == 1, "div_scalar: divisor must be size-1");
  const double sv = s.value()[0];
  check_numeric(sv != 0.0, "div_scalar: division by zero");
  Tensor out(x.value().shape());
  out.array() = x.value().array() / sv;
  auto node = fresh(std::move(out));
  attach(node, {x, s});
  if (node->requires_grad) {
    auto px = x.node(), ps = s.node();
    node->backprop = [px, ps, sv](Node& self) {
      if (px->requires_grad) {
        Tensor gx(self.grad.shape());
        gx.array() = self.grad.array() / sv;
        accumulate(*px, gx);
      }
      if (ps->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.value.size(); ++i)
          acc += self.grad[i] * self.value[i];
        accumulate(*ps, Tensor::scalar(-acc / sv));
      }
    };
  }
  return Var(node);
}

Var relu(const Var& x) {
  Tensor out(x.value().shape());
  out.array() = x.value().array().max(0.0);
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = px->value[i] > 0.0 ? self.grad[i] : 0.0;
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var sigmoid(const Var& x) {
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = stable_sigmoid(x.value()[i]);
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = self.value[i];
        g[i] = self.grad[i] * y * (1.0 - y);
      }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var abs(const Var& x) {
  Tensor out(x.value().shape());
  out.array() = x.value().array().abs();
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = px->value[i];
        g[i] = v > 0.0 ? self.grad[i] : (v < 0.0 ? -self.grad[i] : 0.0);
      }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var sqrt(const Var& x) {
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    check_numeric(x.value()[i] >= 0.0, "sqrt: negative input");
    out[i] = std::sqrt(x.value()[i]);
  }
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(self.grad.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = self.value[i];
        g[i] = y > 0.0 ? self.grad[i] / (2.0 * y) : 0.0;
      }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  auto node = fresh(Tensor::scalar(acc));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(px->value.shape());
      g.array() = self.grad[0];
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var dot(const Var& a, const Var& b) {
  check_dim(a.value().size() == b.value().size(), "dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i)
    acc += a.value()[i] * b.value()[i];
  auto node = fresh(Tensor::scalar(acc));
  attach(node, {a, b});
  if (node->requires_grad) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb](Node& self) {
      const double g = self.grad[0];
      if (pa->requires_grad) {
        Tensor ga(pa->value.shape());
        ga.array() = pb->value.array() * g;
        accumulate(*pa, ga);
      }
      if (pb->requires_grad) {
        Tensor gb(pb->value.shape());
        gb.array() = pa->value.array() * g;
        accumulate(*pb, gb);
      }
    };
  }
  return Var(node);
}

Var sum_vars(const std::vector<Var>& xs) {
  check_valid(!xs.empty(), "sum_vars: empty list");
  Tensor out(xs[0].value().shape());
  for (const Var& x : xs) {
    check_dim(x.value().same_shape(out), "sum_vars: shape mismatch");
    out.array() += x.value().array();
  }
  auto node = fresh(std::move(out));
  for (const Var& x : xs) {
    node->parents.push_back(x.node());
    if (x.node()->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->backprop = [](Node& self) {
      for (auto& p : self.parents)
        if (p->requires_grad) accumulate(*p, self.grad);
    };
  }
  return Var(node);
}

Var mean_vars(const std::vector<Var>& xs) {
  return scale(sum_vars(xs), 1.0 / static_cast<double>(xs.size()));
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  check_numeric(x.value().all_finite(), "softmax_rows: non-finite input");
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  check_dim(c >= 1, "softmax_rows: empty rows");
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double m = x.value().at(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, x.value().at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out.at(i, j) = std::exp(x.value().at(i, j) - m);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, r, c](Node& self) {
      Tensor g({r, c});
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          s += self.grad.at(i, j) * self.value.at(i, j);
        for (std::size_t j = 0; j < c; ++j)
          g.at(i, j) = self.value.at(i, j) * (self.grad.at(i, j) - s);
      }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var l1_normalize_columns(const Var& x) {
  require_rank(x, 2, "l1_normalize_columns");
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  Tensor sums({c});
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += x.value().at(i, j);
    check_numeric(s > 1e-12, "l1_normalize_columns: degenerate column sum");
    sums[j] = s;
  }
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.value().at(i, j) / sums[j];
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, sums, r, c](Node& self) {
      Tensor g({r, c});
      for (std::size_t j = 0; j < c; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < r; ++i)
          s += self.grad.at(i, j) * self.value.at(i, j);
        for (std::size_t i = 0; i < r; ++i)
          g.at(i, j) = (self.grad.at(i, j) - s) / sums[j];
      }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var mean_over_axis(const Var& x, std::size_t axis) {
  const Shape& in = x.value().shape();
  check_dim(axis < in.size(), "mean_over_axis: axis out of range");
  const std::size_t extent = in[axis];
  check_dim(extent > 0, "mean_over_axis: empty axis");
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t outer = x.value().size() / (extent * inner);
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (i != axis) out_shape.push_back(in[i]);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t d = 0; d < extent; ++d)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += x.value()[(o * extent + d) * inner + i];
  out.array() /= static_cast<double>(extent);
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, outer, extent, inner](Node& self) {
      Tensor g(px->value.shape());
      const double inv = 1.0 / static_cast<double>(extent);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t d = 0; d < extent; ++d)
          for (std::size_t i = 0; i < inner; ++i)
            g[(o * extent + d) * inner + i] = self.grad[o * inner + i] * inv;
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var reshape(const Var& x, Shape shape) {
  check_dim(Tensor::count(shape) == x.value().size(),
            "reshape: extent product mismatch");
  Tensor out(shape);
  out.array() = x.value().array();
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px](Node& self) {
      Tensor g(px->value.shape());
      g.array() = self.grad.array();
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var transpose(const Var& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  Tensor out({c, r});
  out.matrix(c, r) = x.value().matrix(r, c).transpose();
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, r, c](Node& self) {
      Tensor g({r, c});
      g.matrix(r, c) = self.grad.matrix(c, r).transpose();
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var row(const Var& x, std::size_t i) {
  require_rank(x, 2, "row");
  const std::size_t r = x.value().dim(0), c = x.value().dim(1);
  check_dim(i < r, "row: index out of range");
  Tensor out({1, c});
  for (std::size_t j = 0; j < c; ++j) out[j] = x.value().at(i, j);
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, i, r, c](Node& self) {
      Tensor g({r, c});
      for (std::size_t j = 0; j < c; ++j) g.at(i, j) = self.grad[j];
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var slice_frame(const Var& x, std::size_t t) {
  require_rank(x, 4, "slice_frame");
  const Shape& s = x.value().shape();
  check_dim(t < s[0], "slice_frame: index out of range");
  const std::size_t block = s[1] * s[2] * s[3];
  Tensor out({s[1], s[2], s[3]});
  for (std::size_t i = 0; i < block; ++i) out[i] = x.value()[t * block + i];
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, t, block](Node& self) {
      Tensor g(px->value.shape());
      for (std::size_t i = 0; i < block; ++i) g[t * block + i] = self.grad[i];
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var concat_rows(const std::vector<Var>& pieces) {
  check_valid(!pieces.empty(), "concat_rows: empty list");
  const std::size_t c = pieces[0].value().dim(1);
  std::size_t rows = 0;
  for (const Var& p : pieces) {
    check_dim(p.value().rank() == 2 && p.value().dim(1) == c,
              "concat_rows: rank/column mismatch");
    rows += p.value().dim(0);
  }
  Tensor out({rows, c});
  std::size_t off = 0;
  for (const Var& p : pieces) {
    const std::size_t n = p.value().size();
    for (std::size_t i = 0; i < n; ++i) out[off + i] = p.value()[i];
    off += n;
  }
  auto node = fresh(std::move(out));
  for (const Var& p : pieces) {
    node->parents.push_back(p.node());
    if (p.node()->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->backprop = [](Node& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        const std::size_t n = p->value.size();
        if (p->requires_grad) {
          Tensor g(p->value.shape());
          for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[off + i];
          accumulate(*p, g);
        }
        off += n;
      }
    };
  }
  return Var(node);
}

Var stack_scalars(const std::vector<Var>& scalars) {
  check_valid(!scalars.empty(), "stack_scalars: empty list");
  Tensor out({1, scalars.size()});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    check_dim(scalars[i].value().size() == 1, "stack_scalars: non-scalar entry");
    out[i] = scalars[i].value()[0];
  }
  auto node = fresh(std::move(out));
  for (const Var& s : scalars) {
    node->parents.push_back(s.node());
    if (s.node()->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.parents.size(); ++i)
        if (self.parents[i]->requires_grad)
          accumulate(*self.parents[i], Tensor::scalar(self.grad[i]));
    };
  }
  return Var(node);
}

Var cosine(const Var& a, const Var& b) {
  check_dim(a.value().size() == b.value().size(), "cosine: size mismatch");
  const std::size_t n = a.value().size();
  double daa = 0.0, dbb = 0.0, dab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    daa += a.value()[i] * a.value()[i];
    dbb += b.value()[i] * b.value()[i];
    dab += a.value()[i] * b.value()[i];
  }
  const double na = std::sqrt(daa), nb = std::sqrt(dbb);
  const bool degenerate = (na == 0.0 || nb == 0.0);
  const double c = degenerate ? 0.0 : dab / (na * nb);
  auto node = fresh(Tensor::scalar(c));
  attach(node, {a, b});
  if (node->requires_grad && !degenerate) {
    auto pa = a.node(), pb = b.node();
    node->backprop = [pa, pb, na, nb, c](Node& self) {
      const double g = self.grad[0];
      const double inv = 1.0 / (na * nb);
      if (pa->requires_grad) {
        Tensor ga(pa->value.shape());
        ga.array() =
            g * (pb->value.array() * inv - pa->value.array() * (c / (na * na)));
        accumulate(*pa, ga);
      }
      if (pb->requires_grad) {
        Tensor gb(pb->value.shape());
        gb.array() =
            g * (pa->value.array() * inv - pb->value.array() * (c / (nb * nb)));
        accumulate(*pb, gb);
      }
    };
  }
  return Var(node);
}

Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy_mean");
  const std::size_t b = logits.value().dim(0), c = logits.value().dim(1);
  check_valid(labels.size() == b, "cross_entropy_mean: label count mismatch");
  Tensor probs({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    check_valid(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
                "cross_entropy_mean: label out of range");
    double m = logits.value().at(i, 0);
    for (std::size_t j = 1; j < c; ++j)
      m = std::max(m, logits.value().at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs.at(i, j) = std::exp(logits.value().at(i, j) - m);
      z += probs.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs.at(i, j) /= z;
    loss += (m + std::log(z)) - logits.value().at(i, static_cast<std::size_t>(labels[i]));
  }
  loss /= static_cast<double>(b);
  auto node = fresh(Tensor::scalar(loss));
  attach(node, {logits});
  if (node->requires_grad) {
    auto px = logits.node();
    node->backprop = [px, probs, labels, b, c](Node& self) {
      const double g = self.grad[0] / static_cast<double>(b);
      Tensor gx({b, c});
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double p = probs.at(i, j);
          if (static_cast<std::size_t>(labels[i]) == j) p -= 1.0;
          gx.at(i, j) = g * p;
        }
      accumulate(*px, gx);
    };
  }
  return Var(node);
}

Var neg_log_pick(const Var& probs, std::size_t idx) {
  check_dim(idx < probs.value().size(), "neg_log_pick: index out of range");
  const double p = probs.value()[idx];
  check_numeric(p > 0.0, "neg_log_pick: picked probability is not positive");
  auto node = fresh(Tensor::scalar(-std::log(p)));
  attach(node, {probs});
  if (node->requires_grad) {
    auto px = probs.node();
    node->backprop = [px, idx, p](Node& self) {
      Tensor g(px->value.shape());
      g[idx] = -self.grad[0] / p;
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var bce_sum(const Var& probs, const Tensor& labels) {
  check_dim(probs.value().size() == labels.size(), "bce_sum: size mismatch");
  constexpr double lo = 1e-9, hi = 1.0 - 1e-9;
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double g = labels[i];
    check_valid(g == 0.0 || g == 1.0, "bce_sum: labels must be 0/1");
    const double p = std::min(std::max(probs.value()[i], lo), hi);
    loss -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
  }
  auto node = fresh(Tensor::scalar(loss));
  attach(node, {probs});
  if (node->requires_grad) {
    auto px = probs.node();
    node->backprop = [px, labels](Node& self) {
      const double g0 = self.grad[0];
      Tensor gx(px->value.shape());
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const double p = px->value[i];
        if (p <= lo || p >= hi) continue;  // clamped region: flat
        gx[i] = g0 * (-labels[i] / p + (1.0 - labels[i]) / (1.0 - p));
      }
      accumulate(*px, gx);
    };
  }
  return Var(node);
}

Var mean_pool2x2(const Var& x) {
  require_rank(x, 4, "mean_pool2x2");
  const Shape& s = x.value().shape();
  const std::size_t t = s[0], h = s[1], w = s[2], c = s[3];
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  Tensor out({t, ho, wo, c});
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        const std::size_t h1 = std::min(2 * i + 2, h), w1 = std::min(2 * j + 2, w);
        const double inv = 1.0 / static_cast<double>((h1 - 2 * i) * (w1 - 2 * j));
        for (std::size_t d = 0; d < c; ++d) {
          double acc = 0.0;
          for (std::size_t y = 2 * i; y < h1; ++y)
            for (std::size_t z = 2 * j; z < w1; ++z)
              acc += x.value().at(f, y, z, d);
          out.at(f, i, j, d) = acc * inv;
        }
      }
  auto node = fresh(std::move(out));
  attach(node, {x});
  if (node->requires_grad) {
    auto px = x.node();
    node->backprop = [px, t, h, w, c, ho, wo](Node& self) {
      Tensor g({t, h, w, c});
      for (std::size_t f = 0; f < t; ++f)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            const std::size_t h1 = std::min(2 * i + 2, h),
                              w1 = std::min(2 * j + 2, w);
            const double inv =
                1.0 / static_cast<double>((h1 - 2 * i) * (w1 - 2 * j));
            for (std::size_t d = 0; d < c; ++d) {
              const double gv = self.grad.at(f, i, j, d) * inv;
              for (std::size_t y = 2 * i; y < h1; ++y)
                for (std::size_t z = 2 * j; z < w1; ++z) g.at(f, y, z, d) += gv;
            }
          }
      accumulate(*px, g);
    };
  }
  return Var(node);
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta,
                     double eps, BatchStats* out) {
  require_rank(x, 2, "batch_norm_train");
  const std::size_t p = x.value().dim(0), d = x.value().dim(1);
  check_dim(gamma.value().size() == d && beta.value().size() == d,
            "batch_norm_train: gamma/beta size mismatch");
  check_dim(p >= 1, "batch_norm_train: empty batch");
  Tensor mean({d}), var({d});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x.value().at(i, j);
  mean.array() /= static_cast<double>(p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = x.value().at(i, j) - mean[j];
      var[j] += dv * dv;
    }
  var.array() /= static_cast<double>(p);
  Tensor invstd({d});
  for (std::size_t j = 0; j < d; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + eps);
  Tensor xhat({p, d});
  Tensor y({p, d});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(i, j) = (x.value().at(i, j) - mean[j]) * invstd[j];
      y.at(i, j) = gamma.value()[j] * xhat.at(i, j) + beta.value()[j];
    }
  if (out) {
    out->mean = mean;
    out->var = var;
  }
  auto node = fresh(std::move(y));
  attach(node, {x, gamma, beta});
  if (node->requires_grad) {
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    node->backprop = [px, pg, pb, xhat, invstd, p, d](Node& self) {
      // Per column: dgamma = sum(dy*xhat), dbeta = sum(dy),
      // dx = invstd * gamma * (dy - mean(dy) - xhat * mean(dy*xhat)).
      Tensor sum_dy({d}), sum_dyx({d});
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          sum_dy[j] += self.grad.at(i, j);
          sum_dyx[j] += self.grad.at(i, j) * xhat.at(i, j);
        }
      if (pg->requires_grad) accumulate(*pg, sum_dyx);
      if (pb->requires_grad) accumulate(*pb, sum_dy);
      if (px->requires_grad) {
        Tensor gx({p, d});
        const double invp = 1.0 / static_cast<double>(p);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gx.at(i, j) = invstd[j] * pg->value[j] *
                          (self.grad.at(i, j) - sum_dy[j] * invp -
                           xhat.at(i, j) * sum_dyx[j] * invp);
        accumulate(*px, gx);
      }
    };
  }
  return Var(node);
}

Var batch_norm_infer(const Var& x, const Var& gamma, const Var& beta,
                     const Tensor& mean, const Tensor& var, double eps) {
  require_rank(x, 2, "batch_norm_infer");
  const std::size_t d = x.value().dim(1);
  check_dim(mean.size() == d && var.size() == d,
            "batch_norm_infer: running stat size mismatch");
  Tensor invstd({d});
  for (std::size_t j = 0; j < d; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + eps);
  // y = x * (gamma*invstd) + (beta - mean*gamma*invstd), composed from
  // broadcast primitives so parameter gradients still flow if requested.
  Var a = mul(gamma, constant(invstd));
  Var shift = sub(beta, mul(a, constant(mean)));
  return add_rowvec(mul_rowvec(x, a), shift);
}

Var region_pool(const Var& frame, const Var& fg, const Tensor& masks) {
  require_rank(frame, 2, "region_pool frame");
  const std::size_t p = frame.value().dim(0), d = frame.value().dim(1);
  check_dim(fg.value().size() == p, "region_pool: foreground size mismatch");
  check_dim(masks.rank() == 2 && masks.dim(1) == p,
            "region_pool: mask extent mismatch");
  const std::size_t n = masks.dim(0);
  Tensor weights({n, p});
  Tensor sums({n});
  std::vector<bool> empty(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    double s = 0.0;
    for (std::size_t q = 0; q < p; ++q) {
      const double m = masks.at(i, q);
      if (m != 0.0) any = true;
      weights.at(i, q) = m * fg.value()[q];
      s += weights.at(i, q);
    }
    if (!any) {
      empty[i] = true;
      continue;
    }
    check_numeric(s >= 1e-300, "region_pool: degenerate region weight sum");
    for (std::size_t q = 0; q < p; ++q) weights.at(i, q) /= s;
    sums[i] = s;
  }
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (empty[i]) continue;
    for (std::size_t q = 0; q < p; ++q) {
      const double w = weights.at(i, q);
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j)
        out.at(i, j) += w * frame.value().at(q, j);
    }
  }
  auto node = fresh(std::move(out));
  attach(node, {frame, fg});
  if (node->requires_grad) {
    auto pf = frame.node(), pi = fg.node();
    node->backprop = [pf, pi, masks, weights, sums, empty, n, p, d](Node& self) {
      if (pf->requires_grad) {
        Tensor gf({p, d});
        for (std::size_t i = 0; i < n; ++i) {
          if (empty[i]) continue;
          for (std::size_t q = 0; q < p; ++q) {
            const double w = weights.at(i, q);
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j)
              gf.at(q, j) += w * self.grad.at(i, j);
          }
        }
        accumulate(*pf, gf);
      }
      if (pi->requires_grad) {
        // d f_i / d I_q = (m_iq / s_i) * (frame_q - f_i)
        Tensor gi(pi->value.shape());
        for (std::size_t i = 0; i < n; ++i) {
          if (empty[i]) continue;
          double gdotf = 0.0;
          for (std::size_t j = 0; j < d; ++j)
            gdotf += self.grad.at(i, j) * self.value.at(i, j);
          for (std::size_t q = 0; q < p; ++q) {
            const double m = masks.at(i, q);
            if (m == 0.0) continue;
            double gdotrow = 0.0;
            for (std::size_t j = 0; j < d; ++j)
              gdotrow += self.grad.at(i, j) * pf->value.at(q, j);
            gi[q] += (m / sums[i]) * (gdotrow - gdotf);
          }
        }
        accumulate(*pi, gi);
      }
    };
  }
  return Var(node);
}

}  // namespace rfc
