#include "inmars/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "inmars/errors.hpp"

namespace inmars::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Unfolds a same-padded k x k neighbourhood of every pixel: (c*k*k, h*w).
void im2col(const double* x, int c, int h, int w, int k, double* cols) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
        const double* plane = x + static_cast<std::size_t>(ch) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          double* out = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            out[xx] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int c, int h, int w, int k, double* x) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
        double* plane = x + static_cast<std::size_t>(ch) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const double* in = row + static_cast<std::size_t>(y) * w;
          double* dst = plane + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, pad - kx);
          const int x1 = std::min(w, w + pad - kx);
          for (int xx = x0; xx < x1; ++xx) dst[xx + kx - pad] += in[xx];
        }
      }
    }
  }
}

}  // namespace

// ---- Graph ---------------------------------------------------------------

Var Graph::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var v : inputs) needs = needs || requires_grad(v);
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, false, needs ? std::move(fn) : nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var scalar) {
  require(value(scalar).size() == 1, "backward(scalar) needs a single-element tensor");
  std::pair<Var, Tensor> seed{scalar, Tensor(value(scalar).shape(), 1.0)};
  backward(std::span<const std::pair<Var, Tensor>>(&seed, 1));
}

void Graph::backward(std::span<const std::pair<Var, Tensor>> seeds) {
  int last = -1;
  for (const auto& [v, g] : seeds) {
    require(g.same_shape(value(v)), "backward seed shape mismatch");
    if (!requires_grad(v)) continue;
    Tensor& buf = grad_buffer(v);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    last = std::max(last, v.id);
  }
  for (int i = last; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

// ---- elementwise and reductions -----------------------------------------

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require(av.same_shape(bv), "add: shape mismatch " + Tensor::shape_string(av.shape()) + " vs " +
                                 Tensor::shape_string(bv.shape()));
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      Tensor& gi = gr.grad_buffer(v);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

Var scale(Graph& g, Var a, double s) {
  Tensor out = g.value(a);
  for (double& v : out.storage()) v *= s;
  return g.record(std::move(out), {a}, [a, s](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(a);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += s * go[i];
  });
}

Var weighted_sum(Graph& g, std::span<const Var> scalars, std::span<const double> weights) {
  require(scalars.size() == weights.size(), "weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(g.value(scalars[i]).size() == 1, "weighted_sum: operands must be scalars");
    total += weights[i] * g.value(scalars[i])[0];
  }
  std::vector<Var> ins(scalars.begin(), scalars.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return g.record(Tensor({1}, total), scalars, [ins, ws](Graph& gr, const Tensor& go) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (gr.requires_grad(ins[i])) gr.grad_buffer(ins[i])[0] += ws[i] * go[0];
    }
  });
}

Var sum(Graph& g, Var a) {
  double s = 0.0;
  for (double v : g.value(a).data()) s += v;
  return g.record(Tensor({1}, s), {a}, [a](Graph& gr, const Tensor& go) {
    for (double& v : gr.grad_buffer(a).storage()) v += go[0];
  });
}

Var dot_constant(Graph& g, Var a, const Tensor& w) {
  const Tensor& av = g.value(a);
  require(av.same_shape(w), "dot_constant: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += av[i] * w[i];
  return g.record(Tensor({1}, s), {a}, [a, w](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(a);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[0] * w[i];
  });
}

Var activate(Graph& g, Var x, Activation kind) {
  Tensor out = g.value(x);
  if (kind == Activation::relu) {
    for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : out.storage()) v = std::tanh(v);
  }
  return g.record(std::move(out), {x}, [x, kind](Graph& gr, const Tensor& go) {
    const Tensor& in = gr.value(x);
    Tensor& gi = gr.grad_buffer(x);
    if (kind == Activation::relu) {
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += in[i] > 0.0 ? go[i] : 0.0;
    } else {
      for (std::size_t i = 0; i < gi.size(); ++i) {
        const double t = std::tanh(in[i]);
        gi[i] += go[i] * (1.0 - t * t);
      }
    }
  });
}

// ---- convolutional ops ---------------------------------------------------

Var conv2d(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  const Tensor& bv = g.value(bias);
  require(xv.rank() == 3, "conv2d: input must be (c,h,w), got " + Tensor::shape_string(xv.shape()));
  require(wv.rank() == 4 && wv.dim(2) == wv.dim(3) && wv.dim(2) % 2 == 1,
          "conv2d: weight must be (o,c,k,k) with odd k");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const int o = wv.dim(0), k = wv.dim(2);
  require(wv.dim(1) == c, "conv2d: channel mismatch, input " + std::to_string(c) + " weight " +
                              std::to_string(wv.dim(1)));
  require(bv.rank() == 1 && bv.dim(0) == o, "conv2d: bias must be (o)");
  const int hw = h * w;
  const int ck = c * k * k;

  Tensor out({o, h, w});
  MapMatrix om(out.data().data(), o, hw);
  ConstMapMatrix wm(wv.data().data(), o, ck);
  if (k == 1) {
    om.noalias() = wm * ConstMapMatrix(xv.data().data(), c, hw);
  } else {
    std::vector<double> cols(static_cast<std::size_t>(ck) * hw);
    im2col(xv.data().data(), c, h, w, k, cols.data());
    om.noalias() = wm * ConstMapMatrix(cols.data(), ck, hw);
  }
  for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bv[static_cast<std::size_t>(oc)];

  return g.record(std::move(out), {x, weight, bias}, [x, weight, bias, c, h, w, o, k, hw, ck](
                                                        Graph& gr, const Tensor& go) {
    ConstMapMatrix gm(go.data().data(), o, hw);
    if (gr.requires_grad(bias)) {
      Tensor& gb = gr.grad_buffer(bias);
      for (int oc = 0; oc < o; ++oc) gb[static_cast<std::size_t>(oc)] += gm.row(oc).sum();
    }
    const Tensor& xin = gr.value(x);
    std::vector<double> cols;
    const double* colp = xin.data().data();
    if (k != 1 && gr.requires_grad(weight)) {
      cols.resize(static_cast<std::size_t>(ck) * hw);
      im2col(xin.data().data(), c, h, w, k, cols.data());
      colp = cols.data();
    }
    if (gr.requires_grad(weight)) {
      MapMatrix gw(gr.grad_buffer(weight).data().data(), o, ck);
      gw.noalias() += gm * ConstMapMatrix(colp, ck, hw).transpose();
    }
    if (gr.requires_grad(x)) {
      ConstMapMatrix wm2(gr.value(weight).data().data(), o, ck);
      if (k == 1) {
        MapMatrix gx(gr.grad_buffer(x).data().data(), c, hw);
        gx.noalias() += wm2.transpose() * gm;
      } else {
        RowMatrix dcols = wm2.transpose() * gm;
        col2im_add(dcols.data(), c, h, w, k, gr.grad_buffer(x).data().data());
      }
    }
  });
}

Var avg_pool2(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 3 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0,
          "avg_pool2: spatial dims must be even, got " + Tensor::shape_string(xv.shape()));
  const int c = xv.dim(0), h = xv.dim(1) / 2, w = xv.dim(2) / 2;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = 0.25 * (xv.at(ch, 2 * y, 2 * xx) + xv.at(ch, 2 * y, 2 * xx + 1) +
                                    xv.at(ch, 2 * y + 1, 2 * xx) + xv.at(ch, 2 * y + 1, 2 * xx + 1));
  return g.record(std::move(out), {x}, [x, c, h, w](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double v = 0.25 * go.at(ch, y, xx);
          gi.at(ch, 2 * y, 2 * xx) += v;
          gi.at(ch, 2 * y, 2 * xx + 1) += v;
          gi.at(ch, 2 * y + 1, 2 * xx) += v;
          gi.at(ch, 2 * y + 1, 2 * xx + 1) += v;
        }
  });
}

Var upsample2(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 3, "upsample2: input must be (c,h,w)");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = xv.at(ch, y / 2, xx / 2);
  return g.record(std::move(out), {x}, [x, c, h, w](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) gi.at(ch, y / 2, xx / 2) += go.at(ch, y, xx);
  });
}

Var concat_channels(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
          "concat_channels: spatial mismatch");
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data().begin(), av.data().end(), out.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return g.record(std::move(out), {a, b}, [a, b, na](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[na + i];
    }
  });
}

Var mask_pixels(Graph& g, Var x, const Mask& mask) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 3 && xv.dim(1) == mask.height() && xv.dim(2) == mask.width(),
          "mask_pixels: mask does not match input");
  Tensor out = xv;
  const std::size_t hw = mask.size();
  for (int ch = 0; ch < xv.dim(0); ++ch)
    for (std::size_t p = 0; p < hw; ++p)
      if (!mask[p]) out[ch * hw + p] = 0.0;
  return g.record(std::move(out), {x}, [x, mask, hw](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (mask[i % hw]) gi[i] += go[i];
  });
}

// ---- matrix ops ----------------------------------------------------------

Var linear(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  const Tensor& bv = g.value(bias);
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0),
          "linear: shape mismatch " + Tensor::shape_string(xv.shape()) + " * " +
              Tensor::shape_string(wv.shape()));
  require(bv.rank() == 1 && bv.dim(0) == wv.dim(1), "linear: bias must be (out)");
  const int r = xv.dim(0), f = xv.dim(1), o = wv.dim(1);
  Tensor out({r, o});
  MapMatrix om(out.data().data(), r, o);
  om.noalias() = ConstMapMatrix(xv.data().data(), r, f) * ConstMapMatrix(wv.data().data(), f, o);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < o; ++j) om(i, j) += bv[static_cast<std::size_t>(j)];
  return g.record(std::move(out), {x, weight, bias}, [x, weight, bias, r, f, o](Graph& gr, const Tensor& go) {
    ConstMapMatrix gm(go.data().data(), r, o);
    if (gr.requires_grad(bias)) {
      Tensor& gb = gr.grad_buffer(bias);
      for (int j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += gm.col(j).sum();
    }
    if (gr.requires_grad(weight)) {
      MapMatrix gw(gr.grad_buffer(weight).data().data(), f, o);
      gw.noalias() += ConstMapMatrix(gr.value(x).data().data(), r, f).transpose() * gm;
    }
    if (gr.requires_grad(x)) {
      MapMatrix gx(gr.grad_buffer(x).data().data(), r, f);
      gx.noalias() += gm * ConstMapMatrix(gr.value(weight).data().data(), f, o).transpose();
    }
  });
}

Var softmax_rows(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 2, "softmax_rows: input must be (rows, k)");
  const int r = xv.dim(0), k = xv.dim(1);
  Tensor out({r, k});
  for (int i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) mx = std::max(mx, xv.at(i, j));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += (out.at(i, j) = std::exp(xv.at(i, j) - mx));
    for (int j = 0; j < k; ++j) out.at(i, j) /= z;
  }
  if (!g.requires_grad(x)) return g.record(std::move(out), {x}, nullptr);
  Tensor probs = out;
  return g.record(std::move(out), {x}, [x, probs = std::move(probs), r, k](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < k; ++j) dot += go.at(i, j) * probs.at(i, j);
      for (int j = 0; j < k; ++j) gi.at(i, j) += probs.at(i, j) * (go.at(i, j) - dot);
    }
  });
}

Var concat_rows(Graph& g, std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int f = g.value(parts[0]).dim(1);
  int rows = 0;
  for (Var p : parts) {
    require(g.value(p).rank() == 2 && g.value(p).dim(1) == f, "concat_rows: column mismatch");
    rows += g.value(p).dim(0);
  }
  Tensor out({rows, f});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = g.value(p);
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return g.record(std::move(out), parts, [ins](Graph& gr, const Tensor& go) {
    std::size_t off2 = 0;
    for (Var p : ins) {
      const std::size_t n = gr.value(p).size();
      if (gr.requires_grad(p)) {
        Tensor& gp = gr.grad_buffer(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += go[off2 + i];
      }
      off2 += n;
    }
  });
}

Var select_rows(Graph& g, Var x, std::span<const int> rows) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 2, "select_rows: input must be a matrix");
  const int f = xv.dim(1);
  Tensor out({static_cast<int>(rows.size()), f});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < xv.dim(0), "select_rows: row index out of range");
    for (int j = 0; j < f; ++j) out.at(static_cast<int>(i), j) = xv.at(rows[i], j);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return g.record(std::move(out), {x}, [x, idx, f](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < f; ++j) gi.at(idx[i], j) += go.at(static_cast<int>(i), j);
  });
}

Tensor SparsePlan::apply(std::span<const double> x) const {
  Tensor out({rows, features});
  for (std::size_t e = 0; e + 1 < offsets.size(); ++e) {
    double s = 0.0;
    for (int j = offsets[e]; j < offsets[e + 1]; ++j) s += weights[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(sources[static_cast<std::size_t>(j)])];
    out[e] = s;
  }
  return out;
}

Var gather_sparse(Graph& g, Var x, SparsePlan plan) {
  require(plan.offsets.size() == static_cast<std::size_t>(plan.rows) * plan.features + 1,
          "gather_sparse: plan is incomplete");
  Tensor out = plan.apply(g.value(x).data());
  return g.record(std::move(out), {x}, [x, plan = std::move(plan)](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (std::size_t e = 0; e + 1 < plan.offsets.size(); ++e) {
      const double v = go[e];
      if (v == 0.0) continue;
      for (int j = plan.offsets[e]; j < plan.offsets[e + 1]; ++j)
        gi[static_cast<std::size_t>(plan.sources[static_cast<std::size_t>(j)])] += plan.weights[static_cast<std::size_t>(j)] * v;
    }
  });
}

Var gather_pixels(Graph& g, Var x, std::vector<int> index) {
  const Tensor& xv = g.value(x);
  require(xv.rank() == 3, "gather_pixels: input must be (c,h,w)");
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  require(index.size() == hw, "gather_pixels: index size mismatch");
  const int c = xv.dim(0);
  Tensor out(xv.shape(), 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p)
      if (index[p] >= 0) out[ch * hw + p] = xv[ch * hw + static_cast<std::size_t>(index[p])];
  return g.record(std::move(out), {x}, [x, index = std::move(index), c, hw](Graph& gr, const Tensor& go) {
    Tensor& gi = gr.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        if (index[p] >= 0) gi[ch * hw + static_cast<std::size_t>(index[p])] += go[ch * hw + p];
  });
}

}  // namespace inmars::ad
