#include "trelm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "trelm/errors.hpp"
#include "trelm/kernels.hpp"

namespace trelm {

// ---------------------------------------------------------------------------
// GradientStore

GradientStore::GradientStore(std::vector<Shape> shapes)
    : shapes_(std::move(shapes)), grads_(shapes_.size()) {}

Tensor& GradientStore::at(ParamId id) {
  Tensor& g = grads_.at(id);
  if (g.empty() && shape_size(shapes_[id]) != 0) g = Tensor(shapes_[id]);
  return g;
}

const Tensor* GradientStore::find(ParamId id) const {
  const Tensor& g = grads_.at(id);
  return g.empty() ? nullptr : &g;
}

Tensor GradientStore::get(ParamId id) const {
  const Tensor* g = find(id);
  return g != nullptr ? *g : Tensor(shapes_.at(id));
}

void GradientStore::add(const GradientStore& other) {
  if (other.size() != size()) throw ShapeError("gradient stores cover different parameter sets");
  for (ParamId id = 0; id < size(); ++id) {
    const Tensor* src = other.find(id);
    if (src == nullptr) continue;
    Tensor& dst = at(id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (*src)[i];
  }
}

void GradientStore::clear() {
  for (auto& g : grads_) g = Tensor();
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(GradMode mode, GradientStore* param_grads) : mode_(mode), param_grads_(param_grads) {
  nodes_.reserve(256);
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw std::logic_error("Var does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  Node node;
  node.value = std::move(value);
  node.requires_grad = mode_ == GradMode::enabled;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::parameter(ParamId id, const Tensor& value) {
  Node node;
  node.external = &value;
  node.param = id;
  node.is_param = true;
  node.requires_grad = mode_ == GradMode::enabled && param_grads_ != nullptr;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Tape::value(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id_];
  return n.external != nullptr ? *n.external : n.value;
}

bool Tape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id_].requires_grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  require_finite(value, "primitive output");
  Node node;
  node.value = std::move(value);
  if (mode_ == GradMode::enabled) {
    for (Var in : inputs) {
      check_owner(in);
      if (nodes_[in.id_].requires_grad) {
        node.requires_grad = true;
        break;
      }
    }
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(Var v) {
  check_owner(v);
  Node& n = nodes_[v.id_];
  if (n.is_param) return param_grads_->at(n.param);
  if (n.grad.empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

const Tensor& Tape::grad(Var v) {
  check_owner(v);
  Node& n = nodes_[v.id_];
  if (n.is_param) throw std::logic_error("parameter gradients live in the GradientStore");
  if (n.grad.empty()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (backward_done_) throw std::logic_error("backward() already ran on this tape; re-run forward");
  if (value(loss).size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(value(loss).shape()));
  }
  backward_done_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// primitives

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
  constexpr double c = 0.7978845608028654;
  const double inner = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

namespace ops {
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("invalid Var");
  return *a.tape();
}

void same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("Vars belong to different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void add_into(Tensor& dst, const Tensor& src, double s = 1.0) {
  double* d = dst.raw();
  const double* x = src.raw();
  const std::size_t n = dst.size();
  if (s == 1.0) {
    for (std::size_t i = 0; i < n; ++i) d[i] += x[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) d[i] += s * x[i];
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor out({m, n});
  kernels::matmul(av.raw(), bv.raw(), out.raw(), m, k, n, false);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::matmul_bt(g.raw(), tp.value(b).raw(), tp.grad_buffer(a).raw(), m, n, k, true);
    }
    if (tp.requires_grad(b)) {
      kernels::matmul_at(tp.value(a).raw(), g.raw(), tp.grad_buffer(b).raw(), k, m, n, true);
    }
  });
}

Var matmul_bt(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_bt: " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()) + "^T");
  }
  Tensor out({m, n});
  kernels::matmul_bt(av.raw(), bv.raw(), out.raw(), m, k, n, false);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::matmul(g.raw(), tp.value(b).raw(), tp.grad_buffer(a).raw(), m, n, k, true);
    }
    if (tp.requires_grad(b)) {
      kernels::matmul_at(g.raw(), tp.value(a).raw(), tp.grad_buffer(b).raw(), n, m, k, true);
    }
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  add_into(out, bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), g);
    if (tp.requires_grad(b)) add_into(tp.grad_buffer(b), g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  add_into(out, bv, -1.0);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), g);
    if (tp.requires_grad(b)) add_into(tp.grad_buffer(b), g, -1.0);
  });
}

Var add_row(Var a, Var bias) {
  same_tape(a, bias);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(bias);
  const std::size_t m = av.rows(), n = av.cols();
  if (bv.size() != n) {
    throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " for rows of " +
                     shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.raw() + i * n;
    for (std::size_t j = 0; j < n; ++j) r[j] += bv[j];
  }
  return t.record(std::move(out), {a, bias}, [a, bias, m, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i) {
        const double* r = g.raw() + i * n;
        for (std::size_t j = 0; j < n; ++j) gb[j] += r[j];
      }
    }
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      const Tensor& bv2 = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      const Tensor& av2 = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.data()) v *= s;
  return t.record(std::move(out), {a}, [a, s](Tape& tp, const Tensor& g) {
    add_into(tp.grad_buffer(a), g, s);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) throw ShapeError("layer_norm: gain/bias width");
  Tensor xhat(Shape{m, n});
  std::vector<double> inv_std(m);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = xv.raw() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mean) * is;
      xhat.at(i, j) = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, m, n, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
                    const Tensor& gv2 = tp.value(gamma);
                    if (tp.requires_grad(gamma)) {
                      Tensor& gg = tp.grad_buffer(gamma);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat.at(i, j);
                    }
                    if (tp.requires_grad(beta)) {
                      Tensor& gb = tp.grad_buffer(beta);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = g[i * n + j] * gv2[j];
                          mean_d += d;
                          mean_dx += d * xhat.at(i, j);
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = g[i * n + j] * gv2[j];
                          gx[i * n + j] += inv_std[i] * (d - mean_d - xhat.at(i, j) * mean_dx);
                        }
                      }
                    }
                  });
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = xv.raw() + i * n;
    double* o = out.raw() + i * n;
    const double mx = *std::max_element(r, r + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(r[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tensor saved = out;
  return t.record(std::move(out), {x}, [x, m, n, y = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - s);
    }
  });
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xv[i]);
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    const Tensor& xv2 = tp.value(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(xv2[i]);
  });
}

Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = t.value(table);
  const std::size_t rows = tv.rows(), d = tv.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " >= " +
                       std::to_string(rows));
    }
    std::copy_n(tv.raw() + ids[i] * d, d, out.raw() + i * d);
  }
  std::vector<std::uint32_t> saved(ids.begin(), ids.end());
  return t.record(std::move(out), {table},
                  [table, d, ids = std::move(saved)](Tape& tp, const Tensor& g) {
                    Tensor& gt = tp.grad_buffer(table);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      double* dst = gt.raw() + ids[i] * d;
                      const double* src = g.raw() + i * d;
                      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                  });
}

Var mean_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (m == 0) throw ShapeError("mean_rows over zero rows");
  Tensor out(Shape{1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.data()) v *= inv;
  return t.record(std::move(out), {x}, [x, m, n, inv](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Tape& t = tape_of(parts[0]);
  const std::size_t m = t.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& v = t.value(p);
    if (v.rows() != m) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor out(Shape{m, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = t.value(parts[k]);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.raw() + i * widths[k], widths[k], out.raw() + i * total + offset);
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts,
                  [inputs, widths, m, total](Tape& tp, const Tensor& g) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < inputs.size(); ++k) {
                      if (tp.requires_grad(inputs[k])) {
                        Tensor& gk = tp.grad_buffer(inputs[k]);
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < widths[k]; ++j)
                            gk[i * widths[k] + j] += g[i * total + off + j];
                      }
                      off += widths[k];
                    }
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& t = tape_of(parts[0]);
  const std::size_t n = t.value(parts[0]).cols();
  std::vector<std::size_t> heights;
  std::size_t total = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    const Tensor& v = t.value(p);
    if (v.cols() != n) throw ShapeError("concat_rows: column counts differ");
    heights.push_back(v.rows());
    total += v.rows();
  }
  Tensor out(Shape{total, n});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    std::copy_n(v.raw(), v.size(), out.raw() + offset * n);
    offset += v.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [inputs, heights, n](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (tp.requires_grad(inputs[k])) {
        Tensor& gk = tp.grad_buffer(inputs[k]);
        for (std::size_t i = 0; i < heights[k] * n; ++i) gk[i] += g[off * n + i];
      }
      off += heights[k];
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (start + count > n) throw ShapeError("slice_cols out of range");
  Tensor out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.raw() + i * n + start, count, out.raw() + i * count);
  return t.record(std::move(out), {x}, [x, m, n, start, count](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += g[i * count + j];
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw ShapeError("select_rows: row out of range");
    std::copy_n(xv.raw() + rows[i] * n, n, out.raw() + i * n);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return t.record(std::move(out), {x}, [x, n, rows = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gx[rows[i] * n + j] += g[i * n + j];
  });
}

Var replace_rows(Var base, std::span<const std::size_t> rows, Var replacement) {
  same_tape(base, replacement);
  Tape& t = tape_of(base);
  const Tensor& bv = t.value(base);
  const Tensor& rv = t.value(replacement);
  const std::size_t m = bv.rows(), n = bv.cols();
  if (rv.rows() != rows.size() || rv.cols() != n) throw ShapeError("replace_rows: shape");
  std::vector<char> replaced(m, 0);
  Tensor out = bv;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw ShapeError("replace_rows: row out of range");
    if (replaced[rows[i]]) throw ShapeError("replace_rows: row listed twice");
    replaced[rows[i]] = 1;
    std::copy_n(rv.raw() + i * n, n, out.raw() + rows[i] * n);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return t.record(std::move(out), {base, replacement},
                  [base, replacement, n, rows = std::move(saved),
                   replaced = std::move(replaced)](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(base)) {
                      Tensor& gb = tp.grad_buffer(base);
                      for (std::size_t i = 0; i < replaced.size(); ++i) {
                        if (replaced[i]) continue;
                        for (std::size_t j = 0; j < n; ++j) gb[i * n + j] += g[i * n + j];
                      }
                    }
                    if (tp.requires_grad(replacement)) {
                      Tensor& gr = tp.grad_buffer(replacement);
                      for (std::size_t i = 0; i < rows.size(); ++i)
                        for (std::size_t j = 0; j < n; ++j) gr[i * n + j] += g[rows[i] * n + j];
                    }
                  });
}

Var clamp_entries(Var x, std::span<const EntryClamp> clamps) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  std::vector<std::size_t> idx;
  idx.reserve(clamps.size());
  for (const auto& c : clamps) {
    if (c.index >= out.size()) throw ShapeError("clamp_entries: index out of range");
    out[c.index] = c.value;
    idx.push_back(c.index);
  }
  return t.record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    Tensor pass = g;
    for (std::size_t i : idx) pass[i] = 0.0;
    add_into(gx, pass);
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : t.value(x).data()) s += v;
  return t.record(Tensor::scalar(s), {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (double& v : gx.data()) v += g[0];
  });
}

Var dot(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.size() != bv.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return t.record(Tensor::scalar(s), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      const Tensor& bv2 = tp.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bv2[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      const Tensor& av2 = tp.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * av2[i];
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
  Tape& t = tape_of(logits);
  const Tensor& lv = t.value(logits);
  const std::size_t m = lv.rows(), n = lv.cols();
  if (targets.size() != m) throw ShapeError("cross_entropy: one target per row required");
  if (m == 0) throw ShapeError("cross_entropy over zero rows");
  Tensor probs(Shape{m, n});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n) throw ShapeError("cross_entropy: target out of range");
    const double* r = lv.raw() + i * n;
    const double mx = *std::max_element(r, r + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(r[j] - mx);
      z += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
    loss += std::log(z) + mx - r[targets[i]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::uint32_t> saved(targets.begin(), targets.end());
  return t.record(Tensor::scalar(loss), {logits},
                  [logits, m, n, probs = std::move(probs),
                   targets = std::move(saved)](Tape& tp, const Tensor& g) {
                    Tensor& gl = tp.grad_buffer(logits);
                    const double s = g[0] / static_cast<double>(m);
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += s * probs[i * n + j];
                      gl[i * n + targets[i]] -= s;
                    }
                  });
}

}  // namespace ops
}  // namespace trelm
