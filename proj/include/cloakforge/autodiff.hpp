#pragma once

// Minimal reverse-mode differentiation over NCHW tensors. Enough operators to
// build a small conditional UNet, a classifier, and the diffusion losses, with
// gradients flowing to parameters and to inputs alike.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cloakforge/tensor.hpp"

namespace cloakforge::ad {

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<S>& grad_buffer() {
    if (grad.empty()) grad = Tensor<S>(value.shape(), S(0));
    return grad;
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var leaf(Tensor<S> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Empty tensor when no gradient has reached this node.
  const Tensor<S>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<S>(); }

  S item() const { return node_->value[0]; }

  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& shared() const { return node_; }

  // Seeds d(self)/d(self) = 1 and propagates through the recorded graph.
  void backward() const {
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<S>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer().fill(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<S>* n = *it;
      if (n->backward_fn && !n->grad.empty()) {
        n->backward_fn(*n);
        // Interior gradients are not needed once propagated.
        if (n != node_.get()) n->grad = Tensor<S>();
      }
    }
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Var<S> make_result(Tensor<S> value, std::vector<Var<S>> parents, std::function<void(Node<S>&)> fn) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward_fn = std::move(fn);
  }
  return Var<S>(std::move(n));
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  // b may broadcast over the batch axis.
  const Shape sa = a.shape(), sb = b.shape();
  const bool broadcast = sb.n == 1 && sa.n != 1;
  if (broadcast) {
    require_same_shape(Shape{1, sa.c, sa.h, sa.w}, sb, "add");
  } else {
    require_same_shape(sa, sb, "add");
  }
  Tensor<S> out = a.value();
  const std::size_t per = sa.per_sample();
  for (int n = 0; n < sa.n; ++n) {
    const S* bp = b.value().data() + (broadcast ? 0 : per * n);
    S* op = out.data() + per * n;
    for (std::size_t i = 0; i < per; ++i) op[i] += bp[i];
  }
  return detail::make_result<S>(std::move(out), {a, b}, [broadcast, per](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      const int batch = self.value.shape().n;
      for (int n = 0; n < batch; ++n) {
        const S* gp = self.grad.data() + per * n;
        S* dst = g.data() + (broadcast ? 0 : per * n);
        for (std::size_t i = 0; i < per; ++i) dst[i] += gp[i];
      }
    }
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S k) {
  Tensor<S> out = a.value();
  for (auto& v : out.values()) v *= k;
  return detail::make_result<S>(std::move(out), {a}, [k](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * self.grad[i];
  });
}

// out[n] = a[n] * x[n] + b[n] * offset[n]; offset is a constant.
template <class S>
Var<S> affine_per_sample(const Var<S>& x, std::span<const S> a, std::span<const S> b, const Tensor<S>& offset) {
  require_same_shape(x.shape(), offset.shape(), "affine_per_sample");
  const int batch = x.shape().n;
  if (static_cast<int>(a.size()) != batch || static_cast<int>(b.size()) != batch) {
    throw ShapeError("affine_per_sample: coefficient count must equal batch size");
  }
  const std::size_t per = x.shape().per_sample();
  Tensor<S> out(x.shape());
  for (int n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t k = n * per + i;
      out[k] = a[n] * x.value()[k] + b[n] * offset[k];
    }
  }
  std::vector<S> coef(a.begin(), a.end());
  return detail::make_result<S>(std::move(out), {x}, [coef = std::move(coef), per](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < coef.size(); ++n) {
      for (std::size_t i = 0; i < per; ++i) g[n * per + i] += coef[n] * self.grad[n * per + i];
    }
  });
}

template <class S>
Var<S> silu(const Var<S>& x) {
  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
  using CMap = Eigen::Map<const Arr>;
  const auto n = static_cast<Eigen::Index>(x.value().size());
  auto out = Tensor<S>::uninitialized(x.shape());
  const CMap v(x.value().data(), n);
  Eigen::Map<Arr>(out.data(), n) = v / (S(1) + (-v).exp());
  return detail::make_result<S>(std::move(out), {x}, [n](Node<S>& self) {
    auto& px = *self.parents[0];
    const CMap v(px.value.data(), n);
    const CMap gy(self.grad.data(), n);
    const Arr sig = S(1) / (S(1) + (-v).exp());
    Eigen::Map<Arr>(px.grad_buffer().data(), n) += gy * sig * (S(1) + v * (S(1) - sig));
  });
}

// y = x W^T + b for x (N, Din, 1, 1), W (Dout, Din, 1, 1), b (1, Dout, 1, 1).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  using detail::CMapMat;
  using detail::MapMat;
  const int batch = x.shape().n;
  const int din = static_cast<int>(x.shape().per_sample());
  const int dout = weight.shape().n;
  if (static_cast<int>(weight.shape().per_sample()) != din) throw ShapeError("linear: input width mismatch");
  Tensor<S> out(Shape{batch, dout, 1, 1});
  MapMat<S> y(out.data(), batch, dout);
  CMapMat<S> xm(x.value().data(), batch, din);
  CMapMat<S> wm(weight.value().data(), dout, din);
  y.noalias() = xm * wm.transpose();
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < dout; ++o) y(n, o) += bias.value()[o];
  return detail::make_result<S>(std::move(out), {x, weight, bias}, [batch, din, dout](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    CMapMat<S> gy(self.grad.data(), batch, dout);
    if (px.requires_grad) {
      MapMat<S> gx(px.grad_buffer().data(), batch, din);
      gx.noalias() += gy * CMapMat<S>(pw.value.data(), dout, din);
    }
    if (pw.requires_grad) {
      MapMat<S> gw(pw.grad_buffer().data(), dout, din);
      gw.noalias() += gy.transpose() * CMapMat<S>(px.value.data(), batch, din);
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (int n = 0; n < batch; ++n)
        for (int o = 0; o < dout; ++o) gb[o] += gy(n, o);
    }
  });
}

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
};

namespace detail {

// Output columns [lo, hi) whose input column ow * stride - pad + kj is in range.
inline std::pair<int, int> valid_span(int wo, int w, int stride, int pad, int kj) {
  int lo = 0;
  while (lo < wo && lo * stride - pad + kj < 0) ++lo;
  int hi = wo;
  while (hi > lo && (hi - 1) * stride - pad + kj >= w) --hi;
  return {lo, hi};
}

template <class S>
void im2col(const Tensor<S>& x, const ConvGeometry& g, int ho, int wo, S* col) {
  const Shape s = x.shape();
  const std::size_t cols = static_cast<std::size_t>(s.n) * ho * wo;
  for (int c = 0; c < s.c; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        S* row = col + ((static_cast<std::size_t>(c) * g.kernel + ki) * g.kernel + kj) * cols;
        const auto [lo, hi] = valid_span(wo, s.w, g.stride, g.pad, kj);
        const int shift = kj - g.pad;
        for (int n = 0; n < s.n; ++n) {
          const S* plane = x.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
          S* dst = row + static_cast<std::size_t>(n) * ho * wo;
          for (int oh = 0; oh < ho; ++oh) {
            S* d = dst + oh * wo;
            const int ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= s.h) {
              std::fill(d, d + wo, S(0));
              continue;
            }
            std::fill(d, d + lo, S(0));
            std::fill(d + hi, d + wo, S(0));
            const S* in = plane + ih * s.w + shift;
            if (g.stride == 1) {
              std::copy(in + lo, in + hi, d + lo);
            } else {
              for (int ow = lo; ow < hi; ++ow) d[ow] = in[ow * g.stride];
            }
          }
        }
      }
    }
  }
}

template <class S>
void col2im(const S* col, const ConvGeometry& g, int ho, int wo, Tensor<S>& dx) {
  const Shape s = dx.shape();
  const std::size_t cols = static_cast<std::size_t>(s.n) * ho * wo;
  for (int c = 0; c < s.c; ++c) {
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const S* row = col + ((static_cast<std::size_t>(c) * g.kernel + ki) * g.kernel + kj) * cols;
        const auto [lo, hi] = valid_span(wo, s.w, g.stride, g.pad, kj);
        const int shift = kj - g.pad;
        for (int n = 0; n < s.n; ++n) {
          S* plane = dx.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
          const S* src = row + static_cast<std::size_t>(n) * ho * wo;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= s.h) continue;
            S* out = plane + ih * s.w + shift;
            const S* sr = src + oh * wo;
            if (g.stride == 1) {
              for (int ow = lo; ow < hi; ++ow) out[ow] += sr[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) out[ow * g.stride] += sr[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// weight (Cout, Cin, k, k), bias (1, Cout, 1, 1).
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, ConvGeometry geo) {
  using detail::CMapMat;
  using detail::MapMat;
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != s.c || ws.h != geo.kernel || ws.w != geo.kernel) {
    throw ShapeError("conv2d: weight " + ws.str() + " incompatible with input " + s.str());
  }
  const int cout = ws.n;
  const int ho = (s.h + 2 * geo.pad - geo.kernel) / geo.stride + 1;
  const int wo = (s.w + 2 * geo.pad - geo.kernel) / geo.stride + 1;
  const int k = s.c * geo.kernel * geo.kernel;
  const int cols = s.n * ho * wo;
  const int hw = ho * wo;

  auto col = std::make_shared<typename Tensor<S>::Storage>();
  col->resize(static_cast<std::size_t>(k) * cols);
  detail::im2col(x.value(), geo, ho, wo, col->data());

  detail::RowMat<S> ym(cout, cols);
  ym.noalias() = CMapMat<S>(weight.value().data(), cout, k) * CMapMat<S>(col->data(), k, cols);

  auto out = Tensor<S>::uninitialized(Shape{s.n, cout, ho, wo});
  for (int n = 0; n < s.n; ++n) {
    for (int co = 0; co < cout; ++co) {
      const S b = bias.value()[co];
      const S* src = ym.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * hw;
      S* dst = out.data() + (static_cast<std::size_t>(n) * cout + co) * hw;
      for (int i = 0; i < hw; ++i) dst[i] = src[i] + b;
    }
  }
  const bool keep_col = grad_enabled() && weight.requires_grad();
  if (!keep_col) col.reset();
  return detail::make_result<S>(std::move(out), {x, weight, bias}, [col, geo, cout, k, cols, hw, ho, wo](Node<S>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const int batch = self.value.shape().n;
    detail::RowMat<S> gy(cout, cols);
    for (int n = 0; n < batch; ++n) {
      for (int co = 0; co < cout; ++co) {
        const S* src = self.grad.data() + (static_cast<std::size_t>(n) * cout + co) * hw;
        std::copy(src, src + hw, gy.data() + static_cast<std::size_t>(co) * cols + static_cast<std::size_t>(n) * hw);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (int co = 0; co < cout; ++co) gb[co] += gy.row(co).sum();
    }
    if (pw.requires_grad && col) {
      MapMat<S> gw(pw.grad_buffer().data(), cout, k);
      gw.noalias() += gy * CMapMat<S>(col->data(), k, cols).transpose();
    }
    if (px.requires_grad) {
      detail::RowMat<S> gcol(k, cols);
      gcol.noalias() = CMapMat<S>(pw.value.data(), cout, k).transpose() * gy;
      detail::col2im(gcol.data(), geo, ho, wo, px.grad_buffer());
    }
  });
}

// Feature-wise modulation: h * (1 + scale) + shift, where film is (N|1, 2C, 1, 1)
// holding [scale..., shift...].
template <class S>
Var<S> film(const Var<S>& h, const Var<S>& mod) {
  const Shape s = h.shape();
  const Shape m = mod.shape();
  if (static_cast<int>(m.per_sample()) != 2 * s.c || (m.n != 1 && m.n != s.n)) {
    throw ShapeError("film: modulation " + m.str() + " incompatible with " + s.str());
  }
  const bool broadcast = m.n == 1;
  const int hw = s.h * s.w;
  Tensor<S> out(s);
  for (int n = 0; n < s.n; ++n) {
    const S* mp = mod.value().data() + (broadcast ? 0 : static_cast<std::size_t>(n) * 2 * s.c);
    for (int c = 0; c < s.c; ++c) {
      const S a = S(1) + mp[c], b = mp[s.c + c];
      const S* src = h.value().data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
      S* dst = out.data() + (static_cast<std::size_t>(n) * s.c + c) * hw;
      for (int i = 0; i < hw; ++i) dst[i] = src[i] * a + b;
    }
  }
  return detail::make_result<S>(std::move(out), {h, mod}, [broadcast, hw](Node<S>& self) {
    auto& ph = *self.parents[0];
    auto& pm = *self.parents[1];
    const Shape s = self.value.shape();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t moff = broadcast ? 0 : static_cast<std::size_t>(n) * 2 * s.c;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * hw;
        const S* g = self.grad.data() + off;
        if (ph.requires_grad) {
          const S a = S(1) + pm.value[moff + c];
          S* gh = ph.grad_buffer().data() + off;
          for (int i = 0; i < hw; ++i) gh[i] += g[i] * a;
        }
        if (pm.requires_grad) {
          const S* hv = ph.value.data() + off;
          S ga = 0, gb = 0;
          for (int i = 0; i < hw; ++i) {
            ga += g[i] * hv[i];
            gb += g[i];
          }
          auto& gm = pm.grad_buffer();
          gm[moff + c] += ga;
          gm[moff + s.c + c] += gb;
        }
      }
    }
  });
}

template <class S>
Var<S> upsample2x(const Var<S>& x) {
  const Shape s = x.shape();
  Tensor<S> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int p = 0; p < s.n * s.c; ++p) {
    const S* src = x.value().data() + static_cast<std::size_t>(p) * s.h * s.w;
    S* dst = out.data() + static_cast<std::size_t>(p) * 4 * s.h * s.w;
    for (int i = 0; i < 2 * s.h; ++i)
      for (int j = 0; j < 2 * s.w; ++j) dst[i * 2 * s.w + j] = src[(i / 2) * s.w + j / 2];
  }
  return detail::make_result<S>(std::move(out), {x}, [s](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int p = 0; p < s.n * s.c; ++p) {
      S* dst = g.data() + static_cast<std::size_t>(p) * s.h * s.w;
      const S* src = self.grad.data() + static_cast<std::size_t>(p) * 4 * s.h * s.w;
      for (int i = 0; i < 2 * s.h; ++i)
        for (int j = 0; j < 2 * s.w; ++j) dst[(i / 2) * s.w + j / 2] += src[i * 2 * s.w + j];
    }
  });
}

template <class S>
Var<S> avgpool2(const Var<S>& x) {
  const Shape s = x.shape();
  if (s.h % 2 || s.w % 2) throw ShapeError("avgpool2: odd spatial size " + s.str());
  const int h2 = s.h / 2, w2 = s.w / 2;
  Tensor<S> out(Shape{s.n, s.c, h2, w2});
  for (int p = 0; p < s.n * s.c; ++p) {
    const S* src = x.value().data() + static_cast<std::size_t>(p) * s.h * s.w;
    S* dst = out.data() + static_cast<std::size_t>(p) * h2 * w2;
    for (int i = 0; i < h2; ++i)
      for (int j = 0; j < w2; ++j)
        dst[i * w2 + j] = S(0.25) * (src[2 * i * s.w + 2 * j] + src[2 * i * s.w + 2 * j + 1] +
                                     src[(2 * i + 1) * s.w + 2 * j] + src[(2 * i + 1) * s.w + 2 * j + 1]);
  }
  return detail::make_result<S>(std::move(out), {x}, [s, h2, w2](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int p = 0; p < s.n * s.c; ++p) {
      S* dst = g.data() + static_cast<std::size_t>(p) * s.h * s.w;
      const S* src = self.grad.data() + static_cast<std::size_t>(p) * h2 * w2;
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) dst[i * s.w + j] += S(0.25) * src[(i / 2) * w2 + j / 2];
    }
  });
}

// (N, C, H, W) -> (N, C, 1, 1)
template <class S>
Var<S> global_avg_pool(const Var<S>& x) {
  const Shape s = x.shape();
  const int hw = s.h * s.w;
  Tensor<S> out(Shape{s.n, s.c, 1, 1});
  for (int p = 0; p < s.n * s.c; ++p) {
    S acc = 0;
    const S* src = x.value().data() + static_cast<std::size_t>(p) * hw;
    for (int i = 0; i < hw; ++i) acc += src[i];
    out[p] = acc / S(hw);
  }
  return detail::make_result<S>(std::move(out), {x}, [hw](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < self.value.size(); ++p) {
      const S v = self.grad[p] / S(hw);
      for (int i = 0; i < hw; ++i) g[p * hw + i] += v;
    }
  });
}

// Mean of selected rows of table (V, D, 1, 1) -> (1, D, 1, 1).
template <class S>
Var<S> mean_rows(const Var<S>& table, std::vector<int> rows) {
  const int d = static_cast<int>(table.shape().per_sample());
  if (rows.empty()) throw std::invalid_argument("mean_rows: no rows selected");
  Tensor<S> out(Shape{1, d, 1, 1});
  const S inv = S(1) / S(rows.size());
  for (int r : rows) {
    if (r < 0 || r >= table.shape().n) throw std::out_of_range("mean_rows: row index out of range");
    for (int j = 0; j < d; ++j) out[j] += inv * table.value()[static_cast<std::size_t>(r) * d + j];
  }
  return detail::make_result<S>(std::move(out), {table}, [rows = std::move(rows), d, inv](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int r : rows)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(r) * d + j] += inv * self.grad[j];
  });
}

// Row n of the result is the mean of table rows groups[n] -> (N, D, 1, 1).
template <class S>
Var<S> mean_rows_batch(const Var<S>& table, std::vector<std::vector<int>> groups) {
  const int d = static_cast<int>(table.shape().per_sample());
  if (groups.empty()) throw std::invalid_argument("mean_rows_batch: no groups");
  Tensor<S> out(Shape{static_cast<int>(groups.size()), d, 1, 1});
  for (std::size_t n = 0; n < groups.size(); ++n) {
    if (groups[n].empty()) throw std::invalid_argument("mean_rows_batch: empty group");
    const S inv = S(1) / S(groups[n].size());
    for (int r : groups[n]) {
      if (r < 0 || r >= table.shape().n) throw std::out_of_range("mean_rows_batch: row index out of range");
      for (int j = 0; j < d; ++j) out[n * d + j] += inv * table.value()[static_cast<std::size_t>(r) * d + j];
    }
  }
  return detail::make_result<S>(std::move(out), {table}, [groups = std::move(groups), d](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < groups.size(); ++n) {
      const S inv = S(1) / S(groups[n].size());
      for (int r : groups[n])
        for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(r) * d + j] += inv * self.grad[n * d + j];
    }
  });
}

// Mean over all elements of (a - b)^2 -> scalar.
template <class S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t count = a.value().size();
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  Tensor<S> out(Shape{}, static_cast<S>(acc / static_cast<double>(count)));
  return detail::make_result<S>(std::move(out), {a, b}, [count](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const S k = S(2) * self.grad[0] / S(count);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) g[i] += k * (pa.value[i] - pb.value[i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) g[i] -= k * (pa.value[i] - pb.value[i]);
    }
  });
}

// Mean softmax cross-entropy over the batch; logits (N, K, 1, 1).
template <class S>
Var<S> cross_entropy(const Var<S>& logits, std::vector<int> labels) {
  const int n = logits.shape().n;
  const int kc = static_cast<int>(logits.shape().per_sample());
  if (static_cast<int>(labels.size()) != n) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n) * kc);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const S* z = logits.value().data() + static_cast<std::size_t>(i) * kc;
    S mx = *std::max_element(z, z + kc);
    double sum = 0;
    for (int j = 0; j < kc; ++j) sum += std::exp(static_cast<double>(z[j] - mx));
    for (int j = 0; j < kc; ++j) (*probs)[i * kc + j] = static_cast<S>(std::exp(static_cast<double>(z[j] - mx)) / sum);
    loss += -(static_cast<double>(z[labels[i]] - mx) - std::log(sum));
  }
  Tensor<S> out(Shape{}, static_cast<S>(loss / n));
  return detail::make_result<S>(std::move(out), {logits}, [probs, labels = std::move(labels), n, kc](Node<S>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const S k = self.grad[0] / S(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kc; ++j)
        g[i * kc + j] += k * ((*probs)[i * kc + j] - (j == labels[i] ? S(1) : S(0)));
  });
}

template <class S>
Var<S> add_scaled(const Var<S>& a, const Var<S>& b, S k) {
  return add(a, scale(b, k));
}

}  // namespace cloakforge::ad
