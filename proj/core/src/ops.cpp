#include "flat/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flat/error.hpp"

namespace flat {
FLAT_ABI_BEGIN
namespace ops {

namespace {

using detail::Node;
using MatR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using ConstMapR = Eigen::Map<const MatR>;

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<Scalar> values, const char* op, std::initializer_list<Tensor> inputs,
                   BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || (in.defined() && in.requires_grad());
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node());
    }
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad && !n->grad.empty(); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined input tensor");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

// Unfolds one C x H x W image into a (C*k*k) x (Ho*Wo) row-major matrix.
void im2col(const Scalar* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, Scalar* cols) {
  const auto Hs = static_cast<long>(H);
  const auto Ws = static_cast<long>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        Scalar* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          Scalar* out = row + oy * Wo;
          if (iy < 0 || iy >= Hs) {
            std::fill(out, out + Wo, Scalar{0});
            continue;
          }
          const Scalar* src = img + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            out[ox] = (ix < 0 || ix >= Ws) ? Scalar{0} : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const Scalar* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
                std::size_t pad, std::size_t Ho, std::size_t Wo, Scalar* img) {
  const auto Hs = static_cast<long>(H);
  const auto Ws = static_cast<long>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const Scalar* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= Hs) continue;
          Scalar* dst = img + (c * H + static_cast<std::size_t>(iy)) * W;
          const Scalar* in = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < Ws) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()));
  }
  std::vector<Scalar> out(m * n);
  MapR(out.data(), m, n).noalias() = ConstMapR(a.data().data(), m, k) * ConstMapR(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    const auto& A = self.inputs[0];
    const auto& B = self.inputs[1];
    ConstMapR g(self.grad.data(), m, n);
    if (wants_grad(A)) MapR(A->grad.data(), m, k).noalias() += g * ConstMapR(B->value.data(), k, n).transpose();
    if (wants_grad(B)) MapR(B->grad.data(), k, n).noalias() += ConstMapR(A->value.data(), m, k).transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<Scalar> out(r * c);
  MapR(out.data(), c, r) = ConstMapR(a.data().data(), r, c).transpose();
  return make_result({c, r}, std::move(out), "transpose", {a}, [r, c](Node& self) {
    const auto& A = self.inputs[0];
    if (wants_grad(A)) MapR(A->grad.data(), r, c) += ConstMapR(self.grad.data(), c, r).transpose();
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  std::vector<Scalar> out(batch * out_dim);
  MapR y(out.data(), batch, out_dim);
  y.noalias() = ConstMapR(x.data().data(), batch, in) * ConstMapR(weight.data().data(), out_dim, in).transpose();
  if (has_bias) {
    const auto b = bias.data();
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) y(r, c) += b[c];
  }
  auto fn = [batch, in, out_dim, has_bias](Node& self) {
    const auto& X = self.inputs[0];
    const auto& Wt = self.inputs[1];
    ConstMapR g(self.grad.data(), batch, out_dim);
    if (wants_grad(X)) MapR(X->grad.data(), batch, in).noalias() += g * ConstMapR(Wt->value.data(), out_dim, in);
    if (wants_grad(Wt)) {
      MapR(Wt->grad.data(), out_dim, in).noalias() += g.transpose() * ConstMapR(X->value.data(), batch, in);
    }
    if (has_bias && self.inputs.size() > 2 && wants_grad(self.inputs[2])) {
      auto& gb = self.inputs[2]->grad;
      for (std::size_t c = 0; c < out_dim; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < batch; ++r) acc += g(r, c);
        gb[c] += static_cast<Scalar>(acc);
      }
    }
  };
  if (has_bias) return make_result({batch, out_dim}, std::move(out), "linear", {x, weight, bias}, fn);
  return make_result({batch, out_dim}, std::move(out), "linear", {x, weight}, fn);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != C || kernel.dim(3) != k) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel.shape()) + " incompatible with input " +
                         shape_to_string(x.shape()));
  }
  if (stride < 1 || pad < 0) {
    throw DimensionError("conv2d: stride must be >= 1 and pad >= 0, got stride " + std::to_string(stride) +
                         ", pad " + std::to_string(pad));
  }
  const auto s = static_cast<std::size_t>(stride);
  const auto p = static_cast<std::size_t>(pad);
  if (k > H + 2 * p || k > W + 2 * p) {
    throw DimensionError("conv2d: kernel " + shape_to_string(kernel.shape()) + " larger than padded input " +
                         shape_to_string(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{F}) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match kernel " +
                         shape_to_string(kernel.shape()));
  }
  const std::size_t Ho = (H + 2 * p - k) / s + 1;
  const std::size_t Wo = (W + 2 * p - k) / s + 1;
  const std::size_t patch = C * k * k;
  const std::size_t spatial = Ho * Wo;

  std::vector<Scalar> out(B * F * spatial);
  std::vector<Scalar> cols(patch * spatial);
  ConstMapR K(kernel.data().data(), F, patch);
  const Scalar* xin = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    im2col(xin + b * C * H * W, C, H, W, k, s, p, Ho, Wo, cols.data());
    MapR y(out.data() + b * F * spatial, F, spatial);
    y.noalias() = K * ConstMapR(cols.data(), patch, spatial);
    if (has_bias) {
      const auto bv = bias.data();
      for (std::size_t f = 0; f < F; ++f) y.row(f).array() += bv[f];
    }
  }

  auto fn = [=](Node& self) {
    const auto& X = self.inputs[0];
    const auto& Kn = self.inputs[1];
    const bool gx = wants_grad(X);
    const bool gk = wants_grad(Kn);
    std::vector<Scalar> col_buf(patch * spatial);
    std::vector<Scalar> dcol_buf(gx ? patch * spatial : 0);
    ConstMapR Kmat(Kn->value.data(), F, patch);
    for (std::size_t b = 0; b < B; ++b) {
      ConstMapR g(self.grad.data() + b * F * spatial, F, spatial);
      if (gk) {
        im2col(X->value.data() + b * C * H * W, C, H, W, k, s, p, Ho, Wo, col_buf.data());
        MapR(Kn->grad.data(), F, patch).noalias() += g * ConstMapR(col_buf.data(), patch, spatial).transpose();
      }
      if (gx) {
        MapR(dcol_buf.data(), patch, spatial).noalias() = Kmat.transpose() * g;
        col2im_add(dcol_buf.data(), C, H, W, k, s, p, Ho, Wo, X->grad.data() + b * C * H * W);
      }
    }
    if (has_bias && self.inputs.size() > 2 && wants_grad(self.inputs[2])) {
      auto& gb = self.inputs[2]->grad;
      for (std::size_t f = 0; f < F; ++f) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const Scalar* row = self.grad.data() + (b * F + f) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) acc += row[i];
        }
        gb[f] += static_cast<Scalar>(acc);
      }
    }
  };
  if (has_bias) return make_result({B, F, Ho, Wo}, std::move(out), "conv2d", {x, kernel, bias}, fn);
  return make_result({B, F, Ho, Wo}, std::move(out), "conv2d", {x, kernel}, fn);
}

Tensor max_pool2d(const Tensor& x, int window) {
  require_rank(x, 4, "max_pool2d");
  if (window < 1) throw DimensionError("max_pool2d: window must be >= 1");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto w = static_cast<std::size_t>(window);
  if (H < w || W < w) {
    throw DimensionError("max_pool2d: window " + std::to_string(w) + " larger than input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t Ho = H / w, Wo = W / w;
  std::vector<Scalar> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto in = x.data();
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = base + (oy * w) * W + ox * w;
        for (std::size_t dy = 0; dy < w; ++dy) {
          for (std::size_t dx = 0; dx < w; ++dx) {
            const std::size_t idx = base + (oy * w + dy) * W + ox * w + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * Ho + oy) * Wo + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  return make_result({B, C, Ho, Wo}, std::move(out), "max_pool2d", {x}, [argmax](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (std::size_t o = 0; o < argmax->size(); ++o) X->grad[(*argmax)[o]] += self.grad[o];
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<Scalar> out(B * C);
  const auto in = x.data();
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += in[plane * HW + i];
    out[plane] = static_cast<Scalar>(acc / static_cast<double>(HW));
  }
  return make_result({B, C}, std::move(out), "global_avg_pool", {x}, [HW](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    const Scalar inv = Scalar{1} / static_cast<Scalar>(HW);
    for (std::size_t plane = 0; plane < self.grad.size(); ++plane) {
      const Scalar g = self.grad[plane] * inv;
      for (std::size_t i = 0; i < HW; ++i) X->grad[plane * HW + i] += g;
    }
  });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum) {
  require_rank(x, 4, "batch_norm2d");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    require_rank(*t, 1, "batch_norm2d");
    if (t->dim(0) != C) {
      throw DimensionError("batch_norm2d: per-channel tensor of shape " + shape_to_string(t->shape()) + " for " +
                           std::to_string(C) + " channels");
    }
  }
  const std::size_t count = B * HW;
  if (training && count < 2) throw DimensionError("batch_norm2d: training needs more than one value per channel");

  std::vector<Scalar> mean(C), inv_std(C);
  if (training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const Scalar* p = x.data().data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      for (std::size_t b = 0; b < B; ++b) {
        const Scalar* p = x.data().data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<Scalar>(mu);
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + kBatchNormEpsilon));
      const double unbiased = sq / static_cast<double>(count - 1);
      rm[c] = static_cast<Scalar>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<Scalar>((1.0 - momentum) * rv[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + kBatchNormEpsilon));
    }
  }

  std::vector<Scalar> normalized(x.numel()), out(x.numel());
  const auto in = x.data();
  const auto g = gamma.data();
  const auto bt = beta.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const Scalar xh = (in[base + i] - mean[c]) * inv_std[c];
        normalized[base + i] = xh;
        out[base + i] = g[c] * xh + bt[c];
      }
    }
  }
  // Inputs are recorded as (x, gamma, beta); all three are always defined.
  return make_result(x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
                     [B, C, HW, count, training, normalized = std::move(normalized), inv_std](Node& self) {
                       const auto& X = self.inputs[0];
                       const auto& G = self.inputs[1];
                       const auto& Bt = self.inputs[2];
                       for (std::size_t c = 0; c < C; ++c) {
                         double sum_dy = 0.0, sum_dy_xh = 0.0;
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t base = (b * C + c) * HW;
                           for (std::size_t i = 0; i < HW; ++i) {
                             sum_dy += self.grad[base + i];
                             sum_dy_xh += static_cast<double>(self.grad[base + i]) * normalized[base + i];
                           }
                         }
                         if (wants_grad(G)) G->grad[c] += static_cast<Scalar>(sum_dy_xh);
                         if (wants_grad(Bt)) Bt->grad[c] += static_cast<Scalar>(sum_dy);
                         if (!wants_grad(X)) continue;
                         const double scale = static_cast<double>(G->value[c]) * inv_std[c];
                         const double mean_dy = training ? sum_dy / static_cast<double>(count) : 0.0;
                         const double mean_dy_xh = training ? sum_dy_xh / static_cast<double>(count) : 0.0;
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t base = (b * C + c) * HW;
                           for (std::size_t i = 0; i < HW; ++i) {
                             X->grad[base + i] += static_cast<Scalar>(
                                 scale * (self.grad[base + i] - mean_dy - normalized[base + i] * mean_dy_xh));
                           }
                         }
                       }
                     });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (Scalar& v : out) v = v > Scalar{0} ? v : Scalar{0};
  return make_result(x.shape(), std::move(out), "relu", {x}, [](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (X->value[i] > Scalar{0}) X->grad[i] += self.grad[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (const auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (wants_grad(self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[0]->grad[i] += self.grad[i];
    }
    if (self.inputs.size() > 1 && wants_grad(self.inputs[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[1]->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul_scalar(const Tensor& x, Scalar factor) {
  require_defined(x, "mul_scalar");
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (Scalar& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), "mul_scalar", {x}, [factor](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) X->grad[i] += factor * self.grad[i];
  });
}

Tensor scale_by(const Tensor& x, const Tensor& factor) {
  require_defined(x, "scale_by");
  require_defined(factor, "scale_by");
  if (factor.numel() != 1) {
    throw DimensionError("scale_by: factor must hold one element, got " + shape_to_string(factor.shape()));
  }
  const Scalar s = factor.data()[0];
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (Scalar& v : out) v *= s;
  return make_result(x.shape(), std::move(out), "scale_by", {x, factor}, [](Node& self) {
    const auto& X = self.inputs[0];
    const auto& S = self.inputs[1];
    if (wants_grad(X)) {
      const Scalar sv = S->value[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) X->grad[i] += sv * self.grad[i];
    }
    if (wants_grad(S)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        acc += static_cast<double>(self.grad[i]) * static_cast<double>(X->value[i]);
      }
      S->grad[0] += static_cast<Scalar>(acc);
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) X->grad[i] += self.grad[i];
  });
}

Tensor concat_columns(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_columns");
  require_rank(b, 2, "concat_columns");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_columns: row counts differ, " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  const std::size_t rows = a.dim(0), ma = a.dim(1), mb = b.dim(1);
  std::vector<Scalar> out(rows * (ma + mb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * ma, ma, out.data() + r * (ma + mb));
    std::copy_n(b.data().data() + r * mb, mb, out.data() + r * (ma + mb) + ma);
  }
  return make_result({rows, ma + mb}, std::move(out), "concat_columns", {a, b}, [rows, ma, mb](Node& self) {
    const auto& A = self.inputs[0];
    const auto& Bn = self.inputs[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* g = self.grad.data() + r * (ma + mb);
      if (wants_grad(A))
        for (std::size_t i = 0; i < ma; ++i) A->grad[r * ma + i] += g[i];
      if (wants_grad(Bn))
        for (std::size_t i = 0; i < mb; ++i) Bn->grad[r * mb + i] += g[ma + i];
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (Scalar v : x.data()) acc += v;
  return make_result({1}, {static_cast<Scalar>(acc)}, "sum", {x}, [](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (Scalar& g : X->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  double acc = 0.0;
  for (Scalar v : x.data()) acc += v;
  const auto n = static_cast<double>(x.numel());
  return make_result({1}, {static_cast<Scalar>(acc / n)}, "mean", {x}, [n](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    const auto g = static_cast<Scalar>(static_cast<double>(self.grad[0]) / n);
    for (Scalar& v : X->grad) v += g;
  });
}

namespace {

Tensor normalize_rows(const Tensor& x, double min_norm, bool strict, const char* op) {
  require_defined(x, op);
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  auto norms = std::make_shared<std::vector<double>>(rows);
  auto clamped = std::make_shared<std::vector<char>>(rows, 0);
  std::vector<Scalar> out(x.numel());
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      const double v = in[r * width + i];
      sq += v * v;
    }
    double norm = std::sqrt(sq);
    if (norm <= min_norm) {
      if (strict) {
        throw DegenerateError(std::string(op) + ": row " + std::to_string(r) + " has near-zero norm " +
                              std::to_string(norm));
      }
      norm = min_norm;
      (*clamped)[r] = 1;
    }
    (*norms)[r] = norm;
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = static_cast<Scalar>(in[r * width + i] / norm);
  }
  return make_result(x.shape(), std::move(out), op, {x}, [rows, width, norms, clamped](Node& self) {
    const auto& X = self.inputs[0];
    if (!wants_grad(X)) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double norm = (*norms)[r];
      const Scalar* g = self.grad.data() + r * width;
      Scalar* gx = X->grad.data() + r * width;
      if ((*clamped)[r]) {
        for (std::size_t i = 0; i < width; ++i) gx[i] += static_cast<Scalar>(g[i] / norm);
        continue;
      }
      // d(x/|x|) = (g - y (y . g)) / |x|
      const Scalar* y = self.value.data() + r * width;
      double dot = 0.0;
      for (std::size_t i = 0; i < width; ++i) dot += static_cast<double>(y[i]) * g[i];
      for (std::size_t i = 0; i < width; ++i) gx[i] += static_cast<Scalar>((g[i] - y[i] * dot) / norm);
    }
  });
}

}  // namespace

Tensor l2_normalize(const Tensor& x) { return normalize_rows(x, kNormEpsilon, true, "l2_normalize"); }

Tensor l2_normalize_clamped(const Tensor& x, double min_norm) {
  return normalize_rows(x, min_norm, false, "l2_normalize_clamped");
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (C < 2) throw DimensionError("softmax_cross_entropy: need at least 2 classes, got " + shape_to_string(logits.shape()));
  if (labels.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_to_string(logits.shape()));
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                       std::to_string(C) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(B * C);
  std::vector<int> targets(labels.begin(), labels.end());
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const Scalar* row = z.data() + b * C;
    const double m = *std::max_element(row, row + C);
    double denom = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(row[c]) - m);
      (*probs)[b * C + c] = e;
      denom += e;
    }
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] /= denom;
    const auto y = static_cast<std::size_t>(targets[b]);
    total += (m + std::log(denom)) - static_cast<double>(row[y]);
  }
  const double loss = total / static_cast<double>(B);
  return make_result({1}, {static_cast<Scalar>(loss)}, "softmax_cross_entropy", {logits},
                     [B, C, probs, targets = std::move(targets)](Node& self) {
                       const auto& L = self.inputs[0];
                       if (!wants_grad(L)) return;
                       const double g = static_cast<double>(self.grad[0]) / static_cast<double>(B);
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t c = 0; c < C; ++c) {
                           double d = (*probs)[b * C + c];
                           if (static_cast<int>(c) == targets[b]) d -= 1.0;
                           L->grad[b * C + c] += static_cast<Scalar>(g * d);
                         }
                       }
                     });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return make_result({1}, {static_cast<Scalar>(acc / static_cast<double>(n))}, "mse", {a, b}, [n](Node& self) {
    const auto& A = self.inputs[0];
    const auto& Bn = self.inputs[1];
    const double scale = 2.0 * static_cast<double>(self.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = scale * (static_cast<double>(A->value[i]) - static_cast<double>(Bn->value[i]));
      if (wants_grad(A)) A->grad[i] += static_cast<Scalar>(d);
      if (wants_grad(Bn)) Bn->grad[i] -= static_cast<Scalar>(d);
    }
  });
}

}  // namespace ops
FLAT_ABI_END
}  // namespace flat
