#include "ksr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace ksr {

int kernel_threads() {
  static const int threads = [] {
    const char* env = std::getenv("KSR_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n >= 1 ? n : 1;
  }();
  return threads;
}

namespace {

template <typename Fn>
void parallel_for(Index n, Fn&& fn) {
  const Index threads = std::min<Index>(kernel_threads(), n);
  if (threads <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (Index t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (Index i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMat<Scalar>>;

void require_rank4(const Shape& s, const char* op, const char* what) {
  if (s.size() != 4) {
    throw ValidationError(std::string(op) + ": " + what + " must be 4-D (B,C,H,W), got " + to_string(s));
  }
}

struct ConvGeometry {
  Index batch, in_ch, height, width;
  Index out_ch, kh, kw;
  Index stride, pad;
  Index out_h, out_w;

  Index patch() const { return in_ch * kh * kw; }
  Index pixels() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  for (Index c = 0; c < g.in_ch; ++c) {
    const Scalar* plane = x + c * g.height * g.width;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          Scalar* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* x) {
  for (Index c = 0; c < g.in_ch; ++c) {
    Scalar* plane = x + c * g.height * g.width;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) continue;
          const Scalar* src = row + oh * g.out_w;
          Scalar* dst = plane + ih * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      Conv2dOptions options) {
  require_rank4(input.shape(), "conv2d", "input");
  require_rank4(weight.shape(), "conv2d", "weight");
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is[1] != ws[1]) {
    throw ValidationError("conv2d: input channels do not match weight: input " + to_string(is) + ", weight " +
                          to_string(ws));
  }
  if (bias.shape() != Shape{ws[0]}) {
    throw ValidationError("conv2d: bias " + to_string(bias.shape()) + " does not match weight " + to_string(ws));
  }
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ValidationError("conv2d: kernel extents must be odd, got " + to_string(ws));
  if (options.stride < 1 || options.padding < 0) throw ValidationError("conv2d: stride must be >= 1 and padding >= 0");
  if (is[2] + 2 * options.padding < ws[2] || is[3] + 2 * options.padding < ws[3]) {
    throw ValidationError("conv2d: kernel " + to_string(ws) + " larger than padded input " + to_string(is));
  }

  ConvGeometry g{is[0], is[1], is[2], is[3], ws[0], ws[2], ws[3], options.stride, options.padding, 0, 0};
  g.out_h = (g.height + 2 * g.pad - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kw) / g.stride + 1;

  const Index in_plane = g.in_ch * g.height * g.width;
  const Index out_plane = g.out_ch * g.pixels();
  typename Tensor<Scalar>::Array out(g.batch * out_plane);
  ConstRowMap<Scalar> wmat(weight.data().data(), g.out_ch, g.patch());
  const auto& bvec = bias.data();

  parallel_for(g.batch, [&](Index b) {
    RowMap<Scalar> y(out.data() + b * out_plane, g.out_ch, g.pixels());
    if (g.pointwise()) {
      ConstRowMap<Scalar> x(input.data().data() + b * in_plane, g.in_ch, g.pixels());
      y.noalias() = wmat * x;
    } else {
      RowMat<Scalar> cols(g.patch(), g.pixels());
      im2col(input.data().data() + b * in_plane, g, cols.data());
      y.noalias() = wmat * cols;
    }
    y.colwise() += bvec.matrix();
  });

  return make_result<Scalar>(
      {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out), {input, weight, bias}, "conv2d",
      [g, in_plane, out_plane](detail::Node<Scalar>& n) {
        auto& x = *n.inputs[0];
        auto& w = *n.inputs[1];
        auto& bias_node = *n.inputs[2];
        ConstRowMap<Scalar> wmat(w.value.data(), g.out_ch, g.patch());

        if (bias_node.requires_grad) {
          auto& db = bias_node.grad_buffer();
          for (Index b = 0; b < g.batch; ++b) {
            ConstRowMap<Scalar> dy(n.grad.data() + b * out_plane, g.out_ch, g.pixels());
            db.matrix() += dy.rowwise().sum();
          }
        }

        const bool need_w = w.requires_grad;
        const bool need_x = x.requires_grad;
        if (!need_w && !need_x) return;
        if (need_x) x.grad_buffer();

        const bool serial = kernel_threads() <= 1 || g.batch <= 1;
        std::vector<RowMat<Scalar>> partial_dw(need_w && !serial ? g.batch : 0);
        RowMat<Scalar> dw_serial;
        if (need_w && serial) dw_serial = RowMat<Scalar>::Zero(g.out_ch, g.patch());

        parallel_for(g.batch, [&](Index b) {
          ConstRowMap<Scalar> dy(n.grad.data() + b * out_plane, g.out_ch, g.pixels());
          const Scalar* xb = x.value.data() + b * in_plane;
          if (need_w) {
            RowMat<Scalar>& acc = serial ? dw_serial : (partial_dw[b] = RowMat<Scalar>::Zero(g.out_ch, g.patch()));
            if (g.pointwise()) {
              ConstRowMap<Scalar> xm(xb, g.in_ch, g.pixels());
              acc.noalias() += dy * xm.transpose();
            } else {
              RowMat<Scalar> cols(g.patch(), g.pixels());
              im2col(xb, g, cols.data());
              acc.noalias() += dy * cols.transpose();
            }
          }
          if (need_x) {
            Scalar* dxb = x.grad.data() + b * in_plane;
            if (g.pointwise()) {
              RowMap<Scalar> dxm(dxb, g.in_ch, g.pixels());
              dxm.noalias() += wmat.transpose() * dy;
            } else {
              RowMat<Scalar> dcols = wmat.transpose() * dy;
              col2im(dcols.data(), g, dxb);
            }
          }
        });

        if (need_w) {
          RowMap<Scalar> dw(w.grad_buffer().data(), g.out_ch, g.patch());
          if (serial) {
            dw += dw_serial;
          } else {
            for (const auto& p : partial_dw) dw += p;
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& input) {
  require_rank4(input.shape(), "maxpool2d", "input");
  const Shape& s = input.shape();
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ValidationError("maxpool2d: spatial extents must be even, got " + to_string(s));
  }
  const Index planes = s[0] * s[1];
  const Index h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  typename Tensor<Scalar>::Array out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<Index>>(out.size());
  const Scalar* x = input.data().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        const Index base = p * h * w + (2 * i) * w + 2 * j;
        Index best = base;
        // Row-major scan with strict comparison keeps the first maximum.
        for (Index idx : {base + 1, base + w, base + w + 1}) {
          if (x[idx] > x[best]) best = idx;
        }
        const Index o = (p * oh + i) * ow + j;
        out[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  return make_result<Scalar>({s[0], s[1], oh, ow}, std::move(out), {input}, "maxpool2d",
                             [argmax](detail::Node<Scalar>& n) {
                               auto& dx = n.inputs[0]->grad_buffer();
                               for (Index o = 0; o < n.grad.size(); ++o) dx[(*argmax)[o]] += n.grad[o];
                             });
}

namespace {

struct LerpTap {
  Index lo, hi;
  double w_hi;  // weight of `hi`; `lo` gets 1 - w_hi
};

std::vector<LerpTap> upsample_taps(Index in_extent) {
  std::vector<LerpTap> taps(2 * in_extent);
  for (Index o = 0; o < 2 * in_extent; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / 2.0 - 0.5);
    const Index lo = std::min<Index>(static_cast<Index>(src), in_extent - 1);
    const Index hi = std::min<Index>(lo + 1, in_extent - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& input) {
  require_rank4(input.shape(), "upsample_bilinear", "input");
  const Shape& s = input.shape();
  if (s[2] < 1 || s[3] < 1) throw ValidationError("upsample_bilinear: empty spatial extent " + to_string(s));
  const Index planes = s[0] * s[1];
  const Index h = s[2], w = s[3], oh = 2 * h, ow = 2 * w;
  const auto rows = upsample_taps(h);
  const auto cols = upsample_taps(w);
  typename Tensor<Scalar>::Array out(planes * oh * ow);
  const Scalar* x = input.data().data();
  for (Index p = 0; p < planes; ++p) {
    const Scalar* plane = x + p * h * w;
    for (Index i = 0; i < oh; ++i) {
      const auto& r = rows[i];
      const Scalar wr = static_cast<Scalar>(r.w_hi);
      for (Index j = 0; j < ow; ++j) {
        const auto& c = cols[j];
        const Scalar wc = static_cast<Scalar>(c.w_hi);
        const Scalar top = (1 - wc) * plane[r.lo * w + c.lo] + wc * plane[r.lo * w + c.hi];
        const Scalar bottom = (1 - wc) * plane[r.hi * w + c.lo] + wc * plane[r.hi * w + c.hi];
        out[(p * oh + i) * ow + j] = (1 - wr) * top + wr * bottom;
      }
    }
  }
  return make_result<Scalar>({s[0], s[1], oh, ow}, std::move(out), {input}, "upsample_bilinear",
                             [rows, cols, planes, h, w, oh, ow](detail::Node<Scalar>& n) {
                               auto& dx = n.inputs[0]->grad_buffer();
                               for (Index p = 0; p < planes; ++p) {
                                 Scalar* plane = dx.data() + p * h * w;
                                 for (Index i = 0; i < oh; ++i) {
                                   const auto& r = rows[i];
                                   const Scalar wr = static_cast<Scalar>(r.w_hi);
                                   for (Index j = 0; j < ow; ++j) {
                                     const auto& c = cols[j];
                                     const Scalar wc = static_cast<Scalar>(c.w_hi);
                                     const Scalar g = n.grad[(p * oh + i) * ow + j];
                                     plane[r.lo * w + c.lo] += (1 - wr) * (1 - wc) * g;
                                     plane[r.lo * w + c.hi] += (1 - wr) * wc * g;
                                     plane[r.hi * w + c.lo] += wr * (1 - wc) * g;
                                     plane[r.hi * w + c.hi] += wr * wc * g;
                                   }
                                 }
                               }
                             });
}

template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           BatchNormState<Scalar>& state, Mode mode, BatchNormOptions options) {
  using Array = typename Tensor<Scalar>::Array;
  require_rank4(input.shape(), "batchnorm2d", "input");
  const Shape& s = input.shape();
  const Index batch = s[0], channels = s[1], hw = s[2] * s[3];
  const Index count = batch * hw;
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw ValidationError("batchnorm2d: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                          " do not match input " + to_string(s));
  }
  if (state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw ValidationError("batchnorm2d: running statistics sized for " + std::to_string(state.running_mean.size()) +
                          " channels, input " + to_string(s));
  }
  if (mode == Mode::Train && count < 2) {
    throw ValidationError("batchnorm2d: train mode needs at least 2 values per channel, input " + to_string(s));
  }

  Array invstd(channels);
  Array normalized(input.size());
  Array out(input.size());
  const Scalar* x = input.data().data();
  for (Index c = 0; c < channels; ++c) {
    double mu, var;
    if (mode == Mode::Train) {
      double acc = 0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = x + (b * channels + c) * hw;
        for (Index i = 0; i < hw; ++i) acc += p[i];
      }
      mu = acc / static_cast<double>(count);
      double sq = 0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = x + (b * channels + c) * hw;
        for (Index i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double m = options.momentum;
      state.running_mean[c] = static_cast<Scalar>((1 - m) * state.running_mean[c] + m * mu);
      state.running_var[c] = static_cast<Scalar>((1 - m) * state.running_var[c] +
                                                 m * var * static_cast<double>(count) / static_cast<double>(count - 1));
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + options.eps);
    invstd[c] = static_cast<Scalar>(inv);
    const Scalar g = gamma.data()[c], bt = beta.data()[c];
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * hw;
      for (Index i = 0; i < hw; ++i) {
        const Scalar xh = static_cast<Scalar>((x[off + i] - mu) * inv);
        normalized[off + i] = xh;
        out[off + i] = g * xh + bt;
      }
    }
  }

  const bool train = mode == Mode::Train;
  return make_result<Scalar>(
      s, std::move(out), {input, gamma, beta}, "batchnorm2d",
      [normalized = std::move(normalized), invstd, batch, channels, hw, count, train](detail::Node<Scalar>& n) {
        auto& xn = *n.inputs[0];
        auto& gn = *n.inputs[1];
        auto& bn = *n.inputs[2];
        for (Index c = 0; c < channels; ++c) {
          double sum_dy = 0, sum_dy_xh = 0;
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * channels + c) * hw;
            for (Index i = 0; i < hw; ++i) {
              sum_dy += n.grad[off + i];
              sum_dy_xh += static_cast<double>(n.grad[off + i]) * normalized[off + i];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[c] += static_cast<Scalar>(sum_dy_xh);
          if (bn.requires_grad) bn.grad_buffer()[c] += static_cast<Scalar>(sum_dy);
          if (!xn.requires_grad) continue;
          auto& dx = xn.grad_buffer();
          const double g = gn.value[c];
          const double inv = invstd[c];
          if (train) {
            const double mean_dy = sum_dy / static_cast<double>(count);
            const double mean_dy_xh = sum_dy_xh / static_cast<double>(count);
            for (Index b = 0; b < batch; ++b) {
              const Index off = (b * channels + c) * hw;
              for (Index i = 0; i < hw; ++i) {
                dx[off + i] += static_cast<Scalar>(g * inv * (n.grad[off + i] - mean_dy - normalized[off + i] * mean_dy_xh));
              }
            }
          } else {
            for (Index b = 0; b < batch; ++b) {
              const Index off = (b * channels + c) * hw;
              for (Index i = 0; i < hw; ++i) dx[off + i] += static_cast<Scalar>(g * inv * n.grad[off + i]);
            }
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> elu(const Tensor<Scalar>& input, Scalar alpha) {
  const auto& x = input.data();
  typename Tensor<Scalar>::Array out(x.size());
  for (Index i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : alpha * std::expm1(x[i]);
  return make_result<Scalar>(input.shape(), std::move(out), {input}, "elu", [alpha](detail::Node<Scalar>& n) {
    const auto& xv = n.inputs[0]->value;
    auto& dx = n.inputs[0]->grad_buffer();
    for (Index i = 0; i < xv.size(); ++i) dx[i] += n.grad[i] * (xv[i] > 0 ? Scalar(1) : alpha * std::exp(xv[i]));
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input) {
  typename Tensor<Scalar>::Array out = Scalar(1) / (Scalar(1) + (-input.data()).exp());
  return make_result<Scalar>(input.shape(), std::move(out), {input}, "sigmoid", [](detail::Node<Scalar>& n) {
    n.inputs[0]->grad_buffer() += n.grad * n.value * (Scalar(1) - n.value);
  });
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank4(a.shape(), "concat_channels", "first operand");
  require_rank4(b.shape(), "concat_channels", "second operand");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw ValidationError("concat_channels: batch/spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
  }
  const Index batch = sa[0], hw = sa[2] * sa[3];
  const Index na = sa[1] * hw, nb = sb[1] * hw;
  typename Tensor<Scalar>::Array out(batch * (na + nb));
  for (Index i = 0; i < batch; ++i) {
    out.segment(i * (na + nb), na) = a.data().segment(i * na, na);
    out.segment(i * (na + nb) + na, nb) = b.data().segment(i * nb, nb);
  }
  return make_result<Scalar>({batch, sa[1] + sb[1], sa[2], sa[3]}, std::move(out), {a, b}, "concat_channels",
                             [batch, na, nb](detail::Node<Scalar>& n) {
                               auto& an = *n.inputs[0];
                               auto& bn = *n.inputs[1];
                               for (Index i = 0; i < batch; ++i) {
                                 if (an.requires_grad) an.grad_buffer().segment(i * na, na) += n.grad.segment(i * (na + nb), na);
                                 if (bn.requires_grad)
                                   bn.grad_buffer().segment(i * nb, nb) += n.grad.segment(i * (na + nb) + na, nb);
                               }
                             });
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, Index begin, Index count) {
  require_rank4(input.shape(), "slice_channels", "input");
  const Shape& s = input.shape();
  if (begin < 0 || count < 0 || begin + count > s[1]) {
    throw ValidationError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                          ") outside " + to_string(s));
  }
  const Index batch = s[0], hw = s[2] * s[3], plane = s[1] * hw, take = count * hw;
  typename Tensor<Scalar>::Array out(batch * take);
  for (Index i = 0; i < batch; ++i) out.segment(i * take, take) = input.data().segment(i * plane + begin * hw, take);
  return make_result<Scalar>({batch, count, s[2], s[3]}, std::move(out), {input}, "slice_channels",
                             [batch, hw, plane, take, begin](detail::Node<Scalar>& n) {
                               auto& dx = n.inputs[0]->grad_buffer();
                               for (Index i = 0; i < batch; ++i)
                                 dx.segment(i * plane + begin * hw, take) += n.grad.segment(i * take, take);
                             });
}

#define KSR_INSTANTIATE(S)                                                                                         \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Conv2dOptions);              \
  template Tensor<S> maxpool2d<S>(const Tensor<S>&);                                                              \
  template Tensor<S> upsample_bilinear<S>(const Tensor<S>&);                                                      \
  template Tensor<S> batchnorm2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, BatchNormState<S>&, Mode, \
                                    BatchNormOptions);                                                             \
  template Tensor<S> elu<S>(const Tensor<S>&, S);                                                                 \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                                \
  template Tensor<S> concat_channels<S>(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> slice_channels<S>(const Tensor<S>&, Index, Index);

KSR_INSTANTIATE(float)
KSR_INSTANTIATE(double)
#undef KSR_INSTANTIATE

}  // namespace ksr
