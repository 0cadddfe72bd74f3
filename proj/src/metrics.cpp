#include "ksr/metrics.hpp"

#include <vector>

namespace ksr {

namespace {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  double total = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable valid-mode filtering.
Image filter_valid(const Image& img, const std::vector<double>& w) {
  const Index k = static_cast<Index>(w.size());
  const Index oh = img.rows() - k + 1, ow = img.cols() - k + 1;
  Image horizontal(img.rows(), ow);
  for (Index r = 0; r < img.rows(); ++r)
    for (Index c = 0; c < ow; ++c) {
      double acc = 0;
      for (Index t = 0; t < k; ++t) acc += w[t] * img(r, c + t);
      horizontal(r, c) = acc;
    }
  Image out(oh, ow);
  for (Index r = 0; r < oh; ++r)
    for (Index c = 0; c < ow; ++c) {
      double acc = 0;
      for (Index t = 0; t < k; ++t) acc += w[t] * horizontal(r + t, c);
      out(r, c) = acc;
    }
  return out;
}

}  // namespace

double windowed_ssim(const Image& y, const Image& yhat, const SsimConstants& k) {
  detail::require_same_extent(y, yhat, "windowed_ssim");
  constexpr int kWindow = 11;
  if (y.rows() < kWindow || y.cols() < kWindow) return ssim(y, yhat, k);
  const auto w = gaussian_window(kWindow, 1.5);
  const Image mu_a = filter_valid(y, w);
  const Image mu_b = filter_valid(yhat, w);
  const Image var_a = filter_valid(y.square(), w) - mu_a.square();
  const Image var_b = filter_valid(yhat.square(), w) - mu_b.square();
  const Image cov = filter_valid(y * yhat, w) - mu_a * mu_b;
  const Image map = ((2 * mu_a * mu_b + k.c1) * (2 * cov + k.c2)) /
                    ((mu_a.square() + mu_b.square() + k.c1) * (var_a + var_b + k.c2));
  return map.mean();
}

double masked_mae(const Image& y, const Image& yhat, const Image& region) {
  detail::require_same_extent(y, yhat, "masked_mae");
  detail::require_same_extent(y, region, "masked_mae");
  double total = 0;
  Index count = 0;
  for (Index i = 0; i < y.size(); ++i) {
    if (region.data()[i] == 0.0) continue;
    total += std::abs(y.data()[i] - yhat.data()[i]);
    ++count;
  }
  return count ? total / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

MetricReport make_report(std::string id, const Image& y, const Image& yhat, const SsimConstants& consts) {
  MetricReport r;
  r.id = std::move(id);
  r.mse = mse(y, yhat);
  r.ssim = ssim(y, yhat, consts);
  r.dssim = 0.5 - 0.5 * r.ssim;
  r.psnr = psnr(y, yhat, consts.dynamic_range);
  r.ssim_windowed = windowed_ssim(y, yhat, consts);
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"id", r.id}, {"mse", r.mse}, {"ssim", r.ssim}, {"dssim", r.dssim}};
  if (std::isinf(r.psnr)) {
    j["psnr"] = "inf";
  } else {
    j["psnr"] = r.psnr;
  }
  j["ssim_windowed"] = r.ssim_windowed;
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.id = j.at("id").get<std::string>();
  r.mse = j.at("mse").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.dssim = j.at("dssim").get<double>();
  const auto& p = j.at("psnr");
  r.psnr = p.is_string() ? std::numeric_limits<double>::infinity() : p.get<double>();
  r.ssim_windowed = j.value("ssim_windowed", r.ssim);
}

template <typename Scalar>
Tensor<Scalar> composite_loss(const Tensor<Scalar>& target, const Tensor<Scalar>& prediction,
                              const SsimConstants& k) {
  if (target.shape() != prediction.shape()) {
    throw ValidationError("composite_loss: shape mismatch " + to_string(target.shape()) + " vs " +
                          to_string(prediction.shape()));
  }
  if (prediction.rank() < 1 || prediction.size() == 0) {
    throw ValidationError("composite_loss: empty prediction " + to_string(prediction.shape()));
  }
  const Index batch = prediction.dim(0);
  const Index total = prediction.size();
  const Index per_image = total / batch;
  const auto& y = target.data();
  const auto& p = prediction.data();

  // grad holds d loss / d prediction, scaled by the upstream adjoint later.
  Eigen::ArrayXd grad(total);
  double squared = 0;
  for (Index i = 0; i < total; ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(p[i]);
    squared += d * d;
    grad[i] = -2.0 * d / static_cast<double>(total);
  }
  double dssim_sum = 0;
  const double n = static_cast<double>(per_image);
  for (Index b = 0; b < batch; ++b) {
    const auto ys = y.segment(b * per_image, per_image).template cast<double>().eval();
    const auto ps = p.segment(b * per_image, per_image).template cast<double>().eval();
    const GlobalStats s = global_stats(ys, ps);
    const double lum = 2 * s.mean_a * s.mean_b + k.c1;
    const double str = 2 * s.cov + k.c2;
    const double nl = s.mean_a * s.mean_a + s.mean_b * s.mean_b + k.c1;
    const double ns = s.var_a + s.var_b + k.c2;
    const double value = (lum * str) / (nl * ns);
    dssim_sum += 0.5 - 0.5 * value;
    const double coef = -0.5 * value / static_cast<double>(batch);
    for (Index i = 0; i < per_image; ++i) {
      const double d_lum = 2 * s.mean_a / n;
      const double d_str = 2 * (ys[i] - s.mean_a) / n;
      const double d_nl = 2 * s.mean_b / n;
      const double d_ns = 2 * (ps[i] - s.mean_b) / n;
      grad[b * per_image + i] += coef * (d_lum / lum + d_str / str - d_nl / nl - d_ns / ns);
    }
  }
  const double loss = squared / static_cast<double>(total) + dssim_sum / static_cast<double>(batch);

  typename Tensor<Scalar>::Array out = Tensor<Scalar>::Array::Constant(1, static_cast<Scalar>(loss));
  return make_result<Scalar>(Shape{}, std::move(out), {target, prediction}, "composite_loss",
                             [grad = std::move(grad)](detail::Node<Scalar>& node) {
                               auto& pred = *node.inputs[1];
                               if (!pred.requires_grad) return;
                               pred.grad_buffer() += (grad * static_cast<double>(node.grad[0])).template cast<Scalar>();
                             });
}

template Tensor<float> composite_loss<float>(const Tensor<float>&, const Tensor<float>&, const SsimConstants&);
template Tensor<double> composite_loss<double>(const Tensor<double>&, const Tensor<double>&, const SsimConstants&);

}  // namespace ksr
