#pragma once

#include "ksr/kspace.hpp"
#include "ksr/tensor.hpp"

#include <json.hpp>

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>

namespace ksr {

struct SsimConstants {
  double c1 = 1e-4;
  double c2 = 9e-4;
  double dynamic_range = 1.0;

  // c1 = (0.01 L)², c2 = (0.03 L)².
  static SsimConstants for_range(double dynamic_range = 1.0) {
    return {std::pow(0.01 * dynamic_range, 2), std::pow(0.03 * dynamic_range, 2), dynamic_range};
  }
};

// Whole-image means, population variances (divisor N) and covariance.
struct GlobalStats {
  double mean_a = 0, mean_b = 0;
  double var_a = 0, var_b = 0;
  double cov = 0;
};

namespace detail {
template <typename DA, typename DB>
void require_same_extent(const Eigen::ArrayBase<DA>& a, const Eigen::ArrayBase<DB>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "," +
                          std::to_string(a.cols()) + ") vs (" + std::to_string(b.rows()) + "," +
                          std::to_string(b.cols()) + ")");
  }
}
}  // namespace detail

template <typename DA, typename DB>
GlobalStats global_stats(const Eigen::ArrayBase<DA>& a, const Eigen::ArrayBase<DB>& b) {
  detail::require_same_extent(a, b, "global_stats");
  const auto x = a.template cast<double>().eval();
  const auto y = b.template cast<double>().eval();
  const double n = static_cast<double>(x.size());
  GlobalStats s;
  s.mean_a = x.sum() / n;
  s.mean_b = y.sum() / n;
  const auto dx = (x - s.mean_a).eval();
  const auto dy = (y - s.mean_b).eval();
  s.var_a = dx.square().sum() / n;
  s.var_b = dy.square().sum() / n;
  s.cov = (dx * dy).sum() / n;
  return s;
}

template <typename DA, typename DB>
double mse(const Eigen::ArrayBase<DA>& y, const Eigen::ArrayBase<DB>& yhat) {
  detail::require_same_extent(y, yhat, "mse");
  return (y.template cast<double>() - yhat.template cast<double>()).square().sum() / static_cast<double>(y.size());
}

inline double ssim_from_stats(const GlobalStats& s, const SsimConstants& k) {
  const double luminance = 2 * s.mean_a * s.mean_b + k.c1;
  const double structure = 2 * s.cov + k.c2;
  const double norm_l = s.mean_a * s.mean_a + s.mean_b * s.mean_b + k.c1;
  const double norm_s = s.var_a + s.var_b + k.c2;
  return (luminance * structure) / (norm_l * norm_s);
}

// Global-statistics SSIM; equals 1 − 2·dssim.
template <typename DA, typename DB>
double ssim(const Eigen::ArrayBase<DA>& y, const Eigen::ArrayBase<DB>& yhat,
            const SsimConstants& consts = SsimConstants::for_range()) {
  return ssim_from_stats(global_stats(y, yhat), consts);
}

template <typename DA, typename DB>
double dssim(const Eigen::ArrayBase<DA>& y, const Eigen::ArrayBase<DB>& yhat,
             const SsimConstants& consts = SsimConstants::for_range()) {
  return 0.5 - 0.5 * ssim(y, yhat, consts);
}

// 10·log10(L²/mse); +infinity for identical inputs.
template <typename DA, typename DB>
double psnr(const Eigen::ArrayBase<DA>& y, const Eigen::ArrayBase<DB>& yhat, double dynamic_range = 1.0) {
  const double err = mse(y, yhat);
  if (err == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(dynamic_range * dynamic_range / err);
}

// Mean SSIM over 11×11 Gaussian windows (σ = 1.5), valid positions only.
// Images smaller than the window fall back to the global form.
double windowed_ssim(const Image& y, const Image& yhat, const SsimConstants& consts = SsimConstants::for_range());

// Mean absolute error over pixels where `region` is nonzero; NaN if empty.
double masked_mae(const Image& y, const Image& yhat, const Image& region);

struct MetricReport {
  std::string id;
  double mse = 0;
  double ssim = 1;
  double dssim = 0;
  double psnr = std::numeric_limits<double>::infinity();
  double ssim_windowed = 1;
};

MetricReport make_report(std::string id, const Image& y, const Image& yhat,
                         const SsimConstants& consts = SsimConstants::for_range());

// {"id","mse","ssim","dssim","psnr","ssim_windowed"}; an infinite PSNR is
// written as the string "inf".
void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

// mse over the whole batch plus the batch mean of per-image global DSSIM.
// Both tensors are (B,1,H,W); only `prediction` is differentiated.
template <typename Scalar>
Tensor<Scalar> composite_loss(const Tensor<Scalar>& target, const Tensor<Scalar>& prediction,
                              const SsimConstants& consts = SsimConstants::for_range());

}  // namespace ksr
