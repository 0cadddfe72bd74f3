#pragma once

#include "ksr/tensor.hpp"

#include <Eigen/Core>

#include <complex>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ksr {

template <typename Scalar>
using ImageT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
// Real 2-D grid, rows × cols; intensities live in [0,1] once normalized.
using Image = ImageT<double>;
using ComplexGrid = Eigen::Array<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Which image axis carries the phase-encoding lines.
enum class Axis { Rows = 0, Cols = 1 };

// Centered spectrum: the DC coefficient sits at (rows/2, cols/2).
struct KSpace {
  ComplexGrid data;
  Axis phase_axis = Axis::Cols;

  Index rows() const { return data.rows(); }
  Index cols() const { return data.cols(); }
  Index lines() const { return phase_axis == Axis::Cols ? data.cols() : data.rows(); }
};

// Orthonormal centered 2-D DFT.
KSpace fft2(const Image& image, Axis phase_axis = Axis::Cols);

// Inverse of fft2, real part only. `max_imag` receives the largest discarded
// imaginary magnitude.
Image ifft2(const KSpace& kspace);
Image ifft2(const KSpace& kspace, double& max_imag);

enum class MaskKind { Center, Custom };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(std::string_view text);

struct MaskConfig {
  double factor = 4.0;
  double center_fraction = 1.0;
  MaskKind kind = MaskKind::Center;

  static MaskConfig center(double factor) { return {factor, 1.0, MaskKind::Center}; }
  static MaskConfig custom(double factor, double center_fraction = 0.8) {
    return {factor, center_fraction, MaskKind::Custom};
  }

  // Throws ValidationError unless factor ≥ 1 and 0 < center_fraction ≤ 1
  // (exactly 1 for center masks).
  void validate() const;
};

// Binary per-line mask over the phase-encoding axis.
struct SamplingMask {
  Index length = 0;
  std::vector<Index> kept;  // sorted, unique
  MaskConfig config;

  bool contains(Index line) const;
  double acceleration() const { return static_cast<double>(length) / static_cast<double>(kept.size()); }
  // Stable identifier, e.g. "custom-N292-k4-c0.8".
  std::string id() const;

  bool operator==(const SamplingMask&) const = default;
};

// Round half away from zero, the single rounding rule used for mask counts.
Index round_half_away(double x);

// Keeps round(N/k) lines: a contiguous block of round(f·n_keep) lines
// centered on N/2 (even blocks extend one line toward lower indices), plus
// the remainder at equidistant positions over the complement of that block.
// Outer positions are placed by rank within the complement at
// (j + ½)·C/n_outer − ½ and snapped to the nearest unused rank, lower on ties.
SamplingMask make_mask(Index n_lines, const MaskConfig& config);

bool operator==(const MaskConfig& a, const MaskConfig& b);

// Zeroes every phase-encoding line that the mask does not keep.
KSpace apply_mask(const KSpace& kspace, const SamplingMask& mask);

// Real part of ifft2(apply_mask(fft2(image))), clamped to [0,1].
Image zero_filled_recon(const Image& image, const SamplingMask& mask, Axis phase_axis = Axis::Cols);

// Two-line text form: "N k kind center_fraction" then the kept indices.
std::string format_mask(const SamplingMask& mask);
SamplingMask parse_mask(std::string_view text);
void save_mask(const std::filesystem::path& path, const SamplingMask& mask);
SamplingMask load_mask(const std::filesystem::path& path);

}  // namespace ksr
