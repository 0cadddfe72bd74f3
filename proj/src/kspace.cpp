#include "ksr/kspace.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace ksr {

namespace {

using Line = std::vector<std::complex<double>>;

// Transforms every row, then every column, of `grid` in place.
void transform_2d(ComplexGrid& grid, bool inverse) {
  Eigen::FFT<double> fft;
  Line in, out;
  in.resize(static_cast<std::size_t>(grid.cols()));
  for (Index r = 0; r < grid.rows(); ++r) {
    for (Index c = 0; c < grid.cols(); ++c) in[c] = grid(r, c);
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    for (Index c = 0; c < grid.cols(); ++c) grid(r, c) = out[c];
  }
  in.resize(static_cast<std::size_t>(grid.rows()));
  for (Index c = 0; c < grid.cols(); ++c) {
    for (Index r = 0; r < grid.rows(); ++r) in[r] = grid(r, c);
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    for (Index r = 0; r < grid.rows(); ++r) grid(r, c) = out[r];
  }
}

// Frequency k (0 = DC) lives at (k + n/2) mod n in the centered layout.
ComplexGrid center_spectrum(const ComplexGrid& raw) {
  const Index h = raw.rows(), w = raw.cols();
  ComplexGrid out(h, w);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) out((r + h / 2) % h, (c + w / 2) % w) = raw(r, c);
  return out;
}

ComplexGrid uncenter_spectrum(const ComplexGrid& centered) {
  const Index h = centered.rows(), w = centered.cols();
  ComplexGrid out(h, w);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) out(r, c) = centered((r + h / 2) % h, (c + w / 2) % w);
  return out;
}

std::string format_real(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

}  // namespace

KSpace fft2(const Image& image, Axis phase_axis) {
  if (!image.allFinite()) throw ValidationError("fft2: image contains non-finite values");
  ComplexGrid grid = image.cast<std::complex<double>>();
  transform_2d(grid, false);
  grid /= std::sqrt(static_cast<double>(image.size()));
  return {center_spectrum(grid), phase_axis};
}

Image ifft2(const KSpace& kspace, double& max_imag) {
  ComplexGrid grid = uncenter_spectrum(kspace.data);
  transform_2d(grid, true);
  // Eigen's inverse already divides by n per axis.
  grid *= std::sqrt(static_cast<double>(grid.size()));
  max_imag = grid.size() ? grid.imag().abs().maxCoeff() : 0.0;
  return grid.real();
}

Image ifft2(const KSpace& kspace) {
  double ignored = 0;
  return ifft2(kspace, ignored);
}

std::string to_string(MaskKind kind) { return kind == MaskKind::Center ? "center" : "custom"; }

MaskKind parse_mask_kind(std::string_view text) {
  if (text == "center") return MaskKind::Center;
  if (text == "custom") return MaskKind::Custom;
  throw ValidationError("unknown mask kind '" + std::string(text) + "' (expected center|custom)");
}

void MaskConfig::validate() const {
  if (!std::isfinite(factor) || factor < 1.0) {
    throw ValidationError("mask factor must be >= 1, got " + format_real(factor));
  }
  if (!std::isfinite(center_fraction) || center_fraction <= 0.0 || center_fraction > 1.0) {
    throw ValidationError("mask center fraction must be in (0, 1], got " + format_real(center_fraction));
  }
  if (kind == MaskKind::Center && center_fraction != 1.0) {
    throw ValidationError("center masks keep all samples in the center block; center fraction must be 1, got " +
                          format_real(center_fraction));
  }
}

bool operator==(const MaskConfig& a, const MaskConfig& b) {
  return a.factor == b.factor && a.center_fraction == b.center_fraction && a.kind == b.kind;
}

Index round_half_away(double x) { return static_cast<Index>(std::round(x)); }

bool SamplingMask::contains(Index line) const { return std::binary_search(kept.begin(), kept.end(), line); }

std::string SamplingMask::id() const {
  return to_string(config.kind) + "-N" + std::to_string(length) + "-k" + format_real(config.factor) + "-c" +
         format_real(config.center_fraction);
}

SamplingMask make_mask(Index n_lines, const MaskConfig& config) {
  config.validate();
  if (n_lines < 4) throw ValidationError("mask needs at least 4 lines, got " + std::to_string(n_lines));
  const Index n_keep = round_half_away(static_cast<double>(n_lines) / config.factor);
  if (n_keep < 2) {
    throw ValidationError("mask keeps " + std::to_string(n_keep) + " of " + std::to_string(n_lines) +
                          " lines; at least 2 required");
  }
  const Index n_center = std::clamp<Index>(round_half_away(config.center_fraction * static_cast<double>(n_keep)), 1, n_keep);
  const Index start = n_lines / 2 - n_center / 2;

  std::vector<char> used(static_cast<std::size_t>(n_lines), 0);
  for (Index i = start; i < start + n_center; ++i) used[i] = 1;

  const Index n_outer = n_keep - n_center;
  if (n_outer > 0) {
    std::vector<Index> complement;
    for (Index i = 0; i < n_lines; ++i)
      if (!used[i]) complement.push_back(i);
    const Index c = static_cast<Index>(complement.size());
    std::vector<char> rank_used(complement.size(), 0);
    const double spacing = static_cast<double>(c) / static_cast<double>(n_outer);
    for (Index j = 0; j < n_outer; ++j) {
      const double target = (static_cast<double>(j) + 0.5) * spacing - 0.5;
      Index best = -1;
      double best_dist = std::numeric_limits<double>::infinity();
      for (Index r = 0; r < c; ++r) {
        if (rank_used[r]) continue;
        const double d = std::abs(static_cast<double>(r) - target);
        if (d < best_dist) {  // strict: lower rank wins ties
          best_dist = d;
          best = r;
        }
      }
      rank_used[best] = 1;
      used[complement[best]] = 1;
    }
  }

  SamplingMask mask{n_lines, {}, config};
  for (Index i = 0; i < n_lines; ++i)
    if (used[i]) mask.kept.push_back(i);
  return mask;
}

KSpace apply_mask(const KSpace& kspace, const SamplingMask& mask) {
  if (mask.length != kspace.lines()) {
    throw ValidationError("mask has " + std::to_string(mask.length) + " lines but the phase-encoding axis has " +
                          std::to_string(kspace.lines()));
  }
  KSpace out{ComplexGrid::Zero(kspace.rows(), kspace.cols()), kspace.phase_axis};
  for (Index line : mask.kept) {
    if (kspace.phase_axis == Axis::Cols) {
      out.data.col(line) = kspace.data.col(line);
    } else {
      out.data.row(line) = kspace.data.row(line);
    }
  }
  return out;
}

Image zero_filled_recon(const Image& image, const SamplingMask& mask, Axis phase_axis) {
  return ifft2(apply_mask(fft2(image, phase_axis), mask)).cwiseMax(0.0).cwiseMin(1.0);
}

std::string format_mask(const SamplingMask& mask) {
  std::string out = std::to_string(mask.length) + " " + format_real(mask.config.factor) + " " +
                    to_string(mask.config.kind) + " " + format_real(mask.config.center_fraction) + "\n";
  for (std::size_t i = 0; i < mask.kept.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(mask.kept[i]);
  }
  out += '\n';
  return out;
}

SamplingMask parse_mask(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string header, body;
  if (!std::getline(in, header)) throw DataError("mask text is empty");
  std::getline(in, body);

  std::istringstream hs(header);
  SamplingMask mask;
  std::string kind, factor, fraction;
  if (!(hs >> mask.length >> factor >> kind >> fraction)) {
    throw DataError("mask header must read 'N k kind center_fraction', got '" + header + "'");
  }
  auto parse_real = [&](const std::string& s) {
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("bad number '" + s + "' in mask header");
    return v;
  };
  try {
    mask.config = {parse_real(factor), parse_real(fraction), parse_mask_kind(kind)};
  } catch (const ValidationError& e) {
    throw DataError(e.what());
  }

  std::istringstream bs(body);
  Index line = 0;
  while (bs >> line) {
    if (line < 0 || line >= mask.length) {
      throw DataError("mask line " + std::to_string(line) + " outside [0, " + std::to_string(mask.length) + ")");
    }
    if (!mask.kept.empty() && line <= mask.kept.back()) throw DataError("mask lines must be strictly increasing");
    mask.kept.push_back(line);
  }
  if (!bs.eof()) throw DataError("non-numeric entry in mask line list");
  if (mask.kept.empty()) throw DataError("mask keeps no lines");
  return mask;
}

void save_mask(const std::filesystem::path& path, const SamplingMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write mask to " + path.string());
  out << format_mask(mask);
}

SamplingMask load_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read mask " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_mask(ss.str());
}

}  // namespace ksr
