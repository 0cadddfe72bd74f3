#pragma once

#include "ksr/kspace.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ksr {

// Monotone piecewise-linear map from a tissue parameter in [0,1] to an
// intensity in [0,1].
struct ContrastMap {
  std::vector<std::pair<double, double>> knots;

  double operator()(double tissue) const;
  bool is_monotone() const;

  static ContrastMap t2_like();
  static ContrastMap flair_like();
};

// Tissue parameter used for lesions; both default maps send it above 0.8.
inline constexpr double kLesionTissue = 1.0;

struct PhantomSpec {
  Index height = 64;
  Index width = 64;
  int n_ellipses = 6;
  int n_lesions = 3;
  std::uint64_t seed = 0;
  ContrastMap t2_map = ContrastMap::t2_like();
  ContrastMap flair_map = ContrastMap::flair_like();
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct Phantom {
  Image t2;
  Image flair;
  Image lesion_mask;  // 1 on lesion pixels, 0 elsewhere
};

// Head-like phantom: scalp ring, brain ellipse, `n_ellipses` internal
// structures and `n_lesions` small bright blobs, rendered with 2×2
// supersampling. Both modalities share one geometry; only the contrast maps
// differ. Values are rounded to f32 so the raw format stores them exactly.
Phantom generate_phantom(const PhantomSpec& spec);

// Rounds every value to the nearest f32.
Image to_f32_grid(const Image& image);

struct SampleTriple {
  std::string id;
  std::uint64_t seed = 0;
  std::string mask_id;
  Image t2sub;  // f32-rounded zero_filled_recon(t2, mask)
  Image flair;
  Image t2;
  Image lesion_mask;  // empty when loaded from disk
};

using Dataset = std::vector<SampleTriple>;

std::string sample_id(std::size_t index);

// `n` triples with seeds derive_seed(spec.seed, i).
Dataset build_dataset(std::size_t n, const PhantomSpec& spec, const SamplingMask& mask, Axis phase_axis = Axis::Cols);
Dataset build_dataset(std::size_t n, const PhantomSpec& spec, const MaskConfig& mask_config,
                      Axis phase_axis = Axis::Cols);

// Writes images/<id>_{t2,flair,t2sub}.raw and manifest.jsonl under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

// Raw image format: 12-byte magic "KSR-IMAGE\0\0\0", u32 version, u32 rows,
// u32 cols, rows·cols f32 row-major; all little-endian.
void save_image(const std::filesystem::path& path, const Image& image);
Image load_image(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_image(const Image& image);
Image decode_image(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

// 8-bit quantization: round_half_away(clamp(v,0,1)·255).
std::uint8_t quantize_u8(double v);
// Binary PGM (P5) for viewing.
void export_pgm(const std::filesystem::path& path, const Image& image);
// Images placed left to right, all with equal row counts.
Image side_by_side(const std::vector<Image>& images);

struct Normalized {
  Image image;
  bool was_constant = false;
};

// Min-max scaling to [0,1]; constant input maps to zeros with the flag set.
Normalized normalize_intensity(const Image& image);

enum class Interpolation { Nearest, Bilinear };

// Resamples onto a rows × cols grid using pixel-center alignment.
Image resample(const Image& image, Index rows, Index cols, Interpolation mode = Interpolation::Bilinear);

}  // namespace ksr
