#include "ksr/data.hpp"

#include "ksr/io.hpp"
#include "ksr/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace ksr {

double ContrastMap::operator()(double tissue) const {
  if (knots.empty()) return tissue;
  if (tissue <= knots.front().first) return knots.front().second;
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (tissue <= knots[i].first) {
      const auto [x0, y0] = knots[i - 1];
      const auto [x1, y1] = knots[i];
      return y0 + (y1 - y0) * (tissue - x0) / (x1 - x0);
    }
  }
  return knots.back().second;
}

bool ContrastMap::is_monotone() const {
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (knots[i].first <= knots[i - 1].first || knots[i].second < knots[i - 1].second) return false;
  }
  return true;
}

ContrastMap ContrastMap::t2_like() {
  return {{{0.0, 0.0}, {0.15, 0.30}, {0.35, 0.38}, {0.5, 0.50}, {0.75, 0.80}, {1.0, 0.95}}};
}

ContrastMap ContrastMap::flair_like() {
  return {{{0.0, 0.0}, {0.15, 0.40}, {0.35, 0.48}, {0.5, 0.58}, {0.75, 0.62}, {1.0, 0.92}}};
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"height", s.height},       {"width", s.width},          {"n_ellipses", s.n_ellipses},
       {"n_lesions", s.n_lesions}, {"seed", s.seed},            {"t2_map", s.t2_map.knots},
       {"flair_map", s.flair_map.knots}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.n_ellipses = j.value("n_ellipses", s.n_ellipses);
  s.n_lesions = j.value("n_lesions", s.n_lesions);
  s.seed = j.value("seed", s.seed);
  if (j.contains("t2_map")) s.t2_map.knots = j.at("t2_map").get<std::vector<std::pair<double, double>>>();
  if (j.contains("flair_map")) s.flair_map.knots = j.at("flair_map").get<std::vector<std::pair<double, double>>>();
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx, angle;

  bool contains(double y, double x) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dy = y - cy, dx = x - cx;
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

struct Structure {
  Ellipse shape;
  double tissue;
};

struct Wave {
  double ky, kx, phase;
};

constexpr double kScalpTissue = 0.15;
constexpr double kParenchymaTissue = 0.35;
constexpr double kStructureTissues[] = {0.25, 0.5, 0.75};
// Texture shared by both modalities: three plane waves of 0.7..1.6 rad/pixel.
constexpr double kWaveMin = 0.7, kWaveMax = 1.6;
constexpr double kTextureAmp = 0.15;

}  // namespace

Image to_f32_grid(const Image& image) { return image.cast<float>().cast<double>(); }

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.n_ellipses < 1) throw ValidationError("phantom needs n_ellipses >= 1, got " + std::to_string(spec.n_ellipses));
  if (spec.n_lesions < 0) throw ValidationError("phantom n_lesions must be >= 0");
  if (spec.height < 8 || spec.width < 8) throw ValidationError("phantom extents must be at least 8x8");
  if (!spec.t2_map.is_monotone() || !spec.flair_map.is_monotone()) {
    throw ValidationError("phantom contrast maps must be monotone non-decreasing");
  }

  Rng rng(spec.seed);
  const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
  const double angle = rng.uniform(-0.15, 0.15);
  const Ellipse head{h / 2 + rng.uniform(-0.03, 0.03) * h, w / 2 + rng.uniform(-0.03, 0.03) * w,
                     rng.uniform(0.40, 0.46) * h, rng.uniform(0.34, 0.42) * w, angle};
  const double shrink = rng.uniform(0.84, 0.90);
  const Ellipse brain{head.cy, head.cx, head.ry * shrink, head.rx * shrink, angle};

  // A point inside the brain ellipse at a fraction of its radius.
  auto point_in_brain = [&](double max_radius) {
    const double r = max_radius * std::sqrt(rng.uniform());
    const double t = rng.uniform(0.0, 2 * std::numbers::pi);
    const double u = r * std::cos(t) * brain.rx, v = r * std::sin(t) * brain.ry;
    const double c = std::cos(angle), s = std::sin(angle);
    return std::pair{brain.cy + s * u + c * v, brain.cx + c * u - s * v};
  };

  std::vector<Structure> structures;
  for (int i = 0; i < spec.n_ellipses; ++i) {
    const auto [cy, cx] = point_in_brain(0.7);
    const Ellipse e{cy, cx, rng.uniform(0.05, 0.25) * h, rng.uniform(0.05, 0.25) * w,
                    rng.uniform(0.0, std::numbers::pi)};
    structures.push_back({e, kStructureTissues[rng.below(3)]});
  }

  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double k = rng.uniform(kWaveMin, kWaveMax), dir = rng.uniform(0.0, std::numbers::pi);
    waves.push_back({k * std::sin(dir), k * std::cos(dir), rng.uniform(0.0, 2 * std::numbers::pi)});
  }

  // Lesions sit entirely inside the brain ellipse and do not touch each other.
  std::vector<Ellipse> lesions;
  const double min_extent = std::min(h, w);
  for (int i = 0; i < spec.n_lesions; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const double r = rng.uniform(0.035, 0.06) * min_extent;
      const auto [cy, cx] = point_in_brain(0.85);
      const Ellipse lesion{cy, cx, r, r, 0.0};
      placed = true;
      for (int k = 0; k < 16 && placed; ++k) {
        const double t = 2 * std::numbers::pi * k / 16;
        placed = brain.contains(cy + r * std::sin(t), cx + r * std::cos(t));
      }
      for (const auto& other : lesions) {
        placed = placed && std::hypot(cy - other.cy, cx - other.cx) > r + other.ry;
      }
      if (placed) lesions.push_back(lesion);
    }
    if (!placed) {
      throw DataError("could not fit lesion " + std::to_string(i) + " inside the anatomy after 100 attempts (seed " +
                      std::to_string(spec.seed) + ")");
    }
  }

  auto tissue_at = [&](double y, double x, bool& in_lesion) {
    in_lesion = false;
    if (!head.contains(y, x)) return -1.0;
    if (!brain.contains(y, x)) return kScalpTissue;
    for (const auto& l : lesions) {
      if (l.contains(y, x)) {
        in_lesion = true;
        return kLesionTissue;
      }
    }
    double t = kParenchymaTissue;
    for (const auto& s : structures)
      if (s.shape.contains(y, x)) t = s.tissue;
    double texture = 0;
    for (const auto& wv : waves) texture += std::sin(wv.ky * y + wv.kx * x + wv.phase);
    return std::clamp(t + kTextureAmp * texture, 0.0, 0.99);
  };

  Phantom out{Image::Zero(spec.height, spec.width), Image::Zero(spec.height, spec.width),
              Image::Zero(spec.height, spec.width)};
  constexpr double kSub[] = {0.25, 0.75};
  for (Index r = 0; r < spec.height; ++r) {
    for (Index c = 0; c < spec.width; ++c) {
      double t2 = 0, flair = 0;
      int lesion_hits = 0;
      for (double sy : kSub) {
        for (double sx : kSub) {
          bool lesion = false;
          const double t = tissue_at(static_cast<double>(r) + sy, static_cast<double>(c) + sx, lesion);
          if (t >= 0) {
            t2 += spec.t2_map(t);
            flair += spec.flair_map(t);
          }
          lesion_hits += lesion;
        }
      }
      out.t2(r, c) = std::clamp(t2 / 4, 0.0, 1.0);
      out.flair(r, c) = std::clamp(flair / 4, 0.0, 1.0);
      out.lesion_mask(r, c) = lesion_hits == 4 ? 1.0 : 0.0;
    }
  }
  out.t2 = to_f32_grid(out.t2);
  out.flair = to_f32_grid(out.flair);
  return out;
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample-%05zu", index);
  return buf;
}

Dataset build_dataset(std::size_t n, const PhantomSpec& spec, const SamplingMask& mask, Axis phase_axis) {
  const Index lines = phase_axis == Axis::Cols ? spec.width : spec.height;
  if (mask.length != lines) {
    throw ValidationError("mask has " + std::to_string(mask.length) + " lines but phantoms have " +
                          std::to_string(lines) + " along the phase-encoding axis");
  }
  Dataset data;
  data.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PhantomSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    Phantom p = generate_phantom(s);
    SampleTriple triple;
    triple.id = sample_id(i);
    triple.seed = s.seed;
    triple.mask_id = mask.id();
    triple.t2sub = to_f32_grid(zero_filled_recon(p.t2, mask, phase_axis));
    triple.flair = std::move(p.flair);
    triple.t2 = std::move(p.t2);
    triple.lesion_mask = std::move(p.lesion_mask);
    data.push_back(std::move(triple));
  }
  return data;
}

Dataset build_dataset(std::size_t n, const PhantomSpec& spec, const MaskConfig& mask_config, Axis phase_axis) {
  const Index lines = phase_axis == Axis::Cols ? spec.width : spec.height;
  return build_dataset(n, spec, make_mask(lines, mask_config), phase_axis);
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "images");
  std::string manifest;
  for (const auto& s : data) {
    nlohmann::json paths;
    for (const auto& [role, image] : {std::pair{"t2", &s.t2}, {"flair", &s.flair}, {"t2sub", &s.t2sub}}) {
      const std::string rel = "images/" + s.id + "_" + role + ".raw";
      save_image(dir / rel, *image);
      paths[role] = rel;
    }
    nlohmann::json line = {{"id", s.id}, {"seed", s.seed}, {"mask_id", s.mask_id}, {"paths", paths}};
    manifest += line.dump() + "\n";
  }
  io::write_text_atomic(dir / "manifest.jsonl", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.jsonl";
  std::istringstream in(io::read_text(manifest_path));
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SampleTriple s;
      s.id = j.at("id").get<std::string>();
      s.seed = j.at("seed").get<std::uint64_t>();
      s.mask_id = j.at("mask_id").get<std::string>();
      const auto& paths = j.at("paths");
      s.t2 = load_image(dir / paths.at("t2").get<std::string>());
      s.flair = load_image(dir / paths.at("flair").get<std::string>());
      s.t2sub = load_image(dir / paths.at("t2sub").get<std::string>());
      data.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return data;
}

namespace {
constexpr char kMagic[12] = {'K', 'S', 'R', '-', 'I', 'M', 'A', 'G', 'E', 0, 0, 0};
constexpr std::uint32_t kRawVersion = 1;
constexpr std::size_t kHeaderBytes = 16;
constexpr std::size_t kPayloadOffset = kHeaderBytes + 8;
}  // namespace

std::vector<std::uint8_t> encode_image(const Image& image) {
  io::Bytes out(kMagic, kMagic + sizeof kMagic);
  io::put_u32(out, kRawVersion);
  io::put_u32(out, static_cast<std::uint32_t>(image.rows()));
  io::put_u32(out, static_cast<std::uint32_t>(image.cols()));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) io::put_f32(out, static_cast<float>(image.data()[i]));
  return out;
}

Image decode_image(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < kPayloadOffset) {
    throw DataError(source + ": header truncated at byte " + std::to_string(bytes.size()) + ", expected " +
                    std::to_string(kPayloadOffset) + " header bytes");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw DataError(source + ": bad magic at byte offset 0");
  const std::span<const std::uint8_t> view(bytes);
  const std::uint32_t version = io::get_u32(view, 12);
  if (version != kRawVersion) {
    throw DataError(source + ": unsupported version " + std::to_string(version) + " at byte offset 12");
  }
  const std::uint64_t rows = io::get_u32(view, 16), cols = io::get_u32(view, 20);
  const std::uint64_t expected = kPayloadOffset + 4 * rows * cols;
  if (bytes.size() != expected) {
    throw DataError(source + ": header at byte offset 16 declares " + std::to_string(rows) + "x" +
                    std::to_string(cols) + " (" + std::to_string(expected) + " bytes) but file has " +
                    std::to_string(bytes.size()) + " bytes");
  }
  Image image(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < image.size(); ++i) image.data()[i] = io::get_f32(view, kPayloadOffset + 4 * static_cast<std::size_t>(i));
  return image;
}

void save_image(const std::filesystem::path& path, const Image& image) {
  io::write_file_atomic(path, encode_image(image));
}

Image load_image(const std::filesystem::path& path) { return decode_image(io::read_file(path), path.string()); }

std::uint8_t quantize_u8(double v) {
  return static_cast<std::uint8_t>(round_half_away(std::clamp(v, 0.0, 1.0) * 255.0));
}

void export_pgm(const std::filesystem::path& path, const Image& image) {
  const std::string header = "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n";
  io::Bytes bytes(header.begin(), header.end());
  for (Index r = 0; r < image.rows(); ++r)
    for (Index c = 0; c < image.cols(); ++c) bytes.push_back(quantize_u8(image(r, c)));
  io::write_file_atomic(path, bytes);
}

Image side_by_side(const std::vector<Image>& images) {
  if (images.empty()) return {};
  const Index rows = images.front().rows();
  Index cols = 0;
  for (const auto& im : images) {
    if (im.rows() != rows) throw ValidationError("side_by_side: images differ in row count");
    cols += im.cols();
  }
  Image out(rows, cols);
  Index offset = 0;
  for (const auto& im : images) {
    out.middleCols(offset, im.cols()) = im;
    offset += im.cols();
  }
  return out;
}

Normalized normalize_intensity(const Image& image) {
  if (image.size() == 0) return {image, true};
  const double lo = image.minCoeff(), hi = image.maxCoeff();
  if (!(hi > lo)) return {Image::Zero(image.rows(), image.cols()), true};
  return {(image - lo) / (hi - lo), false};
}

Image resample(const Image& image, Index rows, Index cols, Interpolation mode) {
  if (rows < 1 || cols < 1 || image.size() == 0) throw ValidationError("resample: empty source or target grid");
  Image out(rows, cols);
  const double sy = static_cast<double>(image.rows()) / static_cast<double>(rows);
  const double sx = static_cast<double>(image.cols()) / static_cast<double>(cols);
  for (Index r = 0; r < rows; ++r) {
    const double y = (static_cast<double>(r) + 0.5) * sy - 0.5;
    for (Index c = 0; c < cols; ++c) {
      const double x = (static_cast<double>(c) + 0.5) * sx - 0.5;
      if (mode == Interpolation::Nearest) {
        const Index ny = std::clamp<Index>(round_half_away(y), 0, image.rows() - 1);
        const Index nx = std::clamp<Index>(round_half_away(x), 0, image.cols() - 1);
        out(r, c) = image(ny, nx);
        continue;
      }
      const double yc = std::clamp(y, 0.0, static_cast<double>(image.rows() - 1));
      const double xc = std::clamp(x, 0.0, static_cast<double>(image.cols() - 1));
      const Index y0 = static_cast<Index>(yc), x0 = static_cast<Index>(xc);
      const Index y1 = std::min(y0 + 1, image.rows() - 1), x1 = std::min(x0 + 1, image.cols() - 1);
      const double fy = yc - static_cast<double>(y0), fx = xc - static_cast<double>(x0);
      out(r, c) = (1 - fy) * ((1 - fx) * image(y0, x0) + fx * image(y0, x1)) +
                  fy * ((1 - fx) * image(y1, x0) + fx * image(y1, x1));
    }
  }
  return out;
}

}  // namespace ksr
