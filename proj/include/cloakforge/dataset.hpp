#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "cloakforge/image_io.hpp"
#include "cloakforge/rng.hpp"

namespace cloakforge {

// A procedural "identity": one glyph family. Everything here is fixed per
// subject; pose, scale, brightness and background vary per image.
struct ToyIdentity {
  int shape = 0;
  std::array<float, 3> fill{};
  std::array<float, 3> accent{};
  double stripe_angle = 0;
  double stripe_freq = 2;
  int pattern = 0;
  double size = 0.6;
};

inline constexpr int kToyShapes = 6;
inline constexpr int kToyPatterns = 3;

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (i % 6) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

// Identity `index` of the family keyed by `seed`.
inline ToyIdentity make_identity(std::uint64_t seed, int index) {
  Rng rng(derive_seed(derive_seed(seed, "identity"), static_cast<std::uint64_t>(index)));
  ToyIdentity id;
  id.shape = rng.uniform_int(0, kToyShapes - 1);
  id.pattern = rng.uniform_int(0, kToyPatterns - 1);
  const double hue = rng.uniform();
  id.fill = hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0));
  id.accent = hsv_to_rgb(hue + rng.uniform(0.25, 0.75), rng.uniform(0.5, 1.0), rng.uniform(0.2, 0.6));
  id.stripe_angle = rng.uniform(0.0, std::numbers::pi);
  id.stripe_freq = rng.uniform_int(2, 4);
  id.size = rng.uniform(0.55, 0.75);
  return id;
}

// Signed distance to the glyph outline in unit glyph coordinates.
inline double glyph_sdf(int shape, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  switch (shape) {
    case 0: return std::hypot(x, y) - 1.0;
    case 1: return std::max(ax, ay) - 0.85;
    case 2: return (ax + ay) / std::numbers::sqrt2 - 0.8;
    case 3: return std::max(ax * 0.866 + y * 0.5, -y) - 0.5;
    case 4: return std::abs(std::hypot(x, y) - 0.7) - 0.3;
    default: return std::min(std::max(ax - 0.35, ay - 1.0), std::max(ax - 1.0, ay - 0.35));
  }
}

inline Image render_toy_image(const ToyIdentity& id, Rng& rng, int size = 32) {
  const double cx = rng.uniform(-0.12, 0.12), cy = rng.uniform(-0.12, 0.12);
  const double scale = id.size * rng.uniform(0.88, 1.12);
  const double rot = rng.uniform(-0.3, 0.3);
  const double bright = rng.uniform(0.88, 1.08);
  const auto bg_top = hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.3, 0.7));
  const auto bg_bottom = hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.3, 0.7));
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double sa = std::cos(id.stripe_angle), sb = std::sin(id.stripe_angle);
  constexpr int kSuper = 3;
  Image img(Shape{1, 3, size, size});
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = ((px + (sx + 0.5) / kSuper) / size) * 2 - 1;
          const double v = ((py + (sy + 0.5) / kSuper) / size) * 2 - 1;
          const double lx = ((u - cx) * cr + (v - cy) * sr) / scale;
          const double ly = (-(u - cx) * sr + (v - cy) * cr) / scale;
          std::array<double, 3> col;
          const double mix = (v + 1) / 2;
          for (int c = 0; c < 3; ++c) col[c] = bg_top[c] * (1 - mix) + bg_bottom[c] * mix;
          if (glyph_sdf(id.shape, lx, ly) < 0) {
            bool accent = false;
            const double along = lx * sa + ly * sb;
            if (id.pattern == 0) {
              accent = std::sin(along * id.stripe_freq * std::numbers::pi) > 0.3;
            } else if (id.pattern == 1) {
              accent = std::hypot(std::remainder(lx * id.stripe_freq, 1.0), std::remainder(ly * id.stripe_freq, 1.0)) <
                       0.28;
            } else {
              accent = along > 0.15;
            }
            for (int c = 0; c < 3; ++c) col[c] = accent ? id.accent[c] : id.fill[c];
          }
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double val = acc[c] / (kSuper * kSuper) * bright + rng.normal(0.0, 0.01);
        img.at(0, c, py, px) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return img;
}

// Image j of subject i. Each image has its own stream, so a larger set always
// extends a smaller one.
inline Image toy_image(std::uint64_t seed, int subject, int image, int size = 32) {
  Rng rng(derive_seed(derive_seed(derive_seed(seed, "image"), static_cast<std::uint64_t>(subject)),
                      static_cast<std::uint64_t>(image)));
  return render_toy_image(make_identity(seed, subject), rng, size);
}

inline std::vector<Image> toy_subject_images(std::uint64_t seed, int subject, int count, int first = 0) {
  std::vector<Image> out;
  for (int j = first; j < first + count; ++j) out.push_back(toy_image(seed, subject, j));
  return out;
}

inline std::string subject_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "subject_%02d", i);
  return buf;
}

// Writes n_subjects folders of 8-bit PNGs; returns the file count.
inline int make_toy_dataset(int n_subjects, int images_per_subject, std::uint64_t seed,
                            const std::filesystem::path& out_path) {
  if (n_subjects < 2) throw std::invalid_argument("toy dataset needs at least 2 subjects");
  if (images_per_subject < 1) throw std::invalid_argument("toy dataset needs at least 1 image per subject");
  std::error_code ec;
  std::filesystem::create_directories(out_path, ec);
  if (ec) throw ImageIoError("cannot create " + out_path.string() + ": " + ec.message());
  int written = 0;
  for (int i = 0; i < n_subjects; ++i) {
    const auto dir = out_path / subject_dir_name(i);
    for (int j = 0; j < images_per_subject; ++j) {
      char name[32];
      std::snprintf(name, sizeof(name), "img_%03d.png", j);
      write_png(dir / name, toy_image(seed, i, j));
      ++written;
    }
  }
  return written;
}

struct SubjectSplit {
  std::string subject;
  std::vector<Image> reference;    // X_A: clean, for surrogate training
  std::vector<Image> protect;      // X_db: to be perturbed
  std::vector<Image> extra_clean;  // clean images for uncontrolled mixing

  std::vector<Image> all_clean() const {
    std::vector<Image> out = reference;
    out.insert(out.end(), protect.begin(), protect.end());
    out.insert(out.end(), extra_clean.begin(), extra_clean.end());
    return out;
  }
};

struct IngestResult {
  std::vector<SubjectSplit> subjects;
  std::vector<std::string> warnings;
};

struct IngestOptions {
  int image_size = 32;
  int channels = 3;
  int per_split = 4;
};

inline bool is_png(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

// One folder per subject; the first 3 * per_split PNGs in lexicographic
// filename order are center-cropped, resized and split in that order.
inline IngestResult ingest_dataset(const std::filesystem::path& root, IngestOptions opts = {}) {
  IngestResult result;
  if (!std::filesystem::is_directory(root)) {
    result.warnings.push_back("dataset directory " + root.string() + " does not exist");
    return result;
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  const int need = 3 * opts.per_split;
  for (const auto& dir : dirs) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.is_regular_file() && is_png(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
    const std::string id = dir.filename().string();
    if (static_cast<int>(files.size()) < need) {
      result.warnings.push_back("skipping subject " + id + ": " + std::to_string(files.size()) + " images, need " +
                                std::to_string(need));
      continue;
    }
    SubjectSplit split;
    split.subject = id;
    for (int i = 0; i < need; ++i) {
      Image img = center_crop_resize(to_channels(read_png(files[i]), opts.channels), opts.image_size);
      auto& dst = i < opts.per_split ? split.reference : (i < 2 * opts.per_split ? split.protect : split.extra_clean);
      dst.push_back(clamp01(std::move(img)));
    }
    result.subjects.push_back(std::move(split));
  }
  if (result.subjects.empty() && result.warnings.empty()) {
    result.warnings.push_back("no subject folders found in " + root.string());
  }
  return result;
}

}  // namespace cloakforge
