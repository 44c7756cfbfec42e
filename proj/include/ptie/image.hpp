#pragma once

// Grayscale images in [0,1], binary PGM I/O, bilinear resize, and the
// aspect-ratio scaling factor. Resize interpolates with the half-pixel
// convention and runs as two separable passes.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ptie/common.hpp"

namespace ptie {

struct ImageTensor {
  int h = 0;
  int w = 0;
  std::vector<float> pix;  // row-major, [0,1]

  float at(int y, int x) const { return pix[static_cast<size_t>(y) * w + x]; }
  float& at(int y, int x) { return pix[static_cast<size_t>(y) * w + x]; }
};

inline ImageTensor make_image(int h, int w, float fill = 0.f) {
  if (h < 1 || w < 1) throw DataError("image: dimensions must be >= 1");
  ImageTensor img;
  img.h = h;
  img.w = w;
  img.pix.assign(static_cast<size_t>(h) * w, fill);
  return img;
}

struct SampleMeta {
  int initial_h = 0;
  int initial_w = 0;
  int word_len = 0;
  double scaling_factor = 0.0;
};

// s = (final_w / final_h) * (initial_h / initial_w): how much the resize
// distorted the original aspect ratio.
inline double scaling_factor(int initial_h, int initial_w, int final_h = 32,
                             int final_w = 128) {
  if (initial_h < 1 || initial_w < 1) throw DataError("scaling_factor: empty image");
  return (static_cast<double>(final_w) / final_h) *
         (static_cast<double>(initial_h) / initial_w);
}

inline double luminance(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

namespace detail {

struct LerpTap {
  int lo, hi;
  double frac;
};

inline std::vector<LerpTap> resize_taps(int in_size, int out_size) {
  std::vector<LerpTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    const double src = (i + 0.5) * scale - 0.5;
    double f = std::floor(src);
    int lo = static_cast<int>(f);
    double frac = src - f;
    if (lo < 0) {
      lo = 0;
      frac = 0.0;
    }
    int hi = lo + 1;
    if (hi > in_size - 1) {
      hi = in_size - 1;
      frac = 0.0;
    }
    taps[i] = {lo, hi, frac};
  }
  return taps;
}

}  // namespace detail

inline ImageTensor resize_bilinear(const ImageTensor& src, int out_h, int out_w) {
  if (src.h < 1 || src.w < 1 || src.pix.empty()) throw DataError("resize: empty image");
  if (out_h < 1 || out_w < 1) throw DataError("resize: bad target size");
  const auto xt = detail::resize_taps(src.w, out_w);
  const auto yt = detail::resize_taps(src.h, out_h);

  // Horizontal pass, then vertical, in double.
  std::vector<double> mid(static_cast<size_t>(src.h) * out_w);
  for (int y = 0; y < src.h; ++y) {
    const float* row = src.pix.data() + static_cast<size_t>(y) * src.w;
    double* out = mid.data() + static_cast<size_t>(y) * out_w;
    for (int x = 0; x < out_w; ++x) {
      const auto& t = xt[x];
      out[x] = (1.0 - t.frac) * row[t.lo] + t.frac * row[t.hi];
    }
  }
  ImageTensor dst = make_image(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto& t = yt[y];
    const double* lo = mid.data() + static_cast<size_t>(t.lo) * out_w;
    const double* hi = mid.data() + static_cast<size_t>(t.hi) * out_w;
    float* out = dst.pix.data() + static_cast<size_t>(y) * out_w;
    for (int x = 0; x < out_w; ++x)
      out[x] = static_cast<float>((1.0 - t.frac) * lo[x] + t.frac * hi[x]);
  }
  return dst;
}

// ----------------------------- jitter -----------------------------

inline void clamp01(ImageTensor& img) {
  for (float& p : img.pix) p = p < 0.f ? 0.f : (p > 1.f ? 1.f : p);
}

inline void jitter_brightness(ImageTensor& img, float delta) {
  for (float& p : img.pix) p += delta;
  clamp01(img);
}

inline void jitter_contrast(ImageTensor& img, float factor) {
  for (float& p : img.pix) p = 0.5f + factor * (p - 0.5f);
  clamp01(img);
}

inline void jitter_noise(ImageTensor& img, float sigma, Rng& rng) {
  for (float& p : img.pix) p += static_cast<float>(rng.normal(0.0, sigma));
  clamp01(img);
}

// ----------------------------- PGM -----------------------------

inline void write_pgm(const std::string& path, const ImageTensor& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("pgm: cannot open '" + path + "' for writing");
  f << "P5\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> bytes(img.pix.size());
  for (size_t i = 0; i < img.pix.size(); ++i) {
    const float v = img.pix[i];
    const int q = static_cast<int>(std::lround(std::min(1.f, std::max(0.f, v)) * 255.f));
    bytes[i] = static_cast<unsigned char>(q);
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  if (!f) throw DataError("pgm: write failed for '" + path + "'");
}

inline ImageTensor read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("pgm: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P2") throw DataError("pgm: '" + path + "' is not P5/P2");
  auto next_token = [&]() -> long {
    // Skips whitespace and '#' comment lines.
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    long v = -1;
    f >> v;
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
    throw DataError("pgm: bad header in '" + path + "'");
  ImageTensor img = make_image(static_cast<int>(h), static_cast<int>(w));
  if (magic == "P5") {
    f.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(img.pix.size());
    f.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!f) throw DataError("pgm: truncated pixel data in '" + path + "'");
    for (size_t i = 0; i < bytes.size(); ++i)
      img.pix[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval);
  } else {
    for (size_t i = 0; i < img.pix.size(); ++i) {
      long v = next_token();
      if (v < 0) throw DataError("pgm: truncated pixel data in '" + path + "'");
      img.pix[i] = static_cast<float>(v) / static_cast<float>(maxval);
    }
  }
  return img;
}

}  // namespace ptie
