#pragma once

// Row-major patch extraction. Both paper resolutions (4x8 and 8x4) tile a
// 32x128 input into 128 patches of 32 values, which is what lets the expert
// linear layers share their input width.

#include <vector>

#include "ptie/image.hpp"

namespace ptie {

struct PatchResolution {
  int h = 0;
  int w = 0;

  int size() const { return h * w; }
  bool operator==(const PatchResolution& o) const { return h == o.h && w == o.w; }
};

struct PatchSeq {
  PatchResolution resolution;
  int64_t len = 0;                // number of patches
  std::vector<float> values;      // [len, size], both levels row-major

  int64_t size() const { return resolution.size(); }
};

inline PatchSeq patchify(const ImageTensor& img, PatchResolution res) {
  if (res.h < 1 || res.w < 1) throw ConfigError("patchify: bad resolution");
  if (img.h % res.h != 0 || img.w % res.w != 0)
    throw ShapeError("patchify: image " + std::to_string(img.h) + "x" +
                     std::to_string(img.w) + " not divisible by patch " +
                     std::to_string(res.h) + "x" + std::to_string(res.w));
  const int gh = img.h / res.h;
  const int gw = img.w / res.w;
  PatchSeq seq;
  seq.resolution = res;
  seq.len = static_cast<int64_t>(gh) * gw;
  seq.values.resize(seq.len * res.size());
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      float* patch = seq.values.data() + (static_cast<int64_t>(gy) * gw + gx) * res.size();
      for (int r = 0; r < res.h; ++r)
        for (int c = 0; c < res.w; ++c)
          patch[r * res.w + c] = img.at(gy * res.h + r, gx * res.w + c);
    }
  }
  return seq;
}

inline ImageTensor unpatchify(const PatchSeq& seq, int img_h, int img_w) {
  const PatchResolution res = seq.resolution;
  if (img_h % res.h != 0 || img_w % res.w != 0)
    throw ShapeError("unpatchify: image not divisible by patch");
  const int gh = img_h / res.h;
  const int gw = img_w / res.w;
  if (static_cast<int64_t>(gh) * gw != seq.len)
    throw ShapeError("unpatchify: patch count mismatch");
  ImageTensor img = make_image(img_h, img_w);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const float* patch =
          seq.values.data() + (static_cast<int64_t>(gy) * gw + gx) * res.size();
      for (int r = 0; r < res.h; ++r)
        for (int c = 0; c < res.w; ++c)
          img.at(gy * res.h + r, gx * res.w + c) = patch[r * res.w + c];
    }
  }
  return img;
}

// (pix - mean) / std, applied before patchifying model inputs.
inline ImageTensor standardize(const ImageTensor& img, float mean = 0.5f, float std = 0.5f) {
  ImageTensor out = img;
  for (float& p : out.pix) p = (p - mean) / std;
  return out;
}

}  // namespace ptie
