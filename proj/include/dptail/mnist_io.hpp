#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dptail/datagen.hpp"

namespace dptail {

inline constexpr int kMnistSide = 28;
inline constexpr int kMnistPixels = kMnistSide * kMnistSide;

// Raw image/label pair exactly as stored in an IDX file pair.
struct RawImageSet {
  long n = 0;
  std::vector<std::uint8_t> images;  // n * 784 bytes, row-major per image
  std::vector<std::uint8_t> labels;  // n bytes, each in [0, 9]
};

// Decompresses a gzip stream (zlib inflate with the gzip wrapper).
std::vector<std::uint8_t> gunzip_bytes(const std::vector<std::uint8_t>& gz);

// Reads a big-endian IDX image/label file pair.  Either file may be
// gzip-compressed (detected by the 1f 8b prefix).  Throws std::runtime_error
// naming the file and byte offset on bad magic, wrong dims, truncation,
// image/label count mismatch, or out-of-range label values.
RawImageSet load_idx(const std::string& images_path, const std::string& labels_path);

// Normalizes pixels to [0,1] and splits each image into P flat patches:
// P=1 whole image (d=784), P=2 left/right 28x14 halves (d=392), P=4 14x14
// quadrants (d=196).  subsample_per_class > 0 keeps a stratified draw of
// exactly that many images per class under the given seed (0 keeps all);
// samples are emitted in ascending file order with signal_pos marked absent.
Dataset to_dataset(const RawImageSet& raw, int patches_P, long subsample_per_class,
                   std::uint64_t seed);

// Inverse of the patch split for one sample: the 784 normalized pixels.
std::vector<double> reassemble_image(const Sample& s, int patches_P);

}  // namespace dptail
