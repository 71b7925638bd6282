#include "dptail/mnist_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <zlib.h>

#include "dptail/rng.hpp"

namespace dptail {
namespace {

constexpr std::uint64_t kTagStratify = 0x57a7u;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

std::vector<std::uint8_t> read_all_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Big-endian reader over a decoded byte buffer; errors carry the offset.
struct Cursor {
  const std::string& path;
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t count, const char* what) const {
    if (count > bytes.size() - pos) {
      std::ostringstream os;
      os << "truncated " << what << " at offset " << pos << " (need " << count
         << " bytes, have " << bytes.size() - pos << ")";
      fail(path, os.str());
    }
  }

  std::uint32_t u32be(const char* what) {
    need(4, what);
    const std::uint32_t v = (std::uint32_t{bytes[pos]} << 24) |
                            (std::uint32_t{bytes[pos + 1]} << 16) |
                            (std::uint32_t{bytes[pos + 2]} << 8) |
                            std::uint32_t{bytes[pos + 3]};
    pos += 4;
    return v;
  }
};

std::vector<std::uint8_t> maybe_gunzip(const std::string& path,
                                       std::vector<std::uint8_t> bytes) {
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) {
    try {
      return gunzip_bytes(bytes);
    } catch (const std::exception& e) {
      fail(path, e.what());
    }
  }
  return bytes;
}

void check_magic(const std::string& path, std::uint32_t got, std::uint32_t want) {
  if (got != want) {
    std::ostringstream os;
    os << "bad magic 0x" << std::hex << got << " (want 0x" << want << ")";
    fail(path, os.str());
  }
}

// Patch slot of pixel (r, c): P=1 whole image, P=2 left/right halves,
// P=4 quadrants ordered top-left, top-right, bottom-left, bottom-right.
std::pair<int, int> patch_slot(int P, int r, int c) {
  switch (P) {
    case 1: return {0, r * 28 + c};
    case 2: return {c / 14, r * 14 + c % 14};
    default: return {(r / 14) * 2 + c / 14, (r % 14) * 14 + c % 14};
  }
}

void check_patch_count(int P) {
  if (P != 1 && P != 2 && P != 4)
    throw std::invalid_argument("patch count must be 1, 2, or 4, got " + std::to_string(P));
}

}  // namespace

std::vector<std::uint8_t> gunzip_bytes(const std::vector<std::uint8_t>& gz) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK)
    throw std::runtime_error("gunzip: inflateInit2 failed");
  std::vector<std::uint8_t> out(std::max<std::size_t>(4 * gz.size(), std::size_t{1} << 16));
  zs.next_in = const_cast<Bytef*>(gz.data());
  zs.avail_in = static_cast<uInt>(gz.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (zs.total_out == out.size()) out.resize(2 * out.size());
    zs.next_out = out.data() + zs.total_out;
    zs.avail_out = static_cast<uInt>(out.size() - zs.total_out);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("gunzip: corrupt stream (zlib status " + std::to_string(rc) + ")");
    }
  }
  out.resize(zs.total_out);
  inflateEnd(&zs);
  return out;
}

RawImageSet load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<std::uint8_t> ib = maybe_gunzip(images_path, read_all_bytes(images_path));
  const std::vector<std::uint8_t> lb = maybe_gunzip(labels_path, read_all_bytes(labels_path));

  Cursor ic{images_path, ib};
  check_magic(images_path, ic.u32be("image header"), 0x00000803u);
  const std::uint32_t n_img = ic.u32be("image header");
  const std::uint32_t rows = ic.u32be("image header");
  const std::uint32_t cols = ic.u32be("image header");
  if (rows != kMnistSide || cols != kMnistSide) {
    std::ostringstream os;
    os << "image dims " << rows << "x" << cols << " (want 28x28)";
    fail(images_path, os.str());
  }
  const std::size_t pixel_bytes = std::size_t{n_img} * kMnistPixels;
  ic.need(pixel_bytes, "image data");
  if (ib.size() != ic.pos + pixel_bytes) fail(images_path, "trailing bytes after image data");

  Cursor lc{labels_path, lb};
  check_magic(labels_path, lc.u32be("label header"), 0x00000801u);
  const std::uint32_t n_lab = lc.u32be("label header");
  lc.need(n_lab, "label data");
  if (lb.size() != lc.pos + n_lab) fail(labels_path, "trailing bytes after label data");
  if (n_img != n_lab) {
    std::ostringstream os;
    os << "label count " << n_lab << " does not match image count " << n_img;
    fail(labels_path, os.str());
  }

  RawImageSet raw;
  raw.n = static_cast<long>(n_img);
  raw.images.assign(ib.begin() + static_cast<std::ptrdiff_t>(ic.pos), ib.end());
  raw.labels.assign(lb.begin() + static_cast<std::ptrdiff_t>(lc.pos), lb.end());
  for (std::size_t i = 0; i < raw.labels.size(); ++i)
    if (raw.labels[i] > 9) {
      std::ostringstream os;
      os << "label value " << int{raw.labels[i]} << " out of range at offset " << lc.pos + i;
      fail(labels_path, os.str());
    }
  return raw;
}

Dataset to_dataset(const RawImageSet& raw, int patches_P, long subsample_per_class,
                   std::uint64_t seed) {
  check_patch_count(patches_P);
  if (raw.n <= 0) throw std::invalid_argument("to_dataset: empty image set");
  if (raw.images.size() != std::size_t(raw.n) * kMnistPixels ||
      raw.labels.size() != std::size_t(raw.n))
    throw std::invalid_argument("to_dataset: inconsistent raw buffer sizes");
  if (subsample_per_class < 0)
    throw std::invalid_argument("to_dataset: negative subsample_per_class");

  constexpr int K = 10;
  std::vector<long> keep;
  if (subsample_per_class == 0) {
    keep.resize(static_cast<std::size_t>(raw.n));
    std::iota(keep.begin(), keep.end(), 0L);
  } else {
    std::vector<std::vector<long>> by_class(K);
    for (long i = 0; i < raw.n; ++i) by_class[raw.labels[i]].push_back(i);
    for (int k = 0; k < K; ++k) {
      auto& ids = by_class[k];
      if (static_cast<long>(ids.size()) < subsample_per_class) {
        std::ostringstream os;
        os << "to_dataset: class " << k << " has " << ids.size() << " images, need "
           << subsample_per_class;
        throw std::invalid_argument(os.str());
      }
      // Partial Fisher-Yates: the first subsample_per_class slots become a
      // uniform draw without replacement.
      Rng rng(seed_chain(seed, kTagStratify, static_cast<std::uint64_t>(k)));
      for (long i = 0; i < subsample_per_class; ++i) {
        const long j = i + static_cast<long>(rng.below(ids.size() - i));
        std::swap(ids[i], ids[j]);
      }
      keep.insert(keep.end(), ids.begin(), ids.begin() + subsample_per_class);
    }
    std::sort(keep.begin(), keep.end());
  }

  Dataset ds;
  ds.K = K;
  ds.P = patches_P;
  ds.d = kMnistPixels / patches_P;
  ds.seed = seed;
  ds.synthetic = false;
  ds.class_counts.assign(K, 0);
  ds.samples.reserve(keep.size());
  for (long idx : keep) {
    Sample s;
    s.label = raw.labels[idx];
    s.signal_pos = -1;
    s.patches.resize(kMnistPixels);
    const std::uint8_t* px = raw.images.data() + static_cast<std::size_t>(idx) * kMnistPixels;
    for (int r = 0; r < kMnistSide; ++r)
      for (int c = 0; c < kMnistSide; ++c) {
        const auto [p, off] = patch_slot(patches_P, r, c);
        s.patches[static_cast<std::size_t>(p) * ds.d + off] = px[r * kMnistSide + c] / 255.0;
      }
    ++ds.class_counts[s.label];
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<double> reassemble_image(const Sample& s, int patches_P) {
  check_patch_count(patches_P);
  if (s.patches.size() != kMnistPixels)
    throw std::invalid_argument("reassemble_image: sample is not a 784-pixel image");
  const int d = kMnistPixels / patches_P;
  std::vector<double> img(kMnistPixels);
  for (int r = 0; r < kMnistSide; ++r)
    for (int c = 0; c < kMnistSide; ++c) {
      const auto [p, off] = patch_slot(patches_P, r, c);
      img[r * kMnistSide + c] = s.patches[static_cast<std::size_t>(p) * d + off];
    }
  return img;
}

}  // namespace dptail
