#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/rng.hpp"
#include "lcforge/tensor.hpp"

namespace lcforge {

/// Images stay in their on-disk byte form; normalization to real values
/// happens per batch. channel_mean/channel_std are in [0,1] units and come
/// from the train split that feeds a run.
struct Dataset {
  int64_t count = 0;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t num_classes = 0;
  std::vector<uint8_t> images;  // count * channels * height * width
  std::vector<int32_t> labels;
  std::vector<double> channel_mean, channel_std;

  int64_t sample_size() const { return channels * height * width; }

  /// First k samples; channel stats are intentionally dropped so callers
  /// recompute them for the subset they actually train on.
  Dataset head(int64_t k) const {
    if (k < 1 || k > count) {
      throw ValidationError("subset size " + std::to_string(k) + " out of range [1," +
                            std::to_string(count) + "]");
    }
    Dataset out = *this;
    out.count = k;
    out.images.assign(images.begin(), images.begin() + k * sample_size());
    out.labels.assign(labels.begin(), labels.begin() + k);
    out.channel_mean.clear();
    out.channel_std.clear();
    return out;
  }
};

/// Per-channel mean/std over [0,1]-scaled pixels. A constant channel gets
/// std 1 so normalization stays invertible.
inline void compute_channel_stats(Dataset& ds) {
  ds.channel_mean.assign(static_cast<size_t>(ds.channels), 0.0);
  ds.channel_std.assign(static_cast<size_t>(ds.channels), 0.0);
  const int64_t hw = ds.height * ds.width;
  const double denom = static_cast<double>(ds.count * hw);
  for (int64_t c = 0; c < ds.channels; ++c) {
    double sum = 0;
    for (int64_t i = 0; i < ds.count; ++i) {
      const uint8_t* px = ds.images.data() + (i * ds.channels + c) * hw;
      for (int64_t j = 0; j < hw; ++j) sum += px[j] / 255.0;
    }
    const double mu = sum / denom;
    double var = 0;
    for (int64_t i = 0; i < ds.count; ++i) {
      const uint8_t* px = ds.images.data() + (i * ds.channels + c) * hw;
      for (int64_t j = 0; j < hw; ++j) {
        const double d = px[j] / 255.0 - mu;
        var += d * d;
      }
    }
    ds.channel_mean[static_cast<size_t>(c)] = mu;
    const double sd = std::sqrt(var / denom);
    ds.channel_std[static_cast<size_t>(c)] = sd > 0 ? sd : 1.0;
  }
}

template <typename T>
T normalize_pixel(uint8_t v, double mean, double stddev) {
  return static_cast<T>((v / 255.0 - mean) / stddev);
}

template <typename T>
double denormalize_pixel(T v, double mean, double stddev) {
  return (static_cast<double>(v) * stddev + mean) * 255.0;
}

namespace detail {

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw ValidationError("short read on " + path);
  return bytes;
}

inline uint32_t read_be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

// One record = 1 label byte + 3072 pixel bytes (row-major R, G, B planes).
inline void append_cifar_file(const std::string& path, Dataset& ds) {
  constexpr int64_t kRecord = 1 + 3 * 32 * 32;
  auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw ValidationError(path + " has " + std::to_string(bytes.size()) +
                          " bytes, not a whole number of 3073-byte records "
                          "(expected 30,730,000 bytes for a 10,000-record file)");
  }
  const int64_t n = static_cast<int64_t>(bytes.size()) / kRecord;
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] > 9) throw ValidationError(path + ": label byte " + std::to_string(rec[0]) + " out of range");
    ds.labels.push_back(rec[0]);
    ds.images.insert(ds.images.end(), rec + 1, rec + kRecord);
  }
  ds.count += n;
}

}  // namespace detail

/// Canonical CIFAR-10 binary layout: data_batch_1..5.bin for train,
/// test_batch.bin for test. Pixel order is preserved bit-exactly. Train
/// channel stats are computed once and shared with the test split.
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  Dataset train, test;
  for (Dataset* ds : {&train, &test}) {
    ds->channels = 3;
    ds->height = 32;
    ds->width = 32;
    ds->num_classes = 10;
  }
  for (int i = 1; i <= 5; ++i) {
    detail::append_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin", train);
  }
  detail::append_cifar_file(dir + "/test_batch.bin", test);
  compute_channel_stats(train);
  test.channel_mean = train.channel_mean;
  test.channel_std = train.channel_std;
  return {std::move(train), std::move(test)};
}

/// IDX-format images + labels (big-endian headers). 28x28 inputs are
/// upscaled to 32x32 by nearest neighbor when requested. Stats are computed
/// from this file; overwrite them with the train split's when loading a
/// test set.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                              bool upscale_to_32 = true) {
  auto img = detail::read_file(images_path);
  auto lab = detail::read_file(labels_path);
  if (img.size() < 16 || detail::read_be32(img.data()) != 0x00000803u) {
    throw ValidationError(images_path + ": bad IDX magic for an image file (want 0x00000803)");
  }
  if (lab.size() < 8 || detail::read_be32(lab.data()) != 0x00000801u) {
    throw ValidationError(labels_path + ": bad IDX magic for a label file (want 0x00000801)");
  }
  const int64_t n = detail::read_be32(img.data() + 4);
  const int64_t rows = detail::read_be32(img.data() + 8);
  const int64_t cols = detail::read_be32(img.data() + 12);
  if (static_cast<int64_t>(detail::read_be32(lab.data() + 4)) != n) {
    throw ValidationError("IDX image/label counts differ");
  }
  if (static_cast<int64_t>(img.size()) != 16 + n * rows * cols || static_cast<int64_t>(lab.size()) != 8 + n) {
    throw ValidationError("IDX payload size does not match header");
  }

  Dataset ds;
  ds.channels = 1;
  ds.count = n;
  const int64_t out_hw = upscale_to_32 ? 32 : rows;
  ds.height = out_hw;
  ds.width = upscale_to_32 ? 32 : cols;
  ds.images.resize(static_cast<size_t>(n * ds.height * ds.width));
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* src = img.data() + 16 + i * rows * cols;
    uint8_t* dst = ds.images.data() + i * ds.height * ds.width;
    if (!upscale_to_32) {
      std::copy(src, src + rows * cols, dst);
    } else {
      for (int64_t y = 0; y < 32; ++y) {
        const int64_t sy = y * rows / 32;
        for (int64_t x = 0; x < 32; ++x) {
          dst[y * 32 + x] = src[sy * cols + x * cols / 32];
        }
      }
    }
  }
  int32_t max_label = 0;
  ds.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    ds.labels[static_cast<size_t>(i)] = lab[static_cast<size_t>(8 + i)];
    max_label = std::max(max_label, ds.labels[static_cast<size_t>(i)]);
  }
  ds.num_classes = std::max<int64_t>(10, max_label + 1);
  compute_channel_stats(ds);
  return ds;
}

struct AugmentPolicy {
  int64_t pad = 4;
  int64_t crop = 32;
  double hflip_prob = 0.5;

  bool is_identity(int64_t h, int64_t w) const {
    return pad == 0 && crop == h && crop == w && hflip_prob == 0.0;
  }
};

/// Zero-pad, random crop, random horizontal flip for one image. Draw order
/// per sample is fixed: crop y, crop x, flip.
inline void augment_sample(const uint8_t* src, int64_t channels, int64_t h, int64_t w,
                           const AugmentPolicy& policy, Rng& rng, uint8_t* dst) {
  if (policy.crop > h + 2 * policy.pad || policy.crop > w + 2 * policy.pad) {
    throw ValidationError("crop size exceeds padded image");
  }
  const int64_t range_y = h + 2 * policy.pad - policy.crop + 1;
  const int64_t range_x = w + 2 * policy.pad - policy.crop + 1;
  const int64_t oy = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(range_y)));
  const int64_t ox = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(range_x)));
  const bool flip = rng.bernoulli(policy.hflip_prob);
  for (int64_t c = 0; c < channels; ++c) {
    const uint8_t* plane = src + c * h * w;
    uint8_t* out = dst + c * policy.crop * policy.crop;
    for (int64_t y = 0; y < policy.crop; ++y) {
      const int64_t iy = y + oy - policy.pad;
      for (int64_t x = 0; x < policy.crop; ++x) {
        const int64_t cx = flip ? policy.crop - 1 - x : x;  // flip the cropped window
        const int64_t ix = cx + ox - policy.pad;
        uint8_t v = 0;
        if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = plane[iy * w + ix];
        out[y * policy.crop + x] = v;
      }
    }
  }
}

/// Batch-level augmentation entry point; samples are independent and the
/// rng is consumed in sample order.
inline void augment_batch(const uint8_t* src, int64_t count, int64_t channels, int64_t h,
                          int64_t w, const AugmentPolicy& policy, Rng& rng, uint8_t* dst) {
  for (int64_t i = 0; i < count; ++i) {
    augment_sample(src + i * channels * h * w, channels, h, w, policy, rng,
                   dst + i * channels * policy.crop * policy.crop);
  }
}

template <typename T>
struct Batch {
  Tensor<T> x;                  // normalized [n, c, crop, crop]
  std::vector<int32_t> labels;
  std::vector<uint8_t> pixels;  // the bytes behind x, post-augmentation
  int64_t index = 0;            // batch index within the epoch
};

/// Serves shuffled, augmented, normalized mini-batches. One epoch covers
/// every sample exactly once; the last partial batch is kept. Shuffle and
/// augmentation streams derive from (seed, epoch) and (seed, epoch, batch),
/// so epochs replay identically after a resume.
template <typename T>
class Batcher {
 public:
  Batcher(const Dataset& ds, int64_t batch_size, uint64_t seed, bool training,
          AugmentPolicy policy = AugmentPolicy{})
      : ds_(&ds), batch_size_(batch_size), seed_(seed), training_(training), policy_(policy) {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (ds.channel_mean.size() != static_cast<size_t>(ds.channels)) {
      throw ValidationError("dataset is missing channel statistics");
    }
    if (!training_) {
      policy_ = AugmentPolicy{0, ds.height, 0.0};
    }
    order_.resize(static_cast<size_t>(ds.count));
    std::iota(order_.begin(), order_.end(), 0);
  }

  int64_t batches_per_epoch() const {
    return (ds_->count + batch_size_ - 1) / batch_size_;
  }

  void begin_epoch(int64_t epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    batch_index_ = 0;
    std::iota(order_.begin(), order_.end(), 0);
    if (training_) {
      Rng rng = Rng::derive(seed_, {kShuffleStream, static_cast<uint64_t>(epoch)});
      for (int64_t i = ds_->count - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
        std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
      }
    }
  }

  std::optional<Batch<T>> next() {
    if (cursor_ >= ds_->count) return std::nullopt;
    const int64_t n = std::min<int64_t>(batch_size_, ds_->count - cursor_);
    const int64_t crop = training_ ? policy_.crop : ds_->height;
    const int64_t out_w = training_ ? policy_.crop : ds_->width;
    const int64_t sample = ds_->channels * crop * out_w;

    Batch<T> batch;
    batch.index = batch_index_;
    batch.labels.resize(static_cast<size_t>(n));
    batch.pixels.resize(static_cast<size_t>(n * sample));

    Rng aug_rng = Rng::derive(seed_, {kAugmentStream, static_cast<uint64_t>(epoch_),
                                      static_cast<uint64_t>(batch_index_)});
    for (int64_t i = 0; i < n; ++i) {
      const int64_t src_idx = order_[static_cast<size_t>(cursor_ + i)];
      batch.labels[static_cast<size_t>(i)] = ds_->labels[static_cast<size_t>(src_idx)];
      const uint8_t* src = ds_->images.data() + src_idx * ds_->sample_size();
      uint8_t* dst = batch.pixels.data() + i * sample;
      if (training_ && !policy_.is_identity(ds_->height, ds_->width)) {
        augment_sample(src, ds_->channels, ds_->height, ds_->width, policy_, aug_rng, dst);
      } else {
        std::copy(src, src + sample, dst);
      }
    }

    batch.x = Tensor<T>(Shape{n, ds_->channels, crop, out_w});
    auto xv = batch.x.values();
    const int64_t hw = crop * out_w;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t c = 0; c < ds_->channels; ++c) {
        const double mean = ds_->channel_mean[static_cast<size_t>(c)];
        const double sd = ds_->channel_std[static_cast<size_t>(c)];
        const uint8_t* px = batch.pixels.data() + (i * ds_->channels + c) * hw;
        T* out = xv.data() + (i * ds_->channels + c) * hw;
        for (int64_t j = 0; j < hw; ++j) out[j] = normalize_pixel<T>(px[j], mean, sd);
      }
    }

    cursor_ += n;
    ++batch_index_;
    return batch;
  }

  static constexpr uint64_t kShuffleStream = 0x53484646;  // stream tags
  static constexpr uint64_t kAugmentStream = 0x4155474D;

 private:
  const Dataset* ds_;
  int64_t batch_size_;
  uint64_t seed_;
  bool training_;
  AugmentPolicy policy_;
  std::vector<int64_t> order_;
  int64_t epoch_ = 0;
  int64_t cursor_ = 0;
  int64_t batch_index_ = 0;
};

}  // namespace lcforge
