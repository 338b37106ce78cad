#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "bitmix/tensor.hpp"

namespace bitmix {

// Images normalized to [0,1], NCHW order.
struct Dataset {
    i64 n = 0;
    int c = 0, h = 0, w = 0;
    std::vector<real_t> images;  // n*c*h*w
    std::vector<int> labels;
};

// IDX (MNIST-style) files: big-endian header, unsigned-byte payload.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);
void write_idx_images(const std::string& path, const Dataset& ds);
void write_idx_labels(const std::string& path, const Dataset& ds);

// CIFAR-10 binary batches: records of 1 label byte + 3*32*32 pixel bytes.
Dataset load_cifar10(const std::vector<std::string>& batch_files);
void write_cifar10(const std::string& path, const Dataset& ds);

// Gaussian blobs around well-separated class centers.
Dataset make_blobs(int classes, i64 per_class, int c, int h, int w,
                   real_t separation, std::uint64_t seed);

// Class-template images: smooth random template per class, scaled by a
// random amplitude plus pixel noise. Learnable but not saturated at desk
// scale.
Dataset make_synthetic_images(int classes, i64 per_class, int c, int h, int w,
                              std::uint64_t seed, real_t noise = real_t(0.15));

// Adapts a dataset to the model's input layout: single-channel images are
// replicated across channels, spatial extents are center-padded or
// center-cropped. No-op when the layout already matches.
Dataset fit_dataset(const Dataset& ds, int c, int h, int w);

struct Batch {
    TensorPtr x;
    std::vector<int> labels;
};

struct BatchCfg {
    i64 batch_size = 64;
    bool shuffle = true;
    bool augment = false;  // pad-4 random crop + horizontal flip
};

// One pass over the dataset; each sample is yielded exactly once.
// Deterministic given (seed, epoch).
class BatchIterator {
  public:
    BatchIterator(const Dataset& ds, BatchCfg cfg, std::uint64_t seed,
                  i64 epoch);
    std::optional<Batch> next();
    i64 batches_per_epoch() const;

  private:
    const Dataset& ds_;
    BatchCfg cfg_;
    std::vector<i64> order_;
    std::mt19937_64 rng_;
    i64 cursor_ = 0;
};

// Wraps a BatchIterator with a bounded single-producer queue so batch
// assembly overlaps training. Order (and so determinism) is unchanged.
class BatchStream {
  public:
    BatchStream(const Dataset& ds, BatchCfg cfg, std::uint64_t seed, i64 epoch,
                bool prefetch = true, size_t capacity = 3);
    ~BatchStream();
    BatchStream(const BatchStream&) = delete;
    BatchStream& operator=(const BatchStream&) = delete;

    std::optional<Batch> next();

  private:
    BatchIterator it_;
    bool prefetch_;
    size_t capacity_;
    std::deque<Batch> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool done_ = false;
    std::thread producer_;
};

}  // namespace bitmix
