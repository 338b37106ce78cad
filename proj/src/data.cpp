#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "bitmix/data.hpp"

namespace bitmix {
namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "data: cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

std::uint32_t be32(const std::vector<unsigned char>& b, size_t off,
                   const std::string& path) {
    if (off + 4 > b.size())
        failf("data: '", path, "' truncated at offset ", off,
              " while reading a 32-bit field");
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v >> 24),
        static_cast<unsigned char>(v >> 16),
        static_cast<unsigned char>(v >> 8),
        static_cast<unsigned char>(v),
    };
    out.write(reinterpret_cast<const char*>(b), 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // u8, 3 dims
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // u8, 1 dim
constexpr size_t kCifarRecord = 3073;                  // label + 3*32*32

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    const std::uint32_t imagic = be32(img, 0, images_path);
    if (imagic != kIdxImagesMagic)
        failf("data: '", images_path, "' bad IDX magic at offset 0: got 0x",
              std::hex, imagic, ", want 0x", kIdxImagesMagic);
    const i64 n = be32(img, 4, images_path);
    const i64 h = be32(img, 8, images_path);
    const i64 w = be32(img, 12, images_path);
    const size_t want = 16 + static_cast<size_t>(n) * h * w;
    if (img.size() != want)
        failf("data: '", images_path, "' size mismatch: payload from offset 16 "
              "should be ", want - 16, " bytes for ", n, "x", h, "x", w,
              ", file has ", img.size() - 16);

    const std::uint32_t lmagic = be32(lab, 0, labels_path);
    if (lmagic != kIdxLabelsMagic)
        failf("data: '", labels_path, "' bad IDX magic at offset 0: got 0x",
              std::hex, lmagic, ", want 0x", kIdxLabelsMagic);
    const i64 ln = be32(lab, 4, labels_path);
    if (ln != n)
        failf("data: label count ", ln, " does not match image count ", n);
    if (lab.size() != 8 + static_cast<size_t>(n))
        failf("data: '", labels_path, "' size mismatch: payload from offset 8 "
              "should be ", n, " bytes, file has ", lab.size() - 8);

    Dataset ds;
    ds.n = n;
    ds.c = 1;
    ds.h = static_cast<int>(h);
    ds.w = static_cast<int>(w);
    ds.images.resize(static_cast<size_t>(n) * h * w);
    for (size_t i = 0; i < ds.images.size(); ++i)
        ds.images[i] = static_cast<real_t>(img[16 + i]) / real_t(255);
    ds.labels.resize(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) ds.labels[i] = lab[8 + i];
    return ds;
}

void write_idx_images(const std::string& path, const Dataset& ds) {
    check(ds.c == 1, "write_idx_images: IDX image files are single-channel");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "data: cannot write '" + path + "'");
    put_be32(out, kIdxImagesMagic);
    put_be32(out, static_cast<std::uint32_t>(ds.n));
    put_be32(out, static_cast<std::uint32_t>(ds.h));
    put_be32(out, static_cast<std::uint32_t>(ds.w));
    for (real_t v : ds.images) {
        const auto b = static_cast<unsigned char>(
            std::lround(std::clamp<real_t>(v, 0, 1) * 255));
        out.put(static_cast<char>(b));
    }
}

void write_idx_labels(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "data: cannot write '" + path + "'");
    put_be32(out, kIdxLabelsMagic);
    put_be32(out, static_cast<std::uint32_t>(ds.n));
    for (int l : ds.labels) out.put(static_cast<char>(l));
}

Dataset load_cifar10(const std::vector<std::string>& batch_files) {
    check(!batch_files.empty(), "data: no CIFAR batch files given");
    Dataset ds;
    ds.c = 3;
    ds.h = 32;
    ds.w = 32;
    const size_t plane = 32 * 32;
    for (const auto& path : batch_files) {
        const auto bytes = read_file(path);
        if (bytes.size() % kCifarRecord != 0)
            failf("data: '", path, "' is not a CIFAR-10 batch: size ",
                  bytes.size(), " is not a multiple of ", kCifarRecord,
                  " (first bad record at offset ",
                  bytes.size() - bytes.size() % kCifarRecord, ")");
        const i64 records = static_cast<i64>(bytes.size() / kCifarRecord);
        for (i64 r = 0; r < records; ++r) {
            const size_t off = static_cast<size_t>(r) * kCifarRecord;
            const int label = bytes[off];
            if (label > 9)
                failf("data: '", path, "' label byte ", label,
                      " out of range at offset ", off);
            ds.labels.push_back(label);
            for (size_t i = 0; i < 3 * plane; ++i)
                ds.images.push_back(
                    static_cast<real_t>(bytes[off + 1 + i]) / real_t(255));
        }
        ds.n += records;
    }
    return ds;
}

void write_cifar10(const std::string& path, const Dataset& ds) {
    check(ds.c == 3 && ds.h == 32 && ds.w == 32,
          "write_cifar10: dataset must be 3x32x32");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "data: cannot write '" + path + "'");
    const size_t img = 3 * 32 * 32;
    for (i64 r = 0; r < ds.n; ++r) {
        out.put(static_cast<char>(ds.labels[r]));
        const real_t* p = ds.images.data() + r * img;
        for (size_t i = 0; i < img; ++i) {
            const auto b = static_cast<unsigned char>(
                std::lround(std::clamp<real_t>(p[i], 0, 1) * 255));
            out.put(static_cast<char>(b));
        }
    }
}

Dataset make_blobs(int classes, i64 per_class, int c, int h, int w,
                   real_t separation, std::uint64_t seed) {
    check(classes >= 2 && per_class >= 1, "make_blobs: bad sizes");
    std::mt19937_64 rng(seed);
    std::normal_distribution<real_t> unit(0, 1);
    const i64 dim = i64(c) * h * w;
    std::vector<std::vector<real_t>> centers(classes);
    for (auto& ctr : centers) {
        ctr.resize(dim);
        real_t norm = 0;
        for (auto& v : ctr) {
            v = unit(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : ctr) v *= separation / norm;
    }
    Dataset ds;
    ds.n = i64(classes) * per_class;
    ds.c = c;
    ds.h = h;
    ds.w = w;
    ds.images.resize(ds.n * dim);
    ds.labels.resize(ds.n);
    i64 idx = 0;
    for (int k = 0; k < classes; ++k) {
        for (i64 s = 0; s < per_class; ++s, ++idx) {
            ds.labels[idx] = k;
            real_t* out = ds.images.data() + idx * dim;
            for (i64 d = 0; d < dim; ++d) out[d] = centers[k][d] + unit(rng);
        }
    }
    return ds;
}

Dataset make_synthetic_images(int classes, i64 per_class, int c, int h, int w,
                              std::uint64_t seed, real_t noise) {
    check(classes >= 2 && per_class >= 1, "make_synthetic_images: bad sizes");
    std::mt19937_64 rng(seed);
    std::normal_distribution<real_t> unit(0, 1);
    std::uniform_real_distribution<real_t> amp(real_t(0.7), real_t(1.3));
    const i64 dim = i64(c) * h * w;
    // Smooth class templates: coarse noise grid, bilinearly upsampled.
    const int gh = std::max(2, h / 4), gw = std::max(2, w / 4);
    std::vector<std::vector<real_t>> templates(classes,
                                               std::vector<real_t>(dim));
    for (auto& t : templates) {
        std::vector<real_t> grid(static_cast<size_t>(c) * gh * gw);
        for (auto& v : grid) v = unit(rng);
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < h; ++y) {
                const real_t fy = static_cast<real_t>(y) * (gh - 1) / (h - 1);
                const int y0 = std::min(static_cast<int>(fy), gh - 2);
                const real_t ty = fy - y0;
                for (int x = 0; x < w; ++x) {
                    const real_t fx =
                        static_cast<real_t>(x) * (gw - 1) / (w - 1);
                    const int x0 = std::min(static_cast<int>(fx), gw - 2);
                    const real_t tx = fx - x0;
                    auto g = [&](int yy, int xx) {
                        return grid[(ch * gh + yy) * gw + xx];
                    };
                    t[(ch * h + y) * w + x] =
                        (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                        ty * ((1 - tx) * g(y0 + 1, x0) +
                              tx * g(y0 + 1, x0 + 1));
                }
            }
        }
    }
    Dataset ds;
    ds.n = i64(classes) * per_class;
    ds.c = c;
    ds.h = h;
    ds.w = w;
    ds.images.resize(ds.n * dim);
    ds.labels.resize(ds.n);
    i64 idx = 0;
    for (int k = 0; k < classes; ++k) {
        for (i64 s = 0; s < per_class; ++s, ++idx) {
            ds.labels[idx] = k;
            const real_t a = amp(rng);
            real_t* out = ds.images.data() + idx * dim;
            for (i64 d = 0; d < dim; ++d) {
                const real_t v = real_t(0.5) + real_t(0.18) * a * templates[k][d] +
                                 noise * unit(rng);
                out[d] = std::clamp<real_t>(v, 0, 1);
            }
        }
    }
    return ds;
}

Dataset fit_dataset(const Dataset& ds, int c, int h, int w) {
    if (ds.c == c && ds.h == h && ds.w == w) return ds;
    check(ds.c == c || ds.c == 1,
          "fit_dataset: cannot map " + std::to_string(ds.c) +
              " channels onto " + std::to_string(c));
    Dataset out;
    out.n = ds.n;
    out.c = c;
    out.h = h;
    out.w = w;
    out.labels = ds.labels;
    out.images.assign(static_cast<size_t>(ds.n) * c * h * w, 0);
    const int dy = (h - ds.h) / 2;
    const int dx = (w - ds.w) / 2;
    for (i64 i = 0; i < ds.n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const int src_ch = ds.c == 1 ? 0 : ch;
            for (int y = 0; y < ds.h; ++y) {
                const int oy = y + dy;
                if (oy < 0 || oy >= h) continue;
                for (int x = 0; x < ds.w; ++x) {
                    const int ox = x + dx;
                    if (ox < 0 || ox >= w) continue;
                    out.images[((i * c + ch) * h + oy) * w + ox] =
                        ds.images[((i * ds.c + src_ch) * ds.h + y) * ds.w + x];
                }
            }
        }
    }
    return out;
}

BatchIterator::BatchIterator(const Dataset& ds, BatchCfg cfg,
                             std::uint64_t seed, i64 epoch)
    : ds_(ds), cfg_(cfg), rng_(seed * 0x9e3779b97f4a7c15ULL + epoch + 1) {
    check(ds.n > 0, "batch iterator: empty dataset");
    check(cfg.batch_size >= 1, "batch iterator: batch size must be >= 1");
    order_.resize(static_cast<size_t>(ds.n));
    std::iota(order_.begin(), order_.end(), 0);
    if (cfg_.shuffle) std::shuffle(order_.begin(), order_.end(), rng_);
}

i64 BatchIterator::batches_per_epoch() const {
    return (ds_.n + cfg_.batch_size - 1) / cfg_.batch_size;
}

std::optional<Batch> BatchIterator::next() {
    if (cursor_ >= ds_.n) return std::nullopt;
    const i64 bsz = std::min<i64>(cfg_.batch_size, ds_.n - cursor_);
    const i64 dim = i64(ds_.c) * ds_.h * ds_.w;
    Batch b;
    b.x = make_tensor({bsz, ds_.c, ds_.h, ds_.w});
    b.labels.resize(static_cast<size_t>(bsz));
    std::uniform_int_distribution<int> shift(-4, 4);
    std::uniform_int_distribution<int> coin(0, 1);
    for (i64 i = 0; i < bsz; ++i) {
        const i64 src = order_[static_cast<size_t>(cursor_ + i)];
        b.labels[static_cast<size_t>(i)] = ds_.labels[static_cast<size_t>(src)];
        const real_t* in = ds_.images.data() + src * dim;
        real_t* out = b.x->data.data() + i * dim;
        if (!cfg_.augment) {
            std::memcpy(out, in, sizeof(real_t) * static_cast<size_t>(dim));
            continue;
        }
        const int dy = shift(rng_), dx = shift(rng_);
        const bool flip = coin(rng_) == 1;
        for (int c = 0; c < ds_.c; ++c) {
            for (int y = 0; y < ds_.h; ++y) {
                const int sy = y + dy;
                for (int x = 0; x < ds_.w; ++x) {
                    const int sx0 = flip ? ds_.w - 1 - x : x;
                    const int sx = sx0 + dx;
                    real_t v = 0;
                    if (sy >= 0 && sy < ds_.h && sx >= 0 && sx < ds_.w)
                        v = in[(c * ds_.h + sy) * ds_.w + sx];
                    out[(c * ds_.h + y) * ds_.w + x] = v;
                }
            }
        }
    }
    cursor_ += bsz;
    return b;
}

BatchStream::BatchStream(const Dataset& ds, BatchCfg cfg, std::uint64_t seed,
                         i64 epoch, bool prefetch, size_t capacity)
    : it_(ds, cfg, seed, epoch), prefetch_(prefetch), capacity_(capacity) {
    if (!prefetch_) return;
    producer_ = std::thread([this] {
        while (true) {
            auto b = it_.next();
            std::unique_lock lock(mu_);
            if (!b) {
                done_ = true;
                cv_.notify_all();
                return;
            }
            cv_.wait(lock, [this] { return queue_.size() < capacity_; });
            queue_.push_back(std::move(*b));
            cv_.notify_all();
        }
    });
}

BatchStream::~BatchStream() {
    if (!prefetch_) return;
    {
        std::unique_lock lock(mu_);
        capacity_ = static_cast<size_t>(-1);  // unblock the producer
        cv_.notify_all();
    }
    if (producer_.joinable()) producer_.join();
}

std::optional<Batch> BatchStream::next() {
    if (!prefetch_) return it_.next();
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || done_; });
    if (queue_.empty()) return std::nullopt;
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
}

}  // namespace bitmix
