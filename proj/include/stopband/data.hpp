#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "stopband/errors.hpp"
#include "stopband/rng.hpp"
#include "stopband/tensor.hpp"

namespace stopband {

// Images are stored flat in sample-major order (sample, channel, row, col),
// labels alongside. Pixel data stays in native range until normalize() is
// applied with statistics from the training split.
struct Dataset {
    Shape sample_shape;  // C,H,W
    std::vector<double> images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_elems() const { return shape_size(sample_shape); }
};

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

// Per-channel mean and standard deviation. Computed on the training split and
// then applied to every split.
inline ChannelStats channel_stats(const Dataset& d) {
    const std::size_t c = d.sample_shape[0];
    const std::size_t per = d.sample_elems() / c;
    ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
    if (d.size() == 0) throw UsageError("cannot take statistics of an empty dataset");
    const std::size_t n = d.size() * per;
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = d.images.data() + (i * c + ch) * per;
            for (std::size_t k = 0; k < per; ++k) s.mean[ch] += p[k];
        }
    for (std::size_t ch = 0; ch < c; ++ch) s.mean[ch] /= static_cast<double>(n);
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = d.images.data() + (i * c + ch) * per;
            for (std::size_t k = 0; k < per; ++k) {
                const double dlt = p[k] - s.mean[ch];
                s.stddev[ch] += dlt * dlt;
            }
        }
    for (std::size_t ch = 0; ch < c; ++ch) {
        s.stddev[ch] = std::sqrt(s.stddev[ch] / static_cast<double>(n));
        if (s.stddev[ch] == 0.0) s.stddev[ch] = 1.0;
    }
    return s;
}

inline void normalize(Dataset& d, const ChannelStats& s) {
    const std::size_t c = d.sample_shape[0];
    const std::size_t per = d.sample_elems() / c;
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* p = d.images.data() + (i * c + ch) * per;
            for (std::size_t k = 0; k < per; ++k) p[k] = (p[k] - s.mean[ch]) / s.stddev[ch];
        }
}

// ---- CIFAR-10 binary format ----
//
// Each record is 3073 bytes: one label byte followed by 3072 bytes of pixel
// data, channel-major (1024 red, 1024 green, 1024 blue), rows within a
// channel. Pixels are scaled to [0, 1] on load.

inline constexpr std::size_t kCifarRecordBytes = 3073;

inline void load_cifar10_file(const std::string& path, Dataset& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    f.seekg(0, std::ios::end);
    const std::streamoff bytes = f.tellg();
    f.seekg(0);
    if (bytes <= 0 || static_cast<std::size_t>(bytes) % kCifarRecordBytes != 0)
        throw FormatError(path + ": size " + std::to_string(bytes) +
                          " is not a whole number of 3073-byte records");
    const std::size_t n = static_cast<std::size_t>(bytes) / kCifarRecordBytes;
    std::vector<unsigned char> rec(kCifarRecordBytes);
    out.images.reserve(out.images.size() + n * 3072);
    out.labels.reserve(out.labels.size() + n);
    for (std::size_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
        if (!f) throw FormatError(path + ": truncated read");
        if (rec[0] > 9)
            throw FormatError(path + ": label " + std::to_string(int(rec[0])) + " out of range");
        out.labels.push_back(static_cast<int>(rec[0]));
        for (std::size_t k = 1; k < kCifarRecordBytes; ++k)
            out.images.push_back(static_cast<double>(rec[k]) / 255.0);
    }
}

// Loads train (data_batch_1..5.bin) and test (test_batch.bin) splits from a
// directory laid out like the canonical binary release.
inline std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset train, test;
    train.sample_shape = test.sample_shape = {3, 32, 32};
    bool any = false;
    for (int i = 1; i <= 5; ++i) {
        const fs::path p = fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
        if (fs::exists(p)) {
            load_cifar10_file(p.string(), train);
            any = true;
        }
    }
    const fs::path tp = fs::path(dir) / "test_batch.bin";
    if (fs::exists(tp)) {
        load_cifar10_file(tp.string(), test);
        any = true;
    }
    if (!any) throw FormatError("no CIFAR-10 batch files found under " + dir);
    if (train.size() == 0) throw FormatError("no training batches found under " + dir);
    if (test.size() == 0) throw FormatError("no test batch found under " + dir);
    return {std::move(train), std::move(test)};
}

// ---- synthetic classification data ----
//
// Gaussian clusters: each class gets a random unit-ish prototype image, and
// samples are prototype + noise. margin scales the prototypes relative to the
// noise, so it directly controls how separable the problem is. Train and test
// splits share prototypes (same seed) but draw disjoint noise streams.

struct SyntheticSpec {
    Shape sample_shape{3, 8, 8};
    int num_classes = 10;
    std::size_t train_count = 2000;
    std::size_t test_count = 400;
    double margin = 1.0;
    std::uint64_t seed = 1;
};

namespace detail {

inline std::vector<double> class_prototypes(const SyntheticSpec& spec) {
    Rng proto_rng(Rng::mix(spec.seed, 0x70726f746full));
    const std::size_t elems = shape_size(spec.sample_shape);
    std::vector<double> protos(static_cast<std::size_t>(spec.num_classes) * elems);
    for (double& v : protos) v = proto_rng.normal() * spec.margin;
    return protos;
}

inline Dataset synthetic_split(const SyntheticSpec& spec, std::uint64_t split_tag,
                               std::size_t count) {
    const std::size_t elems = shape_size(spec.sample_shape);
    const std::vector<double> protos = class_prototypes(spec);
    Rng rng(Rng::mix(spec.seed, split_tag));
    Dataset d;
    d.sample_shape = spec.sample_shape;
    d.images.resize(count * elems);
    // Round-robin labels keep class counts balanced within one; the shuffle
    // removes the ordering.
    d.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i)
        d.labels[i] = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
    rng.shuffle(d.labels);
    for (std::size_t i = 0; i < count; ++i) {
        const double* p = protos.data() + static_cast<std::size_t>(d.labels[i]) * elems;
        double* img = d.images.data() + i * elems;
        for (std::size_t k = 0; k < elems; ++k) img[k] = p[k] + rng.normal();
    }
    return d;
}

} // namespace detail

inline std::pair<Dataset, Dataset> synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.num_classes < 2) throw UsageError("synthetic data needs at least two classes");
    if (spec.train_count == 0 || spec.test_count == 0)
        throw UsageError("synthetic split sizes must be positive");
    Dataset train = detail::synthetic_split(spec, 0x747261696eull, spec.train_count);
    Dataset test = detail::synthetic_split(spec, 0x74657374ull, spec.test_count);
    return {std::move(train), std::move(test)};
}

// ---- batching ----

// Copies the samples at the given indices into an N,C,H,W tensor.
template <typename S = double>
Tensor<S> make_batch(const Dataset& d, const std::vector<std::size_t>& idx,
                     std::vector<int>* labels_out) {
    if (idx.empty()) throw UsageError("empty batch");
    Shape shape;
    shape.push_back(idx.size());
    for (std::size_t dim : d.sample_shape) shape.push_back(dim);
    Tensor<S> batch(shape);
    const std::size_t elems = d.sample_elems();
    if (labels_out) labels_out->resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= d.size()) throw UsageError("batch index out of range");
        const double* src = d.images.data() + idx[i] * elems;
        S* dst = batch.data() + i * elems;
        for (std::size_t k = 0; k < elems; ++k) dst[k] = static_cast<S>(src[k]);
        if (labels_out) (*labels_out)[i] = d.labels[idx[i]];
    }
    return batch;
}

// Epoch ordering: a seeded shuffle of [0, n).
inline std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    rng.shuffle(idx);
    return idx;
}

// Random crop (zero pad by `pad`, re-crop to the original size) plus a coin
// flip mirror, applied per sample in place. Off by default in training.
template <typename S>
void augment_batch(Tensor<S>& batch, Rng& rng, int pad = 4) {
    if (batch.rank() != 4) throw UsageError("augmentation expects an N,C,H,W batch");
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<S> sample(c * h * w);
    for (std::size_t i = 0; i < n; ++i) {
        S* img = batch.data() + i * c * h * w;
        const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
        const bool flip = rng.below(2) == 1;
        std::copy(img, img + sample.size(), sample.begin());
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const long sy = static_cast<long>(y) + dy;
                    long sx = static_cast<long>(x) + dx;
                    if (flip) sx = static_cast<long>(w) - 1 - sx;
                    S v = S(0);
                    if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w))
                        v = sample[(ch * h + static_cast<std::size_t>(sy)) * w +
                                   static_cast<std::size_t>(sx)];
                    img[(ch * h + y) * w + x] = v;
                }
    }
}

} // namespace stopband
