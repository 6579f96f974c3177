#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/io.hpp"
#include "repinv/rng.hpp"

namespace repinv {

enum class SplitTag : std::uint8_t { Train = 0, Val = 1, Test = 2 };

// Quantized images with labels and per-example split tags. Pixels are
// row-major N*H*W*C with values in [0, levels).
struct ImageDataset {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 1;
    int levels = 256;
    int num_classes = 10;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;
    std::vector<SplitTag> split;

    std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t pixels_per_image() const { return height * width * channels; }

    const std::uint8_t* image(std::int64_t i) const {
        return pixels.data() + i * pixels_per_image();
    }
    std::uint8_t* image(std::int64_t i) { return pixels.data() + i * pixels_per_image(); }

    std::vector<std::int64_t> indices_of(SplitTag tag) const {
        std::vector<std::int64_t> out;
        for (std::int64_t i = 0; i < count(); ++i)
            if (split[static_cast<std::size_t>(i)] == tag) out.push_back(i);
        return out;
    }

    void check() const {
        require_data(static_cast<std::int64_t>(pixels.size()) == count() * pixels_per_image(),
                     "pixel buffer does not match image count");
        require_data(split.empty() || split.size() == labels.size(),
                     "split tags do not cover the dataset");
        for (std::uint8_t v : pixels)
            require_data(v < levels, cat("pixel value ", int(v), " >= levels ", levels));
        for (int y : labels)
            require_data(y >= 0 && y < num_classes,
                         cat("label ", y, " outside [0,", num_classes, ")"));
    }
};

// ---- IDX (big-endian, magic 0x0000080{1,3}) --------------------------------

struct IdxArray {
    std::vector<std::int64_t> dims;
    std::vector<std::uint8_t> bytes;
    bool is_images = false;  // 0x803 images, 0x801 labels
};

inline IdxArray parse_idx(const std::string& bytes, const std::string& origin) {
    require_data(bytes.size() >= 4, cat("'", origin, "': truncated IDX header"));
    const std::uint32_t magic = read_u32_be(bytes, 0);
    require_data(magic == 0x00000803u || magic == 0x00000801u,
                 cat("'", origin, "': bad IDX magic 0x", std::hex, magic));
    IdxArray out;
    out.is_images = magic == 0x00000803u;
    const std::size_t ndim = out.is_images ? 3 : 1;
    require_data(bytes.size() >= 4 + 4 * ndim, cat("'", origin, "': truncated IDX dimension list"));
    std::int64_t total = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        const std::uint32_t dim = read_u32_be(bytes, 4 + 4 * d);
        require_data(dim > 0, cat("'", origin, "': zero IDX dimension"));
        out.dims.push_back(static_cast<std::int64_t>(dim));
        require_data(total <= (std::int64_t{1} << 40) / out.dims.back(),
                     cat("'", origin, "': IDX dimensions overflow"));
        total *= out.dims.back();
    }
    const std::size_t header = 4 + 4 * ndim;
    const std::size_t expected = header + static_cast<std::size_t>(total);
    require_data(bytes.size() == expected,
                 cat("'", origin, "': expected ", expected, " bytes, got ", bytes.size()));
    out.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return out;
}

inline IdxArray load_idx(const std::string& path) { return parse_idx(read_file(path), path); }

inline std::string encode_idx_images(std::int64_t n, std::int64_t h, std::int64_t w,
                                     const std::vector<std::uint8_t>& bytes) {
    require_data(static_cast<std::int64_t>(bytes.size()) == n * h * w,
                 "image byte count does not match dimensions");
    std::string out;
    append_u32_be(out, 0x00000803u);
    append_u32_be(out, static_cast<std::uint32_t>(n));
    append_u32_be(out, static_cast<std::uint32_t>(h));
    append_u32_be(out, static_cast<std::uint32_t>(w));
    out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    return out;
}

inline std::string encode_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::string out;
    append_u32_be(out, 0x00000801u);
    append_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    out.append(reinterpret_cast<const char*>(labels.data()), labels.size());
    return out;
}

inline void write_idx_images(const std::string& path, std::int64_t n, std::int64_t h,
                             std::int64_t w, const std::vector<std::uint8_t>& bytes) {
    atomic_write_file(path, encode_idx_images(n, h, w, bytes));
}

inline void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    atomic_write_file(path, encode_idx_labels(labels));
}

// Single-channel dataset from a matching IDX image/label pair.
inline ImageDataset dataset_from_idx(const std::string& images_path,
                                     const std::string& labels_path, int num_classes = 10) {
    IdxArray images = load_idx(images_path);
    IdxArray labels = load_idx(labels_path);
    require_data(images.is_images, cat("'", images_path, "' does not hold images"));
    require_data(!labels.is_images, cat("'", labels_path, "' does not hold labels"));
    require_data(images.dims[0] == labels.dims[0],
                 cat("image count ", images.dims[0], " != label count ", labels.dims[0]));
    ImageDataset ds;
    ds.height = images.dims[1];
    ds.width = images.dims[2];
    ds.channels = 1;
    ds.levels = 256;
    ds.num_classes = num_classes;
    ds.pixels = std::move(images.bytes);
    ds.labels.reserve(labels.bytes.size());
    for (std::uint8_t y : labels.bytes) ds.labels.push_back(static_cast<int>(y));
    ds.split.assign(ds.labels.size(), SplitTag::Train);
    ds.check();
    return ds;
}

// ---- CIFAR-10 binary batches (3073-byte records, planar RGB) ---------------

inline ImageDataset load_cifar10(const std::vector<std::string>& batch_paths) {
    ImageDataset ds;
    ds.height = 32;
    ds.width = 32;
    ds.channels = 3;
    ds.levels = 256;
    ds.num_classes = 10;
    for (const std::string& path : batch_paths) {
        const std::string bytes = read_file(path);
        require_data(!bytes.empty() && bytes.size() % 3073 == 0,
                     cat("'", path, "': CIFAR-10 batch size ", bytes.size(),
                         " is not a multiple of 3073"));
        const std::size_t records = bytes.size() / 3073;
        for (std::size_t r = 0; r < records; ++r) {
            const unsigned char label = static_cast<unsigned char>(bytes[r * 3073]);
            require_data(label < 10, cat("'", path, "': label byte ", int(label), " out of range"));
            ds.labels.push_back(label);
            const char* pix = bytes.data() + r * 3073 + 1;
            ds.pixels.insert(ds.pixels.end(), reinterpret_cast<const std::uint8_t*>(pix),
                             reinterpret_cast<const std::uint8_t*>(pix) + 3072);
        }
    }
    ds.split.assign(ds.labels.size(), SplitTag::Train);
    ds.check();
    return ds;
}

// ---- Quantization and resampling -------------------------------------------

// v -> floor(v*L/256); monotone, surjective onto [0, L-1] for full-range input.
inline ImageDataset quantize(const ImageDataset& ds, int levels) {
    require_usage(levels >= 2 && levels <= 256, cat("levels must be in [2,256], got ", levels));
    require_usage(ds.levels == 256, "quantize expects a 256-level dataset");
    ImageDataset out = ds;
    out.levels = levels;
    for (auto& v : out.pixels)
        v = static_cast<std::uint8_t>((static_cast<int>(v) * levels) / 256);
    return out;
}

// 2x2 mean pooling (e.g. 28x28 -> 14x14), rounding to nearest.
inline ImageDataset mean_pool2(const ImageDataset& ds) {
    require_usage(ds.height % 2 == 0 && ds.width % 2 == 0, "mean_pool2 needs even extents");
    ImageDataset out = ds;
    out.height = ds.height / 2;
    out.width = ds.width / 2;
    out.pixels.assign(static_cast<std::size_t>(out.count() * out.pixels_per_image()), 0);
    for (std::int64_t i = 0; i < ds.count(); ++i) {
        const std::uint8_t* src = ds.image(i);
        std::uint8_t* dst = out.image(i);
        for (std::int64_t h = 0; h < out.height; ++h)
            for (std::int64_t w = 0; w < out.width; ++w)
                for (std::int64_t c = 0; c < ds.channels; ++c) {
                    int s = 0;
                    for (int dh = 0; dh < 2; ++dh)
                        for (int dw = 0; dw < 2; ++dw)
                            s += src[((2 * h + dh) * ds.width + 2 * w + dw) * ds.channels + c];
                    dst[(h * out.width + w) * ds.channels + c] =
                        static_cast<std::uint8_t>((s + 2) / 4);
                }
    }
    return out;
}

// Bilinear resampling with half-pixel centers; rounds back to bytes.
inline ImageDataset resize_bilinear(const ImageDataset& ds, std::int64_t oh, std::int64_t ow) {
    require_usage(oh >= 1 && ow >= 1, "resize target must be positive");
    ImageDataset out = ds;
    out.height = oh;
    out.width = ow;
    out.pixels.assign(static_cast<std::size_t>(out.count() * out.pixels_per_image()), 0);
    const double sy = static_cast<double>(ds.height) / static_cast<double>(oh);
    const double sx = static_cast<double>(ds.width) / static_cast<double>(ow);
    for (std::int64_t i = 0; i < ds.count(); ++i) {
        const std::uint8_t* src = ds.image(i);
        std::uint8_t* dst = out.image(i);
        for (std::int64_t y = 0; y < oh; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, ds.height - 1.0);
            const std::int64_t y0 = static_cast<std::int64_t>(fy);
            const std::int64_t y1 = std::min(y0 + 1, ds.height - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::int64_t x = 0; x < ow; ++x) {
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, ds.width - 1.0);
                const std::int64_t x0 = static_cast<std::int64_t>(fx);
                const std::int64_t x1 = std::min(x0 + 1, ds.width - 1);
                const double wx = fx - static_cast<double>(x0);
                for (std::int64_t c = 0; c < ds.channels; ++c) {
                    auto px = [&](std::int64_t yy, std::int64_t xx) {
                        return static_cast<double>(src[(yy * ds.width + xx) * ds.channels + c]);
                    };
                    const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                                     wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                    dst[(y * ow + x) * ds.channels + c] =
                        static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
                }
            }
        }
    }
    return out;
}

// ---- Deterministic splits ---------------------------------------------------

// Stable partition into train/val/test with exact rounded sizes; the tag
// assignment is a pure function of (count, seed).
inline ImageDataset split_deterministic(const ImageDataset& ds, double train_frac,
                                        double val_frac, double test_frac, std::uint64_t seed) {
    const double sum = train_frac + val_frac + test_frac;
    require_usage(std::fabs(sum - 1.0) <= 1e-9, cat("split fractions sum to ", sum, ", not 1"));
    const std::int64_t n = ds.count();
    const auto n_train = static_cast<std::int64_t>(std::llround(train_frac * n));
    const auto n_train_val = static_cast<std::int64_t>(std::llround((train_frac + val_frac) * n));
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(order);
    ImageDataset out = ds;
    out.split.assign(static_cast<std::size_t>(n), SplitTag::Test);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
        out.split[idx] = i < n_train          ? SplitTag::Train
                         : (i < n_train_val) ? SplitTag::Val
                                             : SplitTag::Test;
    }
    return out;
}

inline ImageDataset take_subset(const ImageDataset& ds, const std::vector<std::int64_t>& indices) {
    ImageDataset out = ds;
    out.pixels.clear();
    out.labels.clear();
    out.split.clear();
    for (std::int64_t i : indices) {
        const std::uint8_t* src = ds.image(i);
        out.pixels.insert(out.pixels.end(), src, src + ds.pixels_per_image());
        out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        out.split.push_back(ds.split.empty() ? SplitTag::Train
                                             : ds.split[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace repinv
