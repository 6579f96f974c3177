#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/data.hpp"
#include "repinv/rng.hpp"

namespace repinv {

// Affine placement of a digit on a square canvas. The transform maps source
// coordinates (centered) through scale, shear and rotation, then translates;
// translation must keep the transformed bounding box inside the canvas.
struct AffineParams {
    double rotation = 0.0;  // radians
    double scale_x = 1.0;
    double scale_y = 1.0;
    double shear = 0.0;
    double translate_x = 0.0;  // pixels
    double translate_y = 0.0;
    std::int64_t canvas = 0;
};

namespace detail {

// Forward 2x2 matrix: R(theta) * Shear(s) * Scale(sx, sy), acting on (x, y).
inline void affine_matrix(const AffineParams& p, double m[4]) {
    const double c = std::cos(p.rotation), s = std::sin(p.rotation);
    // shear then scale: [[sx, shear*sy], [0, sy]]
    const double a = p.scale_x, b = p.shear * p.scale_y, d = p.scale_y;
    m[0] = c * a;
    m[1] = c * b - s * d;
    m[2] = s * a;
    m[3] = s * b + c * d;
}

// Half-extent of the transformed source rectangle along x and y.
inline void transformed_extent(const AffineParams& p, double half_w, double half_h, double& ex,
                               double& ey) {
    double m[4];
    affine_matrix(p, m);
    ex = std::fabs(m[0]) * half_w + std::fabs(m[1]) * half_h;
    ey = std::fabs(m[2]) * half_w + std::fabs(m[3]) * half_h;
}

}  // namespace detail

// Bilinear resampling of a single grayscale image under the inverse affine
// map; pixels outside the source read as 0. Integer identity placements copy
// pixels exactly.
inline std::vector<std::uint8_t> render_affine(const std::uint8_t* src, std::int64_t src_h,
                                               std::int64_t src_w, const AffineParams& p) {
    const std::int64_t canvas = p.canvas;
    require_usage(canvas >= src_h && canvas >= src_w,
                  cat("canvas ", canvas, " smaller than source ", src_h, "x", src_w));
    require_usage(p.scale_x > 0 && p.scale_y > 0, "scale factors must be positive");

    double m[4];
    detail::affine_matrix(p, m);
    const double det = m[0] * m[3] - m[1] * m[2];
    require_usage(std::fabs(det) > 1e-12, "affine transform is singular");
    const double inv[4] = {m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};

    const double cx_out = (static_cast<double>(canvas) - 1.0) / 2.0;
    const double cy_out = cx_out;
    const double cx_src = (static_cast<double>(src_w) - 1.0) / 2.0;
    const double cy_src = (static_cast<double>(src_h) - 1.0) / 2.0;

    std::vector<std::uint8_t> out(static_cast<std::size_t>(canvas * canvas), 0);
    for (std::int64_t y = 0; y < canvas; ++y) {
        for (std::int64_t x = 0; x < canvas; ++x) {
            const double dx = static_cast<double>(x) - cx_out - p.translate_x;
            const double dy = static_cast<double>(y) - cy_out - p.translate_y;
            const double sx = inv[0] * dx + inv[1] * dy + cx_src;
            const double sy = inv[2] * dx + inv[3] * dy + cy_src;
            if (sx < -1.0 || sx > static_cast<double>(src_w) || sy < -1.0 ||
                sy > static_cast<double>(src_h))
                continue;
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
            const double wx = sx - static_cast<double>(x0);
            const double wy = sy - static_cast<double>(y0);
            auto px = [&](std::int64_t yy, std::int64_t xx) -> double {
                if (yy < 0 || yy >= src_h || xx < 0 || xx >= src_w) return 0.0;
                return static_cast<double>(src[yy * src_w + xx]);
            };
            const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                             wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1));
            out[static_cast<std::size_t>(y * canvas + x)] =
                static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    return out;
}

// Transform distribution for the synthetic affine-digit set: rotation +-20
// degrees, per-axis scale [0.8, 1.2], shear +-0.2, translation uniform over
// the range that keeps the transformed bounding box inside the canvas.
inline AffineParams draw_affine_params(Rng& rng, std::int64_t src_h, std::int64_t src_w,
                                       std::int64_t canvas) {
    AffineParams p;
    p.canvas = canvas;
    p.rotation = rng.uniform(-20.0, 20.0) * M_PI / 180.0;
    p.scale_x = rng.uniform(0.8, 1.2);
    p.scale_y = rng.uniform(0.8, 1.2);
    p.shear = rng.uniform(-0.2, 0.2);
    double ex, ey;
    detail::transformed_extent(p, (static_cast<double>(src_w) - 1.0) / 2.0,
                               (static_cast<double>(src_h) - 1.0) / 2.0, ex, ey);
    const double cx = (static_cast<double>(canvas) - 1.0) / 2.0;
    const double room_x = std::max(0.0, cx - ex);
    const double room_y = std::max(0.0, cx - ey);
    p.translate_x = rng.uniform(-room_x, room_x);
    p.translate_y = rng.uniform(-room_y, room_y);
    return p;
}

// Seeded affine-digit dataset. Each output example i resamples source digit
// i % N under an independently drawn transform; split tags follow the source
// example, so expansion never leaks test digits into training.
inline ImageDataset make_affine_digits(const ImageDataset& source, std::int64_t canvas,
                                       std::uint64_t params_seed, std::int64_t expansion = 1) {
    require_usage(source.channels == 1, "affine digits expects grayscale sources");
    require_usage(canvas >= source.height && canvas >= source.width,
                  cat("canvas ", canvas, " smaller than source ", source.height, "x",
                      source.width));
    require_usage(expansion >= 1, "expansion must be >= 1");

    ImageDataset out;
    out.height = canvas;
    out.width = canvas;
    out.channels = 1;
    out.levels = source.levels;
    out.num_classes = source.num_classes;
    const std::int64_t n_out = source.count() * expansion;
    out.pixels.reserve(static_cast<std::size_t>(n_out * canvas * canvas));
    for (std::int64_t i = 0; i < n_out; ++i) {
        const std::int64_t src_idx = i % source.count();
        Rng rng(derive_seed(params_seed, static_cast<std::uint64_t>(i)));
        AffineParams p = draw_affine_params(rng, source.height, source.width, canvas);
        // render in 256-level space so interpolation keeps full precision
        std::vector<std::uint8_t> wide(
            source.image(src_idx), source.image(src_idx) + source.pixels_per_image());
        if (source.levels != 256) {
            const int scale = 255 / (source.levels - 1);
            for (auto& v : wide) v = static_cast<std::uint8_t>(v * scale);
        }
        std::vector<std::uint8_t> img = render_affine(wide.data(), source.height, source.width, p);
        if (source.levels != 256) {
            for (auto& v : img)
                v = static_cast<std::uint8_t>((static_cast<int>(v) * source.levels) / 256);
        }
        out.pixels.insert(out.pixels.end(), img.begin(), img.end());
        out.labels.push_back(source.labels[static_cast<std::size_t>(src_idx)]);
        out.split.push_back(source.split.empty() ? SplitTag::Train
                                                 : source.split[static_cast<std::size_t>(src_idx)]);
    }
    out.check();
    return out;
}

}  // namespace repinv
