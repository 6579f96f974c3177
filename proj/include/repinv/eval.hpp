#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "repinv/graph.hpp"
#include "repinv/rng.hpp"
#include "repinv/tensor.hpp"

namespace repinv {

enum class Mode { Train, Infer };

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

// col layout: [C*kh*kw, OH*OW], one row per (channel, kernel tap).
inline void im2col(const double* x, std::int64_t C, std::int64_t H, std::int64_t W,
                   std::int64_t kh, std::int64_t kw, std::int64_t ph, std::int64_t pw,
                   std::int64_t OH, std::int64_t OW, double* col) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t dh = 0; dh < kh; ++dh) {
            for (std::int64_t dw = 0; dw < kw; ++dw) {
                double* dst = col + ((c * kh + dh) * kw + dw) * OH * OW;
                for (std::int64_t oh = 0; oh < OH; ++oh, dst += OW) {
                    const std::int64_t ih = oh + dh - ph;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + OW, 0.0);
                        continue;
                    }
                    const std::int64_t lo = std::max<std::int64_t>(0, pw - dw);
                    const std::int64_t hi = std::min<std::int64_t>(OW, W + pw - dw);
                    std::fill(dst, dst + lo, 0.0);
                    const double* src = x + (c * H + ih) * W + (lo + dw - pw);
                    std::copy(src, src + (hi - lo), dst + lo);
                    std::fill(dst + hi, dst + OW, 0.0);
                }
            }
        }
    }
}

inline void col2im_accum(const double* col, std::int64_t C, std::int64_t H, std::int64_t W,
                         std::int64_t kh, std::int64_t kw, std::int64_t ph, std::int64_t pw,
                         std::int64_t OH, std::int64_t OW, double* x) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t dh = 0; dh < kh; ++dh) {
            for (std::int64_t dw = 0; dw < kw; ++dw) {
                const double* src = col + ((c * kh + dh) * kw + dw) * OH * OW;
                for (std::int64_t oh = 0; oh < OH; ++oh, src += OW) {
                    const std::int64_t ih = oh + dh - ph;
                    if (ih < 0 || ih >= H) continue;
                    const std::int64_t lo = std::max<std::int64_t>(0, pw - dw);
                    const std::int64_t hi = std::min<std::int64_t>(OW, W + pw - dw);
                    double* dst = x + (c * H + ih) * W + (lo + dw - pw);
                    for (std::int64_t i = 0; i < hi - lo; ++i) dst[i] += src[lo + i];
                }
            }
        }
    }
}

// Raster-order causality mask over kernel taps. Taps strictly above the
// center row, or left of it in the center row, are always admitted. The
// center tap follows the channel-group order: mask A admits strictly earlier
// groups, mask B also admits the same group.
inline double mask_value(MaskKind kind, std::int64_t f, std::int64_t c, std::int64_t dh,
                         std::int64_t dw, std::int64_t kh, std::int64_t kw, std::int64_t F,
                         std::int64_t C, std::int64_t groups) {
    const std::int64_t ch = kh / 2, cw = kw / 2;
    if (dh < ch) return 1.0;
    if (dh > ch) return 0.0;
    if (dw < cw) return 1.0;
    if (dw > cw) return 0.0;
    const std::int64_t go = f * groups / F;
    const std::int64_t gi = c * groups / C;
    if (kind == MaskKind::A) return gi < go ? 1.0 : 0.0;
    return gi <= go ? 1.0 : 0.0;
}

inline std::vector<double> build_mask(MaskKind kind, const Shape& w_shape, std::int64_t groups) {
    const std::int64_t F = w_shape[0], C = w_shape[1], kh = w_shape[2], kw = w_shape[3];
    std::vector<double> mask(static_cast<std::size_t>(F * C * kh * kw));
    std::size_t i = 0;
    for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t dh = 0; dh < kh; ++dh)
                for (std::int64_t dw = 0; dw < kw; ++dw)
                    mask[i++] = mask_value(kind, f, c, dh, dw, kh, kw, F, C, groups);
    return mask;
}

inline void conv2d_forward(const Tensor& x, const double* w, const Shape& ws, Pad pad,
                           Tensor& y) {
    const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::int64_t F = ws[0], kh = ws[2], kw = ws[3];
    const std::int64_t ph = pad == Pad::Same ? kh / 2 : 0;
    const std::int64_t pw = pad == Pad::Same ? kw / 2 : 0;
    const std::int64_t OH = y.shape[2], OW = y.shape[3];
    const std::int64_t CK = C * kh * kw, P = OH * OW;
    std::vector<double> col(static_cast<std::size_t>(CK * P));
    CMapRM wm(w, F, CK);
    for (std::int64_t n = 0; n < N; ++n) {
        im2col(x.values.data() + n * C * H * W, C, H, W, kh, kw, ph, pw, OH, OW, col.data());
        CMapRM cm(col.data(), CK, P);
        MapRM ym(y.values.data() + n * F * P, F, P);
        ym.noalias() = wm * cm;
    }
}

inline void conv2d_backward(const Tensor& x, const double* w, const Shape& ws, Pad pad,
                            const Tensor& gy, Tensor* gx, double* gw) {
    const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::int64_t F = ws[0], kh = ws[2], kw = ws[3];
    const std::int64_t ph = pad == Pad::Same ? kh / 2 : 0;
    const std::int64_t pw = pad == Pad::Same ? kw / 2 : 0;
    const std::int64_t OH = gy.shape[2], OW = gy.shape[3];
    const std::int64_t CK = C * kh * kw, P = OH * OW;
    std::vector<double> col(static_cast<std::size_t>(CK * P));
    std::vector<double> dcol(static_cast<std::size_t>(CK * P));
    CMapRM wm(w, F, CK);
    MapRM gwm(gw, F, CK);
    for (std::int64_t n = 0; n < N; ++n) {
        im2col(x.values.data() + n * C * H * W, C, H, W, kh, kw, ph, pw, OH, OW, col.data());
        CMapRM cm(col.data(), CK, P);
        CMapRM gym(gy.values.data() + n * F * P, F, P);
        if (gw != nullptr) gwm.noalias() += gym * cm.transpose();
        if (gx != nullptr) {
            MapRM dcm(dcol.data(), CK, P);
            dcm.noalias() = wm.transpose() * gym;
            col2im_accum(dcol.data(), C, H, W, kh, kw, ph, pw, OH, OW,
                         gx->values.data() + n * C * H * W);
        }
    }
}

}  // namespace detail

struct Evaluation {
    Mode mode = Mode::Infer;
    std::uint64_t seed = 0;
    std::vector<Tensor> values;                     // one per node
    std::vector<std::vector<double>> drop_mask;     // dropout masks (train mode)
    std::vector<std::vector<std::int32_t>> argmax;  // pooling winners

    const Tensor& value(int node) const { return values[static_cast<std::size_t>(node)]; }
};

inline Evaluation eval(const Graph& graph, std::span<const Tensor> params,
                       const std::map<std::string, Tensor>& inputs, Mode mode,
                       std::uint64_t seed) {
    const auto& nodes = graph.nodes();
    require_graph(params.size() == graph.params().size(),
                  cat("expected ", graph.params().size(), " parameter tensors, got ", params.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        require_graph(shape_eq(params[i].shape, graph.params()[i].shape),
                      cat("parameter '", graph.params()[i].name, "' has shape ",
                          shape_str(params[i].shape), ", expected ",
                          shape_str(graph.params()[i].shape)));

    Evaluation ev;
    ev.mode = mode;
    ev.seed = seed;
    ev.values.resize(nodes.size());
    ev.drop_mask.resize(nodes.size());
    ev.argmax.resize(nodes.size());

    for (std::size_t id = 0; id < nodes.size(); ++id) {
        const Node& node = nodes[id];
        Tensor& out = ev.values[id];
        auto parent = [&](int k) -> const Tensor& {
            return ev.values[static_cast<std::size_t>(node.parents[static_cast<std::size_t>(k)])];
        };
        switch (node.op) {
            case Op::Input: {
                auto it = inputs.find(node.label);
                require_graph(it != inputs.end(), cat("input '", node.label, "' not bound"));
                require_graph(shape_eq(it->second.shape, node.shape),
                              cat("input '", node.label, "' has shape ", shape_str(it->second.shape),
                                  ", expected ", shape_str(node.shape)));
                out = it->second;
                break;
            }
            case Op::Param:
                out = params[static_cast<std::size_t>(node.slot)];
                break;
            case Op::Affine: {
                const Tensor& x = parent(0);
                const Tensor& w = parent(1);
                const Tensor& b = parent(2);
                out = Tensor(node.shape);
                CMapRM xm(x.values.data(), x.shape[0], x.shape[1]);
                CMapRM wm(w.values.data(), w.shape[0], w.shape[1]);
                MapRM om(out.values.data(), out.shape[0], out.shape[1]);
                om.noalias() = xm * wm;
                for (std::int64_t i = 0; i < out.shape[0]; ++i)
                    for (std::int64_t j = 0; j < out.shape[1]; ++j) out.at2(i, j) += b[j];
                break;
            }
            case Op::BiasAdd: {
                const Tensor& x = parent(0);
                const Tensor& b = parent(1);
                out = x;
                if (node.bias_mode == BiasMode::PerUnit) {
                    const std::int64_t N = x.shape[0], D = x.shape[1];
                    for (std::int64_t i = 0; i < N; ++i)
                        for (std::int64_t j = 0; j < D; ++j) out.at2(i, j) += b[j];
                } else {
                    const std::int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
                    for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t c = 0; c < C; ++c) {
                            const double add =
                                node.bias_mode == BiasMode::PerChannel ? b[c] : b[n * C + c];
                            double* p = out.values.data() + (n * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) p[i] += add;
                        }
                }
                break;
            }
            case Op::Conv2d: {
                out = Tensor(node.shape);
                detail::conv2d_forward(parent(0), parent(1).values.data(), parent(1).shape,
                                       node.pad, out);
                break;
            }
            case Op::MaskedConv2d: {
                const Tensor& w = parent(1);
                const std::vector<double> mask = detail::build_mask(node.mask, w.shape, node.groups);
                std::vector<double> wm(w.values.size());
                for (std::size_t i = 0; i < wm.size(); ++i) wm[i] = w.values[i] * mask[i];
                out = Tensor(node.shape);
                detail::conv2d_forward(parent(0), wm.data(), w.shape, Pad::Same, out);
                break;
            }
            case Op::Relu: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                for (std::int64_t i = 0; i < x.count(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
                break;
            }
            case Op::MaxPool2: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
                const std::int64_t OH = node.shape[2], OW = node.shape[3];
                auto& arg = ev.argmax[id];
                arg.resize(static_cast<std::size_t>(N * C * OH * OW));
                std::int64_t o = 0;
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t oh = 0; oh < OH; ++oh)
                            for (std::int64_t ow = 0; ow < OW; ++ow, ++o) {
                                double best = -1e308;
                                std::int32_t best_i = 0;
                                for (std::int64_t h = 2 * oh; h < std::min(2 * oh + 2, H); ++h)
                                    for (std::int64_t w = 2 * ow; w < std::min(2 * ow + 2, W); ++w) {
                                        const double v = x.at4(n, c, h, w);
                                        if (v > best) {
                                            best = v;
                                            best_i = static_cast<std::int32_t>(h * W + w);
                                        }
                                    }
                                out[o] = best;
                                arg[static_cast<std::size_t>(o)] = best_i;
                            }
                break;
            }
            case Op::GlobalMaxPool: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                const std::int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
                auto& arg = ev.argmax[id];
                arg.resize(static_cast<std::size_t>(N * C));
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double* p = x.values.data() + (n * C + c) * HW;
                        std::int64_t best_i = 0;
                        for (std::int64_t i = 1; i < HW; ++i)
                            if (p[i] > p[best_i]) best_i = i;
                        out[n * C + c] = p[best_i];
                        arg[static_cast<std::size_t>(n * C + c)] = static_cast<std::int32_t>(best_i);
                    }
                break;
            }
            case Op::Dropout: {
                const Tensor& x = parent(0);
                if (mode == Mode::Infer || node.rate == 0.0) {
                    out = x;
                    break;
                }
                out = Tensor(node.shape);
                auto& mask = ev.drop_mask[id];
                mask.resize(x.values.size());
                Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id) * 2 + 1));
                const double keep_scale = 1.0 / (1.0 - node.rate);
                for (std::size_t i = 0; i < mask.size(); ++i) {
                    mask[i] = rng.u01() < node.rate ? 0.0 : keep_scale;
                    out.values[i] = x.values[i] * mask[i];
                }
                break;
            }
            case Op::ResizeNearest: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
                const std::int64_t OH = node.shape[2], OW = node.shape[3];
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * H / OH;
                            for (std::int64_t ow = 0; ow < OW; ++ow)
                                out.at4(n, c, oh, ow) = x.at4(n, c, ih, ow * W / OW);
                        }
                break;
            }
            case Op::Reshape:
                out = Tensor(node.shape, parent(0).values);
                break;
            case Op::Add: {
                const Tensor& a = parent(0);
                const Tensor& b = parent(1);
                out = Tensor(node.shape);
                for (std::int64_t i = 0; i < a.count(); ++i) out[i] = a[i] + b[i];
                break;
            }
            case Op::Sub: {
                const Tensor& a = parent(0);
                const Tensor& b = parent(1);
                out = Tensor(node.shape);
                for (std::int64_t i = 0; i < a.count(); ++i) out[i] = a[i] - b[i];
                break;
            }
            case Op::Square: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                for (std::int64_t i = 0; i < x.count(); ++i) out[i] = x[i] * x[i];
                break;
            }
            case Op::Mean: {
                const Tensor& x = parent(0);
                double s = 0.0;
                for (double v : x.values) s += v;
                out = Tensor::scalar(s / static_cast<double>(x.count()));
                break;
            }
            case Op::LogSoftmax: {
                const Tensor& x = parent(0);
                out = Tensor(node.shape);
                const std::int64_t K = x.shape.back();
                const std::int64_t rows = x.count() / K;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.values.data() + r * K;
                    double* or_ = out.values.data() + r * K;
                    double mx = xr[0];
                    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
                    double lse = 0.0;
                    for (std::int64_t k = 0; k < K; ++k) lse += std::exp(xr[k] - mx);
                    lse = mx + std::log(lse);
                    for (std::int64_t k = 0; k < K; ++k) or_[k] = xr[k] - lse;
                }
                break;
            }
            case Op::XentRows: {
                const Tensor& logits = parent(0);
                const Tensor& labels = parent(1);
                const std::int64_t N = logits.shape[0], K = logits.shape[1];
                out = Tensor(node.shape);
                for (std::int64_t n = 0; n < N; ++n) {
                    const double yd = labels[n];
                    const std::int64_t y = static_cast<std::int64_t>(yd);
                    require_graph(yd == static_cast<double>(y) && y >= 0 && y < K,
                                  cat("label ", yd, " invalid for ", K, " classes at ",
                                      graph.node_label(static_cast<int>(id))));
                    const double* xr = logits.values.data() + n * K;
                    double mx = xr[0];
                    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
                    double lse = 0.0;
                    for (std::int64_t k = 0; k < K; ++k) lse += std::exp(xr[k] - mx);
                    out[n] = mx + std::log(lse) - xr[y];
                }
                break;
            }
            case Op::XentPixels: {
                const Tensor& logits = parent(0);
                const Tensor& targets = parent(1);
                const std::int64_t N = targets.shape[0], C = targets.shape[1];
                const std::int64_t H = targets.shape[2], W = targets.shape[3];
                const std::int64_t L = node.levels, HW = H * W;
                out = Tensor(node.shape);
                for (std::int64_t n = 0; n < N; ++n) {
                    double total = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t p = 0; p < HW; ++p) {
                            const double td = targets.values[(n * C + c) * HW + p];
                            const std::int64_t t = static_cast<std::int64_t>(td);
                            require_graph(td == static_cast<double>(t) && t >= 0 && t < L,
                                          cat("pixel value ", td, " outside ", L, " levels at ",
                                              graph.node_label(static_cast<int>(id))));
                            const double* base =
                                logits.values.data() + (n * C * L + c * L) * HW + p;
                            double mx = base[0];
                            for (std::int64_t l = 1; l < L; ++l)
                                mx = std::max(mx, base[l * HW]);
                            double lse = 0.0;
                            for (std::int64_t l = 0; l < L; ++l)
                                lse += std::exp(base[l * HW] - mx);
                            total += mx + std::log(lse) - base[t * HW];
                        }
                    out[n] = total;
                }
                break;
            }
            case Op::SampleCategorical: {
                const Tensor& logits = parent(0);
                const std::int64_t N = node.shape[0], C = node.shape[1];
                const std::int64_t H = node.shape[2], W = node.shape[3];
                const std::int64_t L = node.levels, HW = H * W;
                out = Tensor(node.shape);
                Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id) * 2));
                std::vector<double> probs(static_cast<std::size_t>(L));
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t p = 0; p < HW; ++p) {
                            const double* base =
                                logits.values.data() + (n * C * L + c * L) * HW + p;
                            double mx = base[0];
                            for (std::int64_t l = 1; l < L; ++l)
                                mx = std::max(mx, base[l * HW]);
                            double z = 0.0;
                            for (std::int64_t l = 0; l < L; ++l)
                                z += probs[static_cast<std::size_t>(l)] = std::exp(base[l * HW] - mx);
                            const double u = rng.u01() * z;
                            double acc = 0.0;
                            std::int64_t pick = L - 1;
                            for (std::int64_t l = 0; l < L; ++l) {
                                acc += probs[static_cast<std::size_t>(l)];
                                if (u < acc) {
                                    pick = l;
                                    break;
                                }
                            }
                            out.values[(n * C + c) * HW + p] = static_cast<double>(pick);
                        }
                break;
            }
        }
        if (!out.all_finite())
            throw NumericError(cat("non-finite value at ", graph.node_label(static_cast<int>(id))));
    }
    return ev;
}

// Reverse-mode gradients of a scalar output with respect to every parameter
// slot. Requires the forward Evaluation; deterministic (fixed accumulation
// order throughout).
inline std::vector<Tensor> backward(const Graph& graph, const Evaluation& ev, int output_node) {
    const auto& nodes = graph.nodes();
    require_graph(output_node >= 0 && output_node < static_cast<int>(nodes.size()),
                  "backward: output node out of range");
    require_graph(shape_count(nodes[static_cast<std::size_t>(output_node)].shape) == 1,
                  cat("backward requires a scalar output, got shape ",
                      shape_str(nodes[static_cast<std::size_t>(output_node)].shape), " at ",
                      graph.node_label(output_node)));

    // Mark ancestors of the output; gradients flow only through them.
    std::vector<bool> needed(nodes.size(), false);
    needed[static_cast<std::size_t>(output_node)] = true;
    for (int id = output_node; id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)]) continue;
        const Node& node = nodes[static_cast<std::size_t>(id)];
        require_graph(node.op != Op::SampleCategorical,
                      cat("cannot differentiate through sampling node ", graph.node_label(id)));
        // Discrete side inputs receive no gradient.
        const bool skip_second = node.op == Op::XentRows || node.op == Op::XentPixels;
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            if (skip_second && k == 1) continue;
            needed[static_cast<std::size_t>(node.parents[k])] = true;
        }
    }

    std::vector<Tensor> grads(nodes.size());
    auto grad_of = [&](int id) -> Tensor& {
        Tensor& g = grads[static_cast<std::size_t>(id)];
        if (g.values.empty()) g = Tensor(nodes[static_cast<std::size_t>(id)].shape);
        return g;
    };
    grad_of(output_node)[0] = 1.0;

    for (int id = output_node; id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)] ||
            grads[static_cast<std::size_t>(id)].values.empty())
            continue;
        const Node& node = nodes[static_cast<std::size_t>(id)];
        const Tensor& g = grads[static_cast<std::size_t>(id)];
        auto pval = [&](int k) -> const Tensor& {
            return ev.values[static_cast<std::size_t>(node.parents[static_cast<std::size_t>(k)])];
        };
        auto pgrad = [&](int k) -> Tensor& {
            return grad_of(node.parents[static_cast<std::size_t>(k)]);
        };
        switch (node.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Affine: {
                const Tensor& x = pval(0);
                const Tensor& w = pval(1);
                CMapRM gm(g.values.data(), g.shape[0], g.shape[1]);
                CMapRM xm(x.values.data(), x.shape[0], x.shape[1]);
                CMapRM wm(w.values.data(), w.shape[0], w.shape[1]);
                Tensor& gx = pgrad(0);
                Tensor& gw = pgrad(1);
                Tensor& gb = pgrad(2);
                MapRM gxm(gx.values.data(), gx.shape[0], gx.shape[1]);
                MapRM gwm(gw.values.data(), gw.shape[0], gw.shape[1]);
                gxm.noalias() += gm * wm.transpose();
                gwm.noalias() += xm.transpose() * gm;
                for (std::int64_t i = 0; i < g.shape[0]; ++i)
                    for (std::int64_t j = 0; j < g.shape[1]; ++j) gb[j] += g.at2(i, j);
                break;
            }
            case Op::BiasAdd: {
                Tensor& gx = pgrad(0);
                Tensor& gb = pgrad(1);
                for (std::int64_t i = 0; i < g.count(); ++i) gx[i] += g[i];
                if (node.bias_mode == BiasMode::PerUnit) {
                    const std::int64_t N = g.shape[0], D = g.shape[1];
                    for (std::int64_t i = 0; i < N; ++i)
                        for (std::int64_t j = 0; j < D; ++j) gb[j] += g.at2(i, j);
                } else {
                    const std::int64_t N = g.shape[0], C = g.shape[1], HW = g.shape[2] * g.shape[3];
                    for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t c = 0; c < C; ++c) {
                            const double* p = g.values.data() + (n * C + c) * HW;
                            double s = 0.0;
                            for (std::int64_t i = 0; i < HW; ++i) s += p[i];
                            if (node.bias_mode == BiasMode::PerChannel)
                                gb[c] += s;
                            else
                                gb[n * C + c] += s;
                        }
                }
                break;
            }
            case Op::Conv2d: {
                const Tensor& x = pval(0);
                const Tensor& w = pval(1);
                detail::conv2d_backward(x, w.values.data(), w.shape, node.pad, g, &pgrad(0),
                                        pgrad(1).values.data());
                break;
            }
            case Op::MaskedConv2d: {
                const Tensor& x = pval(0);
                const Tensor& w = pval(1);
                const std::vector<double> mask = detail::build_mask(node.mask, w.shape, node.groups);
                std::vector<double> wm(w.values.size());
                for (std::size_t i = 0; i < wm.size(); ++i) wm[i] = w.values[i] * mask[i];
                Tensor gw_raw(w.shape);
                detail::conv2d_backward(x, wm.data(), w.shape, Pad::Same, g, &pgrad(0),
                                        gw_raw.values.data());
                Tensor& gw = pgrad(1);
                for (std::size_t i = 0; i < wm.size(); ++i) gw.values[i] += gw_raw.values[i] * mask[i];
                break;
            }
            case Op::Relu: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                // subgradient at exactly 0 is 0
                for (std::int64_t i = 0; i < g.count(); ++i)
                    if (x[i] > 0) gx[i] += g[i];
                break;
            }
            case Op::MaxPool2: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                const std::int64_t C = x.shape[1], HW = x.shape[2] * x.shape[3];
                const std::int64_t OHW = node.shape[2] * node.shape[3];
                const auto& arg = ev.argmax[static_cast<std::size_t>(id)];
                for (std::int64_t n = 0; n < g.shape[0]; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t o = 0; o < OHW; ++o) {
                            const std::int64_t oi = (n * C + c) * OHW + o;
                            gx.values[(n * C + c) * HW + arg[static_cast<std::size_t>(oi)]] +=
                                g.values[oi];
                        }
                break;
            }
            case Op::GlobalMaxPool: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                const std::int64_t C = x.shape[1], HW = x.shape[2] * x.shape[3];
                const auto& arg = ev.argmax[static_cast<std::size_t>(id)];
                for (std::int64_t i = 0; i < g.count(); ++i)
                    gx.values[i * HW + arg[static_cast<std::size_t>(i)]] += g[i];
                break;
            }
            case Op::Dropout: {
                Tensor& gx = pgrad(0);
                const auto& mask = ev.drop_mask[static_cast<std::size_t>(id)];
                if (mask.empty()) {
                    for (std::int64_t i = 0; i < g.count(); ++i) gx[i] += g[i];
                } else {
                    for (std::int64_t i = 0; i < g.count(); ++i)
                        gx[i] += g[i] * mask[static_cast<std::size_t>(i)];
                }
                break;
            }
            case Op::ResizeNearest: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
                const std::int64_t OH = node.shape[2], OW = node.shape[3];
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * H / OH;
                            for (std::int64_t ow = 0; ow < OW; ++ow)
                                gx.at4(n, c, ih, ow * W / OW) += g.at4(n, c, oh, ow);
                        }
                break;
            }
            case Op::Reshape: {
                Tensor& gx = pgrad(0);
                for (std::int64_t i = 0; i < g.count(); ++i) gx[i] += g[i];
                break;
            }
            case Op::Add: {
                Tensor& ga = pgrad(0);
                Tensor& gb = pgrad(1);
                for (std::int64_t i = 0; i < g.count(); ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
                break;
            }
            case Op::Sub: {
                Tensor& ga = pgrad(0);
                Tensor& gb = pgrad(1);
                for (std::int64_t i = 0; i < g.count(); ++i) {
                    ga[i] += g[i];
                    gb[i] -= g[i];
                }
                break;
            }
            case Op::Square: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                for (std::int64_t i = 0; i < g.count(); ++i) gx[i] += 2.0 * x[i] * g[i];
                break;
            }
            case Op::Mean: {
                const Tensor& x = pval(0);
                Tensor& gx = pgrad(0);
                const double s = g[0] / static_cast<double>(x.count());
                for (std::int64_t i = 0; i < x.count(); ++i) gx[i] += s;
                break;
            }
            case Op::LogSoftmax: {
                const Tensor& y = ev.values[static_cast<std::size_t>(id)];
                Tensor& gx = pgrad(0);
                const std::int64_t K = y.shape.back();
                const std::int64_t rows = y.count() / K;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.values.data() + r * K;
                    const double* gr = g.values.data() + r * K;
                    double gsum = 0.0;
                    for (std::int64_t k = 0; k < K; ++k) gsum += gr[k];
                    double* gxr = gx.values.data() + r * K;
                    for (std::int64_t k = 0; k < K; ++k) gxr[k] += gr[k] - std::exp(yr[k]) * gsum;
                }
                break;
            }
            case Op::XentRows: {
                const Tensor& logits = pval(0);
                const Tensor& labels = pval(1);
                Tensor& gx = pgrad(0);
                const std::int64_t N = logits.shape[0], K = logits.shape[1];
                for (std::int64_t n = 0; n < N; ++n) {
                    const double* xr = logits.values.data() + n * K;
                    double mx = xr[0];
                    for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
                    double z = 0.0;
                    for (std::int64_t k = 0; k < K; ++k) z += std::exp(xr[k] - mx);
                    const std::int64_t y = static_cast<std::int64_t>(labels[n]);
                    double* gxr = gx.values.data() + n * K;
                    for (std::int64_t k = 0; k < K; ++k) {
                        double p = std::exp(xr[k] - mx) / z;
                        gxr[k] += g[n] * (p - (k == y ? 1.0 : 0.0));
                    }
                }
                break;
            }
            case Op::XentPixels: {
                const Tensor& logits = pval(0);
                const Tensor& targets = pval(1);
                Tensor& gx = pgrad(0);
                const std::int64_t N = targets.shape[0], C = targets.shape[1];
                const std::int64_t HW = targets.shape[2] * targets.shape[3];
                const std::int64_t L = node.levels;
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t p = 0; p < HW; ++p) {
                            const std::int64_t t = static_cast<std::int64_t>(
                                targets.values[(n * C + c) * HW + p]);
                            const double* base =
                                logits.values.data() + (n * C * L + c * L) * HW + p;
                            double* gbase = gx.values.data() + (n * C * L + c * L) * HW + p;
                            double mx = base[0];
                            for (std::int64_t l = 1; l < L; ++l)
                                mx = std::max(mx, base[l * HW]);
                            double z = 0.0;
                            for (std::int64_t l = 0; l < L; ++l) z += std::exp(base[l * HW] - mx);
                            for (std::int64_t l = 0; l < L; ++l) {
                                const double prob = std::exp(base[l * HW] - mx) / z;
                                gbase[l * HW] += g[n] * (prob - (l == t ? 1.0 : 0.0));
                            }
                        }
                break;
            }
            case Op::SampleCategorical:
                break;  // unreachable, rejected above
        }
    }

    std::vector<Tensor> result;
    result.reserve(graph.params().size());
    for (const ParamSlot& slot : graph.params()) {
        Tensor& g = grads[static_cast<std::size_t>(slot.node)];
        if (g.values.empty()) g = Tensor(slot.shape);
        result.push_back(std::move(g));
    }
    return result;
}

}  // namespace repinv
