#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repinv/adam.hpp"
#include "repinv/checkpoint.hpp"
#include "repinv/classifier.hpp"
#include "repinv/data.hpp"
#include "repinv/eval.hpp"
#include "repinv/graph.hpp"

namespace repinv {

enum class Conditioning { VectorBias, SpatialBias };

inline const char* conditioning_name(Conditioning c) {
    return c == Conditioning::VectorBias ? "vector_bias" : "spatial_bias";
}

inline Conditioning parse_conditioning(const std::string& s) {
    if (s == "vector_bias") return Conditioning::VectorBias;
    if (s == "spatial_bias") return Conditioning::SpatialBias;
    throw UsageError(cat("unknown conditioning mode '", s, "'"));
}

struct InversionConfig {
    std::int64_t filters = 32;
    std::int64_t blocks = 2;        // residual mask-B blocks after the mask-A layer
    std::int64_t kernel0 = 5;       // first (mask A) layer
    std::int64_t kernel = 3;        // block layers
    std::string conditioning = "auto";  // auto | vector_bias | spatial_bias
    double dropout = 0.5;           // one dropout layer inside each residual block
    double context_dropout = 0.0;   // optional dropout on the conditioning input
    double lr = 3e-4;
    std::int64_t max_steps = 1000;
    std::int64_t eval_every = 100;
    std::int64_t patience = 1 << 30;  // validation NLL tracked; stopping optional
    std::int64_t batch_size = 32;
    std::uint64_t seed = 0;

    void check() const {
        require_usage(filters > 0 && blocks >= 0 && batch_size > 0, "inverter sizes must be positive");
        require_usage(kernel0 % 2 == 1 && kernel % 2 == 1, "inverter kernels must be odd");
        require_usage(dropout >= 0 && dropout < 1 && context_dropout >= 0 && context_dropout < 1,
                      "dropout rates must be in [0,1)");
    }
};

// Everything needed to rebuild the model graphs; embedded in checkpoints.
struct InverterArch {
    std::string layer;  // classifier tap this model inverts
    Shape rep_shape;    // expected representation shape, without batch dim
    std::int64_t height = 0, width = 0, channels = 1;
    int levels = 16;
    std::int64_t filters = 32, blocks = 2, kernel0 = 5, kernel = 3;
    Conditioning cond = Conditioning::VectorBias;
    double dropout = 0.5, context_dropout = 0.0;

    int groups() const { return channels == 3 ? 3 : 1; }
    double uniform_nll() const {
        return static_cast<double>(height * width * channels) * std::log(double(levels));
    }
};

struct InverterGraph {
    Graph graph;
    int nll = -1;     // per-example negative log-likelihood [N]
    int loss = -1;    // mean nll
    int logits = -1;  // [N, C*L, H, W]
    int sample = -1;  // only in the sampling graph
};

namespace detail {

// One conditioning injection: a per-layer projection of h added to the
// feature maps (vector contexts become per-example channel biases; spatial
// contexts are resized and passed through a 1x1 convolution).
inline int conditioned(Graph& g, int features, int h_node, const InverterArch& a, int site) {
    const std::string tag = cat("cond", site);
    if (a.cond == Conditioning::VectorBias) {
        const std::int64_t d = shape_count(a.rep_shape);
        const int w = g.param(tag + "_w", {d, a.filters}, double(d), double(a.filters));
        const int b = g.param(tag + "_b", {a.filters}, 0, 0);
        const int proj = g.affine(h_node, w, b);  // [N, F]
        return g.bias_add(features, proj);
    }
    const Shape& hs = g.shape_of(h_node);
    const int resized = g.resize_nearest(h_node, a.height, a.width);
    const int w = g.param(tag + "_w", {a.filters, hs[1], 1, 1}, double(hs[1]), double(a.filters));
    const int proj = g.conv2d(resized, w, Pad::Same);
    return g.add(features, proj);
}

}  // namespace detail

// Masked-convolution stack: one mask-A layer (kernel0), then residual mask-B
// blocks (kernel), a conditioning injection after every masked convolution,
// and a 1x1 mask-B head emitting L logits per pixel and channel.
inline InverterGraph build_inverter_graph(const InverterArch& a, std::int64_t batch,
                                          bool with_loss, bool with_sampler) {
    InverterGraph ig;
    Graph& g = ig.graph;
    const int groups = a.groups();
    const int x = g.input("x", {batch, a.channels, a.height, a.width});

    int h_node;
    if (a.cond == Conditioning::VectorBias) {
        h_node = g.input("h", {batch, shape_count(a.rep_shape)});
    } else {
        require_usage(a.rep_shape.size() == 3,
                      cat("spatial conditioning needs a rank-3 representation, tap '", a.layer,
                          "' has shape ", shape_str(a.rep_shape)));
        h_node = g.input("h", {batch, a.rep_shape[0], a.rep_shape[1], a.rep_shape[2]});
    }
    if (a.context_dropout > 0) h_node = g.dropout(h_node, a.context_dropout);

    int site = 0;
    const int w0 = g.param("l0_w", {a.filters, a.channels, a.kernel0, a.kernel0},
                           double(a.channels * a.kernel0 * a.kernel0),
                           double(a.filters * a.kernel0 * a.kernel0));
    const int b0 = g.param("l0_b", {a.filters}, 0, 0);
    int r = g.bias_add(g.masked_conv2d(x, w0, MaskKind::A, groups), b0);
    r = g.relu(detail::conditioned(g, r, h_node, a, site++));

    for (std::int64_t blk = 0; blk < a.blocks; ++blk) {
        const double fan = double(a.filters * a.kernel * a.kernel);
        const int w1 = g.param(cat("blk", blk, "_w1"), {a.filters, a.filters, a.kernel, a.kernel},
                               fan, fan);
        const int b1 = g.param(cat("blk", blk, "_b1"), {a.filters}, 0, 0);
        int u = g.bias_add(g.masked_conv2d(r, w1, MaskKind::B, groups), b1);
        u = g.relu(detail::conditioned(g, u, h_node, a, site++));
        if (a.dropout > 0) u = g.dropout(u, a.dropout);
        const int w2 = g.param(cat("blk", blk, "_w2"), {a.filters, a.filters, a.kernel, a.kernel},
                               fan, fan);
        const int b2 = g.param(cat("blk", blk, "_b2"), {a.filters}, 0, 0);
        int v = g.bias_add(g.masked_conv2d(u, w2, MaskKind::B, groups), b2);
        v = detail::conditioned(g, v, h_node, a, site++);
        r = g.relu(g.add(r, v));
    }

    const std::int64_t head_out = a.channels * a.levels;
    const int wh = g.param("head_w", {head_out, a.filters, 1, 1}, double(a.filters),
                           double(head_out));
    const int bh = g.param("head_b", {head_out}, 0, 0);
    ig.logits = g.bias_add(g.masked_conv2d(r, wh, MaskKind::B, groups), bh);
    g.mark_output("logits", ig.logits);

    if (with_loss) {
        const int targets = g.input("targets", {batch, a.channels, a.height, a.width});
        ig.nll = g.xent_pixels(ig.logits, targets, a.levels);
        ig.loss = g.mean(ig.nll);
        g.mark_output("nll", ig.nll);
        g.mark_output("loss", ig.loss);
    }
    if (with_sampler) {
        ig.sample = g.sample_categorical(ig.logits, a.levels);
        g.mark_output("sample", ig.sample);
    }
    g.validate();
    return ig;
}

struct InversionModel {
    InverterArch arch;
    std::vector<Tensor> params;
};

// ---- input plumbing ---------------------------------------------------------

// Masked convs read pixels centered to [-0.5, 0.5]; targets stay integral.
inline Tensor center_levels(const Tensor& raw, int levels) {
    Tensor t = raw;
    const double scale = 1.0 / static_cast<double>(levels - 1);
    for (auto& v : t.values) v = v * scale - 0.5;
    return t;
}

inline Tensor raw_batch(const ImageDataset& ds, const std::vector<std::int64_t>& indices) {
    Tensor t({static_cast<std::int64_t>(indices.size()), ds.channels, ds.height, ds.width});
    std::int64_t o = 0;
    for (std::int64_t idx : indices) {
        const std::uint8_t* img = ds.image(idx);
        for (std::int64_t c = 0; c < ds.channels; ++c)
            for (std::int64_t p = 0; p < ds.height * ds.width; ++p)
                t[o++] = static_cast<double>(img[p * ds.channels + c]);
    }
    return t;
}

inline Tensor flatten_rep(const Tensor& h) {
    if (h.rank() == 2) return h;
    Shape s{h.shape[0], 1};
    for (std::size_t i = 1; i < h.shape.size(); ++i) s[1] *= h.shape[i];
    return Tensor(s, h.values);
}

inline std::map<std::string, Tensor> bind_inputs(const InverterArch& arch, const Tensor& raw,
                                                 const Tensor& h, bool with_targets) {
    Shape expect = arch.rep_shape;
    expect.insert(expect.begin(), raw.shape[0]);
    require_graph(shape_eq(h.shape, expect),
                  cat("representation shape ", shape_str(h.shape), " does not match tap '",
                      arch.layer, "' expectation ", shape_str(expect)));
    std::map<std::string, Tensor> inputs;
    inputs["x"] = center_levels(raw, arch.levels);
    inputs["h"] = arch.cond == Conditioning::VectorBias ? flatten_rep(h) : h;
    if (with_targets) inputs["targets"] = raw;
    return inputs;
}

// ---- exact log-density ------------------------------------------------------

// Teacher-forced exact log p(x|h) in nats for a batch of quantized images
// (raw level values in [0, L)).
inline std::vector<double> log_prob_batch(const InversionModel& model, const Tensor& raw,
                                          const Tensor& h) {
    InverterGraph ig = build_inverter_graph(model.arch, raw.shape[0], true, false);
    auto ev = eval(ig.graph, model.params, bind_inputs(model.arch, raw, h, true), Mode::Infer, 0);
    std::vector<double> out(ev.value(ig.nll).values);
    for (auto& v : out) v = -v;
    return out;
}

inline double log_prob(const InversionModel& model, const Tensor& raw, const Tensor& h) {
    return log_prob_batch(model, raw, h)[0];
}

// ---- training ---------------------------------------------------------------

struct InverterTrainResult {
    InversionModel model;
    std::vector<TrainCurvePoint> curve;  // val_accuracy column carries val NLL
    double best_val_nll = 0.0;
    std::int64_t steps_run = 0;
};

inline Conditioning resolve_conditioning(const std::string& mode, const Shape& rep_shape) {
    if (mode == "auto") {
        return rep_shape.size() == 3 ? Conditioning::SpatialBias : Conditioning::VectorBias;
    }
    return parse_conditioning(mode);
}

inline InverterArch inverter_arch(const ClassifierModel& classifier, const std::string& layer,
                                  const InversionConfig& cfg) {
    InverterArch a;
    a.layer = layer;
    a.rep_shape = tap_shape(classifier.arch, layer);
    a.height = classifier.arch.height;
    a.width = classifier.arch.width;
    a.channels = classifier.arch.channels;
    a.levels = classifier.arch.levels;
    a.filters = cfg.filters;
    a.blocks = cfg.blocks;
    a.kernel0 = cfg.kernel0;
    a.kernel = cfg.kernel;
    a.cond = resolve_conditioning(cfg.conditioning, a.rep_shape);
    a.dropout = cfg.dropout;
    a.context_dropout = cfg.context_dropout;
    if (a.channels == 3)
        require_usage(a.filters % 3 == 0, "color inverters need filters divisible by 3");
    return a;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Maximum-likelihood training of p(x|h) against a frozen classifier; (x, h)
// pairs are generated on the fly by extract. Deterministic per seed.
inline InverterTrainResult train_inverter(const ClassifierModel& classifier,
                                          const std::string& layer, const ImageDataset& data,
                                          const InversionConfig& cfg) {
    cfg.check();
    require_usage(data.levels == classifier.arch.levels,
                  cat("dataset levels ", data.levels, " != classifier levels ",
                      classifier.arch.levels));
    const std::vector<std::int64_t> train_idx = data.indices_of(SplitTag::Train);
    const std::vector<std::int64_t> val_idx = data.indices_of(SplitTag::Val);
    require_usage(!train_idx.empty(), "dataset has no train split");

    InverterTrainResult res;
    res.model.arch = inverter_arch(classifier, layer, cfg);
    const InverterArch& arch = res.model.arch;
    InverterGraph ig = build_inverter_graph(arch, cfg.batch_size, true, false);
    std::vector<Tensor> params = init_params(ig.graph, derive_seed(cfg.seed, "inverter-init"));
    AdamState adam = AdamState::for_params(params, cfg.lr);
    Rng batch_rng(derive_seed(cfg.seed, "inverter-batches"));

    // held-out NLL is evaluated on a fixed prefix of the val split
    std::vector<std::int64_t> val_eval(val_idx.begin(),
                                       val_idx.begin() + std::min<std::size_t>(val_idx.size(), 512));

    std::vector<Tensor> best_params = params;
    double best_val = 1e300;
    std::int64_t bad_checks = 0;
    double loss_accum = 0;
    std::int64_t loss_count = 0;

    for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
        std::vector<std::int64_t> batch(static_cast<std::size_t>(cfg.batch_size));
        for (auto& idx : batch)
            idx = train_idx[static_cast<std::size_t>(
                batch_rng.uniform_int(static_cast<std::int64_t>(train_idx.size())))];
        const Tensor raw = raw_batch(data, batch);
        const Tensor h = extract(classifier, make_batch(data, batch), layer);
        auto inputs = bind_inputs(arch, raw, h, true);  // checks rep-shape drift per batch
        Evaluation ev;
        try {
            ev = eval(ig.graph, params, inputs, Mode::Train,
                      derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
        } catch (const NumericError& e) {
            throw NumericError(cat("inverter training diverged at step ", step, ": ", e.what()));
        }
        loss_accum += ev.value(ig.loss)[0];
        loss_count += 1;
        auto grads = backward(ig.graph, ev, ig.loss);
        adam_step(params, grads, adam);
        res.steps_run = step + 1;

        if ((step + 1) % cfg.eval_every == 0 && !val_eval.empty()) {
            res.model.params = params;
            const Tensor vraw = raw_batch(data, val_eval);
            const Tensor vh = extract(classifier, make_batch(data, val_eval), layer);
            std::vector<double> lp = log_prob_batch(res.model, vraw, vh);
            double val_nll = -mean_of(lp);
            res.curve.push_back({step + 1, loss_accum / double(loss_count), val_nll});
            loss_accum = 0;
            loss_count = 0;
            if (val_nll < best_val) {
                best_val = val_nll;
                best_params = params;
                bad_checks = 0;
            } else if (++bad_checks >= cfg.patience) {
                break;
            }
        }
    }
    if (best_val > 1e299) {
        best_params = params;
        best_val = 0.0;
    }
    res.model.params = std::move(best_params);
    res.best_val_nll = best_val;
    return res;
}

// ---- ancestral sampling -----------------------------------------------------

// Raster-order ancestral sampling (left to right, top to bottom, channels
// R->G->B within a pixel). Returns raw level values [N,C,H,W]; deterministic
// per (h, seed).
inline Tensor sample(const InversionModel& model, const Tensor& h, std::uint64_t seed) {
    const InverterArch& a = model.arch;
    const std::int64_t n = h.shape[0];
    InverterGraph ig = build_inverter_graph(a, n, false, true);
    Tensor raw({n, a.channels, a.height, a.width});
    const std::int64_t hw = a.height * a.width;
    std::int64_t step = 0;
    for (std::int64_t p = 0; p < hw; ++p) {
        for (std::int64_t c = 0; c < a.channels; ++c, ++step) {
            auto inputs = bind_inputs(model.arch, raw, h, false);
            auto ev = eval(ig.graph, model.params, inputs, Mode::Infer,
                           derive_seed(seed, static_cast<std::uint64_t>(step)));
            const Tensor& drawn = ev.value(ig.sample);
            for (std::int64_t i = 0; i < n; ++i)
                raw.values[(i * a.channels + c) * hw + p] =
                    drawn.values[(i * a.channels + c) * hw + p];
        }
    }
    return raw;
}

// ---- exhaustive enumeration oracle ------------------------------------------

// Probability table over every possible image; tiny state spaces only.
inline std::vector<double> enumerate_density(const InversionModel& model, const Tensor& h) {
    const InverterArch& a = model.arch;
    require_usage(h.shape[0] == 1, "enumerate_density expects a single representation");
    const std::int64_t positions = a.height * a.width * a.channels;
    const std::int64_t cap = std::int64_t(1) << 20;
    std::int64_t total = 1;
    for (std::int64_t p = 0; p < positions; ++p) {
        require_usage(total <= cap / a.levels,
                      cat("state space ", a.levels, "^", positions, " exceeds 2^20"));
        total *= a.levels;
    }

    std::vector<double> probs(static_cast<std::size_t>(total));
    const std::int64_t chunk = 256;
    const std::int64_t hw = a.height * a.width;
    for (std::int64_t start = 0; start < total; start += chunk) {
        const std::int64_t m = std::min(chunk, total - start);
        Tensor raw({m, a.channels, a.height, a.width});
        for (std::int64_t i = 0; i < m; ++i) {
            std::int64_t code = start + i;
            // raster order: position-major, channel innermost
            for (std::int64_t p = 0; p < positions; ++p) {
                const std::int64_t level = code % a.levels;
                code /= a.levels;
                const std::int64_t pix = p / a.channels, c = p % a.channels;
                raw.values[(i * a.channels + c) * hw + pix] = static_cast<double>(level);
            }
        }
        // replicate h across the chunk
        Shape hs = h.shape;
        hs[0] = m;
        Tensor hb(hs);
        const std::int64_t per = h.count();
        for (std::int64_t i = 0; i < m; ++i)
            std::copy(h.values.begin(), h.values.end(), hb.values.begin() + i * per);
        std::vector<double> lp = log_prob_batch(model, raw, hb);
        for (std::int64_t i = 0; i < m; ++i)
            probs[static_cast<std::size_t>(start + i)] = std::exp(lp[static_cast<std::size_t>(i)]);
    }
    return probs;
}

// ---- checkpoint io ----------------------------------------------------------

inline std::map<std::string, std::string> inverter_descriptor(const InverterArch& a) {
    std::map<std::string, std::string> d;
    d["kind"] = "inverter";
    d["layer"] = a.layer;
    std::string rep;
    for (std::size_t i = 0; i < a.rep_shape.size(); ++i)
        rep += (i ? "," : "") + std::to_string(a.rep_shape[i]);
    d["rep_shape"] = rep;
    d["height"] = std::to_string(a.height);
    d["width"] = std::to_string(a.width);
    d["channels"] = std::to_string(a.channels);
    d["levels"] = std::to_string(a.levels);
    d["filters"] = std::to_string(a.filters);
    d["blocks"] = std::to_string(a.blocks);
    d["kernel0"] = std::to_string(a.kernel0);
    d["kernel"] = std::to_string(a.kernel);
    d["conditioning"] = conditioning_name(a.cond);
    d["dropout"] = std::to_string(a.dropout);
    d["context_dropout"] = std::to_string(a.context_dropout);
    return d;
}

inline void save_inverter(const InversionModel& model, const std::string& path) {
    save_checkpoint_file(path, inverter_descriptor(model.arch), model.params);
}

inline InversionModel inverter_from_checkpoint(const Checkpoint& ckpt, const std::string& origin) {
    ckpt.expect("kind", "inverter");
    InverterArch a;
    a.layer = ckpt.field("layer");
    const std::string rep = ckpt.field("rep_shape");
    std::size_t pos = 0;
    while (pos < rep.size()) {
        std::size_t comma = rep.find(',', pos);
        if (comma == std::string::npos) comma = rep.size();
        a.rep_shape.push_back(std::stoll(rep.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    a.height = ckpt.field_i64("height");
    a.width = ckpt.field_i64("width");
    a.channels = ckpt.field_i64("channels");
    a.levels = static_cast<int>(ckpt.field_i64("levels"));
    a.filters = ckpt.field_i64("filters");
    a.blocks = ckpt.field_i64("blocks");
    a.kernel0 = ckpt.field_i64("kernel0");
    a.kernel = ckpt.field_i64("kernel");
    a.cond = parse_conditioning(ckpt.field("conditioning"));
    a.dropout = ckpt.field_f64("dropout");
    a.context_dropout = ckpt.field_f64("context_dropout");
    InverterGraph ig = build_inverter_graph(a, 1, true, false);
    InversionModel model;
    model.arch = a;
    model.params = params_from_blobs(ig.graph.params(), ckpt, origin);
    return model;
}

inline InversionModel load_inverter(const std::string& path) {
    return inverter_from_checkpoint(load_checkpoint_file(path), path);
}

}  // namespace repinv
