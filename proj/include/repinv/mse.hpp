#pragma once

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
#include "repinv/inverter.hpp"

namespace repinv {

struct MseConfig {
    std::int64_t filters = 16;
    double lr = 1e-3;
    std::int64_t max_steps = 500;
    std::int64_t eval_every = 100;
    std::int64_t batch_size = 32;
    std::uint64_t seed = 0;
};

struct MseArch {
    std::string layer;
    Shape rep_shape;
    std::int64_t height = 0, width = 0, channels = 1;
    int levels = 16;
    std::int64_t filters = 16;
};

struct MseGraph {
    Graph graph;
    int recon = -1;  // [N,C,H,W], loss scale [0,1]
    int loss = -1;
};

// Point-estimate inversion baseline: dense projection from h to a coarse
// grid, then nearest-neighbor upsampling and conv blocks back to input size.
// The loss is mean squared error in [0,1] pixel scale.
inline MseGraph build_mse_graph(const MseArch& a, std::int64_t batch, bool with_loss) {
    MseGraph mg;
    Graph& g = mg.graph;
    const std::int64_t d = shape_count(a.rep_shape);
    const int h = g.input("h", {batch, d});
    const std::int64_t h0 = (a.height + 3) / 4, w0 = (a.width + 3) / 4;
    const std::int64_t h1 = (a.height + 1) / 2, w1 = (a.width + 1) / 2;

    const int w_proj = g.param("proj_w", {d, a.filters * h0 * w0}, double(d),
                               double(a.filters * h0 * w0));
    const int b_proj = g.param("proj_b", {a.filters * h0 * w0}, 0, 0);
    int t = g.relu(g.affine(h, w_proj, b_proj));
    t = g.reshape(t, {batch, a.filters, h0, w0});

    t = g.resize_nearest(t, h1, w1);
    const int w1c = g.param("up1_w", {a.filters, a.filters, 3, 3}, double(a.filters * 9),
                            double(a.filters * 9));
    const int b1c = g.param("up1_b", {a.filters}, 0, 0);
    t = g.relu(g.bias_add(g.conv2d(t, w1c, Pad::Same), b1c));

    t = g.resize_nearest(t, a.height, a.width);
    const int w2c = g.param("up2_w", {a.filters, a.filters, 3, 3}, double(a.filters * 9),
                            double(a.filters * 9));
    const int b2c = g.param("up2_b", {a.filters}, 0, 0);
    t = g.relu(g.bias_add(g.conv2d(t, w2c, Pad::Same), b2c));

    const int w_out = g.param("out_w", {a.channels, a.filters, 3, 3}, double(a.filters * 9),
                              double(a.channels * 9));
    const int b_out = g.param("out_b", {a.channels}, 0, 0);
    mg.recon = g.bias_add(g.conv2d(t, w_out, Pad::Same), b_out);
    g.mark_output("recon", mg.recon);

    if (with_loss) {
        const int target = g.input("target", {batch, a.channels, a.height, a.width});
        mg.loss = g.mean(g.square(g.sub(mg.recon, target)));
        g.mark_output("loss", mg.loss);
    }
    g.validate();
    return mg;
}

struct MseInverterModel {
    MseArch arch;
    std::vector<Tensor> params;
};

inline Tensor mse_rep_input(const MseArch& arch, const Tensor& h) {
    Shape expect = arch.rep_shape;
    expect.insert(expect.begin(), h.shape[0]);
    require_graph(h.rank() == 2 || shape_eq(h.shape, expect),
                  cat("representation shape ", shape_str(h.shape), " does not match tap '",
                      arch.layer, "' expectation ", shape_str(expect)));
    return flatten_rep(h);
}

// Deterministic reconstruction in [0,1] scale (unclamped, real-valued).
inline Tensor reconstruct(const MseInverterModel& model, const Tensor& h) {
    MseGraph mg = build_mse_graph(model.arch, h.shape[0], false);
    auto ev = eval(mg.graph, model.params, {{"h", mse_rep_input(model.arch, h)}}, Mode::Infer, 0);
    return ev.value(mg.recon);
}

// Rounds and clamps to [0, L-1] level values for export.
inline Tensor quantize_reconstruction(const Tensor& recon, int levels) {
    Tensor out = recon;
    for (auto& v : out.values)
        v = std::clamp(std::floor(v * (levels - 1) + 0.5), 0.0, double(levels - 1));
    return out;
}

struct MseTrainResult {
    MseInverterModel model;
    std::vector<TrainCurvePoint> curve;  // val_accuracy column carries val MSE
    double best_val_mse = 0.0;
};

inline MseTrainResult train_mse(const ClassifierModel& classifier, const std::string& layer,
                                const ImageDataset& data, const MseConfig& cfg) {
    require_usage(cfg.filters > 0 && cfg.batch_size > 0 && cfg.max_steps >= 0,
                  "mse config fields must be positive");
    const std::vector<std::int64_t> train_idx = data.indices_of(SplitTag::Train);
    const std::vector<std::int64_t> val_idx = data.indices_of(SplitTag::Val);
    require_usage(!train_idx.empty(), "dataset has no train split");

    MseTrainResult res;
    res.model.arch.layer = layer;
    res.model.arch.rep_shape = tap_shape(classifier.arch, layer);
    res.model.arch.height = data.height;
    res.model.arch.width = data.width;
    res.model.arch.channels = data.channels;
    res.model.arch.levels = data.levels;
    res.model.arch.filters = cfg.filters;
    const MseArch& arch = res.model.arch;

    MseGraph mg = build_mse_graph(arch, cfg.batch_size, true);
    std::vector<Tensor> params = init_params(mg.graph, derive_seed(cfg.seed, "mse-init"));
    AdamState adam = AdamState::for_params(params, cfg.lr);
    Rng batch_rng(derive_seed(cfg.seed, "mse-batches"));

    std::vector<std::int64_t> val_eval(val_idx.begin(),
                                       val_idx.begin() + std::min<std::size_t>(val_idx.size(), 512));
    std::vector<Tensor> best_params = params;
    double best_val = 1e300;

    for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
        std::vector<std::int64_t> batch(static_cast<std::size_t>(cfg.batch_size));
        for (auto& idx : batch)
            idx = train_idx[static_cast<std::size_t>(
                batch_rng.uniform_int(static_cast<std::int64_t>(train_idx.size())))];
        const Tensor target = make_batch(data, batch);  // [0,1] scale
        const Tensor h = extract(classifier, target, layer);
        Evaluation ev;
        try {
            ev = eval(mg.graph, params,
                      {{"h", mse_rep_input(arch, h)}, {"target", target}}, Mode::Train,
                      derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
        } catch (const NumericError& e) {
            throw NumericError(cat("mse training diverged at step ", step, ": ", e.what()));
        }
        const double loss = ev.value(mg.loss)[0];
        auto grads = backward(mg.graph, ev, mg.loss);
        adam_step(params, grads, adam);

        if ((step + 1) % cfg.eval_every == 0 && !val_eval.empty()) {
            res.model.params = params;
            const Tensor vt = make_batch(data, val_eval);
            const Tensor vh = extract(classifier, vt, layer);
            Tensor recon = reconstruct(res.model, vh);
            double mse = 0;
            for (std::int64_t i = 0; i < recon.count(); ++i) {
                const double d = recon[i] - vt[i];
                mse += d * d;
            }
            mse /= static_cast<double>(recon.count());
            res.curve.push_back({step + 1, loss, mse});
            if (mse < best_val) {
                best_val = mse;
                best_params = params;
            }
        }
    }
    if (best_val > 1e299) {
        best_params = params;
        best_val = 0.0;
    }
    res.model.params = std::move(best_params);
    res.best_val_mse = best_val;
    return res;
}

// ---- checkpoint io ----------------------------------------------------------

inline std::map<std::string, std::string> mse_descriptor(const MseArch& a) {
    std::map<std::string, std::string> d;
    d["kind"] = "mse_inverter";
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
    return d;
}

inline void save_mse(const MseInverterModel& model, const std::string& path) {
    save_checkpoint_file(path, mse_descriptor(model.arch), model.params);
}

inline MseInverterModel load_mse(const std::string& path) {
    Checkpoint ckpt = load_checkpoint_file(path);
    ckpt.expect("kind", "mse_inverter");
    MseArch a;
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
    MseGraph mg = build_mse_graph(a, 1, true);
    MseInverterModel model;
    model.arch = a;
    model.params = params_from_blobs(mg.graph.params(), ckpt, path);
    return model;
}

}  // namespace repinv
