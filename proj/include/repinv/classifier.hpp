#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "repinv/adam.hpp"
#include "repinv/checkpoint.hpp"
#include "repinv/data.hpp"
#include "repinv/eval.hpp"
#include "repinv/graph.hpp"

namespace repinv {

enum class ClassifierVariant { Baseline, GlobalPool, FullyConnected };

inline const char* variant_name(ClassifierVariant v) {
    switch (v) {
        case ClassifierVariant::Baseline: return "baseline";
        case ClassifierVariant::GlobalPool: return "global_pool";
        case ClassifierVariant::FullyConnected: return "fully_connected";
    }
    return "?";
}

inline ClassifierVariant parse_variant(const std::string& s) {
    if (s == "baseline") return ClassifierVariant::Baseline;
    if (s == "global_pool") return ClassifierVariant::GlobalPool;
    if (s == "fully_connected") return ClassifierVariant::FullyConnected;
    throw UsageError(cat("unknown classifier variant '", s, "'"));
}

struct ClassifierConfig {
    ClassifierVariant variant = ClassifierVariant::Baseline;
    std::int64_t c1 = 32;
    std::int64_t c2 = 32;
    std::int64_t fc3_units = 256;
    std::int64_t fc_width = 2048;
    double dropout_conv = 0.2;
    double dropout_fc = 0.5;
    bool dropout_enabled = true;
    double lr = 3e-4;
    std::int64_t max_steps = 10000;
    std::int64_t patience = 10;    // validation checks without improvement
    std::int64_t eval_every = 200;
    std::int64_t batch_size = 64;
    std::int64_t train_subset = 0;  // 0 = full train split (overfit regime uses e.g. 100)
    std::vector<std::int64_t> checkpoint_steps;  // sorted, first entry 0 when present
    std::uint64_t seed = 0;

    void check() const {
        require_usage(c1 > 0 && c2 > 0 && fc3_units > 0 && fc_width > 0 && batch_size > 0,
                      "classifier sizes and batch size must be positive");
        require_usage(max_steps >= 0 && eval_every > 0 && patience > 0,
                      "classifier schedule fields must be positive");
        if (!checkpoint_steps.empty()) {
            require_usage(checkpoint_steps.front() == 0, "checkpoint schedule must start at 0");
            for (std::size_t i = 1; i < checkpoint_steps.size(); ++i)
                require_usage(checkpoint_steps[i] > checkpoint_steps[i - 1],
                              "checkpoint schedule must be strictly ascending");
        }
    }
};

// Architecture description embedded in checkpoints; everything needed to
// rebuild the computation graphs.
struct ClassifierArch {
    ClassifierVariant variant = ClassifierVariant::Baseline;
    std::int64_t height = 0, width = 0, channels = 1;
    int levels = 16;
    int num_classes = 10;
    std::int64_t c1 = 32, c2 = 32, fc3_units = 256, fc_width = 2048;
    double dropout_conv = 0.2, dropout_fc = 0.5;
    bool dropout_enabled = true;
};

inline const std::vector<std::string>& tap_names() {
    static const std::vector<std::string> names = {"CONV1", "CONV2", "FC3", "LOGITS"};
    return names;
}

struct ClassifierGraph {
    Graph graph;
    std::map<std::string, int> taps;
    int logits = -1;
    int loss = -1;   // only when built with labels
    int nll = -1;    // per-example xent
};

// Two conv-relu-pool blocks (kernel 5, no padding), one fully connected
// layer, linear logits; taps after each block's nonlinearity and pooling.
// The global_pool variant max-pools CONV2 over space before FC3; the
// fully_connected variant swaps conv blocks for fc_width dense layers.
inline ClassifierGraph build_classifier_graph(const ClassifierArch& a, std::int64_t batch,
                                              bool with_loss) {
    ClassifierGraph cg;
    Graph& g = cg.graph;
    const int x = g.input("x", {batch, a.channels, a.height, a.width});
    auto drop = [&](int node, double rate) {
        return a.dropout_enabled && rate > 0 ? g.dropout(node, rate) : node;
    };

    int fc3_in = -1;
    std::int64_t fc3_in_dim = 0;
    if (a.variant == ClassifierVariant::FullyConnected) {
        const std::int64_t d_in = a.channels * a.height * a.width;
        const int flat = g.reshape(x, {batch, d_in});
        const int w1 = g.param("fc1_w", {d_in, a.fc_width}, double(d_in), double(a.fc_width));
        const int b1 = g.param("fc1_b", {a.fc_width}, 0, 0);
        const int t1 = g.relu(g.affine(flat, w1, b1));
        cg.taps["CONV1"] = t1;
        const int d1 = drop(t1, a.dropout_fc);
        const int w2 = g.param("fc2_w", {a.fc_width, a.fc_width}, double(a.fc_width),
                               double(a.fc_width));
        const int b2 = g.param("fc2_b", {a.fc_width}, 0, 0);
        const int t2 = g.relu(g.affine(d1, w2, b2));
        cg.taps["CONV2"] = t2;
        fc3_in = drop(t2, a.dropout_fc);
        fc3_in_dim = a.fc_width;
    } else {
        const int w1 = g.param("conv1_w", {a.c1, a.channels, 5, 5}, double(a.channels * 25),
                               double(a.c1 * 25));
        const int b1 = g.param("conv1_b", {a.c1}, 0, 0);
        const int c1 = g.max_pool2(g.relu(g.bias_add(g.conv2d(x, w1, Pad::Valid), b1)));
        cg.taps["CONV1"] = c1;
        const int d1 = drop(c1, a.dropout_conv);
        const int w2 = g.param("conv2_w", {a.c2, a.c1, 5, 5}, double(a.c1 * 25),
                               double(a.c2 * 25));
        const int b2 = g.param("conv2_b", {a.c2}, 0, 0);
        const int c2 = g.max_pool2(g.relu(g.bias_add(g.conv2d(d1, w2, Pad::Valid), b2)));
        cg.taps["CONV2"] = c2;
        const int d2 = drop(c2, a.dropout_conv);
        if (a.variant == ClassifierVariant::GlobalPool) {
            fc3_in = g.global_max_pool(d2);
            fc3_in_dim = a.c2;
        } else {
            const Shape& s = g.shape_of(d2);
            fc3_in_dim = s[1] * s[2] * s[3];
            fc3_in = g.reshape(d2, {batch, fc3_in_dim});
        }
    }

    const int w3 = g.param("fc3_w", {fc3_in_dim, a.fc3_units}, double(fc3_in_dim),
                           double(a.fc3_units));
    const int b3 = g.param("fc3_b", {a.fc3_units}, 0, 0);
    const int fc3 = g.relu(g.affine(fc3_in, w3, b3));
    cg.taps["FC3"] = fc3;
    const int d3 = drop(fc3, a.dropout_fc);
    const int w4 = g.param("out_w", {a.fc3_units, static_cast<std::int64_t>(a.num_classes)},
                           double(a.fc3_units), double(a.num_classes));
    const int b4 = g.param("out_b", {static_cast<std::int64_t>(a.num_classes)}, 0, 0);
    cg.logits = g.affine(d3, w4, b4);
    cg.taps["LOGITS"] = cg.logits;
    g.mark_output("logits", cg.logits);
    for (const auto& [name, node] : cg.taps) g.mark_output(name, node);

    if (with_loss) {
        const int labels = g.input("labels", {batch});
        cg.nll = g.xent_rows(cg.logits, labels);
        cg.loss = g.mean(cg.nll);
        g.mark_output("loss", cg.loss);
    }
    g.validate();
    return cg;
}

struct ClassifierModel {
    ClassifierArch arch;
    std::vector<Tensor> params;
};

// Pixel batch scaled to [0,1] by (levels - 1).
inline Tensor make_batch(const ImageDataset& ds, const std::vector<std::int64_t>& indices) {
    Tensor t({static_cast<std::int64_t>(indices.size()), ds.channels, ds.height, ds.width});
    const double scale = 1.0 / static_cast<double>(ds.levels - 1);
    std::int64_t o = 0;
    for (std::int64_t idx : indices) {
        const std::uint8_t* img = ds.image(idx);
        // dataset layout is HWC; graphs use CHW
        for (std::int64_t c = 0; c < ds.channels; ++c)
            for (std::int64_t p = 0; p < ds.height * ds.width; ++p)
                t[o++] = static_cast<double>(img[p * ds.channels + c]) * scale;
    }
    return t;
}

inline Tensor make_label_batch(const ImageDataset& ds, const std::vector<std::int64_t>& indices) {
    Tensor t({static_cast<std::int64_t>(indices.size())});
    for (std::size_t i = 0; i < indices.size(); ++i)
        t[static_cast<std::int64_t>(i)] =
            static_cast<double>(ds.labels[static_cast<std::size_t>(indices[i])]);
    return t;
}

// Representation tap on a pixel batch; dropout disabled (infer mode).
inline Tensor extract(const ClassifierModel& model, const Tensor& batch,
                      const std::string& layer) {
    require_usage(std::find(tap_names().begin(), tap_names().end(), layer) != tap_names().end(),
                  cat("unknown tap '", layer, "'"));
    ClassifierGraph cg = build_classifier_graph(model.arch, batch.shape[0], false);
    auto ev = eval(cg.graph, model.params, {{"x", batch}}, Mode::Infer, 0);
    return ev.value(cg.taps.at(layer));
}

inline Shape tap_shape(const ClassifierArch& arch, const std::string& layer) {
    ClassifierGraph cg = build_classifier_graph(arch, 1, false);
    auto it = cg.taps.find(layer);
    require_usage(it != cg.taps.end(), cat("unknown tap '", layer, "'"));
    Shape s = cg.graph.shape_of(it->second);
    s.erase(s.begin());  // drop batch dim
    return s;
}

// Argmax accuracy over the given examples, evaluated in chunks.
inline double accuracy(const ClassifierModel& model, const ImageDataset& ds,
                       const std::vector<std::int64_t>& indices) {
    require_usage(!indices.empty(), "accuracy needs at least one example");
    std::int64_t correct = 0;
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < indices.size(); start += chunk) {
        std::vector<std::int64_t> part(
            indices.begin() + static_cast<std::ptrdiff_t>(start),
            indices.begin() + static_cast<std::ptrdiff_t>(std::min(start + chunk, indices.size())));
        Tensor logits = extract(model, make_batch(ds, part), "LOGITS");
        for (std::size_t i = 0; i < part.size(); ++i) {
            std::int64_t best = 0;
            for (std::int64_t k = 1; k < logits.shape[1]; ++k)
                if (logits.at2(static_cast<std::int64_t>(i), k) >
                    logits.at2(static_cast<std::int64_t>(i), best))
                    best = k;
            correct += best == ds.labels[static_cast<std::size_t>(part[i])];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

struct TrainCurvePoint {
    std::int64_t step = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

struct ClassifierTrainResult {
    ClassifierModel model;  // best-validation parameters
    std::vector<TrainCurvePoint> curve;
    std::vector<std::pair<std::int64_t, std::vector<Tensor>>> checkpoints;
    double best_val_accuracy = 0.0;
    std::int64_t steps_run = 0;
};

inline ClassifierArch arch_from_config(const ClassifierConfig& cfg, const ImageDataset& data) {
    ClassifierArch a;
    a.variant = cfg.variant;
    a.height = data.height;
    a.width = data.width;
    a.channels = data.channels;
    a.levels = data.levels;
    a.num_classes = data.num_classes;
    a.c1 = cfg.c1;
    a.c2 = cfg.c2;
    a.fc3_units = cfg.fc3_units;
    a.fc_width = cfg.fc_width;
    a.dropout_conv = cfg.dropout_conv;
    a.dropout_fc = cfg.dropout_fc;
    a.dropout_enabled = cfg.dropout_enabled;
    return a;
}

// Adam training with periodic validation checks, early stopping on
// validation accuracy, and parameter snapshots at the scheduled steps.
// Deterministic given (config, data).
inline ClassifierTrainResult train_classifier(const ClassifierConfig& cfg,
                                              const ImageDataset& data) {
    cfg.check();
    std::vector<std::int64_t> train_idx = data.indices_of(SplitTag::Train);
    const std::vector<std::int64_t> val_idx = data.indices_of(SplitTag::Val);
    require_usage(!train_idx.empty(), "dataset has no train split");
    require_usage(!val_idx.empty(), "dataset has no val split");

    if (cfg.train_subset > 0 && cfg.train_subset < static_cast<std::int64_t>(train_idx.size())) {
        Rng rng(derive_seed(cfg.seed, "train-subset"));
        rng.shuffle(train_idx);
        train_idx.resize(static_cast<std::size_t>(cfg.train_subset));
        std::sort(train_idx.begin(), train_idx.end());
    }

    const ClassifierArch arch = arch_from_config(cfg, data);
    ClassifierGraph cg = build_classifier_graph(arch, cfg.batch_size, true);
    std::vector<Tensor> params = init_params(cg.graph, derive_seed(cfg.seed, "classifier-init"));
    AdamState adam = AdamState::for_params(params, cfg.lr);

    ClassifierTrainResult res;
    res.model.arch = arch;
    Rng batch_rng(derive_seed(cfg.seed, "classifier-batches"));

    std::vector<Tensor> best_params = params;
    double best_acc = -1.0;
    std::int64_t bad_checks = 0;
    double loss_accum = 0.0;
    std::int64_t loss_count = 0;
    std::size_t next_ckpt = 0;

    for (std::int64_t step = 0; step <= cfg.max_steps; ++step) {
        if (next_ckpt < cfg.checkpoint_steps.size() && cfg.checkpoint_steps[next_ckpt] == step) {
            res.checkpoints.emplace_back(step, params);
            ++next_ckpt;
        }
        if (step == cfg.max_steps) break;

        std::vector<std::int64_t> batch(static_cast<std::size_t>(cfg.batch_size));
        for (auto& idx : batch)
            idx = train_idx[static_cast<std::size_t>(
                batch_rng.uniform_int(static_cast<std::int64_t>(train_idx.size())))];
        const Tensor x = make_batch(data, batch);
        const Tensor y = make_label_batch(data, batch);
        Evaluation ev;
        try {
            ev = eval(cg.graph, params, {{"x", x}, {"labels", y}}, Mode::Train,
                      derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
        } catch (const NumericError& e) {
            throw NumericError(cat("classifier training diverged at step ", step, ": ", e.what()));
        }
        loss_accum += ev.value(cg.loss)[0];
        loss_count += 1;
        auto grads = backward(cg.graph, ev, cg.loss);
        adam_step(params, grads, adam);
        res.steps_run = step + 1;

        if ((step + 1) % cfg.eval_every == 0) {
            res.model.params = params;
            const double acc = accuracy(res.model, data, val_idx);
            res.curve.push_back({step + 1, loss_accum / static_cast<double>(loss_count), acc});
            loss_accum = 0.0;
            loss_count = 0;
            if (acc > best_acc) {
                best_acc = acc;
                best_params = params;
                bad_checks = 0;
            } else if (++bad_checks >= cfg.patience) {
                break;
            }
        }
    }
    // remaining scheduled snapshots come from the final parameters so the
    // schedule is always complete
    for (; next_ckpt < cfg.checkpoint_steps.size(); ++next_ckpt)
        res.checkpoints.emplace_back(cfg.checkpoint_steps[next_ckpt], params);

    if (best_acc < 0) {
        best_params = params;
        best_acc = 0.0;
    }
    res.model.params = std::move(best_params);
    res.best_val_accuracy = best_acc;
    return res;
}

// ---- checkpoint io ----------------------------------------------------------

inline std::map<std::string, std::string> classifier_descriptor(const ClassifierArch& a) {
    std::map<std::string, std::string> d;
    d["kind"] = "classifier";
    d["variant"] = variant_name(a.variant);
    d["height"] = std::to_string(a.height);
    d["width"] = std::to_string(a.width);
    d["channels"] = std::to_string(a.channels);
    d["levels"] = std::to_string(a.levels);
    d["classes"] = std::to_string(a.num_classes);
    d["c1"] = std::to_string(a.c1);
    d["c2"] = std::to_string(a.c2);
    d["fc3_units"] = std::to_string(a.fc3_units);
    d["fc_width"] = std::to_string(a.fc_width);
    d["dropout_conv"] = std::to_string(a.dropout_conv);
    d["dropout_fc"] = std::to_string(a.dropout_fc);
    d["dropout_enabled"] = a.dropout_enabled ? "1" : "0";
    return d;
}

inline void save_classifier(const ClassifierModel& model, const std::string& path) {
    save_checkpoint_file(path, classifier_descriptor(model.arch), model.params);
}

inline ClassifierModel classifier_from_checkpoint(const Checkpoint& ckpt,
                                                  const std::string& origin) {
    ckpt.expect("kind", "classifier");
    ClassifierArch a;
    a.variant = parse_variant(ckpt.field("variant"));
    a.height = ckpt.field_i64("height");
    a.width = ckpt.field_i64("width");
    a.channels = ckpt.field_i64("channels");
    a.levels = static_cast<int>(ckpt.field_i64("levels"));
    a.num_classes = static_cast<int>(ckpt.field_i64("classes"));
    a.c1 = ckpt.field_i64("c1");
    a.c2 = ckpt.field_i64("c2");
    a.fc3_units = ckpt.field_i64("fc3_units");
    a.fc_width = ckpt.field_i64("fc_width");
    a.dropout_conv = ckpt.field_f64("dropout_conv");
    a.dropout_fc = ckpt.field_f64("dropout_fc");
    a.dropout_enabled = ckpt.field_i64("dropout_enabled") != 0;
    ClassifierGraph cg = build_classifier_graph(a, 1, false);
    ClassifierModel model;
    model.arch = a;
    model.params = params_from_blobs(cg.graph.params(), ckpt, origin);
    return model;
}

inline ClassifierModel load_classifier(const std::string& path) {
    return classifier_from_checkpoint(load_checkpoint_file(path), path);
}

}  // namespace repinv
