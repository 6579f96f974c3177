#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "repinv/classifier.hpp"
#include "repinv/csv.hpp"
#include "repinv/data.hpp"
#include "repinv/inverter.hpp"
#include "repinv/mi.hpp"
#include "repinv/pgm.hpp"

namespace repinv {

// ---- nearest-neighbor table (representation-space L1) ------------------------

struct NnTableRow {
    std::string dataset;
    std::string layer;
    std::string method;  // 1NN | IM-S | IM-NN
    double mean_l1 = 0.0;
    std::int64_t n = 0;
};

inline Tensor scale_raw(const Tensor& raw, int levels) {
    Tensor t = raw;
    const double s = 1.0 / static_cast<double>(levels - 1);
    for (auto& v : t.values) v *= s;
    return t;
}

inline std::vector<std::string> canonical_layers(const std::vector<std::string>& given) {
    std::vector<std::string> out;
    for (const std::string& name : tap_names())
        if (std::find(given.begin(), given.end(), name) != given.end()) out.push_back(name);
    return out;
}

// Rows for an explicit set of query examples. For each query x with
// representation h: 1NN is the L1 distance to the closest training-image
// representation; IM candidates are n_samples ancestral draws from p(.|h)
// re-embedded through the classifier, IM-S scoring the first draw and IM-NN
// the closest. Distances are unnormalized L1 on flattened taps.
inline std::vector<NnTableRow> nn_table_for_indices(
    const ClassifierModel& classifier,
    const std::map<std::string, const InversionModel*>& inverters, const ImageDataset& data,
    const std::string& dataset_name, const std::vector<std::int64_t>& queries,
    std::int64_t n_samples, std::uint64_t seed) {
    require_usage(!queries.empty(), "nn_table needs at least one query example");
    require_usage(n_samples >= 1, "nn_table needs n_samples >= 1");
    std::vector<std::string> layer_names;
    for (const auto& [name, model] : inverters) {
        require_usage(model != nullptr, cat("missing inverter for layer '", name, "'"));
        layer_names.push_back(name);
    }
    layer_names = canonical_layers(layer_names);
    require_usage(layer_names.size() == inverters.size(), "unknown layer name among inverters");

    const std::vector<std::int64_t> train_idx = data.indices_of(SplitTag::Train);
    require_usage(!train_idx.empty(), "nn_table needs a train split");
    const std::int64_t nq = static_cast<std::int64_t>(queries.size());

    std::vector<NnTableRow> rows;
    for (const std::string& layer : layer_names) {
        const InversionModel& inverter = *inverters.at(layer);
        // embed queries
        Tensor qh = extract(classifier, make_batch(data, queries), layer);
        const std::int64_t d = qh.count() / nq;

        // 1NN against all training representations, chunked
        std::vector<double> best(static_cast<std::size_t>(nq), 1e300);
        const std::size_t chunk = 256;
        for (std::size_t start = 0; start < train_idx.size(); start += chunk) {
            std::vector<std::int64_t> part(
                train_idx.begin() + static_cast<std::ptrdiff_t>(start),
                train_idx.begin() +
                    static_cast<std::ptrdiff_t>(std::min(start + chunk, train_idx.size())));
            Tensor th = extract(classifier, make_batch(data, part), layer);
            const std::int64_t m = static_cast<std::int64_t>(part.size());
            for (std::int64_t q = 0; q < nq; ++q)
                for (std::int64_t j = 0; j < m; ++j) {
                    double dist = 0;
                    const double* a = qh.values.data() + q * d;
                    const double* b = th.values.data() + j * d;
                    for (std::int64_t c = 0; c < d; ++c) dist += std::fabs(a[c] - b[c]);
                    best[static_cast<std::size_t>(q)] =
                        std::min(best[static_cast<std::size_t>(q)], dist);
                }
        }

        // inversion samples, all queries at once
        Shape hb_shape = inverter.arch.rep_shape;
        hb_shape.insert(hb_shape.begin(), nq * n_samples);
        Tensor hb(hb_shape);
        const std::int64_t per = d;
        Tensor qh_tap = extract(classifier, make_batch(data, queries), layer);
        for (std::int64_t q = 0; q < nq; ++q)
            for (std::int64_t s = 0; s < n_samples; ++s)
                std::copy(qh_tap.values.begin() + q * per, qh_tap.values.begin() + (q + 1) * per,
                          hb.values.begin() + (q * n_samples + s) * per);
        Tensor drawn = sample(inverter, hb, derive_seed(seed, "nn-table/" + layer));
        Tensor dh = extract(classifier, scale_raw(drawn, data.levels), layer);

        double mean_1nn = 0, mean_s = 0, mean_nn = 0;
        for (std::int64_t q = 0; q < nq; ++q) {
            mean_1nn += best[static_cast<std::size_t>(q)];
            double closest = 1e300, first = 0;
            for (std::int64_t s = 0; s < n_samples; ++s) {
                double dist = 0;
                const double* a = qh.values.data() + q * d;
                const double* b = dh.values.data() + (q * n_samples + s) * d;
                for (std::int64_t c = 0; c < d; ++c) dist += std::fabs(a[c] - b[c]);
                if (s == 0) first = dist;
                closest = std::min(closest, dist);
            }
            mean_s += first;
            mean_nn += closest;
        }
        const double dn = static_cast<double>(nq);
        rows.push_back({dataset_name, layer, "1NN", mean_1nn / dn, nq});
        rows.push_back({dataset_name, layer, "IM-S", mean_s / dn, nq});
        rows.push_back({dataset_name, layer, "IM-NN", mean_nn / dn, nq});
    }
    return rows;
}

inline std::vector<NnTableRow> nn_table(const ClassifierModel& classifier,
                                        const std::map<std::string, const InversionModel*>& inverters,
                                        const ImageDataset& data, const std::string& dataset_name,
                                        std::int64_t subset_size, std::int64_t n_samples,
                                        std::uint64_t seed) {
    std::vector<std::int64_t> test_idx = data.indices_of(SplitTag::Test);
    require_usage(!test_idx.empty(), "nn_table needs a test split");
    Rng rng(derive_seed(seed, "nn-table/subset"));
    rng.shuffle(test_idx);
    if (subset_size < static_cast<std::int64_t>(test_idx.size()))
        test_idx.resize(static_cast<std::size_t>(subset_size));
    std::sort(test_idx.begin(), test_idx.end());
    return nn_table_for_indices(classifier, inverters, data, dataset_name, test_idx, n_samples,
                                seed);
}

inline CsvTable nn_table_csv(const std::vector<NnTableRow>& rows,
                             const std::vector<std::string>& comments = {}) {
    CsvTable t;
    t.comments = comments;
    t.header = {"dataset", "layer", "method", "mean_l1", "n"};
    for (const auto& r : rows)
        t.rows.push_back({r.dataset, r.layer, r.method, fmt_f64(r.mean_l1), std::to_string(r.n)});
    return t;
}

// ---- top-k pool samples (pixel-space L1) --------------------------------------

struct TopkResult {
    Tensor images;                   // [k, C, H, W] raw level values
    std::vector<double> distances;   // nondecreasing pixel L1 vs the query
};

inline TopkResult topk_samples(const InversionModel& inverter, const Tensor& x_raw,
                               const Tensor& h, std::int64_t pool, std::int64_t k,
                               std::uint64_t seed) {
    require_usage(pool >= 1 && k >= 1, "pool and k must be positive");
    require_usage(k <= pool, cat("k=", k, " exceeds pool=", pool));
    require_usage(x_raw.shape[0] == 1 && h.shape[0] == 1, "topk_samples takes a single query");

    Shape hb_shape = h.shape;
    hb_shape[0] = pool;
    Tensor hb(hb_shape);
    const std::int64_t per = h.count();
    for (std::int64_t s = 0; s < pool; ++s)
        std::copy(h.values.begin(), h.values.end(), hb.values.begin() + s * per);
    Tensor drawn = sample(inverter, hb, derive_seed(seed, "topk"));

    const std::int64_t img = x_raw.count();
    std::vector<std::pair<double, std::int64_t>> scored(static_cast<std::size_t>(pool));
    for (std::int64_t s = 0; s < pool; ++s) {
        double dist = 0;
        for (std::int64_t p = 0; p < img; ++p)
            dist += std::fabs(drawn.values[s * img + p] - x_raw.values[p]);
        scored[static_cast<std::size_t>(s)] = {dist, s};  // ties break by draw index
    }
    std::sort(scored.begin(), scored.end());

    TopkResult res;
    Shape out_shape = x_raw.shape;
    out_shape[0] = k;
    res.images = Tensor(out_shape);
    for (std::int64_t r = 0; r < k; ++r) {
        const std::int64_t s = scored[static_cast<std::size_t>(r)].second;
        std::copy(drawn.values.begin() + s * img, drawn.values.begin() + (s + 1) * img,
                  res.images.values.begin() + r * img);
        res.distances.push_back(scored[static_cast<std::size_t>(r)].first);
    }
    return res;
}

// ---- per-layer NCE ------------------------------------------------------------

struct MiByLayerRow {
    std::string layer;
    double nce_nats = 0.0;
    double nce_rel_conv1 = 0.0;
    double std_error = 0.0;
};

inline std::vector<MiByLayerRow> mi_by_layer(
    const ClassifierModel& classifier,
    const std::map<std::string, const InversionModel*>& inverters, const ImageDataset& data,
    const std::vector<std::int64_t>& test_indices) {
    for (const char* needed : {"CONV1", "CONV2", "FC3"})
        require_usage(inverters.count(needed) == 1, cat("mi_by_layer missing layer '", needed, "'"));
    std::vector<std::string> names;
    for (const auto& [name, model] : inverters) names.push_back(name);
    names = canonical_layers(names);

    std::vector<MiByLayerRow> rows;
    double conv1 = 0;
    for (const std::string& layer : names) {
        MIEstimate est = nce_bound(*inverters.at(layer), classifier, layer, data, test_indices);
        if (layer == "CONV1") conv1 = est.value;
        rows.push_back({layer, est.value, 0.0, est.std_error.value_or(0.0)});
    }
    for (auto& r : rows) r.nce_rel_conv1 = r.nce_nats / conv1;
    return rows;
}

inline CsvTable mi_by_layer_csv(const std::vector<MiByLayerRow>& rows,
                                const std::vector<std::string>& comments = {}) {
    CsvTable t;
    t.comments = comments;
    t.header = {"layer", "nce_nats", "nce_rel_conv1", "stderr"};
    for (const auto& r : rows)
        t.rows.push_back({r.layer, fmt_f64(r.nce_nats), fmt_f64(r.nce_rel_conv1),
                          fmt_f64(r.std_error)});
    return t;
}

// ---- training-dynamics sweep ---------------------------------------------------

struct DynamicsRecord {
    std::int64_t step = 0;
    std::string layer;
    std::string regime;  // regular | overfit
    double nce_nats = 0.0;
    double val_nll_nats = 0.0;
    double nce_std_error = 0.0;
};

struct DynamicsCheckpoints {
    std::string regime;
    std::vector<std::pair<std::int64_t, std::string>> checkpoints;  // (step, path)
};

// Trains one fresh inverter per (checkpoint, layer, regime) and reports the
// held-out NCE. Jobs are independent; a bounded worker pool may run them
// concurrently, and records are keyed and sorted before emission so the
// output is identical for any worker count.
inline std::vector<DynamicsRecord> dynamics_sweep(const std::vector<DynamicsCheckpoints>& regimes,
                                                  const std::vector<std::string>& layers,
                                                  const InversionConfig& inverter_cfg,
                                                  const ImageDataset& data,
                                                  std::int64_t nce_subset, std::uint64_t seed,
                                                  int workers = 1) {
    require_usage(!regimes.empty() && !layers.empty(), "dynamics_sweep needs regimes and layers");
    require_usage(workers >= 1, "worker count must be >= 1");
    struct Job {
        std::string regime;
        std::int64_t step;
        std::string layer;
        std::string path;
    };
    std::vector<Job> jobs;
    for (const auto& regime : regimes) {
        std::vector<std::int64_t> seen;
        for (const auto& [step, path] : regime.checkpoints) {
            require_usage(std::find(seen.begin(), seen.end(), step) == seen.end(),
                          cat("duplicate checkpoint step ", step, " in regime ", regime.regime));
            seen.push_back(step);
            for (const std::string& layer : layers) jobs.push_back({regime.regime, step, layer, path});
        }
    }

    std::vector<std::int64_t> test_idx = data.indices_of(SplitTag::Test);
    require_usage(!test_idx.empty(), "dynamics_sweep needs a test split");
    if (nce_subset > 0 && nce_subset < static_cast<std::int64_t>(test_idx.size()))
        test_idx.resize(static_cast<std::size_t>(nce_subset));

    std::vector<DynamicsRecord> records(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    auto run_jobs = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                const Job& job = jobs[i];
                ClassifierModel cls = load_classifier(job.path);
                InversionConfig cfg = inverter_cfg;
                cfg.seed = derive_seed(seed, cat("dynamics/", job.regime, "/", job.step, "/",
                                                 job.layer));
                InverterTrainResult trained = train_inverter(cls, job.layer, data, cfg);
                MIEstimate est = nce_bound(trained.model, cls, job.layer, data, test_idx);
                records[i] = {job.step,   job.layer,           job.regime,
                              est.value,  trained.best_val_nll, est.std_error.value_or(0.0)};
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    if (workers == 1) {
        run_jobs();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run_jobs);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    std::sort(records.begin(), records.end(), [](const DynamicsRecord& a, const DynamicsRecord& b) {
        if (a.regime != b.regime) return a.regime < b.regime;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.step < b.step;
    });
    return records;
}

inline CsvTable dynamics_csv(const std::vector<DynamicsRecord>& records,
                             const std::vector<std::string>& comments = {}) {
    CsvTable t;
    t.comments = comments;
    t.header = {"step", "layer", "regime", "nce_nats", "val_nll_nats"};
    for (const auto& r : records)
        t.rows.push_back({std::to_string(r.step), r.layer, r.regime, fmt_f64(r.nce_nats),
                          fmt_f64(r.val_nll_nats)});
    return t;
}

// ---- sample grids --------------------------------------------------------------

// Tiles raw-level images into one grayscale PGM (or PPM for color) with
// 1-pixel black separators.
inline void sample_grid(const std::vector<Tensor>& images, std::int64_t rows, std::int64_t cols,
                        int levels, const std::string& path) {
    require_usage(!images.empty(), "sample_grid needs at least one image");
    require_usage(rows * cols >= static_cast<std::int64_t>(images.size()),
                  cat("grid ", rows, "x", cols, " cannot hold ", images.size(), " images"));
    const Shape& s0 = images.front().shape;
    require_usage(s0.size() == 3, "sample_grid expects [C,H,W] images");
    for (const Tensor& img : images)
        require_usage(shape_eq(img.shape, s0), "sample_grid images must share one shape");
    const std::int64_t c = s0[0], h = s0[1], w = s0[2];
    require_usage(c == 1 || c == 3, "sample_grid supports 1 or 3 channels");

    PnmImage out;
    out.channels = c;
    out.height = rows * h + (rows - 1);
    out.width = cols * w + (cols - 1);
    out.bytes.assign(static_cast<std::size_t>(out.height * out.width * c), 0);
    const double scale = 255.0 / static_cast<double>(levels - 1);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::int64_t gr = static_cast<std::int64_t>(i) / cols;
        const std::int64_t gc = static_cast<std::int64_t>(i) % cols;
        const std::int64_t oy = gr * (h + 1);
        const std::int64_t ox = gc * (w + 1);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double v = images[i].values[(ch * h + y) * w + x];
                    out.bytes[static_cast<std::size_t>(((oy + y) * out.width + ox + x) * c + ch)] =
                        static_cast<std::uint8_t>(std::lround(std::clamp(v * scale, 0.0, 255.0)));
                }
    }
    write_pnm(path, out);
}

}  // namespace repinv
