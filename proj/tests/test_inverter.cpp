#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "repinv/data.hpp"
#include "repinv/inverter.hpp"
#include "test_util.hpp"

using namespace repinv;
using repinv::testutil::random_tensor;

namespace {

InverterArch tiny_arch(std::int64_t hw, int levels, std::int64_t rep_dim) {
    InverterArch a;
    a.layer = "FC3";
    a.rep_shape = {rep_dim};
    a.height = hw;
    a.width = hw;
    a.levels = levels;
    a.filters = 6;
    a.blocks = 1;
    a.kernel0 = 3;
    a.kernel = 3;
    a.cond = Conditioning::VectorBias;
    a.dropout = 0.0;
    return a;
}

InversionModel model_with(const InverterArch& a, std::uint64_t seed, double scale = 0.0) {
    InverterGraph ig = build_inverter_graph(a, 1, true, false);
    InversionModel m;
    m.arch = a;
    if (seed == 0) {
        for (const auto& slot : ig.graph.params()) m.params.emplace_back(slot.shape);
    } else {
        m.params = init_params(ig.graph, seed);
        if (scale > 0)
            for (auto& p : m.params)
                for (auto& v : p.values) v *= scale;
    }
    return m;
}

Tensor images_from_codes(const InverterArch& a, const std::vector<std::int64_t>& codes) {
    const std::int64_t positions = a.height * a.width * a.channels;
    const std::int64_t hw = a.height * a.width;
    Tensor raw({static_cast<std::int64_t>(codes.size()), a.channels, a.height, a.width});
    for (std::size_t i = 0; i < codes.size(); ++i) {
        std::int64_t code = codes[i];
        for (std::int64_t p = 0; p < positions; ++p) {
            raw.values[(static_cast<std::int64_t>(i) * a.channels + p % a.channels) * hw +
                       p / a.channels] = static_cast<double>(code % a.levels);
            code /= a.levels;
        }
    }
    return raw;
}

// 6x6 fully-connected classifier used as a frozen feature source for small
// training runs (conv variants need larger inputs).
ClassifierModel tiny_fc_classifier(int levels, std::uint64_t seed) {
    ClassifierArch a;
    a.variant = ClassifierVariant::FullyConnected;
    a.height = 6;
    a.width = 6;
    a.levels = levels;
    a.fc_width = 16;
    a.fc3_units = 8;
    ClassifierGraph cg = build_classifier_graph(a, 1, false);
    ClassifierModel m;
    m.arch = a;
    m.params = init_params(cg.graph, seed);
    return m;
}

ImageDataset repeated_images(const std::vector<std::vector<std::uint8_t>>& imgs, std::int64_t hw,
                             int levels, std::int64_t copies) {
    ImageDataset ds;
    ds.height = hw;
    ds.width = hw;
    ds.levels = levels;
    ds.num_classes = 10;
    for (std::int64_t c = 0; c < copies; ++c)
        for (std::size_t k = 0; k < imgs.size(); ++k) {
            ds.pixels.insert(ds.pixels.end(), imgs[k].begin(), imgs[k].end());
            ds.labels.push_back(static_cast<int>(k));
            ds.split.push_back(c == 0 ? SplitTag::Val : SplitTag::Train);
        }
    return ds;
}

}  // namespace

TEST_CASE("zero-weight inverter assigns the uniform density") {
    InverterArch a2 = tiny_arch(2, 2, 4);
    InversionModel m2 = model_with(a2, 0);
    Tensor h({1, 4}, {0.3, -1.0, 0.5, 2.0});
    for (std::int64_t code = 0; code < 16; ++code) {
        const double lp = log_prob(m2, images_from_codes(a2, {code}), h);
        REQUIRE_THAT(lp, Catch::Matchers::WithinAbs(-4.0 * std::log(2.0), 1e-12));
    }
    InverterArch a16 = tiny_arch(2, 16, 4);
    InversionModel m16 = model_with(a16, 0);
    const double lp = log_prob(m16, images_from_codes(a16, {12345}), h);
    REQUIRE_THAT(lp, Catch::Matchers::WithinAbs(-4.0 * std::log(16.0), 1e-12));
    REQUIRE(lp <= 0.0);
}

TEST_CASE("log_prob matches an independent per-pixel softmax recomputation") {
    InverterArch a = tiny_arch(3, 4, 5);
    InversionModel m = model_with(a, 77, 1.0);
    Rng rng(3);
    Tensor h = random_tensor({2, 5}, rng);
    std::vector<std::int64_t> codes{1234, 98765 % (1 << 18)};
    Tensor raw = images_from_codes(a, codes);

    InverterGraph ig = build_inverter_graph(a, 2, true, false);
    auto ev = eval(ig.graph, m.params, bind_inputs(a, raw, h, true), Mode::Infer, 0);
    const Tensor& logits = ev.value(ig.logits);

    std::vector<double> lp = log_prob_batch(m, raw, h);
    for (std::int64_t n = 0; n < 2; ++n) {
        double total = 0.0;
        for (std::int64_t p = 0; p < 9; ++p) {
            const std::int64_t t =
                static_cast<std::int64_t>(raw.values[n * 9 + p]);
            double mx = -1e300, z = 0.0;
            for (std::int64_t l = 0; l < 4; ++l)
                mx = std::max(mx, logits.values[(n * 4 + l) * 9 + p]);
            for (std::int64_t l = 0; l < 4; ++l)
                z += std::exp(logits.values[(n * 4 + l) * 9 + p] - mx);
            total += logits.values[(n * 4 + t) * 9 + p] - mx - std::log(z);
        }
        REQUIRE_THAT(lp[static_cast<std::size_t>(n)], Catch::Matchers::WithinAbs(total, 1e-10));
    }
}

TEST_CASE("enumerate_density is a normalized table for random, scaled and uniform weights") {
    InverterArch a = tiny_arch(2, 2, 3);
    Tensor h({1, 3}, {1.0, -0.5, 0.25});

    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
        InversionModel m = model_with(a, seed, 1.0);
        auto probs = enumerate_density(m, h);
        REQUIRE(probs.size() == 16);
        double sum = 0;
        for (double p : probs) sum += p;
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }

    // adversarial scale
    InversionModel big = model_with(a, 21, 6.0);
    auto probs = enumerate_density(big, h);
    double sum = 0;
    for (double p : probs) sum += p;
    REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));

    // uniform model: every probability 1/16
    InversionModel uni = model_with(a, 0);
    auto uprobs = enumerate_density(uni, h);
    for (double p : uprobs) REQUIRE_THAT(p, Catch::Matchers::WithinAbs(1.0 / 16.0, 1e-12));
}

TEST_CASE("1x1 enumeration equals the head softmax") {
    InverterArch a = tiny_arch(1, 16, 2);
    a.kernel0 = 1;
    a.kernel = 1;
    InversionModel m = model_with(a, 31, 1.0);
    Tensor h({1, 2}, {0.7, -0.3});
    auto probs = enumerate_density(m, h);
    REQUIRE(probs.size() == 16);
    double sum = 0;
    for (double p : probs) sum += p;
    REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    // compare against softmax of the logits output directly
    InverterGraph ig = build_inverter_graph(a, 1, false, false);
    Tensor raw({1, 1, 1, 1});
    auto ev = eval(ig.graph, m.params, bind_inputs(a, raw, h, false), Mode::Infer, 0);
    const Tensor& logits = ev.value(ig.logits);
    double mx = -1e300, z = 0;
    for (std::int64_t l = 0; l < 16; ++l) mx = std::max(mx, logits[l]);
    for (std::int64_t l = 0; l < 16; ++l) z += std::exp(logits[l] - mx);
    for (std::int64_t l = 0; l < 16; ++l)
        REQUIRE_THAT(probs[static_cast<std::size_t>(l)],
                     Catch::Matchers::WithinAbs(std::exp(logits[l] - mx) / z, 1e-12));
}

TEST_CASE("teacher-forced conditionals at raster i ignore later pixels") {
    InverterArch a = tiny_arch(4, 4, 3);
    InversionModel m = model_with(a, 41, 1.0);
    Rng rng(5);
    Tensor h = random_tensor({1, 3}, rng);
    Tensor raw({1, 1, 4, 4});
    for (auto& v : raw.values) v = static_cast<double>(rng.uniform_int(4));

    InverterGraph ig = build_inverter_graph(a, 1, false, false);
    const Tensor base =
        eval(ig.graph, m.params, bind_inputs(a, raw, h, false), Mode::Infer, 0).value(ig.logits);
    for (std::int64_t i = 0; i < 16; ++i) {
        Tensor changed = raw;
        for (std::int64_t j = i; j < 16; ++j)
            changed.values[static_cast<std::size_t>(j)] =
                3.0 - changed.values[static_cast<std::size_t>(j)];
        const Tensor out = eval(ig.graph, m.params, bind_inputs(a, changed, h, false), Mode::Infer, 0)
                               .value(ig.logits);
        for (std::int64_t l = 0; l < 4; ++l)
            for (std::int64_t p = 0; p < i; ++p)
                REQUIRE(out.values[static_cast<std::size_t>(l * 16 + p)] ==
                        base.values[static_cast<std::size_t>(l * 16 + p)]);
    }
}

TEST_CASE("uniform sampling statistics and seed determinism") {
    InverterArch a = tiny_arch(2, 2, 2);
    InversionModel m = model_with(a, 0);
    const std::int64_t n = 10000;
    Tensor h({n, 2});
    Tensor s = sample(m, h, 99);
    for (std::int64_t p = 0; p < 4; ++p) {
        double mean = 0;
        for (std::int64_t i = 0; i < n; ++i) mean += s.values[i * 4 + p];
        mean /= static_cast<double>(n);
        REQUIRE(mean > 0.48);
        REQUIRE(mean < 0.52);
    }
    Tensor h1({1, 2}, {0.5, -0.5});
    InversionModel m2 = model_with(a, 51, 1.0);
    Tensor s1 = sample(m2, h1, 7);
    Tensor s2 = sample(m2, h1, 7);
    REQUIRE(s1.values == s2.values);
    Tensor s3 = sample(m2, h1, 8);
    REQUIRE(s1.values.size() == s3.values.size());
    for (double v : s1.values) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("samples score finitely and match the enumeration entropy") {
    InverterArch a = tiny_arch(2, 2, 3);
    InversionModel m = model_with(a, 61, 1.5);
    Tensor h({1, 3}, {0.2, 1.0, -0.7});
    auto probs = enumerate_density(m, h);
    double entropy = 0;
    for (double p : probs)
        if (p > 0) entropy -= p * std::log(p);

    const std::int64_t n = 2000;
    Tensor hb({n, 3});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < 3; ++j) hb.values[i * 3 + j] = h.values[j];
    Tensor raws = sample(m, hb, 17);
    std::vector<double> lp = log_prob_batch(m, raws, hb);
    double mean = 0;
    for (double v : lp) {
        REQUIRE(std::isfinite(v));
        mean += v;
    }
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : lp) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n));
    REQUIRE(std::fabs(mean - (-entropy)) <= 3.0 * se + 1e-9);
}

TEST_CASE("empirical sample distribution matches enumeration within TV 0.02") {
    InverterArch a = tiny_arch(2, 2, 2);
    InversionModel m = model_with(a, 71, 1.0);
    Tensor h({1, 2}, {0.4, -0.9});
    auto probs = enumerate_density(m, h);

    const std::int64_t n = 100000;
    Tensor hb({n, 2});
    for (std::int64_t i = 0; i < n; ++i) {
        hb.values[i * 2] = 0.4;
        hb.values[i * 2 + 1] = -0.9;
    }
    Tensor raws = sample(m, hb, 23);
    std::vector<double> counts(16, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t code = 0;
        for (std::int64_t p = 3; p >= 0; --p)
            code = code * 2 + static_cast<std::int64_t>(raws.values[i * 4 + p]);
        counts[static_cast<std::size_t>(code)] += 1.0;
    }
    double tv = 0;
    for (std::size_t k = 0; k < 16; ++k)
        tv += std::fabs(counts[k] / static_cast<double>(n) - probs[k]);
    REQUIRE(tv / 2.0 <= 0.02);
}

TEST_CASE("a point-mass dataset trains to near-zero NLL") {
    const int levels = 4;
    std::vector<std::uint8_t> img(36);
    Rng rng(81);
    for (auto& v : img) v = static_cast<std::uint8_t>(rng.uniform_int(levels));
    ImageDataset ds = repeated_images({img}, 6, levels, 40);
    ClassifierModel cls = tiny_fc_classifier(levels, 5);

    InversionConfig cfg;
    cfg.filters = 8;
    cfg.blocks = 1;
    cfg.kernel0 = 3;
    cfg.dropout = 0.0;
    cfg.lr = 0.02;
    cfg.max_steps = 800;
    cfg.eval_every = 200;
    cfg.batch_size = 4;
    cfg.seed = 3;
    InverterTrainResult res = train_inverter(cls, "FC3", ds, cfg);
    REQUIRE(res.best_val_nll < 2.0);  // uniform baseline is 36*ln4 ~ 49.9
    REQUIRE(res.best_val_nll >= 0.0);
}

TEST_CASE("shuffled conditioning raises NLL on a model that uses its context") {
    // two distinct images; h distinguishes them, so breaking the pairing hurts
    const int levels = 4;
    std::vector<std::uint8_t> a(36, 0), b(36, 3);
    ImageDataset ds = repeated_images({a, b}, 6, levels, 40);
    ClassifierModel cls = tiny_fc_classifier(levels, 6);

    InversionConfig cfg;
    cfg.filters = 8;
    cfg.blocks = 1;
    cfg.kernel0 = 3;
    cfg.dropout = 0.0;
    cfg.lr = 0.01;
    cfg.max_steps = 600;
    cfg.eval_every = 200;
    cfg.batch_size = 8;
    cfg.seed = 4;
    InverterTrainResult res = train_inverter(cls, "FC3", ds, cfg);

    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < 16; ++i) idx.push_back(i);
    Tensor raw = raw_batch(ds, idx);
    Tensor h = extract(cls, make_batch(ds, idx), "FC3");
    const double matched = mean_of(log_prob_batch(res.model, raw, h));

    // rotate h by one example: every x now sees the other image's context
    Tensor hperm = h;
    const std::int64_t d = h.shape[1];
    for (std::int64_t i = 0; i < 16; ++i)
        for (std::int64_t j = 0; j < d; ++j)
            hperm.values[i * d + j] = h.values[((i + 1) % 16) * d + j];
    const double shuffled = mean_of(log_prob_batch(res.model, raw, hperm));
    REQUIRE(matched > shuffled);
}

TEST_CASE("digits FC3 inverter beats the uniform baseline within 500 steps") {
    ImageDataset ds = dataset_from_idx(
        std::string(REPINV_SOURCE_DIR) + "/data/digits-images-idx3-ubyte",
        std::string(REPINV_SOURCE_DIR) + "/data/digits-labels-idx1-ubyte");
    ds = quantize(resize_bilinear(ds, 14, 14), 16);
    ds = split_deterministic(ds, 0.8, 0.1, 0.1, 1);

    ClassifierConfig ccfg;
    ccfg.c1 = 8;
    ccfg.c2 = 16;
    ccfg.fc3_units = 16;
    ccfg.lr = 1e-3;
    ccfg.max_steps = 200;
    ccfg.eval_every = 100;
    ccfg.batch_size = 32;
    ccfg.seed = 9;
    ClassifierTrainResult cls = train_classifier(ccfg, ds);

    InversionConfig cfg;
    cfg.filters = 12;
    cfg.blocks = 1;
    cfg.dropout = 0.2;
    cfg.lr = 1e-3;
    cfg.max_steps = 300;
    cfg.eval_every = 150;
    cfg.batch_size = 16;
    cfg.seed = 10;
    InverterTrainResult res = train_inverter(cls.model, "FC3", ds, cfg);
    REQUIRE(res.best_val_nll < res.model.arch.uniform_nll());
    REQUIRE(res.model.arch.cond == Conditioning::VectorBias);
    REQUIRE(res.steps_run == 300);

    // rep-shape drift and level mismatches are rejected
    Tensor raw = raw_batch(ds, {0});
    Tensor bad_h({1, 7});
    REQUIRE_THROWS_AS(log_prob(res.model, raw, bad_h), GraphError);
    Tensor h = extract(cls.model, make_batch(ds, {0}), "FC3");
    Tensor bad_raw = raw;
    bad_raw[0] = 99.0;
    REQUIRE_THROWS_AS(log_prob(res.model, bad_raw, h), GraphError);
}

TEST_CASE("sampling through a checkpoint round-trip is bitwise stable") {
    InverterArch a = tiny_arch(3, 4, 2);
    InversionModel m = model_with(a, 91, 1.0);
    Tensor h({2, 2}, {0.1, 0.9, -0.4, 0.0});
    Tensor s1 = sample(m, h, 13);

    const auto path =
        (std::filesystem::temp_directory_path() / "repinv_inv_rt.bin").string();
    save_inverter(m, path);
    InversionModel r = load_inverter(path);
    Tensor s2 = sample(r, h, 13);
    REQUIRE(s1.values == s2.values);
    std::filesystem::remove(path);
}
