#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repinv/classifier.hpp"
#include "repinv/data.hpp"
#include "repinv/inverter.hpp"

namespace repinv {

enum class EstimatorKind { NceLowerBound, Binning, KraskovEntropy, KdeUpperBound };

inline const char* estimator_name(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::NceLowerBound: return "nce_lower_bound";
        case EstimatorKind::Binning: return "binning";
        case EstimatorKind::KraskovEntropy: return "kraskov_entropy";
        case EstimatorKind::KdeUpperBound: return "kde_upper_bound";
    }
    return "?";
}

// An information quantity in nats. Auxiliary fields are set exactly when the
// estimator kind uses them; standard errors exist only for sample means.
struct MIEstimate {
    EstimatorKind kind = EstimatorKind::NceLowerBound;
    double value = 0.0;  // nats
    std::int64_t n = 0;
    std::optional<double> std_error;
    std::optional<std::int64_t> bins;
    std::optional<std::int64_t> k;
    std::optional<double> noise_var;
    std::optional<std::int64_t> dim;
};

// ---- digamma ----------------------------------------------------------------

// Recurrence below 6, then the asymptotic series; ~1e-12 absolute accuracy.
inline double digamma(double x) {
    require_usage(x > 0, cat("digamma requires x > 0, got ", x));
    double result = 0.0;
    while (x < 6.0) {
        result -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    result += std::log(x) - 0.5 * inv -
              inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0)));
    return result;
}

// ---- NCE lower bound (empirical conditional cross entropy) -------------------

// Mean exact log-likelihood of held-out (x, h) pairs: -H*(x|h). Equals the
// mutual information lower bound up to the constant H(x).
inline MIEstimate nce_bound(const InversionModel& inverter, const ClassifierModel& classifier,
                            const std::string& layer, const ImageDataset& data,
                            const std::vector<std::int64_t>& test_indices) {
    require_usage(!test_indices.empty(), "nce_bound needs a non-empty held-out set");
    std::vector<double> lp;
    lp.reserve(test_indices.size());
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < test_indices.size(); start += chunk) {
        std::vector<std::int64_t> part(
            test_indices.begin() + static_cast<std::ptrdiff_t>(start),
            test_indices.begin() +
                static_cast<std::ptrdiff_t>(std::min(start + chunk, test_indices.size())));
        const Tensor raw = raw_batch(data, part);
        const Tensor h = extract(classifier, make_batch(data, part), layer);
        std::vector<double> part_lp = log_prob_batch(inverter, raw, h);
        lp.insert(lp.end(), part_lp.begin(), part_lp.end());
    }
    double mean = 0;
    for (double v : lp) mean += v;
    mean /= static_cast<double>(lp.size());
    double var = 0;
    for (double v : lp) var += (v - mean) * (v - mean);
    MIEstimate est;
    est.kind = EstimatorKind::NceLowerBound;
    est.value = mean;
    est.n = static_cast<std::int64_t>(lp.size());
    est.std_error = lp.size() > 1
                        ? std::sqrt(var / static_cast<double>(lp.size() - 1) /
                                    static_cast<double>(lp.size()))
                        : 0.0;
    return est;
}

// ---- exact discrete MI on binned activations ----------------------------------

// Discretizes each activation dimension into equal-width bins over its
// empirical [min, max] and computes the exact MI of the empirical joint with
// the ids. Constant dimensions collapse to a single bin.
inline MIEstimate binning_mi(std::span<const std::int64_t> ids, const Tensor& activations,
                             std::int64_t bins) {
    require_usage(activations.rank() == 2, "binning_mi expects activations [N,D]");
    const std::int64_t n = activations.shape[0], d = activations.shape[1];
    require_usage(n >= 1 && static_cast<std::int64_t>(ids.size()) == n,
                  "binning_mi needs one id per activation row");
    require_usage(bins >= 1, "binning_mi needs bins >= 1");

    std::vector<double> lo(static_cast<std::size_t>(d), 1e300);
    std::vector<double> hi(static_cast<std::size_t>(d), -1e300);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            lo[static_cast<std::size_t>(j)] = std::min(lo[static_cast<std::size_t>(j)],
                                                       activations.at2(i, j));
            hi[static_cast<std::size_t>(j)] = std::max(hi[static_cast<std::size_t>(j)],
                                                       activations.at2(i, j));
        }

    std::map<std::vector<std::int32_t>, std::int64_t> joint, h_marginal;
    std::map<std::int64_t, std::int64_t> id_marginal;
    std::vector<std::int32_t> key(static_cast<std::size_t>(d) + 1);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            const double width = hi[static_cast<std::size_t>(j)] - lo[static_cast<std::size_t>(j)];
            std::int64_t b = 0;
            if (width > 0) {
                b = static_cast<std::int64_t>((activations.at2(i, j) -
                                               lo[static_cast<std::size_t>(j)]) /
                                              width * static_cast<double>(bins));
                b = std::clamp<std::int64_t>(b, 0, bins - 1);
            }
            key[static_cast<std::size_t>(j) + 1] = static_cast<std::int32_t>(b);
        }
        key[0] = static_cast<std::int32_t>(ids[static_cast<std::size_t>(i)]);
        joint[key] += 1;
        key[0] = 0;
        h_marginal[key] += 1;
        id_marginal[ids[static_cast<std::size_t>(i)]] += 1;
    }

    double mi = 0.0;
    const double dn = static_cast<double>(n);
    for (const auto& [k_joint, c_joint] : joint) {  // sorted iteration, fixed order
        std::vector<std::int32_t> hkey = k_joint;
        hkey[0] = 0;
        const double c_id = static_cast<double>(id_marginal.at(k_joint[0]));
        const double c_h = static_cast<double>(h_marginal.at(hkey));
        const double cj = static_cast<double>(c_joint);
        mi += cj / dn * std::log(cj * dn / (c_id * c_h));
    }
    MIEstimate est;
    est.kind = EstimatorKind::Binning;
    est.value = std::max(0.0, mi);
    est.n = n;
    est.bins = bins;
    est.dim = d;
    return est;
}

// ---- Kraskov k-nearest-neighbor differential entropy --------------------------

// H_hat = (D/N) sum_i log(r_i + eps) + (D/2) log pi - log Gamma(D/2 + 1)
//         + psi(N) - psi(k),  r_i = Euclidean distance to the k-th neighbor.
inline MIEstimate kraskov_entropy(const Tensor& samples, std::int64_t k) {
    require_usage(samples.rank() == 2, "kraskov_entropy expects samples [N,D]");
    const std::int64_t n = samples.shape[0], d = samples.shape[1];
    require_usage(k >= 1 && k < n, cat("kraskov_entropy needs 1 <= k < N, got k=", k, ", N=", n));
    constexpr double kEps = 1e-10;  // duplicate guard inside the log

    std::vector<double> dist(static_cast<std::size_t>(n));
    double log_term = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double* xi = samples.values.data() + i * d;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* xj = samples.values.data() + j * d;
            double s = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const double diff = xi[c] - xj[c];
                s += diff * diff;
            }
            dist[static_cast<std::size_t>(j)] = s;
        }
        dist[static_cast<std::size_t>(i)] = 1e300;  // exclude self
        std::nth_element(dist.begin(), dist.begin() + (k - 1), dist.end());
        log_term += std::log(std::sqrt(dist[static_cast<std::size_t>(k - 1)]) + kEps);
    }

    MIEstimate est;
    est.kind = EstimatorKind::KraskovEntropy;
    est.value = static_cast<double>(d) / static_cast<double>(n) * log_term +
                static_cast<double>(d) / 2.0 * std::log(M_PI) -
                std::lgamma(static_cast<double>(d) / 2.0 + 1.0) +
                digamma(static_cast<double>(n)) - digamma(static_cast<double>(k));
    est.n = n;
    est.k = k;
    est.dim = d;
    return est;
}

// ---- KDE/noise upper bound ----------------------------------------------------

// Adds Gaussian noise to held-out activations, scores them under a Gaussian
// kernel mixture (bandwidth^2 = sigma^2) fit on the other split, and
// subtracts the noise entropy c = (D/2) ln(2 pi e sigma^2). Upper-bounds
// I(x; h + noise).
inline MIEstimate kde_noise_bound(const Tensor& activations, double sigma2,
                                  double holdout_fraction, std::uint64_t seed) {
    require_usage(activations.rank() == 2, "kde_noise_bound expects activations [N,D]");
    require_usage(sigma2 > 0, "noise variance must be positive");
    require_usage(holdout_fraction > 0 && holdout_fraction < 1,
                  "holdout fraction must be in (0,1)");
    const std::int64_t n = activations.shape[0], d = activations.shape[1];
    require_usage(n >= 2, "kde_noise_bound needs at least two samples");
    const std::int64_t n_eval = std::llround(holdout_fraction * static_cast<double>(n));
    const std::int64_t n_fit = n - n_eval;
    require_usage(n_eval >= 1 && n_fit >= 1, "kde_noise_bound split leaves an empty side");

    const double* fit = activations.values.data();
    const double* evalp = activations.values.data() + n_fit * d;
    const double log_norm = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * sigma2) -
                            std::log(static_cast<double>(n_fit));
    const double noise_entropy =
        0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * M_E * sigma2);
    const double sigma = std::sqrt(sigma2);

    Rng rng(derive_seed(seed, "kde-noise"));
    std::vector<double> point(static_cast<std::size_t>(d));
    std::vector<double> bounds;
    bounds.reserve(static_cast<std::size_t>(n_eval));
    for (std::int64_t b = 0; b < n_eval; ++b) {
        for (std::int64_t c = 0; c < d; ++c)
            point[static_cast<std::size_t>(c)] = evalp[b * d + c] + sigma * rng.normal();
        // log sum exp over kernel centers
        double best = -1e300;
        std::vector<double> expo(static_cast<std::size_t>(n_fit));
        for (std::int64_t a = 0; a < n_fit; ++a) {
            double s = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const double diff = point[static_cast<std::size_t>(c)] - fit[a * d + c];
                s += diff * diff;
            }
            expo[static_cast<std::size_t>(a)] = -s / (2.0 * sigma2);
            best = std::max(best, expo[static_cast<std::size_t>(a)]);
        }
        double z = 0;
        for (double e : expo) z += std::exp(e - best);
        const double log_density = log_norm + best + std::log(z);
        bounds.push_back(-log_density - noise_entropy);
    }

    double mean = 0;
    for (double v : bounds) mean += v;
    mean /= static_cast<double>(bounds.size());
    double var = 0;
    for (double v : bounds) var += (v - mean) * (v - mean);

    MIEstimate est;
    est.kind = EstimatorKind::KdeUpperBound;
    est.value = mean;
    est.n = n;
    est.std_error = bounds.size() > 1
                        ? std::sqrt(var / static_cast<double>(bounds.size() - 1) /
                                    static_cast<double>(bounds.size()))
                        : 0.0;
    est.noise_var = sigma2;
    est.dim = d;
    return est;
}

}  // namespace repinv
