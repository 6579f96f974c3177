#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/tensor.hpp"

namespace repinv {

// Adam with bias-corrected moments. t counts completed steps.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_params(std::span<const Tensor> params, double lr) {
        AdamState s;
        s.lr = lr;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Tensor& p : params) {
            s.m.emplace_back(p.shape);
            s.v.emplace_back(p.shape);
        }
        return s;
    }
};

inline void adam_step(std::vector<Tensor>& params, std::span<const Tensor> grads,
                      AdamState& state) {
    require_graph(params.size() == grads.size() && params.size() == state.m.size(),
                  cat("adam_step: ", params.size(), " params vs ", grads.size(), " grads vs ",
                      state.m.size(), " accumulators"));
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const Tensor& g = grads[i];
        require_graph(shape_eq(p.shape, g.shape),
                      cat("adam_step: gradient shape ", shape_str(g.shape),
                          " does not match parameter shape ", shape_str(p.shape)));
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::int64_t j = 0; j < p.count(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace repinv
