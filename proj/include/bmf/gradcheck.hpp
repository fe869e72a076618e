#pragma once

#include "bmf/params.hpp"

namespace bmf {

struct GradCheckReport {
    double max_rel_error = 0.0;
    int probes = 0;
    // coordinates of the worst probe, for diagnostics
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0, numeric = 0.0;
};

// Compares analytic gradients against central finite differences on
// randomly sampled parameter coordinates. `model_fn` must be a deterministic,
// re-runnable function of the current parameter values returning a scalar
// loss tensor.
template <typename T, typename Fn>
GradCheckReport finite_diff_check(Fn&& model_fn, ParamSet<T>& params, int n_probes, T h,
                                  uint64_t seed = 0) {
    params.zero_grads();
    Tensor<T> loss = model_fn();
    loss.backward();

    std::vector<std::pair<size_t, int64_t>> coords;
    int64_t total = params.total_numel();
    check(total > 0, "finite_diff_check: no parameters");
    Rng rng = make_rng(seed, {0x6fd});
    std::uniform_int_distribution<int64_t> pick(0, total - 1);
    for (int i = 0; i < n_probes; ++i) {
        int64_t flat = pick(rng);
        for (size_t p = 0; p < params.size(); ++p) {
            int64_t n = params.value(p).numel();
            if (flat < n) {
                coords.push_back({p, flat});
                break;
            }
            flat -= n;
        }
    }

    GradCheckReport report;
    report.probes = (int)coords.size();
    for (auto [p, j] : coords) {
        Tensor<T>& param = params.value(p);
        T analytic = param.grad()[j];
        T saved = param.raw_data()[j];
        param.raw_data()[j] = saved + h;
        T up = model_fn().item();
        param.raw_data()[j] = saved - h;
        T down = model_fn().item();
        param.raw_data()[j] = saved;
        T numeric = (up - down) / (T(2) * h);
        double denom = std::max(std::abs((double)analytic), std::abs((double)numeric));
        double rel;
        if (denom < 1e-8)
            rel = std::abs((double)analytic - (double)numeric) > 1e-9 ? 1.0 : 0.0;
        else
            rel = std::abs((double)analytic - (double)numeric) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = params.name(p);
            report.worst_index = j;
            report.analytic = (double)analytic;
            report.numeric = (double)numeric;
        }
    }
    return report;
}

}  // namespace bmf
