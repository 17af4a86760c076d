#include "numsnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace numsnet {

double finite_diff_max_err(const GradFunc& f, const std::vector<TensorD>& inputs,
                           std::span<const double> steps, double accept_tol) {
    if (steps.empty()) throw ValueError("finite_diff_max_err: no steps given");
    for (double s : steps)
        if (s <= 0.0) throw ValueError("finite_diff_max_err: step must be > 0");

    std::vector<TensorD> probes;
    probes.reserve(inputs.size());
    for (const auto& in : inputs) probes.push_back(in.clone().set_requires_grad(true));

    TensorD out = f(probes);
    if (out.numel() != 1)
        throw ShapeError("finite_diff_max_err: graph output must be scalar, got " +
                         out.shape().str());
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(probes.size());
    for (auto& p : probes) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(p.data().size(), 0.0);
    }

    double max_err = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        auto data = probes[i].mutable_data();
        for (std::size_t e = 0; e < data.size(); ++e) {
            const double saved = data[e];
            const double a = analytic[i][e];
            double best = std::numeric_limits<double>::infinity();
            for (double step : steps) {
                data[e] = saved + step;
                const double fp = f(probes).item();
                data[e] = saved - step;
                const double fm = f(probes).item();
                data[e] = saved;
                const double numeric = (fp - fm) / (2.0 * step);
                const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
                best = std::min(best, std::abs(a - numeric) / denom);
                if (best < accept_tol) break;
            }
            max_err = std::max(max_err, best);
        }
    }
    return max_err;
}

double finite_diff_max_err(const GradFunc& f, const std::vector<TensorD>& inputs, double step) {
    const double steps[1] = {step};
    return finite_diff_max_err(f, inputs, steps, 0.0);
}

double finite_diff_check(const GradFunc& f,
                         const std::function<std::vector<TensorD>(RngStream&)>& sampler,
                         double step, RngStream rng, int max_attempts, double accept_tol) {
    double best = std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < std::max(1, max_attempts); ++attempt) {
        RngStream draw = rng.split(static_cast<std::uint64_t>(attempt));
        const double err = finite_diff_max_err(f, sampler(draw), step);
        best = std::min(best, err);
        if (best < accept_tol) break;
    }
    return best;
}

}  // namespace numsnet
