#pragma once

#include <functional>
#include <span>
#include <vector>

#include "numsnet/rng.hpp"
#include "numsnet/tensor.hpp"

namespace numsnet {

// A differentiable scalar-valued graph under test. Must be a pure function of
// its inputs: any internal randomness (dropout masks) has to be re-derived
// from a fixed seed on every call so repeated evaluations agree.
using GradFunc = std::function<TensorD(const std::vector<TensorD>&)>;

// Central-difference probe of every element of every input:
// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_max_err(const GradFunc& f, const std::vector<TensorD>& inputs, double step);

// Multi-scale variant for deep compositions: each element may satisfy any of
// the given steps (smallest error wins). A relu kink or pooling near-tie
// inside the widest bracket vanishes at a narrower one, while an exactly-dead
// parameter's roundoff noise vanishes at a wider one; only a genuinely wrong
// backward rule fails every scale. Probing stops per element once the error
// drops below accept_tol.
double finite_diff_max_err(const GradFunc& f, const std::vector<TensorD>& inputs,
                           std::span<const double> steps, double accept_tol = 1e-4);

// Verification harness around the probe. Draws inputs from `sampler` and
// retries with a fresh draw (bounded by max_attempts) when the error exceeds
// accept_tol — a pooling tie or relu kink within `step` of the sample point
// makes the central difference meaningless, and a resample moves off it.
// Returns the smallest error seen; a genuine backward bug fails every draw.
double finite_diff_check(const GradFunc& f,
                         const std::function<std::vector<TensorD>(RngStream&)>& sampler,
                         double step, RngStream rng, int max_attempts = 3,
                         double accept_tol = 1e-4);

}  // namespace numsnet
