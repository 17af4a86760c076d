#pragma once

#include <span>
#include <string>
#include <vector>

#include "numsnet/gradcheck.hpp"

namespace numsnet {

// Named finite-difference checks covering every differentiable op, the
// losses, and a double-precision mirror of the full tiny-configuration
// NUMSnet forward (widths [2,2,2,2,2], 16x16 input, two classes; batch norm
// in train mode, dropout masks frozen per evaluation, empty propagation
// state so the merges self-concatenate). The mirror is wired from the same
// parameter registry as the float32 model and cross-checked against its
// forward output before the gradient probe runs.

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0;
    double tolerance = 1e-4;
    bool pass = false;
    double seconds = 0;
};

std::vector<std::string> gradcheck_case_names();

// Runs all cases, or only the named subset. Unknown names raise ValueError.
std::vector<GradCheckCase> run_gradcheck_suite(std::span<const std::string> only = {},
                                               std::uint64_t seed = 0);

}  // namespace numsnet
