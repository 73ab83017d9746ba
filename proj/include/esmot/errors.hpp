#pragma once

#include <stdexcept>
#include <string>

namespace esmot {

/// A message band carried no mass (all log-weights at the log-zero sentinel).
struct MessageCollapseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A per-node scalar solve failed; carries slice/node context.
struct SliceSolveError : std::runtime_error {
    int slice;
    int node;
    SliceSolveError(int i, int j, const std::string& what)
        : std::runtime_error("slice " + std::to_string(i) + ", node " + std::to_string(j) + ": " + what)
        , slice(i)
        , node(j)
    {
    }
};

/// Chain puts mass where the reference row is zero (relative entropy is +inf,
/// distinct from numeric overflow).
struct AbsoluteContinuityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonConvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace esmot
