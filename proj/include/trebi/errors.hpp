#pragma once

#include <stdexcept>
#include <string>

namespace trebi {

// Input of the wrong dimension was handed to a network, trajectory or env.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A loss became non-finite during training; the run is aborted.
struct TrainingDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An API was called out of order (e.g. stepping a finished episode).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Guidance produced or received a non-finite gradient.
struct GuidanceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// No trajectory with positive behavior probability satisfies the budget.
struct InfeasibleBudget : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A concentration bound needs N(s,a) > 0 on its support but saw a zero count.
struct UndefinedBound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or mismatched file (dataset, checkpoint, config, CSV).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An invariant that construction should guarantee was violated.
struct InternalError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace trebi
