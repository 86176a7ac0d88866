#ifndef GLMEIV_ERRORS_HPP
#define GLMEIV_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace glmeiv {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Rank-deficient weighted design; message names the collinear columns.
struct SingularFitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonconvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A mixture component collapsed (e.g. weighted response sum of zero under
/// a log link, or no perturbed cells detected).
struct DegenerateComponentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite intermediate; message carries the first offending cell index.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InferenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace glmeiv

#endif
