#pragma once

#include <stdexcept>
#include <string>

namespace npstream {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Wrong tensor rank / dimension mismatch / malformed argument.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Semantically invalid input: bad config value, empty context, unknown family.
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Numerical failure: NaN/Inf in a forward op, Cholesky breakdown,
// fully masked softmax row, NaN loss during training.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace npstream
