#pragma once

#include <stdexcept>
#include <string>

namespace skewresp {

enum class ErrorKind {
    ParameterOutOfRange,
    NewtonDivergence,
    Aliasing,
    NonConvergence,
    FitUnstable,
    DegenerateInput,
    ConfigInvalid,
    NumericalFailure,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::ParameterOutOfRange: return "parameter-out-of-range";
    case ErrorKind::NewtonDivergence: return "newton-divergence";
    case ErrorKind::Aliasing: return "aliasing";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::FitUnstable: return "fit-unstable";
    case ErrorKind::DegenerateInput: return "degenerate-input";
    case ErrorKind::ConfigInvalid: return "config-invalid";
    case ErrorKind::NumericalFailure: return "numerical-failure";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace skewresp
