#pragma once

#include <stdexcept>
#include <string>

namespace mlmgof {

class EstimationError : public std::runtime_error {
public:
  enum class Code {
    BadNodeCount,
    NonFiniteLikelihood,
    SeparationDetected,
    SingularInformation,
    NoConvergence,
    ModeSearchFailure,
    BadVarianceComponents
  };

  EstimationError(Code code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}

  Code code() const { return code_; }

private:
  Code code_;
};

} // namespace mlmgof
