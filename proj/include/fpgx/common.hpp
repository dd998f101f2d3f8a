#pragma once

#include <stdexcept>
#include <string>

namespace fpgx {

inline constexpr const char* kToolVersion = "fpgx 1.0.0";

// Shape disagreement between operands.
struct DimensionError : std::runtime_error { using std::runtime_error::runtime_error; };
// NaN/Inf where finite values are required.
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ZeroMatrixError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ZeroVectorError : std::runtime_error { using std::runtime_error::runtime_error; };
// Malformed caller input: token ids, config values, prompt sets.
struct InputError : std::runtime_error { using std::runtime_error::runtime_error; };
// Invalid growth plan.
struct PlanError : std::runtime_error { using std::runtime_error::runtime_error; };
// Two model structures that were required to line up do not.
struct StructureError : std::runtime_error { using std::runtime_error::runtime_error; };

struct ConvergenceError : std::runtime_error {
  double final_accuracy;
  ConvergenceError(const std::string& msg, double acc)
      : std::runtime_error(msg), final_accuracy(acc) {}
};

// Checkpoint container faults.
struct BadMagic : std::runtime_error { using std::runtime_error::runtime_error; };
struct VersionMismatch : std::runtime_error { using std::runtime_error::runtime_error; };
struct CorruptTable : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeMismatch : std::runtime_error { using std::runtime_error::runtime_error; };

}  // namespace fpgx
