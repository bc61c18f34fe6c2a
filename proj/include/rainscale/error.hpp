#ifndef RAINSCALE_ERROR_HPP_
#define RAINSCALE_ERROR_HPP_

#include <sstream>
#include <stdexcept>
#include <string>

namespace rainscale {

/// Error identities raised by the toolkit. Tests match on the code, not the
/// message text.
enum class errc {
  missing_variable,
  shape_mismatch,
  non_finite_value,
  io_failure,
  negative_input,
  unknown_variable,
  non_divisible_shape,
  invalid_target,
  empty_partition,
  invalid_config,
  invalid_spec,
  non_scalar_loss,
  double_backward,
  length_mismatch,
  divergence_detected,
  spec_mismatch,
  zero_variance,
  empty_series,
  negative_value,
  binning_mismatch,
  too_few_steps,
  empty_event,
  time_misalignment,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::missing_variable: return "MissingVariable";
    case errc::shape_mismatch: return "ShapeMismatch";
    case errc::non_finite_value: return "NonFiniteValue";
    case errc::io_failure: return "IoFailure";
    case errc::negative_input: return "NegativeInput";
    case errc::unknown_variable: return "UnknownVariable";
    case errc::non_divisible_shape: return "NonDivisibleShape";
    case errc::invalid_target: return "InvalidTarget";
    case errc::empty_partition: return "EmptyPartition";
    case errc::invalid_config: return "InvalidConfig";
    case errc::invalid_spec: return "InvalidSpec";
    case errc::non_scalar_loss: return "NonScalarLoss";
    case errc::double_backward: return "DoubleBackward";
    case errc::length_mismatch: return "LengthMismatch";
    case errc::divergence_detected: return "DivergenceDetected";
    case errc::spec_mismatch: return "SpecMismatch";
    case errc::zero_variance: return "ZeroVariance";
    case errc::empty_series: return "EmptySeries";
    case errc::negative_value: return "NegativeValue";
    case errc::binning_mismatch: return "BinningMismatch";
    case errc::too_few_steps: return "TooFewSteps";
    case errc::empty_event: return "EmptyEvent";
    case errc::time_misalignment: return "TimeMisalignment";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  errc code() const { return code_; }

 private:
  errc code_;
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  format_parts(os, rest...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void fail(errc code, const Parts&... parts) {
  std::ostringstream os;
  detail::format_parts(os, parts...);
  throw Error(code, os.str());
}

template <typename... Parts>
void require(bool cond, errc code, const Parts&... parts) {
  if (!cond) fail(code, parts...);
}

}  // namespace rainscale

#endif  // RAINSCALE_ERROR_HPP_
