#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rcnf {

enum class Errc {
  invalid_dimensions,
  unknown_task,
  shape_mismatch,
  empty_projection,
  empty_mask,
  episode_too_short,
  uninitialized_weights,
  already_initialized,
  uninitialized_actnorm,
  singular_mixing,
  insufficient_calibration_data,
  mixed_labels,
  single_class,
  no_positives,
  anomalous_data_in_training,
  divergence,
  invalid_argument,
  io_error,
  parse_error,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_dimensions: return "invalid-dimensions";
    case Errc::unknown_task: return "unknown-task";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::empty_projection: return "empty-projection";
    case Errc::empty_mask: return "empty-mask";
    case Errc::episode_too_short: return "episode-too-short";
    case Errc::uninitialized_weights: return "uninitialized-weights";
    case Errc::already_initialized: return "already-initialized";
    case Errc::uninitialized_actnorm: return "uninitialized-actnorm";
    case Errc::singular_mixing: return "singular-mixing";
    case Errc::insufficient_calibration_data: return "insufficient-calibration-data";
    case Errc::mixed_labels: return "mixed-labels";
    case Errc::single_class: return "single-class";
    case Errc::no_positives: return "no-positives";
    case Errc::anomalous_data_in_training: return "anomalous-data-in-training";
    case Errc::divergence: return "divergence";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::io_error: return "io-error";
    case Errc::parse_error: return "parse-error";
  }
  return "unknown";
}

/// Every recoverable failure in the library is reported as an Error carrying
/// a stable machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace rcnf
