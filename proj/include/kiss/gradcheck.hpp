#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "kiss/tensor.hpp"

namespace kiss {

struct GradCheckOptions {
  /// Central-difference step for per-op cases.
  double step = 1e-4;
  /// Elements probed per input tensor; larger inputs are subsampled.
  std::size_t max_probes_per_input = 64;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  std::string name;
  /// Worst over inputs of ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6).
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t probes = 0;
  std::size_t skipped = 0;
  bool passed = false;
  std::string error;
};

using GradForward = std::function<std::vector<Tensor<double>>(const std::vector<Tensor<double>>&)>;

/// Compares the tape gradient of sum_k <outputs_k, R_k> (fixed random R_k)
/// with central differences over the elements of `inputs`.
GradCheckReport check_gradient(const std::string& name, double tolerance, const GradForward& forward,
                               std::vector<Tensor<double>> inputs, const GradCheckOptions& options);

struct GradCheckCase {
  std::string name;
  double tolerance = 1e-4;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

/// Every differentiable op recorded on the tape, as named there.
const std::vector<std::string>& tape_op_names();

/// One case per tape op, composite layers and the end-to-end
/// localize -> recognize -> loss path.
std::vector<GradCheckCase> gradcheck_registry();

/// End-to-end check on a tiny double-precision model, probing localizer head
/// parameters and a sample of every other parameter. Probes whose
/// perturbation moves a sample point across an integer pixel coordinate (or a
/// penalty kink) use a smaller step, or are skipped.
GradCheckReport check_end_to_end(const GradCheckOptions& options, double tolerance = 1e-3);

/// Runs cases in order; prints `name  max_rel_error  tolerance  PASS|FAIL` lines when `out` is set.
std::vector<GradCheckReport> run_gradcheck(const std::vector<GradCheckCase>& cases, const GradCheckOptions& options,
                                           std::ostream* out);

}  // namespace kiss
