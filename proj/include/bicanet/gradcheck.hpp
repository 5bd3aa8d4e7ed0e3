#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bicanet/autodiff.hpp"

namespace bicanet {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-3;
  /// 0 checks every coordinate; otherwise this many coordinates sampled without replacement.
  std::size_t sampled_entries = 0;
  std::uint64_t seed = 0;
  /// A coordinate whose +/- epsilon evaluations take a different branch at some
  /// relu or channel-max than the unperturbed loss has no valid central
  /// difference and is skipped. The check fails if more than this fraction of
  /// the visited coordinates had to be skipped.
  double max_skip_fraction = 0.1;
};

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the checked coordinates.
  double relative_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

using LossFn = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients of `loss` with respect to `leaves` against
/// central differences. Everything runs in double precision.
GradCheckResult check_gradients(const std::string& name, const std::vector<Var<double>>& leaves,
                                const LossFn& loss, const GradCheckOptions& options = {});

/// sum(out * R) for a fixed pseudo-random R derived from `seed` and the shape of `out`.
Var<double> random_projection(Tape<double>& tape, const Var<double>& out, std::uint64_t seed);

/// Standard-normal tensor from a seeded generator.
template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double stddev = 1.0);

}  // namespace bicanet
