// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rsseg/tensor.hpp"

namespace rsseg {

struct GradcheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-5;
  double abs_floor = 1e-8;
  // 0 checks every element; otherwise at most this many per tensor, evenly spaced
  Index max_per_tensor = 0;
};

struct GradcheckEntry {
  std::string name;
  Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double abs_error = 0;
  double rel_error = 0;  // |a - n| / max(|a|, |n|, abs_floor)
  double ratio = 0;      // abs_error / allowed error; > 1 fails
};

struct GradcheckReport {
  Index checked = 0;
  Index failures = 0;
  GradcheckEntry worst;  // largest ratio seen
  std::vector<GradcheckEntry> failed;  // first few failures

  bool passed() const { return failures == 0; }
};

/// |a - n| / max(|a|, |n|, abs_floor).
double relative_error(double analytic, double numeric, double abs_floor);

/// An element passes when |a - n| <= max(rel_tol * max(|a|, |n|), abs_floor).
double tolerance_ratio(double analytic, double numeric, const GradcheckOptions& options);

/// Compares the taped gradient of `loss` with central differences for every
/// element of `inputs`. The inputs are perturbed in place and restored; the
/// finite-difference evaluations run without recording.
GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss,
                          const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                          const GradcheckOptions& options = {});

}  // namespace rsseg
