// SPDX-License-Identifier: Apache-2.0
#include "rsseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rsseg {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

double tolerance_ratio(double analytic, double numeric, const GradcheckOptions& options) {
  const double allowed =
      std::max(options.rel_tol * std::max(std::abs(analytic), std::abs(numeric)), options.abs_floor);
  return std::abs(analytic - numeric) / allowed;
}

GradcheckReport gradcheck(const std::function<Tensor<double>()>& loss,
                          const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                          const GradcheckOptions& options) {
  std::vector<std::vector<double>> analytic;
  {
    for (const auto& [name, t] : inputs) {
      Tensor<double> handle = t;
      handle.set_requires_grad(true);
      handle.zero_grad();
    }
    Tape<double> tape;
    tape.backward(loss());
    for (const auto& [name, t] : inputs) {
      const Tensor<double> g = t.grad();
      analytic.emplace_back(g.data().begin(), g.data().end());
    }
  }

  GradcheckReport report;
  report.worst.ratio = -1;
  NoGrad<double> no_grad;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    Tensor<double> t = inputs[p].second;
    const Index n = t.size();
    const Index stride = options.max_per_tensor > 0 ? std::max<Index>(1, n / options.max_per_tensor) : 1;
    for (Index i = 0; i < n; i += stride) {
      auto values = t.mutable_data();
      const double original = values[i];
      values[i] = original + options.step;
      const double up = loss().item();
      values[i] = original - options.step;
      const double down = loss().item();
      values[i] = original;
      const double numeric = (up - down) / (2 * options.step);
      const double a = analytic[p][static_cast<std::size_t>(i)];
      const GradcheckEntry entry{inputs[p].first, i,        a, numeric, std::abs(a - numeric),
                                 relative_error(a, numeric, options.abs_floor), tolerance_ratio(a, numeric, options)};
      ++report.checked;
      if (entry.ratio > report.worst.ratio) report.worst = entry;
      if (entry.ratio > 1.0) {
        ++report.failures;
        if (report.failed.size() < 16) report.failed.push_back(entry);
      }
    }
  }
  return report;
}

}  // namespace rsseg
