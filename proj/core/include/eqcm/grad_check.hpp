#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eqcm/graph.hpp"
#include "eqcm/rng.hpp"
#include "eqcm/tensor.hpp"

namespace eqcm {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-3;

  bool pass() const {
    for (const auto& e : entries)
      if (!e.pass) return false;
    return true;
  }
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
};

// Checks analytic gradients against central finite differences, in double.
// The builder receives a fresh graph plus one leaf per parameter tensor (in
// order) and returns the scalar loss node; it is re-invoked for every
// perturbed evaluation, so it must be a pure function of the parameters.
//
// Each tensor is checked at every scalar, or at a seeded random subsample of
// at least min_samples scalars when larger. Relative error per scalar is
// |ga - gn| / max(|ga|, |gn|, 1e-8).
using GradCheckBuilder =
    std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;

inline GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor<double>>> params,
                                  const GradCheckBuilder& build, double step = 1e-3,
                                  double tolerance = 1e-3, std::size_t min_samples = 64,
                                  std::uint64_t seed = 0x67726164) {
  require(step > 0.0, "grad_check: step must be positive");
  GradCheckReport report;
  report.tolerance = tolerance;
  if (params.empty()) return report;  // vacuous pass

  auto eval_loss = [&](const std::vector<Tensor<double>>& theta) {
    Graph<double> g;
    std::vector<NodeId> ids;
    ids.reserve(theta.size());
    for (const auto& t : theta) ids.push_back(g.leaf(t, false));
    return static_cast<double>(g.value(build(g, ids)).v[0]);
  };

  // analytic pass
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<NodeId> ids;
    for (const auto& [name, t] : params) ids.push_back(g.leaf(t, true));
    const NodeId loss = build(g, ids);
    g.backward(loss);
    for (NodeId id : ids) analytic.push_back(g.grad(id));
  }

  std::vector<Tensor<double>> theta;
  theta.reserve(params.size());
  for (auto& [name, t] : params) theta.push_back(t);

  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    GradCheckEntry entry;
    entry.name = params[pi].first;
    const std::size_t n = theta[pi].numel();

    std::vector<std::size_t> idx;
    if (n <= min_samples) {
      idx.resize(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      // partial Fisher-Yates over [0, n)
      std::vector<std::size_t> pool(n);
      for (std::size_t i = 0; i < n; ++i) pool[i] = i;
      for (std::size_t i = 0; i < min_samples; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - i) - 1));
        std::swap(pool[i], pool[j]);
      }
      idx.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(min_samples));
    }

    for (std::size_t i : idx) {
      const double theta0 = theta[pi].v[i];
      const double h = step * std::max(std::abs(theta0), 1.0);
      theta[pi].v[i] = theta0 + h;
      const double up = eval_loss(theta);
      theta[pi].v[i] = theta0 - h;
      const double dn = eval_loss(theta);
      theta[pi].v[i] = theta0;

      const double gn = (up - dn) / (2.0 * h);
      const double ga = analytic[pi].v[i];
      const double rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checked;
    }
    entry.pass = entry.max_rel_err <= tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace eqcm
