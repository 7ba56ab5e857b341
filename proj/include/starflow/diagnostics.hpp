#pragma once

// Grid-based checks for d = 3 models and sample-based constraint checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "starflow/error.hpp"
#include "starflow/flow.hpp"
#include "starflow/jacdet.hpp"
#include "starflow/spherical.hpp"

namespace starflow {

struct GridPoint {
  double theta1 = 0.0;
  double theta2 = 0.0;
  std::vector<double> x;
  double log_volume = 0.0;  // log of the exact area element at (theta1, theta2)
};

// Midpoints of a resolution x resolution grid over the angle box of a d = 3 field.
inline std::vector<GridPoint> angle_grid(const RadiusField& field, AngleDomain domain, std::size_t resolution) {
  if (resolution < 1) throw InvalidArgument("angle grid: resolution must be >= 1");
  const double l1 = angle_upper(domain, 0, 2), l2 = angle_upper(domain, 1, 2);
  const double h1 = l1 / static_cast<double>(resolution), h2 = l2 / static_cast<double>(resolution);
  std::vector<GridPoint> out;
  out.reserve(resolution * resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      AngleVector<double> th{{(static_cast<double>(i) + 0.5) * h1, (static_cast<double>(j) + 0.5) * h2}, domain};
      const double r = field.radius<double>(std::span<const double>(th.theta));
      GridPoint g;
      g.theta1 = th.theta[0];
      g.theta2 = th.theta[1];
      g.x = to_cartesian(SphericalPoint<double>{th, r}).x;
      g.log_volume = oracle_log_det(th, field);
      out.push_back(std::move(g));
    }
  }
  return out;
}

inline double grid_cell_area(AngleDomain domain, std::size_t resolution) {
  const double n = static_cast<double>(resolution);
  return angle_upper(domain, 0, 2) / n * angle_upper(domain, 1, 2) / n;
}

// log of the integral of exp(log_f) over the manifold (midpoint rule).
inline double log_integral_3d(const std::function<double(std::span<const double>)>& log_f, const RadiusField& field,
                              AngleDomain domain, std::size_t resolution) {
  const auto grid = angle_grid(field, domain, resolution);
  std::vector<double> terms;
  terms.reserve(grid.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& g : grid) {
    terms.push_back(log_f(g.x) + g.log_volume);
    mx = std::max(mx, terms.back());
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - mx);
  return mx + std::log(s * grid_cell_area(domain, resolution));
}

// Total probability mass of a d = 3 model by quadrature; 1 for a normalized flow.
inline double integrate_model_3d(const FlowModel& model, std::size_t resolution = 100) {
  if (model.dim() != 3) throw InvalidArgument("integrate_model_3d: model must have d = 3");
  double total = 0.0;
  for (const auto& g : angle_grid(model.field(), model.domain(), resolution)) {
    total += std::exp(logprob_at(model, g.x) + g.log_volume);
  }
  return total * grid_cell_area(model.domain(), resolution);
}

struct DensityGridRow {
  double theta1 = 0.0;
  double theta2 = 0.0;
  double log_q = 0.0;
  std::vector<double> x;
};

inline std::vector<DensityGridRow> density_grid(const FlowModel& model, std::size_t resolution) {
  if (model.dim() != 3) throw InvalidArgument("density grid: model must have d = 3, got d = " + std::to_string(model.dim()));
  std::vector<DensityGridRow> out;
  for (auto& g : angle_grid(model.field(), model.domain(), resolution)) {
    out.push_back({g.theta1, g.theta2, logprob_at(model, g.x), std::move(g.x)});
  }
  return out;
}

inline void write_density_grid_csv(const std::vector<DensityGridRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.precision(17);
  out << "theta1,theta2,log_q\n";
  for (const auto& r : rows) out << r.theta1 << ',' << r.theta2 << ',' << r.log_q << '\n';
}

inline std::vector<DensityGridRow> emit_density_grid(const FlowModel& model, std::size_t resolution,
                                                     const std::string& path) {
  auto rows = density_grid(model, resolution);
  write_density_grid_csv(rows, path);
  return rows;
}

struct ModeRecall {
  std::size_t recovered = 0;
  std::size_t modes = 0;
  std::size_t set_size = 0;
  double precision = 0.0;  // share of the set within `radius` of some mode
};

inline double great_circle(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
}

// The argmax set is the superlevel set {log q >= log_level} of the grid.
inline ModeRecall mode_recall(const std::vector<DensityGridRow>& grid, const std::vector<std::vector<double>>& modes,
                              double log_level, double radius) {
  ModeRecall r;
  r.modes = modes.size();
  std::vector<const DensityGridRow*> set;
  for (const auto& g : grid)
    if (g.log_q >= log_level) set.push_back(&g);
  r.set_size = set.size();
  std::vector<bool> hit(modes.size(), false);
  std::size_t near = 0;
  for (const auto* g : set) {
    bool any = false;
    for (std::size_t m = 0; m < modes.size(); ++m) {
      if (great_circle(g->x, modes[m]) <= radius) {
        hit[m] = true;
        any = true;
      }
    }
    near += any;
  }
  r.recovered = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), true));
  r.precision = set.empty() ? 0.0 : static_cast<double>(near) / static_cast<double>(set.size());
  return r;
}

struct ConstraintReport {
  std::size_t samples = 0;
  std::size_t violations = 0;
  double max_residual = 0.0;
};

template <class Rng>
ConstraintReport check_constraint(const FlowModel& model, std::size_t n, double tol, Rng& rng) {
  ConstraintReport r;
  r.samples = n;
  // Batches keep peak memory flat for large n.
  const std::size_t batch = 4096;
  for (std::size_t done = 0; done < n; done += batch) {
    for (const auto& s : sample_and_logprob(model, std::min(batch, n - done), rng)) {
      const double res = model.field().constraint_residual(s.x);
      r.max_residual = std::max(r.max_residual, std::isfinite(res) ? res : std::numeric_limits<double>::infinity());
      if (!(res <= tol)) ++r.violations;
    }
  }
  return r;
}

}  // namespace starflow
