#pragma once

// Runtime scaling of the structured determinant against the dense oracle.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "starflow/error.hpp"
#include "starflow/jacdet.hpp"
#include "starflow/manifolds.hpp"

namespace starflow {

struct BenchRow {
  std::string method;  // "fast" or "oracle"
  std::size_t d = 0;
  std::size_t rep = 0;
  double seconds = 0.0;  // per evaluation
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double max_rel_error = 0.0;  // fast vs oracle over every timed point
};

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_slope = 0.0;
};

template <class Rng>
AngleVector<double> random_interior_angles(std::size_t d, AngleDomain domain, Rng& rng) {
  AngleVector<double> a;
  a.domain = domain;
  for (std::size_t k = 0; k + 1 < d; ++k) {
    const double hi = angle_upper(domain, k, d - 1);
    std::uniform_real_distribution<double> u(0.05 * hi, 0.95 * hi);
    a.theta.push_back(u(rng));
  }
  return a;
}

// Each timed repetition evaluates `inner` times at one fresh theta and records
// the mean; `inner` is set during the untimed warm-up so that a repetition
// lasts at least min_rep_seconds (clock resolution is then irrelevant).
template <class Rng>
BenchResult time_jacdet(const std::vector<std::size_t>& dims, std::size_t reps, const RadiusField& field, Rng& rng,
                        double min_rep_seconds = 2e-4) {
  if (reps < 1) throw InvalidArgument("time_jacdet: reps must be >= 1");
  for (std::size_t d : dims)
    if (d < 2) throw InvalidArgument("time_jacdet: every dimension must be >= 2");
  using clock = std::chrono::steady_clock;
  BenchResult out;
  volatile double sink = 0.0;
  for (std::size_t d : dims) {
    for (const std::string method : {"fast", "oracle"}) {
      auto run = [&](const AngleVector<double>& th) {
        return method == "fast" ? fast_log_det<double>(th, field).log_abs : oracle_log_det<double>(th, field);
      };
      // Warm-up; also sizes the inner loop.
      const auto warm = random_interior_angles(d, field.domain(), rng);
      std::size_t inner = 1;
      for (;;) {
        const auto t0 = clock::now();
        for (std::size_t i = 0; i < inner; ++i) sink = sink + run(warm);
        const double el = std::chrono::duration<double>(clock::now() - t0).count();
        if (el >= min_rep_seconds || inner >= (1u << 20)) break;
        inner *= 2;
      }
      for (std::size_t r = 0; r < reps; ++r) {
        const auto th = random_interior_angles(d, field.domain(), rng);
        const auto t0 = clock::now();
        double v = 0.0;
        for (std::size_t i = 0; i < inner; ++i) v = run(th);
        const double el = std::chrono::duration<double>(clock::now() - t0).count();
        sink = sink + v;
        out.rows.push_back({method, d, r, el / static_cast<double>(inner)});
        if (method == "oracle") {
          const double fast = fast_log_det<double>(th, field).log_abs;
          out.max_rel_error = std::max(out.max_rel_error, std::fabs(fast - v) / std::max(1.0, std::fabs(v)));
        }
      }
    }
  }
  return out;
}

inline std::map<std::size_t, double> median_seconds(const std::vector<BenchRow>& rows, const std::string& method) {
  std::map<std::size_t, std::vector<double>> by_d;
  for (const auto& r : rows)
    if (r.method == method) by_d[r.d].push_back(r.seconds);
  std::map<std::size_t, double> out;
  for (auto& [d, v] : by_d) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    out[d] = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  return out;
}

// OLS of log(median seconds) on log d.
inline PowerLawFit fit_loglog_exponent(const std::vector<BenchRow>& rows, const std::string& method) {
  const auto med = median_seconds(rows, method);
  if (med.size() < 3) throw InvalidArgument("fit_loglog_exponent: need at least 3 distinct dimensions");
  std::vector<double> x, y;
  for (const auto& [d, s] : med) {
    if (!(s > 0.0)) throw InvalidArgument("fit_loglog_exponent: seconds must be > 0");
    x.push_back(std::log(static_cast<double>(d)));
    y.push_back(std::log(s));
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  PowerLawFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - f.intercept - f.slope * x[i];
    rss += e * e;
  }
  f.stderr_slope = x.size() > 2 ? std::sqrt(rss / (n - 2.0) / sxx) : 0.0;
  return f;
}

inline void write_bench_csv(const BenchResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.precision(17);
  out << "method,d,rep,seconds\n";
  for (const auto& row : r.rows) out << row.method << ',' << row.d << ',' << row.rep << ',' << row.seconds << '\n';
}

}  // namespace starflow
