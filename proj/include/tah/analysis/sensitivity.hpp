#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tah/analysis/evaluate.hpp"
#include "tah/policy/labels.hpp"

namespace tah {

/// (underthink, overthink) error rates as fractions of all consulted
/// decisions.
struct NoisePoint {
  double underthink = 0.0;
  double overthink = 0.0;
};

/// The six oracle-with-noise grid points, given in percent.
inline std::vector<NoisePoint> noise_grid_preset() {
  const std::vector<std::pair<double, double>> pct = {{0.0, 0.0}, {1.5, 8.5}, {2.1, 12.9},
                                                      {2.8, 0.0}, {0.0, 22.1}, {2.5, 17.5}};
  std::vector<NoisePoint> out;
  for (auto [u, o] : pct) out.push_back({u / 100.0, o / 100.0});
  return out;
}

struct SensitivityRow {
  NoisePoint requested;
  std::uint64_t seed = 0;
  double realized_underthink = 0.0;
  double realized_overthink = 0.0;
  double accuracy = 0.0;
};

/// accuracy ≈ a·underthink + b·overthink + c.
struct LinearFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  std::vector<double> residuals;
  double rmse = 0.0;
};

/// Least-squares fit over (underthink, overthink, accuracy) triples.
inline LinearFit fit_linear(const std::vector<double>& under, const std::vector<double>& over,
                            const std::vector<double>& acc) {
  const auto n = static_cast<Eigen::Index>(acc.size());
  if (under.size() != acc.size() || over.size() != acc.size()) throw DimensionError("fit_linear: length mismatch");
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    X(i, 0) = under[k];
    X(i, 1) = over[k];
    X(i, 2) = 1.0;
    y(i) = acc[k];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (n < 3 || qr.rank() < 3) throw FitError("sensitivity fit: design matrix is rank deficient");
  const Eigen::VectorXd beta = qr.solve(y);
  LinearFit f{beta(0), beta(1), beta(2), {}, 0.0};
  const Eigen::VectorXd res = y - X * beta;
  double ss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    f.residuals.push_back(res(i));
    ss += res(i) * res(i);
  }
  f.rmse = std::sqrt(ss / static_cast<double>(n));
  return f;
}

struct SensitivityResult {
  double unperturbed_accuracy = 0.0;
  std::vector<SensitivityRow> rows;
  LinearFit fit;
};

/// Teacher-forced accuracy of `model` on the validation split when depths
/// follow the oracle labels with injected under/overthinking, per grid
/// point and seed, plus the linear fit over realized rates.
template <class T>
SensitivityResult sensitivity_sweep(const Backbone<T>& model, const TokenizedCorpus& corpus,
                                    const IterationLabels& labels, const std::vector<NoisePoint>& grid,
                                    const std::vector<std::uint64_t>& seeds, std::size_t batch_size = 32,
                                    std::size_t max_len = 128) {
  if (grid.empty() || seeds.empty()) throw ConfigError("sensitivity sweep: empty grid or seed list");
  EvalOptions<T> opt;
  opt.policy = EvalPolicy::oracle_labels;
  opt.labels = &labels;
  opt.batch_size = batch_size;
  opt.max_len = max_len;
  SensitivityResult out;
  out.unperturbed_accuracy = evaluate(model, corpus, opt).accuracy();
  std::vector<double> u, o, a;
  for (const auto& p : grid) {
    for (auto seed : seeds) {
      auto pert = perturb_policy(labels, p.overthink, p.underthink, seed);
      opt.labels = &pert.labels;
      SensitivityRow row;
      row.requested = p;
      row.seed = seed;
      row.realized_underthink = pert.realized_underthink();
      row.realized_overthink = pert.realized_overthink();
      row.accuracy = evaluate(model, corpus, opt).accuracy();
      out.rows.push_back(row);
      u.push_back(row.realized_underthink);
      o.push_back(row.realized_overthink);
      a.push_back(row.accuracy);
    }
  }
  out.fit = fit_linear(u, o, a);
  return out;
}

inline nlohmann::json to_json_value(const SensitivityResult& r) {
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"underthink", row.requested.underthink},
                    {"overthink", row.requested.overthink},
                    {"seed", row.seed},
                    {"realized_underthink", row.realized_underthink},
                    {"realized_overthink", row.realized_overthink},
                    {"accuracy", row.accuracy}});
  }
  return {{"unperturbed_accuracy", r.unperturbed_accuracy},
          {"rows", rows},
          {"fit", {{"a", r.fit.a}, {"b", r.fit.b}, {"c", r.fit.c}, {"rmse", r.fit.rmse}, {"residuals", r.fit.residuals}}}};
}

}  // namespace tah
