// Copyright 2026 The sparsedecode Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

// Collapse witnesses for dense attention: when the value width d is below
// N - 1, distinct full-support attention distributions a != a' exist with
// V^T a = V^T a'. Everything here is double precision.
namespace sparsedecode::collapse {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Singular values below this fraction of the largest count as zero.
inline constexpr double kRankTolerance = 1e-10;

inline void check_value_matrix(const Matrix& v) {
    if (v.rows() < 2) throw std::invalid_argument("value matrix needs N >= 2 rows");
    if (!v.allFinite()) throw std::invalid_argument("value matrix has non-finite entries");
}

// [V | 1]^T, the (d+1) x N map whose kernel holds the admissible directions.
inline Matrix stacked_map(const Matrix& v) {
    Matrix m(v.cols() + 1, v.rows());
    m.topRows(v.cols()) = v.transpose();
    m.row(v.cols()).setOnes();
    return m;
}

inline std::size_t stacked_rank(const Matrix& v) {
    check_value_matrix(v);
    const Eigen::JacobiSVD<Matrix> svd(stacked_map(v));
    const auto& sigma = svd.singularValues();
    if (sigma.size() == 0 || sigma(0) == 0.0) return 0;
    std::size_t r = 0;
    for (Eigen::Index i = 0; i < sigma.size(); ++i)
        if (sigma(i) > kRankTolerance * sigma(0)) ++r;
    return r;
}

// A z != 0 with V^T z = 0 and 1^T z = 0, scaled to ||z||_inf = 1, or nothing
// when the stacked map is injective.
inline std::optional<Vector> null_zero_sum_direction(const Matrix& v) {
    check_value_matrix(v);
    const Eigen::JacobiSVD<Matrix> svd(stacked_map(v), Eigen::ComputeFullV);
    const auto& sigma = svd.singularValues();
    const auto n = v.rows();
    Eigen::Index rank = 0;
    if (sigma.size() > 0 && sigma(0) > 0.0)
        for (Eigen::Index i = 0; i < sigma.size(); ++i)
            if (sigma(i) > kRankTolerance * sigma(0)) ++rank;
    if (rank >= n) return std::nullopt;
    Vector z = svd.matrixV().col(rank);
    z /= z.lpNorm<Eigen::Infinity>();
    return z;
}

struct CollapseWitness {
    Vector a;
    Vector a_prime;
    Vector z;
    double beta = 0.5;
    double residual = 0.0;  // ||V^T (a - a')||_inf
};

// a = a0 + (beta/N) z and a' = a0 - (beta/N) z around the uniform a0.
inline CollapseWitness witness_from_direction(const Matrix& v, Vector z, double beta) {
    if (!(beta > 0.0 && beta < 1.0))
        throw std::invalid_argument("beta must lie in the open interval (0, 1), got " + std::to_string(beta));
    if (z.size() != v.rows()) throw std::invalid_argument("direction length differs from N");
    const double n = static_cast<double>(v.rows());
    const Vector uniform = Vector::Constant(v.rows(), 1.0 / n);
    CollapseWitness w;
    w.z = std::move(z);
    w.beta = beta;
    w.a = uniform + (beta / n) * w.z;
    w.a_prime = uniform - (beta / n) * w.z;
    w.residual = (v.transpose() * (w.a - w.a_prime)).lpNorm<Eigen::Infinity>();
    return w;
}

inline std::optional<CollapseWitness> find_collapse_pair(const Matrix& v, double beta) {
    if (!(beta > 0.0 && beta < 1.0))
        throw std::invalid_argument("beta must lie in the open interval (0, 1), got " + std::to_string(beta));
    auto z = null_zero_sum_direction(v);
    if (!z) return std::nullopt;
    return witness_from_direction(v, std::move(*z), beta);
}

// Smallest hidden width at which a -> V^T a can be injective on the simplex.
constexpr std::size_t min_width_for_injectivity(std::size_t num_tokens) {
    return num_tokens < 2 ? 0 : num_tokens - 1;
}

struct Check {
    std::string name;
    bool passed = false;
    double value = 0.0;  // the measured quantity behind the check
};

struct VerifyReport {
    std::vector<Check> checks;

    bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return !checks.empty();
    }

    const Check* find(const std::string& name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }
};

// Checks every witness invariant separately; failures are reported, never thrown.
inline VerifyReport verify_witness(const Matrix& v, const CollapseWitness& w, double tol) {
    constexpr double kExact = 1e-12;
    VerifyReport report;
    auto add = [&](std::string name, bool ok, double value) { report.checks.push_back({std::move(name), ok, value}); };

    const auto n = v.rows();
    const bool shapes = w.a.size() == n && w.a_prime.size() == n && w.z.size() == n;
    add("shapes", shapes, static_cast<double>(n));
    if (!shapes) return report;

    const double dn = static_cast<double>(n);
    const double gap = (w.a - w.a_prime).lpNorm<Eigen::Infinity>();
    add("distinct", gap > 0.0, gap);
    const double sum_err = std::max(std::abs(w.a.sum() - 1.0), std::abs(w.a_prime.sum() - 1.0));
    add("sums_to_one", sum_err <= kExact, sum_err);

    const double lo = (1.0 - w.beta) / dn, hi = (1.0 + w.beta) / dn;
    const double slack = 4.0 * std::numeric_limits<double>::epsilon() * hi;
    const double min_coord = std::min(w.a.minCoeff(), w.a_prime.minCoeff());
    const double max_coord = std::max(w.a.maxCoeff(), w.a_prime.maxCoeff());
    add("coordinate_lower_bound", min_coord >= lo - slack, min_coord);
    add("coordinate_upper_bound", max_coord <= hi + slack, max_coord);
    add("beta_in_open_interval", w.beta > 0.0 && w.beta < 1.0, w.beta);

    const double z_norm = w.z.lpNorm<Eigen::Infinity>();
    add("z_unit_inf_norm", std::abs(z_norm - 1.0) <= kExact, z_norm);
    const double z_sum = std::abs(w.z.sum());
    add("z_zero_sum", z_sum <= kExact, z_sum);

    const double null_residual = (v.transpose() * w.z).lpNorm<Eigen::Infinity>();
    add("null_residual", null_residual <= tol, null_residual);
    const double residual = (v.transpose() * (w.a - w.a_prime)).lpNorm<Eigen::Infinity>();
    add("residual", residual <= tol, residual);
    return report;
}

} // namespace sparsedecode::collapse
