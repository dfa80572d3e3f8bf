#include "rapstream/linalg.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace rapstream::linalg {

namespace {

// Eigendecomposition of a plain symmetric matrix, descending eigenvalue order.
EigDecomposition sym_eig_raw(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
    if (solver.info() != Eigen::Success) {
        throw NumericalError("symmetric eigendecomposition did not converge",
                             std::numeric_limits<double>::quiet_NaN());
    }
    const Eigen::Index n = m.rows();
    EigDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors.resize(n, n);
    // Eigen returns ascending order; flip.
    for (Eigen::Index i = 0; i < n; ++i) {
        out.eigenvalues(i) = solver.eigenvalues()(n - 1 - i);
        out.eigenvectors.col(i) = solver.eigenvectors().col(n - 1 - i);
    }
    return out;
}

Matrix map_eigenvalues(const EigDecomposition& eig, double (*fn)(double)) {
    Vector mapped(eig.eigenvalues.size());
    for (Eigen::Index i = 0; i < mapped.size(); ++i) mapped(i) = fn(eig.eigenvalues(i));
    return eig.eigenvectors * mapped.asDiagonal() * eig.eigenvectors.transpose();
}

void check_same_dim(const SpdMatrix& a, const SpdMatrix& b) {
    if (a.dim() != b.dim()) {
        throw ShapeError("SPD dimension mismatch: " + std::to_string(a.dim()) + " vs " +
                         std::to_string(b.dim()));
    }
}

}  // namespace

SpdMatrix::SpdMatrix(const Matrix& m) {
    if (m.rows() != m.cols()) {
        throw ShapeError("SPD matrix must be square, got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
    }
    if (!m.allFinite()) {
        throw NumericalError("SPD construction from non-finite entries");
    }
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol * scale) {
        throw ShapeError("matrix is not symmetric within tolerance");
    }
    values_ = 0.5 * (m + m.transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(values_,
                                                          Eigen::EigenvaluesOnly);
    const double lmin = solver.eigenvalues().minCoeff();
    const double lmax = solver.eigenvalues().maxCoeff();
    const bool degenerate = lmin <= 0.0;
    const bool ill_conditioned = lmin > 0.0 && lmax / lmin > kMaxCondition;
    if (degenerate || ill_conditioned) {
        const double tau = kShrinkageEps * values_.trace() / static_cast<double>(dim());
        if (tau <= 0.0) {
            throw NumericalError("degenerate matrix: shrinkage target has non-positive trace",
                                 lmin);
        }
        values_ += tau * Matrix::Identity(dim(), dim());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> recheck(values_,
                                                               Eigen::EigenvaluesOnly);
        if (recheck.eigenvalues().minCoeff() <= 0.0) {
            throw NumericalError("degenerate matrix: not positive definite after shrinkage",
                                 recheck.eigenvalues().minCoeff());
        }
    }
}

EigDecomposition sym_eig(const SpdMatrix& m) { return sym_eig_raw(m.values()); }

SpdMatrix spd_power(const SpdMatrix& m, double p) {
    EigDecomposition eig = sym_eig(m);
    const double lmin = eig.eigenvalues.minCoeff();
    if (lmin <= 0.0) {
        throw NumericalError("spd_power on matrix with non-positive eigenvalue", lmin);
    }
    Vector mapped(eig.eigenvalues.size());
    for (Eigen::Index i = 0; i < mapped.size(); ++i) {
        mapped(i) = std::pow(eig.eigenvalues(i), p);
    }
    Matrix out = eig.eigenvectors * mapped.asDiagonal() * eig.eigenvectors.transpose();
    return SpdMatrix(out);
}

Matrix spd_log(const SpdMatrix& m) {
    EigDecomposition eig = sym_eig(m);
    const double lmin = eig.eigenvalues.minCoeff();
    if (lmin <= 0.0) {
        throw NumericalError("matrix log on matrix with non-positive eigenvalue", lmin);
    }
    return map_eigenvalues(eig, [](double x) { return std::log(x); });
}

SpdMatrix spd_exp_symmetric(const Matrix& sym) {
    EigDecomposition eig = sym_eig_raw(0.5 * (sym + sym.transpose()));
    return SpdMatrix(map_eigenvalues(eig, [](double x) { return std::exp(x); }));
}

double airm_distance(const SpdMatrix& a, const SpdMatrix& b) {
    check_same_dim(a, b);
    const SpdMatrix a_inv_sqrt = spd_power(a, -0.5);
    const Matrix whitened =
        a_inv_sqrt.values() * b.values() * a_inv_sqrt.values();
    return spd_log(SpdMatrix(whitened)).norm();
}

SpdMatrix geometric_mean(const std::vector<SpdMatrix>& ms, double tol, int max_iter) {
    if (ms.empty()) {
        throw DomainError("geometric_mean of empty list");
    }
    for (const SpdMatrix& m : ms) check_same_dim(ms.front(), m);
    if (ms.size() == 1) return ms.front();

    // Karcher fixed point: move along the tangent-space mean with unit step
    // until the tangent mean vanishes.
    SpdMatrix mean = ms.front();
    const double inv_n = 1.0 / static_cast<double>(ms.size());
    double residual = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < max_iter; ++iter) {
        const SpdMatrix mean_sqrt = spd_power(mean, 0.5);
        const SpdMatrix mean_inv_sqrt = spd_power(mean, -0.5);
        Matrix tangent = Matrix::Zero(mean.dim(), mean.dim());
        for (const SpdMatrix& m : ms) {
            const Matrix whitened =
                mean_inv_sqrt.values() * m.values() * mean_inv_sqrt.values();
            tangent += spd_log(SpdMatrix(whitened));
        }
        tangent *= inv_n;
        residual = tangent.norm();
        if (residual < tol) return mean;
        const SpdMatrix step = spd_exp_symmetric(tangent);
        mean = SpdMatrix(mean_sqrt.values() * step.values() * mean_sqrt.values());
    }
    throw NumericalError("geometric_mean did not converge within " +
                             std::to_string(max_iter) + " iterations",
                         residual);
}

SpdMatrix geodesic_step(const SpdMatrix& a, const SpdMatrix& b, double t) {
    check_same_dim(a, b);
    if (t < 0.0 || t > 1.0) {
        throw DomainError("geodesic parameter t must lie in [0, 1], got " + std::to_string(t));
    }
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    const SpdMatrix a_sqrt = spd_power(a, 0.5);
    const SpdMatrix a_inv_sqrt = spd_power(a, -0.5);
    const SpdMatrix whitened(a_inv_sqrt.values() * b.values() * a_inv_sqrt.values());
    const SpdMatrix powered = spd_power(whitened, t);
    return SpdMatrix(a_sqrt.values() * powered.values() * a_sqrt.values());
}

}  // namespace rapstream::linalg
