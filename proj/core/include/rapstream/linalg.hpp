#ifndef RAPSTREAM_LINALG_HPP
#define RAPSTREAM_LINALG_HPP

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "rapstream/errors.hpp"

namespace rapstream::linalg {

// All alignment/classifier math runs in 64-bit even though the network is
// 32-bit; eigenroutines and matrix logs lose precision too fast otherwise.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Symmetric positive definite matrix (covariances and alignment references).
///
/// Construction symmetrizes the input and applies trace-scaled shrinkage
/// eps*(trace/dim)*I with eps = 1e-5 whenever the smallest eigenvalue is
/// non-positive or the condition number exceeds 1e10. Short windows with few
/// samples can otherwise be rank-deficient.
class SpdMatrix {
public:
    static constexpr double kShrinkageEps = 1e-5;
    static constexpr double kMaxCondition = 1e10;
    static constexpr double kSymmetryTol = 1e-10;

    explicit SpdMatrix(const Matrix& m);

    Eigen::Index dim() const { return values_.rows(); }
    const Matrix& values() const { return values_; }

    bool operator==(const SpdMatrix& other) const { return values_ == other.values_; }

private:
    Matrix values_;
};

struct EigDecomposition {
    Vector eigenvalues;   // sorted descending
    Matrix eigenvectors;  // columns match eigenvalue order
};

/// Eigendecomposition m = V diag(l) V^T with V orthogonal, eigenvalues descending.
EigDecomposition sym_eig(const SpdMatrix& m);

/// Matrix power via eigenvalue mapping l -> l^p; eigenvectors preserved.
/// Throws NumericalError if any eigenvalue is non-positive.
SpdMatrix spd_power(const SpdMatrix& m, double p);

/// Matrix logarithm / exponential on the SPD cone (eigenvalue mapping).
Matrix spd_log(const SpdMatrix& m);
SpdMatrix spd_exp_symmetric(const Matrix& sym);

/// Affine-invariant Riemannian distance: ||log(a^{-1/2} b a^{-1/2})||_F.
double airm_distance(const SpdMatrix& a, const SpdMatrix& b);

/// Karcher (geometric) mean under the affine-invariant metric. Fixed unit
/// step on the tangent mean; converged when the tangent mean's Frobenius
/// norm drops below tol.
SpdMatrix geometric_mean(const std::vector<SpdMatrix>& ms, double tol = 1e-8,
                         int max_iter = 50);

/// Point at parameter t on the affine-invariant geodesic from a to b,
/// a^{1/2} (a^{-1/2} b a^{-1/2})^t a^{1/2}. t must lie in [0, 1].
SpdMatrix geodesic_step(const SpdMatrix& a, const SpdMatrix& b, double t);

}  // namespace rapstream::linalg

#endif
