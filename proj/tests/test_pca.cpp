#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "gasp/binary_io.hpp"
#include "gasp/pca.hpp"
#include "support.hpp"

using namespace gasp;

namespace {

// Correlated data: latent Gaussian factors through a random mixing matrix.
Eigen::MatrixXd correlated(test::Gen& g, int n, int dim, int latent) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd mix(latent, dim), z(n, latent);
  for (int i = 0; i < latent; ++i)
    for (int j = 0; j < dim; ++j) mix(i, j) = normal(g.engine()) / (1.0 + 0.3 * i);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < latent; ++j) z(i, j) = normal(g.engine());
  Eigen::MatrixXd x = z * mix;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) += 0.05 * normal(g.engine()) + 3.0;
  return x;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

}  // namespace

TEST_CASE("Jacobi eigenvalues match the dense solver") {
  test::Gen g(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = g.integer(1, 24);
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = g.uniform(-1.0, 1.0);
    a = (a + a.transpose()).eval();
    const SymmetricEigen mine = jacobi_eigen(a);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ref(a);
    const Eigen::VectorXd ref_desc = ref.eigenvalues().reverse();
    CHECK((mine.values - ref_desc).cwiseAbs().maxCoeff() < 1e-10);
    for (int k = 1; k < n; ++k) CHECK(mine.values(k) <= mine.values(k - 1));
    // A V = V diag(lambda), V orthonormal.
    CHECK((a * mine.vectors - mine.vectors * mine.values.asDiagonal()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((mine.vectors.transpose() * mine.vectors - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("Jacobi handles diagonal and repeated eigenvalues") {
  Eigen::MatrixXd d = Eigen::Vector3d(1.0, 3.0, 2.0).asDiagonal();
  const SymmetricEigen e = jacobi_eigen(d);
  CHECK(e.values(0) == 3.0);
  CHECK(e.values(2) == 1.0);
  const SymmetricEigen id = jacobi_eigen(Eigen::MatrixXd::Identity(5, 5) * 2.0);
  CHECK((id.values.array() - 2.0).abs().maxCoeff() < 1e-15);
  CHECK_THROWS(jacobi_eigen(Eigen::MatrixXd::Zero(2, 3)));
}

TEST_CASE("PCA residual equals the discarded eigenvalue mass of the dense solver") {
  test::Gen g(42);
  for (int d : {1, 4, 8}) {
    const Eigen::MatrixXd x = correlated(g, 300, 12, 10);
    const PcaModel m = fit_pca(x, d);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ref(covariance(x));
    const Eigen::VectorXd vals = ref.eigenvalues().reverse();
    const double tail = vals.tail(12 - d).sum();
    CHECK(std::abs(projection_residual(m, x) - tail) < 1e-8);
    for (int k = 0; k < d; ++k) CHECK(std::abs(m.explained_variance(k) - vals(k)) < 1e-10);
  }
}

TEST_CASE("PCA components are orthonormal and sign-normalised") {
  test::Gen g(43);
  const Eigen::MatrixXd x = correlated(g, 200, 10, 6);
  const PcaModel m = fit_pca(x, 5);
  CHECK((m.components * m.components.transpose() - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);
  for (int k = 0; k < 5; ++k) {
    Eigen::Index arg;
    m.components.row(k).cwiseAbs().maxCoeff(&arg);
    CHECK(m.components(k, arg) > 0.0);
  }
  // Projection then reconstruction is the identity on the retained subspace.
  const Eigen::VectorXd v = m.mean + m.components.transpose() * Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Eigen::VectorXd back = reconstruct(m, project(m, std::span(v.data(), static_cast<std::size_t>(v.size()))));
  CHECK((back - v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("PCA rejects rank-deficient and undersized inputs") {
  test::Gen g(44);
  const Eigen::MatrixXd x = correlated(g, 100, 8, 3);
  // Rank 2 after centring: every row is a combination of two directions.
  Eigen::MatrixXd low(60, 8);
  for (int i = 0; i < low.rows(); ++i) low.row(i) = x.row(0) * std::sin(i) + x.row(1) * std::cos(3.0 * i);
  CHECK_THROWS_AS(fit_pca(low, 3), RankDeficientError);
  CHECK_NOTHROW(fit_pca(low, 2));
  CHECK_THROWS_AS(fit_pca(Eigen::MatrixXd::Ones(50, 6), 2), RankDeficientError);
  try {
    fit_pca(Eigen::MatrixXd::Ones(50, 6), 2);
  } catch (const RankDeficientError& e) {
    CHECK(e.achieved_rank() == 0);
  }
  CHECK_THROWS(fit_pca(x.topRows(3), 3));
  CHECK_THROWS(fit_pca(x, 9));
  CHECK_THROWS(fit_pca(x, 0));
}

TEST_CASE("PCA file round trips and rejects corruption") {
  test::Gen g(45);
  const PcaModel m = fit_pca(correlated(g, 80, 6, 4), 3);
  const auto bytes = encode_pca(m);
  const PcaModel back = decode_pca(bytes);
  CHECK(back.mean == m.mean);
  CHECK(back.components == m.components);
  CHECK(back.explained_variance == m.explained_variance);
  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_pca(cut), FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  CHECK_THROWS_AS(decode_pca(magic), FormatError);
}
