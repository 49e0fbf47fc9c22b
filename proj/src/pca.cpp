#include "gasp/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gasp/binary_io.hpp"

namespace gasp {

RankDeficientError::RankDeficientError(int achieved, int requested)
    : Error("fit_pca: sample covariance has rank " + std::to_string(achieved) + ", below requested d = " +
            std::to_string(requested)),
      achieved_(achieved) {}

SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& symmetric, int max_sweeps) {
  const Eigen::Index n = symmetric.rows();
  if (symmetric.cols() != n) throw Error("jacobi_eigen: matrix must be square");
  Eigen::MatrixXd a = 0.5 * (symmetric + symmetric.transpose());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::max(a.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * scale) break;

    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= std::numeric_limits<double>::min()) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- J^T A J applied to rows/cols p and q.
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.values(k) = a(order[k], order[k]);
    out.vectors.col(k) = v.col(order[k]);
  }
  out.sweeps = sweep;
  return out;
}

PcaModel fit_pca(const Eigen::MatrixXd& samples, int d) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index dim = samples.cols();
  if (d < 1) throw Error("fit_pca: d must be >= 1");
  if (n <= d) throw Error("fit_pca: need more samples than components");
  if (dim < d) throw Error("fit_pca: input dimension below d");

  PcaModel model;
  model.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centred = samples.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  const SymmetricEigen eig = jacobi_eigen(cov);

  const double top = std::max(eig.values(0), 0.0);
  int rank = 0;
  for (Eigen::Index k = 0; k < eig.values.size(); ++k) {
    if (eig.values(k) > 1e-10 * top && top > 0.0) ++rank;
  }
  if (rank < d) throw RankDeficientError(rank, d);

  model.components.resize(d, dim);
  model.explained_variance.resize(d);
  for (int k = 0; k < d; ++k) {
    Eigen::VectorXd row = eig.vectors.col(k);
    Eigen::Index arg = 0;
    row.cwiseAbs().maxCoeff(&arg);
    if (row(arg) < 0.0) row = -row;
    model.components.row(k) = row.transpose();
    model.explained_variance(k) = std::max(eig.values(k), 0.0);
  }
  return model;
}

Eigen::VectorXd project(const PcaModel& model, std::span<const double> v) {
  if (static_cast<int>(v.size()) != model.input_dim()) {
    throw Error("project: dimension mismatch (" + std::to_string(v.size()) + " vs " +
                std::to_string(model.input_dim()) + ")");
  }
  const Eigen::Map<const Eigen::VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
  return model.components * (x - model.mean);
}

Eigen::VectorXd reconstruct(const PcaModel& model, const Eigen::VectorXd& coefficients) {
  if (coefficients.size() != model.output_dim()) throw Error("reconstruct: dimension mismatch");
  return model.mean + model.components.transpose() * coefficients;
}

double projection_residual(const PcaModel& model, const Eigen::MatrixXd& samples) {
  if (samples.cols() != model.input_dim()) throw Error("projection_residual: dimension mismatch");
  const Eigen::MatrixXd centred = samples.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd coeff = centred * model.components.transpose();
  const Eigen::MatrixXd resid = centred - coeff * model.components;
  return resid.squaredNorm() / static_cast<double>(samples.rows() - 1);
}

namespace {
constexpr std::uint32_t kPcaVersion = 1;
}

std::vector<std::uint8_t> encode_pca(const PcaModel& model) {
  ByteWriter w;
  w.put_bytes(std::string_view("GASPPCA\0", 8));
  w.put<std::uint32_t>(kPcaVersion);
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.output_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.input_dim()));
  for (Eigen::Index i = 0; i < model.mean.size(); ++i) w.put(model.mean(i));
  for (Eigen::Index r = 0; r < model.components.rows(); ++r)
    for (Eigen::Index c = 0; c < model.components.cols(); ++c) w.put(model.components(r, c));
  for (Eigen::Index i = 0; i < model.explained_variance.size(); ++i) w.put(model.explained_variance(i));
  return w.take();
}

PcaModel decode_pca(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic(std::string_view("GASPPCA\0", 8), "pca file");
  if (r.get<std::uint32_t>() != kPcaVersion) throw FormatError("pca file: unsupported version");
  r.get<std::uint32_t>();
  const std::uint32_t d = r.get<std::uint32_t>();
  const std::uint32_t dim = r.get<std::uint32_t>();
  if ((static_cast<std::size_t>(d) * dim + dim + d) * 8 != r.remaining()) throw FormatError("pca file: size mismatch");
  PcaModel m;
  m.mean.resize(dim);
  for (std::uint32_t i = 0; i < dim; ++i) m.mean(i) = r.get<double>();
  m.components.resize(d, dim);
  for (std::uint32_t i = 0; i < d; ++i)
    for (std::uint32_t c = 0; c < dim; ++c) m.components(i, c) = r.get<double>();
  m.explained_variance.resize(d);
  for (std::uint32_t i = 0; i < d; ++i) m.explained_variance(i) = r.get<double>();
  return m;
}

}  // namespace gasp
