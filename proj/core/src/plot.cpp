#include "mitdet/plot.hpp"

#include <algorithm>

#include <Eigen/Dense>

#include "mitdet/error.hpp"

namespace mitdet {

FeatureMatrix pca_2d(const FeatureMatrix& features) {
  if (features.rows() < 2) {
    throw Error(ErrorKind::kTooFewSamples, "PCA needs at least two rows");
  }
  const Eigen::RowVectorXd mean = features.colwise().mean();
  const Eigen::MatrixXd centered = features.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / double(features.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd basis(d, 2);
  basis.col(0) = eig.eigenvectors().col(d - 1);
  basis.col(1).setZero();
  if (d > 1) basis.col(1) = eig.eigenvectors().col(d - 2);
  // Sign convention: largest-magnitude loading positive.
  for (int c = 0; c < 2; ++c) {
    Eigen::Index arg;
    basis.col(c).cwiseAbs().maxCoeff(&arg);
    if (basis(arg, c) < 0) basis.col(c) *= -1.0;
  }
  return centered * basis;
}

RgbImage render_scatter(const FeatureMatrix& xy, const std::vector<int>& labels, int size) {
  if (xy.cols() != 2 || static_cast<std::size_t>(xy.rows()) != labels.size()) {
    throw Error(ErrorKind::kShapeMismatch, "scatter expects n x 2 points and n labels");
  }
  RgbImage img = make_rgb(size, size, 255);
  const int margin = 16;
  for (int i = margin; i < size - margin; ++i) {
    for (int c = 0; c < 3; ++c) {
      img(size - margin, i, c) = 0;
      img(i, margin, c) = 0;
    }
  }
  if (xy.rows() == 0) return img;
  const Eigen::RowVector2d lo = xy.colwise().minCoeff();
  const Eigen::RowVector2d hi = xy.colwise().maxCoeff();
  const Eigen::RowVector2d span = (hi - lo).cwiseMax(1e-12);
  const double extent = size - 2 * margin - 8;
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const int px = margin + 4 + static_cast<int>((xy(i, 0) - lo[0]) / span[0] * extent);
    const int py = size - margin - 4 - static_cast<int>((xy(i, 1) - lo[1]) / span[1] * extent);
    const bool pos = labels[static_cast<std::size_t>(i)] == 1;
    const std::uint8_t rgb[3] = {static_cast<std::uint8_t>(pos ? 220 : 40),
                                 static_cast<std::uint8_t>(pos ? 40 : 90),
                                 static_cast<std::uint8_t>(pos ? 40 : 220)};
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) {
        const int x = std::clamp(px + dx, 0, size - 1), y = std::clamp(py + dy, 0, size - 1);
        for (int c = 0; c < 3; ++c) img(y, x, c) = rgb[c];
      }
    }
  }
  return img;
}

}  // namespace mitdet
