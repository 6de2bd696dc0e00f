#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <string>

#include "rdc/embedding_store.hpp"
#include "rdc/errors.hpp"

namespace rdc {

/// Task-adaptive projection onto the leading singular directions of the
/// tanh feature kernel.
struct SubspaceProjection {
    Eigen::MatrixXd basis;            // m x p, orthonormal columns
    Eigen::VectorXd singular_values;  // descending, length p
    int p = 0;
};

/// Builds the non-linear subspace for one episode: the m x m kernel is
/// tanh(X^T X) and the basis is its first p left singular vectors by
/// descending singular value. Rank deficiency is fine; trailing directions
/// just carry ~zero variance.
inline SubspaceProjection build_subspace(const Eigen::MatrixXd& features, int p) {
    const Eigen::Index m = features.cols();
    if (p < 1 || p > m) {
        throw ShapeMismatch("subspace dimension p=" + std::to_string(p) +
                            " outside [1, " + std::to_string(m) + "]");
    }
    detail::check_finite(features);

    Eigen::MatrixXd kernel = features.transpose() * features;
    // Mirror the upper triangle so the kernel is symmetric to the last bit.
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = i + 1; j < m; ++j) {
            kernel(j, i) = kernel(i, j);
        }
    }
    kernel = kernel.array().tanh().matrix();

    Eigen::BDCSVD<Eigen::MatrixXd> svd(kernel, Eigen::ComputeThinU);
    SubspaceProjection proj;
    proj.p = p;
    proj.basis = svd.matrixU().leftCols(p);
    proj.singular_values = svd.singularValues().head(p);
    return proj;
}

/// Maps features into the subspace: plain matrix product with the basis.
inline Eigen::MatrixXd project(const Eigen::MatrixXd& features, const SubspaceProjection& proj) {
    if (features.cols() != proj.basis.rows()) {
        throw ShapeMismatch("feature dim " + std::to_string(features.cols()) +
                            " != subspace input dim " + std::to_string(proj.basis.rows()));
    }
    return features * proj.basis;
}

}  // namespace rdc
