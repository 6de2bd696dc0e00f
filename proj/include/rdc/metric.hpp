#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "rdc/embedding_store.hpp"
#include "rdc/episode.hpp"
#include "rdc/errors.hpp"

namespace rdc {

enum class DistanceKind { euclidean, jaccard, calibrated, combined };

/// Pairwise distance matrix over the items of one episode. The kind tag
/// records which stage produced it; stages that only accept raw Euclidean
/// geometry check it.
struct DistanceMatrix {
    Eigen::MatrixXd values;
    DistanceKind kind = DistanceKind::euclidean;

    Eigen::Index size() const { return values.rows(); }
};

/// One mean vector per episode-local class.
struct Prototypes {
    Eigen::MatrixXd vectors;     // C x m
    std::vector<int> class_ids;  // episode-local, ascending
};

/// Pairwise Euclidean distances, optionally after row l2 normalization.
/// Each pair is formed from the row difference directly (no Gram expansion),
/// so identical rows give an exact zero and the matrix is exactly symmetric.
inline DistanceMatrix euclidean_matrix(const Eigen::MatrixXd& features, bool normalize) {
    if (features.rows() < 2) {
        throw Error("euclidean_matrix needs at least two rows");
    }
    detail::check_finite(features);
    const Eigen::MatrixXd rows = normalize ? l2_normalized_rows(features) : features;

    const Eigen::Index n = rows.rows();
    DistanceMatrix dist;
    dist.kind = DistanceKind::euclidean;
    dist.values = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double d = (rows.row(i) - rows.row(j)).norm();
            dist.values(i, j) = d;
            dist.values(j, i) = d;
        }
    }
    return dist;
}

/// Class prototypes: the arithmetic mean of each class's support vectors.
inline Prototypes compute_prototypes(const Episode& episode, const Eigen::MatrixXd& features) {
    Prototypes protos;
    protos.vectors = Eigen::MatrixXd::Zero(episode.way, features.cols());
    std::vector<int> counts(static_cast<std::size_t>(episode.way), 0);
    for (std::size_t i = 0; i < episode.support_rows.size(); ++i) {
        const Eigen::Index row = episode.support_rows[i];
        if (row < 0 || row >= features.rows()) {
            throw MissingRow("support row " + std::to_string(row) +
                             " outside feature matrix");
        }
        const int label = episode.support_labels[i];
        protos.vectors.row(label) += features.row(row);
        ++counts[static_cast<std::size_t>(label)];
    }
    for (int c = 0; c < episode.way; ++c) {
        protos.vectors.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
        protos.class_ids.push_back(c);
    }
    return protos;
}

/// Nearest-prototype classification under Euclidean distance. Ties go to the
/// smallest class id.
inline std::vector<int> npc_classify(const Eigen::MatrixXd& queries, const Prototypes& protos) {
    if (queries.cols() != protos.vectors.cols()) {
        throw DimensionMismatch("query dim " + std::to_string(queries.cols()) +
                                " != prototype dim " + std::to_string(protos.vectors.cols()));
    }
    std::vector<int> labels(static_cast<std::size_t>(queries.rows()));
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
        int best = 0;
        double best_dist = (queries.row(q) - protos.vectors.row(0)).norm();
        for (Eigen::Index c = 1; c < protos.vectors.rows(); ++c) {
            const double d = (queries.row(q) - protos.vectors.row(c)).norm();
            if (d < best_dist) {
                best_dist = d;
                best = static_cast<int>(c);
            }
        }
        labels[static_cast<std::size_t>(q)] = protos.class_ids[static_cast<std::size_t>(best)];
    }
    return labels;
}

/// Classifies every query row of an episode directly from a pairwise distance
/// matrix in canonical episode order. The per-class score is the mean distance
/// to that class's support rows (with K=1 this is nearest-support); the
/// predicted label is the argmin, ties to the smallest class id. This is how
/// calibrated matrices, which exist only pairwise, are scored.
inline std::vector<int> npc_classify_from_matrix(const DistanceMatrix& dist,
                                                 const Episode& episode) {
    const Eigen::Index n = episode.size();
    if (dist.values.rows() < n || dist.values.cols() < n) {
        throw IndexOutOfRange("distance matrix of size " + std::to_string(dist.values.rows()) +
                              " does not cover episode of size " + std::to_string(n));
    }
    const Eigen::Index support_count = episode.support_count();
    std::vector<int> labels;
    labels.reserve(episode.query_rows.size());
    std::vector<double> score(static_cast<std::size_t>(episode.way));
    std::vector<int> count(static_cast<std::size_t>(episode.way));
    for (Eigen::Index q = support_count; q < n; ++q) {
        std::fill(score.begin(), score.end(), 0.0);
        std::fill(count.begin(), count.end(), 0);
        for (Eigen::Index s = 0; s < support_count; ++s) {
            const int c = episode.support_labels[static_cast<std::size_t>(s)];
            score[static_cast<std::size_t>(c)] += dist.values(q, s);
            ++count[static_cast<std::size_t>(c)];
        }
        int best = 0;
        double best_score = score[0] / count[0];
        for (int c = 1; c < episode.way; ++c) {
            const double mean = score[static_cast<std::size_t>(c)] /
                                count[static_cast<std::size_t>(c)];
            if (mean < best_score) {
                best_score = mean;
                best = c;
            }
        }
        labels.push_back(best);
    }
    return labels;
}

/// Fraction of queries whose prediction matches the held-out true label.
inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size()) {
        throw ShapeMismatch("prediction/truth length mismatch");
    }
    if (predicted.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] == truth[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

}  // namespace rdc
