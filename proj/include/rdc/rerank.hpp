#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rdc/episode.hpp"
#include "rdc/errors.hpp"
#include "rdc/metric.hpp"
#include "rdc/subspace.hpp"

namespace rdc {

enum class LossKind { kl, mse };
enum class SoftenSign { paper_literal, negated };
enum class OptimizerKind { sgd, adaptive_moments };

/// All calibration and fine-tuning hyperparameters with their stock defaults.
struct CalibrationConfig {
    int k = 10;
    int k2 = 8;            // query-expansion neighborhood, must stay below k
    double lambda = 0.5;   // blend between Euclidean and Jaccard distances
    int p = 64;            // subspace dimension
    double alpha = 0.5;    // attention up-weight for expanded neighbors
    double tau = 3.0;      // softmax temperature
    int epochs = 20;
    double learning_rate = 0.001;
    bool use_subspace = true;
    LossKind loss = LossKind::kl;
    bool use_attention = true;
    bool qe_plain_knn = false;  // query expansion over plain k2-NN lists
    SoftenSign soften_sign = SoftenSign::paper_literal;
    // Plain gradient descent cannot move the adapter at the stock learning
    // rate; adaptive moments reproduce the intended fine-tuning behavior.
    OptimizerKind optimizer = OptimizerKind::adaptive_moments;
};

inline void validate(const CalibrationConfig& cfg) {
    if (cfg.k < 1) throw Error("k must be >= 1");
    if (cfg.k2 < 1 || cfg.k2 >= cfg.k) throw Error("k2 must satisfy 1 <= k2 < k");
    if (cfg.lambda < 0.0 || cfg.lambda > 1.0) throw Error("lambda must lie in [0, 1]");
    if (cfg.p < 1) throw Error("p must be >= 1");
    if (cfg.alpha < 0.0) throw Error("alpha must be >= 0");
    if (!(cfg.tau > 0.0)) throw Error("tau must be > 0");
    if (cfg.epochs < 1) throw Error("epochs must be >= 1");
    if (cfg.learning_rate < 0.0) throw Error("learning rate must be >= 0");
}

/// Per-item neighbor structure used by the re-ranking stages.
///
/// `initial[i]` is the ranked k-NN list of item i, ascending by
/// (distance, index) and never containing i. `expanded[i]` is the expanded
/// k-reciprocal set, kept sorted. `k` is the effective list length: a
/// requested k larger than n-1 clamps and sets `k_clamped`.
struct NeighborSets {
    std::vector<std::vector<int>> initial;
    std::vector<std::vector<int>> expanded;
    int k = 0;
    bool k_clamped = false;
};

/// Encoding vectors: row i is the Gaussian-kernel encoding of item i over its
/// expanded neighbor set (zero outside the set).
using EncodingVectors = Eigen::MatrixXd;

/// Ranked k-NN lists from a Euclidean distance matrix. Ties break toward the
/// smaller index. k larger than n-1 is clamped, not an error.
inline NeighborSets knn_lists(const DistanceMatrix& dist, int k) {
    if (dist.kind != DistanceKind::euclidean) {
        throw Error("knn_lists requires a euclidean-kind distance matrix");
    }
    if (k < 1) throw Error("k must be >= 1");
    const Eigen::Index n = dist.values.rows();
    if (n < 2) throw Error("knn_lists needs at least two items");

    NeighborSets sets;
    sets.k_clamped = k > n - 1;
    sets.k = std::min<int>(k, static_cast<int>(n - 1));
    sets.initial.resize(static_cast<std::size_t>(n));

    std::vector<int> order(static_cast<std::size_t>(n - 1));
    for (Eigen::Index i = 0; i < n; ++i) {
        int pos = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) order[static_cast<std::size_t>(pos++)] = static_cast<int>(j);
        }
        auto closer = [&](int a, int b) {
            const double da = dist.values(i, a);
            const double db = dist.values(i, b);
            return da < db || (da == db && a < b);
        };
        std::partial_sort(order.begin(), order.begin() + sets.k, order.end(), closer);
        sets.initial[static_cast<std::size_t>(i)].assign(order.begin(), order.begin() + sets.k);
    }
    return sets;
}

namespace detail {

// Reciprocal filter: keep g from the length-`depth` prefix of i's list when i
// is also inside g's length-`depth` prefix.
inline std::vector<std::vector<int>> reciprocal_sets(
    const std::vector<std::vector<int>>& initial, int depth) {
    const auto n = initial.size();
    std::vector<std::vector<char>> member(n, std::vector<char>(n, 0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto take = std::min<std::size_t>(static_cast<std::size_t>(depth), initial[i].size());
        for (std::size_t t = 0; t < take; ++t) {
            member[i][static_cast<std::size_t>(initial[i][t])] = 1;
        }
    }
    std::vector<std::vector<int>> result(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto take = std::min<std::size_t>(static_cast<std::size_t>(depth), initial[i].size());
        for (std::size_t t = 0; t < take; ++t) {
            const int g = initial[i][t];
            if (member[static_cast<std::size_t>(g)][i]) {
                result[i].push_back(g);
            }
        }
    }
    return result;
}

inline void sort_unique(std::vector<int>& items) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
}

}  // namespace detail

/// Expands each item's reciprocal neighbor set with qualifying half-k
/// reciprocal sets.
///
/// The candidate set is the k-reciprocal filter of the ranked list,
/// R*_i = {g in top-k of i : i in top-k of g}. For each candidate g the
/// half-depth reciprocal set R*_g(h), h = max(1, k/2), is united in when at
/// least two thirds of it already overlaps R*_i; the 2/3 threshold is
/// evaluated exactly as 3*|overlap| >= 2*|R*_g(h)|. The item itself is always
/// removed from its own expanded set.
inline void expand_reciprocal(NeighborSets& sets) {
    const auto n = sets.initial.size();
    const int half = std::max(1, sets.k / 2);

    const auto rec_full = detail::reciprocal_sets(sets.initial, sets.k);
    const auto rec_half = detail::reciprocal_sets(sets.initial, half);

    std::vector<char> in_core(n, 0);
    sets.expanded.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<int> expanded = rec_full[i];
        for (int g : rec_full[i]) in_core[static_cast<std::size_t>(g)] = 1;
        for (int g : rec_full[i]) {
            const auto& candidate = rec_half[static_cast<std::size_t>(g)];
            std::size_t overlap = 0;
            for (int x : candidate) {
                if (in_core[static_cast<std::size_t>(x)]) ++overlap;
            }
            if (3 * overlap >= 2 * candidate.size()) {
                expanded.insert(expanded.end(), candidate.begin(), candidate.end());
            }
        }
        for (int g : rec_full[i]) in_core[static_cast<std::size_t>(g)] = 0;

        detail::sort_unique(expanded);
        auto self = std::lower_bound(expanded.begin(), expanded.end(), static_cast<int>(i));
        if (self != expanded.end() && *self == static_cast<int>(i)) expanded.erase(self);
        sets.expanded[i] = std::move(expanded);
    }
}

/// Folds support labels into the expanded sets: each support item drops
/// supports of other classes from its set, then unites the sets of its
/// same-class support peers. Query-anchored sets are left untouched (a
/// query's class is unknown, and its support members are exactly the signal
/// the classifier needs).
inline void apply_support_labels(NeighborSets& sets, const Episode& episode) {
    const auto support_count = episode.support_rows.size();
    if (sets.expanded.size() < support_count + episode.query_rows.size()) {
        throw IndexOutOfRange("neighbor sets do not cover the episode");
    }

    // Distractor removal first, on a support-anchored copy, so the union step
    // reads identical state regardless of order.
    std::vector<std::vector<int>> cleaned(support_count);
    for (std::size_t s = 0; s < support_count; ++s) {
        const int label = episode.support_labels[s];
        for (int g : sets.expanded[s]) {
            const bool other_class_support =
                g < static_cast<int>(support_count) &&
                episode.support_labels[static_cast<std::size_t>(g)] != label;
            if (!other_class_support) cleaned[s].push_back(g);
        }
    }
    for (std::size_t s = 0; s < support_count; ++s) {
        std::vector<int> merged = cleaned[s];
        for (std::size_t t = 0; t < support_count; ++t) {
            if (t != s && episode.support_labels[t] == episode.support_labels[s]) {
                merged.insert(merged.end(), cleaned[t].begin(), cleaned[t].end());
            }
        }
        detail::sort_unique(merged);
        auto self = std::lower_bound(merged.begin(), merged.end(), static_cast<int>(s));
        if (self != merged.end() && *self == static_cast<int>(s)) merged.erase(self);
        sets.expanded[s] = std::move(merged);
    }
}

/// Gaussian-kernel encoding: V(i,q) = exp(-d(i,q)) inside the expanded set,
/// zero outside.
inline EncodingVectors encode(const DistanceMatrix& dist, const NeighborSets& sets) {
    const Eigen::Index n = dist.values.rows();
    EncodingVectors vectors = EncodingVectors::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int q : sets.expanded[static_cast<std::size_t>(i)]) {
            vectors(i, q) = std::exp(-dist.values(i, q));
        }
    }
    return vectors;
}

/// Query expansion: every row becomes the mean of the pre-expansion rows
/// indexed by the item's expanded k2-reciprocal set (or its plain k2-NN list
/// when `plain_knn` is set). All rows are rebuilt from a frozen copy.
///
/// An item with no reciprocal neighbors has an empty expanded set; its mean
/// falls back to the plain k2-NN list, which is never empty. Without the
/// fallback such anti-hub items would keep an all-zero encoding and the
/// Jaccard stage would reject the episode.
inline EncodingVectors query_expansion(const EncodingVectors& vectors,
                                       const DistanceMatrix& dist, int k2,
                                       bool plain_knn = false) {
    NeighborSets sets = knn_lists(dist, k2);
    if (!plain_knn) expand_reciprocal(sets);

    EncodingVectors result(vectors.rows(), vectors.cols());
    for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
        const std::size_t row = static_cast<std::size_t>(i);
        const bool use_plain = plain_knn || sets.expanded[row].empty();
        const auto& members = use_plain ? sets.initial[row] : sets.expanded[row];
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(vectors.cols());
        for (int g : members) mean += vectors.row(g);
        result.row(i) = mean / static_cast<double>(members.size());
    }
    return result;
}

/// Weighted Jaccard distance between encoding rows:
/// d(i,g) = 1 - sum(min(V_i, V_g)) / sum(max(V_i, V_g)).
inline DistanceMatrix jaccard_matrix(const EncodingVectors& vectors) {
    const Eigen::Index n = vectors.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(vectors.row(i).maxCoeff() > 0.0)) {
            throw DegenerateRow("encoding row " + std::to_string(i) +
                                " has no positive entry");
        }
    }
    DistanceMatrix dist;
    dist.kind = DistanceKind::jaccard;
    dist.values = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index g = i; g < n; ++g) {
            const double inter = vectors.row(i).cwiseMin(vectors.row(g)).sum();
            const double uni = vectors.row(i).cwiseMax(vectors.row(g)).sum();
            const double d = 1.0 - inter / uni;
            dist.values(i, g) = d;
            dist.values(g, i) = d;
        }
    }
    return dist;
}

/// Affine blend of the Euclidean and Jaccard matrices.
inline DistanceMatrix calibrate(const DistanceMatrix& d_euclidean,
                                const DistanceMatrix& d_jaccard, double lambda) {
    if (d_euclidean.values.rows() != d_jaccard.values.rows() ||
        d_euclidean.values.cols() != d_jaccard.values.cols()) {
        throw ShapeMismatch("distance matrices differ in shape");
    }
    if (d_euclidean.kind != DistanceKind::euclidean ||
        d_jaccard.kind != DistanceKind::jaccard) {
        throw Error("calibrate expects a euclidean and a jaccard matrix");
    }
    if (lambda < 0.0 || lambda > 1.0) throw Error("lambda must lie in [0, 1]");
    DistanceMatrix out;
    out.kind = DistanceKind::calibrated;
    out.values = lambda * d_euclidean.values + (1.0 - lambda) * d_jaccard.values;
    return out;
}

/// Everything the calibration produces for one episode. `euclidean` and
/// `neighbors` come from the original-space branch; `calibrated` is the final
/// matrix (the two-space average when the subspace branch is on).
struct PipelineResult {
    DistanceMatrix euclidean;
    NeighborSets neighbors;
    DistanceMatrix calibrated;
};

namespace detail {

inline DistanceMatrix calibrate_branch(const DistanceMatrix& d_euclidean,
                                       const Episode& episode,
                                       const CalibrationConfig& cfg,
                                       NeighborSets* sets_out) {
    NeighborSets sets = knn_lists(d_euclidean, cfg.k);
    expand_reciprocal(sets);
    apply_support_labels(sets, episode);
    EncodingVectors vectors = encode(d_euclidean, sets);
    vectors = query_expansion(vectors, d_euclidean, cfg.k2, cfg.qe_plain_knn);
    const DistanceMatrix d_jaccard = jaccard_matrix(vectors);
    if (sets_out) *sets_out = std::move(sets);
    return calibrate(d_euclidean, d_jaccard, cfg.lambda);
}

}  // namespace detail

/// Runs the full calibration on one episode's feature matrix (canonical
/// episode row order). The original-space chain always runs; with
/// cfg.use_subspace the chain is repeated on the projected features and the
/// two calibrated matrices are averaged.
inline PipelineResult rdc_calibrate_episode(const Eigen::MatrixXd& episode_features,
                                            const Episode& episode,
                                            const CalibrationConfig& cfg) {
    validate(cfg);
    PipelineResult result;
    result.euclidean = euclidean_matrix(episode_features, /*normalize=*/true);
    result.calibrated =
        detail::calibrate_branch(result.euclidean, episode, cfg, &result.neighbors);

    if (cfg.use_subspace) {
        const Eigen::MatrixXd normalized = l2_normalized_rows(episode_features);
        const int p = std::min<int>(cfg.p, static_cast<int>(normalized.cols()));
        const SubspaceProjection proj = build_subspace(normalized, p);
        const Eigen::MatrixXd projected = project(normalized, proj);
        const DistanceMatrix d_sub = euclidean_matrix(projected, /*normalize=*/true);
        const DistanceMatrix calibrated_sub =
            detail::calibrate_branch(d_sub, episode, cfg, nullptr);
        result.calibrated.values =
            0.5 * (result.calibrated.values + calibrated_sub.values);
        result.calibrated.kind = DistanceKind::combined;
    }
    return result;
}

/// Convenience wrapper over the gallery feature matrix: gathers the episode's
/// rows and returns just the calibrated distance matrix.
inline DistanceMatrix rdc_pipeline(const Eigen::MatrixXd& features, const Episode& episode,
                                   const CalibrationConfig& cfg) {
    const Eigen::MatrixXd gathered = gather_episode_features(features, episode);
    return rdc_calibrate_episode(gathered, episode, cfg).calibrated;
}

}  // namespace rdc
