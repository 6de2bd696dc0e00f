#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "rdc/embedding_store.hpp"
#include "rdc/errors.hpp"
#include "rdc/random.hpp"

namespace rdc {

/// One C-way K-shot task with Q queries per class.
///
/// Row indices refer to the EmbeddingSet the episode was sampled from.
/// Episode-local class ids are assigned by ascending original label, so id 0
/// is the smallest drawn label. Everywhere a per-episode matrix appears in
/// this library (distances, encodings, masks) its rows follow the canonical
/// episode order: the C*K support rows first, then the C*Q query rows, both
/// grouped by local class.
struct Episode {
    std::vector<Eigen::Index> support_rows;  // C*K
    std::vector<int> support_labels;         // episode-local, in [0, C)
    std::vector<Eigen::Index> query_rows;    // C*Q
    std::vector<int> query_true_labels;      // episode-local, held out for scoring
    int way = 0;    // C
    int shot = 0;   // K
    int queries_per_class = 0;  // Q

    Eigen::Index size() const {
        return static_cast<Eigen::Index>(support_rows.size() + query_rows.size());
    }
    Eigen::Index support_count() const {
        return static_cast<Eigen::Index>(support_rows.size());
    }
};

/// Draws a C-way K-shot episode. Deterministic: identical
/// (set, C, K, Q, seed) always yields the identical episode.
///
/// Procedure (fixed so fixtures are portable): draw C distinct classes
/// uniformly, sort them by label, then per class in that order draw K+Q rows
/// without replacement; the first K become support, the rest queries.
inline Episode sample_episode(const EmbeddingSet& set, int way, int shot,
                              int queries_per_class, std::uint64_t seed) {
    if (way < 1 || shot < 1 || queries_per_class < 1) {
        throw Error("way, shot and queries-per-class must all be positive");
    }
    const auto num_classes = set.class_index.size();
    if (num_classes < static_cast<std::size_t>(way)) {
        throw InsufficientClasses("need " + std::to_string(way) + " classes, set has " +
                                  std::to_string(num_classes));
    }
    const int per_class = shot + queries_per_class;
    for (const auto& [label, rows] : set.class_index) {
        if (rows.size() < static_cast<std::size_t>(per_class)) {
            throw InsufficientRowsInClass("class " + std::to_string(label) + " has " +
                                          std::to_string(rows.size()) + " rows, need " +
                                          std::to_string(per_class));
        }
    }

    Rng rng(seed);

    std::vector<std::int64_t> all_labels;
    all_labels.reserve(num_classes);
    for (const auto& [label, rows] : set.class_index) all_labels.push_back(label);
    rng.partial_shuffle(all_labels, static_cast<std::size_t>(way));
    std::vector<std::int64_t> drawn(all_labels.begin(), all_labels.begin() + way);
    std::sort(drawn.begin(), drawn.end());

    Episode episode;
    episode.way = way;
    episode.shot = shot;
    episode.queries_per_class = queries_per_class;
    episode.support_rows.reserve(static_cast<std::size_t>(way) * shot);
    episode.query_rows.reserve(static_cast<std::size_t>(way) * queries_per_class);

    for (int local = 0; local < way; ++local) {
        std::vector<Eigen::Index> rows = set.class_index.at(drawn[static_cast<std::size_t>(local)]);
        rng.partial_shuffle(rows, static_cast<std::size_t>(per_class));
        for (int i = 0; i < shot; ++i) {
            episode.support_rows.push_back(rows[static_cast<std::size_t>(i)]);
            episode.support_labels.push_back(local);
        }
        for (int i = shot; i < per_class; ++i) {
            episode.query_rows.push_back(rows[static_cast<std::size_t>(i)]);
            episode.query_true_labels.push_back(local);
        }
    }
    return episode;
}

/// Copies the episode's rows out of the full feature matrix in canonical
/// episode order (supports first, then queries).
inline Eigen::MatrixXd gather_episode_features(const Eigen::MatrixXd& features,
                                               const Episode& episode) {
    Eigen::MatrixXd gathered(episode.size(), features.cols());
    Eigen::Index out = 0;
    auto copy_rows = [&](const std::vector<Eigen::Index>& rows) {
        for (Eigen::Index r : rows) {
            if (r < 0 || r >= features.rows()) {
                throw MissingRow("episode row " + std::to_string(r) +
                                 " outside feature matrix with " +
                                 std::to_string(features.rows()) + " rows");
            }
            gathered.row(out++) = features.row(r);
        }
    };
    copy_rows(episode.support_rows);
    copy_rows(episode.query_rows);
    return gathered;
}

}  // namespace rdc
