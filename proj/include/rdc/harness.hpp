#pragma once

#include <Eigen/Core>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "rdc/embedding_store.hpp"
#include "rdc/episode.hpp"
#include "rdc/errors.hpp"
#include "rdc/finetune.hpp"
#include "rdc/metric.hpp"
#include "rdc/random.hpp"
#include "rdc/rerank.hpp"

namespace rdc {

enum class RunMode { npc, npc_l2, rdc_no_subspace, rdc, rdcft_no_subspace, rdcft };

inline const char* to_string(RunMode mode) {
    switch (mode) {
        case RunMode::npc: return "npc";
        case RunMode::npc_l2: return "npc-l2";
        case RunMode::rdc_no_subspace: return "rdc-no-subspace";
        case RunMode::rdc: return "rdc";
        case RunMode::rdcft_no_subspace: return "rdcft-no-subspace";
        case RunMode::rdcft: return "rdcft";
    }
    return "?";
}

inline RunMode parse_run_mode(const std::string& name) {
    for (RunMode mode : {RunMode::npc, RunMode::npc_l2, RunMode::rdc_no_subspace,
                         RunMode::rdc, RunMode::rdcft_no_subspace, RunMode::rdcft}) {
        if (name == to_string(mode)) return mode;
    }
    throw Error("unknown mode: " + name);
}

inline bool is_finetune_mode(RunMode mode) {
    return mode == RunMode::rdcft || mode == RunMode::rdcft_no_subspace;
}

/// Full description of one batch evaluation.
struct RunConfig {
    RunMode mode = RunMode::rdc;
    int episodes = 2000;
    int way = 5;
    int shot = 1;
    int queries = 15;
    CalibrationConfig calibration;
    std::uint64_t seed = 42;
    std::string input;   // embeddings file
    std::string output;  // report CSV destination; empty = skip writing
    int threads = 1;
};

struct RunReport {
    std::vector<double> accuracies;      // one per episode, indexed by episode
    std::vector<double> initial_losses;  // fine-tune modes only
    std::vector<double> final_losses;    // fine-tune modes only
    double mean = 0.0;
    double ci95 = 0.0;
    RunMode mode = RunMode::rdc;
    RunConfig config;
    double wall_seconds = 0.0;
};

/// Sample mean and the 95% confidence half-width 1.96 * sd / sqrt(n)
/// (sample standard deviation, n-1 denominator; zero for a single value).
inline std::pair<double, double> mean_and_ci95(const std::vector<double>& values) {
    if (values.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double sq = 0.0;
    for (double v : values) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(values.size() - 1));
    return {mean, 1.96 * sd / std::sqrt(static_cast<double>(values.size()))};
}

/// Synthetic gallery: class means drawn uniformly on the unit sphere, samples
/// spread around them with isotropic Gaussian noise. Deterministic per seed.
inline EmbeddingSet generate_synthetic(int classes, int per_class, int dim, double sigma,
                                       std::uint64_t seed) {
    if (classes < 1 || per_class < 1 || dim < 1 || sigma < 0.0) {
        throw Error("generate_synthetic arguments must be positive (sigma >= 0)");
    }
    Rng rng(seed);
    Eigen::MatrixXd means(classes, dim);
    for (int c = 0; c < classes; ++c) {
        double norm = 0.0;
        do {
            for (int d = 0; d < dim; ++d) means(c, d) = rng.next_gaussian();
            norm = means.row(c).norm();
        } while (norm < 1e-12);
        means.row(c) /= norm;
    }

    const Eigen::Index n = static_cast<Eigen::Index>(classes) * per_class;
    Eigen::MatrixXd vectors(n, dim);
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
    std::vector<std::string> ids(static_cast<std::size_t>(n));
    Eigen::Index row = 0;
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i, ++row) {
            for (int d = 0; d < dim; ++d) {
                vectors(row, d) = means(c, d) + sigma * rng.next_gaussian();
            }
            labels[static_cast<std::size_t>(row)] = c;
            ids[static_cast<std::size_t>(row)] = "c" + std::to_string(c) + "r" + std::to_string(i);
        }
    }
    return make_embedding_set(std::move(vectors), std::move(labels), std::move(ids));
}

namespace detail {

struct EpisodeOutcome {
    double accuracy = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

inline EpisodeOutcome run_episode(const RunConfig& config, const EmbeddingSet& set,
                                  const Eigen::MatrixXd* normalized_gallery,
                                  int episode_index) {
    const std::uint64_t episode_seed =
        config.seed ^ static_cast<std::uint64_t>(episode_index);
    const Episode episode =
        sample_episode(set, config.way, config.shot, config.queries, episode_seed);

    CalibrationConfig calib = config.calibration;
    calib.use_subspace =
        config.mode == RunMode::rdc || config.mode == RunMode::rdcft;

    EpisodeOutcome outcome;
    std::vector<int> predicted;
    switch (config.mode) {
        case RunMode::npc:
        case RunMode::npc_l2: {
            const Eigen::MatrixXd& gallery =
                config.mode == RunMode::npc ? set.vectors : *normalized_gallery;
            const Prototypes protos = compute_prototypes(episode, gallery);
            Eigen::MatrixXd queries(episode.query_rows.size(), gallery.cols());
            for (std::size_t q = 0; q < episode.query_rows.size(); ++q) {
                queries.row(static_cast<Eigen::Index>(q)) = gallery.row(episode.query_rows[q]);
            }
            predicted = npc_classify(queries, protos);
            break;
        }
        case RunMode::rdc_no_subspace:
        case RunMode::rdc: {
            const DistanceMatrix calibrated = rdc_pipeline(set.vectors, episode, calib);
            predicted = npc_classify_from_matrix(calibrated, episode);
            break;
        }
        case RunMode::rdcft_no_subspace:
        case RunMode::rdcft: {
            const FinetuneResult ft = finetune_episode(set.vectors, episode, calib);
            predicted = evaluate_after_finetune(set.vectors, episode, ft.adapter);
            outcome.initial_loss = ft.loss_trace.front();
            outcome.final_loss = ft.loss_trace.back();
            break;
        }
    }
    outcome.accuracy = accuracy(predicted, episode.query_true_labels);
    return outcome;
}

}  // namespace detail

/// Runs `config.episodes` seeded episodes over an already-loaded gallery.
/// Episode e uses seed config.seed XOR e; results are aggregated by episode
/// index, so the report is identical for any thread count.
inline RunReport run(const RunConfig& config, const EmbeddingSet& set) {
    if (config.episodes < 1) throw Error("episodes must be >= 1");
    validate(config.calibration);
    const auto start = std::chrono::steady_clock::now();

    Eigen::MatrixXd normalized_gallery;
    if (config.mode == RunMode::npc_l2) {
        normalized_gallery = l2_normalized_rows(set.vectors);
    }

    std::vector<detail::EpisodeOutcome> outcomes(static_cast<std::size_t>(config.episodes));
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::atomic<int> next{0};

    auto worker = [&] {
        for (;;) {
            const int e = next.fetch_add(1);
            if (e >= config.episodes) return;
            try {
                outcomes[static_cast<std::size_t>(e)] =
                    detail::run_episode(config, set, &normalized_gallery, e);
            } catch (const std::exception& ex) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) {
                    failure = std::make_exception_ptr(
                        Error("episode " + std::to_string(e) + " failed: " + ex.what()));
                }
                next.store(config.episodes);
                return;
            }
        }
    };

    const int threads = std::max(1, config.threads);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    RunReport report;
    report.mode = config.mode;
    report.config = config;
    report.accuracies.reserve(outcomes.size());
    for (const auto& outcome : outcomes) {
        report.accuracies.push_back(outcome.accuracy);
        if (is_finetune_mode(config.mode)) {
            report.initial_losses.push_back(outcome.initial_loss);
            report.final_losses.push_back(outcome.final_loss);
        }
    }
    std::tie(report.mean, report.ci95) = mean_and_ci95(report.accuracies);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

/// Sniffs the packed-binary magic; anything else is treated as CSV.
inline FileFormat detect_format(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    return (in.gcount() == 4 && std::string_view(magic, 4) == "RDCE")
               ? FileFormat::packed_binary
               : FileFormat::csv;
}

/// Loads the gallery named by the config and evaluates it.
inline RunReport run(const RunConfig& config) {
    const EmbeddingSet set = load_embeddings(config.input, detect_format(config.input));
    return run(config, set);
}

/// Report CSV, schema v1: per-episode accuracy rows, plus the first and last
/// loss for fine-tune modes. Formatting is fixed so identical runs produce
/// byte-identical files.
inline std::string format_report_csv(const RunReport& report) {
    std::string out = "# rdc-report v1\n";
    const bool with_loss = is_finetune_mode(report.mode);
    out += with_loss ? "episode_index,accuracy,initial_loss,final_loss\n"
                     : "episode_index,accuracy\n";
    char buf[128];
    for (std::size_t e = 0; e < report.accuracies.size(); ++e) {
        if (with_loss) {
            std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.12g,%.12g\n", e,
                          report.accuracies[e], report.initial_losses[e],
                          report.final_losses[e]);
        } else {
            std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", e, report.accuracies[e]);
        }
        out += buf;
    }
    return out;
}

inline void write_report_csv(const RunReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open file for writing: " + path);
    const std::string text = format_report_csv(report);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace rdc
