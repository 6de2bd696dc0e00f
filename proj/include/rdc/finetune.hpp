#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "rdc/episode.hpp"
#include "rdc/errors.hpp"
#include "rdc/metric.hpp"
#include "rdc/rerank.hpp"

namespace rdc {

/// Linear adapter over frozen embeddings, the fine-tunable stand-in for a
/// deep backbone: adapted features are X * weights. Starts at identity.
struct Adapter {
    Eigen::MatrixXd weights;
    double learning_rate = 0.0;
};

/// Attention mask over pairwise distances: 1 + alpha inside the expanded
/// neighbor sets, 1 outside. Applied as an elementwise product.
struct AttentionMask {
    Eigen::MatrixXd values;
};

/// Row-stochastic matrix over the off-diagonal entries of a distance matrix.
struct SoftDistribution {
    Eigen::MatrixXd probabilities;  // diagonal fixed at zero
    double tau = 1.0;
};

inline AttentionMask attention_mask(const NeighborSets& sets, double alpha) {
    if (alpha < 0.0) throw Error("alpha must be >= 0");
    const auto n = static_cast<Eigen::Index>(sets.expanded.size());
    AttentionMask mask;
    mask.values = Eigen::MatrixXd::Ones(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int q : sets.expanded[static_cast<std::size_t>(i)]) {
            mask.values(i, q) = 1.0 + alpha;
        }
    }
    return mask;
}

/// Row-wise softmax over masked off-diagonal distances, stabilized by max
/// subtraction. With the paper-literal sign the logits are +d/tau (farther
/// items get more mass); `negated` flips to the conventional -d/tau.
inline SoftDistribution soften(const DistanceMatrix& dist, const AttentionMask& mask,
                               double tau, SoftenSign sign = SoftenSign::paper_literal) {
    if (!(tau > 0.0)) throw Error("tau must be > 0");
    const Eigen::Index n = dist.values.rows();
    if (mask.values.rows() != n || mask.values.cols() != n) {
        throw ShapeMismatch("mask shape does not match distance matrix");
    }
    const double scale = (sign == SoftenSign::paper_literal ? 1.0 : -1.0) / tau;

    SoftDistribution soft;
    soft.tau = tau;
    soft.probabilities = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd logits(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double max_logit = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            logits(j) = scale * mask.values(i, j) * dist.values(i, j);
            max_logit = std::max(max_logit, logits(j));
        }
        double denom = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            logits(j) = std::exp(logits(j) - max_logit);
            denom += logits(j);
        }
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j != i) soft.probabilities(i, j) = logits(j) / denom;
        }
    }
    return soft;
}

/// Temperature-scaled KL divergence KL(target || live), summed per row and
/// averaged over rows, times tau^2. The target is a constant; live
/// probabilities are floored at 1e-12 inside the log.
inline double kl_loss(const SoftDistribution& live, const SoftDistribution& target,
                      double tau) {
    const Eigen::Index n = live.probabilities.rows();
    if (target.probabilities.rows() != n || target.probabilities.cols() != n) {
        throw ShapeMismatch("distribution shapes differ");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double t = target.probabilities(i, j);
            if (t <= 0.0) continue;  // 0 * log 0 := 0
            const double l = std::max(live.probabilities(i, j), 1e-12);
            total += t * std::log(t / l);
        }
    }
    return tau * tau * total / static_cast<double>(n);
}

/// Mean squared difference of the masked matrices over off-diagonal entries.
inline double mse_loss(const DistanceMatrix& live, const DistanceMatrix& target,
                       const AttentionMask& mask) {
    const Eigen::Index n = live.values.rows();
    if (target.values.rows() != n || target.values.cols() != n ||
        mask.values.rows() != n || mask.values.cols() != n) {
        throw ShapeMismatch("matrix shapes differ");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i) continue;
            const double diff = mask.values(i, j) * (live.values(i, j) - target.values(i, j));
            total += diff * diff;
        }
    }
    return total / static_cast<double>(n * (n - 1));
}

/// One epoch's objective value and its gradient in the adapter weights, with
/// the mask, the target matrix and the neighbor sets held constant.
struct EpochGradient {
    double loss = 0.0;
    Eigen::MatrixXd gradient;
};

/// Differentiates the fine-tuning objective through the live branch only:
/// adapted features X*W -> row normalization -> pairwise distances -> mask ->
/// (softmax -> KL) or MSE. Discrete stages (neighbor sets) and the target are
/// constants of the epoch.
inline EpochGradient epoch_loss_and_gradient(const Eigen::MatrixXd& episode_features,
                                             const Eigen::MatrixXd& weights,
                                             const AttentionMask& mask,
                                             const DistanceMatrix& target,
                                             const CalibrationConfig& cfg) {
    const Eigen::Index n = episode_features.rows();
    const Eigen::Index m = episode_features.cols();

    const Eigen::MatrixXd adapted = episode_features * weights;
    Eigen::VectorXd norms(n);
    Eigen::MatrixXd unit(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        norms(i) = adapted.row(i).norm();
        if (norms(i) == 0.0) {
            throw ZeroVector("adapted row " + std::to_string(i) + " collapsed to zero");
        }
        unit.row(i) = adapted.row(i) / norms(i);
    }
    DistanceMatrix live;
    live.kind = DistanceKind::euclidean;
    live.values = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double d = (unit.row(i) - unit.row(j)).norm();
            live.values(i, j) = d;
            live.values(j, i) = d;
        }
    }

    EpochGradient result;
    // dL/d(distance entry), per ordered pair (i, j).
    Eigen::MatrixXd entry_grad = Eigen::MatrixXd::Zero(n, n);
    if (cfg.loss == LossKind::kl) {
        const SoftDistribution live_soft = soften(live, mask, cfg.tau, cfg.soften_sign);
        const SoftDistribution target_soft = soften(target, mask, cfg.tau, cfg.soften_sign);
        result.loss = kl_loss(live_soft, target_soft, cfg.tau);
        const double sign = cfg.soften_sign == SoftenSign::paper_literal ? 1.0 : -1.0;
        const double coeff = cfg.tau * sign / static_cast<double>(n);
        entry_grad = coeff *
                     mask.values.cwiseProduct(live_soft.probabilities -
                                              target_soft.probabilities);
        entry_grad.diagonal().setZero();
    } else {
        result.loss = mse_loss(live, target, mask);
        const double coeff = 2.0 / static_cast<double>(n * (n - 1));
        entry_grad = coeff * mask.values.array().square().matrix().cwiseProduct(
                                 live.values - target.values);
        entry_grad.diagonal().setZero();
    }

    // Chain through the pair distances into the unit rows. Both matrix slots
    // (i,j) and (j,i) hold the same pair distance, so their entry gradients
    // add up on the shared pair.
    Eigen::MatrixXd unit_grad = Eigen::MatrixXd::Zero(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double pair_coeff = entry_grad(i, j) + entry_grad(j, i);
            if (pair_coeff == 0.0) continue;
            const double d = live.values(i, j);
            if (d < 1e-12) continue;  // coincident rows: subgradient 0
            const Eigen::RowVectorXd direction = (unit.row(i) - unit.row(j)) / d;
            unit_grad.row(i) += pair_coeff * direction;
            unit_grad.row(j) -= pair_coeff * direction;
        }
    }

    // Through the row normalization, then into the weights.
    Eigen::MatrixXd adapted_grad(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double radial = unit.row(i).dot(unit_grad.row(i));
        adapted_grad.row(i) = (unit_grad.row(i) - radial * unit.row(i)) / norms(i);
    }
    result.gradient = episode_features.transpose() * adapted_grad;
    return result;
}

struct FinetuneResult {
    Adapter adapter;
    std::vector<double> loss_trace;  // one value per epoch, pre-update
};

/// Fine-tunes the linear adapter for one episode: every epoch recomputes the
/// calibrated target from the current adapted features, freezes it, and takes
/// one gradient step on the chosen loss.
inline FinetuneResult finetune_episode(const Eigen::MatrixXd& features,
                                       const Episode& episode,
                                       const CalibrationConfig& cfg) {
    validate(cfg);
    const Eigen::MatrixXd episode_features = gather_episode_features(features, episode);
    const Eigen::Index m = episode_features.cols();

    FinetuneResult result;
    result.adapter.weights = Eigen::MatrixXd::Identity(m, m);
    result.adapter.learning_rate = cfg.learning_rate;
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.epochs));

    // Adam state, used only with the adaptive-moments optimizer.
    Eigen::MatrixXd first_moment = Eigen::MatrixXd::Zero(m, m);
    Eigen::MatrixXd second_moment = Eigen::MatrixXd::Zero(m, m);
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Eigen::MatrixXd adapted = episode_features * result.adapter.weights;
        const PipelineResult pipeline = rdc_calibrate_episode(adapted, episode, cfg);
        const AttentionMask mask =
            attention_mask(pipeline.neighbors, cfg.use_attention ? cfg.alpha : 0.0);

        const EpochGradient step = epoch_loss_and_gradient(
            episode_features, result.adapter.weights, mask, pipeline.calibrated, cfg);
        if (!std::isfinite(step.loss)) {
            throw DivergenceDetected("loss became non-finite at epoch " +
                                     std::to_string(epoch));
        }
        result.loss_trace.push_back(step.loss);

        if (cfg.optimizer == OptimizerKind::sgd) {
            result.adapter.weights -= cfg.learning_rate * step.gradient;
        } else {
            const double t = static_cast<double>(epoch + 1);
            first_moment = kBeta1 * first_moment + (1.0 - kBeta1) * step.gradient;
            second_moment = kBeta2 * second_moment +
                            (1.0 - kBeta2) * step.gradient.array().square().matrix();
            const double correction1 = 1.0 - std::pow(kBeta1, t);
            const double correction2 = 1.0 - std::pow(kBeta2, t);
            result.adapter.weights.array() -=
                cfg.learning_rate * (first_moment.array() / correction1) /
                ((second_moment.array() / correction2).sqrt() + kEps);
        }
        if (!result.adapter.weights.allFinite()) {
            throw DivergenceDetected("adapter weights became non-finite at epoch " +
                                     std::to_string(epoch));
        }
    }
    return result;
}

/// Scores an episode after fine-tuning with the vanilla nearest-prototype
/// classifier on the adapted (un-normalized) features.
inline std::vector<int> evaluate_after_finetune(const Eigen::MatrixXd& features,
                                                const Episode& episode,
                                                const Adapter& adapter) {
    const Eigen::MatrixXd episode_features = gather_episode_features(features, episode);
    const Eigen::MatrixXd adapted = episode_features * adapter.weights;
    const Eigen::Index support_count = episode.support_count();

    Episode local = episode;  // prototype/query lookup over the adapted matrix
    local.support_rows.clear();
    for (Eigen::Index s = 0; s < support_count; ++s) local.support_rows.push_back(s);
    const Prototypes protos = compute_prototypes(local, adapted);
    const Eigen::MatrixXd queries =
        adapted.bottomRows(adapted.rows() - support_count);
    return npc_classify(queries, protos);
}

/// Loss trace as "epoch,loss" CSV rows.
inline std::string format_loss_trace_csv(const std::vector<double>& trace) {
    std::string out = "epoch,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", i, trace[i]);
        out += buf;
    }
    return out;
}

}  // namespace rdc
