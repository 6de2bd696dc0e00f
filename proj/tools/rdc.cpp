#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include "rdc/rdc.hpp"

namespace {

void print_report(const rdc::RunReport& report) {
    const auto& config = report.config;
    std::printf("mode            %s\n", rdc::to_string(report.mode));
    std::printf("input           %s\n", config.input.c_str());
    std::printf("episodes        %d  (%d-way %d-shot, %d queries/class)\n",
                config.episodes, config.way, config.shot, config.queries);
    std::printf("seed            %llu\n",
                static_cast<unsigned long long>(config.seed));
    const auto& calib = config.calibration;
    if (config.mode != rdc::RunMode::npc && config.mode != rdc::RunMode::npc_l2) {
        std::printf("calibration     k=%d k2=%d lambda=%g p=%d qe=%s\n", calib.k, calib.k2,
                    calib.lambda, calib.p,
                    calib.qe_plain_knn ? "plain-knn" : "reciprocal");
    }
    if (rdc::is_finetune_mode(config.mode)) {
        std::printf("fine-tune       epochs=%d lr=%g tau=%g alpha=%g loss=%s sign=%s opt=%s\n",
                    calib.epochs, calib.learning_rate, calib.tau,
                    calib.use_attention ? calib.alpha : 0.0,
                    calib.loss == rdc::LossKind::kl ? "kl" : "mse",
                    calib.soften_sign == rdc::SoftenSign::paper_literal ? "paper" : "negated",
                    calib.optimizer == rdc::OptimizerKind::sgd ? "sgd" : "adaptive-moments");
    }
    std::printf("accuracy        %.4f +/- %.4f (95%% CI)\n", report.mean, report.ci95);
    std::printf("wall time       %.2fs\n", report.wall_seconds);
    if (!config.output.empty()) {
        std::printf("report          %s\n", config.output.c_str());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ranking-distance calibration for few-shot episodes"};
    app.require_subcommand(1);

    // --- run ---------------------------------------------------------------
    rdc::RunConfig config;
    std::string mode_name = "rdc";
    std::string loss_name = "kl";
    std::string sign_name = "paper";
    std::string optimizer_name = "sgd";
    bool no_attention = false;
    bool no_subspace = false;

    CLI::App* run_cmd = app.add_subcommand("run", "evaluate episodes over an embedding file");
    run_cmd->set_config("--config", "", "key=value file mirroring the flags; flags win");
    run_cmd->add_option("--mode", mode_name,
                        "npc | npc-l2 | rdc-no-subspace | rdc | rdcft-no-subspace | rdcft")
        ->capture_default_str();
    run_cmd->add_option("--input", config.input, "embeddings file (CSV or packed binary)")
        ->required();
    run_cmd->add_option("--episodes", config.episodes, "number of episodes")
        ->capture_default_str();
    run_cmd->add_option("--way", config.way, "classes per episode")->capture_default_str();
    run_cmd->add_option("--shot", config.shot, "support items per class")->capture_default_str();
    run_cmd->add_option("--query", config.queries, "query items per class")
        ->capture_default_str();
    run_cmd->add_option("--seed", config.seed, "base seed; episode e uses seed XOR e")
        ->capture_default_str();
    run_cmd->add_option("--out", config.output, "report CSV path");
    run_cmd->add_option("--k", config.calibration.k, "neighborhood size")->capture_default_str();
    run_cmd->add_option("--k2", config.calibration.k2, "query-expansion neighborhood")
        ->capture_default_str();
    run_cmd->add_option("--lambda", config.calibration.lambda, "Euclidean/Jaccard blend")
        ->capture_default_str();
    run_cmd->add_option("--p", config.calibration.p, "subspace dimension")
        ->capture_default_str();
    run_cmd->add_option("--alpha", config.calibration.alpha, "attention scalar")
        ->capture_default_str();
    run_cmd->add_option("--tau", config.calibration.tau, "softmax temperature")
        ->capture_default_str();
    run_cmd->add_option("--epochs", config.calibration.epochs, "fine-tune epochs")
        ->capture_default_str();
    run_cmd->add_option("--lr", config.calibration.learning_rate, "fine-tune learning rate")
        ->capture_default_str();
    run_cmd->add_option("--loss", loss_name, "kl | mse")->capture_default_str();
    run_cmd->add_option("--soften-sign", sign_name, "paper | negated")->capture_default_str();
    run_cmd->add_option("--optimizer", optimizer_name, "sgd | adaptive-moments")
        ->capture_default_str();
    run_cmd->add_flag("--no-attention", no_attention, "disable the attention mask");
    run_cmd->add_flag("--no-subspace", no_subspace, "drop the subspace branch");
    run_cmd->add_flag("--qe-plain-knn", config.calibration.qe_plain_knn,
                      "query expansion over plain k2-NN lists");
    run_cmd->add_option("--threads", config.threads, "episode worker threads")
        ->capture_default_str();

    // --- gen ---------------------------------------------------------------
    int gen_classes = 10;
    int gen_per_class = 40;
    int gen_dim = 64;
    double gen_sigma = 0.2;
    std::uint64_t gen_seed = 7;
    std::string gen_out;
    std::string gen_format = "bin";

    CLI::App* gen_cmd = app.add_subcommand("gen", "write a synthetic clustered gallery");
    gen_cmd->add_option("--classes", gen_classes, "number of classes")->capture_default_str();
    gen_cmd->add_option("--per-class", gen_per_class, "rows per class")->capture_default_str();
    gen_cmd->add_option("--dim", gen_dim, "feature dimension")->capture_default_str();
    gen_cmd->add_option("--sigma", gen_sigma, "within-class noise")->capture_default_str();
    gen_cmd->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen_cmd->add_option("--out", gen_out, "output path")->required();
    gen_cmd->add_option("--format", gen_format, "bin | csv")->capture_default_str();

    // --- trace -------------------------------------------------------------
    rdc::RunConfig trace_config;
    std::string trace_out;
    int trace_episode = 0;
    CLI::App* trace_cmd =
        app.add_subcommand("trace", "fine-tune one episode and dump its loss trace");
    trace_cmd->add_option("--input", trace_config.input, "embeddings file")->required();
    trace_cmd->add_option("--episode", trace_episode, "episode index")->capture_default_str();
    trace_cmd->add_option("--way", trace_config.way)->capture_default_str();
    trace_cmd->add_option("--shot", trace_config.shot)->capture_default_str();
    trace_cmd->add_option("--query", trace_config.queries)->capture_default_str();
    trace_cmd->add_option("--seed", trace_config.seed)->capture_default_str();
    trace_cmd->add_option("--out", trace_out, "trace CSV path ('-' for stdout)")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            config.mode = rdc::parse_run_mode(mode_name);
            if (no_subspace && config.mode == rdc::RunMode::rdc) {
                config.mode = rdc::RunMode::rdc_no_subspace;
            }
            if (no_subspace && config.mode == rdc::RunMode::rdcft) {
                config.mode = rdc::RunMode::rdcft_no_subspace;
            }
            if (loss_name == "kl") {
                config.calibration.loss = rdc::LossKind::kl;
            } else if (loss_name == "mse") {
                config.calibration.loss = rdc::LossKind::mse;
            } else {
                throw rdc::Error("unknown loss: " + loss_name);
            }
            if (sign_name == "paper") {
                config.calibration.soften_sign = rdc::SoftenSign::paper_literal;
            } else if (sign_name == "negated") {
                config.calibration.soften_sign = rdc::SoftenSign::negated;
            } else {
                throw rdc::Error("unknown soften sign: " + sign_name);
            }
            if (optimizer_name == "sgd") {
                config.calibration.optimizer = rdc::OptimizerKind::sgd;
            } else if (optimizer_name == "adaptive-moments") {
                config.calibration.optimizer = rdc::OptimizerKind::adaptive_moments;
            } else {
                throw rdc::Error("unknown optimizer: " + optimizer_name);
            }
            config.calibration.use_attention = !no_attention;

            const rdc::RunReport report = rdc::run(config);
            if (!config.output.empty()) {
                rdc::write_report_csv(report, config.output);
            }
            print_report(report);
        } else if (gen_cmd->parsed()) {
            const rdc::EmbeddingSet set = rdc::generate_synthetic(
                gen_classes, gen_per_class, gen_dim, gen_sigma, gen_seed);
            rdc::save_embeddings(set, gen_out,
                                 gen_format == "csv" ? rdc::FileFormat::csv
                                                     : rdc::FileFormat::packed_binary);
            std::printf("wrote %lld rows (dim %lld, %d classes) to %s\n",
                        static_cast<long long>(set.rows()),
                        static_cast<long long>(set.dim()), gen_classes, gen_out.c_str());
        } else if (trace_cmd->parsed()) {
            const rdc::EmbeddingSet set = rdc::load_embeddings(
                trace_config.input, rdc::detect_format(trace_config.input));
            const std::uint64_t episode_seed =
                trace_config.seed ^ static_cast<std::uint64_t>(trace_episode);
            const rdc::Episode episode =
                rdc::sample_episode(set, trace_config.way, trace_config.shot,
                                    trace_config.queries, episode_seed);
            const rdc::FinetuneResult ft =
                rdc::finetune_episode(set.vectors, episode, trace_config.calibration);
            const std::string csv = rdc::format_loss_trace_csv(ft.loss_trace);
            if (trace_out.empty() || trace_out == "-") {
                std::fputs(csv.c_str(), stdout);
            } else {
                std::ofstream out(trace_out, std::ios::binary | std::ios::trunc);
                out.write(csv.data(), static_cast<std::streamsize>(csv.size()));
            }
        }
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
