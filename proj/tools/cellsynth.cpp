#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include <spdlog/spdlog.h>

#include "cellsynth/dataset_io.hpp"
#include "pipeline.hpp"

using namespace cellsynth;
using namespace cellsynth::pipeline;

namespace {

int exit_code(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::Validation: return 2;
        case ErrorCategory::Configuration: return 3;
        case ErrorCategory::Dependency: return 4;
        case ErrorCategory::Io: return 5;
        case ErrorCategory::Input: return 6;
        case ErrorCategory::Range: return 7;
        case ErrorCategory::Optimization: return 8;
        case ErrorCategory::Generation: return 9;
        case ErrorCategory::Reconstruction: return 10;
        case ErrorCategory::UndefinedScore: return 11;
        case ErrorCategory::Contract: return 12;
    }
    return 1;
}

PipelineConfig configured(const std::string& path, const std::optional<std::uint64_t>& seed) {
    auto cfg = load_config(path);
    if (seed) cfg.seed = *seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic cell microscopy data from diffusion models"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Log training progress");

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> stages;

    auto* run = app.add_subcommand("run", "Run pipeline stages (all of them unless --stage is given)");
    run->add_option("--config", config_path, "TOML configuration")->required()->check(CLI::ExistingFile);
    run->add_option("--stage", stages, "Stage to run; repeatable");
    run->add_option("--seed", seed, "Override the master seed");

    auto* validate = app.add_subcommand("validate", "Check a configuration and list its stages");
    validate->add_option("--config", config_path, "TOML configuration")->required()->check(CLI::ExistingFile);

    EvaluationRequest req;
    auto* eval = app.add_subcommand("evaluate", "FID between real and synthetic sequences, optionally SEG");
    eval->add_option("--config", config_path, "TOML configuration")->required()->check(CLI::ExistingFile);
    eval->add_option("--real", req.real, "Real CTC sequence directory")->required();
    eval->add_option("--synth", req.synthetic, "Synthetic CTC sequence directory")->required();
    eval->add_option("--real-ref", req.real_reference, "Second real sequence for the real-to-real baseline");
    eval->add_option("--pred", req.predicted_labels, "Predicted label map (file or directory)");
    eval->add_option("--gt", req.ground_truth_labels, "Ground-truth label map (file or directory)");
    std::string report_path;
    eval->add_option("--report", report_path, "Also write tab-separated records here");

    std::string mode = "2D", out_path;
    auto* toy = app.add_subcommand("toy-config", "Print a small configuration for smoke runs");
    toy->add_option("--mode", mode, "2D or 3D")->check(CLI::IsMember({"2D", "3D"}));
    toy->add_option("-o,--output", out_path, "Write to a file instead of stdout");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        if (*run) {
            const auto cfg = configured(config_path, seed);
            if (stages.empty()) run_pipeline(cfg);
            for (const auto& s : stages) run_stage(s, cfg);
        } else if (*validate) {
            const auto cfg = load_config(config_path);
            std::cout << "configuration ok (hash " << config_hash(to_json(cfg)) << ")\nstages:";
            for (const auto& s : stages_for(cfg)) std::cout << ' ' << s;
            std::cout << '\n';
        } else if (*eval) {
            const auto records = evaluate(load_config(config_path), req);
            std::cout << format_table(records);
            if (!report_path.empty()) {
                std::ofstream out(report_path);
                out << format_records(records);
                if (!out) throw IoError("cannot write report " + report_path);
            }
        } else if (*toy) {
            const auto text = toy_config_text(mode == "3D" ? Mode::Volumetric : Mode::Planar);
            if (out_path.empty()) std::cout << text;
            else if (!(std::ofstream(out_path) << text)) throw IoError("cannot write " + out_path);
        }
    } catch (const Error& e) {
        spdlog::error("{} error: {}", to_string(e.category()), e.what());
        return exit_code(e.category());
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
