#pragma once

#include <functional>

#include "cellsynth/metrics.hpp"
#include "pipeline_config.hpp"

namespace cellsynth::pipeline {

/// Every stage in execution order.
const std::vector<std::string>& all_stages();
/// The stages a full run executes for this configuration (mode and ablations decide).
std::vector<std::string> stages_for(const PipelineConfig& cfg);
/// Prerequisites of a stage under this configuration.
std::vector<std::string> prerequisites(const std::string& stage, const PipelineConfig& cfg);

struct StageRecord {
    std::string stage;
    std::uint64_t seed = 0;
    std::string config_hash;
    double wall_seconds = 0.0;
    /// Relative artifact path -> content hash.
    nlohmann::json artifacts = nlohmann::json::object();
    /// Stage-specific figures such as training losses or skip counts.
    nlohmann::json summary = nlohmann::json::object();
};

/// Runs one stage after checking that its prerequisites have records in `{work_dir}/records`.
StageRecord run_stage(const std::string& stage, const PipelineConfig& cfg);
/// Runs every stage of `stages_for(cfg)` in order.
std::vector<StageRecord> run_pipeline(const PipelineConfig& cfg,
                                      const std::function<void(const StageRecord&)>& on_stage = {});

struct EvaluationRequest {
    /// CTC sequence directories.
    std::filesystem::path real;
    std::filesystem::path synthetic;
    /// Optional second real sequence for the real-to-real baseline.
    std::filesystem::path real_reference;
    /// Optional predicted and ground-truth label maps for SEG.
    std::filesystem::path predicted_labels;
    std::filesystem::path ground_truth_labels;
};

/// FID_r2s (and FID_r2r, SEG when requested) over per-cell crop slices.
std::vector<MetricRecord> evaluate(const PipelineConfig& cfg, const EvaluationRequest& request);

/// Canonical per-stage seed: derived from the master seed, the stage name and a sample index.
std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage, std::uint64_t index = 0);

}  // namespace cellsynth::pipeline
