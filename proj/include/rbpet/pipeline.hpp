#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbpet/models.hpp"
#include "rbpet/phantom.hpp"

namespace rbpet {

// A stage failure carries the stage name for diagnostics and exit-code 3
// handling in the CLI.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string stage_name, const std::string& what)
        : std::runtime_error(stage_name + ": " + what), stage(std::move(stage_name)) {}
};

struct KernelConfig {
    std::size_t n_positrons = 200000;
    Dims dims{17, 17, 17};
    std::string tissue = "soft";
};

struct PhantomStageConfig {
    PhantomSpec rest;
    PhantomSpec stress;
    double noise_scale = 15.0;
};

struct TrainStageConfig {
    TrainConfig denoise;
    TrainConfig prc;
    int static_frames = 6;  // number of trailing frames used as PRC statics
};

struct PipelineConfig {
    std::filesystem::path out_dir = "results";
    std::uint64_t seed = 0;
    int threads = 0;
    KernelConfig kernel;
    PhantomStageConfig phantom;
    TrainStageConfig train;
    int rl_iterations = 30;
    // Regions summarized by the report stage; an empty list yields
    // header-only tables.
    std::vector<std::string> report_regions = {"myocardium", "background"};

    void validate() const;
};

// Config with trained-in-minutes defaults (stress = rest with higher flow).
PipelineConfig default_config();

PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);

// Each stage reads its inputs from cfg.out_dir (checking existence before any
// computation), writes its outputs there, and returns the artifact paths.
std::vector<std::filesystem::path> stage_simulate_kernel(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_factorize(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_phantom(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_train_denoise(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_train_prc(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_apply(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_prc_rl(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_fit(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_idif_compare(const PipelineConfig& cfg);
std::vector<std::filesystem::path> stage_report(const PipelineConfig& cfg);

// simulate-kernel -> factorize -> phantom -> train -> apply -> fit ->
// idif-compare -> report, then writes manifest.json with the SHA-256 of every
// artifact. Returns the manifest hash.
std::string run_pipeline(const PipelineConfig& cfg);

// Hex-encoded SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

// Hash of the manifest written by run_pipeline (reads out_dir/manifest.json).
std::string manifest_hash(const std::filesystem::path& out_dir);

}  // namespace rbpet
