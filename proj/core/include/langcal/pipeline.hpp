#pragma once

#include "langcal/cir.hpp"
#include "langcal/mobility.hpp"
#include "langcal/rom.hpp"
#include "langcal/score.hpp"
#include "langcal/sde.hpp"

#include <map>
#include <string>
#include <vector>

namespace langcal {

enum class ExperimentKind { cir_analytic, cir_mc, affine2d, ou_oracle, custom_data };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

/// Everything that determines a run. A config plus its seed fully determines
/// all numeric outputs.
struct RunConfig {
    ExperimentKind kind = ExperimentKind::affine2d;

    CirParams cir;
    Affine2dParams affine2d;
    OuParams ou;
    std::vector<double> alphas = {2.0, 3.0};

    std::string data_path;              // custom-data input
    std::string data_format = "csv";    // "csv" | "columnar-binary"

    DataConfig data;
    NoiseSchedule schedule{0.05, 0.05};
    ScoreTrainConfig stationary_score;
    ScoreTrainConfig joint_score;
    std::vector<double> lags;
    MobilityTrainConfig mobility;
    DataConfig rom_sim;

    std::string out_dir = "out";
    std::uint64_t seed = 1;
    std::size_t threads = 0;  // 0 = hardware default
};

/// Full-scale benchmark configuration (reference data sizes, network widths,
/// and training lengths as used for the headline experiment).
RunConfig paper_affine2d_preset();
/// Workstation-scale variant: 8 trajectories to T = 500, 8192 pairs per lag,
/// 100 epochs.
RunConfig desk_affine2d_preset();
RunConfig cir_analytic_preset();
RunConfig cir_mc_preset();
RunConfig ou_oracle_preset();
RunConfig preset_by_name(const std::string& name);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

/// 64-bit FNV-1a of a file's bytes, hex-encoded.
std::string file_hash(const std::string& path);

struct StageRecord {
    std::string name;
    std::string config_hash;
    std::vector<std::pair<std::string, std::string>> outputs;  // path, hash
    double seconds = 0.0;
    std::string status;  // "done" | "skipped" | "failed: ..."
};

struct RunManifest {
    std::string version;
    std::string config_snapshot;  // canonical JSON of the config
    std::uint64_t seed = 0;
    std::vector<StageRecord> stages;

    const StageRecord* find(const std::string& stage) const;
};

void save_manifest(const RunManifest& manifest, const std::string& path);
RunManifest load_manifest(const std::string& path);

/// Staged pipeline with hash-checked resume: a completed stage whose config
/// hash matches and whose outputs still verify is skipped.
class Pipeline {
public:
    explicit Pipeline(RunConfig cfg);

    void run_all();
    void generate();
    void train_scores();
    void correlations();
    void fit_mobility();
    void simulate_roms();
    void validate_stage();
    void cir_analytic_stage();

    const RunManifest& manifest() const { return manifest_; }
    const std::string& out_dir() const { return cfg_.out_dir; }

private:
    bool stage_done(const std::string& name, const std::string& config_hash) const;
    void record_stage(const std::string& name, const std::string& config_hash,
                      const std::vector<std::string>& outputs, double seconds);
    std::string path(const std::string& rel) const;
    TrajectoryEnsemble load_reference();
    ObservableLibrary library() const;

    RunConfig cfg_;
    RunManifest manifest_;
};

/// Validated ingestion of external trajectory data. CSV rows must form a
/// uniform time grid per trajectory; non-finite entries are rejected with the
/// offending row.
TrajectoryEnsemble ingest_external(const std::string& path, const std::string& format);

struct CoordinateSummary {
    double min = 0, max = 0, mean = 0, stddev = 0;
};
std::vector<CoordinateSummary> ensemble_summary(const TrajectoryEnsemble& ens);

}  // namespace langcal
