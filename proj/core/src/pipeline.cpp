#include "langcal/pipeline.hpp"

#include "langcal/threading.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace langcal {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::cir_analytic: return "cir-analytic";
        case ExperimentKind::cir_mc: return "cir-mc";
        case ExperimentKind::affine2d: return "affine2d";
        case ExperimentKind::ou_oracle: return "ou-oracle";
        case ExperimentKind::custom_data: return "custom-data";
    }
    return "unknown";
}

ExperimentKind experiment_kind_from_string(const std::string& name) {
    if (name == "cir-analytic") return ExperimentKind::cir_analytic;
    if (name == "cir-mc") return ExperimentKind::cir_mc;
    if (name == "affine2d") return ExperimentKind::affine2d;
    if (name == "ou-oracle") return ExperimentKind::ou_oracle;
    if (name == "custom-data") return ExperimentKind::custom_data;
    throw std::invalid_argument("unknown experiment kind: " + name);
}

namespace {

json data_to_json(const DataConfig& d) {
    return json{{"n_traj", d.n_traj},       {"horizon", d.horizon},
                {"dt", d.dt},               {"save_every", d.save_every},
                {"burn_in_fraction", d.burn_in_fraction}, {"seed", d.seed}};
}

DataConfig data_from_json(const json& j) {
    DataConfig d;
    d.n_traj = j.at("n_traj").get<std::size_t>();
    d.horizon = j.at("horizon").get<double>();
    d.dt = j.at("dt").get<double>();
    d.save_every = j.at("save_every").get<double>();
    d.burn_in_fraction = j.at("burn_in_fraction").get<double>();
    d.seed = j.at("seed").get<std::uint64_t>();
    return d;
}

json score_cfg_to_json(const ScoreTrainConfig& c) {
    return json{{"hidden", c.hidden},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"lr_final", c.lr_final},
                {"weight_decay", c.weight_decay},
                {"batch_size", c.batch_size},
                {"samples_per_epoch", c.samples_per_epoch},
                {"pairs_per_lag", c.pairs_per_lag},
                {"lags_per_batch", c.lags_per_batch},
                {"validation_fraction", c.validation_fraction},
                {"polyak_tail", c.polyak_tail},
                {"seed", c.seed}};
}

ScoreTrainConfig score_cfg_from_json(const json& j) {
    ScoreTrainConfig c;
    c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.lr_final = j.at("lr_final").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.samples_per_epoch = j.at("samples_per_epoch").get<std::size_t>();
    c.pairs_per_lag = j.at("pairs_per_lag").get<std::size_t>();
    c.lags_per_batch = j.at("lags_per_batch").get<std::size_t>();
    c.validation_fraction = j.at("validation_fraction").get<double>();
    c.polyak_tail = j.at("polyak_tail").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

json mobility_cfg_to_json(const MobilityTrainConfig& c) {
    return json{{"hidden", c.hidden},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"lr_final", c.lr_final},
                {"polyak_tail", c.polyak_tail},
                {"weight_decay", c.weight_decay},
                {"lambda_mean", c.lambda_mean},
                {"epsilon_floor", c.epsilon_floor},
                {"pairs_per_lag", c.pairs_per_lag},
                {"lags_per_batch", c.lags_per_batch},
                {"batch_per_lag", c.batch_per_lag},
                {"anchor_total", c.anchor_total},
                {"anchor_batch", c.anchor_batch},
                {"seed", c.seed}};
}

MobilityTrainConfig mobility_cfg_from_json(const json& j) {
    MobilityTrainConfig c;
    c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.lr_final = j.at("lr_final").get<double>();
    c.polyak_tail = j.at("polyak_tail").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.lambda_mean = j.at("lambda_mean").get<double>();
    c.epsilon_floor = j.at("epsilon_floor").get<double>();
    c.pairs_per_lag = j.at("pairs_per_lag").get<std::size_t>();
    c.lags_per_batch = j.at("lags_per_batch").get<std::size_t>();
    c.batch_per_lag = j.at("batch_per_lag").get<std::size_t>();
    c.anchor_total = j.at("anchor_total").get<std::size_t>();
    c.anchor_batch = j.at("anchor_batch").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

json config_to_json(const RunConfig& cfg) {
    return json{
        {"kind", to_string(cfg.kind)},
        {"cir", {{"kappa", cfg.cir.kappa}, {"theta", cfg.cir.theta}, {"gamma", cfg.cir.gamma}}},
        {"affine2d",
         {{"omega", cfg.affine2d.omega},
          {"b0", cfg.affine2d.b0},
          {"b1", cfg.affine2d.b1},
          {"b2", cfg.affine2d.b2},
          {"quartic_x", cfg.affine2d.quartic_x},
          {"cross", cfg.affine2d.cross},
          {"quartic_y", cfg.affine2d.quartic_y},
          {"quad_x", cfg.affine2d.quad_x},
          {"quad_y", cfg.affine2d.quad_y}}},
        {"ou", {{"dim", cfg.ou.dim}, {"kappa", cfg.ou.kappa}, {"gamma", cfg.ou.gamma}}},
        {"alphas", cfg.alphas},
        {"data_path", cfg.data_path},
        {"data_format", cfg.data_format},
        {"data", data_to_json(cfg.data)},
        {"schedule", {{"sigma_min", cfg.schedule.sigma_min}, {"sigma_max", cfg.schedule.sigma_max}}},
        {"stationary_score", score_cfg_to_json(cfg.stationary_score)},
        {"joint_score", score_cfg_to_json(cfg.joint_score)},
        {"lags", cfg.lags},
        {"mobility", mobility_cfg_to_json(cfg.mobility)},
        {"rom_sim", data_to_json(cfg.rom_sim)},
        {"out_dir", cfg.out_dir},
        {"seed", cfg.seed},
        {"threads", cfg.threads}};
}

RunConfig config_from_json(const json& j) {
    RunConfig cfg;
    cfg.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    const auto& c = j.at("cir");
    cfg.cir = CirParams{c.at("kappa").get<double>(), c.at("theta").get<double>(),
                        c.at("gamma").get<double>()};
    const auto& a = j.at("affine2d");
    cfg.affine2d.omega = a.at("omega").get<double>();
    cfg.affine2d.b0 = a.at("b0").get<std::array<double, 4>>();
    cfg.affine2d.b1 = a.at("b1").get<std::array<double, 4>>();
    cfg.affine2d.b2 = a.at("b2").get<std::array<double, 4>>();
    cfg.affine2d.quartic_x = a.at("quartic_x").get<double>();
    cfg.affine2d.cross = a.at("cross").get<double>();
    cfg.affine2d.quartic_y = a.at("quartic_y").get<double>();
    cfg.affine2d.quad_x = a.at("quad_x").get<double>();
    cfg.affine2d.quad_y = a.at("quad_y").get<double>();
    const auto& o = j.at("ou");
    cfg.ou = OuParams{o.at("dim").get<std::size_t>(), o.at("kappa").get<double>(),
                      o.at("gamma").get<double>()};
    cfg.alphas = j.at("alphas").get<std::vector<double>>();
    cfg.data_path = j.at("data_path").get<std::string>();
    cfg.data_format = j.at("data_format").get<std::string>();
    cfg.data = data_from_json(j.at("data"));
    cfg.schedule = NoiseSchedule{j.at("schedule").at("sigma_min").get<double>(),
                                 j.at("schedule").at("sigma_max").get<double>()};
    cfg.stationary_score = score_cfg_from_json(j.at("stationary_score"));
    cfg.joint_score = score_cfg_from_json(j.at("joint_score"));
    cfg.lags = j.at("lags").get<std::vector<double>>();
    cfg.mobility = mobility_cfg_from_json(j.at("mobility"));
    cfg.rom_sim = data_from_json(j.at("rom_sim"));
    cfg.out_dir = j.at("out_dir").get<std::string>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.threads = j.at("threads").get<std::size_t>();
    return cfg;
}

std::vector<double> ten_lags() {
    std::vector<double> lags;
    for (int i = 1; i <= 10; ++i) lags.push_back(0.1 * i);
    return lags;
}

}  // namespace

RunConfig paper_affine2d_preset() {
    RunConfig cfg;
    cfg.kind = ExperimentKind::affine2d;
    cfg.data = paper_data_preset();
    cfg.schedule = NoiseSchedule{0.05, 0.05};
    cfg.stationary_score.hidden = {128, 64};
    cfg.stationary_score.epochs = 250;
    cfg.stationary_score.lr = 3e-4;
    cfg.stationary_score.samples_per_epoch = 65536;
    cfg.stationary_score.seed = 11;
    cfg.joint_score.hidden = {256, 128};
    cfg.joint_score.epochs = 250;
    cfg.joint_score.lr = 3e-4;
    cfg.joint_score.pairs_per_lag = 32768;
    cfg.joint_score.lags_per_batch = 4;
    cfg.joint_score.seed = 13;
    cfg.lags = default_lag_grid();
    cfg.mobility.hidden = {128, 128};
    cfg.mobility.epochs = 250;
    cfg.mobility.lr = 3e-4;
    cfg.mobility.weight_decay = 1e-6;
    cfg.mobility.lambda_mean = 1.0;
    cfg.mobility.pairs_per_lag = 32768;
    cfg.mobility.lags_per_batch = 4;
    cfg.mobility.batch_per_lag = 1024;
    cfg.mobility.anchor_total = 32768;
    cfg.mobility.anchor_batch = 1024;
    cfg.mobility.seed = 17;
    cfg.rom_sim = cfg.data;
    cfg.rom_sim.seed = 23;
    cfg.out_dir = "out";
    cfg.seed = 1;
    return cfg;
}

RunConfig desk_affine2d_preset() {
    RunConfig cfg = paper_affine2d_preset();
    cfg.data.n_traj = 8;
    cfg.data.horizon = 500.0;
    cfg.stationary_score.epochs = 100;
    cfg.stationary_score.lr = 1e-2;
    cfg.stationary_score.lr_final = 1e-4;
    cfg.joint_score.epochs = 100;
    cfg.joint_score.lr = 3e-3;
    cfg.joint_score.lr_final = 1e-4;
    cfg.joint_score.pairs_per_lag = 8192;
    cfg.mobility.epochs = 100;
    cfg.mobility.lr = 3e-3;
    cfg.mobility.lr_final = 1e-4;
    cfg.mobility.pairs_per_lag = 8192;
    cfg.rom_sim.n_traj = 8;
    cfg.rom_sim.horizon = 300.0;
    return cfg;
}

RunConfig cir_analytic_preset() {
    RunConfig cfg;
    cfg.kind = ExperimentKind::cir_analytic;
    cfg.cir = CirParams{1.0, 1.0, 0.5};
    cfg.alphas = {2.0, 3.0};
    cfg.lags = ten_lags();
    return cfg;
}

RunConfig cir_mc_preset() {
    RunConfig cfg;
    cfg.kind = ExperimentKind::cir_mc;
    cfg.cir = CirParams{1.0, 1.0, 0.5};
    cfg.alphas = {2.0};
    cfg.lags = ten_lags();
    cfg.data.n_traj = 16;
    cfg.data.horizon = 700.0;
    cfg.data.seed = 5;
    return cfg;
}

RunConfig ou_oracle_preset() {
    RunConfig cfg;
    cfg.kind = ExperimentKind::ou_oracle;
    cfg.ou = OuParams{1, 1.0, 1.0};
    cfg.lags = default_lag_grid();
    cfg.data.n_traj = 8;
    cfg.data.horizon = 800.0;
    cfg.data.seed = 7;
    return cfg;
}

RunConfig preset_by_name(const std::string& name) {
    if (name == "paper-affine2d") return paper_affine2d_preset();
    if (name == "desk-affine2d") return desk_affine2d_preset();
    if (name == "cir-analytic") return cir_analytic_preset();
    if (name == "cir-mc") return cir_mc_preset();
    if (name == "ou-oracle") return ou_oracle_preset();
    throw std::invalid_argument("unknown preset: " + name);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open config: " + path);
    json j;
    try {
        is >> j;
        return config_from_json(j);
    } catch (const json::exception& e) {
        throw std::invalid_argument("bad config " + path + ": " + e.what());
    }
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << config_to_json(cfg).dump(2) << "\n";
}

std::string file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot hash missing file: " + path);
    std::uint64_t h = 0xCBF29CE484222325ull;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof buf);
        const auto n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

namespace {

std::string string_hash(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    return std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(now).count());
}

}  // namespace

const StageRecord* RunManifest::find(const std::string& stage) const {
    for (const auto& s : stages)
        if (s.name == stage) return &s;
    return nullptr;
}

void save_manifest(const RunManifest& manifest, const std::string& path) {
    json stages = json::array();
    for (const auto& s : manifest.stages) {
        json outputs = json::array();
        for (const auto& [p, h] : s.outputs) outputs.push_back({{"path", p}, {"hash", h}});
        stages.push_back({{"name", s.name},
                          {"config_hash", s.config_hash},
                          {"outputs", outputs},
                          {"seconds", s.seconds},
                          {"status", s.status}});
    }
    const json j{{"kind", "run_manifest"},
                 {"version", manifest.version},
                 {"written_at_ms", timestamp()},
                 {"seed", manifest.seed},
                 {"config", json::parse(manifest.config_snapshot)},
                 {"stages", stages}};
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    json j;
    is >> j;
    RunManifest m;
    m.version = j.at("version").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_snapshot = j.at("config").dump();
    for (const auto& s : j.at("stages")) {
        StageRecord r;
        r.name = s.at("name").get<std::string>();
        r.config_hash = s.at("config_hash").get<std::string>();
        for (const auto& o : s.at("outputs"))
            r.outputs.emplace_back(o.at("path").get<std::string>(), o.at("hash").get<std::string>());
        r.seconds = s.at("seconds").get<double>();
        r.status = s.at("status").get<std::string>();
        m.stages.push_back(std::move(r));
    }
    return m;
}

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.threads > 0) set_num_threads(cfg_.threads);
    fs::create_directories(cfg_.out_dir);
    for (const char* sub : {"data", "scores", "curves", "mobility", "rom", "report"})
        fs::create_directories(fs::path(cfg_.out_dir) / sub);
    manifest_.version = "langcal 0.1.0";
    manifest_.seed = cfg_.seed;
    manifest_.config_snapshot = config_to_json(cfg_).dump();
    const auto manifest_path = path("manifest.json");
    if (fs::exists(manifest_path)) {
        const auto existing = load_manifest(manifest_path);
        if (existing.config_snapshot == manifest_.config_snapshot) manifest_ = existing;
    }
}

std::string Pipeline::path(const std::string& rel) const {
    return (fs::path(cfg_.out_dir) / rel).string();
}

bool Pipeline::stage_done(const std::string& name, const std::string& config_hash) const {
    const auto* record = manifest_.find(name);
    if (record == nullptr || record->config_hash != config_hash || record->status != "done")
        return false;
    for (const auto& [p, h] : record->outputs) {
        if (!fs::exists(p)) return false;
        if (file_hash(p) != h) return false;
    }
    return true;
}

void Pipeline::record_stage(const std::string& name, const std::string& config_hash,
                            const std::vector<std::string>& outputs, double seconds) {
    StageRecord record;
    record.name = name;
    record.config_hash = config_hash;
    for (const auto& p : outputs) record.outputs.emplace_back(p, file_hash(p));
    record.seconds = seconds;
    record.status = "done";
    std::erase_if(manifest_.stages, [&](const StageRecord& s) { return s.name == name; });
    manifest_.stages.push_back(std::move(record));
    save_manifest(manifest_, path("manifest.json"));
}

ObservableLibrary Pipeline::library() const {
    switch (cfg_.kind) {
        case ExperimentKind::affine2d:
            return affine2d_observable_library();
        case ExperimentKind::cir_mc:
        case ExperimentKind::cir_analytic: {
            std::vector<unsigned> powers;
            for (double a : cfg_.alphas) powers.push_back(static_cast<unsigned>(std::llround(a)));
            return power_observable_library(powers);
        }
        case ExperimentKind::ou_oracle:
            return power_observable_library({2});
        case ExperimentKind::custom_data: {
            const auto ens = read_ensemble_binary(path("data/reference.traj"));
            if (ens.dim == 1) return power_observable_library({2, 3});
            if (ens.dim == 2) return affine2d_observable_library();
            throw std::runtime_error("custom-data: only 1D and 2D observable libraries are built in");
        }
    }
    throw std::logic_error("unreachable");
}

TrajectoryEnsemble Pipeline::load_reference() {
    return read_ensemble_binary(path("data/reference.traj"));
}

void Pipeline::generate() {
    const auto hash = string_hash(manifest_.config_snapshot + ":generate");
    const auto out = path("data/reference.traj");
    if (stage_done("generate", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    TrajectoryEnsemble ens;
    if (cfg_.kind == ExperimentKind::custom_data) {
        ens = ingest_external(cfg_.data_path, cfg_.data_format);
    } else {
        SystemParams params;
        switch (cfg_.kind) {
            case ExperimentKind::cir_mc: params = cfg_.cir; break;
            case ExperimentKind::affine2d: params = cfg_.affine2d; break;
            case ExperimentKind::ou_oracle: params = cfg_.ou; break;
            default:
                throw std::runtime_error("generate: nothing to generate for kind " +
                                         to_string(cfg_.kind));
        }
        ens = generate_reference_dataset(params, cfg_.data);
    }
    write_ensemble_binary(ens, out);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("generate", hash, {out}, seconds);
}

void Pipeline::train_scores() {
    const auto hash = string_hash(manifest_.config_snapshot + ":train-scores");
    const std::vector<std::string> outs = {path("scores/stationary.ckpt"),
                                           path("scores/stationary.json"),
                                           path("scores/joint.ckpt"), path("scores/joint.json")};
    if (stage_done("train-scores", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const auto ens = load_reference();
    const auto stationary = train_stationary_score(ens, cfg_.schedule, cfg_.stationary_score);
    save_stationary_score(stationary, path("scores/stationary"));
    const auto pairs = extract_lagged_pairs(ens, cfg_.lags);
    const auto joint =
        train_joint_score(pairs, cfg_.schedule, cfg_.joint_score, stationary.transform);
    save_joint_score(joint, path("scores/joint"));
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("train-scores", hash, outs, seconds);
}

void Pipeline::correlations() {
    const auto hash = string_hash(manifest_.config_snapshot + ":correlations");
    const std::vector<std::string> outs = {path("curves/curves.csv"), path("curves/phi.json")};
    if (stage_done("correlations", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const auto ens = load_reference();
    const auto lib = library();
    auto curves = empirical_correlation(ens, lib, cfg_.lags);
    derivative_curves(curves);
    write_curves_csv(curves, path("curves/curves.csv"));
    const auto phi = estimate_phi(curves);
    const json j{{"kind", "phi_estimate"},
                 {"dim", phi.phi.rows},
                 {"phi", phi.phi.data},
                 {"sym_eigenvalues", phi.sym_eigenvalues},
                 {"lag_grid", phi.lag_grid}};
    std::ofstream os(path("curves/phi.json"));
    os << j.dump(2) << "\n";
    os.close();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("correlations", hash, outs, seconds);
}

void Pipeline::fit_mobility() {
    const auto hash = string_hash(manifest_.config_snapshot + ":fit-mobility");
    const std::vector<std::string> outs = {path("mobility/mobility.ckpt"),
                                           path("mobility/mobility.json"),
                                           path("mobility/loss_history.csv")};
    if (stage_done("fit-mobility", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const auto ens = load_reference();
    const auto lib = library();

    auto curves = empirical_correlation(ens, lib, cfg_.lags);
    derivative_curves(curves);
    json phi_json;
    {
        std::ifstream is(path("curves/phi.json"));
        if (!is) throw std::runtime_error("fit-mobility: run the correlations stage first");
        is >> phi_json;
    }
    Matrix phi(phi_json.at("dim").get<std::size_t>(), phi_json.at("dim").get<std::size_t>());
    phi.data = phi_json.at("phi").get<std::vector<double>>();

    const auto stationary = load_stationary_score(path("scores/stationary"));
    const auto joint = load_joint_score(path("scores/joint"));

    const auto targets = residual_targets(curves, phi, lib, stationary, ens);
    const auto pairs = extract_lagged_pairs(ens, cfg_.lags);
    const auto data =
        sample_training_pairs(pairs, joint, stationary, cfg_.mobility.pairs_per_lag,
                              cfg_.seed ^ 0x6A09E667F3BCC908ull);
    const auto anchors = ensemble_samples(ens);
    const auto model = train_mobility(targets, data, lib, phi, stationary.transform, anchors,
                                      cfg_.mobility);
    save_mobility(model, path("mobility/mobility"));
    {
        std::ofstream os(path("mobility/loss_history.csv"));
        os << "epoch,residual_loss,mean_penalty\n";
        for (std::size_t e = 0; e < model.residual_loss_history.size(); ++e)
            os << e << ',' << model.residual_loss_history[e] << ','
               << model.mean_penalty_history[e] << "\n";
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("fit-mobility", hash, outs, seconds);
}

void Pipeline::simulate_roms() {
    const auto hash = string_hash(manifest_.config_snapshot + ":simulate-rom");
    const std::vector<std::string> outs = {path("rom/learned.traj"), path("rom/baseline.traj")};
    if (stage_done("simulate-rom", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const auto stationary = load_stationary_score(path("scores/stationary"));
    const auto model = load_mobility(path("mobility/mobility"));
    const auto learned = simulate_rom(stationary, &model, model.phi, cfg_.rom_sim);
    write_ensemble_binary(learned, path("rom/learned.traj"));
    DataConfig baseline_cfg = cfg_.rom_sim;
    baseline_cfg.seed = cfg_.rom_sim.seed + 1;
    const auto baseline = simulate_rom(stationary, nullptr, model.phi, baseline_cfg);
    write_ensemble_binary(baseline, path("rom/baseline.traj"));
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("simulate-rom", hash, outs, seconds);
}

void Pipeline::validate_stage() {
    const auto hash = string_hash(manifest_.config_snapshot + ":validate");
    const auto t0 = std::chrono::steady_clock::now();

    if (cfg_.kind == ExperimentKind::ou_oracle) {
        // central-identity check: operator with the exact constant mobility
        // against the spline-estimated coordinate correlation derivative
        const std::vector<std::string> outs = {path("report/ou_identity.json")};
        if (stage_done("validate", hash)) return;
        const auto ens = load_reference();
        ObservableLibrary lib;
        lib.observables.push_back(coordinate_observable(1));
        lib.channels.emplace_back(0, 0);
        auto curves = empirical_correlation(ens, lib, cfg_.lags);
        derivative_curves(curves);
        const double kappa = cfg_.ou.kappa, gamma = cfg_.ou.gamma;
        const ConditionalScoreFn cond = [kappa, gamma](std::span<const double> x0,
                                                       std::span<const double> xt, double t,
                                                       std::span<double> out) {
            const double z = std::exp(-kappa * t);
            const double var = (gamma / kappa) * (1.0 - z * z);
            out[0] = z * (xt[0] - z * x0[0]) / var;
        };
        const auto mobility = [gamma](std::span<const double>, Matrix& m) {
            if (m.rows != 1) m.resize(1, 1);
            m(0, 0) = gamma;
        };
        const auto sets = extract_lagged_pairs(ens, cfg_.lags);
        json rows = json::array();
        double max_rel = 0.0;
        for (std::size_t li = 0; li < sets.size(); ++li) {
            const double tau = sets[li].lag();
            const double rhs = apply_operator(mobility, sets[li], cond, lib.observables[0],
                                              lib.observables[0])(0, 0);
            const double lhs = curves.channels[0].cdot[li](0, 0);
            const double rel = std::fabs(rhs - lhs) / std::fabs(lhs);
            if (tau >= 0.1 - 1e-9 && tau <= 1.0 + 1e-9) max_rel = std::max(max_rel, rel);
            rows.push_back({{"tau", tau}, {"cdot_spline", lhs}, {"operator_rhs", rhs}, {"rel", rel}});
        }
        const json j{{"kind", "ou_identity_report"},
                     {"max_rel_deviation_on_unit_window", max_rel},
                     {"rows", rows}};
        std::ofstream os(outs[0]);
        os << j.dump(2) << "\n";
        os.close();
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        record_stage("validate", hash, outs, seconds);
        return;
    }

    const std::vector<std::string> outs = {path("report/validation.json"),
                                           path("report/marginals.csv"),
                                           path("report/correlations.csv")};
    if (stage_done("validate", hash)) return;
    const auto reference = load_reference();
    const auto learned = read_ensemble_binary(path("rom/learned.traj"));
    const auto baseline = read_ensemble_binary(path("rom/baseline.traj"));
    const auto lib = library();
    const std::vector<std::pair<std::string, const TrajectoryEnsemble*>> models = {
        {"rom", &learned}, {"baseline", &baseline}};
    const auto report = validate(reference, models, lib, cfg_.lags);
    write_validation_report(report, outs[0]);
    write_marginals_csv(reference, models, outs[1]);
    write_correlation_comparison_csv(reference, models, lib, cfg_.lags, outs[2]);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("validate", hash, outs, seconds);
}

void Pipeline::cir_analytic_stage() {
    const auto hash = string_hash(manifest_.config_snapshot + ":cir-analytic");
    const std::vector<std::string> outs = {path("report/cir_benchmark.json")};
    if (stage_done("cir-analytic", hash)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const CirClosedForms cf(cfg_.cir);
    CirBenchmarkReport report;
    report.params = cfg_.cir;
    report.alphas = cfg_.alphas;
    report.t_grid = cfg_.lags;
    report.analytic = solve_affine_inverse_analytic(cf, cfg_.alphas, cfg_.lags);
    if (cfg_.kind == ExperimentKind::cir_mc)
        report.monte_carlo = solve_affine_inverse_mc(cf, load_reference(), cfg_.alphas, cfg_.lags);
    write_cir_report(report, outs[0]);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_stage("cir-analytic", hash, outs, seconds);
}

void Pipeline::run_all() {
    switch (cfg_.kind) {
        case ExperimentKind::cir_analytic:
            cir_analytic_stage();
            return;
        case ExperimentKind::cir_mc:
            generate();
            cir_analytic_stage();
            return;
        case ExperimentKind::ou_oracle:
            generate();
            validate_stage();
            return;
        case ExperimentKind::affine2d:
        case ExperimentKind::custom_data:
            generate();
            train_scores();
            correlations();
            fit_mobility();
            simulate_roms();
            validate_stage();
            return;
    }
}

namespace {

TrajectoryEnsemble ingest_csv(const std::string& file) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error("cannot open: " + file);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty csv: " + file);
    std::size_t dim = 0;
    {
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() < 3 || fields[0] != "traj_id" || fields[1] != "t")
            throw std::runtime_error("csv header must be traj_id,t,x_1..x_D: " + file);
        dim = fields.size() - 2;
    }
    std::map<long, std::vector<double>> times;
    std::map<long, std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<double> values;
        long traj = -1;
        std::size_t col = 0;
        while (std::getline(ss, field, ',')) {
            if (col == 0)
                traj = std::stol(field);
            else
                values.push_back(std::stod(field));
            ++col;
        }
        if (values.size() != dim + 1)
            throw std::runtime_error("csv row " + std::to_string(line_no) + ": wrong column count");
        for (double v : values)
            if (!std::isfinite(v))
                throw std::runtime_error("csv row " + std::to_string(line_no) +
                                         ": non-finite entry");
        times[traj].push_back(values[0]);
        for (std::size_t d = 0; d < dim; ++d) rows[traj].push_back(values[1 + d]);
    }
    if (times.empty()) throw std::runtime_error("csv has no data rows: " + file);

    double interval = 0.0;
    TrajectoryEnsemble ens;
    ens.dim = dim;
    ens.save_stride = 1;
    for (auto& [traj, ts] : times) {
        if (ts.size() < 2)
            throw std::runtime_error("trajectory " + std::to_string(traj) + ": fewer than 2 rows");
        const double dt = ts[1] - ts[0];
        for (std::size_t k = 1; k < ts.size(); ++k)
            if (std::fabs((ts[k] - ts[k - 1]) - dt) > 1e-9 * std::max(1.0, std::fabs(dt)))
                throw std::runtime_error("trajectory " + std::to_string(traj) +
                                         ": non-uniform sampling grid");
        if (interval == 0.0)
            interval = dt;
        else if (std::fabs(interval - dt) > 1e-9)
            throw std::runtime_error("trajectories disagree on the sampling interval");
        ens.states.push_back(std::move(rows[traj]));
    }
    ens.dt_integration = interval;
    return ens;
}

}  // namespace

TrajectoryEnsemble ingest_external(const std::string& path, const std::string& format) {
    TrajectoryEnsemble ens;
    if (format == "csv") {
        ens = ingest_csv(path);
    } else if (format == "columnar-binary") {
        ens = read_ensemble_binary(path);
        for (std::size_t t = 0; t < ens.n_traj(); ++t)
            for (double v : ens.states[t])
                if (!std::isfinite(v))
                    throw std::runtime_error("trajectory " + std::to_string(t) +
                                             ": non-finite entry");
    } else {
        throw std::invalid_argument("ingest: unknown format " + format +
                                    " (expected csv or columnar-binary)");
    }
    return ens;
}

std::vector<CoordinateSummary> ensemble_summary(const TrajectoryEnsemble& ens) {
    std::vector<CoordinateSummary> summary(ens.dim);
    std::vector<std::size_t> counts(ens.dim, 0);
    for (std::size_t d = 0; d < ens.dim; ++d) {
        summary[d].min = 1e300;
        summary[d].max = -1e300;
    }
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            const auto x = ens.state(t, k);
            for (std::size_t d = 0; d < ens.dim; ++d) {
                summary[d].min = std::min(summary[d].min, x[d]);
                summary[d].max = std::max(summary[d].max, x[d]);
                summary[d].mean += x[d];
                ++counts[d];
            }
        }
    for (std::size_t d = 0; d < ens.dim; ++d) summary[d].mean /= static_cast<double>(counts[d]);
    for (std::size_t t = 0; t < ens.n_traj(); ++t)
        for (std::size_t k = 0; k < ens.n_samples(t); ++k) {
            const auto x = ens.state(t, k);
            for (std::size_t d = 0; d < ens.dim; ++d) {
                const double c = x[d] - summary[d].mean;
                summary[d].stddev += c * c;
            }
        }
    for (std::size_t d = 0; d < ens.dim; ++d)
        summary[d].stddev = std::sqrt(summary[d].stddev / static_cast<double>(counts[d]));
    return summary;
}

}  // namespace langcal
