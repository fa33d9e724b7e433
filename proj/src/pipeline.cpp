#include "rbpet/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>

#include "rbpet/idif.hpp"
#include "rbpet/kinetics.hpp"
#include "rbpet/rng.hpp"
#include "rbpet/volume_io.hpp"

namespace rbpet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- configuration serialization -------------------------------------------

json to_json(const KineticParams& p) { return json{{"k1", p.k1}, {"k2", p.k2}, {"vb", p.vb}}; }

KineticParams kinetic_from_json(const json& j) {
    return {j.at("k1").get<double>(), j.at("k2").get<double>(), j.at("vb").get<double>()};
}

json to_json(const PhantomSpec& s) {
    return json{{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
                {"voxel_mm", {s.voxel.dx, s.voxel.dy, s.voxel.dz}},
                {"cavity_semi_axes_mm", {s.cavity_rx_mm, s.cavity_ry_mm, s.cavity_rz_mm}},
                {"shell_thickness_mm", s.shell_thickness_mm},
                {"myocardium", to_json(s.myocardium)},
                {"background", to_json(s.background)},
                {"input",
                 {{"amplitude", s.input.amplitude},
                  {"alpha", s.input.alpha},
                  {"beta_s", s.input.beta_s}}},
                {"seed", s.seed}};
}

PhantomSpec phantom_from_json(const json& j) {
    PhantomSpec s;
    auto d = j.at("dims");
    s.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    auto v = j.at("voxel_mm");
    s.voxel = {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
    auto c = j.at("cavity_semi_axes_mm");
    s.cavity_rx_mm = c[0].get<double>();
    s.cavity_ry_mm = c[1].get<double>();
    s.cavity_rz_mm = c[2].get<double>();
    s.shell_thickness_mm = j.at("shell_thickness_mm").get<double>();
    s.myocardium = kinetic_from_json(j.at("myocardium"));
    s.background = kinetic_from_json(j.at("background"));
    const auto& in = j.at("input");
    s.input = {in.at("amplitude").get<double>(), in.at("alpha").get<double>(),
               in.at("beta_s").get<double>()};
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

json to_json(const TrainConfig& t) {
    return json{{"epochs", t.epochs},
                {"patch", {t.patch.nx, t.patch.ny, t.patch.nz}},
                {"learning_rate", t.learning_rate},
                {"lr_decay", t.lr_decay},
                {"lr_gamma", t.lr_gamma},
                {"lambda_a", t.lambda_a},
                {"lambda_b", t.lambda_b},
                {"alpha", t.alpha},
                {"m_passes", t.m_passes},
                {"stage", t.stage}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    t.epochs = j.at("epochs").get<int>();
    auto p = j.at("patch");
    t.patch = {p[0].get<int>(), p[1].get<int>(), p[2].get<int>()};
    t.learning_rate = j.at("learning_rate").get<double>();
    t.lr_decay = j.at("lr_decay").get<double>();
    t.lr_gamma = j.at("lr_gamma").get<double>();
    t.lambda_a = j.at("lambda_a").get<double>();
    t.lambda_b = j.at("lambda_b").get<double>();
    t.alpha = j.at("alpha").get<double>();
    t.m_passes = j.at("m_passes").get<int>();
    t.stage = j.at("stage").get<std::string>();
    return t;
}

json to_json(const PipelineConfig& c) {
    return json{{"out_dir", c.out_dir.string()},
                {"seed", c.seed},
                {"threads", c.threads},
                {"kernel",
                 {{"n_positrons", c.kernel.n_positrons},
                  {"dims", {c.kernel.dims.nx, c.kernel.dims.ny, c.kernel.dims.nz}},
                  {"tissue", c.kernel.tissue}}},
                {"phantom",
                 {{"rest", to_json(c.phantom.rest)},
                  {"stress", to_json(c.phantom.stress)},
                  {"noise_scale", c.phantom.noise_scale}}},
                {"train",
                 {{"denoise", to_json(c.train.denoise)},
                  {"prc", to_json(c.train.prc)},
                  {"static_frames", c.train.static_frames}}},
                {"rl_iterations", c.rl_iterations},
                {"report_regions", c.report_regions}};
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    c.out_dir = j.at("out_dir").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.at("threads").get<int>();
    const auto& k = j.at("kernel");
    c.kernel.n_positrons = k.at("n_positrons").get<std::size_t>();
    auto kd = k.at("dims");
    c.kernel.dims = {kd[0].get<int>(), kd[1].get<int>(), kd[2].get<int>()};
    c.kernel.tissue = k.at("tissue").get<std::string>();
    const auto& ph = j.at("phantom");
    c.phantom.rest = phantom_from_json(ph.at("rest"));
    c.phantom.stress = phantom_from_json(ph.at("stress"));
    c.phantom.noise_scale = ph.at("noise_scale").get<double>();
    const auto& tr = j.at("train");
    c.train.denoise = train_from_json(tr.at("denoise"));
    c.train.prc = train_from_json(tr.at("prc"));
    c.train.static_frames = tr.at("static_frames").get<int>();
    c.rl_iterations = j.at("rl_iterations").get<int>();
    c.report_regions = j.at("report_regions").get<std::vector<std::string>>();
    c.validate();
    return c;
}

// --- artifact paths ---------------------------------------------------------

fs::path kernels_dir(const PipelineConfig& c) { return c.out_dir / "kernels"; }
fs::path phantom_dir(const PipelineConfig& c) { return c.out_dir / "phantom"; }
fs::path models_dir(const PipelineConfig& c) { return c.out_dir / "models"; }
fs::path derived_dir(const PipelineConfig& c) { return c.out_dir / "derived"; }
fs::path fits_dir(const PipelineConfig& c) { return c.out_dir / "fits"; }
fs::path report_dir(const PipelineConfig& c) { return c.out_dir / "report"; }

fs::path raw_twin(const fs::path& header) {
    fs::path p = header;
    p.replace_extension(".raw");
    return p;
}

void require_input(const std::string& stage, const fs::path& p) {
    if (!fs::exists(p)) throw StageError(stage, "missing input: " + p.string());
}

const std::vector<std::string> kConditions = {"rest", "stress"};
const std::vector<std::string> kVariants = {"input", "denoised", "denoised_prc"};

const PhantomSpec& spec_for(const PipelineConfig& c, const std::string& cond) {
    return cond == "rest" ? c.phantom.rest : c.phantom.stress;
}

fs::path series_path(const PipelineConfig& c, const std::string& variant,
                     const std::string& cond) {
    if (variant == "input") return phantom_dir(c) / (cond + "_degraded.json");
    return derived_dir(c) / (cond + "_" + variant + ".json");
}

RangeKernel load_kernel(const std::string& stage, const fs::path& p) {
    require_input(stage, p);
    return RangeKernel::normalized(load_volume(p));
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double safe_mbf(double k1) { return k1 > 0.0 ? mbf_from_k1(k1) : 0.0; }

// The tiny models and their step sizes operate on O(1) voxel values, so the
// pipeline trains and applies them in units normalized by the peak of the
// degraded rest series.
double series_peak(const DynamicSeries& s) {
    double peak = 0.0;
    for (const auto& vol : s.volumes)
        for (double v : vol.data) peak = std::max(peak, std::abs(v));
    return peak;
}

DynamicSeries scale_series(const DynamicSeries& s, double factor) {
    DynamicSeries out = s;
    for (auto& vol : out.volumes)
        for (double& v : vol.data) v *= factor;
    return out;
}

Volume3 scale_volume(const Volume3& v, double factor) {
    Volume3 out = v;
    for (double& x : out.data) x *= factor;
    return out;
}

double load_norm(const std::string& stage, const PipelineConfig& cfg) {
    const fs::path p = models_dir(cfg) / "normalization.json";
    require_input(stage, p);
    std::ifstream f(p);
    json j;
    f >> j;
    const double scale = j.at("activity_scale").get<double>();
    if (!(scale > 0.0)) throw StageError(stage, "invalid activity scale");
    return scale;
}

struct MeanSd {
    double mean = 0.0, sd = 0.0;
    std::size_t n = 0;
};

MeanSd mean_sd(const std::vector<double>& v) {
    MeanSd r;
    r.n = v.size();
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= double(v.size());
    for (double x : v) r.sd += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(r.sd / double(v.size()));
    return r;
}

}  // namespace

void PipelineConfig::validate() const {
    if (out_dir.empty()) throw std::invalid_argument("PipelineConfig: out_dir is empty");
    if (kernel.n_positrons == 0)
        throw std::invalid_argument("PipelineConfig: n_positrons must be positive");
    if (kernel.dims.nx % 2 == 0 || kernel.dims.ny % 2 == 0 || kernel.dims.nz % 2 == 0)
        throw std::invalid_argument("PipelineConfig: kernel dims must be odd");
    (void)tissue_by_name(kernel.tissue);  // throws on unknown tissue
    phantom.rest.validate();
    phantom.stress.validate();
    if (!(phantom.rest.dims == phantom.stress.dims) ||
        !(phantom.rest.voxel == phantom.stress.voxel))
        throw std::invalid_argument("PipelineConfig: rest/stress geometry must match");
    if (phantom.noise_scale < 0.0)
        throw std::invalid_argument("PipelineConfig: noise_scale must be nonnegative");
    if (train.static_frames <= 0)
        throw std::invalid_argument("PipelineConfig: static_frames must be positive");
    if (train.denoise.epochs <= 0 || train.prc.epochs <= 0)
        throw std::invalid_argument("PipelineConfig: epochs must be positive");
    if (rl_iterations <= 0)
        throw std::invalid_argument("PipelineConfig: rl_iterations must be positive");
    for (const auto& r : report_regions)
        if (r != "myocardium" && r != "background" && r != "cavity")
            throw std::invalid_argument("PipelineConfig: unknown report region: " + r);
}

PipelineConfig default_config() {
    PipelineConfig c;
    c.phantom.rest.myocardium = {0.56, 1.1, 0.25};
    c.phantom.rest.background = {0.15, 0.4, 0.05};
    c.phantom.stress = c.phantom.rest;
    c.phantom.stress.myocardium = {1.13, 2.0, 0.25};
    // blur-dominated regime: the range blur, not the frame noise, carries most
    // of the degradation, which is what the range-correction model targets
    c.phantom.noise_scale = 5.0;

    c.train.denoise.stage = "denoise";
    c.train.denoise.epochs = 60;
    c.train.denoise.patch = {32, 32, 8};
    c.train.denoise.learning_rate = 5e-5;
    c.train.denoise.lr_gamma = 0.98;

    c.train.prc.stage = "prc";
    c.train.prc.epochs = 300;
    c.train.prc.patch = {16, 16, 8};
    c.train.prc.learning_rate = 2e-5;
    c.train.prc.lr_gamma = 0.995;
    c.train.prc.lambda_b = 0.1;

    c.rl_iterations = 10;
    return c;
}

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path.string());
    json j;
    in >> j;
    return config_from_json(j);
}

void save_config(const PipelineConfig& cfg, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config: " + path.string());
    out << to_json(cfg).dump(2) << "\n";
}

// --- stages ------------------------------------------------------------------

std::vector<fs::path> stage_simulate_kernel(const PipelineConfig& cfg) {
    const std::string stage = "simulate-kernel";
    fs::create_directories(kernels_dir(cfg));
    const Tissue tissue = tissue_by_name(cfg.kernel.tissue);
    TransportConfig tcfg;
    tcfg.threads = cfg.threads;
    const VoxelSize voxel = cfg.phantom.rest.voxel;

    auto rb = simulate_positrons(isotope_rb82(), tissue, cfg.kernel.n_positrons,
                                 derive_seed(cfg.seed, 0x4B1), tcfg);
    auto f18 = simulate_positrons(isotope_f18(), tissue, cfg.kernel.n_positrons,
                                  derive_seed(cfg.seed, 0x4B2), tcfg);
    RangeKernel h_rb = build_kernel(rb, voxel, cfg.kernel.dims);
    RangeKernel h_f = build_kernel(f18, voxel, cfg.kernel.dims);

    const fs::path p_rb = kernels_dir(cfg) / "h_rb.json";
    const fs::path p_f = kernels_dir(cfg) / "h_f.json";
    store_volume(h_rb.vol, p_rb);
    store_volume(h_f.vol, p_f);
    return {p_rb, raw_twin(p_rb), p_f, raw_twin(p_f)};
}

std::vector<fs::path> stage_factorize(const PipelineConfig& cfg) {
    const std::string stage = "factorize";
    RangeKernel h_rb = load_kernel(stage, kernels_dir(cfg) / "h_rb.json");
    RangeKernel h_f = load_kernel(stage, kernels_dir(cfg) / "h_f.json");
    auto res = factorize_kernel(h_f, h_rb);
    const fs::path p = kernels_dir(cfg) / "h_f2rb.json";
    store_volume(res.kernel.vol, p);
    std::ofstream meta(kernels_dir(cfg) / "factorize.json");
    meta << json{{"mae", res.mae}, {"iterations", res.iterations}}.dump(2) << "\n";
    return {p, raw_twin(p), kernels_dir(cfg) / "factorize.json"};
}

std::vector<fs::path> stage_phantom(const PipelineConfig& cfg) {
    const std::string stage = "phantom";
    RangeKernel h_rb = load_kernel(stage, kernels_dir(cfg) / "h_rb.json");
    fs::create_directories(phantom_dir(cfg));
    auto sched = standard_rb82_schedule();
    std::vector<fs::path> artifacts;
    for (std::size_t ci = 0; ci < kConditions.size(); ++ci) {
        const std::string& cond = kConditions[ci];
        const PhantomSpec& spec = spec_for(cfg, cond);
        auto truth = make_phantom(spec, sched);
        NoiseModel nm{cfg.phantom.noise_scale, 75.0, 1.0};
        auto degraded = degrade(truth.series, h_rb, nm, derive_seed(cfg.seed, 0xA1 + ci));

        const fs::path p_truth = phantom_dir(cfg) / (cond + "_truth.json");
        const fs::path p_deg = phantom_dir(cfg) / (cond + "_degraded.json");
        const fs::path p_cb = phantom_dir(cfg) / (cond + "_cb.csv");
        store_series(truth.series, p_truth);
        store_series(degraded, p_deg);
        store_tac_csv(truth.cb, p_cb);
        artifacts.insert(artifacts.end(), {p_truth, raw_twin(p_truth), p_deg, raw_twin(p_deg), p_cb});
        const std::vector<std::pair<std::string, const Volume3*>> maps = {
            {"k1", &truth.params.k1}, {"k2", &truth.params.k2}, {"vb", &truth.params.vb}};
        for (const auto& [name, vol] : maps) {
            const fs::path p = phantom_dir(cfg) / (cond + "_truth_" + name + ".json");
            store_volume(*vol, p);
            artifacts.push_back(p);
            artifacts.push_back(raw_twin(p));
        }
    }
    return artifacts;
}

std::vector<fs::path> stage_train_denoise(const PipelineConfig& cfg) {
    const std::string stage = "train-denoise";
    require_input(stage, phantom_dir(cfg) / "rest_degraded.json");
    auto series = load_series(phantom_dir(cfg) / "rest_degraded.json");
    const double peak = series_peak(series);
    if (!(peak > 0.0)) throw StageError(stage, "degraded series is all zero");
    const double scale = 1.0 / peak;
    fs::create_directories(models_dir(cfg));
    const fs::path norm_path = models_dir(cfg) / "normalization.json";
    {
        std::ofstream f(norm_path);
        f << json{{"activity_scale", scale}}.dump(2) << "\n";
    }

    TrainConfig tcfg = cfg.train.denoise;
    tcfg.seed = derive_seed(cfg.seed, 0xDE);
    auto state = train_denoiser(scale_series(series, scale), tcfg);
    const fs::path ckpt = models_dir(cfg) / "denoiser.ckpt";
    save_checkpoint(state, ckpt);
    const fs::path log = models_dir(cfg) / "denoise_log.jsonl";
    std::ofstream out(log);
    for (std::size_t i = 0; i < state.log.size(); ++i)
        out << loss_report_jsonl(state.log[i], long(i)) << "\n";
    return {ckpt, fs::path(ckpt).replace_extension(".params"), log, norm_path};
}

std::vector<fs::path> stage_train_prc(const PipelineConfig& cfg) {
    const std::string stage = "train-prc";
    require_input(stage, models_dir(cfg) / "denoiser.ckpt");
    require_input(stage, phantom_dir(cfg) / "rest_degraded.json");
    require_input(stage, phantom_dir(cfg) / "rest_truth.json");
    RangeKernel h_rb = load_kernel(stage, kernels_dir(cfg) / "h_rb.json");
    RangeKernel h_f = load_kernel(stage, kernels_dir(cfg) / "h_f.json");
    RangeKernel h_f2rb = load_kernel(stage, kernels_dir(cfg) / "h_f2rb.json");

    auto den = load_checkpoint(models_dir(cfg) / "denoiser.ckpt");
    auto degraded = load_series(phantom_dir(cfg) / "rest_degraded.json");
    auto truth = load_series(phantom_dir(cfg) / "rest_truth.json");

    // Statics: denoised late frames. FDG-like targets: sharp late truth
    // frames blurred with the F-18 kernel.
    const double scale = load_norm(stage, cfg);
    const std::size_t n = truth.nframes();
    const std::size_t take = std::min<std::size_t>(std::size_t(cfg.train.static_frames), n);
    std::vector<Volume3> statics, fdg_like;
    for (std::size_t f = n - take; f < n; ++f) {
        statics.push_back(apply_model(den.student, scale_volume(degraded.volumes[f], scale)));
        fdg_like.push_back(convolve3(scale_volume(truth.volumes[f], scale), h_f));
    }

    TrainConfig tcfg = cfg.train.prc;
    tcfg.seed = derive_seed(cfg.seed, 0xBC);
    auto state = train_prc(statics, h_rb, h_f2rb, fdg_like, tcfg);
    const fs::path ckpt = models_dir(cfg) / "prc.ckpt";
    save_checkpoint(state, ckpt);
    const fs::path log = models_dir(cfg) / "prc_log.jsonl";
    std::ofstream out(log);
    for (std::size_t i = 0; i < state.log.size(); ++i)
        out << loss_report_jsonl(state.log[i], long(i)) << "\n";
    return {ckpt, fs::path(ckpt).replace_extension(".params"), log};
}

std::vector<fs::path> stage_apply(const PipelineConfig& cfg) {
    const std::string stage = "apply";
    require_input(stage, models_dir(cfg) / "denoiser.ckpt");
    require_input(stage, models_dir(cfg) / "prc.ckpt");
    auto den = load_checkpoint(models_dir(cfg) / "denoiser.ckpt");
    auto prc = load_checkpoint(models_dir(cfg) / "prc.ckpt");
    const double scale = load_norm(stage, cfg);
    fs::create_directories(derived_dir(cfg));
    std::vector<fs::path> artifacts;
    for (const auto& cond : kConditions) {
        require_input(stage, phantom_dir(cfg) / (cond + "_degraded.json"));
        auto degraded = load_series(phantom_dir(cfg) / (cond + "_degraded.json"));
        std::vector<Volume3> den_only, both;
        for (const auto& frame : degraded.volumes) {
            Volume3 d = apply_model(den.student, scale_volume(frame, scale));
            both.push_back(scale_volume(apply_model(prc.student, d), 1.0 / scale));
            den_only.push_back(scale_volume(d, 1.0 / scale));
        }
        DynamicSeries denoised(degraded.schedule, std::move(den_only));
        DynamicSeries corrected(degraded.schedule, std::move(both));
        const fs::path p_d = derived_dir(cfg) / (cond + "_denoised.json");
        const fs::path p_p = derived_dir(cfg) / (cond + "_denoised_prc.json");
        store_series(denoised, p_d);
        store_series(corrected, p_p);
        artifacts.insert(artifacts.end(), {p_d, raw_twin(p_d), p_p, raw_twin(p_p)});
    }
    return artifacts;
}

std::vector<fs::path> stage_prc_rl(const PipelineConfig& cfg) {
    const std::string stage = "prc-rl";
    RangeKernel h_rb = load_kernel(stage, kernels_dir(cfg) / "h_rb.json");
    require_input(stage, derived_dir(cfg) / "rest_denoised.json");
    auto denoised = load_series(derived_dir(cfg) / "rest_denoised.json");
    std::vector<Volume3> out;
    for (const auto& frame : denoised.volumes)
        out.push_back(richardson_lucy(frame, h_rb, cfg.rl_iterations));
    const fs::path p = derived_dir(cfg) / "rest_denoised_rl.json";
    store_series(DynamicSeries(denoised.schedule, std::move(out)), p);
    return {p, raw_twin(p)};
}

std::vector<fs::path> stage_fit(const PipelineConfig& cfg) {
    const std::string stage = "fit";
    fs::create_directories(fits_dir(cfg));
    std::vector<fs::path> artifacts;
    for (const auto& cond : kConditions) {
        require_input(stage, phantom_dir(cfg) / (cond + "_cb.csv"));
        auto cb = load_tac_csv(phantom_dir(cfg) / (cond + "_cb.csv"));
        auto basis = build_basis(cb, default_k2_grid());
        for (const auto& variant : kVariants) {
            const fs::path sp = series_path(cfg, variant, cond);
            require_input(stage, sp);
            auto series = load_series(sp);
            auto fit = fit_parametric(series, basis, nullptr, cfg.threads);
            const std::vector<std::pair<std::string, const Volume3*>> maps = {
                {"k1", &fit.k1}, {"k2", &fit.k2}, {"vb", &fit.vb}, {"residual", &fit.residual}};
            for (const auto& [name, vol] : maps) {
                const fs::path p = fits_dir(cfg) / (variant + "_" + cond + "_" + name + ".json");
                store_volume(*vol, p);
                artifacts.push_back(p);
                artifacts.push_back(raw_twin(p));
            }
        }
    }
    return artifacts;
}

std::vector<fs::path> stage_idif_compare(const PipelineConfig& cfg) {
    const std::string stage = "idif-compare";
    json out;
    for (const auto& cond : kConditions) {
        require_input(stage, phantom_dir(cfg) / (cond + "_cb.csv"));
        auto aif = load_tac_csv(phantom_dir(cfg) / (cond + "_cb.csv"));
        auto cavity = region_mask(spec_for(cfg, cond), Region::Cavity, "cavity");
        for (const auto& variant : kVariants) {
            const fs::path sp = series_path(cfg, variant, cond);
            require_input(stage, sp);
            auto series = load_series(sp);
            auto idif = extract_voi_tac(series, cavity);
            auto cmp = compare(idif, aif);
            out[cond][variant] = {{"auc_pct", cmp.auc_pct_diff},
                                  {"peak_pct", cmp.peak_pct_diff},
                                  {"tail_pct", cmp.tail_pct_diff}};
        }
    }
    fs::create_directories(cfg.out_dir / "idif");
    const fs::path p = cfg.out_dir / "idif" / "idif_compare.json";
    std::ofstream f(p);
    f << out.dump(2) << "\n";
    return {p};
}

std::vector<fs::path> stage_report(const PipelineConfig& cfg) {
    const std::string stage = "report";
    fs::create_directories(report_dir(cfg));
    std::vector<fs::path> artifacts;

    // Regional parameter statistics per variant and condition.
    const fs::path p_stats = report_dir(cfg) / "regional_stats.csv";
    std::ofstream stats(p_stats);
    stats << "variant,condition,region,n,k1_mean,k1_sd,vb_mean,vb_sd,mbf_mean,mbf_sd\n";
    std::map<std::string, std::map<std::string, double>> regional_mbf;  // [variant][cond_region]
    std::vector<std::pair<Region, std::string>> regions;
    for (const auto& r : cfg.report_regions) {
        if (r == "myocardium") regions.emplace_back(Region::Myocardium, r);
        else if (r == "background") regions.emplace_back(Region::Background, r);
        else if (r == "cavity") regions.emplace_back(Region::Cavity, r);
        else throw StageError(stage, "unknown report region: " + r);
    }
    for (const auto& variant : kVariants) {
        for (const auto& cond : kConditions) {
            const fs::path pk1 = fits_dir(cfg) / (variant + "_" + cond + "_k1.json");
            const fs::path pvb = fits_dir(cfg) / (variant + "_" + cond + "_vb.json");
            require_input(stage, pk1);
            require_input(stage, pvb);
            auto k1 = load_volume(pk1);
            auto vb = load_volume(pvb);
            for (const auto& [region, rname] : regions) {
                auto mask = region_mask(spec_for(cfg, cond), region, rname);
                std::vector<double> k1s, vbs, mbfs;
                for (std::size_t i = 0; i < mask.mask.size(); ++i)
                    if (mask.mask[i]) {
                        k1s.push_back(k1.data[i]);
                        vbs.push_back(vb.data[i]);
                        mbfs.push_back(safe_mbf(k1.data[i]));
                    }
                auto mk1 = mean_sd(k1s), mvb = mean_sd(vbs), mmbf = mean_sd(mbfs);
                stats << variant << ',' << cond << ',' << rname << ',' << mk1.n << ','
                      << fmt(mk1.mean) << ',' << fmt(mk1.sd) << ',' << fmt(mvb.mean) << ','
                      << fmt(mvb.sd) << ',' << fmt(mmbf.mean) << ',' << fmt(mmbf.sd) << "\n";
                regional_mbf[variant][cond + "_" + rname] = mmbf.mean;
            }

            // K1*(1-Vb) display volume.
            Volume3 disp = k1;
            for (std::size_t i = 0; i < disp.data.size(); ++i)
                disp.data[i] = k1.data[i] * (1.0 - vb.data[i]);
            const fs::path pd = report_dir(cfg) / ("display_k1_1mvb_" + variant + "_" + cond + ".json");
            store_volume(disp, pd);
            artifacts.push_back(pd);
            artifacts.push_back(raw_twin(pd));
        }
    }
    stats.close();
    artifacts.push_back(p_stats);

    // Myocardial flow reserve per variant.
    const fs::path p_mfr = report_dir(cfg) / "mfr.csv";
    std::ofstream mfr_csv(p_mfr);
    mfr_csv << "variant,region,rest_mbf,stress_mbf,mfr\n";
    for (const auto& variant : kVariants) {
        if (!regional_mbf[variant].count("rest_myocardium")) continue;
        const double rest = regional_mbf[variant]["rest_myocardium"];
        const double stress = regional_mbf[variant]["stress_myocardium"];
        mfr_csv << variant << ",myocardium," << fmt(rest) << ',' << fmt(stress) << ','
                << fmt(mfr(stress, rest)) << "\n";
    }
    mfr_csv.close();
    artifacts.push_back(p_mfr);

    // IDIF metric table and plot-ready curve data (rest condition).
    require_input(stage, cfg.out_dir / "idif" / "idif_compare.json");
    json idif_json;
    {
        std::ifstream f(cfg.out_dir / "idif" / "idif_compare.json");
        f >> idif_json;
    }
    const fs::path p_idif = report_dir(cfg) / "idif.csv";
    std::ofstream idif_csv(p_idif);
    idif_csv << "variant,condition,auc_pct,peak_pct,tail_pct\n";
    for (const auto& cond : kConditions)
        for (const auto& variant : kVariants) {
            const auto& e = idif_json.at(cond).at(variant);
            idif_csv << variant << ',' << cond << ',' << fmt(e.at("auc_pct").get<double>()) << ','
                     << fmt(e.at("peak_pct").get<double>()) << ','
                     << fmt(e.at("tail_pct").get<double>()) << "\n";
        }
    idif_csv.close();
    artifacts.push_back(p_idif);

    const fs::path p_tac = report_dir(cfg) / "tac_curves.csv";
    {
        auto aif = load_tac_csv(phantom_dir(cfg) / "rest_cb.csv");
        auto cavity = region_mask(cfg.phantom.rest, Region::Cavity, "cavity");
        std::vector<TimeActivityCurve> idifs;
        for (const auto& variant : kVariants)
            idifs.push_back(extract_voi_tac(load_series(series_path(cfg, variant, "rest")), cavity));
        std::ofstream tac(p_tac);
        tac << "t_mid_s,cb_true,idif_input,idif_denoised,idif_denoised_prc\n";
        for (std::size_t f = 0; f < aif.size(); ++f) {
            tac << fmt(aif.schedule[f].mid()) << ',' << fmt(aif.values[f]);
            for (const auto& c : idifs) tac << ',' << fmt(c.values[f]);
            tac << "\n";
        }
    }
    artifacts.push_back(p_tac);
    return artifacts;
}

std::string run_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const fs::path cfg_path = cfg.out_dir / "config.json";
    save_config(cfg, cfg_path);

    std::vector<fs::path> artifacts{cfg_path};
    auto run_stage = [&](const char* name, auto&& fn) {
        try {
            auto out = fn(cfg);
            artifacts.insert(artifacts.end(), out.begin(), out.end());
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
    };
    run_stage("simulate-kernel", stage_simulate_kernel);
    run_stage("factorize", stage_factorize);
    run_stage("phantom", stage_phantom);
    run_stage("train-denoise", stage_train_denoise);
    run_stage("train-prc", stage_train_prc);
    run_stage("apply", stage_apply);
    run_stage("fit", stage_fit);
    run_stage("idif-compare", stage_idif_compare);
    run_stage("report", stage_report);

    json manifest;
    for (const auto& p : artifacts)
        manifest[fs::relative(p, cfg.out_dir).generic_string()] = sha256_file(p);
    const fs::path mp = cfg.out_dir / "manifest.json";
    {
        std::ofstream out(mp);
        out << manifest.dump(2) << "\n";
    }
    return sha256_file(mp);
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("sha256: cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        EVP_DigestUpdate(ctx, buf, std::size_t(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    static const char* k = "0123456789abcdef";
    for (unsigned int i = 0; i < len; ++i) {
        hex += k[digest[i] >> 4];
        hex += k[digest[i] & 0xF];
    }
    return hex;
}

std::string manifest_hash(const fs::path& out_dir) {
    return sha256_file(out_dir / "manifest.json");
}

}  // namespace rbpet
