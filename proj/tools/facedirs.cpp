/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: tools/facedirs.cpp
 *
 * Copyright 2026 The facedirs authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "facedirs/bundle.hpp"
#include "facedirs/metrics.hpp"
#include "facedirs/service.hpp"
#include "facedirs/toy_data.hpp"
#include "facedirs/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace facedirs;

namespace {

/// Exit codes.
constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_usage = 2; ///< missing model, unknown attribute, untrained model
constexpr int exit_image = 3; ///< unreadable image

class UsageError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

class ImageError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

ImageTensor load_image(const std::string& path)
{
    try
    {
        return read_png(path);
    } catch (const std::exception& e)
    {
        throw ImageError("cannot read image '" + path + "': " + e.what());
    }
}

ModelBundle open_bundle(const std::string& flag)
{
    return load_bundle(resolve_model_dir(flag));
}

void check_image_size(const ImageTensor& img, const ModelBundle& b, const std::string& path)
{
    const int n = b.backend.generator->image_size();
    if (img.channels != 3 || img.height != n || img.width != n)
    {
        throw ImageError("image '" + path + "' is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                         "; the model expects " + std::to_string(n) + "x" + std::to_string(n));
    }
}

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

bool parse_on_off(const std::string& v)
{
    if (v == "on")
        return true;
    if (v == "off")
        return false;
    throw UsageError("expected 'on' or 'off', got '" + v + "'");
}

std::vector<fs::path> list_pngs(const fs::path& dir)
{
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write '" + path.string() + "'");
    os << text;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags
{
    std::string model;
    std::string data;
    std::string phase = "synthetic";
    std::string config;
    std::string log;
    std::uint64_t init_seed = 7;
    TrainConfig cfg;
    int encoder_warm_start = 600;
};

/// Per-phase defaults for `--phase all`, calibrated on the toy backend.
TrainConfig pipeline_defaults(Phase p)
{
    TrainConfig c;
    c.phase = p;
    c.batch_size = 8;
    switch (p)
    {
    case Phase::synthetic: c.steps = 1000; break;
    case Phase::mixed: c.steps = 200; break;
    case Phase::paired: c.steps = 200; break;
    case Phase::joint: c.steps = 300; c.batch_size = 4; break;
    case Phase::fsr1:
    case Phase::fsr2:
        c.steps = 500;
        c.batch_size = 4;
        c.learning_rate = 1e-3;
        break;
    }
    return c;
}

/// Splits "phase.key = value" entries out of a config map.
std::map<std::string, std::string> scoped_keys(const std::map<std::string, std::string>& kv, const std::string& scope,
                                               bool global)
{
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : kv)
    {
        const auto dot = k.find('.');
        if (global && dot == std::string::npos)
            out[k] = v;
        else if (!global && dot != std::string::npos && k.substr(0, dot) == scope)
            out[k.substr(dot + 1)] = v;
    }
    return out;
}

PhaseResult run_phase(ModelBundle& b, const Dataset* data, const TrainConfig& cfg, LossLogger* logger)
{
    TrainingContext ctx = b.context(data, logger);
    PhaseResult r;
    switch (cfg.phase)
    {
    case Phase::synthetic: r = run_phase_synthetic(cfg, ctx); break;
    case Phase::mixed: r = run_phase_mixed(cfg, ctx); break;
    case Phase::paired: r = run_phase_paired(cfg, ctx); break;
    case Phase::joint: r = run_phase_joint(cfg, ctx); break;
    case Phase::fsr1:
        if (!b.fsr)
            b.fsr = make_fsr_components(*b.backend.generator, b.seed + 4);
        r = run_phase_fsr1(cfg, ctx, *b.fsr);
        break;
    case Phase::fsr2:
        if (!b.fsr)
            throw std::logic_error("fsr2: step 1 has not been run; train phase fsr1 first");
        r = run_phase_fsr2(cfg, ctx, *b.fsr);
        break;
    }
    *b.directions = ctx.directions;
    b.phases.push_back(to_string(cfg.phase));
    return r;
}

int cmd_train(TrainFlags& f, CLI::App& sub)
{
    std::map<std::string, std::string> file_kv;
    if (!f.config.empty())
        file_kv = read_config_file(f.config);

    // Flags given on the command line, applied after the config file.
    std::map<std::string, std::string> flag_kv;
    auto given = [&sub](const char* name) { return sub.get_option(name)->count() > 0; };
    if (given("--steps"))
        flag_kv["steps"] = std::to_string(f.cfg.steps);
    if (given("--batch-size"))
        flag_kv["batch_size"] = std::to_string(f.cfg.batch_size);
    if (given("--lr"))
        flag_kv["learning_rate"] = fmt(f.cfg.learning_rate);
    if (given("--seed"))
        flag_kv["seed"] = std::to_string(f.cfg.seed);
    if (given("--single-attr-prob"))
        flag_kv["single_attr_prob"] = fmt(f.cfg.single_attr_prob);
    if (given("--mixed-real-fraction"))
        flag_kv["mixed_real_fraction"] = fmt(f.cfg.mixed_real_fraction);
    if (given("--cycle-weight"))
        flag_kv["cycle_weight"] = fmt(f.cfg.cycle_weight);
    if (given("--checkpoint-every"))
        flag_kv["checkpoint_every"] = std::to_string(f.cfg.checkpoint_every);
    if (given("--checkpoint-dir"))
        flag_kv["checkpoint_dir"] = f.cfg.checkpoint_dir;

    std::vector<std::string> phases;
    if (f.phase == "all")
        phases = {"encoder", "synthetic", "mixed", "paired", "joint", "fsr1", "fsr2"};
    else
        phases = {f.phase};

    // Validate every phase config before touching data.
    std::vector<TrainConfig> configs;
    for (const auto& name : phases)
    {
        if (name == "encoder")
        {
            configs.emplace_back();
            continue;
        }
        const Phase p = parse_phase(name);
        TrainConfig c = f.phase == "all" ? pipeline_defaults(p) : TrainConfig{};
        c.phase = p;
        apply_config(c, scoped_keys(file_kv, "", true));
        apply_config(c, scoped_keys(file_kv, name, false));
        apply_config(c, flag_kv);
        c.phase = p;
        c.validate();
        configs.push_back(c);
    }
    EncoderTrainConfig enc_cfg;
    enc_cfg.steps = 100;
    {
        auto kv = scoped_keys(file_kv, "encoder", false);
        if (kv.count("steps"))
            enc_cfg.steps = std::stoi(kv["steps"]);
        if (kv.count("learning_rate"))
            enc_cfg.learning_rate = std::stod(kv["learning_rate"]);
        if (kv.count("batch_size"))
            enc_cfg.batch_size = std::stoi(kv["batch_size"]);
        if (kv.count("seed"))
            enc_cfg.seed = std::stoull(kv["seed"]);
    }

    if (f.model.empty())
        f.model = resolve_model_dir("");
    ModelBundle b = fs::exists(fs::path(f.model) / "manifest.json") ? load_bundle(f.model) : init_toy_bundle(f.init_seed);

    std::unique_ptr<Dataset> data;
    if (!f.data.empty())
        data = std::make_unique<Dataset>(load_dataset(f.data, *b.backend.estimators));

    std::ofstream log_file;
    std::unique_ptr<LossLogger> logger;
    if (!f.log.empty())
    {
        log_file.open(f.log);
        if (!log_file)
            throw std::runtime_error("cannot write log '" + f.log + "'");
        logger = std::make_unique<LossLogger>(&log_file);
    }

    for (std::size_t i = 0; i < phases.size(); ++i)
    {
        if (phases[i] == "encoder")
        {
            if (!data)
                throw std::invalid_argument("encoder pretraining needs --data");
            auto curve = pretrain_toy_encoder(b, *data, enc_cfg, f.encoder_warm_start);
            std::cout << "encoder: warm start + " << curve.size() << " steps";
            if (!curve.empty())
                std::cout << ", loss " << fmt(curve.front()) << " -> " << fmt(curve.back());
            std::cout << '\n';
        }
        else
        {
            PhaseResult r = run_phase(b, data.get(), configs[i], logger.get());
            std::cout << phases[i] << ": " << r.loss_curve.size() << " steps, loss " << fmt(r.loss_curve.front())
                      << " -> " << fmt(r.loss_curve.back());
            if (r.total_samples > 0 && configs[i].phase == Phase::mixed)
                std::cout << ", real fraction "
                          << fmt(static_cast<double>(r.real_samples) / static_cast<double>(r.total_samples));
            std::cout << '\n';
        }
        save_bundle(b, f.model);
    }
    return exit_ok;
}

// ---------------------------------------------------------------------------
// inference commands

struct InferFlags
{
    std::string model;
    std::string source;
    std::string target;
    std::string out;
    std::string fsr = "off";
    int tune_steps = 0;
    std::vector<std::string> assignments;
};

/// The model with the generator tuned on the source when steps > 0.
ReenactModel model_for_source(const ModelBundle& b, const ImageTensor& source, int tune_steps)
{
    ReenactModel m = b.model();
    if (tune_steps > 0)
    {
        TuningConfig tc;
        tc.steps = tune_steps;
        const LatentCode code = b.encoder->invert(source);
        m.generator = std::shared_ptr<const GeneratorBackend>(
            tune_generator(*b.backend.generator, source, code, tc, *b.backend.estimators).generator);
    }
    return m;
}

int cmd_invert(const InferFlags& f)
{
    ModelBundle b = open_bundle(f.model);
    const ImageTensor img = load_image(f.source);
    check_image_size(img, b, f.source);
    const LatentCode code = b.encoder->invert(img);
    write_png(b.backend.generator->render(code), f.out);
    std::cout << "wrote " << f.out << '\n';
    return exit_ok;
}

int cmd_reenact(const InferFlags& f)
{
    ModelBundle b = open_bundle(f.model);
    const bool fsr = parse_on_off(f.fsr);
    if (fsr && !b.fsr)
        throw UsageError("--fsr on needs a model trained with the fsr1 and fsr2 phases");
    const ImageTensor source = load_image(f.source);
    check_image_size(source, b, f.source);
    const ReenactModel m = model_for_source(b, source, f.tune_steps);

    std::vector<fs::path> targets;
    const bool dir_mode = fs::is_directory(f.target);
    if (dir_mode)
        targets = list_pngs(f.target);
    else
        targets = {fs::path(f.target)};
    if (dir_mode)
        fs::create_directories(f.out);
    for (const auto& t : targets)
    {
        const ImageTensor target = load_image(t.string());
        check_image_size(target, b, t.string());
        const ImageTensor out = reenact_with_fsr(source, target, m, fsr);
        const fs::path dest = dir_mode ? fs::path(f.out) / t.filename() : fs::path(f.out);
        if (dest.has_parent_path())
            fs::create_directories(dest.parent_path());
        write_png(out, dest.string());
        std::cout << "wrote " << dest.string() << '\n';
    }
    return exit_ok;
}

int cmd_edit(const InferFlags& f, bool frontalize)
{
    ModelBundle b = open_bundle(f.model);
    const int num_expr = b.backend.estimators->num_expr();
    std::vector<std::pair<int, double>> edits;
    for (const auto& a : f.assignments)
    {
        const auto eq = a.find('=');
        const std::string name = a.substr(0, eq);
        const int k = attribute_index(name, num_expr);
        if (eq == std::string::npos || k < 0)
        {
            std::string valid;
            for (const auto& n : attribute_names(num_expr))
                valid += (valid.empty() ? "" : ", ") + n;
            throw UsageError("unknown attribute '" + name + "' (expected name=value with name in: " + valid + ")");
        }
        try
        {
            edits.emplace_back(k, std::stod(a.substr(eq + 1)));
        } catch (const std::exception&)
        {
            throw UsageError("attribute '" + name + "': value '" + a.substr(eq + 1) + "' is not a number");
        }
    }
    const bool fsr = parse_on_off(f.fsr);
    if (fsr && !b.fsr)
        throw UsageError("--fsr on needs a model trained with the fsr1 and fsr2 phases");
    const ImageTensor source = load_image(f.source);
    check_image_size(source, b, f.source);
    const ReenactModel m = model_for_source(b, source, f.tune_steps);
    const LatentCode w_s = b.encoder->invert(source);
    const PoseExpressionParams p = b.backend.estimators->pose_expr_params(source);

    // Edits apply one after another from the source's estimated parameters;
    // with linear directions the summed Δp gives the same code.
    Eigen::VectorXd current = b.scaler.rescale(p.vector());
    Eigen::VectorXd total = Eigen::VectorXd::Zero(current.size());
    if (frontalize)
    {
        total = frontalize_delta(p, b.scaler);
        current.head<3>().setZero();
    }
    for (const auto& [k, value] : edits)
    {
        if (std::abs(value) > b.scaler.a)
            std::cerr << "warning: " << attribute_names(num_expr)[static_cast<std::size_t>(k)] << '=' << value
                      << " lies outside [-" << b.scaler.a << ", " << b.scaler.a << "]\n";
        total(k) += value - current(k);
        current(k) = value;
    }
    const LatentCode w = apply_shift(w_s, compute_shift(total, *b.directions), *b.directions);
    ImageTensor out;
    {
        ag::NoGradGuard guard;
        out = fsr ? ImageTensor::from_var(synthesize_shifted_refined(*m.generator, source.var(), w_s.var(), w.var(),
                                                                      *m.feature_encoder, *m.ft))
                  : m.generator->render(w);
    }
    write_png(out, f.out);
    const auto names = attribute_names(num_expr);
    std::cout << "delta_p (scaled):";
    for (Eigen::Index i = 0; i < total.size(); ++i)
        std::cout << ' ' << names[static_cast<std::size_t>(i)] << '=' << fmt(total(i));
    std::cout << "\nwrote " << f.out << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------------------
// evaluate, analyze, benchmarks

struct EvalFlags
{
    std::string model;
    std::string data;
    std::string benchmark;
    std::string report = "report.jsonl";
    std::string csv;
    std::string fsr = "off";
    std::uint64_t seed = 1;
    int pairs = 100;
    bool cross = false;
};

int cmd_evaluate(const EvalFlags& f)
{
    ModelBundle b = open_bundle(f.model);
    const bool fsr = parse_on_off(f.fsr);
    if (fsr && !b.fsr)
        throw UsageError("--fsr on needs a model trained with the fsr1 and fsr2 phases");
    const Dataset data = load_dataset(f.data, *b.backend.estimators);
    std::vector<EvalPair> pairs;
    auto frame_by_name = [&data](const std::string& ref) -> const Frame& {
        const auto slash = ref.find('/');
        for (const auto& v : data.videos)
            if (v.id == ref.substr(0, slash))
                for (const auto& fr : v.frames)
                    if (fr.name == ref.substr(slash + 1))
                        return fr;
        throw std::invalid_argument("benchmark frame '" + ref + "' not found in the dataset");
    };
    if (!f.benchmark.empty())
    {
        std::ifstream is(f.benchmark);
        if (!is)
            throw std::runtime_error("cannot read benchmark '" + f.benchmark + "'");
        std::string s, t;
        while (is >> s >> t)
            pairs.push_back({s + "->" + t, frame_by_name(s).image, frame_by_name(t).image, true});
    }
    else
    {
        FramePairSampler sampler(data, f.cross ? PairMode::unpaired_cross_subject : PairMode::paired_same_video);
        std::mt19937_64 rng(f.seed);
        for (int i = 0; i < f.pairs; ++i)
        {
            auto [rs, rt] = sampler.sample(rng);
            const auto& vs = data.videos[static_cast<std::size_t>(rs.video)];
            const auto& vt = data.videos[static_cast<std::size_t>(rt.video)];
            const auto& fs_ = vs.frames[static_cast<std::size_t>(rs.frame)];
            const auto& ft_ = vt.frames[static_cast<std::size_t>(rt.frame)];
            pairs.push_back(
                {vs.id + "/" + fs_.name + "->" + vt.id + "/" + ft_.name, fs_.image, ft_.image, !f.cross});
        }
    }
    const ReenactModel m = b.model();
    Reenactor r = [&m, fsr](const ImageTensor& s, const ImageTensor& t) { return reenact_with_fsr(s, t, m, fsr); };
    const EvalReport rep = evaluate(pairs, r, *b.backend.estimators, b.basis);
    {
        std::ostringstream os;
        write_report_jsonl(rep, os);
        write_text(f.report, os.str());
    }
    if (!f.csv.empty())
    {
        std::ostringstream os;
        write_report_csv(rep, os);
        write_text(f.csv, os.str());
    }
    if (rep.empty)
    {
        std::cout << "evaluation: EMPTY (no pairs)\n";
        return exit_ok;
    }
    std::cout << "pairs " << rep.pairs.size();
    for (const auto& [k, v] : rep.aggregate)
        std::cout << ' ' << k << '=' << fmt(v);
    std::cout << " au_h=" << (rep.au_available ? "available" : "unavailable") << '\n';
    return exit_ok;
}

struct AnalyzeFlags
{
    std::string model;
    std::string kind;
    std::string out = "analysis";
    std::uint64_t seed = 1;
    int probes = 200;
    double magnitude = 3.0;
};

int cmd_analyze(const AnalyzeFlags& f)
{
    ModelBundle b = open_bundle(f.model);
    if (!b.trained() || b.directions->matrix().isZero(0.0))
        throw UsageError("model at '" + resolve_model_dir(f.model) + "' has no trained directions; run train first");
    const auto& gen = *b.backend.generator;
    const auto& est = *b.backend.estimators;
    const auto names = attribute_names(est.num_expr());
    fs::create_directories(f.out);
    nlohmann::ordered_json rep;
    rep["kind"] = f.kind;
    rep["seed"] = f.seed;
    if (f.kind == "linearity")
    {
        std::vector<int> attrs(names.size());
        for (std::size_t i = 0; i < attrs.size(); ++i)
            attrs[i] = static_cast<int>(i);
        const LinearityResult r =
            linearity_analysis(*b.directions, b.scaler, gen, estimator_reader(gen, est), attrs, f.probes, f.seed);
        rep["probes"] = f.probes;
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < attrs.size(); ++i)
        {
            const std::string name = names[static_cast<std::size_t>(attrs[i])];
            rows.push_back({{"name", name}, {"correlation", r.correlation[i]}});
            write_png(scatter_plot(r.probes[i]), (fs::path(f.out) / ("linearity_" + name + ".png")).string());
            std::cout << name << " r=" << fmt(r.correlation[i]) << '\n';
        }
        rep["attributes"] = rows;
    }
    else if (f.kind == "disentanglement")
    {
        const DisentanglementReport r = disentanglement_report(*b.directions, b.scaler, gen,
                                                               estimator_reader(gen, est), f.probes, f.seed,
                                                               f.magnitude);
        rep["pairs"] = f.probes;
        rep["edit_magnitude"] = f.magnitude;
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (Eigen::Index k = 0; k < r.leakage.rows(); ++k)
        {
            const Eigen::Vector3d ang = r.angle_errors(static_cast<int>(k));
            std::vector<double> row(static_cast<std::size_t>(r.leakage.cols()));
            for (Eigen::Index j = 0; j < r.leakage.cols(); ++j)
                row[static_cast<std::size_t>(j)] = r.leakage(k, j);
            rows.push_back({{"name", names[static_cast<std::size_t>(k)]},
                            {"off_target", r.off_target(static_cast<int>(k))},
                            {"yaw_error", ang(0)},
                            {"pitch_error", ang(1)},
                            {"roll_error", ang(2)},
                            {"expression_error", r.expression_error(static_cast<int>(k))},
                            {"leakage", row}});
            std::cout << names[static_cast<std::size_t>(k)] << " off_target=" << fmt(r.off_target(static_cast<int>(k)))
                      << '\n';
        }
        rep["attributes"] = rows;
        write_png(heatmap_image(r.leakage), (fs::path(f.out) / "disentanglement_leakage.png").string());
    }
    else
    {
        throw UsageError("unknown analysis '" + f.kind + "' (expected linearity or disentanglement)");
    }
    write_text(fs::path(f.out) / (f.kind + "_report.json"), rep.dump(2) + "\n");
    return exit_ok;
}

struct BenchFlags
{
    std::string model;
    std::string data;
    std::string kind = "L";
    std::string out = "benchmark.txt";
    std::uint64_t seed = 1;
    std::size_t max_pairs = 1000;
};

int cmd_build_benchmark(const BenchFlags& f)
{
    BenchmarkKind kind;
    if (f.kind == "L")
        kind = BenchmarkKind::L;
    else if (f.kind == "XL")
        kind = BenchmarkKind::XL;
    else
        throw UsageError("--kind must be L or XL");
    // Cached per-frame parameters are used when present; the toy estimators fill any gaps.
    std::shared_ptr<EstimatorSuite> est;
    const char* root = std::getenv("FACEDIRS_MODEL_ROOT");
    if (!f.model.empty() || (root && *root))
        est = open_bundle(f.model).backend.estimators;
    else
        est = create_backend("toy", 7).estimators;
    const Dataset data = load_dataset(f.data, *est);
    const Benchmark b = build_benchmark(data, kind, f.seed, f.max_pairs);
    write_benchmark(b, data, f.out);
    std::cout << b.report() << '\n';
    return b.empty() ? exit_failure : exit_ok;
}

struct ToyDataFlags
{
    std::string out;
    std::uint64_t backend_seed = 7;
    ToyVideoConfig cfg;
};

int cmd_make_toy_data(const ToyDataFlags& f)
{
    BackendPair be = create_backend("toy", f.backend_seed);
    const auto& gen = dynamic_cast<const ToyGenerator&>(*be.generator);
    const Dataset ds = make_toy_dataset(gen, *be.estimators, f.cfg);
    save_dataset(ds, f.out);
    std::cout << "wrote " << ds.videos.size() << " videos, " << ds.num_frames() << " frames to " << f.out << '\n';
    return exit_ok;
}

struct ServeFlags
{
    std::string model;
    std::string host = "127.0.0.1";
    int port = 8080;
    int ttl = 1800;
    int tune_steps = 200;
    std::string cors = "*";
};

int cmd_serve(const ServeFlags& f)
{
    std::shared_ptr<const ModelBundle> bundle;
    try
    {
        bundle = std::make_shared<const ModelBundle>(open_bundle(f.model));
    } catch (const BundleMissing& e)
    {
        std::cerr << "warning: " << e.what() << "; serving without a model (503)\n";
    }
    ServiceConfig cfg;
    cfg.session_ttl = std::chrono::seconds(f.ttl);
    cfg.tuning.steps = f.tune_steps;
    cfg.cors_origin = f.cors;
    EditService service(bundle, cfg);
    httplib::Server server;
    register_routes(server, service);
    std::cout << "listening on http://" << f.host << ':' << f.port << std::endl;
    if (!server.listen(f.host, f.port))
        throw std::runtime_error("cannot listen on " + f.host + ":" + std::to_string(f.port));
    return exit_ok;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"facedirs: face reenactment and editing with learned latent directions"};
    app.require_subcommand(1);
    const std::string model_help = "model bundle directory (default: $FACEDIRS_MODEL_ROOT)";

    TrainFlags tf;
    auto* train = app.add_subcommand("train", "train one phase, or every phase with --phase all");
    train->add_option("--model", tf.model, "bundle directory; created when it does not exist");
    train->add_option("--data", tf.data, "dataset root: <root>/<video>/<frame>.png");
    train->add_option("--phase", tf.phase, "synthetic, mixed, paired, joint, fsr1, fsr2, encoder or all")
        ->check(CLI::IsMember({"synthetic", "mixed", "paired", "joint", "fsr1", "fsr2", "encoder", "all"}));
    train->add_option("--config", tf.config, "key = value config file; flags override it");
    train->add_option("--log", tf.log, "write per-step losses as JSON lines");
    train->add_option("--init-seed", tf.init_seed, "backend seed for a new bundle")->capture_default_str();
    train->add_option("--steps", tf.cfg.steps, "optimizer steps")->capture_default_str();
    train->add_option("--batch-size", tf.cfg.batch_size, "samples per step")->capture_default_str();
    train->add_option("--lr", tf.cfg.learning_rate, "constant Adam learning rate")->capture_default_str();
    train->add_option("--seed", tf.cfg.seed, "sampling seed")->capture_default_str();
    train->add_option("--single-attr-prob", tf.cfg.single_attr_prob, "probability of a single-attribute Δp")
        ->capture_default_str();
    train->add_option("--mixed-real-fraction", tf.cfg.mixed_real_fraction, "share of inverted real sources (mixed)")
        ->capture_default_str();
    train->add_option("--cycle-weight", tf.cfg.cycle_weight, "weight of the cycle term (joint)")
        ->capture_default_str();
    train->add_option("--checkpoint-every", tf.cfg.checkpoint_every, "checkpoint period in steps, 0 = off")
        ->capture_default_str();
    train->add_option("--checkpoint-dir", tf.cfg.checkpoint_dir, "where checkpoints are written");
    train->add_option("--encoder-warm-start", tf.encoder_warm_start, "renders used for the encoder warm start")
        ->capture_default_str();

    InferFlags inv;
    auto* invert = app.add_subcommand("invert", "invert an image and write its reconstruction");
    invert->add_option("--model", inv.model, model_help);
    invert->add_option("--source", inv.source, "input PNG")->required();
    invert->add_option("--out", inv.out, "output PNG")->required();

    InferFlags re;
    auto* reenact = app.add_subcommand("reenact", "transfer pose and expression from target frame(s) to the source");
    reenact->add_option("--model", re.model, model_help);
    reenact->add_option("--source", re.source, "source PNG")->required();
    reenact->add_option("--target", re.target, "target PNG or a directory of PNGs")->required();
    reenact->add_option("--out", re.out, "output PNG, or a directory when --target is one")->required();
    reenact->add_option("--fsr", re.fsr, "feature-space refinement: on or off")->capture_default_str();
    reenact->add_option("--tune-steps", re.tune_steps, "generator tuning steps on the source (0 = off)")
        ->capture_default_str();

    InferFlags ed;
    auto* edit = app.add_subcommand("edit", "set attributes (name=value, rescaled units) on the source");
    edit->add_option("--model", ed.model, model_help);
    edit->add_option("--source", ed.source, "source PNG")->required();
    edit->add_option("--out", ed.out, "output PNG")->required();
    edit->add_option("--fsr", ed.fsr, "feature-space refinement: on or off")->capture_default_str();
    edit->add_option("--tune-steps", ed.tune_steps, "generator tuning steps on the source (0 = off)")
        ->capture_default_str();
    edit->add_option("assignments", ed.assignments, "attribute=value pairs: yaw, pitch, roll, expr1..expr12");

    InferFlags fr;
    auto* frontal = app.add_subcommand("frontalize", "move yaw, pitch and roll to zero");
    frontal->add_option("--model", fr.model, model_help);
    frontal->add_option("--source", fr.source, "source PNG")->required();
    frontal->add_option("--out", fr.out, "output PNG")->required();
    frontal->add_option("--fsr", fr.fsr, "feature-space refinement: on or off")->capture_default_str();
    frontal->add_option("--tune-steps", fr.tune_steps, "generator tuning steps on the source (0 = off)")
        ->capture_default_str();

    EvalFlags ev;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "reenactment metrics over a dataset or benchmark");
    evaluate_cmd->add_option("--model", ev.model, model_help);
    evaluate_cmd->add_option("--data", ev.data, "dataset root")->required();
    evaluate_cmd->add_option("--benchmark", ev.benchmark, "pair list from build-benchmark");
    evaluate_cmd->add_option("--pairs", ev.pairs, "random pairs when no benchmark is given")->capture_default_str();
    evaluate_cmd->add_flag("--cross", ev.cross, "cross-identity pairs (CSIM against the source)");
    evaluate_cmd->add_option("--seed", ev.seed, "pair sampling seed")->capture_default_str();
    evaluate_cmd->add_option("--report", ev.report, "JSON-lines report")->capture_default_str();
    evaluate_cmd->add_option("--csv", ev.csv, "optional per-pair CSV");
    evaluate_cmd->add_option("--fsr", ev.fsr, "feature-space refinement: on or off")->capture_default_str();

    AnalyzeFlags an;
    auto* analyze = app.add_subcommand("analyze", "linearity or disentanglement analysis of A");
    analyze->add_option("kind", an.kind, "linearity or disentanglement")->required();
    analyze->add_option("--model", an.model, model_help);
    analyze->add_option("--out", an.out, "output directory for the report and plots")->capture_default_str();
    analyze->add_option("--probes", an.probes, "probes (linearity) or codes (disentanglement) per attribute")
        ->capture_default_str();
    analyze->add_option("--seed", an.seed, "probe seed")->capture_default_str();
    analyze->add_option("--magnitude", an.magnitude, "edit size for disentanglement, rescaled units")
        ->capture_default_str();

    BenchFlags bf;
    auto* bench = app.add_subcommand("build-benchmark", "select large-pose same-video pairs (L or XL)");
    bench->add_option("--model", bf.model, "bundle whose estimators fill missing params caches");
    bench->add_option("--data", bf.data, "dataset root")->required();
    bench->add_option("--kind", bf.kind, "L or XL")->capture_default_str();
    bench->add_option("--out", bf.out, "pair list output")->capture_default_str();
    bench->add_option("--seed", bf.seed, "shuffle seed")->capture_default_str();
    bench->add_option("--max-pairs", bf.max_pairs, "cap on the number of pairs")->capture_default_str();

    ToyDataFlags td;
    auto* toy = app.add_subcommand("make-toy-data", "render a toy video dataset");
    toy->add_option("--out", td.out, "dataset root")->required();
    toy->add_option("--backend-seed", td.backend_seed, "toy backend seed")->capture_default_str();
    toy->add_option("--videos", td.cfg.num_videos, "number of videos")->capture_default_str();
    toy->add_option("--frames", td.cfg.frames_per_video, "frames per video")->capture_default_str();
    toy->add_option("--seed", td.cfg.seed, "content seed")->capture_default_str();

    ServeFlags sf;
    auto* serve = app.add_subcommand("serve", "run the HTTP edit service");
    serve->add_option("--model", sf.model, model_help);
    serve->add_option("--host", sf.host, "bind address")->capture_default_str();
    serve->add_option("--port", sf.port, "port")->capture_default_str();
    serve->add_option("--ttl", sf.ttl, "idle session lifetime in seconds")->capture_default_str();
    serve->add_option("--tune-steps", sf.tune_steps, "tuning steps for sessions created with tune=true")
        ->capture_default_str();
    serve->add_option("--cors-origin", sf.cors, "Access-Control-Allow-Origin value")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try
    {
        if (*train)
            return cmd_train(tf, *train);
        if (*invert)
            return cmd_invert(inv);
        if (*reenact)
            return cmd_reenact(re);
        if (*edit)
            return cmd_edit(ed, false);
        if (*frontal)
            return cmd_edit(fr, true);
        if (*evaluate_cmd)
            return cmd_evaluate(ev);
        if (*analyze)
            return cmd_analyze(an);
        if (*bench)
            return cmd_build_benchmark(bf);
        if (*toy)
            return cmd_make_toy_data(td);
        if (*serve)
            return cmd_serve(sf);
    } catch (const BundleMissing& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const UsageError& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const ImageError& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return exit_image;
    } catch (const std::exception& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return exit_failure;
    }
    return exit_failure;
}
