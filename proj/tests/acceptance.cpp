/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: tests/acceptance.cpp
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

/**
 * Acceptance gate. Runs every acceptance criterion on the toy backend and
 * prints one PASS/FAIL line per criterion followed by its individual checks.
 *
 * Exit status is 0 once every criterion has been evaluated; --strict makes
 * any FAIL exit 1.
 */
#include "testkit.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

using namespace facedirs;
using namespace facedirs::testkit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion
{
    std::string id;
    std::string title;
    Checks checks;
    double seconds = 0.0;
};

/// Mean of the first (front) or last k entries of a loss curve.
double curve_mean(const std::vector<double>& c, std::size_t k, bool front)
{
    k = std::min(k, c.size());
    if (k == 0)
        return std::nan("");
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        s += front ? c[i] : c[c.size() - 1 - i];
    return s / static_cast<double>(k);
}

double curve_ratio(const std::vector<double>& c)
{
    return curve_mean(c, 20, false) / curve_mean(c, 20, true);
}

std::string fmt(double v)
{
    std::ostringstream os;
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// CLI helpers

#ifdef FACEDIRS_CLI_PATH
const fs::path cli_root = fs::temp_directory_path() / "facedirs_acceptance";

int cli(const std::string& args)
{
    const std::string cmd = "env FACEDIRS_MODEL_ROOT= '" + std::string(FACEDIRS_CLI_PATH) + "' " + args + " > '" +
                            (cli_root / "last_run.txt").string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p)
{
    return "'" + p.string() + "'";
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Concatenated bytes of every file under dir, in path order.
std::string slurp_tree(const fs::path& dir)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files)
        all += fs::relative(f, dir).string() + '\n' + slurp(f);
    return all;
}
#endif

// ---------------------------------------------------------------------------
// Planted-direction recovery and the single-attribute ablation

struct SyntheticRun
{
    ModelBundle bundle;
    PhaseResult result;
    double seconds = 0.0;
};

SyntheticRun train_synthetic(double single_attr_prob)
{
    SyntheticRun run{init_toy_bundle(7), {}, 0.0};
    TrainConfig cfg;
    cfg.steps = 2000;
    cfg.batch_size = 8;
    cfg.seed = 1;
    cfg.single_attr_prob = single_attr_prob;
    const auto t0 = Clock::now();
    TrainingContext ctx = run.bundle.context();
    run.result = run_phase_synthetic(cfg, ctx);
    *run.bundle.directions = ctx.directions;
    run.bundle.phases.push_back("synthetic");
    run.seconds = seconds_since(t0);
    return run;
}

ParamReader pixel_reader(const ModelBundle& b)
{
    return estimator_reader(*b.backend.generator, *b.backend.estimators);
}

// ---------------------------------------------------------------------------
// Full toy pipeline: encoder, mixed, paired, joint (with and without cycle), FSR

struct Pipeline
{
    ModelBundle b = init_toy_bundle(7);
    Dataset data, held;
    std::shared_ptr<InversionEncoder> encoder; ///< the bundle's encoder
    DirectionsMatrix mixed_checkpoint;
    PhaseResult mixed, paired, joint, joint_no_cycle, joint_from_init, fsr1, fsr2;
    double cycle_metric = 0.0, cycle_metric_no_cycle = 0.0;
    std::uint64_t gen_digest_before = 0, gen_digest_after = 0, est_digest_before = 0, est_digest_after = 0;
    std::uint64_t fsr2_a_before = 0, fsr2_a_after = 0, fsr2_enc_before = 0, fsr2_enc_after = 0;
    double enc_pixel_l1 = 0.0, enc_idempotence = 0.0;
    double fsr1_better = 0.0, fsr2_better = 0.0;

    const GeneratorBackend& gen() const { return *b.backend.generator; }
    const EstimatorSuite& est() const { return *b.backend.estimators; }

    ReenactModel model(const DirectionsMatrix& A) const
    {
        ReenactModel m = b.model();
        m.encoder = encoder;
        m.directions = std::make_shared<const DirectionsMatrix>(A.copy());
        return m;
    }
};

/// Mean cycle loss over held-out same-video pairs.
double cycle_metric(const Pipeline& p, const InversionEncoder& enc, const DirectionsMatrix& A)
{
    FramePairSampler sampler(p.held, PairMode::paired_same_video);
    std::mt19937_64 rng(5);
    const ReenactFn fn = [&](const ag::Var& s, const ag::Var& t) {
        return reenact_graph(s, t, enc, A, p.b.scaler, p.gen(), p.est()).image;
    };
    double total = 0.0;
    const int n = 40;
    for (int i = 0; i < n; ++i)
    {
        auto [rs, rt] = sampler.sample(rng);
        ag::NoGradGuard guard;
        total += cycle_loss(sampler.frame(rs).image.var(), sampler.frame(rt).image.var(), fn, LossWeights{}, p.est())
                     .value();
    }
    return total / n;
}

/// Codes drawn from the generator's latent distribution, rendered.
std::vector<ImageTensor> generated_images(const GeneratorBackend& gen, int n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<ImageTensor> out;
    for (int i = 0; i < n; ++i)
        out.push_back(gen.render(gen.map_latent(gaussian_vector(rng, gen.latent_dim()))));
    return out;
}

std::vector<const Frame*> held_frames(const Dataset& d)
{
    std::vector<const Frame*> out;
    for (const auto& v : d.videos)
        for (const auto& f : v.frames)
            out.push_back(&f);
    return out;
}

void run_pipeline(Pipeline& p, const DirectionsMatrix& synthetic_directions)
{
    const auto& gen = dynamic_cast<const ToyGenerator&>(p.gen());
    p.data = make_toy_dataset(gen, p.est(), ToyVideoConfig{});
    ToyVideoConfig hc;
    hc.seed = 99;
    hc.num_videos = 4;
    hc.frames_per_video = 5;
    p.held = make_toy_dataset(gen, p.est(), hc);

    EncoderTrainConfig ec;
    ec.steps = 100;
    pretrain_toy_encoder(p.b, p.data, ec);
    p.encoder = p.b.encoder;
    {
        ag::NoGradGuard guard;
        double l1 = 0.0, worst = 0.0;
        const auto imgs = generated_images(p.gen(), 20, 41);
        for (const auto& img : imgs)
        {
            const ag::Var w1 = p.encoder->encode(img.var());
            const ag::Var x1 = p.gen().synthesize(w1);
            l1 += pixel_loss(img.var(), x1).item();
            const ag::Var w2 = p.encoder->encode(x1);
            const double rel = (w2.value() - w1.value()).matrix().norm() / w1.value().matrix().norm();
            worst = std::max(worst, rel);
        }
        p.enc_pixel_l1 = l1 / static_cast<double>(imgs.size());
        p.enc_idempotence = worst;
    }

    // Joint phase from initialization: zero directions, pretrained encoder.
    TrainConfig jc;
    jc.phase = Phase::joint;
    jc.steps = 500;
    jc.batch_size = 4;
    jc.seed = 3;
    {
        TrainingContext ctx = p.b.context(&p.data);
        ctx.directions = p.b.directions->copy();
        ctx.encoder = std::shared_ptr<InversionEncoder>(p.encoder->clone());
        p.joint_from_init = run_phase_joint(jc, ctx);
    }

    // The phase-synthetic result seeds the real-data phases.
    p.b.directions->set_matrix(synthetic_directions.matrix());
    p.b.phases.push_back("synthetic");

    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.steps = 200;
    cfg.seed = 3;
    {
        cfg.phase = Phase::mixed;
        TrainingContext ctx = p.b.context(&p.data);
        p.mixed = run_phase_mixed(cfg, ctx);
        *p.b.directions = ctx.directions.copy();
        p.mixed_checkpoint = ctx.directions.copy();
        p.b.phases.push_back("mixed");
    }
    {
        cfg.phase = Phase::paired;
        TrainingContext ctx = p.b.context(&p.data);
        p.paired = run_phase_paired(cfg, ctx);
        *p.b.directions = ctx.directions.copy();
        p.b.phases.push_back("paired");
    }

    // Joint phase: the no-cycle ablation runs on copies, the main run in place.
    {
        TrainingContext ctx = p.b.context(&p.data);
        ctx.directions = p.b.directions->copy();
        ctx.encoder = std::shared_ptr<InversionEncoder>(p.encoder->clone());
        TrainConfig c0 = jc;
        c0.cycle_weight = 0.0;
        p.joint_no_cycle = run_phase_joint(c0, ctx);
        p.cycle_metric_no_cycle = cycle_metric(p, *ctx.encoder, ctx.directions);
    }
    {
        TrainingContext ctx = p.b.context(&p.data);
        ctx.directions = p.b.directions->copy();
        p.gen_digest_before = ctx.generator->digest();
        p.est_digest_before = ctx.estimators->digest();
        p.joint = run_phase_joint(jc, ctx);
        p.gen_digest_after = ctx.generator->digest();
        p.est_digest_after = ctx.estimators->digest();
        *p.b.directions = ctx.directions.copy();
        p.cycle_metric = cycle_metric(p, *ctx.encoder, ctx.directions);
        p.b.phases.push_back("joint");
    }

    // Feature-space refinement.
    FsrComponents fsr = make_fsr_components(p.gen(), p.b.seed + 4);
    TrainConfig fc;
    fc.steps = 500;
    fc.batch_size = 4;
    fc.learning_rate = 1e-3;
    fc.seed = 3;
    {
        fc.phase = Phase::fsr1;
        TrainingContext ctx = p.b.context(&p.data);
        p.fsr1 = run_phase_fsr1(fc, ctx, fsr);
        int better = 0;
        const auto frames = held_frames(p.held);
        for (const Frame* f : frames)
        {
            ag::NoGradGuard guard;
            const ag::Var img = f->image.var();
            const ag::Var w = p.encoder->encode(img);
            const double plain = pixel_loss(img, p.gen().synthesize(w)).item();
            const double refined =
                pixel_loss(img, synthesize_refined(p.gen(), w, refine_inversion(fsr.feature_encoder, p.gen(), img, w)))
                    .item();
            better += refined <= plain;
        }
        p.fsr1_better = static_cast<double>(better) / static_cast<double>(frames.size());
    }
    {
        fc.phase = Phase::fsr2;
        TrainingContext ctx = p.b.context(&p.data);
        p.fsr2_a_before = ctx.directions.digest();
        p.fsr2_enc_before = ag::digest(ctx.encoder->parameters());
        p.fsr2 = run_phase_fsr2(fc, ctx, fsr);
        p.fsr2_a_after = ctx.directions.digest();
        p.fsr2_enc_after = ag::digest(ctx.encoder->parameters());
    }
    p.b.fsr = std::move(fsr);
    p.b.phases.push_back("fsr1");
    p.b.phases.push_back("fsr2");

    // Background and identity band error, refined against plain, on held-out pairs.
    {
        const ReenactModel m = p.b.model();
        FramePairSampler sampler(p.held, PairMode::paired_same_video);
        std::mt19937_64 rng(5);
        const auto band = toy::band_indices();
        int better = 0;
        const int n = 40;
        for (int i = 0; i < n; ++i)
        {
            auto [rs, rt] = sampler.sample(rng);
            const ImageTensor& s = sampler.frame(rs).image;
            const ImageTensor& t = sampler.frame(rt).image;
            const ImageTensor plain = reenact_with_fsr(s, t, m, false);
            const ImageTensor refined = reenact_with_fsr(s, t, m, true);
            double e0 = 0.0, e1 = 0.0;
            for (auto k : band)
            {
                e0 += std::abs(plain.data(k) - t.data(k));
                e1 += std::abs(refined.data(k) - t.data(k));
            }
            better += e1 <= e0;
        }
        p.fsr2_better = static_cast<double>(better) / n;
    }
}

/// Post-training checks on the pipeline model.
void pipeline_oracles(Checks& c, const Pipeline& p, const SyntheticRun& recovery)
{
    const auto& gen = dynamic_cast<const ToyGenerator&>(p.gen());
    const auto& toy_est = dynamic_cast<const ToyEstimators&>(p.est());
    const ParamScaler& scaler = p.b.scaler;
    const DirectionsMatrix& A = *p.b.directions;
    const ReenactModel m = p.b.model();

    c.at_most("synthetic: loss curve final/initial ratio", curve_ratio(recovery.result.loss_curve), 0.3 - 1e-12);
    c.expect("mixed: loss decreases", curve_ratio(p.mixed.loss_curve) < 1.0,
             "ratio " + fmt(curve_ratio(p.mixed.loss_curve)));
    c.expect("paired: loss decreases", curve_ratio(p.paired.loss_curve) < 1.0,
             "ratio " + fmt(curve_ratio(p.paired.loss_curve)));
    c.at_most("joint: loss decreases by at least 50% over 500 steps from initialization",
              curve_ratio(p.joint_from_init.loss_curve), 0.5);
    c.expect("joint: loss decreases from the paired-phase state", curve_ratio(p.joint.loss_curve) < 1.0,
             "ratio " + fmt(curve_ratio(p.joint.loss_curve)));
    c.at_most("fsr2: loss decreases by at least 30% over 500 steps", curve_ratio(p.fsr2.loss_curve), 0.7);
    c.at_most("inversion: encoder pixel L1 on held-out generated images", p.enc_pixel_l1, 0.05 - 1e-12);
    c.at_most("inversion: second-pass code relative change (worst of 20)", p.enc_idempotence, 0.1);
    c.at_least("feature_refine: step-1 refinement no worse than plain, fraction of held-out frames", p.fsr1_better,
               0.95);
    c.at_least("feature_refine: refined band error no worse than plain, fraction of held-out pairs", p.fsr2_better,
               0.9);

    // Paired phase against the mixed checkpoint: identity similarity to the source.
    {
        FramePairSampler sampler(p.held, PairMode::paired_same_video);
        std::mt19937_64 rng(7);
        const ReenactModel mixed = p.model(p.mixed_checkpoint);
        double before = 0.0, after = 0.0;
        for (int i = 0; i < 20; ++i)
        {
            auto [rs, rt] = sampler.sample(rng);
            const ImageTensor& s = sampler.frame(rs).image;
            const ImageTensor& t = sampler.frame(rt).image;
            before += csim(reenact_with_fsr(s, t, mixed, false), s, p.est()) / 20.0;
            after += csim(reenact_with_fsr(s, t, m, false), s, p.est()) / 20.0;
        }
        c.expect("training: CSIM after the paired and joint phases exceeds the mixed checkpoint", after > before,
                 "mixed " + fmt(before) + ", final " + fmt(after));
    }

    // Reenactment readback, yaw-edit leakage and frontalization.
    {
        FramePairSampler sampler(p.held, PairMode::unpaired_cross_subject);
        std::mt19937_64 rng(9);
        double readback = 0.0;
        const int n = 20;
        for (int i = 0; i < n; ++i)
        {
            auto [rs, rt] = sampler.sample(rng);
            const ImageTensor out = reenact_with_fsr(sampler.frame(rs).image, sampler.frame(rt).image, m, false);
            const Eigen::VectorXd got = scaler.rescale(p.est().pose_expr_params(out).vector());
            const Eigen::VectorXd want = scaler.rescale(p.est().pose_expr_params(sampler.frame(rt).image).vector());
            readback += (got - want).cwiseAbs().mean() / n;
        }
        c.at_most("reenactment: estimated parameters of the output vs target, mean |error| (scaled)", readback, 0.1);

        const DisentanglementReport d = disentanglement_report(
            A, scaler, gen, [&](const LatentCode& w) { return toy_est.pose_expr_from_code(gen, w.flat()); }, 20, 3);
        c.at_most("edit: yaw ±3 changes other hidden scene parameters by (mean, scaled)", d.off_target(0), 0.05);

        double front = 0.0;
        const auto frames = held_frames(p.held);
        for (const Frame* f : frames)
        {
            const LatentCode w = p.encoder->invert(f->image);
            const PoseExpressionParams pe = p.est().pose_expr_params(f->image);
            const ImageTensor out = gen.render(frontalize_code(w, pe, scaler, A));
            front += scaler.rescale(p.est().pose_expr_params(out).vector()).head<3>().cwiseAbs().maxCoeff() /
                     static_cast<double>(frames.size());
        }
        c.at_most("frontalize: estimated |θ| of the output, mean of max over angles (scaled)", front, 0.1);
    }

    // Cycle loss on same-video pairs against the loss between unrelated frames.
    {
        FramePairSampler cross(p.held, PairMode::unpaired_cross_subject);
        std::mt19937_64 rng(11);
        double unrelated = 0.0;
        for (int i = 0; i < 40; ++i)
        {
            auto [rs, rt] = cross.sample(rng);
            ag::NoGradGuard guard;
            unrelated += reconstruction_loss(cross.frame(rs).image.var(), cross.frame(rt).image.var(), LossWeights{},
                                             p.est())
                             .value() /
                         40.0;
        }
        c.expect("joint: cycle loss below the loss between unrelated frames", p.cycle_metric < unrelated,
                 "cycle " + fmt(p.cycle_metric) + ", unrelated " + fmt(unrelated));
    }

    // Per-source generator tuning.
    {
        double untuned = 0.0, tuned = 0.0;
        bool decreased = true;
        std::string curve;
        for (int v = 0; v < 3; ++v)
        {
            const ImageTensor& s = p.held.videos[static_cast<std::size_t>(v)].frames[0].image;
            const ImageTensor& t = p.held.videos[static_cast<std::size_t>(v + 1)].frames[2].image;
            TuningConfig tc;
            tc.steps = 200;
            TuningResult r = tune_generator(p.gen(), s, p.encoder->invert(s), tc, p.est());
            decreased = decreased && r.pixel_curve.back() <= r.pixel_curve.front();
            curve += fmt(r.pixel_curve.front()) + " -> " + fmt(r.pixel_curve.back()) + "; ";
            ReenactModel mt = m;
            mt.generator = std::shared_ptr<const GeneratorBackend>(std::move(r.generator));
            untuned += csim(reenact_with_fsr(s, t, m, false), s, p.est());
            tuned += csim(reenact_with_fsr(s, t, mt, false), s, p.est());
        }
        c.expect("inversion: 200 tuning steps end at or below the initial pixel loss", decreased, curve);
        c.expect("inversion: tuning raises identity cosine of the reenactment to the source", tuned > untuned,
                 "untuned " + fmt(untuned / 3) + ", tuned " + fmt(tuned / 3));
    }

    // Edit round trip on the trained directions.
    {
        std::mt19937_64 rng(13);
        const LatentCode w = p.encoder->invert(p.held.videos[0].frames[1].image);
        Eigen::VectorXd d = Eigen::VectorXd::Zero(A.d_in());
        d(0) = 3.0;
        const LatentCode back = apply_shift(apply_shift(w, compute_shift(d, A), A), compute_shift(-d, A), A);
        c.at_most("cli: yaw=3 then yaw=-3 returns the latent", (back.flat() - w.flat()).cwiseAbs().maxCoeff(), 1e-6);
    }

#ifdef FACEDIRS_CLI_PATH
    // Command-line outputs on the trained bundle.
    c.group("cli on the trained bundle", [&](Checks& x) {
        const fs::path model = cli_root / "pipeline_model";
        const fs::path held_dir = cli_root / "held";
        fs::remove_all(model);
        fs::remove_all(held_dir);
        save_bundle(p.b, model.string());
        save_dataset(p.held, held_dir.string());
        const fs::path targets = cli_root / "targets";
        fs::remove_all(targets);
        fs::create_directories(targets);
        for (int i = 0; i < 5; ++i)
            write_png(p.held.videos[1].frames[static_cast<std::size_t>(i)].image,
                      (targets / ("target_" + std::to_string(i) + ".png")).string());
        const fs::path source = cli_root / "source.png";
        write_png(p.held.videos[0].frames[0].image, source.string());
        const fs::path out = cli_root / "reenacted";
        fs::remove_all(out);
        const int code = cli("reenact --model " + q(model) + " --source " + q(source) + " --target " + q(targets) +
                             " --out " + q(out));
        int count = 0;
        bool names = true;
        if (fs::exists(out))
            for (const auto& e : fs::directory_iterator(out))
            {
                ++count;
                names = names && fs::exists(targets / e.path().filename());
            }
        x.expect("cli: a directory of 5 targets gives 5 outputs with the target names", code == 0 && count == 5 && names,
                 "exit " + std::to_string(code) + ", outputs " + std::to_string(count));

        const fs::path rep = cli_root / "report.jsonl", csv = cli_root / "report.csv";
        const int ecode = cli("evaluate --model " + q(model) + " --data " + q(held_dir) + " --pairs 10 --report " +
                              q(rep) + " --csv " + q(csv));
        std::ifstream is(rep);
        const auto agg = read_report_aggregate(is);
        std::ifstream cs(csv);
        std::string line;
        std::getline(cs, line);
        double sum = 0.0;
        int n = 0;
        while (std::getline(cs, line))
        {
            std::stringstream ss(line);
            std::string cell;
            for (int k = 0; k < 3; ++k)
                std::getline(ss, cell, ',');
            sum += std::stod(cell);
            ++n;
        }
        x.expect("cli: evaluation report parses back to the per-pair CSIM mean",
                 ecode == 0 && n == 10 && std::abs(agg.at("csim") - sum / n) <= 1e-12,
                 "exit " + std::to_string(ecode) + ", pairs " + std::to_string(n));
    });
#endif
}

// ---------------------------------------------------------------------------
// Determinism

/// Loss curves of every phase, run briefly from a fresh bundle.
std::vector<std::vector<double>> short_pipeline_curves()
{
    ModelBundle b = init_toy_bundle(7, 500);
    const auto& gen = dynamic_cast<const ToyGenerator&>(*b.backend.generator);
    ToyVideoConfig vc;
    vc.num_videos = 3;
    vc.frames_per_video = 4;
    const Dataset data = make_toy_dataset(gen, *b.backend.estimators, vc);
    std::vector<std::vector<double>> curves;
    EncoderTrainConfig ec;
    ec.steps = 3;
    ec.batch_size = 2;
    curves.push_back(pretrain_toy_encoder(b, data, ec, 100));
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = 5;
    TrainingContext ctx = b.context(&data);
    curves.push_back(run_phase_synthetic(cfg, ctx).loss_curve);
    curves.push_back(run_phase_mixed(cfg, ctx).loss_curve);
    curves.push_back(run_phase_paired(cfg, ctx).loss_curve);
    curves.push_back(run_phase_joint(cfg, ctx).loss_curve);
    FsrComponents fsr = make_fsr_components(gen, 11);
    curves.push_back(run_phase_fsr1(cfg, ctx, fsr).loss_curve);
    curves.push_back(run_phase_fsr2(cfg, ctx, fsr).loss_curve);
    return curves;
}

void determinism_checks(Checks& c)
{
    const auto a = short_pipeline_curves();
    const auto b = short_pipeline_curves();
    const char* names[] = {"encoder", "synthetic", "mixed", "paired", "joint", "fsr1", "fsr2"};
    for (std::size_t i = 0; i < a.size(); ++i)
        c.expect(std::string("determinism: ") + names[i] + " loss curve identical on rerun",
                 !a[i].empty() && a[i] == b[i], std::to_string(a[i].size()) + " steps");

#ifdef FACEDIRS_CLI_PATH
    c.group("determinism: cli", [](Checks& x) {
        std::string data[2], model[2], image[2];
        for (int i = 0; i < 2; ++i)
        {
            const fs::path dir = cli_root / ("det" + std::to_string(i));
            fs::remove_all(dir);
            fs::create_directories(dir);
            const fs::path cfg = dir / "train.cfg";
            std::ofstream(cfg) << "encoder.steps = 3\nbatch_size = 2\n";
            int code = cli("make-toy-data --out " + q(dir / "data") + " --videos 2 --frames 4");
            code |= cli("train --phase encoder --encoder-warm-start 100 --config " + q(cfg) + " --data " +
                        q(dir / "data") + " --model " + q(dir / "model"));
            code |= cli("train --phase synthetic --steps 3 --config " + q(cfg) + " --model " + q(dir / "model") +
                        " --log " + q(dir / "log.jsonl"));
            code |= cli("reenact --model " + q(dir / "model") + " --source " + q(dir / "data/video0000/0000.png") +
                        " --target " + q(dir / "data/video0001") + " --out " + q(dir / "out"));
            x.expect("determinism: cli run " + std::to_string(i) + " succeeds", code == 0);
            data[i] = slurp_tree(dir / "data");
            model[i] = slurp_tree(dir / "model") + slurp(dir / "log.jsonl");
            image[i] = slurp_tree(dir / "out");
        }
        x.expect("determinism: make-toy-data output byte-identical", !data[0].empty() && data[0] == data[1]);
        x.expect("determinism: trained bundle and loss log byte-identical", !model[0].empty() && model[0] == model[1]);
        x.expect("determinism: reenact outputs byte-identical", !image[0].empty() && image[0] == image[1]);
    });
#else
    c.expect("determinism: cli", false, "the facedirs tool was not built");
#endif
}

// ---------------------------------------------------------------------------

void print(std::ostream& os, const Criterion& c)
{
    const bool pass = c.checks.all_pass();
    char t[32];
    std::snprintf(t, sizeof(t), "%.1f s", c.seconds);
    os << (pass ? "PASS " : "FAIL ") << c.id << ": " << c.title << " (" << t << ")\n";
    for (const auto& item : c.checks.items())
        os << "    " << (item.pass ? "ok   " : "FAIL ") << item.name << (item.detail.empty() ? "" : " [" + item.detail + "]")
           << '\n';
    os.flush();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"facedirs acceptance gate"};
    std::string report_path;
    bool strict = false;
    app.add_option("--report", report_path, "also write the results to this file");
    app.add_flag("--strict", strict, "exit 1 if any criterion fails");
    CLI11_PARSE(app, argc, argv);

#ifdef FACEDIRS_CLI_PATH
    fs::remove_all(cli_root);
    fs::create_directories(cli_root);
#endif

    std::vector<Criterion> results;
    auto run = [&results](const std::string& id, const std::string& title, const std::function<void(Checks&)>& body) {
        Criterion c{id, title, {}, 0.0};
        const auto t0 = Clock::now();
        c.checks.group(id, body);
        c.seconds = seconds_since(t0);
        print(std::cout, c);
        results.push_back(std::move(c));
    };

    SyntheticRun with_single, without_single;
    run("recovery", "phase-synthetic training recovers the planted directions", [&](Checks& c) {
        with_single = train_synthetic(0.5);
        const Eigen::MatrixXd A = with_single.bundle.directions->matrix();
        const Eigen::MatrixXd B = dynamic_cast<const ToyGenerator&>(*with_single.bundle.backend.generator)
                                      .planted_directions();
        const auto names = attribute_names(12);
        for (int k = 0; k < A.cols(); ++k)
            c.at_least("recovery: |cos| of learned vs planted direction, " + names[static_cast<std::size_t>(k)],
                       std::abs(cosine(A.col(k), B.col(k))), 0.9);
        c.expect("recovery: 2,000 steps in under 10 minutes", with_single.seconds < 600.0,
                 fmt(with_single.seconds) + " s");
    });

    run("linearity", "latent shift size predicts the measured parameter change", [&](Checks& c) {
        const ModelBundle& b = with_single.bundle;
        std::vector<int> attrs(15);
        for (int k = 0; k < 15; ++k)
            attrs[static_cast<std::size_t>(k)] = k;
        const auto t0 = Clock::now();
        const LinearityResult r =
            linearity_analysis(*b.directions, b.scaler, *b.backend.generator, pixel_reader(b), attrs, 200, 5);
        const double secs = seconds_since(t0);
        const auto names = attribute_names(12);
        for (std::size_t i = 0; i < attrs.size(); ++i)
            c.at_least("linearity: Pearson r over 200 probes, " + names[i], r.correlation[i], 0.85);
        c.expect("linearity: analysis under 1 minute", secs < 60.0, fmt(secs) + " s");
    });

    run("disentanglement", "single-attribute sampling does not increase leakage", [&](Checks& c) {
        without_single = train_synthetic(0.0);
        const ModelBundle& w = with_single.bundle;
        const ModelBundle& wo = without_single.bundle;
        const DisentanglementReport rw =
            disentanglement_report(*w.directions, w.scaler, *w.backend.generator, pixel_reader(w), 20, 3);
        const DisentanglementReport ro =
            disentanglement_report(*wo.directions, wo.scaler, *wo.backend.generator, pixel_reader(wo), 20, 3);
        const auto names = attribute_names(12);
        for (int k = 0; k < 15; ++k)
            c.expect("disentanglement: off-target leakage with <= without, " + names[static_cast<std::size_t>(k)],
                     rw.off_target(k) <= ro.off_target(k),
                     "with " + fmt(rw.off_target(k)) + ", without " + fmt(ro.off_target(k)));
        const double total = with_single.seconds + without_single.seconds;
        c.expect("disentanglement: both training runs under 20 minutes", total < 1200.0, fmt(total) + " s");
    });

    run("parameter-count", "default directions matrix size", [](Checks& c) {
        const DirectionsMatrix A(8, 512, 15);
        c.expect("directions: (8 x 512) x 15 trainables = 61,440", A.parameter_count() == 61440,
                 std::to_string(A.parameter_count()));
    });

    Pipeline pipeline;
    bool pipeline_ok = false;
    std::string pipeline_error;
    const auto tp = Clock::now();
    try
    {
        run_pipeline(pipeline, *with_single.bundle.directions);
        pipeline_ok = true;
    } catch (const std::exception& e)
    {
        pipeline_error = e.what();
    }
    const double pipeline_seconds = seconds_since(tp);
    std::cout << "toy pipeline trained in " << fmt(pipeline_seconds) << " s\n";

    run("oracle-suite", "loss, metric and post-training oracles", [&](Checks& c) {
        c.append(oracle_suite(true));
        c.expect("toy pipeline trained", pipeline_ok, pipeline_error);
        if (pipeline_ok)
            pipeline_oracles(c, pipeline, with_single);
    });

    run("fixed-point-suite", "identity edits, self reenactment and zero losses", [](Checks& c) {
        c.append(fixed_point_suite());
    });

    run("gradient-checks", "finite differences match autograd", [](Checks& c) {
        const auto t0 = Clock::now();
        c.append(gradient_suite());
        const double secs = seconds_since(t0);
        c.expect("gradients: all probes under 2 minutes", secs < 120.0, fmt(secs) + " s");
    });

    run("frozen-audits", "frozen modules stay frozen", [&](Checks& c) {
        c.expect("toy pipeline trained", pipeline_ok, pipeline_error);
        if (!pipeline_ok)
            return;
        const Pipeline& p = pipeline;
        c.expect("joint: generator digest unchanged", p.gen_digest_before == p.gen_digest_after);
        c.expect("joint: estimator digest unchanged", p.est_digest_before == p.est_digest_after);
        c.expect("fsr2: directions digest unchanged", p.fsr2_a_before == p.fsr2_a_after);
        c.expect("fsr2: encoder digest unchanged", p.fsr2_enc_before == p.fsr2_enc_after);

        // Gradient probes on a held-out pair.
        const ag::Var s = p.held.videos[0].frames[0].image.var(), t = p.held.videos[0].frames[3].image.var();
        auto enc = std::shared_ptr<InversionEncoder>(p.encoder->clone());
        enc->set_trainable(false);
        DirectionsMatrix A = p.b.directions->copy();
        JointStepResult j = joint_objective_sample(s, t, *enc, A, p.b.scaler, p.gen(), p.est(), p.b.basis,
                                                   LossWeights{}, 0.0);
        j.total.total.backward();
        c.at_most("joint: encoder gradient norm with cycle weight 0 and a frozen encoder",
                  ag::grad_norm(enc->parameters()), 0.0);
        c.expect("joint: directions still receive gradient", ag::grad_norm({A.var()}) > 0.0);

        TrainingContext ctx = p.b.context(&p.data);
        ctx.directions = p.b.directions->copy();
        ctx.encoder = std::shared_ptr<InversionEncoder>(p.encoder->clone());
        ctx.encoder->set_trainable(false);
        ag::Var(ctx.directions.var()).set_requires_grad(false);
        FsrComponents fsr = *p.b.fsr;
        fsr.feature_encoder = p.b.fsr->feature_encoder.clone();
        fsr.ft = p.b.fsr->ft.clone();
        for (auto v : fsr.feature_encoder.parameters())
            v.set_requires_grad(true);
        fsr_step2_loss(s, t, ctx, fsr, LossWeights{}).total.backward();
        c.at_most("fsr2: gradient norm on A", ag::grad_norm({ctx.directions.var()}), 0.0);
        c.at_most("fsr2: gradient norm on the encoder", ag::grad_norm(ctx.encoder->parameters()), 0.0);
        c.expect("fsr2: the feature encoder receives gradient", ag::grad_norm(fsr.feature_encoder.parameters()) > 0.0);
    });

    run("cycle-ablation", "joint training with the cycle loss vs without", [&](Checks& c) {
        c.expect("toy pipeline trained", pipeline_ok, pipeline_error);
        if (!pipeline_ok)
            return;
        c.expect("joint: held-out cycle metric with cycle <= without", pipeline.cycle_metric <= pipeline.cycle_metric_no_cycle,
                 "with " + fmt(pipeline.cycle_metric) + ", without " + fmt(pipeline.cycle_metric_no_cycle));
    });

    run("determinism", "reruns reproduce loss curves and CLI outputs", determinism_checks);

    int failed = 0;
    for (const auto& r : results)
        failed += !r.checks.all_pass();
    std::ostringstream summary;
    summary << "acceptance: " << results.size() - static_cast<std::size_t>(failed) << " of " << results.size()
            << " criteria passed\n";
    std::cout << summary.str();
    if (!report_path.empty())
    {
        std::ofstream os(report_path);
        for (const auto& r : results)
            print(os, r);
        os << summary.str();
    }
    return strict && failed > 0 ? 1 : 0;
}
