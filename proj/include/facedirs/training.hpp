/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/training.hpp
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
#pragma once

#ifndef FACEDIRS_TRAINING_HPP
#define FACEDIRS_TRAINING_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/feature_refine.hpp"
#include "facedirs/inversion.hpp"
#include "facedirs/losses.hpp"
#include "facedirs/serialize.hpp"
#include "facedirs/shape3d.hpp"
#include "facedirs/toy_data.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

enum class Phase { synthetic, mixed, paired, joint, fsr1, fsr2 };

inline std::string to_string(Phase p)
{
    switch (p)
    {
    case Phase::synthetic: return "synthetic";
    case Phase::mixed: return "mixed";
    case Phase::paired: return "paired";
    case Phase::joint: return "joint";
    case Phase::fsr1: return "fsr1";
    case Phase::fsr2: return "fsr2";
    }
    return "unknown";
}

inline Phase parse_phase(const std::string& s)
{
    for (Phase p : {Phase::synthetic, Phase::mixed, Phase::paired, Phase::joint, Phase::fsr1, Phase::fsr2})
    {
        if (to_string(p) == s)
        {
            return p;
        }
    }
    throw std::invalid_argument("unknown phase '" + s + "' (expected synthetic, mixed, paired, joint, fsr1, fsr2)");
}

struct TrainConfig
{
    Phase phase = Phase::synthetic;
    int batch_size = 16;
    int steps = 1000;
    double learning_rate = 1e-4;
    std::uint64_t seed = 1;
    LossWeights weights;
    double single_attr_prob = 0.5;
    double mixed_real_fraction = 0.5;
    double cycle_weight = 1.0;
    /// Save a checkpoint every k steps (0 disables).
    int checkpoint_every = 0;
    std::string checkpoint_dir;

    void validate() const
    {
        if (steps <= 0)
            throw std::invalid_argument("TrainConfig: steps must be > 0");
        if (batch_size <= 0)
            throw std::invalid_argument("TrainConfig: batch_size must be > 0");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (single_attr_prob < 0.0 || single_attr_prob > 1.0)
            throw std::invalid_argument("TrainConfig: single_attr_prob must lie in [0, 1]");
        if (mixed_real_fraction < 0.0 || mixed_real_fraction > 1.0)
            throw std::invalid_argument("TrainConfig: mixed_real_fraction must lie in [0, 1]");
        if (cycle_weight < 0.0)
            throw std::invalid_argument("TrainConfig: cycle_weight must be >= 0");
        if (checkpoint_every < 0)
            throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 0");
        weights.validate();
    }
};

/**
 * Reads a key = value file. Blank lines and lines starting with '#' are
 * skipped; whitespace around keys and values is trimmed.
 */
inline std::map<std::string, std::string> read_config_file(const std::string& path)
{
    std::ifstream is(path);
    if (!is)
    {
        throw std::runtime_error("cannot open config file '" + path + "'");
    }
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line))
    {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#')
        {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
        {
            throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

/// Applies key/value settings to a config. Unknown keys are an error.
inline void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv)
{
    for (const auto& [k, v] : kv)
    {
        try
        {
            if (k == "phase")
                cfg.phase = parse_phase(v);
            else if (k == "batch_size")
                cfg.batch_size = std::stoi(v);
            else if (k == "steps")
                cfg.steps = std::stoi(v);
            else if (k == "learning_rate")
                cfg.learning_rate = std::stod(v);
            else if (k == "seed")
                cfg.seed = std::stoull(v);
            else if (k == "single_attr_prob")
                cfg.single_attr_prob = std::stod(v);
            else if (k == "mixed_real_fraction")
                cfg.mixed_real_fraction = std::stod(v);
            else if (k == "cycle_weight")
                cfg.cycle_weight = std::stod(v);
            else if (k == "checkpoint_every")
                cfg.checkpoint_every = std::stoi(v);
            else if (k == "checkpoint_dir")
                cfg.checkpoint_dir = v;
            else if (k == "lambda_r")
                cfg.weights.reenactment = std::stod(v);
            else if (k == "lambda_id")
                cfg.weights.identity = std::stod(v);
            else if (k == "lambda_per")
                cfg.weights.perceptual = std::stod(v);
            else if (k == "lambda_pix")
                cfg.weights.pixel = std::stod(v);
            else if (k == "lambda_style")
                cfg.weights.style = std::stod(v);
            else
                throw std::invalid_argument("unknown config key '" + k + "'");
        } catch (const std::invalid_argument& e)
        {
            if (std::string(e.what()).rfind("unknown", 0) == 0)
                throw;
            throw std::invalid_argument("config key '" + k + "': cannot parse '" + v + "'");
        } catch (const std::out_of_range&)
        {
            throw std::invalid_argument("config key '" + k + "': value '" + v + "' out of range");
        }
    }
}

enum class PairMode { unpaired_cross_subject, paired_same_video };

struct FrameRef
{
    int video = 0;
    int frame = 0;
};

/// Draws (source, target) frame references from a dataset.
class FramePairSampler
{
public:
    FramePairSampler(const Dataset& data, PairMode mode) : data_(&data), mode_(mode)
    {
        if (data.videos.empty())
        {
            throw std::invalid_argument("FramePairSampler: dataset has no videos");
        }
        for (const auto& v : data.videos)
        {
            if (v.frames.empty())
            {
                throw std::invalid_argument("FramePairSampler: video '" + v.id + "' has no frames");
            }
        }
        if (mode == PairMode::unpaired_cross_subject && data.videos.size() < 2)
        {
            throw std::invalid_argument("FramePairSampler: cross-subject pairs need at least two videos");
        }
    }

    PairMode mode() const { return mode_; }

    template <class Rng>
    std::pair<FrameRef, FrameRef> sample(Rng& rng) const
    {
        const int nv = static_cast<int>(data_->videos.size());
        std::uniform_int_distribution<int> pick_video(0, nv - 1);
        FrameRef s, t;
        s.video = pick_video(rng);
        if (mode_ == PairMode::paired_same_video)
        {
            t.video = s.video;
        } else
        {
            std::uniform_int_distribution<int> other(0, nv - 2);
            t.video = other(rng);
            if (t.video >= s.video)
                ++t.video;
        }
        const int ns = static_cast<int>(data_->videos[s.video].frames.size());
        const int nt = static_cast<int>(data_->videos[t.video].frames.size());
        s.frame = std::uniform_int_distribution<int>(0, ns - 1)(rng);
        if (mode_ == PairMode::paired_same_video && nt > 1)
        {
            t.frame = std::uniform_int_distribution<int>(0, nt - 2)(rng);
            if (t.frame >= s.frame)
                ++t.frame;
        } else
        {
            t.frame = std::uniform_int_distribution<int>(0, nt - 1)(rng);
        }
        return {s, t};
    }

    const Frame& frame(const FrameRef& r) const
    {
        return data_->videos[static_cast<std::size_t>(r.video)].frames[static_cast<std::size_t>(r.frame)];
    }

private:
    const Dataset* data_;
    PairMode mode_;
};

/// Everything the phases read or train.
struct TrainingContext
{
    std::shared_ptr<GeneratorBackend> generator;
    std::shared_ptr<EstimatorSuite> estimators;
    ShapeBasis basis;
    ParamScaler scaler;
    DirectionsMatrix directions;
    std::shared_ptr<InversionEncoder> encoder; ///< needed from the mixed phase on
    const Dataset* data = nullptr;             ///< needed from the mixed phase on
    LossLogger* logger = nullptr;
};

struct PhaseResult
{
    std::vector<double> loss_curve;
    long real_samples = 0;
    long total_samples = 0;
};

class TrainingDiverged : public std::runtime_error
{
public:
    TrainingDiverged(const std::string& msg, int step) : std::runtime_error(msg), step(step) {}
    int step;
};

/// Per-step RNG so that a run can resume from a checkpoint at any step.
inline std::mt19937_64 step_rng(std::uint64_t seed, long step)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
    return std::mt19937_64(seq);
}

/*
 * Checkpoint: the array container ("FCKP") holding the trainable arrays,
 * followed by the Adam step count (one value) and its first and second
 * moments, one array per trainable.
 */
inline void save_checkpoint(const std::string& path, const std::vector<ag::Var>& params, const ag::Adam& opt)
{
    std::vector<ag::Array> arrays = params_to_arrays(params);
    arrays.push_back(ag::Array::Constant(1, static_cast<double>(opt.steps_taken())));
    for (const auto& m : opt.first_moments())
        arrays.push_back(m);
    for (const auto& v : opt.second_moments())
        arrays.push_back(v);
    save_arrays(path, "FCKP", arrays);
}

inline void load_checkpoint(const std::string& path, std::vector<ag::Var> params, ag::Adam& opt)
{
    auto arrays = load_arrays(path, "FCKP");
    const std::size_t n = params.size();
    if (arrays.size() != 3 * n + 1)
    {
        throw std::runtime_error(path + ": checkpoint does not match the trainable set");
    }
    arrays_to_params({arrays.begin(), arrays.begin() + static_cast<long>(n)}, params, path);
    const long t = std::lround(arrays[n](0));
    std::vector<ag::Array> m(arrays.begin() + static_cast<long>(n) + 1, arrays.begin() + static_cast<long>(2 * n) + 1);
    std::vector<ag::Array> v(arrays.begin() + static_cast<long>(2 * n) + 1, arrays.end());
    opt.restore(t, std::move(m), std::move(v));
}

namespace detail {

/// Shared optimizer loop: checkpoints, logging and divergence handling.
template <class StepFn>
PhaseResult run_loop(const TrainConfig& cfg, const std::string& name, std::vector<ag::Var> params, StepFn&& step_fn,
                     LossLogger* logger, long start_step = 0, ag::Adam* external_opt = nullptr)
{
    cfg.validate();
    ag::Adam local(params, cfg.learning_rate);
    ag::Adam& opt = external_opt ? *external_opt : local;
    std::vector<ag::Array> last_good = params_to_arrays(params);
    PhaseResult result;
    for (long step = start_step; step < cfg.steps; ++step)
    {
        std::mt19937_64 rng = step_rng(cfg.seed, step);
        opt.zero_grad();
        ag::Var total = ag::Var::scalar(0.0);
        std::map<std::string, double> parts;
        const double inv = 1.0 / cfg.batch_size;
        for (int b = 0; b < cfg.batch_size; ++b)
        {
            LossTerms t = step_fn(rng, result);
            total = total + t.total * inv;
            for (const auto& [k, v] : t.parts)
                parts[k] += v * inv;
        }
        const double value = total.item();
        if (!std::isfinite(value))
        {
            arrays_to_params(last_good, params, name);
            throw TrainingDiverged(name + ": non-finite loss at step " + std::to_string(step) +
                                       "; parameters restored to the last good checkpoint",
                                   static_cast<int>(step));
        }
        total.backward();
        opt.step();
        result.loss_curve.push_back(value);
        parts["total"] = value;
        if (logger)
            logger->log(name, step, parts);
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
        {
            last_good = params_to_arrays(params);
            if (!cfg.checkpoint_dir.empty())
            {
                std::filesystem::create_directories(cfg.checkpoint_dir);
                save_checkpoint(cfg.checkpoint_dir + "/" + name + "_step" + std::to_string(step + 1) + ".ckpt",
                                params, opt);
            }
        }
    }
    return result;
}

inline Eigen::VectorXd sample_gaussian(std::mt19937_64& rng, int n)
{
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd z(n);
    for (auto& v : z)
        v = gauss(rng);
    return z;
}

inline Eigen::VectorXd raw_vector(const ag::Var& v) { return v.value().matrix(); }

/// One unpaired sample: source code and image, source estimate, target scaled params.
struct UnpairedSample
{
    ag::Var code;
    ag::Var image;
    ag::Var identity;
    Eigen::VectorXd p_s_scaled;
    Eigen::VectorXd p_t_scaled;
};

inline LossTerms unpaired_sample_loss(const UnpairedSample& s, const TrainingContext& ctx, const TrainConfig& cfg,
                                      std::mt19937_64& rng)
{
    const auto& gen = *ctx.generator;
    const auto& est = *ctx.estimators;
    auto [dp, mode] = sample_training_delta(s.p_s_scaled, s.p_t_scaled, cfg.single_attr_prob, ctx.scaler.a, rng);
    const Eigen::VectorXd target_raw = ctx.scaler.unscale(s.p_s_scaled + dp);
    ag::Var w_r = apply_shift(s.code, compute_shift(ag::Var::constant(dp.array()), ctx.directions), ctx.directions,
                              gen.num_layers());
    ag::Var I_r = gen.synthesize(w_r);
    ShapeEstimate e_r = est.estimate(I_r);
    ag::Var s_r = compose_shape_var(e_r.identity, e_r.pose_expr, ctx.basis);
    ag::Var s_gt = compose_shape_var(s.identity, ag::Var::constant(target_raw.array()), ctx.basis);
    return unpaired_objective(s.image, I_r, s_r, s_gt, cfg.weights, est, ctx.basis);
}

inline UnpairedSample synthetic_sample(const TrainingContext& ctx, std::mt19937_64& rng)
{
    const auto& gen = *ctx.generator;
    const auto& est = *ctx.estimators;
    ag::NoGradGuard guard;
    UnpairedSample s;
    const LatentCode w_s = gen.map_latent(sample_gaussian(rng, gen.latent_dim()));
    const LatentCode w_t = gen.map_latent(sample_gaussian(rng, gen.latent_dim()));
    s.code = w_s.var();
    s.image = gen.synthesize(s.code);
    ShapeEstimate e_s = est.estimate(s.image);
    ShapeEstimate e_t = est.estimate(gen.synthesize(w_t.var()));
    s.identity = e_s.identity;
    s.p_s_scaled = ctx.scaler.rescale(raw_vector(e_s.pose_expr));
    s.p_t_scaled = ctx.scaler.rescale(raw_vector(e_t.pose_expr));
    return s;
}

inline UnpairedSample real_sample(const TrainingContext& ctx, const FramePairSampler& sampler, std::mt19937_64& rng)
{
    auto [rs, rt] = sampler.sample(rng);
    const Frame& fs = sampler.frame(rs);
    const Frame& ft = sampler.frame(rt);
    ag::NoGradGuard guard;
    UnpairedSample s;
    s.image = fs.image.var();
    s.code = ctx.encoder->encode(s.image);
    s.identity = ag::Var::constant(fs.identity.coeffs.array());
    s.p_s_scaled = ctx.scaler.rescale(fs.params.vector());
    s.p_t_scaled = ctx.scaler.rescale(ft.params.vector());
    return s;
}

inline void require_real_data(const TrainingContext& ctx, const char* phase, bool need_encoder = true)
{
    if (!ctx.data || ctx.data->videos.empty())
        throw std::invalid_argument(std::string(phase) + " phase needs a dataset of real videos");
    if (need_encoder && !ctx.encoder)
        throw std::invalid_argument(std::string(phase) + " phase needs an inversion encoder");
}

} // namespace detail

/**
 * Which samples of a mixed-phase batch take an inverted real source. The
 * draws come from their own per-step stream, so the composition can be
 * audited without rendering anything. Fraction 0 makes no draws.
 */
inline std::vector<bool> mixed_batch_composition(const TrainConfig& cfg, long step)
{
    std::vector<bool> real(static_cast<std::size_t>(cfg.batch_size), false);
    if (cfg.mixed_real_fraction <= 0.0)
        return real;
    std::mt19937_64 rng = step_rng(cfg.seed ^ 0x6d69786564ULL, step);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::size_t i = 0; i < real.size(); ++i)
        real[i] = u01(rng) < cfg.mixed_real_fraction;
    return real;
}

/**
 * Mixed real/synthetic phase: each sample's source is an inverted real
 * frame or a sampled code, as given by mixed_batch_composition. With
 * fraction 0 the run matches the synthetic phase exactly.
 */
inline PhaseResult run_phase_mixed(const TrainConfig& cfg, TrainingContext& ctx, long start_step = 0,
                                   ag::Adam* opt = nullptr)
{
    std::unique_ptr<FramePairSampler> sampler;
    if (cfg.mixed_real_fraction > 0.0)
    {
        detail::require_real_data(ctx, "mixed");
        sampler = std::make_unique<FramePairSampler>(*ctx.data, PairMode::unpaired_cross_subject);
    }
    ag::Var(ctx.directions.var()).set_requires_grad(true);
    const std::string name = cfg.mixed_real_fraction > 0.0 ? "mixed" : "synthetic";
    long sample_index = 0;
    std::vector<bool> composition;
    return detail::run_loop(
        cfg, name, {ctx.directions.var()},
        [&](std::mt19937_64& rng, PhaseResult& r) {
            const long b = sample_index % cfg.batch_size;
            if (b == 0)
                composition = mixed_batch_composition(cfg, start_step + sample_index / cfg.batch_size);
            ++sample_index;
            const bool real = composition[static_cast<std::size_t>(b)];
            ++r.total_samples;
            if (real)
                ++r.real_samples;
            const auto s = real ? detail::real_sample(ctx, *sampler, rng) : detail::synthetic_sample(ctx, rng);
            return detail::unpaired_sample_loss(s, ctx, cfg, rng);
        },
        ctx.logger, start_step, opt);
}

/// Synthetic phase: A trained on pairs of sampled latent codes.
inline PhaseResult run_phase_synthetic(const TrainConfig& cfg, TrainingContext& ctx, long start_step = 0,
                                       ag::Adam* opt = nullptr)
{
    TrainConfig c = cfg;
    c.mixed_real_fraction = 0.0;
    return run_phase_mixed(c, ctx, start_step, opt);
}

/// Paired phase: same-video pairs, the paired objective, encoder frozen.
inline PhaseResult run_phase_paired(const TrainConfig& cfg, TrainingContext& ctx)
{
    detail::require_real_data(ctx, "paired");
    FramePairSampler sampler(*ctx.data, PairMode::paired_same_video);
    ag::Var(ctx.directions.var()).set_requires_grad(true);
    ctx.encoder->set_trainable(false);
    const auto& gen = *ctx.generator;
    const auto& est = *ctx.estimators;
    return detail::run_loop(
        cfg, "paired", {ctx.directions.var()},
        [&](std::mt19937_64& rng, PhaseResult& r) {
            ++r.total_samples;
            ++r.real_samples;
            auto [rs, rt] = sampler.sample(rng);
            const Frame& fs = sampler.frame(rs);
            const Frame& ft = sampler.frame(rt);
            ag::Var w_s;
            {
                ag::NoGradGuard guard;
                w_s = ctx.encoder->encode(fs.image.var());
            }
            const Eigen::VectorXd dp = ctx.scaler.rescale(ft.params.vector()) - ctx.scaler.rescale(fs.params.vector());
            ag::Var w_r = apply_shift(w_s, compute_shift(ag::Var::constant(dp.array()), ctx.directions),
                                      ctx.directions, gen.num_layers());
            ag::Var I_r = gen.synthesize(w_r);
            ShapeEstimate e_r = est.estimate(I_r);
            ag::Var s_r = compose_shape_var(e_r.identity, e_r.pose_expr, ctx.basis);
            ag::Var s_gt = compose_shape_var(ag::Var::constant(fs.identity.coeffs.array()),
                                             ag::Var::constant(ft.params.vector().array()), ctx.basis);
            return paired_objective(ft.image.var(), I_r, s_r, s_gt, cfg.weights, est, ctx.basis);
        },
        ctx.logger);
}

/// Joint phase: encoder and A trained together on same-video pairs.
inline PhaseResult run_phase_joint(const TrainConfig& cfg, TrainingContext& ctx)
{
    detail::require_real_data(ctx, "joint");
    FramePairSampler sampler(*ctx.data, PairMode::paired_same_video);
    ag::Var(ctx.directions.var()).set_requires_grad(true);
    ctx.encoder->set_trainable(true);
    ctx.generator->set_trainable(false);
    std::vector<ag::Var> params{ctx.directions.var()};
    for (const auto& p : ctx.encoder->parameters())
        params.push_back(p);
    PhaseResult r = detail::run_loop(
        cfg, "joint", params,
        [&](std::mt19937_64& rng, PhaseResult& res) {
            ++res.total_samples;
            ++res.real_samples;
            auto [rs, rt] = sampler.sample(rng);
            JointStepResult j = joint_objective_sample(sampler.frame(rs).image.var(), sampler.frame(rt).image.var(),
                                                       *ctx.encoder, ctx.directions, ctx.scaler, *ctx.generator,
                                                       *ctx.estimators, ctx.basis, cfg.weights, cfg.cycle_weight);
            return j.total;
        },
        ctx.logger);
    ctx.encoder->set_trainable(false);
    return r;
}

/// Feature-refinement components plus the step-1 completion flag.
struct FsrComponents
{
    FeatureEncoder feature_encoder;
    FTModule ft;
    bool step1_completed = false;
};

inline FsrComponents make_fsr_components(const GeneratorBackend& gen, std::uint64_t seed)
{
    ag::NoGradGuard guard;
    const LatentCode probe = gen.map_latent(Eigen::VectorXd::Zero(gen.latent_dim()));
    const ag::Shape s = gen.feature_at(probe.var(), gen.refine_layer()).values.shape();
    if (s.size() != 3 || s[1] != gen.image_size() || s[2] != gen.image_size())
    {
        throw std::invalid_argument("feature refinement needs a full-resolution layer-" +
                                    std::to_string(gen.refine_layer()) + " feature map");
    }
    return {FeatureEncoder(gen.image_size(), s[0], seed), FTModule(s[0], seed + 1), false};
}

/// Step 1: the feature encoder learns Δf4 for inversions of real frames.
inline PhaseResult run_phase_fsr1(const TrainConfig& cfg, TrainingContext& ctx, FsrComponents& fsr)
{
    detail::require_real_data(ctx, "fsr1");
    ctx.encoder->set_trainable(false);
    ag::Var(ctx.directions.var()).set_requires_grad(false);
    std::vector<const Frame*> frames;
    for (const auto& v : ctx.data->videos)
        for (const auto& f : v.frames)
            frames.push_back(&f);
    for (auto p : fsr.feature_encoder.parameters())
        p.set_requires_grad(true);
    PhaseResult r = detail::run_loop(
        cfg, "fsr1", fsr.feature_encoder.parameters(),
        [&](std::mt19937_64& rng, PhaseResult& res) {
            ++res.total_samples;
            ++res.real_samples;
            const Frame& f = *frames[std::uniform_int_distribution<std::size_t>(0, frames.size() - 1)(rng)];
            ag::Var image = f.image.var();
            ag::Var w;
            {
                ag::NoGradGuard guard;
                w = ctx.encoder->encode(image);
            }
            const FeatureShift delta = refine_inversion(fsr.feature_encoder, *ctx.generator, image, w);
            return reconstruction_loss(image, synthesize_refined(*ctx.generator, w, delta), cfg.weights,
                                       *ctx.estimators);
        },
        ctx.logger);
    fsr.step1_completed = true;
    return r;
}

/// One step-2 sample loss: reenactment with refinement against the target.
inline LossTerms fsr_step2_loss(const ag::Var& I_s, const ag::Var& I_t, const TrainingContext& ctx,
                                const FsrComponents& fsr, const LossWeights& w)
{
    ag::Var I_r = reenact_image(I_s, I_t, *ctx.encoder, ctx.directions, ctx.scaler, *ctx.generator, *ctx.estimators,
                                &fsr.feature_encoder, &fsr.ft);
    return reconstruction_loss(I_t, I_r, w, *ctx.estimators);
}

/// Step 2: feature encoder and FT module on same-video reenactment; A and E_w frozen.
inline PhaseResult run_phase_fsr2(const TrainConfig& cfg, TrainingContext& ctx, FsrComponents& fsr)
{
    if (!fsr.step1_completed)
    {
        throw std::logic_error("fsr2: step 1 has not been run; train or load a step-1 checkpoint first");
    }
    detail::require_real_data(ctx, "fsr2");
    FramePairSampler sampler(*ctx.data, PairMode::paired_same_video);
    ctx.encoder->set_trainable(false);
    ag::Var(ctx.directions.var()).set_requires_grad(false);
    std::vector<ag::Var> params = fsr.feature_encoder.parameters();
    for (const auto& p : fsr.ft.parameters())
        params.push_back(p);
    for (auto p : params)
        p.set_requires_grad(true);
    return detail::run_loop(
        cfg, "fsr2", params,
        [&](std::mt19937_64& rng, PhaseResult& res) {
            ++res.total_samples;
            ++res.real_samples;
            auto [rs, rt] = sampler.sample(rng);
            return fsr_step2_loss(sampler.frame(rs).image.var(), sampler.frame(rt).image.var(), ctx, fsr,
                                  cfg.weights);
        },
        ctx.logger);
}

/// Saves step-1 or step-2 feature-refinement weights; the flag records which.
inline void save_fsr_checkpoint(const FsrComponents& fsr, const std::string& path)
{
    auto arrays = params_to_arrays(fsr.feature_encoder.parameters());
    for (auto& a : params_to_arrays(fsr.ft.parameters()))
        arrays.push_back(std::move(a));
    arrays.push_back(ag::Array::Constant(1, fsr.step1_completed ? 1.0 : 0.0));
    save_arrays(path, "FFSR", arrays);
}

inline void load_fsr_checkpoint(FsrComponents& fsr, const std::string& path)
{
    auto arrays = load_arrays(path, "FFSR");
    auto pe = fsr.feature_encoder.parameters();
    auto pf = fsr.ft.parameters();
    if (arrays.size() != pe.size() + pf.size() + 1)
    {
        throw std::runtime_error(path + ": not a feature-refinement checkpoint");
    }
    const auto mid = arrays.begin() + static_cast<long>(pe.size());
    arrays_to_params({arrays.begin(), mid}, pe, path);
    arrays_to_params({mid, mid + static_cast<long>(pf.size())}, pf, path);
    fsr.step1_completed = arrays.back()(0) != 0.0;
}

// ---------------------------------------------------------------------------
// Benchmarks

enum class BenchmarkKind { L, XL };

/// Mean absolute yaw/pitch/roll difference above 10 degrees.
inline bool benchmark_l_rule(const Eigen::Vector3d& d)
{
    return d.cwiseAbs().mean() > 10.0;
}

/// |Δyaw| > 30 and (|Δpitch| > 20 or |Δroll| > 20), degrees.
inline bool benchmark_xl_rule(const Eigen::Vector3d& d)
{
    return std::abs(d(0)) > 30.0 && (std::abs(d(1)) > 20.0 || std::abs(d(2)) > 20.0);
}

struct BenchmarkPair
{
    FrameRef source;
    FrameRef target;
};

struct Benchmark
{
    BenchmarkKind kind = BenchmarkKind::L;
    std::vector<BenchmarkPair> pairs;
    std::size_t candidates = 0;

    bool empty() const { return pairs.empty(); }
    std::string report() const
    {
        std::string k = kind == BenchmarkKind::L ? "L" : "XL";
        if (pairs.empty())
        {
            return "benchmark-" + k + ": EMPTY (0 of " + std::to_string(candidates) +
                   " same-video pairs satisfy the pose rule)";
        }
        return "benchmark-" + k + ": " + std::to_string(pairs.size()) + " pairs selected from " +
               std::to_string(candidates) + " same-video candidates";
    }
};

/**
 * Same-video (source, target) pairs whose cached head-pose difference
 * satisfies the L or XL rule. Qualifying pairs are shuffled with the seed
 * and truncated to max_pairs.
 */
inline Benchmark build_benchmark(const Dataset& data, BenchmarkKind kind, std::uint64_t seed,
                                 std::size_t max_pairs = 1000)
{
    Benchmark b;
    b.kind = kind;
    for (int v = 0; v < static_cast<int>(data.videos.size()); ++v)
    {
        const auto& frames = data.videos[static_cast<std::size_t>(v)].frames;
        for (int i = 0; i < static_cast<int>(frames.size()); ++i)
        {
            for (int j = 0; j < static_cast<int>(frames.size()); ++j)
            {
                if (i == j)
                    continue;
                ++b.candidates;
                const Eigen::Vector3d d = frames[static_cast<std::size_t>(j)].params.theta -
                                          frames[static_cast<std::size_t>(i)].params.theta;
                const bool ok = kind == BenchmarkKind::L ? benchmark_l_rule(d) : benchmark_xl_rule(d);
                if (ok)
                    b.pairs.push_back({{v, i}, {v, j}});
            }
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(b.pairs.begin(), b.pairs.end(), rng);
    if (b.pairs.size() > max_pairs)
        b.pairs.resize(max_pairs);
    return b;
}

/// Two columns per line: "<video>/<frame> <video>/<frame>".
inline void write_benchmark(const Benchmark& b, const Dataset& data, const std::string& path)
{
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write '" + path + "'");
    auto name = [&](const FrameRef& r) {
        const auto& v = data.videos[static_cast<std::size_t>(r.video)];
        return v.id + "/" + v.frames[static_cast<std::size_t>(r.frame)].name;
    };
    for (const auto& p : b.pairs)
        os << name(p.source) << ' ' << name(p.target) << '\n';
}

} // namespace facedirs

#endif /* FACEDIRS_TRAINING_HPP */
