/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/inversion.hpp
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

#ifndef FACEDIRS_INVERSION_HPP
#define FACEDIRS_INVERSION_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/losses.hpp"
#include "facedirs/serialize.hpp"
#include "facedirs/toy_backend.hpp"

#include "Eigen/Cholesky"
#include "Eigen/Core"

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/**
 * Real-image inversion encoder: image -> extended (per-layer) latent code.
 */
class InversionEncoder
{
public:
    virtual ~InversionEncoder() = default;

    virtual int num_layers() const = 0;
    virtual int latent_dim() const = 0;
    /// Flat code (num_layers × latent_dim); differentiable in image and parameters.
    virtual ag::Var encode(const ag::Var& image) const = 0;
    virtual std::vector<ag::Var> parameters() const = 0;
    virtual std::unique_ptr<InversionEncoder> clone() const = 0;

    std::uint64_t digest() const { return ag::digest(parameters()); }

    void set_trainable(bool trainable)
    {
        for (auto p : parameters())
        {
            p.set_requires_grad(trainable);
        }
    }

    LatentCode invert(const ImageTensor& image) const
    {
        ag::NoGradGuard guard;
        LatentCode code = LatentCode::from_flat(encode(image.var()).value().matrix(), num_layers(),
                                                LatentSpace::extended_w_plus);
        if (!code.is_finite())
        {
            throw std::runtime_error("inversion encoder produced a non-finite code");
        }
        return code;
    }
};

/**
 * Toy encoder: a strided convolutional stem plus moment features of the
 * blob windows, followed by a linear head to the flat code.
 */
class ToyInversionEncoder : public InversionEncoder
{
public:
    static constexpr int stem_channels = 4;
    static constexpr int stem_features = stem_channels * 4 * 4;
    static constexpr int feature_dim = toy::num_scene + stem_features + 1;

    ToyInversionEncoder(int num_layers, int latent_dim, std::uint64_t seed)
        : num_layers_(num_layers), latent_dim_(latent_dim)
    {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto init = [&](ag::Shape s, double scale) {
            Eigen::ArrayXd a(ag::numel(s));
            for (auto& v : a)
            {
                v = scale * gauss(rng);
            }
            return ag::Var::parameter(a, std::move(s));
        };
        conv1_w_ = init({stem_channels, 3, 3, 3}, 0.3);
        conv1_b_ = init({stem_channels}, 0.0);
        conv2_w_ = init({stem_channels, stem_channels, 3, 3}, 0.2);
        conv2_b_ = init({stem_channels}, 0.0);
        head_ = ag::Var::parameter(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(flat_dim()) * feature_dim),
                                   ag::Shape{flat_dim(), feature_dim});
    }

    int num_layers() const override { return num_layers_; }
    int latent_dim() const override { return latent_dim_; }
    int flat_dim() const { return num_layers_ * latent_dim_; }

    /// Input features to the linear head.
    ag::Var features(const ag::Var& image) const
    {
        ag::Var q = reader_.scene_estimate(image);
        ag::Var h = ag::relu(ag::conv2d(image, conv1_w_, conv1_b_, {2, 1}));
        h = ag::relu(ag::conv2d(h, conv2_w_, conv2_b_, {2, 1}));
        h = ag::reshape(ag::avg_pool2d(h, 4), ag::Shape{stem_features});
        return ag::concat({q, h, ag::Var::scalar(1.0)});
    }

    ag::Var encode(const ag::Var& image) const override { return ag::matmul(head_, features(image)); }

    std::vector<ag::Var> parameters() const override { return {conv1_w_, conv1_b_, conv2_w_, conv2_b_, head_}; }

    std::unique_ptr<InversionEncoder> clone() const override
    {
        auto c = std::make_unique<ToyInversionEncoder>(*this);
        c->conv1_w_ = copy_param(conv1_w_);
        c->conv1_b_ = copy_param(conv1_b_);
        c->conv2_w_ = copy_param(conv2_w_);
        c->conv2_b_ = copy_param(conv2_b_);
        c->head_ = copy_param(head_);
        return c;
    }

    void set_head(const Eigen::MatrixXd& w)
    {
        if (w.rows() != flat_dim() || w.cols() != feature_dim)
        {
            throw std::invalid_argument("ToyInversionEncoder::set_head: wrong shape");
        }
        ag::RowMatrix rm = w;
        head_.mutable_value() = Eigen::Map<const Eigen::ArrayXd>(rm.data(), rm.size());
    }

private:
    static ag::Var copy_param(const ag::Var& p)
    {
        ag::Var c = ag::Var::parameter(p.value(), p.shape());
        c.set_requires_grad(p.requires_grad());
        return c;
    }

    int num_layers_;
    int latent_dim_;
    ToyEstimators reader_;
    ag::Var conv1_w_, conv1_b_, conv2_w_, conv2_b_, head_;
};

/**
 * Warm start for the toy encoder head: ridge regression of codes on the
 * moment features and bias over n synthesized images. Weights on the
 * convolutional features start at zero.
 */
inline void warm_start_encoder(ToyInversionEncoder& enc, const GeneratorBackend& gen, int n, std::uint64_t seed,
                               double ridge = 1e-6)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int f = toy::num_scene + 1;
    Eigen::MatrixXd F(f, n);
    Eigen::MatrixXd W(enc.flat_dim(), n);
    ag::NoGradGuard guard;
    for (int i = 0; i < n; ++i)
    {
        Eigen::VectorXd z(gen.latent_dim());
        for (auto& v : z)
        {
            v = gauss(rng);
        }
        const LatentCode code = gen.map_latent(z);
        const Eigen::VectorXd feats = enc.features(gen.synthesize(code.var())).value().matrix();
        F.col(i) << feats.head(toy::num_scene), 1.0;
        W.col(i) = code.flat();
    }
    const Eigen::MatrixXd gram = F * F.transpose() + ridge * n * Eigen::MatrixXd::Identity(f, f);
    const Eigen::MatrixXd fit = gram.ldlt().solve(F * W.transpose()).transpose();
    Eigen::MatrixXd head = Eigen::MatrixXd::Zero(enc.flat_dim(), ToyInversionEncoder::feature_dim);
    head.leftCols(toy::num_scene) = fit.leftCols(toy::num_scene);
    head.rightCols(1) = fit.rightCols(1);
    enc.set_head(head);
}

/// Yields a (source, target) image pair for encoder training.
using ImagePairSource = std::function<std::pair<ImageTensor, ImageTensor>(std::mt19937_64&)>;

struct EncoderTrainConfig
{
    int steps = 200;
    int batch_size = 8;
    double learning_rate = 1e-4;
    std::uint64_t seed = 1;
    LossWeights weights;
};

/// Trains an encoder on the symmetric source/target reconstruction loss. Returns the loss curve.
inline std::vector<double> train_encoder(InversionEncoder& enc, const GeneratorBackend& gen, const EstimatorSuite& est,
                                         const ImagePairSource& pairs, const EncoderTrainConfig& cfg,
                                         LossLogger* logger = nullptr)
{
    std::mt19937_64 rng(cfg.seed);
    enc.set_trainable(true);
    ag::Adam opt(enc.parameters(), cfg.learning_rate);
    std::vector<double> curve;
    for (int step = 0; step < cfg.steps; ++step)
    {
        opt.zero_grad();
        ag::Var total = ag::Var::scalar(0.0);
        std::map<std::string, double> parts;
        for (int b = 0; b < cfg.batch_size; ++b)
        {
            const auto [src, tgt] = pairs(rng);
            ag::Var I_s = src.var(), I_t = tgt.var();
            LossTerms t = encoder_objective(I_s, gen.synthesize(enc.encode(I_s)), I_t, gen.synthesize(enc.encode(I_t)),
                                            cfg.weights, est);
            total = total + t.total / static_cast<double>(cfg.batch_size);
            for (const auto& [k, v] : t.parts)
            {
                parts[k] += v / cfg.batch_size;
            }
        }
        if (!std::isfinite(total.item()))
        {
            throw std::runtime_error("train_encoder: non-finite loss at step " + std::to_string(step));
        }
        total.backward();
        opt.step();
        curve.push_back(total.item());
        if (logger)
        {
            logger->log("encoder", step, parts);
        }
    }
    return curve;
}

struct TuningConfig
{
    int steps = 200;
    double learning_rate = 1e-4;
    /// Reconstruction terms used while tuning (style is left out by default).
    ReconstructionSet losses{true, true, true, false};
    LossWeights weights;
};

struct TuningResult
{
    std::unique_ptr<GeneratorBackend> generator;
    std::vector<double> loss_curve;
    std::vector<double> pixel_curve;
};

/**
 * Tunes a copy of the generator so that synthesize(code) reconstructs image.
 * The shared backend is never modified.
 */
inline TuningResult tune_generator(const GeneratorBackend& backend, const ImageTensor& image, const LatentCode& code,
                                   const TuningConfig& cfg, const EstimatorSuite& est)
{
    if (cfg.steps < 0)
    {
        throw std::invalid_argument("tune_generator: steps must be >= 0");
    }
    TuningResult result;
    result.generator = backend.clone();
    if (cfg.steps == 0)
    {
        return result;
    }
    result.generator->set_trainable(true);
    ag::Adam opt(result.generator->parameters(), cfg.learning_rate);
    const ag::Var target = image.var();
    const ag::Var w = code.var();
    for (int step = 0; step <= cfg.steps; ++step)
    {
        opt.zero_grad();
        ag::Var out = result.generator->synthesize(w);
        LossTerms t = reconstruction_loss(target, out, cfg.weights, est, cfg.losses);
        const double v = t.value();
        if (!std::isfinite(v))
        {
            result.generator->set_trainable(false);
            throw std::runtime_error("tune_generator: non-finite loss at step " + std::to_string(step) +
                                     " (pixel=" + std::to_string(t.parts["pixel"]) + ")");
        }
        result.loss_curve.push_back(v);
        result.pixel_curve.push_back(t.parts.count("pixel") ? t.parts["pixel"] : 0.0);
        if (step == cfg.steps)
        {
            break; // last entry records the final loss
        }
        t.total.backward();
        opt.step();
    }
    result.generator->set_trainable(false);
    return result;
}

/// FNV-1a hash of an image's pixel values.
inline std::uint64_t image_hash(const ImageTensor& img)
{
    return ag::digest({ag::Var::constant(img.data)});
}

/**
 * Tuned generators cached per source frame. Thread-safe.
 */
class TunedBackendCache
{
public:
    std::shared_ptr<const GeneratorBackend> get_or_tune(const GeneratorBackend& base, const ImageTensor& source,
                                                        const LatentCode& code, const TuningConfig& cfg,
                                                        const EstimatorSuite& est)
    {
        const std::uint64_t key = image_hash(source) ^ (static_cast<std::uint64_t>(cfg.steps) << 1);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            auto it = cache_.find(key);
            if (it != cache_.end())
            {
                return it->second;
            }
        }
        std::shared_ptr<const GeneratorBackend> tuned = tune_generator(base, source, code, cfg, est).generator;
        std::lock_guard<std::mutex> lock(mutex_);
        return cache_.emplace(key, tuned).first->second;
    }

    std::size_t size() const
    {
        std::lock_guard<std::mutex> lock(mutex_);
        return cache_.size();
    }

private:
    mutable std::mutex mutex_;
    std::map<std::uint64_t, std::shared_ptr<const GeneratorBackend>> cache_;
};

/**
 * The reenactment graph on real images: w_r = E(I_s) + A (p̂_t − p̂_s) in
 * scaled units, I_r = G(w_r). Everything stays differentiable.
 */
struct ReenactGraph
{
    ag::Var w_s;
    ag::Var w_r;
    ag::Var image;
    ShapeEstimate source;
    ShapeEstimate target;
};

inline ReenactGraph reenact_graph(const ag::Var& I_s, const ag::Var& I_t, const InversionEncoder& enc,
                                  const DirectionsMatrix& A, const ParamScaler& scaler, const GeneratorBackend& gen,
                                  const EstimatorSuite& est)
{
    ReenactGraph g;
    g.source = est.estimate(I_s);
    g.target = est.estimate(I_t);
    g.w_s = enc.encode(I_s);
    ag::Var dp = scaler.rescale(g.target.pose_expr) - scaler.rescale(g.source.pose_expr);
    g.w_r = apply_shift(g.w_s, compute_shift(dp, A), A, gen.num_layers());
    g.image = gen.synthesize(g.w_r);
    return g;
}

struct JointStepResult
{
    LossTerms directions;
    LossTerms encoder;
    LossTerms cycle;
    LossTerms total;
};

/// One paired sample's joint objective (directions + encoder + cycle).
inline JointStepResult joint_objective_sample(const ag::Var& I_s, const ag::Var& I_t, const InversionEncoder& enc,
                                              const DirectionsMatrix& A, const ParamScaler& scaler,
                                              const GeneratorBackend& gen, const EstimatorSuite& est,
                                              const ShapeBasis& basis, const LossWeights& w, double cycle_weight)
{
    JointStepResult r;
    ReenactGraph g = reenact_graph(I_s, I_t, enc, A, scaler, gen, est);
    ShapeEstimate e_r = est.estimate(g.image);
    ag::Var s_r = compose_shape_var(e_r.identity, e_r.pose_expr, basis);
    ag::Var s_gt = compose_shape_var(g.source.identity, g.target.pose_expr, basis);
    r.directions = directions_objective(I_t, g.image, s_r, s_gt, w, est, basis);
    r.encoder = encoder_objective(I_s, gen.synthesize(g.w_s), I_t, gen.synthesize(enc.encode(I_t)), w, est);
    if (cycle_weight != 0.0)
    {
        ReenactFn fn = [&](const ag::Var& a, const ag::Var& b) {
            return reenact_graph(a, b, enc, A, scaler, gen, est).image;
        };
        r.cycle = cycle_loss(I_s, I_t, fn, w, est);
    }
    r.total = joint_objective(r.directions, r.encoder, r.cycle, cycle_weight);
    return r;
}

/**
 * One optimizer step of joint training on a batch of same-identity pairs.
 * Only the encoder and A (the optimizer's parameters) move; the generator
 * and estimators are used frozen.
 */
inline std::map<std::string, double> joint_step(const std::vector<std::pair<ImageTensor, ImageTensor>>& batch,
                                                const InversionEncoder& enc, const DirectionsMatrix& A,
                                                const ParamScaler& scaler, const GeneratorBackend& gen,
                                                const EstimatorSuite& est, const ShapeBasis& basis,
                                                const LossWeights& w, double cycle_weight, ag::Adam& opt)
{
    if (batch.empty())
    {
        throw std::invalid_argument("joint_step: empty batch");
    }
    opt.zero_grad();
    ag::Var total = ag::Var::scalar(0.0);
    std::map<std::string, double> parts;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& [src, tgt] : batch)
    {
        JointStepResult r = joint_objective_sample(src.var(), tgt.var(), enc, A, scaler, gen, est, basis, w,
                                                   cycle_weight);
        total = total + r.total.total * inv;
        for (const auto& [k, v] : r.total.parts)
        {
            parts[k] += v * inv;
        }
    }
    if (!std::isfinite(total.item()))
    {
        throw std::runtime_error("joint_step: non-finite loss");
    }
    total.backward();
    opt.step();
    return parts;
}

/// Stores encoder parameters in a checkpoint.
inline void save_encoder(const InversionEncoder& enc, const std::string& path)
{
    save_arrays(path, "FENC", params_to_arrays(enc.parameters()));
}

inline void load_encoder(InversionEncoder& enc, const std::string& path)
{
    arrays_to_params(load_arrays(path, "FENC"), enc.parameters(), path);
}

} // namespace facedirs

#endif /* FACEDIRS_INVERSION_HPP */
