/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/feature_refine.hpp
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

#ifndef FACEDIRS_FEATURE_REFINE_HPP
#define FACEDIRS_FEATURE_REFINE_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/inversion.hpp"
#include "facedirs/serialize.hpp"

#include "Eigen/Core"

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/// Additive correction of the layer-4 feature map.
struct FeatureShift
{
    ag::Var delta;
};

namespace detail {

inline ag::Var conv_param(std::mt19937_64& rng, int out, int in, int k, double gain)
{
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double scale = gain / std::sqrt(static_cast<double>(in * k * k));
    ag::Array a(static_cast<Eigen::Index>(out) * in * k * k);
    for (auto& v : a)
    {
        v = scale * gauss(rng);
    }
    return ag::Var::parameter(a, ag::Shape{out, in, k, k});
}

inline ag::Var bias_param(int out, double value = 0.0)
{
    return ag::Var::parameter(ag::Array::Constant(out, value), ag::Shape{out});
}

inline ag::Var copy_param(const ag::Var& p)
{
    ag::Var c = ag::Var::parameter(p.value(), p.shape());
    c.set_requires_grad(p.requires_grad());
    return c;
}

inline void check_feature_shape(const ag::Var& a, const ag::Var& b, const char* what)
{
    if (a.shape() != b.shape())
    {
        throw std::invalid_argument(std::string(what) + ": feature shape " + ag::shape_str(a.shape()) +
                                    " does not match " + ag::shape_str(b.shape()));
    }
}

} // namespace detail

/**
 * Feature encoder E_F: a small residual convolutional network from the
 * image (in pre-activation units) plus two positional channels to a
 * layer-4 shift. The 1×1 output convolution sees both the hidden features
 * and the inputs; it starts at zero, so an untrained encoder predicts no shift.
 */
class FeatureEncoder
{
public:
    FeatureEncoder(int image_size, int feature_channels, std::uint64_t seed, int hidden = 16)
        : size_(image_size), out_channels_(feature_channels)
    {
        std::mt19937_64 rng(seed);
        w1_ = detail::conv_param(rng, hidden, 5, 3, 1.0);
        b1_ = detail::bias_param(hidden);
        w2_ = detail::conv_param(rng, hidden, hidden, 3, 0.5);
        b2_ = detail::bias_param(hidden);
        const int head_in = hidden + 5;
        w_out_ = ag::Var::parameter(ag::Array::Zero(static_cast<Eigen::Index>(feature_channels) * head_in),
                                    ag::Shape{feature_channels, head_in, 1, 1});
        b_out_ = detail::bias_param(feature_channels);

        // Distance from the centre along x and y, normalized to [0, 1].
        const double c = 0.5 * (size_ - 1);
        ag::Array pos(2 * size_ * size_);
        for (int y = 0; y < size_; ++y)
        {
            for (int x = 0; x < size_; ++x)
            {
                pos(y * size_ + x) = std::abs(x - c) / c;
                pos(size_ * size_ + y * size_ + x) = std::abs(y - c) / c;
            }
        }
        positional_ = ag::Var::constant(pos, ag::Shape{2, size_, size_});
    }

    ag::Var forward(const ag::Var& image) const
    {
        ag::Var x = ag::concat_channels({ag::atanh(ag::clamp(image, -0.999, 0.999)), positional_});
        ag::Var h = ag::relu(ag::conv2d(x, w1_, b1_, {1, 1}));
        h = h + ag::relu(ag::conv2d(h, w2_, b2_, {1, 1}));
        return ag::conv2d(ag::concat_channels({h, x}), w_out_, b_out_, {1, 0});
    }

    std::vector<ag::Var> parameters() const { return {w1_, b1_, w2_, b2_, w_out_, b_out_}; }
    std::uint64_t digest() const { return ag::digest(parameters()); }

    FeatureEncoder clone() const
    {
        FeatureEncoder c = *this;
        c.w1_ = detail::copy_param(w1_);
        c.b1_ = detail::copy_param(b1_);
        c.w2_ = detail::copy_param(w2_);
        c.b2_ = detail::copy_param(b2_);
        c.w_out_ = detail::copy_param(w_out_);
        c.b_out_ = detail::copy_param(b_out_);
        return c;
    }

private:
    int size_;
    int out_channels_;
    ag::Var w1_, b1_, w2_, b2_, w_out_, b_out_;
    ag::Var positional_;
};

/**
 * Feature transformation module: two blocks of two 3×3 convolutions
 * followed by a 1×1 head split into γ and β. Starts at γ = 1, β = 0.
 */
class FTModule
{
public:
    FTModule(int channels, std::uint64_t seed) : channels_(channels)
    {
        std::mt19937_64 rng(seed);
        for (int i = 0; i < 4; ++i)
        {
            convs_.push_back(detail::conv_param(rng, channels, channels, 3, 1.0));
            biases_.push_back(detail::bias_param(channels));
        }
        head_w_ = ag::Var::parameter(ag::Array::Zero(2 * channels * channels), ag::Shape{2 * channels, channels, 1, 1});
        ag::Array hb = ag::Array::Zero(2 * channels);
        hb.head(channels).setOnes();
        head_b_ = ag::Var::parameter(hb, ag::Shape{2 * channels});
    }

    int channels() const { return channels_; }

    /// (γ, β) for a feature difference d (c×h×w).
    std::pair<ag::Var, ag::Var> modulation(const ag::Var& d) const
    {
        if (d.shape().size() != 3 || d.shape()[0] != channels_)
        {
            throw std::invalid_argument("FTModule: expected a " + std::to_string(channels_) +
                                        "-channel feature map, got " + ag::shape_str(d.shape()));
        }
        ag::Var h = d;
        for (int block = 0; block < 2; ++block)
        {
            h = ag::relu(ag::conv2d(h, convs_[2 * block], biases_[2 * block], {1, 1}));
            h = ag::relu(ag::conv2d(h, convs_[2 * block + 1], biases_[2 * block + 1], {1, 1}));
        }
        ag::Var out = ag::conv2d(h, head_w_, head_b_, {1, 0});
        const Eigen::Index plane = d.size();
        return {ag::slice(out, 0, plane, d.shape()), ag::slice(out, plane, plane, d.shape())};
    }

    std::vector<ag::Var> parameters() const
    {
        std::vector<ag::Var> p;
        for (int i = 0; i < 4; ++i)
        {
            p.push_back(convs_[i]);
            p.push_back(biases_[i]);
        }
        p.push_back(head_w_);
        p.push_back(head_b_);
        return p;
    }
    std::uint64_t digest() const { return ag::digest(parameters()); }

    FTModule clone() const
    {
        FTModule c = *this;
        for (int i = 0; i < 4; ++i)
        {
            c.convs_[i] = detail::copy_param(convs_[i]);
            c.biases_[i] = detail::copy_param(biases_[i]);
        }
        c.head_w_ = detail::copy_param(head_w_);
        c.head_b_ = detail::copy_param(head_b_);
        return c;
    }

private:
    int channels_;
    std::vector<ag::Var> convs_;
    std::vector<ag::Var> biases_;
    ag::Var head_w_, head_b_;
};

/// γ ⊙ Δ + β.
inline ag::Var modulate(const ag::Var& gamma, const ag::Var& beta, const ag::Var& delta)
{
    detail::check_feature_shape(gamma, delta, "modulate");
    detail::check_feature_shape(beta, delta, "modulate");
    return gamma * delta + beta;
}

/// Δf4^r = γ ⊙ Δf4^s + β with (γ, β) = FT(f̂4^s − f4^r).
inline FeatureShift transform_shift(const FTModule& ft, const FeatureShift& delta_s, const ag::Var& f4_s_hat,
                                    const ag::Var& f4_r)
{
    detail::check_feature_shape(f4_s_hat, f4_r, "transform_shift");
    detail::check_feature_shape(delta_s.delta, f4_r, "transform_shift");
    auto [gamma, beta] = ft.modulation(f4_s_hat - f4_r);
    return {modulate(gamma, beta, delta_s.delta)};
}

/// Δf4 predicted for an image. The code only fixes the expected shape.
inline FeatureShift refine_inversion(const FeatureEncoder& enc_f, const GeneratorBackend& gen, const ag::Var& image,
                                     const ag::Var& code)
{
    FeatureShift s{enc_f.forward(image)};
    const ag::Var f4 = gen.feature_at(code, gen.refine_layer()).values;
    detail::check_feature_shape(s.delta, f4, "refine_inversion");
    return s;
}

/// Synthesis from code with layer-4 features f4(code) + Δ.
inline ag::Var synthesize_refined(const GeneratorBackend& gen, const ag::Var& code, const FeatureShift& shift)
{
    const int layer = gen.refine_layer();
    FeatureMap f = gen.feature_at(code, layer);
    detail::check_feature_shape(f.values, shift.delta, "synthesize_refined");
    return gen.synthesize_with_feature(code, {f.values + shift.delta, layer});
}

/**
 * Synthesis of a shifted code w_r with the source's layer-4 refinement
 * carried over by the FT module.
 */
inline ag::Var synthesize_shifted_refined(const GeneratorBackend& gen, const ag::Var& I_s, const ag::Var& w_s,
                                          const ag::Var& w_r, const FeatureEncoder& enc_f, const FTModule& ft)
{
    const int layer = gen.refine_layer();
    const ag::Var f4_s = gen.feature_at(w_s, layer).values;
    const FeatureShift delta_s{enc_f.forward(I_s)};
    const ag::Var f4_r = gen.feature_at(w_r, layer).values;
    const FeatureShift delta_r = transform_shift(ft, delta_s, f4_s + delta_s.delta, f4_r);
    return gen.synthesize_with_feature(w_r, {f4_r + delta_r.delta, layer});
}

/// Trained components needed for reenactment.
struct ReenactModel
{
    std::shared_ptr<const GeneratorBackend> generator;
    std::shared_ptr<const EstimatorSuite> estimators;
    std::shared_ptr<const InversionEncoder> encoder;
    std::shared_ptr<const DirectionsMatrix> directions;
    ParamScaler scaler;
    std::shared_ptr<const FeatureEncoder> feature_encoder; ///< optional
    std::shared_ptr<const FTModule> ft;                    ///< optional

    bool has_fsr() const { return feature_encoder && ft; }
};

/**
 * Full reenactment graph. With fsr == false this is exactly the joint-phase
 * path G(E_w(I_s) + A Δp).
 */
inline ag::Var reenact_image(const ag::Var& I_s, const ag::Var& I_t, const InversionEncoder& enc_w,
                             const DirectionsMatrix& A, const ParamScaler& scaler, const GeneratorBackend& gen,
                             const EstimatorSuite& est, const FeatureEncoder* enc_f, const FTModule* ft)
{
    ReenactGraph g = reenact_graph(I_s, I_t, enc_w, A, scaler, gen, est);
    if (!enc_f || !ft)
    {
        return g.image;
    }
    return synthesize_shifted_refined(gen, I_s, g.w_s, g.w_r, *enc_f, *ft);
}

inline ImageTensor reenact_with_fsr(const ImageTensor& source, const ImageTensor& target, const ReenactModel& m,
                                    bool fsr = true)
{
    if (fsr && !m.has_fsr())
    {
        throw std::invalid_argument("reenact_with_fsr: model has no feature refinement components");
    }
    ag::NoGradGuard guard;
    return ImageTensor::from_var(reenact_image(source.var(), target.var(), *m.encoder, *m.directions, m.scaler,
                                               *m.generator, *m.estimators,
                                               fsr ? m.feature_encoder.get() : nullptr, fsr ? m.ft.get() : nullptr));
}

inline void save_fsr(const FeatureEncoder& enc_f, const FTModule& ft, const std::string& path)
{
    auto arrays = params_to_arrays(enc_f.parameters());
    for (auto& a : params_to_arrays(ft.parameters()))
    {
        arrays.push_back(std::move(a));
    }
    save_arrays(path, "FFSR", arrays);
}

inline void load_fsr(FeatureEncoder& enc_f, FTModule& ft, const std::string& path)
{
    auto arrays = load_arrays(path, "FFSR");
    auto pe = enc_f.parameters();
    auto pf = ft.parameters();
    if (arrays.size() != pe.size() + pf.size())
    {
        throw std::runtime_error(path + ": wrong number of arrays for a feature-refinement checkpoint");
    }
    arrays_to_params({arrays.begin(), arrays.begin() + static_cast<long>(pe.size())}, pe, path);
    arrays_to_params({arrays.begin() + static_cast<long>(pe.size()), arrays.end()}, pf, path);
}

} // namespace facedirs

#endif /* FACEDIRS_FEATURE_REFINE_HPP */
