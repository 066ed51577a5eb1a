/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/backends.hpp
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

#ifndef FACEDIRS_BACKENDS_HPP
#define FACEDIRS_BACKENDS_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/image.hpp"
#include "facedirs/shape3d.hpp"

#include "Eigen/Core"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

enum class LatentSpace { sampled_z, mapped_w, extended_w_plus };

inline std::string to_string(LatentSpace s)
{
    switch (s)
    {
    case LatentSpace::sampled_z: return "sampled-z";
    case LatentSpace::mapped_w: return "mapped-w";
    case LatentSpace::extended_w_plus: return "extended-w-plus";
    }
    return "unknown";
}

/**
 * Per-layer generator latent, L×D. The flat form stacks layers row by row.
 */
struct LatentCode
{
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> layers;
    LatentSpace space = LatentSpace::mapped_w;

    int num_layers() const { return static_cast<int>(layers.rows()); }
    int dim() const { return static_cast<int>(layers.cols()); }

    Eigen::VectorXd flat() const { return Eigen::Map<const Eigen::VectorXd>(layers.data(), layers.size()); }

    ag::Var var() const
    {
        return ag::Var::constant(Eigen::Map<const Eigen::ArrayXd>(layers.data(), layers.size()),
                                 ag::Shape{static_cast<int>(layers.size())});
    }

    static LatentCode from_flat(const Eigen::VectorXd& flat, int num_layers, LatentSpace space)
    {
        if (num_layers <= 0 || flat.size() % num_layers != 0)
        {
            throw std::invalid_argument("LatentCode::from_flat: size " + std::to_string(flat.size()) +
                                        " not divisible into " + std::to_string(num_layers) + " layers");
        }
        LatentCode c;
        c.layers = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            flat.data(), num_layers, flat.size() / num_layers);
        c.space = space;
        return c;
    }

    bool is_finite() const { return layers.allFinite(); }
};

/// A generator feature map (c×h×w) at a given layer.
struct FeatureMap
{
    ag::Var values;
    int layer = 0;
};

class BackendUnavailable : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/**
 * Generator interface. Codes are passed as flat Vars so gradients can flow to
 * whatever produced them (a directions matrix, an encoder).
 */
class GeneratorBackend
{
public:
    virtual ~GeneratorBackend() = default;

    virtual std::string id() const = 0;
    virtual int num_layers() const = 0;
    virtual int latent_dim() const = 0;
    virtual int image_size() const = 0;
    /// Index of the layer that feature refinement operates on.
    virtual int refine_layer() const { return 4; }
    virtual int num_feature_layers() const = 0;

    virtual LatentCode map_latent(const Eigen::VectorXd& z) const = 0;
    virtual ag::Var synthesize(const ag::Var& code) const = 0;
    virtual FeatureMap feature_at(const ag::Var& code, int layer) const = 0;
    virtual ag::Var synthesize_with_feature(const ag::Var& code, const FeatureMap& feature) const = 0;

    /// Weights that generator tuning may update.
    virtual std::vector<ag::Var> parameters() const = 0;
    /// Enables or disables gradient accumulation on parameters().
    virtual void set_trainable(bool trainable) = 0;
    virtual std::unique_ptr<GeneratorBackend> clone() const = 0;

    std::uint64_t digest() const { return ag::digest(parameters()); }

    ImageTensor render(const LatentCode& code) const
    {
        ag::NoGradGuard guard;
        return ImageTensor::from_var(synthesize(code.var()));
    }
};

/// Pose/expression (raw units) and identity coefficients estimated from one image.
struct ShapeEstimate
{
    ag::Var pose_expr;
    ag::Var identity;
};

/**
 * The estimator bundle: shape regressor, identity, perceptual and style
 * networks. All outputs are differentiable with respect to the image.
 */
class EstimatorSuite
{
public:
    virtual ~EstimatorSuite() = default;

    virtual int num_expr() const = 0;
    virtual int num_identity() const = 0;

    virtual ShapeEstimate estimate(const ag::Var& image) const = 0;
    ag::Var pose_expr(const ag::Var& image) const { return estimate(image).pose_expr; }
    ag::Var shape_identity(const ag::Var& image) const { return estimate(image).identity; }
    /// Unit-norm 512-vector.
    virtual ag::Var identity_embed(const ag::Var& image) const = 0;
    virtual std::vector<ag::Var> perceptual(const ag::Var& image) const = 0;
    /// 512-vector.
    virtual ag::Var style_embed(const ag::Var& image) const = 0;
    virtual std::uint64_t digest() const = 0;

    PoseExpressionParams pose_expr_params(const ImageTensor& image) const
    {
        ag::NoGradGuard guard;
        return PoseExpressionParams::from_vector(pose_expr(image.var()).value().matrix());
    }
    IdentityParams identity_params(const ImageTensor& image) const
    {
        ag::NoGradGuard guard;
        return IdentityParams{shape_identity(image.var()).value().matrix()};
    }
};

/**
 * Registry of backend factories keyed by id ("toy", "external:<name>").
 * External adapters are declared but only the toy backend ships; requesting
 * an adapter without weights throws BackendUnavailable.
 */
struct BackendPair
{
    std::shared_ptr<GeneratorBackend> generator;
    std::shared_ptr<EstimatorSuite> estimators;
};

using BackendFactory = std::function<BackendPair(std::uint64_t seed)>;

inline std::map<std::string, BackendFactory>& backend_registry()
{
    static std::map<std::string, BackendFactory> registry;
    return registry;
}

inline void register_backend(const std::string& id, BackendFactory factory)
{
    backend_registry()[id] = std::move(factory);
}

inline BackendPair create_backend(const std::string& id, std::uint64_t seed)
{
    auto& reg = backend_registry();
    auto it = reg.find(id);
    if (it != reg.end())
    {
        return it->second(seed);
    }
    if (id.rfind("external:", 0) == 0)
    {
        throw BackendUnavailable("backend '" + id +
                                 "' is an external adapter; no weights are bundled with this build");
    }
    throw std::invalid_argument("unknown backend id '" + id + "'");
}

} // namespace facedirs

#endif /* FACEDIRS_BACKENDS_HPP */
