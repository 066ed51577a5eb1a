/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/toy_backend.hpp
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

#ifndef FACEDIRS_TOY_BACKEND_HPP
#define FACEDIRS_TOY_BACKEND_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"

#include "Eigen/Core"
#include "Eigen/LU"
#include "Eigen/QR"

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/**
 * Layout of the toy scene vector q:
 *   0 yaw, 1 pitch, 2 roll, 3..14 expression 1..12, 15..18 identity 0..3.
 *
 * Expression semantics: 1 left eye open, 2 right eye open, 3 gaze,
 * 4 left brow, 5 right brow, 6 brow furrow, 7 mouth open, 8 mouth width,
 * 9 jaw shift, 10 pucker, 11 smile (cheek raise), 12 cheek puff.
 */
namespace toy {

constexpr int num_pose_expr = 15;
constexpr int num_identity_dims = 4;
constexpr int num_scene = num_pose_expr + num_identity_dims;
constexpr int image_size = 64;
constexpr double center = 31.5;
constexpr double pi = 3.14159265358979323846;

/// Raw units per unit of q for each pose/expression coordinate.
inline Eigen::ArrayXd raw_scale()
{
    Eigen::ArrayXd s = Eigen::ArrayXd::Constant(num_pose_expr, 2.0);
    s(0) = 30.0; // yaw, degrees
    s(1) = 20.0; // pitch
    s(2) = 20.0; // roll
    return s;
}

/// Attribute groups sampled with a shared factor (correlated attributes).
inline std::vector<std::vector<int>> correlated_groups()
{
    return {{0, 2, 5}, {1, 6, 7}, {3, 4, 8}, {9, 11, 12}, {10, 13, 14}};
}

/// Band pixels: the 4 pixel border of every channel, ordered channel-major.
inline std::vector<Eigen::Index> band_indices()
{
    std::vector<Eigen::Index> idx;
    for (int c = 0; c < 3; ++c)
    {
        for (int y = 0; y < image_size; ++y)
        {
            for (int x = 0; x < image_size; ++x)
            {
                if (x < 4 || x >= image_size - 4 || y < 4 || y >= image_size - 4)
                {
                    idx.push_back((static_cast<Eigen::Index>(c) * image_size + y) * image_size + x);
                }
            }
        }
    }
    return idx;
}

/**
 * Anisotropic Gaussian blob on an image_size² plane.
 * params = [cx, cy, sx, sy, phi, amp]; sx/sy are standard deviations along
 * the axes rotated by phi.
 */
inline ag::Var gaussian_splat(const ag::Var& params)
{
    const int n = image_size;
    const Eigen::ArrayXd p = params.value();
    Eigen::ArrayXd out(n * n);
    const double c = std::cos(p(4)), s = std::sin(p(4));
    const double isx2 = 1.0 / (p(2) * p(2)), isy2 = 1.0 / (p(3) * p(3));
    for (int y = 0; y < n; ++y)
    {
        const double dy = y - p(1);
        for (int x = 0; x < n; ++x)
        {
            const double dx = x - p(0);
            const double u1 = c * dx + s * dy;
            const double u2 = -s * dx + c * dy;
            out(y * n + x) = p(5) * std::exp(-0.5 * (u1 * u1 * isx2 + u2 * u2 * isy2));
        }
    }
    auto pn = params.node();
    return ag::make_op(out, ag::Shape{n * n}, {params}, [pn, out, n](ag::Node& self) {
        const Eigen::ArrayXd& q = pn->value;
        const double c = std::cos(q(4)), s = std::sin(q(4));
        const double isx2 = 1.0 / (q(2) * q(2)), isy2 = 1.0 / (q(3) * q(3));
        Eigen::ArrayXd g = Eigen::ArrayXd::Zero(6);
        for (int y = 0; y < n; ++y)
        {
            const double dy = y - q(1);
            for (int x = 0; x < n; ++x)
            {
                const double gv = self.grad(y * n + x) * out(y * n + x);
                if (gv == 0.0)
                {
                    continue;
                }
                const double dx = x - q(0);
                const double u1 = c * dx + s * dy;
                const double u2 = -s * dx + c * dy;
                g(0) += gv * (u1 * c * isx2 - u2 * s * isy2);
                g(1) += gv * (u1 * s * isx2 + u2 * c * isy2);
                g(2) += gv * u1 * u1 * isx2 / q(2);
                g(3) += gv * u2 * u2 * isy2 / q(3);
                g(4) += gv * u1 * u2 * (isy2 - isx2);
                g(5) += gv / q(5);
            }
        }
        pn->accumulate(g);
    });
}

/**
 * Raw intensity moments of one channel inside a window [x0,x1)×[y0,y1),
 * with coordinates relative to the window center:
 * [m0, Σx v, Σy v, Σx² v, Σy² v, Σxy v].
 */
inline ag::Var window_moments(const ag::Var& image, int channel, int x0, int x1, int y0, int y1)
{
    const int h = image.shape()[1], w = image.shape()[2];
    const double xc = 0.5 * (x0 + x1 - 1), yc = 0.5 * (y0 + y1 - 1);
    const Eigen::ArrayXd& v = image.value();
    Eigen::ArrayXd m = Eigen::ArrayXd::Zero(6);
    for (int y = y0; y < y1; ++y)
    {
        const double ry = y - yc;
        for (int x = x0; x < x1; ++x)
        {
            const double rx = x - xc;
            const double val = v((static_cast<Eigen::Index>(channel) * h + y) * w + x);
            m(0) += val;
            m(1) += rx * val;
            m(2) += ry * val;
            m(3) += rx * rx * val;
            m(4) += ry * ry * val;
            m(5) += rx * ry * val;
        }
    }
    auto in = image.node();
    return ag::make_op(m, ag::Shape{6}, {image}, [in, channel, h, w, x0, x1, y0, y1, xc, yc](ag::Node& self) {
        Eigen::ArrayXd& g = in->grad_buffer();
        const Eigen::ArrayXd& go = self.grad;
        for (int y = y0; y < y1; ++y)
        {
            const double ry = y - yc;
            for (int x = x0; x < x1; ++x)
            {
                const double rx = x - xc;
                g((static_cast<Eigen::Index>(channel) * h + y) * w + x) +=
                    go(0) + rx * go(1) + ry * go(2) + rx * rx * go(3) + ry * ry * go(4) + rx * ry * go(5);
            }
        }
    });
}

struct BlobMoments
{
    ag::Var mass, cx, cy, vxx, vyy, vxy;
};

inline BlobMoments blob_moments(const ag::Var& pre, int channel, int x0, int x1, int y0, int y1)
{
    ag::Var m = window_moments(pre, channel, x0, x1, y0, y1);
    auto el = [&m](int i) { return ag::slice(m, i, 1); };
    BlobMoments b;
    b.mass = el(0);
    ag::Var mx = el(1) / b.mass;
    ag::Var my = el(2) / b.mass;
    b.vxx = el(3) / b.mass - ag::square(mx);
    b.vyy = el(4) / b.mass - ag::square(my);
    b.vxy = el(5) / b.mass - mx * my;
    b.cx = mx + 0.5 * (x0 + x1 - 1);
    b.cy = my + 0.5 * (y0 + y1 - 1);
    return b;
}

} // namespace toy

struct ToyGeneratorConfig
{
    std::uint64_t seed = 7;
    int latent_dim = 64;
    int num_layers = 8;
    int planted_directions = toy::num_pose_expr;
    /// Correlation of attributes within a group when sampling codes.
    double attribute_correlation = 0.95;
    /// Standard deviation of the code-driven border texture patterns.
    double texture_scale = 0.0175;
    /// Standard deviation of the frozen border noise.
    double noise_scale = 0.05;
    /// Spread of the unconstrained code component in mapped codes.
    double free_scale = 0.3;
};

/**
 * Toy generator: a parametric face drawn from Gaussian blobs.
 *
 * Scene parameters are q = Pᵀ flatten(w) for a hidden orthonormal P = [B | C],
 * where B (planted directions) drives pose and expression and C drives
 * identity. The remaining code directions add a faint texture in the image
 * border. Layer 4 holds the three blob planes (head / eyes and brows / mouth
 * and cheeks); layers 5 and 6 are the modulated pre-activation and the image.
 */
class ToyGenerator : public GeneratorBackend
{
public:
    explicit ToyGenerator(ToyGeneratorConfig config = {}) : cfg_(config)
    {
        if (cfg_.planted_directions != toy::num_pose_expr)
        {
            throw std::invalid_argument("toy generator: planted direction count must be 3 + 12 = 15, got " +
                                        std::to_string(cfg_.planted_directions));
        }
        if (cfg_.latent_dim < 24 || cfg_.num_layers < 1)
        {
            throw std::invalid_argument("toy generator: latent_dim must be >= 24 and num_layers >= 1");
        }
        const int d = flat_dim();
        std::mt19937_64 rng(cfg_.seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        Eigen::MatrixXd raw(d, d);
        for (Eigen::Index j = 0; j < d; ++j)
        {
            for (Eigen::Index i = 0; i < d; ++i)
            {
                raw(i, j) = gauss(rng);
            }
        }
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
        Eigen::MatrixXd q = qr.householderQ();
        scene_basis_ = q.leftCols(toy::num_scene);
        scene_t_ = std::make_shared<const Eigen::MatrixXd>(scene_basis_.transpose());

        const auto band = toy::band_indices();
        band_ = std::make_shared<const std::vector<Eigen::Index>>(band);
        const Eigen::Index free_dims = d - toy::num_scene;
        Eigen::MatrixXd patterns(static_cast<Eigen::Index>(band.size()), free_dims);
        for (Eigen::Index j = 0; j < patterns.cols(); ++j)
        {
            for (Eigen::Index i = 0; i < patterns.rows(); ++i)
            {
                patterns(i, j) = cfg_.texture_scale * gauss(rng);
            }
        }
        texture_ = std::make_shared<const Eigen::MatrixXd>(patterns * q.rightCols(free_dims).transpose());
        Eigen::ArrayXd noise = Eigen::ArrayXd::Zero(3 * toy::image_size * toy::image_size);
        for (Eigen::Index i : band)
        {
            noise(i) = cfg_.noise_scale * gauss(rng);
        }
        noise_ = noise;

        // Mapping: a single per-layer vector whose broadcast hits the requested q.
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(cfg_.latent_dim, toy::num_scene);
        for (int l = 0; l < cfg_.num_layers; ++l)
        {
            m += scene_basis_.middleRows(static_cast<Eigen::Index>(l) * cfg_.latent_dim, cfg_.latent_dim);
        }
        const Eigen::MatrixXd pinv = (m.transpose() * m).inverse() * m.transpose();
        lift_ = m * (m.transpose() * m).inverse();
        free_proj_ = Eigen::MatrixXd::Identity(cfg_.latent_dim, cfg_.latent_dim) - m * pinv;

        gain_ = ag::Var::constant(Eigen::ArrayXd::Ones(3), ag::Shape{3});
        bias_ = ag::Var::constant(Eigen::ArrayXd::Constant(3, default_bias()), ag::Shape{3});
        detail_ = ag::Var::constant(Eigen::ArrayXd::Zero(3 * toy::image_size * toy::image_size),
                                    ag::Shape{3, toy::image_size, toy::image_size});
    }

    /// Background pre-activation, about -0.6. Chosen so tanh of it is an exact 8-bit level (59/127.5 - 1).
    static double default_bias() { return std::atanh(59.0 / 127.5 - 1.0); }

    std::string id() const override { return "toy"; }
    int num_layers() const override { return cfg_.num_layers; }
    int latent_dim() const override { return cfg_.latent_dim; }
    int image_size() const override { return toy::image_size; }
    int num_feature_layers() const override { return 6; }
    int flat_dim() const { return cfg_.num_layers * cfg_.latent_dim; }
    const ToyGeneratorConfig& config() const { return cfg_; }

    /// Planted pose/expression directions B (flat_dim × 15). For tests and analysis.
    Eigen::MatrixXd planted_directions() const { return scene_basis_.leftCols(toy::num_pose_expr); }
    /// Identity directions C (flat_dim × 4).
    Eigen::MatrixXd identity_directions() const { return scene_basis_.rightCols(toy::num_identity_dims); }

    /// White-box readout of the scene vector q.
    Eigen::VectorXd scene_params(const Eigen::VectorXd& flat_code) const
    {
        check_code_size(flat_code.size());
        return *scene_t_ * flat_code;
    }

    /// Code whose scene vector is `q`, with a free component from `free` (latent_dim).
    LatentCode code_for_scene(const Eigen::VectorXd& q, const Eigen::VectorXd& free) const
    {
        const Eigen::VectorXd wbar = lift_ * q + free_proj_ * free;
        LatentCode code;
        code.layers = wbar.transpose().replicate(cfg_.num_layers, 1);
        code.space = LatentSpace::mapped_w;
        return code;
    }

    /// Scene vector implied by a sampled z (uniform marginals, grouped correlation).
    Eigen::VectorXd scene_from_z(const Eigen::VectorXd& z) const
    {
        if (z.size() != cfg_.latent_dim)
        {
            throw std::invalid_argument("map_latent: expected z of size " + std::to_string(cfg_.latent_dim));
        }
        const double rho = cfg_.attribute_correlation;
        Eigen::VectorXd zz = z.head(toy::num_scene);
        const auto groups = toy::correlated_groups();
        for (std::size_t g = 0; g < groups.size(); ++g)
        {
            const double common = z(toy::num_scene + static_cast<Eigen::Index>(g));
            for (int k : groups[g])
            {
                zz(k) = std::sqrt(rho) * common + std::sqrt(1.0 - rho) * z(k);
            }
        }
        Eigen::VectorXd q(toy::num_scene);
        for (int k = 0; k < toy::num_scene; ++k)
        {
            q(k) = std::erf(zz(k) / std::sqrt(2.0)); // 2Φ(z) − 1
        }
        return q;
    }

    LatentCode map_latent(const Eigen::VectorXd& z) const override
    {
        return code_for_scene(scene_from_z(z), cfg_.free_scale * z);
    }

    ag::Var scene_var(const ag::Var& code) const
    {
        check_code_size(code.size());
        return ag::linear_map(scene_t_, code);
    }

    /// The three blob planes as separate 64² Vars.
    std::array<ag::Var, 3> planes(const ag::Var& q) const
    {
        using ag::Var;
        auto s = [&q](int i) { return ag::slice(q, i, 1); };
        auto k = [](double v) { return Var::scalar(v); };
        auto ex = [](const Var& v) { return ag::exp(v); };
        const double C = toy::center;
        auto splat = [](std::vector<Var> parts) { return toy::gaussian_splat(ag::concat(parts)); };

        Var i0 = s(15), i1 = s(16), i2 = s(17), i3 = s(18);
        Var sy_head = 6.0 * ex(0.08 * i0);
        Var sx_head = sy_head * ex(-0.08 * i1) / 1.35;
        Var head = splat({C + 4.0 * s(0), C - 4.0 * s(1), sx_head, sy_head, (20.0 * toy::pi / 180.0) * s(2),
                          1.4 * ex(0.15 * i2)});

        Var spacing = 11.0 + i3;
        Var gaze = 1.5 * s(5);
        Var eye_l = splat({C - spacing + gaze, k(31.0), k(2.0), 1.5 * ex(0.2 * s(3)), k(0.0), k(1.2)});
        Var eye_r = splat({C + spacing + gaze, k(31.0), k(2.0), 1.5 * ex(0.2 * s(4)), k(0.0), k(1.2)});
        Var furrow = s(8);
        Var brow_l = splat({(C - 11.0) + furrow, 16.0 - 1.5 * s(6), k(2.0), k(0.9), k(0.0), k(1.0)});
        Var brow_r = splat({(C + 11.0) - furrow, 16.0 - 1.5 * s(7), k(2.0), k(0.9), k(0.0), k(1.0)});

        Var mouth = splat({C + 1.5 * s(11), k(49.5), 3.5 * ex(0.15 * s(10)), 1.4 * ex(0.2 * s(9)), k(0.0),
                           ex(0.25 * s(12))});
        Var cheek_y = 30.0 - 1.5 * s(13);
        Var cheek_s = 1.6 * ex(0.15 * s(14));
        Var cheek_l = splat({k(C - 16.0), cheek_y, cheek_s, cheek_s, k(0.0), k(0.8)});
        Var cheek_r = splat({k(C + 16.0), cheek_y, cheek_s, cheek_s, k(0.0), k(0.8)});

        return {head, eye_l + eye_r + brow_l + brow_r, mouth + cheek_l + cheek_r};
    }

    ag::Var layer4(const ag::Var& code) const
    {
        auto p = planes(scene_var(code));
        const int n = toy::image_size;
        return ag::reshape(ag::concat({p[0], p[1], p[2]}), ag::Shape{3, n, n});
    }

    /// Pre-activation from a layer-4 map plus the code-driven border texture.
    ag::Var pre_activation(const ag::Var& code, const ag::Var& f4) const
    {
        const int n = toy::image_size;
        ag::Var tex = ag::scatter(ag::linear_map(texture_, code), band_, ag::Shape{3, n, n});
        ag::Var base = ag::channel_affine(f4, gain_, bias_) + detail_;
        return base + tex + ag::Var::constant(noise_, ag::Shape{3, n, n});
    }

    ag::Var synthesize(const ag::Var& code) const override
    {
        return ag::tanh(pre_activation(code, layer4(code)));
    }

    FeatureMap feature_at(const ag::Var& code, int layer) const override
    {
        const int n = toy::image_size;
        switch (layer)
        {
        case 1: return {ag::reshape(scene_var(code), ag::Shape{toy::num_scene, 1, 1}), 1};
        case 2: return {ag::reshape(planes(scene_var(code))[0], ag::Shape{1, n, n}), 2};
        case 3:
        {
            auto p = planes(scene_var(code));
            return {ag::reshape(ag::concat({p[0], p[1]}), ag::Shape{2, n, n}), 3};
        }
        case 4: return {layer4(code), 4};
        case 5: return {pre_activation(code, layer4(code)), 5};
        case 6: return {synthesize(code), 6};
        default:
            throw std::out_of_range("toy generator: feature layer " + std::to_string(layer) + " outside [1, 6]");
        }
    }

    ag::Var synthesize_with_feature(const ag::Var& code, const FeatureMap& feature) const override
    {
        const int n = toy::image_size;
        const ag::Shape full{3, n, n};
        if (feature.layer >= 4 && feature.values.shape() != full)
        {
            throw std::invalid_argument("toy generator: layer " + std::to_string(feature.layer) +
                                        " override must have shape " + ag::shape_str(full) + ", got " +
                                        ag::shape_str(feature.values.shape()));
        }
        switch (feature.layer)
        {
        case 4: return ag::tanh(pre_activation(code, feature.values));
        case 5: return ag::tanh(feature.values);
        case 6: return feature.values;
        default:
            throw std::invalid_argument("toy generator: feature override is supported on layers 4-6, got " +
                                        std::to_string(feature.layer));
        }
    }

    std::vector<ag::Var> parameters() const override { return {gain_, bias_, detail_}; }

    void set_trainable(bool trainable) override
    {
        for (auto p : parameters())
        {
            p.set_requires_grad(trainable);
        }
    }

    std::unique_ptr<GeneratorBackend> clone() const override
    {
        auto copy = std::make_unique<ToyGenerator>(*this);
        copy->gain_ = ag::Var::constant(gain_.value(), gain_.shape());
        copy->bias_ = ag::Var::constant(bias_.value(), bias_.shape());
        copy->detail_ = ag::Var::constant(detail_.value(), detail_.shape());
        return copy;
    }

    /// Copies tunable weights from another toy generator (checkpoint restore).
    void load_parameters(const std::vector<Eigen::ArrayXd>& values)
    {
        auto params = parameters();
        if (values.size() != params.size())
        {
            throw std::invalid_argument("toy generator: expected " + std::to_string(params.size()) + " arrays");
        }
        for (std::size_t i = 0; i < params.size(); ++i)
        {
            if (values[i].size() != params[i].size())
            {
                throw std::invalid_argument("toy generator: parameter size mismatch");
            }
            params[i].mutable_value() = values[i];
        }
    }

private:
    void check_code_size(Eigen::Index n) const
    {
        if (n != flat_dim())
        {
            throw std::invalid_argument("toy generator: code has " + std::to_string(n) + " entries, expected " +
                                        std::to_string(flat_dim()));
        }
    }

    ToyGeneratorConfig cfg_;
    Eigen::MatrixXd scene_basis_;
    std::shared_ptr<const Eigen::MatrixXd> scene_t_;
    std::shared_ptr<const Eigen::MatrixXd> texture_;
    std::shared_ptr<const std::vector<Eigen::Index>> band_;
    Eigen::ArrayXd noise_;
    Eigen::MatrixXd lift_;
    Eigen::MatrixXd free_proj_;
    ag::Var gain_;
    ag::Var bias_;
    ag::Var detail_;
};

struct ToyEstimatorConfig
{
    std::uint64_t seed = 11;
    int num_identity = 8;
    double perceptual_weight_scale = 0.5;
    /// Small so the summed style term does not swamp the others in encoder training.
    double style_scale = 0.01;
};

/**
 * Estimators for the toy generator.
 *
 * Pose and expression come from intensity moments of fixed windows in the
 * pre-activation image (blob centroids, covariances and masses), inverted
 * through the known renderer geometry. Identity embedding, perceptual
 * pyramid and style embedding are fixed random projections.
 */
class ToyEstimators : public EstimatorSuite
{
public:
    explicit ToyEstimators(ToyEstimatorConfig config = {}) : cfg_(config)
    {
        if (cfg_.num_identity < toy::num_identity_dims)
        {
            throw std::invalid_argument("toy estimators: need at least 4 identity coefficients");
        }
        std::mt19937_64 rng(cfg_.seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto fill = [&](Eigen::Index r, Eigen::Index c, double scale) {
            Eigen::MatrixXd m(r, c);
            for (Eigen::Index j = 0; j < c; ++j)
            {
                for (Eigen::Index i = 0; i < r; ++i)
                {
                    m(i, j) = scale * gauss(rng);
                }
            }
            return m;
        };
        id_weight_ = std::make_shared<const Eigen::MatrixXd>(fill(512, 16, 0.5));
        id_bias_ = fill(512, 1, 0.5).col(0).array();
        for (int l = 0; l < 4; ++l)
        {
            percept_w_.push_back(fill(4, 3, cfg_.perceptual_weight_scale).reshaped().array());
            percept_b_.push_back(fill(4, 1, 0.1).col(0).array());
        }
        style_weight_ = std::make_shared<const Eigen::MatrixXd>(fill(512, 192, 1.0 / std::sqrt(192.0)));
        style_bias_ = fill(512, 1, 0.3).col(0).array();

        const int n = toy::image_size;
        for (int c = 0; c < 3; ++c)
        {
            std::array<std::vector<Eigen::Index>, 4> sides;
            for (int y = 0; y < n; ++y)
            {
                for (int x = 0; x < n; ++x)
                {
                    const Eigen::Index i = (static_cast<Eigen::Index>(c) * n + y) * n + x;
                    if (y < 4)
                        sides[0].push_back(i);
                    else if (y >= n - 4)
                        sides[1].push_back(i);
                    else if (x < 4)
                        sides[2].push_back(i);
                    else if (x >= n - 4)
                        sides[3].push_back(i);
                }
            }
            for (auto& s : sides)
            {
                band_sides_.push_back(std::move(s));
            }
        }
    }

    int num_expr() const override { return 12; }
    int num_identity() const override { return cfg_.num_identity; }

    /// Scene vector estimate q̂ (19 entries) from an image.
    ag::Var scene_estimate(const ag::Var& image) const
    {
        using ag::Var;
        check_image(image);
        const double C = toy::center;
        Var pre = ag::clamp(ag::atanh(ag::clamp(image, -0.999, 0.999)) - ToyGenerator::default_bias(), 0.0, 1e9);

        std::vector<Var> q(toy::num_scene);
        toy::BlobMoments head = toy::blob_moments(pre, 0, 4, 60, 4, 60);
        q[0] = (head.cx - C) / 4.0;
        q[1] = (C - head.cy) / 4.0;
        q[2] = (0.5 * ag::atan2(-2.0 * head.vxy, head.vyy - head.vxx)) * (180.0 / (20.0 * toy::pi));
        Var half_tr = 0.5 * (head.vxx + head.vyy);
        Var rad = ag::sqrt(ag::square(0.5 * (head.vyy - head.vxx)) + ag::square(head.vxy));
        Var sy = ag::sqrt(half_tr + rad);
        Var sx = ag::sqrt(half_tr - rad);
        q[15] = ag::log(sy / 6.0) / 0.08;
        q[16] = (ag::log(sy / sx) - std::log(1.35)) / 0.08;
        q[17] = ag::log(head.mass / (2.0 * toy::pi * sx * sy * 1.4)) / 0.15;

        toy::BlobMoments eye_l = toy::blob_moments(pre, 1, 8, 32, 22, 40);
        toy::BlobMoments eye_r = toy::blob_moments(pre, 1, 32, 56, 22, 40);
        q[18] = 0.5 * (eye_r.cx - eye_l.cx) - 11.0;
        q[5] = (0.5 * (eye_l.cx + eye_r.cx) - C) / 1.5;
        q[3] = 0.5 * ag::log(eye_l.vyy / 2.25) / 0.2;
        q[4] = 0.5 * ag::log(eye_r.vyy / 2.25) / 0.2;

        toy::BlobMoments brow_l = toy::blob_moments(pre, 1, 8, 32, 8, 22);
        toy::BlobMoments brow_r = toy::blob_moments(pre, 1, 32, 56, 8, 22);
        q[6] = (16.0 - brow_l.cy) / 1.5;
        q[7] = (16.0 - brow_r.cy) / 1.5;
        q[8] = 0.5 * ((brow_l.cx - (C - 11.0)) + ((C + 11.0) - brow_r.cx));

        toy::BlobMoments mouth = toy::blob_moments(pre, 2, 8, 56, 41, 59);
        Var mouth_sx = ag::sqrt(mouth.vxx);
        Var mouth_sy = ag::sqrt(mouth.vyy);
        q[9] = ag::log(mouth_sy / 1.4) / 0.2;
        q[10] = ag::log(mouth_sx / 3.5) / 0.15;
        q[11] = (mouth.cx - C) / 1.5;
        q[12] = ag::log(mouth.mass / (2.0 * toy::pi * mouth_sx * mouth_sy)) / 0.25;

        toy::BlobMoments cheek_l = toy::blob_moments(pre, 2, 4, 30, 18, 41);
        toy::BlobMoments cheek_r = toy::blob_moments(pre, 2, 34, 60, 18, 41);
        q[13] = (30.0 - 0.5 * (cheek_l.cy + cheek_r.cy)) / 1.5;
        // log of the isotropic spread, averaged over both cheeks and axes
        Var log_s = 0.125 * (ag::log(cheek_l.vxx) + ag::log(cheek_l.vyy) + ag::log(cheek_r.vxx) +
                             ag::log(cheek_r.vyy));
        q[14] = (log_s - std::log(1.6)) / 0.15;
        return ag::concat(q);
    }

    ShapeEstimate estimate(const ag::Var& image) const override
    {
        ag::Var q = scene_estimate(image);
        ShapeEstimate e;
        e.pose_expr = ag::slice(q, 0, toy::num_pose_expr) * ag::Var::constant(toy::raw_scale());
        ag::Var id = ag::slice(q, toy::num_pose_expr, toy::num_identity_dims);
        if (cfg_.num_identity > toy::num_identity_dims)
        {
            id = ag::concat({id, ag::Var::constant(Eigen::ArrayXd::Zero(cfg_.num_identity - toy::num_identity_dims))});
        }
        e.identity = id;
        return e;
    }

    /// Raw pose/expression for a code, read directly from the scene vector.
    Eigen::VectorXd pose_expr_from_code(const ToyGenerator& gen, const Eigen::VectorXd& flat_code) const
    {
        const Eigen::VectorXd q = gen.scene_params(flat_code);
        return (q.head(toy::num_pose_expr).array() * toy::raw_scale()).matrix();
    }

    ag::Var band_means(const ag::Var& image) const
    {
        std::vector<ag::Var> means;
        for (const auto& side : band_sides_)
        {
            means.push_back(ag::mean(ag::gather(image, side)));
        }
        return ag::concat(means);
    }

    ag::Var identity_embed(const ag::Var& image) const override
    {
        ag::Var q = scene_estimate(image);
        ag::Var feats = ag::concat({ag::slice(q, toy::num_pose_expr, toy::num_identity_dims), band_means(image)});
        ag::Var h = ag::tanh(ag::linear_map(id_weight_, feats) + ag::Var::constant(id_bias_));
        return ag::l2_normalize(h);
    }

    std::vector<ag::Var> perceptual(const ag::Var& image) const override
    {
        check_image(image);
        std::vector<ag::Var> levels;
        const int pools[4] = {1, 2, 4, 8};
        for (int l = 0; l < 4; ++l)
        {
            ag::Var x = pools[l] == 1 ? image : ag::avg_pool2d(image, pools[l]);
            ag::Var w = ag::Var::constant(percept_w_[static_cast<std::size_t>(l)], ag::Shape{4, 3, 1, 1});
            ag::Var b = ag::Var::constant(percept_b_[static_cast<std::size_t>(l)], ag::Shape{4});
            levels.push_back(ag::tanh(ag::conv2d(x, w, b)));
        }
        return levels;
    }

    ag::Var style_embed(const ag::Var& image) const override
    {
        check_image(image);
        ag::Var pooled = ag::reshape(ag::avg_pool2d(image, 8), ag::Shape{192});
        return cfg_.style_scale * ag::tanh(ag::linear_map(style_weight_, pooled) + ag::Var::constant(style_bias_));
    }

    std::uint64_t digest() const override
    {
        std::vector<ag::Var> all{ag::Var::constant(id_weight_->reshaped().array()), ag::Var::constant(id_bias_),
                                 ag::Var::constant(style_weight_->reshaped().array()),
                                 ag::Var::constant(style_bias_)};
        for (std::size_t l = 0; l < percept_w_.size(); ++l)
        {
            all.push_back(ag::Var::constant(percept_w_[l]));
            all.push_back(ag::Var::constant(percept_b_[l]));
        }
        return ag::digest(all);
    }

private:
    static void check_image(const ag::Var& image)
    {
        const ag::Shape expected{3, toy::image_size, toy::image_size};
        if (image.shape() != expected)
        {
            throw std::invalid_argument("toy estimators: expected image shape " + ag::shape_str(expected) + ", got " +
                                        ag::shape_str(image.shape()));
        }
    }

    ToyEstimatorConfig cfg_;
    std::shared_ptr<const Eigen::MatrixXd> id_weight_;
    Eigen::ArrayXd id_bias_;
    std::vector<Eigen::ArrayXd> percept_w_;
    std::vector<Eigen::ArrayXd> percept_b_;
    std::shared_ptr<const Eigen::MatrixXd> style_weight_;
    Eigen::ArrayXd style_bias_;
    std::vector<std::vector<Eigen::Index>> band_sides_;
};

/// Creates the toy generator and its estimators from one seed.
inline BackendPair make_toy_backend(std::uint64_t seed, ToyGeneratorConfig gcfg = {}, ToyEstimatorConfig ecfg = {})
{
    gcfg.seed = seed;
    ecfg.seed = seed + 1000003ULL;
    return {std::make_shared<ToyGenerator>(gcfg), std::make_shared<ToyEstimators>(ecfg)};
}

namespace detail {
inline bool register_toy_backend()
{
    register_backend("toy", [](std::uint64_t seed) { return make_toy_backend(seed); });
    return true;
}
inline const bool toy_backend_registered = register_toy_backend();
} // namespace detail

/**
 * Estimator parameters for n randomly sampled, mapped codes.
 * With white_box set (toy generator only) the scene vector is read directly.
 */
inline std::vector<PoseExpressionParams> sample_params_dataset(const GeneratorBackend& gen, const EstimatorSuite& est,
                                                               int n, std::uint64_t seed, bool white_box = false)
{
    if (n < 2)
    {
        throw std::invalid_argument("sample_params_dataset: need n >= 2, got " + std::to_string(n));
    }
    const auto* toy_gen = dynamic_cast<const ToyGenerator*>(&gen);
    const auto* toy_est = dynamic_cast<const ToyEstimators*>(&est);
    if (white_box && (!toy_gen || !toy_est))
    {
        throw std::invalid_argument("sample_params_dataset: white-box mode needs the toy backend");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<PoseExpressionParams> out;
    out.reserve(static_cast<std::size_t>(n));
    ag::NoGradGuard guard;
    for (int i = 0; i < n; ++i)
    {
        Eigen::VectorXd z(gen.latent_dim());
        for (Eigen::Index k = 0; k < z.size(); ++k)
        {
            z(k) = gauss(rng);
        }
        const LatentCode code = gen.map_latent(z);
        if (white_box)
        {
            out.push_back(PoseExpressionParams::from_vector(toy_est->pose_expr_from_code(*toy_gen, code.flat())));
        } else
        {
            out.push_back(PoseExpressionParams::from_vector(est.pose_expr(gen.synthesize(code.var())).value().matrix()));
        }
    }
    return out;
}

} // namespace facedirs

#endif /* FACEDIRS_TOY_BACKEND_HPP */
