/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/losses.hpp
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

#ifndef FACEDIRS_LOSSES_HPP
#define FACEDIRS_LOSSES_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"
#include "facedirs/shape3d.hpp"

#include "json.hpp"

#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

struct LossWeights
{
    double reenactment = 1.0; ///< λ_r
    double identity = 10.0;   ///< λ_id
    double perceptual = 10.0; ///< λ_per
    double pixel = 10.0;      ///< λ_pix
    double style = 10.0;      ///< λ_style

    void validate() const
    {
        if (reenactment < 0 || identity < 0 || perceptual < 0 || pixel < 0 || style < 0)
        {
            throw std::invalid_argument("LossWeights: weights must be non-negative");
        }
    }
};

/// Eye and mouth landmark pairs (1-based, 68-point scheme).
struct LandmarkPairSets
{
    std::vector<LandmarkPair> eye{{37, 40}, {38, 42}, {39, 41}, {43, 46}, {44, 48}, {45, 47}};
    std::vector<LandmarkPair> mouth{{49, 55}, {50, 60}, {51, 59}, {52, 58}, {53, 57},
                                    {54, 56}, {61, 65}, {62, 68}, {63, 67}, {64, 66}};
};

/// A scalar objective with its named, unweighted parts for logging.
struct LossTerms
{
    ag::Var total;
    std::map<std::string, double> parts;

    double value() const { return total.item(); }
};

namespace detail {
inline void check_same_size(const ag::Var& a, const ag::Var& b, const char* what)
{
    if (a.shape() != b.shape())
    {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + ag::shape_str(a.shape()) + " vs " +
                                    ag::shape_str(b.shape()));
    }
}
} // namespace detail

// Shape vectors are the 3N vertex-interleaved form produced by compose_shape_var.

/// Mean absolute difference between two shapes.
inline ag::Var shape_loss(const ag::Var& s_r, const ag::Var& s_gt)
{
    detail::check_same_size(s_r, s_gt, "shape_loss");
    return ag::mean(ag::abs(s_r - s_gt));
}

/// L1 inner distances of the given landmark pairs on a 3N shape vector.
inline ag::Var landmark_pair_distances(const ag::Var& s, const std::vector<LandmarkPair>& pairs,
                                       const ShapeBasis& basis)
{
    std::vector<Eigen::Index> ia, ib;
    for (const auto& [i, j] : pairs)
    {
        if (i < 1 || j < 1 || i > static_cast<int>(basis.landmark_indices.size()) ||
            j > static_cast<int>(basis.landmark_indices.size()))
        {
            throw std::out_of_range("landmark pair (" + std::to_string(i) + "," + std::to_string(j) +
                                    ") outside [1, 68]");
        }
        const Eigen::Index vi = basis.landmark_indices[static_cast<std::size_t>(i - 1)] - 1;
        const Eigen::Index vj = basis.landmark_indices[static_cast<std::size_t>(j - 1)] - 1;
        for (int c = 0; c < 3; ++c)
        {
            ia.push_back(3 * vi + c);
            ib.push_back(3 * vj + c);
        }
    }
    ag::Var diff = ag::abs(ag::gather(s, ia) - ag::gather(s, ib));
    return ag::row_sum(ag::reshape(diff, ag::Shape{static_cast<int>(pairs.size()), 3}));
}

/// Σ over pairs of |d_r(i,j) − d_gt(i,j)|.
inline ag::Var landmark_pair_loss(const ag::Var& s_r, const ag::Var& s_gt, const std::vector<LandmarkPair>& pairs,
                                  const ShapeBasis& basis)
{
    detail::check_same_size(s_r, s_gt, "landmark_pair_loss");
    return ag::sum(ag::abs(landmark_pair_distances(s_r, pairs, basis) - landmark_pair_distances(s_gt, pairs, basis)));
}

/// L_r = L_sh + L_eye + L_mouth.
inline LossTerms reenactment_loss(const ag::Var& s_r, const ag::Var& s_gt, const ShapeBasis& basis,
                                  const LandmarkPairSets& pairs = {})
{
    ag::Var sh = shape_loss(s_r, s_gt);
    ag::Var eye = landmark_pair_loss(s_r, s_gt, pairs.eye, basis);
    ag::Var mouth = landmark_pair_loss(s_r, s_gt, pairs.mouth, basis);
    LossTerms t;
    t.total = sh + eye + mouth;
    t.parts = {{"shape", sh.item()}, {"eye", eye.item()}, {"mouth", mouth.item()}};
    return t;
}

/// 1 − cos of identity embeddings.
inline ag::Var identity_loss(const ag::Var& a, const ag::Var& b, const EstimatorSuite& est)
{
    detail::check_same_size(a, b, "identity_loss");
    return 1.0 - ag::dot(est.identity_embed(a), est.identity_embed(b));
}

/// Sum over pyramid levels of the mean absolute feature difference.
inline ag::Var perceptual_loss_features(const std::vector<ag::Var>& fa, const std::vector<ag::Var>& fb)
{
    if (fa.size() != fb.size() || fa.empty())
    {
        throw std::invalid_argument("perceptual_loss: pyramids differ in depth");
    }
    ag::Var total = ag::Var::scalar(0.0);
    for (std::size_t l = 0; l < fa.size(); ++l)
    {
        detail::check_same_size(fa[l], fb[l], "perceptual_loss");
        total = total + ag::mean(ag::abs(fa[l] - fb[l]));
    }
    return total;
}

inline ag::Var perceptual_loss(const ag::Var& a, const ag::Var& b, const EstimatorSuite& est)
{
    detail::check_same_size(a, b, "perceptual_loss");
    return perceptual_loss_features(est.perceptual(a), est.perceptual(b));
}

/// Mean absolute pixel difference.
inline ag::Var pixel_loss(const ag::Var& a, const ag::Var& b)
{
    detail::check_same_size(a, b, "pixel_loss");
    return ag::mean(ag::abs(a - b));
}

/// Summed absolute difference of the 512-d style embeddings.
inline ag::Var style_loss(const ag::Var& a, const ag::Var& b, const EstimatorSuite& est)
{
    detail::check_same_size(a, b, "style_loss");
    return ag::sum(ag::abs(est.style_embed(a) - est.style_embed(b)));
}

namespace detail {
inline void add_term(LossTerms& t, const std::string& name, double weight, const ag::Var& term)
{
    t.parts[name] = term.item();
    if (weight != 0.0)
    {
        t.total = t.total.defined() ? t.total + weight * term : weight * term;
    }
}
inline void finish(LossTerms& t)
{
    if (!t.total.defined())
    {
        t.total = ag::Var::scalar(0.0);
    }
    t.parts["total"] = t.total.item();
}
} // namespace detail

/// Which image reconstruction terms to include.
struct ReconstructionSet
{
    bool identity = true;
    bool perceptual = true;
    bool pixel = true;
    bool style = true;
};

/// Weighted identity + perceptual + pixel + style between two images.
inline LossTerms reconstruction_loss(const ag::Var& reference, const ag::Var& output, const LossWeights& w,
                                     const EstimatorSuite& est, ReconstructionSet set = {})
{
    LossTerms t;
    if (set.identity)
        detail::add_term(t, "identity", w.identity, identity_loss(reference, output, est));
    if (set.perceptual)
        detail::add_term(t, "perceptual", w.perceptual, perceptual_loss(reference, output, est));
    if (set.pixel)
        detail::add_term(t, "pixel", w.pixel, pixel_loss(reference, output));
    if (set.style)
        detail::add_term(t, "style", w.style, style_loss(reference, output, est));
    detail::finish(t);
    return t;
}

namespace detail {
inline void add_reenactment(LossTerms& t, const ag::Var& s_r, const ag::Var& s_gt, const LossWeights& w,
                            const ShapeBasis& basis)
{
    LossTerms r = reenactment_loss(s_r, s_gt, basis);
    for (const auto& [k, v] : r.parts)
    {
        t.parts[k] = v;
    }
    add_term(t, "reenactment", w.reenactment, r.total);
}
} // namespace detail

/// λ_r L_r + λ_id L_id(I_s, I_r) + λ_per L_per(I_s, I_r).
inline LossTerms unpaired_objective(const ag::Var& I_s, const ag::Var& I_r, const ag::Var& s_r, const ag::Var& s_gt,
                                    const LossWeights& w, const EstimatorSuite& est, const ShapeBasis& basis)
{
    LossTerms t;
    detail::add_reenactment(t, s_r, s_gt, w, basis);
    detail::add_term(t, "identity", w.identity, identity_loss(I_s, I_r, est));
    detail::add_term(t, "perceptual", w.perceptual, perceptual_loss(I_s, I_r, est));
    detail::finish(t);
    return t;
}

/// Paired form: identity and perceptual against the target, plus λ_pix L_pix(I_r, I_t).
inline LossTerms paired_objective(const ag::Var& I_t, const ag::Var& I_r, const ag::Var& s_r, const ag::Var& s_gt,
                                  const LossWeights& w, const EstimatorSuite& est, const ShapeBasis& basis)
{
    LossTerms t;
    detail::add_reenactment(t, s_r, s_gt, w, basis);
    detail::add_term(t, "identity", w.identity, identity_loss(I_t, I_r, est));
    detail::add_term(t, "perceptual", w.perceptual, perceptual_loss(I_t, I_r, est));
    detail::add_term(t, "pixel", w.pixel, pixel_loss(I_t, I_r));
    detail::finish(t);
    return t;
}

/// Encoder loss: reconstruction terms for the source and the target, summed.
inline LossTerms encoder_objective(const ag::Var& I_s, const ag::Var& I_s_hat, const ag::Var& I_t,
                                   const ag::Var& I_t_hat, const LossWeights& w, const EstimatorSuite& est)
{
    LossTerms src = reconstruction_loss(I_s, I_s_hat, w, est);
    LossTerms tgt = reconstruction_loss(I_t, I_t_hat, w, est);
    LossTerms t;
    t.total = src.total + tgt.total;
    for (const auto& [k, v] : src.parts)
    {
        t.parts["source_" + k] = v;
    }
    for (const auto& [k, v] : tgt.parts)
    {
        t.parts["target_" + k] = v;
    }
    t.parts["total"] = t.total.item();
    return t;
}

/// Directions loss: reenactment plus all reconstruction terms against the target.
inline LossTerms directions_objective(const ag::Var& I_t, const ag::Var& I_r, const ag::Var& s_r,
                                      const ag::Var& s_gt, const LossWeights& w, const EstimatorSuite& est,
                                      const ShapeBasis& basis)
{
    LossTerms t;
    detail::add_reenactment(t, s_r, s_gt, w, basis);
    detail::add_term(t, "identity", w.identity, identity_loss(I_t, I_r, est));
    detail::add_term(t, "perceptual", w.perceptual, perceptual_loss(I_t, I_r, est));
    detail::add_term(t, "pixel", w.pixel, pixel_loss(I_t, I_r));
    detail::add_term(t, "style", w.style, style_loss(I_t, I_r, est));
    detail::finish(t);
    return t;
}

/// Produces a reenacted image from (source image, target image).
using ReenactFn = std::function<ag::Var(const ag::Var& source, const ag::Var& target)>;

/**
 * Cycle loss: I_r1 = R(I_s1, I_t1), I_r2 = R(I_r1, I_s1); reconstruction
 * terms between I_s1 and I_r2.
 */
inline LossTerms cycle_loss(const ag::Var& I_s1, const ag::Var& I_t1, const ReenactFn& reenact, const LossWeights& w,
                            const EstimatorSuite& est)
{
    ag::Var I_r1 = reenact(I_s1, I_t1);
    ag::Var I_r2 = reenact(I_r1, I_s1);
    return reconstruction_loss(I_s1, I_r2, w, est);
}

/// L = L_A + L_Ew + λ_cycle L_cycle (λ_cycle = 1 is the plain sum).
inline LossTerms joint_objective(const LossTerms& directions, const LossTerms& encoder, const LossTerms& cycle,
                                 double cycle_weight = 1.0)
{
    LossTerms t;
    t.total = directions.total + encoder.total;
    if (cycle_weight != 0.0)
    {
        t.total = t.total + cycle_weight * cycle.total;
    }
    t.parts["directions"] = directions.value();
    t.parts["encoder"] = encoder.value();
    t.parts["cycle"] = cycle.total.defined() ? cycle.value() : 0.0;
    t.parts["total"] = t.total.item();
    return t;
}

/// Writes one JSON object per step: {"phase", "step", <part>: value, ...}.
class LossLogger
{
public:
    explicit LossLogger(std::ostream* out = nullptr) : out_(out) {}

    void log(const std::string& phase, long step, const std::map<std::string, double>& parts)
    {
        if (!out_)
        {
            return;
        }
        nlohmann::ordered_json j;
        j["phase"] = phase;
        j["step"] = step;
        for (const auto& [k, v] : parts)
        {
            j[k] = v;
        }
        (*out_) << j.dump() << '\n';
    }

private:
    std::ostream* out_;
};

/// Plain-double conveniences over FacialShape.
inline Eigen::VectorXd shape_vector(const FacialShape& s)
{
    Eigen::MatrixXd t = s.vertices.transpose();
    return Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
}

inline double shape_loss(const FacialShape& a, const FacialShape& b)
{
    return shape_loss(ag::Var::constant(shape_vector(a).array()), ag::Var::constant(shape_vector(b).array())).item();
}

inline double landmark_pair_loss(const FacialShape& a, const FacialShape& b, const std::vector<LandmarkPair>& pairs,
                                 const ShapeBasis& basis)
{
    return landmark_pair_loss(ag::Var::constant(shape_vector(a).array()), ag::Var::constant(shape_vector(b).array()),
                              pairs, basis)
        .item();
}

inline double reenactment_loss(const FacialShape& a, const FacialShape& b, const ShapeBasis& basis)
{
    return reenactment_loss(ag::Var::constant(shape_vector(a).array()), ag::Var::constant(shape_vector(b).array()),
                            basis)
        .value();
}

} // namespace facedirs

#endif /* FACEDIRS_LOSSES_HPP */
