/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/directions.hpp
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

#ifndef FACEDIRS_DIRECTIONS_HPP
#define FACEDIRS_DIRECTIONS_HPP

#include "facedirs/autograd.hpp"
#include "facedirs/backends.hpp"
#include "facedirs/shape3d.hpp"

#include "Eigen/Core"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/// Attribute names, in parameter order: yaw, pitch, roll, expr1..exprN.
inline std::vector<std::string> attribute_names(int num_expr = 12)
{
    std::vector<std::string> names{"yaw", "pitch", "roll"};
    for (int i = 1; i <= num_expr; ++i)
    {
        names.push_back("expr" + std::to_string(i));
    }
    return names;
}

/// Index of a named attribute, or -1.
inline int attribute_index(const std::string& name, int num_expr = 12)
{
    const auto names = attribute_names(num_expr);
    for (std::size_t i = 0; i < names.size(); ++i)
    {
        if (names[i] == name)
        {
            return static_cast<int>(i);
        }
    }
    return -1;
}

/// Receives warnings about rescaled values outside [-a, a]. Defaults to stderr.
inline std::function<void(const std::string&)>& range_warning_sink()
{
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::cerr << "warning: " << msg << '\n';
    };
    return sink;
}

/**
 * Per-element min-max scaler mapping [x_min, x_max] onto [-a, a].
 */
struct ParamScaler
{
    Eigen::VectorXd x_min;
    Eigen::VectorXd x_max;
    double a = 6.0;

    int size() const { return static_cast<int>(x_min.size()); }

    Eigen::VectorXd rescale(const Eigen::VectorXd& x) const
    {
        check(x);
        return ((x - x_min).array() / (x_max - x_min).array() * 2.0 * a - a).matrix();
    }

    Eigen::VectorXd unscale(const Eigen::VectorXd& s) const
    {
        check(s);
        return ((s.array() + a) / (2.0 * a) * (x_max - x_min).array() + x_min.array()).matrix();
    }

    /// Differentiable form for raw estimator outputs.
    ag::Var rescale(const ag::Var& x) const
    {
        if (x.size() != size())
        {
            throw std::invalid_argument("ParamScaler: expected " + std::to_string(size()) + " values, got " +
                                        std::to_string(x.size()));
        }
        Eigen::ArrayXd k = 2.0 * a / (x_max - x_min).array();
        Eigen::ArrayXd c = -x_min.array() * k - a;
        return x * ag::Var::constant(k) + ag::Var::constant(c);
    }

    /// Rescales and emits a warning for coordinates beyond [-a, a]. Values are not clamped.
    Eigen::VectorXd rescale_checked(const Eigen::VectorXd& x, const std::string& context = "") const
    {
        Eigen::VectorXd s = rescale(x);
        const auto names = attribute_names(size() - 3);
        for (Eigen::Index i = 0; i < s.size(); ++i)
        {
            if (std::abs(s(i)) > a + 1e-9 && range_warning_sink())
            {
                range_warning_sink()((context.empty() ? "" : context + ": ") + names[static_cast<std::size_t>(i)] +
                                     " rescaled to " + std::to_string(s(i)) + ", outside [-" + std::to_string(a) +
                                     ", " + std::to_string(a) + "]; results may degrade");
            }
        }
        return s;
    }

private:
    void check(const Eigen::VectorXd& x) const
    {
        if (x.size() != size())
        {
            throw std::invalid_argument("ParamScaler: expected " + std::to_string(size()) + " values, got " +
                                        std::to_string(x.size()));
        }
    }
};

/// Fits a scaler to per-coordinate minima and maxima of the samples.
inline ParamScaler fit_scaler(const std::vector<Eigen::VectorXd>& samples, double a = 6.0)
{
    if (samples.size() < 2)
    {
        throw std::invalid_argument("fit_scaler: need at least 2 samples, got " + std::to_string(samples.size()));
    }
    if (!(a > 0.0))
    {
        throw std::invalid_argument("fit_scaler: a must be positive");
    }
    ParamScaler s;
    s.a = a;
    s.x_min = samples.front();
    s.x_max = samples.front();
    for (const auto& x : samples)
    {
        if (x.size() != s.x_min.size())
        {
            throw std::invalid_argument("fit_scaler: samples have inconsistent lengths");
        }
        s.x_min = s.x_min.cwiseMin(x);
        s.x_max = s.x_max.cwiseMax(x);
    }
    const auto names = attribute_names(static_cast<int>(s.x_min.size()) - 3);
    for (Eigen::Index i = 0; i < s.x_min.size(); ++i)
    {
        if (!(s.x_max(i) > s.x_min(i)))
        {
            const std::string name =
                static_cast<std::size_t>(i) < names.size() ? names[static_cast<std::size_t>(i)] : std::to_string(i);
            throw std::invalid_argument("fit_scaler: coordinate " + std::to_string(i) + " (" + name +
                                        ") has zero spread");
        }
    }
    return s;
}

inline ParamScaler fit_scaler(const std::vector<PoseExpressionParams>& samples, double a = 6.0)
{
    std::vector<Eigen::VectorXd> v;
    v.reserve(samples.size());
    for (const auto& p : samples)
    {
        v.push_back(p.vector());
    }
    return fit_scaler(v, a);
}

/**
 * The directions matrix A (d_out×d_in), d_out = N_l·D. Column k is the latent
 * direction for parameter k; row block l belongs to generator layer
 * layer_offset + l.
 */
class DirectionsMatrix
{
public:
    DirectionsMatrix() = default;
    DirectionsMatrix(int num_layers, int latent_dim, int d_in, int layer_offset = 0)
        : num_layers_(num_layers), latent_dim_(latent_dim), layer_offset_(layer_offset)
    {
        if (num_layers <= 0 || latent_dim <= 0 || d_in <= 0 || layer_offset < 0)
        {
            throw std::invalid_argument("DirectionsMatrix: dimensions must be positive");
        }
        a_ = ag::Var::parameter(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(d_out()) * d_in),
                                ag::Shape{d_out(), d_in});
    }

    int d_in() const { return a_.shape()[1]; }
    int d_out() const { return num_layers_ * latent_dim_; }
    int num_layers() const { return num_layers_; }
    int latent_dim() const { return latent_dim_; }
    int layer_offset() const { return layer_offset_; }
    Eigen::Index parameter_count() const { return a_.size(); }

    /// Trainable parameter (row-major d_out×d_in).
    const ag::Var& var() const { return a_; }

    Eigen::MatrixXd matrix() const
    {
        return Eigen::Map<const ag::RowMatrix>(a_.value().data(), d_out(), d_in());
    }

    void set_matrix(const Eigen::MatrixXd& m)
    {
        if (m.rows() != d_out() || m.cols() != d_in())
        {
            throw std::invalid_argument("DirectionsMatrix::set_matrix: expected " + std::to_string(d_out()) + "×" +
                                        std::to_string(d_in()));
        }
        ag::RowMatrix rm = m;
        a_.mutable_value() = Eigen::Map<const Eigen::ArrayXd>(rm.data(), rm.size());
    }

    Eigen::VectorXd column(int k) const { return matrix().col(k); }

    /// A deep copy whose parameter is independent of this one.
    DirectionsMatrix copy() const
    {
        DirectionsMatrix c = *this;
        c.a_ = ag::Var::parameter(a_.value(), a_.shape());
        return c;
    }

    bool is_finite() const { return a_.value().allFinite(); }
    std::uint64_t digest() const { return ag::digest({a_}); }

private:
    int num_layers_ = 8;
    int latent_dim_ = 512;
    int layer_offset_ = 0;
    ag::Var a_;
};

/// Δw = A Δp.
inline Eigen::VectorXd compute_shift(const Eigen::VectorXd& dp_scaled, const DirectionsMatrix& A)
{
    if (dp_scaled.size() != A.d_in())
    {
        throw std::invalid_argument("compute_shift: Δp has " + std::to_string(dp_scaled.size()) +
                                    " entries, A expects " + std::to_string(A.d_in()));
    }
    if (!dp_scaled.allFinite())
    {
        throw std::invalid_argument("compute_shift: Δp is not finite");
    }
    return A.matrix() * dp_scaled;
}

inline ag::Var compute_shift(const ag::Var& dp_scaled, const DirectionsMatrix& A)
{
    if (dp_scaled.size() != A.d_in())
    {
        throw std::invalid_argument("compute_shift: Δp has " + std::to_string(dp_scaled.size()) +
                                    " entries, A expects " + std::to_string(A.d_in()));
    }
    return ag::matmul(A.var(), dp_scaled);
}

namespace detail {
inline void check_shift_fits(int code_layers, int code_dim, const DirectionsMatrix& A)
{
    if (code_dim != A.latent_dim() || code_layers < A.layer_offset() + A.num_layers())
    {
        throw std::invalid_argument("apply_shift: code has " + std::to_string(code_layers) + "×" +
                                    std::to_string(code_dim) + " layers, shift needs layers [" +
                                    std::to_string(A.layer_offset()) + ", " +
                                    std::to_string(A.layer_offset() + A.num_layers()) + ") of width " +
                                    std::to_string(A.latent_dim()));
    }
}
} // namespace detail

/// Adds the N_l×D shift to layers [layer_offset, layer_offset + N_l); other layers are copied bit for bit.
inline LatentCode apply_shift(const LatentCode& w, const Eigen::VectorXd& dw, const DirectionsMatrix& A)
{
    detail::check_shift_fits(w.num_layers(), w.dim(), A);
    if (dw.size() != A.d_out())
    {
        throw std::invalid_argument("apply_shift: shift has " + std::to_string(dw.size()) + " entries, expected " +
                                    std::to_string(A.d_out()));
    }
    LatentCode out = w;
    out.layers.middleRows(A.layer_offset(), A.num_layers()) +=
        Eigen::Map<const ag::RowMatrix>(dw.data(), A.num_layers(), A.latent_dim());
    return out;
}

/// Graph form: shifted flat code from a flat code Var and a shift Var.
inline ag::Var apply_shift(const ag::Var& w_flat, const ag::Var& dw, const DirectionsMatrix& A, int code_layers)
{
    detail::check_shift_fits(code_layers, static_cast<int>(w_flat.size() / code_layers), A);
    return ag::add_at(w_flat, dw, static_cast<Eigen::Index>(A.layer_offset()) * A.latent_dim());
}

enum class DeltaMode { full, single };

/**
 * Training Δp: with probability single_attr_prob a one-hot vector with
 * ε ~ U[-a, a] at a uniformly chosen coordinate, otherwise p_t − p_s.
 */
template <class Rng>
std::pair<Eigen::VectorXd, DeltaMode> sample_training_delta(const Eigen::VectorXd& p_s, const Eigen::VectorXd& p_t,
                                                            double single_attr_prob, double a, Rng& rng)
{
    if (p_s.size() != p_t.size())
    {
        throw std::invalid_argument("sample_training_delta: parameter lengths differ");
    }
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (u01(rng) < single_attr_prob)
    {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(p_s.size()) - 1);
        std::uniform_real_distribution<double> eps(-a, a);
        Eigen::VectorXd dp = Eigen::VectorXd::Zero(p_s.size());
        const int k = pick(rng);
        dp(k) = eps(rng);
        return {dp, DeltaMode::single};
    }
    return {p_t - p_s, DeltaMode::full};
}

/// w_s shifted by A (rescale(p_t) − rescale(p_s)).
inline LatentCode reenact_code(const LatentCode& w_s, const PoseExpressionParams& p_s,
                               const PoseExpressionParams& p_t, const ParamScaler& scaler, const DirectionsMatrix& A)
{
    const Eigen::VectorXd dp = scaler.rescale_checked(p_t.vector(), "target") - scaler.rescale(p_s.vector());
    return apply_shift(w_s, compute_shift(dp, A), A);
}

/// Moves one attribute from its current scaled value to target_value_scaled.
inline LatentCode edit_code(const LatentCode& w, const PoseExpressionParams& p_current, int attr_index,
                            double target_value_scaled, const ParamScaler& scaler, const DirectionsMatrix& A)
{
    if (attr_index < 0 || attr_index >= A.d_in())
    {
        throw std::out_of_range("edit_code: attribute index " + std::to_string(attr_index) + " outside [0, " +
                                std::to_string(A.d_in()) + ")");
    }
    if (std::abs(target_value_scaled) > scaler.a && range_warning_sink())
    {
        range_warning_sink()("edit target " + std::to_string(target_value_scaled) + " outside [-a, a]");
    }
    const Eigen::VectorXd current = scaler.rescale(p_current.vector());
    Eigen::VectorXd dp = Eigen::VectorXd::Zero(A.d_in());
    dp(attr_index) = target_value_scaled - current(attr_index);
    return apply_shift(w, compute_shift(dp, A), A);
}

/// The Δp used by frontalize_code: θ moved to scaled 0, expressions untouched.
inline Eigen::VectorXd frontalize_delta(const PoseExpressionParams& p_current, const ParamScaler& scaler)
{
    const Eigen::VectorXd current = scaler.rescale(p_current.vector());
    Eigen::VectorXd dp = Eigen::VectorXd::Zero(current.size());
    dp.head<3>() = -current.head<3>();
    return dp;
}

inline LatentCode frontalize_code(const LatentCode& w, const PoseExpressionParams& p_current,
                                  const ParamScaler& scaler, const DirectionsMatrix& A)
{
    return apply_shift(w, compute_shift(frontalize_delta(p_current, scaler), A), A);
}

/*
 * Directions file (little-endian):
 *   char[4] "FDIR", uint32 version = 1,
 *   uint32 d_in, uint32 d_out, uint32 N_l, uint32 layer_offset, float64 a,
 *   float64 x_min[d_in], float64 x_max[d_in],
 *   float64 A[d_out*d_in] row-major.
 */
inline void save_directions(const DirectionsMatrix& A, const ParamScaler& scaler, const std::string& path)
{
    if (scaler.size() != A.d_in())
    {
        throw std::invalid_argument("save_directions: scaler and matrix disagree on d_in");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os)
    {
        throw std::runtime_error("save_directions: cannot open " + path);
    }
    os.write("FDIR", 4);
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(A.d_in()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(A.d_out()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(A.num_layers()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(A.layer_offset()));
    detail::write_pod<double>(os, scaler.a);
    detail::write_doubles(os, scaler.x_min.data(), static_cast<std::size_t>(scaler.x_min.size()));
    detail::write_doubles(os, scaler.x_max.data(), static_cast<std::size_t>(scaler.x_max.size()));
    detail::write_doubles(os, A.var().value().data(), static_cast<std::size_t>(A.var().size()));
    if (!os)
    {
        throw std::runtime_error("save_directions: write failed for " + path);
    }
}

inline std::pair<DirectionsMatrix, ParamScaler> load_directions(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
    {
        throw std::runtime_error("load_directions: cannot open " + path);
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FDIR")
    {
        throw std::runtime_error("load_directions: " + path + " is not a directions file");
    }
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != 1)
    {
        throw std::runtime_error("load_directions: unsupported version " + std::to_string(version));
    }
    const auto d_in = detail::read_pod<std::uint32_t>(is);
    const auto d_out = detail::read_pod<std::uint32_t>(is);
    const auto n_l = detail::read_pod<std::uint32_t>(is);
    const auto offset = detail::read_pod<std::uint32_t>(is);
    if (n_l == 0 || d_out % n_l != 0)
    {
        throw std::runtime_error("load_directions: inconsistent layer count");
    }
    ParamScaler scaler;
    scaler.a = detail::read_pod<double>(is);
    scaler.x_min.resize(d_in);
    scaler.x_max.resize(d_in);
    detail::read_doubles(is, scaler.x_min.data(), d_in);
    detail::read_doubles(is, scaler.x_max.data(), d_in);
    DirectionsMatrix A(static_cast<int>(n_l), static_cast<int>(d_out / n_l), static_cast<int>(d_in),
                       static_cast<int>(offset));
    Eigen::ArrayXd values(static_cast<Eigen::Index>(d_out) * d_in);
    detail::read_doubles(is, values.data(), static_cast<std::size_t>(values.size()));
    ag::Var a = A.var();
    a.mutable_value() = values;
    return {A, scaler};
}

/**
 * Directions that exactly undo the toy renderer's scaling: column k is the
 * planted direction for parameter k times the q-change per scaled unit.
 */
inline Eigen::MatrixXd ideal_toy_directions(const Eigen::MatrixXd& planted, const Eigen::ArrayXd& raw_scale,
                                            const ParamScaler& scaler)
{
    Eigen::MatrixXd out = planted;
    for (Eigen::Index k = 0; k < planted.cols(); ++k)
    {
        const double raw_per_unit = (scaler.x_max(k) - scaler.x_min(k)) / (2.0 * scaler.a);
        out.col(k) *= raw_per_unit / raw_scale(k);
    }
    return out;
}

} // namespace facedirs

#endif /* FACEDIRS_DIRECTIONS_HPP */
