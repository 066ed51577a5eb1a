/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/shape3d.hpp
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

#ifndef FACEDIRS_SHAPE3D_HPP
#define FACEDIRS_SHAPE3D_HPP

#include "facedirs/autograd.hpp"

#include "Eigen/Core"
#include "Eigen/QR"

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace facedirs {

/**
 * Pose and expression parameters p = [theta | expr].
 *
 * theta holds yaw, pitch and roll in degrees, expr the expression
 * coefficients (raw range roughly [-2, 2]).
 */
struct PoseExpressionParams
{
    Eigen::Vector3d theta = Eigen::Vector3d::Zero();
    Eigen::VectorXd expr;

    PoseExpressionParams() = default;
    explicit PoseExpressionParams(int num_expr) : expr(Eigen::VectorXd::Zero(num_expr)) {}

    int size() const { return 3 + static_cast<int>(expr.size()); }

    Eigen::VectorXd vector() const
    {
        Eigen::VectorXd p(size());
        p << theta, expr;
        return p;
    }

    static PoseExpressionParams from_vector(const Eigen::VectorXd& p)
    {
        if (p.size() < 3)
        {
            throw std::invalid_argument("PoseExpressionParams: vector needs at least 3 entries, got " +
                                        std::to_string(p.size()));
        }
        PoseExpressionParams out;
        out.theta = p.head<3>();
        out.expr = p.tail(p.size() - 3);
        return out;
    }

    bool is_finite() const { return theta.allFinite() && expr.allFinite(); }
};

struct IdentityParams
{
    Eigen::VectorXd coeffs;
};

struct FacialShape
{
    Eigen::MatrixXd vertices; ///< N×3
};

/**
 * Linear shape model: mean plus orthogonal identity, pose and expression bases.
 *
 * Bases are stored with vertex-interleaved rows (x0, y0, z0, x1, ...), so a
 * 3N vector reshapes to N×3 row by row.
 */
struct ShapeBasis
{
    Eigen::MatrixXd mean_shape;     ///< N×3
    Eigen::MatrixXd identity_basis; ///< 3N×m_i
    Eigen::MatrixXd pose_basis;     ///< 3N×3
    Eigen::MatrixXd expr_basis;     ///< 3N×m_e
    std::vector<int> landmark_indices; ///< 68 entries, 1-based vertex indices

    int num_vertices() const { return static_cast<int>(mean_shape.rows()); }
    int num_identity() const { return static_cast<int>(identity_basis.cols()); }
    int num_pose() const { return static_cast<int>(pose_basis.cols()); }
    int num_expr() const { return static_cast<int>(expr_basis.cols()); }

    Eigen::VectorXd mean_vector() const
    {
        Eigen::MatrixXd rm = mean_shape.transpose(); // column-major 3×N gives x0,y0,z0,...
        return Eigen::Map<const Eigen::VectorXd>(rm.data(), rm.size());
    }

    /// Throws if dimensions or landmark indices are inconsistent.
    void validate() const
    {
        const Eigen::Index n3 = 3 * mean_shape.rows();
        if (mean_shape.cols() != 3)
        {
            throw std::invalid_argument("ShapeBasis: mean_shape must be N×3");
        }
        if (identity_basis.rows() != n3 || pose_basis.rows() != n3 || expr_basis.rows() != n3)
        {
            throw std::invalid_argument("ShapeBasis: basis row count must equal 3N = " + std::to_string(n3));
        }
        if (pose_basis.cols() != 3)
        {
            throw std::invalid_argument("ShapeBasis: pose basis must have 3 columns");
        }
        if (landmark_indices.size() != 68)
        {
            throw std::invalid_argument("ShapeBasis: expected 68 landmark indices, got " +
                                        std::to_string(landmark_indices.size()));
        }
        std::vector<bool> seen(static_cast<std::size_t>(mean_shape.rows()) + 1, false);
        for (int idx : landmark_indices)
        {
            if (idx < 1 || idx > mean_shape.rows())
            {
                throw std::out_of_range("ShapeBasis: landmark index " + std::to_string(idx) + " outside [1, " +
                                        std::to_string(mean_shape.rows()) + "]");
            }
            if (seen[static_cast<std::size_t>(idx)])
            {
                throw std::invalid_argument("ShapeBasis: duplicate landmark index " + std::to_string(idx));
            }
            seen[static_cast<std::size_t>(idx)] = true;
        }
    }
};

namespace detail {
inline FacialShape from_vector(const Eigen::VectorXd& s)
{
    const Eigen::Index n = s.size() / 3;
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> v =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>(s.data(), n, 3);
    return FacialShape{v};
}

inline void check_dims(const IdentityParams& id, const PoseExpressionParams& pe, const ShapeBasis& basis)
{
    if (id.coeffs.size() != basis.num_identity())
    {
        throw std::invalid_argument("shape model: expected " + std::to_string(basis.num_identity()) +
                                    " identity coefficients, got " + std::to_string(id.coeffs.size()));
    }
    if (pe.expr.size() != basis.num_expr())
    {
        throw std::invalid_argument("shape model: expected " + std::to_string(basis.num_expr()) +
                                    " expression coefficients, got " + std::to_string(pe.expr.size()));
    }
}
} // namespace detail

/// s = mean + S_i p_i + S_theta p_theta + S_e p_e, reshaped to N×3.
inline FacialShape compose_shape(const IdentityParams& identity, const PoseExpressionParams& pe,
                                 const ShapeBasis& basis)
{
    detail::check_dims(identity, pe, basis);
    Eigen::VectorXd s = basis.mean_vector() + basis.identity_basis * identity.coeffs +
                        basis.pose_basis * pe.theta + basis.expr_basis * pe.expr;
    return detail::from_vector(s);
}

/**
 * Target shape for reenactment: the source identity under the target's pose
 * and expression.
 */
inline FacialShape ground_truth_shape(const IdentityParams& source_identity, const PoseExpressionParams& target_pe,
                                      const ShapeBasis& basis)
{
    return compose_shape(source_identity, target_pe, basis);
}

/// Rows of the shape at the model's landmark indices (68×3).
inline Eigen::MatrixXd landmark_points(const FacialShape& shape, const ShapeBasis& basis)
{
    if (shape.vertices.rows() != basis.num_vertices() || shape.vertices.cols() != 3)
    {
        throw std::invalid_argument("landmark_points: shape has " + std::to_string(shape.vertices.rows()) +
                                    " vertices, basis expects " + std::to_string(basis.num_vertices()));
    }
    Eigen::MatrixXd out(basis.landmark_indices.size(), 3);
    for (std::size_t i = 0; i < basis.landmark_indices.size(); ++i)
    {
        const int idx = basis.landmark_indices[i];
        if (idx < 1 || idx > shape.vertices.rows())
        {
            throw std::out_of_range("landmark_points: index " + std::to_string(idx) + " out of range");
        }
        out.row(static_cast<Eigen::Index>(i)) = shape.vertices.row(idx - 1);
    }
    return out;
}

using LandmarkPair = std::pair<int, int>;

/// L1 distance between landmark rows for each 1-based pair.
inline Eigen::VectorXd pair_distances(const Eigen::MatrixXd& landmarks, const std::vector<LandmarkPair>& pairs)
{
    Eigen::VectorXd d(static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t k = 0; k < pairs.size(); ++k)
    {
        const auto [i, j] = pairs[k];
        if (i < 1 || j < 1 || i > landmarks.rows() || j > landmarks.rows())
        {
            throw std::out_of_range("pair_distances: pair (" + std::to_string(i) + "," + std::to_string(j) +
                                    ") outside [1, " + std::to_string(landmarks.rows()) + "]");
        }
        d(static_cast<Eigen::Index>(k)) = (landmarks.row(i - 1) - landmarks.row(j - 1)).cwiseAbs().sum();
    }
    return d;
}

/**
 * Differentiable composition used inside training graphs.
 *
 * Returns the 3N shape vector (vertex-interleaved) for coefficient Vars.
 */
inline ag::Var compose_shape_var(const ag::Var& identity, const ag::Var& pose_expr, const ShapeBasis& basis)
{
    Eigen::MatrixXd pe_basis(basis.pose_basis.rows(), basis.pose_basis.cols() + basis.expr_basis.cols());
    pe_basis << basis.pose_basis, basis.expr_basis;
    ag::Var mean = ag::Var::constant(basis.mean_vector().array());
    return mean + ag::linear_map(basis.identity_basis, identity) + ag::linear_map(pe_basis, pose_expr);
}

/// The 68-point convention used by the landmark indices (all vertices in toy mode).
inline std::vector<int> sequential_landmarks(int count = 68)
{
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
    {
        idx[static_cast<std::size_t>(i)] = i + 1;
    }
    return idx;
}

/**
 * Scale factors applied to the orthonormal toy basis columns.
 *
 * Pose coefficients are in degrees and expressions in raw units; the scales
 * bring one unit of the rescaled [-6, 6] parameter range to comparable shape
 * displacement for every coordinate.
 */
struct ToyBasisScales
{
    double identity = 4.0;
    double pose_per_degree = 0.8;
    double expression = 12.0;
};

/**
 * Random toy basis: a 3N×(m_i+3+m_e) Gaussian matrix, orthonormalized by QR
 * and split into the three bases. Columns are then scaled per block, which
 * keeps them mutually orthogonal.
 */
inline ShapeBasis make_toy_basis(std::uint64_t seed, int num_vertices = 68, int num_identity = 8, int num_expr = 12,
                                 ToyBasisScales scales = {})
{
    const int cols = num_identity + 3 + num_expr;
    if (num_vertices < 68 || 3 * num_vertices < cols)
    {
        throw std::invalid_argument("make_toy_basis: need at least 68 vertices and 3N >= basis columns");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd raw(3 * num_vertices, cols);
    for (Eigen::Index j = 0; j < raw.cols(); ++j)
    {
        for (Eigen::Index i = 0; i < raw.rows(); ++i)
        {
            raw(i, j) = gauss(rng);
        }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(raw.rows(), cols);

    ShapeBasis basis;
    basis.mean_shape.resize(num_vertices, 3);
    for (int v = 0; v < num_vertices; ++v)
    {
        // A rough oval of points, enough to give the mean some structure.
        const double t = 2.0 * M_PI * v / num_vertices;
        basis.mean_shape.row(v) << 60.0 * std::cos(t), 75.0 * std::sin(t), 20.0 * std::cos(2.0 * t);
    }
    basis.identity_basis = q.leftCols(num_identity) * scales.identity;
    basis.pose_basis = q.middleCols(num_identity, 3) * scales.pose_per_degree;
    basis.expr_basis = q.rightCols(num_expr) * scales.expression;
    basis.landmark_indices = sequential_landmarks(68);
    if (num_vertices > 68)
    {
        // Spread the landmarks over the mesh, keeping them distinct.
        for (int i = 0; i < 68; ++i)
        {
            basis.landmark_indices[static_cast<std::size_t>(i)] = 1 + (i * num_vertices) / 68;
        }
    }
    basis.validate();
    return basis;
}

/*
 * Binary container (little-endian):
 *   char[4] "FSHP", uint32 version = 1,
 *   uint32 N, uint32 m_i, uint32 m_theta, uint32 m_e,
 *   uint32 landmark_count, int32 landmarks[landmark_count],
 *   float64 mean[N*3] (row-major N×3),
 *   float64 identity[3N*m_i], pose[3N*m_theta], expr[3N*m_e] (column-major).
 */
namespace detail {
template <class T>
void write_pod(std::ostream& os, const T& v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is)
    {
        throw std::runtime_error("unexpected end of file");
    }
    return v;
}
inline void write_doubles(std::ostream& os, const double* data, std::size_t n)
{
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}
inline void read_doubles(std::istream& is, double* data, std::size_t n)
{
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is)
    {
        throw std::runtime_error("unexpected end of file");
    }
}
} // namespace detail

inline void save_basis(const ShapeBasis& basis, const std::string& path)
{
    basis.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os)
    {
        throw std::runtime_error("save_basis: cannot open " + path);
    }
    os.write("FSHP", 4);
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(basis.num_vertices()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(basis.num_identity()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(basis.num_pose()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(basis.num_expr()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(basis.landmark_indices.size()));
    for (int idx : basis.landmark_indices)
    {
        detail::write_pod<std::int32_t>(os, idx);
    }
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> mean = basis.mean_shape;
    detail::write_doubles(os, mean.data(), static_cast<std::size_t>(mean.size()));
    detail::write_doubles(os, basis.identity_basis.data(), static_cast<std::size_t>(basis.identity_basis.size()));
    detail::write_doubles(os, basis.pose_basis.data(), static_cast<std::size_t>(basis.pose_basis.size()));
    detail::write_doubles(os, basis.expr_basis.data(), static_cast<std::size_t>(basis.expr_basis.size()));
}

inline ShapeBasis load_basis(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
    {
        throw std::runtime_error("load_basis: cannot open " + path);
    }
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FSHP")
    {
        throw std::runtime_error("load_basis: " + path + " is not a shape basis file");
    }
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != 1)
    {
        throw std::runtime_error("load_basis: unsupported version " + std::to_string(version));
    }
    const auto n = detail::read_pod<std::uint32_t>(is);
    const auto mi = detail::read_pod<std::uint32_t>(is);
    const auto mt = detail::read_pod<std::uint32_t>(is);
    const auto me = detail::read_pod<std::uint32_t>(is);
    const auto nl = detail::read_pod<std::uint32_t>(is);
    ShapeBasis basis;
    for (std::uint32_t i = 0; i < nl; ++i)
    {
        basis.landmark_indices.push_back(detail::read_pod<std::int32_t>(is));
    }
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> mean(n, 3);
    detail::read_doubles(is, mean.data(), static_cast<std::size_t>(mean.size()));
    basis.mean_shape = mean;
    basis.identity_basis.resize(3 * n, mi);
    basis.pose_basis.resize(3 * n, mt);
    basis.expr_basis.resize(3 * n, me);
    detail::read_doubles(is, basis.identity_basis.data(), static_cast<std::size_t>(basis.identity_basis.size()));
    detail::read_doubles(is, basis.pose_basis.data(), static_cast<std::size_t>(basis.pose_basis.size()));
    detail::read_doubles(is, basis.expr_basis.data(), static_cast<std::size_t>(basis.expr_basis.size()));
    basis.validate();
    return basis;
}

} // namespace facedirs

#endif /* FACEDIRS_SHAPE3D_HPP */
