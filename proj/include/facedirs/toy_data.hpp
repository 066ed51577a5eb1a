/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/toy_data.hpp
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

#ifndef FACEDIRS_TOY_DATA_HPP
#define FACEDIRS_TOY_DATA_HPP

#include "facedirs/backends.hpp"
#include "facedirs/image.hpp"
#include "facedirs/shape3d.hpp"
#include "facedirs/toy_backend.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/// One video frame with its cached estimator parameters.
struct Frame
{
    std::string name;
    ImageTensor image;
    PoseExpressionParams params;
    IdentityParams identity;
    /// White-box scene vector, when known (toy data made in memory).
    Eigen::VectorXd scene;
};

struct Video
{
    std::string id;
    std::vector<Frame> frames;
};

/**
 * Videos indexed by id. Layout on disk: <root>/<video_id>/<frame>.png plus
 * <root>/<video_id>/params.csv caching the estimator output per frame.
 */
struct Dataset
{
    std::vector<Video> videos;

    std::size_t num_frames() const
    {
        std::size_t n = 0;
        for (const auto& v : videos)
        {
            n += v.frames.size();
        }
        return n;
    }
};

struct ToyVideoConfig
{
    int num_videos = 8;
    int frames_per_video = 12;
    std::uint64_t seed = 21;
    /// Amplitude of the per-video border texture, in pre-activation units.
    double texture_amplitude = 0.3;
};

/**
 * Per-video border texture added before the output nonlinearity. It has no
 * counterpart in the generator's code space, so it is what inversion alone
 * cannot reproduce.
 */
inline ag::Array toy_video_texture(std::mt19937_64& rng, double amplitude)
{
    const int n = toy::image_size;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ag::Array t = ag::Array::Zero(3 * n * n);
    for (int c = 0; c < 3; ++c)
    {
        const double f1 = 1.0 + std::floor(4.0 * unif(rng));
        const double f2 = 5.0 + std::floor(6.0 * unif(rng));
        const double ph1 = 2.0 * toy::pi * unif(rng);
        const double ph2 = 2.0 * toy::pi * unif(rng);
        const double off = amplitude * (2.0 * unif(rng) - 1.0);
        for (int y = 0; y < n; ++y)
        {
            for (int x = 0; x < n; ++x)
            {
                if (!(x < 4 || x >= n - 4 || y < 4 || y >= n - 4))
                {
                    continue;
                }
                // Position along the border, in turns.
                const double s = std::atan2(y - toy::center, x - toy::center) / (2.0 * toy::pi);
                t((c * n + y) * n + x) = off + amplitude * (0.6 * std::sin(2.0 * toy::pi * f1 * s + ph1) +
                                                            0.4 * std::sin(2.0 * toy::pi * f2 * s + ph2));
            }
        }
    }
    return t;
}

/// Renders a frame of a toy video: the generator image plus the video texture (not quantized).
inline ImageTensor render_toy_frame(const ToyGenerator& gen, const LatentCode& code, const ag::Array& texture)
{
    ag::NoGradGuard guard;
    const ag::Var pre = gen.feature_at(code.var(), 5).values;
    return ImageTensor::from_var(ag::tanh(pre + ag::Var::constant(texture, pre.shape())));
}

inline std::string frame_name(int i)
{
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return buf;
}

/**
 * Toy "real" videos: fixed identity, free code component and border texture
 * per video; pose and expression drawn per frame.
 */
inline Dataset make_toy_dataset(const ToyGenerator& gen, const EstimatorSuite& est, const ToyVideoConfig& cfg)
{
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    Dataset ds;
    for (int v = 0; v < cfg.num_videos; ++v)
    {
        Video video;
        video.id = "video" + frame_name(v);
        Eigen::VectorXd identity(toy::num_identity_dims);
        for (auto& x : identity)
        {
            x = unif(rng);
        }
        Eigen::VectorXd free(gen.latent_dim());
        for (auto& x : free)
        {
            x = gen.config().free_scale * gauss(rng);
        }
        const ag::Array texture = toy_video_texture(rng, cfg.texture_amplitude);
        for (int f = 0; f < cfg.frames_per_video; ++f)
        {
            Eigen::VectorXd z(gen.latent_dim());
            for (auto& x : z)
            {
                x = gauss(rng);
            }
            Eigen::VectorXd q = gen.scene_from_z(z);
            q.tail(toy::num_identity_dims) = identity;
            Frame frame;
            frame.name = frame_name(f);
            frame.image = render_toy_frame(gen, gen.code_for_scene(q, free), texture);
            frame.params = est.pose_expr_params(frame.image);
            frame.identity = est.identity_params(frame.image);
            frame.scene = q;
            video.frames.push_back(std::move(frame));
        }
        ds.videos.push_back(std::move(video));
    }
    return ds;
}

namespace detail {

inline void write_params_csv(const Video& video, const std::string& path)
{
    std::ofstream os(path);
    if (!os)
    {
        throw std::runtime_error("cannot write '" + path + "'");
    }
    os << "frame";
    if (!video.frames.empty())
    {
        const auto& f0 = video.frames.front();
        for (Eigen::Index i = 0; i < f0.params.vector().size(); ++i)
        {
            os << ",p" << i;
        }
        for (Eigen::Index i = 0; i < f0.identity.coeffs.size(); ++i)
        {
            os << ",id" << i;
        }
    }
    os << '\n';
    char buf[32];
    for (const auto& f : video.frames)
    {
        os << f.name;
        for (double v : f.params.vector())
        {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << ',' << buf;
        }
        for (double v : f.identity.coeffs)
        {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << ',' << buf;
        }
        os << '\n';
    }
}

/// Returns false if the cache is missing or does not match the frame list.
inline bool read_params_csv(Video& video, const std::string& path, int num_pose_expr)
{
    std::ifstream is(path);
    if (!is)
    {
        return false;
    }
    std::string line;
    std::getline(is, line);
    std::size_t i = 0;
    while (std::getline(is, line))
    {
        if (line.empty())
        {
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        if (i >= video.frames.size() || cell != video.frames[i].name)
        {
            return false;
        }
        std::vector<double> vals;
        while (std::getline(ss, cell, ','))
        {
            vals.push_back(std::stod(cell));
        }
        if (static_cast<int>(vals.size()) <= num_pose_expr)
        {
            return false;
        }
        Eigen::VectorXd p = Eigen::Map<Eigen::VectorXd>(vals.data(), num_pose_expr);
        video.frames[i].params = PoseExpressionParams::from_vector(p);
        video.frames[i].identity.coeffs =
            Eigen::Map<Eigen::VectorXd>(vals.data() + num_pose_expr, static_cast<Eigen::Index>(vals.size()) - num_pose_expr);
        ++i;
    }
    return i == video.frames.size();
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& root)
{
    namespace fs = std::filesystem;
    for (const auto& video : ds.videos)
    {
        const fs::path dir = fs::path(root) / video.id;
        fs::create_directories(dir);
        for (const auto& f : video.frames)
        {
            write_png(f.image, (dir / (f.name + ".png")).string());
        }
        detail::write_params_csv(video, (dir / "params.csv").string());
    }
}

/**
 * Loads <root>/<video>/<frame>.png. Estimator parameters come from each
 * video's params.csv when it matches the frames; otherwise they are
 * computed and the cache is written.
 */
inline Dataset load_dataset(const std::string& root, const EstimatorSuite& est)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
    {
        throw std::runtime_error("dataset root '" + root + "' is not a directory");
    }
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
    {
        if (e.is_directory())
        {
            dirs.push_back(e.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    Dataset ds;
    for (const auto& dir : dirs)
    {
        Video video;
        video.id = dir.filename().string();
        std::vector<fs::path> pngs;
        for (const auto& e : fs::directory_iterator(dir))
        {
            if (e.is_regular_file() && e.path().extension() == ".png")
            {
                pngs.push_back(e.path());
            }
        }
        std::sort(pngs.begin(), pngs.end());
        for (const auto& p : pngs)
        {
            Frame f;
            f.name = p.stem().string();
            f.image = read_png(p.string());
            video.frames.push_back(std::move(f));
        }
        if (video.frames.empty())
        {
            continue;
        }
        const std::string cache = (dir / "params.csv").string();
        if (!detail::read_params_csv(video, cache, 3 + est.num_expr()))
        {
            for (auto& f : video.frames)
            {
                f.params = est.pose_expr_params(f.image);
                f.identity = est.identity_params(f.image);
            }
            detail::write_params_csv(video, cache);
        }
        ds.videos.push_back(std::move(video));
    }
    return ds;
}

} // namespace facedirs

#endif /* FACEDIRS_TOY_DATA_HPP */
