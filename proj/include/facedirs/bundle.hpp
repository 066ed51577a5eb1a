/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/bundle.hpp
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

#ifndef FACEDIRS_BUNDLE_HPP
#define FACEDIRS_BUNDLE_HPP

#include "facedirs/backends.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/feature_refine.hpp"
#include "facedirs/inversion.hpp"
#include "facedirs/shape3d.hpp"
#include "facedirs/toy_backend.hpp"
#include "facedirs/training.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace facedirs {

/// No model bundle where one was expected.
class BundleMissing : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/**
 * A model bundle directory:
 *   manifest.json   backend id, seeds, which parts are trained
 *   basis.fshp      shape basis
 *   directions.fdir directions matrix and scaler
 *   encoder.fenc    inversion encoder (when present)
 *   fsr.ffsr        feature refinement (when present)
 */
struct ModelBundle
{
    std::string backend_id = "toy";
    std::uint64_t seed = 7;
    BackendPair backend;
    ShapeBasis basis;
    std::shared_ptr<DirectionsMatrix> directions;
    ParamScaler scaler;
    std::shared_ptr<ToyInversionEncoder> encoder;
    std::optional<FsrComponents> fsr;
    /// Names of the phases that have been run, in order.
    std::vector<std::string> phases;

    bool trained() const { return !phases.empty(); }
    bool encoder_trained() const
    {
        for (const auto& p : phases)
            if (p == "encoder")
                return true;
        return false;
    }

    ReenactModel model() const
    {
        ReenactModel m;
        m.generator = backend.generator;
        m.estimators = backend.estimators;
        m.encoder = encoder;
        m.directions = directions;
        m.scaler = scaler;
        if (fsr)
        {
            m.feature_encoder = std::make_shared<FeatureEncoder>(fsr->feature_encoder);
            m.ft = std::make_shared<FTModule>(fsr->ft);
        }
        return m;
    }

    TrainingContext context(const Dataset* data = nullptr, LossLogger* logger = nullptr) const
    {
        TrainingContext ctx;
        ctx.generator = backend.generator;
        ctx.estimators = backend.estimators;
        ctx.basis = basis;
        ctx.scaler = scaler;
        ctx.directions = *directions;
        ctx.encoder = encoder;
        ctx.data = data;
        ctx.logger = logger;
        return ctx;
    }
};

/// Fresh toy bundle: zero directions, untrained encoder, scaler fitted on sampled renders.
inline ModelBundle init_toy_bundle(std::uint64_t seed, int scaler_samples = 2000)
{
    ModelBundle b;
    b.backend_id = "toy";
    b.seed = seed;
    b.backend = create_backend("toy", seed);
    b.basis = make_toy_basis(seed + 2);
    b.scaler = fit_scaler(sample_params_dataset(*b.backend.generator, *b.backend.estimators, scaler_samples, seed + 5));
    const auto& gen = *b.backend.generator;
    b.directions = std::make_shared<DirectionsMatrix>(gen.num_layers(), gen.latent_dim(),
                                                      3 + b.backend.estimators->num_expr());
    b.encoder = std::make_shared<ToyInversionEncoder>(gen.num_layers(), gen.latent_dim(), seed + 3);
    b.encoder->set_trainable(false);
    return b;
}

inline void save_bundle(const ModelBundle& b, const std::string& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_basis(b.basis, (fs::path(dir) / "basis.fshp").string());
    save_directions(*b.directions, b.scaler, (fs::path(dir) / "directions.fdir").string());
    save_encoder(*b.encoder, (fs::path(dir) / "encoder.fenc").string());
    const fs::path fsr_path = fs::path(dir) / "fsr.ffsr";
    if (b.fsr)
        save_fsr_checkpoint(*b.fsr, fsr_path.string());
    else if (fs::exists(fsr_path))
        fs::remove(fsr_path);
    nlohmann::ordered_json m;
    m["format"] = "facedirs-bundle";
    m["version"] = 1;
    m["backend"] = b.backend_id;
    m["seed"] = b.seed;
    m["phases"] = b.phases;
    m["fsr"] = b.fsr.has_value();
    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os)
        throw std::runtime_error("cannot write bundle manifest in '" + dir + "'");
    os << m.dump(2) << '\n';
}

inline ModelBundle load_bundle(const std::string& dir)
{
    namespace fs = std::filesystem;
    const fs::path manifest = fs::path(dir) / "manifest.json";
    if (!fs::exists(manifest))
        throw BundleMissing("no model bundle at '" + dir + "' (manifest.json not found)");
    std::ifstream is(manifest);
    nlohmann::json m;
    try
    {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e)
    {
        throw BundleMissing("model bundle manifest '" + manifest.string() + "' is unreadable: " + e.what());
    }
    ModelBundle b;
    b.backend_id = m.value("backend", "toy");
    b.seed = m.value("seed", std::uint64_t{7});
    b.phases = m.value("phases", std::vector<std::string>{});
    b.backend = create_backend(b.backend_id, b.seed);
    b.basis = load_basis((fs::path(dir) / "basis.fshp").string());
    auto [A, scaler] = load_directions((fs::path(dir) / "directions.fdir").string());
    b.directions = std::make_shared<DirectionsMatrix>(A);
    b.scaler = scaler;
    const auto& gen = *b.backend.generator;
    b.encoder = std::make_shared<ToyInversionEncoder>(gen.num_layers(), gen.latent_dim(), b.seed + 3);
    load_encoder(*b.encoder, (fs::path(dir) / "encoder.fenc").string());
    b.encoder->set_trainable(false);
    if (m.value("fsr", false))
    {
        b.fsr = make_fsr_components(gen, b.seed + 4);
        load_fsr_checkpoint(*b.fsr, (fs::path(dir) / "fsr.ffsr").string());
    }
    return b;
}

/// The bundle directory from a flag, else from FACEDIRS_MODEL_ROOT.
inline std::string resolve_model_dir(const std::string& flag)
{
    if (!flag.empty())
        return flag;
    if (const char* env = std::getenv("FACEDIRS_MODEL_ROOT"); env && *env)
        return env;
    throw BundleMissing("no model bundle given: pass --model or set FACEDIRS_MODEL_ROOT");
}

/// Toy encoder pretraining: ridge warm start, then the encoder loss on same-video pairs.
inline std::vector<double> pretrain_toy_encoder(ModelBundle& b, const Dataset& data, const EncoderTrainConfig& cfg,
                                                int warm_start_samples = 600)
{
    warm_start_encoder(*b.encoder, *b.backend.generator, warm_start_samples, cfg.seed + 17);
    FramePairSampler sampler(data, PairMode::paired_same_video);
    ImagePairSource pairs = [&sampler](std::mt19937_64& rng) {
        auto [s, t] = sampler.sample(rng);
        return std::make_pair(sampler.frame(s).image, sampler.frame(t).image);
    };
    std::vector<double> curve;
    if (cfg.steps > 0)
        curve = train_encoder(*b.encoder, *b.backend.generator, *b.backend.estimators, pairs, cfg);
    b.encoder->set_trainable(false);
    b.phases.push_back("encoder");
    return curve;
}

} // namespace facedirs

#endif /* FACEDIRS_BUNDLE_HPP */
