/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: include/facedirs/metrics.hpp
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

#ifndef FACEDIRS_METRICS_HPP
#define FACEDIRS_METRICS_HPP

#include "facedirs/backends.hpp"
#include "facedirs/directions.hpp"
#include "facedirs/image.hpp"
#include "facedirs/shape3d.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedirs {

/// Cosine of two vectors.
inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    if (a.size() != b.size())
        throw std::invalid_argument("cosine: length mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0)
        throw std::domain_error("cosine: zero vector");
    return a.dot(b) / (na * nb);
}

/// Cosine of identity embeddings.
inline double csim(const ImageTensor& a, const ImageTensor& b, const EstimatorSuite& est)
{
    ag::NoGradGuard guard;
    return cosine(est.identity_embed(a.var()).value().matrix(), est.identity_embed(b.var()).value().matrix());
}

/// Mean over yaw, pitch and roll of the absolute difference, raw degrees.
inline double ard(const PoseExpressionParams& a, const PoseExpressionParams& b)
{
    return (a.theta - b.theta).cwiseAbs().mean();
}

/// Mean absolute difference of the raw expression coefficients.
inline double aed(const PoseExpressionParams& a, const PoseExpressionParams& b)
{
    if (a.expr.size() != b.expr.size() || a.expr.size() == 0)
        throw std::invalid_argument("aed: expression lengths differ or are empty");
    return (a.expr - b.expr).cwiseAbs().mean();
}

/**
 * Normalized mean landmark error: mean Euclidean point distance divided by
 * the square root of the ground-truth box area, times 1000.
 */
inline double nme(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double gt_bbox_area)
{
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || pred.rows() == 0)
        throw std::invalid_argument("nme: landmark sets differ in shape");
    if (!(gt_bbox_area > 0.0))
        throw std::invalid_argument("nme: bounding-box area must be > 0");
    return (pred - gt).rowwise().norm().mean() / std::sqrt(gt_bbox_area) * 1e3;
}

/// Area of the axis-aligned box around 2D points.
inline double bbox_area(const Eigen::MatrixXd& pts)
{
    const Eigen::VectorXd lo = pts.colwise().minCoeff(), hi = pts.colwise().maxCoeff();
    return (hi(0) - lo(0)) * (hi(1) - lo(1));
}

/// Action-unit detector plug-in (binary activations).
class AuDetector
{
public:
    virtual ~AuDetector() = default;
    virtual Eigen::VectorXi detect(const ImageTensor& image) const = 0;
};

inline double au_hamming(const Eigen::VectorXi& a, const Eigen::VectorXi& b)
{
    if (a.size() != b.size() || a.size() == 0)
        throw std::invalid_argument("au_hamming: vectors differ in length or are empty");
    return static_cast<double>((a.array() != b.array()).count()) / static_cast<double>(a.size());
}

/// Empty when no detector is registered; the metric is then unavailable.
inline std::optional<double> au_hamming(const ImageTensor& a, const ImageTensor& b, const AuDetector* detector)
{
    if (!detector)
        return std::nullopt;
    return au_hamming(detector->detect(a), detector->detect(b));
}

/// Pearson correlation. Zero variance in either input is an error.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("pearson: need two equal-length samples of size >= 2");
    const Eigen::Map<const Eigen::ArrayXd> a(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::Map<const Eigen::ArrayXd> b(y.data(), static_cast<Eigen::Index>(y.size()));
    const Eigen::ArrayXd da = a - a.mean(), db = b - b.mean();
    const double va = da.square().sum(), vb = db.square().sum();
    if (va <= 0.0 || vb <= 0.0)
        throw std::domain_error("pearson: zero variance in probe set");
    return (da * db).sum() / std::sqrt(va * vb);
}

/// Reads raw pose/expression parameters for a code.
using ParamReader = std::function<Eigen::VectorXd(const LatentCode&)>;

/// Reader that renders the code and applies the pose/expression estimator.
inline ParamReader estimator_reader(const GeneratorBackend& gen, const EstimatorSuite& est)
{
    return [&gen, &est](const LatentCode& c) -> Eigen::VectorXd {
        ag::NoGradGuard guard;
        return est.pose_expr(gen.synthesize(c.var())).value().matrix();
    };
}

struct LinearityResult
{
    std::vector<int> attributes;
    std::vector<double> correlation;
    /// Per attribute: (‖Δw‖, |Δp̂|) probe pairs.
    std::vector<std::vector<std::pair<double, double>>> probes;
};

/**
 * For each attribute k: n_probes random codes, a one-hot Δp with magnitude
 * uniform in [-a, a], shift by A, and measure |Δp̂_k| in scaled units.
 * Returns the Pearson correlation of ‖Δw‖ against |Δp̂_k|.
 */
inline LinearityResult linearity_analysis(const DirectionsMatrix& A, const ParamScaler& scaler,
                                          const GeneratorBackend& gen, const ParamReader& read,
                                          const std::vector<int>& attrs, int n_probes, std::uint64_t seed)
{
    if (n_probes < 2)
        throw std::invalid_argument("linearity_analysis: need n_probes >= 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> mag(-scaler.a, scaler.a);
    LinearityResult r;
    r.attributes = attrs;
    for (int k : attrs)
    {
        if (k < 0 || k >= A.d_in())
            throw std::out_of_range("linearity_analysis: attribute " + std::to_string(k));
        std::vector<double> xs, ys;
        std::vector<std::pair<double, double>> pts;
        for (int i = 0; i < n_probes; ++i)
        {
            Eigen::VectorXd z(gen.latent_dim());
            for (auto& v : z)
                v = gauss(rng);
            const LatentCode w = gen.map_latent(z);
            Eigen::VectorXd dp = Eigen::VectorXd::Zero(A.d_in());
            dp(k) = mag(rng);
            const Eigen::VectorXd dw = compute_shift(dp, A);
            const LatentCode w2 = apply_shift(w, dw, A);
            const double measured = std::abs(scaler.rescale(read(w2))(k) - scaler.rescale(read(w))(k));
            xs.push_back(dw.norm());
            ys.push_back(measured);
            pts.emplace_back(dw.norm(), measured);
        }
        r.correlation.push_back(pearson(xs, ys));
        r.probes.push_back(std::move(pts));
    }
    return r;
}

/**
 * Leakage table: row k holds the mean absolute change (scaled units) of
 * every attribute when attribute k alone is edited by ±edit_magnitude.
 */
struct DisentanglementReport
{
    Eigen::MatrixXd leakage;

    /// Mean off-target change for edited attribute k.
    double off_target(int k) const
    {
        double s = 0.0;
        for (Eigen::Index j = 0; j < leakage.cols(); ++j)
            if (j != k)
                s += leakage(k, j);
        return s / static_cast<double>(leakage.cols() - 1);
    }
    /// Change of the three angles when k is edited.
    Eigen::Vector3d angle_errors(int k) const { return leakage.row(k).head<3>().transpose(); }
    /// Mean expression change excluding k.
    double expression_error(int k) const
    {
        double s = 0.0;
        int n = 0;
        for (Eigen::Index j = 3; j < leakage.cols(); ++j)
        {
            if (j == k)
                continue;
            s += leakage(k, j);
            ++n;
        }
        return n ? s / n : 0.0;
    }
};

inline DisentanglementReport disentanglement_report(const DirectionsMatrix& A, const ParamScaler& scaler,
                                                    const GeneratorBackend& gen, const ParamReader& read,
                                                    int n_pairs, std::uint64_t seed, double edit_magnitude = 3.0)
{
    if (n_pairs < 1)
        throw std::invalid_argument("disentanglement_report: n_pairs must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int d = A.d_in();
    DisentanglementReport r;
    r.leakage = Eigen::MatrixXd::Zero(d, d);
    std::vector<LatentCode> codes;
    std::vector<Eigen::VectorXd> base;
    for (int i = 0; i < n_pairs; ++i)
    {
        Eigen::VectorXd z(gen.latent_dim());
        for (auto& v : z)
            v = gauss(rng);
        codes.push_back(gen.map_latent(z));
        base.push_back(scaler.rescale(read(codes.back())));
    }
    for (int k = 0; k < d; ++k)
    {
        for (int i = 0; i < n_pairs; ++i)
        {
            Eigen::VectorXd dp = Eigen::VectorXd::Zero(d);
            dp(k) = i % 2 ? edit_magnitude : -edit_magnitude;
            const LatentCode w2 = apply_shift(codes[static_cast<std::size_t>(i)], compute_shift(dp, A), A);
            r.leakage.row(k) += (scaler.rescale(read(w2)) - base[static_cast<std::size_t>(i)]).cwiseAbs().transpose();
        }
    }
    r.leakage /= n_pairs;
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation harness

struct EvalPair
{
    std::string name;
    ImageTensor source;
    ImageTensor target;
    bool self = true; ///< same identity (self-reenactment)
};

struct PairMetrics
{
    std::string name;
    bool self = true;
    double csim = 0.0;
    double ard = 0.0;
    double aed = 0.0;
    double nme = 0.0;
    std::optional<double> au_h;
};

/// Batch of (reference, output) pairs to one scalar: LPIPS, FID, FVD style evaluators.
using ExternalEvaluator = std::function<double(const std::vector<std::pair<ImageTensor, ImageTensor>>&)>;

struct EvalReport
{
    std::vector<PairMetrics> pairs;
    std::map<std::string, double> aggregate;
    std::map<std::string, double> external;
    bool empty = true;
    bool au_available = false;
};

using Reenactor = std::function<ImageTensor(const ImageTensor& source, const ImageTensor& target)>;

struct EvalOptions
{
    const AuDetector* au_detector = nullptr;
    std::map<std::string, ExternalEvaluator> external;
};

/**
 * Runs the reenactor over pairs. Pose, expression and landmark metrics are
 * measured against the target. CSIM is measured against the target for
 * self pairs and against the source for cross-identity pairs.
 */
inline EvalReport evaluate(const std::vector<EvalPair>& pairs, const Reenactor& reenact, const EstimatorSuite& est,
                           const ShapeBasis& basis, const EvalOptions& opts = {})
{
    EvalReport rep;
    rep.empty = pairs.empty();
    rep.au_available = opts.au_detector != nullptr;
    std::vector<std::pair<ImageTensor, ImageTensor>> outputs;
    for (const auto& p : pairs)
    {
        const ImageTensor out = reenact(p.source, p.target);
        PairMetrics m;
        m.name = p.name;
        m.self = p.self;
        m.csim = csim(p.self ? p.target : p.source, out, est);
        const PoseExpressionParams pt = est.pose_expr_params(p.target);
        const PoseExpressionParams po = est.pose_expr_params(out);
        m.ard = ard(po, pt);
        m.aed = aed(po, pt);
        const IdentityParams id_t = est.identity_params(p.target);
        const IdentityParams id_o = est.identity_params(out);
        const Eigen::MatrixXd lt = landmark_points(compose_shape(id_t, pt, basis), basis).leftCols(2);
        const Eigen::MatrixXd lo = landmark_points(compose_shape(id_o, po, basis), basis).leftCols(2);
        m.nme = nme(lo, lt, bbox_area(lt));
        m.au_h = au_hamming(p.target, out, opts.au_detector);
        rep.pairs.push_back(m);
        outputs.emplace_back(p.target, out);
    }
    if (!rep.empty)
    {
        const double n = static_cast<double>(rep.pairs.size());
        double c = 0, a = 0, e = 0, l = 0, h = 0;
        for (const auto& m : rep.pairs)
        {
            c += m.csim;
            a += m.ard;
            e += m.aed;
            l += m.nme;
            h += m.au_h.value_or(0.0);
        }
        rep.aggregate = {{"csim", c / n}, {"ard", a / n}, {"aed", e / n}, {"nme", l / n}};
        if (rep.au_available)
            rep.aggregate["au_h"] = h / n;
        for (const auto& [name, fn] : opts.external)
            rep.external[name] = fn(outputs);
    }
    return rep;
}

/// One JSON object per pair followed by an aggregate record.
inline void write_report_jsonl(const EvalReport& rep, std::ostream& os)
{
    for (const auto& m : rep.pairs)
    {
        nlohmann::ordered_json j;
        j["record"] = "pair";
        j["name"] = m.name;
        j["self"] = m.self;
        j["csim"] = m.csim;
        j["ard"] = m.ard;
        j["aed"] = m.aed;
        j["nme"] = m.nme;
        if (m.au_h)
            j["au_h"] = *m.au_h;
        else
            j["au_h"] = "unavailable";
        os << j.dump() << '\n';
    }
    nlohmann::ordered_json agg;
    agg["record"] = "aggregate";
    agg["empty"] = rep.empty;
    agg["count"] = rep.pairs.size();
    for (const auto& [k, v] : rep.aggregate)
        agg[k] = v;
    if (!rep.au_available)
        agg["au_h"] = "unavailable";
    for (const auto& [k, v] : rep.external)
        agg["external_" + k] = v;
    os << agg.dump() << '\n';
}

inline void write_report_csv(const EvalReport& rep, std::ostream& os)
{
    os << "name,self,csim,ard,aed,nme,au_h\n";
    char buf[256];
    for (const auto& m : rep.pairs)
    {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%.17g,", m.name.c_str(), m.self ? 1 : 0, m.csim,
                      m.ard, m.aed, m.nme);
        os << buf;
        if (m.au_h)
        {
            std::snprintf(buf, sizeof(buf), "%.17g", *m.au_h);
            os << buf;
        }
        os << '\n';
    }
}

/// Aggregate record parsed back from a JSON-lines report.
inline std::map<std::string, double> read_report_aggregate(std::istream& is)
{
    std::string line;
    while (std::getline(is, line))
    {
        if (line.empty())
            continue;
        const auto j = nlohmann::json::parse(line);
        if (j.value("record", "") != "aggregate")
            continue;
        std::map<std::string, double> out;
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.value().is_number() && it.key() != "count")
                out[it.key()] = it.value().get<double>();
        return out;
    }
    throw std::runtime_error("report has no aggregate record");
}

/**
 * Scatter plot of (x, y) points as a size×size image with a unit margin box.
 */
inline ImageTensor scatter_plot(const std::vector<std::pair<double, double>>& pts, int size = 256)
{
    ImageTensor img(3, size, size);
    img.data.setConstant(1.0);
    if (pts.empty())
        return img;
    double x0 = pts[0].first, x1 = x0, y0 = pts[0].second, y1 = y0;
    for (const auto& [x, y] : pts)
    {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
    const double sx = x1 > x0 ? x1 - x0 : 1.0, sy = y1 > y0 ? y1 - y0 : 1.0;
    const int m = size / 16;
    for (int i = m; i < size - m; ++i)
    {
        for (int c = 0; c < 3; ++c)
        {
            img.at(c, size - m, i) = -1.0;
            img.at(c, i, m - 1) = -1.0;
        }
    }
    for (const auto& [x, y] : pts)
    {
        const int px = m + static_cast<int>(std::lround((x - x0) / sx * (size - 2 * m - 1)));
        const int py = size - m - 1 - static_cast<int>(std::lround((y - y0) / sy * (size - 2 * m - 1)));
        for (int dy = -1; dy <= 1; ++dy)
        {
            for (int dx = -1; dx <= 1; ++dx)
            {
                const int yy = py + dy, xx = px + dx;
                if (yy < 0 || yy >= size || xx < 0 || xx >= size)
                    continue;
                img.at(0, yy, xx) = 0.6;
                img.at(1, yy, xx) = -0.8;
                img.at(2, yy, xx) = -0.8;
            }
        }
    }
    return img;
}

/**
 * Heat map of a non-negative matrix, one cell×cell block per entry. Zero is
 * white and the largest entry is full red.
 */
inline ImageTensor heatmap_image(const Eigen::MatrixXd& m, int cell = 16)
{
    const int rows = static_cast<int>(m.rows()), cols = static_cast<int>(m.cols());
    ImageTensor img(3, rows * cell, cols * cell);
    const double top = m.size() ? m.maxCoeff() : 0.0;
    for (int r = 0; r < rows; ++r)
    {
        for (int c = 0; c < cols; ++c)
        {
            const double t = top > 0.0 ? std::clamp(m(r, c) / top, 0.0, 1.0) : 0.0;
            for (int y = r * cell; y < (r + 1) * cell; ++y)
            {
                for (int x = c * cell; x < (c + 1) * cell; ++x)
                {
                    img.at(0, y, x) = 1.0;
                    img.at(1, y, x) = 1.0 - 2.0 * t;
                    img.at(2, y, x) = 1.0 - 2.0 * t;
                }
            }
        }
    }
    return img;
}

} // namespace facedirs

#endif /* FACEDIRS_METRICS_HPP */
