/*
 * facedirs - Face reenactment by learned latent directions.
 *
 * File: tests/test_core.cpp
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
#include "testkit.hpp"

#include "gtest/gtest.h"

#include <filesystem>
#include <fstream>

using namespace facedirs;
using namespace facedirs::testkit;

namespace {

void expect_suite(const Checks& c)
{
    EXPECT_TRUE(c.all_pass()) << c.failures();
    for (const auto& item : c.items())
        EXPECT_TRUE(item.pass) << item.name << ": " << item.detail;
}

std::string temp_path(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / "facedirs_test_core";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

} // namespace

TEST(Suites, Oracles) { expect_suite(oracle_suite(false)); }

TEST(Suites, FixedPoints) { expect_suite(fixed_point_suite()); }

TEST(Suites, Gradients) { expect_suite(gradient_suite()); }

// ---------------------------------------------------------------------------
// shape3d

TEST(Shape3d, LandmarksAreOneBased)
{
    ShapeBasis b = make_toy_basis(1);
    ASSERT_EQ(b.landmark_indices.size(), 68u);
    b.landmark_indices[0] = 0;
    EXPECT_THROW(b.validate(), std::out_of_range);
}

TEST(Shape3d, DimensionMismatchThrows)
{
    const ShapeBasis& b = toy_basis();
    IdentityParams id{Eigen::VectorXd::Zero(b.num_identity() + 1)};
    EXPECT_THROW(compose_shape(id, PoseExpressionParams(b.num_expr()), b), std::invalid_argument);
}

TEST(Shape3d, PairOutsideRangeThrows)
{
    const Eigen::MatrixXd lm = Eigen::MatrixXd::Zero(68, 3);
    EXPECT_THROW(pair_distances(lm, {{0, 5}}), std::out_of_range);
    EXPECT_THROW(pair_distances(lm, {{5, 69}}), std::out_of_range);
}

TEST(Shape3d, VarCompositionMatchesDouble)
{
    const ShapeBasis& b = toy_basis();
    std::mt19937_64 rng(3);
    IdentityParams id{gaussian_vector(rng, b.num_identity())};
    const auto pe = PoseExpressionParams::from_vector(gaussian_vector(rng, 15));
    const ag::Var v = compose_shape_var(ag::Var::constant(id.coeffs.array()), ag::Var::constant(pe.vector().array()), b);
    EXPECT_LT((v.value().matrix() - shape_vector(compose_shape(id, pe, b))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Shape3d, BasisRoundTrip)
{
    const std::string path = temp_path("basis.fshp");
    save_basis(toy_basis(), path);
    const ShapeBasis b = load_basis(path);
    EXPECT_TRUE(b.mean_shape == toy_basis().mean_shape);
    EXPECT_TRUE(b.expr_basis == toy_basis().expr_basis);
    EXPECT_EQ(b.landmark_indices, toy_basis().landmark_indices);
}

TEST(Shape3d, TruncatedBasisFileThrows)
{
    const std::string path = temp_path("basis_trunc.fshp");
    save_basis(toy_basis(), path);
    std::filesystem::resize_file(path, 40);
    EXPECT_THROW(load_basis(path), std::runtime_error);
}

// ---------------------------------------------------------------------------
// directions

TEST(Directions, DefaultParameterCount)
{
    DirectionsMatrix A(8, 512, 15);
    EXPECT_EQ(A.parameter_count(), 61440);
}

TEST(Directions, ShiftIsLinear)
{
    std::mt19937_64 rng(4);
    DirectionsMatrix A(8, 64, 15);
    A.set_matrix(Eigen::MatrixXd::Random(A.d_out(), 15));
    const Eigen::VectorXd x = gaussian_vector(rng, 15), y = gaussian_vector(rng, 15);
    EXPECT_LT((compute_shift(x + 2.0 * y, A) - compute_shift(x, A) - 2.0 * compute_shift(y, A)).cwiseAbs().maxCoeff(),
              1e-12);
}

TEST(Directions, OutOfRangeWarnsButProceeds)
{
    std::vector<std::string> warnings;
    auto saved = range_warning_sink();
    range_warning_sink() = [&warnings](const std::string& w) { warnings.push_back(w); };
    Eigen::VectorXd raw = toy_scaler().x_max;
    raw(0) += 100.0;
    const Eigen::VectorXd s = toy_scaler().rescale_checked(raw);
    range_warning_sink() = saved;
    EXPECT_GT(s(0), 6.0);
    EXPECT_FALSE(warnings.empty());
}

TEST(Directions, DegenerateScalerThrows)
{
    std::vector<Eigen::VectorXd> same(10, Eigen::VectorXd::Ones(15));
    EXPECT_THROW(fit_scaler(same), std::invalid_argument);
}

TEST(Directions, ShiftSizeMismatchThrows)
{
    DirectionsMatrix A(8, 64, 15);
    EXPECT_THROW(compute_shift(Eigen::VectorXd::Zero(14), A), std::invalid_argument);
    DirectionsMatrix deep(4, 64, 15, 6);
    std::mt19937_64 rng(5);
    EXPECT_THROW(apply_shift(random_code(rng), Eigen::VectorXd::Zero(deep.d_out()), deep), std::invalid_argument);
}

TEST(Directions, FileRoundTrip)
{
    DirectionsMatrix A(8, 64, 15, 0);
    A.set_matrix(Eigen::MatrixXd::Random(A.d_out(), 15));
    const std::string path = temp_path("dirs.fdir");
    save_directions(A, toy_scaler(), path);
    const auto [B, s] = load_directions(path);
    EXPECT_EQ(A.digest(), B.digest());
    EXPECT_TRUE(s.x_min == toy_scaler().x_min);
    EXPECT_TRUE(s.x_max == toy_scaler().x_max);
}

TEST(Directions, AttributeNames)
{
    const auto names = attribute_names();
    ASSERT_EQ(names.size(), 15u);
    EXPECT_EQ(names[0], "yaw");
    EXPECT_EQ(names[14], "expr12");
    EXPECT_EQ(attribute_index("expr7"), 9);
    EXPECT_EQ(attribute_index("nose"), -1);
}

TEST(Directions, FrontalizeZeroesAngles)
{
    PoseExpressionParams p(12);
    p.theta << 10.0, -4.0, 3.0;
    p.expr(2) = 1.0;
    const Eigen::VectorXd d = frontalize_delta(p, toy_scaler());
    const Eigen::VectorXd after = toy_scaler().rescale(p.vector()) + d;
    EXPECT_LT(after.head<3>().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(d.tail(12).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Directions, IdealPipelineOracles)
{
    // Reenactment and edit on ground-truth directions, read white-box.
    const DirectionsMatrix A = ideal_directions();
    std::mt19937_64 rng(6);
    double reenact_err = 0.0, leak = 0.0, front = 0.0;
    for (int i = 0; i < 10; ++i)
    {
        const LatentCode ws = random_code(rng), wt = random_code(rng);
        const auto ps = PoseExpressionParams::from_vector(
            toy_estimators().pose_expr_from_code(toy_generator(), ws.flat()));
        const auto pt = PoseExpressionParams::from_vector(
            toy_estimators().pose_expr_from_code(toy_generator(), wt.flat()));
        const LatentCode wr = reenact_code(ws, ps, pt, toy_scaler(), A);
        reenact_err = std::max(reenact_err,
                               (white_box_scaled(wr) - toy_scaler().rescale(pt.vector())).cwiseAbs().maxCoeff());
        const LatentCode we = edit_code(ws, ps, 0, 3.0, toy_scaler(), A);
        Eigen::VectorXd d = white_box_scaled(we) - white_box_scaled(ws);
        d(0) = 0.0;
        leak = std::max(leak, d.cwiseAbs().maxCoeff());
        const LatentCode wf = frontalize_code(ws, ps, toy_scaler(), A);
        front = std::max(front, white_box_scaled(wf).head<3>().cwiseAbs().maxCoeff());
    }
    EXPECT_LT(reenact_err, 0.1);
    EXPECT_LT(leak, 0.05);
    EXPECT_LT(front, 0.1);
}

// ---------------------------------------------------------------------------
// losses

TEST(Losses, SizeMismatchThrows)
{
    const ag::Var a = ag::Var::constant(Eigen::ArrayXd::Zero(4));
    const ag::Var b = ag::Var::constant(Eigen::ArrayXd::Zero(5));
    EXPECT_THROW(shape_loss(a, b), std::invalid_argument);
    EXPECT_THROW(pixel_loss(a, b), std::invalid_argument);
}

TEST(Losses, ReenactmentPartsSum)
{
    std::mt19937_64 rng(7);
    const ShapeBasis& basis = toy_basis();
    const Eigen::VectorXd a = shape_vector(compose_shape(IdentityParams{gaussian_vector(rng, 8)},
                                                         PoseExpressionParams::from_vector(gaussian_vector(rng, 15)),
                                                         basis));
    const Eigen::VectorXd b = a + gaussian_vector(rng, a.size(), 0.3);
    const LossTerms t = reenactment_loss(ag::Var::constant(a.array()), ag::Var::constant(b.array()), basis);
    EXPECT_NEAR(t.value(), t.parts.at("shape") + t.parts.at("eye") + t.parts.at("mouth"), 1e-12);
}

TEST(Losses, ObjectivesAreNonNegative)
{
    std::mt19937_64 rng(8);
    const auto& est = toy_estimators();
    for (int i = 0; i < 5; ++i)
    {
        const ag::Var x = render(random_code(rng)).var(), y = render(random_code(rng)).var();
        EXPECT_GE(reconstruction_loss(x, y, LossWeights{}, est).value(), 0.0);
        EXPECT_GE(identity_loss(x, y, est).item(), -1e-12);
    }
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, PearsonZeroVarianceThrows)
{
    EXPECT_THROW(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), std::domain_error);
    EXPECT_NEAR(pearson({1.0, 2.0, 3.0}, {2.0, 4.0, 6.0}), 1.0, 1e-12);
}

TEST(Metrics, AuWithoutDetectorIsUnavailable)
{
    std::mt19937_64 rng(9);
    const ImageTensor a = render(random_code(rng));
    EXPECT_FALSE(au_hamming(a, a, nullptr).has_value());
}

TEST(Metrics, EmptyEvaluation)
{
    const EvalReport rep = evaluate(
        {}, [](const ImageTensor& s, const ImageTensor&) { return s; }, toy_estimators(), toy_basis());
    EXPECT_TRUE(rep.empty);
    EXPECT_TRUE(rep.pairs.empty());
}

TEST(Metrics, ReportRoundTrip)
{
    std::mt19937_64 rng(10);
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 3; ++i)
        pairs.push_back({"pair" + std::to_string(i), render(random_code(rng)), render(random_code(rng)), i != 1});
    const EvalReport rep = evaluate(
        pairs, [](const ImageTensor&, const ImageTensor& t) { return t; }, toy_estimators(), toy_basis());
    const std::string path = temp_path("report.jsonl");
    {
        std::ofstream os(path);
        write_report_jsonl(rep, os);
    }
    std::ifstream is(path);
    const auto agg = read_report_aggregate(is);
    for (const auto& [k, v] : rep.aggregate)
        EXPECT_NEAR(agg.at(k), v, 1e-9) << k;
    EXPECT_NEAR(rep.aggregate.at("ard"), 0.0, 1e-12);
}

TEST(Metrics, LinearityOfIdealDirections)
{
    const auto& gen = toy_generator();
    const LinearityResult r = linearity_analysis(
        ideal_directions(), toy_scaler(), gen,
        [&gen](const LatentCode& w) { return toy_estimators().pose_expr_from_code(gen, w.flat()); }, {0, 1, 13, 9},
        50, 1);
    for (double c : r.correlation)
        EXPECT_GT(c, 0.99);
}
