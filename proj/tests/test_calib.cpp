#include "cryoscan/calib.hpp"
#include "cryoscan/errors.hpp"
#include "oracles/oracles.hpp"

#include <Eigen/LU>
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>

using namespace cryoscan;
using namespace cryoscan::calib;

namespace {

constexpr double kPi = std::numbers::pi;

IntensityImage raster(int w, int h, double pitch_um, const oracle::Spot& spot, double peak) {
    IntensityImage img;
    img.width = w;
    img.height = h;
    img.pixel_pitch_um = pitch_um;
    img.values = oracle::gaussian_raster(w, h, pitch_um, spot, peak);
    return img;
}

double angle_diff(double a, double b) {
    double d = std::fmod(a - b, kPi);
    if (d > kPi / 2) d -= kPi;
    if (d < -kPi / 2) d += kPi;
    return std::abs(d);
}

scan::ResponseMap grid_map(std::size_t nx, std::size_t ny, const std::function<double(double, double)>& f,
                           std::array<double, 2> xr = {-1.0, 1.0}, std::array<double, 2> yr = {-1.0, 1.0}) {
    scan::ResponseMap m;
    m.plan = scan::plan_grid(xr, yr, nx, ny);
    for (std::size_t k = 0; k < m.plan.point_count(); ++k) {
        scan::ResponseSample s;
        std::tie(s.ix, s.iy) = m.plan.index(k);
        s.v = m.plan.point(k);
        s.s21_off = 0.5;
        s.delta = f(s.v.vx(), s.v.vy());
        s.s21_on = s.s21_off + s.delta;
        m.samples.push_back(s);
    }
    m.meta.complete = true;
    return m;
}

MappingModel reference_model() {
    MappingModel m;
    m.affine << 14.8, -0.9, 0.7, 14.6;
    m.offset = Eigen::Vector2d(0.3, -0.2);
    m.kappa_x = 3.0;
    m.kappa_y = 2.5;
    return m;
}

// Forward map written from the model definition, independent of predict().
Eigen::Vector2d forward(const MappingModel& m, double vx, double vy) {
    return m.affine * Eigen::Vector2d(oracle::saturation(vx, m.kappa_x), oracle::saturation(vy, m.kappa_y)) + m.offset;
}

// Voltages that land exactly on each target, by per-axis bisection.
BlobSet blobs_for(const MappingModel& m, const std::vector<Vec2>& targets) {
    BlobSet out;
    for (const auto& t : targets) {
        const Eigen::Vector2d u = m.affine.inverse() * (t - m.offset);
        Blob b;
        const double vx = oracle::bisect([&](double v) { return oracle::saturation(v, m.kappa_x); }, u.x(), -1, 1);
        const double vy = oracle::bisect([&](double v) { return oracle::saturation(v, m.kappa_y); }, u.y(), -1, 1);
        b.centroid = VoltageCoord(vx, vy);
        b.weight = 1.0;
        b.pixel_count = 9;
        out.push_back(b);
    }
    return out;
}

std::vector<Vec2> hole_grid() {
    std::vector<Vec2> h;
    for (double y : {-5.0, 2.0, 9.0}) {
        for (double x : {-5.0, 2.0, 9.0}) h.emplace_back(x, y);
    }
    return h;
}

}  // namespace

TEST(FitSpot, CircularDiameterIsFourSigma) {
    const auto img = raster(96, 96, 5.0, {0.24, 0.24, 42.5, 42.5, 0.0, 1.0}, 1000.0);
    const auto fit = fit_spot(img);
    EXPECT_NEAR(fit.spot.diameter_major_um(), 170.0, 0.85);
    EXPECT_NEAR(fit.spot.diameter_minor_um(), 170.0, 0.85);
    EXPECT_NEAR(fit.spot.center_mm.x(), 0.24, 1e-3);
    EXPECT_NEAR(fit.spot.center_mm.y(), 0.24, 1e-3);
}

TEST(FitSpot, RotatedEllipseRoundTrip) {
    const auto img = raster(80, 80, 4.0, {0.16, 0.15, 50.0, 25.0, 30.0 * kPi / 180.0, 1.0}, 2000.0);
    const auto fit = fit_spot(img);
    EXPECT_NEAR(fit.spot.sigma_major_um, 50.0, 1.0);
    EXPECT_NEAR(fit.spot.sigma_minor_um, 25.0, 0.5);
    EXPECT_LT(angle_diff(fit.spot.orientation_rad, 30.0 * kPi / 180.0), 2.0 * kPi / 180.0);
}

TEST(FitSpot, RandomizedWithNoise) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> sig(20.0, 60.0);
    std::uniform_real_distribution<double> ang(-kPi / 2, kPi / 2);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int i = 0; i < 10; ++i) {
        double a = sig(rng);
        double b = sig(rng);
        if (a < b) std::swap(a, b);
        if (a / b < 1.2) a = 1.2 * b;
        const double th = ang(rng);
        auto img = raster(100, 100, 4.0, {0.2, 0.2, a, b, th, 1.0}, 1000.0);
        for (auto& v : img.values) v = std::max(0.0, v + 50.0 + 10.0 * noise(rng));  // SNR 100
        const auto fit = fit_spot(img);
        EXPECT_NEAR(fit.spot.sigma_major_um / a, 1.0, 0.02) << i;
        EXPECT_NEAR(fit.spot.sigma_minor_um / b, 1.0, 0.02) << i;
        EXPECT_LT(angle_diff(fit.spot.orientation_rad, th), 2.0 * kPi / 180.0) << i;
    }
}

TEST(FitSpot, ScaleInvariant) {
    const auto img = raster(64, 64, 5.0, {0.17, 0.15, 40.0, 30.0, 0.5, 1.0}, 800.0);
    auto scaled = img;
    for (auto& v : scaled.values) v *= 37.0;
    const auto a = fit_spot(img);
    const auto b = fit_spot(scaled);
    EXPECT_NEAR(a.spot.sigma_major_um, b.spot.sigma_major_um, 1e-6);
    EXPECT_NEAR(a.spot.sigma_minor_um, b.spot.sigma_minor_um, 1e-6);
    EXPECT_NEAR(a.spot.orientation_rad, b.spot.orientation_rad, 1e-9);
    EXPECT_NEAR((a.spot.center_mm - b.spot.center_mm).norm(), 0.0, 1e-9);
}

TEST(FitSpot, StructuredErrors) {
    IntensityImage flat{16, 16, 5.0, std::vector<double>(256, 10.0), std::nullopt};
    EXPECT_THROW(fit_spot(flat), FitError);

    auto small = raster(6, 6, 5.0, {0.015, 0.015, 5.0, 5.0, 0.0, 1.0}, 100.0);
    EXPECT_THROW(fit_spot(small), FitError);

    auto clipped = raster(64, 64, 5.0, {0.16, 0.16, 40.0, 40.0, 0.0, 1.0}, 4000.0);
    for (auto& v : clipped.values) v = std::min(v, 1000.0);
    EXPECT_THROW(fit_spot(clipped), FitError);

    auto sat = raster(64, 64, 5.0, {0.16, 0.16, 40.0, 40.0, 0.0, 1.0}, 1000.0);
    sat.saturation_level = 900.0;
    EXPECT_THROW(fit_spot(sat), FitError);
}

TEST(Pgm, RoundTripAndFit) {
    auto img = raster(64, 64, 5.0, {0.16, 0.16, 42.5, 42.5, 0.0, 1.0}, 40000.0);
    const auto bytes = format_pgm(img);
    const auto back = parse_pgm(bytes, 5.0);
    EXPECT_EQ(back.width, 64);
    EXPECT_EQ(back.height, 64);
    for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_NEAR(back.values[i], img.values[i], 0.5);
    EXPECT_NEAR(fit_spot(back).spot.diameter_major_um(), 170.0, 0.9);
    EXPECT_THROW(parse_pgm("P2\n2 2\n255\n0 0 0 0\n", 5.0), ParseError);
    EXPECT_THROW(parse_pgm("P5\n4 4\n255\nab", 5.0), ParseError);
}

TEST(DetectHoles, ZerosAndValidation) {
    const auto zeros = grid_map(11, 11, [](double, double) { return 0.0; });
    EXPECT_TRUE(detect_holes(zeros).empty());
    EXPECT_THROW(detect_holes(zeros, 0.0), ValidationError);
    EXPECT_THROW(detect_holes(zeros, 1.0), ValidationError);
    scan::ResponseMap line;
    line.plan = scan::plan_line(VoltageCoord(0, 0), VoltageCoord(1, 1), 3);
    EXPECT_THROW(detect_holes(line), ValidationError);
}

TEST(DetectHoles, TwoHolesNearOraclePositions) {
    const double step = 2.0 / 40.0;
    auto disc = [](double x, double y, double cx, double cy, double r) {
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r ? 1.0 : 0.0;
    };
    const auto map = grid_map(41, 41, [&](double x, double y) {
        return disc(x, y, -0.42, 0.3, 0.15) + 0.8 * disc(x, y, 0.5, -0.37, 0.12);
    });
    auto blobs = detect_holes(map, 0.3);
    ASSERT_EQ(blobs.size(), 2u);
    std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) { return a.centroid.vx() < b.centroid.vx(); });
    EXPECT_LT(std::hypot(blobs[0].centroid.vx() + 0.42, blobs[0].centroid.vy() - 0.3), step);
    EXPECT_LT(std::hypot(blobs[1].centroid.vx() - 0.5, blobs[1].centroid.vy() + 0.37), step);
    for (const auto& b : blobs) EXPECT_GT(b.weight, 0.0);
}

TEST(DetectHoles, InvariantUnderConstantOffset) {
    auto f = [](double x, double y) { return std::exp(-((x - 0.2) * (x - 0.2) + y * y) / 0.02); };
    const auto a = detect_holes(grid_map(31, 31, f));
    const auto b = detect_holes(grid_map(31, 31, [&](double x, double y) { return f(x, y) + 0.37; }));
    ASSERT_EQ(a.size(), 1u);
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(a[0].pixel_count, b[0].pixel_count);
    EXPECT_NEAR(a[0].centroid.vx(), b[0].centroid.vx(), 1e-12);
    EXPECT_NEAR(a[0].centroid.vy(), b[0].centroid.vy(), 1e-12);
}

TEST(Distortion, DiscIsRoundEllipseIsNot) {
    const device::Hole ref{Vec2(0, 0), 1.0};
    const auto disc = detect_holes(grid_map(41, 41, [](double x, double y) { return x * x + y * y <= 0.25 ? 1.0 : 0.0; }));
    ASSERT_EQ(disc.size(), 1u);
    EXPECT_LT(distortion_metrics(disc[0], ref).eccentricity, 1e-6);

    // Semi-axes 0.6 along the 45 degree diagonal and 0.3 across it.
    const double c = std::cos(kPi / 4);
    const auto ell = detect_holes(grid_map(81, 81, [&](double x, double y) {
        const double a = (c * x + c * y) / 0.6;
        const double b = (-c * x + c * y) / 0.3;
        return a * a + b * b <= 1.0 ? 1.0 : 0.0;
    }));
    ASSERT_EQ(ell.size(), 1u);
    const auto m = distortion_metrics(ell[0], ref);
    EXPECT_NEAR(m.eccentricity, std::sqrt(1.0 - 0.25), 0.02);
    EXPECT_NEAR(m.aspect_ratio, 2.0, 0.05);
    EXPECT_LT(angle_diff(m.elongation_axis_rad, kPi / 4), 0.02);

    Blob single;
    single.pixel_count = 1;
    single.weight = 1.0;
    EXPECT_THROW(distortion_metrics(single, ref), FitError);
    EXPECT_THROW(distortion_metrics(ell[0], device::Hole{Vec2(0, 0), 0.0}), ValidationError);
}

TEST(Mapping, JsonRoundTripAndFile) {
    auto m = reference_model();
    m.residual_rms_mm = 0.0123;
    m.provenance = "map.csv sha256:abcd";
    const auto back = mapping_from_json(mapping_to_json(m));
    EXPECT_EQ(back.affine, m.affine);
    EXPECT_EQ(back.offset, m.offset);
    EXPECT_EQ(back.kappa_x, m.kappa_x);
    EXPECT_EQ(back.kappa_y, m.kappa_y);
    EXPECT_EQ(back.residual_rms_mm, m.residual_rms_mm);
    EXPECT_EQ(back.provenance, m.provenance);

    const auto path = std::filesystem::temp_directory_path() / "cryoscan_model_test.json";
    save_mapping(m, path);
    EXPECT_EQ(load_mapping(path).affine, m.affine);
    std::filesystem::remove(path);

    auto text = mapping_to_json(m);
    EXPECT_THROW(mapping_from_json(text.substr(0, text.size() / 2)), ParseError);
    EXPECT_THROW(mapping_from_json(R"({"format":"other"})"), ValidationError);
    m.affine << 1, 2, 2, 4;
    EXPECT_THROW(m.validate(), ValidationError);
}

TEST(Mapping, PredictMatchesIndependentForward) {
    const auto m = reference_model();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        const double vx = u(rng);
        const double vy = u(rng);
        EXPECT_NEAR((m.predict(vx, vy) - forward(m, vx, vy)).norm(), 0.0, 1e-12);
    }
}

TEST(Mapping, AffineOnlyRecoveredExactly) {
    auto truth = reference_model();
    truth.kappa_x = 0.0;
    truth.kappa_y = 0.0;
    const auto holes = hole_grid();
    const auto fit = fit_mapping_detailed(blobs_for(truth, holes), holes);
    EXPECT_EQ(fit.matches.size(), 9u);
    EXPECT_LT((fit.model.affine - truth.affine).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((fit.model.offset - truth.offset).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT(fit.model.residual_rms_mm, 1e-6);
}

TEST(Mapping, SaturatingModelRecovered) {
    const auto truth = reference_model();
    const auto holes = hole_grid();
    const auto fit = fit_mapping_detailed(blobs_for(truth, holes), holes);
    EXPECT_TRUE(fit.kappa_fitted);
    EXPECT_NEAR(fit.model.kappa_x, truth.kappa_x, 0.1 * truth.kappa_x);
    EXPECT_NEAR(fit.model.kappa_y, truth.kappa_y, 0.1 * truth.kappa_y);
    EXPECT_LT(fit.model.residual_rms_mm, 0.1);
    for (const auto& c : fit.matches) EXPECT_EQ(c.blob, c.hole);
}

TEST(Mapping, ResidualShrinksWithNoise) {
    const auto truth = reference_model();
    const auto holes = hole_grid();
    const auto clean = blobs_for(truth, holes);
    std::vector<double> rms;
    for (double level : {0.0, 2e-4, 2e-3}) {
        auto blobs = clean;
        for (std::size_t i = 0; i < blobs.size(); ++i) {
            const double phase = 1.7 * static_cast<double>(i);
            blobs[i].centroid = VoltageCoord(blobs[i].centroid.vx() + level * std::cos(phase),
                                             blobs[i].centroid.vy() + level * std::sin(2.3 * phase));
        }
        rms.push_back(fit_mapping(blobs, holes).residual_rms_mm);
    }
    EXPECT_LT(rms[0], 1e-6);
    EXPECT_LT(rms[0], rms[1]);
    EXPECT_LT(rms[1], rms[2]);
}

TEST(Mapping, DegenerateAndGatedFitsFail) {
    const auto truth = reference_model();
    std::vector<Vec2> line{{-5, -5}, {0, 0}, {5, 5}, {9, 9}};
    EXPECT_THROW(fit_mapping(blobs_for(truth, line), line), CalibrationError);

    const auto holes = hole_grid();
    auto blobs = blobs_for(truth, holes);
    EXPECT_THROW(fit_mapping({blobs[0], blobs[1]}, holes), CalibrationError);

    for (std::size_t i = 0; i < blobs.size(); ++i) {
        blobs[i].centroid = VoltageCoord(blobs[i].centroid.vx() + 0.01 * ((i % 3) - 1.0), blobs[i].centroid.vy());
    }
    MappingFitOptions tight;
    tight.residual_gate_mm = 1e-3;
    try {
        fit_mapping(blobs, holes, tight);
        FAIL();
    } catch (const CalibrationError& e) {
        EXPECT_NE(std::string(e.what()).find("gate"), std::string::npos);
    }
}

TEST(Invert, FixedPointAndRoundTrip) {
    const auto m = reference_model();
    const auto zero = invert_mapping(m, m.predict(0.0, 0.0));
    EXPECT_NEAR(zero.vx(), 0.0, 1e-9);
    EXPECT_NEAR(zero.vy(), 0.0, 1e-9);

    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 100; ++i) {
        const VoltageCoord v(u(rng), u(rng));
        const auto back = invert_mapping(m, forward(m, v.vx(), v.vy()));
        EXPECT_NEAR(back.vx(), v.vx(), 1e-6);
        EXPECT_NEAR(back.vy(), v.vy(), 1e-6);
    }
}

TEST(Invert, LinearCaseIsClosedForm) {
    auto m = reference_model();
    m.kappa_x = 0.0;
    m.kappa_y = 0.0;
    for (const Vec2& t : {Vec2(1.0, 2.0), Vec2(-7.5, 3.3), Vec2(10.0, -12.0)}) {
        // Cramer's rule on the 2x2 affine part.
        const double det = m.affine(0, 0) * m.affine(1, 1) - m.affine(0, 1) * m.affine(1, 0);
        const double dx = t.x() - m.offset.x();
        const double dy = t.y() - m.offset.y();
        const double vx = (m.affine(1, 1) * dx - m.affine(0, 1) * dy) / det;
        const double vy = (m.affine(0, 0) * dy - m.affine(1, 0) * dx) / det;
        const auto v = invert_mapping(m, t);
        EXPECT_NEAR(v.vx(), vx, 1e-12);
        EXPECT_NEAR(v.vy(), vy, 1e-12);
    }
}

TEST(Invert, OutOfRangeCarriesNearest) {
    const auto m = reference_model();
    const Vec2 target(40.0, 3.0);
    try {
        invert_mapping(m, target);
        FAIL();
    } catch (const OutOfRangeError& e) {
        ASSERT_LE(std::abs(e.nearest_vx()), 1.0);
        ASSERT_LE(std::abs(e.nearest_vy()), 1.0);
        const double got = (forward(m, e.nearest_vx(), e.nearest_vy()) - target).norm();
        // Dense sweep of the boundary of the reachable square.
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i <= 4000; ++i) {
            const double s = -1.0 + 2.0 * i / 4000.0;
            for (const auto& p : {forward(m, 1.0, s), forward(m, -1.0, s), forward(m, s, 1.0), forward(m, s, -1.0)}) {
                best = std::min(best, (p - target).norm());
            }
        }
        EXPECT_LT(got, best + 0.05);
    }
    EXPECT_THROW(invert_mapping(m, Vec2(std::nan(""), 0.0)), ValidationError);
}
