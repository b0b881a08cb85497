#include "cryoscan/device.hpp"
#include "cryoscan/errors.hpp"
#include "oracles/oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cryoscan;
using namespace cryoscan::device;

namespace {

std::vector<MaskPattern> test_masks() {
    return {
        MaskPattern::open(Vec2(0.0, 0.0), 12.0),
        MaskPattern::open(Vec2(14.0, 14.0), 2.0),
        MaskPattern::screen({{Vec2(0.0, 0.0), 0.1}}),
        MaskPattern::screen({{Vec2(-0.15, 0.0), 0.1}, {Vec2(0.1, 0.05), 0.08}, {Vec2(0.0, -0.2), 0.05}}),
        MaskPattern::screen({{Vec2(-5, -5), 0.75}, {Vec2(2, -5), 0.75}, {Vec2(9, -5), 0.75},
                             {Vec2(-5, 2), 0.75},  {Vec2(2, 2), 0.75},  {Vec2(9, 2), 0.75},
                             {Vec2(-5, 9), 0.75},  {Vec2(2, 9), 0.75},  {Vec2(9, 9), 0.75}}),
    };
}

oracle::Spot to_oracle(const optics::BeamSpot& s) {
    return {s.center_mm.x(), s.center_mm.y(), s.sigma_major_um, s.sigma_minor_um, s.orientation_rad,
            s.total_power_w};
}

std::vector<oracle::Circle> to_oracle(const MaskPattern& m) {
    std::vector<oracle::Circle> out;
    for (const auto& h : m.holes) out.push_back({h.center_mm.x(), h.center_mm.y(), h.radius_mm});
    return out;
}

}  // namespace

TEST(Mask, ParseFormatRoundTrip) {
    const char* text =
        "# plate\n"
        "kind screen\n"
        "-5 -5 0.75   # corner\n"
        "\n"
        "2.5 1e-1 0.5\n";
    const auto m = parse_mask(text);
    EXPECT_EQ(m.kind, MaskKind::screen);
    ASSERT_EQ(m.holes.size(), 2u);
    EXPECT_DOUBLE_EQ(m.holes[1].center_mm.y(), 0.1);
    const auto again = parse_mask(format_mask(m));
    ASSERT_EQ(again.holes.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(again.holes[i].center_mm, m.holes[i].center_mm);
        EXPECT_EQ(again.holes[i].radius_mm, m.holes[i].radius_mm);
    }
}

TEST(Mask, ParseErrorsCarryLocation) {
    try {
        parse_mask("kind screen\n1 2\n", "plate.txt");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.source(), "plate.txt");
        EXPECT_EQ(e.line(), 2u);
    }
    EXPECT_THROW(parse_mask("kind round\n"), ParseError);
    EXPECT_THROW(parse_mask("1 2 3\n"), ParseError);
    EXPECT_THROW(parse_mask("kind screen\n1 2 abc\n"), ParseError);
    EXPECT_THROW(parse_mask("kind open\n0 0 1\n1 1 1\n").validate(25.0), ValidationError);
}

TEST(Mask, ValidateGeometry) {
    EXPECT_THROW(MaskPattern::screen({{Vec2(0, 0), 1.0}, {Vec2(1.5, 0), 1.0}}).validate(25.0), ValidationError);
    EXPECT_THROW(MaskPattern::screen({{Vec2(24.5, 0), 1.0}}).validate(25.0), ValidationError);
    EXPECT_THROW(MaskPattern::screen({{Vec2(0, 0), -1.0}}).validate(25.0), ValidationError);
    EXPECT_NO_THROW(MaskPattern::screen({{Vec2(0, 0), 1.0}, {Vec2(2.5, 0), 1.0}}).validate(25.0));
}

TEST(MaskedPower, ThroughPlusBlockedIsTotal) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (const auto& mask : test_masks()) {
        for (int i = 0; i < 50; ++i) {
            optics::BeamSpot s;
            s.center_mm = Vec2(mask.holes[0].center_mm.x() + 0.3 * u(rng), mask.holes[0].center_mm.y() + 0.3 * u(rng));
            s.sigma_major_um = 60.0;
            s.sigma_minor_um = 30.0 + 20.0 * std::abs(u(rng));
            s.orientation_rad = u(rng);
            s.total_power_w = 1e-9 * (1.0 + std::abs(u(rng)));
            const auto split = masked_power(s, mask);
            EXPECT_GE(split.through_w, 0.0);
            EXPECT_GE(split.blocked_w, 0.0);
            EXPECT_NEAR(split.through_w + split.blocked_w, s.total_power_w, 1e-6 * s.total_power_w);
        }
    }
}

TEST(MaskedPower, MatchesMonteCarloOracle) {
    const auto masks = test_masks();
    const auto& cluster = masks[3];
    const std::vector<Vec2> centres{{0.0, 0.0}, {-0.1, 0.0}, {0.05, 0.02}, {0.0, -0.15}, {0.2, 0.2}};
    for (std::size_t i = 0; i < centres.size(); ++i) {
        optics::BeamSpot s;
        s.center_mm = centres[i];
        s.sigma_major_um = 70.0;
        s.sigma_minor_um = 40.0;
        s.orientation_rad = 0.4;
        s.total_power_w = 1.0;
        const double lib = masked_power(s, cluster).through_w;
        const double mc = oracle::monte_carlo_power(to_oracle(s), to_oracle(cluster), 400000, 100 + i);
        EXPECT_NEAR(lib, mc, 3e-3) << "centre " << i;
    }
}

TEST(Mkid, MatchesNotchFormula) {
    const MkidParams p;
    for (double df : {-5e3, -1e3, 0.0, 2e3, 4e4}) {
        EXPECT_NEAR(s21_magnitude(p.f0_hz + df, p, 0.0), oracle::notch_s21(p.f0_hz + df, p.f0_hz, p.qi, p.qc), 1e-12);
    }
    const double dip = s21_magnitude(p.f0_hz, p, 0.0);
    EXPECT_NEAR(dip, 1.0 - p.loaded_q() / p.qc, 1e-12);
    EXPECT_NEAR(p.loaded_q(), 1.2e5, 1e-6);
}

TEST(Mkid, LightRaisesTransmissionAtReadout) {
    const MkidParams p;
    double prev = 0.0;
    for (double w : {1e-12, 1e-11, 1e-10, 1e-9}) {
        const double d = delta_s21(p, w);
        EXPECT_GT(d, prev);
        prev = d;
    }
    EXPECT_EQ(delta_s21(p, 0.0), 0.0);
    EXPECT_THROW(s21_magnitude(p.f0_hz, p, -1.0), ValidationError);
}

TEST(Mkid, ValidityWindow) {
    const MkidParams p;
    const double lw = p.linewidth_hz();
    EXPECT_NO_THROW(s21_magnitude(p.f0_hz + 9.9 * lw, p, 0.0));
    EXPECT_THROW(s21_magnitude(p.f0_hz + 10.1 * lw, p, 0.0), ValidationError);
}

TEST(Thermal, ExponentialRelaxAndLoad) {
    const MkidParams p;
    const DeviceState s{2e-9, 0.0, 0.0};
    EXPECT_NEAR(thermal_relax(s, 4.0, p).absorbed_power_w, 2e-9 * std::exp(-1.0), 1e-24);
    EXPECT_NEAR(thermal_relax(s, 0.0, p).absorbed_power_w, 2e-9, 0.0);
    const DeviceState dark{0.0, 0.0, 0.0};
    EXPECT_NEAR(thermal_load(dark, 1e-9, 4.0, p).absorbed_power_w, 1e-9 * (1.0 - std::exp(-1.0)), 1e-24);
    EXPECT_NEAR(thermal_load(dark, 1e-9, 1e6, p).absorbed_power_w, 1e-9, 1e-21);
    EXPECT_THROW(thermal_relax(s, -1.0, p), ValidationError);
}

TEST(Background, PolynomialCouplingClamped) {
    BackgroundModel bg;
    bg.scale = 0.5;
    bg.coupling_poly = {{0.0, 0.0}, {0.0, 1.0}};
    EXPECT_NEAR(bg.coupling(steering::VoltageCoord(0.5, 0.4)), 0.2, 1e-15);
    EXPECT_EQ(bg.coupling(steering::VoltageCoord(-0.5, 0.4)), 0.0);
    EXPECT_NEAR(background_power(2.0, steering::VoltageCoord(0.5, 0.4), bg), 0.2, 1e-15);
    bg.coupling_poly = {{3.0}};
    EXPECT_EQ(bg.coupling(steering::VoltageCoord(0.0, 0.0)), 1.0);
}
