#pragma once

// Scan plans, the simulated instrument they run against, response maps and
// their CSV persistence, and run-to-run repeatability metrics.

#include "cryoscan/device.hpp"
#include "cryoscan/optics.hpp"
#include "cryoscan/steering.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace cryoscan::scan {

using steering::VoltageCoord;

struct Timing {
    double dwell_on_s = 1.0;
    double dwell_off_s = 0.0;
    double relax_wait_s = 20.0;
    double settle_s = 0.1;

    void validate() const;
    friend bool operator==(const Timing&, const Timing&) = default;
};

struct SourceSettings {
    double wavelength_nm = 650.0;
    double power_w = 1.0e-6;

    void validate() const;
    friend bool operator==(const SourceSettings&, const SourceSettings&) = default;
};

enum class PlanKind { grid, line };

struct ScanPlan {
    PlanKind kind = PlanKind::grid;
    std::array<double, 2> vx_range{0.0, 0.0};
    std::array<double, 2> vy_range{0.0, 0.0};
    std::size_t nx = 0;
    std::size_t ny = 0;
    VoltageCoord start;
    VoltageCoord end;
    std::size_t n_points = 0;
    Timing timing;
    SourceSettings source;
    bool override_interlock = false;

    void validate() const;
    std::size_t point_count() const;
    // Grid: row-major with ix fastest. Line: ix = k, iy = 0.
    std::pair<std::size_t, std::size_t> index(std::size_t k) const;
    VoltageCoord point(std::size_t k) const;
    // Largest per-axis increment between consecutive points.
    double step() const;

    friend bool operator==(const ScanPlan&, const ScanPlan&) = default;
};

ScanPlan plan_grid(std::array<double, 2> vx_range, std::array<double, 2> vy_range, std::size_t nx, std::size_t ny,
                   const Timing& timing = {}, const SourceSettings& source = {});
ScanPlan plan_line(const VoltageCoord& start, const VoltageCoord& end, std::size_t n, const Timing& timing = {},
                   const SourceSettings& source = {});

enum SampleFlag : unsigned {
    kUnstable = 1u << 0,
    kMissedPlane = 1u << 1,
    kOverridden = 1u << 2,
};

std::string format_flags(unsigned flags);
unsigned parse_flags(std::string_view text);

struct ResponseSample {
    std::size_t ix = 0;
    std::size_t iy = 0;
    VoltageCoord v;
    double s21_off = 0.0;
    double s21_on = 0.0;
    double delta = 0.0;
    double t = 0.0;
    unsigned flags = 0;

    friend bool operator==(const ResponseSample&, const ResponseSample&) = default;
};

struct MapMetadata {
    std::string config_hash;
    std::string session_id = "local";
    std::uint64_t seed = 0;
    double created_s = 0.0;  // simulated clock at scan start
    bool complete = false;

    friend bool operator==(const MapMetadata&, const MapMetadata&) = default;
};

struct ResponseMap {
    ScanPlan plan;
    std::vector<ResponseSample> samples;
    MapMetadata meta;

    // Complete maps hold every plan point; partial maps hold a prefix.
    void validate() const;
    // ny x nx matrix of deltas (grid plans only); missing points are NaN.
    Eigen::MatrixXd delta_grid() const;

    friend bool operator==(const ResponseMap&, const ResponseMap&) = default;
};

std::string format_map(const ResponseMap& map);
ResponseMap parse_map(std::string_view text, const std::string& source = "<map>");
void save_map(const ResponseMap& map, const std::filesystem::path& path);
ResponseMap load_map(const std::filesystem::path& path);

std::string plan_to_json(const ScanPlan& plan);
ScanPlan plan_from_json(std::string_view text);

struct NoiseModel {
    double multiplicative = 0.0;  // relative sigma applied to each delta
    double additive = 0.0;        // absolute sigma on each s21 reading

    void validate() const;
};

struct InstrumentConfig {
    steering::ElectricalConfig electrical;
    optics::OpticalLayout layout = optics::OpticalLayout::folded();
    optics::SpotModelConfig spot;
    device::MkidParams mkid;
    device::MaskPattern mask = device::MaskPattern::open(optics::Vec2::Zero(), 12.0);
    device::BackgroundModel background;
    NoiseModel noise;

    void validate() const;
};

struct Illumination {
    double through_w = 0.0;
    double blocked_w = 0.0;
    double absorbed_w = 0.0;
    bool missed_plane = false;
    bool oscillating = false;
    std::optional<optics::Vec2> landing_mm;
};

// Digital twin of the bench: mirror, source and detector on one simulated clock.
class Instrument {
public:
    Instrument(InstrumentConfig cfg, std::uint64_t seed);

    const InstrumentConfig& config() const { return cfg_; }
    const steering::MirrorState& mirror() const { return mirror_; }
    double clock() const { return mirror_.clock; }
    bool source_on() const { return source_on_; }
    const SourceSettings& source() const { return source_; }
    double absorbed_power() const;

    // Straight-line slew at max_slew; returns the time spent.
    double slew_to(const VoltageCoord& target, bool override_interlock = false);
    void wait(double dt);
    void set_source(bool on, const SourceSettings& settings);
    double read_s21();
    // Per-sample relative gain error drawn from the noise model.
    double draw_gain();

    Illumination illumination(const VoltageCoord& v, const SourceSettings& settings) const;
    std::optional<optics::Vec2> landing(const VoltageCoord& v) const;

private:
    void rebase_load();

    InstrumentConfig cfg_;
    steering::MirrorState mirror_;
    bool source_on_ = false;
    SourceSettings source_;
    double base_power_w_ = 0.0;  // absorbed power at the last change of illumination
    double load_w_ = 0.0;        // asymptotic extra load while the source is on
    double since_change_s_ = 0.0;
    std::mt19937_64 rng_;
};

struct ScanHooks {
    std::function<void(const ResponseSample&, std::size_t done, std::size_t total)> on_sample;
    std::function<bool()> cancelled;
};

ResponseMap execute(const ScanPlan& plan, Instrument& instrument, MapMetadata meta, const ScanHooks& hooks = {});

struct RepeatabilityMetrics {
    double step_offset = 0.0;  // voltage units along the plan direction
    double rms_delta_diff = 0.0;
    double peak_corr = 0.0;
    VoltageCoord step_a;
    VoltageCoord step_b;
};

// Step location: midpoint of the adjacent sample pair with the largest
// absolute delta difference, in plan order.
VoltageCoord step_location(const ResponseMap& map, double* index_position = nullptr);
RepeatabilityMetrics repeatability(const ResponseMap& a, const ResponseMap& b);

}  // namespace cryoscan::scan
