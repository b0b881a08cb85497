#pragma once

// Electrical drive chain of the two-axis MEMS mirror: normalized voltage
// coordinates, four-channel differential drive, capacitance-dependent
// voltage-to-tilt transfer, instability interlocks, slew and power accounting.

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

namespace cryoscan::steering {

// Normalized mirror command in [-1,1]^2. [0,0] is the rest position.
class VoltageCoord {
public:
    constexpr VoltageCoord() = default;
    // Throws ValidationError if either component is non-finite or outside [-1,1].
    VoltageCoord(double vx, double vy);

    // Clamps each component into [-1,1]; NaN is rejected.
    static VoltageCoord clamped(double vx, double vy);

    constexpr double vx() const noexcept { return vx_; }
    constexpr double vy() const noexcept { return vy_; }

    friend constexpr bool operator==(const VoltageCoord&, const VoltageCoord&) = default;

private:
    double vx_ = 0.0;
    double vy_ = 0.0;
};

// Channel voltages in volts. The driver box can put anything in [0,180] V on a
// line; differential drive keeps plus + minus equal to the common-mode sum.
struct DriveVoltages {
    double x_plus = 0.0;
    double x_minus = 0.0;
    double y_plus = 0.0;
    double y_minus = 0.0;

    static constexpr double kMaxChannelVolts = 180.0;
    static constexpr std::size_t kChannels = 4;

    double channel(std::size_t i) const;
    void validate() const;
    bool is_differential(double common_mode_sum, double tol = 1e-9) const;

    friend bool operator==(const DriveVoltages&, const DriveVoltages&) = default;
};

struct InstabilityRegion {
    VoltageCoord center;
    double radius = 0.0;           // normalized units, closed disc
    double orientation_rad = 0.0;  // direction of the oscillation path on the device plane
};

struct ElectricalConfig {
    double driver_capacitance_limit_f = 50e-12;
    double mirror_capacitance_f = 20e-12;
    double cable_capacitance_f = 30e-12;
    double resting_power_w = 0.99e-6;
    double max_slew_per_s = 10.0;     // normalized units per second, per axis
    double common_mode_v = 180.0;
    double kappa0_x = 1.0;            // saturation gain per unit excess capacitance ratio
    double kappa0_y = 1.0;
    double theta_max_x_rad = 0.05;    // mechanical tilt at full command
    double theta_max_y_rad = 0.05;
    double oscillation_length_mm = 0.5;
    std::vector<InstabilityRegion> instability_regions;

    void validate() const;

    // max(0, (C_cable - (C_limit - C_mirror)) / C_mirror); 0 means within budget.
    double excess_capacitance_ratio() const;
    double kappa_x() const { return kappa0_x * excess_capacitance_ratio(); }
    double kappa_y() const { return kappa0_y * excess_capacitance_ratio(); }
};

struct MirrorPose {
    double tilt_x = 0.0;  // radians about the mirror X axis
    double tilt_y = 0.0;  // radians about the (rotated) mirror Y axis

    friend bool operator==(const MirrorPose&, const MirrorPose&) = default;
};

struct EnergyMark {
    double clock = 0.0;
    double energy = 0.0;
};

struct MirrorState {
    VoltageCoord commanded;
    MirrorPose pose;
    DriveVoltages drive;
    bool moving = false;
    double energy_dissipated = 0.0;  // joules, never decreases
    double clock = 0.0;              // seconds of simulated time
    // Cumulative energy checkpoints; switching energy appears as two marks with
    // the same clock.
    std::vector<EnergyMark> history;

    static MirrorState at_rest(const ElectricalConfig& cfg);
};

struct Oscillation {
    std::size_t region = 0;
    double path_length_mm = 0.0;
    double orientation_rad = 0.0;
};

struct StabilityReport {
    bool stable = true;
    std::optional<Oscillation> oscillation;
};

// Normalized saturation law g(v; kappa) = tanh(kappa v) / tanh(kappa); identity at kappa = 0.
double saturation(double v, double kappa);
double saturation_slope(double v, double kappa);
// Inverse of saturation on [-1,1].
double inverse_saturation(double g, double kappa);

DriveVoltages normalized_to_drive(const VoltageCoord& v, const ElectricalConfig& cfg);
// Normalized differential per axis, (plus - minus) / common_mode.
std::pair<double, double> drive_differential(const DriveVoltages& d, const ElectricalConfig& cfg);
MirrorPose drive_to_tilt(const DriveVoltages& d, const ElectricalConfig& cfg);
MirrorPose command_to_tilt(const VoltageCoord& v, const ElectricalConfig& cfg);

StabilityReport check_stability(const VoltageCoord& v, const ElectricalConfig& cfg);

// Sum over channels of 1/2 C dV^2 with C the mirror capacitance.
double switching_energy(const DriveVoltages& from, const DriveVoltages& to, const ElectricalConfig& cfg);

// Moves the command toward target along a straight line, limited so neither
// axis exceeds max_slew * dt. Throws InterlockError if the target lies in an
// instability region and override_interlock is false.
MirrorState step_mirror(const MirrorState& state, const VoltageCoord& target, double dt,
                        const ElectricalConfig& cfg, bool override_interlock = false);

// Raw channel-level transition: switch to `next` at the current clock, then hold
// for dt. Used for single-line exercises that break the differential scheme.
MirrorState apply_drive(const MirrorState& state, const DriveVoltages& next, double dt,
                        const ElectricalConfig& cfg);

// Hold position for dt; accrues resting power only.
MirrorState hold(const MirrorState& state, double dt, const ElectricalConfig& cfg);

// In-place forms of step_mirror and hold for long sessions; on error the
// state is left untouched.
void advance(MirrorState& state, const VoltageCoord& target, double dt, const ElectricalConfig& cfg,
             bool override_interlock = false);
void advance_hold(MirrorState& state, double dt, const ElectricalConfig& cfg);

// Time needed to slew from `from` to `to` at max_slew.
double slew_time(const VoltageCoord& from, const VoltageCoord& to, const ElectricalConfig& cfg);

// Average dissipated power over the trailing window [clock - window, clock].
double power_report(const MirrorState& state, double window);

}  // namespace cryoscan::steering
