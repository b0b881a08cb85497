#include "cryoscan/steering.hpp"

#include "cryoscan/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace cryoscan::steering {
namespace {

constexpr double kSmallKappa = 1e-6;

void require_finite(double value, const char* what) {
    if (!std::isfinite(value)) {
        throw ValidationError(std::string(what) + " must be finite");
    }
}

}  // namespace

VoltageCoord::VoltageCoord(double vx, double vy) : vx_(vx), vy_(vy) {
    require_finite(vx, "vx");
    require_finite(vy, "vy");
    if (vx < -1.0 || vx > 1.0 || vy < -1.0 || vy > 1.0) {
        throw ValidationError("voltage coordinate [" + std::to_string(vx) + ", " + std::to_string(vy) +
                              "] outside [-1, 1]");
    }
}

VoltageCoord VoltageCoord::clamped(double vx, double vy) {
    if (std::isnan(vx) || std::isnan(vy)) {
        throw ValidationError("voltage coordinate is NaN");
    }
    return VoltageCoord(std::clamp(vx, -1.0, 1.0), std::clamp(vy, -1.0, 1.0));
}

double DriveVoltages::channel(std::size_t i) const {
    switch (i) {
        case 0: return x_plus;
        case 1: return x_minus;
        case 2: return y_plus;
        case 3: return y_minus;
        default: throw ValidationError("drive channel index out of range");
    }
}

void DriveVoltages::validate() const {
    static constexpr const char* names[] = {"x_plus", "x_minus", "y_plus", "y_minus"};
    for (std::size_t i = 0; i < kChannels; ++i) {
        const double v = channel(i);
        if (!std::isfinite(v) || v < 0.0 || v > kMaxChannelVolts) {
            throw ValidationError(std::string("drive channel ") + names[i] + " = " + std::to_string(v) +
                                  " V outside [0, 180] V");
        }
    }
}

bool DriveVoltages::is_differential(double common_mode_sum, double tol) const {
    return std::abs(x_plus + x_minus - common_mode_sum) <= tol &&
           std::abs(y_plus + y_minus - common_mode_sum) <= tol;
}

void ElectricalConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ValidationError(std::string(name) + " must be > 0");
        }
    };
    positive(driver_capacitance_limit_f, "driver_capacitance_limit");
    positive(mirror_capacitance_f, "mirror_capacitance");
    positive(cable_capacitance_f, "cable_capacitance");
    positive(max_slew_per_s, "max_slew");
    positive(common_mode_v, "common_mode");
    positive(theta_max_x_rad, "theta_max_x");
    positive(theta_max_y_rad, "theta_max_y");
    if (!(resting_power_w >= 0.0)) {
        throw ValidationError("resting_power must be >= 0");
    }
    if (common_mode_v > 2.0 * DriveVoltages::kMaxChannelVolts) {
        throw ValidationError("common_mode exceeds twice the channel limit");
    }
    if (!(kappa0_x >= 0.0) || !(kappa0_y >= 0.0)) {
        throw ValidationError("kappa0 must be >= 0");
    }
    if (theta_max_x_rad > std::numbers::pi / 4 || theta_max_y_rad > std::numbers::pi / 4) {
        throw ValidationError("theta_max must not exceed pi/4");
    }
    if (!(oscillation_length_mm >= 0.0)) {
        throw ValidationError("oscillation_length must be >= 0");
    }
    for (const auto& region : instability_regions) {
        if (!(region.radius >= 0.0)) {
            throw ValidationError("instability region radius must be >= 0");
        }
    }
}

double ElectricalConfig::excess_capacitance_ratio() const {
    const double budget = driver_capacitance_limit_f - mirror_capacitance_f;
    return std::max(0.0, (cable_capacitance_f - budget) / mirror_capacitance_f);
}

double saturation(double v, double kappa) {
    if (kappa == 0.0) {
        return v;
    }
    if (kappa < kSmallKappa) {
        return v + (kappa * kappa / 3.0) * (v - v * v * v);
    }
    return std::tanh(kappa * v) / std::tanh(kappa);
}

double saturation_slope(double v, double kappa) {
    if (kappa == 0.0) {
        return 1.0;
    }
    if (kappa < kSmallKappa) {
        return 1.0 + (kappa * kappa / 3.0) * (1.0 - 3.0 * v * v);
    }
    const double c = std::cosh(kappa * v);
    return kappa / (c * c * std::tanh(kappa));
}

double inverse_saturation(double g, double kappa) {
    if (kappa == 0.0) {
        return g;
    }
    g = std::clamp(g, -1.0, 1.0);
    double v = 0.0;
    if (kappa < kSmallKappa) {
        v = g - (kappa * kappa / 3.0) * (g - g * g * g);
    } else {
        const double arg = std::clamp(g * std::tanh(kappa), -1.0 + 1e-16, 1.0 - 1e-16);
        v = std::atanh(arg) / kappa;
    }
    // One Newton polish keeps the round trip at machine precision.
    const double slope = saturation_slope(v, kappa);
    if (slope > 0.0) {
        v -= (saturation(v, kappa) - g) / slope;
    }
    return std::clamp(v, -1.0, 1.0);
}

DriveVoltages normalized_to_drive(const VoltageCoord& v, const ElectricalConfig& cfg) {
    const double half = 0.5 * cfg.common_mode_v;
    DriveVoltages d;
    d.x_plus = half * (1.0 + v.vx());
    d.x_minus = half * (1.0 - v.vx());
    d.y_plus = half * (1.0 + v.vy());
    d.y_minus = half * (1.0 - v.vy());
    return d;
}

std::pair<double, double> drive_differential(const DriveVoltages& d, const ElectricalConfig& cfg) {
    const double vx = std::clamp((d.x_plus - d.x_minus) / cfg.common_mode_v, -1.0, 1.0);
    const double vy = std::clamp((d.y_plus - d.y_minus) / cfg.common_mode_v, -1.0, 1.0);
    return {vx, vy};
}

MirrorPose drive_to_tilt(const DriveVoltages& d, const ElectricalConfig& cfg) {
    const auto [vx, vy] = drive_differential(d, cfg);
    return MirrorPose{cfg.theta_max_x_rad * saturation(vx, cfg.kappa_x()),
                      cfg.theta_max_y_rad * saturation(vy, cfg.kappa_y())};
}

MirrorPose command_to_tilt(const VoltageCoord& v, const ElectricalConfig& cfg) {
    return drive_to_tilt(normalized_to_drive(v, cfg), cfg);
}

StabilityReport check_stability(const VoltageCoord& v, const ElectricalConfig& cfg) {
    for (std::size_t i = 0; i < cfg.instability_regions.size(); ++i) {
        const auto& region = cfg.instability_regions[i];
        const double dx = v.vx() - region.center.vx();
        const double dy = v.vy() - region.center.vy();
        if (std::hypot(dx, dy) <= region.radius) {
            return StabilityReport{false, Oscillation{i, cfg.oscillation_length_mm, region.orientation_rad}};
        }
    }
    return StabilityReport{};
}

double switching_energy(const DriveVoltages& from, const DriveVoltages& to, const ElectricalConfig& cfg) {
    double energy = 0.0;
    for (std::size_t i = 0; i < DriveVoltages::kChannels; ++i) {
        const double dv = to.channel(i) - from.channel(i);
        energy += 0.5 * cfg.mirror_capacitance_f * dv * dv;
    }
    return energy;
}

MirrorState MirrorState::at_rest(const ElectricalConfig& cfg) {
    MirrorState s;
    s.commanded = VoltageCoord{};
    s.drive = normalized_to_drive(s.commanded, cfg);
    s.pose = drive_to_tilt(s.drive, cfg);
    s.history.push_back(EnergyMark{0.0, 0.0});
    return s;
}

namespace {

void accrue(MirrorState& s, double switching, double dt, const ElectricalConfig& cfg) {
    if (switching > 0.0) {
        s.energy_dissipated += switching;
        s.history.push_back(EnergyMark{s.clock, s.energy_dissipated});
    }
    s.clock += dt;
    s.energy_dissipated += cfg.resting_power_w * dt;
    s.history.push_back(EnergyMark{s.clock, s.energy_dissipated});
}

void require_dt(double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw ValidationError("time step must be > 0");
    }
}

}  // namespace

void advance(MirrorState& state, const VoltageCoord& target, double dt, const ElectricalConfig& cfg,
             bool override_interlock) {
    require_dt(dt);
    if (!override_interlock && !check_stability(target, cfg).stable) {
        throw InterlockError("target [" + std::to_string(target.vx()) + ", " + std::to_string(target.vy()) +
                             "] lies in an instability region");
    }
    const double dx = target.vx() - state.commanded.vx();
    const double dy = target.vy() - state.commanded.vy();
    const double span = std::max(std::abs(dx), std::abs(dy));
    const double reach = cfg.max_slew_per_s * dt;

    const DriveVoltages previous = state.drive;
    if (span <= reach) {
        state.commanded = target;
        state.moving = false;
    } else {
        const double f = reach / span;
        state.commanded = VoltageCoord::clamped(state.commanded.vx() + f * dx, state.commanded.vy() + f * dy);
        state.moving = true;
    }
    state.drive = normalized_to_drive(state.commanded, cfg);
    state.pose = drive_to_tilt(state.drive, cfg);
    accrue(state, switching_energy(previous, state.drive, cfg), dt, cfg);
}

void advance_hold(MirrorState& state, double dt, const ElectricalConfig& cfg) {
    require_dt(dt);
    state.moving = false;
    accrue(state, 0.0, dt, cfg);
}

MirrorState step_mirror(const MirrorState& state, const VoltageCoord& target, double dt,
                        const ElectricalConfig& cfg, bool override_interlock) {
    MirrorState next = state;
    advance(next, target, dt, cfg, override_interlock);
    return next;
}

MirrorState apply_drive(const MirrorState& state, const DriveVoltages& next_drive, double dt,
                        const ElectricalConfig& cfg) {
    require_dt(dt);
    next_drive.validate();
    MirrorState next = state;
    next.drive = next_drive;
    next.pose = drive_to_tilt(next_drive, cfg);
    const auto [vx, vy] = drive_differential(next_drive, cfg);
    next.commanded = VoltageCoord(vx, vy);
    next.moving = false;
    accrue(next, switching_energy(state.drive, next_drive, cfg), dt, cfg);
    return next;
}

MirrorState hold(const MirrorState& state, double dt, const ElectricalConfig& cfg) {
    MirrorState next = state;
    advance_hold(next, dt, cfg);
    return next;
}

double slew_time(const VoltageCoord& from, const VoltageCoord& to, const ElectricalConfig& cfg) {
    const double span = std::max(std::abs(to.vx() - from.vx()), std::abs(to.vy() - from.vy()));
    return span / cfg.max_slew_per_s;
}

namespace {

// Cumulative energy just before any jump recorded at time t.
double energy_left(const std::vector<EnergyMark>& h, double t) {
    auto it = std::lower_bound(h.begin(), h.end(), t,
                               [](const EnergyMark& m, double value) { return m.clock < value; });
    if (it == h.end()) {
        return h.back().energy;
    }
    if (it->clock == t || it == h.begin()) {
        return it->energy;
    }
    const auto prev = std::prev(it);
    const double f = (t - prev->clock) / (it->clock - prev->clock);
    return prev->energy + f * (it->energy - prev->energy);
}

// Cumulative energy including every jump recorded at time t.
double energy_right(const std::vector<EnergyMark>& h, double t) {
    auto it = std::upper_bound(h.begin(), h.end(), t,
                               [](double value, const EnergyMark& m) { return value < m.clock; });
    if (it == h.begin()) {
        return h.front().energy;
    }
    const auto prev = std::prev(it);
    if (prev->clock == t || it == h.end()) {
        return prev->energy;
    }
    const double f = (t - prev->clock) / (it->clock - prev->clock);
    return prev->energy + f * (it->energy - prev->energy);
}

}  // namespace

double power_report(const MirrorState& state, double window) {
    if (!(window > 0.0)) {
        throw ValidationError("power window must be > 0");
    }
    if (state.history.empty()) {
        throw ValidationError("mirror state has no energy history");
    }
    const double start_clock = state.history.front().clock;
    const double elapsed = state.clock - start_clock;
    if (window > elapsed * (1.0 + 1e-12)) {
        throw ValidationError("power window exceeds elapsed session time");
    }
    const double t0 = std::max(start_clock, state.clock - window);
    const double e0 = energy_left(state.history, t0);
    const double e1 = energy_right(state.history, state.clock);
    return (e1 - e0) / window;
}

}  // namespace cryoscan::steering
