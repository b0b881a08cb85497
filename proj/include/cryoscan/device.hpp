#pragma once

// Device under test: screen/open masks over the chip, the MKID notch
// resonator's S21 response to absorbed optical power, stray-light background
// and thermal relaxation between measurements.

#include "cryoscan/optics.hpp"
#include "cryoscan/steering.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cryoscan::device {

using optics::Vec2;

struct Hole {
    Vec2 center_mm = Vec2::Zero();
    double radius_mm = 0.0;
};

enum class MaskKind { open, screen };

// A screen mask passes light only through its holes. An open mask exposes a
// single circular active region (stored as the one entry of `holes`).
struct MaskPattern {
    MaskKind kind = MaskKind::open;
    std::vector<Hole> holes;

    static MaskPattern open(const Vec2& center_mm, double radius_mm);
    static MaskPattern screen(std::vector<Hole> holes);

    void validate(double device_half_size_mm) const;
};

// Plain-text geometry: `kind open|screen`, then one `x_mm y_mm radius_mm` row
// per hole. `#` starts a comment.
MaskPattern parse_mask(std::string_view text, const std::string& source = "<mask>");
MaskPattern load_mask(const std::filesystem::path& path);
std::string format_mask(const MaskPattern& mask);

struct PowerSplit {
    double through_w = 0.0;
    double blocked_w = 0.0;
};

PowerSplit masked_power(const optics::BeamSpot& spot, const MaskPattern& mask);

struct MkidParams {
    double f0_hz = 1.0e9;
    double qi = 3.0e5;
    double qc = 2.0e5;
    double readout_freq_hz = 1.0e9;
    double freq_responsivity_hz_per_w = -1.0e13;
    double q_responsivity_per_w = 1.5e3;
    double relax_tau_s = 4.0;

    double loaded_q() const { return 1.0 / (1.0 / qi + 1.0 / qc); }
    double linewidth_hz() const { return f0_hz / loaded_q(); }
    void validate() const;
};

// Half-width of the model validity window around f0, in linewidths.
inline constexpr double kValidityLinewidths = 10.0;

double s21_magnitude(double f_hz, const MkidParams& p, double absorbed_w);
// Change at the readout tone relative to the dark resonator.
double delta_s21(const MkidParams& p, double absorbed_w);

struct DeviceState {
    double absorbed_power_w = 0.0;
    double time_s = 0.0;
    double baseline_s21 = 0.0;
};

// Absorbed power decays with relax_tau while the source is dark.
DeviceState thermal_relax(const DeviceState& state, double dt, const MkidParams& p);
// Illumination ramps the absorbed power up by `load_w` with the same time
// constant; residual load from earlier points is held for the dwell.
DeviceState thermal_load(const DeviceState& state, double load_w, double dt, const MkidParams& p);

struct BackgroundModel {
    // coupling(v) = clamp(sum_ij c[i][j] vx^i vy^j, 0, 1)
    std::vector<std::vector<double>> coupling_poly{{1.0}};
    double scale = 0.0;

    double coupling(const steering::VoltageCoord& v) const;
    void validate() const;
};

double background_power(double blocked_w, const steering::VoltageCoord& v, const BackgroundModel& bg);

}  // namespace cryoscan::device
