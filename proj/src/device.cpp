#include "cryoscan/device.hpp"

#include "cryoscan/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <fstream>
#include <sstream>

namespace cryoscan::device {

MaskPattern MaskPattern::open(const Vec2& center_mm, double radius_mm) {
    return MaskPattern{MaskKind::open, {Hole{center_mm, radius_mm}}};
}

MaskPattern MaskPattern::screen(std::vector<Hole> holes) {
    return MaskPattern{MaskKind::screen, std::move(holes)};
}

void MaskPattern::validate(double device_half_size_mm) const {
    if (kind == MaskKind::screen && holes.empty()) {
        throw ValidationError("screen mask needs at least one hole");
    }
    if (kind == MaskKind::open && holes.size() != 1) {
        throw ValidationError("open mask carries exactly one active region");
    }
    for (std::size_t i = 0; i < holes.size(); ++i) {
        const auto& h = holes[i];
        if (!(h.radius_mm > 0.0) || !h.center_mm.allFinite()) {
            throw ValidationError("mask hole " + std::to_string(i) + " needs a finite centre and radius > 0");
        }
        if (std::abs(h.center_mm.x()) + h.radius_mm > device_half_size_mm ||
            std::abs(h.center_mm.y()) + h.radius_mm > device_half_size_mm) {
            throw ValidationError("mask hole " + std::to_string(i) + " extends beyond the device active region");
        }
        for (std::size_t j = 0; j < i; ++j) {
            const auto& o = holes[j];
            if ((h.center_mm - o.center_mm).norm() < h.radius_mm + o.radius_mm) {
                throw ValidationError("mask holes " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
            }
        }
    }
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

}  // namespace

MaskPattern parse_mask(std::string_view text, const std::string& source) {
    MaskPattern mask;
    bool kind_seen = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        std::string_view raw = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        const std::size_t hash = raw.find('#');
        const std::string_view body = trim(raw.substr(0, hash));
        if (body.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const std::size_t col0 = static_cast<std::size_t>(body.data() - raw.data()) + 1;
        if (body.starts_with("kind")) {
            const std::string_view value = trim(body.substr(4));
            if (value == "open") {
                mask.kind = MaskKind::open;
            } else if (value == "screen") {
                mask.kind = MaskKind::screen;
            } else {
                throw ParseError(source, line_no, col0, "mask kind must be 'open' or 'screen'");
            }
            kind_seen = true;
        } else {
            double values[3];
            std::size_t cursor = 0;
            for (int k = 0; k < 3; ++k) {
                while (cursor < body.size() && (body[cursor] == ' ' || body[cursor] == '\t' || body[cursor] == ',')) {
                    ++cursor;
                }
                const char* first = body.data() + cursor;
                const auto [ptr, ec] = std::from_chars(first, body.data() + body.size(), values[k]);
                if (ec != std::errc()) {
                    throw ParseError(source, line_no, col0 + cursor, "expected a number (x_mm y_mm radius_mm)");
                }
                cursor = static_cast<std::size_t>(ptr - body.data());
            }
            if (!trim(body.substr(cursor)).empty()) {
                throw ParseError(source, line_no, col0 + cursor, "unexpected trailing text");
            }
            mask.holes.push_back(Hole{Vec2(values[0], values[1]), values[2]});
        }
        if (end == text.size()) break;
    }
    if (!kind_seen) {
        throw ParseError(source, 1, 1, "mask file must declare 'kind open' or 'kind screen'");
    }
    return mask;
}

MaskPattern load_mask(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open mask file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_mask(buffer.str(), path.string());
}

std::string format_mask(const MaskPattern& mask) {
    std::ostringstream out;
    out.precision(17);
    out << "kind " << (mask.kind == MaskKind::open ? "open" : "screen") << "\n";
    out << "# x_mm y_mm radius_mm\n";
    for (const auto& h : mask.holes) {
        out << h.center_mm.x() << " " << h.center_mm.y() << " " << h.radius_mm << "\n";
    }
    return out.str();
}

PowerSplit masked_power(const optics::BeamSpot& spot, const MaskPattern& mask) {
    double through = 0.0;
    for (const auto& h : mask.holes) {
        through += optics::aperture_power(spot, h.center_mm, h.radius_mm);
    }
    through = std::min(through, spot.total_power_w);
    return PowerSplit{through, spot.total_power_w - through};
}

void MkidParams::validate() const {
    if (!(qi > 0.0) || !(qc > 0.0)) {
        throw ValidationError("mkid quality factors must be > 0");
    }
    if (!(f0_hz > 0.0) || !(readout_freq_hz > 0.0)) {
        throw ValidationError("mkid frequencies must be > 0");
    }
    if (!(freq_responsivity_hz_per_w < 0.0)) {
        throw ValidationError("mkid.freq_responsivity_hz_per_w must be < 0");
    }
    if (!(q_responsivity_per_w >= 0.0)) {
        throw ValidationError("mkid.q_responsivity_per_w must be >= 0");
    }
    if (!(relax_tau_s > 0.0)) {
        throw ValidationError("mkid.relax_tau_s must be > 0");
    }
    if (std::abs(readout_freq_hz - f0_hz) > kValidityLinewidths * linewidth_hz()) {
        throw ValidationError("mkid.readout_freq_hz outside the model validity window");
    }
}

double s21_magnitude(double f_hz, const MkidParams& p, double absorbed_w) {
    if (!(absorbed_w >= 0.0)) {
        throw ValidationError("absorbed power must be >= 0");
    }
    if (!(std::abs(f_hz - p.f0_hz) <= kValidityLinewidths * p.linewidth_hz())) {
        throw ValidationError("frequency outside the resonator model validity window");
    }
    const double f0 = p.f0_hz + p.freq_responsivity_hz_per_w * absorbed_w;
    if (!(f0 > 0.0)) {
        throw ValidationError("absorbed power drives the resonance below zero frequency");
    }
    const double inv_qi = 1.0 / p.qi + p.q_responsivity_per_w * absorbed_w;
    const double ql = 1.0 / (inv_qi + 1.0 / p.qc);
    const double x = (f_hz - f0) / f0;
    const std::complex<double> s21 = 1.0 - (ql / p.qc) / std::complex<double>(1.0, 2.0 * ql * x);
    return std::abs(s21);
}

double delta_s21(const MkidParams& p, double absorbed_w) {
    return s21_magnitude(p.readout_freq_hz, p, absorbed_w) - s21_magnitude(p.readout_freq_hz, p, 0.0);
}

DeviceState thermal_relax(const DeviceState& state, double dt, const MkidParams& p) {
    if (!(dt >= 0.0)) {
        throw ValidationError("relax interval must be >= 0");
    }
    DeviceState next = state;
    next.absorbed_power_w = state.absorbed_power_w * std::exp(-dt / p.relax_tau_s);
    next.time_s = state.time_s + dt;
    return next;
}

DeviceState thermal_load(const DeviceState& state, double load_w, double dt, const MkidParams& p) {
    if (!(dt >= 0.0) || !(load_w >= 0.0)) {
        throw ValidationError("load interval and power must be >= 0");
    }
    DeviceState next = state;
    next.absorbed_power_w = state.absorbed_power_w + load_w * (-std::expm1(-dt / p.relax_tau_s));
    next.time_s = state.time_s + dt;
    return next;
}

double BackgroundModel::coupling(const steering::VoltageCoord& v) const {
    double sum = 0.0;
    double px = 1.0;
    for (const auto& row : coupling_poly) {
        double py = 1.0;
        for (double c : row) {
            sum += c * px * py;
            py *= v.vy();
        }
        px *= v.vx();
    }
    return std::clamp(sum, 0.0, 1.0);
}

void BackgroundModel::validate() const {
    if (!(scale >= 0.0)) {
        throw ValidationError("background.scale must be >= 0");
    }
    for (const auto& row : coupling_poly) {
        for (double c : row) {
            if (!std::isfinite(c)) {
                throw ValidationError("background.coupling_poly coefficients must be finite");
            }
        }
    }
}

double background_power(double blocked_w, const steering::VoltageCoord& v, const BackgroundModel& bg) {
    if (!(blocked_w >= 0.0)) {
        throw ValidationError("blocked power must be >= 0");
    }
    return bg.scale * bg.coupling(v) * blocked_w;
}

}  // namespace cryoscan::device
