#include "cryoscan/scan.hpp"

#include "cryoscan/errors.hpp"
#include "cryoscan/json_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace cryoscan::scan {

namespace {

double lerp_exact(double lo, double hi, std::size_t i, std::size_t n) {
    const double m = static_cast<double>(n - 1);
    return (lo * static_cast<double>(n - 1 - i) + hi * static_cast<double>(i)) / m;
}

void require_range(const std::array<double, 2>& r, std::size_t n, const char* name) {
    for (double x : r) {
        if (!std::isfinite(x) || x < -1.0 || x > 1.0) {
            throw ValidationError(std::string(name) + " must lie within [-1, 1]");
        }
    }
    if (n < 2) {
        throw ValidationError(std::string(name) + " needs at least 2 points");
    }
    if (r[0] == r[1]) {
        throw ValidationError(std::string(name) + " is degenerate (lo = hi)");
    }
}

void require_time(double t, const char* name) {
    if (!std::isfinite(t) || t < 0.0) {
        throw ValidationError(std::string("timing.") + name + " must be finite and >= 0");
    }
}

}  // namespace

void Timing::validate() const {
    require_time(dwell_on_s, "dwell_on_s");
    require_time(dwell_off_s, "dwell_off_s");
    require_time(relax_wait_s, "relax_wait_s");
    require_time(settle_s, "settle_s");
}

void SourceSettings::validate() const {
    optics::require_in_band(wavelength_nm);
    if (!std::isfinite(power_w) || power_w < 0.0) {
        throw ValidationError("source power must be finite and >= 0");
    }
}

void ScanPlan::validate() const {
    if (kind == PlanKind::grid) {
        require_range(vx_range, nx, "vx_range");
        require_range(vy_range, ny, "vy_range");
    } else {
        if (n_points < 2) {
            throw ValidationError("line plan needs at least 2 points");
        }
        if (start == end) {
            throw ValidationError("line plan start equals end");
        }
    }
    timing.validate();
    source.validate();
}

std::size_t ScanPlan::point_count() const { return kind == PlanKind::grid ? nx * ny : n_points; }

std::pair<std::size_t, std::size_t> ScanPlan::index(std::size_t k) const {
    if (kind == PlanKind::grid) {
        return {k % nx, k / nx};
    }
    return {k, 0};
}

VoltageCoord ScanPlan::point(std::size_t k) const {
    if (k >= point_count()) {
        throw ValidationError("plan point index out of range");
    }
    if (kind == PlanKind::grid) {
        const auto [ix, iy] = index(k);
        return VoltageCoord::clamped(lerp_exact(vx_range[0], vx_range[1], ix, nx),
                                     lerp_exact(vy_range[0], vy_range[1], iy, ny));
    }
    return VoltageCoord::clamped(lerp_exact(start.vx(), end.vx(), k, n_points),
                                 lerp_exact(start.vy(), end.vy(), k, n_points));
}

double ScanPlan::step() const {
    if (kind == PlanKind::grid) {
        return std::max(std::abs(vx_range[1] - vx_range[0]) / static_cast<double>(nx - 1),
                        std::abs(vy_range[1] - vy_range[0]) / static_cast<double>(ny - 1));
    }
    return std::max(std::abs(end.vx() - start.vx()), std::abs(end.vy() - start.vy())) /
           static_cast<double>(n_points - 1);
}

ScanPlan plan_grid(std::array<double, 2> vx_range, std::array<double, 2> vy_range, std::size_t nx, std::size_t ny,
                   const Timing& timing, const SourceSettings& source) {
    ScanPlan plan;
    plan.kind = PlanKind::grid;
    plan.vx_range = vx_range;
    plan.vy_range = vy_range;
    plan.nx = nx;
    plan.ny = ny;
    plan.timing = timing;
    plan.source = source;
    plan.validate();
    return plan;
}

ScanPlan plan_line(const VoltageCoord& start, const VoltageCoord& end, std::size_t n, const Timing& timing,
                   const SourceSettings& source) {
    ScanPlan plan;
    plan.kind = PlanKind::line;
    plan.start = start;
    plan.end = end;
    plan.n_points = n;
    plan.timing = timing;
    plan.source = source;
    plan.validate();
    return plan;
}

namespace {

constexpr std::pair<unsigned, std::string_view> kFlagNames[] = {
    {kUnstable, "unstable"},
    {kMissedPlane, "missed_plane"},
    {kOverridden, "overridden"},
};

}  // namespace

std::string format_flags(unsigned flags) {
    std::string out;
    for (const auto& [bit, name] : kFlagNames) {
        if (flags & bit) {
            if (!out.empty()) out += ';';
            out += name;
        }
    }
    return out;
}

unsigned parse_flags(std::string_view text) {
    unsigned flags = 0;
    while (!text.empty()) {
        const std::size_t semi = text.find(';');
        const std::string_view token = text.substr(0, semi);
        bool known = false;
        for (const auto& [bit, name] : kFlagNames) {
            if (token == name) {
                flags |= bit;
                known = true;
            }
        }
        if (!known) {
            throw ValidationError("unknown sample flag '" + std::string(token) + "'");
        }
        if (semi == std::string_view::npos) break;
        text.remove_prefix(semi + 1);
    }
    return flags;
}

void ResponseMap::validate() const {
    plan.validate();
    const std::size_t total = plan.point_count();
    if (samples.size() > total) {
        throw ValidationError("map holds more samples than the plan has points");
    }
    if (meta.complete && samples.size() != total) {
        throw ValidationError("complete map must hold " + std::to_string(total) + " samples, found " +
                              std::to_string(samples.size()));
    }
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto& s = samples[k];
        const auto [ix, iy] = plan.index(k);
        if (s.ix != ix || s.iy != iy) {
            throw ValidationError("sample " + std::to_string(k) + " is out of row-major order");
        }
        if (s.delta != s.s21_on - s.s21_off) {
            throw ValidationError("sample " + std::to_string(k) + " delta differs from s21_on - s21_off");
        }
    }
    if (meta.session_id.find_first_of("\r\n") != std::string::npos) {
        throw ValidationError("session id must be a single line");
    }
}

Eigen::MatrixXd ResponseMap::delta_grid() const {
    if (plan.kind != PlanKind::grid) {
        throw ValidationError("delta_grid needs a grid plan");
    }
    Eigen::MatrixXd g = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(plan.ny),
                                                  static_cast<Eigen::Index>(plan.nx),
                                                  std::numeric_limits<double>::quiet_NaN());
    for (const auto& s : samples) {
        g(static_cast<Eigen::Index>(s.iy), static_cast<Eigen::Index>(s.ix)) = s.delta;
    }
    return g;
}

namespace {

constexpr std::string_view kFormatTag = "cryoscan-response-map/1";
constexpr std::string_view kColumns = "ix,iy,vx,vy,s21_off,s21_on,delta,t,flags";

void put_double(std::string& out, double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    out.append(buf, res.ptr);
}

}  // namespace

std::string format_map(const ResponseMap& map) {
    map.validate();
    std::string out;
    out += "# format: ";
    out += kFormatTag;
    out += "\n# plan: " + jsonio::plan_to_json_value(map.plan).dump() + "\n";
    out += "# config_hash: " + map.meta.config_hash + "\n";
    out += "# seed: " + std::to_string(map.meta.seed) + "\n";
    out += "# session_id: " + map.meta.session_id + "\n";
    out += "# created_s: ";
    put_double(out, map.meta.created_s);
    out += "\n# complete: ";
    out += map.meta.complete ? "true" : "false";
    out += "\n# samples: " + std::to_string(map.samples.size()) + "\n";
    out += kColumns;
    out += '\n';
    for (const auto& s : map.samples) {
        out += std::to_string(s.ix);
        out += ',';
        out += std::to_string(s.iy);
        for (double x : {s.v.vx(), s.v.vy(), s.s21_off, s.s21_on, s.delta, s.t}) {
            out += ',';
            put_double(out, x);
        }
        out += ',';
        out += format_flags(s.flags);
        out += '\n';
    }
    return out;
}

namespace {

struct LineCursor {
    std::string_view text;
    std::size_t pos = 0;
    std::size_t line_no = 0;

    bool next(std::string_view& line, bool& terminated) {
        if (pos >= text.size()) return false;
        const std::size_t nl = text.find('\n', pos);
        terminated = nl != std::string_view::npos;
        const std::size_t end = terminated ? nl : text.size();
        line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = terminated ? nl + 1 : text.size();
        ++line_no;
        return true;
    }
};

template <typename T>
T parse_number(std::string_view field, const std::string& source, std::size_t line, std::size_t col,
               const char* what) {
    T value{};
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
        throw ParseError(source, line, col, std::string("expected ") + what);
    }
    return value;
}

}  // namespace

ResponseMap parse_map(std::string_view text, const std::string& source) {
    ResponseMap map;
    LineCursor cur{text};
    std::string_view line;
    bool terminated = false;
    bool have_format = false;
    bool have_plan = false;
    std::optional<std::size_t> declared;

    // header block
    while (true) {
        if (!cur.next(line, terminated)) {
            throw ParseError(source, cur.line_no + 1, 1, "unexpected end of file in header");
        }
        if (!terminated) {
            throw ParseError(source, cur.line_no, line.size() + 1, "truncated line");
        }
        if (line.empty()) continue;
        if (line[0] != '#') break;
        const std::size_t colon = line.find(':');
        if (colon == std::string_view::npos || line.size() < 2 || line[1] != ' ') {
            throw ParseError(source, cur.line_no, 1, "header lines must read '# key: value'");
        }
        const std::string_view key = line.substr(2, colon - 2);
        std::string_view value = line.substr(colon + 1);
        if (!value.empty() && value[0] == ' ') value.remove_prefix(1);
        const std::size_t vcol = static_cast<std::size_t>(value.data() - line.data()) + 1;
        if (key == "format") {
            if (value != kFormatTag) {
                throw ParseError(source, cur.line_no, vcol, "unsupported map format");
            }
            have_format = true;
        } else if (key == "plan") {
            try {
                map.plan = jsonio::plan_from_json_value(jsonio::parse(value, source), "plan");
            } catch (const ParseError&) {
                throw ParseError(source, cur.line_no, vcol, "malformed plan JSON");
            } catch (const ValidationError& e) {
                throw ParseError(source, cur.line_no, vcol, e.what());
            }
            have_plan = true;
        } else if (key == "config_hash") {
            map.meta.config_hash = std::string(value);
        } else if (key == "seed") {
            map.meta.seed = parse_number<std::uint64_t>(value, source, cur.line_no, vcol, "an unsigned seed");
        } else if (key == "session_id") {
            map.meta.session_id = std::string(value);
        } else if (key == "created_s") {
            map.meta.created_s = parse_number<double>(value, source, cur.line_no, vcol, "a number");
        } else if (key == "complete") {
            if (value == "true") {
                map.meta.complete = true;
            } else if (value == "false") {
                map.meta.complete = false;
            } else {
                throw ParseError(source, cur.line_no, vcol, "expected true or false");
            }
        } else if (key == "samples") {
            declared = parse_number<std::size_t>(value, source, cur.line_no, vcol, "a sample count");
        } else {
            throw ParseError(source, cur.line_no, 3, "unknown header key '" + std::string(key) + "'");
        }
    }
    if (!have_format || !have_plan || !declared) {
        throw ParseError(source, cur.line_no, 1, "header must carry format, plan and samples");
    }
    if (line != kColumns) {
        throw ParseError(source, cur.line_no, 1, "expected column line '" + std::string(kColumns) + "'");
    }

    while (cur.next(line, terminated)) {
        if (!terminated) {
            throw ParseError(source, cur.line_no, line.size() + 1, "truncated row (missing newline)");
        }
        if (line.empty()) {
            throw ParseError(source, cur.line_no, 1, "empty row");
        }
        std::string_view fields[9];
        std::size_t cols[9];
        std::size_t start = 0;
        std::size_t count = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            if (count == 9) {
                throw ParseError(source, cur.line_no, start + 1, "too many fields");
            }
            cols[count] = start + 1;
            fields[count++] = line.substr(start, comma == std::string_view::npos ? comma : comma - start);
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (count != 9) {
            throw ParseError(source, cur.line_no, line.size() + 1, "expected 9 fields, found " + std::to_string(count));
        }
        ResponseSample s;
        const std::size_t ln = cur.line_no;
        s.ix = parse_number<std::size_t>(fields[0], source, ln, cols[0], "an integer ix");
        s.iy = parse_number<std::size_t>(fields[1], source, ln, cols[1], "an integer iy");
        const double vx = parse_number<double>(fields[2], source, ln, cols[2], "a number");
        const double vy = parse_number<double>(fields[3], source, ln, cols[3], "a number");
        try {
            s.v = VoltageCoord(vx, vy);
        } catch (const ValidationError& e) {
            throw ParseError(source, ln, cols[2], e.what());
        }
        s.s21_off = parse_number<double>(fields[4], source, ln, cols[4], "a number");
        s.s21_on = parse_number<double>(fields[5], source, ln, cols[5], "a number");
        s.delta = parse_number<double>(fields[6], source, ln, cols[6], "a number");
        s.t = parse_number<double>(fields[7], source, ln, cols[7], "a number");
        try {
            s.flags = parse_flags(fields[8]);
        } catch (const ValidationError& e) {
            throw ParseError(source, ln, cols[8], e.what());
        }
        map.samples.push_back(s);
    }
    if (map.samples.size() != *declared) {
        throw ValidationError(source + ": header declares " + std::to_string(*declared) + " samples, file holds " +
                              std::to_string(map.samples.size()));
    }
    map.validate();
    return map;
}

void save_map(const ResponseMap& map, const std::filesystem::path& path) {
    const std::string text = format_map(map);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write map file " + path.string());
    }
    out << text;
    if (!out) {
        throw Error("write failed for " + path.string());
    }
}

ResponseMap load_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open map file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_map(buffer.str(), path.string());
}

std::string plan_to_json(const ScanPlan& plan) { return jsonio::plan_to_json_value(plan).dump(2); }

ScanPlan plan_from_json(std::string_view text) {
    return jsonio::plan_from_json_value(jsonio::parse(text, "<plan>"), "plan");
}

void NoiseModel::validate() const {
    if (!std::isfinite(multiplicative) || multiplicative < 0.0 || !std::isfinite(additive) || additive < 0.0) {
        throw ValidationError("noise sigmas must be finite and >= 0");
    }
}

void InstrumentConfig::validate() const {
    electrical.validate();
    layout.validate();
    spot.validate();
    mkid.validate();
    mask.validate(layout.device_plane.half_size_mm);
    background.validate();
    noise.validate();
}

Instrument::Instrument(InstrumentConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), mirror_(steering::MirrorState::at_rest(cfg_.electrical)), rng_(seed) {
    cfg_.validate();
}

double Instrument::absorbed_power() const {
    device::DeviceState s{base_power_w_, 0.0, 0.0};
    if (source_on_) {
        return device::thermal_load(s, load_w_, since_change_s_, cfg_.mkid).absorbed_power_w;
    }
    return device::thermal_relax(s, since_change_s_, cfg_.mkid).absorbed_power_w;
}

void Instrument::rebase_load() {
    base_power_w_ = absorbed_power();
    since_change_s_ = 0.0;
    load_w_ = source_on_ ? illumination(mirror_.commanded, source_).absorbed_w : 0.0;
}

double Instrument::slew_to(const VoltageCoord& target, bool override_interlock) {
    const double dt = steering::slew_time(mirror_.commanded, target, cfg_.electrical);
    if (dt > 0.0) {
        steering::advance(mirror_, target, dt, cfg_.electrical, override_interlock);
        since_change_s_ += dt;
        if (source_on_) rebase_load();
    } else if (!override_interlock && !steering::check_stability(target, cfg_.electrical).stable) {
        throw InterlockError("target lies in an instability region");
    }
    return dt;
}

void Instrument::wait(double dt) {
    if (!(dt >= 0.0)) {
        throw ValidationError("wait interval must be >= 0");
    }
    if (dt == 0.0) return;
    steering::advance_hold(mirror_, dt, cfg_.electrical);
    since_change_s_ += dt;
}

void Instrument::set_source(bool on, const SourceSettings& settings) {
    if (on) {
        settings.validate();
    }
    base_power_w_ = absorbed_power();
    since_change_s_ = 0.0;
    source_on_ = on;
    if (on) source_ = settings;
    load_w_ = on ? illumination(mirror_.commanded, source_).absorbed_w : 0.0;
}

double Instrument::read_s21() {
    double s = device::s21_magnitude(cfg_.mkid.readout_freq_hz, cfg_.mkid, absorbed_power());
    if (cfg_.noise.additive > 0.0) {
        s += cfg_.noise.additive * std::normal_distribution<double>(0.0, 1.0)(rng_);
    }
    return s;
}

double Instrument::draw_gain() {
    if (cfg_.noise.multiplicative > 0.0) {
        return 1.0 + cfg_.noise.multiplicative * std::normal_distribution<double>(0.0, 1.0)(rng_);
    }
    return 1.0;
}

std::optional<optics::Vec2> Instrument::landing(const VoltageCoord& v) const {
    try {
        return optics::trace_command(v, cfg_.electrical, cfg_.layout);
    } catch (const optics::TraceMiss&) {
        return std::nullopt;
    }
}

Illumination Instrument::illumination(const VoltageCoord& v, const SourceSettings& settings) const {
    Illumination out;
    const double power = settings.power_w;
    out.landing_mm = landing(v);
    if (!out.landing_mm) {
        out.missed_plane = true;
        out.blocked_w = power;
        out.absorbed_w = device::background_power(power, v, cfg_.background);
        return out;
    }
    const auto stability = steering::check_stability(v, cfg_.electrical);
    auto split_at = [&](const optics::Vec2& c) {
        return device::masked_power(optics::spot_profile(c, settings.wavelength_nm, cfg_.spot, power), cfg_.mask);
    };
    device::PowerSplit split;
    if (stability.stable) {
        split = split_at(*out.landing_mm);
    } else {
        // The spot sweeps a line segment; average over it.
        out.oscillating = true;
        const auto& osc = *stability.oscillation;
        const optics::Vec2 dir(std::cos(osc.orientation_rad), std::sin(osc.orientation_rad));
        constexpr int kSamples = 21;
        for (int i = 0; i < kSamples; ++i) {
            const double s = (static_cast<double>(i) / (kSamples - 1) - 0.5) * osc.path_length_mm;
            const auto part = split_at(*out.landing_mm + s * dir);
            split.through_w += part.through_w / kSamples;
        }
        split.blocked_w = power - split.through_w;
    }
    out.through_w = split.through_w;
    out.blocked_w = split.blocked_w;
    out.absorbed_w = split.through_w + device::background_power(split.blocked_w, v, cfg_.background);
    return out;
}

ResponseMap execute(const ScanPlan& plan, Instrument& instrument, MapMetadata meta, const ScanHooks& hooks) {
    plan.validate();
    ResponseMap map;
    map.plan = plan;
    meta.created_s = instrument.clock();
    meta.complete = false;
    map.meta = meta;
    const std::size_t total = plan.point_count();
    map.samples.reserve(total);
    if (instrument.source_on()) {
        instrument.set_source(false, instrument.source());
    }

    for (std::size_t k = 0; k < total; ++k) {
        if (hooks.cancelled && hooks.cancelled()) {
            break;
        }
        ResponseSample s;
        std::tie(s.ix, s.iy) = plan.index(k);
        s.v = plan.point(k);
        const bool stable = steering::check_stability(s.v, instrument.config().electrical).stable;
        if (!stable) {
            s.flags |= kUnstable;
        }
        if (!stable && !plan.override_interlock) {
            s.s21_off = instrument.read_s21();
            s.s21_on = s.s21_off;
            s.delta = 0.0;
            s.t = instrument.clock();
        } else {
            if (!stable) s.flags |= kOverridden;
            instrument.slew_to(s.v, plan.override_interlock);
            instrument.wait(plan.timing.settle_s);
            instrument.wait(plan.timing.dwell_off_s);
            s.s21_off = instrument.read_s21();
            instrument.set_source(true, plan.source);
            if (!instrument.landing(s.v)) {
                s.flags |= kMissedPlane;
            }
            instrument.wait(plan.timing.dwell_on_s);
            const double on_reading = instrument.read_s21();
            s.t = instrument.clock();
            s.s21_on = s.s21_off + (on_reading - s.s21_off) * instrument.draw_gain();
            s.delta = s.s21_on - s.s21_off;
            instrument.set_source(false, plan.source);
            instrument.wait(plan.timing.relax_wait_s);
        }
        map.samples.push_back(s);
        if (hooks.on_sample) {
            hooks.on_sample(s, map.samples.size(), total);
        }
    }
    map.meta.complete = map.samples.size() == total;
    return map;
}

VoltageCoord step_location(const ResponseMap& map, double* index_position) {
    if (map.samples.size() < 2) {
        throw ValidationError("step detection needs at least 2 samples");
    }
    std::size_t best = 0;
    double best_jump = -1.0;
    for (std::size_t k = 0; k + 1 < map.samples.size(); ++k) {
        const double jump = std::abs(map.samples[k + 1].delta - map.samples[k].delta);
        if (jump > best_jump) {
            best_jump = jump;
            best = k;
        }
    }
    if (index_position) *index_position = static_cast<double>(best) + 0.5;
    const auto& a = map.samples[best].v;
    const auto& b = map.samples[best + 1].v;
    return VoltageCoord(0.5 * (a.vx() + b.vx()), 0.5 * (a.vy() + b.vy()));
}

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b, std::ptrdiff_t lag) {
    const auto n = static_cast<std::ptrdiff_t>(a.size());
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -lag);
    const std::ptrdiff_t hi = std::min(n, n - lag);
    const std::ptrdiff_t m = hi - lo;
    if (m < 2) return std::numeric_limits<double>::quiet_NaN();
    double ma = 0.0, mb = 0.0;
    for (std::ptrdiff_t i = lo; i < hi; ++i) {
        ma += a[i];
        mb += b[i + lag];
    }
    ma /= static_cast<double>(m);
    mb /= static_cast<double>(m);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::ptrdiff_t i = lo; i < hi; ++i) {
        const double da = a[i] - ma;
        const double db = b[i + lag] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

double variance(const std::vector<double>& x) {
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double acc = 0.0;
    for (double v : x) acc += (v - mean) * (v - mean);
    return acc;
}

}  // namespace

RepeatabilityMetrics repeatability(const ResponseMap& a, const ResponseMap& b) {
    if (!(a.plan == b.plan)) {
        throw ValidationError("repeatability needs maps from identical plans");
    }
    if (a.samples.size() != b.samples.size() || a.samples.size() < 2) {
        throw ValidationError("repeatability needs equally sized maps with at least 2 samples");
    }
    std::vector<double> da, db;
    for (const auto& s : a.samples) da.push_back(s.delta);
    for (const auto& s : b.samples) db.push_back(s.delta);
    if (variance(da) == 0.0 || variance(db) == 0.0) {
        throw ValidationError("correlation undefined: a map has zero variance");
    }

    RepeatabilityMetrics m;
    double pa = 0.0, pb = 0.0;
    m.step_a = step_location(a, &pa);
    m.step_b = step_location(b, &pb);
    m.step_offset = (pb - pa) * a.plan.step();

    double acc = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) acc += (da[i] - db[i]) * (da[i] - db[i]);
    m.rms_delta_diff = std::sqrt(acc / static_cast<double>(da.size()));

    const auto max_lag = static_cast<std::ptrdiff_t>(da.size() / 4);
    double peak = -std::numeric_limits<double>::infinity();
    for (std::ptrdiff_t lag = -max_lag; lag <= max_lag; ++lag) {
        const double c = pearson(da, db, lag);
        if (std::isfinite(c)) peak = std::max(peak, c);
    }
    m.peak_corr = peak;
    return m;
}

}  // namespace cryoscan::scan
