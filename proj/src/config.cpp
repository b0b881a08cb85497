#include "cryoscan/config.hpp"

#include "cryoscan/errors.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace cryoscan::config {

using jsonio::Json;
using jsonio::ObjectReader;

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xf]);
    }
    return out;
}

namespace {

constexpr const char* kFormat = "cryoscan-config/1";

// Reads a section and mirrors every value (defaults included) into `doc`.
class Section {
public:
    Section(const Json* j, std::string path, Json& doc)
        : empty_(Json::object()), r_(j ? *j : empty_, std::move(path)), doc_(doc) {
        doc_ = Json::object();
    }

    double num(const char* key, double fallback) {
        r_.get(key, fallback);
        doc_[key] = fallback;
        return fallback;
    }
    double positive(const char* key, double fallback) {
        const double v = num(key, fallback);
        if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(path(key) + ": must be > 0");
        return v;
    }
    double non_negative(const char* key, double fallback) {
        const double v = num(key, fallback);
        if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(path(key) + ": must be >= 0");
        return v;
    }
    bool flag(const char* key, bool fallback) {
        r_.get(key, fallback);
        doc_[key] = fallback;
        return fallback;
    }
    std::vector<double> pair(const char* key, std::vector<double> fallback) {
        if (const Json* v = r_.child(key)) {
            fallback = jsonio::read_pair(*v, r_.path(key));
        }
        doc_[key] = Json::array({fallback[0], fallback[1]});
        return fallback;
    }
    const Json* child(const char* key) { return r_.child(key); }
    std::string path(const char* key) const { return r_.path(key); }
    Json& doc() { return doc_; }
    void finish() { r_.finish(); }

private:
    Json empty_;
    ObjectReader r_;
    Json& doc_;
};

template <typename Fn>
void with_field(const std::string& path, Fn&& fn) {
    try {
        fn();
    } catch (const ParseError&) {
        throw;
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

steering::ElectricalConfig read_electrical(const Json* j, Json& doc) {
    Section s(j, "electrical", doc);
    steering::ElectricalConfig e;
    e.driver_capacitance_limit_f = s.positive("driver_capacitance_limit_pf", 50.0) * 1e-12;
    e.mirror_capacitance_f = s.positive("mirror_capacitance_pf", 20.0) * 1e-12;
    e.cable_capacitance_f = s.positive("cable_capacitance_pf", 30.0) * 1e-12;
    e.resting_power_w = s.non_negative("resting_power_uw", 0.99) * 1e-6;
    e.max_slew_per_s = s.positive("max_slew_per_s", 10.0);
    e.common_mode_v = s.positive("common_mode_v", 180.0);
    const auto kappa0 = s.pair("kappa0", {1.0, 1.0});
    e.kappa0_x = kappa0[0];
    e.kappa0_y = kappa0[1];
    const auto theta = s.pair("theta_max_rad", {0.05, 0.05});
    e.theta_max_x_rad = theta[0];
    e.theta_max_y_rad = theta[1];
    e.oscillation_length_mm = s.non_negative("oscillation_length_mm", 0.5);
    Json regions = Json::array();
    if (const Json* list = s.child("instability_regions")) {
        if (!list->is_array()) {
            throw ValidationError(s.path("instability_regions") + ": expected an array");
        }
        for (std::size_t i = 0; i < list->size(); ++i) {
            const std::string p = s.path("instability_regions") + "[" + std::to_string(i) + "]";
            Json rdoc;
            Section r(&(*list)[i], p, rdoc);
            const auto c = r.pair("center", {0.0, 0.0});
            steering::InstabilityRegion region;
            with_field(p + ".center", [&] { region.center = steering::VoltageCoord(c[0], c[1]); });
            region.radius = r.num("radius", 0.0);
            region.orientation_rad = r.num("orientation_rad", 0.0);
            r.finish();
            e.instability_regions.push_back(region);
            regions.push_back(rdoc);
        }
    }
    s.doc()["instability_regions"] = regions;
    s.finish();
    with_field("electrical", [&] { e.validate(); });
    return e;
}

optics::OpticalLayout read_layout(const Json* j, Json& doc) {
    Section s(j, "layout", doc);
    const double focal = s.num("focal_length_mm", 150.0);
    const double to_mems = s.num("focuser_to_mems_mm", 20.0);
    const double to_fold = s.num("mems_to_fold_mm", 65.0);
    const double aperture = s.num("stationary_aperture_mm", 20.0);
    const double half = s.num("device_half_size_mm", 25.0);
    s.finish();
    if (!(to_mems > 0.0) || !(to_fold > 0.0) || !(focal > to_mems + to_fold)) {
        throw ValidationError("layout: need 0 < focuser_to_mems_mm, 0 < mems_to_fold_mm and a focal length beyond both");
    }
    if (!(aperture > 0.0) || !(half > 0.0)) {
        throw ValidationError("layout: apertures and device size must be > 0");
    }
    optics::OpticalLayout layout = optics::OpticalLayout::folded(focal, to_mems, to_fold);
    layout.stationary_aperture_mm = aperture;
    layout.device_plane.half_size_mm = half;
    with_field("layout", [&] { layout.validate(); });
    return layout;
}

optics::SpotModelConfig read_spot(const Json* j, Json& doc) {
    Section s(j, "spot", doc);
    optics::SpotModelConfig c;
    c.design_wavelength_nm = s.num("design_wavelength_nm", 650.0);
    c.min_diameter_um = s.num("min_diameter_um", 80.0);
    c.chromatic_slope_um_per_nm = s.num("chromatic_slope_um_per_nm", 0.5);
    c.ellipticity = s.num("ellipticity", 1.0);
    c.orientation_rad = s.num("orientation_rad", 0.0);
    s.finish();
    with_field("spot", [&] { c.validate(); });
    return c;
}

device::MkidParams read_mkid(const Json* j, Json& doc) {
    Section s(j, "mkid", doc);
    device::MkidParams p;
    p.f0_hz = s.num("f0_hz", 1.0e9);
    p.qi = s.num("qi", 3.0e5);
    p.qc = s.num("qc", 2.0e5);
    p.readout_freq_hz = s.num("readout_freq_hz", p.f0_hz);
    p.freq_responsivity_hz_per_w = s.num("freq_responsivity_hz_per_w", -1.0e13);
    p.q_responsivity_per_w = s.num("q_responsivity_per_w", 1.5e3);
    p.relax_tau_s = s.num("relax_tau_s", 4.0);
    s.finish();
    with_field("mkid", [&] { p.validate(); });
    return p;
}

Json mask_to_doc(const device::MaskPattern& m) {
    Json d;
    d["kind"] = m.kind == device::MaskKind::open ? "open" : "screen";
    Json holes = Json::array();
    for (const auto& h : m.holes) {
        holes.push_back({{"center_mm", {h.center_mm.x(), h.center_mm.y()}}, {"radius_mm", h.radius_mm}});
    }
    d["holes"] = holes;
    return d;
}

device::MaskPattern read_mask(const Json* j, const std::filesystem::path& base_dir, Json& doc) {
    device::MaskPattern mask = device::MaskPattern::open(optics::Vec2::Zero(), 12.0);
    if (j == nullptr) {
        doc = mask_to_doc(mask);
        return mask;
    }
    if (j->is_string()) {
        std::filesystem::path p = j->get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        mask = device::load_mask(p);
    } else {
        ObjectReader r(*j, "mask");
        const auto kind = r.require<std::string>("kind");
        if (kind == "open") {
            mask.kind = device::MaskKind::open;
        } else if (kind == "screen") {
            mask.kind = device::MaskKind::screen;
        } else {
            throw ValidationError("mask.kind: expected 'open' or 'screen'");
        }
        mask.holes.clear();
        if (const Json* holes = r.child("holes")) {
            if (!holes->is_array()) throw ValidationError("mask.holes: expected an array");
            for (std::size_t i = 0; i < holes->size(); ++i) {
                const std::string p = "mask.holes[" + std::to_string(i) + "]";
                ObjectReader hr((*holes)[i], p);
                const Json* c = hr.child("center_mm");
                if (!c) throw ValidationError(p + ".center_mm: required key missing");
                const auto xy = jsonio::read_pair(*c, p + ".center_mm");
                device::Hole h;
                h.center_mm = optics::Vec2(xy[0], xy[1]);
                h.radius_mm = hr.require<double>("radius_mm");
                hr.finish();
                mask.holes.push_back(h);
            }
        }
        r.finish();
    }
    doc = mask_to_doc(mask);
    return mask;
}

device::BackgroundModel read_background(const Json* j, Json& doc) {
    Section s(j, "background", doc);
    device::BackgroundModel bg;
    bg.scale = s.num("scale", 0.0);
    Json poly = Json::array({Json::array({1.0})});
    if (const Json* p = s.child("coupling_poly")) {
        if (!p->is_array() || p->empty()) {
            throw ValidationError("background.coupling_poly: expected an array of coefficient rows");
        }
        bg.coupling_poly.clear();
        for (const auto& row : *p) {
            if (!row.is_array()) {
                throw ValidationError("background.coupling_poly: rows must be arrays of numbers");
            }
            std::vector<double> r;
            for (const auto& c : row) {
                if (!c.is_number()) throw ValidationError("background.coupling_poly: coefficients must be numbers");
                r.push_back(c.get<double>());
            }
            bg.coupling_poly.push_back(r);
        }
        poly = *p;
    }
    s.doc()["coupling_poly"] = poly;
    s.finish();
    with_field("background", [&] { bg.validate(); });
    return bg;
}

scan::NoiseModel read_noise(const Json* j, Json& doc) {
    Section s(j, "noise", doc);
    scan::NoiseModel n;
    n.multiplicative = s.num("multiplicative", 0.0);
    n.additive = s.num("additive", 0.0);
    s.finish();
    with_field("noise", [&] { n.validate(); });
    return n;
}

struct Parsed {
    SystemConfig cfg;
    Json doc;
};

Parsed parse_document(const Json& root, const std::filesystem::path& base_dir) {
    Parsed out;
    out.cfg.base_dir = base_dir;
    ObjectReader r(root, "");
    std::string format = kFormat;
    r.get("format", format);
    if (format != kFormat) {
        throw ValidationError("format: expected '" + std::string(kFormat) + "'");
    }
    Json& doc = out.doc;
    doc["format"] = kFormat;
    auto& ic = out.cfg.instrument;
    ic.electrical = read_electrical(r.child("electrical"), doc["electrical"]);
    ic.layout = read_layout(r.child("layout"), doc["layout"]);
    ic.spot = read_spot(r.child("spot"), doc["spot"]);
    ic.mkid = read_mkid(r.child("mkid"), doc["mkid"]);
    ic.mask = read_mask(r.child("mask"), base_dir, doc["mask"]);
    ic.background = read_background(r.child("background"), doc["background"]);
    ic.noise = read_noise(r.child("noise"), doc["noise"]);
    r.get("noise_seed", out.cfg.noise_seed);
    doc["noise_seed"] = out.cfg.noise_seed;

    if (const Json* presets = r.child("presets")) {
        if (!presets->is_object()) {
            throw ValidationError("presets: expected an object of named presets");
        }
        for (auto it = presets->begin(); it != presets->end(); ++it) {
            const std::string p = "presets." + it.key();
            ObjectReader pr(it.value(), p);
            Preset preset;
            pr.get("description", preset.description);
            const Json* plan = pr.child("plan");
            if (!plan) throw ValidationError(p + ".plan: required key missing");
            preset.plan = jsonio::plan_from_json_value(*plan, p + ".plan");
            if (const Json* ov = pr.child("overrides")) {
                if (!ov->is_object()) throw ValidationError(p + ".overrides: expected an object");
                if (ov->contains("presets")) throw ValidationError(p + ".overrides: presets cannot nest");
                preset.overrides = *ov;
            }
            pr.finish();
            out.cfg.presets.emplace(it.key(), std::move(preset));
        }
    }
    r.finish();

    // cross-field checks
    with_field("mask", [&] { ic.mask.validate(ic.layout.device_plane.half_size_mm); });
    return out;
}

}  // namespace

Json SystemConfig::canonical() const {
    if (!document.is_null()) {
        return document;
    }
    // Built in code rather than loaded: derive the document from typed values.
    Json doc;
    doc["format"] = kFormat;
    const auto& e = instrument.electrical;
    Json regions = Json::array();
    for (const auto& r : e.instability_regions) {
        regions.push_back({{"center", {r.center.vx(), r.center.vy()}},
                           {"radius", r.radius},
                           {"orientation_rad", r.orientation_rad}});
    }
    doc["electrical"] = {{"driver_capacitance_limit_pf", e.driver_capacitance_limit_f * 1e12},
                         {"mirror_capacitance_pf", e.mirror_capacitance_f * 1e12},
                         {"cable_capacitance_pf", e.cable_capacitance_f * 1e12},
                         {"resting_power_uw", e.resting_power_w * 1e6},
                         {"max_slew_per_s", e.max_slew_per_s},
                         {"common_mode_v", e.common_mode_v},
                         {"kappa0", {e.kappa0_x, e.kappa0_y}},
                         {"theta_max_rad", {e.theta_max_x_rad, e.theta_max_y_rad}},
                         {"oscillation_length_mm", e.oscillation_length_mm},
                         {"instability_regions", regions}};
    const auto& l = instrument.layout;
    const double to_mems = (l.mems_pivot - l.focuser_origin).norm();
    const double to_fold = (l.stationary_mirror.point - l.mems_pivot).norm();
    doc["layout"] = {{"focal_length_mm", l.focal_length_mm},
                     {"focuser_to_mems_mm", to_mems},
                     {"mems_to_fold_mm", to_fold},
                     {"stationary_aperture_mm", l.stationary_aperture_mm},
                     {"device_half_size_mm", l.device_plane.half_size_mm}};
    const auto& s = instrument.spot;
    doc["spot"] = {{"design_wavelength_nm", s.design_wavelength_nm},
                   {"min_diameter_um", s.min_diameter_um},
                   {"chromatic_slope_um_per_nm", s.chromatic_slope_um_per_nm},
                   {"ellipticity", s.ellipticity},
                   {"orientation_rad", s.orientation_rad}};
    const auto& m = instrument.mkid;
    doc["mkid"] = {{"f0_hz", m.f0_hz},
                   {"qi", m.qi},
                   {"qc", m.qc},
                   {"readout_freq_hz", m.readout_freq_hz},
                   {"freq_responsivity_hz_per_w", m.freq_responsivity_hz_per_w},
                   {"q_responsivity_per_w", m.q_responsivity_per_w},
                   {"relax_tau_s", m.relax_tau_s}};
    doc["mask"] = mask_to_doc(instrument.mask);
    Json poly = Json::array();
    for (const auto& row : instrument.background.coupling_poly) poly.push_back(row);
    doc["background"] = {{"scale", instrument.background.scale}, {"coupling_poly", poly}};
    doc["noise"] = {{"multiplicative", instrument.noise.multiplicative}, {"additive", instrument.noise.additive}};
    doc["noise_seed"] = noise_seed;
    return doc;
}

std::string SystemConfig::hash() const { return sha256_hex(canonical().dump()).substr(0, 16); }

SystemConfig parse_config(std::string_view text, const std::filesystem::path& base_dir, const std::string& source) {
    Parsed p = parse_document(jsonio::parse(text, source), base_dir);
    p.cfg.document = std::move(p.doc);
    return std::move(p.cfg);
}

SystemConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open config file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), path.parent_path(), path.string());
}

ResolvedPreset resolve_preset(const SystemConfig& cfg, const std::string& name) {
    const auto it = cfg.presets.find(name);
    if (it == cfg.presets.end()) {
        std::string known;
        for (const auto& [k, _] : cfg.presets) known += (known.empty() ? "" : ", ") + k;
        throw ValidationError("unknown preset '" + name + "' (known: " + known + ")");
    }
    Json doc = cfg.canonical();
    doc.merge_patch(it->second.overrides);
    ResolvedPreset out;
    try {
        Parsed p = parse_document(doc, cfg.base_dir);
        p.cfg.document = std::move(p.doc);
        out.config = std::move(p.cfg);
    } catch (const ValidationError& e) {
        throw ValidationError("preset '" + name + "': " + e.what());
    }
    out.plan = it->second.plan;
    return out;
}

}  // namespace cryoscan::config
