#include "cryoscan/json_io.hpp"

#include <cmath>
#include <limits>

namespace cryoscan::jsonio {

Json parse(std::string_view text, const std::string& source) {
    try {
        return Json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::parse_error& e) {
        // byte offset -> line/column
        std::size_t line = 1;
        std::size_t column = 1;
        const std::size_t limit = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (std::size_t i = 0; i < limit; ++i) {
            if (text[i] == '\n') {
                ++line;
                column = 1;
            } else {
                ++column;
            }
        }
        throw ParseError(source, line, column, "malformed JSON");
    }
}

ObjectReader::ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
        throw ValidationError((path_.empty() ? std::string("<root>") : path_) + ": expected an object");
    }
}

std::string ObjectReader::path(const char* key) const {
    return path_.empty() ? std::string(key) : path_ + "." + key;
}

const Json* ObjectReader::child(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
}

void ObjectReader::get(const char* key, double& out) {
    if (const Json* v = child(key)) {
        if (!v->is_number()) {
            throw ValidationError(path(key) + ": expected a number");
        }
        out = v->get<double>();
        if (!std::isfinite(out)) {
            throw ValidationError(path(key) + ": must be finite");
        }
    }
}

void ObjectReader::get(const char* key, bool& out) {
    if (const Json* v = child(key)) {
        if (!v->is_boolean()) {
            throw ValidationError(path(key) + ": expected true or false");
        }
        out = v->get<bool>();
    }
}

void ObjectReader::get(const char* key, std::string& out) {
    if (const Json* v = child(key)) {
        if (!v->is_string()) {
            throw ValidationError(path(key) + ": expected a string");
        }
        out = v->get<std::string>();
    }
}

void ObjectReader::get(const char* key, std::size_t& out) {
    if (const Json* v = child(key)) {
        if (!v->is_number_unsigned()) {
            throw ValidationError(path(key) + ": expected a non-negative integer");
        }
        out = v->get<std::size_t>();
    }
}

void ObjectReader::get(const char* key, std::vector<double>& out) {
    if (const Json* v = child(key)) {
        if (!v->is_array()) {
            throw ValidationError(path(key) + ": expected an array of numbers");
        }
        std::vector<double> values;
        for (const auto& e : *v) {
            if (!e.is_number()) {
                throw ValidationError(path(key) + ": expected an array of numbers");
            }
            values.push_back(e.get<double>());
        }
        out = std::move(values);
    }
}

void ObjectReader::finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
        if (!used_.count(it.key())) {
            throw ValidationError(path(it.key().c_str()) + ": unknown key");
        }
    }
}

Json vec_to_json(double a, double b) { return Json::array({a, b}); }

std::vector<double> read_pair(const Json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
        throw ValidationError(path + ": expected a pair of numbers");
    }
    return {j[0].get<double>(), j[1].get<double>()};
}

Json plan_to_json_value(const scan::ScanPlan& plan) {
    Json j;
    if (plan.kind == scan::PlanKind::grid) {
        j["kind"] = "grid";
        j["vx_range"] = vec_to_json(plan.vx_range[0], plan.vx_range[1]);
        j["vy_range"] = vec_to_json(plan.vy_range[0], plan.vy_range[1]);
        j["nx"] = plan.nx;
        j["ny"] = plan.ny;
    } else {
        j["kind"] = "line";
        j["start"] = vec_to_json(plan.start.vx(), plan.start.vy());
        j["end"] = vec_to_json(plan.end.vx(), plan.end.vy());
        j["n_points"] = plan.n_points;
    }
    j["timing"] = {{"dwell_on_s", plan.timing.dwell_on_s},
                   {"dwell_off_s", plan.timing.dwell_off_s},
                   {"relax_wait_s", plan.timing.relax_wait_s},
                   {"settle_s", plan.timing.settle_s}};
    j["source"] = {{"wavelength_nm", plan.source.wavelength_nm}, {"power_w", plan.source.power_w}};
    j["override_interlock"] = plan.override_interlock;
    return j;
}

scan::ScanPlan plan_from_json_value(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    scan::Timing timing;
    scan::SourceSettings source;
    if (const Json* t = r.child("timing")) {
        ObjectReader tr(*t, r.path("timing"));
        tr.get("dwell_on_s", timing.dwell_on_s);
        tr.get("dwell_off_s", timing.dwell_off_s);
        tr.get("relax_wait_s", timing.relax_wait_s);
        tr.get("settle_s", timing.settle_s);
        tr.finish();
    }
    if (const Json* s = r.child("source")) {
        ObjectReader sr(*s, r.path("source"));
        sr.get("wavelength_nm", source.wavelength_nm);
        sr.get("power_w", source.power_w);
        sr.finish();
    }
    bool override_interlock = false;
    r.get("override_interlock", override_interlock);
    const std::string kind = r.require<std::string>("kind");

    auto pair_of = [&](const char* key) {
        const Json* v = r.child(key);
        if (v == nullptr) {
            throw ValidationError(r.path(key) + ": required key missing");
        }
        return read_pair(*v, r.path(key));
    };

    scan::ScanPlan plan;
    try {
        if (kind == "grid") {
            const auto vx = pair_of("vx_range");
            const auto vy = pair_of("vy_range");
            const auto nx = r.require<std::size_t>("nx");
            const auto ny = r.require<std::size_t>("ny");
            r.finish();
            plan = scan::plan_grid({vx[0], vx[1]}, {vy[0], vy[1]}, nx, ny, timing, source);
        } else if (kind == "line") {
            const auto a = pair_of("start");
            const auto b = pair_of("end");
            const auto n = r.require<std::size_t>("n_points");
            r.finish();
            plan = scan::plan_line(steering::VoltageCoord(a[0], a[1]), steering::VoltageCoord(b[0], b[1]), n, timing,
                                   source);
        } else {
            throw ValidationError(r.path("kind") + ": expected 'grid' or 'line'");
        }
    } catch (const ParseError&) {
        throw;
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        if (msg.rfind(path, 0) == 0 && !path.empty()) {
            throw;
        }
        throw ValidationError((path.empty() ? std::string("plan") : path) + ": " + msg);
    }
    plan.override_interlock = override_interlock;
    return plan;
}

}  // namespace cryoscan::jsonio
