#pragma once

// Strict JSON object reading with path-qualified errors, shared by the
// config loader, the map header and the HTTP API.

#include "cryoscan/errors.hpp"
#include "cryoscan/scan.hpp"

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

namespace cryoscan::jsonio {

using Json = nlohmann::ordered_json;

Json parse(std::string_view text, const std::string& source);

class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path);

    bool has(const char* key) const { return j_.contains(key); }
    std::string path(const char* key) const;

    // Optional keys keep `out` untouched when absent.
    void get(const char* key, double& out);
    void get(const char* key, bool& out);
    void get(const char* key, std::string& out);
    void get(const char* key, std::size_t& out);
    void get(const char* key, std::vector<double>& out);

    template <typename T>
    T require(const char* key) {
        if (!has(key)) {
            throw ValidationError(path(key) + ": required key missing");
        }
        T out{};
        get(key, out);
        return out;
    }

    // Marks the key consumed and returns the raw value, or nullptr if absent.
    const Json* child(const char* key);

    // Rejects keys that were never read.
    void finish() const;

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> used_;
};

Json vec_to_json(double a, double b);
std::vector<double> read_pair(const Json& j, const std::string& path);

Json plan_to_json_value(const scan::ScanPlan& plan);
scan::ScanPlan plan_from_json_value(const Json& j, const std::string& path);

}  // namespace cryoscan::jsonio
