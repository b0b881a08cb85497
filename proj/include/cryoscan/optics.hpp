#pragma once

// Geometric beam path from the focuser through the MEMS mirror and the
// stationary fold mirror onto the device plane, plus the elliptical Gaussian
// spot model and its power coupling through circular apertures.

#include "cryoscan/errors.hpp"
#include "cryoscan/steering.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <vector>

namespace cryoscan::optics {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

struct Plane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
};

struct DevicePlane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
    Vec3 basis_u = Vec3::UnitX();  // image of +vx
    Vec3 basis_v = Vec3::UnitY();  // image of +vy
    double half_size_mm = 25.0;    // square active region centred on `point`
};

struct OpticalLayout {
    Vec3 focuser_origin;
    Vec3 focuser_direction;
    Vec3 mems_pivot;
    Vec3 mems_rest_normal;
    Vec3 mems_x_axis;  // tilt_x rotates about this axis; Y = normal x X
    Plane stationary_mirror;
    double stationary_aperture_mm = 20.0;
    DevicePlane device_plane;
    double focal_length_mm = 150.0;

    // Normal-incidence MEMS, 45 degree stationary fold. The rest ray runs
    // focuser -> MEMS (focuser_to_mems) -> fold (mems_to_fold) -> device plane,
    // and the three legs add up to focal_length.
    static OpticalLayout folded(double focal_length_mm = 150.0, double focuser_to_mems_mm = 20.0,
                                double mems_to_fold_mm = 65.0);

    // Throws ValidationError on non-unit vectors, degenerate bases or a rest
    // path length that disagrees with focal_length.
    void validate() const;
};

struct Ray {
    Vec3 origin;
    Vec3 direction;
};

// A ray that left the optical train. `last_segment` is the final valid ray.
class TraceMiss : public MissError {
public:
    TraceMiss(const std::string& what, Ray last_segment, std::string stage)
        : MissError(what), last_segment_(std::move(last_segment)), stage_(std::move(stage)) {}
    const Ray& last_segment() const noexcept { return last_segment_; }
    const std::string& stage() const noexcept { return stage_; }

private:
    Ray last_segment_;
    std::string stage_;
};

// Specular reflection at the plane through surface_point with unit normal.
// The returned ray starts at the intersection point.
Ray reflect(const Ray& ray, const Vec3& surface_point, const Vec3& normal);

Vec3 pose_to_normal(const steering::MirrorPose& pose, const OpticalLayout& layout);

struct TracedPath {
    Vec2 position_mm;          // device-plane coordinates
    double path_length_mm = 0.0;
    Vec3 hit_point;            // 3D landing point
};

TracedPath trace_path(const steering::MirrorPose& pose, const OpticalLayout& layout);
Vec2 trace_to_device(const steering::MirrorPose& pose, const OpticalLayout& layout);

// Full chain: command -> drive -> tilt -> landing point.
Vec2 trace_command(const steering::VoltageCoord& v, const steering::ElectricalConfig& electrical,
                   const OpticalLayout& layout);

struct ScanExtent {
    double min_u = 0.0;
    double max_u = 0.0;
    double min_v = 0.0;
    double max_v = 0.0;
    std::vector<steering::VoltageCoord> misses;

    double width() const { return max_u - min_u; }
    double height() const { return max_v - min_v; }
};

ScanExtent scan_extent(const OpticalLayout& layout, const steering::ElectricalConfig& electrical,
                       std::size_t n);

// Root-finds the per-axis mechanical tilt range so that the n x n scan
// bounding box is target_mm on each side.
std::pair<double, double> derive_theta_max(const OpticalLayout& layout, steering::ElectricalConfig electrical,
                                           double target_mm, std::size_t n = 21);

struct BeamSpot {
    Vec2 center_mm = Vec2::Zero();
    double sigma_major_um = 0.0;
    double sigma_minor_um = 0.0;
    double orientation_rad = 0.0;  // direction of the major axis in device (u, v)
    double total_power_w = 0.0;
    double wavelength_nm = 650.0;

    // Reported diameter is the +-2 sigma width.
    double diameter_major_um() const { return 4.0 * sigma_major_um; }
    double diameter_minor_um() const { return 4.0 * sigma_minor_um; }
    double mean_diameter_um() const;

    // Covariance in mm^2 in the device (u, v) frame.
    Eigen::Matrix2d covariance_mm2() const;
    void validate() const;
};

struct SpotModelConfig {
    double design_wavelength_nm = 650.0;
    double min_diameter_um = 80.0;
    double chromatic_slope_um_per_nm = 0.5;
    double ellipticity = 1.0;  // sigma_major / sigma_minor
    double orientation_rad = 0.0;

    void validate() const;
};

inline constexpr double kBandMinNm = 180.0;
inline constexpr double kBandMaxNm = 2000.0;
void require_in_band(double wavelength_nm);

BeamSpot spot_profile(const Vec2& center_mm, double wavelength_nm, const SpotModelConfig& cfg, double power_w);

// Power of the spot falling inside the circular hole.
double aperture_power(const BeamSpot& spot, const Vec2& hole_center_mm, double hole_radius_mm);

}  // namespace cryoscan::optics
