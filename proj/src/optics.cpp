#include "cryoscan/optics.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cryoscan::optics {
namespace {

constexpr double kGrazing = 1e-12;
constexpr double kUnitTol = 1e-9;
// Gaussian mass beyond this many sigma is below 1e-31 and is ignored.
constexpr double kTailSigmas = 12.0;

void require_unit(const Vec3& v, const char* name) {
    if (!v.allFinite() || std::abs(v.norm() - 1.0) > kUnitTol) {
        throw ValidationError(std::string("layout.") + name + " must be a unit vector");
    }
}

}  // namespace

OpticalLayout OpticalLayout::folded(double focal_length_mm, double focuser_to_mems_mm, double mems_to_fold_mm) {
    const double fold_to_device = focal_length_mm - focuser_to_mems_mm - mems_to_fold_mm;
    if (!(focuser_to_mems_mm > 0.0) || !(mems_to_fold_mm > 0.0) || !(fold_to_device > 0.0)) {
        throw ValidationError("folded layout legs must all be positive");
    }
    OpticalLayout layout;
    layout.focal_length_mm = focal_length_mm;
    layout.focuser_origin = Vec3(0.0, 0.0, focuser_to_mems_mm);
    layout.focuser_direction = Vec3(0.0, 0.0, -1.0);
    layout.mems_pivot = Vec3::Zero();
    layout.mems_rest_normal = Vec3(0.0, 0.0, 1.0);
    layout.mems_x_axis = Vec3(1.0, 0.0, 0.0);
    layout.stationary_mirror.point = Vec3(0.0, 0.0, mems_to_fold_mm);
    layout.stationary_mirror.normal = Vec3(0.0, -1.0, -1.0).normalized();
    layout.stationary_aperture_mm = 20.0;
    layout.device_plane.point = Vec3(0.0, -fold_to_device, mems_to_fold_mm);
    layout.device_plane.normal = Vec3(0.0, 1.0, 0.0);
    // +tilt_x swings the beam toward +z on the plane, +tilt_y toward +x.
    layout.device_plane.basis_u = Vec3(0.0, 0.0, 1.0);
    layout.device_plane.basis_v = Vec3(1.0, 0.0, 0.0);
    layout.device_plane.half_size_mm = 25.0;
    return layout;
}

void OpticalLayout::validate() const {
    require_unit(focuser_direction, "focuser_direction");
    require_unit(mems_rest_normal, "mems_rest_normal");
    require_unit(mems_x_axis, "mems_x_axis");
    require_unit(stationary_mirror.normal, "stationary_mirror.normal");
    require_unit(device_plane.normal, "device_plane.normal");
    require_unit(device_plane.basis_u, "device_plane.basis_u");
    require_unit(device_plane.basis_v, "device_plane.basis_v");
    if (std::abs(mems_x_axis.dot(mems_rest_normal)) > kUnitTol) {
        throw ValidationError("layout.mems_x_axis must be perpendicular to mems_rest_normal");
    }
    const auto& dp = device_plane;
    if (std::abs(dp.basis_u.dot(dp.basis_v)) > kUnitTol || std::abs(dp.basis_u.dot(dp.normal)) > kUnitTol ||
        std::abs(dp.basis_v.dot(dp.normal)) > kUnitTol) {
        throw ValidationError("layout.device_plane basis must be orthonormal and in-plane");
    }
    if (!(dp.half_size_mm > 0.0) || !(stationary_aperture_mm > 0.0) || !(focal_length_mm > 0.0)) {
        throw ValidationError("layout sizes must be > 0");
    }
    TracedPath rest;
    try {
        rest = trace_path(steering::MirrorPose{}, *this);
    } catch (const MissError& e) {
        throw ValidationError(std::string("layout rest ray does not reach the device plane: ") + e.what());
    }
    if (std::abs(rest.path_length_mm - focal_length_mm) > 1e-6) {
        throw ValidationError("layout rest path length " + std::to_string(rest.path_length_mm) +
                              " mm disagrees with focal_length " + std::to_string(focal_length_mm) + " mm");
    }
    if (rest.position_mm.norm() > 1e-6) {
        throw ValidationError("layout rest ray must land on the device-plane origin");
    }
}

Ray reflect(const Ray& ray, const Vec3& surface_point, const Vec3& normal) {
    const double denom = ray.direction.dot(normal);
    if (std::abs(denom) <= kGrazing) {
        throw TraceMiss("ray is parallel to the reflecting surface", ray, "surface");
    }
    const double t = (surface_point - ray.origin).dot(normal) / denom;
    if (t < -1e-12) {
        throw TraceMiss("reflecting surface lies behind the ray", ray, "surface");
    }
    Ray out;
    out.origin = ray.origin + t * ray.direction;
    out.direction = ray.direction - 2.0 * denom * normal;
    return out;
}

Vec3 pose_to_normal(const steering::MirrorPose& pose, const OpticalLayout& layout) {
    constexpr double limit = std::numbers::pi / 4.0;
    if (std::abs(pose.tilt_x) > limit || std::abs(pose.tilt_y) > limit || !std::isfinite(pose.tilt_x) ||
        !std::isfinite(pose.tilt_y)) {
        throw ValidationError("mirror tilt beyond pi/4");
    }
    const Vec3 x_axis = layout.mems_x_axis;
    const Vec3 y_axis = layout.mems_rest_normal.cross(x_axis);
    // Tilt about X first, then about the Y axis carried along by that tilt.
    const Eigen::Matrix3d r =
        (Eigen::AngleAxisd(pose.tilt_x, x_axis) * Eigen::AngleAxisd(pose.tilt_y, y_axis)).toRotationMatrix();
    return (r * layout.mems_rest_normal).normalized();
}

TracedPath trace_path(const steering::MirrorPose& pose, const OpticalLayout& layout) {
    const Ray from_focuser{layout.focuser_origin, layout.focuser_direction};
    const Vec3 mems_normal = pose_to_normal(pose, layout);

    Ray after_mems;
    try {
        after_mems = reflect(from_focuser, layout.mems_pivot, mems_normal);
    } catch (const TraceMiss& e) {
        throw TraceMiss(std::string("MEMS mirror: ") + e.what(), from_focuser, "mems");
    }
    double path = (after_mems.origin - from_focuser.origin).norm();

    Ray after_fold;
    try {
        after_fold = reflect(after_mems, layout.stationary_mirror.point, layout.stationary_mirror.normal);
    } catch (const TraceMiss& e) {
        throw TraceMiss(std::string("stationary mirror: ") + e.what(), after_mems, "fold");
    }
    if ((after_fold.origin - layout.stationary_mirror.point).norm() > layout.stationary_aperture_mm) {
        throw TraceMiss("ray misses the stationary mirror aperture", after_mems, "fold");
    }
    path += (after_fold.origin - after_mems.origin).norm();

    const auto& dp = layout.device_plane;
    const double denom = after_fold.direction.dot(dp.normal);
    if (std::abs(denom) <= kGrazing) {
        throw TraceMiss("ray is parallel to the device plane", after_fold, "device");
    }
    const double t = (dp.point - after_fold.origin).dot(dp.normal) / denom;
    if (!(t > 0.0)) {
        throw TraceMiss("device plane lies behind the ray", after_fold, "device");
    }
    TracedPath result;
    result.hit_point = after_fold.origin + t * after_fold.direction;
    const Vec3 rel = result.hit_point - dp.point;
    result.position_mm = Vec2(rel.dot(dp.basis_u), rel.dot(dp.basis_v));
    result.path_length_mm = path + t;
    if (std::abs(result.position_mm.x()) > dp.half_size_mm || std::abs(result.position_mm.y()) > dp.half_size_mm) {
        throw TraceMiss("ray lands outside the device plane", after_fold, "device");
    }
    return result;
}

Vec2 trace_to_device(const steering::MirrorPose& pose, const OpticalLayout& layout) {
    return trace_path(pose, layout).position_mm;
}

Vec2 trace_command(const steering::VoltageCoord& v, const steering::ElectricalConfig& electrical,
                   const OpticalLayout& layout) {
    return trace_to_device(steering::command_to_tilt(v, electrical), layout);
}

ScanExtent scan_extent(const OpticalLayout& layout, const steering::ElectricalConfig& electrical, std::size_t n) {
    if (n < 2) {
        throw ValidationError("scan_extent needs n >= 2");
    }
    ScanExtent box;
    bool any = false;
    for (std::size_t iy = 0; iy < n; ++iy) {
        const double vy = -1.0 + 2.0 * static_cast<double>(iy) / static_cast<double>(n - 1);
        for (std::size_t ix = 0; ix < n; ++ix) {
            const double vx = -1.0 + 2.0 * static_cast<double>(ix) / static_cast<double>(n - 1);
            const steering::VoltageCoord v(vx, vy);
            Vec2 p;
            try {
                p = trace_command(v, electrical, layout);
            } catch (const MissError&) {
                box.misses.push_back(v);
                continue;
            }
            if (!any) {
                box.min_u = box.max_u = p.x();
                box.min_v = box.max_v = p.y();
                any = true;
            } else {
                box.min_u = std::min(box.min_u, p.x());
                box.max_u = std::max(box.max_u, p.x());
                box.min_v = std::min(box.min_v, p.y());
                box.max_v = std::max(box.max_v, p.y());
            }
        }
    }
    return box;
}

std::pair<double, double> derive_theta_max(const OpticalLayout& layout, steering::ElectricalConfig electrical,
                                           double target_mm, std::size_t n) {
    if (!(target_mm > 0.0)) {
        throw ValidationError("target extent must be > 0");
    }
    // Extent is close to proportional to the tilt range, so rescaling converges fast.
    for (int iter = 0; iter < 200; ++iter) {
        const ScanExtent box = scan_extent(layout, electrical, n);
        if (!box.misses.empty()) {
            throw MissError("scan grid leaves the optical train while deriving theta_max");
        }
        const double ru = target_mm / box.width();
        const double rv = target_mm / box.height();
        if (std::abs(ru - 1.0) < 1e-13 && std::abs(rv - 1.0) < 1e-13) {
            break;
        }
        electrical.theta_max_x_rad *= ru;
        electrical.theta_max_y_rad *= rv;
    }
    return {electrical.theta_max_x_rad, electrical.theta_max_y_rad};
}

double BeamSpot::mean_diameter_um() const {
    return 4.0 * std::sqrt(sigma_major_um * sigma_minor_um);
}

Eigen::Matrix2d BeamSpot::covariance_mm2() const {
    const double a = sigma_major_um * 1e-3;
    const double b = sigma_minor_um * 1e-3;
    const double c = std::cos(orientation_rad);
    const double s = std::sin(orientation_rad);
    Eigen::Matrix2d rot;
    rot << c, -s, s, c;
    return rot * Eigen::Vector2d(a * a, b * b).asDiagonal() * rot.transpose();
}

void BeamSpot::validate() const {
    if (!(sigma_minor_um > 0.0) || !(sigma_major_um >= sigma_minor_um)) {
        throw ValidationError("beam spot needs sigma_major >= sigma_minor > 0");
    }
    if (!(total_power_w >= 0.0)) {
        throw ValidationError("beam spot power must be >= 0");
    }
    if (!center_mm.allFinite()) {
        throw ValidationError("beam spot centre must be finite");
    }
}

void SpotModelConfig::validate() const {
    if (!(min_diameter_um > 0.0)) {
        throw ValidationError("spot.min_diameter_um must be > 0");
    }
    if (!(chromatic_slope_um_per_nm >= 0.0)) {
        throw ValidationError("spot.chromatic_slope_um_per_nm must be >= 0");
    }
    if (!(ellipticity >= 1.0)) {
        throw ValidationError("spot.ellipticity must be >= 1");
    }
    require_in_band(design_wavelength_nm);
}

void require_in_band(double wavelength_nm) {
    if (!(wavelength_nm >= kBandMinNm && wavelength_nm <= kBandMaxNm)) {
        throw ValidationError("wavelength " + std::to_string(wavelength_nm) + " nm outside the 180-2000 nm band");
    }
}

BeamSpot spot_profile(const Vec2& center_mm, double wavelength_nm, const SpotModelConfig& cfg, double power_w) {
    require_in_band(wavelength_nm);
    if (!(power_w >= 0.0)) {
        throw ValidationError("spot power must be >= 0");
    }
    const double diameter =
        cfg.min_diameter_um + cfg.chromatic_slope_um_per_nm * std::abs(wavelength_nm - cfg.design_wavelength_nm);
    const double sigma_mean = diameter / 4.0;
    const double root_e = std::sqrt(cfg.ellipticity);
    BeamSpot spot;
    spot.center_mm = center_mm;
    spot.sigma_major_um = sigma_mean * root_e;
    spot.sigma_minor_um = sigma_mean / root_e;
    spot.orientation_rad = cfg.orientation_rad;
    spot.total_power_w = power_w;
    spot.wavelength_nm = wavelength_nm;
    return spot;
}

double aperture_power(const BeamSpot& spot, const Vec2& hole_center_mm, double hole_radius_mm) {
    if (!(hole_radius_mm > 0.0)) {
        throw ValidationError("hole radius must be > 0");
    }
    spot.validate();
    if (spot.total_power_w == 0.0) {
        return 0.0;
    }
    const Vec2 mu = spot.center_mm - hole_center_mm;
    const double reach = kTailSigmas * spot.sigma_major_um * 1e-3;
    const double dist = mu.norm();
    if (dist > hole_radius_mm + reach) {
        return 0.0;
    }
    if (dist + reach < hole_radius_mm) {
        return spot.total_power_w;
    }

    const Eigen::Matrix2d cov = spot.covariance_mm2();
    const double sx = std::sqrt(cov(0, 0));
    const double slope = cov(0, 1) / cov(0, 0);
    const double sc = std::sqrt(std::max(cov(1, 1) - cov(0, 1) * slope, 1e-300));
    const double lo = std::max(-hole_radius_mm, mu.x() - kTailSigmas * sx);
    const double hi = std::min(hole_radius_mm, mu.x() + kTailSigmas * sx);
    if (!(hi > lo)) {
        return 0.0;
    }
    const double norm_x = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sx);

    // Outer integral over x = r sin(phi), which removes the square-root kink of
    // the chord at the rim; the y-slice is done in closed form with the
    // conditional Gaussian of y given x.
    auto integrand = [&](double phi) {
        const double x = hole_radius_mm * std::sin(phi);
        const double half_chord = hole_radius_mm * std::cos(phi);
        const double zx = (x - mu.x()) / sx;
        const double density = norm_x * std::exp(-0.5 * zx * zx);
        const double m = mu.y() + slope * (x - mu.x());
        const double a = (half_chord - m) / (std::numbers::sqrt2 * sc);
        const double b = (-half_chord - m) / (std::numbers::sqrt2 * sc);
        return density * 0.5 * (std::erf(a) - std::erf(b)) * half_chord;
    };
    const double phi_lo = std::asin(std::clamp(lo / hole_radius_mm, -1.0, 1.0));
    const double phi_hi = std::asin(std::clamp(hi / hole_radius_mm, -1.0, 1.0));
    double error = 0.0;
    const double fraction = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
        integrand, phi_lo, phi_hi, 15, 1e-10, &error);
    return spot.total_power_w * std::clamp(fraction, 0.0, 1.0);
}

}  // namespace cryoscan::optics
