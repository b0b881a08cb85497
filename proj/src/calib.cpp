#include "cryoscan/calib.hpp"

#include "cryoscan/errors.hpp"
#include "cryoscan/json_io.hpp"
#include "cryoscan/lsq.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <sstream>

namespace cryoscan::calib {

namespace {

double wrap_half_turn(double a) {
    while (a <= -std::numbers::pi / 2) a += std::numbers::pi;
    while (a > std::numbers::pi / 2) a -= std::numbers::pi;
    return a;
}

double median_of(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
    }
    return m;
}

// Background-subtracted working copy with bilinear sampling; outside is 0.
struct WorkImage {
    int w = 0;
    int h = 0;
    std::vector<double> v;

    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }

    // (x, y) in pixel units with pixel centres at integer + 0.5
    double sample(double x, double y) const {
        const double fx = x - 0.5;
        const double fy = y - 0.5;
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const double tx = fx - x0;
        const double ty = fy - y0;
        auto get = [&](int xi, int yi) { return (xi < 0 || yi < 0 || xi >= w || yi >= h) ? 0.0 : at(xi, yi); };
        return (1 - tx) * (1 - ty) * get(x0, y0) + tx * (1 - ty) * get(x0 + 1, y0) + (1 - tx) * ty * get(x0, y0 + 1) +
               tx * ty * get(x0 + 1, y0 + 1);
    }
};

struct Gauss1D {
    double offset = 0.0;
    double amplitude = 0.0;
    double center = 0.0;
    double sigma = 0.0;
    double residual_rms = 0.0;
    int iterations = 0;
};

Gauss1D fit_gauss_1d(const std::vector<double>& s, const std::vector<double>& y, double sigma0) {
    const auto n = static_cast<Eigen::Index>(s.size());
    lsq::Problem p;
    p.n_residuals = n;
    p.residuals = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double z = (s[i] - x[2]) / x[3];
            r[i] = x[0] + x[1] * std::exp(-0.5 * z * z) - y[i];
        }
    };
    p.jacobian = [&](const Eigen::VectorXd& x, Eigen::MatrixXd& j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double z = (s[i] - x[2]) / x[3];
            const double e = std::exp(-0.5 * z * z);
            j(i, 0) = 1.0;
            j(i, 1) = e;
            j(i, 2) = x[1] * e * z / x[3];
            j(i, 3) = x[1] * e * z * z / x[3];
        }
    };
    Eigen::VectorXd x0(4);
    x0 << 0.0, *std::max_element(y.begin(), y.end()), 0.0, sigma0;
    const lsq::Result res = lsq::solve(p, x0);
    if (!res.converged || !res.x.allFinite() || !(std::abs(res.x[3]) > 0.0) || !(res.x[1] > 0.0)) {
        throw FitError("spot profile fit did not converge (" + res.status + ")");
    }
    Gauss1D g;
    g.offset = res.x[0];
    g.amplitude = res.x[1];
    g.center = res.x[2];
    g.sigma = std::abs(res.x[3]);
    g.residual_rms = std::sqrt(2.0 * res.cost / static_cast<double>(n));
    g.iterations = res.iterations;
    return g;
}

}  // namespace

SpotFit fit_spot(const IntensityImage& img) {
    img.validate();
    if (img.width < 8 || img.height < 8) {
        throw FitError("spot fitting needs at least 8x8 pixels");
    }
    const double peak = *std::max_element(img.values.begin(), img.values.end());
    const double median = median_of(img.values);
    if (!(peak > 0.0) || !(peak > 5.0 * median)) {
        throw FitError("no dominant spot: peak is not above 5x the median");
    }
    std::size_t at_peak = 0;
    if (img.saturation_level) {
        for (double v : img.values) at_peak += v >= *img.saturation_level;
        if (at_peak >= 2) {
            throw FitError("saturated core: " + std::to_string(at_peak) + " pixels at the sensor limit");
        }
    } else {
        for (double v : img.values) at_peak += v >= peak * (1.0 - 1e-9);
        if (at_peak > 4) {
            throw FitError("clipped core: " + std::to_string(at_peak) + " pixels share the peak value");
        }
    }

    const int w = img.width;
    const int h = img.height;
    const int band = std::max(1, std::min(w, h) / 8);
    std::vector<double> border;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (x < band || y < band || x >= w - band || y >= h - band) border.push_back(img.at(x, y));
        }
    }
    const double background = median_of(border);

    WorkImage work{w, h, std::vector<double>(img.values.size())};
    std::size_t peak_index = 0;
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        // Left unclipped: clipping noise at zero raises the tails and narrows the fitted profile.
        work.v[i] = img.values[i] - background;
        if (work.v[i] > work.v[peak_index]) peak_index = i;
    }
    const double peak_w = work.v[peak_index];
    if (!(peak_w > 0.0)) {
        throw FitError("no signal above the border background");
    }

    // Region above 10% of peak, 8-connected to the peak pixel.
    constexpr double kFrac = 0.1;
    const double thr = kFrac * peak_w;
    std::vector<char> seen(work.v.size(), 0);
    std::queue<std::size_t> queue;
    queue.push(peak_index);
    seen[peak_index] = 1;
    double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
    while (!queue.empty()) {
        const std::size_t i = queue.front();
        queue.pop();
        const int x = static_cast<int>(i % static_cast<std::size_t>(w));
        const int y = static_cast<int>(i / static_cast<std::size_t>(w));
        const double wt = work.v[i];
        const double px = x + 0.5;
        const double py = y + 0.5;
        sw += wt;
        sx += wt * px;
        sy += wt * py;
        sxx += wt * px * px;
        syy += wt * py * py;
        sxy += wt * px * py;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int nx = x + dx;
                const int ny = y + dy;
                if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
                if (!seen[j] && work.v[j] > thr) {
                    seen[j] = 1;
                    queue.push(j);
                }
            }
        }
    }
    const double cx = sx / sw;
    const double cy = sy / sw;
    Eigen::Matrix2d cov;
    cov << sxx / sw - cx * cx, sxy / sw - cx * cy, sxy / sw - cx * cy, syy / sw - cy * cy;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
    const Eigen::Vector2d major = eig.eigenvectors().col(1);
    const Eigen::Vector2d minor(-major.y(), major.x());
    // Second moments of a Gaussian truncated at level kFrac shrink by k.
    const double c = 2.0 * std::log(1.0 / kFrac);
    const double k = 1.0 - (c / 2.0) * std::exp(-c / 2.0) / (1.0 - std::exp(-c / 2.0));
    const double sig_major0 = std::sqrt(std::max(eig.eigenvalues()[1], 0.25) / k);
    const double sig_minor0 = std::sqrt(std::max(eig.eigenvalues()[0], 0.25) / k);

    auto profile = [&](const Eigen::Vector2d& axis, const Eigen::Vector2d& across, double sig_along, double sig_across,
                       std::vector<double>& s_out, std::vector<double>& y_out) {
        constexpr double kStep = 0.5;
        const double reach = 5.0 * sig_along;
        const double half = 4.0 * sig_across;
        const int ns = static_cast<int>(std::ceil(reach / kStep));
        const int nt = static_cast<int>(std::ceil(half / kStep));
        for (int i = -ns; i <= ns; ++i) {
            const double s = i * kStep;
            double acc = 0.0;
            for (int j = -nt; j <= nt; ++j) {
                const double t = j * kStep;
                acc += work.sample(cx + s * axis.x() + t * across.x(), cy + s * axis.y() + t * across.y());
            }
            s_out.push_back(s);
            y_out.push_back(acc * kStep);
        }
    };

    std::vector<double> s1, y1, s2, y2;
    profile(major, minor, sig_major0, sig_minor0, s1, y1);
    profile(minor, major, sig_minor0, sig_major0, s2, y2);
    const Gauss1D g1 = fit_gauss_1d(s1, y1, sig_major0);
    const Gauss1D g2 = fit_gauss_1d(s2, y2, sig_minor0);

    const double pitch = img.pixel_pitch_um;
    const Eigen::Vector2d center_px = Eigen::Vector2d(cx, cy) + g1.center * major + g2.center * minor;

    SpotFit out;
    out.background = background;
    out.iterations = g1.iterations + g2.iterations;
    out.residual_rms_major = g1.residual_rms;
    out.residual_rms_minor = g2.residual_rms;
    out.spot.center_mm = center_px * pitch * 1e-3;
    double orientation = std::atan2(major.y(), major.x());
    double sa = g1.sigma * pitch;
    double sb = g2.sigma * pitch;
    if (sb > sa) {
        std::swap(sa, sb);
        orientation += std::numbers::pi / 2;
    }
    out.spot.sigma_major_um = sa;
    out.spot.sigma_minor_um = sb;
    out.spot.orientation_rad = wrap_half_turn(orientation);
    out.spot.total_power_w = std::accumulate(work.v.begin(), work.v.end(), 0.0);
    return out;
}

BlobSet detect_holes(const scan::ResponseMap& map, double threshold_frac) {
    if (!(threshold_frac > 0.0 && threshold_frac < 1.0)) {
        throw ValidationError("threshold_frac must lie in (0, 1)");
    }
    if (map.plan.kind != scan::PlanKind::grid) {
        throw ValidationError("hole detection needs a grid map");
    }
    const std::size_t nx = map.plan.nx;
    const std::size_t ny = map.plan.ny;
    std::vector<double> delta(nx * ny, std::numeric_limits<double>::quiet_NaN());
    std::vector<VoltageCoord> where(nx * ny);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& s : map.samples) {
        const std::size_t i = s.iy * nx + s.ix;
        delta[i] = s.delta;
        where[i] = s.v;
        lo = std::min(lo, s.delta);
        hi = std::max(hi, s.delta);
    }
    BlobSet blobs;
    if (!(hi > lo)) {
        return blobs;
    }
    const double thr = lo + threshold_frac * (hi - lo);
    std::vector<char> seen(delta.size(), 0);
    for (std::size_t start = 0; start < delta.size(); ++start) {
        if (seen[start] || !(delta[start] > thr)) continue;
        std::vector<std::size_t> members;
        std::queue<std::size_t> queue;
        queue.push(start);
        seen[start] = 1;
        while (!queue.empty()) {
            const std::size_t i = queue.front();
            queue.pop();
            members.push_back(i);
            const std::size_t x = i % nx;
            const std::size_t y = i / nx;
            const std::size_t nbr[4] = {x > 0 ? i - 1 : i, x + 1 < nx ? i + 1 : i, y > 0 ? i - nx : i,
                                        y + 1 < ny ? i + nx : i};
            for (std::size_t j : nbr) {
                if (j != i && !seen[j] && delta[j] > thr) {
                    seen[j] = 1;
                    queue.push(j);
                }
            }
        }
        Blob b;
        Eigen::Vector2d c = Eigen::Vector2d::Zero();
        for (std::size_t i : members) {
            const double wt = delta[i] - lo;
            b.weight += wt;
            c += wt * Eigen::Vector2d(where[i].vx(), where[i].vy());
        }
        c /= b.weight;
        for (std::size_t i : members) {
            const double wt = delta[i] - lo;
            const Eigen::Vector2d d = Eigen::Vector2d(where[i].vx(), where[i].vy()) - c;
            b.second_moments += wt * d * d.transpose();
        }
        b.second_moments /= b.weight;
        b.centroid = VoltageCoord::clamped(c.x(), c.y());
        b.pixel_count = members.size();
        blobs.push_back(b);
    }
    return blobs;
}

DistortionMetrics distortion_metrics(const Blob& blob, const device::Hole& true_hole) {
    if (!(true_hole.radius_mm > 0.0)) {
        throw ValidationError("reference hole needs radius > 0");
    }
    if (blob.pixel_count < 2) {
        throw FitError("blob moments undefined for fewer than 2 pixels");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(blob.second_moments);
    const double l1 = eig.eigenvalues()[1];
    const double l2 = std::max(eig.eigenvalues()[0], 0.0);
    if (!(l1 > 0.0)) {
        throw FitError("blob moments are degenerate");
    }
    DistortionMetrics m;
    m.eccentricity = std::sqrt(1.0 - l2 / l1);
    const Eigen::Vector2d axis = eig.eigenvectors().col(1);
    m.elongation_axis_rad = wrap_half_turn(std::atan2(axis.y(), axis.x()));
    m.aspect_ratio = l2 > 0.0 ? std::sqrt(l1 / l2) : std::numeric_limits<double>::infinity();
    m.reference_eccentricity = 0.0;
    return m;
}

namespace {

// Saturation law parametrized by s = kappa^2, continued to s < 0 as
// tan(k v) / tan(k) so the fit can cross s = 0 smoothly.
double g_of_s(double v, double s) {
    if (s >= 0.0) {
        return steering::saturation(v, std::sqrt(s));
    }
    const double k = std::sqrt(-s);
    if (k < 1e-4) {
        return v + (s / 3.0) * (v - v * v * v);
    }
    if (k >= 1.5) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return std::tan(k * v) / std::tan(k);
}

double dg_ds(double v, double s) {
    const double h = 1e-6 * std::max(1.0, std::abs(s));
    return (g_of_s(v, s + h) - g_of_s(v, s - h)) / (2.0 * h);
}

std::vector<std::pair<std::size_t, std::size_t>> mutual_nearest(const std::vector<Vec2>& a, const std::vector<Vec2>& b,
                                                                double gate) {
    std::vector<std::size_t> best_b(a.size()), best_a(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < b.size(); ++j) {
            const double dj = (a[i] - b[j]).squaredNorm();
            if (dj < d) {
                d = dj;
                best_b[i] = j;
            }
        }
    }
    for (std::size_t j = 0; j < b.size(); ++j) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double di = (a[i] - b[j]).squaredNorm();
            if (di < d) {
                d = di;
                best_a[j] = i;
            }
        }
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t j = best_b[i];
        if (best_a[j] == i && (a[i] - b[j]).norm() <= gate) out.emplace_back(i, j);
    }
    return out;
}

bool collinear(const std::vector<Vec2>& pts) {
    Vec2 mean = Vec2::Zero();
    for (const auto& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    Eigen::Matrix2d c = Eigen::Matrix2d::Zero();
    for (const auto& p : pts) c += (p - mean) * (p - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(c);
    return !(eig.eigenvalues()[1] > 0.0) || eig.eigenvalues()[0] / eig.eigenvalues()[1] < 1e-6;
}

struct Candidate {
    double cost = std::numeric_limits<double>::infinity();
    std::vector<std::pair<std::size_t, std::size_t>> matches;
};

}  // namespace

MappingFit fit_mapping_detailed(const BlobSet& blobs, const std::vector<Vec2>& known_holes_mm,
                                const MappingFitOptions& options) {
    if (blobs.size() < 3 || known_holes_mm.size() < 3) {
        throw CalibrationError("mapping fit needs at least 3 blobs and 3 known holes");
    }
    if (!(options.residual_gate_mm > 0.0)) {
        throw ValidationError("residual gate must be > 0");
    }
    std::vector<Vec2> pv;
    for (const auto& b : blobs) pv.emplace_back(b.centroid.vx(), b.centroid.vy());
    const std::vector<Vec2>& q = known_holes_mm;
    if (collinear(pv) || collinear(q)) {
        throw CalibrationError("degenerate correspondences: points are collinear");
    }

    auto centred = [](const std::vector<Vec2>& pts, Vec2& mean, double& rms) {
        mean = Vec2::Zero();
        for (const auto& p : pts) mean += p;
        mean /= static_cast<double>(pts.size());
        rms = 0.0;
        for (const auto& p : pts) rms += (p - mean).squaredNorm();
        rms = std::sqrt(rms / static_cast<double>(pts.size()));
    };
    Vec2 pm, qm;
    double pr = 0.0, qr = 0.0;
    centred(pv, pm, pr);
    centred(q, qm, qr);

    double spacing = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < q.size(); ++i) {
        for (std::size_t j = i + 1; j < q.size(); ++j) spacing = std::min(spacing, (q[i] - q[j]).norm());
    }
    if (!(spacing > 0.0)) {
        throw CalibrationError("known holes must be distinct");
    }
    const double gate = 0.35 * spacing;

    // Coarse rotation search under a similarity initialization.
    constexpr double kStep = 0.25 * std::numbers::pi / 180.0;
    const int n_rot = static_cast<int>(std::floor(options.max_rotation_rad / kStep));
    std::vector<Candidate> candidates;
    for (int reflect = 0; reflect <= (options.allow_reflection ? 1 : 0); ++reflect) {
        for (int i = -n_rot; i <= n_rot; ++i) {
            const double th = i * kStep;
            Eigen::Matrix2d r = Eigen::Rotation2Dd(th).toRotationMatrix();
            if (reflect) r = r * Eigen::Vector2d(1.0, -1.0).asDiagonal();
            std::vector<Vec2> x;
            for (const auto& p : pv) x.push_back(r * (p - pm) * (qr / pr) + qm);
            Candidate c;
            c.matches = mutual_nearest(x, q, gate);
            c.cost = 0.0;
            for (const auto& [a, b] : c.matches) c.cost += (x[a] - q[b]).squaredNorm();
            c.cost += gate * gate * static_cast<double>(std::min(pv.size(), q.size()) - c.matches.size());
            candidates.push_back(std::move(c));
        }
    }
    const auto best_it = std::min_element(candidates.begin(), candidates.end(),
                                          [](const Candidate& a, const Candidate& b) { return a.cost < b.cost; });
    for (const auto& c : candidates) {
        if (c.matches != best_it->matches && c.cost <= best_it->cost * 1.05 + 1e-12 * gate * gate) {
            throw CalibrationError("ambiguous blob-to-hole correspondence");
        }
    }
    auto matches = best_it->matches;

    // Refine with a full similarity fit and re-match until stable.
    Eigen::Matrix3d t = Eigen::Matrix3d::Identity();
    for (int iter = 0; iter < 20; ++iter) {
        if (matches.size() < 3) {
            throw CalibrationError("only " + std::to_string(matches.size()) + " blob-to-hole matches found");
        }
        Eigen::Matrix2Xd src(2, static_cast<Eigen::Index>(matches.size()));
        Eigen::Matrix2Xd dst(2, static_cast<Eigen::Index>(matches.size()));
        for (std::size_t k = 0; k < matches.size(); ++k) {
            src.col(static_cast<Eigen::Index>(k)) = pv[matches[k].first];
            dst.col(static_cast<Eigen::Index>(k)) = q[matches[k].second];
        }
        t = Eigen::umeyama(src, dst, true);
        std::vector<Vec2> x;
        for (const auto& p : pv) x.push_back(t.topLeftCorner<2, 2>() * p + t.topRightCorner<2, 1>());
        auto next = mutual_nearest(x, q, gate);
        if (next == matches) break;
        matches = std::move(next);
    }
    std::vector<Vec2> mp, mq;
    for (const auto& [a, b] : matches) {
        mp.push_back(pv[a]);
        mq.push_back(q[b]);
    }
    if (matches.size() < 3 || collinear(mp) || collinear(mq)) {
        throw CalibrationError("degenerate correspondences: need 3 non-collinear matches");
    }

    const bool fit_kappa = matches.size() >= 5;
    const auto m = static_cast<Eigen::Index>(matches.size());
    auto run = [&](bool with_kappa, const Eigen::VectorXd& x0) {
        lsq::Problem p;
        p.n_residuals = 2 * m;
        p.residuals = [&, with_kappa](const Eigen::VectorXd& x, Eigen::VectorXd& r) {
            const double sx = with_kappa ? x[6] : 0.0;
            const double sy = with_kappa ? x[7] : 0.0;
            for (Eigen::Index i = 0; i < m; ++i) {
                const double gx = g_of_s(mp[i].x(), sx);
                const double gy = g_of_s(mp[i].y(), sy);
                r[2 * i] = x[0] * gx + x[1] * gy + x[4] - mq[i].x();
                r[2 * i + 1] = x[2] * gx + x[3] * gy + x[5] - mq[i].y();
            }
        };
        p.jacobian = [&, with_kappa](const Eigen::VectorXd& x, Eigen::MatrixXd& j) {
            j.setZero();
            const double sx = with_kappa ? x[6] : 0.0;
            const double sy = with_kappa ? x[7] : 0.0;
            for (Eigen::Index i = 0; i < m; ++i) {
                const double gx = g_of_s(mp[i].x(), sx);
                const double gy = g_of_s(mp[i].y(), sy);
                j(2 * i, 0) = gx;
                j(2 * i, 1) = gy;
                j(2 * i, 4) = 1.0;
                j(2 * i + 1, 2) = gx;
                j(2 * i + 1, 3) = gy;
                j(2 * i + 1, 5) = 1.0;
                if (with_kappa) {
                    const double dx = dg_ds(mp[i].x(), sx);
                    const double dy = dg_ds(mp[i].y(), sy);
                    j(2 * i, 6) = x[0] * dx;
                    j(2 * i, 7) = x[1] * dy;
                    j(2 * i + 1, 6) = x[2] * dx;
                    j(2 * i + 1, 7) = x[3] * dy;
                }
            }
        };
        return lsq::solve(p, x0);
    };

    Eigen::VectorXd x0(fit_kappa ? 8 : 6);
    x0.head<4>() << t(0, 0), t(0, 1), t(1, 0), t(1, 1);
    x0[4] = t(0, 2);
    x0[5] = t(1, 2);
    if (fit_kappa) x0.tail<2>().setZero();
    lsq::Result res = run(fit_kappa, x0);
    bool kappa_fitted = fit_kappa;
    if (fit_kappa && (res.x[6] < 0.0 || res.x[7] < 0.0)) {
        // Negative curvature is outside the model family; clamp that axis to linear.
        Eigen::VectorXd x1 = res.x;
        x1[6] = std::max(x1[6], 0.0);
        x1[7] = std::max(x1[7], 0.0);
        if (x1[6] == 0.0 && x1[7] == 0.0) {
            res = run(false, x1.head<6>());
            kappa_fitted = false;
        } else {
            res.x = x1;
        }
    }
    if (!res.x.allFinite()) {
        throw CalibrationError("mapping fit diverged (" + res.status + ")");
    }

    MappingFit fit;
    fit.kappa_fitted = kappa_fitted;
    fit.iterations = res.iterations;
    MappingModel& model = fit.model;
    model.affine << res.x[0], res.x[1], res.x[2], res.x[3];
    model.offset << res.x[4], res.x[5];
    if (kappa_fitted) {
        model.kappa_x = std::sqrt(res.x[6]);
        model.kappa_y = std::sqrt(res.x[7]);
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < matches.size(); ++k) {
        const double r = (model.predict(mp[k].x(), mp[k].y()) - mq[k]).norm();
        fit.matches.push_back(Correspondence{matches[k].first, matches[k].second, r});
        acc += r * r;
    }
    model.residual_rms_mm = std::sqrt(acc / static_cast<double>(matches.size()));
    if (std::abs(model.affine.determinant()) <= 1e-9) {
        throw CalibrationError("fitted affine part is singular");
    }
    if (model.residual_rms_mm > options.residual_gate_mm) {
        std::ostringstream msg;
        msg << "mapping residual " << model.residual_rms_mm * 1e3 << " um exceeds the "
            << options.residual_gate_mm * 1e3 << " um gate;";
        for (const auto& c : fit.matches) {
            msg << " blob " << c.blob << "->hole " << c.hole << ": " << c.residual_mm * 1e3 << " um;";
        }
        throw CalibrationError(msg.str());
    }
    return fit;
}

MappingModel fit_mapping(const BlobSet& blobs, const std::vector<Vec2>& known_holes_mm,
                         const MappingFitOptions& options) {
    return fit_mapping_detailed(blobs, known_holes_mm, options).model;
}

Vec2 MappingModel::predict(double vx, double vy) const {
    const Eigen::Vector2d g(steering::saturation(vx, kappa_x), steering::saturation(vy, kappa_y));
    return affine * g + offset;
}

Vec2 MappingModel::predict(const VoltageCoord& v) const { return predict(v.vx(), v.vy()); }

Eigen::Matrix2d MappingModel::jacobian(double vx, double vy) const {
    return affine * Eigen::Vector2d(steering::saturation_slope(vx, kappa_x), steering::saturation_slope(vy, kappa_y))
                        .asDiagonal();
}

void MappingModel::validate() const {
    if (!affine.allFinite() || !offset.allFinite()) {
        throw ValidationError("mapping model must be finite");
    }
    if (!(std::abs(affine.determinant()) > 1e-9)) {
        throw ValidationError("mapping affine part must be invertible (|det| > 1e-9)");
    }
    if (!(kappa_x >= 0.0) || !(kappa_y >= 0.0) || !std::isfinite(kappa_x) || !std::isfinite(kappa_y)) {
        throw ValidationError("mapping kappa must be finite and >= 0");
    }
    if (!(residual_rms_mm >= 0.0)) {
        throw ValidationError("mapping residual must be >= 0");
    }
}

namespace {

constexpr const char* kModelFormat = "cryoscan-mapping/1";

}  // namespace

std::string mapping_to_json(const MappingModel& model) {
    model.validate();
    jsonio::Json j;
    j["format"] = kModelFormat;
    j["affine"] = {model.affine(0, 0), model.affine(0, 1), model.affine(1, 0), model.affine(1, 1)};
    j["offset_mm"] = {model.offset.x(), model.offset.y()};
    j["kappa"] = {model.kappa_x, model.kappa_y};
    j["residual_rms_mm"] = model.residual_rms_mm;
    j["provenance"] = model.provenance;
    return j.dump(2) + "\n";
}

MappingModel mapping_from_json(std::string_view text, const std::string& source) {
    const jsonio::Json j = jsonio::parse(text, source);
    jsonio::ObjectReader r(j, "");
    const auto format = r.require<std::string>("format");
    if (format != kModelFormat) {
        throw ValidationError("format: expected '" + std::string(kModelFormat) + "'");
    }
    std::vector<double> affine, offset, kappa;
    r.get("affine", affine);
    r.get("offset_mm", offset);
    r.get("kappa", kappa);
    if (affine.size() != 4) throw ValidationError("affine: expected 4 numbers (row-major)");
    if (offset.size() != 2) throw ValidationError("offset_mm: expected 2 numbers");
    if (kappa.size() != 2) throw ValidationError("kappa: expected 2 numbers");
    MappingModel m;
    m.affine << affine[0], affine[1], affine[2], affine[3];
    m.offset << offset[0], offset[1];
    m.kappa_x = kappa[0];
    m.kappa_y = kappa[1];
    r.get("residual_rms_mm", m.residual_rms_mm);
    r.get("provenance", m.provenance);
    r.finish();
    m.validate();
    return m;
}

void save_mapping(const MappingModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write model file " + path.string());
    }
    out << mapping_to_json(model);
}

MappingModel load_mapping(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open model file " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return mapping_from_json(buffer.str(), path.string());
}

VoltageCoord invert_mapping(const MappingModel& model, const Vec2& target_mm) {
    model.validate();
    if (!target_mm.allFinite()) {
        throw ValidationError("target must be finite");
    }
    const Eigen::Matrix2d a_inv = model.affine.inverse();
    const Eigen::Vector2d d = target_mm - model.offset;
    const Eigen::Vector2d u = a_inv * d;
    constexpr double kSlack = 1e-12;

    if (std::abs(u.x()) > 1.0 + kSlack || std::abs(u.y()) > 1.0 + kSlack) {
        // Closest point of the reachable parallelogram, searched over its edges.
        Eigen::Vector2d best_u = u;
        double best = std::numeric_limits<double>::infinity();
        for (int axis = 0; axis < 2; ++axis) {
            for (double side : {-1.0, 1.0}) {
                const int other = 1 - axis;
                const Eigen::Vector2d fixed_col = model.affine.col(axis);
                const Eigen::Vector2d free_col = model.affine.col(other);
                const double t = std::clamp(free_col.dot(d - side * fixed_col) / free_col.squaredNorm(), -1.0, 1.0);
                Eigen::Vector2d cand;
                cand[axis] = side;
                cand[other] = t;
                const double err = (model.affine * cand - d).norm();
                if (err < best) {
                    best = err;
                    best_u = cand;
                }
            }
        }
        const double nvx = steering::inverse_saturation(best_u.x(), model.kappa_x);
        const double nvy = steering::inverse_saturation(best_u.y(), model.kappa_y);
        const Vec2 nearest = model.predict(nvx, nvy);
        std::ostringstream msg;
        msg << "target (" << target_mm.x() << ", " << target_mm.y() << ") mm is outside the reachable extent; nearest ("
            << nearest.x() << ", " << nearest.y() << ") mm";
        throw OutOfRangeError(msg.str(), nvx, nvy);
    }

    // Damped Newton from the affine inverse.
    Eigen::Vector2d v = u.cwiseMax(-1.0).cwiseMin(1.0);
    Eigen::Vector2d r = model.predict(v.x(), v.y()) - target_mm;
    for (int iter = 0; iter < 100 && r.norm() > 1e-10; ++iter) {
        const Eigen::Matrix2d j = model.jacobian(v.x(), v.y());
        const Eigen::Vector2d step = j.fullPivLu().solve(r);
        double lambda = 1.0;
        bool improved = false;
        while (lambda > 1e-8) {
            const Eigen::Vector2d trial = (v - lambda * step).cwiseMax(-1.0).cwiseMin(1.0);
            const Eigen::Vector2d tr = model.predict(trial.x(), trial.y()) - target_mm;
            if (tr.norm() < r.norm()) {
                v = trial;
                r = tr;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!improved) break;
    }
    if (!(r.norm() < 1e-3)) {
        throw FitError("mapping inversion did not converge below 1 um");
    }
    return VoltageCoord(v.x(), v.y());
}

}  // namespace cryoscan::calib
