#include "mvlab/parametrix.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "mvlab/io.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/quadrature.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

namespace {

constexpr int kMaxDim = 3;
constexpr int kMaxBrownian = 8;

struct SmallMat {
    int d = 1;
    std::array<double, 9> v{};
    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * d + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * d + j]; }
};

SmallMat small_from(const Mat& m) {
    SmallMat s;
    s.d = m.rows;
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) s.at(i, j) = m(i, j);
    return s;
}

// Closed-form inverse and determinant, d <= 3.
bool invert_small(const SmallMat& a, SmallMat& inv, double& det) {
    inv.d = a.d;
    switch (a.d) {
    case 1:
        det = a.v[0];
        if (det <= 0.0 || !std::isfinite(det)) return false;
        inv.v[0] = 1.0 / det;
        return true;
    case 2: {
        det = a.at(0, 0) * a.at(1, 1) - a.at(0, 1) * a.at(1, 0);
        if (det <= 0.0 || !std::isfinite(det)) return false;
        const double id = 1.0 / det;
        inv.at(0, 0) = a.at(1, 1) * id;
        inv.at(1, 1) = a.at(0, 0) * id;
        inv.at(0, 1) = -a.at(0, 1) * id;
        inv.at(1, 0) = -a.at(1, 0) * id;
        return true;
    }
    case 3: {
        const double c00 = a.at(1, 1) * a.at(2, 2) - a.at(1, 2) * a.at(2, 1);
        const double c01 = a.at(1, 2) * a.at(2, 0) - a.at(1, 0) * a.at(2, 2);
        const double c02 = a.at(1, 0) * a.at(2, 1) - a.at(1, 1) * a.at(2, 0);
        det = a.at(0, 0) * c00 + a.at(0, 1) * c01 + a.at(0, 2) * c02;
        if (det <= 0.0 || !std::isfinite(det)) return false;
        const double id = 1.0 / det;
        inv.at(0, 0) = c00 * id;
        inv.at(1, 0) = c01 * id;
        inv.at(2, 0) = c02 * id;
        inv.at(0, 1) = (a.at(0, 2) * a.at(2, 1) - a.at(0, 1) * a.at(2, 2)) * id;
        inv.at(1, 1) = (a.at(0, 0) * a.at(2, 2) - a.at(0, 2) * a.at(2, 0)) * id;
        inv.at(2, 1) = (a.at(0, 1) * a.at(2, 0) - a.at(0, 0) * a.at(2, 1)) * id;
        inv.at(0, 2) = (a.at(0, 1) * a.at(1, 2) - a.at(0, 2) * a.at(1, 1)) * id;
        inv.at(1, 2) = (a.at(0, 2) * a.at(1, 0) - a.at(0, 0) * a.at(1, 2)) * id;
        inv.at(2, 2) = (a.at(0, 0) * a.at(1, 1) - a.at(0, 1) * a.at(1, 0)) * id;
        return true;
    }
    default:
        return false;
    }
}

struct GaussKernel {
    int d = 1;
    SmallMat inv;
    double norm = 0.0; // (2 pi)^{-d/2} det^{-1/2}

    double density(const double* x, const double* y) const {
        double diff[kMaxDim];
        for (int i = 0; i < d; ++i) diff[i] = y[i] - x[i];
        double q = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) q += diff[i] * inv.at(i, j) * diff[j];
        return norm * std::exp(-0.5 * q);
    }
    // gradient in the backward variable x: a^{-1}(y-x) p
    void grad_backward(const double* x, const double* y, double* g) const {
        const double p = density(x, y);
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += inv.at(i, j) * (y[j] - x[j]);
            g[i] = s * p;
        }
    }
    // Hessian in x: p ( {a^{-1}(y-x)} (x) {a^{-1}(y-x)} - a^{-1} )
    void hess_backward(const double* x, const double* y, double* h) const {
        const double p = density(x, y);
        double u[kMaxDim];
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += inv.at(i, j) * (y[j] - x[j]);
            u[i] = s;
        }
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                h[static_cast<std::size_t>(i) * d + j] = p * (u[i] * u[j] - inv.at(i, j));
    }
};

GaussKernel make_gauss(const SmallMat& a) {
    GaussKernel g;
    g.d = a.d;
    double det = 0.0;
    require(invert_small(a, g.inv, det), "degenerate-covariance",
            "accumulated covariance is numerically singular");
    g.norm = std::pow(2.0 * M_PI, -0.5 * a.d) / std::sqrt(det);
    return g;
}

SmallMat sigma_gram(const CoefficientSet& c, double t, const double* x,
                    const EmpiricalMeasure& mu) {
    const int d = c.dim, m = c.brownian_dim;
    std::array<double, kMaxDim * kMaxBrownian> buf{};
    c.diffusion(t, {x, static_cast<std::size_t>(d)}, mu, MatView{buf.data(), d, m});
    SmallMat g;
    g.d = d;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int k = 0; k < m; ++k)
                s += buf[static_cast<std::size_t>(i) * m + k] * buf[static_cast<std::size_t>(j) * m + k];
            g.at(i, j) = g.at(j, i) = s;
        }
    return g;
}

// int_r^u (sigma sigma*)(z, Phi_v) dv. When sigma ignores its state argument
// the cumulative table over one fixed fine partition makes every lookup O(1);
// otherwise each query integrates directly.
class CovarianceField {
public:
    CovarianceField(const CoefficientSet& c, const MeasureFlow& phi, double s, double t,
                    int panels)
        : c_(&c), phi_(&phi), s_(s), t_(t), panels_(std::max(8, panels)),
          fast_(c.sigma_state_independent) {
        require(phi.times().front() <= s + 1e-12, "incompatible-flows",
                "phi flow does not cover the requested interval");
        if (fast_) {
            cum_.resize(panels_ + 1);
            cum_[0].d = c_->dim;
            const double h = (t_ - s_) / panels_;
            const double off = 0.5 * h / std::sqrt(3.0);
            double zero[kMaxDim] = {0, 0, 0};
            for (int k = 0; k < panels_; ++k) {
                const double mid = s_ + (k + 0.5) * h;
                SmallMat g1 = sigma_gram(*c_, mid - off, zero, phi_->at_left(mid - off));
                SmallMat g2 = sigma_gram(*c_, mid + off, zero, phi_->at_left(mid + off));
                cum_[k + 1] = cum_[k];
                cum_[k + 1].d = c_->dim;
                for (int i = 0; i < c_->dim * c_->dim; ++i)
                    cum_[k + 1].v[i] += 0.5 * h * (g1.v[i] + g2.v[i]);
            }
        }
    }

    SmallMat between(const double* z, double r, double u) const {
        require(u > r, "invalid-parameter", "covariance needs u > r");
        if (fast_) {
            SmallMat hi = cumulative(u), lo = cumulative(r);
            SmallMat out;
            out.d = c_->dim;
            for (int i = 0; i < c_->dim * c_->dim; ++i) out.v[i] = hi.v[i] - lo.v[i];
            return out;
        }
        // Direct quadrature for state-dependent sigma. The H-kernel callers
        // need the covariance to ~1e-4 relative only, so the panel count is
        // capped; the public freeze_covariance keeps its own n_quad.
        const int n = std::clamp(static_cast<int>(std::ceil(panels_ * (u - r) / (t_ - s_))), 4, 24);
        const double h = (u - r) / n;
        const double off = 0.5 * h / std::sqrt(3.0);
        SmallMat out;
        out.d = c_->dim;
        for (int k = 0; k < n; ++k) {
            const double mid = r + (k + 0.5) * h;
            SmallMat g1 = sigma_gram(*c_, mid - off, z, phi_->at_left(mid - off));
            SmallMat g2 = sigma_gram(*c_, mid + off, z, phi_->at_left(mid + off));
            for (int i = 0; i < c_->dim * c_->dim; ++i) out.v[i] += 0.5 * h * (g1.v[i] + g2.v[i]);
        }
        return out;
    }

private:
    SmallMat cumulative(double v) const {
        const double pos = std::clamp((v - s_) / (t_ - s_), 0.0, 1.0) * panels_;
        const int j = std::min(static_cast<int>(pos), panels_ - 1);
        const double frac = pos - j;
        SmallMat out = cum_[j];
        for (int i = 0; i < c_->dim * c_->dim; ++i)
            out.v[i] += frac * (cum_[j + 1].v[i] - cum_[j].v[i]);
        return out;
    }

    const CoefficientSet* c_;
    const MeasureFlow* phi_;
    double s_, t_;
    int panels_;
    bool fast_;
    std::vector<SmallMat> cum_;
};

double ref_kernel_raw(double Kc, double dt, const double* x, const double* y, int d) {
    double q = 0.0;
    for (int i = 0; i < d; ++i) q += (y[i] - x[i]) * (y[i] - x[i]);
    return std::exp(-q / (4.0 * Kc * dt)) / std::pow(4.0 * Kc * M_PI * dt, 0.5 * d);
}

struct HContext {
    const CoefficientSet* coeffs = nullptr;
    const MeasureFlow* mu_flow = nullptr;
    const MeasureFlow* phi_flow = nullptr;
    const CovarianceField* cov = nullptr;
};

// Correction kernel H_{r,t}(y,z). Drift pairs with the backward gradient of
// the kernel frozen at z; the trace term vanishes identically for
// state-independent sigma.
double h1(const HContext& hc, double r, double t, const double* y, const double* z) {
    const int d = hc.coeffs->dim;
    const GaussKernel G = make_gauss(hc.cov->between(z, r, t));
    double grad[kMaxDim];
    G.grad_backward(y, z, grad);

    const EmpiricalMeasure& mu_r = hc.mu_flow->at_left(r);
    double b[kMaxDim];
    hc.coeffs->drift(r, {y, static_cast<std::size_t>(d)}, mu_r,
                     {b, static_cast<std::size_t>(d)});
    double out = 0.0;
    for (int i = 0; i < d; ++i) out += b[i] * grad[i];

    if (!hc.coeffs->sigma_state_independent) {
        const EmpiricalMeasure& phi_r = hc.phi_flow->at_left(r);
        const SmallMat ay = sigma_gram(*hc.coeffs, r, y, phi_r);
        const SmallMat az = sigma_gram(*hc.coeffs, r, z, phi_r);
        double hess[kMaxDim * kMaxDim];
        G.hess_backward(y, z, hess);
        double tr = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                tr += (ay.at(i, j) - az.at(i, j)) * hess[static_cast<std::size_t>(j) * d + i];
        out += 0.5 * tr;
    }
    return out;
}

// Tables of the singularity-normalized iterated kernels
//   T_m(tau, eta) = H^m_{u,t}(y,z) / [ (t-u)^{-1/2+delta(m-1)} p~^{2K}_{u,t}(y,z) ],
// with u = t - (t-s) tau^2 and y = z + sqrt(K (t-u)) eta (per axis).
class HmEvaluator {
public:
    HmEvaluator(const HContext& hc, double s, double t, const Vec& z, double delta,
                const KernelGrid& g)
        : hc_(hc), s_(s), t_(t), z_(z), delta_(delta), g_(g), d_(hc.coeffs->dim),
          xi_(gauss_legendre_on(g.space_nodes, -g.space_radius, g.space_radius)) {
        n_cols_ = 1;
        for (int k = 0; k < d_; ++k) n_cols_ *= g_.table_space_nodes;
    }

    // Build tables up to level m_max (inclusive); levels start at 2.
    void build(int m_max) {
        for (int m = 2; m <= m_max; ++m) {
            std::vector<double> table(static_cast<std::size_t>(g_.table_time_nodes) * n_cols_);
            parallel::parallel_for(static_cast<std::int64_t>(table.size()), [&](std::int64_t e) {
                const int j = static_cast<int>(e / n_cols_);
                const int col = static_cast<int>(e % n_cols_);
                const double tau = tau_of(j);
                const double u = t_ - (t_ - s_) * tau * tau;
                double y[kMaxDim];
                eta_point(col, u, y);
                const double raw = convolve(m, u, y);
                table[static_cast<std::size_t>(e)] = raw / norm_factor(m, u, y);
            });
            tables_.push_back(std::move(table));
        }
    }

    // H^m_{u,t}(y, z); m=1 direct, higher levels from the tables with
    // Catmull-Rom (cubic) interpolation along tau and each eta axis.
    double eval(int m, double u, const double* y) const {
        if (m == 1) return h1(hc_, u, t_, y, z_.data());
        const std::vector<double>& tab = tables_[static_cast<std::size_t>(m - 2)];
        const double tau =
            std::clamp(std::sqrt(std::max(0.0, (t_ - u) / (t_ - s_))), tau_of(0), 1.0);
        const double wd = std::sqrt(hc_.coeffs->K * (t_ - u));

        int jbase[kMaxDim + 1];
        double jw[kMaxDim + 1][4];
        cubic_stencil(tau * g_.table_time_nodes - 1.0, g_.table_time_nodes, jbase[0], jw[0]);
        for (int k = 0; k < d_; ++k) {
            const double eta = std::clamp((y[k] - z_[k]) / wd, -g_.space_radius, g_.space_radius);
            const double pos =
                (eta + g_.space_radius) / (2.0 * g_.space_radius) * (g_.table_space_nodes - 1);
            cubic_stencil(pos, g_.table_space_nodes, jbase[k + 1], jw[k + 1]);
        }

        double T = 0.0;
        int counter[kMaxDim + 1] = {0, 0, 0, 0};
        for (;;) {
            double w = jw[0][counter[0]];
            const int row = std::clamp(jbase[0] + counter[0], 0, g_.table_time_nodes - 1);
            int col = 0, stride = 1;
            for (int k = 0; k < d_; ++k) {
                w *= jw[k + 1][counter[k + 1]];
                const int idx =
                    std::clamp(jbase[k + 1] + counter[k + 1], 0, g_.table_space_nodes - 1);
                col += idx * stride;
                stride *= g_.table_space_nodes;
            }
            T += w * tab[static_cast<std::size_t>(row) * n_cols_ + static_cast<std::size_t>(col)];
            int k = 0;
            while (k <= d_ && ++counter[k] == 4) counter[k++] = 0;
            if (k > d_) break;
        }
        return T * norm_factor(m, u, y);
    }

    // 4-point Catmull-Rom stencil at fractional position pos (node units).
    static void cubic_stencil(double pos, int n, int& base, double w[4]) {
        const double clamped = std::clamp(pos, 0.0, static_cast<double>(n - 1));
        int i0 = static_cast<int>(std::floor(clamped));
        if (i0 > n - 2) i0 = n - 2;
        const double p = clamped - i0;
        base = i0 - 1;
        w[0] = p * (-0.5 + p * (1.0 - 0.5 * p));
        w[1] = 1.0 + p * p * (-2.5 + 1.5 * p);
        w[2] = p * (0.5 + p * (2.0 - 1.5 * p));
        w[3] = p * p * (-0.5 + 0.5 * p);
    }

    // Space-time convolution int_u^t dv int H^{m-1}_{v,t}(z',z) H_{u,v}(y,z') dz'
    // on bridge-scaled nodes.
    double convolve(int m, double u, const double* y) const {
        const Quadrature tv = endpoint_absorbing(g_.time_nodes, u, t_);
        const double Kc = hc_.coeffs->K;
        double acc = 0.0;
        for (std::size_t iv = 0; iv < tv.size(); ++iv) {
            const double v = tv.nodes[iv];
            if (v <= u || v >= t_) continue;
            const double lam = (v - u) / (t_ - u);
            const double w = std::sqrt(Kc * (v - u) * (t_ - v) / (t_ - u));
            double inner = 0.0;
            double zp[kMaxDim];
            int idx[kMaxDim] = {0, 0, 0};
            for (;;) {
                double wq = 1.0;
                for (int k = 0; k < d_; ++k) {
                    zp[k] = y[k] + lam * (z_[k] - y[k]) + w * xi_.nodes[idx[k]];
                    wq *= xi_.weights[idx[k]] * w;
                }
                inner += wq * eval(m - 1, v, zp) * h1(hc_, u, v, y, zp);
                int k = 0;
                while (k < d_ && ++idx[k] == static_cast<int>(xi_.size())) idx[k++] = 0;
                if (k == d_) break;
            }
            acc += tv.weights[iv] * inner;
        }
        return acc;
    }

    double norm_factor(int m, double u, const double* y) const {
        return std::pow(t_ - u, -0.5 + delta_ * (m - 1)) *
               ref_kernel_raw(2.0 * hc_.coeffs->K, t_ - u, y, z_.data(), d_);
    }

private:
    double tau_of(int j) const { return static_cast<double>(j + 1) / g_.table_time_nodes; }

    void eta_point(int col, double u, double* y) const {
        const double wd = std::sqrt(hc_.coeffs->K * (t_ - u));
        for (int k = 0; k < d_; ++k) {
            const int ik = col % g_.table_space_nodes;
            col /= g_.table_space_nodes;
            const double eta = -g_.space_radius +
                               2.0 * g_.space_radius * ik / (g_.table_space_nodes - 1);
            y[k] = z_[k] + wd * eta;
        }
    }

    HContext hc_;
    double s_, t_;
    Vec z_;
    double delta_;
    KernelGrid g_;
    int d_;
    Quadrature xi_;
    int n_cols_ = 1;
    std::vector<std::vector<double>> tables_;
};

double series_delta(const CoefficientSet& c) {
    return 0.5 * (1.0 - static_cast<double>(c.dim) / c.p - 2.0 / c.q);
}

double sup_moment_factor(const MeasureFlow& mu_flow, double theta, double s, double t) {
    double sup = 1.0 + mu_flow.at_left(s).theta_moment(theta);
    for (std::size_t i = 0; i < mu_flow.size(); ++i) {
        const double r = mu_flow.times()[i];
        if (r < s || r > t) continue;
        sup = std::max(sup, 1.0 + mu_flow.measure(i).theta_moment(theta));
    }
    return sup;
}

} // namespace

KernelGrid KernelGrid::for_dim(int d) {
    KernelGrid g;
    if (d == 1) {
        g.space_nodes = 64;
        g.time_nodes = 28;
        g.table_time_nodes = 36;
        g.table_space_nodes = 56;
    } else if (d == 2) {
        g.space_nodes = 32;
        g.table_space_nodes = 24;
        g.time_nodes = 16;
        g.table_time_nodes = 20;
    } else {
        g.space_nodes = 16;
        g.table_space_nodes = 10;
        g.time_nodes = 12;
        g.table_time_nodes = 12;
    }
    return g;
}

FrozenKernel freeze_covariance(const CoefficientSet& coeffs, const MeasureFlow& phi_flow,
                               const Vec& z, double s, double r, int n_quad) {
    coeffs.validate();
    require(r > s, "invalid-parameter", "freeze_covariance needs r > s");
    require(static_cast<int>(z.size()) == coeffs.dim, "invalid-parameter",
            "freeze point dimension mismatch");
    require(coeffs.dim <= kMaxDim, "instance-too-large",
            "parametrix machinery is capped at d <= 3");

    Mat a(coeffs.dim, coeffs.dim);
    const double h = (r - s) / n_quad;
    const double off = 0.5 * h / std::sqrt(3.0);
    for (int k = 0; k < n_quad; ++k) {
        const double mid = s + (k + 0.5) * h;
        const SmallMat g1 = sigma_gram(coeffs, mid - off, z.data(), phi_flow.at_left(mid - off));
        const SmallMat g2 = sigma_gram(coeffs, mid + off, z.data(), phi_flow.at_left(mid + off));
        for (int i = 0; i < coeffs.dim; ++i)
            for (int j = 0; j < coeffs.dim; ++j)
                a(i, j) += 0.5 * h * (g1.at(i, j) + g2.at(i, j));
    }
    for (int i = 0; i < coeffs.dim; ++i)
        for (int j = 0; j < i; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));

    const double span = r - s;
    for (double ev : sym_eigenvalues(a)) {
        const double lo = span / coeffs.K, hi = coeffs.K * span;
        if (ev < lo * (1.0 - 1e-9) || ev > hi * (1.0 + 1e-9))
            fail("diffusion-band-violation",
                 "covariance eigenvalue " + std::to_string(ev) + " escapes [" +
                     std::to_string(lo) + ", " + std::to_string(hi) + "] (A1 breach?)");
    }
    return FrozenKernel{std::move(a), s, r, z, coeffs.dim};
}

double frozen_density(const FrozenKernel& k, const Vec& x, const Vec& y) {
    return make_gauss(small_from(k.a)).density(x.data(), y.data());
}

Vec frozen_density_grad(const FrozenKernel& k, const Vec& x, const Vec& y) {
    Vec g(k.dim);
    make_gauss(small_from(k.a)).grad_backward(x.data(), y.data(), g.data());
    return g;
}

Mat frozen_density_hess(const FrozenKernel& k, const Vec& x, const Vec& y) {
    double buf[kMaxDim * kMaxDim];
    make_gauss(small_from(k.a)).hess_backward(x.data(), y.data(), buf);
    Mat h(k.dim, k.dim);
    for (int i = 0; i < k.dim; ++i)
        for (int j = 0; j < k.dim; ++j) h(i, j) = buf[static_cast<std::size_t>(i) * k.dim + j];
    return h;
}

double reference_kernel(double Kc, double s, double t, const Vec& x, const Vec& y) {
    require(t > s && Kc > 0.0, "invalid-parameter", "reference kernel needs t > s, K > 0");
    require(x.size() == y.size(), "invalid-parameter", "dimension mismatch");
    return ref_kernel_raw(Kc, t - s, x.data(), y.data(), static_cast<int>(x.size()));
}

double h_kernel(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                const MeasureFlow& phi_flow, double r, double t, const Vec& y, const Vec& z,
                int n_quad) {
    coeffs.validate();
    require(r < t, "invalid-parameter", "h_kernel needs r < t");
    require(coeffs.dim <= kMaxDim, "instance-too-large", "parametrix capped at d <= 3");
    const CovarianceField cov(coeffs, phi_flow, r, t, n_quad);
    const HContext hc{&coeffs, &mu_flow, &phi_flow, &cov};
    return h1(hc, r, t, y.data(), z.data());
}

namespace {

double iterated_once(int m, const HContext& hc, double r, double t, const Vec& y, const Vec& z,
                     double delta, const KernelGrid& g) {
    HmEvaluator ev(hc, r, t, z, delta, g);
    if (m > 2) ev.build(m - 1);
    return ev.convolve(m, r, y.data());
}

} // namespace

double h_kernel_iterated(int m, const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                         const MeasureFlow& phi_flow, double r, double t, const Vec& y,
                         const Vec& z, const KernelGrid& quad) {
    require(m >= 1, "invalid-parameter", "iterated kernel order must be >= 1");
    if (m == 1) return h_kernel(coeffs, mu_flow, phi_flow, r, t, y, z, quad.cov_panels);
    coeffs.validate();
    require(coeffs.dim <= kMaxDim, "instance-too-large", "parametrix capped at d <= 3");

    const double delta = series_delta(coeffs);
    const CovarianceField cov(coeffs, phi_flow, r, t, quad.cov_panels);
    const HContext hc{&coeffs, &mu_flow, &phi_flow, &cov};
    const double val = iterated_once(m, hc, r, t, y, z, delta, quad);

    if (quad.check_refinement) {
        KernelGrid coarse = quad;
        coarse.space_nodes = std::max(6, quad.space_nodes / 2);
        coarse.time_nodes = std::max(6, quad.time_nodes / 2);
        coarse.table_space_nodes = std::max(8, quad.table_space_nodes / 2);
        coarse.table_time_nodes = std::max(6, quad.table_time_nodes / 2);
        const double val2 = iterated_once(m, hc, r, t, y, z, delta, coarse);
        const double scale = std::max({std::abs(val), std::abs(val2), 1e-300});
        if (std::abs(val - val2) > 0.10 * scale && std::abs(val) > 1e-14)
            fail("quadrature-unresolved",
                 "iterated kernel changed by more than 10% under refinement (" + fmt17(val2) +
                     " -> " + fmt17(val) + ")");
    }
    return val;
}

ParametrixResult parametrix_density(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                                    const MeasureFlow& phi_flow, const Vec& x, const Vec& z,
                                    double s, double t, int M, const KernelGrid& quad) {
    coeffs.validate();
    require(s < t, "invalid-parameter", "parametrix needs s < t");
    require(M >= 0, "invalid-parameter", "M must be >= 0");
    require(coeffs.dim <= kMaxDim, "instance-too-large",
            "series evaluation is capped at d <= 3 (tensor quadrature cost)");

    const int d = coeffs.dim;
    const double delta = series_delta(coeffs);
    const CovarianceField cov(coeffs, phi_flow, s, t, quad.cov_panels);
    const HContext hc{&coeffs, &mu_flow, &phi_flow, &cov};

    ParametrixResult res;
    res.M = M;
    res.delta = delta;
    res.terms.assign(M + 1, 0.0);
    res.terms[0] = make_gauss(cov.between(z.data(), s, t)).density(x.data(), z.data());

    HmEvaluator ev(hc, s, t, z, delta, quad);
    if (M >= 2) ev.build(M);

    // Outer space-time integrals: int_s^t dr int H^m_{r,t}(y,z) p^z_{s,r}(x,y) dy
    // on the same endpoint-absorbing / bridge-scaled nodes.
    const Quadrature tr = endpoint_absorbing(quad.time_nodes, s, t);
    const Quadrature xi = gauss_legendre_on(quad.space_nodes, -quad.space_radius,
                                            quad.space_radius);
    std::vector<double> term_at_node(tr.size() * static_cast<std::size_t>(M), 0.0);
    parallel::parallel_for(static_cast<std::int64_t>(tr.size()), [&](std::int64_t ir) {
        const double r = tr.nodes[static_cast<std::size_t>(ir)];
        if (r <= s || r >= t) return;
        const GaussKernel Gsr = make_gauss(cov.between(z.data(), s, r));
        const double lam = (r - s) / (t - s);
        const double w = std::sqrt(coeffs.K * (r - s) * (t - r) / (t - s));
        double y[kMaxDim];
        int idx[kMaxDim] = {0, 0, 0};
        std::vector<double> acc(M, 0.0);
        for (;;) {
            double wq = 1.0;
            for (int k = 0; k < d; ++k) {
                y[k] = x[k] + lam * (z[k] - x[k]) + w * xi.nodes[idx[k]];
                wq *= xi.weights[idx[k]] * w;
            }
            const double pxy = Gsr.density(x.data(), y);
            if (pxy > 1e-300) {
                for (int m = 1; m <= M; ++m) acc[m - 1] += wq * ev.eval(m, r, y) * pxy;
            }
            int k = 0;
            while (k < d && ++idx[k] == static_cast<int>(xi.size())) idx[k++] = 0;
            if (k == d) break;
        }
        for (int m = 1; m <= M; ++m)
            term_at_node[static_cast<std::size_t>(ir) * M + (m - 1)] =
                tr.weights[static_cast<std::size_t>(ir)] * acc[m - 1];
    });
    for (std::size_t ir = 0; ir < tr.size(); ++ir)
        for (int m = 1; m <= M; ++m) res.terms[m] += term_at_node[ir * M + (m - 1)];

    res.value = 0.0;
    for (double v : res.terms) res.value += v;

    // Tail of the fitted geometric majorant: terms beyond M are bounded by
    // (C S)^m (t-s)^{delta (m-1)} J with J the f-weighted reference integral.
    res.fitted_C = fit_majorant_constant(coeffs, mu_flow, phi_flow, s, t);
    const double S = sup_moment_factor(mu_flow, coeffs.theta, s, t);
    double J = 0.0;
    {
        for (std::size_t ir = 0; ir < tr.size(); ++ir) {
            const double r = tr.nodes[ir];
            if (r <= s || r >= t) continue;
            const GaussKernel Gsr = make_gauss(cov.between(z.data(), s, r));
            const double lam = (r - s) / (t - s);
            const double w = std::sqrt(coeffs.K * (r - s) * (t - r) / (t - s));
            double y[kMaxDim];
            int idx[kMaxDim] = {0, 0, 0};
            double inner = 0.0;
            for (;;) {
                double wq = 1.0;
                for (int k = 0; k < d; ++k) {
                    y[k] = x[k] + lam * (z[k] - x[k]) + w * xi.nodes[idx[k]];
                    wq *= xi.weights[idx[k]] * w;
                }
                const double f = coeffs.envelope(r, {y, static_cast<std::size_t>(d)});
                inner += wq * f * std::pow(t - r, -0.5) *
                         ref_kernel_raw(2.0 * coeffs.K, t - r, y, z.data(), d) *
                         Gsr.density(x.data(), y);
                int k = 0;
                while (k < d && ++idx[k] == static_cast<int>(xi.size())) idx[k++] = 0;
                if (k == d) break;
            }
            J += tr.weights[ir] * inner;
        }
    }
    const double rho = res.fitted_C * S * std::pow(t - s, delta);
    if (rho < 1.0) {
        res.tail_estimate = J * std::pow(res.fitted_C * S, M + 1) *
                            std::pow(t - s, delta * M) / (1.0 - rho);
    } else {
        res.tail_estimate = std::numeric_limits<double>::infinity();
    }
    res.series_trusted = res.tail_estimate <= std::abs(res.value);
    return res;
}

double fit_majorant_constant(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                             const MeasureFlow& phi_flow, double s, double t, int n_probes,
                             std::uint64_t seed) {
    coeffs.validate();
    const int d = coeffs.dim;
    const CovarianceField cov(coeffs, phi_flow, s, t, 256);
    const HContext hc{&coeffs, &mu_flow, &phi_flow, &cov};
    const double S = sup_moment_factor(mu_flow, coeffs.theta, s, t);
    double C = 0.0;
    for (int k = 0; k < n_probes; ++k) {
        CounterRng rng(seed, static_cast<std::uint64_t>(k), 3);
        const double u = rng.uniform();
        const double r = s + (t - s) * u * u; // cluster near s where H is largest
        if (t - r < 1e-9 * (t - s)) continue;
        Vec z(d), y(d);
        for (int i = 0; i < d; ++i) z[i] = 1.5 * rng.normal();
        const double wd = std::sqrt(coeffs.K * (t - r));
        for (int i = 0; i < d; ++i) y[i] = z[i] + 2.0 * wd * rng.normal();
        const double f = coeffs.envelope(r, y);
        if (!(f > 0.0)) continue;
        const double h = std::abs(h1(hc, r, t, y.data(), z.data()));
        const double den = f * S * ref_kernel_raw(2.0 * coeffs.K, t - r, y.data(), z.data(), d);
        if (den > 1e-300) C = std::max(C, h * std::sqrt(t - r) / den);
    }
    return C;
}

// ---------------------------------------------------------------------------
// bound verification

namespace {

double half_support_wasserstein(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                                double theta, int half) {
    // even/odd split for a crude error bar on the MC-estimated distance
    auto pick = [&](const EmpiricalMeasure& m) {
        std::vector<double> atoms;
        for (std::size_t i = half; i < m.size(); i += 2)
            for (double c : m.atom(i)) atoms.push_back(c);
        return EmpiricalMeasure::uniform(m.dim(), std::move(atoms));
    };
    return wasserstein(pick(a), pick(b), theta);
}

} // namespace

BoundReport verify_bounds(const CoefficientSet& coeffs, const MeasureFlow& mu_flow,
                          const MeasureFlow& nu_flow, const MeasureFlow& phi_mu_flow,
                          const MeasureFlow& phi_nu_flow, const BoundProbeSpec& probes,
                          const BoundBudgets& budgets) {
    coeffs.validate();
    require(coeffs.dim <= kMaxDim, "instance-too-large", "parametrix capped at d <= 3");
    const int d = coeffs.dim;
    const double K = coeffs.K;
    const double s = phi_mu_flow.times().front();

    BoundReport rep;
    auto add = [&](const std::string& name, double worst, double budget, int used,
                   double noise = 0.0) {
        rep.push_back({name, worst, budget, worst <= budget, used, noise});
    };

    const CovarianceField cov_mu(coeffs, phi_mu_flow, s, s + probes.t_hi, 512);
    const CovarianceField cov_nu(coeffs, phi_nu_flow, s, s + probes.t_hi, 512);

    double worst_dom = 0.0, worst_der = 0.0, worst_diff = 0.0, worst_dd = 0.0;
    double w_noise = 0.0;
    int used = 0;
    for (int k = 0; k < probes.n_probes; ++k) {
        CounterRng rng(probes.seed, static_cast<std::uint64_t>(k), 5);
        const double dt = probes.t_lo + (probes.t_hi - probes.t_lo) * rng.uniform();
        const double t = s + dt;
        Vec x(d), y(d);
        for (int i = 0; i < d; ++i) {
            x[i] = probes.space_radius * rng.normal();
            y[i] = x[i] + std::sqrt(K * dt) * 2.0 * rng.normal();
        }
        ++used;

        const GaussKernel Gmu = make_gauss(cov_mu.between(y.data(), s, t));
        const double p = Gmu.density(x.data(), y.data());
        const double ref = ref_kernel_raw(K, dt, x.data(), y.data(), d);
        double q = 0.0;
        for (int i = 0; i < d; ++i) q += (y[i] - x[i]) * (y[i] - x[i]);

        worst_dom = std::max(worst_dom, p * (1.0 + q * q / (dt * dt)) / ref);

        double grad[kMaxDim], hess[kMaxDim * kMaxDim];
        Gmu.grad_backward(x.data(), y.data(), grad);
        Gmu.hess_backward(x.data(), y.data(), hess);
        double gn = 0.0;
        for (int i = 0; i < d; ++i) gn += grad[i] * grad[i];
        Mat H(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) H(i, j) = hess[static_cast<std::size_t>(i) * d + j];
        double hn = 0.0;
        for (double ev : sym_eigenvalues(H)) hn = std::max(hn, std::abs(ev));
        worst_der = std::max(worst_der, (std::sqrt(dt) * std::sqrt(gn) + dt * hn) / ref);

        // difference bounds, driven by the measure argument of sigma
        double wst = 0.0, wst_half = 0.0;
        for (std::size_t i = 0; i < phi_mu_flow.size(); ++i) {
            if (phi_mu_flow.times()[i] > t + 1e-12) break;
            wst = std::max(wst, wasserstein(phi_mu_flow.measure(i), phi_nu_flow.measure(i),
                                            coeffs.theta));
            wst_half = std::max(wst_half,
                                half_support_wasserstein(phi_mu_flow.measure(i),
                                                         phi_nu_flow.measure(i), coeffs.theta, 0));
        }
        w_noise = std::max(w_noise, std::abs(wst - wst_half));

        const GaussKernel Gnu = make_gauss(cov_nu.between(y.data(), s, t));
        const double pn = Gnu.density(x.data(), y.data());
        if (wst > 1e-12) {
            worst_diff = std::max(worst_diff,
                                  (1.0 + q / dt) * std::abs(p - pn) / (ref * wst));
            double gradn[kMaxDim], hessn[kMaxDim * kMaxDim];
            Gnu.grad_backward(x.data(), y.data(), gradn);
            Gnu.hess_backward(x.data(), y.data(), hessn);
            double dg = 0.0;
            for (int i = 0; i < d; ++i) dg += (grad[i] - gradn[i]) * (grad[i] - gradn[i]);
            Mat DH(d, d);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    DH(i, j) = hess[static_cast<std::size_t>(i) * d + j] -
                               hessn[static_cast<std::size_t>(i) * d + j];
            double dhn = 0.0;
            for (double ev : sym_eigenvalues(DH)) dhn = std::max(dhn, std::abs(ev));
            worst_dd = std::max(worst_dd,
                                (std::sqrt(dt) * std::sqrt(dg) + dt * dhn) / (ref * wst));
        }
    }
    add("gaussian-domination", worst_dom, budgets.gaussian_domination, used);
    add("derivative-bounds", worst_der, budgets.derivative_bounds, used);
    add("kernel-difference", worst_diff, budgets.kernel_difference, used, w_noise);
    add("derivative-difference", worst_dd, budgets.derivative_difference, used, w_noise);

    // H-kernel difference across the two flows:
    // |H^mu - H^nu| <= c (t-r)^{-1/2} f S p~^{2K} (||mu-nu||_TV + W(Phi mu, Phi nu)).
    {
        const double t = s + probes.t_hi;
        const HContext hmu{&coeffs, &mu_flow, &phi_mu_flow, &cov_mu};
        const HContext hnu{&coeffs, &nu_flow, &phi_nu_flow, &cov_nu};
        double lam = 0.0;
        for (std::size_t i = 0; i < mu_flow.size(); ++i) {
            if (mu_flow.times()[i] > t + 1e-12) break;
            lam = std::max(lam, weighted_tv(mu_flow.measure(i), nu_flow.measure(i),
                                            coeffs.theta));
        }
        double wphi = 0.0;
        for (std::size_t i = 0; i < phi_mu_flow.size(); ++i) {
            if (phi_mu_flow.times()[i] > t + 1e-12) break;
            wphi = std::max(wphi, wasserstein(phi_mu_flow.measure(i), phi_nu_flow.measure(i),
                                              coeffs.theta));
        }
        const double coupling = lam + wphi;
        const double S = sup_moment_factor(mu_flow, coeffs.theta, s, t);
        double worst = 0.0;
        int used_h = 0;
        if (coupling > 1e-12) {
            for (int k = 0; k < std::min(16, probes.n_probes); ++k) {
                CounterRng rng(probes.seed, 3000 + static_cast<std::uint64_t>(k), 5);
                const double r = s + (t - s) * (0.05 + 0.6 * rng.uniform());
                Vec z(d), y(d);
                for (int i = 0; i < d; ++i) z[i] = rng.normal();
                const double wd = std::sqrt(K * (t - r));
                for (int i = 0; i < d; ++i) y[i] = z[i] + 1.5 * wd * rng.normal();
                const double f = coeffs.envelope(r, y);
                if (!(f > 0.0)) continue;
                const double dh = std::abs(h1(hmu, r, t, y.data(), z.data()) -
                                           h1(hnu, r, t, y.data(), z.data()));
                const double den = f * S * std::pow(t - r, -0.5) *
                                   ref_kernel_raw(2.0 * K, t - r, y.data(), z.data(), d) *
                                   coupling;
                if (den > 1e-300) {
                    worst = std::max(worst, dh / den);
                    ++used_h;
                }
            }
        }
        add("h-difference", worst, budgets.kernel_difference, used_h, w_noise);
    }

    // Convolution inequality with g == 1, by direct quadrature of the left side.
    {
        const double t = s + probes.t_hi;
        const double dt = t - s;
        EnvelopeFn one = [](double, std::span<const double>) { return 1.0; };
        QuadratureSpec qs;
        const double gnorm =
            tilde_lpq_norm(one, coeffs.p, coeffs.q, s, t, {Vec(static_cast<std::size_t>(d), 0.0)}, qs);
        double worst = 0.0;
        for (int k = 0; k < 8; ++k) {
            CounterRng rng(probes.seed, 1000 + static_cast<std::uint64_t>(k), 5);
            Vec x(d), y(d);
            for (int i = 0; i < d; ++i) {
                x[i] = rng.normal();
                y[i] = x[i] + std::sqrt(K * dt) * rng.normal();
            }
            const Quadrature trq = endpoint_absorbing(24, s, t);
            const Quadrature xiq = gauss_legendre_on(40, -10.0, 10.0);
            double lhs = 0.0;
            for (std::size_t ir = 0; ir < trq.size(); ++ir) {
                const double r = trq.nodes[ir];
                if (r <= s || r >= t) continue;
                const double lam = (r - s) / dt;
                const double w = std::sqrt(K * (r - s) * (t - r) / dt);
                double inner = 0.0;
                double yp[kMaxDim];
                int idx[kMaxDim] = {0, 0, 0};
                for (;;) {
                    double wq = 1.0;
                    for (int i = 0; i < d; ++i) {
                        yp[i] = x[i] + lam * (y[i] - x[i]) + w * xiq.nodes[idx[i]];
                        wq *= xiq.weights[idx[i]] * w;
                    }
                    inner += wq * ref_kernel_raw(K, r - s, x.data(), yp, d) *
                             std::pow(r - s, -0.5) * std::pow(t - r, -0.5) *
                             ref_kernel_raw(2.0 * K, t - r, yp, y.data(), d);
                    int i = 0;
                    while (i < d && ++idx[i] == static_cast<int>(xiq.size())) idx[i++] = 0;
                    if (i == d) break;
                }
                lhs += trq.weights[ir] * inner;
            }
            const double rhs = std::pow(dt, -0.5 + 0.5 * (1.0 - d / coeffs.p - 2.0 / coeffs.q)) *
                               ref_kernel_raw(2.0 * K, dt, x.data(), y.data(), d) * gnorm;
            if (rhs > 1e-300) worst = std::max(worst, lhs / rhs);
        }
        add("convolution", worst, budgets.convolution, 8);
    }

    // Iterated-kernel majorant at m = 2 with the fitted constant.
    {
        const double t = s + probes.t_hi;
        const double C = fit_majorant_constant(coeffs, mu_flow, phi_mu_flow, s, t);
        const double S = sup_moment_factor(mu_flow, coeffs.theta, s, t);
        const double delta = series_delta(coeffs);
        const CovarianceField cov(coeffs, phi_mu_flow, s, t, 256);
        const HContext hc{&coeffs, &mu_flow, &phi_mu_flow, &cov};
        KernelGrid g = KernelGrid::for_dim(d);
        g.check_refinement = false;
        double worst = 0.0;
        int m2_used = 0;
        if (C > 0.0) {
            for (int k = 0; k < std::min(12, probes.n_probes); ++k) {
                CounterRng rng(probes.seed, 2000 + static_cast<std::uint64_t>(k), 5);
                Vec z(d), y(d);
                for (int i = 0; i < d; ++i) z[i] = rng.normal();
                const double r = s + (t - s) * (0.1 + 0.5 * rng.uniform());
                const double wd = std::sqrt(K * (t - r));
                for (int i = 0; i < d; ++i) y[i] = z[i] + 1.5 * wd * rng.normal();
                const double f = coeffs.envelope(r, y);
                if (!(f > 0.0)) continue;
                HmEvaluator evz(hc, s, t, z, delta, g);
                const double h2 = std::abs(evz.convolve(2, r, y.data()));
                const double maj = f * C * C * S * S * std::pow(t - r, -0.5 + delta) *
                                   ref_kernel_raw(2.0 * K, t - r, y.data(), z.data(), d);
                if (maj > 1e-300) {
                    worst = std::max(worst, h2 / maj);
                    ++m2_used;
                }
            }
        }
        add("iterated-majorant", worst, budgets.iterated_majorant, m2_used);
    }

    return rep;
}

} // namespace mvlab
