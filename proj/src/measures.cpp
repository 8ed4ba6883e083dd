#include "mvlab/measures.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "mvlab/io.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"
#include "mvlab/transport.hpp"

namespace mvlab {

namespace {
constexpr double kAtomTol = 1e-12;   // atom-identification tolerance
constexpr double kWeightTol = 1e-12; // weights must sum to 1 within this
} // namespace

EmpiricalMeasure::EmpiricalMeasure(int dim, std::vector<double> atoms_flat,
                                   std::vector<double> weights)
    : dim_(dim), atoms_(std::move(atoms_flat)), weights_(std::move(weights)),
      cache_(std::make_shared<Cache>()) {
    require(dim_ >= 1, "invalid-parameter", "measure dimension must be >= 1");
    require(!weights_.empty(), "invalid-parameter", "measure needs at least one atom");
    require(atoms_.size() == weights_.size() * static_cast<std::size_t>(dim_),
            "invalid-parameter", "atom array size does not match weights * dim");
    for (double w : weights_)
        require(w >= 0.0 && std::isfinite(w), "invalid-parameter",
                "weights must be finite and nonnegative");
    require(all_finite(atoms_), "invalid-parameter", "atoms must be finite");
    const double s = kahan_sum(weights_);
    require(std::abs(s - 1.0) <= kWeightTol, "invalid-parameter",
            "weights must sum to 1 within 1e-12 (got " + fmt17(s) + ")");
}

EmpiricalMeasure EmpiricalMeasure::dirac(const Vec& x) {
    return EmpiricalMeasure(static_cast<int>(x.size()), x, {1.0});
}

EmpiricalMeasure EmpiricalMeasure::uniform(int dim, std::vector<double> atoms_flat) {
    const std::size_t n = atoms_flat.size() / static_cast<std::size_t>(dim);
    return EmpiricalMeasure(dim, std::move(atoms_flat),
                            std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

double EmpiricalMeasure::theta_moment(double theta) const {
    require(theta >= 1.0, "invalid-parameter", "theta must be >= 1");
    {
        std::lock_guard<std::mutex> lock(cache_->m);
        for (const auto& [t, v] : cache_->moments)
            if (t == theta) return v;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
        const double r = norm2(atom(i));
        s += weights_[i] * std::pow(r, theta);
    }
    const double v = s > 0.0 ? std::pow(s, 1.0 / theta) : 0.0;
    {
        std::lock_guard<std::mutex> lock(cache_->m);
        cache_->moments.emplace_back(theta, v);
    }
    return v;
}

double EmpiricalMeasure::cached_integral(
    const std::string& key, const std::function<double(std::span<const double>)>& g) const {
    {
        std::lock_guard<std::mutex> lock(cache_->m);
        for (const auto& [k, v] : cache_->integrals)
            if (k == key) return v;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += weights_[i] * g(atom(i));
    {
        std::lock_guard<std::mutex> lock(cache_->m);
        cache_->integrals.emplace_back(key, s);
    }
    return s;
}

MeasureFlow::MeasureFlow(std::vector<double> times, std::vector<EmpiricalMeasure> measures)
    : times_(std::move(times)), measures_(std::move(measures)) {
    require(!times_.empty() && times_.size() == measures_.size(), "invalid-parameter",
            "flow needs one measure per grid time");
    for (std::size_t i = 1; i < times_.size(); ++i)
        require(times_[i] > times_[i - 1], "invalid-parameter",
                "flow times must be strictly increasing");
    for (const auto& m : measures_)
        require(m.dim() == measures_.front().dim(), "invalid-parameter",
                "all flow measures must share one dimension");
}

MeasureFlow MeasureFlow::constant(std::vector<double> times, const EmpiricalMeasure& mu) {
    return MeasureFlow(std::move(times),
                       std::vector<EmpiricalMeasure>(times.size(), mu));
}

std::size_t MeasureFlow::index_left(double t) const {
    require(t >= times_.front() - 1e-12, "incompatible-flows",
            "time " + fmt17(t) + " precedes the flow grid");
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    return static_cast<std::size_t>(std::distance(times_.begin(), it)) - 1;
}

const EmpiricalMeasure& MeasureFlow::at_left(double t) const { return measures_[index_left(t)]; }

// ---------------------------------------------------------------------------
// metrics

double theta_moment(const EmpiricalMeasure& mu, double theta) { return mu.theta_moment(theta); }

namespace {

struct SiteSums {
    double tv = 0.0;
    double weighted_tv = 0.0;
};

// Cluster the union of atom sites (tolerance kAtomTol) and accumulate the
// variation sums. Exact for atomic measures.
SiteSums site_variation(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta) {
    require(mu.dim() == nu.dim(), "invalid-parameter", "dimension mismatch");
    struct Entry {
        std::span<const double> x;
        double signed_w;
    };
    std::vector<Entry> entries;
    entries.reserve(mu.size() + nu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) entries.push_back({mu.atom(i), mu.weight(i)});
    for (std::size_t i = 0; i < nu.size(); ++i) entries.push_back({nu.atom(i), -nu.weight(i)});

    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return entries[a].x[0] < entries[b].x[0];
    });

    SiteSums out;
    std::vector<std::size_t> group;
    std::size_t pos = 0;
    while (pos < order.size()) {
        group.clear();
        group.push_back(order[pos]);
        std::size_t end = pos + 1;
        while (end < order.size() &&
               entries[order[end]].x[0] - entries[order[end - 1]].x[0] <= kAtomTol) {
            group.push_back(order[end]);
            ++end;
        }
        // within the first-coordinate group, match sites on full distance
        std::vector<char> used(group.size(), 0);
        for (std::size_t a = 0; a < group.size(); ++a) {
            if (used[a]) continue;
            double net = entries[group[a]].signed_w;
            used[a] = 1;
            for (std::size_t b = a + 1; b < group.size(); ++b) {
                if (used[b]) continue;
                if (dist2(entries[group[a]].x, entries[group[b]].x) <= kAtomTol) {
                    net += entries[group[b]].signed_w;
                    used[b] = 1;
                }
            }
            const double r = norm2(entries[group[a]].x);
            out.tv += std::abs(net);
            out.weighted_tv += (1.0 + std::pow(r, theta)) * std::abs(net);
        }
        pos = end;
    }
    return out;
}

} // namespace

double weighted_tv(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta) {
    require(theta >= 1.0, "invalid-parameter", "theta must be >= 1");
    return site_variation(mu, nu, theta).weighted_tv;
}

double total_variation(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    return site_variation(mu, nu, 1.0).tv;
}

bool wasserstein_is_exact(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                          const TransportOptions& opt) {
    return mu.size() * nu.size() <= opt.max_support_product;
}

double wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta,
                   const TransportOptions& opt) {
    require(mu.dim() == nu.dim(), "invalid-parameter", "dimension mismatch");
    require(theta >= 1.0, "invalid-parameter", "theta must be >= 1");
    if (!wasserstein_is_exact(mu, nu, opt)) {
        if (opt.allow_sliced)
            return sliced_wasserstein(mu, nu, theta, opt.sliced_directions, opt.sliced_seed);
        fail("instance-too-large",
             "support product " + std::to_string(mu.size() * nu.size()) +
                 " exceeds the cap; enable the sliced approximation or shrink supports");
    }

    // Canonical argument order makes the result exactly symmetric.
    const EmpiricalMeasure* a = &mu;
    const EmpiricalMeasure* b = &nu;
    auto less = [](const EmpiricalMeasure& p, const EmpiricalMeasure& q) {
        if (p.size() != q.size()) return p.size() < q.size();
        if (p.atoms_flat() != q.atoms_flat()) return p.atoms_flat() < q.atoms_flat();
        return p.weights() < q.weights();
    };
    if (less(*b, *a)) std::swap(a, b);

    std::vector<double> supply, demand;
    std::vector<std::size_t> ia, ib;
    for (std::size_t i = 0; i < a->size(); ++i)
        if (a->weight(i) > 0.0) {
            supply.push_back(a->weight(i));
            ia.push_back(i);
        }
    for (std::size_t j = 0; j < b->size(); ++j)
        if (b->weight(j) > 0.0) {
            demand.push_back(b->weight(j));
            ib.push_back(j);
        }

    if (a->dim() == 1) {
        // 1-D: the monotone coupling is optimal for |x-y|^theta, theta >= 1.
        std::vector<std::pair<double, double>> pa, pb;
        for (std::size_t k = 0; k < ia.size(); ++k)
            pa.emplace_back(a->atom(ia[k])[0], supply[k]);
        for (std::size_t k = 0; k < ib.size(); ++k)
            pb.emplace_back(b->atom(ib[k])[0], demand[k]);
        return std::pow(detail::quantile_ot_cost(std::move(pa), std::move(pb), theta),
                        1.0 / theta);
    }

    auto cost = [&](int i, int j) {
        return std::pow(dist2(a->atom(ia[i]), b->atom(ib[j])), theta);
    };
    const double total = detail::transport_cost(supply, demand, cost);
    return total > 0.0 ? std::pow(total, 1.0 / theta) : 0.0;
}

double sliced_wasserstein(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta,
                          int directions, std::uint64_t seed) {
    require(mu.dim() == nu.dim(), "invalid-parameter", "dimension mismatch");
    const int d = mu.dim();
    double acc = 0.0;
    Vec dir(d);
    for (int l = 0; l < directions; ++l) {
        CounterRng rng(seed, static_cast<std::uint64_t>(l), 0);
        double nrm = 0.0;
        do {
            for (int k = 0; k < d; ++k) dir[k] = rng.normal();
            nrm = norm2(dir);
        } while (nrm < 1e-12);
        for (int k = 0; k < d; ++k) dir[k] /= nrm;
        std::vector<std::pair<double, double>> pa, pb;
        pa.reserve(mu.size());
        pb.reserve(nu.size());
        for (std::size_t i = 0; i < mu.size(); ++i)
            if (mu.weight(i) > 0.0) pa.emplace_back(dot(mu.atom(i), dir), mu.weight(i));
        for (std::size_t j = 0; j < nu.size(); ++j)
            if (nu.weight(j) > 0.0) pb.emplace_back(dot(nu.atom(j), dir), nu.weight(j));
        acc += detail::quantile_ot_cost(std::move(pa), std::move(pb), theta);
    }
    return std::pow(acc / directions, 1.0 / theta);
}

double flow_distance(const MeasureFlow& mu, const MeasureFlow& nu, double theta,
                     FlowMetric kind, const TransportOptions& opt) {
    require(mu.times() == nu.times(), "incompatible-flows",
            "flow_distance needs identical time grids");
    double sup = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double d = kind == FlowMetric::weighted_tv
                             ? weighted_tv(mu.measure(i), nu.measure(i), theta)
                             : wasserstein(mu.measure(i), nu.measure(i), theta, opt);
        sup = std::max(sup, d);
    }
    return sup;
}

MetricReport gpp_report(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double theta) {
    const SiteSums s = site_variation(mu, nu, theta);
    MetricReport r;
    r.theta = theta;
    r.tv = s.tv;
    r.weighted_tv = s.weighted_tv;
    r.wasserstein_theta = wasserstein(mu, nu, theta);
    return r;
}

double weighted_tv_smoothed(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                            double theta, const SmoothingGrid& grid) {
    require(mu.dim() == 1 && nu.dim() == 1, "invalid-parameter",
            "smoothed weighted TV is implemented for d=1");
    require(grid.bandwidth > 0.0 && grid.points >= 2 && grid.hi > grid.lo, "invalid-parameter",
            "smoothing grid is not set up");
    const int g = grid.points;
    const double dx = (grid.hi - grid.lo) / (g - 1);
    const double h = grid.bandwidth;
    const double inv = 1.0 / (h * 2.5066282746310005); // sqrt(2*pi)
    const double cutoff = 8.0 * h;

    auto density = [&](const EmpiricalMeasure& m, std::vector<double>& p) {
        p.assign(g, 0.0);
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double x = m.atom(i)[0];
            const double w = m.weight(i);
            const int lo = std::max(0, static_cast<int>(std::floor((x - cutoff - grid.lo) / dx)));
            const int hi = std::min(g - 1, static_cast<int>(std::ceil((x + cutoff - grid.lo) / dx)));
            for (int k = lo; k <= hi; ++k) {
                const double u = (grid.lo + k * dx - x) / h;
                p[k] += w * inv * std::exp(-0.5 * u * u);
            }
        }
    };
    std::vector<double> pm, pn;
    density(mu, pm);
    density(nu, pn);
    double acc = 0.0;
    for (int k = 0; k < g; ++k) {
        const double x = grid.lo + k * dx;
        const double trap = (k == 0 || k == g - 1) ? 0.5 : 1.0;
        acc += trap * (1.0 + std::pow(std::abs(x), theta)) * std::abs(pm[k] - pn[k]);
    }
    return acc * dx;
}

// ---------------------------------------------------------------------------
// serialization

void save_measure(const std::string& path, const EmpiricalMeasure& mu, double theta) {
    std::ostringstream out;
    out << mu.dim() << "," << fmt17(theta) << "\n";
    for (std::size_t i = 0; i < mu.size(); ++i) {
        out << fmt17(mu.weight(i));
        for (double c : mu.atom(i)) out << "," << fmt17(c);
        out << "\n";
    }
    write_text_file(path, out.str());
}

std::pair<EmpiricalMeasure, double> load_measure(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "io-error", "empty measure file " + path);
    const auto head = split(line, ',');
    require(head.size() == 2, "io-error", "bad measure header in " + path);
    const int dim = std::stoi(head[0]);
    const double theta = std::stod(head[1]);
    std::vector<double> atoms, weights;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        require(static_cast<int>(cells.size()) == dim + 1, "io-error",
                "bad measure row in " + path);
        weights.push_back(std::stod(cells[0]));
        for (int k = 0; k < dim; ++k) atoms.push_back(std::stod(cells[k + 1]));
    }
    return {EmpiricalMeasure(dim, std::move(atoms), std::move(weights)), theta};
}

std::string save_flow(const std::string& dir, const std::string& basename,
                      const MeasureFlow& flow, double theta) {
    std::filesystem::create_directories(dir);
    std::ostringstream index;
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const std::string fname = basename + "_" + std::to_string(i) + ".csv";
        save_measure((std::filesystem::path(dir) / fname).string(), flow.measure(i), theta);
        index << fmt17(flow.times()[i]) << "," << fname << "\n";
    }
    const std::string index_path =
        (std::filesystem::path(dir) / (basename + "_index.csv")).string();
    write_text_file(index_path, index.str());
    return index_path;
}

MeasureFlow load_flow(const std::string& index_path) {
    const std::filesystem::path dir = std::filesystem::path(index_path).parent_path();
    std::istringstream in(read_text_file(index_path));
    std::string line;
    std::vector<double> times;
    std::vector<EmpiricalMeasure> measures;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        require(cells.size() == 2, "io-error", "bad flow index row in " + index_path);
        times.push_back(std::stod(cells[0]));
        measures.push_back(load_measure((dir / cells[1]).string()).first);
    }
    return MeasureFlow(std::move(times), std::move(measures));
}

} // namespace mvlab
