#include "dfl/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace dfl {

namespace {

// regularized incomplete beta via Lentz's continued fraction
double betacf(double a, double b, double x) {
    const int max_it = 300;
    const double eps = 3e-14, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_it; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                               b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_cdf(double t, int dof) {
    if (dof < 1) throw std::invalid_argument("student_t_cdf: dof must be positive");
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * betai(0.5 * dof, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

double student_t_critical(double confidence, int dof) {
    if (confidence <= 0.0 || confidence >= 1.0)
        throw std::invalid_argument("student_t_critical: confidence must lie in (0,1)");
    const double target = 1.0 - 0.5 * (1.0 - confidence);
    double lo = 0.0, hi = 1e4;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (student_t_cdf(mid, dof) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

MeanCi mean_ci(const std::vector<double>& xs, double confidence) {
    MeanCi r;
    r.n = static_cast<int>(xs.size());
    if (xs.empty()) return r;
    double s = 0.0;
    for (double v : xs) s += v;
    r.mean = s / xs.size();
    r.lo = r.hi = r.mean;
    if (r.n < 2) return r;
    double ss = 0.0;
    for (double v : xs) ss += (v - r.mean) * (v - r.mean);
    const double sd = std::sqrt(ss / (r.n - 1));
    r.half_width = student_t_critical(confidence, r.n - 1) * sd / std::sqrt(static_cast<double>(r.n));
    r.lo = r.mean - r.half_width;
    r.hi = r.mean + r.half_width;
    r.defined = true;
    return r;
}

PairedTest paired_one_sided_p(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_one_sided_p: length mismatch");
    PairedTest r;
    r.n = static_cast<int>(a.size());
    if (r.n < 1) return r;
    std::vector<double> d(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d[i] = a[i] - b[i];
        s += d[i];
    }
    r.mean_diff = s / r.n;
    if (r.n < 2) {
        r.p_value = r.mean_diff > 0.0 ? 0.0 : 1.0;
        return r;
    }
    double ss = 0.0;
    for (double v : d) ss += (v - r.mean_diff) * (v - r.mean_diff);
    const double sd = std::sqrt(ss / (r.n - 1));
    if (sd < 1e-300) {
        r.p_value = r.mean_diff > 0.0 ? 0.0 : 1.0;
        return r;
    }
    r.t_stat = r.mean_diff / (sd / std::sqrt(static_cast<double>(r.n)));
    r.p_value = 1.0 - student_t_cdf(r.t_stat, r.n - 1);
    r.defined = true;
    return r;
}

}  // namespace dfl
