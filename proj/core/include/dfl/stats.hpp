#pragma once

#include <vector>

namespace dfl {

/// CDF of Student's t distribution with dof degrees of freedom.
double student_t_cdf(double t, int dof);
/// Two-sided critical value: P(|T| <= t) = confidence.
double student_t_critical(double confidence, int dof);

struct MeanCi {
    double mean = 0.0;
    double half_width = 0.0;
    double lo = 0.0, hi = 0.0;
    int n = 0;
    bool defined = false;  // false when n < 2 (no interval)
};

/// Sample mean with a two-sided Student-t confidence interval.
MeanCi mean_ci(const std::vector<double>& xs, double confidence = 0.95);

struct PairedTest {
    double t_stat = 0.0;
    double p_value = 1.0;
    double mean_diff = 0.0;
    int n = 0;
    bool defined = false;  // false when n < 2 or the differences have zero spread
};

/// One-sided paired t-test of mean(a - b) > 0. With zero-spread differences
/// the test is undefined; p_value degenerates to 0 (all diffs positive) or 1.
PairedTest paired_one_sided_p(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace dfl
