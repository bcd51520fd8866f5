#pragma once

#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/error.hpp"

namespace countlab {

namespace detail {

inline void check_probability(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw InputError(std::string(name) + " must be a probability in [0, 1], got " + std::to_string(p));
    }
}

} // namespace detail

/// Causal influence: 1/2 [(P(r~|C*) - P(r~|C')) + (P(r'|C') - P(r'|C*))].
inline double ci_score(double p_tilde_star, double p_tilde_prime, double p_rp_prime, double p_rp_star) {
    detail::check_probability(p_tilde_star, "P(r~|C*)");
    detail::check_probability(p_tilde_prime, "P(r~|C')");
    detail::check_probability(p_rp_prime, "P(r'|C')");
    detail::check_probability(p_rp_star, "P(r'|C*)");
    return 0.5 * ((p_tilde_star - p_tilde_prime) + (p_rp_prime - p_rp_star));
}

/// Relative-change analog of ci_score.
inline double indirect_effect(double p_r_star, double p_r_prime, double p_rp_prime, double p_rp_star) {
    detail::check_probability(p_r_star, "P(r|C*)");
    detail::check_probability(p_r_prime, "P(r|C')");
    detail::check_probability(p_rp_prime, "P(r'|C')");
    detail::check_probability(p_rp_star, "P(r'|C*)");
    if (p_r_prime == 0.0 || p_rp_star == 0.0) {
        throw UndefinedMetricError("indirect effect undefined: zero denominator (P(r|C')=" + std::to_string(p_r_prime) +
                                   ", P(r'|C*)=" + std::to_string(p_rp_star) + ")");
    }
    return 0.5 * ((p_r_star - p_r_prime) / p_r_prime + (p_rp_prime - p_rp_star) / p_rp_star);
}

inline double logit_difference(double logit_r, double logit_rp) { return logit_r - logit_rp; }

/// KL(p || q) in nats; +inf when q = 0 where p > 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) {
        throw InputError("distributions must be non-empty and of equal length");
    }
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0 || !std::isfinite(p[i]) || !std::isfinite(q[i])) {
            throw InputError("distribution entries must be finite and non-negative");
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
        throw InputError("distributions must sum to 1 within 1e-6");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) {
            continue;
        }
        if (q[i] == 0.0) {
            return std::numeric_limits<double>::infinity();
        }
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return kl;
}

inline double probability_drop(double p_before, double p_after) {
    detail::check_probability(p_before, "p_before");
    detail::check_probability(p_after, "p_after");
    return p_before - p_after;
}

/// One metric evaluation with its inputs.
struct MetricReport {
    std::string metric;
    double value = 0.0;
    std::vector<double> components;
    std::string sample_id;
    bool undefined = false; ///< excluded from aggregation, still counted
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"metric", r.metric}, {"components", r.components}, {"sample_id", r.sample_id}, {"undefined", r.undefined}};
    j["value"] = r.undefined ? nlohmann::json(nullptr) : nlohmann::json(r.value);
}

/// Evaluates ci_score or indirect_effect into a report; undefined values are
/// recorded rather than thrown.
inline MetricReport ci_report(double p_tilde_star, double p_tilde_prime, double p_rp_prime, double p_rp_star,
                              std::string sample_id) {
    return {"ci", ci_score(p_tilde_star, p_tilde_prime, p_rp_prime, p_rp_star),
            {p_tilde_star, p_tilde_prime, p_rp_prime, p_rp_star}, std::move(sample_id), false};
}

inline MetricReport ie_report(double p_r_star, double p_r_prime, double p_rp_prime, double p_rp_star,
                              std::string sample_id) {
    MetricReport r{"indirect_effect", 0.0, {p_r_star, p_r_prime, p_rp_prime, p_rp_star}, std::move(sample_id), false};
    try {
        r.value = indirect_effect(p_r_star, p_r_prime, p_rp_prime, p_rp_star);
    } catch (const UndefinedMetricError&) {
        r.undefined = true;
    }
    return r;
}

/// Mean and population standard deviation (divide by n).
struct Aggregate {
    double mean = 0.0;
    double sd = 0.0;
    int n = 0;
    int excluded = 0;
};

inline void to_json(nlohmann::json& j, const Aggregate& a) {
    j = {{"mean", a.mean}, {"sd", a.sd}, {"n", a.n}, {"excluded", a.excluded}};
}

inline Aggregate aggregate(std::span<const double> values, int excluded = 0) {
    if (values.empty()) {
        throw AggregationError("nothing to aggregate (" + std::to_string(excluded) + " excluded)");
    }
    Aggregate a;
    a.n = static_cast<int>(values.size());
    a.excluded = excluded;
    double sum = 0.0;
    for (const double v : values) {
        sum += v;
    }
    a.mean = sum / a.n;
    double ss = 0.0;
    for (const double v : values) {
        ss += (v - a.mean) * (v - a.mean);
    }
    a.sd = std::sqrt(ss / a.n);
    return a;
}

inline Aggregate aggregate(std::span<const MetricReport> reports) {
    if (reports.empty()) {
        throw AggregationError("no reports");
    }
    std::vector<double> values;
    int excluded = 0;
    for (const auto& r : reports) {
        if (r.metric != reports.front().metric) {
            throw AggregationError("cannot aggregate mixed metrics " + r.metric + " and " + reports.front().metric);
        }
        if (r.undefined) {
            ++excluded;
        } else {
            values.push_back(r.value);
        }
    }
    return aggregate(std::span<const double>(values), excluded);
}

inline void write_metric_csv(std::ostream& out, std::span<const MetricReport> reports) {
    out << "metric,value,p_tilde_star,p_tilde_prime,p_rp_prime,p_rp_star,sample_id\n";
    for (const auto& r : reports) {
        out << r.metric << ',';
        if (!r.undefined) {
            out << r.value;
        }
        for (std::size_t i = 0; i < 4; ++i) {
            out << ',';
            if (i < r.components.size()) {
                out << r.components[i];
            }
        }
        std::string id = r.sample_id;
        for (auto& ch : id) {
            if (ch == '"') {
                ch = '\'';
            }
        }
        out << ",\"" << id << "\"\n";
    }
}

} // namespace countlab
