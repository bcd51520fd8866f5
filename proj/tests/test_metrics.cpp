#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "countlab/metrics.hpp"
#include "countlab/rng.hpp"

using namespace countlab;

TEST(Ci, Examples) {
    EXPECT_DOUBLE_EQ(ci_score(1, 0, 1, 0), 1.0);
    EXPECT_DOUBLE_EQ(ci_score(0.3, 0.3, 0.6, 0.6), 0.0);
    EXPECT_NEAR(ci_score(0.8, 0.2, 0.7, 0.1), 0.6, 1e-15);
    EXPECT_THROW(ci_score(1.2, 0, 0, 0), InputError);
    EXPECT_THROW(ci_score(0, -0.1, 0, 0), InputError);
    EXPECT_THROW(ci_score(0, 0, NAN, 0), InputError);
}

TEST(Ci, AntisymmetricAndBounded) {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(), d = rng.uniform();
        const double v = ci_score(a, b, c, d);
        EXPECT_EQ(v, -ci_score(b, a, d, c));
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(IndirectEffect, Examples) {
    EXPECT_NEAR(indirect_effect(0.4, 0.2, 0.6, 0.3), 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(indirect_effect(0.3, 0.3, 0.5, 0.5), 0.0);
    EXPECT_NEAR(indirect_effect(0.7, 0.7, 0.5, 0.25), 0.5, 1e-15);
    EXPECT_THROW(indirect_effect(0.4, 0.0, 0.6, 0.3), UndefinedMetricError);
    EXPECT_THROW(indirect_effect(0.4, 0.2, 0.6, 0.0), UndefinedMetricError);
    const auto r = ie_report(0.4, 0.0, 0.6, 0.3, "s");
    EXPECT_TRUE(r.undefined);
}

TEST(LogitDifference, Examples) {
    EXPECT_DOUBLE_EQ(logit_difference(2.0, 0.5), 1.5);
    EXPECT_DOUBLE_EQ(logit_difference(0.7, 0.7), 0.0);
    // Equals the log-ratio of the softmax probabilities of the same row.
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> z(20);
        for (auto& x : z) {
            x = 3 * rng.normal();
        }
        double zmax = *std::max_element(z.begin(), z.end()), sum = 0;
        for (const double x : z) {
            sum += std::exp(x - zmax);
        }
        const double p3 = std::exp(z[3] - zmax) / sum, p7 = std::exp(z[7] - zmax) / sum;
        EXPECT_NEAR(logit_difference(z[3], z[7]), std::log(p3 / p7), 1e-9);
        EXPECT_NEAR(logit_difference(z[3] + 5.5, z[7] + 5.5), logit_difference(z[3], z[7]), 1e-12);
    }
}

TEST(Kl, Examples) {
    const std::vector<double> a{0.2, 0.3, 0.5};
    EXPECT_EQ(kl_divergence(a, a), 0.0);
    EXPECT_NEAR(kl_divergence(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}), 0.693147180559945, 1e-14);
    EXPECT_TRUE(std::isinf(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0})));
    EXPECT_THROW(kl_divergence(std::vector<double>{0.5, 0.6}, std::vector<double>{0.5, 0.5}), InputError);
    EXPECT_THROW(kl_divergence(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), InputError);
}

TEST(Kl, GibbsInequalityOnRandomPairs) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(30));
        std::vector<double> p(n), q(n);
        double sp = 0, sq = 0;
        for (int i = 0; i < n; ++i) {
            p[i] = rng.uniform();
            q[i] = rng.uniform() + 1e-9;
            sp += p[i];
            sq += q[i];
        }
        for (int i = 0; i < n; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        EXPECT_GE(kl_divergence(p, q), -1e-12);
    }
}

TEST(ProbabilityDrop, Examples) {
    EXPECT_EQ(probability_drop(0.9, 0.9), 0.0);
    EXPECT_EQ(probability_drop(1.0, 0.0), 1.0);
    EXPECT_NEAR(probability_drop(0.7, 0.2), 0.5, 1e-15);
    EXPECT_THROW(probability_drop(1.5, 0.2), InputError);
}

TEST(Aggregate, Examples) {
    const std::vector<double> one{0.37};
    const auto a = aggregate(one);
    EXPECT_EQ(a.mean, 0.37);
    EXPECT_EQ(a.sd, 0.0);
    EXPECT_EQ(a.n, 1);
    const auto b = aggregate(std::vector<double>{0.0, 1.0});
    EXPECT_EQ(b.mean, 0.5);
    EXPECT_EQ(b.sd, 0.5); // population convention
    EXPECT_THROW(aggregate(std::vector<double>{}), AggregationError);
}

TEST(Aggregate, ExcludesUndefinedAndMatchesNaiveOracle) {
    Rng rng(6);
    std::vector<MetricReport> reports;
    std::vector<double> kept;
    for (int i = 0; i < 500; ++i) {
        const double pr = i % 10 == 0 ? 0.0 : rng.uniform();
        auto r = ie_report(rng.uniform(), pr, rng.uniform(), 0.5, std::to_string(i));
        if (!r.undefined) {
            kept.push_back(r.value);
        }
        reports.push_back(r);
    }
    const auto agg = aggregate(std::span<const MetricReport>(reports));
    EXPECT_EQ(agg.excluded, 50);
    EXPECT_EQ(agg.n, 450);
    long double s = 0;
    for (const double v : kept) {
        s += v;
    }
    const long double mean = s / kept.size();
    long double ss = 0;
    for (const double v : kept) {
        ss += (v - mean) * (v - mean);
    }
    EXPECT_NEAR(agg.mean, static_cast<double>(mean), 1e-12 * std::max(1.0, std::abs(agg.mean)));
    EXPECT_NEAR(agg.sd, std::sqrt(static_cast<double>(ss / kept.size())), 1e-12 * std::max(1.0, agg.sd));

    std::vector<MetricReport> all_bad{ie_report(0.1, 0.0, 0.1, 0.1, "x")};
    EXPECT_THROW(aggregate(std::span<const MetricReport>(all_bad)), AggregationError);
    std::vector<MetricReport> mixed{ci_report(0.1, 0.1, 0.1, 0.1, "a"), ie_report(0.1, 0.2, 0.1, 0.1, "b")};
    EXPECT_THROW(aggregate(std::span<const MetricReport>(mixed)), AggregationError);
}

TEST(MetricCsv, HasDeclaredColumns) {
    std::vector<MetricReport> reports{ci_report(0.8, 0.2, 0.7, 0.1, "s1"), ie_report(0.1, 0.0, 0.1, 0.1, "s2")};
    std::ostringstream out;
    write_metric_csv(out, reports);
    const std::string text = out.str();
    EXPECT_EQ(text.substr(0, text.find('\n')), "metric,value,p_tilde_star,p_tilde_prime,p_rp_prime,p_rp_star,sample_id");
    EXPECT_NE(text.find("indirect_effect,,0.1,0,0.1,0.1,\"s2\""), std::string::npos);
}
