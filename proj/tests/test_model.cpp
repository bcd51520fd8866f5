#include <gtest/gtest.h>

#include <cmath>

#include "countlab/model.hpp"

using namespace countlab;

namespace {

ModelConfig tiny(int layers = 2, bool vision = false, int encoder_layers = 1) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.max_seq_len = 160;
    c.seed = 5;
    if (vision) {
        c.vision = VisionConfig{encoder_layers, 6};
    }
    return c;
}

/// Biases and gains start trivial; randomize them so the tests see every term.
template <class T>
void jitter(Transformer<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : m.parameters()) {
        p += static_cast<T>(0.05 * rng.normal());
    }
}

CountingSample text_sample(int count, std::uint64_t seed = 3) {
    TextTaskConfig c;
    c.count = count;
    c.category = Category::polytypic_replicate;
    c.seed = seed;
    return generate_text(c);
}

CountingSample scene_sample(int count, std::uint64_t seed = 3) {
    VisualTaskConfig c;
    c.count = count;
    c.grid_size = 6;
    c.category = Category::polytypic_unique;
    c.seed = seed;
    return generate_visual(c);
}

} // namespace

TEST(Forward, RowsNormalize) {
    Transformer<double> m(tiny());
    jitter(m, 1);
    const auto s = text_sample(7);
    const auto r = m.forward(s);
    ASSERT_EQ(r.logits.rows, s.length());
    for (int t = 0; t < r.logits.rows; ++t) {
        const auto p = next_token_distribution(r.logits.row_span(t));
        double sum = 0.0;
        for (const double x : p) {
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Forward, CausalMaskKeepsEarlierLogitsBitIdentical) {
    Transformer<float> m(tiny(3));
    jitter(m, 2);
    const auto s = text_sample(9);
    const auto base = m.forward(s);
    const auto& vocab = Vocabulary::standard();
    for (int p = 1; p < s.length(); ++p) {
        auto tokens = s.tokens;
        tokens[static_cast<std::size_t>(p)] = vocab.id(tokens[static_cast<std::size_t>(p)] == vocab.id("plum") ? "fig" : "plum");
        const auto other = m.forward(tokens);
        for (int t = 0; t < p; ++t) {
            for (int k = 0; k < base.logits.cols; ++k) {
                ASSERT_EQ(base.logits(t, k), other.logits(t, k)) << "position " << t << " after perturbing " << p;
            }
        }
    }
}

TEST(Forward, ZeroLayerModelMatchesClosedForm) {
    Transformer<double> m(tiny(0));
    jitter(m, 3);
    const auto s = text_sample(4);
    const auto r = m.forward(s);
    const auto& lay = m.layout();
    const int d = m.config().d_model;
    const int v = m.config().vocab_size;
    const auto& w = m.parameters();
    for (int t = 0; t < s.length(); ++t) {
        std::vector<double> x(static_cast<std::size_t>(d));
        double ms = 0.0;
        for (int k = 0; k < d; ++k) {
            x[k] = w[lay.tok_embed() + s.tokens[t] * d + k] + w[lay.pos_embed() + t * d + k];
            ms += x[k] * x[k];
        }
        const double inv = 1.0 / std::sqrt(ms / d + m.config().norm_eps);
        for (int j = 0; j < v; ++j) {
            double logit = w[lay.unembed_bias() + j];
            for (int k = 0; k < d; ++k) {
                logit += x[k] * inv * w[lay.final_norm() + k] * w[lay.unembed() + k * v + j];
            }
            EXPECT_NEAR(r.logits(t, j), logit, 1e-12);
        }
    }
}

TEST(Forward, DeterministicAcrossCalls) {
    Transformer<float> m(tiny());
    const auto s = text_sample(5);
    const auto a = m.forward(s);
    const auto b = m.forward(s);
    EXPECT_EQ(a.logits.data, b.logits.data);
}

TEST(Forward, LogitPositionsSubset) {
    Transformer<float> m(tiny());
    const auto s = text_sample(5);
    const auto all = m.forward(s);
    ForwardOptions<float> o;
    o.logit_positions = {s.readout_position};
    const auto one = m.forward(s, o);
    ASSERT_EQ(one.logits.rows, 1);
    for (int k = 0; k < one.logits.cols; ++k) {
        EXPECT_EQ(one.logits(0, k), all.logits(s.readout_position, k));
    }
}

TEST(Forward, RejectsBadInput) {
    Transformer<float> m(tiny());
    EXPECT_THROW(m.forward(std::vector<TokenId>{1, 100000}), InputError);
    EXPECT_THROW(m.forward(std::vector<TokenId>{}), InputError);
    EXPECT_THROW(m.forward(std::vector<TokenId>(161, 1)), InputError);
    ModelConfig bad = tiny();
    bad.n_heads = 3;
    EXPECT_THROW(Transformer<float>{bad}, ConfigError);
}

TEST(Forward, CacheCoversEveryHookPoint) {
    Transformer<float> m(tiny(3));
    const auto s = text_sample(6);
    const auto r = m.forward(s);
    EXPECT_EQ(r.cache.entry_count(), 4u * 3u * static_cast<std::size_t>(s.length()));
    // resid_post = resid_pre + attn_out + mlp_out
    for (int l = 0; l < 3; ++l) {
        for (int t = 0; t < s.length(); ++t) {
            const auto pre = r.cache.at({HookFamily::resid_pre, l, t});
            const auto a = r.cache.at({HookFamily::attn_out, l, t});
            const auto f = r.cache.at({HookFamily::mlp_out, l, t});
            const auto post = r.cache.at({HookFamily::resid_post, l, t});
            for (int k = 0; k < 16; ++k) {
                EXPECT_NEAR(post[k], pre[k] + a[k] + f[k], 1e-5f);
            }
            if (l > 0) {
                const auto prev = r.cache.at({HookFamily::resid_post, l - 1, t});
                EXPECT_TRUE(std::equal(prev.begin(), prev.end(), pre.begin()));
            }
        }
    }
    EXPECT_THROW(r.cache.at({HookFamily::resid_pre, 3, 0}), SpecError);
    EXPECT_THROW(r.cache.at({HookFamily::resid_pre, 0, s.length()}), SpecError);
    EXPECT_THROW(r.cache.at({HookFamily::patch_embed, 0, 0}), SpecError);
}

TEST(Norm, RmsOfOutputIsOne) {
    Rng rng(9);
    const double eps = 1e-5;
    Matrix<double> x(50, 24);
    for (auto& v : x.data) {
        v = 3.0 * rng.normal();
    }
    std::vector<double> gain(24, 1.0), inv;
    Matrix<double> out;
    detail::rms_norm(x, gain.data(), eps, out, inv);
    for (int t = 0; t < x.rows; ++t) {
        double ms = 0.0;
        for (int k = 0; k < x.cols; ++k) {
            ms += out(t, k) * out(t, k);
        }
        EXPECT_NEAR(std::sqrt(ms / x.cols), 1.0, 10 * eps);
    }
}

TEST(Attention, RowsAreCausalDistributions) {
    Transformer<double> m(tiny(2));
    jitter(m, 4);
    const auto s = text_sample(8);
    ForwardOptions<double> o;
    o.record_trace = true;
    const auto r = m.forward(s, o);
    for (const auto& block : r.trace->decoder) {
        for (const auto& p : block.probs) {
            for (int t = 0; t < p.rows; ++t) {
                double sum = 0.0;
                for (int u = 0; u < p.cols; ++u) {
                    EXPECT_GE(p(t, u), 0.0);
                    if (u > t) {
                        EXPECT_EQ(p(t, u), 0.0);
                    }
                    sum += p(t, u);
                }
                EXPECT_NEAR(sum, 1.0, 1e-9);
            }
        }
    }
}

TEST(Attention, EncoderIsBidirectional) {
    Transformer<double> m(tiny(1, true, 1));
    jitter(m, 5);
    const auto s = scene_sample(4);
    ForwardOptions<double> o;
    o.record_trace = true;
    const auto r = m.forward(s, o);
    const auto& p = r.trace->encoder.at(0).probs.at(0);
    ASSERT_EQ(p.rows, 36);
    for (int t = 0; t < p.rows; ++t) {
        double sum = 0.0;
        for (int u = 0; u < p.cols; ++u) {
            EXPECT_GT(p(t, u), 0.0);
            sum += p(t, u);
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Softmax, Examples) {
    const std::vector<double> flat(37, 2.5);
    for (const double p : next_token_distribution(std::span<const double>(flat))) {
        EXPECT_NEAR(p, 1.0 / 37, 1e-15);
    }
    const std::vector<double> two{0.0, std::log(3.0)};
    const auto p = next_token_distribution(std::span<const double>(two));
    EXPECT_NEAR(p[0], 0.25, 1e-15);
    EXPECT_NEAR(p[1], 0.75, 1e-15);

    Rng rng(1);
    std::vector<double> z(50), shifted(50);
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = 4.0 * rng.normal();
        shifted[i] = z[i] + 123.0;
    }
    const auto a = next_token_distribution(std::span<const double>(z));
    const auto b = next_token_distribution(std::span<const double>(shifted));
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-14);
    }
    const std::vector<double> bad{0.0, NAN};
    EXPECT_THROW(next_token_distribution(std::span<const double>(bad)), NumericError);
    const std::vector<double> huge{0.0, 1e308, -1e308};
    EXPECT_NEAR(next_token_distribution(std::span<const double>(huge))[1], 1.0, 1e-15);
}

TEST(DigitDistribution, Examples) {
    const auto& vocab = Vocabulary::standard();
    const int v = vocab.size();
    const std::vector<float> flat(static_cast<std::size_t>(v), 0.0f);
    const auto u = digit_distribution(std::span<const float>(flat));
    EXPECT_NEAR(u.raw_mass, 9.0 / v, 1e-12);
    double sum = 0.0;
    for (int n = 1; n <= 9; ++n) {
        EXPECT_NEAR(u.renormalized_at(n), 1.0 / 9, 1e-12);
        sum += u.renormalized_at(n);
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);

    auto margin = flat;
    margin[static_cast<std::size_t>(vocab.digit(4))] = 1e4f;
    const auto m = digit_distribution(std::span<const float>(margin));
    EXPECT_NEAR(m.renormalized_at(4), 1.0, 1e-6);
    EXPECT_EQ(m.argmax(), 4);

    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(static_cast<std::size_t>(v));
        for (auto& x : z) {
            x = 5.0 * rng.normal();
        }
        const auto d = digit_distribution(std::span<const double>(z));
        double s = 0.0;
        for (int n = 1; n <= 9; ++n) {
            EXPECT_LE(d.raw_at(n), 1.0);
            EXPECT_NEAR(d.renormalized_at(n), d.raw_at(n) / d.raw_mass, 1e-9);
            s += d.renormalized_at(n);
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Visual, NoEncoderLayersGivesDirectLookups) {
    Transformer<double> m(tiny(1, true, 0));
    jitter(m, 6);
    const auto s = scene_sample(5);
    const auto r = m.forward(s);
    ASSERT_TRUE(r.cache.has_patch_region());
    const auto& lay = m.layout();
    const auto& w = m.parameters();
    const auto& g = *s.grid;
    for (int c = 0; c < g.cells(); ++c) {
        const int id = s.tokens[static_cast<std::size_t>(g.first_position + c)];
        const auto row = r.cache.at({HookFamily::patch_embed, 0, g.first_position + c});
        for (int k = 0; k < 16; ++k) {
            const double want = w[lay.tok_embed() + id * 16 + k] + w[lay.row_embed() + (c / g.cols) * 16 + k] +
                                w[lay.col_embed() + (c % g.cols) * 16 + k];
            EXPECT_DOUBLE_EQ(row[k], want);
        }
    }
}

TEST(Visual, PatchPerturbationReachesOtherCellsAndTheReadout) {
    Transformer<double> m(tiny(2, true, 2));
    jitter(m, 7);
    const auto s = scene_sample(3);
    const auto base = m.forward(s);
    auto tokens = s.tokens;
    const int cell = 0;
    const int pos = s.grid->first_position + cell;
    const auto& vocab = Vocabulary::standard();
    tokens[static_cast<std::size_t>(pos)] = vocab.object_id(2, 3) == tokens[pos] ? vocab.object_id(1, 1) : vocab.object_id(2, 3);
    const auto other = m.forward(tokens, s.grid);
    for (int c = 1; c < s.grid->cells(); ++c) {
        const auto a = base.cache.at({HookFamily::patch_embed, 0, s.grid->first_position + c});
        const auto b = other.cache.at({HookFamily::patch_embed, 0, s.grid->first_position + c});
        EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin())) << "cell " << c;
    }
    double diff = 0.0;
    for (int k = 0; k < base.logits.cols; ++k) {
        diff += std::abs(base.logits(s.readout_position, k) - other.logits(s.readout_position, k));
    }
    EXPECT_GT(diff, 1e-9);
}

TEST(Visual, TextNeverInfluencesPatches) {
    Transformer<float> m(tiny(2, true, 2));
    jitter(m, 8);
    const auto s = scene_sample(3);
    const auto base = m.forward(s);
    auto tokens = s.tokens;
    const auto& vocab = Vocabulary::standard();
    for (int p = s.question_span.begin; p < s.question_span.end; ++p) {
        tokens[static_cast<std::size_t>(p)] = vocab.id("plum");
    }
    tokens[0] = vocab.id("<ph>");
    const auto other = m.forward(tokens, s.grid);
    EXPECT_EQ(base.cache.patch_embed.data, other.cache.patch_embed.data);
}

TEST(Visual, IdenticalContentAndPositionGiveIdenticalLogits) {
    Transformer<float> m(tiny(2, true, 1));
    const auto s = scene_sample(2);
    auto tokens = s.tokens;
    // Swap two background cells: every (content, position) pair is unchanged.
    const auto& vocab = Vocabulary::standard();
    std::vector<int> bg;
    for (int c = 0; c < s.grid->cells(); ++c) {
        if (tokens[s.grid->first_position + c] == vocab.background_id()) {
            bg.push_back(s.grid->first_position + c);
        }
    }
    ASSERT_GE(bg.size(), 2u);
    std::swap(tokens[bg[0]], tokens[bg[1]]);
    EXPECT_EQ(m.forward(s).logits.data, m.forward(tokens, s.grid).logits.data);
}

TEST(Visual, GridMismatchIsAConfigError) {
    Transformer<float> text_only(tiny(1));
    const auto s = scene_sample(3);
    EXPECT_THROW(text_only.forward(s), ConfigError);
    Transformer<float> m(tiny(1, true, 1));
    VisualTaskConfig c;
    c.count = 3;
    c.grid_size = 10;
    EXPECT_THROW(m.forward(generate_visual(c)), ConfigError);
}

TEST(Model, CastPreservesWeights) {
    Transformer<float> m(tiny());
    const auto d = m.cast<double>();
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        EXPECT_EQ(static_cast<double>(m.parameters()[i]), d.parameters()[i]);
    }
    EXPECT_EQ(m.layout().total(), m.parameters().size());
}

TEST(Model, InitIsSeededAndScaled) {
    ModelConfig c;
    c.seed = 11;
    Transformer<float> a(c), b(c);
    EXPECT_EQ(a.parameters(), b.parameters());
    const auto& t = a.layout().find("layers.0.w1");
    double ss = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        ss += std::pow(a.parameters()[t.offset + i], 2);
    }
    EXPECT_NEAR(ss / t.size(), 2.0 / (t.rows + t.cols), 0.1 * 2.0 / (t.rows + t.cols));
}
