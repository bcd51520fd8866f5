#include <gtest/gtest.h>

#include <cmath>

#include "countlab/activations.hpp"
#include "countlab/metrics.hpp"

using namespace countlab;

namespace {

ModelConfig tiny(bool vision = false) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 3;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.max_seq_len = 96;
    c.seed = 23;
    if (vision) {
        c.vision = VisionConfig{1, 6};
    }
    return c;
}

template <class T>
Transformer<T> jittered(bool vision = false) {
    Transformer<T> m(tiny(vision));
    Rng rng(77);
    for (auto& p : m.parameters()) {
        p += static_cast<T>(0.2 * rng.normal());
    }
    return m;
}

CountingSample text(int count, std::uint64_t seed, Category cat = Category::monotypic) {
    TextTaskConfig c;
    c.count = count;
    c.category = cat;
    c.seed = seed;
    c.with_answer = false;
    return generate_text(c);
}

CountingSample scene(int count, std::uint64_t seed) {
    VisualTaskConfig c;
    c.count = count;
    c.grid_size = 6;
    c.seed = seed;
    c.with_answer = false;
    return generate_visual(c);
}

double kl(const PatchRun& r) { return kl_divergence(r.patched, r.baseline); }

} // namespace

TEST(Capture, BookkeepingAndDeterminism) {
    const auto m = jittered<double>();
    const auto s = text(6, 1);
    const auto a = capture(m, s);
    const auto b = capture(m, s);
    EXPECT_EQ(a.entry_count(), 4u * 3u * static_cast<std::size_t>(s.length()));
    for (int f = 0; f < 4; ++f) {
        for (int l = 0; l < 3; ++l) {
            EXPECT_EQ(a.decoder[f][l].data, b.decoder[f][l].data);
        }
    }
    for (int l = 0; l < 3; ++l) {
        for (int t = 0; t < s.length(); ++t) {
            const auto pre = a.at({HookFamily::resid_pre, l, t});
            const auto post = a.at({HookFamily::resid_post, l, t});
            const auto at = a.at({HookFamily::attn_out, l, t});
            const auto ml = a.at({HookFamily::mlp_out, l, t});
            for (int k = 0; k < 16; ++k) {
                EXPECT_NEAR(post[k] - pre[k], at[k] + ml[k], 1e-12);
            }
        }
    }
    EXPECT_FALSE(a.sample_id.empty());
}

TEST(Patch, EmptySpecIsIdentity) {
    const auto m = jittered<double>();
    const auto s = text(5, 2);
    for (const auto regime : {Regime::online, Regime::offline}) {
        for (const auto mode : {InterventionMode::zero, InterventionMode::interchange}) {
            InterventionSpec spec;
            spec.mode = mode;
            spec.regime = regime;
            const auto src = capture(m, s);
            const auto r = run_patched(m, s, spec, &src);
            EXPECT_LT(kl(r), 1e-12);
            EXPECT_EQ(r.patched, r.baseline);
        }
    }
}

TEST(Patch, SelfInterchangeIsIdentityAtEveryLayer) {
    const auto m = jittered<double>();
    const auto s = text(7, 3, Category::polytypic_unique);
    const auto cache = capture(m, s);
    for (const auto regime : {Regime::online, Regime::offline}) {
        for (const auto family : kDecoderFamilies) {
            for (int l = 0; l < 3; ++l) {
                std::vector<int> all;
                for (int p = 0; p < s.length(); ++p) {
                    all.push_back(p);
                }
                auto spec = InterventionSpec::at_positions(InterventionMode::interchange, all, family, regime);
                spec.layers = {l};
                const auto r = run_patched(m, s, spec, &cache);
                EXPECT_LT(kl(r), 1e-12);
            }
        }
    }
}

TEST(Patch, FinalLayerFullReadoutPatchReproducesSource) {
    const auto m = jittered<float>();
    const auto target = text(3, 4);
    const auto source = text(8, 5);
    const auto cache = capture(m, source);
    for (const auto regime : {Regime::online, Regime::offline}) {
        InterventionSpec spec;
        spec.mode = InterventionMode::interchange;
        spec.regime = regime;
        spec.layers = {2};
        spec.position_map = {{source.readout_position, target.readout_position}};
        const auto r = run_patched(m, target, spec, &cache, nullptr, &source);
        EXPECT_EQ(r.patched, r.source);
        EXPECT_EQ(r.r, 8);
        EXPECT_EQ(r.r_prime, 3);
    }
}

TEST(Patch, OnlineEqualsOfflineAtTheFinalLayer) {
    const auto m = jittered<double>();
    const auto target = text(6, 6);
    const auto source = text(6, 7); // same length, different items
    const auto cache = capture(m, source);
    for (const auto family : kDecoderFamilies) {
        for (const auto mode : {InterventionMode::zero, InterventionMode::interchange}) {
            auto spec = InterventionSpec::at_positions(mode, {1, 3, 5, target.readout_position}, family);
            spec.layers = {2};
            const auto on = run_patched(m, target, spec, &cache);
            spec.regime = Regime::offline;
            const auto off = run_patched(m, target, spec, &cache);
            EXPECT_EQ(on.patched, off.patched);
        }
    }
}

TEST(Patch, OfflineFreezesUnpatchedPositions) {
    // Offline: a patch on a context position at layer 0 cannot reach the
    // unpatched readout. Online it does.
    const auto m = jittered<double>();
    const auto s = text(5, 8);
    auto spec = InterventionSpec::at_positions(InterventionMode::zero, s.item_positions);
    spec.layers = {0};
    const auto on = run_patched(m, s, spec);
    spec.regime = Regime::offline;
    const auto off = run_patched(m, s, spec);
    EXPECT_GT(kl(on), 1e-8);
    EXPECT_EQ(off.patched, off.baseline);
}

TEST(Patch, NeverMutatesTheSourceCache) {
    const auto m = jittered<double>();
    const auto target = text(6, 9);
    const auto source = text(4, 10);
    const auto cache = capture(m, source);
    const auto copy = cache;
    auto spec = InterventionSpec::at_positions(InterventionMode::interchange, {1, 2, 3});
    run_patched(m, target, spec, &cache);
    for (int f = 0; f < 4; ++f) {
        for (int l = 0; l < 3; ++l) {
            EXPECT_EQ(cache.decoder[f][l].data, copy.decoder[f][l].data);
        }
    }
}

TEST(Patch, ZeroVectorAdditionIsIdentity) {
    const auto m = jittered<double>();
    const auto s = text(5, 11);
    auto spec = InterventionSpec::at_positions(InterventionMode::add_vector, s.item_positions);
    spec.vector.assign(16, 0.0);
    const auto r = run_patched(m, s, spec);
    EXPECT_EQ(r.patched, r.baseline);
    spec.vector[3] = 1.0;
    EXPECT_GT(kl(run_patched(m, s, spec)), 0.0);
}

TEST(Patch, ZeroPatchMatchesManualEditor) {
    // Independent oracle: the same edit through a hand-written hook.
    const auto m = jittered<double>();
    const auto s = text(4, 12);
    auto spec = InterventionSpec::at_positions(InterventionMode::zero, {2}, HookFamily::attn_out);
    spec.layers = {1};
    const auto r = run_patched(m, s, spec);
    HookEditor<double> ed = [](HookFamily f, int l, Matrix<double>& v, int) {
        if (f == HookFamily::attn_out && l == 1) {
            std::fill(v.row(2), v.row(2) + 16, 0.0);
        }
    };
    ForwardOptions<double> o;
    o.editor = &ed;
    o.logit_positions = {s.readout_position};
    const auto want = next_token_distribution(m.forward(s, o).logits.row_span(0));
    EXPECT_EQ(r.patched, want);
}

TEST(Patch, SpecErrors) {
    const auto m = jittered<double>();
    const auto s = text(4, 13);
    auto spec = InterventionSpec::at_positions(InterventionMode::interchange, {1});
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
    spec = InterventionSpec::at_positions(InterventionMode::zero, {s.length()});
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
    spec = InterventionSpec::at_positions(InterventionMode::zero, {1});
    spec.layers = {3};
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
    spec = InterventionSpec::at_positions(InterventionMode::add_vector, {1});
    spec.vector.assign(5, 1.0);
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
    spec = InterventionSpec::at_positions(InterventionMode::mean, {1});
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
    spec = InterventionSpec::at_positions(InterventionMode::zero, {1}, HookFamily::patch_embed);
    EXPECT_THROW(run_patched(m, s, spec), SpecError);
}

TEST(Patch, SpecJsonRoundTrip) {
    InterventionSpec s;
    s.mode = InterventionMode::add_vector;
    s.family = HookFamily::mlp_out;
    s.layers = {1, 2};
    s.position_map = {{3, 4}, {5, 6}};
    s.regime = Regime::offline;
    s.vector_by_layer[1] = std::vector<double>(4, 0.5);
    const nlohmann::json j = s;
    EXPECT_EQ(nlohmann::json(j.get<InterventionSpec>()), j);
    EXPECT_THROW(nlohmann::json({{"mode", "swap"}}).get<InterventionSpec>(), ConfigError);
}

TEST(Patch, VisualCellsAddressPatchEmbeddings) {
    const auto m = jittered<double>(true);
    const auto target = scene(3, 14);
    const auto source = scene(7, 15);
    const auto cache = capture(m, source);
    // Interchanging every cell's embedding makes the decoder see the source image.
    InterventionSpec spec;
    spec.mode = InterventionMode::interchange;
    spec.family = HookFamily::patch_embed;
    for (int c = 0; c < target.grid->cells(); ++c) {
        spec.position_map.emplace_back(source.grid->first_position + c, target.grid->first_position + c);
    }
    const auto r = run_patched(m, target, spec, &cache, nullptr, &source);
    ASSERT_EQ(target.readout_position - target.grid->first_position,
              source.readout_position - source.grid->first_position);
    EXPECT_EQ(target.tokens.size(), source.tokens.size());
    for (std::size_t i = 0; i < r.patched.size(); ++i) {
        EXPECT_NEAR(r.patched[i], r.source[i], 1e-12);
    }
}

TEST(MeanStore, OracleAndIdentities) {
    const auto m = jittered<double>();
    std::vector<CountingSample> samples;
    for (int i = 0; i < 6; ++i) {
        samples.push_back(text(9, 20 + static_cast<std::uint64_t>(i), Category::polytypic_unique));
    }
    const auto store = compute_mean_store(m, std::span<const CountingSample>(samples));
    for (int l = 0; l < 3; ++l) {
        for (int k = 1; k <= 9; ++k) {
            // Two-pass oracle: sum, then divide.
            std::vector<long double> sum(16, 0.0L);
            for (const auto& s : samples) {
                const auto c = capture(m, s);
                const auto v = c.at({HookFamily::resid_post, l, s.list_positions[k - 1]});
                for (int j = 0; j < 16; ++j) {
                    sum[j] += v[j];
                }
            }
            const auto mean = store.mean(HookFamily::resid_post, l, "item:" + std::to_string(k));
            for (int j = 0; j < 16; ++j) {
                EXPECT_NEAR(mean[j], static_cast<double>(sum[j] / samples.size()), 1e-10);
            }
            EXPECT_EQ(store.samples(HookFamily::resid_post, l, "item:" + std::to_string(k)), 6);
        }
    }
    EXPECT_TRUE(store.contains(HookFamily::resid_post, 0, "sep:8"));
    EXPECT_THROW(store.mean(HookFamily::resid_post, 0, "item:10"), MissingDataError);
    EXPECT_THROW(store.mean(HookFamily::attn_out, 0, "item:1"), MissingDataError);

    const std::vector<CountingSample> one{samples[0]};
    const auto single = compute_mean_store(m, std::span<const CountingSample>(one));
    const std::vector<CountingSample> three{samples[0], samples[0], samples[0]};
    const auto triple = compute_mean_store(m, std::span<const CountingSample>(three));
    const auto c0 = capture(m, samples[0]);
    for (int k = 1; k <= 9; ++k) {
        const auto a = single.mean(HookFamily::resid_post, 1, "item:" + std::to_string(k));
        const auto b = triple.mean(HookFamily::resid_post, 1, "item:" + std::to_string(k));
        const auto v = c0.at({HookFamily::resid_post, 1, samples[0].list_positions[k - 1]});
        for (int j = 0; j < 16; ++j) {
            EXPECT_EQ(a[j], v[j]);
            EXPECT_NEAR(b[j], v[j], 1e-14 * std::max(1.0, std::abs(v[j])));
        }
    }
}

TEST(MeanStore, PositionDifferenceVectors) {
    const auto m = jittered<double>();
    std::vector<CountingSample> samples;
    for (int i = 0; i < 4; ++i) {
        samples.push_back(text(9, 40 + static_cast<std::uint64_t>(i)));
    }
    const auto store = compute_mean_store(m, std::span<const CountingSample>(samples));
    for (const double x : position_difference_vector(store, 3, 3, 1)) {
        EXPECT_EQ(x, 0.0);
    }
    const auto ij = position_difference_vector(store, 2, 5, 1);
    const auto ji = position_difference_vector(store, 5, 2, 1);
    const auto jk = position_difference_vector(store, 5, 8, 1);
    const auto ik = position_difference_vector(store, 2, 8, 1);
    for (int k = 0; k < 16; ++k) {
        EXPECT_EQ(ij[k], -ji[k]);
        EXPECT_NEAR(ij[k] + jk[k], ik[k], 1e-12);
    }
    EXPECT_THROW(position_difference_vector(store, 1, 10, 1), MissingDataError);
}

TEST(MeanStore, MeanPatchUsesTheSlotMean) {
    const auto m = jittered<double>();
    std::vector<CountingSample> samples;
    for (int i = 0; i < 3; ++i) {
        samples.push_back(text(6, 60 + static_cast<std::uint64_t>(i)));
    }
    const auto store = compute_mean_store(m, std::span<const CountingSample>(samples));
    // Mean patching with a store built from the target alone is the identity.
    const std::vector<CountingSample> only{samples[0]};
    const auto self = compute_mean_store(m, std::span<const CountingSample>(only));
    auto spec = InterventionSpec::at_positions(InterventionMode::mean, samples[0].item_positions);
    const auto r = run_patched(m, samples[0], spec, nullptr, &self);
    EXPECT_LT(kl(r), 1e-20);
    const auto r2 = run_patched(m, samples[0], spec, nullptr, &store);
    EXPECT_GT(kl(r2), 0.0);
}
