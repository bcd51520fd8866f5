#include <gtest/gtest.h>

#include <sstream>

#include "countlab/countscope.hpp"
#include "countlab/metrics.hpp"

using namespace countlab;

namespace {

ModelConfig tiny(bool vision = false) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 4;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.max_seq_len = 128;
    c.seed = 31;
    if (vision) {
        c.vision = VisionConfig{1, 6};
    }
    return c;
}

template <class T>
Transformer<T> jittered(bool vision = false) {
    Transformer<T> m(tiny(vision));
    Rng rng(5);
    for (auto& p : m.parameters()) {
        p += static_cast<T>(0.2 * rng.normal());
    }
    return m;
}

CountingSample list9(std::uint64_t seed) {
    TextTaskConfig c;
    c.count = 9;
    c.seed = seed;
    c.with_answer = false;
    return generate_text(c);
}

} // namespace

TEST(Probe, TextTemplates) {
    ProbeConfig c;
    const auto one = build_probe(c);
    EXPECT_EQ(one.render(), "<ph>\nQuestion: How many items are there in the above sentence?");
    EXPECT_EQ(one.placeholder_positions.size(), 1u);
    EXPECT_FALSE(one.answer_position.has_value());
    c.n_placeholders = 3;
    const auto three = build_probe(c);
    EXPECT_EQ(three.separator_positions.size(), 2u);
    EXPECT_EQ(three.render(), "<ph>, <ph>, <ph>\nQuestion: How many items are there in the above sentence?");
    EXPECT_EQ(build_probe(c).tokens, three.tokens);
    c.order = Order::question_first;
    c.question = QuestionKind::specific;
    EXPECT_EQ(build_probe(c).render(), "Question: How many <ph> are there in the following sentence?\n<ph>, <ph>, <ph>");
}

TEST(Probe, VisualTemplate) {
    ProbeConfig c;
    c.modality = Modality::visual;
    c.n_placeholders = 2;
    const auto p = build_probe(c);
    ASSERT_TRUE(p.grid.has_value());
    EXPECT_EQ(p.grid->rows, 1);
    EXPECT_EQ(p.grid->cols, 2);
    EXPECT_EQ(p.placeholder_positions, (std::vector<int>{p.grid->first_position, p.grid->first_position + 1}));
    EXPECT_NE(p.render().find("How many objects are there in the image?"), std::string::npos);
}

TEST(Probe, ConfigValidation) {
    const ModelConfig m = tiny();
    ProbeConfig c;
    c.inject_position = 1;
    EXPECT_THROW(c.validate(m), ConfigError);
    c = ProbeConfig{};
    c.layer_cutoff = 5;
    EXPECT_THROW(c.validate(m), ConfigError);
    c.layer_cutoff = 0;
    EXPECT_THROW(c.validate(m), ConfigError);
    c = ProbeConfig{};
    c.modality = Modality::visual;
    EXPECT_THROW(c.validate(m), ConfigError);
    const nlohmann::json j = ProbeConfig{};
    EXPECT_EQ(nlohmann::json(j.get<ProbeConfig>()), j);
}

TEST(Probe, PlaceholderNeverInSourceContexts) {
    const TokenId ph = Vocabulary::standard().placeholder_id();
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        TextTaskConfig c;
        c.count = 1 + static_cast<int>(seed % 9);
        c.category = static_cast<Category>(seed % 3);
        c.seed = seed;
        const auto s = generate_text(c);
        EXPECT_EQ(std::count(s.tokens.begin(), s.tokens.end(), ph), 0);
        VisualTaskConfig v;
        v.count = c.count;
        v.grid_size = 6;
        v.seed = seed;
        const auto sv = generate_visual(v);
        EXPECT_EQ(std::count(sv.tokens.begin(), sv.tokens.end(), ph), 0);
    }
}

TEST(Decode, SelfDecodeIsIdentityAtEveryCutoff) {
    const auto m = jittered<double>();
    ProbeConfig c;
    const auto probe = build_probe(c);
    const auto cache = capture(m, probe);
    ForwardOptions<double> o;
    o.logit_positions = {probe.readout_position};
    const auto clean = next_token_distribution(m.forward(probe, o).logits.row_span(0));
    const auto clean_digits = digit_distribution(m.forward(probe, o).logits.row_span(0));
    for (int cut = 1; cut <= 4; ++cut) {
        c.layer_cutoff = cut;
        const auto d = decode(m, cache, probe.placeholder_positions[0], c);
        for (int n = 1; n <= 9; ++n) {
            EXPECT_NEAR(d.renormalized_at(n), clean_digits.renormalized_at(n), 1e-12);
        }
    }
    (void)clean;
}

TEST(Decode, FullCutoffEqualsAllLayers) {
    const auto m = jittered<float>();
    const auto s = list9(3);
    const auto cache = capture(m, s);
    ProbeConfig all;
    ProbeConfig cut;
    cut.layer_cutoff = 4;
    for (const int p : s.item_positions) {
        const auto a = decode(m, cache, p, all);
        const auto b = decode(m, cache, p, cut);
        EXPECT_EQ(a.renormalized, b.renormalized);
        EXPECT_EQ(a.raw, b.raw);
        double sum = 0.0;
        for (const double x : a.renormalized) {
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Decode, DependsOnlyOnLayersUpToTheCutoff) {
    const auto m = jittered<double>();
    const auto s = list9(4);
    const auto cache = capture(m, s);
    for (int cut = 1; cut < 4; ++cut) {
        auto zeroed = cache;
        for (int f = 0; f < 4; ++f) {
            for (int l = cut; l < 4; ++l) {
                zeroed.decoder[f][l].fill(0.0);
            }
        }
        ProbeConfig c;
        c.layer_cutoff = cut;
        const auto a = decode(m, cache, s.item_positions[4], c);
        const auto b = decode(m, zeroed, s.item_positions[4], c);
        EXPECT_EQ(a.renormalized, b.renormalized);
    }
    const auto lw = decode_layerwise(m, cache, s.item_positions[2], ProbeConfig{});
    ASSERT_EQ(lw.size(), 4u);
    EXPECT_EQ(lw.back().layers.size(), 4u);
    EXPECT_EQ(lw.front().layers, std::vector<int>{0});
}

TEST(Decode, ReportsSourceDescriptor) {
    const auto m = jittered<float>();
    const auto s = list9(5);
    const auto cache = capture(m, s);
    const auto d = decode(m, cache, s.item_positions[0], ProbeConfig{});
    EXPECT_EQ(d.source_position, s.item_positions[0]);
    EXPECT_EQ(d.source_id, cache.sample_id);
    EXPECT_GE(d.argmax, 1);
    EXPECT_LE(d.argmax, 9);
    EXPECT_THROW(decode(m, cache, s.length() + 3, ProbeConfig{}), SpecError);
}

TEST(DecodeGrid, OneEntryPerCellWithSceneLabels) {
    const auto m = jittered<float>(true);
    VisualTaskConfig vc;
    vc.count = 5;
    vc.grid_size = 6;
    vc.category = Category::polytypic_unique;
    vc.seed = 9;
    vc.with_answer = false;
    const auto s = generate_visual(vc);
    const auto cache = capture(m, s);
    ProbeConfig pc;
    pc.modality = Modality::visual;
    const auto cells = decode_grid(m, s, cache, pc);
    ASSERT_EQ(cells.size(), 36u);
    int fg = 0;
    for (const auto& c : cells) {
        const int pos = s.grid->first_position + c.cell;
        EXPECT_EQ(c.foreground, s.list_index_of(pos) > 0);
        EXPECT_EQ(c.row * 6 + c.col, c.cell);
        fg += c.foreground ? 1 : 0;
    }
    EXPECT_EQ(fg, 5);
}

TEST(Heatmap, CsvHeaderAndColumnNormalization) {
    std::vector<std::array<double, 9>> rows(2);
    rows[0].fill(0.2);
    rows[1].fill(0.4);
    rows[1][8] = 0.0;
    rows[0][8] = 0.0;
    const auto norm = normalize_columns(rows);
    EXPECT_DOUBLE_EQ(norm[1][0], 1.0);
    EXPECT_DOUBLE_EQ(norm[0][0], 0.5);
    EXPECT_EQ(norm[0][8], 0.0);
    std::ostringstream out;
    write_heatmap_csv(out, {"L1", "L2"}, norm, "column-max");
    EXPECT_EQ(out.str().substr(0, 27), "# normalization: column-max");
}
