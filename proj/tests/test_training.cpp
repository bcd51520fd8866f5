#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "countlab/training.hpp"

using namespace countlab;

namespace {

ModelConfig tiny(bool vision = false) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_mlp = 32;
    c.max_seq_len = 64;
    c.seed = 17;
    if (vision) {
        c.vision = VisionConfig{1, 3};
    }
    return c;
}

template <class T>
void jitter(Transformer<T>& m, std::uint64_t seed, double sd = 0.1) {
    Rng rng(seed);
    for (auto& p : m.parameters()) {
        p += static_cast<T>(sd * rng.normal());
    }
}

std::vector<CountingSample> text_batch(int n, std::uint64_t seed) {
    std::vector<CountingSample> out;
    for (int i = 0; i < n; ++i) {
        TextTaskConfig c;
        c.count = 1 + (i * 4) % 9;
        c.category = static_cast<Category>(i % 3);
        c.order = static_cast<Order>(i % 2);
        c.question = static_cast<QuestionKind>((i / 2) % 2);
        c.seed = seed + static_cast<std::uint64_t>(i);
        out.push_back(generate_text(c));
    }
    return out;
}

/// Mean loss recomputed from scratch through the forward pass only.
double mean_loss(const Transformer<double>& m, const std::vector<CountingSample>& batch) {
    double total = 0.0;
    for (const auto& s : batch) {
        total += loss(m.forward(s), s);
    }
    return total / static_cast<double>(batch.size());
}

struct FdReport {
    double max_rel = 0.0;
    std::string worst;
    std::size_t checked = 0;
};

/// Central differences over every parameter; relative error with a floor of
/// 1e-7 on the denominator for entries that are zero up to rounding.
FdReport finite_difference_check(Transformer<double>& m, const std::vector<CountingSample>& batch) {
    const auto analytic = gradients(m, std::span<const CountingSample>(batch));
    const double h = 1e-4;
    FdReport rep;
    auto& w = m.parameters();
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + h;
        const double up = mean_loss(m, batch);
        w[i] = keep - h;
        const double down = mean_loss(m, batch);
        w[i] = keep;
        const double fd = (up - down) / (2 * h);
        const double a = analytic.grad[i];
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-7});
        if (rel > rep.max_rel) {
            rep.max_rel = rel;
            rep.worst = "param " + std::to_string(i) + " analytic " + std::to_string(a) + " fd " + std::to_string(fd);
        }
        ++rep.checked;
    }
    return rep;
}

} // namespace

TEST(Loss, ClosedForms) {
    const auto s = text_batch(1, 4)[0];
    const int v = Vocabulary::standard().size();
    std::vector<double> uniform(static_cast<std::size_t>(v), 0.3);
    EXPECT_NEAR(loss(std::span<const double>(uniform), s), std::log(v), 1e-12);
    std::vector<double> sure(static_cast<std::size_t>(v), -1e4);
    sure[static_cast<std::size_t>(s.tokens[*s.answer_position])] = 1e4;
    EXPECT_NEAR(loss(std::span<const double>(sure), s), 0.0, 1e-12);
}

TEST(Loss, MatchesNegativeLogProbability) {
    Transformer<double> m(tiny());
    jitter(m, 1);
    for (const auto& s : text_batch(12, 40)) {
        const auto fwd = m.forward(s);
        const auto p = next_token_distribution(fwd.logits_at(*s.answer_position - 1));
        const double want = -std::log(p[static_cast<std::size_t>(s.tokens[*s.answer_position])]);
        EXPECT_NEAR(loss(fwd, s), want, 1e-12 * std::max(1.0, want));
        EXPECT_GE(loss(fwd, s), 0.0);
    }
}

TEST(Loss, MissingAnswerIsAnInputError) {
    TextTaskConfig c;
    c.count = 3;
    c.with_answer = false;
    const auto s = generate_text(c);
    Transformer<double> m(tiny());
    EXPECT_THROW(loss(m.forward(s), s), InputError);
    std::vector<CountingSample> batch{s};
    EXPECT_THROW(gradients(m, std::span<const CountingSample>(batch)), InputError);
    EXPECT_THROW(gradients(m, std::span<const CountingSample>()), InputError);
}

TEST(Gradients, MatchCentralFiniteDifferencesText) {
    Transformer<double> m(tiny());
    jitter(m, 2);
    const auto batch = text_batch(5, 100);
    const auto rep = finite_difference_check(m, batch);
    EXPECT_EQ(rep.checked, m.parameters().size());
    EXPECT_LT(rep.max_rel, 1e-4) << rep.worst;
}

TEST(Gradients, MatchCentralFiniteDifferencesVisual) {
    Transformer<double> m(tiny(true));
    jitter(m, 3);
    std::vector<CountingSample> batch;
    for (int i = 0; i < 3; ++i) {
        VisualTaskConfig c;
        c.count = 2 + i;
        c.grid_size = 3;
        c.category = static_cast<Category>(i);
        c.order = static_cast<Order>(i % 2);
        c.seed = 50 + static_cast<std::uint64_t>(i);
        batch.push_back(generate_visual(c));
    }
    const auto rep = finite_difference_check(m, batch);
    EXPECT_LT(rep.max_rel, 1e-4) << rep.worst;
}

TEST(Gradients, FullLanguageModelLossMatchesFiniteDifferences) {
    Transformer<double> m(tiny());
    jitter(m, 4);
    const auto batch = text_batch(2, 7);
    GradientOptions opt;
    opt.loss.full_lm = true;
    const auto g = gradients(m, std::span<const CountingSample>(batch), opt);
    auto eval = [&] {
        double total = 0.0;
        for (const auto& s : batch) {
            total += sample_loss_and_grad<double>(m, s, opt.loss, 1.0, nullptr);
        }
        return total / 2.0;
    };
    Rng rng(5);
    auto& w = m.parameters();
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t i = static_cast<std::size_t>(rng.below(w.size()));
        const double keep = w[i];
        w[i] = keep + 1e-4;
        const double up = eval();
        w[i] = keep - 1e-4;
        const double down = eval();
        w[i] = keep;
        const double fd = (up - down) / 2e-4;
        EXPECT_LT(std::abs(g.grad[i] - fd) / std::max({std::abs(fd), std::abs(g.grad[i]), 1e-7}), 1e-4) << i;
    }
}

TEST(Gradients, PositionsAfterTheReadoutGetNoGradient) {
    Transformer<double> m(tiny());
    jitter(m, 5);
    const auto batch = text_batch(4, 9);
    const auto g = gradients(m, std::span<const CountingSample>(batch));
    int first_unused = 0;
    for (const auto& s : batch) {
        first_unused = std::max(first_unused, s.readout_position + 1);
    }
    const auto& lay = m.layout();
    for (int t = first_unused; t < m.config().max_seq_len; ++t) {
        for (int k = 0; k < 16; ++k) {
            EXPECT_EQ(g.grad[lay.pos_embed() + static_cast<std::size_t>(t) * 16 + k], 0.0);
        }
    }
    // The answer digit only sits after the readout, so its embedding row is untouched
    // unless the digit also occurs earlier.
    const auto& vocab = Vocabulary::standard();
    const TokenId unused = vocab.digit(9);
    for (int k = 0; k < 16; ++k) {
        EXPECT_EQ(g.grad[lay.tok_embed() + static_cast<std::size_t>(unused) * 16 + k], 0.0);
    }
}

TEST(Gradients, DuplicatingTheBatchKeepsTheMean) {
    Transformer<double> m(tiny());
    jitter(m, 6);
    const auto batch = text_batch(3, 11);
    auto twice = batch;
    twice.insert(twice.end(), batch.begin(), batch.end());
    const auto a = gradients(m, std::span<const CountingSample>(batch));
    const auto b = gradients(m, std::span<const CountingSample>(twice));
    EXPECT_NEAR(a.mean_loss, b.mean_loss, 1e-13);
    for (std::size_t i = 0; i < a.grad.size(); ++i) {
        EXPECT_NEAR(a.grad[i], b.grad[i], 1e-13 * std::max(1.0, std::abs(a.grad[i])));
    }
}

TEST(Gradients, PermutationInvariantAndWorkerIndependent) {
    Transformer<float> m(tiny());
    const auto batch = text_batch(8, 12);
    auto reversed = batch;
    std::reverse(reversed.begin(), reversed.end());
    const auto a = gradients(m, std::span<const CountingSample>(batch));
    const auto b = gradients(m, std::span<const CountingSample>(reversed));
    EXPECT_NEAR(a.mean_loss, b.mean_loss, 1e-6);
    for (std::size_t i = 0; i < a.grad.size(); ++i) {
        EXPECT_NEAR(a.grad[i], b.grad[i], 1e-5f);
    }
    GradientOptions four;
    four.workers = 4;
    const auto c = gradients(m, std::span<const CountingSample>(batch), four);
    EXPECT_EQ(a.grad, c.grad);
}

TEST(Gradients, NonFiniteLossNamesTheSample) {
    Transformer<float> m(tiny());
    m.parameters()[m.layout().unembed_bias()] = NAN;
    const auto batch = text_batch(2, 13);
    try {
        gradients(m, std::span<const CountingSample>(batch));
        FAIL() << "expected a numeric error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("#"), std::string::npos);
    }
}

namespace {

TrainConfig small_train() {
    TrainConfig c;
    c.model = tiny();
    c.batch_size = 4;
    c.steps = 6;
    c.learning_rate.warmup = 2;
    c.seed = 3;
    return c;
}

} // namespace

TEST(Train, ZeroLearningRateLeavesWeightsBitIdentical) {
    auto c = small_train();
    c.learning_rate.peak = 0.0;
    Transformer<float> trained(c.model);
    train(c, {}, &trained);
    EXPECT_EQ(trained.parameters(), Transformer<float>(c.model).parameters());
}

TEST(Train, SameSeedSameLossTrace) {
    const auto c = small_train();
    const auto a = train(c);
    const auto b = train(c);
    EXPECT_EQ(a.losses, b.losses);
    ASSERT_EQ(a.losses.size(), 6u);
    auto other = c;
    other.seed = 4;
    EXPECT_NE(train(other).losses, a.losses);
}

TEST(Train, OverfitsASingleSample) {
    TrainConfig c;
    c.model = tiny();
    c.batch_size = 1;
    c.steps = 500;
    c.learning_rate = {3e-3, 10, 1.0};
    Transformer<float> m(c.model);
    AdamState adam;
    const auto batch = text_batch(1, 77);
    double last = 0.0;
    for (int step = 0; step < c.steps; ++step) {
        auto g = gradients(m, std::span<const CountingSample>(batch));
        last = g.mean_loss;
        adam_step(m.parameters(), g.grad, adam, c.learning_rate.at(step, c.steps), c);
    }
    EXPECT_LT(last, 0.01);
    EXPECT_LT(loss(m.forward(batch[0]), batch[0]), 0.01);
}

TEST(Train, ConfigValidation) {
    auto c = small_train();
    c.curriculum[0].counts = {1, 2, 3};
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_train();
    c.learning_rate.peak = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_train();
    c.curriculum[0].modality = Modality::visual;
    EXPECT_THROW(c.validate(), ConfigError);
    const nlohmann::json j = small_train();
    const auto back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(config_hash(j), config_hash(nlohmann::json(back)));
}

TEST(Train, WritesLogAndCheckpoint) {
    const auto dir = std::filesystem::temp_directory_path() / "countlab_train_test";
    std::filesystem::remove_all(dir);
    auto c = small_train();
    c.eval.families = {CurriculumEntry{}};
    c.eval.families[0].categories = {Category::monotypic};
    c.eval.families[0].orders = {Order::question_last};
    c.eval.families[0].questions = {QuestionKind::general};
    c.eval.samples_per_cell = 2;
    c.eval_every = 3;
    Transformer<float> trained(c.model);
    TrainHooks hooks;
    hooks.output_dir = dir.string();
    const auto r = train(c, hooks, &trained);
    EXPECT_TRUE(std::filesystem::exists(dir / "train_log.csv"));
    ASSERT_FALSE(r.checkpoint_path.empty());
    CheckpointInfo info;
    const auto loaded = load_checkpoint<float>(r.checkpoint_path, &info);
    EXPECT_EQ(loaded.parameters(), trained.parameters());
    EXPECT_EQ(info.step, 6);
    EXPECT_EQ(r.evals.size(), 2u);
    const auto again = evaluate_behavioral(r.checkpoint_path, c.eval);
    EXPECT_EQ(nlohmann::json(again), nlohmann::json(r.final_table));
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsForeignAndTruncatedFiles) {
    const auto dir = std::filesystem::temp_directory_path() / "countlab_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto bogus = (dir / "bogus.ckpt").string();
    std::ofstream(bogus) << "not a checkpoint";
    EXPECT_THROW(load_checkpoint(bogus), InputError);
    Transformer<float> m(tiny(true));
    const auto good = (dir / "m.ckpt").string();
    save_checkpoint(good, m, 12);
    const auto loaded = load_checkpoint(good);
    EXPECT_EQ(loaded.parameters(), m.parameters());
    EXPECT_EQ(nlohmann::json(loaded.config()), nlohmann::json(m.config()));
    std::filesystem::resize_file(good, std::filesystem::file_size(good) - 4);
    EXPECT_THROW(load_checkpoint(good), InputError);
    std::filesystem::remove_all(dir);
}

namespace {

/// A model that always answers `digit`: zero unembedding, one large bias.
Transformer<float> constant_model(int digit) {
    Transformer<float> m(tiny());
    const auto& lay = m.layout();
    auto& w = m.parameters();
    const int v = m.config().vocab_size;
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(lay.unembed()),
              w.begin() + static_cast<std::ptrdiff_t>(lay.unembed() + 16 * static_cast<std::size_t>(v)), 0.0f);
    w[lay.unembed_bias() + static_cast<std::size_t>(Vocabulary::standard().digit(digit))] = 10.0f;
    return m;
}

EvalConfig balanced_eval() {
    EvalConfig e;
    CurriculumEntry f;
    f.categories = {Category::monotypic, Category::polytypic_unique};
    f.orders = {Order::question_first, Order::question_last};
    f.questions = {QuestionKind::general};
    e.families = {f};
    e.samples_per_cell = 3;
    return e;
}

} // namespace

TEST(Evaluate, ConstantAnswerGetsOneNinth) {
    const auto table = evaluate_behavioral(constant_model(1), balanced_eval());
    EXPECT_NEAR(table.overall(), 1.0 / 9, 1e-12);
    EXPECT_EQ(table.for_count(1), 1.0);
    EXPECT_EQ(table.for_count(5), 0.0);
}

TEST(Evaluate, TableRecountsFromSamples) {
    const auto eval = balanced_eval();
    Transformer<float> m(tiny());
    jitter(m, 8, 0.5);
    const auto table = evaluate_behavioral(m, eval);
    const auto cells = expand_cells(eval);
    ASSERT_EQ(table.cells.size(), cells.size());
    EXPECT_EQ(table.cells.size(), 2u * 2u * 9u);
    long correct = 0, total = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto samples =
            eval_cell_samples(cells[i].first, eval.families[0], eval.samples_per_cell, derive_seed(eval.seed, i));
        int hits = 0;
        for (const auto& s : samples) {
            // Independent argmax over the digit logits.
            ForwardOptions<float> o;
            o.logit_positions = {s.readout_position};
            const auto row = m.forward(s, o).logits.row_span(0);
            int best = 1;
            for (int n = 2; n <= 9; ++n) {
                if (row[Vocabulary::standard().digit(n)] > row[Vocabulary::standard().digit(best)]) {
                    best = n;
                }
            }
            hits += best == s.ground_truth ? 1 : 0;
        }
        EXPECT_EQ(table.cells[i].correct, hits);
        EXPECT_EQ(table.cells[i].total, eval.samples_per_cell);
        correct += hits;
        total += eval.samples_per_cell;
        EXPECT_GE(table.cells[i].accuracy(), 0.0);
        EXPECT_LE(table.cells[i].accuracy(), 1.0);
    }
    EXPECT_EQ(table.total(), total);
    EXPECT_NEAR(table.overall(), static_cast<double>(correct) / total, 1e-15);
}

TEST(Curriculum, BatchesAreDeterministicAndCoverCounts) {
    auto c = small_train();
    c.batch_size = 300;
    const auto a = training_batch(c, 5);
    const auto b = training_batch(c, 5);
    std::vector<int> seen(10, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
        ++seen[static_cast<std::size_t>(a[i].ground_truth)];
    }
    for (int n = 1; n <= 9; ++n) {
        EXPECT_GT(seen[static_cast<std::size_t>(n)], 0) << n;
    }
    EXPECT_NE(training_batch(c, 6)[0].tokens, a[0].tokens);
}
