#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/activations.hpp"
#include "countlab/analysis.hpp"
#include "countlab/checkpoint.hpp"
#include "countlab/countscope.hpp"
#include "countlab/dataset.hpp"
#include "countlab/metrics.hpp"
#include "countlab/parallel.hpp"
#include "countlab/report.hpp"
#include "countlab/training.hpp"

namespace countlab {

// ----------------------------------------------------------------- config

struct ExperimentConfig {
    std::string name;
    std::string checkpoint;
    std::string visual_checkpoint;
    std::vector<int> counts{1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<Category> categories{Category::monotypic, Category::polytypic_unique};
    std::vector<Order> orders{Order::question_last};
    std::vector<int> ks{1, 2, 3};
    std::vector<int> shifts{1, 2, 3, 4};
    std::vector<Regime> regimes{Regime::offline, Regime::online};
    /// Layer window for additive steering; empty means the top third.
    std::vector<int> layers;
    std::vector<int> grid_sizes{3, 6, 10};
    std::vector<int> item_pool{0, 1, 2, 3, 4, 5, 6, 7, 8};
    /// Item types the steering vectors are transferred to (means come from the rest).
    std::vector<int> transfer_pool{7, 8};
    int max_gap = 4;
    int n_samples = 4;
    std::uint64_t seed = 2024;
    double accuracy_threshold = 0.5;
    int workers = 1;

    void validate() const {
        if (n_samples < 1) {
            throw ConfigError("n_samples must be positive");
        }
        for (const int n : counts) {
            if (n < 1 || n > kMaxCount) {
                throw ConfigError("experiment count out of range: " + std::to_string(n));
            }
        }
        for (const int k : ks) {
            if (k < 1 || k > 8) {
                throw ConfigError("k must be in 1..8, got " + std::to_string(k));
            }
        }
        for (const int s : shifts) {
            if (s < 0 || s > 8) {
                throw ConfigError("position shift must be in 0..8, got " + std::to_string(s));
            }
        }
        for (const int g : grid_sizes) {
            VisualTaskConfig{.count = 1, .grid_size = g}.validate();
        }
        for (const int t : item_pool) {
            if (t < 0 || t >= kNumItemTypes) {
                throw ConfigError("item type out of range: " + std::to_string(t));
            }
        }
        if (item_pool.empty() || categories.empty() || orders.empty() || regimes.empty()) {
            throw ConfigError("experiment config has an empty choice list");
        }
        if (max_gap < 1 || max_gap > 5) {
            throw ConfigError("max_gap must be in 1..5");
        }
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"name", c.name},
         {"checkpoint", c.checkpoint},
         {"visual_checkpoint", c.visual_checkpoint},
         {"counts", c.counts},
         {"categories", c.categories},
         {"orders", c.orders},
         {"ks", c.ks},
         {"shifts", c.shifts},
         {"regimes", c.regimes},
         {"layers", c.layers},
         {"grid_sizes", c.grid_sizes},
         {"item_pool", c.item_pool},
         {"transfer_pool", c.transfer_pool},
         {"max_gap", c.max_gap},
         {"n_samples", c.n_samples},
         {"seed", c.seed},
         {"accuracy_threshold", c.accuracy_threshold}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    static const std::set<std::string> known{
        "name",       "checkpoint", "visual_checkpoint", "counts",        "categories", "orders",
        "ks",         "k",          "shifts",            "regimes",       "layers",     "grid_sizes",
        "item_pool",  "transfer_pool", "max_gap",        "n_samples",     "seed",       "accuracy_threshold",
        "workers"};
    for (const auto& [key, v] : j.items()) {
        if (!known.contains(key)) {
            throw ConfigError("unknown experiment config key '" + key + "'");
        }
    }
    c = ExperimentConfig{};
    c.name = j.value("name", c.name);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.visual_checkpoint = j.value("visual_checkpoint", c.visual_checkpoint);
    c.counts = j.value("counts", c.counts);
    c.categories = detail::enum_list(j, "categories", c.categories, &parse_category);
    c.orders = detail::enum_list(j, "orders", c.orders, &parse_order);
    c.ks = j.value("ks", c.ks);
    if (j.contains("k")) {
        c.ks = {j.at("k").get<int>()};
    }
    c.shifts = j.value("shifts", c.shifts);
    if (j.contains("regimes")) {
        c.regimes.clear();
        for (const auto& r : j.at("regimes")) {
            c.regimes.push_back(parse_enum(r.get<std::string>(), {Regime::online, Regime::offline}));
        }
    }
    c.layers = j.value("layers", c.layers);
    c.grid_sizes = j.value("grid_sizes", c.grid_sizes);
    c.item_pool = j.value("item_pool", c.item_pool);
    c.transfer_pool = j.value("transfer_pool", c.transfer_pool);
    c.max_gap = j.value("max_gap", c.max_gap);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.seed = j.value("seed", c.seed);
    c.accuracy_threshold = j.value("accuracy_threshold", c.accuracy_threshold);
    c.workers = j.value("workers", c.workers);
    c.validate();
}

/// Trained models an experiment reads. Either may be absent.
struct ModelSet {
    const Transformer<float>* text = nullptr;
    const Transformer<float>* visual = nullptr;
    std::string text_id;
    std::string visual_id;
};

// ----------------------------------------------------------------- expected answers

/// Continued counting: the counter resumes from the source's end.
constexpr int expected_continued(int n_source, int n_target, int k) noexcept { return n_source + n_target - k; }

/// Max latent count: the largest latent count left in the patched context.
constexpr int expected_max_latent(int n_source, int n_target, int k) noexcept {
    return std::max(n_source, n_target - k);
}

/// 8x8 table over N_source (rows) and N_target (columns), both 2..9.
using ExpectedTable = std::array<std::array<int, 8>, 8>;

inline ExpectedTable expected_table(int (*f)(int, int, int), int k) {
    ExpectedTable t{};
    for (int s = 2; s <= 9; ++s) {
        for (int g = 2; g <= 9; ++g) {
            t[static_cast<std::size_t>(s - 2)][static_cast<std::size_t>(g - 2)] = f(s, g, k);
        }
    }
    return t;
}

inline ExpectedTable continued_counting_table(int k) {
    return expected_table([](int s, int t, int kk) { return expected_continued(s, t, kk); }, k);
}
inline ExpectedTable max_latent_table(int k) {
    return expected_table([](int s, int t, int kk) { return expected_max_latent(s, t, kk); }, k);
}

// ----------------------------------------------------------------- helpers

namespace detail {

inline const std::vector<int>& all_item_types() {
    static const std::vector<int> all{0, 1, 2, 3, 4, 5, 6, 7, 8};
    return all;
}

inline CountingSample text_prompt(int n, Category cat, Order order, std::uint64_t seed, std::vector<int> pool) {
    if ((cat == Category::polytypic_unique && n > static_cast<int>(pool.size())) ||
        (cat == Category::polytypic_replicate && pool.size() < 2)) {
        pool = all_item_types();
    }
    TextTaskConfig c;
    c.count = n;
    c.category = cat;
    c.order = order;
    c.seed = seed;
    c.item_pool = std::move(pool);
    c.with_answer = false;
    return generate_text(c);
}

inline CountingSample visual_prompt(int n, Category cat, int grid, Order order, std::uint64_t seed) {
    VisualTaskConfig c;
    c.count = n;
    c.category = cat;
    c.grid_size = grid;
    c.order = order;
    c.seed = seed;
    c.with_answer = false;
    return generate_visual(c);
}

inline std::string name_of(Category c) { return nlohmann::json(c).get<std::string>(); }
inline std::string name_of(Order o) { return nlohmann::json(o).get<std::string>(); }
inline std::string name_of(Regime r) { return nlohmann::json(r).get<std::string>(); }

inline std::uint64_t stream_seed(const ExperimentConfig& c, const std::string& tag) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : tag) {
        h = (h ^ ch) * 1099511628211ULL;
    }
    return derive_seed(c.seed, h);
}

inline std::vector<int> pair_counts(const ExperimentConfig& c) {
    std::vector<int> out;
    for (const int n : c.counts) {
        if (n >= 2) {
            out.push_back(n);
        }
    }
    return out;
}

inline bool grid_fits(const Transformer<float>& m, int g) {
    return m.config().vision && g <= m.config().vision->grid_size;
}

inline double p_of(const std::vector<double>& dist, int n) { return PatchRun::p_digit(dist, n); }

inline std::vector<int> span_positions(Span s) {
    std::vector<int> out;
    for (int p = s.begin; p < s.end; ++p) {
        out.push_back(p);
    }
    return out;
}

/// Pairs positions of two spans from their right ends (the list end and the
/// question end line up whatever the lengths).
inline std::vector<std::pair<int, int>> right_aligned(Span source, Span target) {
    std::vector<std::pair<int, int>> out;
    const int n = std::min(source.size(), target.size());
    for (int i = 0; i < n; ++i) {
        out.emplace_back(source.end - 1 - i, target.end - 1 - i);
    }
    std::reverse(out.begin(), out.end());
    return out;
}

/// Runs `jobs` in parallel, each producing records, and appends them in job order.
template <class Fn>
void collect(ExperimentReport& report, std::size_t jobs, int workers, Fn&& fn) {
    std::vector<std::vector<ReportRecord>> out(jobs);
    parallel_for(jobs, workers, [&](std::size_t i) { out[i] = fn(i); });
    for (auto& v : out) {
        for (auto& r : v) {
            report.records.push_back(std::move(r));
        }
    }
}

inline nlohmann::json digits_json(const Decoding& d) {
    return {{"renormalized", d.renormalized}, {"argmax", d.argmax}};
}

/// Fraction of records whose `data.clean_correct` is set, for the untrained-checkpoint flag.
inline void flag_accuracy(ExperimentReport& report, const ExperimentConfig& config) {
    int correct = 0, total = 0;
    for (const auto& r : report.records) {
        if (r.data.contains("clean_correct")) {
            correct += r.data.at("clean_correct").get<bool>() ? 1 : 0;
            ++total;
        }
    }
    if (total == 0) {
        return;
    }
    const double acc = static_cast<double>(correct) / total;
    report.tables["clean_accuracy"] = acc;
    if (acc < config.accuracy_threshold) {
        report.warnings.push_back("clean target accuracy " + std::to_string(acc) + " is below " +
                                  std::to_string(config.accuracy_threshold) + "; checkpoint looks untrained");
    }
}

template <class T>
bool clean_correct(const PatchRun& run, const CountingSample& s) {
    int best = 1;
    for (int n = 2; n <= kMaxCount; ++n) {
        if (PatchRun::p_digit(run.baseline, n) > PatchRun::p_digit(run.baseline, best)) {
            best = n;
        }
    }
    return best == s.ground_truth;
}

inline std::vector<std::vector<double>> mean_rows(const std::vector<std::vector<std::array<double, 9>>>& rows) {
    std::vector<std::vector<double>> m;
    for (const auto& group : rows) {
        std::vector<double> acc(9, 0.0);
        for (const auto& r : group) {
            for (std::size_t i = 0; i < 9; ++i) {
                acc[i] += r[i] / static_cast<double>(group.size());
            }
        }
        m.push_back(acc);
    }
    return m;
}

inline std::vector<std::string> digit_labels() {
    std::vector<std::string> out;
    for (int n = 1; n <= 9; ++n) {
        out.push_back(std::to_string(n));
    }
    return out;
}

inline void require_text(const ModelSet& m, const std::string& name) {
    if (m.text == nullptr) {
        throw MissingDataError(name + " needs a text checkpoint");
    }
}

} // namespace detail

// ----------------------------------------------------------------- zero_locate

/// Zero patching of the whole context vs the whole question, per count.
inline ExperimentReport exp_zero_locate(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "zero_locate";
    rep.schema = "zero_drop_by_count";
    rep.reference = {{"llm_context_drop", "0.65 +- 0.31"}, {"llm_question_drop", "0.03 +- 0.02"},
                     {"lvlm_image_drop", "0.73 +- 0.02"}, {"lvlm_prompt_drop", "0.05 +- 0.03"}};
    struct Job {
        const Transformer<float>* model;
        std::string modality;
        Regime regime;
        Category category;
        Order order;
        int count;
        int grid;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    for (const Regime regime : config.regimes) {
        for (const Category cat : config.categories) {
            for (const Order order : config.orders) {
                for (const int n : config.counts) {
                    for (int s = 0; s < config.n_samples; ++s) {
                        const auto seed = derive_seed(base, jobs.size());
                        if (models.text) {
                            jobs.push_back({models.text, "text", regime, cat, order, n, 0, seed});
                        }
                        if (models.visual && detail::grid_fits(*models.visual, 6)) {
                            jobs.push_back({models.visual, "visual", regime, cat, order, n, 6, seed});
                        }
                    }
                }
            }
        }
    }
    detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
        const Job& j = jobs[i];
        const CountingSample s = j.modality == "text"
                                     ? detail::text_prompt(j.count, j.category, j.order, j.seed, config.item_pool)
                                     : detail::visual_prompt(j.count, j.category, j.grid, j.order, j.seed);
        std::vector<ReportRecord> out;
        const std::array<std::pair<std::string, Span>, 2> spans{
            std::pair{j.modality == "text" ? "context" : "image", s.context_span},
            std::pair{j.modality == "text" ? "question" : "prompt", s.question_span}};
        for (const auto& [span_name, span] : spans) {
            const auto spec = InterventionSpec::at_positions(InterventionMode::zero, detail::span_positions(span),
                                                             HookFamily::resid_post, j.regime);
            const PatchRun run = run_patched(*j.model, s, spec);
            const double before = detail::p_of(run.baseline, s.ground_truth);
            const double after = detail::p_of(run.patched, s.ground_truth);
            ReportRecord r;
            r.labels = {{"modality", j.modality}, {"regime", detail::name_of(j.regime)}, {"span", span_name},
                        {"category", detail::name_of(j.category)}, {"order", detail::name_of(j.order)},
                        {"count", j.count}};
            r.value = probability_drop(before, after);
            r.data = {{"p_before", before}, {"p_after", after}, {"sample", run.target_id},
                      {"clean_correct", detail::clean_correct<float>(run, s)}};
            out.push_back(std::move(r));
        }
        return out;
    });
    rep.groupings = {{"modality", "regime", "span"}, {"modality", "regime", "span", "count"}};
    detail::flag_accuracy(rep, config);
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- interchange_locate

/// Interchange of the whole context (or question) between lists of different length.
inline ExperimentReport exp_interchange_locate(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "interchange_locate";
    rep.schema = "interchange_ci_by_span";
    rep.reference = {{"llm_context_ci", "0.61 +- 0.02"}, {"llm_question_ci", "0.02 +- 0.01"},
                     {"lvlm_image_ci", "0.57 +- 0.12"}, {"lvlm_prompt_ci", "0.03 +- 0.04"}};
    struct Job {
        const Transformer<float>* model;
        std::string modality;
        Category category;
        Order order;
        int ns, nt;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    const auto counts = detail::pair_counts(config);
    for (const Category cat : config.categories) {
        for (const Order order : config.orders) {
            for (const int ns : counts) {
                for (const int nt : counts) {
                    if (ns == nt) {
                        continue;
                    }
                    for (int s = 0; s < config.n_samples; ++s) {
                        const auto seed = derive_seed(base, jobs.size());
                        if (models.text) {
                            jobs.push_back({models.text, "text", cat, order, ns, nt, seed});
                        }
                        if (models.visual && detail::grid_fits(*models.visual, 6)) {
                            jobs.push_back({models.visual, "visual", cat, order, ns, nt, seed});
                        }
                    }
                }
            }
        }
    }
    detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
        const Job& j = jobs[i];
        auto make = [&](int n, std::uint64_t seed) {
            return j.modality == "text" ? detail::text_prompt(n, j.category, j.order, seed, config.item_pool)
                                        : detail::visual_prompt(n, j.category, 6, j.order, seed);
        };
        const CountingSample src = make(j.ns, derive_seed(j.seed, 1));
        const CountingSample tgt = make(j.nt, derive_seed(j.seed, 2));
        const auto cache = capture(*j.model, src);
        std::vector<ReportRecord> out;
        const std::array<std::tuple<std::string, Span, Span>, 2> spans{
            std::tuple{std::string(j.modality == "text" ? "context" : "image"), src.context_span, tgt.context_span},
            std::tuple{std::string(j.modality == "text" ? "question" : "prompt"), src.question_span,
                       tgt.question_span}};
        for (const Regime regime : config.regimes) {
            for (const auto& [span_name, ss, ts] : spans) {
                InterventionSpec spec;
                spec.mode = InterventionMode::interchange;
                spec.regime = regime;
                spec.position_map = detail::right_aligned(ss, ts);
                const PatchRun run = run_patched(*j.model, tgt, spec, &cache);
                const auto m = ci_report(detail::p_of(run.patched, j.ns), detail::p_of(run.baseline, j.ns),
                                         detail::p_of(run.baseline, j.nt), detail::p_of(run.patched, j.nt),
                                         run.target_id);
                ReportRecord r;
                r.labels = {{"modality", j.modality}, {"regime", detail::name_of(regime)}, {"span", span_name},
                            {"category", detail::name_of(j.category)}, {"order", detail::name_of(j.order)},
                            {"n_source", j.ns}, {"n_target", j.nt}};
                r.value = m.value;
                r.data = {{"components", m.components}, {"r_tilde", j.ns}, {"r_prime", j.nt},
                          {"patched_positions", spec.k()}, {"clean_correct", detail::clean_correct<float>(run, tgt)}};
                out.push_back(std::move(r));
            }
        }
        return out;
    });
    rep.groupings = {{"modality", "regime", "span"}, {"modality", "regime", "span", "category"}};
    detail::flag_accuracy(rep, config);
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- item_locate

/// Text: zero one list item at a time. Visual: CountScope on every grid cell,
/// foreground vs background.
inline ExperimentReport exp_item_locate(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "item_locate";
    rep.schema = "item_drop_and_fg_bg";
    rep.reference = {{"llm_final_item_drop", "0.95 +- 0.04"},
                     {"lvlm_foreground", {{"3x3", 0.48}, {"6x6", 0.46}, {"10x10", 0.42}}},
                     {"lvlm_background", {{"3x3", 0.44}, {"6x6", 0.58}, {"10x10", 0.61}}}};
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    if (models.text) {
        struct Job {
            Regime regime;
            Category category;
            int count;
            std::uint64_t seed;
        };
        std::vector<Job> jobs;
        for (const Regime regime : config.regimes) {
            for (const Category cat : config.categories) {
                for (const int n : config.counts) {
                    for (int s = 0; s < config.n_samples; ++s) {
                        jobs.push_back({regime, cat, n, derive_seed(base, jobs.size())});
                    }
                }
            }
        }
        detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
            const Job& j = jobs[i];
            const auto s = detail::text_prompt(j.count, j.category, config.orders.front(), j.seed, config.item_pool);
            std::vector<ReportRecord> out;
            for (int item = 1; item <= j.count; ++item) {
                const auto spec = InterventionSpec::at_positions(
                    InterventionMode::zero, {s.list_positions[static_cast<std::size_t>(item - 1)]},
                    HookFamily::resid_post, j.regime);
                const PatchRun run = run_patched(*models.text, s, spec);
                const double before = detail::p_of(run.baseline, s.ground_truth);
                const double after = detail::p_of(run.patched, s.ground_truth);
                ReportRecord r;
                r.labels = {{"modality", "text"},
                            {"regime", detail::name_of(j.regime)},
                            {"category", detail::name_of(j.category)},
                            {"count", j.count},
                            {"item", item},
                            {"final", item == j.count}};
                r.value = probability_drop(before, after);
                r.data = {{"p_before", before}, {"p_after", after}, {"sample", run.target_id},
                          {"clean_correct", detail::clean_correct<float>(run, s)}};
                out.push_back(std::move(r));
            }
            return out;
        });
    }
    if (models.visual) {
        struct Job {
            int grid;
            int count;
            std::uint64_t seed;
        };
        std::vector<Job> jobs;
        for (const int g : config.grid_sizes) {
            if (!detail::grid_fits(*models.visual, g)) {
                rep.warnings.push_back("grid " + std::to_string(g) + "x" + std::to_string(g) +
                                       " exceeds the visual encoder; skipped");
                continue;
            }
            for (const int n : config.counts) {
                if (n > g * g) {
                    continue;
                }
                for (int s = 0; s < config.n_samples; ++s) {
                    jobs.push_back({g, n, derive_seed(base ^ 0x5649535541ULL, jobs.size())});
                }
            }
        }
        ProbeConfig probe;
        probe.modality = Modality::visual;
        detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
            const Job& j = jobs[i];
            const auto s = detail::visual_prompt(j.count, Category::monotypic, j.grid, config.orders.front(), j.seed);
            const auto cache = capture(*models.visual, s);
            std::vector<ReportRecord> out;
            for (const auto& cell : decode_grid(*models.visual, s, cache, probe)) {
                ReportRecord r;
                r.labels = {{"modality", "visual"},
                            {"grid", j.grid},
                            {"count", j.count},
                            {"region", cell.foreground ? "foreground" : "background"}};
                r.value = cell.decoding.renormalized_at(j.count);
                r.data = {{"cell", cell.cell}, {"row", cell.row}, {"col", cell.col},
                          {"decoding", detail::digits_json(cell.decoding)}};
                out.push_back(std::move(r));
            }
            return out;
        });
    }
    rep.groupings = {{"modality", "regime", "final"},
                     {"modality", "regime", "category", "count", "item"},
                     {"modality", "grid", "region"},
                     {"modality", "grid", "count", "region"}};
    detail::flag_accuracy(rep, config);
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- per_item_latent

/// CountScope decode of every list position of a count-9 list (items, and the
/// separators read with the following-position convention).
inline ExperimentReport exp_per_item_latent(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "per_item_latent";
    rep.schema = "latent_count_heatmap";
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    struct Variant {
        std::string name;
        const Transformer<float>* model;
        Modality modality;
        Category category;
        bool separators;
    };
    std::vector<Variant> variants;
    if (models.text) {
        for (const Category cat : config.categories) {
            variants.push_back({detail::name_of(cat), models.text, Modality::text, cat, false});
            variants.push_back({detail::name_of(cat) + "-separators", models.text, Modality::text, cat, true});
        }
    }
    if (models.visual && detail::grid_fits(*models.visual, 6)) {
        variants.push_back({"visual", models.visual, Modality::visual, Category::monotypic, false});
    }
    const int n_variants = static_cast<int>(variants.size());
    std::vector<std::vector<std::vector<std::array<double, 9>>>> rows(static_cast<std::size_t>(n_variants));
    for (auto& r : rows) {
        r.resize(9);
    }
    for (int v = 0; v < n_variants; ++v) {
        const Variant& var = variants[static_cast<std::size_t>(v)];
        ProbeConfig probe;
        probe.modality = var.modality;
        std::vector<std::vector<Decoding>> decoded(static_cast<std::size_t>(config.n_samples));
        detail::collect(rep, static_cast<std::size_t>(config.n_samples), config.workers, [&](std::size_t s) {
            const auto seed = derive_seed(base, static_cast<std::uint64_t>(s));
            const auto sample = var.modality == Modality::text
                                    ? detail::text_prompt(9, var.category, config.orders.front(), seed, config.item_pool)
                                    : detail::visual_prompt(9, var.category, 6, config.orders.front(), seed);
            const auto cache = capture(*var.model, sample);
            std::vector<ReportRecord> out;
            const auto& positions = var.separators ? sample.separator_positions : sample.list_positions;
            for (std::size_t i = 0; i < positions.size(); ++i) {
                const Decoding d = decode(*var.model, cache, positions[i], probe);
                decoded[s].push_back(d);
                // Separator k sits after item k and is read as count k + 1.
                const int row = static_cast<int>(i) + 1;
                const int expected = var.separators ? row + 1 : row;
                ReportRecord r;
                r.labels = {{"variant", var.name}, {"metric", "p_expected"}, {"position", row}};
                r.value = d.renormalized_at(expected);
                r.data = {{"expected", expected}, {"decoding", detail::digits_json(d)}};
                out.push_back(r);
                r.labels["metric"] = "argmax_hit";
                r.value = d.argmax == expected ? 1.0 : 0.0;
                out.push_back(std::move(r));
            }
            return out;
        });
        for (const auto& per_sample : decoded) {
            for (std::size_t i = 0; i < per_sample.size(); ++i) {
                rows[static_cast<std::size_t>(v)][i].push_back(per_sample[i].renormalized);
            }
        }
        auto& group = rows[static_cast<std::size_t>(v)];
        group.erase(std::remove_if(group.begin(), group.end(), [](const auto& g) { return g.empty(); }), group.end());
        MatrixArtifact m;
        m.name = "heatmap_" + var.name;
        m.values = detail::mean_rows(group);
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            m.row_labels.push_back((var.separators ? "sep" : "pos") + std::to_string(i + 1));
        }
        m.col_labels = detail::digit_labels();
        m.normalization = "renormalized over digits";
        double diag = 0.0;
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            const std::size_t col = var.separators ? i + 1 : i;
            diag += col < 9 ? m.values[i][col] : 0.0;
        }
        rep.tables["diagonal_dominance"][var.name] = m.values.empty() ? 0.0 : diag / m.values.size();
        rep.matrices.push_back(std::move(m));
    }
    rep.groupings = {{"variant", "metric"}, {"variant", "metric", "position"}};
    rep.finalize();
    // Positions 1..5 of the monotypic list, argmax against the position index.
    std::vector<double> hits;
    for (const auto& r : rep.records) {
        if (r.labels.at("variant") == "monotypic" && r.labels.at("metric") == "argmax_hit" &&
            r.labels.at("position").get<int>() <= 5) {
            hits.push_back(r.value);
        }
    }
    if (!hits.empty()) {
        rep.tables["monotypic_argmax_accuracy_positions_1_5"] = aggregate(std::span<const double>(hits)).mean;
    }
    return rep;
}

// ----------------------------------------------------------------- continued counting / max latent

namespace detail {

enum class PairKind { continued, max_latent };

/// Transfers the final k source items onto the first (continued) or final
/// (max latent) k target items. Patch types: the whole k-item token span,
/// the items only, or the separators inside the span.
inline ExperimentReport pair_transfer(const ExperimentConfig& config, const ModelSet& models, PairKind kind) {
    ExperimentReport rep;
    const bool cc = kind == PairKind::continued;
    rep.name = cc ? "continued_counting" : "max_latent";
    rep.schema = cc ? "continued_counting_ci" : "max_latent_ci";
    if (cc) {
        rep.reference = {{"llm_question_first", {{"k1", "0.23 +- 0.09"}, {"k2", "0.9 +- 0.07"}, {"k3", "0.71 +- 0.17"}}},
                         {"llm_question_last", {{"k1", "0.10 +- 0.11"}, {"k2", "0.16 +- 0.05"}, {"k3", "0.16 +- 0.08"}}}};
    } else {
        rep.reference = {
            {"llm_question_first",
             {{"source_smaller", {{"k1", "0.25 +- 0.15"}, {"k2", "0.49 +- 0.16"}}},
              {"source_larger", {{"k1", "0.54 +- 0.19"}, {"k2", "0.80 +- 0.13"}}}}},
            {"llm_question_last",
             {{"source_smaller", {{"k1", "0.01 +- 0.02"}, {"k2", "0.10 +- 0.05"}}},
              {"source_larger", {{"k1", "0.11 +- 0.06"}, {"k2", "0.32 +- 0.09"}}}}}};
    }
    for (const int k : config.ks) {
        const auto t = cc ? continued_counting_table(k) : max_latent_table(k);
        rep.tables["expected"]["k" + std::to_string(k)] = t;
    }
    require_text(models, rep.name);
    struct Job {
        int k;
        Category category;
        Order order;
        int ns, nt;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    const std::uint64_t base = stream_seed(config, rep.name);
    const auto counts = pair_counts(config);
    for (const int k : config.ks) {
        for (const Category cat : config.categories) {
            for (const Order order : config.orders) {
                for (const int ns : counts) {
                    for (const int nt : counts) {
                        for (int s = 0; s < config.n_samples; ++s) {
                            jobs.push_back({k, cat, order, ns, nt, derive_seed(base, jobs.size())});
                        }
                    }
                }
            }
        }
    }
    const auto& model = *models.text;
    collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
        const Job& j = jobs[i];
        const int r_tilde = cc ? expected_continued(j.ns, j.nt, j.k) : expected_max_latent(j.ns, j.nt, j.k);
        nlohmann::json labels = {{"k", j.k},          {"category", name_of(j.category)},
                                 {"order", name_of(j.order)}, {"n_source", j.ns},
                                 {"n_target", j.nt},  {"relation", j.ns < j.nt ? "source_smaller"
                                                                   : j.ns > j.nt ? "source_larger"
                                                                                 : "equal"}};
        std::vector<ReportRecord> out;
        const std::array<std::string, 3> types{"both", "elements", "separators"};
        auto skip = [&](const std::string& why) {
            for (const auto& type : types) {
                ReportRecord r;
                r.labels = labels;
                r.labels["patch_type"] = type;
                r.excluded = true;
                r.data = {{"skipped", why}, {"r_tilde", r_tilde}};
                out.push_back(std::move(r));
            }
            return out;
        };
        if (j.k > j.ns || j.k > j.nt) {
            return skip("k exceeds a list length");
        }
        const auto src = text_prompt(j.ns, j.category, j.order, derive_seed(j.seed, 1), config.item_pool);
        const auto tgt = text_prompt(j.nt, j.category, j.order, derive_seed(j.seed, 2), config.item_pool);
        const auto cache = capture(model, src);
        const int s_first = src.list_positions[static_cast<std::size_t>(j.ns - j.k)];
        const int t_first = tgt.list_positions[static_cast<std::size_t>(cc ? 0 : j.nt - j.k)];
        const int span_len = 2 * j.k - 1;
        for (const auto& type : types) {
            ReportRecord r;
            r.labels = labels;
            r.labels["patch_type"] = type;
            InterventionSpec spec;
            spec.mode = InterventionMode::interchange;
            spec.regime = Regime::online;
            for (int o = 0; o < span_len; ++o) {
                const bool is_item = o % 2 == 0;
                if ((type == "elements" && !is_item) || (type == "separators" && is_item)) {
                    continue;
                }
                spec.position_map.emplace_back(s_first + o, t_first + o);
            }
            if (spec.position_map.empty()) {
                r.excluded = true;
                r.data = {{"skipped", "no separators inside a single-item span"}, {"r_tilde", r_tilde}};
                out.push_back(std::move(r));
                continue;
            }
            const PatchRun run = run_patched(model, tgt, spec, &cache);
            const double pts = p_of(run.patched, r_tilde), ptp = p_of(run.baseline, r_tilde);
            const double prp = p_of(run.baseline, j.nt), prs = p_of(run.patched, j.nt);
            r.data = {{"r_tilde", r_tilde}, {"r_prime", j.nt}, {"components", {pts, ptp, prp, prs}},
                      {"position_map", spec.position_map}, {"clean_correct", clean_correct<float>(run, tgt)}};
            if (r_tilde > kMaxCount || r_tilde < 1) {
                r.excluded = true;
                r.data["skipped"] = "expected answer has no digit token";
            } else if (r_tilde == j.nt) {
                r.excluded = true;
                r.data["skipped"] = "expected answer equals the target answer";
            } else {
                r.value = ci_score(pts, ptp, prp, prs);
            }
            out.push_back(std::move(r));
        }
        return out;
    });
    rep.groupings = {{"k", "patch_type", "order"},
                     {"k", "patch_type", "order", "relation"},
                     {"k", "patch_type", "order", "category"},
                     {"k", "patch_type", "n_source", "n_target"}};
    flag_accuracy(rep, config);
    rep.finalize();
    // 8x8 CI matrix per (k, patch type).
    for (const int k : config.ks) {
        for (const std::string type : {"both", "elements", "separators"}) {
            MatrixArtifact m;
            m.name = "ci_k" + std::to_string(k) + "_" + type;
            m.normalization = "none (CI in [-1, 1])";
            m.lo = -1.0;
            for (int ns = 2; ns <= 9; ++ns) {
                m.row_labels.push_back("src" + std::to_string(ns));
                std::vector<double> row;
                for (int nt = 2; nt <= 9; ++nt) {
                    const auto* c = rep.find({"k", "patch_type", "n_source", "n_target"},
                                             {{"k", k}, {"patch_type", type}, {"n_source", ns}, {"n_target", nt}});
                    row.push_back(c && !c->empty ? c->aggregate.mean : std::nan(""));
                }
                m.values.push_back(row);
            }
            for (int nt = 2; nt <= 9; ++nt) {
                m.col_labels.push_back("tgt" + std::to_string(nt));
            }
            rep.matrices.push_back(std::move(m));
        }
    }
    return rep;
}

} // namespace detail

inline ExperimentReport exp_continued_counting(const ExperimentConfig& config, const ModelSet& models) {
    return detail::pair_transfer(config, models, detail::PairKind::continued);
}

inline ExperimentReport exp_max_latent(const ExperimentConfig& config, const ModelSet& models) {
    return detail::pair_transfer(config, models, detail::PairKind::max_latent);
}

// ----------------------------------------------------------------- type_specific

/// Latent count of one type's final item, with the count labels the
/// hypotheses predict.
struct TypeCountLabels {
    int gen = 0;   ///< items so far
    int sp = 0;    ///< contiguous run of the type
    int sp_a = 0;  ///< all items of the type so far
    int sp_l = 0;  ///< last group of the type
};

/// Labels at list position `index` (0-based) of `types`.
inline TypeCountLabels type_count_labels(const std::vector<int>& types, int index) {
    TypeCountLabels l;
    const int t = types[static_cast<std::size_t>(index)];
    l.gen = index + 1;
    for (int i = 0; i <= index; ++i) {
        l.sp_a += types[static_cast<std::size_t>(i)] == t ? 1 : 0;
    }
    for (int i = index; i >= 0 && types[static_cast<std::size_t>(i)] == t; --i) {
        ++l.sp_l;
    }
    l.sp = l.sp_l;
    return l;
}

/// Grouped lists (A..A B..B C..C) and interrupted lists (A..A B..B A..A) with
/// interruption length 1..max_gap.
inline ExperimentReport exp_type_specific(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "type_specific";
    rep.schema = "type_specific_counter_bars";
    detail::require_text(models, rep.name);
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    struct Job {
        std::vector<int> types;
        std::vector<int> probe_at; ///< 0-based list indices to decode
        std::string arrangement;
        int gap;
    };
    std::vector<Job> jobs;
    const int n_configs = 4 * config.n_samples;
    for (int c = 0; c < n_configs; ++c) {
        Rng rng(derive_seed(base, static_cast<std::uint64_t>(c)));
        auto pool = config.item_pool.size() >= 3 ? config.item_pool : detail::all_item_types();
        rng.shuffle(std::span<int>(pool));
        // Grouped: 2 or 3 groups of 2..4 items, at most 9 in total.
        {
            Job j;
            j.arrangement = "grouped";
            j.gap = 0;
            const int groups = 2 + static_cast<int>(rng.below(2));
            for (int g = 0; g < groups; ++g) {
                const int size = 2 + static_cast<int>(rng.below(3));
                if (static_cast<int>(j.types.size()) + size > kMaxCount) {
                    break;
                }
                j.types.insert(j.types.end(), static_cast<std::size_t>(size), pool[static_cast<std::size_t>(g)]);
                if (g > 0) {
                    j.probe_at.push_back(static_cast<int>(j.types.size()) - 1);
                }
            }
            jobs.push_back(std::move(j));
        }
        for (int gap = 1; gap <= config.max_gap; ++gap) {
            Job j;
            j.arrangement = "interrupted";
            j.gap = gap;
            const int a = 2 + static_cast<int>(rng.below(2));
            const int c2 = std::min(2 + static_cast<int>(rng.below(3)), kMaxCount - a - gap);
            if (c2 < 1) {
                continue;
            }
            j.types.assign(static_cast<std::size_t>(a), pool[0]);
            j.types.insert(j.types.end(), static_cast<std::size_t>(gap), pool[1]);
            j.types.insert(j.types.end(), static_cast<std::size_t>(c2), pool[0]);
            j.probe_at.push_back(static_cast<int>(j.types.size()) - 1);
            jobs.push_back(std::move(j));
        }
    }
    ProbeConfig probe;
    detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
        const Job& j = jobs[i];
        const auto s = generate_text_from_items(j.types, config.orders.front(), std::nullopt, false);
        const auto cache = capture(*models.text, s);
        std::vector<ReportRecord> out;
        for (const int idx : j.probe_at) {
            const Decoding d = decode(*models.text, cache, s.list_positions[static_cast<std::size_t>(idx)], probe);
            const TypeCountLabels l = type_count_labels(j.types, idx);
            std::vector<std::pair<std::string, int>> metrics{{"Gen", l.gen}};
            if (j.arrangement == "grouped") {
                metrics.emplace_back("Sp", l.sp);
            } else {
                metrics.emplace_back("Sp-A", l.sp_a);
                metrics.emplace_back("Sp-L", l.sp_l);
            }
            for (const auto& [metric, value] : metrics) {
                ReportRecord r;
                r.labels = {{"arrangement", j.arrangement}, {"metric", metric}, {"gap", j.gap}};
                r.value = d.renormalized_at(value);
                r.data = {{"items", j.types}, {"index", idx}, {"label", value}, {"decoding", detail::digits_json(d)}};
                out.push_back(std::move(r));
            }
        }
        return out;
    });
    if (models.visual) {
        rep.warnings.push_back("type-specific counters are measured on text lists only");
    }
    rep.groupings = {{"arrangement", "metric"}, {"arrangement", "metric", "gap"}};
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- layerwise

/// Item n of a count-9 list decoded with cutoffs 1..L: an L x 9 matrix of
/// P(n), column-max normalized, and min-layer(n).
inline ExperimentReport exp_layerwise(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "layerwise";
    rep.schema = "layerwise_cutoff_heatmap";
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    struct Variant {
        std::string name;
        const Transformer<float>* model;
        Modality modality;
        Category category;
    };
    std::vector<Variant> variants;
    if (models.text) {
        for (const Category cat : config.categories) {
            variants.push_back({detail::name_of(cat), models.text, Modality::text, cat});
        }
    }
    if (models.visual && detail::grid_fits(*models.visual, 6)) {
        variants.push_back({"visual", models.visual, Modality::visual, Category::monotypic});
    }
    bool saturated = true;
    for (const auto& var : variants) {
        const int L = var.model->config().n_layers;
        ProbeConfig probe;
        probe.modality = var.modality;
        // dists[s][item][cutoff]
        std::vector<std::vector<std::vector<std::array<double, 9>>>> dists(static_cast<std::size_t>(config.n_samples));
        std::vector<char> exact(static_cast<std::size_t>(config.n_samples), 1);
        detail::collect(rep, static_cast<std::size_t>(config.n_samples), config.workers, [&](std::size_t s) {
            const auto seed = derive_seed(base, s);
            const auto sample = var.modality == Modality::text
                                    ? detail::text_prompt(9, var.category, config.orders.front(), seed, config.item_pool)
                                    : detail::visual_prompt(9, var.category, 6, config.orders.front(), seed);
            const auto cache = capture(*var.model, sample);
            std::vector<ReportRecord> out;
            dists[s].resize(sample.list_positions.size());
            for (std::size_t item = 0; item < sample.list_positions.size(); ++item) {
                const int n = static_cast<int>(item) + 1;
                const auto lw = decode_layerwise(*var.model, cache, sample.list_positions[item], probe);
                const auto all = decode(*var.model, cache, sample.list_positions[item], probe);
                if (all.renormalized != lw.back().renormalized || all.raw != lw.back().raw) {
                    exact[s] = 0;
                }
                for (int l = 1; l <= L; ++l) {
                    const auto& d = lw[static_cast<std::size_t>(l - 1)];
                    dists[s][item].push_back(d.renormalized);
                    ReportRecord r;
                    r.labels = {{"variant", var.name}, {"cutoff", l}, {"item", n}};
                    r.value = d.renormalized_at(n);
                    r.data = {{"decoding", detail::digits_json(d)}};
                    out.push_back(std::move(r));
                }
            }
            return out;
        });
        MatrixArtifact raw, norm;
        raw.name = "cutoff_" + var.name + "_raw";
        raw.normalization = "none";
        norm.name = "cutoff_" + var.name;
        norm.normalization = "column max";
        std::vector<int> min_layer(9, 0);
        std::vector<std::array<double, 9>> rows;
        for (int l = 1; l <= L; ++l) {
            std::array<double, 9> row{};
            for (int n = 1; n <= 9; ++n) {
                std::array<double, 9> mean{};
                int cnt = 0;
                for (const auto& per_sample : dists) {
                    if (per_sample.size() >= static_cast<std::size_t>(n)) {
                        const auto& d = per_sample[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(l - 1)];
                        for (std::size_t c = 0; c < 9; ++c) {
                            mean[c] += d[c];
                        }
                        ++cnt;
                    }
                }
                if (cnt == 0) {
                    continue;
                }
                row[static_cast<std::size_t>(n - 1)] = mean[static_cast<std::size_t>(n - 1)] / cnt;
                const auto best = std::max_element(mean.begin(), mean.end()) - mean.begin();
                if (min_layer[static_cast<std::size_t>(n - 1)] == 0 && best == n - 1) {
                    min_layer[static_cast<std::size_t>(n - 1)] = l;
                }
            }
            rows.push_back(row);
            raw.row_labels.push_back("L" + std::to_string(l));
            raw.values.emplace_back(row.begin(), row.end());
        }
        for (const auto& r : normalize_columns(rows)) {
            norm.values.emplace_back(r.begin(), r.end());
        }
        norm.row_labels = raw.row_labels;
        raw.col_labels = norm.col_labels = detail::digit_labels();
        nlohmann::json ml = nlohmann::json::array();
        bool monotone = true;
        int prev = 0;
        for (const int m : min_layer) {
            ml.push_back(m == 0 ? nlohmann::json(nullptr) : nlohmann::json(m));
            if (m != 0) {
                monotone = monotone && m >= prev;
                prev = m;
            }
        }
        rep.tables["min_layer"][var.name] = ml;
        rep.tables["min_layer_monotone"][var.name] = monotone;
        for (const char e : exact) {
            saturated = saturated && e != 0;
        }
        rep.matrices.push_back(std::move(norm));
        rep.matrices.push_back(std::move(raw));
    }
    rep.tables["full_cutoff_equals_all_layers"] = saturated;
    rep.groupings = {{"variant", "cutoff"}, {"variant", "cutoff", "item"}};
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- linear_additivity

/// Window used when none is configured: the top third of the layers.
inline std::vector<int> default_steering_window(int n_layers) {
    const int width = std::max(1, (n_layers + 2) / 3);
    std::vector<int> out;
    for (int l = n_layers - width; l < n_layers; ++l) {
        out.push_back(l);
    }
    return out;
}

/// Adds v(N -> N+K) to the final item over the layer window; CI with
/// r~ = N + K. The transfer variant estimates means on other item types.
inline ExperimentReport exp_linear_additivity(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "linear_additivity";
    rep.schema = "additivity_ci_by_shift";
    rep.reference = {{"llm", {{"K1", "0.69 +- 0.05"}, {"K2", "0.66 +- 0.08"}, {"K3", "0.85 +- 0.11"},
                              {"K4", "0.60 +- 0.12"}}},
                     {"lvlm", {{"K1", "0.47 +- 0.05"}, {"K2", "0.62 +- 0.07"}, {"K3", "0.33 +- 0.08"},
                               {"K4", "0.25 +- 0.07"}}}};
    detail::require_text(models, rep.name);
    const auto& model = *models.text;
    const int L = model.config().n_layers;
    const std::vector<int> window = config.layers.empty() ? default_steering_window(L) : config.layers;
    for (const int l : window) {
        if (l < 0 || l >= L) {
            throw ConfigError("steering layer " + std::to_string(l) + " out of range");
        }
    }
    rep.tables["window"] = window;
    const std::uint64_t base = detail::stream_seed(config, rep.name);

    std::vector<int> mean_pool_transfer;
    for (const int t : config.item_pool) {
        if (std::find(config.transfer_pool.begin(), config.transfer_pool.end(), t) == config.transfer_pool.end()) {
            mean_pool_transfer.push_back(t);
        }
    }
    struct Variant {
        std::string name;
        std::vector<int> mean_pool;
        std::vector<int> target_pool;
        std::vector<Category> categories;
    };
    std::vector<Variant> variants{{"same", config.item_pool, config.item_pool, config.categories}};
    if (!config.transfer_pool.empty() && !mean_pool_transfer.empty()) {
        variants.push_back({"transfer", mean_pool_transfer, config.transfer_pool, {Category::monotypic}});
    }
    const int per_count = std::max(8, 2 * config.n_samples);
    for (const auto& var : variants) {
        std::vector<CountingSample> mean_samples;
        for (const Category cat : {Category::monotypic, Category::polytypic_unique}) {
            for (int n = 1; n <= kMaxCount; ++n) {
                for (int s = 0; s < per_count; ++s) {
                    if (cat == Category::polytypic_unique && n > static_cast<int>(var.mean_pool.size())) {
                        continue;
                    }
                    mean_samples.push_back(detail::text_prompt(
                        n, cat, config.orders.front(), derive_seed(base ^ 0x4d45414eULL, mean_samples.size()),
                        var.mean_pool));
                }
            }
        }
        const MeanStore store = compute_mean_store(model, std::span<const CountingSample>(mean_samples));
        struct Job {
            int shift;
            int n;
            Category category;
            std::uint64_t seed;
        };
        std::vector<Job> jobs;
        for (const int K : config.shifts) {
            for (const Category cat : var.categories) {
                for (const int n : config.counts) {
                    if (n + K > kMaxCount) {
                        continue;
                    }
                    if (cat == Category::polytypic_unique && n > static_cast<int>(var.target_pool.size())) {
                        continue;
                    }
                    for (int s = 0; s < config.n_samples; ++s) {
                        jobs.push_back({K, n, cat, derive_seed(base, jobs.size() + 7919 * (var.name == "transfer"))});
                    }
                }
            }
        }
        detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
            const Job& j = jobs[i];
            const auto s = detail::text_prompt(j.n, j.category, config.orders.front(), j.seed, var.target_pool);
            InterventionSpec spec = InterventionSpec::at_positions(
                InterventionMode::add_vector, {s.list_positions[static_cast<std::size_t>(j.n - 1)]});
            spec.layers = window;
            for (const int l : window) {
                spec.vector_by_layer[l] = position_difference_vector(store, j.n, j.n + j.shift, l);
            }
            const PatchRun run = run_patched(model, s, spec, nullptr, &store);
            const int rt = j.n + j.shift;
            const double pts = detail::p_of(run.patched, rt), ptp = detail::p_of(run.baseline, rt);
            const double prp = detail::p_of(run.baseline, j.n), prs = detail::p_of(run.patched, j.n);
            ReportRecord r;
            r.labels = {{"variant", var.name}, {"shift", j.shift}, {"count", j.n},
                        {"category", detail::name_of(j.category)}};
            r.data = {{"r_tilde", rt}, {"r_prime", j.n}, {"components", {pts, ptp, prp, prs}},
                      {"clean_correct", detail::clean_correct<float>(run, s)}};
            if (j.shift == 0) {
                r.value = 0.0;
                r.data["note"] = "zero shift adds the zero vector";
            } else {
                r.value = ci_score(pts, ptp, prp, prs);
            }
            return std::vector<ReportRecord>{std::move(r)};
        });
    }
    rep.groupings = {{"variant", "shift"}, {"variant", "shift", "count"}};
    detail::flag_accuracy(rep, config);
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- separator_shortcut

/// Every separator receives the first separator's activations (all layers);
/// drop of the ground-truth probability per count and category.
inline ExperimentReport exp_separator_shortcut(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "separator_shortcut";
    rep.schema = "separator_patch_drop";
    rep.reference = {{"llm_monotypic_drop", "0.75 +- 0.39"}, {"llm_polytypic_drop", "0.97 +- 0.05"}};
    detail::require_text(models, rep.name);
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    struct Job {
        Category category;
        int count;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    nlohmann::json skipped = nlohmann::json::array();
    for (const Category cat : config.categories) {
        for (const int n : config.counts) {
            if (n < 3) {
                skipped.push_back({{"category", detail::name_of(cat)}, {"count", n},
                                   {"reason", n == 1 ? "no separators" : "a single separator patched onto itself"}});
                continue;
            }
            for (int s = 0; s < config.n_samples; ++s) {
                jobs.push_back({cat, n, derive_seed(base, jobs.size())});
            }
        }
    }
    rep.tables["empty_cells"] = skipped;
    const auto& model = *models.text;
    detail::collect(rep, jobs.size(), config.workers, [&](std::size_t i) {
        const Job& j = jobs[i];
        const auto s = detail::text_prompt(j.count, j.category, config.orders.front(), j.seed, config.item_pool);
        const auto cache = capture(model, s);
        InterventionSpec spec;
        spec.mode = InterventionMode::interchange;
        for (std::size_t k = 1; k < s.separator_positions.size(); ++k) {
            spec.position_map.emplace_back(s.separator_positions[0], s.separator_positions[k]);
        }
        const PatchRun run = run_patched(model, s, spec, &cache);
        const double before = detail::p_of(run.baseline, s.ground_truth);
        const double after = detail::p_of(run.patched, s.ground_truth);
        int patched_argmax = 1;
        for (int n = 2; n <= kMaxCount; ++n) {
            if (detail::p_of(run.patched, n) > detail::p_of(run.patched, patched_argmax)) {
                patched_argmax = n;
            }
        }
        ReportRecord r;
        r.labels = {{"category", detail::name_of(j.category)}, {"count", j.count}};
        r.value = probability_drop(before, after);
        r.data = {{"p_before", before}, {"p_after", after}, {"patched_argmax", patched_argmax},
                  {"sample", run.target_id}, {"clean_correct", detail::clean_correct<float>(run, s)}};
        return std::vector<ReportRecord>{std::move(r)};
    });
    rep.groupings = {{"category"}, {"category", "count"}};
    detail::flag_accuracy(rep, config);
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- representation

/// PCA of item (and separator) embeddings per layer, and type-averaged cosine
/// matrices between list positions.
inline ExperimentReport exp_representation(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "representation";
    rep.schema = "pca_and_cosine_by_layer";
    detail::require_text(models, rep.name);
    const auto& model = *models.text;
    const int L = model.config().n_layers;
    const std::uint64_t base = detail::stream_seed(config, rep.name);
    // caches[type][sample]
    std::vector<std::vector<ActivationCache<float>>> caches(config.item_pool.size());
    std::vector<std::vector<CountingSample>> samples(config.item_pool.size());
    for (std::size_t t = 0; t < config.item_pool.size(); ++t) {
        for (int s = 0; s < config.n_samples; ++s) {
            samples[t].push_back(detail::text_prompt(9, Category::monotypic, config.orders.front(),
                                                     derive_seed(base, t * 1000 + static_cast<std::size_t>(s)),
                                                     {config.item_pool[t]}));
        }
        caches[t].resize(samples[t].size());
    }
    for (std::size_t t = 0; t < samples.size(); ++t) {
        parallel_for(samples[t].size(), config.workers,
                     [&](std::size_t s) { caches[t][s] = capture(model, samples[t][s]); });
    }
    std::vector<int> layers;
    for (int l = 0; l < L; ++l) {
        layers.push_back(l);
    }
    const auto sweep = layerwise_sweep(
        [&](int layer) {
            EmbeddingSet items, seps;
            std::vector<EmbeddingSet> per_type;
            for (std::size_t t = 0; t < samples.size(); ++t) {
                std::vector<std::vector<double>> mean(9, std::vector<double>(static_cast<std::size_t>(model.config().d_model), 0.0));
                for (std::size_t s = 0; s < samples[t].size(); ++s) {
                    const auto& smp = samples[t][s];
                    for (std::size_t i = 0; i < smp.list_positions.size(); ++i) {
                        const auto v = caches[t][s].at({HookFamily::resid_post, layer, smp.list_positions[i]});
                        std::vector<double> dv(v.begin(), v.end());
                        for (std::size_t k = 0; k < dv.size(); ++k) {
                            mean[i][k] += dv[k] / static_cast<double>(samples[t].size());
                        }
                        items.add(std::move(dv), {static_cast<int>(i) + 1, config.item_pool[t], layer, "item"});
                    }
                    for (std::size_t i = 0; i < smp.separator_positions.size(); ++i) {
                        const auto v = caches[t][s].at({HookFamily::resid_post, layer, smp.separator_positions[i]});
                        seps.add(std::vector<double>(v.begin(), v.end()),
                                 {static_cast<int>(i) + 2, config.item_pool[t], layer, "separator"});
                    }
                }
                EmbeddingSet m;
                for (std::size_t i = 0; i < 9; ++i) {
                    m.add(mean[i], {static_cast<int>(i) + 1, config.item_pool[t], layer, "mean"});
                }
                per_type.push_back(std::move(m));
            }
            const PcaResult pi = pca_project(items, 2);
            const PcaResult ps = pca_project(seps, 2);
            // Averaged over pairs of distinct types (all pairs with one type).
            CosineMatrix cos;
            if (per_type.size() > 1) {
                std::vector<std::vector<double>> acc(9, std::vector<double>(9, 0.0));
                int pairs = 0;
                for (std::size_t a = 0; a < per_type.size(); ++a) {
                    for (std::size_t b = 0; b < per_type.size(); ++b) {
                        if (a == b) {
                            continue;
                        }
                        const auto m = averaged_cosine_matrix({per_type[a]}, {per_type[b]});
                        for (std::size_t i = 0; i < 9; ++i) {
                            for (std::size_t k = 0; k < 9; ++k) {
                                acc[i][k] += m[i][k];
                            }
                        }
                        ++pairs;
                    }
                }
                for (auto& row : acc) {
                    for (double& x : row) {
                        x /= pairs;
                    }
                }
                cos = acc;
            } else {
                cos = averaged_cosine_matrix(per_type, per_type);
            }
            double diag = 0.0, off = 0.0;
            for (std::size_t i = 0; i < 9; ++i) {
                for (std::size_t k = 0; k < 9; ++k) {
                    (i == k ? diag : off) += cos[i][k];
                }
            }
            std::vector<int> item_classes, sep_classes;
            for (const auto& l : items.labels) {
                item_classes.push_back(l.list_position);
            }
            for (const auto& l : seps.labels) {
                sep_classes.push_back(std::min(l.list_position, 9));
            }
            return nlohmann::json{{"items_pca", pi},
                                  {"separators_pca", ps},
                                  {"item_classes", item_classes},
                                  {"separator_classes", sep_classes},
                                  {"cosine", cos},
                                  {"diagonal_contrast", diag / 9.0 - off / 72.0}};
        },
        layers);
    for (const auto& a : sweep) {
        const auto& d = a.data;
        for (const auto& [metric, value] :
             std::vector<std::pair<std::string, double>>{
                 {"diagonal_contrast", d.at("diagonal_contrast").get<double>()},
                 {"items_pca_explained_2", d.at("items_pca").at("explained_ratio")[0].get<double>() +
                                               d.at("items_pca").at("explained_ratio")[1].get<double>()}}) {
            ReportRecord r;
            r.labels = {{"layer", a.layer}, {"metric", metric}};
            r.value = value;
            rep.records.push_back(std::move(r));
        }
        MatrixArtifact m;
        m.name = "cosine_L" + std::to_string(a.layer + 1);
        m.values = d.at("cosine").get<std::vector<std::vector<double>>>();
        m.row_labels = m.col_labels = detail::digit_labels();
        m.normalization = "cosine, averaged over item-type pairs";
        m.lo = -1.0;
        rep.matrices.push_back(std::move(m));
        rep.svgs.emplace_back("pca_items_L" + std::to_string(a.layer + 1) + ".svg",
                              scatter_svg(d.at("items_pca").at("coords").get<std::vector<std::vector<double>>>(),
                                          d.at("item_classes").get<std::vector<int>>(),
                                          "items, layer " + std::to_string(a.layer + 1)));
        rep.svgs.emplace_back("pca_separators_L" + std::to_string(a.layer + 1) + ".svg",
                              scatter_svg(d.at("separators_pca").at("coords").get<std::vector<std::vector<double>>>(),
                                          d.at("separator_classes").get<std::vector<int>>(),
                                          "separators, layer " + std::to_string(a.layer + 1)));
        rep.tables["pca_explained_ratio"]["L" + std::to_string(a.layer + 1)] = d.at("items_pca").at("explained_ratio");
    }
    rep.groupings = {{"metric"}, {"metric", "layer"}};
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- behavioral

/// Answer accuracy over categories, orders, questions and separator conditions.
inline ExperimentReport exp_behavioral(const ExperimentConfig& config, const ModelSet& models) {
    ExperimentReport rep;
    rep.name = "behavioral";
    rep.schema = "behavioral_accuracy";
    EvalConfig eval;
    eval.samples_per_cell = config.n_samples;
    eval.seed = detail::stream_seed(config, rep.name);
    if (models.text) {
        CurriculumEntry text;
        text.counts = config.counts;
        text.item_pool = config.item_pool;
        text.separators = {SeparatorCondition::normal, SeparatorCondition::various, SeparatorCondition::less,
                           SeparatorCondition::more, SeparatorCondition::none};
        eval.families.push_back(text);
    }
    std::vector<int> grids;
    if (models.visual) {
        for (const int g : config.grid_sizes) {
            if (detail::grid_fits(*models.visual, g)) {
                grids.push_back(g);
            }
        }
    }
    if (!grids.empty()) {
        CurriculumEntry vis;
        vis.modality = Modality::visual;
        vis.counts = config.counts;
        vis.grid_sizes = grids;
        eval.families.push_back(vis);
    }
    const auto cells = expand_cells(eval);
    detail::collect(rep, cells.size(), config.workers, [&](std::size_t i) {
        const AccuracyCell& cell = cells[i].first;
        const auto& fam = eval.families[cells[i].second];
        const auto* model = cell.modality == Modality::text ? models.text : models.visual;
        std::vector<ReportRecord> out;
        for (const auto& s : eval_cell_samples(cell, fam, eval.samples_per_cell, derive_seed(eval.seed, i))) {
            const int pred = predict_count(*model, s);
            ReportRecord r;
            r.labels = {{"modality", cell.modality},     {"category", cell.category},   {"order", cell.order},
                        {"question", cell.question},     {"separators", cell.separators}, {"grid", cell.grid_size},
                        {"count", cell.count}};
            r.value = pred == s.ground_truth ? 1.0 : 0.0;
            r.data = {{"prediction", pred}, {"truth", s.ground_truth}};
            out.push_back(std::move(r));
        }
        return out;
    });
    rep.groupings = {{"modality", "separators"},
                     {"modality", "category", "order", "question", "separators"},
                     {"modality", "category", "order", "question", "separators", "grid", "count"}};
    rep.finalize();
    return rep;
}

// ----------------------------------------------------------------- registry

struct ExperimentEntry {
    std::string name;
    std::string schema;
    std::function<ExperimentReport(const ExperimentConfig&, const ModelSet&)> run;
};

inline const std::vector<ExperimentEntry>& experiment_registry() {
    static const std::vector<ExperimentEntry> r{
        {"zero_locate", "zero_drop_by_count", exp_zero_locate},
        {"interchange_locate", "interchange_ci_by_span", exp_interchange_locate},
        {"item_locate", "item_drop_and_fg_bg", exp_item_locate},
        {"per_item_latent", "latent_count_heatmap", exp_per_item_latent},
        {"continued_counting", "continued_counting_ci", exp_continued_counting},
        {"max_latent", "max_latent_ci", exp_max_latent},
        {"type_specific", "type_specific_counter_bars", exp_type_specific},
        {"layerwise", "layerwise_cutoff_heatmap", exp_layerwise},
        {"linear_additivity", "additivity_ci_by_shift", exp_linear_additivity},
        {"separator_shortcut", "separator_patch_drop", exp_separator_shortcut},
        {"representation", "pca_and_cosine_by_layer", exp_representation},
        {"behavioral", "behavioral_accuracy", exp_behavioral},
    };
    return r;
}

inline std::vector<std::string> experiment_names() {
    std::vector<std::string> out;
    for (const auto& e : experiment_registry()) {
        out.push_back(e.name);
    }
    return out;
}

inline const ExperimentEntry& find_experiment(const std::string& name) {
    for (const auto& e : experiment_registry()) {
        if (e.name == name) {
            return e;
        }
    }
    std::string known;
    for (const auto& n : experiment_names()) {
        known += (known.empty() ? "" : ", ") + n;
    }
    throw ConfigError("unknown experiment '" + name + "'; registered: " + known);
}

/// Runs one experiment and stamps its metadata.
inline ExperimentReport run_experiment(const std::string& name, ExperimentConfig config, const ModelSet& models) {
    const auto& entry = find_experiment(name);
    config.name = name;
    config.validate();
    ExperimentReport rep = entry.run(config, models);
    const nlohmann::json cj = config;
    rep.config = cj;
    rep.metadata = {{"tool_version", kToolVersion}, {"config_hash", config_hash(cj)}, {"seed", config.seed},
                    {"text_checkpoint", models.text_id}, {"visual_checkpoint", models.visual_id},
                    {"created", utc_timestamp()}};
    if (!rep.audit()) {
        throw AggregationError(name + ": aggregates do not recompute from the raw records");
    }
    return rep;
}

struct ManifestEntry {
    std::string name;
    std::string schema;
    std::string status; ///< "ok" or "failed"
    std::string error;
    std::string report;
    nlohmann::json summary;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
    j = {{"name", e.name}, {"schema", e.schema}, {"status", e.status}, {"error", e.error},
         {"report", e.report}, {"summary", e.summary}};
}

struct Manifest {
    std::vector<ManifestEntry> experiments;
    nlohmann::json metadata;
    std::vector<ExperimentReport> reports;
};

/// Headline cells: the first grouping of the report.
inline nlohmann::json report_summary(const ExperimentReport& r) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : r.cells) {
        if (!r.groupings.empty() && c.by == r.groupings.front()) {
            out.push_back(c);
        }
    }
    return out;
}

/// Every registered experiment (or `names`) with shared seeds; failures are
/// recorded and the suite continues. Writes <out>/<name>/ and <out>/manifest.json.
inline Manifest run_all(const ExperimentConfig& config, const ModelSet& models, const std::filesystem::path& out_dir,
                        const std::vector<std::string>& names = {},
                        const std::function<void(const ManifestEntry&)>& on_done = {}) {
    Manifest m;
    const auto selected = names.empty() ? experiment_names() : names;
    for (const auto& name : selected) {
        ManifestEntry e;
        e.name = name;
        try {
            e.schema = find_experiment(name).schema;
            ExperimentReport rep = run_experiment(name, config, models);
            rep.write(out_dir / name);
            e.status = "ok";
            e.report = (std::filesystem::path(name) / "report.json").string();
            e.summary = report_summary(rep);
            m.reports.push_back(std::move(rep));
        } catch (const std::exception& ex) {
            e.status = "failed";
            e.error = ex.what();
        }
        if (on_done) {
            on_done(e);
        }
        m.experiments.push_back(std::move(e));
    }
    nlohmann::json cj = config;
    m.metadata = {{"tool_version", kToolVersion}, {"config_hash", config_hash(cj)}, {"seed", config.seed},
                  {"text_checkpoint", models.text_id}, {"visual_checkpoint", models.visual_id},
                  {"created", utc_timestamp()}};
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir / "manifest.json");
    out << nlohmann::json{{"metadata", m.metadata}, {"experiments", m.experiments}}.dump(2) << '\n';
    return m;
}

} // namespace countlab
