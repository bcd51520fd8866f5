#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/checkpoint.hpp"
#include "countlab/dataset.hpp"
#include "countlab/error.hpp"
#include "countlab/model.hpp"
#include "countlab/parallel.hpp"
#include "countlab/rng.hpp"

namespace countlab {

/// Short identifier used in error messages and logs.
inline std::string sample_id(const CountingSample& s) {
    return s.config.dump() + "#" + std::to_string(s.seed);
}

// ----------------------------------------------------------------- loss

/// Cross-entropy of the ground-truth digit at the answer position.
template <class T>
double loss(std::span<const T> readout_logits, const CountingSample& sample) {
    if (!sample.answer_position) {
        throw InputError("sample has no answer position: " + sample_id(sample));
    }
    const TokenId truth = sample.tokens[static_cast<std::size_t>(*sample.answer_position)];
    double mx = -INFINITY;
    for (const T v : readout_logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double sum = 0.0;
    for (const T v : readout_logits) {
        sum += std::exp(static_cast<double>(v) - mx);
    }
    return std::log(sum) + mx - static_cast<double>(readout_logits[static_cast<std::size_t>(truth)]);
}

template <class T>
double loss(const ForwardResult<T>& fwd, const CountingSample& sample) {
    if (!sample.answer_position) {
        throw InputError("sample has no answer position: " + sample_id(sample));
    }
    return loss(fwd.logits_at(*sample.answer_position - 1), sample);
}

struct LossOptions {
    /// Also predict every next token of the prompt (averaged with the answer term).
    bool full_lm = false;
};

/// Loss of one sample and its gradient, accumulated into `grad` with `scale`.
template <class T>
double sample_loss_and_grad(const Transformer<T>& model, const CountingSample& sample, const LossOptions& opt,
                            double scale, T* grad) {
    if (!sample.answer_position) {
        throw InputError("sample has no answer position: " + sample_id(sample));
    }
    ForwardOptions<T> fo;
    fo.record_cache = false;
    fo.record_trace = grad != nullptr;
    std::vector<TokenId> targets;
    if (opt.full_lm) {
        for (int t = 0; t + 1 < sample.length(); ++t) {
            fo.logit_positions.push_back(t);
            targets.push_back(sample.tokens[static_cast<std::size_t>(t + 1)]);
        }
    } else {
        fo.logit_positions = {*sample.answer_position - 1};
        targets = {sample.tokens[static_cast<std::size_t>(*sample.answer_position)]};
    }
    const auto fwd = model.forward(sample, fo);
    const int v = model.config().vocab_size;
    const double per = 1.0 / static_cast<double>(targets.size());
    double total = 0.0;
    Matrix<T> dlogits(static_cast<int>(targets.size()), v);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto row = fwd.logits.row_span(static_cast<int>(i));
        for (const T x : row) {
            if (!std::isfinite(static_cast<double>(x))) {
                throw NumericError("non-finite logits for sample " + sample_id(sample));
            }
        }
        const auto p = softmax(row);
        const auto truth = static_cast<std::size_t>(targets[i]);
        double mx = -INFINITY;
        for (const T x : row) {
            mx = std::max(mx, static_cast<double>(x));
        }
        double z = 0.0;
        for (const T x : row) {
            z += std::exp(static_cast<double>(x) - mx);
        }
        total += per * (std::log(z) + mx - static_cast<double>(row[truth]));
        T* g = dlogits.row(static_cast<int>(i));
        for (int k = 0; k < v; ++k) {
            g[k] = static_cast<T>(scale * per * (p[static_cast<std::size_t>(k)] - (static_cast<std::size_t>(k) == truth ? 1.0 : 0.0)));
        }
    }
    if (!std::isfinite(total)) {
        throw NumericError("non-finite loss for sample " + sample_id(sample));
    }
    if (grad != nullptr) {
        model.backward(sample.tokens, sample.grid, fwd, dlogits, grad);
    }
    return total;
}

template <class T>
struct GradientResult {
    std::vector<T> grad; ///< d(mean loss)/d(weights), ParamLayout order
    double mean_loss = 0.0;
    std::vector<double> losses;
};

struct GradientOptions {
    LossOptions loss;
    int workers = 1;
    /// Samples per partial sum. Partial sums are added in chunk order, so the
    /// result does not depend on the worker count.
    int chunk = 4;
};

/// Exact gradient of the mean loss over `batch`.
template <class T>
GradientResult<T> gradients(const Transformer<T>& model, std::span<const CountingSample> batch,
                            const GradientOptions& opt = {}) {
    if (batch.empty()) {
        throw InputError("empty batch");
    }
    const std::size_t n = batch.size();
    const std::size_t chunk = static_cast<std::size_t>(std::max(opt.chunk, 1));
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    const std::size_t n_params = model.parameters().size();
    const double scale = 1.0 / static_cast<double>(n);
    std::vector<std::vector<T>> partial(n_chunks);
    GradientResult<T> out;
    out.losses.assign(n, 0.0);
    parallel_for(n_chunks, opt.workers, [&](std::size_t c) {
        partial[c].assign(n_params, T{});
        for (std::size_t i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i) {
            out.losses[i] = sample_loss_and_grad(model, batch[i], opt.loss, scale, partial[c].data());
        }
    });
    out.grad = std::move(partial[0]);
    for (std::size_t c = 1; c < n_chunks; ++c) {
        for (std::size_t k = 0; k < n_params; ++k) {
            out.grad[k] += partial[c][k];
        }
        std::vector<T>().swap(partial[c]);
    }
    for (const double l : out.losses) {
        out.mean_loss += l;
    }
    out.mean_loss /= static_cast<double>(n);
    return out;
}

// ----------------------------------------------------------------- curriculum

/// One family of training tasks; a sample draws each field uniformly.
struct CurriculumEntry {
    double weight = 1.0;
    Modality modality = Modality::text;
    std::vector<Category> categories{Category::monotypic, Category::polytypic_replicate, Category::polytypic_unique};
    std::vector<Order> orders{Order::question_first, Order::question_last};
    std::vector<QuestionKind> questions{QuestionKind::general, QuestionKind::specific};
    std::vector<SeparatorCondition> separators{SeparatorCondition::normal};
    std::vector<int> counts{1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> item_pool{0, 1, 2, 3, 4, 5, 6, 7, 8};
    /// Item pool override per category (text), e.g. to hold out types for one category only.
    std::map<Category, std::vector<int>> category_item_pool;
    std::vector<int> grid_sizes{6};

    std::vector<int> pool_for(Category c) const {
        const auto it = category_item_pool.find(c);
        return it == category_item_pool.end() ? item_pool : it->second;
    }

    void validate() const {
        if (!(weight > 0.0)) {
            throw ConfigError("curriculum weight must be positive");
        }
        if (categories.empty() || orders.empty() || questions.empty() || separators.empty() || counts.empty()) {
            throw ConfigError("curriculum entry has an empty choice list");
        }
        for (const int c : counts) {
            if (c < 1 || c > kMaxCount) {
                throw ConfigError("curriculum count out of range: " + std::to_string(c));
            }
        }
        if (modality == Modality::visual) {
            if (grid_sizes.empty()) {
                throw ConfigError("visual curriculum entry needs grid sizes");
            }
            for (const int g : grid_sizes) {
                VisualTaskConfig{.count = 1, .grid_size = g}.validate();
            }
        }
    }
};

namespace detail {

template <class E>
std::vector<E> enum_list(const nlohmann::json& j, const char* key, const std::vector<E>& fallback,
                         E (*parse)(const std::string&)) {
    if (!j.contains(key)) {
        return fallback;
    }
    std::vector<E> out;
    for (const auto& v : j.at(key)) {
        out.push_back(parse(v.get<std::string>()));
    }
    return out;
}

inline Modality parse_modality(const std::string& s) {
    return parse_enum(s, {Modality::text, Modality::visual});
}

} // namespace detail

inline void to_json(nlohmann::json& j, const CurriculumEntry& e) {
    j = {{"weight", e.weight},       {"modality", e.modality},   {"categories", e.categories},
         {"orders", e.orders},       {"questions", e.questions}, {"separators", e.separators},
         {"counts", e.counts},       {"item_pool", e.item_pool}, {"grid_sizes", e.grid_sizes}};
    if (!e.category_item_pool.empty()) {
        auto& m = j["category_item_pool"] = nlohmann::json::object();
        for (const auto& [c, pool] : e.category_item_pool) {
            m[nlohmann::json(c).get<std::string>()] = pool;
        }
    }
}

inline void from_json(const nlohmann::json& j, CurriculumEntry& e) {
    e = CurriculumEntry{};
    e.weight = j.value("weight", 1.0);
    e.modality = detail::parse_modality(j.value("modality", std::string("text")));
    e.categories = detail::enum_list(j, "categories", e.categories, &parse_category);
    e.orders = detail::enum_list(j, "orders", e.orders, &parse_order);
    e.questions = detail::enum_list(j, "questions", e.questions, &parse_question);
    e.separators = detail::enum_list(j, "separators", e.separators, &parse_separator_condition);
    e.counts = j.value("counts", e.counts);
    e.item_pool = j.value("item_pool", e.item_pool);
    e.grid_sizes = j.value("grid_sizes", e.grid_sizes);
    if (j.contains("category_item_pool")) {
        for (const auto& [k, v] : j.at("category_item_pool").items()) {
            e.category_item_pool[parse_category(k)] = v.get<std::vector<int>>();
        }
    }
    e.validate();
}

/// Draws one sample from an entry. Visual entries ignore separators.
inline CountingSample draw_sample(const CurriculumEntry& e, std::uint64_t seed) {
    Rng rng(seed);
    const Category cat = rng.pick(std::span<const Category>(e.categories));
    const Order order = rng.pick(std::span<const Order>(e.orders));
    const QuestionKind q = rng.pick(std::span<const QuestionKind>(e.questions));
    const int count = rng.pick(std::span<const int>(e.counts));
    const std::uint64_t sample_seed = derive_seed(seed, 7);
    if (e.modality == Modality::visual) {
        VisualTaskConfig vc;
        vc.count = count;
        vc.category = cat;
        vc.grid_size = rng.pick(std::span<const int>(e.grid_sizes));
        vc.order = order;
        vc.question = q;
        vc.seed = sample_seed;
        return generate_visual(vc);
    }
    TextTaskConfig tc;
    tc.count = count;
    tc.category = cat;
    tc.order = order;
    tc.question = q;
    tc.separators = rng.pick(std::span<const SeparatorCondition>(e.separators));
    tc.seed = sample_seed;
    tc.item_pool = e.pool_for(cat);
    if (tc.category == Category::polytypic_unique && count > static_cast<int>(tc.item_pool.size())) {
        tc.item_pool = CurriculumEntry{}.item_pool;
    }
    // A single item has no gap to vary.
    if (count == 1) {
        tc.separators = SeparatorCondition::normal;
    }
    return generate_text(tc);
}

// ----------------------------------------------------------------- evaluation

/// Held-out evaluation grid: every combination of the listed choices, n samples each.
struct EvalConfig {
    std::vector<CurriculumEntry> families;
    int samples_per_cell = 10;
    std::uint64_t seed = 991;
    int workers = 1;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
    j = {{"families", c.families}, {"samples_per_cell", c.samples_per_cell}, {"seed", c.seed}, {"workers", c.workers}};
}
inline void from_json(const nlohmann::json& j, EvalConfig& c) {
    c = EvalConfig{};
    c.families = j.value("families", c.families);
    c.samples_per_cell = j.value("samples_per_cell", c.samples_per_cell);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (c.samples_per_cell <= 0) {
        throw ConfigError("samples_per_cell must be positive");
    }
}

struct AccuracyCell {
    Modality modality = Modality::text;
    Category category = Category::monotypic;
    Order order = Order::question_last;
    QuestionKind question = QuestionKind::general;
    SeparatorCondition separators = SeparatorCondition::normal;
    int grid_size = 0;
    int count = 1;
    int correct = 0;
    int total = 0;
    double accuracy() const noexcept { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

inline void to_json(nlohmann::json& j, const AccuracyCell& c) {
    j = {{"modality", c.modality}, {"category", c.category},     {"order", c.order},
         {"question", c.question}, {"separators", c.separators}, {"grid_size", c.grid_size},
         {"count", c.count},       {"correct", c.correct},       {"total", c.total},
         {"accuracy", c.accuracy()}};
}

struct AccuracyTable {
    std::vector<AccuracyCell> cells;

    /// Pooled accuracy over the cells accepted by `keep`.
    template <class Pred>
    double accuracy_where(Pred keep) const {
        long correct = 0, total = 0;
        for (const auto& c : cells) {
            if (keep(c)) {
                correct += c.correct;
                total += c.total;
            }
        }
        return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
    }
    double overall() const {
        return accuracy_where([](const AccuracyCell&) { return true; });
    }
    double for_count(int n) const {
        return accuracy_where([n](const AccuracyCell& c) { return c.count == n; });
    }
    int total() const {
        int t = 0;
        for (const auto& c : cells) {
            t += c.total;
        }
        return t;
    }

    void write_csv(std::ostream& out) const {
        out << "modality,category,order,question,separators,grid_size,count,correct,total,accuracy\n";
        for (const auto& c : cells) {
            out << nlohmann::json(c.modality).get<std::string>() << ',' << nlohmann::json(c.category).get<std::string>()
                << ',' << nlohmann::json(c.order).get<std::string>() << ','
                << nlohmann::json(c.question).get<std::string>() << ','
                << nlohmann::json(c.separators).get<std::string>() << ',' << c.grid_size << ',' << c.count << ','
                << c.correct << ',' << c.total << ',' << c.accuracy() << '\n';
        }
    }
};

inline void to_json(nlohmann::json& j, const AccuracyTable& t) {
    j = {{"overall", t.overall()}, {"cells", t.cells}};
}

/// Concrete samples of one evaluation cell.
inline std::vector<CountingSample> eval_cell_samples(const AccuracyCell& cell, const CurriculumEntry& family,
                                                     int n, std::uint64_t seed) {
    std::vector<CountingSample> out;
    for (int i = 0; i < n; ++i) {
        const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
        if (cell.modality == Modality::visual) {
            VisualTaskConfig vc{.count = cell.count, .category = cell.category, .grid_size = cell.grid_size,
                                .order = cell.order, .question = cell.question, .seed = s, .with_answer = false};
            out.push_back(generate_visual(vc));
        } else {
            TextTaskConfig tc;
            tc.count = cell.count;
            tc.category = cell.category;
            tc.order = cell.order;
            tc.question = cell.question;
            tc.separators = cell.separators;
            tc.seed = s;
            tc.item_pool = family.pool_for(cell.category);
            tc.with_answer = false;
            out.push_back(generate_text(tc));
        }
    }
    return out;
}

/// Expands the families into cells (skipping impossible combinations).
inline std::vector<std::pair<AccuracyCell, std::size_t>> expand_cells(const EvalConfig& config) {
    std::vector<std::pair<AccuracyCell, std::size_t>> cells;
    for (std::size_t f = 0; f < config.families.size(); ++f) {
        const auto& fam = config.families[f];
        const std::vector<int> grids = fam.modality == Modality::visual ? fam.grid_sizes : std::vector<int>{0};
        const std::vector<SeparatorCondition> seps =
            fam.modality == Modality::visual ? std::vector<SeparatorCondition>{SeparatorCondition::normal} : fam.separators;
        for (const auto cat : fam.categories)
            for (const auto order : fam.orders)
                for (const auto q : fam.questions)
                    for (const auto sep : seps)
                        for (const int g : grids)
                            for (const int n : fam.counts) {
                                if (sep != SeparatorCondition::normal && n == 1) {
                                    continue;
                                }
                                if (fam.modality == Modality::text && cat == Category::polytypic_unique &&
                                    n > static_cast<int>(fam.pool_for(cat).size())) {
                                    continue;
                                }
                                AccuracyCell c;
                                c.modality = fam.modality;
                                c.category = cat;
                                c.order = order;
                                c.question = q;
                                c.separators = sep;
                                c.grid_size = g;
                                c.count = n;
                                cells.emplace_back(c, f);
                            }
    }
    return cells;
}

/// Argmax over digit tokens at the readout position.
template <class T>
int predict_count(const Transformer<T>& model, const CountingSample& sample) {
    ForwardOptions<T> fo;
    fo.record_cache = false;
    fo.logit_positions = {sample.readout_position};
    const auto fwd = model.forward(sample, fo);
    return digit_distribution(fwd.logits.row_span(0)).argmax();
}

template <class T>
AccuracyTable evaluate_behavioral(const Transformer<T>& model, const EvalConfig& config) {
    const auto cells = expand_cells(config);
    AccuracyTable table;
    table.cells.resize(cells.size());
    parallel_for(cells.size(), config.workers, [&](std::size_t i) {
        AccuracyCell cell = cells[i].first;
        const auto& fam = config.families[cells[i].second];
        const auto samples = eval_cell_samples(cell, fam, config.samples_per_cell, derive_seed(config.seed, i));
        for (const auto& s : samples) {
            cell.correct += predict_count(model, s) == s.ground_truth ? 1 : 0;
            ++cell.total;
        }
        table.cells[i] = cell;
    });
    return table;
}

inline AccuracyTable evaluate_behavioral(const std::string& checkpoint, const EvalConfig& config) {
    return evaluate_behavioral(load_checkpoint<float>(checkpoint), config);
}

// ----------------------------------------------------------------- training

struct LearningRateSchedule {
    double peak = 1e-3;
    int warmup = 100;
    /// Final learning rate as a fraction of the peak (cosine decay).
    double final_fraction = 0.1;

    double at(int step, int total) const noexcept {
        if (step < warmup) {
            return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
        }
        const int span = std::max(total - warmup, 1);
        const double t = std::min(1.0, static_cast<double>(step - warmup) / span);
        return peak * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
    }
};

struct TrainConfig {
    ModelConfig model;
    std::vector<CurriculumEntry> curriculum{CurriculumEntry{}};
    int batch_size = 32;
    int steps = 1000;
    LearningRateSchedule learning_rate;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    int eval_every = 0; ///< 0 evaluates only at the end
    EvalConfig eval;
    std::uint64_t seed = 1;
    int workers = 1;
    LossOptions loss;
    int checkpoint_every = 0;

    void validate() const {
        model.validate();
        if (curriculum.empty()) {
            throw ConfigError("curriculum is empty");
        }
        std::vector<bool> seen(kMaxCount + 1, false);
        for (const auto& e : curriculum) {
            e.validate();
            for (const int c : e.counts) {
                seen[static_cast<std::size_t>(c)] = true;
            }
            if (e.modality == Modality::visual && !model.vision) {
                throw ConfigError("visual curriculum needs a model with a patch encoder");
            }
        }
        for (int c = 1; c <= kMaxCount; ++c) {
            if (!seen[static_cast<std::size_t>(c)]) {
                throw ConfigError("count " + std::to_string(c) + " is missing from the curriculum");
            }
        }
        if (!(learning_rate.peak > 0.0) && steps > 0) {
            // Zero is allowed for diagnostics; negative is not.
            if (learning_rate.peak < 0.0 || std::isnan(learning_rate.peak)) {
                throw ConfigError("learning rate must be positive");
            }
        }
        if (batch_size <= 0 || steps < 0 || learning_rate.warmup < 0) {
            throw ConfigError("batch_size must be positive and steps non-negative");
        }
        if (!(grad_clip >= 0.0)) {
            throw ConfigError("grad_clip must be non-negative");
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"model", c.model},
         {"curriculum", c.curriculum},
         {"batch_size", c.batch_size},
         {"steps", c.steps},
         {"learning_rate",
          {{"peak", c.learning_rate.peak},
           {"warmup", c.learning_rate.warmup},
           {"final_fraction", c.learning_rate.final_fraction}}},
         {"adam", {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.adam_eps}, {"weight_decay", c.weight_decay}}},
         {"grad_clip", c.grad_clip},
         {"eval_every", c.eval_every},
         {"eval", c.eval},
         {"seed", c.seed},
         {"workers", c.workers},
         {"full_lm_loss", c.loss.full_lm},
         {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.model = j.value("model", c.model);
    c.curriculum = j.value("curriculum", c.curriculum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    if (j.contains("learning_rate")) {
        const auto& lr = j.at("learning_rate");
        if (lr.is_number()) {
            c.learning_rate.peak = lr.get<double>();
        } else {
            c.learning_rate.peak = lr.value("peak", c.learning_rate.peak);
            c.learning_rate.warmup = lr.value("warmup", c.learning_rate.warmup);
            c.learning_rate.final_fraction = lr.value("final_fraction", c.learning_rate.final_fraction);
        }
    }
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        c.beta1 = a.value("beta1", c.beta1);
        c.beta2 = a.value("beta2", c.beta2);
        c.adam_eps = a.value("eps", c.adam_eps);
        c.weight_decay = a.value("weight_decay", c.weight_decay);
    }
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval = j.value("eval", c.eval);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.loss.full_lm = j.value("full_lm_loss", false);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
}

/// FNV-1a of the canonical JSON; names cached checkpoints.
inline std::string config_hash(const nlohmann::json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : j.dump()) {
        h = (h ^ ch) * 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Training batch for one step; depends only on (config seed, step).
inline std::vector<CountingSample> training_batch(const TrainConfig& config, int step) {
    double total_weight = 0.0;
    for (const auto& e : config.curriculum) {
        total_weight += e.weight;
    }
    std::vector<CountingSample> batch(static_cast<std::size_t>(config.batch_size));
    const std::uint64_t step_seed = derive_seed(derive_seed(config.seed, 0x7261696eULL), static_cast<std::uint64_t>(step));
    for (int i = 0; i < config.batch_size; ++i) {
        const std::uint64_t s = derive_seed(step_seed, static_cast<std::uint64_t>(i));
        Rng rng(s);
        double r = rng.uniform() * total_weight;
        std::size_t pick = 0;
        while (pick + 1 < config.curriculum.size() && r >= config.curriculum[pick].weight) {
            r -= config.curriculum[pick].weight;
            ++pick;
        }
        batch[static_cast<std::size_t>(i)] = draw_sample(config.curriculum[pick], derive_seed(s, 1));
    }
    return batch;
}

struct AdamState {
    std::vector<float> m, v;
    int t = 0;
};

struct EvalRecord {
    int step = 0;
    AccuracyTable table;
};

struct TrainReport {
    std::vector<double> losses;
    std::vector<double> learning_rates;
    std::vector<double> grad_norms;
    std::vector<EvalRecord> evals;
    AccuracyTable final_table;
    std::string checkpoint_path;
    bool diverged = false;
    std::string divergence_message;
    double seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
    j = {{"losses", r.losses},
         {"final_accuracy", r.final_table},
         {"checkpoint", r.checkpoint_path},
         {"diverged", r.diverged},
         {"divergence_message", r.divergence_message},
         {"seconds", r.seconds}};
    auto& ev = j["evals"] = nlohmann::json::array();
    for (const auto& e : r.evals) {
        ev.push_back({{"step", e.step}, {"overall", e.table.overall()}});
    }
}

struct TrainHooks {
    std::function<void(int step, double loss, double lr)> on_step;
    std::function<void(int step, const AccuracyTable&)> on_eval;
    /// Directory for the CSV log and checkpoints; empty writes nothing.
    std::string output_dir;
};

/// One Adam step with global-norm clipping. Returns the pre-clip gradient norm.
inline double adam_step(std::vector<float>& params, std::vector<float>& grad, AdamState& state, double lr,
                        const TrainConfig& c) {
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0f);
        state.v.assign(params.size(), 0.0f);
    }
    double sq = 0.0;
    for (const float g : grad) {
        sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient norm");
    }
    const float clip = (c.grad_clip > 0.0 && norm > c.grad_clip) ? static_cast<float>(c.grad_clip / norm) : 1.0f;
    ++state.t;
    const double bc1 = 1.0 - std::pow(c.beta1, state.t);
    const double bc2 = 1.0 - std::pow(c.beta2, state.t);
    const float b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
    const float step = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(c.adam_eps);
    const float wd = static_cast<float>(lr * c.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float g = grad[i] * clip;
        state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
        params[i] -= step * state.m[i] / (std::sqrt(state.v[i] * inv_bc2) + eps) + wd * params[i];
    }
    return norm;
}

/// Trains from the config's seed (or continues `initial`). Deterministic in
/// the seed regardless of worker count.
inline TrainReport train(const TrainConfig& config, const TrainHooks& hooks = {},
                         Transformer<float>* model_out = nullptr) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Transformer<float> model(config.model);
    TrainReport report;
    AdamState adam;
    std::ofstream log;
    std::filesystem::path dir;
    if (!hooks.output_dir.empty()) {
        dir = hooks.output_dir;
        std::filesystem::create_directories(dir);
        log.open(dir / "train_log.csv");
        log << "step,loss,lr,grad_norm,eval_accuracy\n";
    }
    const nlohmann::json meta = {{"train_config", config}};
    auto save = [&](int step) {
        if (!dir.empty()) {
            report.checkpoint_path = (dir / "model.ckpt").string();
            save_checkpoint(report.checkpoint_path, model, step, meta);
        }
    };
    GradientOptions gopt;
    gopt.loss = config.loss;
    gopt.workers = config.workers;

    for (int step = 0; step < config.steps; ++step) {
        const auto batch = training_batch(config, step);
        const double lr = config.learning_rate.at(step, config.steps);
        double norm = 0.0;
        double mean_loss = 0.0;
        try {
            auto g = gradients(model, std::span<const CountingSample>(batch), gopt);
            mean_loss = g.mean_loss;
            norm = adam_step(model.parameters(), g.grad, adam, lr, config);
        } catch (const NumericError& e) {
            report.diverged = true;
            report.divergence_message = "step " + std::to_string(step) + ": " + e.what();
            break;
        }
        report.losses.push_back(mean_loss);
        report.learning_rates.push_back(lr);
        report.grad_norms.push_back(norm);
        if (hooks.on_step) {
            hooks.on_step(step, mean_loss, lr);
        }
        std::string eval_field;
        const bool last = step + 1 == config.steps;
        if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 && !last && !config.eval.families.empty()) {
            EvalRecord rec{step + 1, evaluate_behavioral(model, config.eval)};
            eval_field = std::to_string(rec.table.overall());
            if (hooks.on_eval) {
                hooks.on_eval(step + 1, rec.table);
            }
            report.evals.push_back(std::move(rec));
        }
        if (log.is_open()) {
            log << step << ',' << mean_loss << ',' << lr << ',' << norm << ',' << eval_field << '\n';
        }
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            save(step + 1);
        }
    }
    if (!report.diverged && !config.eval.families.empty()) {
        report.final_table = evaluate_behavioral(model, config.eval);
        report.evals.push_back({static_cast<int>(report.losses.size()), report.final_table});
        if (hooks.on_eval) {
            hooks.on_eval(static_cast<int>(report.losses.size()), report.final_table);
        }
        if (log.is_open()) {
            log << "final,,,," << report.final_table.overall() << '\n';
        }
    }
    if (!report.diverged || report.checkpoint_path.empty()) {
        save(static_cast<int>(report.losses.size()));
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (model_out != nullptr) {
        *model_out = std::move(model);
    }
    return report;
}

} // namespace countlab
