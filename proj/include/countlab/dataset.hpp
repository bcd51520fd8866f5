#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/error.hpp"
#include "countlab/rng.hpp"
#include "countlab/vocab.hpp"

namespace countlab {

enum class Category { monotypic, polytypic_replicate, polytypic_unique };
enum class Order { question_first, question_last };
enum class QuestionKind { specific, general };
enum class SeparatorCondition { normal, various, less, more, none };
enum class Role { special, item, distractor, separator, question, answer, placeholder, image_patch };
enum class Modality { text, visual };

NLOHMANN_JSON_SERIALIZE_ENUM(Category, {{Category::monotypic, "monotypic"},
                                        {Category::polytypic_replicate, "polytypic-replicate"},
                                        {Category::polytypic_unique, "polytypic-unique"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Order, {{Order::question_first, "question-first"},
                                     {Order::question_last, "question-last"}})
NLOHMANN_JSON_SERIALIZE_ENUM(QuestionKind, {{QuestionKind::specific, "specific"},
                                            {QuestionKind::general, "general"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SeparatorCondition, {{SeparatorCondition::normal, "normal"},
                                                  {SeparatorCondition::various, "various"},
                                                  {SeparatorCondition::less, "less"},
                                                  {SeparatorCondition::more, "more"},
                                                  {SeparatorCondition::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Role, {{Role::special, "special"},
                                    {Role::item, "item"},
                                    {Role::distractor, "distractor"},
                                    {Role::separator, "separator"},
                                    {Role::question, "question"},
                                    {Role::answer, "answer"},
                                    {Role::placeholder, "placeholder"},
                                    {Role::image_patch, "image-patch"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Modality, {{Modality::text, "text"}, {Modality::visual, "visual"}})

/// Parses an enum from its JSON spelling, rejecting unknown names (the
/// nlohmann macro silently maps them to the first enumerator).
template <class E>
E parse_enum(const std::string& name, std::initializer_list<E> all) {
    for (const E e : all) {
        if (nlohmann::json(e).get<std::string>() == name) {
            return e;
        }
    }
    throw ConfigError("unknown value '" + name + "'");
}

inline Category parse_category(const std::string& s) {
    return parse_enum(s, {Category::monotypic, Category::polytypic_replicate, Category::polytypic_unique});
}
inline Order parse_order(const std::string& s) {
    return parse_enum(s, {Order::question_first, Order::question_last});
}
inline QuestionKind parse_question(const std::string& s) {
    return parse_enum(s, {QuestionKind::specific, QuestionKind::general});
}
inline SeparatorCondition parse_separator_condition(const std::string& s) {
    return parse_enum(s, {SeparatorCondition::normal, SeparatorCondition::various, SeparatorCondition::less,
                          SeparatorCondition::more, SeparatorCondition::none});
}

/// Half-open position range [begin, end).
struct Span {
    int begin = 0;
    int end = 0;
    int size() const noexcept { return end - begin; }
    bool contains(int p) const noexcept { return p >= begin && p < end; }
    friend bool operator==(const Span&, const Span&) = default;
};

inline void to_json(nlohmann::json& j, const Span& s) { j = nlohmann::json::array({s.begin, s.end}); }
inline void from_json(const nlohmann::json& j, Span& s) {
    s.begin = j.at(0).get<int>();
    s.end = j.at(1).get<int>();
}

struct TextTaskConfig {
    int count = 1;
    Category category = Category::monotypic;
    Order order = Order::question_last;
    QuestionKind question = QuestionKind::general;
    SeparatorCondition separators = SeparatorCondition::normal;
    std::uint64_t seed = 0;
    /// Item types (indices into kFruits) the generator may draw from.
    std::vector<int> item_pool{0, 1, 2, 3, 4, 5, 6, 7, 8};
    /// Append the ground-truth digit after the answer cue.
    bool with_answer = true;

    void validate() const {
        if (count < 1 || count > kMaxCount) {
            throw ConfigError("count must be in 1..9, got " + std::to_string(count));
        }
        if (item_pool.empty()) {
            throw ConfigError("item pool is empty");
        }
        for (const int t : item_pool) {
            if (t < 0 || t >= kNumItemTypes) {
                throw ConfigError("item type " + std::to_string(t) + " out of range");
            }
        }
        auto pool = item_pool;
        std::sort(pool.begin(), pool.end());
        if (std::adjacent_find(pool.begin(), pool.end()) != pool.end()) {
            throw ConfigError("item pool has duplicates");
        }
        if (category == Category::polytypic_unique && count > static_cast<int>(pool.size())) {
            throw ConfigError("polytypic-unique needs count <= number of item types (" +
                              std::to_string(pool.size()) + "), got " + std::to_string(count));
        }
        if (category == Category::polytypic_replicate && count > 1 && pool.size() < 2) {
            throw ConfigError("polytypic-replicate needs at least two item types");
        }
    }
};

inline void to_json(nlohmann::json& j, const TextTaskConfig& c) {
    j = {{"modality", "text"},       {"count", c.count},          {"category", c.category},
         {"order", c.order},         {"question", c.question},    {"separators", c.separators},
         {"seed", c.seed},           {"item_pool", c.item_pool},  {"with_answer", c.with_answer}};
}
inline void from_json(const nlohmann::json& j, TextTaskConfig& c) {
    c = TextTaskConfig{};
    c.count = j.value("count", 1);
    c.category = parse_category(j.value("category", std::string("monotypic")));
    c.order = parse_order(j.value("order", std::string("question-last")));
    c.question = parse_question(j.value("question", std::string("general")));
    c.separators = parse_separator_condition(j.value("separators", std::string("normal")));
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("item_pool")) {
        c.item_pool = j.at("item_pool").get<std::vector<int>>();
    }
    c.with_answer = j.value("with_answer", true);
}

/// Patch region of a visual prompt: rows * cols patch tokens in row-major order.
struct GridInfo {
    int rows = 0;
    int cols = 0;
    int first_position = 0;
    int cells() const noexcept { return rows * cols; }
};

/// A tokenized prompt with role labels and the bookkeeping every analysis needs.
struct CountingSample {
    Modality modality = Modality::text;
    std::vector<TokenId> tokens;
    std::vector<Role> roles;
    int ground_truth = 0;
    std::vector<int> item_positions;      ///< count-bearing items (or object cells)
    std::vector<int> list_positions;      ///< every list element / object cell, in order
    std::vector<int> list_types;          ///< item type (text) or cell content id (visual) per list element
    std::vector<int> separator_positions;
    std::vector<int> placeholder_positions;
    Span context_span;
    Span question_span;
    std::vector<Span> segments;           ///< rendered prompt segments in display order
    int readout_position = -1;            ///< its next-token prediction is the answer
    std::optional<int> answer_position;   ///< the ground-truth digit, when present
    std::optional<GridInfo> grid;
    nlohmann::json config;
    std::uint64_t seed = 0;

    int length() const noexcept { return static_cast<int>(tokens.size()); }

    /// 1-based list index of the list element at `position`, or 0.
    int list_index_of(int position) const {
        const auto it = std::find(list_positions.begin(), list_positions.end(), position);
        return it == list_positions.end() ? 0 : static_cast<int>(it - list_positions.begin()) + 1;
    }

    /// Prompt text exactly as displayed (no begin marker, answer cue or answer).
    std::string render() const;
};

namespace detail {

inline std::string render_tokens(const std::vector<TokenId>& ids, std::size_t begin, std::size_t end) {
    const auto& vocab = Vocabulary::standard();
    std::string out;
    for (std::size_t i = begin; i < end; ++i) {
        const auto& tok = vocab.token(ids[i]);
        if (!out.empty() && !Vocabulary::attaches_left(tok)) {
            out += ' ';
        }
        out += tok;
    }
    return out;
}

inline void tokenize_chunk(std::string_view chunk, std::vector<TokenId>& out) {
    const auto& vocab = Vocabulary::standard();
    if (chunk.empty()) {
        return;
    }
    if (vocab.contains(chunk)) {
        out.push_back(vocab.id(chunk));
        return;
    }
    const std::string_view last = chunk.substr(chunk.size() - 1);
    if (Vocabulary::attaches_left(last)) {
        tokenize_chunk(chunk.substr(0, chunk.size() - 1), out);
        out.push_back(vocab.id(last));
        return;
    }
    throw InputError("cannot tokenize '" + std::string(chunk) + "'");
}

} // namespace detail

/// Word-level tokenizer over the closed vocabulary; inverse of render().
inline std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\n' || text[i] == '\t')) {
            ++i;
        }
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\n' && text[j] != '\t') {
            ++j;
        }
        detail::tokenize_chunk(text.substr(i, j - i), out);
        i = j;
    }
    return out;
}

inline std::string CountingSample::render() const {
    std::string out;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        if (s > 0) {
            out += '\n';
        }
        const Span seg = segments[s];
        if (grid && seg == context_span) {
            for (int r = 0; r < grid->rows; ++r) {
                if (r > 0) {
                    out += '\n';
                }
                const auto b = static_cast<std::size_t>(seg.begin + r * grid->cols);
                out += detail::render_tokens(tokens, b, b + static_cast<std::size_t>(grid->cols));
            }
        } else {
            out += detail::render_tokens(tokens, static_cast<std::size_t>(seg.begin),
                                         static_cast<std::size_t>(seg.end));
        }
    }
    return out;
}

/// Token ids of the rendered segments, concatenated in display order.
inline std::vector<TokenId> prompt_token_ids(const CountingSample& s) {
    std::vector<TokenId> out;
    for (const Span seg : s.segments) {
        out.insert(out.end(), s.tokens.begin() + seg.begin, s.tokens.begin() + seg.end);
    }
    return out;
}

namespace detail {

/// Incremental sample assembly.
class SampleBuilder {
public:
    explicit SampleBuilder(Modality m) { sample_.modality = m; }

    int push(TokenId id, Role role) {
        sample_.tokens.push_back(id);
        sample_.roles.push_back(role);
        return sample_.length() - 1;
    }
    int push(std::string_view word, Role role) { return push(Vocabulary::standard().id(word), role); }
    void push_words(std::string_view text, Role role) {
        for (const TokenId id : tokenize(text)) {
            push(id, role);
        }
    }
    int position() const noexcept { return sample_.length(); }
    CountingSample& sample() noexcept { return sample_; }

    /// Appends "Answer :" and, if requested, the digit; sets readout/answer positions.
    CountingSample finish(bool with_answer) {
        push("Answer", Role::special);
        sample_.readout_position = push(":", Role::special);
        if (with_answer && sample_.ground_truth >= 1 && sample_.ground_truth <= kMaxCount) {
            sample_.answer_position = push(Vocabulary::standard().digit(sample_.ground_truth), Role::answer);
        }
        return std::move(sample_);
    }

private:
    CountingSample sample_;
};

inline std::string text_question(Order order, std::optional<int> specific_type) {
    std::string q = "Question: How many ";
    q += specific_type ? std::string(kFruitPlurals.at(static_cast<std::size_t>(*specific_type))) : "items";
    q += order == Order::question_first ? " are there in the following sentence?"
                                        : " are there in the above sentence?";
    return q;
}

} // namespace detail

/// Separator tokens between consecutive list elements; gaps[i] sits between
/// elements i and i+1.
using SeparatorGaps = std::vector<std::vector<TokenId>>;

inline SeparatorGaps normal_gaps(int n) {
    return SeparatorGaps(static_cast<std::size_t>(std::max(n - 1, 0)),
                         std::vector<TokenId>{Vocabulary::standard().separator_id()});
}

/// Lays out a text counting prompt around an explicit item list. `element_ids`
/// are the list tokens (fruit or placeholder ids); `counted[i]` marks the
/// count-bearing elements.
inline CountingSample build_text_sample(const std::vector<TokenId>& element_ids, const SeparatorGaps& gaps,
                                        const std::vector<bool>& counted, Order order,
                                        std::optional<int> specific_type, int ground_truth,
                                        bool with_answer) {
    const auto& vocab = Vocabulary::standard();
    detail::SampleBuilder b(Modality::text);
    b.push(vocab.bos_id(), Role::special);
    b.sample().ground_truth = ground_truth;

    auto emit_question = [&] {
        const int begin = b.position();
        b.push_words(detail::text_question(order, specific_type), Role::question);
        b.sample().question_span = {begin, b.position()};
    };
    auto emit_list = [&] {
        const int begin = b.position();
        for (std::size_t i = 0; i < element_ids.size(); ++i) {
            const TokenId id = element_ids[i];
            const bool is_placeholder = id == vocab.placeholder_id();
            const Role role = is_placeholder ? Role::placeholder : (counted[i] ? Role::item : Role::distractor);
            const int p = b.push(id, role);
            auto& s = b.sample();
            s.list_positions.push_back(p);
            s.list_types.push_back(vocab.item_type(id));
            if (is_placeholder) {
                s.placeholder_positions.push_back(p);
            } else if (counted[i]) {
                s.item_positions.push_back(p);
            }
            if (i < gaps.size()) {
                for (const TokenId sep : gaps[i]) {
                    s.separator_positions.push_back(b.push(sep, Role::separator));
                }
            }
        }
        b.sample().context_span = {begin, b.position()};
    };

    if (order == Order::question_first) {
        emit_question();
        emit_list();
        b.sample().segments = {b.sample().question_span, b.sample().context_span};
    } else {
        emit_list();
        emit_question();
        b.sample().segments = {b.sample().context_span, b.sample().question_span};
    }
    return b.finish(with_answer);
}

namespace detail {

struct DrawnList {
    std::vector<int> types;
    std::optional<int> queried;
};

inline DrawnList draw_items(const TextTaskConfig& config) {
    Rng rng(derive_seed(config.seed, 1));
    const std::span<const int> pool(config.item_pool);
    DrawnList out;
    switch (config.category) {
    case Category::monotypic:
        out.types.assign(static_cast<std::size_t>(config.count), rng.pick(pool));
        break;
    case Category::polytypic_unique: {
        auto shuffled = config.item_pool;
        rng.shuffle(std::span<int>(shuffled));
        out.types.assign(shuffled.begin(), shuffled.begin() + config.count);
        break;
    }
    case Category::polytypic_replicate:
        do {
            out.types.clear();
            for (int i = 0; i < config.count; ++i) {
                out.types.push_back(rng.pick(pool));
            }
        } while (config.count > 1 &&
                 std::all_of(out.types.begin(), out.types.end(), [&](int t) { return t == out.types[0]; }));
        break;
    }
    if (config.question == QuestionKind::specific) {
        out.queried = out.types[static_cast<std::size_t>(rng.below(out.types.size()))];
    }
    return out;
}

inline SeparatorGaps mutate_gaps(int count, SeparatorCondition condition, std::uint64_t seed) {
    const auto& vocab = Vocabulary::standard();
    auto gaps = normal_gaps(count);
    if (condition == SeparatorCondition::normal || gaps.empty()) {
        return gaps;
    }
    if (condition == SeparatorCondition::none) {
        for (auto& g : gaps) {
            g.clear();
        }
        return gaps;
    }
    Rng rng(derive_seed(seed, 2));
    std::vector<bool> mutate(gaps.size());
    bool any = false;
    for (std::size_t i = 0; i < gaps.size(); ++i) {
        mutate[i] = rng.bernoulli(0.5);
        any = any || mutate[i];
    }
    if (!any) {
        mutate[static_cast<std::size_t>(rng.below(gaps.size()))] = true;
    }
    for (std::size_t i = 0; i < gaps.size(); ++i) {
        if (!mutate[i]) {
            continue;
        }
        switch (condition) {
        case SeparatorCondition::various:
            gaps[i] = {vocab.id(kAltSeparators[static_cast<std::size_t>(rng.below(kAltSeparators.size()))])};
            break;
        case SeparatorCondition::less:
            gaps[i].clear();
            break;
        case SeparatorCondition::more:
            gaps[i].push_back(vocab.separator_id());
            break;
        default:
            break;
        }
    }
    return gaps;
}

inline CountingSample generate_text_impl(const TextTaskConfig& config) {
    config.validate();
    const auto& vocab = Vocabulary::standard();
    const DrawnList drawn = draw_items(config);
    std::vector<TokenId> ids;
    std::vector<bool> counted;
    int truth = 0;
    for (const int t : drawn.types) {
        ids.push_back(vocab.item_id(t));
        const bool c = !drawn.queried || *drawn.queried == t;
        counted.push_back(c);
        truth += c ? 1 : 0;
    }
    auto sample = build_text_sample(ids, mutate_gaps(config.count, config.separators, config.seed), counted,
                                    config.order, drawn.queried, truth, config.with_answer);
    sample.config = config;
    sample.seed = config.seed;
    return sample;
}

} // namespace detail

/// Counting prompt for a normal-separator configuration (other conditions are
/// forwarded to generate_text_separator_variant).
inline CountingSample generate_text(const TextTaskConfig& config) { return detail::generate_text_impl(config); }

/// Same items and ground truth as the normal variant with the same seed; only
/// the separators differ.
inline CountingSample generate_text_separator_variant(const TextTaskConfig& config) {
    if (config.separators == SeparatorCondition::normal) {
        throw ConfigError("separator variant requested with the normal condition");
    }
    return detail::generate_text_impl(config);
}

/// Text sample with an explicit list of item types (grouped or interrupted
/// lists). A specific question counts `queried` only.
inline CountingSample generate_text_from_items(const std::vector<int>& types, Order order,
                                               std::optional<int> queried = std::nullopt,
                                               bool with_answer = true) {
    const auto& vocab = Vocabulary::standard();
    if (types.empty() || types.size() > static_cast<std::size_t>(kMaxCount)) {
        throw ConfigError("item list must hold 1..9 items");
    }
    std::vector<TokenId> ids;
    std::vector<bool> counted;
    int truth = 0;
    for (const int t : types) {
        ids.push_back(vocab.item_id(t));
        const bool c = !queried || *queried == t;
        counted.push_back(c);
        truth += c ? 1 : 0;
    }
    auto sample = build_text_sample(ids, normal_gaps(static_cast<int>(types.size())), counted, order, queried,
                                    truth, with_answer);
    sample.config = {{"modality", "text"}, {"items", types}, {"order", order}};
    return sample;
}

// ----------------------------------------------------------------- visual

inline constexpr std::array<int, 3> kGridSizes{3, 6, 10};

struct VisualTaskConfig {
    int count = 1;
    Category category = Category::monotypic;
    int grid_size = 3;
    Order order = Order::question_last;
    QuestionKind question = QuestionKind::general;
    std::uint64_t seed = 0;
    bool with_answer = true;

    void validate() const {
        if (std::find(kGridSizes.begin(), kGridSizes.end(), grid_size) == kGridSizes.end()) {
            throw ConfigError("grid size must be one of 3, 6, 10; got " + std::to_string(grid_size));
        }
        if (count < 1 || count > kMaxCount) {
            throw ConfigError("count must be in 1..9, got " + std::to_string(count));
        }
        if (count > grid_size * grid_size) {
            throw ConfigError("count " + std::to_string(count) + " exceeds " + std::to_string(grid_size) + "x" +
                              std::to_string(grid_size) + " cells");
        }
    }
};

inline void to_json(nlohmann::json& j, const VisualTaskConfig& c) {
    j = {{"modality", "visual"}, {"count", c.count},       {"category", c.category},
         {"grid_size", c.grid_size}, {"order", c.order}, {"question", c.question},
         {"seed", c.seed},       {"with_answer", c.with_answer}};
}
inline void from_json(const nlohmann::json& j, VisualTaskConfig& c) {
    c = VisualTaskConfig{};
    c.count = j.value("count", 1);
    c.category = parse_category(j.value("category", std::string("monotypic")));
    c.grid_size = j.value("grid_size", 3);
    c.order = parse_order(j.value("order", std::string("question-last")));
    c.question = parse_question(j.value("question", std::string("general")));
    c.seed = j.value("seed", std::uint64_t{0});
    c.with_answer = j.value("with_answer", true);
}

/// Cell content: 0 is background, otherwise 1 + shape * kNumColors + color.
struct VisualScene {
    int grid_size = 3;
    std::vector<int> cells;
    int count = 0;
    Category category = Category::monotypic;
    std::uint64_t seed = 0;

    int cell(int row, int col) const { return cells[static_cast<std::size_t>(row * grid_size + col)]; }
    std::vector<int> object_cells() const {
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(cells.size()); ++i) {
            if (cells[static_cast<std::size_t>(i)] != 0) {
                out.push_back(i);
            }
        }
        return out;
    }
    static int content(int shape, int color) noexcept { return 1 + shape * kNumColors + color; }
    static int shape_of(int content) noexcept { return (content - 1) / kNumColors; }
    static int color_of(int content) noexcept { return (content - 1) % kNumColors; }
};

/// Rejection-sampled placement of `count` objects in distinct cells.
inline VisualScene generate_scene(const VisualTaskConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, 11));
    VisualScene scene;
    scene.grid_size = config.grid_size;
    scene.count = config.count;
    scene.category = config.category;
    scene.seed = config.seed;
    const int n_cells = config.grid_size * config.grid_size;
    scene.cells.assign(static_cast<std::size_t>(n_cells), 0);

    const int n_pairs = kNumShapes * kNumColors;
    std::vector<int> contents;
    switch (config.category) {
    case Category::monotypic:
        contents.assign(static_cast<std::size_t>(config.count), 1 + static_cast<int>(rng.below(n_pairs)));
        break;
    case Category::polytypic_unique: {
        std::vector<int> all(static_cast<std::size_t>(n_pairs));
        for (int i = 0; i < n_pairs; ++i) {
            all[static_cast<std::size_t>(i)] = 1 + i;
        }
        rng.shuffle(std::span<int>(all));
        contents.assign(all.begin(), all.begin() + config.count);
        break;
    }
    case Category::polytypic_replicate:
        std::vector<int> palette;
        while (palette.size() < 3) {
            const int c = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_pairs)));
            if (std::find(palette.begin(), palette.end(), c) == palette.end()) {
                palette.push_back(c);
            }
        }
        do {
            contents.clear();
            for (int i = 0; i < config.count; ++i) {
                contents.push_back(rng.pick(std::span<const int>(palette)));
            }
        } while (config.count > 1 &&
                 std::all_of(contents.begin(), contents.end(), [&](int c) { return c == contents[0]; }));
        break;
    }
    for (const int c : contents) {
        int cell = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_cells)));
        while (scene.cells[static_cast<std::size_t>(cell)] != 0) {
            cell = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_cells)));
        }
        scene.cells[static_cast<std::size_t>(cell)] = c;
    }
    return scene;
}

/// Patch tokens in row-major order, then the image question. Question-first is
/// emulated with a task-description prefix ahead of the patch region.
inline CountingSample scene_to_tokens(const VisualScene& scene, Order order = Order::question_last,
                                      QuestionKind question = QuestionKind::general, bool with_answer = true) {
    const auto& vocab = Vocabulary::standard();
    detail::SampleBuilder b(Modality::visual);
    b.push(vocab.bos_id(), Role::special);

    std::optional<int> queried;
    if (question == QuestionKind::specific) {
        const auto objects = scene.object_cells();
        if (objects.empty()) {
            throw ConfigError("specific question on an empty scene");
        }
        queried = scene.cells[static_cast<std::size_t>(objects.front())];
    }

    std::vector<Span> segments;
    if (order == Order::question_first) {
        const int begin = b.position();
        b.push_words("Task: count the objects in the image.", Role::special);
        segments.push_back({begin, b.position()});
    }
    const int patch_begin = b.position();
    int truth = 0;
    for (int i = 0; i < static_cast<int>(scene.cells.size()); ++i) {
        const int c = scene.cells[static_cast<std::size_t>(i)];
        const TokenId id = c == 0 ? vocab.background_id()
                                  : vocab.object_id(VisualScene::shape_of(c), VisualScene::color_of(c));
        const bool counted = c != 0 && (!queried || *queried == c);
        const Role role = c == 0 ? Role::image_patch : (counted ? Role::item : Role::distractor);
        const int p = b.push(id, role);
        if (c != 0) {
            b.sample().list_positions.push_back(p);
            b.sample().list_types.push_back(c);
        }
        if (counted) {
            b.sample().item_positions.push_back(p);
            ++truth;
        }
    }
    auto& s = b.sample();
    s.context_span = {patch_begin, b.position()};
    s.grid = GridInfo{scene.grid_size, scene.grid_size, patch_begin};
    segments.push_back(s.context_span);

    const int q_begin = b.position();
    if (queried) {
        b.push_words("How many " + std::string(kColors[static_cast<std::size_t>(VisualScene::color_of(*queried))]) +
                         " " + std::string(kShapePlurals[static_cast<std::size_t>(VisualScene::shape_of(*queried))]) +
                         " are there in the image?",
                     Role::question);
    } else {
        b.push_words("How many objects are there in the image?", Role::question);
    }
    b.sample().question_span = {q_begin, b.position()};
    segments.push_back(b.sample().question_span);
    b.sample().segments = segments;
    b.sample().ground_truth = truth;
    auto out = b.finish(with_answer);
    out.config = {{"modality", "visual"},     {"grid_size", scene.grid_size}, {"count", scene.count},
                  {"category", scene.category}, {"order", order},             {"question", question},
                  {"seed", scene.seed}};
    out.seed = scene.seed;
    return out;
}

inline CountingSample generate_visual(const VisualTaskConfig& config) {
    return scene_to_tokens(generate_scene(config), config.order, config.question, config.with_answer);
}

// ----------------------------------------------------------------- JSON

inline void to_json(nlohmann::json& j, const CountingSample& s) {
    const auto& vocab = Vocabulary::standard();
    std::vector<std::string> words;
    for (const TokenId id : s.tokens) {
        words.push_back(vocab.token(id));
    }
    j = {{"modality", s.modality},
         {"tokens", words},
         {"ids", s.tokens},
         {"roles", s.roles},
         {"ground_truth", s.ground_truth},
         {"item_positions", s.item_positions},
         {"list_positions", s.list_positions},
         {"list_types", s.list_types},
         {"separator_positions", s.separator_positions},
         {"placeholder_positions", s.placeholder_positions},
         {"spans", {{"context", s.context_span}, {"question", s.question_span}}},
         {"segments", s.segments},
         {"readout_position", s.readout_position},
         {"config", s.config},
         {"seed", s.seed}};
    if (s.answer_position) {
        j["answer_position"] = *s.answer_position;
    }
    if (s.grid) {
        j["grid"] = {{"rows", s.grid->rows}, {"cols", s.grid->cols}, {"first_position", s.grid->first_position}};
    }
}

inline void from_json(const nlohmann::json& j, CountingSample& s) {
    const auto& vocab = Vocabulary::standard();
    s = CountingSample{};
    s.modality = j.value("modality", Modality::text);
    if (j.contains("ids")) {
        s.tokens = j.at("ids").get<std::vector<TokenId>>();
    } else {
        for (const auto& w : j.at("tokens")) {
            s.tokens.push_back(vocab.id(w.get<std::string>()));
        }
    }
    s.roles = j.at("roles").get<std::vector<Role>>();
    if (s.roles.size() != s.tokens.size()) {
        throw InputError("roles and tokens differ in length");
    }
    s.ground_truth = j.at("ground_truth").get<int>();
    s.item_positions = j.value("item_positions", std::vector<int>{});
    s.list_positions = j.value("list_positions", std::vector<int>{});
    s.list_types = j.value("list_types", std::vector<int>{});
    s.separator_positions = j.value("separator_positions", std::vector<int>{});
    s.placeholder_positions = j.value("placeholder_positions", std::vector<int>{});
    s.context_span = j.at("spans").at("context").get<Span>();
    s.question_span = j.at("spans").at("question").get<Span>();
    s.segments = j.value("segments", std::vector<Span>{});
    s.readout_position = j.at("readout_position").get<int>();
    if (j.contains("answer_position")) {
        s.answer_position = j.at("answer_position").get<int>();
    }
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        s.grid = GridInfo{g.at("rows").get<int>(), g.at("cols").get<int>(), g.at("first_position").get<int>()};
    }
    s.config = j.value("config", nlohmann::json::object());
    s.seed = j.value("seed", std::uint64_t{0});
}

} // namespace countlab
