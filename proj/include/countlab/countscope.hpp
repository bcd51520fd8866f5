#pragma once

#include <array>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/activations.hpp"
#include "countlab/dataset.hpp"
#include "countlab/model.hpp"

namespace countlab {

/// Minimal target context for reading a single activation's latent count.
struct ProbeConfig {
    Modality modality = Modality::text;
    int n_placeholders = 1;
    Order order = Order::question_last;
    QuestionKind question = QuestionKind::general;
    /// Placeholder receiving the transfer; empty means the last one.
    std::optional<int> inject_position;
    /// Transfer layers 1..L (zero-based 0..L-1); empty means every layer.
    std::optional<int> layer_cutoff;
    HookFamily family = HookFamily::resid_post;
    Regime regime = Regime::online;

    int inject_index() const noexcept { return inject_position.value_or(n_placeholders - 1); }

    void validate(const ModelConfig& model) const {
        if (n_placeholders < 1 || n_placeholders > kMaxCount) {
            throw ConfigError("n_placeholders must be in 1..9");
        }
        if (inject_index() < 0 || inject_index() >= n_placeholders) {
            throw ConfigError("inject_position must be below n_placeholders");
        }
        if (layer_cutoff && (*layer_cutoff < 1 || *layer_cutoff > model.n_layers)) {
            throw ConfigError("layer_cutoff must be in 1.." + std::to_string(model.n_layers));
        }
        if (family == HookFamily::patch_embed) {
            throw ConfigError("probe transfers decoder activations; patch_embed is not a probe family");
        }
        if (modality == Modality::visual) {
            if (!model.vision) {
                throw ConfigError("visual probe needs a model with a patch encoder");
            }
            if (n_placeholders > model.vision->grid_size) {
                throw ConfigError("visual probe placeholders exceed the encoder grid width");
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
    j = {{"modality", c.modality}, {"n_placeholders", c.n_placeholders}, {"order", c.order},
         {"question", c.question}, {"inject_position", c.inject_index()}, {"family", c.family},
         {"regime", c.regime}};
    j["layer_cutoff"] = c.layer_cutoff ? nlohmann::json(*c.layer_cutoff) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
    c = ProbeConfig{};
    c.modality = parse_enum(j.value("modality", std::string("text")), {Modality::text, Modality::visual});
    c.n_placeholders = j.value("n_placeholders", 1);
    c.order = parse_order(j.value("order", std::string("question-last")));
    c.question = parse_question(j.value("question", std::string("general")));
    if (j.contains("inject_position") && !j.at("inject_position").is_null()) {
        c.inject_position = j.at("inject_position").get<int>();
    }
    if (j.contains("layer_cutoff") && !j.at("layer_cutoff").is_null()) {
        c.layer_cutoff = j.at("layer_cutoff").get<int>();
    }
    c.family = parse_hook_family(j.value("family", std::string("resid_post")));
    c.regime = parse_enum(j.value("regime", std::string("online")), {Regime::online, Regime::offline});
}

/// Text: "<ph>, <ph> Question: How many items are there in the above sentence?"
/// plus the answer cue. Visual: a 1 x n strip of placeholder patches and the
/// image question. A specific probe asks about the placeholder word itself.
inline CountingSample build_probe(const ProbeConfig& config) {
    const auto& vocab = Vocabulary::standard();
    const TokenId ph = vocab.placeholder_id();
    CountingSample probe;
    if (config.modality == Modality::text) {
        const std::vector<TokenId> ids(static_cast<std::size_t>(config.n_placeholders), ph);
        probe = build_text_sample(ids, normal_gaps(config.n_placeholders),
                                  std::vector<bool>(ids.size(), true), config.order, std::nullopt,
                                  config.n_placeholders, false);
        if (config.question == QuestionKind::specific) {
            for (int p = probe.question_span.begin; p < probe.question_span.end; ++p) {
                if (probe.tokens[static_cast<std::size_t>(p)] == vocab.id("items")) {
                    probe.tokens[static_cast<std::size_t>(p)] = ph;
                }
            }
        }
    } else {
        detail::SampleBuilder b(Modality::visual);
        b.push(vocab.bos_id(), Role::special);
        std::vector<Span> segments;
        if (config.order == Order::question_first) {
            const int begin = b.position();
            b.push_words("Task: count the objects in the image.", Role::special);
            segments.push_back({begin, b.position()});
        }
        const int first = b.position();
        for (int i = 0; i < config.n_placeholders; ++i) {
            const int p = b.push(ph, Role::placeholder);
            b.sample().list_positions.push_back(p);
            b.sample().list_types.push_back(-1);
            b.sample().placeholder_positions.push_back(p);
        }
        b.sample().context_span = {first, b.position()};
        b.sample().grid = GridInfo{1, config.n_placeholders, first};
        segments.push_back(b.sample().context_span);
        const int q = b.position();
        if (config.question == QuestionKind::specific) {
            b.push_words("How many", Role::question);
            b.push(ph, Role::question);
            b.push_words("are there in the image?", Role::question);
        } else {
            b.push_words("How many objects are there in the image?", Role::question);
        }
        b.sample().question_span = {q, b.position()};
        segments.push_back(b.sample().question_span);
        b.sample().segments = segments;
        b.sample().ground_truth = config.n_placeholders;
        probe = b.finish(false);
    }
    probe.config = {{"probe", config}};
    return probe;
}

/// Digit readout of one transferred activation.
struct Decoding {
    std::array<double, 9> raw{};
    std::array<double, 9> renormalized{};
    int argmax = 0;
    std::string source_id;
    int source_position = -1;
    std::vector<int> layers;

    double renormalized_at(int n) const {
        return (n >= 1 && n <= 9) ? renormalized[static_cast<std::size_t>(n - 1)] : 0.0;
    }
};

inline void to_json(nlohmann::json& j, const Decoding& d) {
    j = {{"raw", d.raw},           {"renormalized", d.renormalized}, {"argmax", d.argmax},
         {"source_id", d.source_id}, {"source_position", d.source_position}, {"layers", d.layers}};
}

/// Interchange-patches the activation at `source_position` of the source run
/// into the probe's placeholder and reads the digit distribution.
template <class T>
Decoding decode(const Transformer<T>& model, const ActivationCache<T>& source, int source_position,
                const ProbeConfig& config) {
    config.validate(model.config());
    const CountingSample probe = build_probe(config);
    InterventionSpec spec;
    spec.mode = InterventionMode::interchange;
    spec.family = config.family;
    spec.regime = config.regime;
    const int cutoff = config.layer_cutoff.value_or(model.config().n_layers);
    for (int l = 0; l < cutoff; ++l) {
        spec.layers.push_back(l);
    }
    spec.position_map = {
        {source_position, probe.placeholder_positions[static_cast<std::size_t>(config.inject_index())]}};
    const PatchRun run = run_patched(model, probe, spec, &source);
    const auto digits = digit_distribution(std::span<const double>(run.patched_logits));
    Decoding out;
    out.raw = digits.raw;
    out.renormalized = digits.renormalized;
    out.argmax = digits.argmax();
    out.source_id = source.sample_id;
    out.source_position = source_position;
    out.layers = spec.layers;
    return out;
}

/// Decodings at cutoffs 1..L_max for one source position.
template <class T>
std::vector<Decoding> decode_layerwise(const Transformer<T>& model, const ActivationCache<T>& source,
                                       int source_position, ProbeConfig config) {
    std::vector<Decoding> out;
    for (int l = 1; l <= model.config().n_layers; ++l) {
        config.layer_cutoff = l;
        out.push_back(decode(model, source, source_position, config));
    }
    return out;
}

struct CellDecoding {
    int cell = 0;
    int row = 0;
    int col = 0;
    bool foreground = false;
    int content = 0; ///< 0 background, else 1 + shape*8 + color
    Decoding decoding;
};

inline void to_json(nlohmann::json& j, const CellDecoding& c) {
    j = {{"cell", c.cell},           {"row", c.row},         {"col", c.col},
         {"foreground", c.foreground}, {"content", c.content}, {"decoding", c.decoding}};
}

/// One decoding per grid cell of a scene run.
template <class T>
std::vector<CellDecoding> decode_grid(const Transformer<T>& model, const CountingSample& scene,
                                      const ActivationCache<T>& source, const ProbeConfig& config) {
    if (!scene.grid) {
        throw InputError("decode_grid needs a sample with a patch region");
    }
    const auto& g = *scene.grid;
    const auto& vocab = Vocabulary::standard();
    std::vector<CellDecoding> out;
    for (int c = 0; c < g.cells(); ++c) {
        const int pos = g.first_position + c;
        CellDecoding cd;
        cd.cell = c;
        cd.row = c / g.cols;
        cd.col = c % g.cols;
        cd.foreground = scene.tokens[static_cast<std::size_t>(pos)] != vocab.background_id();
        const int idx = scene.list_index_of(pos);
        cd.content = idx > 0 ? scene.list_types[static_cast<std::size_t>(idx - 1)] : 0;
        cd.decoding = decode(model, source, pos, config);
        out.push_back(std::move(cd));
    }
    return out;
}

/// Rows x 9 digit columns. `normalization` is written to the header row.
inline void write_heatmap_csv(std::ostream& out, const std::vector<std::string>& row_labels,
                              const std::vector<std::array<double, 9>>& rows, const std::string& normalization) {
    out << "# normalization: " << normalization << '\n';
    out << "row";
    for (int n = 1; n <= 9; ++n) {
        out << ',' << n;
    }
    out << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out << row_labels[i];
        for (const double v : rows[i]) {
            out << ',' << v;
        }
        out << '\n';
    }
}

/// Scales every digit column to its maximum (the layerwise heatmap convention).
inline std::vector<std::array<double, 9>> normalize_columns(std::vector<std::array<double, 9>> rows) {
    for (std::size_t c = 0; c < 9; ++c) {
        double mx = 0.0;
        for (const auto& r : rows) {
            mx = std::max(mx, r[c]);
        }
        if (mx > 0.0) {
            for (auto& r : rows) {
                r[c] /= mx;
            }
        }
    }
    return rows;
}

} // namespace countlab
