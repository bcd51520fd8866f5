#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/dataset.hpp"
#include "countlab/error.hpp"
#include "countlab/model.hpp"

namespace countlab {

/// One forward pass with every hook point stored.
template <class T>
ActivationCache<T> capture(const Transformer<T>& model, const CountingSample& sample, std::string checkpoint_id = {}) {
    ForwardOptions<T> o;
    o.logit_positions = {sample.readout_position};
    auto r = model.forward(sample, o);
    r.cache.sample_id = sample.config.dump() + "#" + std::to_string(sample.seed);
    r.cache.checkpoint_id = std::move(checkpoint_id);
    return std::move(r.cache);
}

// ----------------------------------------------------------------- mean store

/// Slot of a position within its sample: list element k ("item:k"), the gap
/// after element k ("sep:k"), or the absolute position ("pos:p").
inline std::string position_slot(const CountingSample& s, int position) {
    if (const int k = s.list_index_of(position); k > 0) {
        return "item:" + std::to_string(k);
    }
    const auto& lp = s.list_positions;
    for (std::size_t k = 0; k + 1 < lp.size(); ++k) {
        if (position > lp[k] && position < lp[k + 1]) {
            return "sep:" + std::to_string(k + 1);
        }
    }
    return "pos:" + std::to_string(position);
}

/// Mean activation per (family, layer, slot), accumulated in double.
class MeanStore {
public:
    struct Cell {
        std::vector<double> sum;
        int n = 0;
    };

    void add(HookFamily f, int layer, const std::string& slot, std::span<const double> v) {
        Cell& c = cells_[key(f, layer, slot)];
        if (c.sum.empty()) {
            c.sum.assign(v.size(), 0.0);
        }
        for (std::size_t i = 0; i < v.size(); ++i) {
            c.sum[i] += v[i];
        }
        ++c.n;
    }

    template <class T>
    void add(HookFamily f, int layer, const std::string& slot, std::span<const T> v) {
        std::vector<double> d(v.begin(), v.end());
        add(f, layer, slot, std::span<const double>(d));
    }

    bool contains(HookFamily f, int layer, const std::string& slot) const {
        return cells_.contains(key(f, layer, slot));
    }

    std::vector<double> mean(HookFamily f, int layer, const std::string& slot) const {
        const auto it = cells_.find(key(f, layer, slot));
        if (it == cells_.end() || it->second.n == 0) {
            throw MissingDataError("no activations for " + key(f, layer, slot));
        }
        std::vector<double> m = it->second.sum;
        for (double& x : m) {
            x /= it->second.n;
        }
        return m;
    }

    int samples(HookFamily f, int layer, const std::string& slot) const {
        const auto it = cells_.find(key(f, layer, slot));
        return it == cells_.end() ? 0 : it->second.n;
    }

    const std::map<std::string, Cell>& cells() const noexcept { return cells_; }

    static std::string key(HookFamily f, int layer, const std::string& slot) {
        return nlohmann::json(f).get<std::string>() + "/" + std::to_string(layer) + "/" + slot;
    }

private:
    std::map<std::string, Cell> cells_;
};

/// Means over every list element and gap of `samples` at the given families.
template <class T>
MeanStore compute_mean_store(const Transformer<T>& model, std::span<const CountingSample> samples,
                             std::vector<HookFamily> families = {HookFamily::resid_post}) {
    if (samples.empty()) {
        throw MissingDataError("mean store needs at least one sample");
    }
    MeanStore store;
    for (const auto& s : samples) {
        const auto cache = capture(model, s);
        for (const HookFamily f : families) {
            if (f == HookFamily::patch_embed) {
                if (!cache.has_patch_region()) {
                    continue;
                }
                for (const int p : s.list_positions) {
                    store.add(f, 0, position_slot(s, p), cache.at({f, 0, p}));
                }
                continue;
            }
            for (int l = 0; l < cache.n_layers; ++l) {
                for (int p = s.context_span.begin; p < s.context_span.end; ++p) {
                    const std::string slot = position_slot(s, p);
                    if (!slot.starts_with("pos:")) {
                        store.add(f, l, slot, cache.at({f, l, p}));
                    }
                }
            }
        }
    }
    return store;
}

/// mean(item j) - mean(item i) at (family, layer).
inline std::vector<double> position_difference_vector(const MeanStore& store, int i, int j, int layer,
                                                      HookFamily family = HookFamily::resid_post) {
    const auto mi = store.mean(family, layer, "item:" + std::to_string(i));
    const auto mj = store.mean(family, layer, "item:" + std::to_string(j));
    std::vector<double> v(mi.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = mj[k] - mi[k];
    }
    return v;
}

// ----------------------------------------------------------------- interventions

enum class InterventionMode { zero, mean, interchange, add_vector };
enum class Regime { online, offline };

NLOHMANN_JSON_SERIALIZE_ENUM(InterventionMode, {{InterventionMode::zero, "zero"},
                                                {InterventionMode::mean, "mean"},
                                                {InterventionMode::interchange, "interchange"},
                                                {InterventionMode::add_vector, "add_vector"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Regime, {{Regime::online, "online"}, {Regime::offline, "offline"}})

/// Declarative patch. For zero/mean/add_vector the source side of each
/// position pair is ignored.
struct InterventionSpec {
    InterventionMode mode = InterventionMode::zero;
    HookFamily family = HookFamily::resid_post;
    std::vector<int> layers; ///< empty means every layer
    std::vector<std::pair<int, int>> position_map; ///< (source position, target position)
    Regime regime = Regime::online;
    /// add_vector: one vector for all layers, or per layer.
    std::vector<double> vector;
    std::map<int, std::vector<double>> vector_by_layer;

    std::size_t k() const noexcept { return position_map.size(); }

    static InterventionSpec at_positions(InterventionMode mode, const std::vector<int>& positions,
                                         HookFamily family = HookFamily::resid_post, Regime regime = Regime::online) {
        InterventionSpec s;
        s.mode = mode;
        s.family = family;
        s.regime = regime;
        for (const int p : positions) {
            s.position_map.emplace_back(p, p);
        }
        return s;
    }
};

inline void to_json(nlohmann::json& j, const InterventionSpec& s) {
    j = {{"mode", s.mode},
         {"family", s.family},
         {"layers", s.layers},
         {"regime", s.regime},
         {"position_map", nlohmann::json::array()}};
    for (const auto& [a, b] : s.position_map) {
        j["position_map"].push_back({a, b});
    }
    if (!s.vector.empty()) {
        j["vector"] = s.vector;
    }
    if (!s.vector_by_layer.empty()) {
        auto& m = j["vector_by_layer"] = nlohmann::json::object();
        for (const auto& [l, v] : s.vector_by_layer) {
            m[std::to_string(l)] = v;
        }
    }
}

inline void from_json(const nlohmann::json& j, InterventionSpec& s) {
    s = InterventionSpec{};
    s.mode = parse_enum(j.at("mode").get<std::string>(), {InterventionMode::zero, InterventionMode::mean,
                                                          InterventionMode::interchange, InterventionMode::add_vector});
    s.family = parse_hook_family(j.value("family", std::string("resid_post")));
    s.layers = j.value("layers", std::vector<int>{});
    s.regime = parse_enum(j.value("regime", std::string("online")), {Regime::online, Regime::offline});
    for (const auto& pair : j.value("position_map", nlohmann::json::array())) {
        if (pair.is_number_integer()) {
            s.position_map.emplace_back(pair.get<int>(), pair.get<int>());
        } else {
            s.position_map.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        }
    }
    s.vector = j.value("vector", std::vector<double>{});
    if (j.contains("vector_by_layer")) {
        for (const auto& [l, v] : j.at("vector_by_layer").items()) {
            s.vector_by_layer[std::stoi(l)] = v.get<std::vector<double>>();
        }
    }
}

/// Outcome of one patched run at the target's readout position.
struct PatchRun {
    InterventionSpec spec;
    std::string target_id, source_id;
    std::vector<double> baseline; ///< P(.|C')
    std::vector<double> patched;  ///< P(.|C*)
    std::vector<double> source;   ///< P(.|C), empty without a source
    std::vector<double> patched_logits;
    int r = 0;       ///< source-correct answer (0 without a source)
    int r_prime = 0; ///< target-correct answer
    int r_tilde = 0; ///< hypothesis-expected answer (0 if not a digit)

    /// Full-vocabulary probability of digit n under a distribution.
    static double p_digit(const std::vector<double>& dist, int n) {
        if (n < 1 || n > kMaxCount || dist.empty()) {
            return 0.0;
        }
        return dist[static_cast<std::size_t>(Vocabulary::standard().digit(n))];
    }
};

namespace detail {

template <class T>
struct PatchContext {
    const Transformer<T>& model;
    const CountingSample& target;
    const InterventionSpec& spec;
    const ActivationCache<T>* source;
    const MeanStore* means;
};

inline void validate_spec(const InterventionSpec& spec, const ModelConfig& config, const CountingSample& target,
                          int source_len, bool has_source, bool has_means) {
    const bool patch_family = spec.family == HookFamily::patch_embed;
    for (const int l : spec.layers) {
        if (l < 0 || l >= (patch_family ? 1 : config.n_layers)) {
            throw SpecError("layer " + std::to_string(l) + " out of range");
        }
    }
    for (const auto& [src, tgt] : spec.position_map) {
        if (tgt < 0 || tgt >= target.length()) {
            throw SpecError("target position " + std::to_string(tgt) + " outside the target sequence");
        }
        if (spec.mode == InterventionMode::interchange && (src < 0 || src >= source_len)) {
            throw SpecError("source position " + std::to_string(src) + " outside the source sequence");
        }
        if (patch_family) {
            const auto& g = target.grid;
            if (!g || tgt < g->first_position || tgt >= g->first_position + g->cells()) {
                throw SpecError("target position " + std::to_string(tgt) + " is not a patch cell");
            }
        }
    }
    if (spec.mode == InterventionMode::interchange && !has_source) {
        throw SpecError("interchange patch needs a source cache");
    }
    if (spec.mode == InterventionMode::mean && !has_means) {
        throw SpecError("mean patch needs a mean store");
    }
    if (spec.mode == InterventionMode::add_vector) {
        if (spec.vector.empty() && spec.vector_by_layer.empty()) {
            throw SpecError("add_vector needs a vector");
        }
        auto check = [&](const std::vector<double>& v) {
            if (static_cast<int>(v.size()) != config.d_model) {
                throw SpecError("vector length " + std::to_string(v.size()) + " != d_model " +
                                std::to_string(config.d_model));
            }
        };
        if (!spec.vector.empty()) {
            check(spec.vector);
        }
        for (const auto& [l, v] : spec.vector_by_layer) {
            check(v);
        }
    }
}

} // namespace detail

/// Runs the target with the intervention applied and returns the readout
/// distributions. `target_cache` (the clean target run) is required for the
/// offline regime and computed when absent.
template <class T>
PatchRun run_patched(const Transformer<T>& model, const CountingSample& target, const InterventionSpec& spec,
                     const std::type_identity_t<ActivationCache<T>>* source_cache = nullptr,
                     const MeanStore* means = nullptr,
                     const CountingSample* source_sample = nullptr) {
    const int source_len = source_cache != nullptr ? source_cache->seq_len : 0;
    detail::validate_spec(spec, model.config(), target, source_len, source_cache != nullptr, means != nullptr);
    const bool patch_family = spec.family == HookFamily::patch_embed;
    if (spec.mode == InterventionMode::interchange && patch_family && !source_cache->has_patch_region()) {
        throw SpecError("source run has no patch region");
    }

    ForwardOptions<T> base_opt;
    base_opt.logit_positions = {target.readout_position};
    const auto base = model.forward(target, base_opt);

    PatchRun run;
    run.spec = spec;
    run.target_id = target.config.dump() + "#" + std::to_string(target.seed);
    run.baseline = next_token_distribution(base.logits.row_span(0));
    run.r_prime = target.ground_truth;
    if (source_sample != nullptr) {
        run.source_id = source_sample->config.dump() + "#" + std::to_string(source_sample->seed);
        run.r = source_sample->ground_truth;
        ForwardOptions<T> so;
        so.record_cache = false;
        so.logit_positions = {source_sample->readout_position};
        run.source = next_token_distribution(model.forward(*source_sample, so).logits.row_span(0));
    }

    std::set<int> layer_set(spec.layers.begin(), spec.layers.end());
    if (layer_set.empty()) {
        const int n = patch_family ? 1 : model.config().n_layers;
        for (int l = 0; l < n; ++l) {
            layer_set.insert(l);
        }
    }
    std::set<int> patched_positions;
    for (const auto& pm : spec.position_map) {
        patched_positions.insert(pm.second);
    }
    const int d = model.config().d_model;

    // Values written at (target position) for one layer.
    auto write = [&](HookFamily family, int layer, Matrix<T>& values, int first) {
        for (const auto& [src, tgt] : spec.position_map) {
            T* row = values.row(tgt - first);
            switch (spec.mode) {
            case InterventionMode::zero:
                std::fill(row, row + d, T{});
                break;
            case InterventionMode::mean: {
                const auto m = means->mean(family, layer, position_slot(target, tgt));
                for (int k = 0; k < d; ++k) {
                    row[k] = static_cast<T>(m[static_cast<std::size_t>(k)]);
                }
                break;
            }
            case InterventionMode::interchange: {
                const auto v = source_cache->at({family, layer, src});
                std::copy(v.begin(), v.end(), row);
                break;
            }
            case InterventionMode::add_vector: {
                const auto it = spec.vector_by_layer.find(layer);
                const std::vector<double>* v = it != spec.vector_by_layer.end() ? &it->second
                                               : spec.vector.empty()             ? nullptr
                                                                                 : &spec.vector;
                if (v != nullptr) {
                    for (int k = 0; k < d; ++k) {
                        row[k] += static_cast<T>((*v)[static_cast<std::size_t>(k)]);
                    }
                }
                break;
            }
            }
        }
    };

    HookEditor<T> editor = [&](HookFamily family, int layer, Matrix<T>& values, int first) {
        if (spec.regime == Regime::offline && family != HookFamily::patch_embed) {
            // Frozen context: every unpatched position keeps its clean value.
            const Matrix<T>& clean = base.cache.layer(family, layer);
            for (int t = 0; t < values.rows; ++t) {
                if (!patched_positions.contains(t)) {
                    std::copy(clean.row(t), clean.row(t) + d, values.row(t));
                }
            }
        }
        if (family == spec.family && layer_set.contains(layer)) {
            write(family, layer, values, first);
        }
    };

    ForwardOptions<T> opt;
    opt.editor = &editor;
    opt.record_cache = false;
    opt.logit_positions = {target.readout_position};
    const auto patched = model.forward(target, opt);
    const auto row = patched.logits.row_span(0);
    run.patched = next_token_distribution(row);
    run.patched_logits.assign(row.begin(), row.end());
    return run;
}

} // namespace countlab
