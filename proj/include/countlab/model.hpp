#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/dataset.hpp"
#include "countlab/error.hpp"
#include "countlab/rng.hpp"
#include "countlab/tensor.hpp"
#include "countlab/vocab.hpp"

namespace countlab {

enum class HookFamily { resid_pre = 0, attn_out = 1, mlp_out = 2, resid_post = 3, patch_embed = 4 };
inline constexpr std::array<HookFamily, 4> kDecoderFamilies{HookFamily::resid_pre, HookFamily::attn_out,
                                                            HookFamily::mlp_out, HookFamily::resid_post};

NLOHMANN_JSON_SERIALIZE_ENUM(HookFamily, {{HookFamily::resid_pre, "resid_pre"},
                                          {HookFamily::attn_out, "attn_out"},
                                          {HookFamily::mlp_out, "mlp_out"},
                                          {HookFamily::resid_post, "resid_post"},
                                          {HookFamily::patch_embed, "patch_embed"}})

inline HookFamily parse_hook_family(const std::string& s) {
    return parse_enum(s, {HookFamily::resid_pre, HookFamily::attn_out, HookFamily::mlp_out,
                          HookFamily::resid_post, HookFamily::patch_embed});
}

/// An activation site. For patch_embed the layer is always 0 and the position
/// is the decoder position of the patch token.
struct HookPoint {
    HookFamily family = HookFamily::resid_post;
    int layer = 0;
    int position = 0;
};

struct VisionConfig {
    int n_encoder_layers = 2;
    int grid_size = 10; ///< largest supported grid side
};

struct ModelConfig {
    int d_model = 128;
    int n_layers = 8;
    int n_heads = 4;
    int d_mlp = 512;
    int max_seq_len = 128;
    int vocab_size = Vocabulary::standard().size();
    std::optional<VisionConfig> vision;
    double norm_eps = 1e-5;
    std::uint64_t seed = 0;

    int head_dim() const noexcept { return d_model / n_heads; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            throw ConfigError("d_model must be a positive multiple of n_heads");
        }
        if (n_layers < 0 || d_mlp <= 0 || max_seq_len <= 0) {
            throw ConfigError("invalid layer count, d_mlp or max_seq_len");
        }
        if (vocab_size < Vocabulary::standard().size()) {
            throw ConfigError("vocab_size smaller than the closed vocabulary");
        }
        if (!(norm_eps > 0.0)) {
            throw ConfigError("norm_eps must be positive");
        }
        if (vision && (vision->n_encoder_layers < 0 || vision->grid_size <= 0)) {
            throw ConfigError("invalid vision config");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
         {"d_mlp", c.d_mlp},         {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
         {"norm_eps", c.norm_eps},   {"seed", c.seed}};
    if (c.vision) {
        j["vision"] = {{"n_encoder_layers", c.vision->n_encoder_layers}, {"grid_size", c.vision->grid_size}};
    } else {
        j["vision"] = nullptr;
    }
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_mlp = j.value("d_mlp", c.d_mlp);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("vision") && !j.at("vision").is_null()) {
        VisionConfig v;
        v.n_encoder_layers = j.at("vision").value("n_encoder_layers", v.n_encoder_layers);
        v.grid_size = j.at("vision").value("grid_size", v.grid_size);
        c.vision = v;
    }
    c.validate();
}

// ----------------------------------------------------------------- layout

struct TensorSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Offsets of one transformer block's tensors inside the flat parameter array.
struct BlockOffsets {
    std::size_t norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
};

/// Fixed order of every weight array; this is also the checkpoint order.
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& c) {
        const int d = c.d_model;
        tok_embed_ = add("tok_embed", c.vocab_size, d);
        pos_embed_ = add("pos_embed", c.max_seq_len, d);
        if (c.vision) {
            row_embed_ = add("encoder.row_embed", c.vision->grid_size, d);
            col_embed_ = add("encoder.col_embed", c.vision->grid_size, d);
            for (int l = 0; l < c.vision->n_encoder_layers; ++l) {
                encoder_.push_back(add_block("encoder.layers." + std::to_string(l), c));
            }
        }
        for (int l = 0; l < c.n_layers; ++l) {
            decoder_.push_back(add_block("layers." + std::to_string(l), c));
        }
        final_norm_ = add("final_norm", 1, d);
        unembed_ = add("unembed", d, c.vocab_size);
        unembed_bias_ = add("unembed_bias", 1, c.vocab_size);
    }

    std::size_t total() const noexcept { return total_; }
    const std::vector<TensorSpec>& tensors() const noexcept { return tensors_; }
    const TensorSpec& find(const std::string& name) const {
        for (const auto& t : tensors_) {
            if (t.name == name) {
                return t;
            }
        }
        throw ConfigError("no tensor named " + name);
    }

    std::size_t tok_embed() const noexcept { return tok_embed_; }
    std::size_t pos_embed() const noexcept { return pos_embed_; }
    std::size_t row_embed() const noexcept { return row_embed_; }
    std::size_t col_embed() const noexcept { return col_embed_; }
    const std::vector<BlockOffsets>& encoder() const noexcept { return encoder_; }
    const std::vector<BlockOffsets>& decoder() const noexcept { return decoder_; }
    std::size_t final_norm() const noexcept { return final_norm_; }
    std::size_t unembed() const noexcept { return unembed_; }
    std::size_t unembed_bias() const noexcept { return unembed_bias_; }

private:
    std::size_t add(std::string name, int rows, int cols) {
        tensors_.push_back({std::move(name), rows, cols, total_});
        const std::size_t at = total_;
        total_ += tensors_.back().size();
        return at;
    }
    BlockOffsets add_block(const std::string& p, const ModelConfig& c) {
        const int d = c.d_model;
        BlockOffsets b{};
        b.norm1 = add(p + ".norm1", 1, d);
        b.wq = add(p + ".wq", d, d);
        b.wk = add(p + ".wk", d, d);
        b.wv = add(p + ".wv", d, d);
        b.wo = add(p + ".wo", d, d);
        b.norm2 = add(p + ".norm2", 1, d);
        b.w1 = add(p + ".w1", d, c.d_mlp);
        b.b1 = add(p + ".b1", 1, c.d_mlp);
        b.w2 = add(p + ".w2", c.d_mlp, d);
        b.b2 = add(p + ".b2", 1, d);
        return b;
    }

    std::vector<TensorSpec> tensors_;
    std::size_t total_ = 0;
    std::size_t tok_embed_ = 0, pos_embed_ = 0, row_embed_ = 0, col_embed_ = 0;
    std::vector<BlockOffsets> encoder_, decoder_;
    std::size_t final_norm_ = 0, unembed_ = 0, unembed_bias_ = 0;
};

// ----------------------------------------------------------------- caches

/// Activations of one run at every hook point.
template <class T>
struct ActivationCache {
    int n_layers = 0;
    int seq_len = 0;
    int d_model = 0;
    /// decoder[family][layer] is seq_len x d_model.
    std::array<std::vector<Matrix<T>>, 4> decoder;
    /// Encoder output per patch cell (rows = cells), when the run had a patch region.
    Matrix<T> patch_embed;
    int patch_first_position = -1;
    std::string sample_id;
    std::string checkpoint_id;

    bool has_patch_region() const noexcept { return patch_first_position >= 0; }

    std::span<const T> at(const HookPoint& h) const {
        if (h.family == HookFamily::patch_embed) {
            const int cell = h.position - patch_first_position;
            if (!has_patch_region() || cell < 0 || cell >= patch_embed.rows) {
                throw SpecError("position " + std::to_string(h.position) + " is not a patch position");
            }
            return patch_embed.row_span(cell);
        }
        if (h.layer < 0 || h.layer >= n_layers || h.position < 0 || h.position >= seq_len) {
            throw SpecError("hook point out of range (layer " + std::to_string(h.layer) + ", position " +
                            std::to_string(h.position) + ")");
        }
        return decoder[static_cast<std::size_t>(h.family)][static_cast<std::size_t>(h.layer)].row_span(h.position);
    }

    const Matrix<T>& layer(HookFamily f, int l) const {
        return decoder.at(static_cast<std::size_t>(f)).at(static_cast<std::size_t>(l));
    }

    /// Number of stored vectors across all hook points.
    std::size_t entry_count() const noexcept {
        return 4u * static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(seq_len) +
               static_cast<std::size_t>(has_patch_region() ? patch_embed.rows : 0);
    }
};

/// Intermediates kept for the backward pass of one block.
template <class T>
struct BlockTrace {
    Matrix<T> x_in, n1, q, k, v, o, x_mid, n2, hpre, hact;
    std::vector<T> inv_rms1, inv_rms2;
    std::vector<Matrix<T>> probs; ///< per head, rows x rows
};

template <class T>
struct Trace {
    std::vector<BlockTrace<T>> encoder, decoder;
    Matrix<T> x_final, n_final;
    std::vector<T> inv_rms_final;
};

/// Edits the activations of one hook site in place. `values` holds one row per
/// position (per patch cell for patch_embed, whose first row sits at decoder
/// position `first_position`).
template <class T>
using HookEditor = std::function<void(HookFamily family, int layer, Matrix<T>& values, int first_position)>;

template <class T>
struct ForwardOptions {
    const HookEditor<T>* editor = nullptr;
    bool record_cache = true;
    bool record_trace = false;
    /// Positions whose logits are computed; empty means all.
    std::vector<int> logit_positions;
};

template <class T>
struct ForwardResult {
    Matrix<T> logits; ///< one row per entry of logit_positions
    std::vector<int> logit_positions;
    ActivationCache<T> cache;
    std::optional<Trace<T>> trace;

    std::span<const T> logits_at(int position) const {
        for (std::size_t i = 0; i < logit_positions.size(); ++i) {
            if (logit_positions[i] == position) {
                return logits.row_span(static_cast<int>(i));
            }
        }
        throw InputError("logits not computed at position " + std::to_string(position));
    }
};

// ----------------------------------------------------------------- math helpers

namespace detail {

template <class T>
inline T gelu(T x) noexcept {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
inline T gelu_grad(T x) noexcept {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

/// out = x / rms(x) * gain, per row; inv_rms receives 1 / rms.
template <class T>
inline void rms_norm(const Matrix<T>& x, const T* gain, T eps, Matrix<T>& out, std::vector<T>& inv_rms) {
    out = Matrix<T>(x.rows, x.cols);
    inv_rms.assign(static_cast<std::size_t>(x.rows), T{});
    for (int t = 0; t < x.rows; ++t) {
        const T* xr = x.row(t);
        const T ms = kernel::dot(xr, xr, x.cols) / static_cast<T>(x.cols);
        const T inv = T(1) / std::sqrt(ms + eps);
        inv_rms[static_cast<std::size_t>(t)] = inv;
        T* o = out.row(t);
        for (int i = 0; i < x.cols; ++i) {
            o[i] = xr[i] * inv * gain[i];
        }
    }
}

/// Accumulates into dx and dgain the gradient flowing back through rms_norm.
template <class T>
inline void rms_norm_backward(const Matrix<T>& x, const T* gain, const std::vector<T>& inv_rms, const Matrix<T>& dout,
                              Matrix<T>& dx, T* dgain) {
    const int d = x.cols;
    std::vector<T> du(static_cast<std::size_t>(d)), u(static_cast<std::size_t>(d));
    for (int t = 0; t < x.rows; ++t) {
        const T inv = inv_rms[static_cast<std::size_t>(t)];
        const T* xr = x.row(t);
        const T* g = dout.row(t);
        T proj{};
        for (int i = 0; i < d; ++i) {
            u[static_cast<std::size_t>(i)] = xr[i] * inv;
            du[static_cast<std::size_t>(i)] = g[i] * gain[i];
            dgain[i] += g[i] * u[static_cast<std::size_t>(i)];
            proj += du[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
        }
        proj /= static_cast<T>(d);
        T* dxr = dx.row(t);
        for (int i = 0; i < d; ++i) {
            dxr[i] += inv * (du[static_cast<std::size_t>(i)] - u[static_cast<std::size_t>(i)] * proj);
        }
    }
}

template <class T>
inline void add_into(Matrix<T>& y, const Matrix<T>& x) noexcept {
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        y.data[i] += x.data[i];
    }
}

} // namespace detail

// ----------------------------------------------------------------- model

/// Pre-norm decoder-only transformer with an optional bidirectional patch
/// encoder. Weights live in one flat array laid out by ParamLayout.
template <class T>
class Transformer {
public:
    explicit Transformer(ModelConfig config) : config_(std::move(config)), layout_(config_) {
        config_.validate();
        params_.assign(layout_.total(), T{});
        initialize(config_.seed);
    }

    /// Scaled normal init, variance 2 / (fan_in + fan_out); gains 1, biases 0.
    void initialize(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 101));
        for (const auto& t : layout_.tensors()) {
            T* p = params_.data() + t.offset;
            const bool gain = t.name.ends_with("norm1") || t.name.ends_with("norm2") || t.name == "final_norm";
            const bool bias = t.rows == 1 && !gain;
            if (gain || bias) {
                std::fill(p, p + t.size(), gain ? T(1) : T(0));
                continue;
            }
            const double sd = std::sqrt(2.0 / static_cast<double>(t.rows + t.cols));
            for (std::size_t i = 0; i < t.size(); ++i) {
                p[i] = static_cast<T>(sd * rng.normal());
            }
        }
    }

    const ModelConfig& config() const noexcept { return config_; }
    const ParamLayout& layout() const noexcept { return layout_; }
    std::vector<T>& parameters() noexcept { return params_; }
    const std::vector<T>& parameters() const noexcept { return params_; }
    const T* param(std::size_t offset) const noexcept { return params_.data() + offset; }

    template <class U>
    Transformer<U> cast() const {
        Transformer<U> out(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.parameters()[i] = static_cast<U>(params_[i]);
        }
        return out;
    }

    void validate_input(std::span<const TokenId> tokens, const std::optional<GridInfo>& grid) const {
        if (static_cast<int>(tokens.size()) > config_.max_seq_len) {
            throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                             std::to_string(config_.max_seq_len));
        }
        if (tokens.empty()) {
            throw InputError("empty token sequence");
        }
        for (const TokenId id : tokens) {
            if (id < 0 || id >= config_.vocab_size) {
                throw InputError("token id " + std::to_string(id) + " out of range");
            }
        }
        if (grid) {
            if (!config_.vision) {
                throw ConfigError("model has no patch encoder but the input has a patch region");
            }
            if (grid->rows > config_.vision->grid_size || grid->cols > config_.vision->grid_size ||
                grid->rows <= 0 || grid->cols <= 0) {
                throw ConfigError("grid " + std::to_string(grid->rows) + "x" + std::to_string(grid->cols) +
                                  " does not fit the encoder (max " + std::to_string(config_.vision->grid_size) + ")");
            }
            if (grid->first_position < 0 || grid->first_position + grid->cells() > static_cast<int>(tokens.size())) {
                throw InputError("patch region outside the sequence");
            }
        }
    }

    ForwardResult<T> forward(std::span<const TokenId> tokens, const std::optional<GridInfo>& grid = std::nullopt,
                             const ForwardOptions<T>& options = {}) const {
        validate_input(tokens, grid);
        const int n = static_cast<int>(tokens.size());
        const int d = config_.d_model;
        ForwardResult<T> result;
        if (options.record_trace) {
            result.trace.emplace();
        }
        auto& cache = result.cache;
        if (options.record_cache) {
            cache.n_layers = config_.n_layers;
            cache.seq_len = n;
            cache.d_model = d;
            for (auto& fam : cache.decoder) {
                fam.reserve(static_cast<std::size_t>(config_.n_layers));
            }
        }

        Matrix<T> x(n, d);
        const T* tok = param(layout_.tok_embed());
        const T* pos = param(layout_.pos_embed());
        for (int t = 0; t < n; ++t) {
            const T* e = tok + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * static_cast<std::size_t>(d);
            std::copy(e, e + d, x.row(t));
        }

        if (grid) {
            Matrix<T> patches = encode_patches(tokens, *grid, result.trace ? &result.trace->encoder : nullptr);
            if (options.editor != nullptr) {
                (*options.editor)(HookFamily::patch_embed, 0, patches, grid->first_position);
            }
            for (int c = 0; c < patches.rows; ++c) {
                std::copy(patches.row(c), patches.row(c) + d, x.row(grid->first_position + c));
            }
            if (options.record_cache) {
                cache.patch_embed = patches;
                cache.patch_first_position = grid->first_position;
            }
        }
        for (int t = 0; t < n; ++t) {
            kernel::axpy(T(1), pos + static_cast<std::size_t>(t) * static_cast<std::size_t>(d), x.row(t), d);
        }

        for (int l = 0; l < config_.n_layers; ++l) {
            auto on_site = [&](HookFamily f, Matrix<T>& values) {
                if (options.editor != nullptr) {
                    (*options.editor)(f, l, values, 0);
                }
                if (options.record_cache) {
                    cache.decoder[static_cast<std::size_t>(f)].push_back(values);
                }
            };
            BlockTrace<T>* bt = nullptr;
            if (result.trace) {
                result.trace->decoder.emplace_back();
                bt = &result.trace->decoder.back();
            }
            block_forward(layout_.decoder()[static_cast<std::size_t>(l)], x, true, bt, on_site);
        }

        Matrix<T> nf;
        std::vector<T> inv_f;
        detail::rms_norm(x, param(layout_.final_norm()), static_cast<T>(config_.norm_eps), nf, inv_f);

        result.logit_positions = options.logit_positions;
        if (result.logit_positions.empty()) {
            result.logit_positions.resize(static_cast<std::size_t>(n));
            for (int t = 0; t < n; ++t) {
                result.logit_positions[static_cast<std::size_t>(t)] = t;
            }
        }
        const int v = config_.vocab_size;
        result.logits = Matrix<T>(static_cast<int>(result.logit_positions.size()), v);
        for (std::size_t i = 0; i < result.logit_positions.size(); ++i) {
            const int t = result.logit_positions[i];
            if (t < 0 || t >= n) {
                throw InputError("logit position out of range");
            }
            kernel::row_matmul(nf.row(t), param(layout_.unembed()), param(layout_.unembed_bias()),
                               result.logits.row(static_cast<int>(i)), d, v);
        }
        if (result.trace) {
            result.trace->x_final = std::move(x);
            result.trace->n_final = std::move(nf);
            result.trace->inv_rms_final = std::move(inv_f);
        }
        return result;
    }

    ForwardResult<T> forward(const CountingSample& sample, const ForwardOptions<T>& options = {}) const {
        return forward(sample.tokens, sample.grid, options);
    }

    /// Patch encoder output (one row per cell): token embedding + row/col
    /// embeddings, then bidirectional blocks.
    Matrix<T> encode_patches(std::span<const TokenId> tokens, const GridInfo& grid,
                             std::vector<BlockTrace<T>>* traces) const {
        const int d = config_.d_model;
        Matrix<T> e(grid.cells(), d);
        const T* tok = param(layout_.tok_embed());
        const T* rows = param(layout_.row_embed());
        const T* cols = param(layout_.col_embed());
        for (int c = 0; c < grid.cells(); ++c) {
            const TokenId id = tokens[static_cast<std::size_t>(grid.first_position + c)];
            T* out = e.row(c);
            std::copy(tok + static_cast<std::size_t>(id) * static_cast<std::size_t>(d),
                      tok + static_cast<std::size_t>(id + 1) * static_cast<std::size_t>(d), out);
            kernel::axpy(T(1), rows + static_cast<std::size_t>(c / grid.cols) * static_cast<std::size_t>(d), out, d);
            kernel::axpy(T(1), cols + static_cast<std::size_t>(c % grid.cols) * static_cast<std::size_t>(d), out, d);
        }
        auto no_hooks = [](HookFamily, Matrix<T>&) {};
        for (const auto& block : layout_.encoder()) {
            BlockTrace<T>* bt = nullptr;
            if (traces != nullptr) {
                traces->emplace_back();
                bt = &traces->back();
            }
            block_forward(block, e, false, bt, no_hooks);
        }
        return e;
    }

    /// One pre-norm block applied to x in place. `on_site` sees (and may edit)
    /// resid_pre, attn_out, mlp_out and resid_post in that order.
    template <class OnSite>
    void block_forward(const BlockOffsets& w, Matrix<T>& x, bool causal, BlockTrace<T>* tr, OnSite&& on_site) const {
        const int n = x.rows;
        const int d = config_.d_model;
        const int h_count = config_.n_heads;
        const int hd = config_.head_dim();
        const T eps = static_cast<T>(config_.norm_eps);
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));

        on_site(HookFamily::resid_pre, x);

        BlockTrace<T> local;
        BlockTrace<T>& b = tr != nullptr ? *tr : local;
        if (tr != nullptr) {
            b.x_in = x;
        }
        detail::rms_norm(x, param(w.norm1), eps, b.n1, b.inv_rms1);
        kernel::matmul(b.n1, param(w.wq), static_cast<const T*>(nullptr), b.q, d);
        kernel::matmul(b.n1, param(w.wk), static_cast<const T*>(nullptr), b.k, d);
        kernel::matmul(b.n1, param(w.wv), static_cast<const T*>(nullptr), b.v, d);

        b.o = Matrix<T>(n, d);
        b.probs.assign(static_cast<std::size_t>(h_count), Matrix<T>());
        std::vector<T> scores(static_cast<std::size_t>(n));
        for (int h = 0; h < h_count; ++h) {
            Matrix<T>& p = b.probs[static_cast<std::size_t>(h)];
            p = Matrix<T>(n, n);
            const int off = h * hd;
            for (int t = 0; t < n; ++t) {
                const int last = causal ? t : n - 1;
                T mx = -std::numeric_limits<T>::infinity();
                for (int u = 0; u <= last; ++u) {
                    const T s = kernel::dot(b.q.row(t) + off, b.k.row(u) + off, hd) * scale;
                    scores[static_cast<std::size_t>(u)] = s;
                    mx = std::max(mx, s);
                }
                T sum{};
                for (int u = 0; u <= last; ++u) {
                    const T e = std::exp(scores[static_cast<std::size_t>(u)] - mx);
                    p(t, u) = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                T* o = b.o.row(t) + off;
                for (int u = 0; u <= last; ++u) {
                    p(t, u) *= inv;
                    kernel::axpy(p(t, u), b.v.row(u) + off, o, hd);
                }
            }
        }
        Matrix<T> attn;
        kernel::matmul(b.o, param(w.wo), static_cast<const T*>(nullptr), attn, d);
        on_site(HookFamily::attn_out, attn);
        detail::add_into(x, attn);
        if (tr != nullptr) {
            b.x_mid = x;
        }

        detail::rms_norm(x, param(w.norm2), eps, b.n2, b.inv_rms2);
        kernel::matmul(b.n2, param(w.w1), param(w.b1), b.hpre, config_.d_mlp);
        b.hact = Matrix<T>(n, config_.d_mlp);
        for (std::size_t i = 0; i < b.hpre.data.size(); ++i) {
            b.hact.data[i] = detail::gelu(b.hpre.data[i]);
        }
        Matrix<T> mlp;
        kernel::matmul(b.hact, param(w.w2), param(w.b2), mlp, d);
        on_site(HookFamily::mlp_out, mlp);
        detail::add_into(x, mlp);
        on_site(HookFamily::resid_post, x);
    }

    /// Given d(block output) in dx, accumulates weight gradients into `grad`
    /// and leaves d(block input) in dx.
    void block_backward(const BlockOffsets& w, const BlockTrace<T>& b, Matrix<T>& dx, bool causal, T* grad) const {
        const int n = dx.rows;
        const int d = config_.d_model;
        const int dm = config_.d_mlp;
        const int h_count = config_.n_heads;
        const int hd = config_.head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));

        // feed-forward branch
        kernel::accumulate_outer(b.hact, dx, grad + w.w2);
        kernel::add_rows_sum(dx, grad + w.b2);
        Matrix<T> dh(n, dm);
        for (int t = 0; t < n; ++t) {
            kernel::row_matmul_bt(dx.row(t), param(w.w2), dh.row(t), dm, d, false);
            T* r = dh.row(t);
            const T* pre = b.hpre.row(t);
            for (int i = 0; i < dm; ++i) {
                r[i] *= detail::gelu_grad(pre[i]);
            }
        }
        kernel::accumulate_outer(b.n2, dh, grad + w.w1);
        kernel::add_rows_sum(dh, grad + w.b1);
        Matrix<T> dn2(n, d);
        for (int t = 0; t < n; ++t) {
            kernel::row_matmul_bt(dh.row(t), param(w.w1), dn2.row(t), d, dm, false);
        }
        detail::rms_norm_backward(b.x_mid, param(w.norm2), b.inv_rms2, dn2, dx, grad + w.norm2);

        // attention branch; dx now holds d(x_mid) which is also d(attn)
        kernel::accumulate_outer(b.o, dx, grad + w.wo);
        Matrix<T> d_o(n, d);
        for (int t = 0; t < n; ++t) {
            kernel::row_matmul_bt(dx.row(t), param(w.wo), d_o.row(t), d, d, false);
        }
        Matrix<T> dq(n, d), dk(n, d), dv(n, d);
        std::vector<T> dp(static_cast<std::size_t>(n));
        for (int h = 0; h < h_count; ++h) {
            const Matrix<T>& p = b.probs[static_cast<std::size_t>(h)];
            const int off = h * hd;
            for (int t = 0; t < n; ++t) {
                const int last = causal ? t : n - 1;
                const T* go = d_o.row(t) + off;
                T dot_pp{};
                for (int u = 0; u <= last; ++u) {
                    const T g = kernel::dot(go, b.v.row(u) + off, hd);
                    dp[static_cast<std::size_t>(u)] = g;
                    dot_pp += p(t, u) * g;
                    kernel::axpy(p(t, u), go, dv.row(u) + off, hd);
                }
                for (int u = 0; u <= last; ++u) {
                    const T ds = p(t, u) * (dp[static_cast<std::size_t>(u)] - dot_pp) * scale;
                    if (ds != T{}) {
                        kernel::axpy(ds, b.k.row(u) + off, dq.row(t) + off, hd);
                        kernel::axpy(ds, b.q.row(t) + off, dk.row(u) + off, hd);
                    }
                }
            }
        }
        kernel::accumulate_outer(b.n1, dq, grad + w.wq);
        kernel::accumulate_outer(b.n1, dk, grad + w.wk);
        kernel::accumulate_outer(b.n1, dv, grad + w.wv);
        Matrix<T> dn1(n, d);
        for (int t = 0; t < n; ++t) {
            kernel::row_matmul_bt(dq.row(t), param(w.wq), dn1.row(t), d, d, false);
            kernel::row_matmul_bt(dk.row(t), param(w.wk), dn1.row(t), d, d, true);
            kernel::row_matmul_bt(dv.row(t), param(w.wv), dn1.row(t), d, d, true);
        }
        detail::rms_norm_backward(b.x_in, param(w.norm1), b.inv_rms1, dn1, dx, grad + w.norm1);
    }

    /// Backpropagates d(logits) at the traced logit positions into `grad`
    /// (same layout as the parameters; accumulated, not overwritten).
    void backward(std::span<const TokenId> tokens, const std::optional<GridInfo>& grid, const ForwardResult<T>& fwd,
                  const Matrix<T>& dlogits, T* grad) const {
        if (!fwd.trace) {
            throw InputError("backward needs a forward pass with record_trace");
        }
        const Trace<T>& tr = *fwd.trace;
        const int n = static_cast<int>(tokens.size());
        const int d = config_.d_model;
        const int v = config_.vocab_size;

        Matrix<T> dnf(n, d);
        for (std::size_t i = 0; i < fwd.logit_positions.size(); ++i) {
            const int t = fwd.logit_positions[i];
            const T* g = dlogits.row(static_cast<int>(i));
            kernel::axpy(T(1), g, grad + layout_.unembed_bias(), v);
            const T* nrow = tr.n_final.row(t);
            for (int k = 0; k < d; ++k) {
                if (nrow[k] != T{}) {
                    kernel::axpy(nrow[k], g, grad + layout_.unembed() + static_cast<std::size_t>(k) * static_cast<std::size_t>(v), v);
                }
            }
            kernel::row_matmul_bt(g, param(layout_.unembed()), dnf.row(t), d, v, true);
        }
        Matrix<T> dx(n, d);
        detail::rms_norm_backward(tr.x_final, param(layout_.final_norm()), tr.inv_rms_final, dnf, dx,
                                  grad + layout_.final_norm());

        for (int l = config_.n_layers - 1; l >= 0; --l) {
            block_backward(layout_.decoder()[static_cast<std::size_t>(l)], tr.decoder[static_cast<std::size_t>(l)], dx,
                           true, grad);
        }

        T* dpos = grad + layout_.pos_embed();
        T* dtok = grad + layout_.tok_embed();
        for (int t = 0; t < n; ++t) {
            kernel::axpy(T(1), dx.row(t), dpos + static_cast<std::size_t>(t) * static_cast<std::size_t>(d), d);
            const bool in_grid = grid && grid->first_position <= t && t < grid->first_position + grid->cells();
            if (!in_grid) {
                const auto id = static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]);
                kernel::axpy(T(1), dx.row(t), dtok + id * static_cast<std::size_t>(d), d);
            }
        }
        if (grid) {
            Matrix<T> de(grid->cells(), d);
            for (int c = 0; c < grid->cells(); ++c) {
                std::copy(dx.row(grid->first_position + c), dx.row(grid->first_position + c) + d, de.row(c));
            }
            for (int l = static_cast<int>(layout_.encoder().size()) - 1; l >= 0; --l) {
                block_backward(layout_.encoder()[static_cast<std::size_t>(l)], tr.encoder[static_cast<std::size_t>(l)],
                               de, false, grad);
            }
            T* drow = grad + layout_.row_embed();
            T* dcol = grad + layout_.col_embed();
            for (int c = 0; c < grid->cells(); ++c) {
                const auto id = static_cast<std::size_t>(tokens[static_cast<std::size_t>(grid->first_position + c)]);
                kernel::axpy(T(1), de.row(c), dtok + id * static_cast<std::size_t>(d), d);
                kernel::axpy(T(1), de.row(c), drow + static_cast<std::size_t>(c / grid->cols) * static_cast<std::size_t>(d), d);
                kernel::axpy(T(1), de.row(c), dcol + static_cast<std::size_t>(c % grid->cols) * static_cast<std::size_t>(d), d);
            }
        }
    }

private:
    ModelConfig config_;
    ParamLayout layout_;
    std::vector<T> params_;
};

/// Softmax over the full vocabulary; rejects non-finite logits.
template <class T>
std::vector<double> next_token_distribution(std::span<const T> logits) {
    for (const T v : logits) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError("non-finite logit");
        }
    }
    return softmax(logits);
}

template <class T>
    requires(!std::is_const_v<T>)
std::vector<double> next_token_distribution(std::span<T> logits) {
    return next_token_distribution(std::span<const T>(logits));
}

/// Full-vocabulary softmax restricted to the digit tokens 1..9.
struct DigitDistribution {
    std::array<double, 9> raw{};          ///< P(digit) under the full softmax
    std::array<double, 9> renormalized{}; ///< raw / sum(raw)
    double raw_mass = 0.0;

    int argmax() const noexcept {
        int best = 0;
        for (int i = 1; i < 9; ++i) {
            if (renormalized[static_cast<std::size_t>(i)] > renormalized[static_cast<std::size_t>(best)]) {
                best = i;
            }
        }
        return best + 1;
    }
    double raw_at(int n) const { return (n >= 1 && n <= 9) ? raw[static_cast<std::size_t>(n - 1)] : 0.0; }
    double renormalized_at(int n) const {
        return (n >= 1 && n <= 9) ? renormalized[static_cast<std::size_t>(n - 1)] : 0.0;
    }
};

template <class T>
DigitDistribution digit_distribution(std::span<const T> logits) {
    const auto probs = next_token_distribution(logits);
    const auto& vocab = Vocabulary::standard();
    DigitDistribution out;
    // Renormalize from the digit logits directly so a dominant digit still
    // gets mass 1 when the raw probabilities underflow.
    std::array<double, 9> digit_logits{};
    double mx = -INFINITY;
    for (int n = 1; n <= 9; ++n) {
        const auto id = static_cast<std::size_t>(vocab.digit(n));
        out.raw[static_cast<std::size_t>(n - 1)] = probs[id];
        out.raw_mass += probs[id];
        digit_logits[static_cast<std::size_t>(n - 1)] = static_cast<double>(logits[id]);
        mx = std::max(mx, digit_logits[static_cast<std::size_t>(n - 1)]);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
        out.renormalized[i] = std::exp(digit_logits[i] - mx);
        sum += out.renormalized[i];
    }
    for (double& p : out.renormalized) {
        p /= sum;
    }
    return out;
}

template <class T>
    requires(!std::is_const_v<T>)
DigitDistribution digit_distribution(std::span<T> logits) {
    return digit_distribution(std::span<const T>(logits));
}

} // namespace countlab
