#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "countlab/error.hpp"

namespace countlab {

using TokenId = std::int32_t;

inline constexpr std::array<std::string_view, 9> kFruits{
    "apple", "orange", "peach", "fig", "mango", "pear", "coconut", "cherry", "plum"};
inline constexpr std::array<std::string_view, 9> kFruitPlurals{
    "apples", "oranges", "peaches", "figs", "mangoes", "pears", "coconuts", "cherries", "plums"};
inline constexpr std::array<std::string_view, 9> kShapes{
    "circle", "triangle", "square", "pentagon", "hexagon", "star", "diamond", "cross", "heart"};
inline constexpr std::array<std::string_view, 9> kShapePlurals{
    "circles", "triangles", "squares", "pentagons", "hexagons", "stars", "diamonds", "crosses", "hearts"};
inline constexpr std::array<std::string_view, 8> kColors{
    "blue", "green", "red", "yellow", "orange", "brown", "purple", "cyan"};
inline constexpr std::array<std::string_view, 3> kAltSeparators{";", "|", "and"};

inline constexpr int kNumItemTypes = static_cast<int>(kFruits.size());
inline constexpr int kNumShapes = static_cast<int>(kShapes.size());
inline constexpr int kNumColors = static_cast<int>(kColors.size());
inline constexpr int kMaxCount = 9;

/// Closed word-level vocabulary shared by every generator, model and probe.
class Vocabulary {
public:
    static const Vocabulary& standard() {
        static const Vocabulary vocab;
        return vocab;
    }

    int size() const noexcept { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    const std::string& token(TokenId id) const {
        if (id < 0 || id >= size()) {
            throw InputError("token id " + std::to_string(id) + " out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    bool contains(std::string_view text) const { return index_.contains(std::string(text)); }

    TokenId id(std::string_view text) const {
        const auto it = index_.find(std::string(text));
        if (it == index_.end()) {
            throw InputError("unknown token '" + std::string(text) + "'");
        }
        return it->second;
    }

    /// digit_ids()[n - 1] is the token for the digit n.
    const std::array<TokenId, 9>& digit_ids() const noexcept { return digit_ids_; }
    TokenId digit(int n) const {
        if (n < 1 || n > kMaxCount) {
            throw InputError("no digit token for " + std::to_string(n));
        }
        return digit_ids_[static_cast<std::size_t>(n - 1)];
    }
    /// 1..9 for digit tokens, 0 otherwise.
    int digit_value(TokenId id) const noexcept {
        for (std::size_t i = 0; i < digit_ids_.size(); ++i) {
            if (digit_ids_[i] == id) {
                return static_cast<int>(i) + 1;
            }
        }
        return 0;
    }

    TokenId separator_id() const noexcept { return separator_id_; }
    TokenId placeholder_id() const noexcept { return placeholder_id_; }
    TokenId pad_id() const noexcept { return pad_id_; }
    TokenId bos_id() const noexcept { return bos_id_; }
    TokenId eos_id() const noexcept { return eos_id_; }
    TokenId background_id() const noexcept { return background_id_; }

    TokenId item_id(int type) const { return id(kFruits.at(static_cast<std::size_t>(type))); }
    int item_type(TokenId id) const noexcept {
        for (int t = 0; t < kNumItemTypes; ++t) {
            if (item_ids_[static_cast<std::size_t>(t)] == id) {
                return t;
            }
        }
        return -1;
    }

    /// Visual cell symbols: background plus one token per (shape, color).
    const std::vector<TokenId>& patch_ids() const noexcept { return patch_ids_; }
    TokenId object_id(int shape, int color) const {
        if (shape < 0 || shape >= kNumShapes || color < 0 || color >= kNumColors) {
            throw InputError("shape/color out of range");
        }
        return patch_ids_[static_cast<std::size_t>(1 + shape * kNumColors + color)];
    }
    static std::string object_token(int shape, int color) {
        return "<" + std::string(kShapes[static_cast<std::size_t>(shape)]) + ":" +
               std::string(kColors[static_cast<std::size_t>(color)]) + ">";
    }

    bool is_separator(TokenId id) const noexcept {
        return id == separator_id_ || id == alt_separator_ids_[0] || id == alt_separator_ids_[1] ||
               id == alt_separator_ids_[2];
    }

    /// Tokens rendered without a leading space.
    static bool attaches_left(std::string_view text) {
        return text == "," || text == ";" || text == ":" || text == "?" || text == ".";
    }

private:
    Vocabulary() {
        auto add = [this](std::string_view text) -> TokenId {
            const std::string s(text);
            if (const auto it = index_.find(s); it != index_.end()) {
                return it->second;
            }
            const auto id = static_cast<TokenId>(tokens_.size());
            tokens_.push_back(s);
            index_.emplace(s, id);
            return id;
        };
        pad_id_ = add("<pad>");
        bos_id_ = add("<bos>");
        eos_id_ = add("<eos>");
        placeholder_id_ = add("<ph>");
        for (int n = 1; n <= kMaxCount; ++n) {
            digit_ids_[static_cast<std::size_t>(n - 1)] = add(std::to_string(n));
        }
        separator_id_ = add(",");
        for (std::size_t i = 0; i < kAltSeparators.size(); ++i) {
            alt_separator_ids_[i] = add(kAltSeparators[i]);
        }
        for (const auto* w : {":", "?", ".", "Question", "How", "many", "items", "are", "there", "in",
                              "the", "following", "above", "sentence", "objects", "image", "Answer",
                              "Task", "count"}) {
            add(w);
        }
        for (std::size_t t = 0; t < kFruits.size(); ++t) {
            item_ids_[t] = add(kFruits[t]);
        }
        for (const auto w : kFruitPlurals) {
            add(w);
        }
        for (const auto w : kColors) {
            add(w);
        }
        for (const auto w : kShapePlurals) {
            add(w);
        }
        background_id_ = add("<bg>");
        patch_ids_.push_back(background_id_);
        for (int s = 0; s < kNumShapes; ++s) {
            for (int c = 0; c < kNumColors; ++c) {
                patch_ids_.push_back(add(object_token(s, c)));
            }
        }
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    std::array<TokenId, 9> digit_ids_{};
    std::array<TokenId, 3> alt_separator_ids_{};
    std::array<TokenId, 9> item_ids_{};
    std::vector<TokenId> patch_ids_;
    TokenId separator_id_ = 0;
    TokenId placeholder_id_ = 0;
    TokenId pad_id_ = 0;
    TokenId bos_id_ = 0;
    TokenId eos_id_ = 0;
    TokenId background_id_ = 0;
};

} // namespace countlab
