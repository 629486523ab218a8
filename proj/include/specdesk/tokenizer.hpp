#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace specdesk::datasets {

// label value marking prompt and padding positions; never a real token id
constexpr int32_t kIgnoreLabel = -1;

// Character-level by default (fixed printable charset), word-level on demand.
// ids 0 and 1 are reserved for pad and eos in both modes.
class Tokenizer {
  public:
    enum class Mode { chars, words };

    static Tokenizer char_default();
    static Tokenizer words(const std::vector<std::string>& vocabulary);

    Mode mode() const { return mode_; }
    int vocab_size() const { return static_cast<int>(symbols_.size()); }
    int32_t pad_id() const { return 0; }
    int32_t eos_id() const { return 1; }
    static constexpr int32_t ignore_label() { return kIgnoreLabel; }

    bool contains(const std::string& symbol) const { return ids_.count(symbol) > 0; }

    // throws naming the offending symbol when out of vocabulary
    std::vector<int32_t> encode(const std::string& text) const;
    // inverse of encode on in-vocabulary text; pad and eos are dropped
    std::string decode(const std::vector<int32_t>& ids) const;
    // single-token rendering for dumps ("<pad>", "<eos>", or the symbol)
    std::string token_text(int32_t id) const;

  private:
    Tokenizer(Mode mode, std::vector<std::string> symbols);

    Mode mode_;
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int32_t> ids_;
};

}  // namespace specdesk::datasets
