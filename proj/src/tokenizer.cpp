#include <specdesk/tokenizer.hpp>

#include <sstream>
#include <stdexcept>

namespace specdesk::datasets {

namespace {
// digits, lowercase letters, punctuation for the arithmetic/template tasks,
// and space; 57 symbols total with the two specials
const char* kCharset = "0123456789abcdefghijklmnopqrstuvwxyz+-*/=;:.,!?()<>|' ";
}  // namespace

Tokenizer::Tokenizer(Mode mode, std::vector<std::string> symbols) : mode_(mode), symbols_(std::move(symbols)) {
    for (size_t i = 0; i < symbols_.size(); ++i) {
        ids_.emplace(symbols_[i], static_cast<int32_t>(i));
    }
    if (ids_.size() != symbols_.size()) {
        throw std::invalid_argument("tokenizer: duplicate symbols in vocabulary");
    }
}

Tokenizer Tokenizer::char_default() {
    std::vector<std::string> symbols{"<pad>", "<eos>"};
    for (const char* p = kCharset; *p; ++p) {
        symbols.emplace_back(1, *p);
    }
    return Tokenizer(Mode::chars, std::move(symbols));
}

Tokenizer Tokenizer::words(const std::vector<std::string>& vocabulary) {
    std::vector<std::string> symbols{"<pad>", "<eos>"};
    symbols.insert(symbols.end(), vocabulary.begin(), vocabulary.end());
    return Tokenizer(Mode::words, std::move(symbols));
}

std::vector<int32_t> Tokenizer::encode(const std::string& text) const {
    std::vector<int32_t> out;
    if (mode_ == Mode::chars) {
        out.reserve(text.size());
        for (char c : text) {
            auto it = ids_.find(std::string(1, c));
            if (it == ids_.end()) {
                throw std::invalid_argument(std::string("tokenizer: symbol '") + c + "' not in vocabulary");
            }
            out.push_back(it->second);
        }
    } else {
        std::istringstream in(text);
        std::string word;
        while (in >> word) {
            auto it = ids_.find(word);
            if (it == ids_.end()) {
                throw std::invalid_argument("tokenizer: word '" + word + "' not in vocabulary");
            }
            out.push_back(it->second);
        }
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int32_t>& ids) const {
    std::string out;
    bool first = true;
    for (int32_t id : ids) {
        if (id == pad_id() || id == eos_id()) {
            continue;
        }
        if (id < 0 || id >= vocab_size()) {
            throw std::invalid_argument("tokenizer: id " + std::to_string(id) + " outside vocabulary");
        }
        if (mode_ == Mode::words && !first) {
            out += ' ';
        }
        out += symbols_[id];
        first = false;
    }
    return out;
}

std::string Tokenizer::token_text(int32_t id) const {
    if (id < 0 || id >= vocab_size()) {
        throw std::invalid_argument("tokenizer: id " + std::to_string(id) + " outside vocabulary");
    }
    return symbols_[id];
}

}  // namespace specdesk::datasets
