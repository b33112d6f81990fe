#pragma once

#include <array>
#include <string>
#include <unordered_map>

#include "rcc/common.hpp"

namespace rcc {

enum class TokenizerMode { byte, char_vocab };

// Byte-level (total and lossless) or small fixed-alphabet tokenizer.
// Content ids come first; pad/eot (and unk for char_vocab) never collide
// with them.
class Tokenizer {
 public:
    static Tokenizer byte_level() {
        Tokenizer t;
        t.mode_ = TokenizerMode::byte;
        t.content_size_ = 256;
        t.pad_ = 256;
        t.eot_ = 257;
        t.unk_ = -1;
        return t;
    }

    static Tokenizer char_vocab(const std::string& alphabet) {
        if (alphabet.empty()) throw ParamError("char_vocab: empty alphabet");
        Tokenizer t;
        t.mode_ = TokenizerMode::char_vocab;
        t.content_size_ = static_cast<int>(alphabet.size());
        for (int i = 0; i < t.content_size_; ++i) {
            const char c = alphabet[static_cast<std::size_t>(i)];
            if (t.char_to_id_.count(c))
                throw ParamError("char_vocab: duplicate character in alphabet");
            t.char_to_id_[c] = i;
            t.id_to_char_.push_back(c);
        }
        t.pad_ = t.content_size_;
        t.eot_ = t.content_size_ + 1;
        t.unk_ = t.content_size_ + 2;
        return t;
    }

    TokenizerMode mode() const { return mode_; }
    int vocab_size() const {
        return mode_ == TokenizerMode::byte ? content_size_ + 2 : content_size_ + 3;
    }
    int content_size() const { return content_size_; }
    TokenId pad_id() const { return pad_; }
    TokenId eot_id() const { return eot_; }
    TokenId unk_id() const { return unk_; }

    TokenSeq encode(const std::string& text) const {
        TokenSeq out;
        out.reserve(text.size());
        for (char ch : text) {
            if (mode_ == TokenizerMode::byte) {
                out.push_back(static_cast<TokenId>(static_cast<unsigned char>(ch)));
            } else {
                auto it = char_to_id_.find(ch);
                out.push_back(it == char_to_id_.end() ? unk_ : it->second);
            }
        }
        return out;
    }

    std::string decode(const TokenSeq& tokens) const {
        std::string out;
        out.reserve(tokens.size());
        for (TokenId t : tokens) {
            if (t == pad_ || t == eot_ || t == unk_) continue;
            if (mode_ == TokenizerMode::byte) {
                if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
            } else {
                if (t >= 0 && t < content_size_)
                    out.push_back(id_to_char_[static_cast<std::size_t>(t)]);
            }
        }
        return out;
    }

 private:
    TokenizerMode mode_ = TokenizerMode::byte;
    int content_size_ = 256;
    TokenId pad_ = 256, eot_ = 257, unk_ = -1;
    std::unordered_map<char, TokenId> char_to_id_;
    std::string id_to_char_;
};

}  // namespace rcc
