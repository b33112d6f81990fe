#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcc {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not satisfy an operation's contract.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid hyperparameter or argument value.
struct ParamError : Error {
    using Error::Error;
};

// Input exceeds a declared sequence/positional capacity.
struct CapacityError : Error {
    using Error::Error;
};

// Loss requested over an all-masked-out target set.
struct EmptyLossError : Error {
    using Error::Error;
};

// Non-finite value where a finite one is required.
struct NumericError : Error {
    using Error::Error;
};

// Malformed configuration document.
struct ConfigError : Error {
    using Error::Error;
};

// File I/O or format failure.
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// FNV-1a over a token sequence, used in training diagnostics.
inline std::uint64_t hash_tokens(const TokenSeq& toks) {
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : toks) {
        h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace rcc
