#pragma once

#include <vector>

#include "rcc/rng.hpp"
#include "rcc/tensor.hpp"

namespace rcc::testutil {

template <class T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, T stddev = T(1),
                        bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    t.fill_normal(rng, stddev);
    return t;
}

inline TokenSeq random_tokens(int n, int vocab, Rng& rng) {
    TokenSeq out(static_cast<std::size_t>(n));
    for (auto& t : out)
        t = static_cast<TokenId>(rng.uniform_u64(static_cast<std::uint64_t>(vocab)));
    return out;
}

}  // namespace rcc::testutil
