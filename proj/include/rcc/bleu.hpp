#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "rcc/common.hpp"

namespace rcc {

// BLEU-4: geometric mean of modified n-gram precisions (n = 1..4) with the
// brevity penalty exp(1 - ref/cand) when the candidate is shorter. A zero
// match count for n >= 2 is smoothed add-one on numerator and denominator.
inline double bleu4(const TokenSeq& candidate, const TokenSeq& reference) {
    if (candidate.empty()) return 0.0;
    double log_score = 0.0;
    for (int n = 1; n <= 4; ++n) {
        std::map<std::vector<TokenId>, int> ref_counts;
        const int ref_total = static_cast<int>(reference.size()) - n + 1;
        for (int i = 0; i < ref_total; ++i)
            ++ref_counts[std::vector<TokenId>(reference.begin() + i,
                                              reference.begin() + i + n)];
        std::map<std::vector<TokenId>, int> cand_counts;
        const int total = std::max(0, static_cast<int>(candidate.size()) - n + 1);
        for (int i = 0; i < total; ++i)
            ++cand_counts[std::vector<TokenId>(candidate.begin() + i,
                                               candidate.begin() + i + n)];
        std::int64_t matched = 0;
        for (const auto& [gram, count] : cand_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) matched += std::min(count, it->second);
        }
        double p;
        if (matched == 0) {
            if (n == 1) return 0.0;
            p = 1.0 / (static_cast<double>(total) + 1.0);  // add-one smoothing
        } else {
            p = static_cast<double>(matched) / static_cast<double>(total);
        }
        log_score += 0.25 * std::log(p);
    }
    double bp = 1.0;
    if (candidate.size() < reference.size())
        bp = std::exp(1.0 - static_cast<double>(reference.size()) /
                                static_cast<double>(candidate.size()));
    return bp * std::exp(log_score);
}

}  // namespace rcc
