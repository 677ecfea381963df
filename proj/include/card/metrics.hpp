#pragma once

#include "card/tokens.hpp"

#include <algorithm>
#include <cstddef>
#include <map>
#include <utility>
#include <vector>

namespace card {

enum class RougeVariant { rouge1, rougeL };

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    RougeVariant variant = RougeVariant::rouge1;
};

namespace detail {

inline RougeScore make_score(std::size_t hits, std::size_t n_cand, std::size_t n_ref, RougeVariant v) {
    RougeScore s;
    s.variant = v;
    if (n_cand == 0 || n_ref == 0 || hits == 0) {
        return s;
    }
    s.precision = static_cast<double>(hits) / static_cast<double>(n_cand);
    s.recall = static_cast<double>(hits) / static_cast<double>(n_ref);
    s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

}  // namespace detail

/// Length of the longest common subsequence (O(|a|·|b|) dynamic program, O(|b|) memory).
template <class T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// Unigram overlap with clipped counts. An empty candidate scores zero.
template <class T>
RougeScore rouge1(const std::vector<T>& candidate, const std::vector<T>& reference) {
    std::map<T, std::size_t> ref_counts;
    for (const auto& t : reference) {
        ++ref_counts[t];
    }
    std::size_t hits = 0;
    for (const auto& t : candidate) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++hits;
        }
    }
    return detail::make_score(hits, candidate.size(), reference.size(), RougeVariant::rouge1);
}

template <class T>
RougeScore rougeL(const std::vector<T>& candidate, const std::vector<T>& reference) {
    return detail::make_score(lcs_length(candidate, reference), candidate.size(), reference.size(),
                              RougeVariant::rougeL);
}

struct Bm25Options {
    double k1 = 1.2;
    double b = 0.75;
};

struct RankedDoc {
    std::size_t index = 0;
    double score = 0.0;
};

/// Okapi BM25 over `docs` as the whole corpus, with
/// idf(t) = ln((N - n_t + 0.5) / (n_t + 0.5) + 1). Sorted by descending score,
/// ties by document index. Throws InvalidArgument on an empty corpus.
std::vector<RankedDoc> bm25_rank(const TokenSeq& query, const std::vector<TokenSeq>& docs,
                                 const Bm25Options& opts = {});

}  // namespace card
