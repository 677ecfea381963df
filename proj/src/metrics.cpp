#include "card/metrics.hpp"

#include "card/errors.hpp"

#include <cmath>
#include <set>

namespace card {

std::vector<RankedDoc> bm25_rank(const TokenSeq& query, const std::vector<TokenSeq>& docs, const Bm25Options& opts) {
    if (docs.empty()) {
        throw InvalidArgument("bm25_rank: empty document set");
    }
    const auto N = static_cast<double>(docs.size());
    double avgdl = 0.0;
    for (const auto& d : docs) {
        avgdl += static_cast<double>(d.size());
    }
    avgdl /= N;

    // Repeated query terms count once per occurrence, as in the usual sum over query tokens.
    std::map<TokenId, double> idf;
    for (TokenId t : std::set<TokenId>(query.begin(), query.end())) {
        double n_t = 0.0;
        for (const auto& d : docs) {
            n_t += std::find(d.begin(), d.end(), t) != d.end() ? 1.0 : 0.0;
        }
        idf[t] = std::log((N - n_t + 0.5) / (n_t + 0.5) + 1.0);
    }

    std::vector<RankedDoc> out(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) {
        out[i].index = i;
        std::map<TokenId, double> tf;
        for (TokenId t : docs[i]) {
            ++tf[t];
        }
        const double len_norm = avgdl > 0.0 ? static_cast<double>(docs[i].size()) / avgdl : 0.0;
        double s = 0.0;
        for (TokenId t : query) {
            auto it = tf.find(t);
            if (it == tf.end()) {
                continue;
            }
            const double f = it->second;
            s += idf[t] * f * (opts.k1 + 1.0) / (f + opts.k1 * (1.0 - opts.b + opts.b * len_norm));
        }
        out[i].score = s;
    }
    std::stable_sort(out.begin(), out.end(), [](const RankedDoc& a, const RankedDoc& b) { return a.score > b.score; });
    return out;
}

}  // namespace card
