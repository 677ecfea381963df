#include "card/corpus.hpp"
#include "card/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

using namespace card;

namespace {

std::string serialize(const Corpus& c) {
    std::ostringstream users, vocab;
    write_corpus_jsonl(c, users);
    write_vocab_json(c.vocab, vocab);
    return users.str() + vocab.str();
}

HistoryRecord rec(int index, TokenSeq in, TokenSeq out) {
    HistoryRecord r;
    r.index = index;
    r.raw_input = std::move(in);
    r.output = std::move(out);
    return r;
}

std::map<TokenId, double> token_distribution(const UserProfile& u) {
    std::map<TokenId, double> p;
    double n = 0.0;
    for (const auto& r : u.history) {
        for (TokenId t : r.output) {
            p[t] += 1.0;
            n += 1.0;
        }
    }
    for (auto& [t, v] : p) {
        v /= n;
    }
    return p;
}

double jensen_shannon(const std::map<TokenId, double>& p, const std::map<TokenId, double>& q) {
    std::map<TokenId, double> m;
    for (const auto& [t, v] : p) {
        m[t] += 0.5 * v;
    }
    for (const auto& [t, v] : q) {
        m[t] += 0.5 * v;
    }
    auto kl = [&](const std::map<TokenId, double>& a) {
        double s = 0.0;
        for (const auto& [t, v] : a) {
            s += v * std::log(v / m.at(t));
        }
        return s;
    };
    return 0.5 * kl(p) + 0.5 * kl(q);
}

}  // namespace

TEST_CASE("synth_corpus with minimal counts yields one user with one record") {
    const Corpus a = synth_corpus(1, 1, 1, 7);
    const Corpus b = synth_corpus(1, 1, 1, 7);
    REQUIRE(a.users.size() == 1);
    CHECK(a.users[0].history.size() + a.users[0].held_out.size() == 1);
    CHECK(a.users[0].history.size() == 1);
    CHECK(serialize(a) == serialize(b));
}

TEST_CASE("synth_corpus is byte-identical for equal seeds and differs across seeds") {
    const Corpus a = synth_corpus(4, 8, 20, 1);
    const Corpus b = synth_corpus(4, 8, 20, 1);
    const Corpus c = synth_corpus(4, 8, 20, 2);
    CHECK(a.users.size() == 32);
    CHECK(serialize(a) == serialize(b));
    CHECK(serialize(a) != serialize(c));
}

TEST_CASE("synth_corpus rejects zero counts") {
    CHECK_THROWS_AS(synth_corpus(0, 1, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(synth_corpus(1, 0, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(synth_corpus(1, 1, 0, 1), InvalidArgument);
}

TEST_CASE("users of one archetype share its marker tokens") {
    const Corpus c = synth_corpus(2, 2, 5, 3);
    REQUIRE(c.users.size() == 4);
    for (const auto& u : c.users) {
        const auto& markers = c.archetypes.at(static_cast<std::size_t>(u.archetype_id)).marker_tokens;
        int with_marker = 0;
        int total = 0;
        for (const auto& r : u.history) {
            ++total;
            with_marker += std::any_of(r.output.begin(), r.output.end(), [&](TokenId t) {
                return std::find(markers.begin(), markers.end(), t) != markers.end();
            });
        }
        CHECK(with_marker * 2 > total);
    }
    CHECK(c.users[0].archetype_id == 0);
    CHECK(c.users[1].archetype_id == 0);
    CHECK(c.users[2].archetype_id == 1);
    CHECK(c.users[3].archetype_id == 1);
    CHECK(c.archetypes[0].marker_tokens != c.archetypes[1].marker_tokens);
}

TEST_CASE("records satisfy the type invariants") {
    const Corpus c = synth_corpus(4, 8, 20, 1);
    std::vector<std::string> ids;
    for (const auto& u : c.users) {
        ids.push_back(u.user_id);
        CHECK_FALSE(u.history.empty());
        int last = 0;
        for (const auto* part : {&u.history, &u.held_out}) {
            for (const auto& r : *part) {
                CHECK_FALSE(r.output.empty());
                CHECK(r.index > last);
                last = r.index;
                for (TokenId t : r.output) {
                    CHECK(c.vocab.contains(t));
                }
            }
        }
        // 25% of 20 records are held out
        CHECK(u.held_out.size() == 5);
    }
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    for (const auto& a : c.archetypes) {
        CHECK(a.avg_len >= 2.0);
        CHECK_FALSE(a.marker_tokens.empty());
    }
}

TEST_CASE("outputs restyle the content tokens of the input") {
    const Corpus c = synth_corpus(4, 2, 10, 5);
    for (const auto& u : c.users) {
        for (const auto& r : u.history) {
            TokenSeq content;
            for (TokenId t : r.output) {
                if (t >= c.vocab.content_begin() && t < c.vocab.content_end()) {
                    content.push_back(t);
                }
            }
            // content tokens appear in input order, as a prefix of the input
            REQUIRE(content.size() <= r.raw_input.size());
            CHECK(std::equal(content.begin(), content.end(), r.raw_input.begin()));
        }
    }
}

TEST_CASE("planted structure: within-archetype token distributions are closer than across") {
    const Corpus c = synth_corpus(4, 8, 20, 11);
    std::vector<std::map<TokenId, double>> dist;
    for (const auto& u : c.users) {
        dist.push_back(token_distribution(u));
    }
    for (int a = 0; a < 4; ++a) {
        for (int b = a + 1; b < 4; ++b) {
            double within = 0.0, across = 0.0;
            int nw = 0, na = 0;
            for (std::size_t i = 0; i < c.users.size(); ++i) {
                for (std::size_t j = i + 1; j < c.users.size(); ++j) {
                    const int ai = c.users[i].archetype_id;
                    const int aj = c.users[j].archetype_id;
                    if (ai == aj && (ai == a || ai == b)) {
                        within += jensen_shannon(dist[i], dist[j]);
                        ++nw;
                    } else if ((ai == a && aj == b) || (ai == b && aj == a)) {
                        across += jensen_shannon(dist[i], dist[j]);
                        ++na;
                    }
                }
            }
            CHECK(within / nw < across / na);
        }
    }
}

TEST_CASE("shared-marker populations may exceed the style vocabulary") {
    CorpusOptions o;
    o.n_archetypes = 200;
    o.users_per_archetype = 1;
    o.records_per_user = 3;
    CHECK_THROWS_AS(synth_corpus(o), InvalidArgument);
    o.distinct_markers = false;
    const Corpus c = synth_corpus(o);
    CHECK(c.users.size() == 200);
    for (const auto& a : c.archetypes) {
        REQUIRE(a.marker_tokens.size() == 2);
        CHECK(a.marker_tokens[0] != a.marker_tokens[1]);
    }
}

TEST_CASE("build_prompt with empty history is BOS, SEP, query") {
    const TokenSeq q = {10, 11, 12};
    const Prompt p = build_prompt(q, {}, 4, 64, "u0");
    CHECK(p.tokens == TokenSeq{special::BOS, special::SEP, 10, 11, 12});
    CHECK(p.n_history_used == 0);
    CHECK(p.user_id == "u0");
    const std::vector<HistoryRecord> h = {rec(1, {20}, {21})};
    CHECK(build_prompt(q, h, 0, 64).tokens == p.tokens);
    CHECK_THROWS_AS(build_prompt({}, h, 4, 64), InvalidArgument);
}

TEST_CASE("build_prompt keeps the most recent max_history records in temporal order") {
    std::vector<HistoryRecord> h;
    for (int i = 5; i >= 1; --i) {
        h.push_back(rec(i, {static_cast<TokenId>(10 + i)}, {static_cast<TokenId>(30 + i)}));
    }
    const Prompt p = build_prompt({50}, h, 4, 200);
    CHECK(p.n_history_used == 4);
    TokenSeq expected = {special::BOS};
    for (int i = 2; i <= 5; ++i) {
        const auto s = serialize_record(rec(i, {static_cast<TokenId>(10 + i)}, {static_cast<TokenId>(30 + i)}));
        expected.insert(expected.end(), s.begin(), s.end());
    }
    expected.push_back(special::SEP);
    expected.push_back(50);
    CHECK(p.tokens == expected);
}

TEST_CASE("build_prompt truncates oldest history first and never the query") {
    std::vector<HistoryRecord> h;
    for (int i = 1; i <= 3; ++i) {
        h.push_back(rec(i, {10, 11, 12}, {20, 21, 22}));  // 8 tokens serialized
    }
    const TokenSeq q = {40, 41};
    // budget for history = 20 - 4 = 16 -> the two newest records
    Prompt p = build_prompt(q, h, 4, 20);
    CHECK(p.n_history_used == 2);
    CHECK(p.tokens.size() == 20);
    // budget 5 -> the newest record, cut to 5 tokens
    p = build_prompt(q, h, 4, 9);
    CHECK(p.n_history_used == 1);
    CHECK(p.tokens.size() == 9);
    CHECK(query_block(p) == q);
    CHECK_THROWS_AS(build_prompt(TokenSeq(30, 7), h, 4, 20), PromptOverflow);
}

TEST_CASE("property: the query block round-trips through build_prompt") {
    const Corpus c = synth_corpus(3, 3, 12, 9);
    for (const auto& u : c.users) {
        for (const auto& r : u.held_out) {
            for (int max_len : {200, 40, 15}) {
                const Prompt p = build_prompt(r.raw_input, u.history, 4, max_len);
                CHECK(query_block(p) == r.raw_input);
                CHECK(static_cast<int>(p.tokens.size()) <= max_len);
                CHECK(std::count(p.tokens.begin(), p.tokens.end(), special::SEP) == 1);
            }
        }
    }
}

TEST_CASE("mask_history keeps the first L records by index") {
    std::vector<HistoryRecord> h;
    for (int i = 20; i >= 1; --i) {
        h.push_back(rec(i, {10}, {11}));
    }
    CHECK(mask_history(h, 0).empty());
    CHECK(mask_history(h, 25).size() == 20);
    const auto five = mask_history(h, 5);
    REQUIRE(five.size() == 5);
    for (int i = 0; i < 5; ++i) {
        CHECK(five[static_cast<std::size_t>(i)].index == i + 1);
    }
    CHECK_THROWS_AS(mask_history(h, -1), InvalidArgument);
}

TEST_CASE("corpus JSON Lines round-trip") {
    const Corpus c = synth_corpus(2, 3, 6, 4);
    std::ostringstream users, vocab;
    write_corpus_jsonl(c, users);
    write_vocab_json(c.vocab, vocab);
    std::istringstream ui(users.str()), vi(vocab.str());
    const Corpus r = read_corpus(ui, vi);
    CHECK(serialize(r) == serialize(c));
    CHECK(r.vocab.size() == 256);
}
