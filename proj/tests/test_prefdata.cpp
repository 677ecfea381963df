#include "card/errors.hpp"
#include "card/metrics.hpp"
#include "card/prefdata.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace card;

namespace {

// Pass-through layers, identity embeddings and a head that scores the current
// token at 2 and its successor at 1.9, so an unpenalized greedy decode loops.
Backbone looping_model() {
    BackboneConfig c;
    c.vocab_size = 16;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.ffn_dim = 8;
    c.max_seq = 64;
    Backbone m(c);
    BackboneWeights& w = m.weights();
    for (auto& layer : w.layers) {
        for (Mat* p : {&layer.attn_norm, &layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.mlp_norm, &layer.w_gate,
                       &layer.w_up, &layer.w_down}) {
            p->setZero();
        }
    }
    w.tok_emb = Mat::Identity(16, 16);
    w.final_norm.setOnes();
    w.head.setZero();
    const double s = 1.0 / std::sqrt(16.0);
    for (int a = special::COUNT; a < 16; ++a) {
        w.head(a, a) = 2.0 * s;
        if (a + 1 < 16) {
            w.head(a + 1, a) = 1.9 * s;
        }
    }
    return m;
}

int immediate_repeats(const TokenSeq& t) {
    int n = 0;
    for (std::size_t i = 1; i < t.size(); ++i) {
        n += t[i] == t[i - 1];
    }
    return n;
}

Prompt prompt_of(TokenSeq t) {
    Prompt p;
    p.tokens = std::move(t);
    return p;
}

std::map<std::string, int> single_cluster(const std::vector<const UserProfile*>& users) {
    std::map<std::string, int> out;
    for (const auto* u : users) {
        out[u->user_id] = 0;
    }
    return out;
}

// Emits the outputs of `users` in build order.
BaselineGenerator replay_outputs(const std::vector<const UserProfile*>& users) {
    auto outputs = std::make_shared<std::vector<TokenSeq>>();
    for (const auto* u : users) {
        for (const auto& r : u->history) {
            outputs->push_back(r.output);
        }
    }
    auto next = std::make_shared<std::size_t>(0);
    return [outputs, next](const Prompt&, int) { return (*outputs)[(*next)++]; };
}

}  // namespace

TEST_CASE("repetition penalty breaks a greedy loop") {
    const Backbone m = looping_model();
    const Prompt p = prompt_of({special::BOS, 6});
    const TokenSeq plain = gen_cluster_baseline(p, m, nullptr, 8, 1.0);
    const TokenSeq penalized = gen_cluster_baseline(p, m, nullptr, 8, 1.1);
    REQUIRE(plain.size() == 8);
    CHECK(immediate_repeats(plain) == 7);
    CHECK(immediate_repeats(penalized) < immediate_repeats(plain));
    CHECK(penalized == TokenSeq{6, 7, 8, 9, 10, 11, 12, 13});
}

TEST_CASE("baseline generation is deterministic and honours a zero budget") {
    const Backbone m = looping_model();
    const Prompt p = prompt_of({special::BOS, 9, 3, 7});
    CHECK(gen_cluster_baseline(p, m, nullptr, 0).empty());
    CHECK(gen_cluster_baseline(p, m, nullptr, 12) == gen_cluster_baseline(p, m, nullptr, 12));
}

TEST_CASE("a generator that reproduces every output yields no pairs") {
    const Corpus c = synth_corpus(2, 2, 5, 3);
    const auto users = c.users_in(Split::train);
    const PairSet s = build_pairs(users, single_cluster(users), replay_outputs(users), PairOptions{});
    int n = 0;
    for (const auto* u : users) {
        n += static_cast<int>(u->history.size());
    }
    CHECK(s.pairs.empty());
    CHECK(s.stats.candidates == n);
    CHECK(s.stats.dropped == n);
    CHECK(s.stats.mean_overlap == 0.0);
}

TEST_CASE("one user with one record gives one pair echoing its inputs") {
    UserProfile u;
    u.user_id = "solo";
    HistoryRecord r;
    r.raw_input = {10, 11, 12};
    r.output = {20, 21};
    r.index = 0;
    u.history = {r};
    const std::vector<const UserProfile*> users = {&u};
    const TokenSeq negative = {20, 22};
    const PairSet s = build_pairs(users, {{"solo", 3}}, [&](const Prompt&, int) { return negative; }, PairOptions{});
    REQUIRE(s.pairs.size() == 1);
    const PreferencePair& p = s.pairs[0];
    CHECK(p.user_id == "solo");
    CHECK(p.cluster == 3);
    CHECK(p.record_index == 0);
    CHECK(p.positive == r.output);
    CHECK(p.negative == negative);
    CHECK(query_block(p.prompt) == r.raw_input);
    CHECK(p.negative_prompt_hash == prompt_hash(p.prompt.tokens));
    CHECK(s.stats.mean_overlap == doctest::Approx(0.5));
    CHECK_THROWS_AS(build_pairs(users, {}, [&](const Prompt&, int) { return negative; }, PairOptions{}), ConfigError);
}

TEST_CASE("negatives come from exactly the pair's prompt") {
    const Corpus c = synth_corpus(2, 2, 6, 5);
    const auto users = c.users_in(Split::train);
    std::vector<std::uint64_t> seen;
    const BaselineGenerator gen = [&](const Prompt& p, int) {
        seen.push_back(prompt_hash(p.tokens));
        return query_block(p);
    };
    const PairSet s = build_pairs(users, single_cluster(users), gen, PairOptions{});
    REQUIRE(s.stats.candidates == static_cast<int>(seen.size()));
    REQUIRE(s.stats.dropped == 0);
    for (std::size_t i = 0; i < s.pairs.size(); ++i) {
        CHECK(s.pairs[i].negative_prompt_hash == seen[i]);
        CHECK(prompt_hash(s.pairs[i].prompt.tokens) == seen[i]);
        const UserProfile& u = c.user(s.pairs[i].user_id);
        const auto rec = std::find_if(u.history.begin(), u.history.end(),
                                      [&](const HistoryRecord& r) { return r.index == s.pairs[i].record_index; });
        REQUIRE(rec != u.history.end());
        const int earlier = static_cast<int>(rec - u.history.begin());
        CHECK(s.pairs[i].prompt.n_history_used == std::min(4, earlier));
        CHECK(query_block(s.pairs[i].prompt) == rec->raw_input);
    }
}

TEST_CASE("input-aligned negatives overlap their positives more than shuffled negatives") {
    const Corpus c = synth_corpus(4, 4, 10, 7);
    const auto users = c.users_in(Split::train);
    // Stands in for a cluster model that keeps the query content and changes style.
    const BaselineGenerator echo = [](const Prompt& p, int) { return query_block(p); };
    const PairSet s = build_pairs(users, single_cluster(users), echo, PairOptions{});
    REQUIRE(s.pairs.size() > 100);
    double shuffled = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < s.pairs.size(); ++i) {
        for (std::size_t j = i + 1; j < s.pairs.size(); ++j) {
            if (s.pairs[i].user_id != s.pairs[j].user_id && (i * 31 + j) % 17 == 0) {
                shuffled += rouge1(s.pairs[i].positive, s.pairs[j].negative).f1;
                ++n;
            }
        }
    }
    REQUIRE(n > 0);
    CHECK(s.stats.mean_overlap > shuffled / n + 0.2);
}

TEST_CASE("build_pairs with models: missing adapters, determinism and persistence") {
    const Corpus c = synth_corpus(2, 2, 4, 9);
    Clustering cl;
    cl.K = 2;
    const auto users = c.users_in(Split::train);
    for (std::size_t i = 0; i < users.size(); ++i) {
        cl.assignments[users[i]->user_id] = static_cast<int>(i % 2);
    }
    BackboneConfig bc;
    bc.vocab_size = 256;
    bc.d_model = 16;
    bc.n_layers = 1;
    bc.n_heads = 2;
    bc.ffn_dim = 16;
    const Backbone m(bc);
    const LoraAdapter a = LoraAdapter::init(bc, 2, 2.0, 0.0, {kAllSites.begin(), kAllSites.end()}, 4);
    PairOptions o;
    o.max_new_tokens = 6;
    CHECK_THROWS_AS(build_pairs(c, cl, m, {&a}, o), ConfigError);
    CHECK_THROWS_AS(build_pairs(c, cl, m, {&a, nullptr}, o), ConfigError);
    const PairSet s1 = build_pairs(c, cl, m, {&a, &a}, o);
    const PairSet s2 = build_pairs(c, cl, m, {&a, &a}, o);
    REQUIRE(s1.pairs.size() == s2.pairs.size());
    CHECK(s1.stats.candidates == 12);  // three history records for each of four users
    for (std::size_t i = 0; i < s1.pairs.size(); ++i) {
        CHECK(s1.pairs[i].negative == s2.pairs[i].negative);
        CHECK(s1.pairs[i].negative.size() <= 6);
        CHECK(s1.pairs[i].cluster == cl.assignments.at(s1.pairs[i].user_id));
    }

    const std::string path = (std::filesystem::temp_directory_path() / "card_test_pairs.jsonl").string();
    save_pairs_jsonl(s1.pairs, path);
    const auto back = load_pairs_jsonl(path);
    std::filesystem::remove(path);
    REQUIRE(back.size() == s1.pairs.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].prompt.tokens == s1.pairs[i].prompt.tokens);
        CHECK(back[i].positive == s1.pairs[i].positive);
        CHECK(back[i].negative == s1.pairs[i].negative);
        CHECK(back[i].user_id == s1.pairs[i].user_id);
        CHECK(back[i].cluster == s1.pairs[i].cluster);
        CHECK(back[i].negative_prompt_hash == s1.pairs[i].negative_prompt_hash);
    }
}
