#include "card/corpus.hpp"

#include "card/errors.hpp"
#include "card/linalg.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace card {

namespace {

using json = nlohmann::json;

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";
constexpr int kSyllables = 70;  // |consonants| * |vowels|

std::string syllable(int i) {
    std::string s;
    s += kConsonants[static_cast<std::size_t>(i / 5)];
    s += kVowels[static_cast<std::size_t>(i % 5)];
    return s;
}

// Content tokens are two syllables, style tokens three; the classes never collide.
std::string content_name(int i) {
    const int m = (i * 37 + 11) % (kSyllables * kSyllables);
    return syllable(m / kSyllables) + syllable(m % kSyllables);
}

std::string style_name(int i) {
    constexpr int n3 = kSyllables * kSyllables * kSyllables;
    const int m = (i * 101 + 7) % n3;
    return syllable(m / (kSyllables * kSyllables)) + syllable((m / kSyllables) % kSyllables) + syllable(m % kSyllables);
}

int content_count(int vocab_size) { return (vocab_size - special::COUNT) * 3 / 5; }

TokenId sample_categorical(const std::vector<TokenId>& support, const std::vector<double>& logits, Rng& rng) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(logits[i] - mx);
    }
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return support[dist(rng)];
}

HistoryRecord make_record(const Vocabulary& vocab, const StyleArchetype& arch, const std::vector<TokenId>& style_pool,
                          const std::vector<double>& style_logits, int index, Rng& rng) {
    HistoryRecord rec;
    rec.index = index;

    std::vector<TokenId> content(static_cast<std::size_t>(vocab.content_end() - vocab.content_begin()));
    std::iota(content.begin(), content.end(), vocab.content_begin());
    std::uniform_int_distribution<int> len_dist(5, 9);
    const int n_in = std::min(len_dist(rng), static_cast<int>(content.size()));
    for (int i = 0; i < n_in; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), content.size() - 1);
        std::swap(content[static_cast<std::size_t>(i)], content[pick(rng)]);
        rec.raw_input.push_back(content[static_cast<std::size_t>(i)]);
    }

    const auto target = static_cast<std::size_t>(std::lround(arch.avg_len));
    rec.output.push_back(arch.marker_tokens.front());
    int copied = 0;
    for (TokenId c : rec.raw_input) {
        if (rec.output.size() + 1 >= target) {
            break;
        }
        rec.output.push_back(c);
        ++copied;
        if (copied % arch.style_gap == 0 && rec.output.size() + 1 < target) {
            rec.output.push_back(sample_categorical(style_pool, style_logits, rng));
        }
    }
    std::bernoulli_distribution closing(0.8);
    if (arch.marker_tokens.size() > 1 && closing(rng)) {
        rec.output.push_back(arch.marker_tokens[1]);
    }
    return rec;
}

json record_to_json(const HistoryRecord& r) {
    return json{{"index", r.index}, {"input", r.raw_input}, {"output", r.output}};
}

HistoryRecord record_from_json(const json& j) {
    HistoryRecord r;
    r.index = j.at("index").get<int>();
    r.raw_input = j.at("input").get<TokenSeq>();
    r.output = j.at("output").get<TokenSeq>();
    return r;
}

json bias_to_json(const std::map<TokenId, double>& m) {
    json arr = json::array();
    for (const auto& [t, b] : m) {
        arr.push_back(json::array({t, b}));
    }
    return arr;
}

std::map<TokenId, double> bias_from_json(const json& j) {
    std::map<TokenId, double> m;
    for (const auto& e : j) {
        m[e.at(0).get<TokenId>()] = e.at(1).get<double>();
    }
    return m;
}

Prompt assemble(const TokenSeq& raw_input, std::vector<TokenSeq> blocks, int max_len, std::string user_id,
                bool drop_front) {
    if (raw_input.empty()) {
        throw InvalidArgument("build_prompt: raw_input is empty");
    }
    const auto base = static_cast<std::ptrdiff_t>(raw_input.size()) + 2;
    if (base > max_len) {
        throw PromptOverflow("build_prompt: query of " + std::to_string(raw_input.size()) +
                             " tokens exceeds max_len " + std::to_string(max_len));
    }
    const auto budget = static_cast<std::size_t>(max_len - base);
    auto total = [&] {
        std::size_t n = 0;
        for (const auto& b : blocks) {
            n += b.size();
        }
        return n;
    };
    while (blocks.size() > 1 && total() > budget) {
        if (drop_front) {
            blocks.erase(blocks.begin());
        } else {
            blocks.pop_back();
        }
    }
    if (!blocks.empty() && total() > budget) {
        if (budget == 0) {
            blocks.clear();
        } else {
            blocks.front().resize(budget);
        }
    }

    Prompt p;
    p.user_id = std::move(user_id);
    p.n_history_used = static_cast<int>(blocks.size());
    p.tokens.push_back(special::BOS);
    for (const auto& b : blocks) {
        p.tokens.insert(p.tokens.end(), b.begin(), b.end());
    }
    p.tokens.push_back(special::SEP);
    p.tokens.insert(p.tokens.end(), raw_input.begin(), raw_input.end());
    return p;
}

}  // namespace

Vocabulary Vocabulary::make(int size) {
    if (size < 32) {
        throw InvalidArgument("vocabulary size must be >= 32");
    }
    std::vector<std::string> t = {"<pad>", "<bos>", "<eos>", "<sep>", "<to>", "<rs>"};
    const int n_content = content_count(size);
    for (int i = 0; i < n_content; ++i) {
        t.push_back(content_name(i));
    }
    for (int i = 0; static_cast<int>(t.size()) < size; ++i) {
        t.push_back(style_name(i));
    }
    return from_tokens(std::move(t));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 32) {
        throw InvalidArgument("vocabulary size must be >= 32");
    }
    Vocabulary v;
    v.style_begin_ = special::COUNT + content_count(static_cast<int>(tokens.size()));
    v.tokens_ = std::move(tokens);
    return v;
}

std::string Vocabulary::render(const TokenSeq& seq) const {
    std::string s;
    for (TokenId t : seq) {
        if (!s.empty()) {
            s += ' ';
        }
        s += str(t);
    }
    return s;
}

const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw InvalidArgument("unknown split '" + s + "'");
}

const UserProfile& Corpus::user(const std::string& id) const {
    for (const auto& u : users) {
        if (u.user_id == id) {
            return u;
        }
    }
    throw InvalidArgument("unknown user '" + id + "'");
}

std::vector<const UserProfile*> Corpus::users_in(Split split) const {
    std::vector<const UserProfile*> out;
    for (const auto& u : users) {
        if (u.split == split) {
            out.push_back(&u);
        }
    }
    return out;
}

Corpus synth_corpus(const CorpusOptions& opts) {
    if (opts.n_archetypes < 1 || opts.users_per_archetype < 1 || opts.records_per_user < 1) {
        throw InvalidArgument("synth_corpus: all counts must be >= 1");
    }
    if (opts.held_out_users_per_archetype < 0 || opts.held_out_fraction < 0.0 || opts.held_out_fraction >= 1.0) {
        throw InvalidArgument("synth_corpus: bad held-out settings");
    }

    Corpus corpus;
    corpus.vocab = Vocabulary::make(opts.vocab_size);
    const Vocabulary& vocab = corpus.vocab;
    Rng rng(opts.seed);

    std::vector<TokenId> style(static_cast<std::size_t>(vocab.style_end() - vocab.style_begin()));
    std::iota(style.begin(), style.end(), vocab.style_begin());
    std::shuffle(style.begin(), style.end(), rng);

    const auto n_arch = static_cast<std::size_t>(opts.n_archetypes);
    // pools[a]: style tokens archetype a may emit in style slots (never its own markers).
    std::vector<std::vector<TokenId>> pools(n_arch);
    if (opts.distinct_markers) {
        if (style.size() < 2 * n_arch + 1) {
            throw InvalidArgument("synth_corpus: vocabulary too small for the requested archetypes");
        }
        std::vector<TokenId> pool(style.begin() + static_cast<std::ptrdiff_t>(2 * n_arch), style.end());
        std::sort(pool.begin(), pool.end());
        const std::size_t n_fav = std::max<std::size_t>(1, std::min<std::size_t>(6, pool.size() / n_arch));
        std::vector<TokenId> fav_order = pool;
        std::shuffle(fav_order.begin(), fav_order.end(), rng);
        for (std::size_t a = 0; a < n_arch; ++a) {
            StyleArchetype arch;
            arch.id = static_cast<int>(a);
            arch.marker_tokens = {style[2 * a], style[2 * a + 1]};
            for (std::size_t i = 0; i < n_fav; ++i) {
                arch.token_bias[fav_order[(a * n_fav + i) % fav_order.size()]] = opts.archetype_bias;
            }
            corpus.archetypes.push_back(std::move(arch));
            pools[a] = pool;
        }
    } else {
        if (style.size() < 9) {
            throw InvalidArgument("synth_corpus: vocabulary too small for the requested archetypes");
        }
        for (std::size_t a = 0; a < n_arch; ++a) {
            std::vector<TokenId> order = style;
            std::shuffle(order.begin(), order.end(), rng);
            StyleArchetype arch;
            arch.id = static_cast<int>(a);
            arch.marker_tokens = {order[0], order[1]};
            for (std::size_t i = 2; i < 8; ++i) {
                arch.token_bias[order[i]] = opts.archetype_bias;
            }
            corpus.archetypes.push_back(std::move(arch));
            pools[a].assign(order.begin() + 2, order.end());
            std::sort(pools[a].begin(), pools[a].end());
        }
    }
    for (std::size_t a = 0; a < n_arch; ++a) {
        corpus.archetypes[a].avg_len = 7.0 + 2.0 * static_cast<double>(a % 4);
        corpus.archetypes[a].style_gap = 2 + static_cast<int>(a % 2);
    }

    const int n_hist_records = std::max(
        1, opts.records_per_user - static_cast<int>(std::lround(opts.records_per_user * opts.held_out_fraction)));

    int next_user = 0;
    auto make_user = [&](const StyleArchetype& arch, Split split) {
        const std::vector<TokenId>& pool = pools[static_cast<std::size_t>(arch.id)];
        UserProfile u;
        u.user_id = "u" + std::to_string(next_user++);
        u.archetype_id = arch.id;
        u.split = split;
        std::vector<TokenId> cand = pool;
        std::shuffle(cand.begin(), cand.end(), rng);
        const std::array<double, 3> strengths = {opts.idio_bias, opts.idio_bias - 0.5, opts.idio_bias - 1.0};
        for (std::size_t i = 0; i < strengths.size() && i < cand.size(); ++i) {
            u.idio_bias[cand[i]] = strengths[i];
        }
        std::vector<double> logits(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const TokenId t = pool[i];
            double l = 0.0;
            if (auto it = arch.token_bias.find(t); it != arch.token_bias.end()) {
                l += it->second;
            }
            if (auto it = u.idio_bias.find(t); it != u.idio_bias.end()) {
                l += it->second;
            }
            logits[i] = l;
        }
        for (int r = 1; r <= opts.records_per_user; ++r) {
            auto rec = make_record(vocab, arch, pool, logits, r, rng);
            (r <= n_hist_records ? u.history : u.held_out).push_back(std::move(rec));
        }
        corpus.users.push_back(std::move(u));
    };

    for (const auto& arch : corpus.archetypes) {
        for (int i = 0; i < opts.users_per_archetype; ++i) {
            make_user(arch, Split::train);
        }
    }
    for (const auto& arch : corpus.archetypes) {
        for (int i = 0; i < opts.held_out_users_per_archetype; ++i) {
            make_user(arch, Split::test);
        }
    }
    return corpus;
}

TokenSeq serialize_record(const HistoryRecord& r) {
    TokenSeq s(r.raw_input);
    s.push_back(special::ARROW);
    s.insert(s.end(), r.output.begin(), r.output.end());
    s.push_back(special::RECORD_SEP);
    return s;
}

Prompt build_prompt(const TokenSeq& raw_input, const std::vector<HistoryRecord>& history, int max_history,
                    int max_len, std::string user_id) {
    std::vector<HistoryRecord> sorted(history);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const HistoryRecord& a, const HistoryRecord& b) { return a.index < b.index; });
    const auto keep = static_cast<std::size_t>(std::clamp(max_history, 0, static_cast<int>(sorted.size())));
    std::vector<TokenSeq> blocks;
    for (auto it = sorted.end() - static_cast<std::ptrdiff_t>(keep); it != sorted.end(); ++it) {
        blocks.push_back(serialize_record(*it));
    }
    return assemble(raw_input, std::move(blocks), max_len, std::move(user_id), /*drop_front=*/true);
}

Prompt build_prompt_ordered(const TokenSeq& raw_input, const std::vector<HistoryRecord>& ranked, int max_len,
                            std::string user_id) {
    std::vector<TokenSeq> blocks;
    for (const auto& r : ranked) {
        blocks.push_back(serialize_record(r));
    }
    return assemble(raw_input, std::move(blocks), max_len, std::move(user_id), /*drop_front=*/false);
}

TokenSeq query_block(const Prompt& p) {
    TokenSeq q;
    auto it = std::find(p.tokens.begin(), p.tokens.end(), special::SEP);
    if (it == p.tokens.end()) {
        return q;
    }
    for (++it; it != p.tokens.end(); ++it) {
        if (!is_special(*it)) {
            q.push_back(*it);
        }
    }
    return q;
}

std::vector<HistoryRecord> mask_history(const std::vector<HistoryRecord>& history, int L) {
    if (L < 0) {
        throw InvalidArgument("mask_history: L must be >= 0");
    }
    std::vector<HistoryRecord> sorted(history);
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const HistoryRecord& a, const HistoryRecord& b) { return a.index < b.index; });
    sorted.resize(std::min(sorted.size(), static_cast<std::size_t>(L)));
    return sorted;
}

std::vector<HistoryRecord> history_before(const UserProfile& user, int index) {
    std::vector<HistoryRecord> out;
    for (const auto& r : user.history) {
        if (r.index < index) {
            out.push_back(r);
        }
    }
    return out;
}

std::string history_json(const std::vector<HistoryRecord>& h) {
    json arr = json::array();
    for (const auto& r : h) {
        arr.push_back(record_to_json(r));
    }
    return arr.dump();
}

void write_corpus_jsonl(const Corpus& c, std::ostream& out) {
    for (const auto& u : c.users) {
        json j;
        j["user_id"] = u.user_id;
        j["archetype_id"] = u.archetype_id;
        j["split"] = to_string(u.split);
        j["history"] = json::parse(history_json(u.history));
        j["held_out"] = json::parse(history_json(u.held_out));
        j["idio_bias"] = bias_to_json(u.idio_bias);
        out << j.dump() << '\n';
    }
}

void write_vocab_json(const Vocabulary& v, std::ostream& out) { out << json(v.tokens()).dump() << '\n'; }

Corpus read_corpus(std::istream& users_in, std::istream& vocab_in) {
    Corpus c;
    json vj;
    vocab_in >> vj;
    c.vocab = Vocabulary::from_tokens(vj.get<std::vector<std::string>>());
    std::string line;
    while (std::getline(users_in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        UserProfile u;
        u.user_id = j.at("user_id").get<std::string>();
        u.archetype_id = j.at("archetype_id").get<int>();
        u.split = split_from_string(j.at("split").get<std::string>());
        for (const auto& r : j.at("history")) {
            u.history.push_back(record_from_json(r));
        }
        if (j.contains("held_out")) {
            for (const auto& r : j.at("held_out")) {
                u.held_out.push_back(record_from_json(r));
            }
        }
        if (j.contains("idio_bias")) {
            u.idio_bias = bias_from_json(j.at("idio_bias"));
        }
        c.users.push_back(std::move(u));
    }
    return c;
}

void save_corpus(const Corpus& c, const std::string& users_path, const std::string& vocab_path) {
    std::ofstream u(users_path, std::ios::binary);
    std::ofstream v(vocab_path, std::ios::binary);
    if (!u || !v) {
        throw ConfigError("cannot write corpus to " + users_path);
    }
    write_corpus_jsonl(c, u);
    write_vocab_json(c.vocab, v);
}

Corpus load_corpus(const std::string& users_path, const std::string& vocab_path) {
    std::ifstream u(users_path, std::ios::binary);
    std::ifstream v(vocab_path, std::ios::binary);
    if (!u || !v) {
        throw MissingPrerequisite("corpus files not found: " + users_path, "corpus");
    }
    return read_corpus(u, v);
}

}  // namespace card
