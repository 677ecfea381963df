// Acceptance run: one PASS/FAIL line per criterion. Criteria 1, 2, 4, 7, 8
// and 9 share one full pipeline run at the default configuration.
//
//   card_acceptance [work_dir]

#include "card/cluster.hpp"
#include "card/config.hpp"
#include "card/decode.hpp"
#include "card/evalharness.hpp"
#include "card/metrics.hpp"
#include "card/persona.hpp"
#include "card/pipeline.hpp"
#include "card/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace card;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << std::fixed << v;
    return os.str();
}

std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    std::vector<std::map<std::string, std::string>> rows;
    std::vector<std::string> header;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (line.back() == ',') {
            cells.emplace_back();
        }
        if (header.empty()) {
            header = cells;
            continue;
        }
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) {
            row[header[i]] = cells[i];
        }
        rows.push_back(row);
    }
    return rows;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

BackboneConfig micro() {
    BackboneConfig c;
    c.vocab_size = 32;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_seq = 64;
    c.ffn_dim = 24;
    c.seed = 5;
    return c;
}

// Central differences with eps 1e-4 at `per_tensor` entries of each tensor.
// A failure exceeds 1e-3 relative error and 1e-7 absolute error.
std::pair<int, int> fd_check(const std::function<double()>& loss, const std::vector<Mat*>& values,
                             const std::vector<const Mat*>& grads, int per_tensor) {
    int checked = 0, failures = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        Mat& W = *values[i];
        const int n = std::min<int>(per_tensor, static_cast<int>(W.size()));
        for (int k = 0; k < n; ++k) {
            const Eigen::Index j = (static_cast<Eigen::Index>(k) * 7919 + static_cast<Eigen::Index>(i) * 31) % W.size();
            const double orig = W.data()[j];
            const double eps = 1e-4;
            W.data()[j] = orig + eps;
            const double lp = loss();
            W.data()[j] = orig - eps;
            const double lm = loss();
            W.data()[j] = orig;
            const double fd = (lp - lm) / (2 * eps);
            const double an = grads[i]->data()[j];
            const double err = std::abs(fd - an);
            if (err > 1e-3 * std::max(std::abs(fd), std::abs(an)) && err > 1e-7) {
                ++failures;
            }
            ++checked;
        }
    }
    return {checked, failures};
}

std::uint64_t adapters_checksum(const std::vector<LoraAdapter>& adapters) {
    std::uint64_t h = 0;
    for (const auto& a : adapters) {
        h = h * 1099511628211ULL ^ a.checksum();
    }
    return h;
}

Prompt eval_prompt(const UserProfile& u, const std::vector<HistoryRecord>& history, const HistoryRecord& rec,
                   const RunConfig& c) {
    return build_prompt(rec.raw_input, history, c.max_history, c.max_prompt_len, u.user_id);
}

// ---------------------------------------------------------------------------

Outcome neutrality(const Models& m) {
    const auto t0 = Clock::now();
    const RunConfig& c = m.config;
    const auto adapters = adapter_pointers(m.adapters);
    DecodeConfig card;
    card.mode = DecodeMode::card;
    card.beta = c.beta;
    card.top_k = c.top_k;
    card.max_new_tokens = c.max_new_tokens;
    card.repetition_penalty = c.repetition_penalty;
    DecodeConfig base = card;
    base.mode = DecodeMode::cluster_only;
    DecodeConfig off = card;
    off.beta = 0.0;
    const Vec zero = Vec::Zero(m.head.J);
    int prompts = 0, mismatches = 0;
    for (const UserProfile* u : m.corpus.users_in(Split::train)) {
        const LoraAdapter* a = adapters[static_cast<std::size_t>(m.clustering.assignments.at(u->user_id))];
        const Vec& lam = m.lambdas.at(u->user_id);
        for (const auto& rec : u->held_out) {
            if (prompts == 100) {
                break;
            }
            const Prompt p = eval_prompt(*u, u->history, rec, c);
            const TokenSeq ref = generate(p, m.backbone, a, base).tokens;
            mismatches += generate(p, m.backbone, a, card, &m.head, &zero).tokens != ref;
            mismatches += generate(p, m.backbone, a, off, &m.head, &lam).tokens != ref;
            ++prompts;
        }
    }
    const double t = seconds_since(t0);
    return {prompts == 100 && mismatches == 0 && t < 60.0,
            std::to_string(prompts) + " prompts, " + std::to_string(mismatches) + " mismatches (lambda=0 and beta=0), " +
                fmt(t, 1) + " s"};
}

Outcome locality(const Models& m) {
    const auto t0 = Clock::now();
    const RunConfig& c = m.config;
    const auto adapters = adapter_pointers(m.adapters);
    DecodeConfig dc;
    dc.mode = DecodeMode::card;
    dc.beta = c.beta;
    dc.top_k = c.top_k;
    dc.max_new_tokens = 50;
    dc.repetition_penalty = c.repetition_penalty;
    std::vector<DecodeStep> steps;
    for (const UserProfile* u : m.corpus.users_in(Split::train)) {
        const LoraAdapter* a = adapters[static_cast<std::size_t>(m.clustering.assignments.at(u->user_id))];
        for (const auto& rec : u->held_out) {
            const auto g = generate(eval_prompt(*u, u->history, rec, c), m.backbone, a, dc, &m.head,
                                    &m.lambdas.at(u->user_id), true);
            steps.insert(steps.end(), g.trace.begin(), g.trace.end());
            if (steps.size() >= 50) {
                break;
            }
        }
        if (steps.size() >= 50) {
            break;
        }
    }
    steps.resize(std::min<std::size_t>(steps.size(), 50));
    int outside_changed = 0, bad_k = 0, max_diff = 0;
    for (const auto& s : steps) {
        const std::set<TokenId> in(s.topk.begin(), s.topk.end());
        bad_k += static_cast<int>(in.size()) != c.top_k || s.u_rows_read != c.top_k;
        int diff = 0;
        for (Eigen::Index v = 0; v < s.baseline.size(); ++v) {
            const bool changed = s.edited(v) != s.baseline(v);
            diff += changed;
            if (changed && in.count(static_cast<TokenId>(v)) == 0) {
                ++outside_changed;
            }
        }
        max_diff = std::max(max_diff, diff);
    }
    const double t = seconds_since(t0);
    return {steps.size() == 50 && outside_changed == 0 && bad_k == 0 && max_diff <= c.top_k && t < 60.0,
            std::to_string(steps.size()) + " steps, k=" + std::to_string(c.top_k) + ", " +
                std::to_string(outside_changed) + " changed logits outside the top-k set, at most " +
                std::to_string(max_diff) + " changed per step, " + fmt(t, 1) + " s"};
}

Outcome gradients() {
    const auto t0 = Clock::now();
    Backbone model(micro());
    LoraAdapter a = LoraAdapter::init(micro(), 4, 8.0, 0.0, {kAllSites.begin(), kAllSites.end()}, 7);
    Rng rng(8);
    a.visit([&](const std::string& n, Mat& x) {
        if (n.back() == 'B') {
            x = randn(x.rows(), x.cols(), 0.1, rng);
        }
    });
    SftExample ex;
    ex.tokens = {1, 7, 9, 12, 3, 8, 20, 2};
    ex.target_start = 4;

    BackboneWeights gw = model.weights().zeros_like();
    model.nll_and_grad(ex, nullptr, &gw, nullptr);
    std::vector<Mat*> wv;
    std::vector<const Mat*> wg;
    model.weights().visit([&](const std::string&, Mat& x) { wv.push_back(&x); });
    gw.visit([&](const std::string&, const Mat& x) { wg.push_back(&x); });
    const auto sft_bb = fd_check([&] { return model.nll_and_grad(ex, nullptr, nullptr, nullptr); }, wv, wg, 12);

    LoraAdapter ga = a.zeros_like();
    model.nll_and_grad(ex, &a, nullptr, &ga);
    std::vector<Mat*> av;
    std::vector<const Mat*> ag;
    a.visit([&](const std::string&, Mat& x) { av.push_back(&x); });
    ga.visit([&](const std::string&, const Mat& x) { ag.push_back(&x); });
    const auto sft_ad = fd_check([&] { return model.nll_and_grad(ex, &a, nullptr, nullptr); }, av, ag, 8);

    // BT on features of the same micro model, J=8, two tapped layers.
    PersonaHead head = PersonaHead::init(32, 2, 16, 8, 9);
    head.U = randn(32, 8, 0.5, rng);
    head.bias = randn(1, 8, 0.3, rng);
    Mat lambda = randn(8, 1, 1.0, rng);
    PairFeatures pair;
    pair.user_id = "u";
    pair.positive = sequence_features(model, &a, {1, 7, 9, 12, 3}, {8, 20, 2}, 2, 8);
    pair.negative = sequence_features(model, &a, {1, 7, 9, 12, 3}, {8, 21, 22, 2}, 2, 8);
    HeadGrad hg{Mat::Zero(head.P.rows(), head.P.cols()), Mat::Zero(1, 8), Mat::Zero(32, 8)};
    Vec gl = Vec::Zero(8);
    bt_pair_loss_grad(pair, head, lambda.col(0), 1.0, &hg, &gl);
    const Mat glm = gl;
    const auto bt = fd_check(
        [&] { return bt_pair_loss_grad(pair, head, lambda.col(0), 1.0, nullptr, nullptr); },
        {&head.P, &head.bias, &head.U, &lambda}, {&hg.P, &hg.bias, &hg.U, &glm}, 128);

    const int sft_checked = sft_bb.first + sft_ad.first;
    const int failures = sft_bb.second + sft_ad.second + bt.second;
    const double t = seconds_since(t0);
    return {sft_checked >= 200 && bt.first >= 200 && failures == 0 && t < 300.0,
            "SFT " + std::to_string(sft_checked) + " params, BT " + std::to_string(bt.first) + " params, " +
                std::to_string(failures) + " beyond 1e-3 relative error, " + fmt(t, 1) + " s"};
}

Outcome freeze(const Models& m) {
    const RunConfig& c = m.config;
    const std::uint64_t bb = m.backbone.checksum(), ad = adapters_checksum(m.adapters);
    const auto ptrs = adapter_pointers(m.adapters);
    const PersonaResult pr = train_persona(m.backbone, ptrs, m.pairs, c, c.J, c.S);
    const bool after_bt = m.backbone.checksum() == bb && adapters_checksum(m.adapters) == ad;
    const std::uint64_t head = m.head.checksum();
    int fits = 0;
    for (const UserProfile* u : m.corpus.users_in(Split::test)) {
        fit_new_user(u->user_id, u->history, m.clustering, m.featurizer, m.backbone, ptrs, m.head, new_user_options(c));
        ++fits;
    }
    const bool after_fit =
        m.backbone.checksum() == bb && adapters_checksum(m.adapters) == ad && m.head.checksum() == head;
    return {after_bt && after_fit && fits > 0 && pr.report.epoch_loss.size() == static_cast<std::size_t>(c.persona_epochs),
            std::string("backbone and ") + std::to_string(m.adapters.size()) + " adapters unchanged by bt_train: " +
                (after_bt ? "yes" : "no") + "; by " + std::to_string(fits) + " fit_new_user calls: " +
                (after_fit ? "yes" : "no")};
}

Outcome oracles() {
    // Every sequence up to length 8 over {0, 1, 2}, ordered by length, so that
    // the sequence of length L with base-3 value v has index (3^L - 1) / 2 + v.
    std::vector<std::vector<int>> seqs = {{}}, frontier = {{}};
    for (int len = 1; len <= 8; ++len) {
        std::vector<std::vector<int>> next;
        for (const auto& s : frontier) {
            for (int t = 0; t < 3; ++t) {
                auto e = s;
                e.push_back(t);
                next.push_back(e);
            }
        }
        seqs.insert(seqs.end(), next.begin(), next.end());
        frontier = std::move(next);
    }
    auto index_of = [](const std::vector<int>& s) {
        std::size_t base = 0, pow = 1, v = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            base += pow;
            pow *= 3;
        }
        for (int t : s) {
            v = v * 3 + static_cast<std::size_t>(t);
        }
        return base + v;
    };
    // Brute force: the set of all subsequences of each sequence, as a bitset
    // over sequence indices. The LCS is the length of the longest common member.
    const std::size_t n = seqs.size(), words = (n + 63) / 64;
    std::vector<std::uint64_t> subs(n * words, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = seqs[i];
        for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
            std::vector<int> sub;
            for (std::size_t j = 0; j < a.size(); ++j) {
                if (mask & (1u << j)) {
                    sub.push_back(a[j]);
                }
            }
            const std::size_t k = index_of(sub);
            subs[i * words + k / 64] |= 1ULL << (k % 64);
        }
    }
    long long pairs = 0, lcs_bad = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t brute = 0;
            for (std::size_t w = words; w-- > 0;) {
                const std::uint64_t common = subs[i * words + w] & subs[j * words + w];
                if (common != 0) {
                    brute = seqs[w * 64 + 63 - static_cast<std::size_t>(__builtin_clzll(common))].size();
                    break;
                }
            }
            lcs_bad += lcs_length(seqs[i], seqs[j]) != brute;
            ++pairs;
        }
    }
    const double f1 = rouge1(std::vector<std::string>{"the", "cat"}, std::vector<std::string>{"the", "cat", "sat"}).f1;

    const std::vector<TokenSeq> docs = {{10, 11, 12}, {10, 10, 13, 14, 15}, {16, 17}};
    double bm25_err = 0.0;
    for (const auto& r : bm25_rank({10, 13}, docs)) {
        double direct = 0.0, avgdl = 0.0;
        for (const auto& d : docs) {
            avgdl += static_cast<double>(d.size()) / 3.0;
        }
        for (TokenId term : {10, 13}) {
            double n_t = 0.0;
            for (const auto& d : docs) {
                n_t += std::count(d.begin(), d.end(), term) > 0;
            }
            const double idf = std::log((3.0 - n_t + 0.5) / (n_t + 0.5) + 1.0);
            const auto& d = docs[r.index];
            const double f = static_cast<double>(std::count(d.begin(), d.end(), term));
            direct += idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * static_cast<double>(d.size()) / avgdl));
        }
        bm25_err = std::max(bm25_err, std::abs(direct - r.score));
    }
    return {lcs_bad == 0 && f1 == 0.8 && bm25_err <= 1e-9,
            std::to_string(pairs) + " LCS pairs, " + std::to_string(lcs_bad) + " mismatches; rouge1 f1 " + fmt(f1, 6) +
                "; BM25 max error " + std::to_string(bm25_err)};
}

Outcome clustering_recovery() {
    const auto t0 = Clock::now();
    RunConfig c;
    const Corpus corpus = synth_corpus(corpus_options(c));
    const ClusterResult r = cluster_users(corpus, c, 4);
    std::vector<int> truth, found;
    int suboptimal = 0;
    for (const UserProfile* u : corpus.users_in(Split::train)) {
        truth.push_back(u->archetype_id);
        const int k = r.clustering.assignments.at(u->user_id);
        found.push_back(k);
        const Vec e = r.featurizer.embed(*u).vector;
        for (int j = 0; j < r.clustering.K; ++j) {
            suboptimal += (e - r.clustering.centroids[static_cast<std::size_t>(j)]).norm() <
                          (e - r.clustering.centroids[static_cast<std::size_t>(k)]).norm();
        }
    }
    const double ari = adjusted_rand_index(truth, found);
    const double t = seconds_since(t0);
    return {truth.size() == 32 && ari == 1.0 && suboptimal == 0 && t < 60.0,
            std::to_string(truth.size()) + " users, ARI " + fmt(ari, 6) + ", " + std::to_string(suboptimal) +
                " users nearer another centroid, " + fmt(t, 1) + " s"};
}

Outcome ablation(const std::vector<std::map<std::string, std::string>>& summary, double pipeline_seconds) {
    std::map<std::string, std::vector<double>> r1;
    for (const auto& row : summary) {
        r1[row.at("method")].push_back(std::stod(row.at("rouge1_f1")));
    }
    auto mean = [&](const std::string& m) {
        const auto& v = r1[m];
        double s = 0.0;
        for (double x : v) {
            s += x;
        }
        return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
    };
    const double card = mean("card"), clus = mean("cluster_only"), vec = mean("vec_only"), np = mean("non_pers");
    const bool seeds_ok = r1["card"].size() == 3 && r1["cluster_only"].size() == 3 && r1["vec_only"].size() == 3 &&
                          r1["non_pers"].size() == 3;
    return {seeds_ok && card > clus && card > vec && card >= np + 0.02 && pipeline_seconds < 1800.0,
            "mean R-1 over " + std::to_string(r1["card"].size()) + " seeds: card " + fmt(card) + ", cluster_only " +
                fmt(clus) + ", vec_only " + fmt(vec) + ", non_pers " + fmt(np) + " (margin " + fmt(card - np) +
                "); pipeline " + fmt(pipeline_seconds / 60.0, 1) + " min"};
}

Outcome storage(const std::vector<std::map<std::string, std::string>>& summary, int J) {
    std::map<std::string, double> bytes;
    for (const auto& row : summary) {
        if (row.at("seed") == "1") {
            bytes[row.at("method")] = std::stod(row.at("storage_bytes_per_user"));
        }
    }
    const double card = bytes["card"], rag = bytes["rag"], pul = bytes["per_user_lora"];
    return {card == 4.0 * J && card < rag && rag < pul,
            "bytes per user: card " + fmt(card, 1) + " (4J = " + std::to_string(4 * J) + "), rag " + fmt(rag, 1) +
                ", per_user_lora " + fmt(pul, 1)};
}

Outcome new_user(const Models& m) {
    const RunConfig& c = m.config;
    const auto ptrs = adapter_pointers(m.adapters);
    const std::uint64_t bb = m.backbone.checksum(), ad = adapters_checksum(m.adapters), head = m.head.checksum();
    int records = 0, improved = 0, users = 0, lambda_moved = 0;
    for (const UserProfile* u : m.corpus.users_in(Split::test)) {
        const NewUserFit fit = fit_new_user(u->user_id, u->history, m.clustering, m.featurizer, m.backbone, ptrs,
                                            m.head, new_user_options(c));
        ++users;
        lambda_moved += fit.vector.lambda.norm() > 0.0;
        const LoraAdapter* a = ptrs[static_cast<std::size_t>(fit.cluster)];
        for (const auto& rec : u->held_out) {
            const Prompt p = eval_prompt(*u, u->history, rec, c);
            TokenSeq y = rec.output;
            y.push_back(special::EOS);
            const SequenceFeatures f = sequence_features(m.backbone, a, p.tokens, y, c.S, c.top_k);
            const double pers = sequence_logprob_pers(f, m.head, fit.vector.lambda, c.train_beta);
            const double plain = sequence_logprob_pers(f, m.head, fit.vector.lambda, 0.0);
            improved += pers > plain;
            ++records;
        }
    }
    const bool frozen =
        m.backbone.checksum() == bb && adapters_checksum(m.adapters) == ad && m.head.checksum() == head;
    const double frac = records > 0 ? static_cast<double>(improved) / records : 0.0;
    return {records > 0 && frac >= 0.8 && frozen && lambda_moved == users,
            std::to_string(improved) + "/" + std::to_string(records) + " held-out records of " + std::to_string(users) +
                " new users gain log-probability (" + fmt(100.0 * frac, 1) + "%); only lambda changed: " +
                (frozen && lambda_moved == users ? "yes" : "no")};
}

Outcome sweeps(const fs::path& dir) {
    RunConfig c;
    c.n_archetypes = 4;
    c.users_per_archetype = 3;
    c.records_per_user = 8;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ffn_dim = 24;
    c.max_seq = 128;
    c.max_prompt_len = 96;
    c.max_new_tokens = 8;
    c.pretrain_archetypes = 2;
    c.pretrain_users_per_archetype = 2;
    c.pretrain_epochs = 1;
    c.embed_dim = 16;
    c.lora_rank = 2;
    c.adapter_epochs = 1;
    c.top_k = 8;
    c.S = 2;
    c.persona_epochs = 1;
    c.methods = {};
    c.sweeps = {"beta", "J", "S", "K", "L"};
    const std::map<std::string, std::vector<std::string>> expected = {
        {"beta", {"0", "0.25", "0.5", "1", "2", "4"}},
        {"J", {"32", "64", "128", "256"}},
        {"S", {"1", "4", "8"}},
        {"K", {"1", "2", "4", "8"}},
        {"L", {"0", "5", "10", "20"}}};
    std::map<std::string, std::string> first;
    for (int run = 0; run < 2; ++run) {
        const fs::path out = dir / ("sweeps_" + std::to_string(run));
        fs::remove_all(out);
        write_report(run_matrix(c), out.string());
        for (const auto& [axis, values] : expected) {
            const std::string path = (out / ("sweep_" + axis + ".csv")).string();
            if (!fs::exists(path)) {
                return {false, "missing " + path};
            }
            std::set<std::string> seen;
            for (const auto& row : read_csv(path)) {
                seen.insert(row.at("axis_value"));
            }
            if (seen != std::set<std::string>(values.begin(), values.end())) {
                return {false, "grid of " + axis + " does not match"};
            }
            if (run == 0) {
                first[axis] = slurp(path);
            } else if (first[axis] != slurp(path)) {
                return {false, "sweep_" + axis + ".csv differs between identical runs"};
            }
        }
    }
    return {true, "beta, J, S, K and L CSVs carry the grid values and are byte-identical across two runs"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_run");
    fs::create_directories(work);
    std::map<int, std::pair<std::string, Outcome>> results;
    auto record = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        results[id] = {name, o};
        std::cout << "  [" << id << "] " << (o.pass ? "pass" : "fail") << ": " << o.detail << std::endl;
    };

    record(3, "gradient correctness", gradients);
    record(5, "oracle equivalence", oracles);
    record(6, "clustering recovery", clustering_recovery);

    // Default configuration, three seeds, every method, via the stage runner.
    RunConfig c;
    c.out_dir = (work / "pipeline").string();
    c.seeds = {1, 2, 3};
    fs::remove_all(c.out_dir);
    const auto t0 = Clock::now();
    std::optional<Models> models;
    std::vector<std::map<std::string, std::string>> summary;
    std::string pipeline_error;
    try {
        run_pipeline({"corpus", "pretrain", "cluster", "train-cluster", "pairs", "train-persona", "eval"}, c);
        summary = read_csv(ArtifactPaths(c.out_dir).reports() + "/summary.csv");
        models = load_models(c);
    } catch (const std::exception& e) {
        pipeline_error = e.what();
    }
    const double pipeline_seconds = seconds_since(t0);
    std::cout << "  pipeline finished in " << fmt(pipeline_seconds, 1) << " s" << std::endl;
    auto with_models = [&](const std::function<Outcome(const Models&)>& f) {
        return [&, f]() -> Outcome {
            if (!models) {
                return {false, "pipeline failed: " + pipeline_error};
            }
            return f(*models);
        };
    };
    record(1, "exact neutrality", with_models(neutrality));
    record(2, "top-k locality", with_models(locality));
    record(4, "freeze discipline", with_models(freeze));
    record(7, "ablation ordering", [&] {
        return models ? ablation(summary, pipeline_seconds) : Outcome{false, "pipeline failed: " + pipeline_error};
    });
    record(8, "storage ordering", [&] {
        return models ? storage(summary, c.J) : Outcome{false, "pipeline failed: " + pipeline_error};
    });
    record(9, "new-user adaptation", with_models(new_user));
    record(10, "sweep harness", [&] { return sweeps(work); });

    std::cout << "\n";
    int failed = 0;
    for (const auto& [id, r] : results) {
        std::cout << (r.second.pass ? "PASS" : "FAIL") << "  " << id << ". " << r.first << ": " << r.second.detail
                  << "\n";
        failed += !r.second.pass;
    }
    std::cout << (failed == 0 ? "all criteria pass" : std::to_string(failed) + " criteria fail") << std::endl;
    return failed == 0 ? 0 : 1;
}
