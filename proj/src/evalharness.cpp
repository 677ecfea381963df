#include "card/evalharness.hpp"

#include "card/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace card {

const char* to_string(Method m) {
    switch (m) {
        case Method::non_pers: return "non_pers";
        case Method::rag: return "rag";
        case Method::cluster_only: return "cluster_only";
        case Method::vec_only: return "vec_only";
        case Method::per_user_lora: return "per_user_lora";
        case Method::card: return "card";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    for (Method m : {Method::non_pers, Method::rag, Method::cluster_only, Method::vec_only, Method::per_user_lora,
                     Method::card}) {
        if (s == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown method '" + s + "'");
}

std::vector<HistoryRecord> bm25_top_histories(const TokenSeq& query, const std::vector<HistoryRecord>& history,
                                              int k) {
    if (history.empty()) {
        return {};
    }
    std::vector<TokenSeq> docs;
    docs.reserve(history.size());
    for (const auto& r : history) {
        TokenSeq d = r.raw_input;
        d.insert(d.end(), r.output.begin(), r.output.end());
        docs.push_back(std::move(d));
    }
    const auto ranked = bm25_rank(query, docs);
    std::vector<HistoryRecord> out;
    for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < k; ++i) {
        out.push_back(history[ranked[i].index]);
    }
    return out;
}

namespace {

DecodeConfig decode_config(const RunConfig& c, DecodeMode mode, double beta) {
    DecodeConfig d;
    d.beta = beta;
    d.top_k = c.top_k;
    d.max_new_tokens = c.max_new_tokens;
    d.repetition_penalty = c.repetition_penalty;
    d.mode = mode;
    return d;
}

Prompt history_prompt(const UserProfile& u, const std::vector<HistoryRecord>& history, const HistoryRecord& rec,
                      const RunConfig& c) {
    return build_prompt(rec.raw_input, history, c.max_history, c.max_prompt_len, u.user_id);
}

Prompt bare_prompt(const UserProfile& u, const HistoryRecord& rec, const RunConfig& c) {
    return build_prompt(rec.raw_input, {}, 0, c.max_prompt_len, u.user_id);
}

int cluster_of(const Models& m, const std::string& user_id) {
    auto it = m.clustering.assignments.find(user_id);
    if (it == m.clustering.assignments.end()) {
        throw ConfigError("user '" + user_id + "' has no cluster");
    }
    return it->second;
}

Vec lambda_or_zero(const UserVectorTable& t, const std::string& user_id, int J) {
    auto it = t.vectors.find(user_id);
    return it == t.vectors.end() ? Vec::Zero(J) : it->second;
}

double mean_history_bytes(const std::vector<const UserProfile*>& users) {
    if (users.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const UserProfile* u : users) {
        total += static_cast<double>(history_json(u->history).size());
    }
    return total / static_cast<double>(users.size());
}

MethodResult card_result(const Models& m, const PersonaHead& head, const UserVectorTable& lambdas, double beta,
                         const std::vector<const LoraAdapter*>& adapters) {
    const RunConfig& c = m.config;
    const DecodeConfig dc = decode_config(c, DecodeMode::card, beta);
    MethodResult r = evaluate_generator(m.corpus.users_in(Split::train), [&](const UserProfile& u, const HistoryRecord& rec) {
        const Vec lam = lambda_or_zero(lambdas, u.user_id, head.J);
        const LoraAdapter* a = adapters[static_cast<std::size_t>(cluster_of(m, u.user_id))];
        return generate(history_prompt(u, u.history, rec, c), m.backbone, a, dc, &head, &lam).tokens;
    });
    r.storage_bytes_per_user = 4.0 * head.J;
    return r;
}

PersonaResult train_vec_only(const Models& m) {
    const RunConfig& c = m.config;
    PairSet ps = build_pairs(
        m.corpus.users_in(Split::train), m.clustering.assignments,
        [&](const Prompt& p, int) {
            return gen_cluster_baseline(p, m.backbone, nullptr, c.max_new_tokens, c.repetition_penalty);
        },
        pair_options(c));
    std::vector<const LoraAdapter*> none(static_cast<std::size_t>(m.clustering.K), nullptr);
    return train_persona(m.backbone, none, ps.pairs, c, c.J, c.S);
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

TokenSeq run_baseline_rag(const std::vector<HistoryRecord>& history, const HistoryRecord& record,
                          const Backbone& model, const RunConfig& c) {
    const auto top = bm25_top_histories(record.raw_input, history, 4);
    const Prompt p = build_prompt_ordered(record.raw_input, top, c.max_prompt_len);
    return generate(p, model, nullptr, decode_config(c, DecodeMode::non_pers, 0.0)).tokens;
}

std::size_t per_user_lora_bytes(const BackboneConfig& b, int rank) {
    return 4 * LoraAdapter::init(b, rank, rank, 0.0, {kAllSites.begin(), kAllSites.end()}, 0).parameter_count();
}

PerUserLora run_baseline_per_user_lora(const UserProfile& user, const Backbone& model, const RunConfig& c) {
    PerUserLora r;
    r.user_id = user.user_id;
    const std::uint64_t seed = c.seed * 7919 + fnv1a(user.user_id.data(), user.user_id.size()) % 100000;
    r.adapter = LoraAdapter::init(model.config(), c.pul_rank, c.pul_rank, c.lora_dropout,
                                  {kAllSites.begin(), kAllSites.end()}, seed);
    const DecodeConfig dc = decode_config(c, DecodeMode::cluster_only, 0.0);
    if (user.history.size() < 2) {
        r.skipped = true;
        for (const auto& rec : user.held_out) {
            r.outputs.push_back(generate(history_prompt(user, user.history, rec, c), model, nullptr, dc).tokens);
        }
        return r;
    }
    TrainOptions o;
    o.epochs = c.pul_epochs;
    o.lr = c.pul_lr;
    o.batch = c.adapter_batch;
    o.seed = seed;
    r.curve = sft_train(model, user_sft_examples(user, c), r.adapter, o);
    for (const auto& rec : user.held_out) {
        r.outputs.push_back(generate(history_prompt(user, user.history, rec, c), model, &r.adapter, dc).tokens);
    }
    return r;
}

MethodResult evaluate_generator(const std::vector<const UserProfile*>& users, const RecordGenerator& gen) {
    MethodResult r;
    for (const UserProfile* u : users) {
        if (u->held_out.empty()) {
            continue;
        }
        double r1 = 0.0, rl = 0.0;
        for (const auto& rec : u->held_out) {
            const TokenSeq out = gen(*u, rec);
            r1 += rouge1(out, rec.output).f1;
            rl += rougeL(out, rec.output).f1;
        }
        const auto n = static_cast<double>(u->held_out.size());
        r.rouge1_f1 += r1 / n;
        r.rougeL_f1 += rl / n;
        ++r.n_users;
    }
    if (r.n_users > 0) {
        r.rouge1_f1 /= r.n_users;
        r.rougeL_f1 /= r.n_users;
    }
    return r;
}

MethodResult evaluate_method(Method method, const Models& m, double beta) {
    const RunConfig& c = m.config;
    const auto users = m.corpus.users_in(Split::train);
    const auto adapters = adapter_pointers(m.adapters);
    switch (method) {
        case Method::non_pers: {
            const DecodeConfig dc = decode_config(c, DecodeMode::non_pers, 0.0);
            return evaluate_generator(users, [&](const UserProfile& u, const HistoryRecord& rec) {
                return generate(bare_prompt(u, rec, c), m.backbone, nullptr, dc).tokens;
            });
        }
        case Method::rag: {
            MethodResult r = evaluate_generator(users, [&](const UserProfile& u, const HistoryRecord& rec) {
                return run_baseline_rag(u.history, rec, m.backbone, c);
            });
            r.storage_bytes_per_user = mean_history_bytes(users);
            return r;
        }
        case Method::cluster_only: {
            const DecodeConfig dc = decode_config(c, DecodeMode::cluster_only, 0.0);
            return evaluate_generator(users, [&](const UserProfile& u, const HistoryRecord& rec) {
                const LoraAdapter* a = adapters[static_cast<std::size_t>(cluster_of(m, u.user_id))];
                return generate(history_prompt(u, u.history, rec, c), m.backbone, a, dc).tokens;
            });
        }
        case Method::vec_only: {
            const PersonaResult vec = train_vec_only(m);
            std::vector<const LoraAdapter*> none(adapters.size(), nullptr);
            return card_result(m, vec.head, vec.lambdas, beta, none);
        }
        case Method::per_user_lora: {
            std::map<std::string, PerUserLora> trained;
            for (const UserProfile* u : users) {
                trained.emplace(u->user_id, run_baseline_per_user_lora(*u, m.backbone, c));
            }
            std::map<std::string, std::size_t> cursor;
            MethodResult r = evaluate_generator(users, [&](const UserProfile& u, const HistoryRecord&) {
                return trained.at(u.user_id).outputs.at(cursor[u.user_id]++);
            });
            r.storage_bytes_per_user = static_cast<double>(per_user_lora_bytes(m.backbone.config(), c.pul_rank));
            return r;
        }
        case Method::card:
            return card_result(m, m.head, m.lambdas, beta, adapters);
    }
    throw InvalidArgument("unknown method");
}

namespace {

ExperimentRow make_row(const std::string& method, const std::string& axis, const std::string& value,
                       std::uint64_t seed, const MethodResult& r) {
    ExperimentRow row;
    row.method = method;
    row.axis = axis;
    row.axis_value = value;
    row.seed = seed;
    row.n_users = r.n_users;
    row.rouge1_f1 = r.rouge1_f1;
    row.rougeL_f1 = r.rougeL_f1;
    row.storage_bytes_per_user = r.storage_bytes_per_user;
    return row;
}

/// Copy of `base` with a new clustering and everything downstream of it retrained.
Models recluster(const Models& base, int K) {
    Models m = base;
    m.config.K = K;
    ClusterResult cr = cluster_users(m.corpus, m.config, K);
    m.featurizer = std::move(cr.featurizer);
    m.clustering = std::move(cr.clustering);
    m.adapters = train_cluster_adapters(m.backbone, m.corpus, m.clustering, m.config);
    const auto ptrs = adapter_pointers(m.adapters);
    PairSet ps = build_pairs(m.corpus, m.clustering, m.backbone, ptrs, pair_options(m.config));
    m.pairs = std::move(ps.pairs);
    m.pair_stats = ps.stats;
    PersonaResult pr = train_persona(m.backbone, ptrs, m.pairs, m.config, m.config.J, m.config.S);
    m.head = std::move(pr.head);
    m.lambdas = std::move(pr.lambdas);
    return m;
}

/// History-length sweep point: every user keeps only the first L history
/// records; cluster and lambda are re-estimated from them.
MethodResult history_length_result(const Models& m, int L) {
    const RunConfig& c = m.config;
    const auto adapters = adapter_pointers(m.adapters);
    const DecodeConfig dc = decode_config(c, DecodeMode::card, c.beta);
    const NewUserOptions nuo = new_user_options(c);
    MethodResult r = evaluate_generator(m.corpus.users_in(Split::train), [&, cache = std::map<std::string, NewUserFit>{}](
                                                                             const UserProfile& u,
                                                                             const HistoryRecord& rec) mutable {
        const auto masked = mask_history(u.history, L);
        auto it = cache.find(u.user_id);
        if (it == cache.end()) {
            NewUserFit fit;
            if (masked.empty()) {
                fit.cluster = largest_cluster(m.clustering);
                fit.vector = {u.user_id, Vec::Zero(m.head.J)};
                fit.degenerate = true;
            } else {
                fit = fit_new_user(u.user_id, masked, m.clustering, m.featurizer, m.backbone, adapters, m.head, nuo);
            }
            it = cache.emplace(u.user_id, std::move(fit)).first;
        }
        const NewUserFit& fit = it->second;
        const Prompt p = build_prompt(rec.raw_input, masked, c.max_history, c.max_prompt_len, u.user_id);
        return generate(p, m.backbone, adapters[static_cast<std::size_t>(fit.cluster)], dc, &m.head,
                        &fit.vector.lambda)
            .tokens;
    });
    r.storage_bytes_per_user = 4.0 * m.head.J;
    return r;
}

// Backbones depend on the pretraining fields only, so every seed shares them.
// Keyed by depth; the S sweep may need a deeper one.
using BackboneCache = std::map<int, Backbone>;

void run_sweep(const std::string& axis, const Models& m, std::uint64_t seed, std::vector<ExperimentRow>& rows,
               BackboneCache& backbones) {
    const RunConfig& c = m.config;
    const auto adapters = adapter_pointers(m.adapters);
    if (axis == "beta") {
        for (double b : c.beta_grid) {
            rows.push_back(make_row("card", axis, fmt(b), seed, card_result(m, m.head, m.lambdas, b, adapters)));
        }
    } else if (axis == "J") {
        for (int J : c.J_grid) {
            const PersonaResult pr = train_persona(m.backbone, adapters, m.pairs, c, J, c.S);
            rows.push_back(make_row("card", axis, std::to_string(J), seed,
                                    card_result(m, pr.head, pr.lambdas, c.beta, adapters)));
        }
    } else if (axis == "S") {
        const int deepest = *std::max_element(c.S_grid.begin(), c.S_grid.end());
        // Tapping S layers needs at least S blocks; a deeper backbone is built when required.
        Models deep_storage;
        const Models* deep = &m;
        if (deepest > c.n_layers) {
            RunConfig dc = c;
            dc.n_layers = deepest;
            auto it = backbones.find(deepest);
            deep_storage = build_models(dc, it == backbones.end() ? nullptr : &it->second);
            backbones.emplace(deepest, deep_storage.backbone);
            deep = &deep_storage;
        }
        const auto deep_adapters = adapter_pointers(deep->adapters);
        for (int S : c.S_grid) {
            const PersonaResult pr = train_persona(deep->backbone, deep_adapters, deep->pairs, deep->config, c.J, S);
            rows.push_back(make_row("card", axis, std::to_string(S), seed,
                                    card_result(*deep, pr.head, pr.lambdas, c.beta, deep_adapters)));
        }
    } else if (axis == "K") {
        for (int K : c.K_grid) {
            const Models mk = K == c.K ? m : recluster(m, K);
            rows.push_back(make_row("cluster_only", axis, std::to_string(K), seed,
                                    evaluate_method(Method::cluster_only, mk, c.beta)));
            rows.push_back(make_row("card", axis, std::to_string(K), seed, evaluate_method(Method::card, mk, c.beta)));
        }
    } else if (axis == "L") {
        for (int L : c.L_grid) {
            rows.push_back(make_row("card", axis, std::to_string(L), seed, history_length_result(m, L)));
        }
    } else {
        throw ConfigError("unknown sweep axis '" + axis + "' (expected beta, J, S, K or L)");
    }
}

}  // namespace

ExperimentReport run_matrix(const RunConfig& c, const Models* preset) {
    c.validate();
    ExperimentReport report;
    report.config_hash = config_hash(c);
    std::vector<Method> methods;
    for (const auto& s : c.methods) {
        methods.push_back(method_from_string(s));
    }
    for (const auto& axis : c.sweeps) {
        if (axis != "beta" && axis != "J" && axis != "S" && axis != "K" && axis != "L") {
            throw ConfigError("unknown sweep axis '" + axis + "' (expected beta, J, S, K or L)");
        }
    }
    if (methods.empty() && c.sweeps.empty()) {
        return report;
    }
    BackboneCache backbones;
    if (preset != nullptr) {
        backbones.emplace(c.n_layers, preset->backbone);
    }
    for (std::uint64_t seed : c.seeds) {
        RunConfig cs = c;
        cs.seed = seed;
        Models built;
        const Models* m = preset;
        if (m == nullptr || m->config.seed != seed) {
            auto it = backbones.find(c.n_layers);
            built = build_models(cs, it == backbones.end() ? nullptr : &it->second);
            backbones.emplace(c.n_layers, built.backbone);
            m = &built;
        }
        for (Method method : methods) {
            report.rows.push_back(make_row(to_string(method), "none", "", seed, evaluate_method(method, *m, c.beta)));
        }
        for (const auto& axis : c.sweeps) {
            run_sweep(axis, *m, seed, report.rows, backbones);
        }
    }
    return report;
}

void write_csv(const ExperimentReport& report, const std::string& axis, std::ostream& out) {
    out << "# config_hash=" << report.config_hash << '\n';
    out << "method,axis,axis_value,seed,n_users,rouge1_f1,rougeL_f1,storage_bytes_per_user\n";
    char buf[64];
    for (const auto& r : report.rows) {
        if (r.axis != axis) {
            continue;
        }
        out << r.method << ',' << r.axis << ',' << r.axis_value << ',' << r.seed << ',' << r.n_users << ',';
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.1f", r.rouge1_f1, r.rougeL_f1, r.storage_bytes_per_user);
        out << buf << '\n';
    }
}

std::vector<std::string> write_report(const ExperimentReport& report, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::set<std::string> axes = {"none"};
    for (const auto& r : report.rows) {
        axes.insert(r.axis);
    }
    std::vector<std::string> paths;
    for (const auto& axis : axes) {
        const std::string path = dir + "/" + (axis == "none" ? std::string("summary.csv") : "sweep_" + axis + ".csv");
        std::ofstream out(path);
        if (!out) {
            throw std::runtime_error("cannot write " + path);
        }
        write_csv(report, axis, out);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace card
