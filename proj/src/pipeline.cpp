#include "card/pipeline.hpp"

#include "card/decode.hpp"
#include "card/errors.hpp"
#include "card/evalharness.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace card {

namespace fs = std::filesystem;
using json = nlohmann::json;

json Manifest::to_json() const {
    json stages_j = json::array();
    for (const auto& s : stages) {
        stages_j.push_back({{"stage", s.stage}, {"inputs", s.inputs}, {"outputs", s.outputs}, {"wall_time_s", s.wall_time_s}});
    }
    return {{"config_hash", config_hash}, {"stages", stages_j}};
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    return buf;
}

namespace {

class StageContext {
public:
    StageContext(const RunConfig& c, StageRecord& rec) : cfg(c), paths(c.out_dir), rec_(rec) {}

    /// Records `path` as an input; throws when absent.
    void need(const std::string& path, const std::string& producer) {
        if (!fs::exists(path)) {
            throw MissingPrerequisite(path + " is missing; run stage '" + producer + "' first", producer);
        }
        rec_.inputs[path] = file_hash(path);
    }
    void need_archive(const std::string& prefix, const std::string& producer) {
        need(prefix + ".json", producer);
        need(prefix + ".bin", producer);
    }
    void produced(const std::string& path) { rec_.outputs[path] = file_hash(path); }
    void produced_archive(const std::string& prefix) {
        produced(prefix + ".json");
        produced(prefix + ".bin");
    }

    Corpus corpus() {
        need(paths.users(), "corpus");
        need(paths.vocab(), "corpus");
        return load_corpus(paths.users(), paths.vocab());
    }
    Backbone backbone() {
        need_archive(paths.backbone(), "pretrain");
        return Backbone::from_archive(TensorArchive::load(paths.backbone()));
    }
    std::pair<Clustering, Featurizer> clusters(const Vocabulary& vocab) {
        need(paths.clusters(), "cluster");
        return load_clustering(paths.clusters(), vocab);
    }
    std::vector<LoraAdapter> adapters(int K) {
        std::vector<LoraAdapter> out;
        for (int k = 0; k < K; ++k) {
            need_archive(paths.adapter(k), "train-cluster");
            out.push_back(LoraAdapter::from_archive(TensorArchive::load(paths.adapter(k))));
        }
        return out;
    }
    std::pair<PersonaHead, UserVectorTable> persona() {
        need_archive(paths.persona(), "train-persona");
        const TensorArchive a = TensorArchive::load(paths.persona());
        return {PersonaHead::from_archive(a), UserVectorTable::from_archive(a)};
    }

    const RunConfig& cfg;
    ArtifactPaths paths;

private:
    StageRecord& rec_;
};

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << j.dump(2) << '\n';
}

std::vector<HistoryRecord> read_history_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read history file " + path);
    }
    std::vector<HistoryRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        HistoryRecord r;
        r.index = j.value("index", static_cast<int>(out.size()));
        r.raw_input = j.at("input").get<TokenSeq>();
        r.output = j.at("output").get<TokenSeq>();
        out.push_back(std::move(r));
    }
    return out;
}

void stage_corpus(StageContext& ctx) {
    const Corpus c = synth_corpus(corpus_options(ctx.cfg));
    save_corpus(c, ctx.paths.users(), ctx.paths.vocab());
    ctx.produced(ctx.paths.users());
    ctx.produced(ctx.paths.vocab());
}

void stage_pretrain(StageContext& ctx) {
    TrainCurve curve;
    const Backbone b = train_backbone(ctx.cfg, &curve);
    TensorArchive a = b.to_archive();
    a.metadata["epoch_loss"] = curve.epoch_loss;
    a.save(ctx.paths.backbone());
    ctx.produced_archive(ctx.paths.backbone());
}

void stage_cluster(StageContext& ctx) {
    const Corpus c = ctx.corpus();
    const ClusterResult r = cluster_users(c, ctx.cfg, ctx.cfg.K);
    save_clustering(r.clustering, r.featurizer, ctx.paths.clusters());
    ctx.produced(ctx.paths.clusters());
}

void stage_train_cluster(StageContext& ctx) {
    const Corpus c = ctx.corpus();
    const Backbone b = ctx.backbone();
    const auto [clustering, featurizer] = ctx.clusters(c.vocab);
    const auto adapters = train_cluster_adapters(b, c, clustering, ctx.cfg);
    for (int k = 0; k < clustering.K; ++k) {
        adapters[static_cast<std::size_t>(k)].to_archive().save(ctx.paths.adapter(k));
        ctx.produced_archive(ctx.paths.adapter(k));
    }
}

void stage_pairs(StageContext& ctx) {
    const Corpus c = ctx.corpus();
    const Backbone b = ctx.backbone();
    const auto [clustering, featurizer] = ctx.clusters(c.vocab);
    const auto adapters = ctx.adapters(clustering.K);
    const PairSet ps = build_pairs(c, clustering, b, adapter_pointers(adapters), pair_options(ctx.cfg));
    save_pairs_jsonl(ps.pairs, ctx.paths.pairs());
    write_json(ctx.paths.pair_stats(), {{"candidates", ps.stats.candidates},
                                        {"dropped", ps.stats.dropped},
                                        {"kept", ps.pairs.size()},
                                        {"mean_overlap", ps.stats.mean_overlap}});
    ctx.produced(ctx.paths.pairs());
    ctx.produced(ctx.paths.pair_stats());
}

void stage_train_persona(StageContext& ctx) {
    const Corpus c = ctx.corpus();
    const Backbone b = ctx.backbone();
    const auto [clustering, featurizer] = ctx.clusters(c.vocab);
    const auto adapters = ctx.adapters(clustering.K);
    ctx.need(ctx.paths.pairs(), "pairs");
    const auto pairs = load_pairs_jsonl(ctx.paths.pairs());

    std::vector<std::uint64_t> before;
    before.push_back(b.checksum());
    for (const auto& a : adapters) {
        before.push_back(a.checksum());
    }
    const PersonaResult r = train_persona(b, adapter_pointers(adapters), pairs, ctx.cfg, ctx.cfg.J, ctx.cfg.S);
    std::vector<std::uint64_t> after;
    after.push_back(b.checksum());
    for (const auto& a : adapters) {
        after.push_back(a.checksum());
    }
    if (before != after) {
        throw NumericalFailure("frozen parameters changed during head training");
    }

    TensorArchive a = r.head.to_archive();
    r.lambdas.add_to_archive(a);
    a.save(ctx.paths.persona());
    r.lambdas.save_jsonl(ctx.paths.lambdas());
    write_json(ctx.paths.train_report(), {{"initial_loss", r.report.initial_loss},
                                          {"initial_accuracy", r.report.initial_accuracy},
                                          {"epoch_loss", r.report.epoch_loss},
                                          {"epoch_accuracy", r.report.epoch_accuracy},
                                          {"trained", r.report.trained},
                                          {"frozen_checksums", before}});
    ctx.produced_archive(ctx.paths.persona());
    ctx.produced(ctx.paths.lambdas());
    ctx.produced(ctx.paths.train_report());
}

void stage_adopt_user(StageContext& ctx, const StageOptions& opt) {
    const Corpus c = ctx.corpus();
    const Backbone b = ctx.backbone();
    const auto [clustering, featurizer] = ctx.clusters(c.vocab);
    const auto adapters = ctx.adapters(clustering.K);
    const auto [head, lambdas] = ctx.persona();

    std::vector<std::pair<std::string, std::vector<HistoryRecord>>> todo;
    if (opt.history_path) {
        ctx.need(*opt.history_path, "corpus");
        todo.emplace_back(opt.new_user_id, read_history_jsonl(*opt.history_path));
    } else {
        for (const UserProfile* u : c.users_in(Split::test)) {
            todo.emplace_back(u->user_id, u->history);
        }
    }
    std::ofstream out(ctx.paths.adopted());
    if (!out) {
        throw std::runtime_error("cannot write " + ctx.paths.adopted());
    }
    for (const auto& [id, history] : todo) {
        const NewUserFit fit = fit_new_user(id, history, clustering, featurizer, b, adapter_pointers(adapters), head,
                                            new_user_options(ctx.cfg));
        if (fit.degenerate) {
            std::cerr << "warning: every preference pair of " << id << " is degenerate; user vector left at zero\n";
        }
        std::vector<float> lam(fit.vector.lambda.data(), fit.vector.lambda.data() + fit.vector.lambda.size());
        out << json{{"user_id", id}, {"cluster", fit.cluster}, {"lambda", lam}, {"degenerate", fit.degenerate},
                    {"n_pairs", fit.n_pairs}}
                   .dump()
            << '\n';
    }
    out.close();
    ctx.produced(ctx.paths.adopted());
}

void stage_generate(StageContext& ctx, const StageOptions& opt) {
    const Corpus c = ctx.corpus();
    const Backbone b = ctx.backbone();
    const auto [clustering, featurizer] = ctx.clusters(c.vocab);
    const auto adapters = ctx.adapters(clustering.K);
    const DecodeMode mode = decode_mode_from_string(opt.mode);

    std::optional<PersonaHead> head;
    std::map<std::string, std::pair<int, Vec>> vectors;  // user -> (cluster, lambda)
    if (mode == DecodeMode::card) {
        auto [h, lambdas] = ctx.persona();
        head = std::move(h);
        for (const auto& [id, v] : lambdas.vectors) {
            vectors[id] = {clustering.assignments.count(id) ? clustering.assignments.at(id) : 0, v};
        }
    }
    std::map<std::string, int> adopted_cluster;
    if (fs::exists(ctx.paths.adopted())) {
        ctx.need(ctx.paths.adopted(), "adopt-user");
        std::ifstream in(ctx.paths.adopted());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const json j = json::parse(line);
            const auto vals = j.at("lambda").get<std::vector<float>>();
            Vec v(static_cast<Eigen::Index>(vals.size()));
            for (std::size_t i = 0; i < vals.size(); ++i) {
                v(static_cast<Eigen::Index>(i)) = vals[i];
            }
            const auto id = j.at("user_id").get<std::string>();
            adopted_cluster[id] = j.at("cluster").get<int>();
            vectors[id] = {adopted_cluster[id], v};
        }
    }

    DecodeConfig dc;
    dc.beta = ctx.cfg.beta;
    dc.top_k = ctx.cfg.top_k;
    dc.max_new_tokens = ctx.cfg.max_new_tokens;
    dc.repetition_penalty = ctx.cfg.repetition_penalty;
    dc.mode = mode;

    std::vector<const UserProfile*> users;
    if (opt.user) {
        users.push_back(&c.user(*opt.user));
    } else {
        users = c.users_in(Split::train);
    }
    std::ofstream out(ctx.paths.generations());
    std::ofstream trace_out;
    if (opt.trace) {
        trace_out.open(ctx.paths.trace());
    }
    for (const UserProfile* u : users) {
        int cluster = 0;
        if (auto it = clustering.assignments.find(u->user_id); it != clustering.assignments.end()) {
            cluster = it->second;
        } else if (auto jt = adopted_cluster.find(u->user_id); jt != adopted_cluster.end()) {
            cluster = jt->second;
        } else if (mode != DecodeMode::non_pers) {
            throw MissingPrerequisite("user '" + u->user_id + "' has no cluster; run stage 'adopt-user' first",
                                      "adopt-user");
        }
        const Vec* lam = nullptr;
        if (mode == DecodeMode::card) {
            auto it = vectors.find(u->user_id);
            if (it == vectors.end()) {
                throw MissingPrerequisite("no user vector for '" + u->user_id + "'; run stage 'adopt-user' first",
                                          "adopt-user");
            }
            lam = &it->second.second;
        }
        for (const auto& rec : u->held_out) {
            const Prompt p = mode == DecodeMode::non_pers
                                 ? build_prompt(rec.raw_input, {}, 0, ctx.cfg.max_prompt_len, u->user_id)
                                 : build_prompt(rec.raw_input, u->history, ctx.cfg.max_history,
                                                ctx.cfg.max_prompt_len, u->user_id);
            const GenerateResult g = generate(p, b, &adapters.at(static_cast<std::size_t>(cluster)), dc,
                                              head ? &*head : nullptr, lam, opt.trace);
            out << json{{"user_id", u->user_id}, {"record_index", rec.index}, {"mode", opt.mode},
                        {"tokens", g.tokens}, {"text", c.vocab.render(g.tokens)}}
                       .dump()
                << '\n';
            if (opt.trace) {
                write_trace_jsonl(g.trace, dc.beta, trace_out);
            }
        }
    }
    out.close();
    ctx.produced(ctx.paths.generations());
    if (opt.trace) {
        trace_out.close();
        ctx.produced(ctx.paths.trace());
    }
}

Models load_models(StageContext& ctx) {
    Models m;
    m.config = ctx.cfg;
    m.corpus = ctx.corpus();
    m.backbone = ctx.backbone();
    auto [clustering, featurizer] = ctx.clusters(m.corpus.vocab);
    m.clustering = std::move(clustering);
    m.featurizer = std::move(featurizer);
    m.adapters = ctx.adapters(m.clustering.K);
    ctx.need(ctx.paths.pairs(), "pairs");
    m.pairs = load_pairs_jsonl(ctx.paths.pairs());
    auto [head, lambdas] = ctx.persona();
    m.head = std::move(head);
    m.lambdas = std::move(lambdas);
    return m;
}

void stage_eval(StageContext& ctx) {
    const Models m = load_models(ctx);
    const ExperimentReport report = run_matrix(ctx.cfg, &m);
    for (const auto& p : write_report(report, ctx.paths.reports())) {
        ctx.produced(p);
    }
}

}  // namespace

Models load_models(const RunConfig& config) {
    StageRecord scratch;
    StageContext ctx(config, scratch);
    return load_models(ctx);
}

Manifest run_pipeline(const std::vector<std::string>& stages, const RunConfig& config, const StageOptions& options) {
    config.validate();
    for (const auto& s : stages) {
        if (std::find(kStages.begin(), kStages.end(), s) == kStages.end()) {
            throw ConfigError("unknown stage '" + s + "'");
        }
    }
    fs::create_directories(config.out_dir);
    Manifest manifest;
    manifest.config_hash = config_hash(config);
    const ArtifactPaths paths(config.out_dir);
    for (const auto& s : stages) {
        StageRecord rec;
        rec.stage = s;
        StageContext ctx(config, rec);
        const auto t0 = std::chrono::steady_clock::now();
        if (s == "corpus") {
            stage_corpus(ctx);
        } else if (s == "pretrain") {
            stage_pretrain(ctx);
        } else if (s == "cluster") {
            stage_cluster(ctx);
        } else if (s == "train-cluster") {
            stage_train_cluster(ctx);
        } else if (s == "pairs") {
            stage_pairs(ctx);
        } else if (s == "train-persona") {
            stage_train_persona(ctx);
        } else if (s == "adopt-user") {
            stage_adopt_user(ctx, options);
        } else if (s == "generate") {
            stage_generate(ctx, options);
        } else {
            stage_eval(ctx);
        }
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest.stages.push_back(std::move(rec));
        write_json(paths.manifest(), manifest.to_json());
    }
    write_json(paths.manifest(), manifest.to_json());
    return manifest;
}

}  // namespace card
