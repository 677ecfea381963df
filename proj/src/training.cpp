#include "card/training.hpp"

#include "card/errors.hpp"

#include <algorithm>

namespace card {

CorpusOptions corpus_options(const RunConfig& c) {
    CorpusOptions o;
    o.n_archetypes = c.n_archetypes;
    o.users_per_archetype = c.users_per_archetype;
    o.records_per_user = c.records_per_user;
    o.seed = c.seed;
    o.vocab_size = c.vocab_size;
    o.held_out_fraction = c.held_out_fraction;
    o.held_out_users_per_archetype = c.new_users_per_archetype;
    o.archetype_bias = c.archetype_bias;
    o.idio_bias = c.idio_bias;
    return o;
}

BackboneConfig backbone_config(const RunConfig& c) {
    BackboneConfig b;
    b.vocab_size = c.vocab_size;
    b.d_model = c.d_model;
    b.n_layers = c.n_layers;
    b.n_heads = c.n_heads;
    b.max_seq = c.max_seq;
    b.ffn_dim = c.ffn_dim;
    b.seed = c.seed;
    return b;
}

PairOptions pair_options(const RunConfig& c) {
    PairOptions p;
    p.max_history = c.max_history;
    p.max_prompt_len = c.max_prompt_len;
    p.max_new_tokens = c.max_new_tokens;
    p.repetition_penalty = c.repetition_penalty;
    return p;
}

NewUserOptions new_user_options(const RunConfig& c) {
    NewUserOptions o;
    o.lr = c.lambda_lr;
    o.epochs = c.lambda_epochs;
    o.batch = c.lambda_batch;
    o.beta = c.train_beta;
    o.top_k = c.top_k;
    o.seed = c.seed;
    o.pairs = pair_options(c);
    return o;
}

SftExample make_sft_example(const Prompt& prompt, const TokenSeq& output) {
    SftExample ex;
    ex.tokens = prompt.tokens;
    ex.tokens.insert(ex.tokens.end(), output.begin(), output.end());
    ex.tokens.push_back(special::EOS);
    ex.target_start = static_cast<int>(prompt.tokens.size());
    return ex;
}

std::vector<SftExample> user_sft_examples(const UserProfile& user, const RunConfig& c) {
    std::vector<SftExample> out;
    for (const auto& rec : user.history) {
        const Prompt p =
            build_prompt(rec.raw_input, history_before(user, rec.index), c.max_history, c.max_prompt_len, user.user_id);
        out.push_back(make_sft_example(p, rec.output));
    }
    return out;
}

Corpus pretrain_corpus(const RunConfig& c) {
    CorpusOptions o = corpus_options(c);
    o.n_archetypes = c.pretrain_archetypes;
    o.users_per_archetype = c.pretrain_users_per_archetype;
    o.idio_bias = c.pretrain_idio_bias;
    o.held_out_fraction = 0.0;
    o.held_out_users_per_archetype = 0;
    o.seed = c.pretrain_seed * 0x9E3779B97F4A7C15ULL + 0x5EED;
    return synth_corpus(o);
}

std::vector<SftExample> pretrain_examples(const Corpus& corpus, const RunConfig& c) {
    Rng rng(c.pretrain_seed * 0xD1B54A32D192ED03ULL + 5);
    std::bernoulli_distribution with_history(c.pretrain_history_prob);
    std::vector<SftExample> out;
    for (const UserProfile& user : corpus.users) {
        const UserProfile* u = &user;
        for (const auto& rec : u->history) {
            const bool h = with_history(rng);
            const Prompt p = build_prompt(rec.raw_input, h ? history_before(*u, rec.index) : std::vector<HistoryRecord>{},
                                          h ? c.max_history : 0, c.max_prompt_len, u->user_id);
            out.push_back(make_sft_example(p, rec.output));
        }
    }
    return out;
}

Backbone train_backbone(const RunConfig& c, TrainCurve* curve) {
    BackboneConfig bc = backbone_config(c);
    bc.seed = c.pretrain_seed;
    Backbone model(bc);
    TrainOptions o;
    o.epochs = c.pretrain_epochs;
    o.lr = c.pretrain_lr;
    o.batch = c.pretrain_batch;
    o.seed = c.pretrain_seed;
    TrainCurve tc = pretrain(model, pretrain_examples(pretrain_corpus(c), c), o);
    if (curve != nullptr) {
        *curve = std::move(tc);
    }
    return model;
}

ClusterResult cluster_users(const Corpus& corpus, const RunConfig& c, int K) {
    ClusterResult r{Featurizer(corpus.vocab, c.embed_dim, c.seed), {}};
    const auto train = corpus.users_in(Split::train);
    r.featurizer.fit_idf(train);
    std::vector<UserEmbedding> emb;
    emb.reserve(train.size());
    for (const UserProfile* u : train) {
        emb.push_back(r.featurizer.embed(*u));
    }
    KMeansOptions ko;
    ko.K = K;
    ko.seed = c.seed;
    ko.restarts = c.kmeans_restarts;
    r.clustering = kmeans_fit(emb, ko);
    return r;
}

std::vector<LoraAdapter> train_cluster_adapters(const Backbone& model, const Corpus& corpus,
                                                const Clustering& clustering, const RunConfig& c) {
    std::vector<std::vector<SftExample>> data(static_cast<std::size_t>(clustering.K));
    for (const UserProfile* u : corpus.users_in(Split::train)) {
        auto it = clustering.assignments.find(u->user_id);
        if (it == clustering.assignments.end()) {
            throw ConfigError("user '" + u->user_id + "' has no cluster");
        }
        auto ex = user_sft_examples(*u, c);
        auto& dst = data[static_cast<std::size_t>(it->second)];
        dst.insert(dst.end(), ex.begin(), ex.end());
    }
    std::vector<LoraAdapter> out;
    for (int k = 0; k < clustering.K; ++k) {
        LoraAdapter a = LoraAdapter::init(model.config(), c.lora_rank, c.lora_alpha, c.lora_dropout,
                                          {kAllSites.begin(), kAllSites.end()}, c.seed * 1000 + static_cast<std::uint64_t>(k));
        TrainOptions o;
        o.epochs = c.adapter_epochs;
        o.lr = c.adapter_lr;
        o.batch = c.adapter_batch;
        o.seed = c.seed * 1000 + static_cast<std::uint64_t>(k);
        sft_train(model, data[static_cast<std::size_t>(k)], a, o);
        out.push_back(std::move(a));
    }
    return out;
}

std::vector<const LoraAdapter*> adapter_pointers(const std::vector<LoraAdapter>& adapters) {
    std::vector<const LoraAdapter*> out;
    for (const auto& a : adapters) {
        out.push_back(&a);
    }
    return out;
}

PersonaResult train_persona(const Backbone& model, const std::vector<const LoraAdapter*>& cluster_adapters,
                            const std::vector<PreferencePair>& pairs, const RunConfig& c, int J, int S) {
    if (pairs.empty()) {
        throw InvalidArgument("train_persona: no preference pairs");
    }
    std::vector<PairFeatures> feats;
    feats.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (p.cluster < 0 || p.cluster >= static_cast<int>(cluster_adapters.size())) {
            throw ConfigError("pair references cluster " + std::to_string(p.cluster) + " without an adapter");
        }
        feats.push_back(pair_features(p, model, cluster_adapters[static_cast<std::size_t>(p.cluster)], S, c.top_k));
    }
    PersonaResult r;
    r.head = PersonaHead::init(model.config().vocab_size, S, model.config().d_model, J, c.seed);
    r.lambdas.J = J;
    BtOptions o;
    o.beta = c.train_beta;
    o.lr = c.persona_lr;
    o.epochs = c.persona_epochs;
    o.batch = c.persona_batch;
    o.seed = c.seed;
    r.report = bt_train(feats, r.head, r.lambdas, o);
    return r;
}

Models build_models(const RunConfig& c, const Backbone* pretrained) {
    c.validate();
    Models m;
    m.config = c;
    m.corpus = synth_corpus(corpus_options(c));
    m.backbone = pretrained != nullptr ? *pretrained : train_backbone(c);
    ClusterResult cr = cluster_users(m.corpus, c, c.K);
    m.featurizer = std::move(cr.featurizer);
    m.clustering = std::move(cr.clustering);
    m.adapters = train_cluster_adapters(m.backbone, m.corpus, m.clustering, c);
    const auto ptrs = adapter_pointers(m.adapters);
    PairSet ps = build_pairs(m.corpus, m.clustering, m.backbone, ptrs, pair_options(c));
    m.pairs = std::move(ps.pairs);
    m.pair_stats = ps.stats;
    PersonaResult pr = train_persona(m.backbone, ptrs, m.pairs, c, c.J, c.S);
    m.head = std::move(pr.head);
    m.lambdas = std::move(pr.lambdas);
    return m;
}

}  // namespace card
