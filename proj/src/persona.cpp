#include "card/persona.hpp"

#include "card/decode.hpp"
#include "card/errors.hpp"
#include "card/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace card {

using json = nlohmann::json;

PersonaHead PersonaHead::init(int vocab_size, int tap_depth, int d_model, int J, std::uint64_t seed) {
    if (vocab_size < 1 || tap_depth < 1 || d_model < 1 || J < 1) {
        throw InvalidArgument("persona head: all dimensions must be positive");
    }
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 17);
    PersonaHead h;
    h.J = J;
    h.S = tap_depth;
    h.d_model = d_model;
    const int in = tap_depth * d_model;
    h.P = randn(J, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    h.bias = Mat::Zero(1, J);
    h.U = randn(vocab_size, J, 0.02, rng);
    snap_to_f32(h.P);
    snap_to_f32(h.U);
    return h;
}

std::uint64_t PersonaHead::checksum() const {
    return card::checksum(U, card::checksum(bias, card::checksum(P)));
}

TensorArchive PersonaHead::to_archive() const {
    TensorArchive a;
    a.metadata = {{"kind", "persona_head"}, {"J", J}, {"S", S}, {"d_model", d_model}, {"vocab_size", vocab_size()}};
    a.add("P", P);
    a.add("bias", bias);
    a.add("U", U);
    return a;
}

PersonaHead PersonaHead::from_archive(const TensorArchive& a) {
    if (a.metadata.value("kind", "") != "persona_head") {
        throw InvalidArgument("archive does not hold a persona head");
    }
    PersonaHead h;
    h.J = a.metadata.at("J").get<int>();
    h.S = a.metadata.at("S").get<int>();
    h.d_model = a.metadata.at("d_model").get<int>();
    h.P = a.get("P");
    h.bias = a.get("bias");
    h.U = a.get("U");
    if (h.P.rows() != h.J || h.P.cols() != h.S * h.d_model || h.U.cols() != h.J || h.bias.cols() != h.J) {
        throw InvalidArgument("persona head archive has inconsistent shapes");
    }
    return h;
}

const Vec& UserVectorTable::at(const std::string& user_id) const {
    auto it = vectors.find(user_id);
    if (it == vectors.end()) {
        throw InvalidArgument("no user vector for '" + user_id + "'");
    }
    return it->second;
}

Vec& UserVectorTable::ensure(const std::string& user_id) {
    auto it = vectors.find(user_id);
    if (it == vectors.end()) {
        it = vectors.emplace(user_id, Vec::Zero(J)).first;
    }
    return it->second;
}

std::uint64_t UserVectorTable::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [id, v] : vectors) {
        h = fnv1a(id.data(), id.size(), h);
        h = fnv1a(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()), h);
    }
    return h;
}

void UserVectorTable::save_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    for (const auto& [id, v] : vectors) {
        std::vector<float> vals(v.data(), v.data() + v.size());
        out << json{{"user_id", id}, {"lambda", vals}}.dump() << '\n';
    }
}

UserVectorTable UserVectorTable::load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingPrerequisite("user vectors not found: " + path, "train-persona");
    }
    UserVectorTable t;
    t.J = -1;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        const auto vals = j.at("lambda").get<std::vector<float>>();
        if (t.J < 0) {
            t.J = static_cast<int>(vals.size());
        } else if (t.J != static_cast<int>(vals.size())) {
            throw InvalidArgument("user vectors of different lengths in " + path);
        }
        Vec v(static_cast<Eigen::Index>(vals.size()));
        for (std::size_t i = 0; i < vals.size(); ++i) {
            v(static_cast<Eigen::Index>(i)) = vals[i];
        }
        t.vectors[j.at("user_id").get<std::string>()] = v;
    }
    if (t.J < 0) {
        t.J = 0;
    }
    return t;
}

void UserVectorTable::add_to_archive(TensorArchive& a) const {
    Mat m(static_cast<Eigen::Index>(vectors.size()), J);
    json ids = json::array();
    Eigen::Index r = 0;
    for (const auto& [id, v] : vectors) {
        m.row(r++) = v.transpose();
        ids.push_back(id);
    }
    a.add("lambda", m);
    a.metadata["lambda_users"] = ids;
}

UserVectorTable UserVectorTable::from_archive(const TensorArchive& a) {
    UserVectorTable t;
    const Mat& m = a.get("lambda");
    t.J = static_cast<int>(m.cols());
    const auto ids = a.metadata.at("lambda_users").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        t.vectors[ids[i]] = m.row(static_cast<Eigen::Index>(i)).transpose();
    }
    return t;
}

Vec preference_signal(const RowVec& h, const Vec& lambda, const PersonaHead& head) {
    if (h.size() != head.P.cols()) {
        throw InvalidArgument("preference_signal: hidden state has " + std::to_string(h.size()) +
                              " entries, head expects " + std::to_string(head.P.cols()));
    }
    if (lambda.size() != head.J) {
        throw InvalidArgument("preference_signal: user vector has " + std::to_string(lambda.size()) +
                              " entries, head expects J=" + std::to_string(head.J));
    }
    const Vec z = head.P * h.transpose() + head.bias.row(0).transpose();
    return z.cwiseProduct(lambda);
}

SequenceFeatures sequence_features(const Backbone& model, const LoraAdapter* adapter, const TokenSeq& prompt,
                                   const TokenSeq& y, int tap_depth, int top_k) {
    if (y.empty()) {
        throw InvalidArgument("sequence_features: empty target sequence");
    }
    if (prompt.empty()) {
        throw InvalidArgument("sequence_features: empty prompt");
    }
    TokenSeq seq = prompt;
    seq.insert(seq.end(), y.begin(), y.end() - 1);
    const ForwardOutput fo = model.forward(seq, adapter, tap_depth);
    SequenceFeatures out;
    out.reserve(y.size());
    const auto p0 = static_cast<Eigen::Index>(prompt.size()) - 1;
    for (std::size_t t = 0; t < y.size(); ++t) {
        const Eigen::Index row = p0 + static_cast<Eigen::Index>(t);
        StepFeature f;
        f.baseline = fo.logits.row(row);
        f.hidden = fo.tapped_hidden.row(row);
        f.topk = top_k_indices(f.baseline, top_k);
        f.target = y[t];
        if (f.target < 0 || f.target >= f.baseline.size()) {
            throw InvalidArgument("sequence_features: target token out of vocabulary");
        }
        out.push_back(std::move(f));
    }
    return out;
}

namespace {

struct StepWork {
    Vec z, s;
    std::vector<double> edited_topk;
    double lse = 0.0;
    double logp = 0.0;
};

StepWork score_step(const StepFeature& f, const PersonaHead& head, const Vec& lambda, double beta) {
    StepWork w;
    w.z = head.P * f.hidden.transpose() + head.bias.row(0).transpose();
    w.s = w.z.cwiseProduct(lambda);
    RowVec edited = f.baseline;
    w.edited_topk.resize(f.topk.size());
    for (std::size_t i = 0; i < f.topk.size(); ++i) {
        const TokenId v = f.topk[i];
        edited(v) += beta * head.U.row(v).dot(w.s);
        w.edited_topk[i] = edited(v);
    }
    const double mx = edited.maxCoeff();
    w.lse = mx + std::log((edited.array() - mx).exp().sum());
    w.logp = edited(f.target) - w.lse;
    return w;
}

/// Accumulates weight * d logp(target) / d{P, bias, U, lambda}.
void backprop_step(const StepFeature& f, const StepWork& w, const PersonaHead& head, const Vec& lambda, double beta,
                   double weight, HeadGrad* gh, Vec* gl) {
    Vec ds = Vec::Zero(head.J);
    for (std::size_t i = 0; i < f.topk.size(); ++i) {
        const TokenId v = f.topk[i];
        const double p = std::exp(w.edited_topk[i] - w.lse);
        const double g = weight * ((v == f.target ? 1.0 : 0.0) - p);
        if (g == 0.0) {
            continue;
        }
        if (gh != nullptr) {
            gh->U.row(v) += (beta * g) * w.s.transpose();
        }
        ds += (beta * g) * head.U.row(v).transpose();
    }
    if (gl != nullptr) {
        *gl += ds.cwiseProduct(w.z);
    }
    if (gh != nullptr) {
        const Vec dz = ds.cwiseProduct(lambda);
        gh->P.noalias() += dz * f.hidden;
        gh->bias.row(0) += dz.transpose();
    }
}

double seq_logp(const SequenceFeatures& f, const PersonaHead& head, const Vec& lambda, double beta,
                std::vector<StepWork>* keep) {
    double lp = 0.0;
    for (const auto& step : f) {
        StepWork w = score_step(step, head, lambda, beta);
        lp += w.logp;
        if (keep != nullptr) {
            keep->push_back(std::move(w));
        }
    }
    return lp;
}

}  // namespace

double sequence_logprob_pers(const SequenceFeatures& f, const PersonaHead& head, const Vec& lambda, double beta) {
    if (!f.empty() && f.front().hidden.size() != head.P.cols()) {
        throw InvalidArgument("sequence_logprob_pers: feature depth does not match the head");
    }
    if (lambda.size() != head.J) {
        throw InvalidArgument("sequence_logprob_pers: user vector length does not match J");
    }
    return seq_logp(f, head, lambda, beta, nullptr);
}

double sequence_logprob_pers(const Backbone& model, const LoraAdapter* adapter, const TokenSeq& prompt,
                             const TokenSeq& y, const PersonaHead& head, const Vec& lambda, double beta, int top_k) {
    return sequence_logprob_pers(sequence_features(model, adapter, prompt, y, head.S, top_k), head, lambda, beta);
}

double bt_loss(double margin) {
    // ln(1 + e^{-m}) without overflow for large |m|
    return margin > 0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
}

double bt_pair_loss_grad(const PairFeatures& pair, const PersonaHead& head, const Vec& lambda, double beta,
                         HeadGrad* g_head, Vec* g_lambda, double weight, double* margin_out) {
    const bool want_grad = g_head != nullptr || g_lambda != nullptr;
    std::vector<StepWork> wp, wn;
    const double lp = seq_logp(pair.positive, head, lambda, beta, want_grad ? &wp : nullptr);
    const double ln = seq_logp(pair.negative, head, lambda, beta, want_grad ? &wn : nullptr);
    const double m = lp - ln;
    if (!std::isfinite(m)) {
        throw NumericalFailure("non-finite preference margin");
    }
    if (margin_out != nullptr) {
        *margin_out = m;
    }
    if (want_grad) {
        // dloss/dm = -sigmoid(-m)
        const double dm = -1.0 / (1.0 + std::exp(m));
        for (std::size_t t = 0; t < pair.positive.size(); ++t) {
            backprop_step(pair.positive[t], wp[t], head, lambda, beta, weight * dm, g_head, g_lambda);
        }
        for (std::size_t t = 0; t < pair.negative.size(); ++t) {
            backprop_step(pair.negative[t], wn[t], head, lambda, beta, -weight * dm, g_head, g_lambda);
        }
    }
    return bt_loss(m);
}

std::pair<double, double> bt_evaluate(const std::vector<PairFeatures>& pairs, const PersonaHead& head,
                                      const UserVectorTable& lambdas, double beta) {
    if (pairs.empty()) {
        throw InvalidArgument("bt_evaluate: no pairs");
    }
    double loss = 0.0;
    int correct = 0;
    const Vec zero = Vec::Zero(head.J);
    for (const auto& p : pairs) {
        auto it = lambdas.vectors.find(p.user_id);
        const Vec& lam = it == lambdas.vectors.end() ? zero : it->second;
        double m = 0.0;
        loss += bt_pair_loss_grad(p, head, lam, beta, nullptr, nullptr, 1.0, &m);
        correct += m > 0.0 ? 1 : 0;
    }
    const auto n = static_cast<double>(pairs.size());
    return {loss / n, correct / n};
}

TrainReport bt_train(const std::vector<PairFeatures>& pairs, PersonaHead& head, UserVectorTable& lambdas,
                     const BtOptions& opts) {
    if (pairs.empty()) {
        throw InvalidArgument("bt_train: no preference pairs");
    }
    if (opts.batch < 1 || opts.epochs < 0 || opts.lr < 0.0) {
        throw InvalidArgument("bt_train: invalid batch, epochs or learning rate");
    }
    if (lambdas.J != head.J) {
        throw InvalidArgument("bt_train: user vectors have J=" + std::to_string(lambdas.J) + ", head has " +
                              std::to_string(head.J));
    }

    // One row matrix per user so the optimizer can address it.
    std::vector<std::string> users;
    for (const auto& p : pairs) {
        users.push_back(p.user_id);
    }
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    std::map<std::string, std::size_t> slot;
    std::vector<Mat> lam_val(users.size()), lam_grad(users.size());
    for (std::size_t i = 0; i < users.size(); ++i) {
        slot[users[i]] = i;
        lam_val[i] = lambdas.ensure(users[i]).transpose();
        lam_grad[i] = Mat::Zero(1, head.J);
    }

    HeadGrad gh{Mat::Zero(head.P.rows(), head.P.cols()), Mat::Zero(1, head.J),
                Mat::Zero(head.U.rows(), head.U.cols())};
    std::vector<ParamRef> params;
    TrainReport report;
    if (opts.train_head) {
        params.push_back({&head.P, &gh.P, true});
        params.push_back({&head.bias, &gh.bias, false});
        params.push_back({&head.U, &gh.U, true});
        report.trained = {"P", "bias", "U"};
    }
    if (opts.train_lambda) {
        for (std::size_t i = 0; i < users.size(); ++i) {
            params.push_back({&lam_val[i], &lam_grad[i], false});
        }
        report.trained.push_back("lambda");
    }

    auto sync = [&] {
        for (std::size_t i = 0; i < users.size(); ++i) {
            lambdas.vectors[users[i]] = lam_val[i].row(0).transpose();
        }
    };

    std::tie(report.initial_loss, report.initial_accuracy) = bt_evaluate(pairs, head, lambdas, opts.beta);
    if (opts.epochs == 0 || params.empty()) {
        return report;
    }

    AdamW optim(AdamWOptions{0.9, 0.999, 1e-8, opts.weight_decay});
    const long steps_per_epoch = (static_cast<long>(pairs.size()) + opts.batch - 1) / opts.batch;
    const long total = steps_per_epoch * opts.epochs;
    const long warmup = static_cast<long>(0.05 * static_cast<double>(total));
    Rng rng(opts.seed * 0x2545F4914F6CDD1DULL + 3);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    for (int e = 0; e < opts.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(opts.batch)) {
            const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(opts.batch));
            const double w = 1.0 / static_cast<double>(end - b);
            gh.P.setZero();
            gh.bias.setZero();
            gh.U.setZero();
            for (auto& g : lam_grad) {
                g.setZero();
            }
            for (std::size_t i = b; i < end; ++i) {
                const PairFeatures& p = pairs[order[i]];
                const std::size_t s = slot.at(p.user_id);
                const Vec lam = lam_val[s].row(0).transpose();
                Vec gl = Vec::Zero(head.J);
                epoch_loss += bt_pair_loss_grad(p, head, lam, opts.beta, opts.train_head ? &gh : nullptr,
                                                opts.train_lambda ? &gl : nullptr, w);
                if (opts.train_lambda) {
                    lam_grad[s].row(0) += gl.transpose();
                }
            }
            // The optimizer minimizes; the accumulated gradients are of the loss already.
            optim.step(params, cosine_lr(opts.lr, step, total, warmup));
            ++step;
        }
        if (opts.train_head) {
            snap_to_f32(head.P);
            snap_to_f32(head.bias);
            snap_to_f32(head.U);
        }
        for (auto& l : lam_val) {
            snap_to_f32(l);
        }
        sync();
        report.epoch_loss.push_back(epoch_loss / static_cast<double>(pairs.size()));
        report.epoch_accuracy.push_back(bt_evaluate(pairs, head, lambdas, opts.beta).second);
    }
    return report;
}

PairFeatures pair_features(const PreferencePair& pair, const Backbone& model, const LoraAdapter* adapter,
                           int tap_depth, int top_k) {
    PairFeatures f;
    f.user_id = pair.user_id;
    TokenSeq pos = pair.positive, neg = pair.negative;
    pos.push_back(special::EOS);
    neg.push_back(special::EOS);
    f.positive = sequence_features(model, adapter, pair.prompt.tokens, pos, tap_depth, top_k);
    f.negative = sequence_features(model, adapter, pair.prompt.tokens, neg, tap_depth, top_k);
    return f;
}

NewUserFit fit_new_user(const std::string& user_id, const std::vector<HistoryRecord>& history,
                        const Clustering& clustering, const Featurizer& featurizer, const Backbone& model,
                        const std::vector<const LoraAdapter*>& cluster_adapters, const PersonaHead& head,
                        const NewUserOptions& opts) {
    if (history.empty()) {
        throw InvalidArgument("fit_new_user: empty history");
    }
    NewUserFit fit;
    fit.cluster = assign_cluster(featurizer.embed(user_id, history), clustering);
    if (fit.cluster >= static_cast<int>(cluster_adapters.size()) ||
        cluster_adapters[static_cast<std::size_t>(fit.cluster)] == nullptr) {
        throw ConfigError("missing adapter for cluster " + std::to_string(fit.cluster));
    }
    const LoraAdapter* adapter = cluster_adapters[static_cast<std::size_t>(fit.cluster)];
    fit.vector.user_id = user_id;
    fit.vector.lambda = Vec::Zero(head.J);

    UserProfile profile;
    profile.user_id = user_id;
    profile.history = history;
    const PairSet ps = build_pairs(
        {&profile}, {{user_id, fit.cluster}},
        [&](const Prompt& p, int) {
            return gen_cluster_baseline(p, model, adapter, opts.pairs.max_new_tokens, opts.pairs.repetition_penalty);
        },
        opts.pairs);
    fit.n_pairs = static_cast<int>(ps.pairs.size());
    if (ps.pairs.empty()) {
        fit.degenerate = true;
        return fit;
    }
    std::vector<PairFeatures> feats;
    feats.reserve(ps.pairs.size());
    for (const auto& p : ps.pairs) {
        feats.push_back(pair_features(p, model, adapter, head.S, opts.top_k));
    }
    // The head is copied so that only lambda_u can change.
    PersonaHead frozen = head;
    UserVectorTable table;
    table.J = head.J;
    table.ensure(user_id);
    BtOptions bo;
    bo.beta = opts.beta;
    bo.lr = opts.lr;
    bo.epochs = opts.epochs;
    bo.batch = opts.batch;
    bo.seed = opts.seed;
    bo.train_head = false;
    bo.train_lambda = true;
    fit.report = bt_train(feats, frozen, table, bo);
    fit.vector.lambda = table.at(user_id);
    return fit;
}

}  // namespace card
