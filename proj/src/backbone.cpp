#include "card/backbone.hpp"

#include "card/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace card {

namespace {

constexpr double kNormEps = 1e-5;

struct LinCache {
    Mat x;
    Mat xd;    // adapter-path input (after dropout)
    Mat mult;  // dropout multipliers; empty when dropout is off
    Mat xa;    // xd A^T
};

const LoraSite* adapter_site(const LoraAdapter* a, std::size_t layer, Site s) {
    if (a == nullptr) {
        return nullptr;
    }
    const auto& slot = a->layers.at(layer)[static_cast<std::size_t>(s)];
    return slot ? &*slot : nullptr;
}

LoraSite* adapter_site(LoraAdapter* a, std::size_t layer, Site s) {
    if (a == nullptr) {
        return nullptr;
    }
    auto& slot = a->layers.at(layer)[static_cast<std::size_t>(s)];
    return slot ? &*slot : nullptr;
}

Mat lin_fwd(const Mat& x, const Mat& W, const LoraSite* ls, double scale, double drop_p, Rng* rng, LinCache& c) {
    Mat y = x * W.transpose();
    c.x = x;
    if (ls != nullptr) {
        if (rng != nullptr && drop_p > 0.0) {
            std::bernoulli_distribution keep(1.0 - drop_p);
            c.mult.resize(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < c.mult.size(); ++i) {
                c.mult.data()[i] = keep(*rng) ? 1.0 / (1.0 - drop_p) : 0.0;
            }
            c.xd = x.cwiseProduct(c.mult);
        } else {
            c.mult.resize(0, 0);
            c.xd = x;
        }
        c.xa = c.xd * ls->A.transpose();
        y.noalias() += scale * (c.xa * ls->B.transpose());
    }
    return y;
}

Mat lin_bwd(const Mat& dy, const Mat& W, Mat* dW, const LoraSite* ls, LoraSite* dls, double scale,
            const LinCache& c) {
    if (dW != nullptr) {
        dW->noalias() += dy.transpose() * c.x;
    }
    Mat dx = dy * W;
    if (ls != nullptr) {
        const Mat dxa = scale * (dy * ls->B);
        if (dls != nullptr) {
            dls->B.noalias() += scale * (dy.transpose() * c.xa);
            dls->A.noalias() += dxa.transpose() * c.xd;
        }
        Mat dxd = dxa * ls->A;
        if (c.mult.size() > 0) {
            dxd = dxd.cwiseProduct(c.mult);
        }
        dx += dxd;
    }
    return dx;
}

struct NormCache {
    Mat xhat;
    Vec inv_rms;
};

Mat rms_fwd(const Mat& x, const Mat& g, NormCache& c) {
    const auto d = static_cast<double>(x.cols());
    c.inv_rms = ((x.array().square().rowwise().sum() / d) + kNormEps).rsqrt().matrix();
    c.xhat = x.array().colwise() * c.inv_rms.array();
    return c.xhat.array().rowwise() * g.row(0).array();
}

// Parameter-free unit-RMS rows; keeps the tapped features on a fixed scale.
Mat unit_rms(const Mat& x) {
    const auto d = static_cast<double>(x.cols());
    const Vec inv = ((x.array().square().rowwise().sum() / d) + kNormEps).rsqrt().matrix();
    return x.array().colwise() * inv.array();
}

Mat rms_bwd(const Mat& dy, const Mat& g, Mat* dg, const NormCache& c) {
    if (dg != nullptr) {
        dg->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    }
    const Mat dxhat = dy.array().rowwise() * g.row(0).array();
    const auto d = static_cast<double>(dy.cols());
    const Vec proj = (dxhat.array() * c.xhat.array()).rowwise().sum() / d;
    Mat dx = dxhat - (c.xhat.array().colwise() * proj.array()).matrix();
    return dx.array().colwise() * c.inv_rms.array();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Rotary position encoding: within every head, the pair (2i, 2i+1) of row t is
// rotated by angle (pos0 + t) * 10000^(-2i/hd). `sign` = -1 applies the inverse.
void rope(Mat& X, int n_heads, int hd, Eigen::Index pos0, double sign = 1.0) {
    const int half = hd / 2;
    std::vector<double> freq(static_cast<std::size_t>(half));
    for (int i = 0; i < half; ++i) {
        freq[static_cast<std::size_t>(i)] = sign * std::pow(10000.0, -2.0 * i / hd);
    }
    for (Eigen::Index t = 0; t < X.rows(); ++t) {
        const auto pos = static_cast<double>(pos0 + t);
        for (int i = 0; i < half; ++i) {
            const double ang = pos * freq[static_cast<std::size_t>(i)];
            const double cs = std::cos(ang);
            const double sn = std::sin(ang);
            for (int h = 0; h < n_heads; ++h) {
                const Eigen::Index a = h * hd + 2 * i;
                const double x0 = X(t, a);
                const double x1 = X(t, a + 1);
                X(t, a) = x0 * cs - x1 * sn;
                X(t, a + 1) = x0 * sn + x1 * cs;
            }
        }
    }
}

struct LayerCache {
    NormCache n1, n2;
    LinCache q, k, v, o, gate, up, down;
    Mat Q, K, V;
    std::vector<Mat> probs;  // per head, T x T
    Mat G, U;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    std::vector<Mat> hidden;  // residual stream after each block
    NormCache final_norm;
    Mat xf;
};

void check_tokens(const BackboneConfig& cfg, const TokenSeq& tokens) {
    if (tokens.empty()) {
        throw InvalidArgument("forward: empty token sequence");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq) {
        throw SequenceTooLong("forward: " + std::to_string(tokens.size()) + " tokens exceed max_seq " +
                              std::to_string(cfg.max_seq));
    }
    for (TokenId t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw InvalidArgument("forward: token " + std::to_string(t) + " outside vocabulary");
        }
    }
}

Mat run_forward(const BackboneConfig& cfg, const BackboneWeights& w, const TokenSeq& tokens,
                const LoraAdapter* adapter, Rng* rng, ForwardCache& cache) {
    check_tokens(cfg, tokens);
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const int d = cfg.d_model;
    const int hd = d / cfg.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double ls = adapter ? adapter->scale() : 0.0;
    const double dp = adapter ? adapter->dropout_p : 0.0;

    Mat x(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        x.row(t) = w.tok_emb.row(tokens[static_cast<std::size_t>(t)]);
    }

    cache.layers.assign(w.layers.size(), LayerCache{});
    cache.hidden.clear();
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& L = w.layers[l];
        LayerCache& c = cache.layers[l];

        const Mat xn = rms_fwd(x, L.attn_norm, c.n1);
        c.Q = lin_fwd(xn, L.wq, adapter_site(adapter, l, Site::q), ls, dp, rng, c.q);
        c.K = lin_fwd(xn, L.wk, adapter_site(adapter, l, Site::k), ls, dp, rng, c.k);
        c.V = lin_fwd(xn, L.wv, adapter_site(adapter, l, Site::v), ls, dp, rng, c.v);
        rope(c.Q, cfg.n_heads, hd, 0);
        rope(c.K, cfg.n_heads, hd, 0);
        Mat att(T, d);
        c.probs.resize(static_cast<std::size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h) {
            Mat s = (c.Q.middleCols(h * hd, hd) * c.K.middleCols(h * hd, hd).transpose()) * att_scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                const double mx = s.row(i).head(i + 1).maxCoeff();
                double z = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    s(i, j) = std::exp(s(i, j) - mx);
                    z += s(i, j);
                }
                s.row(i).head(i + 1) /= z;
                s.row(i).tail(T - i - 1).setZero();
            }
            att.middleCols(h * hd, hd) = s * c.V.middleCols(h * hd, hd);
            c.probs[static_cast<std::size_t>(h)] = std::move(s);
        }
        x += lin_fwd(att, L.wo, adapter_site(adapter, l, Site::o), ls, dp, rng, c.o);

        const Mat xn2 = rms_fwd(x, L.mlp_norm, c.n2);
        c.G = lin_fwd(xn2, L.w_gate, adapter_site(adapter, l, Site::gate), ls, dp, rng, c.gate);
        c.U = lin_fwd(xn2, L.w_up, adapter_site(adapter, l, Site::up), ls, dp, rng, c.up);
        Mat hmid = c.G.unaryExpr([](double g) { return g * sigmoid(g); }).cwiseProduct(c.U);
        x += lin_fwd(hmid, L.w_down, adapter_site(adapter, l, Site::down), ls, dp, rng, c.down);
        cache.hidden.push_back(x);
    }
    cache.xf = rms_fwd(x, w.final_norm, cache.final_norm);
    return cache.xf * w.head.transpose();
}

void run_backward(const BackboneConfig& cfg, const BackboneWeights& w, const TokenSeq& tokens,
                  const LoraAdapter* adapter, const ForwardCache& cache, const Mat& dlogits, BackboneWeights* gw,
                  LoraAdapter* ga) {
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const int d = cfg.d_model;
    const int hd = d / cfg.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double ls = adapter ? adapter->scale() : 0.0;

    if (gw != nullptr) {
        gw->head.noalias() += dlogits.transpose() * cache.xf;
    }
    Mat dx = rms_bwd(dlogits * w.head, w.final_norm, gw ? &gw->final_norm : nullptr, cache.final_norm);

    for (std::size_t li = w.layers.size(); li-- > 0;) {
        const LayerWeights& L = w.layers[li];
        const LayerCache& c = cache.layers[li];
        LayerWeights* gL = gw ? &gw->layers[li] : nullptr;

        // MLP block
        const Mat dh = lin_bwd(dx, L.w_down, gL ? &gL->w_down : nullptr, adapter_site(adapter, li, Site::down),
                               adapter_site(ga, li, Site::down), ls, c.down);
        Mat dG(T, c.G.cols()), dU(T, c.U.cols());
        for (Eigen::Index i = 0; i < c.G.size(); ++i) {
            const double g = c.G.data()[i];
            const double sg = sigmoid(g);
            dU.data()[i] = dh.data()[i] * g * sg;
            dG.data()[i] = dh.data()[i] * c.U.data()[i] * sg * (1.0 + g * (1.0 - sg));
        }
        Mat dxn2 = lin_bwd(dG, L.w_gate, gL ? &gL->w_gate : nullptr, adapter_site(adapter, li, Site::gate),
                           adapter_site(ga, li, Site::gate), ls, c.gate);
        dxn2 += lin_bwd(dU, L.w_up, gL ? &gL->w_up : nullptr, adapter_site(adapter, li, Site::up),
                        adapter_site(ga, li, Site::up), ls, c.up);
        dx += rms_bwd(dxn2, L.mlp_norm, gL ? &gL->mlp_norm : nullptr, c.n2);

        // attention block
        const Mat datt = lin_bwd(dx, L.wo, gL ? &gL->wo : nullptr, adapter_site(adapter, li, Site::o),
                                 adapter_site(ga, li, Site::o), ls, c.o);
        Mat dQ(T, d), dK(T, d), dV(T, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Mat& P = c.probs[static_cast<std::size_t>(h)];
            const auto dout = datt.middleCols(h * hd, hd);
            const Mat dP = dout * c.V.middleCols(h * hd, hd).transpose();
            dV.middleCols(h * hd, hd) = P.transpose() * dout;
            const Vec rs = (dP.array() * P.array()).rowwise().sum();
            const Mat dS = (P.array() * (dP.array().colwise() - rs.array())).matrix() * att_scale;
            dQ.middleCols(h * hd, hd) = dS * c.K.middleCols(h * hd, hd);
            dK.middleCols(h * hd, hd) = dS.transpose() * c.Q.middleCols(h * hd, hd);
        }
        rope(dQ, cfg.n_heads, hd, 0, -1.0);
        rope(dK, cfg.n_heads, hd, 0, -1.0);
        Mat dxn = lin_bwd(dQ, L.wq, gL ? &gL->wq : nullptr, adapter_site(adapter, li, Site::q),
                          adapter_site(ga, li, Site::q), ls, c.q);
        dxn += lin_bwd(dK, L.wk, gL ? &gL->wk : nullptr, adapter_site(adapter, li, Site::k),
                       adapter_site(ga, li, Site::k), ls, c.k);
        dxn += lin_bwd(dV, L.wv, gL ? &gL->wv : nullptr, adapter_site(adapter, li, Site::v),
                       adapter_site(ga, li, Site::v), ls, c.v);
        dx += rms_bwd(dxn, L.attn_norm, gL ? &gL->attn_norm : nullptr, c.n1);
    }

    if (gw != nullptr) {
        for (Eigen::Index t = 0; t < T; ++t) {
            gw->tok_emb.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        }
    }
}

template <class F>
void visit_layers(std::vector<LayerWeights>& layers, F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& L = layers[l];
        f(p + "attn_norm", L.attn_norm);
        for (Site s : {Site::q, Site::k, Site::v, Site::o}) {
            f(p + site_name(s), L.site(s));
        }
        f(p + "mlp_norm", L.mlp_norm);
        for (Site s : {Site::gate, Site::up, Site::down}) {
            f(p + site_name(s), L.site(s));
        }
    }
}

std::pair<int, int> site_dims(const BackboneConfig& cfg, Site s) {
    switch (s) {
        case Site::gate:
        case Site::up:
            return {cfg.d_model, cfg.ffn_dim};  // (d_in, d_out)
        case Site::down:
            return {cfg.ffn_dim, cfg.d_model};
        default:
            return {cfg.d_model, cfg.d_model};
    }
}

TrainCurve train_loop(const std::vector<SftExample>& data, const TrainOptions& opts,
                      const std::vector<ParamRef>& params, const std::function<void()>& zero_grads,
                      const std::function<void(double)>& scale_grads,
                      const std::function<double(const SftExample&, Rng&)>& accumulate) {
    TrainCurve curve;
    if (opts.epochs <= 0) {
        return curve;
    }
    if (opts.batch < 1) {
        throw InvalidArgument("training batch size must be >= 1");
    }
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(opts.seed);
    Rng dropout_rng(opts.seed ^ 0x9E3779B97F4A7C15ULL);
    const auto n = static_cast<long>(data.size());
    const long per_epoch = (n + opts.batch - 1) / opts.batch;
    const long total = per_epoch * opts.epochs;
    const auto warmup = static_cast<long>(std::lround(opts.warmup_frac * static_cast<double>(total)));
    AdamW adam(AdamWOptions{.weight_decay = opts.weight_decay, .clip_norm = opts.clip_norm});

    long step = 0;
    for (int e = 0; e < opts.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_nll = 0.0;
        double epoch_tokens = 0.0;
        for (long b = 0; b < n; b += opts.batch) {
            zero_grads();
            double nll = 0.0;
            double tokens = 0.0;
            for (long i = b; i < std::min(n, b + opts.batch); ++i) {
                const SftExample& ex = data[order[static_cast<std::size_t>(i)]];
                nll += accumulate(ex, dropout_rng);
                tokens += static_cast<double>(ex.tokens.size()) - ex.target_start;
            }
            if (!std::isfinite(nll)) {
                throw NumericalFailure("training loss is not finite");
            }
            scale_grads(1.0 / std::max(1.0, tokens));
            adam.step(params, cosine_lr(opts.lr, step, total, warmup));
            if (opts.on_step) {
                opts.on_step(step, nll / std::max(1.0, tokens));
            }
            ++step;
            epoch_nll += nll;
            epoch_tokens += tokens;
        }
        curve.epoch_loss.push_back(epoch_nll / std::max(1.0, epoch_tokens));
    }
    return curve;
}

}  // namespace

void BackboneConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq < 1 || ffn_dim < 1) {
        throw InvalidArgument("backbone config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
        throw InvalidArgument("backbone config: d_model must be divisible by n_heads");
    }
    if ((d_model / n_heads) % 2 != 0) {
        throw InvalidArgument("backbone config: head dimension must be even for rotary positions");
    }
}

const char* site_name(Site s) {
    static constexpr std::array<const char*, kNumSites> names = {"q", "k", "v", "o", "gate", "up", "down"};
    return names[static_cast<std::size_t>(s)];
}

Site site_from_name(const std::string& s) {
    for (Site site : kAllSites) {
        if (s == site_name(site)) {
            return site;
        }
    }
    throw InvalidArgument("unknown adapter site '" + s + "'");
}

Mat& LayerWeights::site(Site s) {
    switch (s) {
        case Site::q: return wq;
        case Site::k: return wk;
        case Site::v: return wv;
        case Site::o: return wo;
        case Site::gate: return w_gate;
        case Site::up: return w_up;
        case Site::down: return w_down;
    }
    throw InvalidArgument("bad site");
}

const Mat& LayerWeights::site(Site s) const { return const_cast<LayerWeights*>(this)->site(s); }

void BackboneWeights::visit(const std::function<void(const std::string&, Mat&)>& f) {
    f("tok_emb", tok_emb);
    visit_layers(layers, f);
    f("final_norm", final_norm);
    f("head", head);
}

void BackboneWeights::visit(const std::function<void(const std::string&, const Mat&)>& f) const {
    const_cast<BackboneWeights*>(this)->visit([&](const std::string& n, Mat& m) { f(n, m); });
}

BackboneWeights BackboneWeights::zeros_like() const {
    BackboneWeights z = *this;
    z.visit([](const std::string&, Mat& m) { m.setZero(); });
    return z;
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int d = cfg.d_model;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double res_std = in_std / std::sqrt(2.0 * cfg.n_layers);
    w_.tok_emb = randn(cfg.vocab_size, d, 0.5, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights L;
        L.attn_norm = Mat::Ones(1, d);
        L.wq = randn(d, d, in_std, rng);
        L.wk = randn(d, d, in_std, rng);
        L.wv = randn(d, d, in_std, rng);
        L.wo = randn(d, d, res_std, rng);
        L.mlp_norm = Mat::Ones(1, d);
        L.w_gate = randn(cfg.ffn_dim, d, in_std, rng);
        L.w_up = randn(cfg.ffn_dim, d, in_std, rng);
        L.w_down = randn(d, cfg.ffn_dim, res_std * std::sqrt(static_cast<double>(d) / cfg.ffn_dim), rng);
        w_.layers.push_back(std::move(L));
    }
    w_.final_norm = Mat::Ones(1, d);
    w_.head = randn(cfg.vocab_size, d, in_std, rng);
    snap_to_f32(w_);
}

ForwardOutput Backbone::forward(const TokenSeq& tokens, const LoraAdapter* adapter, int tap_depth) const {
    if (tap_depth < 0 || tap_depth > cfg_.n_layers) {
        throw InvalidArgument("forward: tap depth " + std::to_string(tap_depth) + " exceeds " +
                              std::to_string(cfg_.n_layers) + " layers");
    }
    ForwardCache cache;
    ForwardOutput out;
    out.logits = run_forward(cfg_, w_, tokens, adapter, nullptr, cache);
    const auto T = static_cast<Eigen::Index>(tokens.size());
    out.tapped_hidden.resize(T, static_cast<Eigen::Index>(tap_depth) * cfg_.d_model);
    for (int s = 0; s < tap_depth; ++s) {
        out.tapped_hidden.middleCols(static_cast<Eigen::Index>(s) * cfg_.d_model, cfg_.d_model) =
            unit_rms(cache.hidden[static_cast<std::size_t>(cfg_.n_layers - tap_depth + s)]);
    }
    return out;
}

double Backbone::nll_and_grad(const SftExample& ex, const LoraAdapter* adapter, BackboneWeights* grad_backbone,
                              LoraAdapter* grad_adapter, Rng* dropout_rng) const {
    const auto T = static_cast<Eigen::Index>(ex.tokens.size());
    if (ex.target_start < 1 || ex.target_start > T) {
        throw InvalidArgument("nll_and_grad: target_start out of range");
    }
    ForwardCache cache;
    const Mat logits = run_forward(cfg_, w_, ex.tokens, adapter, dropout_rng, cache);
    Mat dlogits = Mat::Zero(T, logits.cols());
    double nll = 0.0;
    for (Eigen::Index t = ex.target_start; t < T; ++t) {
        const auto row = logits.row(t - 1);
        const double mx = row.maxCoeff();
        const RowVec e = (row.array() - mx).exp();
        const double z = e.sum();
        const TokenId y = ex.tokens[static_cast<std::size_t>(t)];
        nll -= row(y) - mx - std::log(z);
        dlogits.row(t - 1) = e / z;
        dlogits(t - 1, y) -= 1.0;
    }
    if (grad_backbone != nullptr || grad_adapter != nullptr) {
        run_backward(cfg_, w_, ex.tokens, adapter, cache, dlogits, grad_backbone, grad_adapter);
    }
    return nll;
}

std::uint64_t Backbone::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    w_.visit([&](const std::string& n, const Mat& m) { h = card::checksum(m, fnv1a(n.data(), n.size(), h)); });
    return h;
}

std::size_t Backbone::parameter_count() const {
    std::size_t n = 0;
    w_.visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

TensorArchive Backbone::to_archive() const {
    TensorArchive a;
    a.metadata = {{"kind", "backbone"},       {"vocab_size", cfg_.vocab_size}, {"d_model", cfg_.d_model},
                  {"n_layers", cfg_.n_layers}, {"n_heads", cfg_.n_heads},       {"max_seq", cfg_.max_seq},
                  {"ffn_dim", cfg_.ffn_dim},   {"seed", cfg_.seed}};
    w_.visit([&](const std::string& n, const Mat& m) { a.add(n, m); });
    return a;
}

Backbone Backbone::from_archive(const TensorArchive& a) {
    const auto& md = a.metadata;
    if (md.value("kind", "") != "backbone") {
        throw ConfigError("archive is not a backbone checkpoint");
    }
    BackboneConfig cfg;
    cfg.vocab_size = md.at("vocab_size").get<int>();
    cfg.d_model = md.at("d_model").get<int>();
    cfg.n_layers = md.at("n_layers").get<int>();
    cfg.n_heads = md.at("n_heads").get<int>();
    cfg.max_seq = md.at("max_seq").get<int>();
    cfg.ffn_dim = md.at("ffn_dim").get<int>();
    cfg.seed = md.at("seed").get<std::uint64_t>();
    Backbone b(cfg);
    b.w_.visit([&](const std::string& n, Mat& m) {
        const Mat& src = a.get(n);
        if (src.rows() != m.rows() || src.cols() != m.cols()) {
            throw ConfigError("shape mismatch for tensor '" + n + "'");
        }
        m = src;
    });
    return b;
}

LoraAdapter LoraAdapter::init(const BackboneConfig& cfg, int rank, double alpha, double dropout_p,
                              std::vector<Site> sites, std::uint64_t seed) {
    if (rank < 1) {
        throw InvalidArgument("LoRA rank must be >= 1");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
        throw InvalidArgument("LoRA dropout must be in [0, 1)");
    }
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    a.dropout_p = dropout_p;
    a.target_sites = std::move(sites);
    a.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    Rng rng(seed);
    for (auto& layer : a.layers) {
        for (Site s : a.target_sites) {
            const auto [din, dout] = site_dims(cfg, s);
            LoraSite ls;
            ls.A = randn(rank, din, 1.0 / std::sqrt(3.0 * din), rng);
            ls.B = Mat::Zero(dout, rank);
            snap_to_f32(ls.A);
            layer[static_cast<std::size_t>(s)] = std::move(ls);
        }
    }
    return a;
}

void LoraAdapter::visit(const std::function<void(const std::string&, Mat&)>& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        for (Site s : kAllSites) {
            auto& slot = layers[l][static_cast<std::size_t>(s)];
            if (slot) {
                const std::string p = "layers." + std::to_string(l) + "." + site_name(s) + ".";
                f(p + "A", slot->A);
                f(p + "B", slot->B);
            }
        }
    }
}

void LoraAdapter::visit(const std::function<void(const std::string&, const Mat&)>& f) const {
    const_cast<LoraAdapter*>(this)->visit([&](const std::string& n, Mat& m) { f(n, m); });
}

LoraAdapter LoraAdapter::zeros_like() const {
    LoraAdapter z = *this;
    z.visit([](const std::string&, Mat& m) { m.setZero(); });
    return z;
}

std::size_t LoraAdapter::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

std::uint64_t LoraAdapter::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    visit([&](const std::string& n, const Mat& m) { h = card::checksum(m, fnv1a(n.data(), n.size(), h)); });
    return h;
}

TensorArchive LoraAdapter::to_archive() const {
    TensorArchive a;
    std::vector<std::string> sites;
    for (Site s : target_sites) {
        sites.emplace_back(site_name(s));
    }
    a.metadata = {{"kind", "lora"},       {"rank", rank},   {"alpha", alpha},
                  {"dropout", dropout_p}, {"sites", sites}, {"n_layers", layers.size()}};
    visit([&](const std::string& n, const Mat& m) { a.add(n, m); });
    return a;
}

LoraAdapter LoraAdapter::from_archive(const TensorArchive& a) {
    const auto& md = a.metadata;
    if (md.value("kind", "") != "lora") {
        throw ConfigError("archive is not a LoRA checkpoint");
    }
    LoraAdapter ad;
    ad.rank = md.at("rank").get<int>();
    ad.alpha = md.at("alpha").get<double>();
    ad.dropout_p = md.at("dropout").get<double>();
    for (const auto& s : md.at("sites")) {
        ad.target_sites.push_back(site_from_name(s.get<std::string>()));
    }
    ad.layers.resize(md.at("n_layers").get<std::size_t>());
    for (std::size_t l = 0; l < ad.layers.size(); ++l) {
        for (Site s : ad.target_sites) {
            const std::string p = "layers." + std::to_string(l) + "." + site_name(s) + ".";
            ad.layers[l][static_cast<std::size_t>(s)] = LoraSite{a.get(p + "A"), a.get(p + "B")};
        }
    }
    return ad;
}

Vec lora_forward(const Mat& W0, const LoraSite& site, double scale, const Vec& x) {
    if (W0.cols() != x.size() || site.A.cols() != x.size() || site.B.rows() != W0.rows() ||
        site.B.cols() != site.A.rows()) {
        throw InvalidArgument("lora_forward: dimension mismatch");
    }
    return W0 * x + scale * (site.B * (site.A * x));
}

DecodeSession::DecodeSession(const Backbone& model, const LoraAdapter* adapter, int tap_depth)
    : model_(model), adapter_(adapter), tap_depth_(tap_depth) {
    if (tap_depth < 0 || tap_depth > model.config().n_layers) {
        throw InvalidArgument("DecodeSession: bad tap depth");
    }
    const auto& cfg = model.config();
    keys_.assign(static_cast<std::size_t>(cfg.n_layers), Mat(cfg.max_seq, cfg.d_model));
    values_.assign(static_cast<std::size_t>(cfg.n_layers), Mat(cfg.max_seq, cfg.d_model));
}

const RowVec& DecodeSession::step(TokenId token) {
    const auto& cfg = model_.config();
    const auto& w = model_.weights();
    if (pos_ >= cfg.max_seq) {
        throw SequenceTooLong("decode: sequence exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    if (token < 0 || token >= cfg.vocab_size) {
        throw InvalidArgument("decode: token outside vocabulary");
    }
    const int d = cfg.d_model;
    const int hd = d / cfg.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double ls = adapter_ ? adapter_->scale() : 0.0;
    LinCache scratch;

    Mat x = w.tok_emb.row(token);
    tapped_.resize(static_cast<Eigen::Index>(tap_depth_) * d);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& L = w.layers[l];
        NormCache nc;
        const Mat xn = rms_fwd(x, L.attn_norm, nc);
        Mat q = lin_fwd(xn, L.wq, adapter_site(adapter_, l, Site::q), ls, 0.0, nullptr, scratch);
        Mat k = lin_fwd(xn, L.wk, adapter_site(adapter_, l, Site::k), ls, 0.0, nullptr, scratch);
        rope(q, cfg.n_heads, hd, pos_);
        rope(k, cfg.n_heads, hd, pos_);
        keys_[l].row(pos_) = k;
        values_[l].row(pos_) = lin_fwd(xn, L.wv, adapter_site(adapter_, l, Site::v), ls, 0.0, nullptr, scratch);
        Mat att(1, d);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const auto K = keys_[l].block(0, h * hd, pos_ + 1, hd);
            const auto V = values_[l].block(0, h * hd, pos_ + 1, hd);
            RowVec s = (q.middleCols(h * hd, hd) * K.transpose()) * att_scale;
            s = (s.array() - s.maxCoeff()).exp();
            s /= s.sum();
            att.middleCols(h * hd, hd) = s * V;
        }
        x += lin_fwd(att, L.wo, adapter_site(adapter_, l, Site::o), ls, 0.0, nullptr, scratch);
        const Mat xn2 = rms_fwd(x, L.mlp_norm, nc);
        const Mat G = lin_fwd(xn2, L.w_gate, adapter_site(adapter_, l, Site::gate), ls, 0.0, nullptr, scratch);
        const Mat U = lin_fwd(xn2, L.w_up, adapter_site(adapter_, l, Site::up), ls, 0.0, nullptr, scratch);
        const Mat hmid = G.unaryExpr([](double g) { return g * sigmoid(g); }).cwiseProduct(U);
        x += lin_fwd(hmid, L.w_down, adapter_site(adapter_, l, Site::down), ls, 0.0, nullptr, scratch);
        const int tap_slot = static_cast<int>(l) - (cfg.n_layers - tap_depth_);
        if (tap_slot >= 0) {
            tapped_.segment(static_cast<Eigen::Index>(tap_slot) * d, d) = unit_rms(x.topRows(1)).row(0);
        }
    }
    NormCache nc;
    logits_ = rms_fwd(x, w.final_norm, nc) * w.head.transpose();
    ++pos_;
    return logits_;
}

TrainCurve pretrain(Backbone& model, const std::vector<SftExample>& data, const TrainOptions& opts) {
    if (data.empty()) {
        throw InvalidArgument("pretrain: empty dataset");
    }
    BackboneWeights grads = model.weights().zeros_like();
    std::vector<ParamRef> params;
    std::vector<Mat*> values;
    model.weights().visit([&](const std::string& n, Mat& m) {
        values.push_back(&m);
        params.push_back(ParamRef{&m, nullptr, n.find("norm") == std::string::npos});
    });
    std::size_t i = 0;
    grads.visit([&](const std::string&, Mat& g) { params[i++].grad = &g; });

    auto curve = train_loop(
        data, opts, params, [&] { grads.visit([](const std::string&, Mat& g) { g.setZero(); }); },
        [&](double s) { grads.visit([s](const std::string&, Mat& g) { g *= s; }); },
        [&](const SftExample& ex, Rng&) { return model.nll_and_grad(ex, nullptr, &grads, nullptr); });
    if (opts.epochs > 0) {
        snap_to_f32(model.weights());
    }
    return curve;
}

TrainCurve sft_train(const Backbone& model, const std::vector<SftExample>& data, LoraAdapter& adapter,
                     const TrainOptions& opts) {
    if (data.empty()) {
        throw InvalidArgument("sft_train: empty cluster dataset");
    }
    LoraAdapter grads = adapter.zeros_like();
    std::vector<ParamRef> params;
    adapter.visit([&](const std::string&, Mat& m) { params.push_back(ParamRef{&m, nullptr, true}); });
    std::size_t i = 0;
    grads.visit([&](const std::string&, Mat& g) { params[i++].grad = &g; });

    auto curve = train_loop(
        data, opts, params, [&] { grads.visit([](const std::string&, Mat& g) { g.setZero(); }); },
        [&](double s) { grads.visit([s](const std::string&, Mat& g) { g *= s; }); },
        [&](const SftExample& ex, Rng& rng) { return model.nll_and_grad(ex, &adapter, nullptr, &grads, &rng); });
    if (opts.epochs > 0) {
        snap_to_f32(adapter);
    }
    return curve;
}

void snap_to_f32(BackboneWeights& w) {
    w.visit([](const std::string&, Mat& m) { card::snap_to_f32(m); });
}

void snap_to_f32(LoraAdapter& a) {
    a.visit([](const std::string&, Mat& m) { card::snap_to_f32(m); });
}

}  // namespace card
