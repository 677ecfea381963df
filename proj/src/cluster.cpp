#include "card/cluster.hpp"

#include "card/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace card {

namespace {

using json = nlohmann::json;

std::uint64_t hash_gram(std::string_view g) { return fnv1a(g.data(), g.size()); }

double sq_dist(const Vec& a, const Vec& b) { return (a - b).squaredNorm(); }

int nearest(const Vec& e, const std::vector<Vec>& centroids, double* dist_out = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centroids.size(); ++k) {
        const double d = sq_dist(e, centroids[k]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    if (dist_out) {
        *dist_out = best_d;
    }
    return best;
}

struct Fit {
    std::vector<Vec> centroids;
    std::vector<int> labels;
    double inertia = 0.0;
    std::vector<double> trace;
};

std::vector<Vec> kmeanspp_init(const std::vector<Vec>& pts, int K, Rng& rng) {
    const std::size_t n = pts.size();
    std::vector<Vec> centers;
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    centers.push_back(pts[first(rng)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centers.size()) < K) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = 0.0;
            nearest(pts[i], centers, &d);
            d2[i] = d;
            total += d;
        }
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = first(rng);
        } else {
            std::discrete_distribution<std::size_t> dist(d2.begin(), d2.end());
            pick = dist(rng);
        }
        centers.push_back(pts[pick]);
    }
    return centers;
}

// Assigns every point to its nearest centroid; an empty cluster takes over the
// point farthest from its current centroid. Repeats until no cluster is empty.
double assign_all(const std::vector<Vec>& pts, std::vector<Vec>& centroids, std::vector<int>& labels) {
    const int K = static_cast<int>(centroids.size());
    for (int guard = 0; guard <= K; ++guard) {
        double inertia = 0.0;
        std::vector<double> dist(pts.size());
        std::vector<int> counts(static_cast<std::size_t>(K), 0);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            labels[i] = nearest(pts[i], centroids, &dist[i]);
            inertia += dist[i];
            ++counts[static_cast<std::size_t>(labels[i])];
        }
        auto empty = std::find(counts.begin(), counts.end(), 0);
        if (empty == counts.end()) {
            return inertia;
        }
        std::size_t far = 0;
        for (std::size_t i = 1; i < pts.size(); ++i) {
            if (dist[i] > dist[far]) {
                far = i;
            }
        }
        centroids[static_cast<std::size_t>(empty - counts.begin())] = pts[far];
    }
    throw NumericalFailure("kmeans: could not repair empty clusters");
}

Fit lloyd(const std::vector<Vec>& pts, std::vector<Vec> centroids, int max_iter, double tol) {
    Fit fit;
    const std::size_t K = centroids.size();
    std::vector<int> labels(pts.size(), 0);
    for (int it = 0; it < max_iter; ++it) {
        fit.trace.push_back(assign_all(pts, centroids, labels));
        std::vector<Vec> next(K, Vec::Zero(pts.front().size()));
        std::vector<int> counts(K, 0);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            next[static_cast<std::size_t>(labels[i])] += pts[i];
            ++counts[static_cast<std::size_t>(labels[i])];
        }
        double shift = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            next[k] /= static_cast<double>(counts[k]);
            shift = std::max(shift, std::sqrt(sq_dist(next[k], centroids[k])));
        }
        centroids = std::move(next);
        if (shift < tol) {
            break;
        }
    }
    fit.inertia = assign_all(pts, centroids, labels);
    fit.trace.push_back(fit.inertia);
    fit.centroids = std::move(centroids);
    fit.labels = std::move(labels);
    return fit;
}

}  // namespace

Featurizer::Featurizer(const Vocabulary& vocab, int dim, std::uint64_t seed) : vocab_(vocab), dim_(dim), seed_(seed) {
    if (dim < 1) {
        throw InvalidArgument("featurizer dimension must be >= 1");
    }
    Rng rng(seed);
    projection_ = randn(kBuckets, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    idf_.assign(kBuckets, 1.0);
}

std::vector<double> Featurizer::term_counts(const std::vector<HistoryRecord>& history) const {
    std::vector<double> tf(kBuckets, 0.0);
    for (const auto& r : history) {
        for (TokenId t : r.output) {
            const std::string w = " " + vocab_.str(t) + " ";
            for (std::size_t n = 2; n <= 3; ++n) {
                for (std::size_t i = 0; i + n <= w.size(); ++i) {
                    tf[hash_gram(std::string_view(w).substr(i, n)) % kBuckets] += 1.0;
                }
            }
        }
    }
    return tf;
}

void Featurizer::fit_idf(const std::vector<const UserProfile*>& profiles) {
    std::vector<double> df(kBuckets, 0.0);
    for (const auto* p : profiles) {
        const auto tf = term_counts(p->history);
        for (int b = 0; b < kBuckets; ++b) {
            if (tf[static_cast<std::size_t>(b)] > 0.0) {
                df[static_cast<std::size_t>(b)] += 1.0;
            }
        }
    }
    const auto n = static_cast<double>(profiles.size());
    for (int b = 0; b < kBuckets; ++b) {
        idf_[static_cast<std::size_t>(b)] = std::log((1.0 + n) / (1.0 + df[static_cast<std::size_t>(b)])) + 1.0;
    }
}

UserEmbedding Featurizer::embed(const UserProfile& profile) const { return embed(profile.user_id, profile.history); }

UserEmbedding Featurizer::embed(const std::string& user_id, const std::vector<HistoryRecord>& history) const {
    if (history.empty()) {
        throw InvalidArgument("embed_user: user '" + user_id + "' has no history");
    }
    if (projection_.rows() != kBuckets) {
        throw InvalidArgument("embed_user: featurizer not initialized");
    }
    const auto tf = term_counts(history);
    RowVec x = RowVec::Zero(kBuckets);
    for (int b = 0; b < kBuckets; ++b) {
        const double c = tf[static_cast<std::size_t>(b)];
        if (c > 0.0) {
            x(b) = c * idf_[static_cast<std::size_t>(b)];
        }
    }
    UserEmbedding e;
    e.user_id = user_id;
    e.vector = (x * projection_).transpose();
    const double n = e.vector.norm();
    if (n > 0.0) {
        e.vector /= n;
    }
    e.norm = e.vector.norm();
    return e;
}

Clustering kmeans_fit(const std::vector<UserEmbedding>& embeddings, const KMeansOptions& opts) {
    if (opts.K < 1 || static_cast<std::size_t>(opts.K) > embeddings.size()) {
        throw InvalidArgument("kmeans_fit: K=" + std::to_string(opts.K) + " with " +
                              std::to_string(embeddings.size()) + " points");
    }
    if (opts.max_iter < 1) {
        throw InvalidArgument("kmeans_fit: max_iter must be >= 1");
    }
    std::vector<Vec> pts;
    for (const auto& e : embeddings) {
        if (e.vector.size() != embeddings.front().vector.size()) {
            throw InvalidArgument("kmeans_fit: embedding dimensions differ");
        }
        pts.push_back(e.vector);
    }

    Rng rng(opts.seed);
    Fit best;
    bool have = false;
    for (int r = 0; r < std::max(1, opts.restarts); ++r) {
        Fit f = lloyd(pts, kmeanspp_init(pts, opts.K, rng), opts.max_iter, opts.tol);
        if (!have || f.inertia < best.inertia) {
            best = std::move(f);
            have = true;
        }
    }

    Clustering c;
    c.K = opts.K;
    c.centroids = std::move(best.centroids);
    c.inertia = best.inertia;
    c.inertia_trace = std::move(best.trace);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        c.assignments[embeddings[i].user_id] = best.labels[i];
    }
    return c;
}

int assign_cluster(const Vec& e, const Clustering& clustering) {
    if (clustering.centroids.empty()) {
        throw InvalidArgument("assign_cluster: clustering is not fitted");
    }
    if (e.size() != clustering.centroids.front().size()) {
        throw InvalidArgument("assign_cluster: embedding dimension " + std::to_string(e.size()) +
                              " != centroid dimension " + std::to_string(clustering.centroids.front().size()));
    }
    return nearest(e, clustering.centroids);
}

int largest_cluster(const Clustering& clustering) {
    std::vector<int> counts(static_cast<std::size_t>(clustering.K), 0);
    for (const auto& [_, k] : clustering.assignments) {
        ++counts[static_cast<std::size_t>(k)];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) {
        throw InvalidArgument("adjusted_rand_index: label vectors differ in length");
    }
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ca, cb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1.0;
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
    }
    auto c2 = [](double n) { return n * (n - 1.0) / 2.0; };
    double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [_, n] : joint) {
        sum_ij += c2(n);
    }
    for (const auto& [_, n] : ca) {
        sum_a += c2(n);
    }
    for (const auto& [_, n] : cb) {
        sum_b += c2(n);
    }
    const double total = c2(static_cast<double>(a.size()));
    const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) {
        return 1.0;
    }
    return (sum_ij - expected) / (max_index - expected);
}

void save_clustering(const Clustering& c, const Featurizer& f, const std::string& path) {
    json j;
    j["K"] = c.K;
    json cents = json::array();
    for (const auto& v : c.centroids) {
        cents.push_back(std::vector<double>(v.data(), v.data() + v.size()));
    }
    j["centroids"] = cents;
    j["assignments"] = c.assignments;
    j["inertia"] = c.inertia;
    j["featurizer"] = {{"dim", f.dim()}, {"seed", f.seed()}, {"idf", f.idf()}};
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path);
    }
    out << j.dump() << '\n';
}

std::pair<Clustering, Featurizer> load_clustering(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingPrerequisite("clustering not found: " + path, "cluster");
    }
    json j;
    in >> j;
    Clustering c;
    c.K = j.at("K").get<int>();
    for (const auto& v : j.at("centroids")) {
        const auto d = v.get<std::vector<double>>();
        c.centroids.push_back(Eigen::Map<const Vec>(d.data(), static_cast<Eigen::Index>(d.size())));
    }
    c.assignments = j.at("assignments").get<std::map<std::string, int>>();
    c.inertia = j.at("inertia").get<double>();
    const auto& fj = j.at("featurizer");
    Featurizer f(vocab, fj.at("dim").get<int>(), fj.at("seed").get<std::uint64_t>());
    f.set_idf(fj.at("idf").get<std::vector<double>>());
    return {std::move(c), std::move(f)};
}

}  // namespace card
