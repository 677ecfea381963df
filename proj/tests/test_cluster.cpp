#include "card/cluster.hpp"
#include "card/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>

using namespace card;

namespace {

UserEmbedding point(const std::string& id, std::initializer_list<double> xs) {
    UserEmbedding e;
    e.user_id = id;
    e.vector = Vec(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) {
        e.vector(i++) = x;
    }
    e.norm = e.vector.norm();
    return e;
}

// Plain Lloyd from uniformly chosen initial centers; returns the final inertia.
double reference_lloyd(const std::vector<Vec>& pts, int K, Rng& rng) {
    std::vector<std::size_t> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Vec> c;
    for (int k = 0; k < K; ++k) {
        c.push_back(pts[idx[static_cast<std::size_t>(k)]]);
    }
    std::vector<int> lab(pts.size(), -1);
    for (int it = 0; it < 200; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            int best = 0;
            for (int k = 1; k < K; ++k) {
                if ((pts[i] - c[static_cast<std::size_t>(k)]).squaredNorm() <
                    (pts[i] - c[static_cast<std::size_t>(best)]).squaredNorm()) {
                    best = k;
                }
            }
            changed |= lab[i] != best;
            lab[i] = best;
        }
        if (!changed) {
            break;
        }
        for (int k = 0; k < K; ++k) {
            Vec s = Vec::Zero(pts[0].size());
            int n = 0;
            for (std::size_t i = 0; i < pts.size(); ++i) {
                if (lab[i] == k) {
                    s += pts[i];
                    ++n;
                }
            }
            if (n > 0) {
                c[static_cast<std::size_t>(k)] = s / n;
            }
        }
    }
    double inertia = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        inertia += (pts[i] - c[static_cast<std::size_t>(lab[i])]).squaredNorm();
    }
    return inertia;
}

std::vector<UserEmbedding> embed_corpus(const Corpus& c, Featurizer& f) {
    const auto train = c.users_in(Split::train);
    f.fit_idf(train);
    std::vector<UserEmbedding> out;
    for (const auto* u : train) {
        out.push_back(f.embed(*u));
    }
    return out;
}

}  // namespace

TEST_CASE("embed_user is deterministic and unit-norm") {
    const Corpus c = synth_corpus(2, 3, 10, 2);
    Featurizer f(c.vocab, 64, 1);
    const auto emb = embed_corpus(c, f);
    for (const auto& e : emb) {
        CHECK(e.vector.size() == 64);
        CHECK(std::abs(e.vector.norm() - 1.0) < 1e-6);
        CHECK(std::abs(e.norm - 1.0) < 1e-6);
    }
    UserProfile twin = c.users[0];
    twin.user_id = "twin";
    CHECK((f.embed(twin).vector - f.embed(c.users[0]).vector).norm() == 0.0);
    CHECK_THROWS_AS(f.embed("empty", {}), InvalidArgument);
}

TEST_CASE("same-archetype users are closer in embedding space") {
    const Corpus c = synth_corpus(4, 8, 20, 1);
    Featurizer f(c.vocab, 64, 1);
    const auto emb = embed_corpus(c, f);
    double within = 0.0, across = 0.0;
    int nw = 0, na = 0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
        for (std::size_t j = i + 1; j < emb.size(); ++j) {
            const double cosine = emb[i].vector.dot(emb[j].vector);
            if (c.users[i].archetype_id == c.users[j].archetype_id) {
                within += cosine;
                ++nw;
            } else {
                across += cosine;
                ++na;
            }
        }
    }
    CHECK(within / nw > across / na);
}

TEST_CASE("kmeans separates two planted pairs") {
    const std::vector<UserEmbedding> pts = {point("a", {0, 0}), point("b", {0.1, 0}), point("c", {10, 10}),
                                            point("d", {10.1, 10})};
    KMeansOptions o;
    o.K = 2;
    const Clustering c = kmeans_fit(pts, o);
    CHECK(c.assignments.at("a") == c.assignments.at("b"));
    CHECK(c.assignments.at("c") == c.assignments.at("d"));
    CHECK(c.assignments.at("a") != c.assignments.at("c"));
    const Vec& m1 = c.centroids[static_cast<std::size_t>(c.assignments.at("a"))];
    const Vec& m2 = c.centroids[static_cast<std::size_t>(c.assignments.at("c"))];
    CHECK(m1(0) == doctest::Approx(0.05));
    CHECK(m1(1) == doctest::Approx(0.0));
    CHECK(m2(0) == doctest::Approx(10.05));
    CHECK(m2(1) == doctest::Approx(10.0));
}

TEST_CASE("kmeans with K=1 returns the mean") {
    const std::vector<UserEmbedding> pts = {point("a", {1, 2}), point("b", {3, 6}), point("c", {5, 1})};
    KMeansOptions o;
    o.K = 1;
    const Clustering c = kmeans_fit(pts, o);
    CHECK(c.centroids[0](0) == doctest::Approx(3.0));
    CHECK(c.centroids[0](1) == doctest::Approx(3.0));
}

TEST_CASE("kmeans rejects bad K and max_iter") {
    const std::vector<UserEmbedding> pts = {point("a", {1, 2}), point("b", {3, 6})};
    KMeansOptions o;
    o.K = 3;
    CHECK_THROWS_AS(kmeans_fit(pts, o), InvalidArgument);
    o.K = 0;
    CHECK_THROWS_AS(kmeans_fit(pts, o), InvalidArgument);
    o.K = 1;
    o.max_iter = 0;
    CHECK_THROWS_AS(kmeans_fit(pts, o), InvalidArgument);
}

TEST_CASE("kmeans inertia is within 5% of the best of 1000 random-restart Lloyd runs") {
    Rng rng(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<UserEmbedding> pts;
    std::vector<Vec> raw;
    for (int i = 0; i < 30; ++i) {
        pts.push_back(point("p" + std::to_string(i), {u(rng), u(rng)}));
        raw.push_back(pts.back().vector);
    }
    KMeansOptions o;
    o.K = 3;
    const Clustering c = kmeans_fit(pts, o);
    double best = std::numeric_limits<double>::infinity();
    Rng orng(7);
    for (int r = 0; r < 1000; ++r) {
        best = std::min(best, reference_lloyd(raw, 3, orng));
    }
    CHECK(c.inertia <= 1.05 * best);
}

TEST_CASE("property: assignment optimality, monotone inertia, no empty cluster") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<UserEmbedding> pts;
        for (int i = 0; i < 40; ++i) {
            pts.push_back(point("p" + std::to_string(i), {g(rng), g(rng), g(rng)}));
        }
        KMeansOptions o;
        o.K = static_cast<int>(2 + seed % 4);
        o.seed = seed;
        const Clustering c = kmeans_fit(pts, o);
        std::vector<int> counts(static_cast<std::size_t>(c.K), 0);
        for (const auto& e : pts) {
            const int k = c.assignments.at(e.user_id);
            ++counts[static_cast<std::size_t>(k)];
            for (int j = 0; j < c.K; ++j) {
                CHECK((e.vector - c.centroids[static_cast<std::size_t>(k)]).norm() <=
                      (e.vector - c.centroids[static_cast<std::size_t>(j)]).norm());
            }
        }
        for (int n : counts) {
            CHECK(n > 0);
        }
        for (std::size_t i = 1; i < c.inertia_trace.size(); ++i) {
            CHECK(c.inertia_trace[i] <= c.inertia_trace[i - 1] + 1e-12);
        }
    }
}

TEST_CASE("assign_cluster: exact centroid, tie rule, exhaustive scan") {
    Clustering c;
    c.K = 3;
    c.centroids = {point("", {1, 0}).vector, point("", {-1, 0}).vector, point("", {0, 5}).vector};
    CHECK(assign_cluster(c.centroids[2], c) == 2);
    CHECK(assign_cluster(point("", {0, 0}).vector, c) == 0);
    Rng rng(3);
    std::uniform_real_distribution<double> u(-3.0, 6.0);
    for (int i = 0; i < 200; ++i) {
        const Vec e = point("", {u(rng), u(rng)}).vector;
        int best = 0;
        for (int k = 1; k < 3; ++k) {
            if ((e - c.centroids[static_cast<std::size_t>(k)]).norm() <
                (e - c.centroids[static_cast<std::size_t>(best)]).norm()) {
                best = k;
            }
        }
        CHECK(assign_cluster(e, c) == best);
    }
    CHECK_THROWS_AS(assign_cluster(point("", {1, 2, 3}).vector, c), InvalidArgument);
}

TEST_CASE("adjusted Rand index matches hand values") {
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 2}) == doctest::Approx(4.0 / 7.0));
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {5, 5, 2, 2}) == doctest::Approx(1.0));
    CHECK(adjusted_rand_index({0, 1, 0, 1}, {0, 0, 1, 1}) == doctest::Approx(-0.5));
}

TEST_CASE("planted recovery: K=4 on 4 archetypes x 8 users reaches ARI 1") {
    const Corpus c = synth_corpus(4, 8, 20, 1);
    Featurizer f(c.vocab, 64, 1);
    const auto emb = embed_corpus(c, f);
    KMeansOptions o;
    o.K = 4;
    const Clustering cl = kmeans_fit(emb, o);
    std::vector<int> truth, found;
    for (const auto* u : c.users_in(Split::train)) {
        truth.push_back(u->archetype_id);
        found.push_back(cl.assignments.at(u->user_id));
    }
    CHECK(adjusted_rand_index(truth, found) == 1.0);
}

TEST_CASE("clustering JSON round-trip keeps centroids and the frozen featurizer") {
    const Corpus c = synth_corpus(3, 4, 8, 6);
    Featurizer f(c.vocab, 16, 9);
    const auto emb = embed_corpus(c, f);
    KMeansOptions o;
    o.K = 3;
    const Clustering cl = kmeans_fit(emb, o);
    const auto path = (std::filesystem::temp_directory_path() / "card_test_clusters.json").string();
    save_clustering(cl, f, path);
    const auto [cl2, f2] = load_clustering(path, c.vocab);
    std::filesystem::remove(path);
    CHECK(cl2.assignments == cl.assignments);
    for (int k = 0; k < 3; ++k) {
        CHECK((cl2.centroids[static_cast<std::size_t>(k)] - cl.centroids[static_cast<std::size_t>(k)]).norm() == 0.0);
    }
    CHECK((f2.embed(c.users[0]).vector - f.embed(c.users[0]).vector).norm() == 0.0);
    CHECK_THROWS_AS(load_clustering(path, c.vocab), MissingPrerequisite);
}
