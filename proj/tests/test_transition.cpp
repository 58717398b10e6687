#include <doctest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>

#include "heterodiff/transition.hpp"

using namespace hd;

namespace {

Vocabulary small_vocab(int K, int C) {
    std::vector<std::string> names;
    for (int i = 0; i < C; ++i) names.push_back(std::string(1, char('a' + i)));
    return Vocabulary(K, names);
}

ScheduleParams desk_sched() { return ScheduleParams{}; }

double row_sum(const StochMatrix& m, int i) {
    double s = 0;
    for (int j = 0; j < m.n; ++j) s += m.at(i, j);
    return s;
}

double tv_from_uniform(std::span<const double> row) {
    double tv = 0, u = 1.0 / double(row.size());
    for (double v : row) tv += std::abs(v - u);
    return tv / 2;
}

}  // namespace

TEST_SUITE("transition") {

TEST_CASE("gaussian coordinate kernel matches its closed form at K=3, beta=1") {
    // off-diagonal (i,j): exp(-4|i-j|^2 / ((K-1)^2 beta)) / Z with
    // Z = sum_{n=-(K-1)}^{K-1} exp(-4 n^2 / ((K-1)^2 beta)); diagonal absorbs the rest.
    ScheduleParams p;
    p.coord_kind = CoordScheduleKind::linear;
    p.linear_slope = 1.0;  // beta(T) = 1
    StochMatrix q = build_coord_matrix(p.T, p, 3, CoordMatrixKind::gaussian);

    const double e1 = std::exp(-1.0);  // 4*1/4
    const double e4 = std::exp(-4.0);  // 4*4/4
    const double Z = 1.0 + 2 * e1 + 2 * e4;
    CHECK(q.at(0, 1) == doctest::Approx(e1 / Z).epsilon(1e-14));
    CHECK(q.at(0, 2) == doctest::Approx(e4 / Z).epsilon(1e-14));
    CHECK(q.at(0, 0) == doctest::Approx(1.0 - e1 / Z - e4 / Z).epsilon(1e-14));
    CHECK(q.at(1, 0) == doctest::Approx(e1 / Z).epsilon(1e-14));
    CHECK(q.at(1, 2) == doctest::Approx(e1 / Z).epsilon(1e-14));
    CHECK(q.at(1, 1) == doctest::Approx(1.0 - 2 * e1 / Z).epsilon(1e-14));
    for (int i = 0; i < 3; ++i) CHECK(row_sum(q, i) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("vanishing kernel width gives the identity") {
    ScheduleParams p;
    p.coord_kind = CoordScheduleKind::linear;
    p.linear_slope = 1e-12;
    StochMatrix q = build_coord_matrix(1, p, 16, CoordMatrixKind::gaussian);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j)
            CHECK(std::abs(q.at(i, j) - (i == j ? 1.0 : 0.0)) < 1e-9);
}

TEST_CASE("one capped step is NOT uniform; its iterate converges to uniform") {
    // At beta = BETA_CAP every Gaussian weight tends to 1, so a single step has
    // diagonal K/(2K-1), not 1/K. Uniformity is a property of the *cumulative*
    // product: each capped step contracts the deviation by (K-1)/(2K-1).
    ScheduleParams p = desk_sched();  // t >= T_tilde is capped
    {
        StochMatrix q = build_coord_matrix(45, p, 2, CoordMatrixKind::gaussian);
        CHECK(q.at(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-5));
        CHECK(q.at(0, 1) == doctest::Approx(1.0 / 3).epsilon(1e-5));

        StochMatrix it = StochMatrix::identity(2);
        for (int k = 0; k < 40; ++k) it = matmul(it, q);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) CHECK(it.at(i, j) == doctest::Approx(0.5).epsilon(1e-6));
    }
    {
        StochMatrix q = build_coord_matrix(45, p, 16, CoordMatrixKind::gaussian);
        CHECK(q.at(7, 7) == doctest::Approx(16.0 / 31).epsilon(1e-4));
        CHECK(q.at(7, 0) == doctest::Approx(1.0 / 31).epsilon(1e-4));

        // geometric contraction toward uniform across capped steps
        double prev_dev = 1.0;
        StochMatrix it = StochMatrix::identity(16);
        for (int k = 0; k < 12; ++k) {
            it = matmul(it, q);
            double dev = 0;
            for (double v : it.a) dev = std::max(dev, std::abs(v - 1.0 / 16));
            CHECK(dev < prev_dev * 0.52);  // ratio (K-1)/(2K-1) ~ 0.484
            prev_dev = dev;
        }
    }
}

TEST_CASE("desk cumulative coordinate matrix is uniform at T within 1e-4 TV") {
    Vocabulary vocab = small_vocab(32, 2);
    TransitionSet ts(vocab, desk_sched());
    const StochMatrix& last = ts.coord_cumulative(ts.T());
    for (int i = 0; i < 32; ++i)
        CHECK(tv_from_uniform(std::span(last.row(i), 32)) <= 1e-4);

    // and the convenience accessor agrees
    auto term = ts.terminal_coord();
    CHECK(tv_from_uniform(term) <= 1e-4);
}

TEST_CASE("gaussian rows decay monotonically away from the diagonal") {
    ScheduleParams p = desk_sched();
    for (int t : {1, 10, 25, 39}) {
        StochMatrix q = build_coord_matrix(t, p, 32, CoordMatrixKind::gaussian);
        for (int i = 0; i < 32; ++i)
            for (int j = 1; j < 31; ++j) {
                if (j < i) CHECK(q.at(i, j) >= q.at(i, j - 1));          // rising toward diag
                if (j > i) CHECK(q.at(i, j) >= q.at(i, j + 1));          // falling after diag
            }
    }
}

TEST_CASE("every per-step and cumulative matrix is row-stochastic, for every kind") {
    Vocabulary vocab = small_vocab(16, 3);
    for (auto ck : {CoordMatrixKind::gaussian, CoordMatrixKind::uniform, CoordMatrixKind::absorbing})
        for (auto tk : {TypeMatrixKind::absorbing, TypeMatrixKind::uniform}) {
            TransitionSet ts(vocab, desk_sched(), ck, tk);
            for (int t = 1; t <= ts.T(); ++t) {
                for (const StochMatrix* m : {&ts.coord_step(t), &ts.type_step(t),
                                             &ts.coord_cumulative(t), &ts.type_cumulative(t)}) {
                    for (int i = 0; i < m->n; ++i) {
                        CHECK(row_sum(*m, i) == doctest::Approx(1.0).epsilon(1e-9));
                        for (int j = 0; j < m->n; ++j) CHECK(m->at(i, j) >= -1e-15);
                    }
                }
            }
        }
}

TEST_CASE("type transitions: frozen MASK row, identity before the absorbing phase") {
    Vocabulary vocab = small_vocab(8, 3);
    ScheduleParams p = desk_sched();
    TransitionSet ts(vocab, p);
    const int C = 3, MASK = 3;

    for (int t = 1; t <= p.T; ++t) {
        const StochMatrix& q = ts.type_step(t);
        // MASK never leaves MASK
        CHECK(q.at(MASK, MASK) == 1.0);
        for (int j = 0; j < C; ++j) CHECK(q.at(MASK, j) == 0.0);
        // absorbing kind: no cross-type movement, ever
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < C; ++j)
                if (i != j) CHECK(q.at(i, j) == 0.0);
    }

    // exact identity below T_tilde: the late-absorb rate is exactly zero there
    for (int t = 0; t < p.T_tilde; ++t) {
        const StochMatrix& qb = ts.type_cumulative(t);
        for (int i = 0; i <= C; ++i)
            for (int j = 0; j <= C; ++j) CHECK(qb.at(i, j) == (i == j ? 1.0 : 0.0));
    }

    // cumulative mask probability equals the schedule's curve
    for (int t = 0; t <= p.T; ++t) {
        const StochMatrix& qb = ts.type_cumulative(t);
        for (int c = 0; c < C; ++c) {
            CHECK(qb.at(c, MASK) == doctest::Approx(gamma_bar(t, p)).epsilon(1e-12));
            CHECK(qb.at(c, c) == doctest::Approx(1.0 - gamma_bar(t, p)).epsilon(1e-12));
        }
    }
    // fully masked at T
    const StochMatrix& last = ts.type_cumulative(p.T);
    for (int c = 0; c < C; ++c) CHECK(last.at(c, MASK) == 1.0);
}

TEST_CASE("mask probability is monotone along the forward process") {
    Vocabulary vocab = small_vocab(8, 2);
    TransitionSet ts(vocab, desk_sched());
    double prev = -1;
    for (int t = 0; t <= ts.T(); ++t) {
        double m = ts.type_cumulative(t).at(0, 2);
        CHECK(m >= prev);
        prev = m;
    }
}

TEST_CASE("ablation kinds match their defining formulas") {
    ScheduleParams p = desk_sched();
    // uniform coordinate kind: (1-bt) I + bt/K with bt = 1/(T-t+1)
    for (int t : {1, 20, 50}) {
        double bt = 1.0 / double(p.T - t + 1);
        StochMatrix q = build_coord_matrix(t, p, 8, CoordMatrixKind::uniform);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) {
                double expect = bt / 8 + (i == j ? 1.0 - bt : 0.0);
                CHECK(q.at(i, j) == doctest::Approx(expect).epsilon(1e-14));
            }
    }
    // absorbing coordinate kind: sink at K/2 with the absorbing schedule's rate
    for (int t : {41, 45, 50}) {
        double gt = gamma_step(t, p);
        StochMatrix q = build_coord_matrix(t, p, 8, CoordMatrixKind::absorbing);
        for (int i = 0; i < 8; ++i) {
            if (i == 4) {
                CHECK(q.at(i, i) == 1.0);
                continue;
            }
            CHECK(q.at(i, i) == doctest::Approx(1.0 - gt).epsilon(1e-14));
            CHECK(q.at(i, 4) == doctest::Approx(gt).epsilon(1e-14));
        }
    }
    // uniform type kind mixes real types only; MASK unreachable and frozen
    for (int t : {1, 25, 50}) {
        double bt = 1.0 / double(p.T - t + 1);
        StochMatrix q = build_type_matrix(t, p, 3, TypeMatrixKind::uniform);
        for (int i = 0; i < 3; ++i) {
            CHECK(q.at(i, 3) == 0.0);
            for (int j = 0; j < 3; ++j)
                CHECK(q.at(i, j) == doctest::Approx(bt / 3 + (i == j ? 1 - bt : 0)).epsilon(1e-14));
        }
        CHECK(q.at(3, 3) == 1.0);
    }
}

TEST_CASE("forward marginals: unit vectors at t=0 and for specials, normalized always") {
    Vocabulary vocab = small_vocab(8, 3);
    ScheduleParams p;
    p.T = 20;
    p.T_tilde = 16;
    TransitionSet ts(vocab, p);

    auto m0 = ts.forward_marginal(vocab.coord_token(5), 0);
    REQUIRE(int(m0.size()) == 8);
    for (int k = 0; k < 8; ++k) CHECK(m0[size_t(k)] == (k == 5 ? 1.0 : 0.0));

    auto mt0 = ts.forward_marginal(vocab.type_token(1), 0);
    REQUIRE(int(mt0.size()) == 4);
    CHECK(mt0[1] == 1.0);

    for (int t : {0, 7, 20}) {
        auto sp = ts.forward_marginal(vocab.sep(), t);
        REQUIRE(sp.size() == 1);
        CHECK(sp[0] == 1.0);
    }

    for (int t = 0; t <= 20; ++t) {
        auto mc = ts.forward_marginal(vocab.coord_token(2), t);
        double s = 0;
        for (double v : mc) s += v;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }

    // type marginal: exactly the origin type below T_tilde, exactly MASK at T
    auto pre = ts.forward_marginal(vocab.type_token(2), 10);
    CHECK(pre[2] == 1.0);
    auto end = ts.forward_marginal(vocab.type_token(2), 20);
    CHECK(end[3] == 1.0);

    // MASK's own marginal stays MASK
    auto mm = ts.forward_marginal(vocab.mask(), 13);
    CHECK(mm[3] == 1.0);
}

TEST_CASE("forward chains through per-step matrices land on the cumulative marginal") {
    // simulate x_t one step at a time and compare the empirical distribution at
    // several checkpoints with the closed-form cumulative row
    Vocabulary vocab = small_vocab(8, 3);
    ScheduleParams p;
    p.T = 20;
    p.T_tilde = 16;
    TransitionSet ts(vocab, p);
    Rng rng(1234);

    const int chains = 20000;
    const int coord0 = 3, type0 = 1;
    std::vector<int> coord_state(chains, coord0), type_state(chains, type0);
    const std::vector<int> checkpoints = {5, 10, 20};

    for (int t = 1; t <= 20; ++t) {
        const StochMatrix& qc = ts.coord_step(t);
        const StochMatrix& qt = ts.type_step(t);
        for (int i = 0; i < chains; ++i) {
            coord_state[size_t(i)] =
                rng.categorical(std::span<const double>(qc.row(coord_state[size_t(i)]), 8));
            type_state[size_t(i)] =
                rng.categorical(std::span<const double>(qt.row(type_state[size_t(i)]), 4));
        }
        if (std::find(checkpoints.begin(), checkpoints.end(), t) == checkpoints.end()) continue;

        std::vector<double> emp_c(8, 0.0), emp_t(4, 0.0);
        for (int i = 0; i < chains; ++i) {
            emp_c[size_t(coord_state[size_t(i)])] += 1.0 / chains;
            emp_t[size_t(type_state[size_t(i)])] += 1.0 / chains;
        }
        auto want_c = ts.forward_marginal(vocab.coord_token(coord0), t);
        auto want_t = ts.forward_marginal(vocab.type_token(type0), t);
        double tv_c = 0, tv_t = 0;
        for (int k = 0; k < 8; ++k) tv_c += std::abs(emp_c[size_t(k)] - want_c[size_t(k)]) / 2;
        for (int k = 0; k < 4; ++k) tv_t += std::abs(emp_t[size_t(k)] - want_t[size_t(k)]) / 2;
        CHECK(tv_c <= 0.03);
        CHECK(tv_t <= 0.03);
    }
}

TEST_CASE("corrupt_sequence: t=0 copies, t=T masks every type, legality always") {
    Vocabulary vocab = small_vocab(16, 3);
    ScheduleParams p;
    p.T = 20;
    p.T_tilde = 16;
    TransitionSet ts(vocab, p);
    Rng rng(7);

    Layout l;
    l.elements = {{0, 1, 2, 3, 4}, {2, 5, 6, 9, 10}};
    TokenSeq x0 = tokenize(l, vocab, 4);

    TokenSeq same = ts.corrupt_sequence(x0, 0, rng);
    CHECK(same == x0);

    for (int rep = 0; rep < 50; ++rep) {
        TokenSeq xT = ts.corrupt_sequence(x0, 20, rng);
        for (int s = 0; s < xT.M(); ++s) {
            SlotKind k = slot_kind(s, 4);
            if (k == SlotKind::type && x0.tokens[s] != vocab.pad())
                CHECK(xT.tokens[s] == vocab.mask());
        }
    }

    // kind preservation + specials/PAD frozen, across random timesteps
    for (int rep = 0; rep < 3000; ++rep) {
        int t = 1 + rng.uniform_int(20);
        TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
        CHECK(validate_sequence(xt, vocab).empty());
        for (int s = 0; s < xt.M(); ++s) {
            int orig = x0.tokens[s], cur = xt.tokens[s];
            if (vocab.kind(orig) == TokenKind::special) {
                CHECK(cur == orig);
            } else {
                CHECK(vocab.kind(cur) == vocab.kind(orig));
            }
        }
    }

    // per-slot empirical marginal at a middle step matches the closed form
    {
        const int t = 10, draws = 10000;
        std::vector<double> emp(16, 0.0);
        for (int i = 0; i < draws; ++i) {
            TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
            emp[size_t(xt.tokens[2])] += 1.0 / draws;  // slot 2 = first coord (l = 1)
        }
        auto want = ts.forward_marginal(x0.tokens[2], t);
        double tv = 0;
        for (int k = 0; k < 16; ++k) tv += std::abs(emp[size_t(k)] - want[size_t(k)]) / 2;
        CHECK(tv <= 0.03);
    }

    // mask fraction at the halfway point of the absorbing window is gamma_bar
    {
        const int t = 18, draws = 8000;  // gamma_bar = 0.5
        int masked = 0;
        for (int i = 0; i < draws; ++i) {
            TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
            masked += xt.tokens[1] == vocab.mask();
        }
        CHECK(std::abs(double(masked) / draws - gamma_bar(t, p)) < 0.02);
    }
}

TEST_CASE("posterior at t=1 is a point mass on x0") {
    Vocabulary vocab = small_vocab(6, 2);
    ScheduleParams p;
    p.T = 10;
    p.T_tilde = 8;
    TransitionSet ts(vocab, p);
    for (int x0 = 0; x0 < 6; ++x0)
        for (int x1 = 0; x1 < 6; ++x1) {
            auto post = ts.posterior(x1, x0, 1);
            for (int k = 0; k < 6; ++k)
                CHECK(post[size_t(k)] == doctest::Approx(k == x0 ? 1.0 : 0.0).epsilon(1e-12));
        }
}

TEST_CASE("posterior matches direct Bayes on every (x0, x_t, t) at K=6, T=10") {
    Vocabulary vocab = small_vocab(6, 2);
    ScheduleParams p;
    p.T = 10;
    p.T_tilde = 8;
    TransitionSet ts(vocab, p);

    double worst = 0;
    for (int t = 1; t <= 10; ++t) {
        const StochMatrix& qt = ts.coord_step(t);
        const StochMatrix& prev = ts.coord_cumulative(t - 1);
        const StochMatrix& cur = ts.coord_cumulative(t);
        for (int x0 = 0; x0 < 6; ++x0)
            for (int xt = 0; xt < 6; ++xt) {
                auto post = ts.posterior(xt, x0, t);
                double sum = 0;
                for (int k = 0; k < 6; ++k) {
                    // Bayes numerator over the chain-rule denominator, no renorm
                    double direct = qt.at(k, xt) * prev.at(x0, k) / cur.at(x0, xt);
                    worst = std::max(worst, std::abs(direct - post[size_t(k)]));
                    sum += post[size_t(k)];
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
            }
    }
    CHECK(worst <= 1e-8);

    // type block, all feasible pairs
    const int MASKTOK = vocab.mask();
    for (int t = 1; t <= 10; ++t) {
        const StochMatrix& qt = ts.type_step(t);
        const StochMatrix& prev = ts.type_cumulative(t - 1);
        const StochMatrix& cur = ts.type_cumulative(t);
        for (int c = 0; c < 2; ++c) {
            for (int xt_idx : {c, 2}) {  // same type or MASK; cross-type is infeasible
                if (cur.at(c, xt_idx) == 0.0) continue;
                int xt_tok = xt_idx == 2 ? MASKTOK : vocab.type_token(xt_idx);
                auto post = ts.posterior(xt_tok, vocab.type_token(c), t);
                for (int k = 0; k < 3; ++k) {
                    double direct = qt.at(k, xt_idx) * prev.at(c, k) / cur.at(c, xt_idx);
                    CHECK(std::abs(direct - post[size_t(k)]) <= 1e-8);
                }
            }
        }
    }
}

TEST_CASE("posterior rejects infeasible and ill-kinded pairs") {
    Vocabulary vocab = small_vocab(6, 2);
    ScheduleParams p;
    p.T = 10;
    p.T_tilde = 8;
    TransitionSet ts(vocab, p);

    // under late-absorb types never cross: observing type b from origin a is impossible
    CHECK_THROWS_AS(ts.posterior(vocab.type_token(1), vocab.type_token(0), 5),
                    InfeasiblePairError);
    try {
        ts.posterior(vocab.type_token(1), vocab.type_token(0), 5);
    } catch (const InfeasiblePairError& e) {
        CHECK(e.t == 5);
        CHECK(e.x0 == vocab.type_token(0));
        CHECK(e.xt == vocab.type_token(1));
    }
    // MASK at a pre-absorbing step is equally impossible
    CHECK_THROWS_AS(ts.posterior(vocab.mask(), vocab.type_token(0), 3), InfeasiblePairError);

    CHECK_THROWS_AS(ts.posterior(vocab.coord_token(0), vocab.type_token(0), 5),
                    std::invalid_argument);
    CHECK_THROWS_AS(ts.posterior(vocab.sep(), vocab.sep(), 5), std::invalid_argument);
    CHECK_THROWS_AS(ts.posterior(vocab.coord_token(0), vocab.coord_token(0), 0),
                    std::out_of_range);
    CHECK_THROWS_AS(ts.posterior(vocab.coord_token(0), vocab.coord_token(0), 11),
                    std::out_of_range);
}

TEST_CASE("cumulative accessors: identity at t=0, bounds checked") {
    Vocabulary vocab = small_vocab(8, 2);
    TransitionSet ts(vocab, desk_sched());
    const StochMatrix& c0 = ts.coord_cumulative(0);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) CHECK(c0.at(i, j) == (i == j ? 1.0 : 0.0));
    const StochMatrix& t0 = ts.type_cumulative(0);
    for (int i = 0; i < 3; ++i) CHECK(t0.at(i, i) == 1.0);

    CHECK_THROWS_AS(ts.coord_step(0), std::out_of_range);
    CHECK_THROWS_AS(ts.coord_step(51), std::out_of_range);
    CHECK_THROWS_AS(ts.coord_cumulative(-1), std::out_of_range);
    CHECK_THROWS_AS(ts.type_cumulative(51), std::out_of_range);
}

TEST_CASE("matmul and identity behave") {
    StochMatrix a(2);
    a.at(0, 0) = 0.5;
    a.at(0, 1) = 0.5;
    a.at(1, 1) = 1.0;
    StochMatrix sq = matmul(a, a);
    CHECK(sq.at(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(sq.at(0, 1) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(sq.at(1, 0) == 0.0);
    CHECK(sq.at(1, 1) == 1.0);
    CHECK_THROWS_AS(matmul(a, StochMatrix(3)), std::invalid_argument);
}

TEST_CASE("matrix kind names round-trip") {
    for (auto k : {CoordMatrixKind::gaussian, CoordMatrixKind::uniform, CoordMatrixKind::absorbing})
        CHECK(coord_matrix_kind_from_name(name(k)) == k);
    for (auto k : {TypeMatrixKind::absorbing, TypeMatrixKind::uniform})
        CHECK(type_matrix_kind_from_name(name(k)) == k);
    CHECK_THROWS_AS(coord_matrix_kind_from_name("x"), std::invalid_argument);
    CHECK_THROWS_AS(type_matrix_kind_from_name("x"), std::invalid_argument);
}

TEST_CASE("dump_csv writes one file per matrix per step") {
    namespace fs = std::filesystem;
    Vocabulary vocab = small_vocab(4, 2);
    ScheduleParams p;
    p.T = 3;
    p.T_tilde = 2;
    TransitionSet ts(vocab, p);
    std::string dir = "/tmp/hd_test_dump_" + std::to_string(::getpid());
    ts.dump_csv(dir);

    for (int t = 1; t <= 3; ++t)
        for (const char* stem : {"q_coord_t", "q_type_t", "qbar_coord_t", "qbar_type_t"}) {
            fs::path f = fs::path(dir) / (stem + std::to_string(t) + ".csv");
            REQUIRE(fs::exists(f));
            std::ifstream in(f);
            std::string line;
            int rows = 0;
            while (std::getline(in, line)) {
                ++rows;
                CHECK(std::count(line.begin(), line.end(), ',') ==
                      (std::string(stem).find("coord") != std::string::npos ? 3 : 2));
            }
            CHECK(rows == (std::string(stem).find("coord") != std::string::npos ? 4 : 3));
        }
    fs::remove_all(dir);
}

}  // TEST_SUITE
