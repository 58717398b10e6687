#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "heterodiff/sampler.hpp"

using namespace hd;

namespace {

Vocabulary tiny_vocab() { return Vocabulary(8, {"a", "b", "c"}); }

ScheduleParams tiny_sched() {
    ScheduleParams p;
    p.T = 10;
    p.T_tilde = 8;
    return p;
}

// predictor with uniform coordinate belief and uniform real-type belief; same
// output a zero-initialized network produces, but with no network in the loop
PredictFn uniform_predictor(const Vocabulary& vocab) {
    return [vocab](const std::vector<TokenSeq>& seqs, const std::vector<int>&) {
        std::vector<SlotDists> out;
        out.reserve(seqs.size());
        for (const TokenSeq& seq : seqs) {
            SlotDists d;
            d.coord = Mat<double>(seq.M(), vocab.K);
            d.type = Mat<double>(seq.M(), vocab.C() + 1);
            for (int s = 0; s < seq.M(); ++s) {
                TokenKind k = vocab.kind(seq.tokens[s]);
                if (k == TokenKind::coord)
                    for (int j = 0; j < vocab.K; ++j) d.coord.at(s, j) = 1.0 / vocab.K;
                else if (k == TokenKind::type)
                    for (int j = 0; j < vocab.C(); ++j) d.type.at(s, j) = 1.0 / vocab.C();
            }
            out.push_back(std::move(d));
        }
        return out;
    };
}

// claims every slot of the given clean sequence with certainty
PredictFn delta_predictor(const TokenSeq& x0, const Vocabulary& vocab) {
    return [x0, vocab](const std::vector<TokenSeq>& seqs, const std::vector<int>&) {
        std::vector<SlotDists> out;
        for (size_t i = 0; i < seqs.size(); ++i) {
            SlotDists d;
            d.coord = Mat<double>(x0.M(), vocab.K);
            d.type = Mat<double>(x0.M(), vocab.C() + 1);
            for (int s = 0; s < x0.M(); ++s) {
                int tok = x0.tokens[s];
                if (vocab.kind(tok) == TokenKind::coord) d.coord.at(s, tok) = 1.0;
                else if (vocab.kind(tok) == TokenKind::type)
                    d.type.at(s, vocab.type_id(tok)) = 1.0;
            }
            out.push_back(std::move(d));
        }
        return out;
    };
}

// pathological predictor: convinced every type slot should stay MASK
PredictFn mask_loving_predictor(const Vocabulary& vocab) {
    return [vocab](const std::vector<TokenSeq>& seqs, const std::vector<int>&) {
        std::vector<SlotDists> out;
        for (const TokenSeq& seq : seqs) {
            SlotDists d;
            d.coord = Mat<double>(seq.M(), vocab.K);
            d.type = Mat<double>(seq.M(), vocab.C() + 1);
            for (int s = 0; s < seq.M(); ++s) {
                TokenKind k = vocab.kind(seq.tokens[s]);
                if (k == TokenKind::coord)
                    for (int j = 0; j < vocab.K; ++j) d.coord.at(s, j) = 1.0 / vocab.K;
                else if (k == TokenKind::type)
                    d.type.at(s, vocab.C()) = 1.0;
            }
            out.push_back(std::move(d));
        }
        return out;
    };
}

Corpus two_count_corpus(uint64_t seed) {
    std::vector<Layout> layouts;
    Rng rng(seed);
    Layout a, b;
    a.elements = {{0, 1, 2, 3, 4}, {2, 2, 3, 5, 6}};
    b.elements = {{1, 0, 0, 6, 2}};
    for (int i = 0; i < 20; ++i) {
        layouts.push_back(perturb(a, 0.05, 8, rng));
        layouts.push_back(perturb(b, 0.05, 8, rng));
    }
    return split_corpus(layouts, 3, 1, 1, 1);
}

bool seq_legal(const TokenSeq& seq, const Vocabulary& vocab) {
    return validate_sequence(seq, vocab).empty();
}

std::multiset<int> type_multiset(const Layout& l) {
    std::multiset<int> m;
    for (const Element& e : l.elements) m.insert(e.type);
    return m;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("initial noise has the right frame: MASK types, placed specials, PAD tail") {
    Vocabulary vocab = tiny_vocab();
    Rng rng(1);
    TokenSeq seq = init_noise(2, 3, vocab, rng);
    REQUIRE(seq.M() == seq_length(3));
    CHECK(seq.tokens.front() == vocab.sos());
    CHECK(seq.tokens.back() == vocab.eos());
    for (int b = 0; b < 2; ++b) {
        int base = 1 + 6 * b;
        CHECK(seq.tokens[base] == vocab.mask());
        for (int c = 1; c <= 4; ++c) {
            CHECK(seq.tokens[base + c] >= 0);
            CHECK(seq.tokens[base + c] < vocab.K);
        }
        CHECK(seq.tokens[base + 5] == vocab.sep());
    }
    for (int s = 13; s <= 18; ++s) CHECK(seq.tokens[s] == vocab.pad());
    CHECK(seq_legal(seq, vocab));

    // full occupancy leaves no PAD anywhere
    TokenSeq full = init_noise(3, 3, vocab, rng);
    for (int tok : full.tokens) CHECK(tok != vocab.pad());

    CHECK_THROWS_AS(init_noise(0, 3, vocab, rng), std::invalid_argument);
    CHECK_THROWS_AS(init_noise(4, 3, vocab, rng), std::invalid_argument);
}

TEST_CASE("initial coordinate noise is uniform over bins") {
    Vocabulary vocab(32, {"a"});
    Rng rng(7);
    std::vector<long> counts(32, 0);
    const int trials = 25000;
    for (int i = 0; i < trials; ++i) {
        TokenSeq seq = init_noise(1, 1, vocab, rng);
        for (int s = 2; s <= 5; ++s) ++counts[size_t(seq.tokens[s])];
    }
    double total = 4.0 * trials, tv = 0;
    for (long c : counts) tv += std::abs(c / total - 1.0 / 32);
    CHECK(tv / 2 <= 0.01);

    // deterministic under the stream
    Rng r1(9), r2(9);
    CHECK(init_noise(1, 2, vocab, r1) == init_noise(1, 2, vocab, r2));
}

TEST_CASE("one reverse step under a certain predictor follows the exact posterior") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    Layout l;
    l.elements = {{0, 1, 2, 3, 4}, {2, 2, 3, 5, 6}};
    TokenSeq x0 = tokenize(l, vocab, 2);
    PredictFn predict = delta_predictor(x0, vocab);

    const int t = 5;
    Rng corrupt_rng(11);
    TokenSeq xt = ts.corrupt_sequence(x0, t, corrupt_rng);

    const int slot = 2;  // first coordinate of the first element
    auto want = ts.posterior(xt.tokens[slot], x0.tokens[slot], t);

    std::vector<long> counts(8, 0);
    const int trials = 20000;
    Rng rng(13);
    for (int i = 0; i < trials; ++i) {
        TokenSeq prev = reverse_step(predict, xt, t, ts, rng);
        CHECK(prev.tokens[0] == vocab.sos());
        ++counts[size_t(prev.tokens[slot])];
    }
    double tv = 0;
    for (int k = 0; k < 8; ++k) tv += std::abs(counts[size_t(k)] / double(trials) - want[size_t(k)]);
    CHECK(tv / 2 <= 0.02);
}

TEST_CASE("greedy reverse steps are deterministic and recover a certain x0 at t=1") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    Layout l;
    l.elements = {{1, 0, 1, 4, 6}};
    TokenSeq x0 = tokenize(l, vocab, 2);
    PredictFn predict = delta_predictor(x0, vocab);

    Rng c(17);
    TokenSeq x1 = ts.corrupt_sequence(x0, 1, c);
    Rng r1(19), r2(23);  // different streams, same greedy answer
    TokenSeq a = reverse_step(predict, x1, 1, ts, r1, true);
    TokenSeq b = reverse_step(predict, x1, 1, ts, r2, true);
    CHECK(a == b);
    CHECK(a == x0);
    // sampling at t=1 from a point mass also recovers x0
    TokenSeq s = reverse_step(predict, x1, 1, ts, r1, false);
    CHECK(s == x0);
}

TEST_CASE("batched reverse steps equal per-sequence steps with forked streams") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);
    Rng base(29);

    std::vector<TokenSeq> seqs;
    std::vector<Rng> rngs, rngs_copy;
    for (int i = 0; i < 4; ++i) {
        Rng r = base.fork(uint64_t(i));
        seqs.push_back(init_noise(1 + i % 2, 2, vocab, r));
        rngs.push_back(r);
        rngs_copy.push_back(r);
    }
    std::vector<TokenSeq> batch = reverse_step_batch(predict, seqs, 9, ts, rngs);
    REQUIRE(batch.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        TokenSeq single = reverse_step(predict, seqs[i], 9, ts, rngs_copy[i]);
        CHECK(batch[i] == single);
    }

    std::vector<Rng> short_rngs(2, Rng(1));
    CHECK_THROWS_AS(reverse_step_batch(predict, seqs, 9, ts, short_rngs),
                    std::invalid_argument);
}

TEST_CASE("full reverse trajectories stay legal and resolve types on schedule") {
    Vocabulary vocab = tiny_vocab();
    ScheduleParams sched = tiny_sched();
    TransitionSet ts(vocab, sched);
    PredictFn predict = uniform_predictor(vocab);
    Rng rng(31);

    for (int traj = 0; traj < 50; ++traj) {
        int n = 1 + rng.uniform_int(3);
        TokenSeq seq = init_noise(n, 3, vocab, rng);
        for (int t = 10; t >= 1; --t) {
            seq = reverse_step(predict, seq, t, ts, rng);
            CHECK(seq_legal(seq, vocab));
            if (t - 1 <= sched.T_tilde) {
                // absorbing mass is gone here; every type slot must be resolved
                for (int s = 0; s < seq.M(); ++s)
                    if (slot_kind(s, 3) == SlotKind::type)
                        CHECK(seq.tokens[s] != vocab.mask());
            }
        }
        Layout out = detokenize(seq, vocab);
        CHECK(out.n() == n);
        for (const Element& e : out.elements) CHECK(element_valid(e, vocab));
    }
}

TEST_CASE("unconditional generation is deterministic and batching-independent") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);
    Corpus prior = two_count_corpus(3);

    GenerationConfig cfg;
    cfg.T_ugen = 10;
    cfg.n_max = 3;
    cfg.seed = 41;
    cfg.samples = 5;

    SampleStats st1, st2;
    std::vector<Layout> a = generate_unconditional(predict, prior, ts, cfg, &st1);
    std::vector<Layout> b = generate_unconditional(predict, prior, ts, cfg, &st2);
    REQUIRE(a.size() == 5);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    CHECK(st1.retries == 0);
    CHECK(st1.masked_failures == 0);

    // shrinking the batch must reproduce a prefix: streams are forked per index
    GenerationConfig small = cfg;
    small.samples = 3;
    std::vector<Layout> c = generate_unconditional(predict, prior, ts, small);
    REQUIRE(c.size() == 3);
    for (size_t i = 0; i < 3; ++i) CHECK(c[i] == a[i]);

    // a different seed gives different output
    GenerationConfig other = cfg;
    other.seed = 42;
    std::vector<Layout> d = generate_unconditional(predict, prior, ts, other);
    bool any_diff = false;
    for (size_t i = 0; i < d.size(); ++i) any_diff = any_diff || !(d[i] == a[i]);
    CHECK(any_diff);
}

TEST_CASE("unconditional samples are canonical, valid, and follow the count prior") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);
    Corpus prior = two_count_corpus(5);

    GenerationConfig cfg;
    cfg.T_ugen = 10;
    cfg.n_max = 3;
    cfg.seed = 43;
    cfg.samples = 60;

    std::vector<Layout> out = generate_unconditional(predict, prior, ts, cfg);
    REQUIRE(out.size() == 60);
    std::map<int, int> count_hist;
    for (const Layout& l : out) {
        CHECK(is_canonical(l));
        for (const Element& e : l.elements) CHECK(element_valid(e, vocab));
        ++count_hist[l.n()];
    }
    // the prior only contains 1- and 2-element layouts
    CHECK(count_hist.size() == 2);
    CHECK(count_hist[1] > 0);
    CHECK(count_hist[2] > 0);
    CHECK(count_hist[1] + count_hist[2] == 60);
}

TEST_CASE("the trace observer sees every step of every trajectory") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);
    Corpus prior = two_count_corpus(7);

    // the start must sit inside the absorbing window (MASK has zero forward
    // probability at t <= T_tilde), so the shortest traceable run is from t = 9
    GenerationConfig cfg;
    cfg.T_ugen = 9;
    cfg.n_max = 3;
    cfg.seed = 47;
    cfg.samples = 2;

    std::vector<std::tuple<int, int, TokenSeq>> seen;
    generate_unconditional(predict, prior, ts, cfg, nullptr,
                           [&](int idx, int t, const TokenSeq& s) { seen.emplace_back(idx, t, s); });
    // per sample: the T_ugen init state plus one state per step down to 0
    REQUIRE(seen.size() == 2 * 10);
    std::map<int, std::vector<int>> ts_by_idx;
    for (auto& [idx, t, s] : seen) {
        ts_by_idx[idx].push_back(t);
        CHECK(seq_legal(s, vocab));
    }
    for (auto& [idx, tv] : ts_by_idx) {
        REQUIRE(tv.size() == 10);
        for (int i = 0; i < 10; ++i) CHECK(tv[size_t(i)] == 9 - i);
    }
}

TEST_CASE("type-conditioned generation hits the requested multiset exactly") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);

    GenerationConfig cfg;
    cfg.T_gentype = 9;
    cfg.n_max = 3;
    cfg.seed = 53;
    cfg.samples = 25;

    std::vector<int> ids = {2, 0, 0};  // unsorted on purpose
    SampleStats st;
    std::vector<Layout> out = generate_conditioned_types(predict, ids, ts, cfg, &st);
    REQUIRE(out.size() == 25);
    std::multiset<int> want = {0, 0, 2};
    for (const Layout& l : out) {
        CHECK(type_multiset(l) == want);
        CHECK(is_canonical(l));
        for (const Element& e : l.elements) CHECK(element_valid(e, vocab));
    }
    CHECK(st.retries == 0);
    CHECK(st.masked_failures == 0);

    // same seed reproduces; fewer samples are a prefix
    std::vector<Layout> again = generate_conditioned_types(predict, ids, ts, cfg);
    for (size_t i = 0; i < 25; ++i) CHECK(again[i] == out[i]);

    CHECK_THROWS_AS(generate_conditioned_types(predict, {}, ts, cfg), std::invalid_argument);
    CHECK_THROWS_AS(generate_conditioned_types(predict, {0, 0, 0, 0}, ts, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(generate_conditioned_types(predict, {7}, ts, cfg), std::invalid_argument);
}

TEST_CASE("a predictor that insists on MASK exhausts the retry budget") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = mask_loving_predictor(vocab);
    Corpus prior = two_count_corpus(11);

    GenerationConfig cfg;
    cfg.T_ugen = 10;
    cfg.T_gentype = 9;  // clamped real types need gamma_bar(t) < 1 at the start
    cfg.n_max = 3;
    cfg.seed = 59;
    cfg.samples = 2;
    cfg.retry_budget = 3;

    SampleStats st;
    std::vector<Layout> out = generate_unconditional(predict, prior, ts, cfg, &st);
    CHECK(out.empty());
    CHECK(st.retries == 3);         // budget spent to the last retry
    CHECK(st.masked_failures == 2); // then both samples abandoned

    // clamped type slots bypass the posterior entirely, so the same predictor
    // cannot derail conditioned generation: the requested types arrive verbatim
    std::vector<Layout> cond = generate_conditioned_types(predict, {0, 1}, ts, cfg, &st);
    REQUIRE(cond.size() == 2);
    for (const Layout& l : cond) {
        REQUIRE(l.elements.size() == 2);
        std::vector<int> got{l.elements[0].type, l.elements[1].type};
        std::sort(got.begin(), got.end());
        CHECK(got == std::vector<int>{0, 1});
    }
}

TEST_CASE("zero-step refinement is the canonical identity") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);

    Layout flawed;  // deliberately out of canonical order
    flawed.elements = {{2, 2, 3, 5, 6}, {0, 1, 2, 3, 4}};

    GenerationConfig cfg;
    cfg.T_refine = 0;
    cfg.n_max = 3;
    cfg.seed = 61;

    Layout out = refine(predict, flawed, ts, cfg);
    Layout want = flawed;
    canonicalize(want);
    CHECK(out == want);
    CHECK(is_canonical(out));
}

TEST_CASE("refinement keeps the types and count while moving coordinates") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);

    Layout flawed;
    flawed.elements = {{0, 1, 2, 3, 4}, {1, 0, 0, 6, 2}, {2, 2, 3, 5, 6}};

    GenerationConfig cfg;
    cfg.T_refine = 4;
    cfg.n_max = 3;
    cfg.seed = 67;

    Layout out = refine(predict, flawed, ts, cfg);
    CHECK(out.n() == 3);
    CHECK(type_multiset(out) == type_multiset(flawed));
    CHECK(is_canonical(out));
    for (const Element& e : out.elements) CHECK(element_valid(e, vocab));

    Layout again = refine(predict, flawed, ts, cfg);
    CHECK(out == again);

    // the batch variant forks one stream per layout
    std::vector<Layout> batch = refine_batch(predict, {flawed, flawed}, ts, cfg);
    REQUIRE(batch.size() == 2);
    CHECK(batch[0] == out);

    GenerationConfig bad = cfg;
    bad.T_refine = 11;
    CHECK_THROWS_AS(refine(predict, flawed, ts, bad), std::invalid_argument);
    bad.T_refine = -1;
    CHECK_THROWS_AS(refine(predict, flawed, ts, bad), std::invalid_argument);
}

TEST_CASE("full-depth refinement re-draws every coordinate yet keeps the types") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);

    Layout flawed;
    flawed.elements = {{0, 1, 2, 3, 4}, {1, 0, 0, 6, 2}};

    GenerationConfig cfg;
    cfg.T_refine = 10;  // == T: pinned real types have zero forward probability here,
                        // so they must ride along as conditioning, not as chain state
    cfg.n_max = 3;
    cfg.seed = 73;

    Layout out = refine(predict, flawed, ts, cfg);
    CHECK(out.n() == 2);
    CHECK(type_multiset(out) == type_multiset(flawed));
    CHECK(is_canonical(out));
    for (const Element& e : out.elements) CHECK(element_valid(e, vocab));
}

TEST_CASE("a refinement pass under a trained-like predictor undoes small damage") {
    // delta predictor = a model that knows the clean layout perfectly; refinement
    // from a shallow depth must pull the corrupted copy back towards it
    Vocabulary vocab(32, {"a", "b"});
    ScheduleParams sched;
    sched.T = 50;
    sched.T_tilde = 40;
    TransitionSet ts(vocab, sched);

    Layout clean;
    clean.elements = {{0, 4, 4, 12, 10}, {1, 16, 4, 28, 10}, {1, 4, 16, 28, 24}};
    TokenSeq x0 = tokenize(clean, vocab, 3);
    PredictFn predict = delta_predictor(x0, vocab);

    Rng rng(71);
    double damage_before = 0, damage_after = 0;
    int trials = 20;
    for (int i = 0; i < trials; ++i) {
        Layout flawed = perturb(clean, 0.02, 32, rng);
        GenerationConfig cfg;
        cfg.T_refine = 10;
        cfg.n_max = 3;
        cfg.seed = 73 + uint64_t(i);
        cfg.greedy_final = true;
        Layout fixed = refine(predict, flawed, ts, cfg);
        auto bin_err = [&](const Layout& l) {
            double e = 0;
            for (int j = 0; j < l.n(); ++j) {
                const Element &a = l.elements[j], &b = clean.elements[j];
                e += std::abs(a.l - b.l) + std::abs(a.t - b.t) + std::abs(a.r - b.r) +
                     std::abs(a.b - b.b);
            }
            return e;
        };
        damage_before += bin_err(flawed);
        damage_after += bin_err(fixed);
    }
    CHECK(damage_after < 0.5 * damage_before);
}

TEST_CASE("generation through a real model behaves like the synthetic predictors") {
    DenoiserConfig dc;
    dc.layers = 1;
    dc.heads = 2;
    dc.model_dim = 16;
    dc.ff_dim = 32;
    dc.dropout = 0;
    dc.vocab = tiny_vocab();
    dc.n_max = 3;
    dc.T = 10;
    Denoiser<float> model(dc);
    Rng rng(79);
    model.init_params(rng);

    TransitionSet ts(tiny_vocab(), tiny_sched());
    PredictFn predict = predictor(model);
    Corpus prior = two_count_corpus(13);

    GenerationConfig cfg;
    cfg.T_ugen = 10;
    cfg.T_gentype = 9;
    cfg.n_max = 3;
    cfg.seed = 83;
    cfg.samples = 6;

    SampleStats st;
    std::vector<Layout> out = generate_unconditional(predict, prior, ts, cfg, &st);
    REQUIRE(out.size() == 6);
    CHECK(st.masked_failures == 0);
    for (const Layout& l : out) {
        CHECK(is_canonical(l));
        for (const Element& e : l.elements) CHECK(element_valid(e, tiny_vocab()));
    }

    std::vector<Layout> cond = generate_conditioned_types(predict, {1, 2}, ts, cfg);
    std::multiset<int> want = {1, 2};
    for (const Layout& l : cond) CHECK(type_multiset(l) == want);
}

TEST_CASE("generation horizons are validated") {
    Vocabulary vocab = tiny_vocab();
    TransitionSet ts(vocab, tiny_sched());
    PredictFn predict = uniform_predictor(vocab);
    Corpus prior = two_count_corpus(17);

    GenerationConfig cfg;
    cfg.n_max = 3;
    cfg.T_ugen = 11;
    CHECK_THROWS_AS(generate_unconditional(predict, prior, ts, cfg), std::invalid_argument);
    cfg.T_ugen = 0;
    CHECK_THROWS_AS(generate_unconditional(predict, prior, ts, cfg), std::invalid_argument);
    cfg.T_ugen = 10;
    cfg.samples = 0;
    CHECK_THROWS_AS(generate_unconditional(predict, prior, ts, cfg), std::invalid_argument);
    cfg.samples = 1;
    cfg.T_gentype = 0;
    CHECK_THROWS_AS(generate_conditioned_types(predict, {0}, ts, cfg), std::invalid_argument);

    // starting from pure noise below the absorbing window is structurally
    // impossible: the MASK-typed start state has zero probability under q_t
    cfg.T_gentype = 9;
    cfg.T_ugen = 8;
    CHECK_THROWS_AS(generate_unconditional(predict, prior, ts, cfg), std::runtime_error);
}

}  // TEST_SUITE
