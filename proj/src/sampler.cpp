#include "heterodiff/sampler.hpp"

#include <algorithm>
#include <numeric>

namespace hd {

template <class Real>
PredictFn predictor(const Denoiser<Real>& model, bool use_ema) {
    const Denoiser<Real>* m = &model;
    return [m, use_ema](const std::vector<TokenSeq>& seqs, const std::vector<int>& ts) {
        return m->predict_x0_batch(seqs, ts, use_ema);
    };
}
template PredictFn predictor<float>(const Denoiser<float>&, bool);
template PredictFn predictor<double>(const Denoiser<double>&, bool);

TokenSeq init_noise(int n, int n_max, const Vocabulary& vocab, Rng& rng) {
    if (n < 1 || n > n_max) throw std::invalid_argument("init_noise: n out of range");
    TokenSeq seq;
    seq.n_max = n_max;
    seq.tokens.assign(size_t(seq_length(n_max)), vocab.pad());
    seq.tokens.front() = vocab.sos();
    seq.tokens.back() = vocab.eos();
    for (int b = 0; b < n; ++b) {
        int base = 1 + 6 * b;
        seq.tokens[base] = vocab.mask();
        for (int c = 1; c <= 4; ++c) seq.tokens[base + c] = rng.uniform_int(vocab.K);
        seq.tokens[base + 5] = vocab.sep();
    }
    return seq;
}

namespace {

int argmax_row(const double* w, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (w[i] > w[best]) best = i;
    return best;
}

// draw x_{t-1} from a per-slot reverse distribution; specials/PAD stay frozen
TokenSeq draw_from_reverse(const SlotDists& rd, const TokenSeq& seq_t, const Vocabulary& vocab,
                           Rng& rng, bool greedy) {
    TokenSeq out = seq_t;
    int K = vocab.K, C = vocab.C();
    for (int s = 0; s < seq_t.M(); ++s) {
        int tok = seq_t.tokens[s];
        switch (vocab.kind(tok)) {
            case TokenKind::special:
                break;
            case TokenKind::coord: {
                const double* row = rd.coord.row(s);
                out.tokens[s] = greedy ? argmax_row(row, K)
                                       : rng.categorical(std::span<const double>(row, size_t(K)));
                break;
            }
            case TokenKind::type: {
                const double* row = rd.type.row(s);
                int j = greedy ? argmax_row(row, C + 1)
                               : rng.categorical(std::span<const double>(row, size_t(C + 1)));
                out.tokens[s] = j == C ? vocab.mask() : vocab.type_token(j);
                break;
            }
        }
    }
    return out;
}

struct RunState {
    TokenSeq seq;
    Rng* rng = nullptr;
    int idx = 0;
    std::vector<int> clamp;  // per type slot: required token, or empty = unconditioned
};

void apply_clamp(TokenSeq& seq, const std::vector<int>& clamp) {
    for (size_t s = 0; s < clamp.size(); ++s)
        if (clamp[s] >= 0) seq.tokens[s] = clamp[s];
}

// lockstep reverse from t_start down to 1; one predictor call per step
void run_reverse(const PredictFn& predict, std::vector<RunState>& states, int t_start,
                 const TransitionSet& ts, bool greedy_final, const TraceFn& trace) {
    const Vocabulary& vb = ts.vocab();
    for (int t = t_start; t >= 1; --t) {
        std::vector<TokenSeq> seqs;
        seqs.reserve(states.size());
        for (auto& st : states) seqs.push_back(st.seq);
        std::vector<int> tv(states.size(), t);
        std::vector<SlotDists> dists = predict(seqs, tv);
        if (dists.size() != states.size())
            throw std::runtime_error("predictor returned a wrong batch size");
        for (size_t i = 0; i < states.size(); ++i) {
            SlotDists rd = reverse_distribution(dists[i], states[i].seq, t, ts,
                                                states[i].clamp.empty() ? nullptr
                                                                        : &states[i].clamp);
            states[i].seq =
                draw_from_reverse(rd, states[i].seq, vb, *states[i].rng, greedy_final && t == 1);
            if (!states[i].clamp.empty()) apply_clamp(states[i].seq, states[i].clamp);
            if (trace) trace(states[i].idx, t - 1, states[i].seq);
        }
    }
}

void check_horizon(int t_start, const TransitionSet& ts, const char* what) {
    if (t_start < 1 || t_start > ts.T())
        throw std::invalid_argument(std::string(what) + " must lie in [1, T]");
}

}  // namespace

TokenSeq reverse_step(const PredictFn& predict, const TokenSeq& seq_t, int t,
                      const TransitionSet& ts, Rng& rng, bool greedy) {
    std::vector<SlotDists> d = predict({seq_t}, {t});
    SlotDists rd = reverse_distribution(d.at(0), seq_t, t, ts);
    return draw_from_reverse(rd, seq_t, ts.vocab(), rng, greedy);
}

std::vector<TokenSeq> reverse_step_batch(const PredictFn& predict,
                                         const std::vector<TokenSeq>& seqs, int t,
                                         const TransitionSet& ts, std::vector<Rng>& rngs,
                                         bool greedy) {
    if (seqs.size() != rngs.size())
        throw std::invalid_argument("reverse_step_batch: one rng stream per sequence");
    std::vector<int> tv(seqs.size(), t);
    std::vector<SlotDists> d = predict(seqs, tv);
    std::vector<TokenSeq> out;
    out.reserve(seqs.size());
    for (size_t i = 0; i < seqs.size(); ++i) {
        SlotDists rd = reverse_distribution(d[i], seqs[i], t, ts);
        out.push_back(draw_from_reverse(rd, seqs[i], ts.vocab(), rngs[i], greedy));
    }
    return out;
}

std::vector<Layout> generate_unconditional(const PredictFn& predict, const Corpus& prior,
                                           const TransitionSet& ts, const GenerationConfig& cfg,
                                           SampleStats* stats, const TraceFn& trace) {
    check_horizon(cfg.T_ugen, ts, "T_ugen");
    if (cfg.samples < 1) throw std::invalid_argument("samples must be positive");
    const Vocabulary& vb = ts.vocab();
    Rng base(cfg.seed);
    std::vector<Rng> streams;
    streams.reserve(cfg.samples);
    for (int i = 0; i < cfg.samples; ++i) streams.push_back(base.fork(uint64_t(i)));

    std::vector<std::optional<Layout>> got(cfg.samples);
    std::vector<int> pending(cfg.samples);
    std::iota(pending.begin(), pending.end(), 0);
    SampleStats st;

    while (!pending.empty()) {
        std::vector<RunState> states;
        states.reserve(pending.size());
        for (int idx : pending) {
            Rng& r = streams[idx];
            int n = count_prior_sample(prior, r);
            n = std::min(n, cfg.n_max);
            TokenSeq s0 = init_noise(n, cfg.n_max, vb, r);
            if (trace) trace(idx, cfg.T_ugen, s0);
            states.push_back({std::move(s0), &r, idx, {}});
        }
        run_reverse(predict, states, cfg.T_ugen, ts, cfg.greedy_final, trace);
        std::vector<int> next;
        for (auto& stt : states) {
            try {
                got[stt.idx] = detokenize(stt.seq, vb);
            } catch (const MaskedTypeError&) {
                if (st.retries < cfg.retry_budget) {
                    ++st.retries;
                    next.push_back(stt.idx);
                } else {
                    ++st.masked_failures;
                }
            }
        }
        pending = std::move(next);
    }
    std::vector<Layout> out;
    out.reserve(cfg.samples);
    for (auto& g : got)
        if (g) out.push_back(std::move(*g));
    if (stats) *stats = st;
    return out;
}

std::vector<Layout> generate_conditioned_types(const PredictFn& predict,
                                               const std::vector<int>& type_ids,
                                               const TransitionSet& ts,
                                               const GenerationConfig& cfg, SampleStats* stats,
                                               const TraceFn& trace) {
    check_horizon(cfg.T_gentype, ts, "T_gentype");
    if (cfg.samples < 1) throw std::invalid_argument("samples must be positive");
    const Vocabulary& vb = ts.vocab();
    if (type_ids.empty() || int(type_ids.size()) > cfg.n_max)
        throw std::invalid_argument("conditioned generation needs 1..n_max type ids");
    for (int id : type_ids)
        if (id < 0 || id >= vb.C()) throw std::invalid_argument("unknown type id");
    std::vector<int> ids = type_ids;
    std::sort(ids.begin(), ids.end());  // canonical element order is sorted type order

    int n = int(ids.size());
    int M = seq_length(cfg.n_max);
    std::vector<int> clamp(size_t(M), -1);
    for (int b = 0; b < n; ++b) clamp[size_t(1 + 6 * b)] = vb.type_token(ids[b]);

    Rng base(cfg.seed);
    std::vector<Rng> streams;
    streams.reserve(cfg.samples);
    for (int i = 0; i < cfg.samples; ++i) streams.push_back(base.fork(uint64_t(i)));

    std::vector<std::optional<Layout>> got(cfg.samples);
    std::vector<int> pending(cfg.samples);
    std::iota(pending.begin(), pending.end(), 0);
    SampleStats st;

    while (!pending.empty()) {
        std::vector<RunState> states;
        states.reserve(pending.size());
        for (int idx : pending) {
            Rng& r = streams[idx];
            TokenSeq s0 = init_noise(n, cfg.n_max, vb, r);
            apply_clamp(s0, clamp);
            if (trace) trace(idx, cfg.T_gentype, s0);
            states.push_back({std::move(s0), &r, idx, clamp});
        }
        run_reverse(predict, states, cfg.T_gentype, ts, cfg.greedy_final, trace);
        std::vector<int> next;
        for (auto& stt : states) {
            try {
                got[stt.idx] = detokenize(stt.seq, vb);
            } catch (const MaskedTypeError&) {
                if (st.retries < cfg.retry_budget) {
                    ++st.retries;
                    next.push_back(stt.idx);
                } else {
                    ++st.masked_failures;
                }
            }
        }
        pending = std::move(next);
    }
    std::vector<Layout> out;
    out.reserve(cfg.samples);
    for (auto& g : got)
        if (g) out.push_back(std::move(*g));
    if (stats) *stats = st;
    return out;
}

std::vector<Layout> refine_batch(const PredictFn& predict, const std::vector<Layout>& flawed,
                                 const TransitionSet& ts, const GenerationConfig& cfg,
                                 const TraceFn& trace) {
    // 0 is legal here: inject at t = 0, run no steps, return the canonical roundtrip
    if (cfg.T_refine < 0 || cfg.T_refine > ts.T())
        throw std::invalid_argument("T_refine must lie in [0, T]");
    const Vocabulary& vb = ts.vocab();
    Rng base(cfg.seed);
    std::vector<Rng> streams;
    streams.reserve(flawed.size());
    for (size_t i = 0; i < flawed.size(); ++i) streams.push_back(base.fork(uint64_t(i)));

    std::vector<RunState> states;
    states.reserve(flawed.size());
    for (size_t i = 0; i < flawed.size(); ++i) {
        TokenSeq s0 = tokenize(flawed[i], vb, cfg.n_max);
        // the flawed layout enters the chain as x_t at t = T_refine with its types pinned
        std::vector<int> clamp(size_t(s0.M()), -1);
        for (int s = 0; s < s0.M(); ++s)
            if (slot_kind(s, cfg.n_max) == SlotKind::type &&
                vb.kind(s0.tokens[s]) == TokenKind::type)
                clamp[size_t(s)] = s0.tokens[s];
        if (trace) trace(int(i), cfg.T_refine, s0);
        states.push_back({std::move(s0), &streams[i], int(i), std::move(clamp)});
    }
    run_reverse(predict, states, cfg.T_refine, ts, cfg.greedy_final, trace);
    std::vector<Layout> out;
    out.reserve(states.size());
    for (auto& stt : states) out.push_back(detokenize(stt.seq, vb));
    return out;
}

Layout refine(const PredictFn& predict, const Layout& flawed, const TransitionSet& ts,
              const GenerationConfig& cfg, const TraceFn& trace) {
    return refine_batch(predict, {flawed}, ts, cfg, trace).at(0);
}

}  // namespace hd
