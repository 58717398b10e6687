#pragma once
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "heterodiff/corpus.hpp"
#include "heterodiff/denoiser.hpp"
#include "heterodiff/rng.hpp"
#include "heterodiff/tokenseq.hpp"
#include "heterodiff/transition.hpp"

namespace hd {

// batched x0-predictor: (sequences, per-sequence t) -> per-slot x0 distributions.
// The denoiser supplies one; tests pass synthetic closures (e.g. delta predictors).
using PredictFn = std::function<std::vector<SlotDists>(const std::vector<TokenSeq>&,
                                                       const std::vector<int>&)>;

template <class Real>
PredictFn predictor(const Denoiser<Real>& model, bool use_ema = true);

struct GenerationConfig {
    int T_ugen = 50;
    int T_gentype = 40;
    int T_refine = 10;
    int n_max = 8;              // sequence geometry; must match the predictor's model
    uint64_t seed = 0;
    int samples = 1;
    bool greedy_final = false;  // argmax instead of sampling at t = 1
    int retry_budget = 10;      // MaskedType rejections allowed per batch call
};

// start state at t = T: types MASK, coordinates uniform, SEP/PAD/SOS/EOS in place
TokenSeq init_noise(int n, int n_max, const Vocabulary& vocab, Rng& rng);

// one reverse step x_t -> x_{t-1}; specials/PAD frozen. greedy takes the argmax of
// the reverse distribution instead of sampling (the --greedy-final behaviour at t=1).
TokenSeq reverse_step(const PredictFn& predict, const TokenSeq& seq_t, int t,
                      const TransitionSet& ts, Rng& rng, bool greedy = false);
// batched lockstep variant: same t for all sequences, one predictor call
std::vector<TokenSeq> reverse_step_batch(const PredictFn& predict,
                                         const std::vector<TokenSeq>& seqs, int t,
                                         const TransitionSet& ts,
                                         std::vector<Rng>& rngs, bool greedy = false);

// trajectory observer: (sample index, t, state after the step to t)
using TraceFn = std::function<void(int, int, const TokenSeq&)>;

struct SampleStats {
    int retries = 0;         // MaskedType rejections that were retried
    int masked_failures = 0; // samples abandoned after the retry budget
};

// n ~ count prior, reverse from T_ugen. Each sample uses an independent stream
// derived from (cfg.seed, sample index), so results do not depend on batching.
std::vector<Layout> generate_unconditional(const PredictFn& predict, const Corpus& prior,
                                           const TransitionSet& ts, const GenerationConfig& cfg,
                                           SampleStats* stats = nullptr,
                                           const TraceFn& trace = nullptr);

// type slots clamped to the given multiset (canonical order) from t = T_gentype down
std::vector<Layout> generate_conditioned_types(const PredictFn& predict,
                                               const std::vector<int>& type_ids,
                                               const TransitionSet& ts,
                                               const GenerationConfig& cfg,
                                               SampleStats* stats = nullptr,
                                               const TraceFn& trace = nullptr);

// flawed layout injected at t = T_refine, types clamped; count/types preserved
Layout refine(const PredictFn& predict, const Layout& flawed, const TransitionSet& ts,
              const GenerationConfig& cfg, const TraceFn& trace = nullptr);
std::vector<Layout> refine_batch(const PredictFn& predict, const std::vector<Layout>& flawed,
                                 const TransitionSet& ts, const GenerationConfig& cfg,
                                 const TraceFn& trace = nullptr);

}  // namespace hd
