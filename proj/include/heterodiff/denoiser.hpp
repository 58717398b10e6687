#pragma once
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "heterodiff/corpus.hpp"
#include "heterodiff/rng.hpp"
#include "heterodiff/tokenseq.hpp"
#include "heterodiff/transition.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

// dense row-major matrix; biases are 1 x n
template <class Real>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<Real> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(size_t(r) * c, Real(0)) {}
    Real* row(int i) { return v.data() + size_t(i) * cols; }
    const Real* row(int i) const { return v.data() + size_t(i) * cols; }
    Real& at(int i, int j) { return v[size_t(i) * cols + j]; }
    Real at(int i, int j) const { return v[size_t(i) * cols + j]; }
    size_t size() const { return v.size(); }
    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }
    void zero() { std::fill(v.begin(), v.end(), Real(0)); }
};

struct DenoiserConfig {
    int layers = 4;
    int heads = 4;
    int model_dim = 128;
    int ff_dim = 512;
    double dropout = 0.1;
    Vocabulary vocab;
    int n_max = 8;
    int T = 50;

    int M() const { return seq_length(n_max); }
    void validate() const;
};

enum class ParamGroup { embeddings, attention, feedforward, heads };

template <class Real>
struct LayerParams {
    Mat<Real> ln1_g, ln1_b, Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    Mat<Real> ln2_g, ln2_b, W1, b1, W2, b2;
};

template <class Real>
struct Params {
    Mat<Real> tok_emb, pos_emb, time_emb;
    std::vector<LayerParams<Real>> layer;
    Mat<Real> lnf_g, lnf_b;
    Mat<Real> head_coord_w, head_coord_b, head_type_w, head_type_b;

    void allocate(const DenoiserConfig& cfg);
    // enumerate (name, group, tensor) in fixed order; serialization, the optimizer
    // and grad_check all iterate through here
    void visit(const std::function<void(const std::string&, ParamGroup, Mat<Real>&)>& f);
    void visit(const std::function<void(const std::string&, ParamGroup, const Mat<Real>&)>& f) const;
    size_t count() const;
};

// Per-slot x0 distributions in double precision. coord rows are meaningful at
// coordinate slots (over K bins), type rows at type slots (over C+1 with the MASK
// column structurally zero); special slots are fixed points and their rows are zero.
struct SlotDists {
    Mat<double> coord;  // M x K
    Mat<double> type;   // M x (C+1)
};

template <class Real>
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig cfg);
    ~Denoiser();
    Denoiser(Denoiser&&) noexcept;
    Denoiser& operator=(Denoiser&&) noexcept;

    void init_params(Rng& rng);  // N(0, 0.02) weights, zero biases/heads, unit LN gains

    const DenoiserConfig& config() const { return cfg_; }
    Params<Real>& params() { return params_; }
    const Params<Real>& params() const { return params_; }
    Params<Real>& ema() { return ema_; }
    const Params<Real>& ema() const { return ema_; }
    int64_t step = 0;

    SlotDists predict_x0(const TokenSeq& seq, int t, bool use_ema = false) const;
    std::vector<SlotDists> predict_x0_batch(const std::vector<TokenSeq>& seqs,
                                            const std::vector<int>& ts,
                                            bool use_ema = false) const;

private:
    DenoiserConfig cfg_;
    Params<Real> params_, ema_;
    template <class R> friend struct Engine;
    friend class Trainer;
};

// p(x_{t-1}|x_t) = sum over feasible x~0 of q(x_{t-1}|x_t, x~0) * p~(x~0), per slot.
// Slots with clamp[s] >= 0 are conditioning context, not chain state: they get a
// delta at the clamped token and skip the posterior entirely. That matters when the
// pinned token is infeasible under the forward process (a real type observed at
// t > T_tilde, e.g. refinement injected at T_refine = T); at every feasible t the
// exact posterior for a pinned type is that same delta, so behaviour is unchanged.
SlotDists reverse_distribution(const SlotDists& x0_dists, const TokenSeq& seq_t, int t,
                               const TransitionSet& ts,
                               const std::vector<int>* clamp = nullptr);
template <class Real>
SlotDists reverse_distribution(const Denoiser<Real>& model, const TokenSeq& seq_t, int t,
                               const TransitionSet& ts, bool use_ema = false);

struct LossBreakdown {
    double vlb_recon = 0;  // -log p(x0|x1), only at t = 1
    double vlb_kl = 0;     // mean per-slot KL(q || p), only at t >= 2
    double vlb_prior = 0;  // KL(q(x_T|x0) || terminal), theta-independent, reported only
    double aux = 0;        // -log p(x0|x_t)
    double lambda = 0;
    double total = 0;      // vlb-at-t + lambda * aux
};

// Pure loss math given model output distributions; grad_out (optional, same shapes
// as dists) receives d total / d dists. Exposed separately so the KL/recon terms can
// be oracle-tested without a network.
LossBreakdown loss_from_dists(const SlotDists& dists, const TokenSeq& x0, const TokenSeq& xt,
                              int t, const TransitionSet& ts, double lambda,
                              SlotDists* grad_out = nullptr);

// Samples x_t ~ q(x_t|x0) and evaluates the objective (no gradients)
template <class Real>
LossBreakdown loss(const Denoiser<Real>& model, const TokenSeq& x0, int t,
                   const TransitionSet& ts, Rng& rng, double lambda, bool use_ema = false);

enum class TimestepSampling { uniform, importance };

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    int batch_size = 32;
    int total_steps = 1500;
    double ema_rate = 0.99;
    TimestepSampling timestep_sampling = TimestepSampling::importance;
    double lambda = 1e-4;
    uint64_t seed = 0;
};

struct TrainLogRow {
    int64_t step = 0;
    double total = 0, vlb = 0, aux = 0, prior = 0;
    double mean_t = 0;  // batch-mean sampled timestep
    double ms = 0;
};

struct TrainDivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Single-writer training loop: importance/uniform timestep sampling, AdamW with
// decoupled weight decay, global-norm clipping, EMA shadow. All state needed for an
// exact deterministic resume (optimizer moments, timestep-loss history, RNG) is
// part of the checkpoint.
class Trainer {
public:
    Trainer(Denoiser<float>& model, const TransitionSet& ts, TrainConfig cfg);
    ~Trainer();

    TrainLogRow step(const Corpus& corpus);  // one optimizer step; throws TrainDivergedError
    const TrainConfig& config() const;

    // internal-state serialization hooks used by the checkpoint functions
    std::string serialize_state() const;            // JSON: rng, histories
    void restore_state(const std::string& json);
    std::vector<Mat<float>*> opt_tensors();         // adam m then v, in visit order

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// everything a sampling or resume run needs to know about a checkpoint
struct CheckpointMeta {
    DenoiserConfig denoiser;
    ScheduleParams sched;
    CoordMatrixKind coord_kind = CoordMatrixKind::gaussian;
    TypeMatrixKind type_kind = TypeMatrixKind::absorbing;
    TrainConfig train;
    double canvas_w = 1, canvas_h = 1;
    std::vector<double> count_prior;
    int64_t step = 0;
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const Denoiser<float>& model, Trainer* trainer = nullptr);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::unique_ptr<Denoiser<float>> model;
    std::string trainer_state;              // empty if none saved
    std::vector<Mat<float>> opt_m, opt_v;   // empty if none saved
};
LoadedCheckpoint load_checkpoint(const std::string& path);
// rebuild a trainer mid-run from a loaded checkpoint
std::unique_ptr<Trainer> resume_trainer(Denoiser<float>& model, const TransitionSet& ts,
                                        const LoadedCheckpoint& ck);

struct GradCheckReport {
    double max_rel = 0;
    std::map<std::string, double> group_max;  // embeddings/attention/feedforward/heads
    int n_checked = 0;
};

// Central finite differences vs analytic gradients of the total loss on a fixed
// (x0, x_t, t); checks a random subset of >= min_params parameters. Double precision.
GradCheckReport grad_check(Denoiser<double>& model, const TokenSeq& x0, int t,
                           const TransitionSet& ts, double lambda, double eps,
                           int min_params, uint64_t seed);

}  // namespace hd
