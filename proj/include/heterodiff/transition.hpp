#pragma once
#include <stdexcept>
#include <string>
#include <vector>

#include "heterodiff/rng.hpp"
#include "heterodiff/schedule.hpp"
#include "heterodiff/tokenseq.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

enum class CoordMatrixKind { gaussian, uniform, absorbing };
enum class TypeMatrixKind { absorbing, uniform };

// Square row-stochastic matrix in double precision
struct StochMatrix {
    int n = 0;
    std::vector<double> a;  // row-major n*n

    StochMatrix() = default;
    explicit StochMatrix(int size) : n(size), a(size_t(size) * size, 0.0) {}
    double& at(int i, int j) { return a[size_t(i) * n + j]; }
    double at(int i, int j) const { return a[size_t(i) * n + j]; }
    const double* row(int i) const { return a.data() + size_t(i) * n; }
    static StochMatrix identity(int size);
};

StochMatrix matmul(const StochMatrix& A, const StochMatrix& B);

// Per-step coordinate transition K x K. gaussian: discretized-Gaussian off-diagonals
// with diagonal = 1 - row remainder; uniform: (1-bt)I + bt/K with bt = 1/(T-t+1);
// absorbing: sink at bin K/2 with rate gamma_t.
StochMatrix build_coord_matrix(int t, const ScheduleParams& sched, int K, CoordMatrixKind kind);

// Per-step type transition (C+1) x (C+1), MASK last. absorbing: diagonal 1-gamma_t,
// MASK column gamma_t, MASK row frozen; uniform: mixes over real types only with
// bt = 1/(T-t+1), MASK row frozen (and unreachable).
StochMatrix build_type_matrix(int t, const ScheduleParams& sched, int C_real, TypeMatrixKind kind);

struct InfeasiblePairError : std::runtime_error {
    InfeasiblePairError(int x0, int xt, int t)
        : std::runtime_error("posterior: q(x_t|x0) = 0 for x0=" + std::to_string(x0) +
                             " x_t=" + std::to_string(xt) + " t=" + std::to_string(t)),
          x0(x0), xt(xt), t(t) {}
    int x0, xt, t;
};

// All per-step matrices plus cached cumulative products, built eagerly.
class TransitionSet {
public:
    TransitionSet(const Vocabulary& vocab, const ScheduleParams& sched,
                  CoordMatrixKind ck = CoordMatrixKind::gaussian,
                  TypeMatrixKind tk = TypeMatrixKind::absorbing);

    const Vocabulary& vocab() const { return vocab_; }
    const ScheduleParams& schedule() const { return sched_; }
    int T() const { return sched_.T; }
    CoordMatrixKind coord_kind() const { return coord_kind_; }
    TypeMatrixKind type_kind() const { return type_kind_; }

    // t in [1, T] for per-step, [0, T] for cumulative (t = 0 is identity)
    const StochMatrix& coord_step(int t) const;
    const StochMatrix& type_step(int t) const;
    const StochMatrix& coord_cumulative(int t) const;
    const StochMatrix& type_cumulative(int t) const;

    // row Q-bar_t[x0] over the token's block; specials give a unit vector
    std::vector<double> forward_marginal(int x0_token, int t) const;

    // each non-special token sampled from its forward marginal; specials/PAD frozen
    TokenSeq corrupt_sequence(const TokenSeq& seq, int t, Rng& rng) const;

    // q(x_{t-1} = k | x_t, x0) over the block; throws InfeasiblePairError when
    // q(x_t|x0) = 0
    std::vector<double> posterior(int x_t_token, int x0_token, int t) const;

    // terminal-noise distribution over a block (what x_T looks like): coord per
    // cumulative row (uniform for default kinds), type = MASK
    std::vector<double> terminal_coord() const;

    void dump_csv(const std::string& dir) const;  // --dump-matrices

private:
    Vocabulary vocab_;
    ScheduleParams sched_;
    CoordMatrixKind coord_kind_;
    TypeMatrixKind type_kind_;
    std::vector<StochMatrix> q_coord_, q_type_;        // index t-1
    std::vector<StochMatrix> qbar_coord_, qbar_type_;  // index t
};

CoordMatrixKind coord_matrix_kind_from_name(const std::string&);
TypeMatrixKind type_matrix_kind_from_name(const std::string&);
const char* name(CoordMatrixKind);
const char* name(TypeMatrixKind);

}  // namespace hd
