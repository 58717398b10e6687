#include "heterodiff/transition.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace hd {

StochMatrix StochMatrix::identity(int size) {
    StochMatrix m(size);
    for (int i = 0; i < size; ++i) m.at(i, i) = 1.0;
    return m;
}

StochMatrix matmul(const StochMatrix& A, const StochMatrix& B) {
    if (A.n != B.n) throw std::invalid_argument("matmul: size mismatch");
    StochMatrix C(A.n);
    for (int i = 0; i < A.n; ++i)
        for (int k = 0; k < A.n; ++k) {
            double a = A.at(i, k);
            if (a == 0.0) continue;
            const double* brow = B.row(k);
            double* crow = C.a.data() + size_t(i) * A.n;
            for (int j = 0; j < A.n; ++j) crow[j] += a * brow[j];
        }
    return C;
}

StochMatrix build_coord_matrix(int t, const ScheduleParams& sched, int K, CoordMatrixKind kind) {
    if (t < 1 || t > sched.T) throw std::out_of_range("build_coord_matrix: t out of range");
    StochMatrix q(K);
    switch (kind) {
        case CoordMatrixKind::gaussian: {
            double bt = beta(t, sched);
            double denom = double(K - 1) * double(K - 1) * bt;
            double z = 0;
            for (int n = -(K - 1); n <= K - 1; ++n) z += std::exp(-4.0 * n * n / denom);
            for (int i = 0; i < K; ++i) {
                double off = 0;
                for (int j = 0; j < K; ++j) {
                    if (i == j) continue;
                    double d = double(i - j);
                    q.at(i, j) = std::exp(-4.0 * d * d / denom) / z;
                    off += q.at(i, j);
                }
                q.at(i, i) = 1.0 - off;
            }
            break;
        }
        case CoordMatrixKind::uniform: {
            // D3PM-style uniform mixing; the power-law beta is a kernel width, not a
            // mixing probability, so the standard 1/(T-t+1) rate is used here
            double bt = 1.0 / double(sched.T - t + 1);
            for (int i = 0; i < K; ++i) {
                for (int j = 0; j < K; ++j) q.at(i, j) = bt / K;
                q.at(i, i) += 1.0 - bt;
            }
            break;
        }
        case CoordMatrixKind::absorbing: {
            // sink at the middle bin with the type schedule's absorbing rate
            int sink = K / 2;
            double gt = gamma_step(t, sched);
            for (int i = 0; i < K; ++i) {
                q.at(i, i) = (i == sink) ? 1.0 : 1.0 - gt;
                if (i != sink) q.at(i, sink) += gt;
            }
            break;
        }
    }
    return q;
}

StochMatrix build_type_matrix(int t, const ScheduleParams& sched, int C_real, TypeMatrixKind kind) {
    if (t < 1 || t > sched.T) throw std::out_of_range("build_type_matrix: t out of range");
    int n = C_real + 1;  // MASK last
    int mask = C_real;
    StochMatrix q(n);
    switch (kind) {
        case TypeMatrixKind::absorbing: {
            double gt = gamma_step(t, sched);
            for (int i = 0; i < C_real; ++i) {
                q.at(i, i) = 1.0 - gt;
                q.at(i, mask) = gt;
            }
            q.at(mask, mask) = 1.0;
            break;
        }
        case TypeMatrixKind::uniform: {
            // mixes over real types only; MASK stays unreachable
            double bt = 1.0 / double(sched.T - t + 1);
            for (int i = 0; i < C_real; ++i) {
                for (int j = 0; j < C_real; ++j) q.at(i, j) = bt / C_real;
                q.at(i, i) += 1.0 - bt;
            }
            q.at(mask, mask) = 1.0;
            break;
        }
    }
    return q;
}

TransitionSet::TransitionSet(const Vocabulary& vocab, const ScheduleParams& sched,
                             CoordMatrixKind ck, TypeMatrixKind tk)
    : vocab_(vocab), sched_(sched), coord_kind_(ck), type_kind_(tk) {
    sched_.validate();
    int T = sched_.T;
    q_coord_.reserve(T);
    q_type_.reserve(T);
    qbar_coord_.reserve(T + 1);
    qbar_type_.reserve(T + 1);
    qbar_coord_.push_back(StochMatrix::identity(vocab_.K));
    qbar_type_.push_back(StochMatrix::identity(vocab_.C() + 1));
    for (int t = 1; t <= T; ++t) {
        q_coord_.push_back(build_coord_matrix(t, sched_, vocab_.K, ck));
        q_type_.push_back(build_type_matrix(t, sched_, vocab_.C(), tk));
        qbar_coord_.push_back(matmul(qbar_coord_.back(), q_coord_.back()));
        qbar_type_.push_back(matmul(qbar_type_.back(), q_type_.back()));
    }
}

const StochMatrix& TransitionSet::coord_step(int t) const {
    if (t < 1 || t > T()) throw std::out_of_range("coord_step: t out of range");
    return q_coord_[t - 1];
}
const StochMatrix& TransitionSet::type_step(int t) const {
    if (t < 1 || t > T()) throw std::out_of_range("type_step: t out of range");
    return q_type_[t - 1];
}
const StochMatrix& TransitionSet::coord_cumulative(int t) const {
    if (t < 0 || t > T()) throw std::out_of_range("coord_cumulative: t out of range");
    return qbar_coord_[t];
}
const StochMatrix& TransitionSet::type_cumulative(int t) const {
    if (t < 0 || t > T()) throw std::out_of_range("type_cumulative: t out of range");
    return qbar_type_[t];
}

std::vector<double> TransitionSet::forward_marginal(int x0_token, int t) const {
    if (t < 0 || t > T()) throw std::out_of_range("forward_marginal: t out of range");
    switch (vocab_.kind(x0_token)) {
        case TokenKind::coord: {
            const StochMatrix& m = coord_cumulative(t);
            const double* r = m.row(x0_token);
            return std::vector<double>(r, r + vocab_.K);
        }
        case TokenKind::type: {
            const StochMatrix& m = type_cumulative(t);
            int idx = vocab_.is_mask(x0_token) ? vocab_.C() : vocab_.type_id(x0_token);
            const double* r = m.row(idx);
            return std::vector<double>(r, r + vocab_.C() + 1);
        }
        case TokenKind::special: {
            return {1.0};  // unit vector at itself
        }
    }
    return {};
}

TokenSeq TransitionSet::corrupt_sequence(const TokenSeq& seq, int t, Rng& rng) const {
    if (t < 0 || t > T()) throw std::out_of_range("corrupt_sequence: t out of range");
    TokenSeq out = seq;
    if (t == 0) return out;
    for (int s = 0; s < seq.M(); ++s) {
        int tok = seq.tokens[s];
        switch (vocab_.kind(tok)) {
            case TokenKind::coord: {
                const StochMatrix& m = coord_cumulative(t);
                std::span<const double> row(m.row(tok), size_t(vocab_.K));
                out.tokens[s] = rng.categorical(row);
                break;
            }
            case TokenKind::type: {
                const StochMatrix& m = type_cumulative(t);
                int idx = vocab_.is_mask(tok) ? vocab_.C() : vocab_.type_id(tok);
                std::span<const double> row(m.row(idx), size_t(vocab_.C() + 1));
                int drawn = rng.categorical(row);
                out.tokens[s] = drawn == vocab_.C() ? vocab_.mask() : vocab_.type_token(drawn);
                break;
            }
            case TokenKind::special:
                break;  // frozen
        }
    }
    return out;
}

std::vector<double> TransitionSet::posterior(int x_t_token, int x0_token, int t) const {
    if (t < 1 || t > T()) throw std::out_of_range("posterior: t out of range");
    TokenKind k0 = vocab_.kind(x0_token), kt = vocab_.kind(x_t_token);
    if (k0 != kt || k0 == TokenKind::special)
        throw std::invalid_argument("posterior: tokens must share a non-special kind");
    const StochMatrix *step, *cum_prev;
    int xt, x0, n;
    if (k0 == TokenKind::coord) {
        step = &coord_step(t);
        cum_prev = &coord_cumulative(t - 1);
        xt = x_t_token;
        x0 = x0_token;
        n = vocab_.K;
    } else {
        step = &type_step(t);
        cum_prev = &type_cumulative(t - 1);
        xt = vocab_.is_mask(x_t_token) ? vocab_.C() : vocab_.type_id(x_t_token);
        x0 = vocab_.is_mask(x0_token) ? vocab_.C() : vocab_.type_id(x0_token);
        n = vocab_.C() + 1;
    }
    std::vector<double> post(n);
    double z = 0;
    for (int k = 0; k < n; ++k) {
        post[k] = step->at(k, xt) * cum_prev->at(x0, k);
        z += post[k];
    }
    if (!(z > 0)) throw InfeasiblePairError(x0_token, x_t_token, t);
    for (double& v : post) v /= z;
    return post;
}

std::vector<double> TransitionSet::terminal_coord() const {
    const StochMatrix& m = coord_cumulative(T());
    // rows are (numerically) identical at T under the default caps; use row 0
    const double* r = m.row(0);
    return std::vector<double>(r, r + vocab_.K);
}

void TransitionSet::dump_csv(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto write = [&](const std::string& name, const StochMatrix& m) {
        std::ofstream out(fs::path(dir) / name);
        for (int i = 0; i < m.n; ++i) {
            for (int j = 0; j < m.n; ++j) out << (j ? "," : "") << m.at(i, j);
            out << '\n';
        }
    };
    for (int t = 1; t <= T(); ++t) {
        write("q_coord_t" + std::to_string(t) + ".csv", coord_step(t));
        write("q_type_t" + std::to_string(t) + ".csv", type_step(t));
        write("qbar_coord_t" + std::to_string(t) + ".csv", coord_cumulative(t));
        write("qbar_type_t" + std::to_string(t) + ".csv", type_cumulative(t));
    }
}

CoordMatrixKind coord_matrix_kind_from_name(const std::string& s) {
    if (s == "gaussian") return CoordMatrixKind::gaussian;
    if (s == "uniform") return CoordMatrixKind::uniform;
    if (s == "absorbing") return CoordMatrixKind::absorbing;
    throw std::invalid_argument("unknown coordinate matrix kind '" + s + "'");
}
TypeMatrixKind type_matrix_kind_from_name(const std::string& s) {
    if (s == "absorbing") return TypeMatrixKind::absorbing;
    if (s == "uniform") return TypeMatrixKind::uniform;
    throw std::invalid_argument("unknown type matrix kind '" + s + "'");
}
const char* name(CoordMatrixKind k) {
    switch (k) {
        case CoordMatrixKind::gaussian: return "gaussian";
        case CoordMatrixKind::uniform: return "uniform";
        case CoordMatrixKind::absorbing: return "absorbing";
    }
    return "?";
}
const char* name(TypeMatrixKind k) { return k == TypeMatrixKind::absorbing ? "absorbing" : "uniform"; }

}  // namespace hd
