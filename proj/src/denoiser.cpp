#include "heterodiff/denoiser.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "heterodiff/kernels.hpp"

namespace hd {

using nlohmann::json;

void DenoiserConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("denoiser: need >= 1 layer");
    if (heads < 1 || model_dim % heads != 0)
        throw std::invalid_argument("denoiser: model_dim must be a positive multiple of heads");
    if (ff_dim < 1) throw std::invalid_argument("denoiser: ff_dim must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("denoiser: dropout must be in [0, 1)");
    if (n_max < 1) throw std::invalid_argument("denoiser: n_max must be positive");
    if (T < 1) throw std::invalid_argument("denoiser: T must be positive");
    if (vocab.K < 2 || vocab.C() < 1) throw std::invalid_argument("denoiser: bad vocabulary");
}

// ---------------------------------------------------------------- parameters

template <class Real>
void Params<Real>::allocate(const DenoiserConfig& cfg) {
    int d = cfg.model_dim, ff = cfg.ff_dim;
    tok_emb = Mat<Real>(cfg.vocab.V(), d);
    pos_emb = Mat<Real>(cfg.M(), d);
    time_emb = Mat<Real>(cfg.T + 1, d);  // indexed by t in [1, T]
    layer.assign(cfg.layers, {});
    for (auto& L : layer) {
        L.ln1_g = Mat<Real>(1, d); L.ln1_b = Mat<Real>(1, d);
        L.Wq = Mat<Real>(d, d); L.bq = Mat<Real>(1, d);
        L.Wk = Mat<Real>(d, d); L.bk = Mat<Real>(1, d);
        L.Wv = Mat<Real>(d, d); L.bv = Mat<Real>(1, d);
        L.Wo = Mat<Real>(d, d); L.bo = Mat<Real>(1, d);
        L.ln2_g = Mat<Real>(1, d); L.ln2_b = Mat<Real>(1, d);
        L.W1 = Mat<Real>(d, ff); L.b1 = Mat<Real>(1, ff);
        L.W2 = Mat<Real>(ff, d); L.b2 = Mat<Real>(1, d);
    }
    lnf_g = Mat<Real>(1, d); lnf_b = Mat<Real>(1, d);
    head_coord_w = Mat<Real>(d, cfg.vocab.K); head_coord_b = Mat<Real>(1, cfg.vocab.K);
    head_type_w = Mat<Real>(d, cfg.vocab.C()); head_type_b = Mat<Real>(1, cfg.vocab.C());
}

namespace {

// single enumeration shared by the const and non-const visit overloads
template <class Self, class F>
void visit_params(Self& p, F&& f) {
    f("tok_emb", ParamGroup::embeddings, p.tok_emb);
    f("pos_emb", ParamGroup::embeddings, p.pos_emb);
    f("time_emb", ParamGroup::embeddings, p.time_emb);
    for (size_t l = 0; l < p.layer.size(); ++l) {
        auto& L = p.layer[l];
        std::string pre = "layer" + std::to_string(l) + ".";
        f(pre + "ln1_g", ParamGroup::attention, L.ln1_g);
        f(pre + "ln1_b", ParamGroup::attention, L.ln1_b);
        f(pre + "Wq", ParamGroup::attention, L.Wq);
        f(pre + "bq", ParamGroup::attention, L.bq);
        f(pre + "Wk", ParamGroup::attention, L.Wk);
        f(pre + "bk", ParamGroup::attention, L.bk);
        f(pre + "Wv", ParamGroup::attention, L.Wv);
        f(pre + "bv", ParamGroup::attention, L.bv);
        f(pre + "Wo", ParamGroup::attention, L.Wo);
        f(pre + "bo", ParamGroup::attention, L.bo);
        f(pre + "ln2_g", ParamGroup::feedforward, L.ln2_g);
        f(pre + "ln2_b", ParamGroup::feedforward, L.ln2_b);
        f(pre + "W1", ParamGroup::feedforward, L.W1);
        f(pre + "b1", ParamGroup::feedforward, L.b1);
        f(pre + "W2", ParamGroup::feedforward, L.W2);
        f(pre + "b2", ParamGroup::feedforward, L.b2);
    }
    f("lnf_g", ParamGroup::heads, p.lnf_g);
    f("lnf_b", ParamGroup::heads, p.lnf_b);
    f("head_coord_w", ParamGroup::heads, p.head_coord_w);
    f("head_coord_b", ParamGroup::heads, p.head_coord_b);
    f("head_type_w", ParamGroup::heads, p.head_type_w);
    f("head_type_b", ParamGroup::heads, p.head_type_b);
}

}  // namespace

template <class Real>
void Params<Real>::visit(const std::function<void(const std::string&, ParamGroup, Mat<Real>&)>& f) {
    visit_params(*this, f);
}
template <class Real>
void Params<Real>::visit(
    const std::function<void(const std::string&, ParamGroup, const Mat<Real>&)>& f) const {
    visit_params(*this, f);
}

template <class Real>
size_t Params<Real>::count() const {
    size_t n = 0;
    visit([&](const std::string&, ParamGroup, const Mat<Real>& m) { n += m.size(); });
    return n;
}

// -------------------------------------------------------------------- engine

namespace {

void softmax_double(const float* x, int n, double* out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, double(x[i]));
    double z = 0;
    for (int i = 0; i < n; ++i) { out[i] = std::exp(double(x[i]) - mx); z += out[i]; }
    for (int i = 0; i < n; ++i) out[i] /= z;
}
void softmax_double(const double* x, int n, double* out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
    double z = 0;
    for (int i = 0; i < n; ++i) { out[i] = std::exp(x[i] - mx); z += out[i]; }
    for (int i = 0; i < n; ++i) out[i] /= z;
}

template <class Real>
void add_bias_rows(Mat<Real>& x, const Mat<Real>& bias) {
    for (int r = 0; r < x.rows; ++r) kernels::add(x.row(r), bias.row(0), x.cols);
}

template <class Real>
void colsum_into(const Mat<Real>& x, Mat<Real>& acc) {
    for (int r = 0; r < x.rows; ++r) kernels::add(acc.row(0), x.row(r), x.cols);
}

template <class Real>
void mul_inplace(Mat<Real>& x, const Mat<Real>& m) {
    for (size_t i = 0; i < x.size(); ++i) x.v[i] *= m.v[i];
}

}  // namespace

// Forward/backward workspace. One instance is reused across calls; buffers are
// reallocated only when the shape signature (config dims, batch) changes.
template <class Real>
struct Engine {
    int B = 0, L = 0, H = 0, d = 0, ff = 0, M = 0, K = 0, C = 0, T = 0, Dh = 0;
    int R = 0;  // B * M
    double drop_p = 0;
    bool drop_active = false;
    std::vector<SlotKind> skind;

    Mat<Real> x_in, emb_mask;
    struct Lws {
        Mat<Real> ln1_out, q, k, v, att_p, att_cat, mask1, res1;
        Mat<Real> ln2_out, ff_pre, ff_act, mask2, res2;
        std::vector<Real> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    };
    std::vector<Lws> lw;
    Mat<Real> lnf_out;
    std::vector<Real> lnf_mean, lnf_rstd;
    Mat<Real> logits_c, logits_t;
    Mat<double> prob_c, prob_t;
    Params<Real> grads;
    bool grads_ready = false;

    std::vector<std::vector<int>> btoks;
    std::vector<int> bts;
    const Params<Real>* used = nullptr;

    void ensure(const DenoiserConfig& cfg, int batch) {
        if (B == batch && L == cfg.layers && H == cfg.heads && d == cfg.model_dim &&
            ff == cfg.ff_dim && M == cfg.M() && K == cfg.vocab.K && C == cfg.vocab.C() &&
            T == cfg.T) {
            drop_p = cfg.dropout;
            return;
        }
        B = batch; L = cfg.layers; H = cfg.heads; d = cfg.model_dim; ff = cfg.ff_dim;
        M = cfg.M(); K = cfg.vocab.K; C = cfg.vocab.C(); T = cfg.T; Dh = d / H;
        R = B * M;
        drop_p = cfg.dropout;
        skind.resize(M);
        for (int s = 0; s < M; ++s) skind[s] = slot_kind(s, cfg.n_max);
        x_in = Mat<Real>(R, d);
        emb_mask = Mat<Real>(R, d);
        lw.assign(L, {});
        for (auto& w : lw) {
            w.ln1_out = Mat<Real>(R, d);
            w.q = Mat<Real>(R, d); w.k = Mat<Real>(R, d); w.v = Mat<Real>(R, d);
            w.att_p = Mat<Real>(B * H * M, M);
            w.att_cat = Mat<Real>(R, d);
            w.mask1 = Mat<Real>(R, d);
            w.res1 = Mat<Real>(R, d);
            w.ln2_out = Mat<Real>(R, d);
            w.ff_pre = Mat<Real>(R, ff);
            w.ff_act = Mat<Real>(R, ff);
            w.mask2 = Mat<Real>(R, d);
            w.res2 = Mat<Real>(R, d);
            w.ln1_mean.resize(R); w.ln1_rstd.resize(R);
            w.ln2_mean.resize(R); w.ln2_rstd.resize(R);
        }
        lnf_out = Mat<Real>(R, d);
        lnf_mean.resize(R); lnf_rstd.resize(R);
        logits_c = Mat<Real>(R, K);
        logits_t = Mat<Real>(R, C);
        prob_c = Mat<double>(R, K);
        prob_t = Mat<double>(R, C + 1);
        grads.allocate(cfg);
        btoks.assign(B, {});
        bts.assign(B, 0);
    }

    static void ln_forward(const Mat<Real>& x, const Mat<Real>& g, const Mat<Real>& b,
                           Mat<Real>& y, std::vector<Real>& mean, std::vector<Real>& rstd) {
        int d = x.cols;
        const Real* gv = g.row(0);
        const Real* bv = b.row(0);
        for (int r = 0; r < x.rows; ++r) {
            const Real* xr = x.row(r);
            Real* yr = y.row(r);
            Real mu = 0;
            for (int i = 0; i < d; ++i) mu += xr[i];
            mu /= Real(d);
            Real var = 0;
            for (int i = 0; i < d; ++i) { Real c = xr[i] - mu; var += c * c; }
            var /= Real(d);
            Real rs = Real(1) / std::sqrt(var + Real(1e-5));
            mean[r] = mu; rstd[r] = rs;
            for (int i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rs * gv[i] + bv[i];
        }
    }

    // dx assigned; dgain/dbias accumulated
    static void ln_backward(const Mat<Real>& x, const std::vector<Real>& mean,
                            const std::vector<Real>& rstd, const Mat<Real>& g,
                            const Mat<Real>& dy, Mat<Real>& dx, Mat<Real>& dgain,
                            Mat<Real>& dbias) {
        int d = x.cols;
        const Real* gv = g.row(0);
        Real* dgv = dgain.row(0);
        Real* dbv = dbias.row(0);
        for (int r = 0; r < x.rows; ++r) {
            const Real* xr = x.row(r);
            const Real* dyr = dy.row(r);
            Real* dxr = dx.row(r);
            Real mu = mean[r], rs = rstd[r];
            Real m1 = 0, m2 = 0;
            for (int i = 0; i < d; ++i) {
                Real xh = (xr[i] - mu) * rs;
                Real dxh = dyr[i] * gv[i];
                dgv[i] += dyr[i] * xh;
                dbv[i] += dyr[i];
                m1 += dxh;
                m2 += dxh * xh;
            }
            m1 /= Real(d); m2 /= Real(d);
            for (int i = 0; i < d; ++i) {
                Real xh = (xr[i] - mu) * rs;
                dxr[i] = rs * (dyr[i] * gv[i] - m1 - xh * m2);
            }
        }
    }

    void fill_mask(Mat<Real>& m, Rng& rng) {
        Real inv = Real(1.0 / (1.0 - drop_p));
        for (size_t i = 0; i < m.size(); ++i) m.v[i] = rng.u01() >= drop_p ? inv : Real(0);
    }

    static void pack(const Mat<Real>& src, int row0, int col0, int rows, int cols, Real* dst) {
        for (int i = 0; i < rows; ++i)
            std::memcpy(dst + size_t(i) * cols, src.row(row0 + i) + col0, sizeof(Real) * cols);
    }
    static void unpack(const Real* src, Mat<Real>& dst, int row0, int col0, int rows, int cols) {
        for (int i = 0; i < rows; ++i)
            std::memcpy(dst.row(row0 + i) + col0, src + size_t(i) * cols, sizeof(Real) * cols);
    }

    void forward(const DenoiserConfig& cfg, const Params<Real>& P,
                 const std::vector<const TokenSeq*>& seqs, const std::vector<int>& ts,
                 Rng* drop_rng) {
        ensure(cfg, int(seqs.size()));
        used = &P;
        grads_ready = false;
        drop_active = drop_rng != nullptr && drop_p > 0;
        for (int b = 0; b < B; ++b) {
            if (seqs[b]->M() != M) throw std::invalid_argument("denoiser: sequence length mismatch");
            if (ts[b] < 1 || ts[b] > T) throw std::out_of_range("denoiser: t out of range");
            btoks[b] = seqs[b]->tokens;
            bts[b] = ts[b];
        }
        // embeddings: token + position + timestep
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < M; ++s) {
                Real* row = x_in.row(b * M + s);
                std::memcpy(row, P.tok_emb.row(btoks[b][s]), sizeof(Real) * d);
                kernels::add(row, P.pos_emb.row(s), d);
                kernels::add(row, P.time_emb.row(bts[b]), d);
            }
        if (drop_active) { fill_mask(emb_mask, *drop_rng); mul_inplace(x_in, emb_mask); }

        Real scale = Real(1.0 / std::sqrt(double(Dh)));
        std::vector<Real> qh(size_t(M) * Dh), kh(size_t(M) * Dh), vh(size_t(M) * Dh),
            oh(size_t(M) * Dh), S(size_t(M) * M);
        Mat<Real> tmp(R, d);  // reused for the attention projection and the ff output

        const Mat<Real>* cur = &x_in;
        for (int l = 0; l < L; ++l) {
            Lws& w = lw[l];
            const LayerParams<Real>& LP = P.layer[l];
            ln_forward(*cur, LP.ln1_g, LP.ln1_b, w.ln1_out, w.ln1_mean, w.ln1_rstd);
            kernels::gemm_nn(w.ln1_out.data(), LP.Wq.data(), w.q.data(), R, d, d, false);
            add_bias_rows(w.q, LP.bq);
            kernels::gemm_nn(w.ln1_out.data(), LP.Wk.data(), w.k.data(), R, d, d, false);
            add_bias_rows(w.k, LP.bk);
            kernels::gemm_nn(w.ln1_out.data(), LP.Wv.data(), w.v.data(), R, d, d, false);
            add_bias_rows(w.v, LP.bv);
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < H; ++h) {
                    int r0 = b * M, c0 = h * Dh;
                    pack(w.q, r0, c0, M, Dh, qh.data());
                    pack(w.k, r0, c0, M, Dh, kh.data());
                    pack(w.v, r0, c0, M, Dh, vh.data());
                    kernels::gemm_nt(qh.data(), kh.data(), S.data(), M, Dh, M, false);
                    kernels::scale(S.data(), scale, M * M);
                    for (int i = 0; i < M; ++i) kernels::softmax_row(S.data() + size_t(i) * M, M);
                    std::memcpy(w.att_p.row((b * H + h) * M), S.data(), sizeof(Real) * M * M);
                    kernels::gemm_nn(S.data(), vh.data(), oh.data(), M, M, Dh, false);
                    unpack(oh.data(), w.att_cat, r0, c0, M, Dh);
                }
            kernels::gemm_nn(w.att_cat.data(), LP.Wo.data(), tmp.data(), R, d, d, false);
            add_bias_rows(tmp, LP.bo);
            if (drop_active) { fill_mask(w.mask1, *drop_rng); mul_inplace(tmp, w.mask1); }
            std::memcpy(w.res1.data(), cur->data(), sizeof(Real) * size_t(R) * d);
            kernels::add(w.res1.data(), tmp.data(), R * d);

            ln_forward(w.res1, LP.ln2_g, LP.ln2_b, w.ln2_out, w.ln2_mean, w.ln2_rstd);
            kernels::gemm_nn(w.ln2_out.data(), LP.W1.data(), w.ff_pre.data(), R, d, ff, false);
            add_bias_rows(w.ff_pre, LP.b1);
            kernels::gelu(w.ff_pre.data(), w.ff_act.data(), R * ff);
            kernels::gemm_nn(w.ff_act.data(), LP.W2.data(), tmp.data(), R, ff, d, false);
            add_bias_rows(tmp, LP.b2);
            if (drop_active) { fill_mask(w.mask2, *drop_rng); mul_inplace(tmp, w.mask2); }
            std::memcpy(w.res2.data(), w.res1.data(), sizeof(Real) * size_t(R) * d);
            kernels::add(w.res2.data(), tmp.data(), R * d);
            cur = &w.res2;
        }
        ln_forward(*cur, P.lnf_g, P.lnf_b, lnf_out, lnf_mean, lnf_rstd);
        kernels::gemm_nn(lnf_out.data(), P.head_coord_w.data(), logits_c.data(), R, d, K, false);
        add_bias_rows(logits_c, P.head_coord_b);
        kernels::gemm_nn(lnf_out.data(), P.head_type_w.data(), logits_t.data(), R, d, C, false);
        add_bias_rows(logits_t, P.head_type_b);

        prob_c.zero();
        prob_t.zero();
        std::vector<double> buf(std::max(K, C));
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < M; ++s) {
                int r = b * M + s;
                if (skind[s] == SlotKind::coord) {
                    softmax_double(logits_c.row(r), K, prob_c.row(r));
                } else if (skind[s] == SlotKind::type) {
                    softmax_double(logits_t.row(r), C, buf.data());
                    std::memcpy(prob_t.row(r), buf.data(), sizeof(double) * C);
                    // MASK column stays structurally zero
                }
            }
    }

    SlotDists slot_dists(int b) const {
        SlotDists sd;
        sd.coord = Mat<double>(M, K);
        sd.type = Mat<double>(M, C + 1);
        std::memcpy(sd.coord.data(), prob_c.row(b * M), sizeof(double) * size_t(M) * K);
        std::memcpy(sd.type.data(), prob_t.row(b * M), sizeof(double) * size_t(M) * (C + 1));
        return sd;
    }

    // dpc/dpt are d total / d probabilities for the whole batch (R x K, R x (C+1))
    void backward(const Mat<double>& dpc, const Mat<double>& dpt) {
        if (used == nullptr) throw std::logic_error("engine: backward before forward");
        const Params<Real>& P = *used;
        grads.visit([](const std::string&, ParamGroup, Mat<Real>& m) { m.zero(); });

        // softmax jacobian back to logits, in double, then cast
        Mat<Real> dlc(R, K), dlt(R, C);
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < M; ++s) {
                int r = b * M + s;
                if (skind[s] == SlotKind::coord) {
                    const double* p = prob_c.row(r);
                    const double* dp = dpc.row(r);
                    double acc = 0;
                    for (int i = 0; i < K; ++i) acc += dp[i] * p[i];
                    Real* out = dlc.row(r);
                    for (int i = 0; i < K; ++i) out[i] = Real(p[i] * (dp[i] - acc));
                } else if (skind[s] == SlotKind::type) {
                    const double* p = prob_t.row(r);  // cols 0..C-1 real, C is MASK (=0)
                    const double* dp = dpt.row(r);
                    double acc = 0;
                    for (int i = 0; i < C; ++i) acc += dp[i] * p[i];
                    Real* out = dlt.row(r);
                    for (int i = 0; i < C; ++i) out[i] = Real(p[i] * (dp[i] - acc));
                }
            }

        kernels::gemm_tn(lnf_out.data(), dlc.data(), grads.head_coord_w.data(), d, R, K, false);
        colsum_into(dlc, grads.head_coord_b);
        kernels::gemm_tn(lnf_out.data(), dlt.data(), grads.head_type_w.data(), d, R, C, false);
        colsum_into(dlt, grads.head_type_b);

        Mat<Real> dx(R, d);
        kernels::gemm_nt(dlc.data(), P.head_coord_w.data(), dx.data(), R, K, d, false);
        kernels::gemm_nt(dlt.data(), P.head_type_w.data(), dx.data(), R, C, d, true);

        const Mat<Real>& lnf_in = lw[L - 1].res2;
        Mat<Real> dcur(R, d);
        ln_backward(lnf_in, lnf_mean, lnf_rstd, P.lnf_g, dx, dcur, grads.lnf_g, grads.lnf_b);

        std::vector<Real> qh(size_t(M) * Dh), kh(size_t(M) * Dh), vh(size_t(M) * Dh),
            doh(size_t(M) * Dh), dqh(size_t(M) * Dh), dkh(size_t(M) * Dh), dvh(size_t(M) * Dh),
            dP(size_t(M) * M);
        Real scale = Real(1.0 / std::sqrt(double(Dh)));

        for (int l = L - 1; l >= 0; --l) {
            Lws& w = lw[l];
            const LayerParams<Real>& LP = P.layer[l];
            LayerParams<Real>& LG = grads.layer[l];
            const Mat<Real>& in = (l == 0) ? x_in : lw[l - 1].res2;

            // feed-forward branch
            Mat<Real> dffo = dcur;
            if (drop_active) mul_inplace(dffo, w.mask2);
            kernels::gemm_tn(w.ff_act.data(), dffo.data(), LG.W2.data(), ff, R, d, false);
            colsum_into(dffo, LG.b2);
            Mat<Real> dffact(R, ff);
            kernels::gemm_nt(dffo.data(), LP.W2.data(), dffact.data(), R, d, ff, false);
            Mat<Real> dffpre(R, ff);
            kernels::gelu_backward(w.ff_pre.data(), dffact.data(), dffpre.data(), R * ff);
            kernels::gemm_tn(w.ln2_out.data(), dffpre.data(), LG.W1.data(), d, R, ff, false);
            colsum_into(dffpre, LG.b1);
            Mat<Real> dln2(R, d);
            kernels::gemm_nt(dffpre.data(), LP.W1.data(), dln2.data(), R, ff, d, false);
            Mat<Real> dres1(R, d);
            ln_backward(w.res1, w.ln2_mean, w.ln2_rstd, LP.ln2_g, dln2, dres1, LG.ln2_g, LG.ln2_b);
            kernels::add(dres1.data(), dcur.data(), R * d);  // residual skip of the ff block

            // attention branch
            Mat<Real> datt = dres1;
            if (drop_active) mul_inplace(datt, w.mask1);
            kernels::gemm_tn(w.att_cat.data(), datt.data(), LG.Wo.data(), d, R, d, false);
            colsum_into(datt, LG.bo);
            Mat<Real> dcat(R, d);
            kernels::gemm_nt(datt.data(), LP.Wo.data(), dcat.data(), R, d, d, false);
            Mat<Real> dq(R, d), dk(R, d), dv(R, d);
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < H; ++h) {
                    int r0 = b * M, c0 = h * Dh;
                    pack(w.q, r0, c0, M, Dh, qh.data());
                    pack(w.k, r0, c0, M, Dh, kh.data());
                    pack(w.v, r0, c0, M, Dh, vh.data());
                    pack(dcat, r0, c0, M, Dh, doh.data());
                    const Real* Pblk = w.att_p.row((b * H + h) * M);
                    kernels::gemm_nt(doh.data(), vh.data(), dP.data(), M, Dh, M, false);
                    kernels::gemm_tn(Pblk, doh.data(), dvh.data(), M, M, Dh, false);
                    for (int i = 0; i < M; ++i) {
                        Real* dpr = dP.data() + size_t(i) * M;
                        const Real* pr = Pblk + size_t(i) * M;
                        Real rd = kernels::dot(dpr, pr, M);
                        for (int j = 0; j < M; ++j) dpr[j] = pr[j] * (dpr[j] - rd);
                    }
                    kernels::scale(dP.data(), scale, M * M);
                    kernels::gemm_nn(dP.data(), kh.data(), dqh.data(), M, M, Dh, false);
                    kernels::gemm_tn(dP.data(), qh.data(), dkh.data(), M, M, Dh, false);
                    unpack(dqh.data(), dq, r0, c0, M, Dh);
                    unpack(dkh.data(), dk, r0, c0, M, Dh);
                    unpack(dvh.data(), dv, r0, c0, M, Dh);
                }
            kernels::gemm_tn(w.ln1_out.data(), dq.data(), LG.Wq.data(), d, R, d, false);
            colsum_into(dq, LG.bq);
            kernels::gemm_tn(w.ln1_out.data(), dk.data(), LG.Wk.data(), d, R, d, false);
            colsum_into(dk, LG.bk);
            kernels::gemm_tn(w.ln1_out.data(), dv.data(), LG.Wv.data(), d, R, d, false);
            colsum_into(dv, LG.bv);
            Mat<Real> dh(R, d);
            kernels::gemm_nt(dq.data(), LP.Wq.data(), dh.data(), R, d, d, false);
            kernels::gemm_nt(dk.data(), LP.Wk.data(), dh.data(), R, d, d, true);
            kernels::gemm_nt(dv.data(), LP.Wv.data(), dh.data(), R, d, d, true);
            Mat<Real> din(R, d);
            ln_backward(in, w.ln1_mean, w.ln1_rstd, LP.ln1_g, dh, din, LG.ln1_g, LG.ln1_b);
            kernels::add(din.data(), dres1.data(), R * d);  // residual skip of the attn block
            dcur = std::move(din);
        }

        if (drop_active) mul_inplace(dcur, emb_mask);
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < M; ++s) {
                const Real* row = dcur.row(b * M + s);
                kernels::add(grads.tok_emb.row(btoks[b][s]), row, d);
                kernels::add(grads.pos_emb.row(s), row, d);
                kernels::add(grads.time_emb.row(bts[b]), row, d);
            }
        grads_ready = true;
    }
};

template <class Real>
static Engine<Real>& tls_engine() {
    static thread_local Engine<Real> eng;
    return eng;
}

// ------------------------------------------------------------------ denoiser

template <class Real>
Denoiser<Real>::Denoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    params_.allocate(cfg_);
    ema_.allocate(cfg_);
}
template <class Real> Denoiser<Real>::~Denoiser() = default;
template <class Real> Denoiser<Real>::Denoiser(Denoiser&&) noexcept = default;
template <class Real> Denoiser<Real>& Denoiser<Real>::operator=(Denoiser&&) noexcept = default;

template <class Real>
void Denoiser<Real>::init_params(Rng& rng) {
    params_.visit([&](const std::string& name, ParamGroup, Mat<Real>& m) {
        std::string leaf = name.substr(name.rfind('.') + 1);
        bool gain = leaf == "ln1_g" || leaf == "ln2_g" || leaf == "lnf_g";
        bool head = leaf.rfind("head_", 0) == 0;
        bool bias = leaf[0] == 'b' || (leaf.size() > 2 && leaf.compare(leaf.size() - 2, 2, "_b") == 0);
        if (gain) {
            std::fill(m.v.begin(), m.v.end(), Real(1));
        } else if (head || bias) {
            // zero heads make the initial x0 predictions exactly uniform
            m.zero();
        } else {
            for (auto& x : m.v) x = Real(rng.normal(0.0, 0.02));
        }
    });
    ema_ = params_;
    step = 0;
}

template <class Real>
SlotDists Denoiser<Real>::predict_x0(const TokenSeq& seq, int t, bool use_ema) const {
    auto v = predict_x0_batch({seq}, {t}, use_ema);
    return std::move(v[0]);
}

template <class Real>
std::vector<SlotDists> Denoiser<Real>::predict_x0_batch(const std::vector<TokenSeq>& seqs,
                                                        const std::vector<int>& ts,
                                                        bool use_ema) const {
    if (seqs.size() != ts.size()) throw std::invalid_argument("predict_x0_batch: size mismatch");
    auto& eng = tls_engine<Real>();
    const Params<Real>& P = use_ema ? ema_ : params_;
    std::vector<SlotDists> out;
    out.reserve(seqs.size());
    constexpr size_t kChunk = 64;  // keeps workspace memory bounded for big sample runs
    for (size_t i0 = 0; i0 < seqs.size(); i0 += kChunk) {
        size_t n = std::min(kChunk, seqs.size() - i0);
        std::vector<const TokenSeq*> ptrs(n);
        std::vector<int> tt(n);
        for (size_t i = 0; i < n; ++i) { ptrs[i] = &seqs[i0 + i]; tt[i] = ts[i0 + i]; }
        eng.forward(cfg_, P, ptrs, tt, nullptr);
        for (size_t i = 0; i < n; ++i) out.push_back(eng.slot_dists(int(i)));
    }
    return out;
}

// ------------------------------------------------------- reverse distribution

namespace {

// r_k = sum over feasible j of ptil_j q(x_{t-1}=k | x_t, x0=j); feasible means
// Qbar_t[j, x_t] > 0. Returns false when no feasible source has mass.
bool marginal_reverse(const StochMatrix& Qt, const StochMatrix& Qb_prev, const StochMatrix& Qb,
                      int it, const double* ptil, int n, std::vector<double>& r, double& m) {
    r.assign(n, 0.0);
    m = 0;
    for (int j = 0; j < n; ++j) {
        double Z = Qb.at(j, it);
        if (!(Z > 0)) continue;
        m += ptil[j];
        if (ptil[j] == 0) continue;
        const double* row = Qb_prev.row(j);
        // (Qt[k,it]*row[k]) / Z is one posterior entry given x0 = j, so it is <= 1
        // even when Z is denormal; dividing per element keeps everything bounded
        // where ptil[j]/Z as a prefactor would overflow.
        for (int k = 0; k < n; ++k) r[k] += ptil[j] * (Qt.at(k, it) * row[k] / Z);
    }
    if (std::isnan(m)) {
        // the prediction itself is non-finite (diverged model); surface NaN so the
        // caller's finiteness checks fire instead of a bogus infeasibility error
        r.assign(n, std::numeric_limits<double>::quiet_NaN());
        return true;
    }
    if (!(m > 0)) return false;
    for (int k = 0; k < n; ++k) r[k] /= m;
    return true;
}

}  // namespace

SlotDists reverse_distribution(const SlotDists& x0_dists, const TokenSeq& seq_t, int t,
                               const TransitionSet& ts, const std::vector<int>* clamp) {
    const Vocabulary& vb = ts.vocab();
    int K = vb.K, C = vb.C(), M = seq_t.M();
    if (t < 1 || t > ts.T()) throw std::out_of_range("reverse_distribution: t out of range");
    if (x0_dists.coord.rows != M || x0_dists.type.rows != M)
        throw std::invalid_argument("reverse_distribution: shape mismatch");
    SlotDists out;
    out.coord = Mat<double>(M, K);
    out.type = Mat<double>(M, C + 1);
    std::vector<double> r;
    double m;
    for (int s = 0; s < M; ++s) {
        int tok = seq_t.tokens[s];
        if (clamp && s < int(clamp->size()) && (*clamp)[size_t(s)] >= 0) {
            // pinned conditioning slot: delta at the clamped token, no posterior
            int ct = (*clamp)[size_t(s)];
            if (vb.kind(ct) == TokenKind::coord)
                out.coord.row(s)[vb.coord_bin(ct)] = 1.0;
            else if (vb.kind(ct) == TokenKind::type)
                out.type.row(s)[vb.is_mask(ct) ? C : vb.type_id(ct)] = 1.0;
            continue;
        }
        switch (vb.kind(tok)) {
            case TokenKind::special:
                break;  // fixed point, rows stay zero
            case TokenKind::coord: {
                if (!marginal_reverse(ts.coord_step(t), ts.coord_cumulative(t - 1),
                                      ts.coord_cumulative(t), tok, x0_dists.coord.row(s), K, r, m))
                    throw std::runtime_error("reverse_distribution: no feasible source state");
                std::memcpy(out.coord.row(s), r.data(), sizeof(double) * K);
                break;
            }
            case TokenKind::type: {
                int it = vb.is_mask(tok) ? C : vb.type_id(tok);
                if (!marginal_reverse(ts.type_step(t), ts.type_cumulative(t - 1),
                                      ts.type_cumulative(t), it, x0_dists.type.row(s), C + 1, r, m))
                    throw std::runtime_error("reverse_distribution: no feasible source state");
                std::memcpy(out.type.row(s), r.data(), sizeof(double) * (C + 1));
                break;
            }
        }
    }
    return out;
}

template <class Real>
SlotDists reverse_distribution(const Denoiser<Real>& model, const TokenSeq& seq_t, int t,
                               const TransitionSet& ts, bool use_ema) {
    return reverse_distribution(model.predict_x0(seq_t, t, use_ema), seq_t, t, ts);
}

// ---------------------------------------------------------------------- loss

LossBreakdown loss_from_dists(const SlotDists& dists, const TokenSeq& x0, const TokenSeq& xt,
                              int t, const TransitionSet& ts, double lambda,
                              SlotDists* grad_out) {
    const Vocabulary& vb = ts.vocab();
    int K = vb.K, C = vb.C(), M = x0.M();
    if (t < 1 || t > ts.T()) throw std::out_of_range("loss: t out of range");
    if (xt.M() != M || dists.coord.rows != M || dists.type.rows != M)
        throw std::invalid_argument("loss: shape mismatch");
    if (grad_out) {
        grad_out->coord = Mat<double>(M, K);
        grad_out->type = Mat<double>(M, C + 1);
    }

    int n_active = 0;
    for (int s = 0; s < M; ++s)
        if (vb.kind(x0.tokens[s]) != TokenKind::special) ++n_active;
    if (n_active == 0) throw std::invalid_argument("loss: sequence has no content slots");
    double inv_a = 1.0 / n_active;

    LossBreakdown lb;
    lb.lambda = lambda;
    std::vector<double> q, r, y;
    const StochMatrix& QbarT_c = ts.coord_cumulative(ts.T());
    const StochMatrix& QbarT_t = ts.type_cumulative(ts.T());

    for (int s = 0; s < M; ++s) {
        int tok0 = x0.tokens[s];
        TokenKind kind = vb.kind(tok0);
        if (kind == TokenKind::special) continue;
        int tokt = xt.tokens[s];
        if (vb.kind(tokt) != kind)
            throw std::invalid_argument("loss: x_t slot kind differs from x0");
        bool coord = kind == TokenKind::coord;
        int n = coord ? K : C + 1;
        int i0 = coord ? tok0 : (vb.is_mask(tok0) ? C : vb.type_id(tok0));
        int it = coord ? tokt : (vb.is_mask(tokt) ? C : vb.type_id(tokt));
        const StochMatrix& Qt = coord ? ts.coord_step(t) : ts.type_step(t);
        const StochMatrix& Qbp = coord ? ts.coord_cumulative(t - 1) : ts.type_cumulative(t - 1);
        const StochMatrix& Qb = coord ? ts.coord_cumulative(t) : ts.type_cumulative(t);
        const double* ptil = coord ? dists.coord.row(s) : dists.type.row(s);

        // target: exact posterior for t >= 2, one-hot x0 for the t = 1 decoder term
        q.assign(n, 0.0);
        if (t == 1) {
            q[i0] = 1.0;
        } else {
            double z = 0;
            for (int k = 0; k < n; ++k) {
                q[k] = Qt.at(k, it) * Qbp.at(i0, k);
                z += q[k];
            }
            if (!(z > 0)) throw InfeasiblePairError(tok0, tokt, t);
            for (double& v : q) v /= z;
        }

        double m;
        if (!marginal_reverse(Qt, Qbp, Qb, it, ptil, n, r, m))
            throw std::runtime_error("loss: no feasible source state");

        double term = 0;
        for (int k = 0; k < n; ++k)
            if (q[k] > 0) term += q[k] * (std::log(q[k]) - std::log(r[k]));
        if (t == 1) lb.vlb_recon += term * inv_a;
        else lb.vlb_kl += term * inv_a;

        double paux = ptil[i0];
        lb.aux += -std::log(paux) * inv_a;

        // theta-independent terminal gap, reported for monitoring only
        {
            const StochMatrix& QT = coord ? QbarT_c : QbarT_t;
            const double* rowx = QT.row(i0);
            const double* rowref = QT.row(0);
            double kl = 0;
            for (int k = 0; k < n; ++k)
                if (rowx[k] > 0) kl += rowx[k] * (std::log(rowx[k]) - std::log(rowref[k]));
            lb.vlb_prior += kl * inv_a;
        }

        if (grad_out) {
            double* g = coord ? grad_out->coord.row(s) : grad_out->type.row(s);
            // d(vlb term)/d ptil_j = (1 - sum_k (q_k/r_k) q(x_{t-1}=k|x_t,x0=j)) / m;
            // the posterior entry is formed with its own /Z so denormal Z cannot
            // blow up the intermediate (same trick as marginal_reverse)
            y.assign(n, 0.0);
            for (int k = 0; k < n; ++k)
                if (q[k] > 0) y[k] = q[k] / r[k];
            int j_hi = coord ? n : C;  // the MASK column is not a free output
            for (int j = 0; j < j_hi; ++j) {
                double Z = Qb.at(j, it);
                if (!(Z > 0)) { g[j] = 0; continue; }
                double acc = 0;
                const double* row = Qbp.row(j);
                for (int k = 0; k < n; ++k)
                    if (y[k] != 0) acc += y[k] * (Qt.at(k, it) * row[k] / Z);
                g[j] = (1.0 - acc) / m * inv_a;
            }
            g[i0] += lambda * (-1.0 / paux) * inv_a;
        }
    }
    lb.total = (t == 1 ? lb.vlb_recon : lb.vlb_kl) + lambda * lb.aux;
    return lb;
}

template <class Real>
LossBreakdown loss(const Denoiser<Real>& model, const TokenSeq& x0, int t,
                   const TransitionSet& ts, Rng& rng, double lambda, bool use_ema) {
    TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
    SlotDists dists = model.predict_x0(xt, t, use_ema);
    return loss_from_dists(dists, x0, xt, t, ts, lambda);
}

// ------------------------------------------------------------------- trainer

struct Trainer::Impl {
    Denoiser<float>& model;
    const TransitionSet& ts;
    TrainConfig cfg;
    Rng rng;
    Engine<float> eng;
    std::vector<Mat<float>*> pptr;  // params in visit order
    std::vector<Mat<float>*> eptr;  // ema
    std::vector<Mat<float>> m, v;   // adam moments, same order/shapes
    // per-timestep squared-loss window for importance sampling
    static constexpr int kWin = 10;
    std::vector<std::array<double, kWin>> hist;
    std::vector<int> hist_n, hist_pos;

    Impl(Denoiser<float>& md, const TransitionSet& t_, TrainConfig c)
        : model(md), ts(t_), cfg(c), rng(mix64(c.seed, 0x7261696e)) {
        model.params().visit(
            [&](const std::string&, ParamGroup, Mat<float>& mm) { pptr.push_back(&mm); });
        model.ema().visit(
            [&](const std::string&, ParamGroup, Mat<float>& mm) { eptr.push_back(&mm); });
        for (auto* p : pptr) {
            m.emplace_back(p->rows, p->cols);
            v.emplace_back(p->rows, p->cols);
        }
        int T = model.config().T;
        hist.assign(T, {});
        hist_n.assign(T, 0);
        hist_pos.assign(T, 0);
        if (cfg.batch_size < 1 || cfg.total_steps < 1)
            throw std::invalid_argument("train: bad batch size or step count");
    }

    std::vector<double> timestep_probs() const {
        int T = model.config().T;
        std::vector<double> p(T, 1.0 / T);
        if (cfg.timestep_sampling != TimestepSampling::importance) return p;
        for (int n : hist_n)
            if (n < kWin) return p;  // uniform warm-up until the window fills
        double z = 0;
        for (int i = 0; i < T; ++i) {
            double ms = 0;
            for (int j = 0; j < kWin; ++j) ms += hist[i][j] * hist[i][j];
            p[i] = std::sqrt(ms / kWin) + 1e-10;
            z += p[i];
        }
        for (double& x : p) x /= z;
        return p;
    }

    TrainLogRow run_step(const Corpus& corpus) {
        auto tic = std::chrono::steady_clock::now();
        const auto& train = corpus.train;
        if (train.empty()) throw std::invalid_argument("train: empty training split");
        const DenoiserConfig& dc = model.config();
        int B = cfg.batch_size, M = dc.M(), T = dc.T;
        int K = dc.vocab.K, C = dc.vocab.C();

        std::vector<double> pt = timestep_probs();
        std::vector<TokenSeq> x0(B), xt(B);
        std::vector<int> tsamp(B);
        for (int i = 0; i < B; ++i) {
            const Layout& lay = train[rng.uniform_int(int(train.size()))];
            x0[i] = tokenize(lay, dc.vocab, dc.n_max);
            tsamp[i] = rng.categorical(std::span<const double>(pt)) + 1;
            xt[i] = ts.corrupt_sequence(x0[i], tsamp[i], rng);
        }

        std::vector<const TokenSeq*> ptrs(B);
        for (int i = 0; i < B; ++i) ptrs[i] = &xt[i];
        Rng* drop = dc.dropout > 0 ? &rng : nullptr;
        eng.forward(dc, model.params(), ptrs, tsamp, drop);

        Mat<double> dpc(B * M, K), dpt(B * M, C + 1);
        TrainLogRow row;
        row.step = model.step + 1;
        double prior = 0;
        for (int i = 0; i < B; ++i) {
            SlotDists di = eng.slot_dists(i);
            SlotDists gi;
            LossBreakdown lb = loss_from_dists(di, x0[i], xt[i], tsamp[i], ts, cfg.lambda, &gi);
            double w = 1.0 / (T * pt[tsamp[i] - 1]);
            row.total += w * lb.total / B;
            row.vlb += w * (lb.vlb_recon + lb.vlb_kl) / B;
            row.aux += w * lb.aux / B;
            prior += lb.vlb_prior / B;
            row.mean_t += double(tsamp[i]) / B;
            double sc = w / B;
            for (size_t j = 0; j < gi.coord.size(); ++j)
                dpc.data()[size_t(i) * M * K + j] = gi.coord.data()[j] * sc;
            for (size_t j = 0; j < gi.type.size(); ++j)
                dpt.data()[size_t(i) * M * (C + 1) + j] = gi.type.data()[j] * sc;
            auto& h = hist[tsamp[i] - 1];
            h[hist_pos[tsamp[i] - 1]] = lb.vlb_recon + lb.vlb_kl;
            hist_pos[tsamp[i] - 1] = (hist_pos[tsamp[i] - 1] + 1) % kWin;
            hist_n[tsamp[i] - 1] = std::min(hist_n[tsamp[i] - 1] + 1, kWin);
        }
        row.prior = prior;
        if (!std::isfinite(row.total))
            throw TrainDivergedError("training loss is not finite at step " +
                                     std::to_string(row.step));

        eng.backward(dpc, dpt);

        // global-norm clip
        std::vector<Mat<float>*> gptr;
        eng.grads.visit([&](const std::string&, ParamGroup, Mat<float>& g) { gptr.push_back(&g); });
        double sq = 0;
        for (auto* g : gptr) sq += double(kernels::sum_squares(g->data(), int(g->size())));
        double norm = std::sqrt(sq);
        if (!std::isfinite(norm))
            throw TrainDivergedError("gradient is not finite at step " + std::to_string(row.step));
        if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
            float s = float(cfg.grad_clip / norm);
            for (auto* g : gptr) kernels::scale(g->data(), s, int(g->size()));
        }

        int64_t n = model.step + 1;
        float bc1 = float(1.0 - std::pow(cfg.beta1, double(n)));
        float bc2 = float(1.0 - std::pow(cfg.beta2, double(n)));
        for (size_t i = 0; i < pptr.size(); ++i)
            kernels::adamw_update(pptr[i]->data(), m[i].data(), v[i].data(), gptr[i]->data(),
                                  int(pptr[i]->size()), float(cfg.lr), float(cfg.beta1),
                                  float(cfg.beta2), 1e-8f, float(cfg.weight_decay), bc1, bc2);
        for (size_t i = 0; i < pptr.size(); ++i)
            kernels::ema_update(eptr[i]->data(), pptr[i]->data(), float(cfg.ema_rate),
                                int(pptr[i]->size()));
        model.step = n;
        row.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tic)
                     .count();
        return row;
    }
};

Trainer::Trainer(Denoiser<float>& model, const TransitionSet& ts, TrainConfig cfg)
    : impl_(std::make_unique<Impl>(model, ts, cfg)) {}
Trainer::~Trainer() = default;

TrainLogRow Trainer::step(const Corpus& corpus) { return impl_->run_step(corpus); }
const TrainConfig& Trainer::config() const { return impl_->cfg; }

std::string Trainer::serialize_state() const {
    json j;
    j["rng"] = impl_->rng.state();
    j["hist_n"] = impl_->hist_n;
    j["hist_pos"] = impl_->hist_pos;
    std::vector<std::vector<double>> h;
    for (auto& a : impl_->hist) h.emplace_back(a.begin(), a.end());
    j["hist"] = h;
    return j.dump();
}

void Trainer::restore_state(const std::string& s) {
    json j = json::parse(s);
    impl_->rng.restore(j.at("rng").get<std::string>());
    impl_->hist_n = j.at("hist_n").get<std::vector<int>>();
    impl_->hist_pos = j.at("hist_pos").get<std::vector<int>>();
    auto h = j.at("hist").get<std::vector<std::vector<double>>>();
    if (h.size() != impl_->hist.size() || impl_->hist_n.size() != impl_->hist.size() ||
        impl_->hist_pos.size() != impl_->hist.size())
        throw std::runtime_error("trainer state does not match the schedule length");
    for (size_t i = 0; i < h.size(); ++i) {
        if (h[i].size() != Impl::kWin) throw std::runtime_error("trainer state window mismatch");
        std::copy(h[i].begin(), h[i].end(), impl_->hist[i].begin());
    }
}

std::vector<Mat<float>*> Trainer::opt_tensors() {
    std::vector<Mat<float>*> out;
    for (auto& t : impl_->m) out.push_back(&t);
    for (auto& t : impl_->v) out.push_back(&t);
    return out;
}

// --------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'H', 'D', 'C', 'K', 'P', 'T', '0', '1'};

json denoiser_cfg_to_json(const DenoiserConfig& c) {
    return {{"layers", c.layers},       {"heads", c.heads}, {"model_dim", c.model_dim},
            {"ff_dim", c.ff_dim},       {"dropout", c.dropout},
            {"K", c.vocab.K},           {"type_names", c.vocab.type_names},
            {"n_max", c.n_max},         {"T", c.T}};
}
DenoiserConfig denoiser_cfg_from_json(const json& j) {
    DenoiserConfig c;
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.model_dim = j.at("model_dim");
    c.ff_dim = j.at("ff_dim");
    c.dropout = j.at("dropout");
    c.vocab = Vocabulary(j.at("K"), j.at("type_names").get<std::vector<std::string>>());
    c.n_max = j.at("n_max");
    c.T = j.at("T");
    return c;
}

json sched_to_json(const ScheduleParams& s) {
    return {{"T", s.T},           {"T_tilde", s.T_tilde},
            {"g", s.g},           {"h", s.h},
            {"eps", s.eps},       {"type_kind", name(s.type_kind)},
            {"coord_kind", name(s.coord_kind)},
            {"T_coord", s.T_coord}, {"linear_slope", s.linear_slope}};
}
ScheduleParams sched_from_json(const json& j) {
    ScheduleParams s;
    s.T = j.at("T");
    s.T_tilde = j.at("T_tilde");
    s.g = j.at("g");
    s.h = j.at("h");
    s.eps = j.at("eps");
    s.type_kind = type_kind_from_name(j.at("type_kind"));
    s.coord_kind = coord_kind_from_name(j.at("coord_kind"));
    s.T_coord = j.at("T_coord");
    s.linear_slope = j.at("linear_slope");
    return s;
}

json train_cfg_to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"batch_size", c.batch_size},
            {"total_steps", c.total_steps},
            {"ema_rate", c.ema_rate},
            {"timestep_sampling",
             c.timestep_sampling == TimestepSampling::importance ? "importance" : "uniform"},
            {"lambda", c.lambda},
            {"seed", c.seed}};
}
TrainConfig train_cfg_from_json(const json& j) {
    TrainConfig c;
    c.lr = j.at("lr");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.weight_decay = j.at("weight_decay");
    c.grad_clip = j.at("grad_clip");
    c.batch_size = j.at("batch_size");
    c.total_steps = j.at("total_steps");
    c.ema_rate = j.at("ema_rate");
    c.timestep_sampling = j.at("timestep_sampling") == "importance" ? TimestepSampling::importance
                                                                    : TimestepSampling::uniform;
    c.lambda = j.at("lambda");
    c.seed = j.at("seed");
    return c;
}

void write_mat(std::ostream& os, const Mat<float>& m) {
    os.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * sizeof(float)));
}
void read_mat(std::istream& is, Mat<float>& m) {
    is.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const Denoiser<float>& model, Trainer* trainer) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    json j;
    j["denoiser"] = denoiser_cfg_to_json(meta.denoiser);
    j["sched"] = sched_to_json(meta.sched);
    j["coord_matrix"] = name(meta.coord_kind);
    j["type_matrix"] = name(meta.type_kind);
    j["train"] = train_cfg_to_json(meta.train);
    j["canvas_w"] = meta.canvas_w;
    j["canvas_h"] = meta.canvas_h;
    j["count_prior"] = meta.count_prior;
    j["step"] = model.step;
    j["has_opt"] = trainer != nullptr;
    if (trainer) j["trainer"] = json::parse(trainer->serialize_state());
    std::vector<std::array<int64_t, 2>> shapes;
    model.params().visit([&](const std::string&, ParamGroup, const Mat<float>& m) {
        shapes.push_back({m.rows, m.cols});
    });
    j["shapes"] = shapes;
    std::string js = j.dump();
    os.write(kMagic, 8);
    uint64_t len = js.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(js.data(), std::streamsize(js.size()));
    model.params().visit(
        [&](const std::string&, ParamGroup, const Mat<float>& m) { write_mat(os, m); });
    model.ema().visit(
        [&](const std::string&, ParamGroup, const Mat<float>& m) { write_mat(os, m); });
    if (trainer)
        for (Mat<float>* t : trainer->opt_tensors()) write_mat(os, *t);
    if (!os) throw std::runtime_error("checkpoint write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("'" + path + "' is not a checkpoint file");
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string js(len, '\0');
    is.read(js.data(), std::streamsize(len));
    if (!is) throw std::runtime_error("checkpoint header truncated");
    json j = json::parse(js);

    LoadedCheckpoint out;
    out.meta.denoiser = denoiser_cfg_from_json(j.at("denoiser"));
    out.meta.sched = sched_from_json(j.at("sched"));
    out.meta.coord_kind = coord_matrix_kind_from_name(j.at("coord_matrix"));
    out.meta.type_kind = type_matrix_kind_from_name(j.at("type_matrix"));
    out.meta.train = train_cfg_from_json(j.at("train"));
    out.meta.canvas_w = j.at("canvas_w");
    out.meta.canvas_h = j.at("canvas_h");
    out.meta.count_prior = j.at("count_prior").get<std::vector<double>>();
    out.meta.step = j.at("step");
    out.model = std::make_unique<Denoiser<float>>(out.meta.denoiser);
    out.model->step = out.meta.step;
    auto shapes = j.at("shapes").get<std::vector<std::array<int64_t, 2>>>();
    size_t idx = 0;
    auto check = [&](const Mat<float>& m) {
        if (idx >= shapes.size() || shapes[idx][0] != m.rows || shapes[idx][1] != m.cols)
            throw std::runtime_error("checkpoint tensor shapes do not match the config");
        ++idx;
    };
    out.model->params().visit([&](const std::string&, ParamGroup, Mat<float>& m) {
        check(m);
        read_mat(is, m);
    });
    out.model->ema().visit([&](const std::string&, ParamGroup, Mat<float>& m) { read_mat(is, m); });
    if (j.at("has_opt").get<bool>()) {
        for (int rep = 0; rep < 2; ++rep)
            out.model->params().visit([&](const std::string&, ParamGroup, Mat<float>& m) {
                Mat<float> t(m.rows, m.cols);
                read_mat(is, t);
                (rep == 0 ? out.opt_m : out.opt_v).push_back(std::move(t));
            });
        out.trainer_state = j.at("trainer").dump();
    }
    return out;
}

std::unique_ptr<Trainer> resume_trainer(Denoiser<float>& model, const TransitionSet& ts,
                                        const LoadedCheckpoint& ck) {
    if (ck.trainer_state.empty())
        throw std::runtime_error("checkpoint has no optimizer state to resume from");
    auto tr = std::make_unique<Trainer>(model, ts, ck.meta.train);
    auto dst = tr->opt_tensors();
    if (dst.size() != ck.opt_m.size() + ck.opt_v.size())
        throw std::runtime_error("optimizer tensor count mismatch on resume");
    for (size_t i = 0; i < ck.opt_m.size(); ++i) *dst[i] = ck.opt_m[i];
    for (size_t i = 0; i < ck.opt_v.size(); ++i) *dst[ck.opt_m.size() + i] = ck.opt_v[i];
    tr->restore_state(ck.trainer_state);
    return tr;
}

// ---------------------------------------------------------------- grad check

GradCheckReport grad_check(Denoiser<double>& model, const TokenSeq& x0, int t,
                           const TransitionSet& ts, double lambda, double eps, int min_params,
                           uint64_t seed) {
    Rng rng(seed);
    TokenSeq xt = ts.corrupt_sequence(x0, t, rng);
    const DenoiserConfig& cfg = model.config();
    int M = cfg.M(), K = cfg.vocab.K, C = cfg.vocab.C();

    auto& eng = tls_engine<double>();
    std::vector<const TokenSeq*> ptrs{&xt};
    std::vector<int> tt{t};
    eng.forward(cfg, model.params(), ptrs, tt, nullptr);
    SlotDists dists = eng.slot_dists(0);
    SlotDists g;
    loss_from_dists(dists, x0, xt, t, ts, lambda, &g);
    Mat<double> dpc(M, K), dpt(M, C + 1);
    std::memcpy(dpc.data(), g.coord.data(), sizeof(double) * g.coord.size());
    std::memcpy(dpt.data(), g.type.data(), sizeof(double) * g.type.size());
    eng.backward(dpc, dpt);

    // snapshot the analytic gradients; probe forwards reuse the same engine
    Params<double> analytic = eng.grads;

    auto eval = [&]() {
        SlotDists d = model.predict_x0(xt, t, false);
        return loss_from_dists(d, x0, xt, t, ts, lambda).total;
    };

    struct Slot {
        Mat<double>* p;
        const Mat<double>* g;
        ParamGroup grp;
        size_t idx;
    };
    std::vector<Mat<double>*> pmats;
    std::vector<ParamGroup> pgroups;
    model.params().visit([&](const std::string&, ParamGroup grp, Mat<double>& m) {
        pmats.push_back(&m);
        pgroups.push_back(grp);
    });
    std::vector<const Mat<double>*> gmats;
    analytic.visit([&](const std::string&, ParamGroup, const Mat<double>& m) {
        gmats.push_back(&m);
    });

    // group-stratified random coordinates so every group is always covered
    std::vector<Slot> chosen;
    auto pick_from_group = [&](ParamGroup grp) {
        std::vector<size_t> ids;
        for (size_t i = 0; i < pmats.size(); ++i)
            if (pgroups[i] == grp) ids.push_back(i);
        size_t mi = ids[rng.uniform_int(int(ids.size()))];
        chosen.push_back({pmats[mi], gmats[mi], grp, size_t(rng.uniform_int(int(pmats[mi]->size())))});
    };
    ParamGroup groups[4] = {ParamGroup::embeddings, ParamGroup::attention, ParamGroup::feedforward,
                            ParamGroup::heads};
    while (int(chosen.size()) < min_params)
        for (ParamGroup grp : groups) pick_from_group(grp);

    auto group_name = [](ParamGroup g) -> std::string {
        switch (g) {
            case ParamGroup::embeddings: return "embeddings";
            case ParamGroup::attention: return "attention";
            case ParamGroup::feedforward: return "feedforward";
            case ParamGroup::heads: return "heads";
        }
        return "?";
    };

    GradCheckReport rep;
    for (const Slot& s : chosen) {
        double orig = s.p->v[s.idx];
        s.p->v[s.idx] = orig + eps;
        double f1 = eval();
        s.p->v[s.idx] = orig - eps;
        double f2 = eval();
        s.p->v[s.idx] = orig;
        double num = (f1 - f2) / (2 * eps);
        double ana = s.g->v[s.idx];
        double rel = std::abs(num - ana) / std::max(std::abs(num) + std::abs(ana), 1e-6);
        rep.max_rel = std::max(rep.max_rel, rel);
        auto& gm = rep.group_max[group_name(s.grp)];
        gm = std::max(gm, rel);
        ++rep.n_checked;
    }
    return rep;
}

// ------------------------------------------------------------ instantiations

template struct Params<float>;
template struct Params<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template SlotDists reverse_distribution<float>(const Denoiser<float>&, const TokenSeq&, int,
                                               const TransitionSet&, bool);
template SlotDists reverse_distribution<double>(const Denoiser<double>&, const TokenSeq&, int,
                                                const TransitionSet&, bool);
template LossBreakdown loss<float>(const Denoiser<float>&, const TokenSeq&, int,
                                   const TransitionSet&, Rng&, double, bool);
template LossBreakdown loss<double>(const Denoiser<double>&, const TokenSeq&, int,
                                    const TransitionSet&, Rng&, double, bool);

}  // namespace hd
