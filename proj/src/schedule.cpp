#include "heterodiff/schedule.hpp"

#include <cmath>

#include "heterodiff/transition.hpp"

namespace hd {

static void check_range(int t, int lo, const ScheduleParams& p) {
    if (t < lo || t > p.T)
        throw std::out_of_range("schedule: t = " + std::to_string(t) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(p.T) + "]");
}

double gamma_bar(int t, const ScheduleParams& p) {
    p.validate();
    check_range(t, 0, p);
    switch (p.type_kind) {
        case TypeScheduleKind::late_absorb:
            // exact 0 below T~ keeps the cumulative type matrix exactly identity there
            if (t < p.T_tilde) return 0.0;
            if (t == p.T) return 1.0;  // also covers T_tilde == T
            return double(t - p.T_tilde) / double(p.T - p.T_tilde);
        case TypeScheduleKind::early_absorb:
            // T_tilde doubles as the early horizon T~'
            if (t >= p.T_tilde) return 1.0;
            return double(t) / double(p.T_tilde);
        case TypeScheduleKind::linear:
            return double(t) / double(p.T);
    }
    return 1.0;
}

double gamma_step(int t, const ScheduleParams& p) {
    check_range(t, 1, p);
    double prev = gamma_bar(t - 1, p);
    double cur = gamma_bar(t, p);
    if (prev >= 1.0 || cur >= 1.0) return 1.0;
    return 1.0 - (1.0 - cur) / (1.0 - prev);
}

double beta(int t, const ScheduleParams& p) {
    p.validate();
    check_range(t, 1, p);
    if (p.coord_kind == CoordScheduleKind::linear) return p.linear_slope * double(t) / double(p.T);
    int tc = p.coord_horizon();
    if (t >= tc) return BETA_CAP;
    return p.g / std::pow(double(tc) - double(t) + p.eps, p.h);
}

std::vector<double> cumulative_std_curve(const ScheduleParams& p, int K) {
    if (K < 2) throw std::invalid_argument("cumulative_std_curve: K must be >= 2");
    std::vector<double> out;
    out.reserve(p.T + 1);
    StochMatrix qbar = StochMatrix::identity(K);
    auto entry_std = [K](const StochMatrix& m) {
        double n = double(K) * K, mean = 0;
        for (double v : m.a) mean += v;
        mean /= n;
        double var = 0;
        for (double v : m.a) var += (v - mean) * (v - mean);
        return std::sqrt(var / n);
    };
    out.push_back(entry_std(qbar));
    for (int t = 1; t <= p.T; ++t) {
        qbar = matmul(qbar, build_coord_matrix(t, p, K, CoordMatrixKind::gaussian));
        out.push_back(entry_std(qbar));
    }
    return out;
}

TypeScheduleKind type_kind_from_name(const std::string& s) {
    if (s == "late_absorb") return TypeScheduleKind::late_absorb;
    if (s == "early_absorb") return TypeScheduleKind::early_absorb;
    if (s == "linear") return TypeScheduleKind::linear;
    throw std::invalid_argument("unknown type schedule kind '" + s + "'");
}

CoordScheduleKind coord_kind_from_name(const std::string& s) {
    if (s == "power_law") return CoordScheduleKind::power_law;
    if (s == "linear") return CoordScheduleKind::linear;
    throw std::invalid_argument("unknown coord schedule kind '" + s + "'");
}

const char* name(TypeScheduleKind k) {
    switch (k) {
        case TypeScheduleKind::late_absorb: return "late_absorb";
        case TypeScheduleKind::early_absorb: return "early_absorb";
        case TypeScheduleKind::linear: return "linear";
    }
    return "?";
}

const char* name(CoordScheduleKind k) {
    return k == CoordScheduleKind::power_law ? "power_law" : "linear";
}

}  // namespace hd
