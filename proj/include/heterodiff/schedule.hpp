#pragma once
#include <stdexcept>
#include <string>
#include <vector>

namespace hd {

enum class TypeScheduleKind { late_absorb, early_absorb, linear };
enum class CoordScheduleKind { power_law, linear };

// beta cap for t >= T_c: the power-law base goes negative there, so coordinate
// steps switch to a "numerically terminal" kernel. One capped step is NOT uniform
// (its limit has diagonal K/(2K-1)); the cumulative product converges to uniform
// geometrically across the capped phase, which is what the stationarity tests check.
inline constexpr double BETA_CAP = 1e6;

struct ScheduleParams {
    int T = 50;
    int T_tilde = 40;          // absorbing-enable step (late_absorb); horizon T~' for early_absorb
    double g = 28.0;
    double h = 3.4;
    double eps = 1e-4;
    TypeScheduleKind type_kind = TypeScheduleKind::late_absorb;
    CoordScheduleKind coord_kind = CoordScheduleKind::power_law;
    int T_coord = -1;          // coordinate horizon T_c; -1 means T_tilde
    double linear_slope = 0.5; // b in beta_t = b*t/T for the linear coordinate schedule

    int coord_horizon() const { return T_coord > 0 ? T_coord : T_tilde; }
    void validate() const {
        if (T < 1 || T_tilde < 1 || T_tilde > T)
            throw std::invalid_argument("schedule: need 0 < T_tilde <= T");
        if (!(g > 0) || !(h > 0) || !(eps > 0))
            throw std::invalid_argument("schedule: g, h, eps must be positive");
    }
};

// cumulative absorbing probability; gamma_bar(0) = 0, gamma_bar(T) = 1, non-decreasing
double gamma_bar(int t, const ScheduleParams& p);
// per-step absorbing probability: 1 - (1-gamma_bar(t))/(1-gamma_bar(t-1))
double gamma_step(int t, const ScheduleParams& p);
// coordinate kernel width; power_law: g/(T_c - t + eps)^h below T_c, BETA_CAP at/after
double beta(int t, const ScheduleParams& p);

// std-dev of the entries of cumulative Q_coord for t = 0..T (T+1 values), for
// schedule-comparison plots
std::vector<double> cumulative_std_curve(const ScheduleParams& p, int K);

TypeScheduleKind type_kind_from_name(const std::string&);
CoordScheduleKind coord_kind_from_name(const std::string&);
const char* name(TypeScheduleKind);
const char* name(CoordScheduleKind);

}  // namespace hd
