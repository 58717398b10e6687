#include "heterodiff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace hd {

namespace {

struct Box {
    double l, t, r, b;
};

Box debox(const Element& e, int K) {
    return {bin_center(e.l, K), bin_center(e.t, K), bin_center(e.r, K), bin_center(e.b, K)};
}

double inter_area(const Box& a, const Box& b) {
    double w = std::min(a.r, b.r) - std::max(a.l, b.l);
    double h = std::min(a.b, b.b) - std::max(a.t, b.t);
    return w > 0 && h > 0 ? w * h : 0.0;
}

double box_iou(const Box& a, const Box& b) {
    double inter = inter_area(a, b);
    double uni = (a.r - a.l) * (a.b - a.t) + (b.r - b.l) * (b.b - b.t) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<int> sorted_types(const Layout& a) {
    std::vector<int> t;
    t.reserve(a.elements.size());
    for (const auto& e : a.elements) t.push_back(e.type);
    std::sort(t.begin(), t.end());
    return t;
}

// classic potentials algorithm, O(n^3), minimizing; scores are negated on entry
std::vector<int> hungarian_min(const std::vector<double>& a, int n) {
    const double kInf = 1e18;
    std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= n; ++j)
                if (!used[j]) {
                    double cur = a[size_t(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if (cur < minv[j]) { minv[j] = cur; way[j] = j0; }
                    if (minv[j] < delta) { delta = minv[j]; j1 = j; }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) { u[p[j]] += delta; v[j] -= delta; }
                else minv[j] -= delta;
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> res(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) res[p[j] - 1] = j - 1;
    return res;
}

}  // namespace

std::vector<int> max_assignment(const std::vector<double>& score, int n) {
    if (n <= 0) return {};
    if (size_t(n) * n != score.size())
        throw std::invalid_argument("max_assignment: score must be n x n");
    if (n <= 8) {
        std::vector<int> perm(n), best(n);
        std::iota(perm.begin(), perm.end(), 0);
        best = perm;
        double best_sum = -1e18;
        do {
            double s = 0;
            for (int i = 0; i < n; ++i) s += score[size_t(i) * n + perm[i]];
            if (s > best_sum) { best_sum = s; best = perm; }
        } while (std::next_permutation(perm.begin(), perm.end()));
        return best;
    }
    std::vector<double> neg(score.size());
    for (size_t i = 0; i < score.size(); ++i) neg[i] = -score[i];
    return hungarian_min(neg, n);
}

double alignment(const Layout& layout, int K) {
    int n = layout.n();
    if (n <= 1) return 0.0;
    // the six alignment lines per element, in unit-canvas space
    std::vector<std::array<double, 6>> lines(n);
    for (int i = 0; i < n; ++i) {
        Box b = debox(layout.elements[i], K);
        lines[i] = {b.l, (b.l + b.r) / 2, b.r, b.t, (b.t + b.b) / 2, b.b};
    }
    double acc = 0;
    for (int i = 0; i < n; ++i) {
        double d = 1.0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            for (int m = 0; m < 6; ++m) d = std::min(d, std::abs(lines[i][m] - lines[j][m]));
        }
        acc += -std::log(1.0 - d);
    }
    return acc / n;
}

double overlap(const Layout& layout, int K, const std::vector<int>& ignore_type_ids) {
    auto ignored = [&](int type) {
        return std::find(ignore_type_ids.begin(), ignore_type_ids.end(), type) !=
               ignore_type_ids.end();
    };
    std::vector<Box> boxes;
    boxes.reserve(layout.elements.size());
    for (const auto& e : layout.elements)
        if (!ignored(e.type)) boxes.push_back(debox(e, K));
    double acc = 0;
    for (size_t i = 0; i < boxes.size(); ++i)
        for (size_t j = i + 1; j < boxes.size(); ++j) acc += inter_area(boxes[i], boxes[j]);
    return acc;
}

bool same_type_multiset(const Layout& a, const Layout& b) {
    return sorted_types(a) == sorted_types(b);
}

double layout_pair_iou(const Layout& a, const Layout& b, int K) {
    int na = a.n(), nb = b.n();
    if (na == 0 || nb == 0) return 0.0;
    std::map<int, std::pair<std::vector<int>, std::vector<int>>> groups;
    for (int i = 0; i < na; ++i) groups[a.elements[i].type].first.push_back(i);
    for (int j = 0; j < nb; ++j) groups[b.elements[j].type].second.push_back(j);
    double total = 0;
    for (auto& [type, g] : groups) {
        auto& [ia, ib] = g;
        if (ia.empty() || ib.empty()) continue;  // unmatched types contribute zero
        int m = int(std::max(ia.size(), ib.size()));
        std::vector<double> score(size_t(m) * m, 0.0);
        for (size_t p = 0; p < ia.size(); ++p)
            for (size_t q = 0; q < ib.size(); ++q)
                score[p * m + q] =
                    box_iou(debox(a.elements[ia[p]], K), debox(b.elements[ib[q]], K));
        std::vector<int> asg = max_assignment(score, m);
        for (int i = 0; i < m; ++i) total += score[size_t(i) * m + asg[i]];
    }
    return total / std::max(na, nb);
}

double miou(const std::vector<Layout>& generated, const std::vector<Layout>& reference, int K) {
    if (generated.empty()) return 0.0;
    double acc = 0;
    for (const auto& g : generated) {
        double best = 0;
        for (const auto& r : reference)
            if (same_type_multiset(g, r)) best = std::max(best, layout_pair_iou(g, r, K));
        acc += best;
    }
    return acc / double(generated.size());
}

double selfsim(const std::vector<Layout>& layouts, int K) {
    if (layouts.empty()) return 0.0;
    std::map<std::vector<int>, std::vector<int>> groups;
    for (size_t i = 0; i < layouts.size(); ++i)
        groups[sorted_types(layouts[i])].push_back(int(i));
    double acc = 0;
    for (auto& [key, idx] : groups) {
        if (idx.size() < 2) continue;  // singleton groups score 0
        double s = 0;
        int pairs = 0;
        for (size_t i = 0; i < idx.size(); ++i)
            for (size_t j = i + 1; j < idx.size(); ++j) {
                s += layout_pair_iou(layouts[idx[i]], layouts[idx[j]], K);
                ++pairs;
            }
        acc += (s / pairs) * double(idx.size());
    }
    return acc / double(layouts.size());
}

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    j["miou"] = miou;
    j["align"] = align;
    j["overlap"] = overlap;
    j["selfsim"] = selfsim;
    j["reference"] = {{"align", ref_align}, {"overlap", ref_overlap}};
    j["n_generated"] = n_generated;
    j["n_reference"] = n_reference;
    return j.dump(1);
}

MetricsReport MetricsReport::from_json(const std::string& s) {
    nlohmann::json j = nlohmann::json::parse(s);
    MetricsReport r;
    r.miou = j.at("miou");
    r.align = j.at("align");
    r.overlap = j.at("overlap");
    r.selfsim = j.at("selfsim");
    r.ref_align = j.at("reference").at("align");
    r.ref_overlap = j.at("reference").at("overlap");
    r.n_generated = j.value("n_generated", 0);
    r.n_reference = j.value("n_reference", 0);
    return r;
}

MetricsReport eval_report(const std::vector<Layout>& generated,
                          const std::vector<Layout>& reference, int K,
                          const std::vector<int>& ignore_type_ids) {
    MetricsReport rep;
    rep.n_generated = int(generated.size());
    rep.n_reference = int(reference.size());
    rep.miou = miou(generated, reference, K);
    for (const auto& g : generated) {
        rep.align += alignment(g, K);
        rep.overlap += overlap(g, K, ignore_type_ids);
    }
    if (!generated.empty()) {
        rep.align /= double(generated.size());
        rep.overlap /= double(generated.size());
    }
    rep.selfsim = selfsim(generated, K);
    for (const auto& r : reference) {
        rep.ref_align += alignment(r, K);
        rep.ref_overlap += overlap(r, K, ignore_type_ids);
    }
    if (!reference.empty()) {
        rep.ref_align /= double(reference.size());
        rep.ref_overlap /= double(reference.size());
    }
    return rep;
}

}  // namespace hd
