#include "heterodiff/layout.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace hd {

static auto order_key(const Element& e) { return std::make_tuple(e.type, e.t, e.l, e.r, e.b); }

void canonicalize(Layout& layout) {
    std::stable_sort(layout.elements.begin(), layout.elements.end(),
                     [](const Element& a, const Element& b) { return order_key(a) < order_key(b); });
}

bool is_canonical(const Layout& layout) {
    return std::is_sorted(layout.elements.begin(), layout.elements.end(),
                          [](const Element& a, const Element& b) { return order_key(a) < order_key(b); });
}

int discretize_coord(double v, int K) {
    int bin = int(std::floor(v * K));
    return std::clamp(bin, 0, K - 1);
}

double bin_center(int bin, int K) { return (bin + 0.5) / K; }

Layout discretize(const std::vector<ContinuousBox>& boxes, const Vocabulary& vocab) {
    if (boxes.empty()) throw std::invalid_argument("discretize: empty element list");
    Layout out;
    out.elements.reserve(boxes.size());
    for (const auto& box : boxes) {
        int id = vocab.type_id_by_name(box.type_name);
        if (id < 0) throw std::invalid_argument("discretize: unknown type name '" + box.type_name + "'");
        Element e;
        e.type = id;
        e.l = discretize_coord(box.l, vocab.K);
        e.t = discretize_coord(box.t, vocab.K);
        e.r = discretize_coord(box.r, vocab.K);
        e.b = discretize_coord(box.b, vocab.K);
        out.elements.push_back(e);
    }
    canonicalize(out);
    return out;
}

bool element_valid(const Element& e, const Vocabulary& vocab) {
    return e.type >= 0 && e.type < vocab.C() && e.l >= 0 && e.r < vocab.K && e.t >= 0 &&
           e.b < vocab.K && e.l <= e.r && e.t <= e.b;
}

}  // namespace hd
