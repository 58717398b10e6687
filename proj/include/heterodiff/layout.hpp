#pragma once
#include <string>
#include <vector>

#include "heterodiff/vocab.hpp"

namespace hd {

// One typed box; coordinates are inclusive bin indices in [0, K)
struct Element {
    int type = 0;  // vocab type id
    int l = 0, t = 0, r = 0, b = 0;

    bool operator==(const Element&) const = default;
};

struct Layout {
    std::vector<Element> elements;
    double canvas_w = 1.0, canvas_h = 1.0;  // source units; only discretization/rendering care

    int n() const { return int(elements.size()); }
    bool operator==(const Layout& o) const { return elements == o.elements; }
};

// Canonical element order: alphabetical type name (== type id, the vocab is sorted),
// ties broken by (top, left, right, bottom, insertion index). Stable sort supplies
// the insertion-index tiebreak.
void canonicalize(Layout& layout);
bool is_canonical(const Layout& layout);

// floor(v * K) clamped to [0, K-1]
int discretize_coord(double v, int K);
// bin -> center of its cell in [0, 1]
double bin_center(int bin, int K);

struct ContinuousBox {
    std::string type_name;
    double l = 0, t = 0, r = 0, b = 0;
};

// Continuous [0,1] boxes -> canonical Layout. Throws on unknown type names or an
// empty element list.
Layout discretize(const std::vector<ContinuousBox>& boxes, const Vocabulary& vocab);

// validity check used by tests and ingestion
bool element_valid(const Element& e, const Vocabulary& vocab);

}  // namespace hd
