#pragma once
#include <string>
#include <vector>

#include "heterodiff/layout.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

// All metrics de-discretize coordinates to bin centers ((bin + 0.5)/K) first, so
// scores are K-invariant up to quantization and live in unit-canvas space.

// (1/n) * sum_i -log(1 - d_i), d_i = min over j != i and over the 6 alignment modes
// (left, x-center, right, top, y-center, bottom); 0 for n = 1
double alignment(const Layout& layout, int K);

// total pairwise intersection area over unordered pairs, ignored types excluded
double overlap(const Layout& layout, int K, const std::vector<int>& ignore_type_ids);

// optimal same-type assignment box-IoU between two layouts with equal type
// multisets, normalized by max(n1, n2); exhaustive for per-type groups <= 8,
// Hungarian above
double layout_pair_iou(const Layout& a, const Layout& b, int K);
bool same_type_multiset(const Layout& a, const Layout& b);

// mean over generated layouts of the best pair IoU against any reference with the
// same type multiset (0 when none exists)
double miou(const std::vector<Layout>& generated, const std::vector<Layout>& reference, int K);

// partition by type multiset; singleton groups score 0; group score = mean pairwise
// IoU; return the size-weighted mean
double selfsim(const std::vector<Layout>& layouts, int K);

struct MetricsReport {
    double miou = 0, align = 0, overlap = 0, selfsim = 0;
    double ref_align = 0, ref_overlap = 0;
    int n_generated = 0, n_reference = 0;

    std::string to_json() const;
    static MetricsReport from_json(const std::string&);
};

MetricsReport eval_report(const std::vector<Layout>& generated,
                          const std::vector<Layout>& reference, int K,
                          const std::vector<int>& ignore_type_ids);

// maximum-weight perfect matching on an n x n score matrix; returns per-row column
// assignment. Exposed for the exhaustive-vs-polynomial cross-check tests.
std::vector<int> max_assignment(const std::vector<double>& score, int n);

}  // namespace hd
