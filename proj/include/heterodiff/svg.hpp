#pragma once
#include <string>
#include <vector>

#include "heterodiff/layout.hpp"
#include "heterodiff/vocab.hpp"

namespace hd {

// Trace frames keep MASK-typed boxes; type = -1 marks MASK (hatched gray fill).
struct FrameElement {
    int type = 0;  // vocab type id or -1 for MASK
    int l = 0, t = 0, r = 0, b = 0;
};
struct Frame {
    int t = 0;
    std::vector<FrameElement> elements;
};

// stable fill color for a type id (cycles a fixed palette); same type, same fill
std::string palette_color(int type_id);

std::string render_layout_svg(const Layout& layout, const Vocabulary& vocab,
                              double canvas_w, double canvas_h);
std::string render_frame_svg(const Frame& frame, const Vocabulary& vocab,
                             double canvas_w, double canvas_h);
// frames side by side with timestep captions
std::string render_strip_svg(const std::vector<Frame>& frames, const Vocabulary& vocab,
                             double canvas_w, double canvas_h);
// simple polyline chart: one series per (label, y-values) pair; log-scale y option
std::string render_chart_svg(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                             const std::string& x_label, const std::string& y_label, bool log_y);

}  // namespace hd
