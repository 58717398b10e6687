#include "heterodiff/svg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hd {

namespace {

const char* kPalette[] = {"#4d96d9", "#e06666", "#6aa84f", "#e69138",
                          "#8e7cc3", "#45818e", "#c27ba0", "#a64d79"};
constexpr int kPaletteN = int(sizeof(kPalette) / sizeof(kPalette[0]));

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

const char* kHatchDef =
    "<defs><pattern id=\"hatch\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" "
    "patternTransform=\"rotate(45)\"><rect width=\"6\" height=\"6\" fill=\"#dddddd\"/>"
    "<line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" stroke=\"#999999\" stroke-width=\"2\"/>"
    "</pattern></defs>\n";

// boxes for one frame at offset (ox, oy); coordinates are bin centers scaled to canvas
void emit_boxes(std::ostringstream& os, const std::vector<FrameElement>& elems,
                const Vocabulary& vocab, double w, double h, double ox, double oy) {
    int K = vocab.K;
    os << "<rect x=\"" << fmt(ox) << "\" y=\"" << fmt(oy) << "\" width=\"" << fmt(w)
       << "\" height=\"" << fmt(h) << "\" fill=\"#ffffff\" stroke=\"#444444\"/>\n";
    for (const auto& e : elems) {
        double x = ox + bin_center(e.l, K) * w;
        double y = oy + bin_center(e.t, K) * h;
        double bw = std::max(0.0, (bin_center(e.r, K) - bin_center(e.l, K)) * w);
        double bh = std::max(0.0, (bin_center(e.b, K) - bin_center(e.t, K)) * h);
        std::string fill = e.type < 0 ? "url(#hatch)" : palette_color(e.type);
        os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(bw)
           << "\" height=\"" << fmt(bh) << "\" fill=\"" << fill
           << "\" fill-opacity=\"0.6\" stroke=\"#222222\"/>\n";
        if (e.type >= 0 && e.type < vocab.C() && bw > 30 && bh > 12)
            os << "<text x=\"" << fmt(x + 3) << "\" y=\"" << fmt(y + 12)
               << "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#111111\">"
               << esc(vocab.type_names[size_t(e.type)]) << "</text>\n";
    }
}

std::vector<FrameElement> to_frame_elems(const Layout& layout) {
    std::vector<FrameElement> out;
    out.reserve(layout.elements.size());
    for (const auto& e : layout.elements) out.push_back({e.type, e.l, e.t, e.r, e.b});
    return out;
}

}  // namespace

std::string palette_color(int type_id) {
    if (type_id < 0) return "#bbbbbb";
    return kPalette[type_id % kPaletteN];
}

std::string render_layout_svg(const Layout& layout, const Vocabulary& vocab, double canvas_w,
                              double canvas_h) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(canvas_w) << "\" height=\""
       << fmt(canvas_h) << "\" viewBox=\"0 0 " << fmt(canvas_w) << ' ' << fmt(canvas_h)
       << "\">\n";
    os << kHatchDef;
    emit_boxes(os, to_frame_elems(layout), vocab, canvas_w, canvas_h, 0, 0);
    os << "</svg>\n";
    return os.str();
}

std::string render_frame_svg(const Frame& frame, const Vocabulary& vocab, double canvas_w,
                             double canvas_h) {
    std::ostringstream os;
    double cap = 18;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(canvas_w) << "\" height=\""
       << fmt(canvas_h + cap) << "\" viewBox=\"0 0 " << fmt(canvas_w) << ' '
       << fmt(canvas_h + cap) << "\">\n";
    os << kHatchDef;
    os << "<text x=\"4\" y=\"13\" font-size=\"12\" font-family=\"sans-serif\">t=" << frame.t
       << "</text>\n";
    emit_boxes(os, frame.elements, vocab, canvas_w, canvas_h, 0, cap);
    os << "</svg>\n";
    return os.str();
}

std::string render_strip_svg(const std::vector<Frame>& frames, const Vocabulary& vocab,
                             double canvas_w, double canvas_h) {
    double gap = 12, cap = 18;
    double total_w = frames.empty() ? canvas_w
                                    : frames.size() * canvas_w + (frames.size() - 1) * gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(total_w) << "\" height=\""
       << fmt(canvas_h + cap) << "\" viewBox=\"0 0 " << fmt(total_w) << ' '
       << fmt(canvas_h + cap) << "\">\n";
    os << kHatchDef;
    for (size_t i = 0; i < frames.size(); ++i) {
        double ox = i * (canvas_w + gap);
        os << "<text x=\"" << fmt(ox + 4) << "\" y=\"13\" font-size=\"12\" "
           << "font-family=\"sans-serif\">t=" << frames[i].t << "</text>\n";
        emit_boxes(os, frames[i].elements, vocab, canvas_w, canvas_h, ox, cap);
    }
    os << "</svg>\n";
    return os.str();
}

std::string render_chart_svg(
    const std::vector<std::pair<std::string, std::vector<double>>>& series,
    const std::string& x_label, const std::string& y_label, bool log_y) {
    const double W = 720, H = 440, ml = 70, mr = 20, mt = 20, mb = 50;
    const double pw = W - ml - mr, ph = H - mt - mb;

    size_t nx = 0;
    double ymin = 1e300, ymax = -1e300;
    for (const auto& [label, ys] : series) {
        nx = std::max(nx, ys.size());
        for (double y : ys) {
            if (log_y && !(y > 0)) continue;
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (ymin > ymax) { ymin = 0; ymax = 1; }
    if (log_y) { ymin = std::log10(ymin); ymax = std::log10(ymax); }
    if (ymax - ymin < 1e-12) { ymax += 1; ymin -= 1; }

    auto xpix = [&](size_t i) { return ml + (nx <= 1 ? 0.0 : pw * double(i) / double(nx - 1)); };
    auto ypix = [&](double y) {
        double v = log_y ? std::log10(std::max(y, 1e-300)) : y;
        return mt + ph * (1.0 - (v - ymin) / (ymax - ymin));
    };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
    os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"#fcfcfc\" stroke=\"#444444\"/>\n";
    // axis ticks
    for (int k = 0; k <= 4; ++k) {
        double fy = ymin + (ymax - ymin) * k / 4.0;
        double py = mt + ph * (1.0 - double(k) / 4.0);
        double shown = log_y ? std::pow(10.0, fy) : fy;
        os << "<line x1=\"" << ml - 4 << "\" y1=\"" << fmt(py) << "\" x2=\"" << ml << "\" y2=\""
           << fmt(py) << "\" stroke=\"#444444\"/>\n";
        os << "<text x=\"" << ml - 8 << "\" y=\"" << fmt(py + 4)
           << "\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\">";
        std::ostringstream num;
        num.precision(3);
        num << shown;
        os << num.str() << "</text>\n";
        size_t xi = nx <= 1 ? 0 : size_t(std::llround(double(nx - 1) * k / 4.0));
        double px = xpix(xi);
        os << "<line x1=\"" << fmt(px) << "\" y1=\"" << mt + ph << "\" x2=\"" << fmt(px)
           << "\" y2=\"" << mt + ph + 4 << "\" stroke=\"#444444\"/>\n";
        os << "<text x=\"" << fmt(px) << "\" y=\"" << mt + ph + 16
           << "\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">" << xi
           << "</text>\n";
    }
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 12
       << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">" << esc(x_label)
       << "</text>\n";
    os << "<text x=\"16\" y=\"" << mt + ph / 2
       << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\" transform=\""
       << "rotate(-90 16 " << mt + ph / 2 << ")\">" << esc(y_label) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& [label, ys] = series[si];
        os << "<polyline fill=\"none\" stroke=\"" << palette_color(int(si))
           << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < ys.size(); ++i) {
            if (log_y && !(ys[i] > 0)) continue;
            os << fmt(xpix(i)) << ',' << fmt(ypix(ys[i])) << ' ';
        }
        os << "\"/>\n";
        double ly = mt + 16 + 16 * double(si);
        os << "<line x1=\"" << ml + pw - 130 << "\" y1=\"" << fmt(ly - 4) << "\" x2=\""
           << ml + pw - 110 << "\" y2=\"" << fmt(ly - 4) << "\" stroke=\"" << palette_color(int(si))
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << ml + pw - 105 << "\" y=\"" << fmt(ly)
           << "\" font-size=\"11\" font-family=\"sans-serif\">" << esc(label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace hd
