#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "rkinn/linalg.hpp"

namespace rkinn::svg {

struct Series {
    std::string label;
    Vector x, y;
    bool markers = false;     // scatter instead of a polyline
    bool dashed = false;
    std::string color;        // empty picks from the palette
};

inline Series line(std::string label, Vector x, Vector y, bool dashed = false, std::string color = {}) {
    return {std::move(label), std::move(x), std::move(y), false, dashed, std::move(color)};
}
inline Series scatter(std::string label, Vector x, Vector y, std::string color = {}) {
    return {std::move(label), std::move(x), std::move(y), true, false, std::move(color)};
}

struct Plot {
    std::string title, xlabel, ylabel;
    bool logx = false, logy = false;
    bool diagonal = false;    // y = x reference line (parity plots)
    double width = 640, height = 420;
    std::vector<Series> series;
};

namespace detail {

inline const char* palette(std::size_t k) {
    static const char* c[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                              "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return c[k % 10];
}

inline std::string num(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f", v);
    return b;
}

inline std::string tick_label(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%g", v);
    return b;
}

inline std::string escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

struct Axis {
    double lo = 0, hi = 1;
    bool log = false;

    double map(double v) const {
        const double a = log ? std::log10(v) : v;
        return (a - lo) / (hi - lo);
    }
    bool usable(double v) const { return std::isfinite(v) && (!log || v > 0); }

    std::vector<double> ticks() const {
        std::vector<double> t;
        if (log) {
            const double step = std::max(1.0, std::ceil((hi - lo) / 8.0));
            for (double e = std::ceil(lo); e <= hi + 1e-9; e += step) t.push_back(std::pow(10.0, e));
            return t;
        }
        const double raw = (hi - lo) / 6.0;
        const double mag = std::pow(10.0, std::floor(std::log10(raw)));
        double step = mag;
        for (double m : {1.0, 2.0, 5.0, 10.0})
            if (m * mag >= raw) {
                step = m * mag;
                break;
            }
        for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step)
            t.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
        return t;
    }
};

inline Axis make_axis(const std::vector<Series>& s, bool use_x, bool log, bool include_other = false) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    Axis probe;
    probe.log = log;
    for (const auto& ser : s)
        for (int pass = 0; pass < (include_other ? 2 : 1); ++pass) {
            const Vector& v = (use_x == (pass == 0)) ? ser.x : ser.y;
            for (double a : v)
                if (probe.usable(a)) {
                    const double u = log ? std::log10(a) : a;
                    lo = std::min(lo, u);
                    hi = std::max(hi, u);
                }
        }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
        const double pad = std::max(std::abs(lo) * 0.1, log ? 0.5 : 1e-3);
        lo -= pad;
        hi += pad;
    } else if (!log) {
        const double pad = 0.04 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
    return Axis{lo, hi, log};
}

}  // namespace detail

/// Renders a plot to an SVG document. Output depends only on the inputs.
inline std::string render(const Plot& p) {
    using namespace detail;
    const double ml = 70, mr = 150, mt = 36, mb = 50;
    const double pw = p.width - ml - mr, ph = p.height - mt - mb;
    Axis ax = make_axis(p.series, true, p.logx, p.diagonal);
    Axis ay = make_axis(p.series, false, p.logy, p.diagonal);
    if (p.diagonal && p.logx == p.logy) ay = ax = Axis{std::min(ax.lo, ay.lo), std::max(ax.hi, ay.hi), p.logx};
    auto X = [&](double v) { return ml + ax.map(v) * pw; };
    auto Y = [&](double v) { return mt + (1.0 - ay.map(v)) * ph; };

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(p.width) + "\" height=\"" + num(p.height) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s += "<rect x=\"0\" y=\"0\" width=\"" + num(p.width) + "\" height=\"" + num(p.height) + "\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(ml + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + escape(p.title) +
         "</text>\n";

    for (double t : ax.ticks()) {
        const double x = X(t);
        s += "<line x1=\"" + num(x) + "\" y1=\"" + num(mt) + "\" x2=\"" + num(x) + "\" y2=\"" + num(mt + ph) +
             "\" stroke=\"#e0e0e0\"/>\n";
        s += "<text x=\"" + num(x) + "\" y=\"" + num(mt + ph + 15) + "\" text-anchor=\"middle\">" + tick_label(t) +
             "</text>\n";
    }
    for (double t : ay.ticks()) {
        const double y = Y(t);
        s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(y) + "\" x2=\"" + num(ml + pw) + "\" y2=\"" + num(y) +
             "\" stroke=\"#e0e0e0\"/>\n";
        s += "<text x=\"" + num(ml - 5) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" + tick_label(t) +
             "</text>\n";
    }
    s += "<rect x=\"" + num(ml) + "\" y=\"" + num(mt) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(ml + pw / 2) + "\" y=\"" + num(p.height - 12) + "\" text-anchor=\"middle\">" +
         escape(p.xlabel) + "</text>\n";
    s += "<text x=\"16\" y=\"" + num(mt + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         num(mt + ph / 2) + ")\">" + escape(p.ylabel) + "</text>\n";

    if (p.diagonal) {
        const double a = p.logx ? std::pow(10.0, ax.lo) : ax.lo, b = p.logx ? std::pow(10.0, ax.hi) : ax.hi;
        s += "<line x1=\"" + num(X(a)) + "\" y1=\"" + num(Y(a)) + "\" x2=\"" + num(X(b)) + "\" y2=\"" + num(Y(b)) +
             "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
    }

    std::size_t legend = 0;
    for (std::size_t k = 0; k < p.series.size(); ++k) {
        const auto& ser = p.series[k];
        const std::string col = ser.color.empty() ? palette(k) : ser.color;
        const std::size_t n = std::min(ser.x.size(), ser.y.size());
        if (ser.markers) {
            for (std::size_t i = 0; i < n; ++i)
                if (ax.usable(ser.x[i]) && ay.usable(ser.y[i]))
                    s += "<circle cx=\"" + num(X(ser.x[i])) + "\" cy=\"" + num(Y(ser.y[i])) + "\" r=\"2.5\" fill=\"" +
                         col + "\"/>\n";
        } else {
            // break the line at unusable points
            std::string pts;
            auto flush = [&] {
                if (!pts.empty())
                    s += "<polyline fill=\"none\" stroke=\"" + col + "\" stroke-width=\"1.5\"" +
                         (ser.dashed ? " stroke-dasharray=\"5 3\"" : "") + " points=\"" + pts + "\"/>\n";
                pts.clear();
            };
            for (std::size_t i = 0; i < n; ++i) {
                if (!ax.usable(ser.x[i]) || !ay.usable(ser.y[i])) {
                    flush();
                    continue;
                }
                if (!pts.empty()) pts += ' ';
                pts += num(X(ser.x[i])) + "," + num(Y(ser.y[i]));
            }
            flush();
        }
        if (ser.label.empty()) continue;
        const double ly = mt + 12 + 15.0 * static_cast<double>(legend++);
        const double lx = ml + pw + 10;
        if (ser.markers)
            s += "<circle cx=\"" + num(lx + 8) + "\" cy=\"" + num(ly - 4) + "\" r=\"3\" fill=\"" + col + "\"/>\n";
        else
            s += "<line x1=\"" + num(lx) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" + num(lx + 16) + "\" y2=\"" +
                 num(ly - 4) + "\" stroke=\"" + col + "\" stroke-width=\"2\"" +
                 (ser.dashed ? " stroke-dasharray=\"5 3\"" : "") + "/>\n";
        s += "<text x=\"" + num(lx + 22) + "\" y=\"" + num(ly) + "\">" + escape(ser.label) + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

}  // namespace rkinn::svg
