#pragma once

// Minimal SVG rendering of reverse-sampling trajectories.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nocdda/sampler.hpp"

namespace nocdda {

struct PlotOptions {
    int width = 640;
    int height = 640;
    int margin = 48;
    std::size_t dim_x = 0;  // coordinates drawn on the horizontal / vertical axes
    std::size_t dim_y = 1;
    bool allow_projection = false;  // permit picking two coordinates out of d > 2
};

inline const char* class_color(int c) {
    static constexpr std::array<const char*, 10> palette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                                            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return palette[std::size_t(std::abs(c)) % palette.size()];
}

/// One polyline per trajectory coloured by class; a hollow circle marks the
/// start (t = T) and a filled circle the end (t = 0).
inline std::string render_trajectories_svg(const std::vector<Trajectory>& trajectories, const PlotOptions& opt = {}) {
    std::size_t d = 0;
    for (const auto& tr : trajectories)
        for (const auto& [t, x] : tr.states) {
            if (d == 0) d = x.size();
            if (x.size() != d) throw InvalidArgument("plot: trajectories have mixed dimensions");
        }
    if (d > 2 && !opt.allow_projection)
        throw InvalidArgument("plot: trajectories are " + std::to_string(d) +
                              "-dimensional; pick two coordinates with --dims i,j");
    if (d > 0 && (opt.dim_x >= d || opt.dim_y >= d || (d >= 2 && opt.dim_x == opt.dim_y)))
        throw InvalidArgument("plot: coordinate selection out of range");

    auto coord = [&](const std::vector<double>& x) {
        return std::pair{x[opt.dim_x], d >= 2 ? x[opt.dim_y] : 0.0};
    };
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& tr : trajectories)
        for (const auto& [t, x] : tr.states) {
            const auto [u, v] = coord(x);
            x0 = std::min(x0, u), x1 = std::max(x1, u), y0 = std::min(y0, v), y1 = std::max(y1, v);
        }
    if (!std::isfinite(x0)) x0 = -1, x1 = 1, y0 = -1, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 1, x1 += 1;
    if (y1 - y0 < 1e-12) y0 -= 1, y1 += 1;

    const double w = opt.width - 2.0 * opt.margin, h = opt.height - 2.0 * opt.margin;
    auto px = [&](double u) { return opt.margin + (u - x0) / (x1 - x0) * w; };
    auto py = [&](double v) { return opt.margin + (y1 - v) / (y1 - y0) * h; };

    std::ostringstream svg;
    svg.precision(6);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
        << "\" viewBox=\"0 0 " << opt.width << ' ' << opt.height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
    svg << "<line x1=\"" << opt.margin << "\" y1=\"" << opt.height - opt.margin << "\" x2=\"" << opt.width - opt.margin
        << "\" y2=\"" << opt.height - opt.margin << "\"/>\n";
    svg << "<line x1=\"" << opt.margin << "\" y1=\"" << opt.margin << "\" x2=\"" << opt.margin << "\" y2=\""
        << opt.height - opt.margin << "\"/>\n";
    svg << "</g>\n";
    svg << "<g class=\"labels\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"" << opt.margin << "\" y=\"" << opt.height - opt.margin + 16 << "\">" << x0 << "</text>\n";
    svg << "<text x=\"" << opt.width - opt.margin << "\" y=\"" << opt.height - opt.margin + 16
        << "\" text-anchor=\"end\">" << x1 << "</text>\n";
    svg << "<text x=\"" << opt.margin - 4 << "\" y=\"" << opt.height - opt.margin << "\" text-anchor=\"end\">" << y0
        << "</text>\n";
    svg << "<text x=\"" << opt.margin - 4 << "\" y=\"" << opt.margin + 10 << "\" text-anchor=\"end\">" << y1
        << "</text>\n";
    svg << "<text x=\"" << opt.width / 2 << "\" y=\"" << opt.height - 8 << "\" text-anchor=\"middle\">x_" << opt.dim_x
        << "</text>\n";
    svg << "<text x=\"12\" y=\"" << opt.height / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 12 "
        << opt.height / 2 << ")\">x_" << opt.dim_y << "</text>\n";
    svg << "</g>\n";

    for (const auto& tr : trajectories) {
        if (tr.states.empty()) continue;
        const char* color = class_color(tr.class_id);
        svg << "<polyline class=\"trajectory\" data-class=\"" << tr.class_id << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-opacity=\"0.6\" stroke-width=\"1\" points=\"";
        for (std::size_t k = 0; k < tr.states.size(); ++k) {
            const auto [u, v] = coord(tr.states[k].second);
            svg << (k ? " " : "") << px(u) << ',' << py(v);
        }
        svg << "\"/>\n";
        const auto [su, sv] = coord(tr.states.front().second);
        const auto [eu, ev] = coord(tr.states.back().second);
        svg << "<circle class=\"start\" cx=\"" << px(su) << "\" cy=\"" << py(sv) << "\" r=\"3\" fill=\"none\" stroke=\""
            << color << "\"/>\n";
        svg << "<circle class=\"end\" cx=\"" << px(eu) << "\" cy=\"" << py(ev) << "\" r=\"3\" fill=\"" << color
            << "\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

inline void plot_trajectories(const std::string& trajectory_csv, const std::string& out_svg, const PlotOptions& opt = {}) {
    const auto trajectories = load_trajectories_csv(trajectory_csv);
    const auto svg = render_trajectories_svg(trajectories, opt);
    std::ofstream out(out_svg);
    if (!out) throw InvalidArgument("cannot write " + out_svg);
    out << svg;
}

}  // namespace nocdda
