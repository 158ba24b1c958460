#pragma once

// Minimal SVG output. Each series is one <g class="series"> holding one
// element per point, so files can be inspected structurally.

#include <string>

#include "repo/analysis.hpp"
#include "repo/positioning.hpp"

namespace repo::plot {

// One <rect class="bar"> per bin.
std::string spread_histogram_svg(const analysis::Histogram& h);

// One series per (layer, head): x = token index, y = assigned position.
std::string position_scatter_svg(const PositionTrace& trace);

}  // namespace repo::plot
