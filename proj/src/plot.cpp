#include "repo/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace repo::plot {

namespace {

constexpr double kW = 640, kH = 400, kPad = 40;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return palette[i % 8];
}

void open(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\""
     << kH << "\">\n<title>" << title << "</title>\n";
  os << "<line class=\"axis\" x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\""
     << kW - kPad << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<line class=\"axis\" x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad
     << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
}

}  // namespace

std::string spread_histogram_svg(const analysis::Histogram& h) {
  std::ostringstream os;
  open(os, "position spread per head");
  const std::size_t bins = h.counts.size();
  std::size_t top = 1;
  for (auto c : h.counts) top = std::max(top, c);
  const double bw = (kW - 2 * kPad) / double(std::max<std::size_t>(bins, 1));
  os << "<g class=\"series\" data-name=\"spread\">\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double bh = (kH - 2 * kPad) * double(h.counts[b]) / double(top);
    os << "<rect class=\"bar\" x=\"" << num(kPad + bw * double(b)) << "\" y=\""
       << num(kH - kPad - bh) << "\" width=\"" << num(bw * 0.9) << "\" height=\""
       << num(bh) << "\" fill=\"" << color(0) << "\" data-count=\"" << h.counts[b]
       << "\" data-lo=\"" << num(h.edges[b]) << "\" data-hi=\"" << num(h.edges[b + 1])
       << "\"/>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

std::string position_scatter_svg(const PositionTrace& trace) {
  double lo = 0, hi = 1;
  bool first = true;
  for (const auto& e : trace.entries)
    for (double z : e.z) {
      if (first) lo = hi = z, first = false;
      lo = std::min(lo, z);
      hi = std::max(hi, z);
    }
  if (hi - lo < 1e-12) hi = lo + 1;
  const double xs = (kW - 2 * kPad) / double(std::max<std::size_t>(trace.seq_len, 2) - 1);
  const double ys = (kH - 2 * kPad) / (hi - lo);

  std::ostringstream os;
  open(os, "assigned positions");
  for (std::size_t s = 0; s < trace.entries.size(); ++s) {
    const auto& e = trace.entries[s];
    os << "<g class=\"series\" data-layer=\"" << e.layer << "\" data-head=\"" << e.head
       << "\">\n";
    for (std::size_t i = 0; i < e.z.size(); ++i)
      os << "<circle class=\"point\" cx=\"" << num(kPad + xs * double(i)) << "\" cy=\""
         << num(kH - kPad - ys * (e.z[i] - lo)) << "\" r=\"2\" fill=\"" << color(s)
         << "\"/>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace repo::plot
