#pragma once

#include <cstdio>
#include <string>
#include <vector>

namespace epimerge {

// 17 significant digits: round-trips any double exactly, so emitted text is
// deterministic and lossless.
inline std::string to_g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string join_g17(const std::vector<double> & xs, char sep = ',') {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (i) out += sep;
        out += to_g17(xs[i]);
    }
    return out;
}

} // namespace epimerge
