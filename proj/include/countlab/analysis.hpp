#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/error.hpp"
#include "countlab/rng.hpp"

namespace countlab {

struct EmbeddingLabel {
    int list_position = 0;
    int item_type = -1;
    int layer = 0;
    std::string role;
};

inline void to_json(nlohmann::json& j, const EmbeddingLabel& l) {
    j = {{"list_position", l.list_position}, {"item_type", l.item_type}, {"layer", l.layer}, {"role", l.role}};
}

struct EmbeddingSet {
    std::vector<std::vector<double>> vectors;
    std::vector<EmbeddingLabel> labels;

    std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }

    void add(std::vector<double> v, EmbeddingLabel label) {
        if (!vectors.empty() && v.size() != dim()) {
            throw InputError("embedding dimension mismatch: " + std::to_string(v.size()) + " vs " +
                             std::to_string(dim()));
        }
        vectors.push_back(std::move(v));
        labels.push_back(std::move(label));
    }
};

// ----------------------------------------------------------------- PCA

struct PcaResult {
    std::vector<std::vector<double>> coords;     ///< n x k
    std::vector<std::vector<double>> components; ///< k x d, unit length
    std::vector<double> eigenvalues;
    std::vector<double> explained_ratio;
    std::vector<double> mean;
    int rank = 0;
    std::string warning;
};

inline void to_json(nlohmann::json& j, const PcaResult& r) {
    j = {{"coords", r.coords},       {"eigenvalues", r.eigenvalues}, {"explained_ratio", r.explained_ratio},
         {"rank", r.rank},           {"warning", r.warning}};
}

struct PcaOptions {
    double tolerance = 1e-10;
    int max_iterations = 10000;
    std::uint64_t seed = 7;
};

namespace detail {

using Dense = std::vector<std::vector<double>>;

inline std::vector<double> mat_vec(const Dense& a, const std::vector<double>& v) {
    std::vector<double> out(a.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < v.size(); ++j) {
            out[i] += a[i][j] * v[j];
        }
    }
    return out;
}

inline double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (const double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

/// Solves (a - shift I) x = b by Gaussian elimination with partial pivoting.
/// Returns false when the shifted matrix is numerically singular.
inline bool shifted_solve(const Dense& a, double shift, std::vector<double> b, std::vector<double>& x) {
    const std::size_t n = a.size();
    Dense m = a;
    for (std::size_t i = 0; i < n; ++i) {
        m[i][i] -= shift;
    }
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r) {
            if (std::abs(m[r][c]) > std::abs(m[piv][c])) {
                piv = r;
            }
        }
        if (std::abs(m[piv][c]) < 1e-300) {
            return false;
        }
        std::swap(m[c], m[piv]);
        std::swap(b[c], b[piv]);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = m[r][c] / m[c][c];
            for (std::size_t k = c; k < n; ++k) {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    x.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) {
            s -= m[i][k] * x[k];
        }
        x[i] = s / m[i][i];
    }
    return true;
}

/// Leading eigenpair of a symmetric PSD matrix: power iteration, then a few
/// Rayleigh-quotient refinements.
inline std::pair<double, std::vector<double>> leading_eigenpair(const Dense& a, const PcaOptions& opt, Rng& rng) {
    const std::size_t n = a.size();
    std::vector<double> v(n);
    for (double& x : v) {
        x = rng.normal();
    }
    double nv = norm2(v);
    for (double& x : v) {
        x /= nv;
    }
    double lambda = 0.0;
    for (int it = 0; it < opt.max_iterations; ++it) {
        auto w = mat_vec(a, v);
        const double nw = norm2(w);
        if (nw == 0.0) {
            return {0.0, v};
        }
        for (double& x : w) {
            x /= nw;
        }
        double diff = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diff = std::max(diff, std::abs(w[i] - v[i]));
        }
        v = std::move(w);
        lambda = nw;
        if (diff < opt.tolerance) {
            break;
        }
    }
    for (int it = 0; it < 3; ++it) {
        const auto av = mat_vec(a, v);
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mu += v[i] * av[i];
        }
        std::vector<double> y;
        if (!shifted_solve(a, mu, v, y) || !std::isfinite(norm2(y)) || norm2(y) == 0.0) {
            lambda = mu;
            break;
        }
        const double ny = norm2(y);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = y[i] / ny;
        }
        lambda = mu;
    }
    const auto av = mat_vec(a, v);
    lambda = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        lambda += v[i] * av[i];
    }
    return {lambda, v};
}

} // namespace detail

/// Centered PCA via power iteration with deflation on the covariance.
inline PcaResult pca_project(const EmbeddingSet& set, int k, const PcaOptions& opt = {}) {
    const std::size_t n = set.vectors.size();
    const std::size_t d = set.dim();
    if (k < 1 || static_cast<std::size_t>(k) > d) {
        throw InputError("k must be in 1..d_model");
    }
    if (n < static_cast<std::size_t>(k) + 1) {
        throw InputError("PCA needs at least k+1 vectors");
    }
    PcaResult out;
    out.mean.assign(d, 0.0);
    for (const auto& v : set.vectors) {
        for (std::size_t j = 0; j < d; ++j) {
            out.mean[j] += v[j];
        }
    }
    for (double& m : out.mean) {
        m /= static_cast<double>(n);
    }
    detail::Dense x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            x[i][j] = set.vectors[i][j] - out.mean[j];
        }
    }
    detail::Dense cov(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = a; b < d; ++b) {
                cov[a][b] += x[i][a] * x[i][b];
            }
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            cov[a][b] /= static_cast<double>(n);
            cov[b][a] = cov[a][b];
        }
        trace += cov[a][a];
    }

    Rng rng(opt.seed);
    detail::Dense work = cov;
    for (int c = 0; c < k; ++c) {
        auto [lambda, v] = detail::leading_eigenpair(work, opt, rng);
        // Re-orthogonalize against earlier components.
        for (const auto& u : out.components) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += u[j] * v[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                v[j] -= dot * u[j];
            }
        }
        const double nv = detail::norm2(v);
        if (nv > 0.0) {
            for (double& e : v) {
                e /= nv;
            }
        }
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) {
                work[a][b] -= lambda * v[a] * v[b];
            }
        }
        out.components.push_back(v);
        out.eigenvalues.push_back(std::max(lambda, 0.0));
    }
    // Order by eigenvalue, then fix signs: largest-magnitude coordinate positive.
    std::vector<std::size_t> order(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return out.eigenvalues[a] > out.eigenvalues[b]; });
    PcaResult sorted = out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        sorted.components[i] = out.components[order[i]];
        sorted.eigenvalues[i] = out.eigenvalues[order[i]];
    }
    out = std::move(sorted);
    for (auto& v : out.components) {
        std::size_t big = 0;
        for (std::size_t j = 1; j < d; ++j) {
            if (std::abs(v[j]) > std::abs(v[big])) {
                big = j;
            }
        }
        if (v[big] < 0.0) {
            for (double& e : v) {
                e = -e;
            }
        }
    }
    const double floor = 1e-12 * std::max(trace, 1e-300);
    out.rank = 0;
    for (const double l : out.eigenvalues) {
        out.explained_ratio.push_back(trace > 0.0 ? l / trace : 0.0);
        out.rank += l > floor ? 1 : 0;
    }
    if (out.rank < k) {
        out.warning = "reduced rank: " + std::to_string(out.rank) + " < k=" + std::to_string(k);
    }
    out.coords.assign(n, std::vector<double>(static_cast<std::size_t>(k), 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                s += x[i][j] * out.components[c][j];
            }
            out.coords[i][c] = s;
        }
    }
    return out;
}

// ----------------------------------------------------------------- cosine

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw InputError("cosine of vectors with different dimensions");
    }
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        throw UndefinedMetricError("cosine similarity with a zero vector");
    }
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

using CosineMatrix = std::vector<std::vector<double>>;

inline CosineMatrix cosine_similarity_matrix(const EmbeddingSet& a, const EmbeddingSet& b) {
    CosineMatrix m(a.vectors.size(), std::vector<double>(b.vectors.size()));
    for (std::size_t i = 0; i < a.vectors.size(); ++i) {
        for (std::size_t j = 0; j < b.vectors.size(); ++j) {
            try {
                m[i][j] = cosine(a.vectors[i], b.vectors[j]);
            } catch (const UndefinedMetricError&) {
                throw UndefinedMetricError("zero vector at entry (" + std::to_string(i) + ", " + std::to_string(j) +
                                           ")");
            }
        }
    }
    return m;
}

/// Arithmetic mean of the cosine matrices over every (type in a, type in b) pair.
inline CosineMatrix averaged_cosine_matrix(const std::vector<EmbeddingSet>& a_by_type,
                                           const std::vector<EmbeddingSet>& b_by_type) {
    if (a_by_type.empty() || b_by_type.empty()) {
        throw InputError("no item types to average over");
    }
    CosineMatrix acc;
    int pairs = 0;
    for (const auto& a : a_by_type) {
        for (const auto& b : b_by_type) {
            const auto m = cosine_similarity_matrix(a, b);
            if (acc.empty()) {
                acc.assign(m.size(), std::vector<double>(m.empty() ? 0 : m[0].size(), 0.0));
            }
            if (m.size() != acc.size() || (!m.empty() && m[0].size() != acc[0].size())) {
                throw InputError("per-type sets must have equal sizes");
            }
            for (std::size_t i = 0; i < m.size(); ++i) {
                for (std::size_t j = 0; j < m[i].size(); ++j) {
                    acc[i][j] += m[i][j];
                }
            }
            ++pairs;
        }
    }
    for (auto& row : acc) {
        for (double& x : row) {
            x /= pairs;
        }
    }
    return acc;
}

// ----------------------------------------------------------------- sweeps & output

struct LayerArtifact {
    int layer = 0;
    nlohmann::json data;
};

/// Applies `analysis(layer)` at every listed layer, in order.
inline std::vector<LayerArtifact> layerwise_sweep(const std::function<nlohmann::json(int)>& analysis,
                                                  const std::vector<int>& layers) {
    std::vector<LayerArtifact> out;
    out.reserve(layers.size());
    for (const int l : layers) {
        out.push_back({l, analysis(l)});
    }
    return out;
}

inline void write_matrix_csv(std::ostream& out, const CosineMatrix& m, const std::vector<std::string>& row_labels,
                             const std::vector<std::string>& col_labels) {
    out << "row";
    for (const auto& c : col_labels) {
        out << ',' << c;
    }
    out << '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
        out << (i < row_labels.size() ? row_labels[i] : std::to_string(i));
        for (const double x : m[i]) {
            out << ',' << x;
        }
        out << '\n';
    }
}

namespace detail {

/// Fixed categorical palette for classes 1..9.
inline const char* class_color(int c) {
    static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                     "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return kPalette[static_cast<std::size_t>(std::clamp(c, 0, 9))];
}

} // namespace detail

/// 2-D scatter of the first two coordinates, colored by class (e.g. count 1..9).
inline std::string scatter_svg(const std::vector<std::vector<double>>& coords, const std::vector<int>& classes,
                               const std::string& title) {
    const double w = 480, h = 400, pad = 40;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (!coords.empty()) {
        x0 = x1 = coords[0][0];
        y0 = y1 = coords[0].size() > 1 ? coords[0][1] : 0.0;
        for (const auto& c : coords) {
            x0 = std::min(x0, c[0]);
            x1 = std::max(x1, c[0]);
            const double y = c.size() > 1 ? c[1] : 0.0;
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    const double sx = (x1 > x0) ? (w - 2 * pad) / (x1 - x0) : 1.0;
    const double sy = (y1 > y0) ? (h - 2 * pad) / (y1 - y0) : 1.0;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    s << "<text x=\"" << pad << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double y = coords[i].size() > 1 ? coords[i][1] : 0.0;
        const int cls = i < classes.size() ? classes[i] : 0;
        s << "<circle cx=\"" << pad + (coords[i][0] - x0) * sx << "\" cy=\"" << h - pad - (y - y0) * sy
          << "\" r=\"4\" fill=\"" << detail::class_color(cls) << "\"><title>" << cls << "</title></circle>\n";
    }
    for (int c = 1; c <= 9; ++c) {
        s << "<rect x=\"" << w - 30 << "\" y=\"" << 20 + c * 16 << "\" width=\"10\" height=\"10\" fill=\""
          << detail::class_color(c) << "\"/><text x=\"" << w - 16 << "\" y=\"" << 29 + c * 16
          << "\" font-family=\"sans-serif\" font-size=\"10\">" << c << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// Grayscale heatmap of a matrix with values in [lo, hi].
inline std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::vector<std::string>& row_labels,
                               const std::vector<std::string>& col_labels, const std::string& title, double lo = 0.0,
                               double hi = 1.0) {
    const double cell = 28, left = 70, top = 40;
    const std::size_t rows = m.size();
    const std::size_t cols = rows == 0 ? 0 : m[0].size();
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + cell * cols + 20 << "\" height=\""
      << top + cell * rows + 20 << "\">\n";
    s << "<text x=\"4\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
    for (std::size_t j = 0; j < cols; ++j) {
        s << "<text x=\"" << left + cell * j + 8 << "\" y=\"" << top - 4
          << "\" font-family=\"sans-serif\" font-size=\"10\">" << (j < col_labels.size() ? col_labels[j] : "")
          << "</text>\n";
    }
    for (std::size_t i = 0; i < rows; ++i) {
        s << "<text x=\"4\" y=\"" << top + cell * i + 18 << "\" font-family=\"sans-serif\" font-size=\"10\">"
          << (i < row_labels.size() ? row_labels[i] : "") << "</text>\n";
        for (std::size_t j = 0; j < cols; ++j) {
            const double t = hi > lo ? std::clamp((m[i][j] - lo) / (hi - lo), 0.0, 1.0) : 0.0;
            const int g = static_cast<int>(std::lround(255 * (1.0 - t)));
            s << "<rect x=\"" << left + cell * j << "\" y=\"" << top + cell * i << "\" width=\"" << cell
              << "\" height=\"" << cell << "\" fill=\"rgb(" << g << ',' << g << ",255)\"><title>" << m[i][j]
              << "</title></rect>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

} // namespace countlab
