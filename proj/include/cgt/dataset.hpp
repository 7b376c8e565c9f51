#pragma once

// Plain-text dataset ingestion: edges.tsv (two node ids per line),
// features.tsv (one row of floats per node), labels.tsv (one class id per
// line, optional). Edges are symmetrized, deduplicated, and stripped of
// self-loops, with a parse report of what was dropped.

#include <cgt/graph.hpp>

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cgt {

struct DatasetBundle {
    std::string name;
    std::string edges_path;
    std::string features_path;
    std::string labels_path;  // empty = unlabeled
};

struct ParseReport {
    std::size_t nodes = 0;
    std::size_t edges_kept = 0;
    std::size_t duplicates_dropped = 0;
    std::size_t self_loops_dropped = 0;
};

namespace detail {

inline bool blank(const std::string& s) {
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    return true;
}

}  // namespace detail

inline Graph load_dataset(const DatasetBundle& bundle, ParseReport* report = nullptr) {
    // features first: the row count defines n
    std::ifstream ff(bundle.features_path);
    if (!ff) throw std::runtime_error("load_dataset: cannot open features file " + bundle.features_path);
    std::vector<double> x;
    std::size_t n = 0, d0 = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ff, line)) {
        ++lineno;
        if (detail::blank(line)) continue;
        std::istringstream is(line);
        std::vector<double> row;
        double v;
        while (is >> v) row.push_back(v);
        if (!is.eof())
            throw std::runtime_error(bundle.features_path + ":" + std::to_string(lineno) +
                                     ": malformed feature value");
        if (d0 == 0)
            d0 = row.size();
        else if (row.size() != d0)
            throw std::runtime_error(bundle.features_path + ":" + std::to_string(lineno) + ": row has " +
                                     std::to_string(row.size()) + " values, expected " + std::to_string(d0));
        x.insert(x.end(), row.begin(), row.end());
        ++n;
    }
    if (n == 0) throw std::runtime_error("load_dataset: features file " + bundle.features_path + " is empty");

    std::ifstream ef(bundle.edges_path);
    if (!ef) throw std::runtime_error("load_dataset: cannot open edges file " + bundle.edges_path);
    std::vector<std::pair<int, int>> edges;
    std::size_t self_loops = 0;
    lineno = 0;
    while (std::getline(ef, line)) {
        ++lineno;
        if (detail::blank(line)) continue;
        std::istringstream is(line);
        long long u, v;
        if (!(is >> u >> v))
            throw std::runtime_error(bundle.edges_path + ":" + std::to_string(lineno) + ": malformed edge line");
        if (u < 0 || v < 0 || u >= static_cast<long long>(n) || v >= static_cast<long long>(n))
            throw std::runtime_error(bundle.edges_path + ":" + std::to_string(lineno) +
                                     ": edge endpoint out of range (n=" + std::to_string(n) + ")");
        if (u == v) {
            ++self_loops;
            continue;
        }
        if (u > v) std::swap(u, v);
        edges.emplace_back(static_cast<int>(u), static_cast<int>(v));
    }
    std::sort(edges.begin(), edges.end());
    const std::size_t before = edges.size();
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    const std::size_t duplicates = before - edges.size();

    std::optional<std::vector<int>> labels;
    if (!bundle.labels_path.empty()) {
        std::ifstream lf(bundle.labels_path);
        if (!lf) throw std::runtime_error("load_dataset: cannot open labels file " + bundle.labels_path);
        std::vector<int> y;
        lineno = 0;
        while (std::getline(lf, line)) {
            ++lineno;
            if (detail::blank(line)) continue;
            std::istringstream is(line);
            long long c;
            if (!(is >> c) || c < 0)
                throw std::runtime_error(bundle.labels_path + ":" + std::to_string(lineno) +
                                         ": malformed class label");
            y.push_back(static_cast<int>(c));
        }
        if (y.size() != n)
            throw std::runtime_error("load_dataset: " + std::to_string(y.size()) + " labels for " +
                                     std::to_string(n) + " feature rows");
        labels = std::move(y);
    }

    if (report) {
        report->nodes = n;
        report->edges_kept = edges.size();
        report->duplicates_dropped = duplicates;
        report->self_loops_dropped = self_loops;
    }
    return Graph(n, std::move(edges), std::move(x), d0, std::move(labels));
}

}  // namespace cgt
