#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "countlab/analysis.hpp"
#include "countlab/error.hpp"
#include "countlab/metrics.hpp"

namespace countlab {

inline constexpr const char* kToolVersion = "0.1.0";

/// One raw measurement. `labels` place it in aggregation cells; `data` keeps
/// the inputs it was computed from.
struct ReportRecord {
    nlohmann::json labels = nlohmann::json::object();
    double value = 0.0;
    bool excluded = false;
    nlohmann::json data = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const ReportRecord& r) {
    j = {{"labels", r.labels}, {"excluded", r.excluded}, {"data", r.data}};
    j["value"] = r.excluded ? nlohmann::json(nullptr) : nlohmann::json(r.value);
}

/// Mean +- sd over the records sharing the values of `by`.
struct ReportCell {
    std::vector<std::string> by;
    nlohmann::json labels;
    Aggregate aggregate;
    bool empty = false;
};

inline void to_json(nlohmann::json& j, const ReportCell& c) {
    j = {{"by", c.by}, {"labels", c.labels}, {"n", c.aggregate.n}, {"excluded", c.aggregate.excluded}};
    if (c.empty) {
        j["mean"] = nullptr;
        j["sd"] = nullptr;
    } else {
        j["mean"] = c.aggregate.mean;
        j["sd"] = c.aggregate.sd;
    }
}

struct MatrixArtifact {
    std::string name;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::vector<std::vector<double>> values;
    std::string normalization = "none";
    double lo = 0.0, hi = 1.0;
};

inline void to_json(nlohmann::json& j, const MatrixArtifact& m) {
    j = {{"name", m.name},     {"rows", m.row_labels},           {"cols", m.col_labels},
         {"values", m.values}, {"normalization", m.normalization}};
}

struct ExperimentReport {
    std::string name;
    std::string schema;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metadata = nlohmann::json::object();
    nlohmann::json tables = nlohmann::json::object();
    nlohmann::json reference = nlohmann::json::object();
    std::vector<std::string> warnings;
    std::vector<ReportRecord> records;
    std::vector<std::vector<std::string>> groupings;
    std::vector<ReportCell> cells;
    std::vector<MatrixArtifact> matrices;
    std::vector<std::pair<std::string, std::string>> svgs; ///< (file name, content)

    void add(nlohmann::json labels, double value, nlohmann::json data = nlohmann::json::object(),
             bool excluded = false) {
        records.push_back({std::move(labels), value, excluded, std::move(data)});
    }

    /// Aggregates every grouping from the raw records. Cells keep the order in
    /// which their label combination first appears.
    void finalize() {
        cells = aggregate_cells(records, groupings);
    }

    static std::vector<ReportCell> aggregate_cells(const std::vector<ReportRecord>& records,
                                                   const std::vector<std::vector<std::string>>& groupings) {
        std::vector<ReportCell> out;
        for (const auto& by : groupings) {
            std::vector<std::string> order;
            std::map<std::string, std::pair<nlohmann::json, std::vector<double>>> groups;
            std::map<std::string, int> excluded;
            for (const auto& r : records) {
                nlohmann::json key = nlohmann::json::object();
                bool has_all = true;
                for (const auto& b : by) {
                    if (!r.labels.contains(b)) {
                        has_all = false;
                        break;
                    }
                    key[b] = r.labels.at(b);
                }
                if (!has_all) {
                    continue;
                }
                const std::string k = key.dump();
                if (!groups.contains(k)) {
                    order.push_back(k);
                    groups[k].first = key;
                }
                if (r.excluded) {
                    ++excluded[k];
                } else {
                    groups[k].second.push_back(r.value);
                }
            }
            for (const auto& k : order) {
                ReportCell c;
                c.by = by;
                c.labels = groups[k].first;
                const auto& values = groups[k].second;
                if (values.empty()) {
                    c.empty = true;
                    c.aggregate.excluded = excluded[k];
                } else {
                    c.aggregate = aggregate(std::span<const double>(values), excluded[k]);
                }
                out.push_back(std::move(c));
            }
        }
        return out;
    }

    /// Recomputes every aggregate from the records; true when all match.
    bool audit() const {
        const auto again = aggregate_cells(records, groupings);
        if (again.size() != cells.size()) {
            return false;
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (nlohmann::json(again[i]) != nlohmann::json(cells[i])) {
                return false;
            }
        }
        return true;
    }

    /// First cell of grouping `by` whose labels contain `match`.
    const ReportCell* find(const std::vector<std::string>& by, const nlohmann::json& match) const {
        for (const auto& c : cells) {
            if (c.by != by) {
                continue;
            }
            bool ok = true;
            for (const auto& [k, v] : match.items()) {
                if (!c.labels.contains(k) || c.labels.at(k) != v) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                return &c;
            }
        }
        return nullptr;
    }

    /// Everything that must be reproducible: no timestamps.
    nlohmann::json aggregates_json() const {
        return {{"name", name},   {"schema", schema},       {"cells", cells},     {"tables", tables},
                {"matrices", matrices}, {"warnings", warnings}, {"config", config}};
    }

    nlohmann::json to_json() const {
        nlohmann::json j = aggregates_json();
        j["metadata"] = metadata;
        j["reference"] = reference;
        j["records"] = records.size();
        return j;
    }

    /// report.json, records.jsonl, one CSV (+ SVG) per matrix, extra SVGs.
    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        {
            std::ofstream out(dir / "report.json");
            out << to_json().dump(2) << '\n';
        }
        {
            std::ofstream out(dir / "records.jsonl");
            for (const auto& r : records) {
                out << nlohmann::json(r).dump() << '\n';
            }
        }
        for (const auto& m : matrices) {
            std::ofstream out(dir / (m.name + ".csv"));
            out << "# normalization: " << m.normalization << '\n';
            write_matrix_csv(out, m.values, m.row_labels, m.col_labels);
            std::ofstream svg(dir / (m.name + ".svg"));
            svg << heatmap_svg(m.values, m.row_labels, m.col_labels, name + " " + m.name, m.lo, m.hi);
        }
        for (const auto& [file, content] : svgs) {
            std::ofstream out(dir / file);
            out << content;
        }
    }
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace countlab
