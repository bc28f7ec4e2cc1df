#pragma once

#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "viser/evaluation.hpp"

namespace viser {

struct PerAttackStats {
    double mean_auroc = 0.0;
    double mean_apcer = 0.0;
    int n_runs = 0;
    // run spread kept for diagnostics; reports print point estimates only
    double min_auroc = 0.0, max_auroc = 0.0;
    double min_apcer = 0.0, max_apcer = 0.0;
};

struct MethodReport {
    std::string method;
    std::map<AttackType, PerAttackStats> per_attack;
    double avg_auroc = 0.0;  // unweighted over attack types
    double avg_apcer = 0.0;
    bool partial = false;    // some attack type has no runs
};

// Per-attack means over seeds, then an unweighted average across the attack
// types; runs are never pooled across attacks.
inline MethodReport aggregate_runs(const std::vector<RunResult>& runs) {
    if (runs.empty()) throw std::invalid_argument("aggregate_runs: no runs");
    MethodReport report;
    report.method = runs.front().method;
    for (const auto& run : runs) {
        if (run.method != report.method)
            throw std::invalid_argument("aggregate_runs: mixed methods (got '" + run.method +
                                        "' and '" + report.method + "')");
        auto& cell = report.per_attack[run.held_out_attack];
        if (cell.n_runs == 0) {
            cell.min_auroc = cell.max_auroc = run.auroc_value;
            cell.min_apcer = cell.max_apcer = run.apcer_at_bpcer1;
        }
        cell.mean_auroc += run.auroc_value;
        cell.mean_apcer += run.apcer_at_bpcer1;
        cell.min_auroc = std::min(cell.min_auroc, run.auroc_value);
        cell.max_auroc = std::max(cell.max_auroc, run.auroc_value);
        cell.min_apcer = std::min(cell.min_apcer, run.apcer_at_bpcer1);
        cell.max_apcer = std::max(cell.max_apcer, run.apcer_at_bpcer1);
        cell.n_runs += 1;
    }
    for (auto& [attack, cell] : report.per_attack) {
        cell.mean_auroc /= cell.n_runs;
        cell.mean_apcer /= cell.n_runs;
        report.avg_auroc += cell.mean_auroc;
        report.avg_apcer += cell.mean_apcer;
    }
    report.avg_auroc /= static_cast<double>(report.per_attack.size());
    report.avg_apcer /= static_cast<double>(report.per_attack.size());
    report.partial = report.per_attack.size() < kAttackTags.size();
    return report;
}

struct DeltaRow {
    std::string method;
    std::map<AttackType, double> auroc_delta;
    std::map<AttackType, double> apcer_delta;
    std::map<AttackType, int> n_runs;
    double avg_auroc_delta = 0.0;
    double avg_apcer_delta = 0.0;
    bool partial = false;
};

struct DeltaReport {
    std::string baseline_method;
    MethodReport baseline;
    std::vector<DeltaRow> rows;
};

// Element-wise differences against the named baseline. AUROC deltas improve
// upward, APCER deltas downward.
inline DeltaReport delta_table(const MethodReport& baseline,
                               const std::vector<MethodReport>& methods) {
    DeltaReport report;
    report.baseline_method = baseline.method;
    report.baseline = baseline;
    for (const auto& method : methods) {
        if (method.per_attack.size() != baseline.per_attack.size())
            throw std::invalid_argument("delta_table: attack coverage mismatch for '" +
                                        method.method + "'");
        DeltaRow row;
        row.method = method.method;
        row.partial = method.partial || baseline.partial;
        for (const auto& [attack, base_cell] : baseline.per_attack) {
            auto it = method.per_attack.find(attack);
            if (it == method.per_attack.end())
                throw std::invalid_argument("delta_table: '" + method.method + "' missing " +
                                            to_string(attack));
            row.auroc_delta[attack] = it->second.mean_auroc - base_cell.mean_auroc;
            row.apcer_delta[attack] = it->second.mean_apcer - base_cell.mean_apcer;
            row.n_runs[attack] = it->second.n_runs;
            row.avg_auroc_delta += row.auroc_delta[attack];
            row.avg_apcer_delta += row.apcer_delta[attack];
        }
        row.avg_auroc_delta /= static_cast<double>(baseline.per_attack.size());
        row.avg_apcer_delta /= static_cast<double>(baseline.per_attack.size());
        report.rows.push_back(std::move(row));
    }
    return report;
}

enum class ReportFormat { markdown, csv };

namespace reporting_detail {

inline std::string fixed4(double v) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    if (v >= 0.0) out << '+';
    out << v;
    return out.str();
}

inline std::string plain4(double v) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4) << v;
    return out.str();
}

// column winners; ties keep every index
inline std::vector<std::set<size_t>> best_per_column(
    const std::vector<std::vector<double>>& cells, bool higher_is_better) {
    if (cells.empty()) return {};
    const size_t n_cols = cells.front().size();
    std::vector<std::set<size_t>> best(n_cols);
    for (size_t col = 0; col < n_cols; ++col) {
        double best_value = cells[0][col];
        for (const auto& row : cells)
            best_value = higher_is_better ? std::max(best_value, row[col])
                                          : std::min(best_value, row[col]);
        for (size_t r = 0; r < cells.size(); ++r)
            if (cells[r][col] == best_value) best[col].insert(r);
    }
    return best;
}

inline void render_markdown_metric(std::ostringstream& out, const DeltaReport& report,
                                   bool auroc_metric, bool& any_tie) {
    const std::vector<AttackType> attacks(kAttackTags.begin(), kAttackTags.end());
    out << (auroc_metric ? "## AUROC (higher is better)\n\n"
                         : "## APCER @ BPCER=1% (lower is better)\n\n");
    out << "| Method |";
    for (AttackType a : attacks) out << ' ' << to_string(a) << " |";
    out << " Avg |\n|---|";
    for (size_t i = 0; i <= attacks.size(); ++i) out << "---|";
    out << '\n';

    out << "| " << report.baseline_method << " (baseline) |";
    for (AttackType a : attacks) {
        const auto it = report.baseline.per_attack.find(a);
        if (it == report.baseline.per_attack.end())
            out << " n/a |";
        else
            out << " *" << plain4(auroc_metric ? it->second.mean_auroc : it->second.mean_apcer)
                << "* |";
    }
    out << " *" << plain4(auroc_metric ? report.baseline.avg_auroc : report.baseline.avg_apcer)
        << "* |\n";

    std::vector<std::vector<double>> cells;
    for (const auto& row : report.rows) {
        std::vector<double> values;
        for (AttackType a : attacks)
            values.push_back(auroc_metric ? row.auroc_delta.at(a) : row.apcer_delta.at(a));
        values.push_back(auroc_metric ? row.avg_auroc_delta : row.avg_apcer_delta);
        cells.push_back(std::move(values));
    }
    const auto best = best_per_column(cells, auroc_metric);
    for (size_t col = 0; col < best.size(); ++col)
        if (best[col].size() > 1) any_tie = true;
    for (size_t r = 0; r < report.rows.size(); ++r) {
        out << "| " << report.rows[r].method << " |";
        for (size_t col = 0; col < cells[r].size(); ++col) {
            const bool bold = best[col].count(r) > 0;
            out << ' ' << (bold ? "**" : "") << fixed4(cells[r][col]) << (bold ? "**" : "");
            if (report.rows[r].partial) out << " (partial)";
            out << " |";
        }
        out << '\n';
    }
    out << '\n';
}

}  // namespace reporting_detail

// Markdown mirrors the two-table layout with per-column best values bolded;
// CSV is the flat schema method,attack_type,metric,mean,delta,n_runs.
inline std::string render_report(const DeltaReport& report, ReportFormat format) {
    using namespace reporting_detail;
    std::ostringstream out;
    if (format == ReportFormat::markdown) {
        bool any_tie = false;
        render_markdown_metric(out, report, true, any_tie);
        render_markdown_metric(out, report, false, any_tie);
        if (any_tie) out << "Ties share the bold marker.\n";
        return out.str();
    }
    out << "method,attack_type,metric,mean,delta,n_runs\n";
    auto emit = [&](const std::string& method, AttackType attack, const char* metric,
                    double mean, double delta, int n_runs) {
        out << method << ',' << to_string(attack) << ',' << metric << ',' << plain4(mean) << ','
            << plain4(delta) << ',' << n_runs << '\n';
    };
    for (const auto& [attack, cell] : report.baseline.per_attack) {
        emit(report.baseline_method, attack, "auroc", cell.mean_auroc, 0.0, cell.n_runs);
        emit(report.baseline_method, attack, "apcer_at_bpcer1", cell.mean_apcer, 0.0,
             cell.n_runs);
    }
    for (const auto& row : report.rows) {
        for (const auto& [attack, delta] : row.auroc_delta) {
            const double mean = report.baseline.per_attack.at(attack).mean_auroc + delta;
            emit(row.method, attack, "auroc", mean, delta, row.n_runs.at(attack));
        }
        for (const auto& [attack, delta] : row.apcer_delta) {
            const double mean = report.baseline.per_attack.at(attack).mean_apcer + delta;
            emit(row.method, attack, "apcer_at_bpcer1", mean, delta, row.n_runs.at(attack));
        }
    }
    return out.str();
}

}  // namespace viser
