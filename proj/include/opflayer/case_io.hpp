#pragma once

// MATPOWER case ingestion, load-profile datasets, reference optima and the
// metrics CSV format.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "opflayer/errors.hpp"

namespace opflayer {

struct BusRecord {
    int id = 0;
    int type = 1;  // 1 = PQ, 2 = PV, 3 = reference, 4 = isolated
    double pd = 0.0, qd = 0.0;  // MW, MVAr
    double gs = 0.0, bs = 0.0;  // MW, MVAr at V = 1 p.u.
    double vm = 1.0, va_deg = 0.0;
    double vmax = 1.1, vmin = 0.9;
};

struct GenRecord {
    int bus = 0;
    double pg = 0.0, qg = 0.0;  // MW, MVAr
    double qmax = 0.0, qmin = 0.0;
    double vg = 1.0;
    double pmax = 0.0, pmin = 0.0;
    bool in_service = true;
};

struct BranchRecord {
    int from = 0, to = 0;
    double r = 0.0, x = 0.0, b = 0.0;  // p.u.
    double rate_a = 0.0;                // MVA, 0 = unlimited
    double tap = 0.0;                   // 0 means nominal (1.0)
    double shift_deg = 0.0;
    double angmin_deg = -360.0, angmax_deg = 360.0;
    bool in_service = true;
};

struct CostRecord {
    int model = 2;
    std::vector<double> coeffs;  // highest degree first
};

/// Faithful image of a MATPOWER case file. Out-of-service rows are kept and
/// flagged; they are dropped when the grid model is built.
struct RawCase {
    double base_mva = 100.0;
    std::vector<BusRecord> buses;
    std::vector<GenRecord> gens;
    std::vector<BranchRecord> branches;
    std::vector<CostRecord> gencosts;

    [[nodiscard]] double total_pd_mw() const;
    [[nodiscard]] double total_qd_mvar() const;
};

RawCase parse_matpower(std::istream& in);
RawCase parse_matpower(std::string_view text);
RawCase load_matpower_file(const std::filesystem::path& path);

/// Uniformly perturbed demand profiles. Each sample is the load vector
/// d = [P^d; Q^d] in p.u. ordered like RawCase::buses.
struct LoadDataset {
    std::vector<Eigen::VectorXd> samples;
    std::uint64_t seed = 0;
    double low = 1.0, high = 1.0;
    std::vector<std::size_t> train, test;

    [[nodiscard]] std::size_t size() const { return samples.size(); }
};

LoadDataset generate_dataset(const RawCase& rc, double low, double high, std::size_t count,
                             double split_fraction, std::uint64_t seed);

/// Nominal d vector of the case in p.u.
Eigen::VectorXd nominal_load(const RawCase& rc);

void write_dataset_csv(const LoadDataset& ds, const RawCase& rc, const std::filesystem::path& path);
LoadDataset read_dataset_csv(const std::filesystem::path& path);

struct ReferenceEntry {
    double cost = 0.0;
    std::vector<double> solution;
};

/// Externally computed optima keyed by dataset sample index.
struct ReferenceSet {
    std::map<std::size_t, ReferenceEntry> entries;

    [[nodiscard]] bool contains(std::size_t index) const { return entries.count(index) != 0; }
    [[nodiscard]] double cost(std::size_t index) const { return entries.at(index).cost; }
    [[nodiscard]] std::size_t size() const { return entries.size(); }
};

ReferenceSet load_reference_solutions(const std::filesystem::path& path);
ReferenceSet parse_reference_solutions(std::istream& in);
/// Throws StructuralError if the set names an index outside the dataset.
void validate_references(const ReferenceSet& refs, const LoadDataset& ds);

/// One row of the Table-2-style metric report.
struct MetricsRecord {
    int epoch = 0;
    double eq_mean_mismatch = 0.0;
    double eq_max_mismatch = 0.0;
    double eq_viol_num = 0.0;
    double ineq_mean_mismatch = 0.0;
    double ineq_max_mismatch = 0.0;
    double ineq_viol_num = 0.0;
    double objective_cost = 0.0;
    double objective_gap_pct = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "epoch,eq_mean_mismatch,eq_max_mismatch,eq_viol_num,ineq_mean_mismatch,"
    "ineq_max_mismatch,ineq_viol_num,objective_cost,objective_gap_pct";

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace opflayer
