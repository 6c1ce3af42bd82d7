#include "opflayer/case_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace opflayer {

namespace {

struct MatrixBlock {
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> lines;  // source line of each row
};

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string_view strip_comment(std::string_view s) {
    auto pos = s.find('%');
    return pos == std::string_view::npos ? s : s.substr(0, pos);
}

std::optional<double> to_double(std::string_view tok) {
    std::string buf(tok);
    char* end = nullptr;
    double v = std::strtod(buf.c_str(), &end);
    if (end == buf.c_str() || *end != '\0') return std::nullopt;
    return v;
}

std::vector<double> parse_row(std::string_view row, std::size_t line) {
    std::vector<double> out;
    std::size_t i = 0;
    while (i < row.size()) {
        while (i < row.size() && (std::isspace(static_cast<unsigned char>(row[i])) || row[i] == ',')) ++i;
        std::size_t j = i;
        while (j < row.size() && !std::isspace(static_cast<unsigned char>(row[j])) && row[j] != ',') ++j;
        if (j > i) {
            auto v = to_double(row.substr(i, j - i));
            if (!v) throw ParseError(line, "non-numeric matrix entry '" + std::string(row.substr(i, j - i)) + "'");
            out.push_back(*v);
        }
        i = j;
    }
    return out;
}

void require_columns(const MatrixBlock& m, std::size_t min_cols, const char* name, bool uniform) {
    if (m.rows.empty()) return;
    const std::size_t first = m.rows.front().size();
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
        const auto cols = m.rows[r].size();
        if (cols < min_cols)
            throw ParseError(m.lines[r], std::string("mpc.") + name + " row has " + std::to_string(cols) +
                                             " columns, expected at least " + std::to_string(min_cols));
        if (uniform && cols != first)
            throw ParseError(m.lines[r], std::string("mpc.") + name + " row has " + std::to_string(cols) +
                                             " columns, previous rows have " + std::to_string(first));
    }
}

void check_invariants(const RawCase& rc) {
    if (!(rc.base_mva > 0.0)) throw StructuralError("baseMVA must be positive");
    if (rc.buses.empty()) throw StructuralError("case has no buses");
    std::set<int> ids;
    int slack_count = 0;
    for (const auto& b : rc.buses) {
        if (!ids.insert(b.id).second) throw StructuralError("duplicate bus id " + std::to_string(b.id));
        if (b.type == 3) ++slack_count;
        if (b.vmin > b.vmax) throw StructuralError("bus " + std::to_string(b.id) + " has Vmin > Vmax");
    }
    if (slack_count != 1)
        throw StructuralError("expected exactly one reference bus, found " + std::to_string(slack_count));
    for (const auto& br : rc.branches) {
        if (!ids.count(br.from) || !ids.count(br.to))
            throw StructuralError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                                  " references an unknown bus");
    }
    for (const auto& g : rc.gens) {
        if (!ids.count(g.bus)) throw StructuralError("generator at unknown bus " + std::to_string(g.bus));
        if (g.pmin > g.pmax) throw StructuralError("generator at bus " + std::to_string(g.bus) + " has Pmin > Pmax");
    }
    if (rc.gencosts.size() < rc.gens.size())
        throw StructuralError("mpc.gencost has fewer rows than mpc.gen");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17e", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.emplace_back(trim(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.emplace_back(trim(cur));
    return out;
}

}  // namespace

double RawCase::total_pd_mw() const {
    return std::accumulate(buses.begin(), buses.end(), 0.0, [](double s, const BusRecord& b) { return s + b.pd; });
}

double RawCase::total_qd_mvar() const {
    return std::accumulate(buses.begin(), buses.end(), 0.0, [](double s, const BusRecord& b) { return s + b.qd; });
}

RawCase parse_matpower(std::istream& in) {
    std::optional<double> base_mva;
    std::map<std::string, MatrixBlock> blocks;

    std::string line;
    std::size_t lineno = 0;
    std::string current;  // matrix being read, empty when outside one
    bool in_cell = false;

    while (std::getline(in, line)) {
        ++lineno;
        std::string_view body = trim(strip_comment(line));
        if (body.empty()) continue;

        if (in_cell) {
            if (body.find('}') != std::string_view::npos) in_cell = false;
            continue;
        }

        if (current.empty()) {
            if (body.rfind("mpc.", 0) != 0) continue;
            auto eq = body.find('=');
            if (eq == std::string_view::npos) continue;
            std::string name(trim(body.substr(4, eq - 4)));
            std::string_view rhs = trim(body.substr(eq + 1));
            if (!rhs.empty() && rhs.front() == '{') {
                in_cell = rhs.find('}') == std::string_view::npos;
                continue;
            }
            if (!rhs.empty() && rhs.front() == '[') {
                current = name;
                blocks[current];  // present even when empty
                body = rhs.substr(1);
            } else {
                if (name == "baseMVA") {
                    std::string_view v = rhs;
                    if (!v.empty() && v.back() == ';') v.remove_suffix(1);
                    auto d = to_double(trim(v));
                    if (!d) throw ParseError(lineno, "baseMVA is not numeric");
                    base_mva = *d;
                }
                continue;
            }
        }

        // Inside a matrix: rows are ';'-terminated, the block closes at ']'.
        bool closes = false;
        auto close = body.find(']');
        if (close != std::string_view::npos) {
            closes = true;
            body = body.substr(0, close);
        }
        std::size_t start = 0;
        while (start <= body.size()) {
            auto semi = body.find(';', start);
            std::string_view piece =
                trim(body.substr(start, semi == std::string_view::npos ? std::string_view::npos : semi - start));
            if (!piece.empty()) {
                auto& blk = blocks[current];
                blk.rows.push_back(parse_row(piece, lineno));
                blk.lines.push_back(lineno);
            }
            if (semi == std::string_view::npos) break;
            start = semi + 1;
        }
        if (closes) current.clear();
    }
    if (!current.empty()) throw ParseError(lineno, "unterminated matrix mpc." + current);

    if (!base_mva) throw StructuralError("missing required field mpc.baseMVA");
    for (const char* required : {"bus", "gen", "branch", "gencost"}) {
        if (!blocks.count(required)) throw StructuralError(std::string("missing required matrix mpc.") + required);
    }

    RawCase rc;
    rc.base_mva = *base_mva;

    const auto& bus = blocks["bus"];
    require_columns(bus, 13, "bus", true);
    for (const auto& r : bus.rows) {
        BusRecord b;
        b.id = static_cast<int>(r[0]);
        b.type = static_cast<int>(r[1]);
        b.pd = r[2];
        b.qd = r[3];
        b.gs = r[4];
        b.bs = r[5];
        b.vm = r[7];
        b.va_deg = r[8];
        b.vmax = r[11];
        b.vmin = r[12];
        rc.buses.push_back(b);
    }

    const auto& gen = blocks["gen"];
    require_columns(gen, 10, "gen", true);
    for (const auto& r : gen.rows) {
        GenRecord g;
        g.bus = static_cast<int>(r[0]);
        g.pg = r[1];
        g.qg = r[2];
        g.qmax = r[3];
        g.qmin = r[4];
        g.vg = r[5];
        g.in_service = r[7] > 0.0;
        g.pmax = r[8];
        g.pmin = r[9];
        rc.gens.push_back(g);
    }

    const auto& branch = blocks["branch"];
    require_columns(branch, 11, "branch", true);
    for (const auto& r : branch.rows) {
        BranchRecord br;
        br.from = static_cast<int>(r[0]);
        br.to = static_cast<int>(r[1]);
        br.r = r[2];
        br.x = r[3];
        br.b = r[4];
        br.rate_a = r[5];
        br.tap = r[8];
        br.shift_deg = r[9];
        br.in_service = r[10] > 0.0;
        if (r.size() >= 13) {
            br.angmin_deg = r[11];
            br.angmax_deg = r[12];
        }
        rc.branches.push_back(br);
    }

    const auto& cost = blocks["gencost"];
    require_columns(cost, 4, "gencost", false);
    for (std::size_t i = 0; i < cost.rows.size(); ++i) {
        const auto& r = cost.rows[i];
        CostRecord c;
        c.model = static_cast<int>(r[0]);
        const auto ncoef = static_cast<std::size_t>(r[3]);
        const std::size_t need = 4 + (c.model == 1 ? 2 * ncoef : ncoef);
        if (r.size() < need)
            throw ParseError(cost.lines[i], "mpc.gencost row declares " + std::to_string(ncoef) +
                                                " cost terms but has " + std::to_string(r.size()) + " columns");
        c.coeffs.assign(r.begin() + 4, r.begin() + static_cast<std::ptrdiff_t>(need));
        rc.gencosts.push_back(std::move(c));
    }

    check_invariants(rc);
    return rc;
}

RawCase parse_matpower(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse_matpower(in);
}

RawCase load_matpower_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open case file " + path.string());
    return parse_matpower(in);
}

Eigen::VectorXd nominal_load(const RawCase& rc) {
    const auto nb = static_cast<Eigen::Index>(rc.buses.size());
    Eigen::VectorXd d(2 * nb);
    for (Eigen::Index i = 0; i < nb; ++i) {
        d[i] = rc.buses[static_cast<std::size_t>(i)].pd / rc.base_mva;
        d[nb + i] = rc.buses[static_cast<std::size_t>(i)].qd / rc.base_mva;
    }
    return d;
}

LoadDataset generate_dataset(const RawCase& rc, double low, double high, std::size_t count, double split_fraction,
                             std::uint64_t seed) {
    if (!(low > 0.0) || !(low <= high)) throw std::invalid_argument("perturbation range must satisfy 0 < low <= high");
    if (count < 1) throw std::invalid_argument("dataset count must be at least 1");
    if (!(split_fraction >= 0.0 && split_fraction <= 1.0)) throw std::invalid_argument("split fraction outside [0, 1]");

    LoadDataset ds;
    ds.seed = seed;
    ds.low = low;
    ds.high = high;
    const Eigen::VectorXd nominal = nominal_load(rc);
    const auto nb = static_cast<Eigen::Index>(rc.buses.size());

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> factor(low, high);
    ds.samples.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Eigen::VectorXd d = nominal;
        for (Eigen::Index i = 0; i < 2 * nb; ++i) {
            // degenerate range skips the draw so [1,1] reproduces nominal exactly
            d[i] = low == high ? nominal[i] * low : nominal[i] * factor(rng);
        }
        ds.samples.push_back(std::move(d));
    }
    const auto n_train = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(count)));
    for (std::size_t s = 0; s < count; ++s) (s < n_train ? ds.train : ds.test).push_back(s);
    return ds;
}

void write_dataset_csv(const LoadDataset& ds, const RawCase& rc, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset file " + path.string());
    out << "# seed=" << ds.seed << ",low=" << format_double(ds.low) << ",high=" << format_double(ds.high)
        << ",base_mva=" << format_double(rc.base_mva) << "\n";
    out << "index,split";
    for (const auto& b : rc.buses) out << ",pd_" << b.id;
    for (const auto& b : rc.buses) out << ",qd_" << b.id;
    out << "\n";
    std::vector<char> is_train(ds.size(), 0);
    for (auto i : ds.train) is_train[i] = 1;
    for (std::size_t s = 0; s < ds.size(); ++s) {
        out << s << ',' << (is_train[s] ? "train" : "test");
        for (Eigen::Index k = 0; k < ds.samples[s].size(); ++k) out << ',' << format_double(ds.samples[s][k]);
        out << '\n';
    }
    if (!out) throw IoError("failed writing dataset file " + path.string());
}

LoadDataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    LoadDataset ds;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            for (const auto& kv : split_csv(line.substr(1))) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                const auto key = std::string(trim(kv.substr(0, eq)));
                const auto val = kv.substr(eq + 1);
                if (key == "seed") ds.seed = std::stoull(val);
                if (key == "low") ds.low = std::stod(val);
                if (key == "high") ds.high = std::stod(val);
            }
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        auto cells = split_csv(line);
        if (cells.size() < 3) throw ParseError(lineno, "dataset row too short");
        Eigen::VectorXd d(static_cast<Eigen::Index>(cells.size() - 2));
        for (std::size_t k = 2; k < cells.size(); ++k) {
            auto v = to_double(cells[k]);
            if (!v) throw ParseError(lineno, "non-numeric dataset entry");
            d[static_cast<Eigen::Index>(k - 2)] = *v;
        }
        const std::size_t idx = ds.samples.size();
        if (std::stoull(cells[0]) != idx) throw ParseError(lineno, "dataset indices must be consecutive from 0");
        (cells[1] == "train" ? ds.train : ds.test).push_back(idx);
        ds.samples.push_back(std::move(d));
    }
    return ds;
}

ReferenceSet parse_reference_solutions(std::istream& in) {
    ReferenceSet refs;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto cells = split_csv(line);
        if (!header_seen) {
            if (cells.size() < 2 || cells[0] != "index" || cells[1] != "cost")
                throw ParseError(lineno, "reference header must start with 'index,cost'");
            header_seen = true;
            continue;
        }
        if (cells.size() < 2) throw ParseError(lineno, "reference row needs index and cost");
        auto index = to_double(cells[0]);
        if (!index || *index < 0 || std::floor(*index) != *index) throw ParseError(lineno, "invalid reference index");
        auto cost = to_double(cells[1]);
        if (!cost) throw ParseError(lineno, "non-numeric cost '" + cells[1] + "'");
        ReferenceEntry entry{*cost, {}};
        for (std::size_t k = 2; k < cells.size(); ++k) {
            auto v = to_double(cells[k]);
            if (!v) throw ParseError(lineno, "non-numeric solution entry");
            entry.solution.push_back(*v);
        }
        const auto key = static_cast<std::size_t>(*index);
        if (!refs.entries.emplace(key, std::move(entry)).second)
            throw ParseError(lineno, "duplicate reference index " + std::to_string(key));
    }
    if (!header_seen) throw ParseError(lineno, "reference file has no header");
    return refs;
}

ReferenceSet load_reference_solutions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open reference file " + path.string());
    return parse_reference_solutions(in);
}

void validate_references(const ReferenceSet& refs, const LoadDataset& ds) {
    for (const auto& [idx, _] : refs.entries) {
        if (idx >= ds.size())
            throw StructuralError("reference index " + std::to_string(idx) + " not present in dataset of size " +
                                  std::to_string(ds.size()));
    }
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write metrics file " + path.string());
    out << kMetricsHeader << '\n';
    for (const auto& r : records) {
        out << r.epoch;
        for (double v : {r.eq_mean_mismatch, r.eq_max_mismatch, r.eq_viol_num, r.ineq_mean_mismatch,
                         r.ineq_max_mismatch, r.ineq_viol_num, r.objective_cost, r.objective_gap_pct})
            out << ',' << format_double(v);
        out << '\n';
    }
    if (!out) throw IoError("failed writing metrics file " + path.string());
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics file " + path.string());
    std::vector<MetricsRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            if (line != kMetricsHeader) throw ParseError(lineno, "unexpected metrics header");
            continue;
        }
        if (line.empty()) continue;
        auto cells = split_csv(line);
        if (cells.size() != 9) throw ParseError(lineno, "metrics row must have 9 columns");
        MetricsRecord r;
        r.epoch = std::stoi(cells[0]);
        double* fields[] = {&r.eq_mean_mismatch,   &r.eq_max_mismatch,   &r.eq_viol_num,
                            &r.ineq_mean_mismatch, &r.ineq_max_mismatch, &r.ineq_viol_num,
                            &r.objective_cost,     &r.objective_gap_pct};
        for (std::size_t k = 0; k < 8; ++k) {
            auto v = to_double(cells[k + 1]);
            if (!v) throw ParseError(lineno, "non-numeric metric");
            *fields[k] = *v;
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace opflayer
