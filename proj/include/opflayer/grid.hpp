#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "opflayer/case_io.hpp"

namespace opflayer {

using Complex = std::complex<double>;

/// Bus classification into slack (R), generator (G) and load (D) sets, plus
/// the layouts of the prediction vector x, the completion vector z and the
/// post-completion vector z~.
///
///   x  = [ P^g at G | V at G u R ]          size m = 2|G| + |R|
///   z  = [ theta at G u D | V at D ]        size n = |G| + 2|D|
///   z~ = [ P^g at R | Q^g at G u R ]        size 2|R| + |G|
///
/// Every index list is in ascending bus order.
struct Partition {
    std::vector<int> slack;
    std::vector<int> gen;
    std::vector<int> load;
    std::vector<int> non_slack;     // G u D
    std::vector<int> gen_or_slack;  // G u R

    // bus index -> position in the respective list, -1 when absent
    std::vector<int> pos_gen;
    std::vector<int> pos_load;
    std::vector<int> pos_non_slack;
    std::vector<int> pos_gen_or_slack;

    [[nodiscard]] Eigen::Index n() const { return static_cast<Eigen::Index>(gen.size() + 2 * load.size()); }
    [[nodiscard]] Eigen::Index m() const { return static_cast<Eigen::Index>(2 * gen.size() + slack.size()); }
    [[nodiscard]] Eigen::Index n_post() const { return static_cast<Eigen::Index>(2 * slack.size() + gen.size()); }
    [[nodiscard]] Eigen::Index n_gen() const { return static_cast<Eigen::Index>(gen.size()); }
    [[nodiscard]] Eigen::Index n_load() const { return static_cast<Eigen::Index>(load.size()); }
    [[nodiscard]] Eigen::Index n_non_slack() const { return static_cast<Eigen::Index>(non_slack.size()); }

    /// Stable 64-bit digest of the bus sets; used to reject checkpoints
    /// trained on a different network.
    [[nodiscard]] std::uint64_t fingerprint() const;
};

struct Generator {
    int bus = 0;                   // internal bus index
    double pmin = 0.0, pmax = 0.0;  // p.u.
    double qmin = 0.0, qmax = 0.0;  // p.u.
    double pg0 = 0.0;              // dispatch from the case file, p.u.
    double vg = 1.0;               // voltage set-point, p.u.
    std::vector<double> cost;      // polynomial in MW, highest degree first
};

/// In-service branch with the pi-model admittances used for flow evaluation.
struct Branch {
    int from = 0, to = 0;  // internal bus indices
    Complex ys;            // series admittance
    double b_charging = 0.0;
    double tap = 1.0;
    double shift = 0.0;        // radians
    double rating = 0.0;       // p.u. MVA; unrated lines get a 100 p.u. stand-in
    std::optional<std::pair<double, double>> angle_limits;  // radians, only when finite
    Complex yff, yft, ytf, ytt;
};

/// Immutable per-unit network model.
struct GridModel {
    Eigen::Index n_bus = 0;
    double base_mva = 100.0;
    std::vector<int> bus_ids;
    Eigen::MatrixXcd ybus;
    Partition partition;
    Eigen::VectorXd vmin, vmax;
    std::vector<Generator> gens;  // ascending bus order
    std::vector<int> gen_at_bus;  // bus -> gens index, -1 if none
    std::vector<Branch> branches;
    double slack_angle = 0.0;  // radians
    Eigen::VectorXd shunt_g, shunt_b;  // p.u.
    Eigen::VectorXd nominal_load;      // d = [P^d; Q^d] p.u.

    [[nodiscard]] int slack_bus() const { return partition.slack.front(); }
    [[nodiscard]] Eigen::Index n_gens() const { return static_cast<Eigen::Index>(gens.size()); }
    [[nodiscard]] Eigen::Index n_branches() const { return static_cast<Eigen::Index>(branches.size()); }
};

GridModel build_grid(const RawCase& rc);

/// The case-file operating point expressed as a prediction vector x:
/// generator dispatch at G and voltage set-points at G u R.
Eigen::VectorXd nominal_prediction(const GridModel& grid);

/// Constant fast-decoupled matrices (XB scheme) with their LU factors.
/// B' spans the non-slack buses, B'' the load buses.
class FdpfFactors {
  public:
    enum class Variant { XB };

    FdpfFactors(Eigen::MatrixXd b_prime, Eigen::MatrixXd b_double_prime);

    [[nodiscard]] const Eigen::MatrixXd& b_prime() const { return b_prime_; }
    [[nodiscard]] const Eigen::MatrixXd& b_double_prime() const { return b_double_prime_; }
    [[nodiscard]] Variant variant() const { return Variant::XB; }

    template <typename Rhs>
    [[nodiscard]] typename Rhs::PlainObject solve_prime(const Eigen::MatrixBase<Rhs>& rhs) const {
        typename Rhs::PlainObject out = lu_prime_.solve(rhs);
        return out;
    }
    template <typename Rhs>
    [[nodiscard]] typename Rhs::PlainObject solve_double_prime(const Eigen::MatrixBase<Rhs>& rhs) const {
        typename Rhs::PlainObject out = lu_double_prime_.solve(rhs);
        return out;
    }
    template <typename Rhs>
    [[nodiscard]] typename Rhs::PlainObject solve_prime_transposed(const Eigen::MatrixBase<Rhs>& rhs) const {
        typename Rhs::PlainObject out = lu_prime_.transpose().solve(rhs);
        return out;
    }
    template <typename Rhs>
    [[nodiscard]] typename Rhs::PlainObject solve_double_prime_transposed(const Eigen::MatrixBase<Rhs>& rhs) const {
        typename Rhs::PlainObject out = lu_double_prime_.transpose().solve(rhs);
        return out;
    }

  private:
    Eigen::MatrixXd b_prime_;
    Eigen::MatrixXd b_double_prime_;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_prime_;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_double_prime_;
};

FdpfFactors build_fdpf_matrices(const GridModel& grid);

}  // namespace opflayer
