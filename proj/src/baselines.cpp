// SPDX-License-Identifier: Apache-2.0
#include "beamgraph/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "beamgraph/dense_array.hpp"

namespace beamgraph::base {

using air::cd;

Eigen::MatrixXcd PrecoderSolution::transmit() const {
    Eigen::MatrixXcd f = precoders;
    for (int k = 0; k < f.cols(); ++k)
        f.col(k) *= std::sqrt(powers[k]);
    return f;
}

namespace {

// Solves (A + mu I) V = B for Hermitian PSD A with the smallest mu >= 0 meeting
// ||V||_F^2 <= p_max. Directions where A is numerically singular are dropped at
// mu = 0 (B has no component there when it lies in the range of A).
Eigen::MatrixXcd power_limited_solve(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b, double p_max) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(a);
    if (es.info() != Eigen::Success)
        throw NumericError("wmmse: eigen-decomposition failed");
    const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXcd proj = es.eigenvectors().adjoint() * b;
    const Eigen::VectorXd energy = proj.rowwise().squaredNorm();
    const double lam_max = lam.maxCoeff();
    const double floor = std::max(lam_max, 1e-300) * 1e-12;

    auto power = [&](double mu) {
        double p = 0.0;
        for (int i = 0; i < lam.size(); ++i) {
            const double d = lam(i) + mu;
            if (mu == 0.0 && lam(i) <= floor)
                continue;
            p += energy(i) / (d * d);
        }
        return p;
    };
    double mu = 0.0;
    if (power(0.0) > p_max) {
        double lo = 0.0, hi = std::max(lam_max, 1e-12);
        while (power(hi) > p_max)
            hi *= 2.0;
        for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
            const double mid = 0.5 * (lo + hi);
            (power(mid) > p_max ? lo : hi) = mid;
        }
        mu = hi;
    }
    Eigen::VectorXcd inv(lam.size());
    for (int i = 0; i < lam.size(); ++i)
        inv(i) = (mu == 0.0 && lam(i) <= floor) ? 0.0 : 1.0 / (lam(i) + mu);
    return es.eigenvectors() * (inv.asDiagonal() * proj);
}

}  // namespace

PrecoderSolution wmmse(const air::ChannelSet& h, double p_max, double sigma2, int max_iters, double tol) {
    require(max_iters >= 1, "wmmse: max_iters must be >= 1");
    require(tol > 0, "wmmse: tol must be positive");
    require(p_max > 0 && sigma2 > 0, "wmmse: p_max and sigma2 must be positive");
    const auto n = static_cast<int>(h.rows());
    const auto K = static_cast<int>(h.cols());

    Eigen::MatrixXcd v(n, K);
    for (int k = 0; k < K; ++k) {
        const double norm = h.col(k).norm();
        v.col(k) = norm > 0 ? Eigen::VectorXcd(h.col(k) / norm) : Eigen::VectorXcd::Zero(n);
        v.col(k) *= std::sqrt(p_max / K);
    }
    PrecoderSolution sol;
    sol.objective_trace.push_back(air::sum_rate_precoded(h, v, sigma2).total);
    for (int it = 0; it < max_iters; ++it) {
        const Eigen::MatrixXcd g = h.adjoint() * v;  // g(k, j) = h_k^H v_j
        Eigen::VectorXcd u(K);
        Eigen::VectorXd wgt(K);
        for (int k = 0; k < K; ++k) {
            double total = sigma2;
            for (int j = 0; j < K; ++j)
                total += std::norm(g(k, j));
            u(k) = g(k, k) / total;
            const double mse = 1.0 - std::real(std::conj(u(k)) * g(k, k));
            wgt(k) = 1.0 / std::max(mse, 1e-300);
        }
        Eigen::MatrixXcd a = Eigen::MatrixXcd::Zero(n, n);
        Eigen::MatrixXcd b(n, K);
        for (int k = 0; k < K; ++k) {
            a += wgt(k) * std::norm(u(k)) * h.col(k) * h.col(k).adjoint();
            b.col(k) = wgt(k) * u(k) * h.col(k);
        }
        v = power_limited_solve(a, b, p_max);
        if (!v.allFinite())
            throw NumericError("wmmse: precoder update is not finite");
        sol.iterations = it + 1;
        sol.objective_trace.push_back(air::sum_rate_precoded(h, v, sigma2).total);
        const auto m = sol.objective_trace.size();
        if (std::abs(sol.objective_trace[m - 1] - sol.objective_trace[m - 2]) < tol)
            break;
    }
    sol.precoders.resize(n, K);
    sol.powers.resize(K);
    for (int k = 0; k < K; ++k) {
        const double norm = v.col(k).norm();
        sol.powers[k] = norm * norm;
        if (norm > 0) {
            sol.precoders.col(k) = v.col(k) / norm;
        } else {
            const double hn = h.col(k).norm();
            sol.precoders.col(k) = Eigen::VectorXcd::Zero(n);
            sol.precoders(0, k) = 1.0;
            if (hn > 0)
                sol.precoders.col(k) = h.col(k) / hn;
        }
    }
    const double total = std::accumulate(sol.powers.begin(), sol.powers.end(), 0.0);
    if (total > p_max)  // bisection lands on the feasible side, this only trims rounding
        for (auto& p : sol.powers)
            p *= p_max / total;
    return sol;
}

Eigen::VectorXcd rss_channel_estimate(const std::vector<double>& r, const air::Codebook& c, int l) {
    require(l >= 1, "rss_channel_estimate: L must be >= 1");
    require(static_cast<int>(r.size()) == c.cols(), "rss_channel_estimate: RSS length does not match codebook");
    std::vector<int> order(r.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return r[a] > r[b]; });
    Eigen::VectorXcd h = Eigen::VectorXcd::Zero(c.rows());
    for (int i = 0; i < std::min<int>(l, static_cast<int>(order.size())); ++i)
        h += std::sqrt(std::max(r[order[i]], 0.0)) * c.col(order[i]);
    return h;
}

air::Strategy zf_sweep(const std::vector<std::vector<double>>& rss_all, int w, double p_max) {
    require(!rss_all.empty(), "zf_sweep: needs at least one user");
    const auto K = static_cast<int>(rss_all.size());
    air::Strategy t = air::Strategy::Zero(w, K);
    for (int k = 0; k < K; ++k) {
        require(static_cast<int>(rss_all[k].size()) == w, "zf_sweep: RSS length does not match W");
        const auto best = std::max_element(rss_all[k].begin(), rss_all[k].end()) - rss_all[k].begin();
        t(static_cast<int>(best), k) = std::sqrt(p_max / K);
    }
    return t;
}

OracleResult exhaustive_oracle(const air::ChannelSet& h, const air::Codebook& c, double p_max, double sigma2,
                               int grid) {
    require(grid >= 2, "exhaustive_oracle: power grid needs at least 2 points");
    const auto K = static_cast<int>(h.cols());
    const auto W = static_cast<int>(c.cols());
    require(K >= 1, "exhaustive_oracle: needs at least one user");
    const double work = std::pow(static_cast<double>(W), K) * std::pow(static_cast<double>(grid), K);
    require(work <= 1e7, "exhaustive_oracle: search size W^K * grid^K exceeds 1e7");

    const Eigen::MatrixXcd g = air::beam_domain(h, c);
    Eigen::MatrixXd gain(K, W);  // |h_k^H c_w|^2
    for (int k = 0; k < K; ++k)
        for (int w = 0; w < W; ++w)
            gain(k, w) = std::norm(g(k, w));

    const int units = grid - 1;
    std::vector<std::vector<int>> splits;
    std::vector<int> cur(K, 0);
    auto compose = [&](auto&& self, int k, int left) -> void {
        if (k == K - 1) {
            cur[k] = left;
            splits.push_back(cur);
            return;
        }
        for (int n = 0; n <= left; ++n) {
            cur[k] = n;
            self(self, k + 1, left - n);
        }
    };
    compose(compose, 0, units);

    OracleResult best;
    best.strategy = air::Strategy::Zero(W, K);
    best.total = -1.0;
    std::vector<int> beams(K, 0);
    Eigen::MatrixXd pair(K, K);
    std::vector<int> best_beams, best_split;
    while (true) {
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < K; ++i)
                pair(k, i) = gain(k, beams[i]);
        for (const auto& s : splits) {
            double total = 0.0;
            for (int k = 0; k < K; ++k) {
                double interference = sigma2;
                for (int i = 0; i < K; ++i)
                    if (i != k)
                        interference += pair(k, i) * p_max * s[i] / units;
                total += std::log2(1.0 + pair(k, k) * p_max * s[k] / units / interference);
            }
            if (total > best.total) {
                best.total = total;
                best_beams = beams;
                best_split = s;
            }
        }
        int k = 0;
        while (k < K && ++beams[k] == W)
            beams[k++] = 0;
        if (k == K)
            break;
    }
    for (int k = 0; k < K; ++k)
        best.strategy(best_beams[k], k) = std::sqrt(p_max * best_split[k] / units);
    best.total = air::sum_rate(g, best.strategy, sigma2).total;
    return best;
}

}  // namespace beamgraph::base
