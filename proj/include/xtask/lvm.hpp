#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "xtask/common.hpp"

namespace xtask {

/// Finite joint probability table over (X, Y, Z), used to verify the
/// predictor inequality chain by exact enumeration.
struct DiscreteLvm {
  std::vector<double> xs, ys, zs;  // support values
  std::vector<double> p;           // joint, row-major [i][j][k]

  size_t nx() const { return xs.size(); }
  size_t ny() const { return ys.size(); }
  size_t nz() const { return zs.size(); }
  double at(size_t i, size_t j, size_t k) const { return p[(i * ny() + j) * nz() + k]; }

  /// Normalizes weights into probabilities and removes x values with zero
  /// marginal mass.
  static DiscreteLvm normalized(std::vector<double> xs, std::vector<double> ys,
                                std::vector<double> zs, std::vector<double> weights) {
    check(xs.size() * ys.size() * zs.size() == weights.size(), ErrorCategory::config,
          "lvm: weight table does not match supports");
    double total = 0;
    for (double w : weights) {
      check(w >= 0, ErrorCategory::config, "lvm: negative weight");
      total += w;
    }
    check(total > 0, ErrorCategory::config, "lvm: all-zero weight table");
    for (double& w : weights) w /= total;

    DiscreteLvm lvm;
    size_t ny = ys.size(), nz = zs.size();
    for (size_t i = 0; i < xs.size(); ++i) {
      double px = 0;
      for (size_t j = 0; j < ny; ++j)
        for (size_t k = 0; k < nz; ++k) px += weights[(i * ny + j) * nz + k];
      if (px == 0) continue;  // zero-marginal x removed from the support
      lvm.xs.push_back(xs[i]);
      for (size_t j = 0; j < ny; ++j)
        for (size_t k = 0; k < nz; ++k) lvm.p.push_back(weights[(i * ny + j) * nz + k]);
    }
    lvm.ys = std::move(ys);
    lvm.zs = std::move(zs);
    return lvm;
  }

  std::vector<double> marginal_x() const {
    std::vector<double> px(nx(), 0.0);
    for (size_t i = 0; i < nx(); ++i)
      for (size_t j = 0; j < ny(); ++j)
        for (size_t k = 0; k < nz(); ++k) px[i] += at(i, j, k);
    return px;
  }

  /// p(x_i, y_j) summed over z.
  std::vector<double> joint_xy() const {
    std::vector<double> q(nx() * ny(), 0.0);
    for (size_t i = 0; i < nx(); ++i)
      for (size_t j = 0; j < ny(); ++j)
        for (size_t k = 0; k < nz(); ++k) q[i * ny() + j] += at(i, j, k);
    return q;
  }

  std::vector<double> joint_xz() const {
    std::vector<double> q(nx() * nz(), 0.0);
    for (size_t i = 0; i < nx(); ++i)
      for (size_t j = 0; j < ny(); ++j)
        for (size_t k = 0; k < nz(); ++k) q[i * nz() + k] += at(i, j, k);
    return q;
  }

  /// Swaps the roles of Y and Z.
  DiscreteLvm swapped_yz() const {
    DiscreteLvm s;
    s.xs = xs;
    s.ys = zs;
    s.zs = ys;
    s.p.resize(p.size());
    for (size_t i = 0; i < nx(); ++i)
      for (size_t j = 0; j < ny(); ++j)
        for (size_t k = 0; k < nz(); ++k) s.p[(i * nz() + k) * ny() + j] = at(i, j, k);
    return s;
  }
};

/// x -> E[Y|X=x] by exact enumeration.
inline std::vector<double> cond_exp_y_given_x(const DiscreteLvm& lvm) {
  auto px = lvm.marginal_x();
  auto pxy = lvm.joint_xy();
  std::vector<double> m(lvm.nx());
  for (size_t i = 0; i < lvm.nx(); ++i) {
    check(px[i] > 0, ErrorCategory::data, "lvm: zero x-marginal survived normalization");
    double acc = 0;
    for (size_t j = 0; j < lvm.ny(); ++j) acc += pxy[i * lvm.ny() + j] * lvm.ys[j];
    m[i] = acc / px[i];
  }
  return m;
}

inline std::vector<double> cond_exp_z_given_x(const DiscreteLvm& lvm) {
  auto px = lvm.marginal_x();
  auto pxz = lvm.joint_xz();
  std::vector<double> e(lvm.nx());
  for (size_t i = 0; i < lvm.nx(); ++i) {
    double acc = 0;
    for (size_t k = 0; k < lvm.nz(); ++k) acc += pxz[i * lvm.nz() + k] * lvm.zs[k];
    e[i] = acc / px[i];
  }
  return e;
}

/// Groups indices whose values coincide within tol, taking the transitive
/// closure (chains of near-equal values merge). Conditioning on the value of
/// E[Z|X] needs this; exact floating-point equality is too fragile.
inline std::vector<std::vector<size_t>> sigma_algebra_groups(const std::vector<double>& values,
                                                             double tol = 1e-9) {
  std::vector<size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<std::vector<size_t>> groups;
  for (size_t r = 0; r < order.size(); ++r) {
    if (r == 0 || values[order[r]] - values[order[r - 1]] > tol)
      groups.emplace_back();
    groups.back().push_back(order[r]);
  }
  return groups;
}

/// Exact gaps between the three predictors, plus the Y<->Z swapped triple.
/// xi: E[(Y - E[Y|X])^2]; align: E[(E[Y|E[Z|X]] - E[Y|X])^2];
/// xtc: E[(E[E[Y|X]|E[Z|X]] - E[Y|X])^2].
struct PredictorReport {
  double xi_y = 0, xtc_gap = 0, align_gap = 0;
  double xi_z = 0, xtc_gap_swap = 0, align_gap_swap = 0;
};

inline void to_json(nlohmann::json& j, const PredictorReport& r) {
  j = {{"xi_y", r.xi_y},
       {"xtc_gap", r.xtc_gap},
       {"align_gap", r.align_gap},
       {"xi_z", r.xi_z},
       {"xtc_gap_swap", r.xtc_gap_swap},
       {"align_gap_swap", r.align_gap_swap}};
}

namespace detail {

struct DirectionGaps {
  double xi = 0, xtc = 0, align = 0;
};

inline DirectionGaps predictor_gaps_one(const DiscreteLvm& lvm, double tol) {
  auto px = lvm.marginal_x();
  auto pxy = lvm.joint_xy();
  auto m = cond_exp_y_given_x(lvm);
  auto e = cond_exp_z_given_x(lvm);
  auto groups = sigma_algebra_groups(e, tol);
  size_t ny = lvm.ny();

  DirectionGaps g;
  for (size_t i = 0; i < lvm.nx(); ++i)
    for (size_t j = 0; j < ny; ++j) {
      double d = lvm.ys[j] - m[i];
      g.xi += pxy[i * ny + j] * d * d;
    }
  for (const auto& grp : groups) {
    double pg = 0;
    for (size_t i : grp) pg += px[i];
    // XTC predictor: probability-weighted average of E[Y|X=x] in the group.
    double t = 0;
    for (size_t i : grp) t += px[i] * m[i];
    t /= pg;
    // ALIGN predictor: E[Y | group], enumerated from the joint directly.
    double a = 0;
    for (size_t i : grp)
      for (size_t j = 0; j < ny; ++j) a += pxy[i * ny + j] * lvm.ys[j];
    a /= pg;
    for (size_t i : grp) {
      g.xtc += px[i] * (t - m[i]) * (t - m[i]);
      g.align += px[i] * (a - m[i]) * (a - m[i]);
    }
  }
  return g;
}

}  // namespace detail

inline PredictorReport predictor_gaps(const DiscreteLvm& lvm, double tol = 1e-9) {
  detail::DirectionGaps y = detail::predictor_gaps_one(lvm, tol);
  detail::DirectionGaps z = detail::predictor_gaps_one(lvm.swapped_yz(), tol);
  PredictorReport r;
  r.xi_y = y.xi;
  r.xtc_gap = y.xtc;
  r.align_gap = y.align;
  r.xi_z = z.xi;
  r.xtc_gap_swap = z.xtc;
  r.align_gap_swap = z.align;
  return r;
}

/// Numeric checks of the proof's intermediate identities:
///  (i)  tower property E[E[Y|X]] = E[Y]
///  (ii) align_gap = E[(E[Y - E[Y|X] | E[Z|X]])^2]
///  (iii) Jensen slack xi_Y - align_gap >= 0, with the slack matching the
///        conditional-variance residual E[Var(Y - E[Y|X] | E[Z|X])].
struct ProofStepReport {
  double tower_err = 0;
  double rewrite_lhs = 0, rewrite_rhs = 0, rewrite_err = 0;
  double jensen_slack = 0;
  double cond_var_residual = 0;
  double residual_err = 0;
};

inline void to_json(nlohmann::json& j, const ProofStepReport& r) {
  j = {{"tower_err", r.tower_err},     {"rewrite_lhs", r.rewrite_lhs},
       {"rewrite_rhs", r.rewrite_rhs}, {"rewrite_err", r.rewrite_err},
       {"jensen_slack", r.jensen_slack}, {"cond_var_residual", r.cond_var_residual},
       {"residual_err", r.residual_err}};
}

inline ProofStepReport verify_proof_steps(const DiscreteLvm& lvm, double tol = 1e-9) {
  auto px = lvm.marginal_x();
  auto pxy = lvm.joint_xy();
  auto m = cond_exp_y_given_x(lvm);
  auto e = cond_exp_z_given_x(lvm);
  auto groups = sigma_algebra_groups(e, tol);
  size_t ny = lvm.ny();

  ProofStepReport r;
  double e_y = 0, e_m = 0;
  for (size_t j = 0; j < ny; ++j) {
    double py = 0;
    for (size_t i = 0; i < lvm.nx(); ++i) py += pxy[i * ny + j];
    e_y += py * lvm.ys[j];
  }
  for (size_t i = 0; i < lvm.nx(); ++i) e_m += px[i] * m[i];
  r.tower_err = std::abs(e_m - e_y);

  double xi = 0;
  for (size_t i = 0; i < lvm.nx(); ++i)
    for (size_t j = 0; j < ny; ++j) {
      double d = lvm.ys[j] - m[i];
      xi += pxy[i * ny + j] * d * d;
    }

  double align_gap = 0, rhs = 0, residual = 0;
  for (const auto& grp : groups) {
    double pg = 0;
    for (size_t i : grp) pg += px[i];
    double a = 0, ed = 0, ed2 = 0;
    for (size_t i : grp)
      for (size_t j = 0; j < ny; ++j) {
        double pij = pxy[i * ny + j];
        a += pij * lvm.ys[j];
        double d = lvm.ys[j] - m[i];
        ed += pij * d;
        ed2 += pij * d * d;
      }
    a /= pg;
    ed /= pg;
    ed2 /= pg;
    for (size_t i : grp) align_gap += px[i] * (a - m[i]) * (a - m[i]);
    rhs += pg * ed * ed;
    residual += pg * (ed2 - ed * ed);
  }
  r.rewrite_lhs = align_gap;
  r.rewrite_rhs = rhs;
  r.rewrite_err = std::abs(align_gap - rhs);
  r.jensen_slack = xi - align_gap;
  r.cond_var_residual = residual;
  r.residual_err = std::abs(r.jensen_slack - residual);
  return r;
}

/// Random LVM in generic position: supports from [-1,1], strictly positive
/// probabilities normalized to 1.
inline DiscreteLvm random_lvm(Rng& rng, int64_t min_support = 2, int64_t max_support = 5) {
  auto support = [&](int64_t n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
  };
  int64_t nx = rng.uniform_int(min_support, max_support);
  int64_t ny = rng.uniform_int(min_support, max_support);
  int64_t nz = rng.uniform_int(min_support, max_support);
  std::vector<double> w(static_cast<size_t>(nx * ny * nz));
  for (auto& x : w) x = rng.uniform() + 1e-3;
  return DiscreteLvm::normalized(support(nx), support(ny), support(nz), std::move(w));
}

struct SweepSummary {
  int64_t trials = 0;
  int64_t violations = 0;
  double max_xtc_gap = 0;
  double max_xtc_minus_align = -1e300;
  double max_align_minus_xi = -1e300;
  double max_tower_err = 0;
  double max_rewrite_err = 0;
  double max_residual_err = 0;
  double min_jensen_slack = 1e300;
  double max_xi_y = 0;
  double mean_xi_y = 0;
};

inline void to_json(nlohmann::json& j, const SweepSummary& s) {
  j = {{"trials", s.trials},
       {"violations", s.violations},
       {"max_xtc_gap", s.max_xtc_gap},
       {"max_xtc_minus_align", s.max_xtc_minus_align},
       {"max_align_minus_xi", s.max_align_minus_xi},
       {"max_tower_err", s.max_tower_err},
       {"max_rewrite_err", s.max_rewrite_err},
       {"max_residual_err", s.max_residual_err},
       {"min_jensen_slack", s.min_jensen_slack},
       {"max_xi_y", s.max_xi_y},
       {"mean_xi_y", s.mean_xi_y}};
}

/// Randomized verification sweep over the full inequality chain
/// 0 <= xtc_gap <= align_gap <= xi, both directions, plus the proof-step
/// identities. `on_trial` (optional) receives each PredictorReport.
template <class TrialFn = std::nullptr_t>
SweepSummary verify_proposition(int64_t trials, int64_t max_support, uint64_t seed,
                                double slack_tol = 1e-12, double group_tol = 1e-9,
                                TrialFn&& on_trial = nullptr) {
  Rng rng(seed);
  SweepSummary s;
  s.trials = trials;
  for (int64_t t = 0; t < trials; ++t) {
    DiscreteLvm lvm = random_lvm(rng, 2, max_support);
    PredictorReport rep = predictor_gaps(lvm, group_tol);
    ProofStepReport proof = verify_proof_steps(lvm, group_tol);

    bool ok = rep.xtc_gap <= slack_tol && rep.xtc_gap_swap <= slack_tol &&
              rep.xtc_gap <= rep.align_gap + slack_tol &&
              rep.xtc_gap_swap <= rep.align_gap_swap + slack_tol &&
              rep.align_gap <= rep.xi_y + slack_tol &&
              rep.align_gap_swap <= rep.xi_z + slack_tol &&
              proof.tower_err <= slack_tol && proof.rewrite_err <= slack_tol &&
              proof.jensen_slack >= -slack_tol && proof.residual_err <= slack_tol;
    if (!ok) ++s.violations;

    s.max_xtc_gap = std::max(s.max_xtc_gap, std::max(rep.xtc_gap, rep.xtc_gap_swap));
    s.max_xtc_minus_align =
        std::max(s.max_xtc_minus_align,
                 std::max(rep.xtc_gap - rep.align_gap, rep.xtc_gap_swap - rep.align_gap_swap));
    s.max_align_minus_xi =
        std::max(s.max_align_minus_xi,
                 std::max(rep.align_gap - rep.xi_y, rep.align_gap_swap - rep.xi_z));
    s.max_tower_err = std::max(s.max_tower_err, proof.tower_err);
    s.max_rewrite_err = std::max(s.max_rewrite_err, proof.rewrite_err);
    s.max_residual_err = std::max(s.max_residual_err, proof.residual_err);
    s.min_jensen_slack = std::min(s.min_jensen_slack, proof.jensen_slack);
    s.max_xi_y = std::max(s.max_xi_y, rep.xi_y);
    s.mean_xi_y += rep.xi_y;

    if constexpr (!std::is_same_v<std::decay_t<TrialFn>, std::nullptr_t>) on_trial(rep);
  }
  if (trials > 0) s.mean_xi_y /= static_cast<double>(trials);
  return s;
}

}  // namespace xtask
