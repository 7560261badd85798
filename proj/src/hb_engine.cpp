#include "popstrat/hb_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "popstrat/csv.hpp"

namespace popstrat {

void PriorSpec::validate(std::size_t n_coef) const {
  if (!(intercept_scale > 0.0)) throw data_error("prior: intercept scale must be positive");
  if (coef_scales.size() != n_coef) {
    throw data_error("prior: expected " + std::to_string(n_coef) + " coefficient scales, got " +
                     std::to_string(coef_scales.size()));
  }
  for (double s : coef_scales) {
    if (!(s > 0.0)) throw data_error("prior: coefficient scales must be positive");
  }
  if (!(residual_rate > 0.0)) throw data_error("prior: residual rate must be positive");
  if (!(varying_scale > 0.0)) throw data_error("prior: varying-intercept scale must be positive");
}

PriorSpec autoscale_priors(const Eigen::VectorXd& y, const Eigen::MatrixXd& X) {
  if (y.size() < 2) throw data_error("autoscale_priors needs at least 2 outcome values");
  const double ybar = y.mean();
  double sy = std::sqrt((y.array() - ybar).square().sum() / static_cast<double>(y.size() - 1));
  if (!(sy > 0.0)) sy = 1.0;
  PriorSpec prior;
  prior.intercept_loc = ybar;
  prior.intercept_scale = 2.5 * sy;
  prior.residual_rate = 1.0 / sy;
  prior.varying_scale = 2.5 * sy;
  for (Eigen::Index k = 1; k < X.cols(); ++k) {
    const double xbar = X.col(k).mean();
    const double sx =
        std::sqrt((X.col(k).array() - xbar).square().sum() / static_cast<double>(X.rows() - 1));
    prior.coef_scales.push_back(sx > 0.0 ? 2.5 * sy / sx : 2.5 * sy);
  }
  return prior;
}

void McmcConfig::validate() const {
  if (chains < 2) throw data_error("mcmc: need at least 2 chains");
  if (warmup < 0 || warmup >= iterations) throw data_error("mcmc: warmup must be < iterations");
  if (iterations - warmup < 100) throw data_error("mcmc: need at least 100 post-warmup iterations");
  if (threads < 1) throw data_error("mcmc: threads must be >= 1");
}

std::size_t PosteriorDraws::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw data_error("no such parameter: '" + std::string(name) + "'");
}

Eigen::VectorXd PosteriorDraws::column(std::string_view name) const {
  return draws.col(static_cast<Eigen::Index>(index_of(name)));
}

double PosteriorDraws::mean(std::string_view name) const { return column(name).mean(); }

double PosteriorDraws::sd(std::string_view name) const {
  const Eigen::VectorXd c = column(name);
  if (c.size() < 2) return 0.0;
  return std::sqrt((c.array() - c.mean()).square().sum() / static_cast<double>(c.size() - 1));
}

double PosteriorDraws::quantile_of(std::string_view name, double p) const {
  const Eigen::VectorXd c = column(name);
  std::vector<double> v(c.data(), c.data() + c.size());
  return quantile(std::move(v), p);
}

double slice_sample(double x0, const std::function<double(double)>& logdensity, Rng& rng,
                    double width, int max_steps) {
  const double f0 = logdensity(x0);
  if (!std::isfinite(f0)) throw numeric_error("slice sampler started at non-finite log density");
  const double log_y = f0 - rng.exponential(1.0);
  // Stepping out.
  double lo = x0 - width * rng.uniform();
  double hi = lo + width;
  int steps_lo = max_steps;
  int steps_hi = max_steps;
  while (steps_lo-- > 0 && logdensity(lo) > log_y) lo -= width;
  while (steps_hi-- > 0 && logdensity(hi) > log_y) hi += width;
  // Shrinkage.
  for (int it = 0; it < 1000; ++it) {
    const double x1 = lo + (hi - lo) * rng.uniform_pos();
    if (logdensity(x1) > log_y) return x1;
    if (x1 < x0) {
      lo = x1;
    } else {
      hi = x1;
    }
  }
  throw numeric_error("slice sampler failed to find an acceptable point");
}

namespace {

struct LinearProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::vector<int> group;  // per row; empty when no varying intercept
  int n_groups = 0;
  PriorSpec prior;
  bool cauchy = false;
  std::optional<double> fixed_sigma;
};

// One Gibbs chain over the hierarchical linear model.
void run_linear_chain(const LinearProblem& prob, const McmcConfig& cfg, std::uint64_t chain_seed,
                      Eigen::Ref<Eigen::MatrixXd> out) {
  Rng rng(chain_seed);
  const auto n = prob.X.rows();
  const auto p = prob.X.cols();
  const int G = prob.n_groups;
  const bool varying = G > 0;

  Eigen::VectorXd prior_loc(p);
  Eigen::VectorXd prior_prec(p);
  prior_loc[0] = prob.prior.intercept_loc;
  prior_prec[0] = 1.0 / (prob.prior.intercept_scale * prob.prior.intercept_scale);
  for (Eigen::Index k = 1; k < p; ++k) {
    const double s = prob.prior.coef_scales[static_cast<std::size_t>(k - 1)];
    prior_loc[k] = 0.0;
    prior_prec[k] = 1.0 / (s * s);
  }

  // Prior-only mode: exact iid draws.
  if (n == 0) {
    for (int t = 0; t < cfg.iterations; ++t) {
      const int keep = t - cfg.warmup;
      Eigen::VectorXd beta(p);
      for (Eigen::Index k = 0; k < p; ++k) {
        beta[k] = rng.normal(prior_loc[k], 1.0 / std::sqrt(prior_prec[k]));
      }
      const double sigma_theta = std::abs(rng.normal(0.0, prob.prior.varying_scale));
      const double sigma = prob.fixed_sigma ? *prob.fixed_sigma
                                            : rng.exponential(prob.prior.residual_rate);
      if (keep < 0) continue;
      Eigen::Index c = 0;
      for (Eigen::Index k = 0; k < p; ++k) out(keep, c++) = beta[k];
      for (int g = 0; g < G; ++g) out(keep, c++) = rng.normal(0.0, sigma_theta);
      out(keep, c++) = sigma;
      if (varying) out(keep, c++) = sigma_theta;
    }
    return;
  }

  // Initialization: ridge least squares plus chain-specific jitter.
  Eigen::MatrixXd XtX = prob.X.transpose() * prob.X;
  Eigen::MatrixXd A0 = XtX;
  A0.diagonal().array() += 1e-6;
  Eigen::VectorXd beta = A0.ldlt().solve(prob.X.transpose() * prob.y);
  for (Eigen::Index k = 0; k < p; ++k) {
    beta[k] += 0.1 * rng.normal() / std::sqrt(prior_prec[k]);
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(std::max(G, 1));
  Eigen::VectorXd resid = prob.y - prob.X * beta;
  double sigma = prob.fixed_sigma
                     ? *prob.fixed_sigma
                     : std::max(1e-3, std::sqrt(resid.squaredNorm() / std::max<double>(1.0, n))) *
                           std::exp(0.2 * rng.normal());
  double sigma_theta = prob.prior.varying_scale * (0.25 + 0.5 * rng.uniform());
  Eigen::VectorXd lambda = Eigen::VectorXd::Ones(n);  // Cauchy mixture scales

  std::vector<std::vector<int>> members(static_cast<std::size_t>(std::max(G, 1)));
  if (varying) {
    for (Eigen::Index i = 0; i < n; ++i) {
      members[static_cast<std::size_t>(prob.group[static_cast<std::size_t>(i)])].push_back(
          static_cast<int>(i));
    }
  }

  const Eigen::VectorXd Xty = prob.X.transpose() * prob.y;
  Eigen::VectorXd theta_by_row = Eigen::VectorXd::Zero(n);

  for (int t = 0; t < cfg.iterations; ++t) {
    // beta | theta, sigma, lambda
    const double inv_s2 = 1.0 / (sigma * sigma);
    Eigen::VectorXd z(n);
    if (varying) {
      for (Eigen::Index i = 0; i < n; ++i) {
        theta_by_row[i] = theta[prob.group[static_cast<std::size_t>(i)]];
      }
      z = prob.y - theta_by_row;
    } else {
      z = prob.y;
    }
    Eigen::MatrixXd A;
    Eigen::VectorXd rhs;
    if (prob.cauchy) {
      A = prob.X.transpose() * lambda.asDiagonal() * prob.X * inv_s2;
      rhs = prob.X.transpose() * (lambda.array() * z.array()).matrix() * inv_s2;
    } else {
      A = XtX * inv_s2;
      rhs = (varying ? Eigen::VectorXd(prob.X.transpose() * z) : Xty) * inv_s2;
    }
    A.diagonal() += prior_prec;
    rhs += (prior_prec.array() * prior_loc.array()).matrix();
    const Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw numeric_error("gibbs: coefficient precision not SPD");
    Eigen::VectorXd mean = llt.solve(rhs);
    Eigen::VectorXd zn(p);
    for (Eigen::Index k = 0; k < p; ++k) zn[k] = rng.normal();
    beta = mean + llt.matrixU().solve(zn);

    resid = prob.y - prob.X * beta;  // excludes theta

    // theta_g | beta, sigma, sigma_theta (prior draw for empty groups)
    if (varying) {
      const double prec_prior = 1.0 / (sigma_theta * sigma_theta);
      for (int g = 0; g < G; ++g) {
        double sw = 0.0;
        double sum = 0.0;
        for (int i : members[static_cast<std::size_t>(g)]) {
          const double li = prob.cauchy ? lambda[i] : 1.0;
          sw += li;
          sum += li * resid[i];
        }
        const double prec = sw * inv_s2 + prec_prior;
        const double m = (sum * inv_s2) / prec;
        theta[g] = rng.normal(m, 1.0 / std::sqrt(prec));
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        theta_by_row[i] = theta[prob.group[static_cast<std::size_t>(i)]];
      }
      resid -= theta_by_row;

      // Recentering sweep: shift c between the intercept and every theta_g.
      // The linear predictor is invariant (intercept column is all ones), so
      // c has an exact normal conditional from the two prior terms alone.
      // Without it the location split mixes by random walk and stalls when
      // the group count is small.
      {
        const double prec_prior = 1.0 / (sigma_theta * sigma_theta);
        const double prec = prior_prec[0] + static_cast<double>(G) * prec_prior;
        const double m =
            (prior_prec[0] * (prior_loc[0] - beta[0]) + prec_prior * theta.head(G).sum()) / prec;
        const double c = rng.normal(m, 1.0 / std::sqrt(prec));
        beta[0] += c;
        theta.head(G).array() -= c;
      }
    }

    // lambda_i | rest (Cauchy errors only): Gamma(1, rate (1 + (r/sigma)^2)/2)
    if (prob.cauchy) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double r = resid[i] / sigma;
        lambda[i] = rng.exponential((1.0 + r * r) / 2.0);
      }
    }

    // sigma | rest: slice on log sigma with Exponential(rate) prior.
    if (!prob.fixed_sigma) {
      double ss = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        ss += (prob.cauchy ? lambda[i] : 1.0) * resid[i] * resid[i];
      }
      const double nn = static_cast<double>(n);
      const double rate = prob.prior.residual_rate;
      const auto logdens = [&](double x) {
        const double s2 = std::exp(2.0 * x);
        return -nn * x - 0.5 * ss / s2 - rate * std::exp(x) + x;
      };
      sigma = std::exp(slice_sample(std::log(sigma), logdens, rng));
    }

    // sigma_theta | theta: slice on log scale with half-normal prior.
    if (varying) {
      const double sth2 = theta.head(G).squaredNorm();
      const double gg = static_cast<double>(G);
      const double s0 = prob.prior.varying_scale;
      const auto logdens = [&](double x) {
        const double v = std::exp(2.0 * x);
        return -gg * x - 0.5 * sth2 / v - 0.5 * v / (s0 * s0) + x;
      };
      sigma_theta = std::exp(slice_sample(std::log(sigma_theta), logdens, rng));
    }

    const int keep = t - cfg.warmup;
    if (keep < 0) continue;
    Eigen::Index c = 0;
    for (Eigen::Index k = 0; k < p; ++k) out(keep, c++) = beta[k];
    for (int g = 0; g < G; ++g) out(keep, c++) = theta[g];
    out(keep, c++) = sigma;
    if (varying) out(keep, c++) = sigma_theta;
  }
}

void run_chains(int chains, int threads, const std::function<void(int)>& run_one) {
  if (threads <= 1) {
    for (int c = 0; c < chains; ++c) run_one(c);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chains));
  for (int c = 0; c < chains; ++c) {
    pool.emplace_back([&, c] {
      try {
        run_one(c);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

PosteriorDraws sample_posterior_linear(const OutcomeModelSpec& spec, const Microdata& data,
                                       const McmcConfig& cfg,
                                       const std::vector<double>* psi_by_unit,
                                       const std::vector<int>* group_by_unit, int n_groups,
                                       PriorSpec* used_priors) {
  cfg.validate();
  data.validate();
  const Design design(data.schema(), spec.formula);
  if (spec.formula.psi_varying) {
    if (!group_by_unit || n_groups <= 0) {
      throw data_error("sample_posterior_linear: formula has (1|psi) but no psi groups supplied");
    }
  }

  // Keep outcome-observed rows only.
  std::vector<int> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.outcome_observed(i)) rows.push_back(static_cast<int>(i));
  }

  LinearProblem prob;
  prob.cauchy = spec.cauchy_errors;
  prob.fixed_sigma = spec.fix_residual_sd;
  prob.n_groups = spec.formula.psi_varying ? n_groups : 0;

  const auto n = static_cast<Eigen::Index>(rows.size());
  prob.X.resize(n, static_cast<Eigen::Index>(design.n_columns()));
  prob.y.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]);
    std::optional<double> psi;
    if (design.has_psi_column()) {
      if (!psi_by_unit) throw data_error("sample_posterior_linear: formula has psi but no values");
      psi = (*psi_by_unit)[i];
    }
    design.fill_row(data.key_of(i), psi, prob.X.row(r));
    prob.y[r] = data.outcome(i);
    if (prob.n_groups > 0) {
      const int g = (*group_by_unit)[i];
      if (g < 0 || g >= n_groups) throw data_error("sample_posterior_linear: psi group out of range");
      prob.group.push_back(g);
    }
  }

  if (n == 0) {
    if (!spec.priors) {
      throw data_error(
          "sample_posterior_linear: no outcome-observed units; a prior-only run needs explicit priors");
    }
  }
  prob.prior = spec.priors ? *spec.priors : autoscale_priors(prob.y, prob.X);
  prob.prior.validate(design.n_columns() - 1);
  if (used_priors) *used_priors = prob.prior;
  if (spec.fix_residual_sd && !(*spec.fix_residual_sd > 0.0)) {
    throw data_error("sample_posterior_linear: fixed residual sd must be positive");
  }

  PosteriorDraws out;
  out.names = design.column_names();
  for (int g = 0; g < prob.n_groups; ++g) out.names.push_back("theta[" + std::to_string(g) + "]");
  out.names.push_back("sigma");
  if (prob.n_groups > 0) out.names.push_back("sigma_theta");
  out.n_chains = cfg.chains;
  out.per_chain = cfg.iterations - cfg.warmup;
  out.warmup = cfg.warmup;
  out.draws.resize(static_cast<Eigen::Index>(out.n_chains) * out.per_chain,
                   static_cast<Eigen::Index>(out.names.size()));

  run_chains(cfg.chains, cfg.threads, [&](int c) {
    const auto seed = derive_seed(cfg.seed, 0x11, static_cast<std::uint64_t>(c));
    run_linear_chain(prob, cfg, seed,
                     out.draws.middleRows(static_cast<Eigen::Index>(c) * out.per_chain, out.per_chain));
  });
  if (!out.draws.allFinite()) throw numeric_error("sample_posterior_linear: non-finite draws");
  return out;
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

struct LogisticProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
  Eigen::VectorXd prior_loc;
  Eigen::VectorXd prior_prec;

  double logpost(const Eigen::VectorXd& alpha) const {
    const Eigen::VectorXd eta = X * alpha;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      ll += w[i] * (y[i] * eta[i] - softplus(eta[i]));
    }
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
      const double d = alpha[k] - prior_loc[k];
      ll -= 0.5 * prior_prec[k] * d * d;
    }
    return ll;
  }
};

}  // namespace

PosteriorDraws sample_posterior_logistic(const ModelFormula& formula, const Microdata& stacked,
                                         const McmcConfig& cfg, std::optional<PriorSpec> priors) {
  cfg.validate();
  stacked.validate();
  if (!stacked.has_included_column()) {
    throw data_error("sample_posterior_logistic: data has no included flag");
  }
  if (formula.psi_fixed || formula.psi_varying) {
    throw data_error("sample_posterior_logistic: inclusion model cannot reference psi");
  }
  const Design design(stacked.schema(), formula);
  LogisticProblem prob;
  const auto n = static_cast<Eigen::Index>(stacked.size());
  const auto p = static_cast<Eigen::Index>(design.n_columns());
  prob.X = design.matrix_for_units(stacked);
  prob.y.resize(n);
  prob.w.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    prob.y[i] = stacked.included(static_cast<std::size_t>(i));
    prob.w[i] = stacked.weight(static_cast<std::size_t>(i));
  }

  PriorSpec prior;
  if (priors) {
    prior = *priors;
  } else {
    // Weakly informative default for the logit scale: N(0, 2.5) intercept,
    // N(0, 2.5/sd(x_k)) coefficients.
    prior.intercept_loc = 0.0;
    prior.intercept_scale = 2.5;
    for (Eigen::Index k = 1; k < p; ++k) {
      const double xbar = prob.X.col(k).mean();
      const double sx = std::sqrt((prob.X.col(k).array() - xbar).square().sum() /
                                  std::max(1.0, static_cast<double>(n - 1)));
      prior.coef_scales.push_back(sx > 0.0 ? 2.5 / sx : 2.5);
    }
  }
  prior.validate(static_cast<std::size_t>(p - 1));
  prob.prior_loc.resize(p);
  prob.prior_prec.resize(p);
  prob.prior_loc[0] = prior.intercept_loc;
  prob.prior_prec[0] = 1.0 / (prior.intercept_scale * prior.intercept_scale);
  for (Eigen::Index k = 1; k < p; ++k) {
    const double s = prior.coef_scales[static_cast<std::size_t>(k - 1)];
    prob.prior_loc[k] = 0.0;
    prob.prior_prec[k] = 1.0 / (s * s);
  }

  // Penalized IRLS for the posterior mode and Fisher information.
  Eigen::VectorXd mode = Eigen::VectorXd::Zero(p);
  for (int it = 0; it < 50; ++it) {
    const Eigen::VectorXd eta = prob.X * mode;
    Eigen::VectorXd mu(n);
    Eigen::VectorXd wirls(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = std::min(30.0, std::max(-30.0, eta[i]));
      mu[i] = 1.0 / (1.0 + std::exp(-e));
      wirls[i] = prob.w[i] * mu[i] * (1.0 - mu[i]);
    }
    Eigen::VectorXd score = prob.X.transpose() * (prob.w.array() * (prob.y - mu).array()).matrix();
    score -= (prob.prior_prec.array() * (mode - prob.prior_loc).array()).matrix();
    Eigen::MatrixXd H = prob.X.transpose() * wirls.asDiagonal() * prob.X;
    H.diagonal() += prob.prior_prec;
    const Eigen::VectorXd step = H.ldlt().solve(score);
    mode += step;
    if (step.cwiseAbs().maxCoeff() < 1e-10) break;
  }
  Eigen::MatrixXd H;
  {
    const Eigen::VectorXd eta = prob.X * mode;
    Eigen::VectorXd wirls(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = std::min(30.0, std::max(-30.0, eta[i]));
      const double mu = 1.0 / (1.0 + std::exp(-e));
      wirls[i] = prob.w[i] * mu * (1.0 - mu);
    }
    H = prob.X.transpose() * wirls.asDiagonal() * prob.X;
    H.diagonal() += prob.prior_prec;
  }
  const Eigen::LLT<Eigen::MatrixXd> hllt(H);
  if (hllt.info() != Eigen::Success) {
    throw numeric_error("sample_posterior_logistic: information matrix not SPD");
  }

  PosteriorDraws out;
  out.names = design.column_names();
  out.n_chains = cfg.chains;
  out.per_chain = cfg.iterations - cfg.warmup;
  out.warmup = cfg.warmup;
  out.draws.resize(static_cast<Eigen::Index>(out.n_chains) * out.per_chain,
                   static_cast<Eigen::Index>(out.names.size()));

  const double base_scale =
      (cfg.proposal_scale > 0.0) ? cfg.proposal_scale : 2.38 / std::sqrt(static_cast<double>(p));
  std::vector<double> accept_rates(static_cast<std::size_t>(cfg.chains), 0.0);

  run_chains(cfg.chains, cfg.threads, [&](int c) {
    Rng rng(derive_seed(cfg.seed, 0x22, static_cast<std::uint64_t>(c)));
    Eigen::VectorXd alpha = mode;
    for (Eigen::Index k = 0; k < p; ++k) {
      alpha[k] += 0.5 * rng.normal() * base_scale / std::sqrt(H(k, k));
    }
    double lp = prob.logpost(alpha);
    double log_scale = std::log(base_scale);
    int accepted_post = 0;
    Eigen::VectorXd zn(p);
    for (int t = 0; t < cfg.iterations; ++t) {
      for (Eigen::Index k = 0; k < p; ++k) zn[k] = rng.normal();
      // Proposal covariance exp(2 log_scale) * H^{-1}.
      const Eigen::VectorXd prop =
          alpha + std::exp(log_scale) * hllt.matrixU().solve(zn);
      const double lp_prop = prob.logpost(prop);
      const bool accept = std::log(rng.uniform_pos()) < lp_prop - lp;
      if (accept) {
        alpha = prop;
        lp = lp_prop;
      }
      if (t < cfg.warmup) {
        // Robbins-Monro drift of the log step size toward 30% acceptance.
        const double gamma = 1.0 / std::pow(static_cast<double>(t + 10), 0.6);
        log_scale += gamma * ((accept ? 1.0 : 0.0) - 0.3);
      } else {
        accepted_post += accept ? 1 : 0;
        out.draws.row(static_cast<Eigen::Index>(c) * out.per_chain + (t - cfg.warmup)) =
            alpha.transpose();
      }
    }
    accept_rates[static_cast<std::size_t>(c)] =
        static_cast<double>(accepted_post) / static_cast<double>(out.per_chain);
  });

  for (double a : accept_rates) {
    if (!(a > 0.05 && a < 0.95)) {
      throw numeric_error("sample_posterior_logistic: post-warmup acceptance rate " +
                          format_double(a) + " outside (0.05, 0.95); tuning failed");
    }
  }
  if (!out.draws.allFinite()) throw numeric_error("sample_posterior_logistic: non-finite draws");
  return out;
}

std::vector<double> rhat(const PosteriorDraws& draws) {
  if (draws.n_chains < 2) throw data_error("rhat: need at least 2 chains");
  if (draws.per_chain < 100) throw data_error("rhat: need at least 100 post-warmup draws per chain");
  const int half = draws.per_chain / 2;
  const int n_seq = 2 * draws.n_chains;
  std::vector<double> out;
  out.reserve(draws.names.size());
  for (Eigen::Index param = 0; param < draws.draws.cols(); ++param) {
    std::vector<double> seq_mean;
    std::vector<double> seq_var;
    for (int c = 0; c < draws.n_chains; ++c) {
      const Eigen::Index base = static_cast<Eigen::Index>(c) * draws.per_chain +
                                (draws.per_chain - 2 * half);  // drop a leading draw if odd
      for (int h = 0; h < 2; ++h) {
        const auto seg = draws.draws.col(param).segment(base + h * half, half);
        const double m = seg.mean();
        seq_mean.push_back(m);
        seq_var.push_back((seg.array() - m).square().sum() / static_cast<double>(half - 1));
      }
    }
    const double W = mean_of(seq_var);
    double gm = mean_of(seq_mean);
    double B = 0.0;
    for (double m : seq_mean) B += (m - gm) * (m - gm);
    B *= static_cast<double>(half) / static_cast<double>(n_seq - 1);
    if (!(W > 0.0)) {
      out.push_back(B > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
      continue;
    }
    const double var_plus =
        (static_cast<double>(half - 1) / half) * W + B / static_cast<double>(half);
    out.push_back(std::sqrt(var_plus / W));
  }
  return out;
}

double mcse_mean(const PosteriorDraws& draws, std::string_view name) {
  const auto idx = static_cast<Eigen::Index>(draws.index_of(name));
  const int m = draws.per_chain;
  const int n_batches = std::max(2, static_cast<int>(std::sqrt(static_cast<double>(m))));
  const int b = m / n_batches;
  double var_sum = 0.0;
  for (int c = 0; c < draws.n_chains; ++c) {
    std::vector<double> bm;
    for (int k = 0; k + 1 <= n_batches; ++k) {
      const auto seg = draws.draws.col(idx).segment(
          static_cast<Eigen::Index>(c) * m + static_cast<Eigen::Index>(k) * b, b);
      bm.push_back(seg.mean());
    }
    // Batch-means variance of this chain's mean estimate.
    var_sum += variance_of(bm) * static_cast<double>(b) / static_cast<double>(b * n_batches);
  }
  // Chains are independent; the pooled mean averages chain means.
  return std::sqrt(var_sum) / static_cast<double>(draws.n_chains);
}

}  // namespace popstrat
