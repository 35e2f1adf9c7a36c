//! Numerical backing for the adversarial objective.
//!
//! Over a finite support the discriminator's task has a closed form: against
//! fixed feature distributions P_1..P_N the optimal multinomial
//! discriminator predicts P_i(f) / sum_j P_j(f), and the shared extractor's
//! domain loss evaluated there collapses to an f-divergence between the P_i
//! and their centroid: a shifted generalized Jensen-Shannon divergence for
//! the log loss, a scaled Neyman chi-square for the least-squares loss. This
//! module computes both sides of those identities independently, plus a
//! brute-force simplex minimizer that certifies the closed form without
//! trusting any of the calculus.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::LossVariant;

/// Sum-to-one tolerance enforced on construction.
const SIMPLEX_TOL: f64 = 1e-12;

/// Probability mass function over a finite support shared with its peers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<DiscreteDistribution> {
        if probs.is_empty() {
            return Err(Error::invalid("DiscreteDistribution::new", "empty support"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid("DiscreteDistribution::new", format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(
                "DiscreteDistribution::new",
                format!("probabilities sum to {sum}, expected 1"),
            ));
        }
        Ok(DiscreteDistribution { probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<DiscreteDistribution> {
        if weights.is_empty() {
            return Err(Error::invalid("DiscreteDistribution::from_weights", "empty support"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid("DiscreteDistribution::from_weights", format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("DiscreteDistribution::from_weights", "weights sum to zero"));
        }
        let probs = weights.iter().map(|w| w / sum).collect();
        Ok(DiscreteDistribution { probs })
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, f: usize) -> f64 {
        self.probs[f]
    }
}

/// Pointwise mean of N distributions over a common support.
pub fn mean_distribution(dists: &[DiscreteDistribution]) -> Result<DiscreteDistribution> {
    check_family(dists)?;
    let s = dists[0].support_size();
    let n = dists.len() as f64;
    let mut probs = vec![0.0; s];
    for d in dists {
        for (acc, p) in probs.iter_mut().zip(d.probs()) {
            *acc += p / n;
        }
    }
    DiscreteDistribution::new(probs)
}

fn check_family(dists: &[DiscreteDistribution]) -> Result<()> {
    if dists.len() < 2 {
        return Err(Error::invalid("divergence", "need at least 2 distributions"));
    }
    let s = dists[0].support_size();
    if dists.iter().any(|d| d.support_size() != s) {
        return Err(Error::invalid("divergence", "distributions have different supports"));
    }
    Ok(())
}

/// KL(p || q) in nats, term convention 0 ln 0 = 0. A support violation
/// (p > 0 where q = 0) is an error unless `allow_infinite`, in which case
/// the divergence is reported as positive infinity.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution, allow_infinite: bool) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(Error::invalid("kl_divergence", "support size mismatch"));
    }
    let mut kl = 0.0;
    for (pi, qi) in p.probs().iter().zip(q.probs()) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            if allow_infinite {
                return Ok(f64::INFINITY);
            }
            return Err(Error::invalid("kl_divergence", "support violation: p > 0 where q = 0"));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Generalized Jensen-Shannon divergence: the average KL divergence from
/// each distribution to the centroid. Always finite because the centroid
/// dominates every member.
pub fn generalized_jsd(dists: &[DiscreteDistribution]) -> Result<f64> {
    check_family(dists)?;
    let centroid = mean_distribution(dists)?;
    let mut total = 0.0;
    for d in dists {
        total += kl_divergence(d, &centroid, false)?;
    }
    Ok(total / dists.len() as f64)
}

/// Neyman chi-square divergence sum_f (p(f) - q(f))^2 / q(f). Requires
/// q > 0 wherever p differs from q; a shared zero contributes 0.
pub fn neyman_chi2(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(Error::invalid("neyman_chi2", "support size mismatch"));
    }
    let mut total = 0.0;
    for (pi, qi) in p.probs().iter().zip(q.probs()) {
        let d = pi - qi;
        if d == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Err(Error::invalid("neyman_chi2", "support violation: p != q where q = 0"));
        }
        total += d * d / qi;
    }
    Ok(total)
}

/// Total variation distance, 0.5 * L1.
pub fn total_variation(p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
    0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// A discriminator restricted to the finite support: one probability row
/// per support point.
#[derive(Debug, Clone)]
pub struct TabularDiscriminator {
    support: usize,
    domains: usize,
    table: Vec<f64>,
}

impl TabularDiscriminator {
    pub fn uniform(support: usize, domains: usize) -> TabularDiscriminator {
        TabularDiscriminator {
            support,
            domains,
            table: vec![1.0 / domains as f64; support * domains],
        }
    }

    pub fn support_size(&self) -> usize {
        self.support
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.table[f * self.domains..(f + 1) * self.domains]
    }

    /// Largest entry-wise absolute difference.
    pub fn max_abs_diff(&self, other: &TabularDiscriminator) -> f64 {
        debug_assert_eq!(self.table.len(), other.table.len());
        self.table
            .iter()
            .zip(&other.table)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Closed-form optimal discriminator: row f is P_i(f) / sum_j P_j(f).
/// A support point with no mass under any domain gets a uniform row; it
/// never influences any objective.
pub fn optimal_discriminator(dists: &[DiscreteDistribution]) -> Result<TabularDiscriminator> {
    check_family(dists)?;
    let s = dists[0].support_size();
    let n = dists.len();
    let mut table = vec![0.0; s * n];
    for f in 0..s {
        let total: f64 = dists.iter().map(|d| d.prob(f)).sum();
        for (i, d) in dists.iter().enumerate() {
            table[f * n + i] = if total > 0.0 { d.prob(f) / total } else { 1.0 / n as f64 };
        }
    }
    Ok(TabularDiscriminator { support: s, domains: n, table })
}

/// The discriminator's own objective J_D at `disc`.
pub fn discriminator_objective(
    dists: &[DiscreteDistribution],
    disc: &TabularDiscriminator,
    variant: LossVariant,
) -> Result<f64> {
    check_family(dists)?;
    let (s, n) = (dists[0].support_size(), dists.len());
    if disc.support_size() != s || disc.domains() != n {
        return Err(Error::invalid("discriminator_objective", "discriminator shape mismatch"));
    }
    let mut j = 0.0;
    for f in 0..s {
        let row = disc.row(f);
        for (i, d) in dists.iter().enumerate() {
            let p = d.prob(f);
            if p == 0.0 {
                continue;
            }
            match variant {
                LossVariant::Nll => {
                    if row[i] <= 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    j -= p * row[i].ln();
                }
                LossVariant::L2 => {
                    for (jj, dj) in row.iter().enumerate() {
                        let t = if i == jj { 1.0 } else { 0.0 };
                        j += p * (dj - t) * (dj - t);
                    }
                }
            }
        }
    }
    Ok(j)
}

/// The shared extractor's domain loss evaluated at a given discriminator:
/// -J_D for the log loss, the uniform-deviation objective for L2.
pub fn shared_domain_loss(
    dists: &[DiscreteDistribution],
    disc: &TabularDiscriminator,
    variant: LossVariant,
) -> Result<f64> {
    check_family(dists)?;
    let (s, n) = (dists[0].support_size(), dists.len());
    if disc.support_size() != s || disc.domains() != n {
        return Err(Error::invalid("shared_domain_loss", "discriminator shape mismatch"));
    }
    match variant {
        LossVariant::Nll => Ok(-discriminator_objective(dists, disc, variant)?),
        LossVariant::L2 => {
            let unif = 1.0 / n as f64;
            let mut j = 0.0;
            for f in 0..s {
                let row = disc.row(f);
                let dev: f64 = row.iter().map(|dj| (dj - unif) * (dj - unif)).sum();
                for d in dists {
                    j += d.prob(f) * dev;
                }
            }
            Ok(j)
        }
    }
}

/// Domain loss of the shared extractor with the discriminator at its
/// closed-form optimum.
pub fn shared_domain_loss_at_optimum(dists: &[DiscreteDistribution], variant: LossVariant) -> Result<f64> {
    let opt = optimal_discriminator(dists)?;
    shared_domain_loss(dists, &opt, variant)
}

/// Euclidean projection onto the probability simplex, by the sort-and-
/// threshold construction. Exact for inputs already on the simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut hit = false;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            hit = true;
            break;
        }
    }
    let _ = hit;
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Options for the brute-force minimizer. The defaults run projected
/// gradient descent with backtracking line search to a first-order
/// stationarity target of 1e-10, capped at 1e6 iterations.
#[derive(Debug, Clone)]
pub struct BruteForceOpts {
    pub max_iterations: usize,
    pub residual_target: f64,
}

impl Default for BruteForceOpts {
    fn default() -> Self {
        BruteForceOpts { max_iterations: 1_000_000, residual_target: 1e-10 }
    }
}

/// Minimizes J_D over all tabular discriminators by projected gradient
/// descent on each support row's simplex. Serves as the independent check
/// on `optimal_discriminator`: no stationarity conditions are reused, only
/// the objective itself.
pub fn brute_force_discriminator(
    dists: &[DiscreteDistribution],
    variant: LossVariant,
    opts: &BruteForceOpts,
) -> Result<TabularDiscriminator> {
    check_family(dists)?;
    let (s, n) = (dists[0].support_size(), dists.len());
    let mut table = TabularDiscriminator::uniform(s, n).table;
    let mut worst = 0.0f64;
    for f in 0..s {
        // The objective separates over support points: each row is its own
        // simplex-constrained problem with masses P_i(f).
        let mass: Vec<f64> = dists.iter().map(|d| d.prob(f)).collect();
        let row = &mut table[f * n..(f + 1) * n];
        worst = worst.max(minimize_row(row, &mass, variant, opts));
    }
    if worst < opts.residual_target {
        Ok(TabularDiscriminator { support: s, domains: n, table })
    } else {
        Err(Error::NonConvergence {
            op: "brute_force_discriminator",
            iterations: opts.max_iterations,
            residual: worst,
            target: opts.residual_target,
        })
    }
}

/// Projected gradient descent for one support row; returns the final
/// first-order residual. Two phases: backtracking line search far from the
/// optimum (the NLL objective is +inf on the boundary, so the search
/// rejects any step that lands there and iterates stay strictly interior),
/// then constant curvature-matched steps once objective differences fall
/// below floating-point resolution, where the iterate map contracts to the
/// fixed point without needing objective comparisons at all.
fn minimize_row(x: &mut [f64], mass: &[f64], variant: LossVariant, opts: &BruteForceOpts) -> f64 {
    let n = x.len();
    let obj = |d: &[f64]| -> f64 {
        match variant {
            LossVariant::Nll => {
                d.iter().zip(mass).filter(|(_, m)| **m > 0.0).map(|(di, m)| -m * di.ln()).sum()
            }
            LossVariant::L2 => {
                let total: f64 = mass.iter().sum();
                let sq: f64 = d.iter().map(|di| di * di).sum();
                let cross: f64 = d.iter().zip(mass).map(|(di, m)| di * m).sum();
                total * sq - 2.0 * cross + total
            }
        }
    };
    let grad = |d: &[f64], g: &mut [f64]| match variant {
        LossVariant::Nll => {
            for i in 0..n {
                g[i] = if mass[i] == 0.0 { 0.0 } else { -mass[i] / d[i].max(1e-300) };
            }
        }
        LossVariant::L2 => {
            let total: f64 = mass.iter().sum();
            for i in 0..n {
                g[i] = 2.0 * (total * d[i] - mass[i]);
            }
        }
    };
    // Largest Hessian diagonal at the current point: 2*total for L2,
    // m_i/d_i^2 for NLL.
    let curvature = |d: &[f64]| -> f64 {
        match variant {
            LossVariant::Nll => mass
                .iter()
                .zip(d)
                .filter(|(m, _)| **m > 0.0)
                .map(|(m, di)| m / (di * di).max(1e-300))
                .fold(0.0, f64::max),
            LossVariant::L2 => 2.0 * mass.iter().sum::<f64>(),
        }
    };

    let mut g = vec![0.0; n];
    let mut eta = 1.0f64;
    let mut polish = false;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        grad(x, &mut g);
        // Stationarity probe at unit step: a simplex point is optimal iff
        // projecting x - grad returns x.
        let probe: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - gi).collect();
        let probed = project_simplex(&probe);
        residual = x.iter().zip(&probed).map(|(xi, pi)| (xi - pi).abs()).fold(0.0, f64::max);
        if residual < opts.residual_target {
            return residual;
        }
        if polish {
            let l = curvature(x);
            if !l.is_finite() || l <= 0.0 {
                return residual;
            }
            let step = 0.9 / l;
            let moved: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            x.copy_from_slice(&project_simplex(&moved));
            continue;
        }
        // Backtracking with proximal sufficient decrease; each accepted
        // step seeds the next trial at twice its size, so the step adapts
        // to the row's scale without a global schedule.
        let fx = obj(x);
        let mut trial_eta = (eta * 2.0).min(1e12);
        let mut moved = false;
        while trial_eta >= 1e-18 {
            let shifted: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - trial_eta * gi).collect();
            let trial = project_simplex(&shifted);
            let ft = obj(&trial);
            let lin: f64 = trial.iter().zip(x.iter()).zip(&g).map(|((t, xi), gi)| gi * (t - xi)).sum();
            let dist2: f64 = trial.iter().zip(x.iter()).map(|(t, xi)| (t - xi) * (t - xi)).sum();
            if ft <= fx + lin + dist2 / (2.0 * trial_eta) {
                x.copy_from_slice(&trial);
                eta = trial_eta;
                moved = true;
                break;
            }
            trial_eta *= 0.5;
        }
        if !moved || residual < 1e-7 {
            // Objective comparisons are exhausted at this scale; finish
            // with contraction steps.
            polish = true;
        }
    }
    residual
}

/// Both sides of the optimum-loss identity for one loss variant, plus the
/// lower-bound check.
#[derive(Debug, Clone)]
pub struct TheoremReport {
    pub variant: LossVariant,
    pub domains: usize,
    pub support: usize,
    /// Domain loss with the discriminator at its closed-form optimum.
    pub lhs: f64,
    /// The f-divergence form: -N ln N + sum KL for NLL, mean chi-square
    /// for L2.
    pub rhs: f64,
    pub abs_diff: f64,
    /// -N ln N for NLL, 0 for L2.
    pub bound: f64,
    /// Largest total variation between any member and the centroid.
    pub max_tv: f64,
    pub pass: bool,
}

/// Checks the optimum-loss identity at tolerance `tol`: the substituted
/// closed form must match the f-divergence expression, sit on or above the
/// lower bound, and attain it when the family is (numerically) identical.
pub fn verify_theorem(dists: &[DiscreteDistribution], variant: LossVariant, tol: f64) -> Result<TheoremReport> {
    check_family(dists)?;
    let n = dists.len();
    let centroid = mean_distribution(dists)?;
    let lhs = shared_domain_loss_at_optimum(dists, variant)?;
    let (rhs, bound) = match variant {
        LossVariant::Nll => {
            let mut kl_sum = 0.0;
            for d in dists {
                kl_sum += kl_divergence(d, &centroid, false)?;
            }
            let nf = n as f64;
            (-nf * nf.ln() + kl_sum, -nf * nf.ln())
        }
        LossVariant::L2 => {
            let mut chi_sum = 0.0;
            for d in dists {
                chi_sum += neyman_chi2(d, &centroid)?;
            }
            (chi_sum / n as f64, 0.0)
        }
    };
    let abs_diff = (lhs - rhs).abs();
    let max_tv = dists.iter().map(|d| total_variation(d, &centroid)).fold(0.0, f64::max);
    let identity_ok = abs_diff <= tol;
    let bound_ok = lhs >= bound - tol;
    // Identical families must attain the bound; the converse is checked
    // only on controlled instances since tolerances do not align in the
    // gray zone between "equal" and "perturbed".
    let equality_ok = if max_tv < 1e-9 { (lhs - bound).abs() <= tol } else { true };
    Ok(TheoremReport {
        variant,
        domains: n,
        support: dists[0].support_size(),
        lhs,
        rhs,
        abs_diff,
        bound,
        max_tv,
        pass: identity_ok && bound_ok && equality_ok,
    })
}

/// Random family of distributions with weights bounded away from zero, so
/// every divergence is finite and the brute-force landscape is well
/// conditioned.
pub fn sample_family(rng: &mut ChaCha8Rng, domains: usize, support: usize) -> Vec<DiscreteDistribution> {
    (0..domains)
        .map(|_| {
            let w: Vec<f64> = (0..support).map(|_| rng.gen_range(0.05..1.05)).collect();
            DiscreteDistribution::from_weights(&w).expect("positive weights")
        })
        .collect()
}

/// Random instance in the standard verification range: N in 2..=6 domains,
/// support 2..=32.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Vec<DiscreteDistribution> {
    let n = rng.gen_range(2..=6);
    let s = rng.gen_range(2..=32);
    sample_family(rng, n, s)
}
