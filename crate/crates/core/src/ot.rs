//! Entropic optimal transport in the log domain.
//!
//! The solver iterates scaled dual potentials `f, g` with log-sum-exp
//! updates, so tiny regularisation (down to 1e-3) stays finite. Plans are
//! plain data: methods treat them as constants and differentiate only the
//! cost side of `<P, C>`.
//!
//! Partial transport reuses the balanced solver on an augmented problem: one
//! dummy row and one dummy column absorb the untransported mass at zero
//! cost, and the dummy-dummy cell is forbidden (infinite cost) so exactly
//! the requested mass crosses between real bins.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid marginals: {0}")]
    Marginals(String),
    #[error("invalid cost: {0}")]
    Cost(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("infeasible transport problem: {0}")]
    Infeasible(String),
}

/// A dense coupling between `n` sources and `m` targets.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub matrix: Vec<f64>, // row-major [n, m]
    pub n: usize,
    pub m: usize,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub epsilon: f64,
    /// Whether the marginal violation dropped below tolerance in time.
    /// Callers decide what to do with a non-converged plan; the solver
    /// never hides it.
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            out[i] = self.matrix[i * self.m..(i + 1) * self.m].iter().sum();
        }
        out
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                out[j] += self.matrix[i * self.m + j];
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.matrix.iter().sum()
    }

    /// `<P, C>`; zero-mass cells contribute nothing even at infinite cost.
    pub fn transport_cost(&self, cost: &[f64]) -> f64 {
        assert_eq!(cost.len(), self.matrix.len(), "cost grid must match plan");
        self.matrix
            .iter()
            .zip(cost)
            .filter(|(p, _)| **p != 0.0)
            .map(|(p, c)| p * c)
            .sum()
    }

    /// Largest absolute deviation of row/column sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (s, t) in self.row_sums().iter().zip(&self.row_marginal) {
            worst = worst.max((s - t).abs());
        }
        for (s, t) in self.col_sums().iter().zip(&self.col_marginal) {
            worst = worst.max((s - t).abs());
        }
        worst
    }
}

/// Mass arriving at each target bin (column sums of the plan). With `m`
/// targets of nominal mass `1/m`, comparing `m * col_sum` against a
/// threshold flags under-served targets.
pub fn transported_mass_per_target(plan: &TransportPlan) -> Vec<f64> {
    plan.col_sums()
}

fn lse(acc: &mut f64, terms: impl Iterator<Item = f64>) {
    // Streaming two-pass LSE is overkill at these sizes; collect and reduce.
    let vals: Vec<f64> = terms.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        *acc = f64::NEG_INFINITY;
        return;
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    *acc = max + sum.ln();
}

fn validate_common(
    cost: &[f64],
    n: usize,
    m: usize,
    mu: &[f64],
    nu: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(), OtError> {
    if n == 0 || m == 0 {
        return Err(OtError::Dimension("empty cost matrix".into()));
    }
    if cost.len() != n * m {
        return Err(OtError::Dimension(format!(
            "cost has {} entries, expected {n}x{m}",
            cost.len()
        )));
    }
    if mu.len() != n || nu.len() != m {
        return Err(OtError::Dimension(format!(
            "marginals of length {}/{} for a {n}x{m} problem",
            mu.len(),
            nu.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(OtError::Cost("costs must be finite".into()));
    }
    if mu.iter().chain(nu).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(OtError::Marginals("marginals must be finite and non-negative".into()));
    }
    if mu.iter().sum::<f64>() <= 0.0 || nu.iter().sum::<f64>() <= 0.0 {
        return Err(OtError::Marginals("marginals must carry positive mass".into()));
    }
    if epsilon <= 0.0 {
        return Err(OtError::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if max_iter == 0 {
        return Err(OtError::Parameter("max_iter must be at least 1".into()));
    }
    if tol <= 0.0 {
        return Err(OtError::Parameter(format!("tol must be positive, got {tol}")));
    }
    Ok(())
}

/// Core iteration; costs may contain `+inf` to forbid cells (used by the
/// partial augmentation), marginals may contain zeros.
fn sinkhorn_core(
    cost: &[f64],
    n: usize,
    m: usize,
    mu: &[f64],
    nu: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, bool, usize), OtError> {
    let ln_mu: Vec<f64> = mu.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    let ln_nu: Vec<f64> = nu.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for (fi, l) in f.iter_mut().zip(&ln_mu) {
        if *l == f64::NEG_INFINITY {
            *fi = f64::NEG_INFINITY;
        }
    }
    for (gj, l) in g.iter_mut().zip(&ln_nu) {
        if *l == f64::NEG_INFINITY {
            *gj = f64::NEG_INFINITY;
        }
    }

    let mut plan = vec![0.0; n * m];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        for i in 0..n {
            if ln_mu[i] == f64::NEG_INFINITY {
                continue;
            }
            let mut l = 0.0;
            lse(&mut l, (0..m).map(|j| {
                let c = cost[i * m + j];
                if c == f64::INFINITY || g[j] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    (g[j] - c) / epsilon
                }
            }));
            if l == f64::NEG_INFINITY {
                return Err(OtError::Infeasible(format!(
                    "source bin {i} has positive mass but no admissible target"
                )));
            }
            f[i] = epsilon * (ln_mu[i] - l);
        }
        for j in 0..m {
            if ln_nu[j] == f64::NEG_INFINITY {
                continue;
            }
            let mut l = 0.0;
            lse(&mut l, (0..n).map(|i| {
                let c = cost[i * m + j];
                if c == f64::INFINITY || f[i] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    (f[i] - c) / epsilon
                }
            }));
            if l == f64::NEG_INFINITY {
                return Err(OtError::Infeasible(format!(
                    "target bin {j} has positive mass but no admissible source"
                )));
            }
            g[j] = epsilon * (ln_nu[j] - l);
        }
        // Materialise the plan and test the marginals.
        let mut violation: f64 = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..m {
                let c = cost[i * m + j];
                let e = if c == f64::INFINITY
                    || f[i] == f64::NEG_INFINITY
                    || g[j] == f64::NEG_INFINITY
                {
                    0.0
                } else {
                    ((f[i] + g[j] - c) / epsilon).exp()
                };
                plan[i * m + j] = e;
                row += e;
            }
            violation = violation.max((row - mu[i]).abs());
        }
        for j in 0..m {
            let col: f64 = (0..n).map(|i| plan[i * m + j]).sum();
            violation = violation.max((col - nu[j]).abs());
        }
        if violation <= tol {
            converged = true;
            break;
        }
    }
    Ok((plan, converged, iterations))
}

/// Balanced entropic OT. Marginals must carry equal total mass (within
/// 1e-9); zero-mass bins are allowed and receive empty rows/columns.
pub fn sinkhorn(
    cost: &[f64],
    n: usize,
    m: usize,
    mu: &[f64],
    nu: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan, OtError> {
    validate_common(cost, n, m, mu, nu, epsilon, max_iter, tol)?;
    let (smu, snu) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    if (smu - snu).abs() > 1e-9 {
        return Err(OtError::Marginals(format!(
            "marginal masses differ: {smu} vs {snu}"
        )));
    }
    let (matrix, converged, iterations) =
        sinkhorn_core(cost, n, m, mu, nu, epsilon, max_iter, tol)?;
    Ok(TransportPlan {
        matrix,
        n,
        m,
        row_marginal: mu.to_vec(),
        col_marginal: nu.to_vec(),
        epsilon,
        converged,
        iterations,
    })
}

/// Partial entropic OT: moves exactly `mass` between the real bins, with
/// row/column sums bounded by `mu`/`nu`. Requires
/// `0 < mass <= min(sum mu, sum nu)`.
pub fn partial_sinkhorn(
    cost: &[f64],
    n: usize,
    m: usize,
    mu: &[f64],
    nu: &[f64],
    mass: f64,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan, OtError> {
    validate_common(cost, n, m, mu, nu, epsilon, max_iter, tol)?;
    let (smu, snu) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    let cap = smu.min(snu);
    if !(mass > 0.0 && mass <= cap + 1e-12) {
        return Err(OtError::Parameter(format!(
            "mass {mass} must lie in (0, {cap}]"
        )));
    }
    let mass = mass.min(cap);

    // Augmented problem: dummy column absorbs what sources keep, dummy row
    // absorbs what targets miss; both at zero cost. The infinite dummy-dummy
    // cell pins the real-real mass to exactly `mass`.
    let (ne, me) = (n + 1, m + 1);
    let mut ext = vec![0.0; ne * me];
    for i in 0..n {
        for j in 0..m {
            ext[i * me + j] = cost[i * m + j];
        }
    }
    ext[n * me + m] = f64::INFINITY;
    let mut mu_e = mu.to_vec();
    mu_e.push(snu - mass);
    let mut nu_e = nu.to_vec();
    nu_e.push(smu - mass);

    let (ext_plan, converged, iterations) =
        sinkhorn_core(&ext, ne, me, &mu_e, &nu_e, epsilon, max_iter, tol)?;
    let mut matrix = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            matrix[i * m + j] = ext_plan[i * me + j];
        }
    }
    Ok(TransportPlan {
        matrix,
        n,
        m,
        row_marginal: mu.to_vec(),
        col_marginal: nu.to_vec(),
        epsilon,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    #[test]
    fn low_epsilon_recovers_the_obvious_matching() {
        // Zero-cost diagonal: the plan should concentrate there.
        let cost = vec![0.0, 1.0, 1.0, 0.0];
        let plan = sinkhorn(&cost, 2, 2, &uniform(2), &uniform(2), 0.01, 2000, 1e-9).unwrap();
        assert!(plan.converged);
        assert!((plan.entry(0, 0) - 0.5).abs() < 1e-6);
        assert!((plan.entry(1, 1) - 0.5).abs() < 1e-6);
        assert!(plan.entry(0, 1) < 1e-6);
    }

    #[test]
    fn marginals_are_respected() {
        let cost: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0).collect();
        let mu = vec![0.5, 0.3, 0.2];
        let nu = vec![0.1, 0.2, 0.3, 0.4];
        let plan = sinkhorn(&cost, 3, 4, &mu, &nu, 0.05, 5000, 1e-10).unwrap();
        assert!(plan.converged);
        assert!(plan.marginal_violation() < 1e-9);
    }

    #[test]
    fn zero_mass_bins_get_empty_rows() {
        let cost = vec![0.3, 0.1, 0.7, 0.2, 0.5, 0.4];
        let mu = vec![0.0, 1.0];
        let nu = vec![0.5, 0.3, 0.2];
        let plan = sinkhorn(&cost, 2, 3, &mu, &nu, 0.1, 1000, 1e-8).unwrap();
        for j in 0..3 {
            assert_eq!(plan.entry(0, j), 0.0);
        }
        assert!((plan.row_sums()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unbalanced_marginals_are_rejected() {
        let cost = vec![0.0; 4];
        let err = sinkhorn(&cost, 2, 2, &[0.6, 0.6], &[0.5, 0.5], 0.1, 10, 1e-6);
        assert!(matches!(err, Err(OtError::Marginals(_))));
    }

    #[test]
    fn nonfinite_cost_is_rejected_up_front() {
        let cost = vec![0.0, f64::NAN, 0.0, 0.0];
        assert!(matches!(
            sinkhorn(&cost, 2, 2, &uniform(2), &uniform(2), 0.1, 10, 1e-6),
            Err(OtError::Cost(_))
        ));
    }

    #[test]
    fn partial_moves_exactly_the_requested_mass() {
        let cost: Vec<f64> = (0..9).map(|i| ((i * 5 + 2) % 7) as f64 / 7.0).collect();
        for &mass in &[0.25, 0.5, 0.9] {
            let plan = partial_sinkhorn(
                &cost, 3, 3, &uniform(3), &uniform(3), mass, 0.05, 20000, 1e-9,
            )
            .unwrap();
            assert!(plan.converged, "mass {mass} did not converge");
            assert!(
                (plan.total_mass() - mass).abs() < 1e-7,
                "moved {} instead of {mass}",
                plan.total_mass()
            );
            // Inequality constraints: no row or column exceeds its marginal.
            for s in plan.row_sums() {
                assert!(s <= 1.0 / 3.0 + 1e-7);
            }
            for s in plan.col_sums() {
                assert!(s <= 1.0 / 3.0 + 1e-7);
            }
        }
    }

    #[test]
    fn partial_with_full_mass_matches_balanced() {
        let cost: Vec<f64> = (0..9).map(|i| ((i * 3 + 1) % 5) as f64 / 5.0).collect();
        let full = sinkhorn(&cost, 3, 3, &uniform(3), &uniform(3), 0.05, 5000, 1e-10).unwrap();
        let part =
            partial_sinkhorn(&cost, 3, 3, &uniform(3), &uniform(3), 1.0, 0.05, 5000, 1e-10)
                .unwrap();
        for (a, b) in full.matrix.iter().zip(&part.matrix) {
            assert!((a - b).abs() < 1e-6, "full-mass partial diverged: {a} vs {b}");
        }
    }

    #[test]
    fn excessive_mass_is_rejected() {
        let cost = vec![0.0; 4];
        let err = partial_sinkhorn(&cost, 2, 2, &uniform(2), &uniform(2), 1.5, 0.1, 10, 1e-6);
        assert!(matches!(err, Err(OtError::Parameter(_))));
    }

    #[test]
    fn iteration_budget_reports_nonconvergence() {
        // Strong smoothing with skewed marginals: one sweep cannot reach
        // 1e-13 marginal accuracy, and the solver must say so.
        let cost: Vec<f64> = (0..16).map(|i| ((i * 7 + 1) % 9) as f64 / 3.0).collect();
        let mu = vec![0.9, 0.05, 0.03, 0.02];
        let plan = sinkhorn(&cost, 4, 4, &mu, &uniform(4), 1.0, 1, 1e-13).unwrap();
        assert!(!plan.converged, "violation {} after one sweep", plan.marginal_violation());
        assert_eq!(plan.iterations, 1);
    }

    #[test]
    fn per_target_mass_is_column_sums() {
        let cost = vec![0.0, 1.0, 1.0, 0.0];
        let plan = sinkhorn(&cost, 2, 2, &[0.7, 0.3], &[0.4, 0.6], 0.1, 2000, 1e-10).unwrap();
        let got = transported_mass_per_target(&plan);
        assert!((got[0] - 0.4).abs() < 1e-8 && (got[1] - 0.6).abs() < 1e-8);
    }
}
