//! Discrete entropy oracle for small joint distributions.
//!
//! A bag of `n` binary "instance states" carries `H(Θ₁,…,Θₙ)` bits of
//! information jointly, and `Σ H(Θₜ)` bits if the instances are treated as
//! independent. The joint never exceeds the marginal sum (what the
//! correlated aggregator is allowed to exploit), with equality exactly for
//! product distributions. [`DiscreteJoint`] enumerates full probability
//! tables (alphabet {0,1}, `n ≤ 12`) so both sides — and the chain-rule
//! decomposition `H(Θ₁) + Σ H(Θₜ|Θ₁..Θₜ₋₁)` — are computable exactly.
//!
//! The chain entropy is deliberately evaluated from *conditional tables*,
//! not by rearranging the joint-entropy sum, so that testing
//! `chain == joint` exercises a real identity rather than an algebraic
//! no-op.

use rand_distr::Exp1;

use super::MilError;

/// A joint distribution over `vars` binary variables as an explicit table
/// of `2^vars` probabilities. Outcome index `i` assigns variable `t` the
/// value `(i >> t) & 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    vars: usize,
    table: Vec<f64>,
}

/// Entropy of a Bernoulli(`p`) variable, in bits.
pub fn binary_entropy(p: f64) -> f64 {
    plogp(p) + plogp(1.0 - p)
}

/// `−p·log₂p` with the `0·log 0 = 0` convention.
fn plogp(p: f64) -> f64 {
    if p > 0.0 { -p * p.log2() } else { 0.0 }
}

impl DiscreteJoint {
    pub const MAX_VARS: usize = 12;

    pub fn new(vars: usize, table: Vec<f64>) -> Result<DiscreteJoint, MilError> {
        if vars == 0 || vars > Self::MAX_VARS {
            return Err(MilError::Distribution {
                why: format!("need between 1 and {} variables, got {vars}", Self::MAX_VARS),
            });
        }
        if table.len() != 1 << vars {
            return Err(MilError::Distribution {
                why: format!("{vars} variables need {} entries, got {}", 1 << vars, table.len()),
            });
        }
        if table.iter().any(|&p| !(p >= 0.0)) {
            return Err(MilError::Distribution { why: "probabilities must be nonnegative".to_string() });
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MilError::Distribution { why: format!("table sums to {total}, not 1") });
        }
        Ok(DiscreteJoint { vars, table })
    }

    /// Independent Bernoulli variables with success probabilities `ps`.
    pub fn product_of_bernoullis(ps: &[f64]) -> Result<DiscreteJoint, MilError> {
        if ps.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(MilError::Distribution {
                why: "Bernoulli parameters must lie in [0, 1]".to_string(),
            });
        }
        let n = ps.len();
        let mut table = vec![1.0; 1 << n];
        for (i, slot) in table.iter_mut().enumerate() {
            for (t, &p) in ps.iter().enumerate() {
                *slot *= if (i >> t) & 1 == 1 { p } else { 1.0 - p };
            }
        }
        DiscreteJoint::new(n, table)
    }

    /// A table drawn from the flat Dirichlet over the simplex
    /// (independent Exp(1) draws, normalised).
    pub fn dirichlet(vars: usize, rng: &mut impl rand::Rng) -> Result<DiscreteJoint, MilError> {
        if vars == 0 || vars > Self::MAX_VARS {
            return Err(MilError::Distribution {
                why: format!("need between 1 and {} variables, got {vars}", Self::MAX_VARS),
            });
        }
        let raw: Vec<f64> = (0..1usize << vars).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        DiscreteJoint::new(vars, raw.iter().map(|&x| x / total).collect())
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// `H(Θ₁,…,Θₙ) = −Σ p log₂ p` over the whole table.
    pub fn joint_entropy(&self) -> f64 {
        self.table.iter().map(|&p| plogp(p)).sum()
    }

    /// `Σₜ H(Θₜ)` from the marginalised per-variable tables — the
    /// information the bag would carry were the variables independent.
    pub fn marginal_entropy_sum(&self) -> f64 {
        (0..self.vars)
            .map(|t| {
                let p1: f64 = self
                    .table
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i >> t) & 1 == 1)
                    .map(|(_, &p)| p)
                    .sum();
                binary_entropy(p1)
            })
            .sum()
    }

    /// `H(Θ₁) + Σₜ H(Θₜ | Θ₁..Θₜ₋₁)`, each term from the explicit
    /// conditional tables: the prefix marginal weights the conditional
    /// Bernoulli entropy of the next variable.
    pub fn conditional_chain_entropy(&self) -> f64 {
        let mut total = 0.0;
        for t in 0..self.vars {
            let contexts = 1usize << t;
            let mask = contexts - 1;
            // joint[a][v] = P(prefix = a, Θₜ = v), later variables summed out
            let mut joint = vec![[0.0f64; 2]; contexts];
            for (i, &p) in self.table.iter().enumerate() {
                joint[i & mask][(i >> t) & 1] += p;
            }
            for ctx in &joint {
                let weight = ctx[0] + ctx[1];
                if weight > 0.0 {
                    total += weight * binary_entropy(ctx[1] / weight);
                }
            }
        }
        total
    }
}

/// Worst cases observed over a random sweep of joint tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Dirichlet tables checked (inequality + chain identity each).
    pub joints_checked: usize,
    /// Largest `joint − marginal_sum`; positive would break the bound.
    pub max_subadditivity_gap: f64,
    /// Largest `|chain − joint|`.
    pub max_chain_gap: f64,
    /// Product distributions checked for equality.
    pub products_checked: usize,
    /// Largest `|joint − marginal_sum|` on explicit products.
    pub max_product_gap: f64,
    /// The tables behind each maximum, so violations can be reported
    /// verbatim: (subadditivity, chain, product).
    pub argmax_tables: [Vec<f64>; 3],
}

impl SweepReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_subadditivity_gap <= tol && self.max_chain_gap <= tol && self.max_product_gap <= tol
    }
}

/// Samples `trials_per_n` Dirichlet tables for every variable count in
/// `var_counts`, plus one product distribution per trial, and records the
/// worst deviation from the subadditivity bound, the chain-rule identity,
/// and product equality.
pub fn entropy_sweep(
    trials_per_n: usize,
    var_counts: &[usize],
    seed: u64,
) -> Result<SweepReport, MilError> {
    use rand::{Rng, SeedableRng};
    if trials_per_n == 0 || var_counts.is_empty() {
        return Err(MilError::Distribution {
            why: "sweep needs at least one trial and one variable count".to_string(),
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport {
        joints_checked: 0,
        max_subadditivity_gap: f64::NEG_INFINITY,
        max_chain_gap: 0.0,
        products_checked: 0,
        max_product_gap: 0.0,
        argmax_tables: [Vec::new(), Vec::new(), Vec::new()],
    };
    for &n in var_counts {
        for _ in 0..trials_per_n {
            let joint = DiscreteJoint::dirichlet(n, &mut rng)?;
            let h = joint.joint_entropy();
            let sub_gap = h - joint.marginal_entropy_sum();
            if sub_gap > report.max_subadditivity_gap {
                report.max_subadditivity_gap = sub_gap;
                report.argmax_tables[0] = joint.table().to_vec();
            }
            let chain_gap = (joint.conditional_chain_entropy() - h).abs();
            if chain_gap > report.max_chain_gap {
                report.max_chain_gap = chain_gap;
                report.argmax_tables[1] = joint.table().to_vec();
            }
            report.joints_checked += 1;

            let ps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let product = DiscreteJoint::product_of_bernoullis(&ps)?;
            let gap = (product.joint_entropy() - product.marginal_entropy_sum()).abs();
            if gap > report.max_product_gap {
                report.max_product_gap = gap;
                report.argmax_tables[2] = product.table().to_vec();
            }
            report.products_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_fair_bits_carry_two_bits() {
        let j = DiscreteJoint::new(2, vec![0.25; 4]).unwrap();
        assert!((j.joint_entropy() - 2.0).abs() < 1e-12);
        assert!((j.marginal_entropy_sum() - 2.0).abs() < 1e-12);
        assert!((j.conditional_chain_entropy() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn a_copied_bit_adds_no_information() {
        // Θ₂ = Θ₁, fair: outcomes 00 and 11 half each.
        let j = DiscreteJoint::new(2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((j.joint_entropy() - 1.0).abs() < 1e-12);
        // Marginals are both fair bits.
        assert!((j.marginal_entropy_sum() - 2.0).abs() < 1e-12);
        // Chain: H(Θ₁)=1, H(Θ₂|Θ₁)=0.
        assert!((j.conditional_chain_entropy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_product_marginals_use_the_binary_entropy_formula() {
        let j = DiscreteJoint::product_of_bernoullis(&[0.5, 0.25]).unwrap();
        let want = 1.0 + binary_entropy(0.25);
        assert!((want - 1.811278124459133).abs() < 1e-12, "formula sanity");
        assert!((j.marginal_entropy_sum() - want).abs() < 1e-12);
        // Independence: joint equals the marginal sum.
        assert!((j.joint_entropy() - want).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_matches_the_joint_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let j = DiscreteJoint::dirichlet(3, &mut rng).unwrap();
            let gap = (j.conditional_chain_entropy() - j.joint_entropy()).abs();
            assert!(gap < 1e-9, "gap {gap}");
        }
    }

    #[test]
    fn joint_never_exceeds_marginal_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2usize, 3, 4] {
            for _ in 0..200 {
                let j = DiscreteJoint::dirichlet(n, &mut rng).unwrap();
                assert!(j.joint_entropy() <= j.marginal_entropy_sum() + 1e-9);
            }
        }
    }

    #[test]
    fn products_achieve_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3, 4] {
            for _ in 0..100 {
                let ps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let j = DiscreteJoint::product_of_bernoullis(&ps).unwrap();
                let gap = (j.joint_entropy() - j.marginal_entropy_sum()).abs();
                assert!(gap < 1e-9, "gap {gap} for ps {ps:?}");
            }
        }
    }

    #[test]
    fn sweep_reports_clean_bounds() {
        let report = entropy_sweep(50, &[2, 3, 4], 7).unwrap();
        assert_eq!(report.joints_checked, 150);
        assert_eq!(report.products_checked, 150);
        assert!(report.passes(1e-9), "{report:?}");
        // The worst subadditivity gap is strictly negative: random tables
        // are never exactly independent.
        assert!(report.max_subadditivity_gap < 0.0);
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(DiscreteJoint::new(0, vec![1.0]).is_err());
        assert!(DiscreteJoint::new(13, vec![0.0; 1 << 13]).is_err());
        assert!(DiscreteJoint::new(2, vec![0.5, 0.5]).is_err()); // wrong size
        assert!(DiscreteJoint::new(1, vec![0.7, 0.2]).is_err()); // sums to 0.9
        assert!(DiscreteJoint::new(1, vec![1.5, -0.5]).is_err()); // negative
        assert!(DiscreteJoint::product_of_bernoullis(&[1.2]).is_err());
    }

    #[test]
    fn outcome_bit_order_assigns_variable_t_to_bit_t() {
        // P(Θ₀=1)=1, Θ₁ fair → table index must set bit 0.
        let j = DiscreteJoint::new(2, vec![0.0, 0.5, 0.0, 0.5]).unwrap();
        assert!((j.marginal_entropy_sum() - 1.0).abs() < 1e-12);
        assert!((j.joint_entropy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_tables_are_valid_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ja = DiscreteJoint::dirichlet(4, &mut a).unwrap();
        let jb = DiscreteJoint::dirichlet(4, &mut b).unwrap();
        assert_eq!(ja, jb, "same seed, same table");
        assert_eq!(ja.table().len(), 16);
    }
}
