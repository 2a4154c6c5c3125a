//! Brute-force reference implementations for tests.
//!
//! Nothing here calls into the loss, mining or sampler code. Similarities,
//! sums and softmaxes are recomputed from scratch; sums use double-double
//! accumulation so they carry roughly 32 significant digits.

use std::fmt;

/// An unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Self { hi, lo }
    }

    pub fn add_f64(self, x: f64) -> Self {
        self.add(Self::from_f64(x))
    }

    pub fn mul_f64(self, x: f64) -> Self {
        let (p, e) = two_prod(self.hi, x);
        let (hi, lo) = two_sum(p, e + self.lo * x);
        Self { hi, lo }
    }

    pub fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul_f64(-q1));
        let q2 = r.hi / o.hi;
        let (hi, lo) = two_sum(q1, q2);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn dd_sum(values: impl IntoIterator<Item = f64>) -> DoubleDouble {
    values
        .into_iter()
        .fold(DoubleDouble::default(), DoubleDouble::add_f64)
}

fn dd_dot(a: &[f64], b: &[f64]) -> DoubleDouble {
    a.iter().zip(b).fold(DoubleDouble::default(), |acc, (&x, &y)| {
        let (p, e) = two_prod(x, y);
        acc.add(DoubleDouble { hi: p, lo: e })
    })
}

/// Cosine similarity `⟨a, b⟩ / (‖a‖‖b‖)` with double-double accumulation.
pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let num = dd_dot(a, b);
    let den = (dd_dot(a, a).to_f64() * dd_dot(b, b).to_f64()).sqrt();
    num.to_f64() / den
}

/// `−log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ_j e^{s_j/τ}) )` evaluated term by term.
///
/// The ratio of the negative mass to the positive term is accumulated in
/// double-double and the loss is `ln(1 + ratio)`. When an exponential
/// overflows or the positive term underflows, the evaluation moves to the log
/// domain instead.
pub fn oracle_loss(q: &[f64], z_plus: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let pos = oracle_cosine(q, z_plus) / tau;
    let negs: Vec<f64> = negatives.iter().map(|z| oracle_cosine(q, z) / tau).collect();
    let e_pos = pos.exp();
    let e_negs: Vec<f64> = negs.iter().map(|s| s.exp()).collect();
    let naive_ok = e_pos.is_finite() && e_pos > 0.0 && e_negs.iter().all(|e| e.is_finite());
    if naive_ok {
        let ratio = dd_sum(e_negs).div(DoubleDouble::from_f64(e_pos));
        return ratio.to_f64().ln_1p();
    }
    // Log domain: ln Σ e^{l} with every term taken relative to the largest.
    let all: Vec<f64> = std::iter::once(pos).chain(negs.iter().copied()).collect();
    let top = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = dd_sum(all.iter().map(|l| (l - top).exp())).to_f64();
    top + mass.ln() - pos
}

/// Softmax of `cos(q, z)/τ` over `entries`, naive exponentials.
pub fn oracle_alpha(q: &[f64], entries: &[&[f64]], tau: f64) -> Vec<f64> {
    let sims: Vec<f64> = entries.iter().map(|z| oracle_cosine(q, z) / tau).collect();
    let exps: Vec<f64> = sims.iter().map(|s| s.exp()).collect();
    let total = dd_sum(exps.iter().copied());
    exps.iter()
        .map(|&e| DoubleDouble::from_f64(e).div(total).to_f64())
        .collect()
}

/// `Σ_{z ∈ top-n} α_z · z` with α over all entries. Ranking by repeated
/// selection of the largest similarity; the earlier entry wins ties.
pub fn oracle_hard_negative(q: &[f64], entries: &[&[f64]], n: usize, tau: f64) -> (Vec<usize>, Vec<f64>) {
    let alpha = oracle_alpha(q, entries, tau);
    let sims: Vec<f64> = entries.iter().map(|z| oracle_cosine(q, z)).collect();
    let mut taken = vec![false; entries.len()];
    let mut top = Vec::with_capacity(n);
    for _ in 0..n.min(entries.len()) {
        let mut best: Option<usize> = None;
        for i in 0..entries.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| sims[i] > sims[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("entries remain");
        taken[b] = true;
        top.push(b);
    }
    let dim = entries.first().map_or(0, |z| z.len());
    let z_hat = (0..dim)
        .map(|d| dd_sum(top.iter().map(|&i| alpha[i] * entries[i][d])).to_f64())
        .collect();
    (top, z_hat)
}

/// Central differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Positive and negative supports for anchor `a` by scanning every frame
/// `1..=frames` against the membership predicates.
pub fn enumerate_supports(frames: usize, a: usize, delta: usize, exclusion: usize) -> (Vec<usize>, Vec<usize>) {
    let dist = |j: usize| j.abs_diff(a);
    let positive = (1..=frames).filter(|&j| j != a && dist(j) <= delta).collect();
    let negative = (1..=frames).filter(|&j| dist(j) > exclusion).collect();
    (positive, negative)
}

/// One oracle-vs-implementation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub reference: f64,
    pub implementation: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when the absolute error is below `tolerance`.
    pub fn absolute(quantity: impl Into<String>, reference: f64, implementation: f64, tolerance: f64) -> Self {
        let abs_error = (reference - implementation).abs();
        let rel_error = abs_error / reference.abs().max(f64::MIN_POSITIVE);
        Self {
            quantity: quantity.into(),
            reference,
            implementation,
            abs_error,
            rel_error,
            tolerance,
            pass: abs_error < tolerance,
        }
    }

    /// Passes when the relative error (floored denominator) is below `tolerance`.
    pub fn relative(
        quantity: impl Into<String>,
        reference: f64,
        implementation: f64,
        floor: f64,
        tolerance: f64,
    ) -> Self {
        let abs_error = (reference - implementation).abs();
        let rel_error = abs_error / reference.abs().max(floor);
        Self {
            quantity: quantity.into(),
            reference,
            implementation,
            abs_error,
            rel_error,
            tolerance,
            pass: rel_error < tolerance,
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: ref={:.17e} impl={:.17e} abs={:.3e} rel={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.quantity,
            self.reference,
            self.implementation,
            self.abs_error,
            self.rel_error,
            self.tolerance
        )
    }
}
