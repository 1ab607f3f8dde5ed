//! Training objective: sampled-softmax next-item NLL plus the skip-informed
//! InfoNCE term, combined as `alpha * nll + beta * nce`.
//!
//! The contrastive term scores a prediction `p` against the next-positive
//! embedding `m` and the skipped-item embeddings `n_j` with
//! `f(a, b) = exp(cos(a, b))`:
//!
//! ```text
//! nce = -ln( f(m, p) / (f(m, p) + sum_j f(n_j, p)) )
//! ```
//!
//! There is no temperature. Cosines are computed by explicit normalization and
//! a zero-norm vector has cosine 0 with everything.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::session_data::{Session, FIRST_ITEM};

/// Which skipped positions act as contrastive negatives for a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScope {
    /// Only the skips between the current position and its next positive.
    BetweenNextPositive,
    /// Every skip in the session.
    AllSessionSkips,
}

impl FromStr for NegativeScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "between-next-positive" => Ok(NegativeScope::BetweenNextPositive),
            "all-session-skips" => Ok(NegativeScope::AllSessionSkips),
            other => Err(Error::Config(format!("unknown negative scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_negatives: usize,
    pub nce_negative_scope: NegativeScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.5,
            num_negatives: 1000,
            nce_negative_scope: NegativeScope::AllSessionSkips,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha ({}) and beta ({}) must be non-negative",
                self.alpha, self.beta
            )));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub nce: f64,
    pub combined: f64,
    pub positions: usize,
}

/// Result of drawing sampled-softmax negatives for one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub items: Vec<usize>,
    /// Set when fewer than the requested number of items were eligible.
    pub short: bool,
}

/// Draws up to `n` distinct real items absent from `session`, uniformly
/// without replacement. Returned indices are sorted.
pub fn sample_negatives<R: Rng + ?Sized>(
    vocab_size: usize,
    session: &Session,
    n: usize,
    rng: &mut R,
) -> NegativeSample {
    let mut present = vec![false; vocab_size];
    for &i in session.items() {
        present[i] = true;
    }
    let eligible: Vec<usize> = (FIRST_ITEM..vocab_size).filter(|&i| !present[i]).collect();
    if n >= eligible.len() {
        return NegativeSample {
            short: n > eligible.len(),
            items: eligible,
        };
    }
    let mut items: Vec<usize> = sample(rng, eligible.len(), n)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    items.sort_unstable();
    NegativeSample { items, short: false }
}

/// `ln(sum exp(x))` with max subtraction. `values` must be non-empty.
fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-ln( exp(target) / (exp(target) + sum exp(negatives)) )`.
pub fn nll_sampled_softmax(target: f64, negatives: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(target);
    all.extend_from_slice(negatives);
    (log_sum_exp(&all) - target).max(0.0)
}

/// Cosine similarity, clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

/// Contrastive loss of one prediction from precomputed cosines.
///
/// Negative cosines are summed in ascending order so the result does not
/// depend on their input order.
pub fn info_nce_from_cosines(positive: f64, negatives: &[f64]) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail: f64 = sorted.iter().map(|c| (c - positive).exp()).sum();
    tail.ln_1p()
}

/// InfoNCE term for prediction `pred`, next-positive embedding `positive`
/// and skipped-item embeddings `negatives`.
pub fn info_nce(pred: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    let cp = cosine(pred, positive);
    let cn: Vec<f64> = negatives.iter().map(|n| cosine(pred, n)).collect();
    info_nce_from_cosines(cp, &cn)
}

/// Largest value `info_nce` can take with `n` negatives.
pub fn info_nce_upper_bound(n: usize) -> f64 {
    (n as f64 * 2f64.exp()).ln_1p()
}

/// One prediction row's view of the objective.
#[derive(Debug, Clone, Copy)]
pub struct RowTerms<'a> {
    pub target: usize,
    pub sampled: &'a [usize],
    pub contrastive: &'a [usize],
}

/// Gradient of one row's loss.
///
/// `items` holds `(item, a, b)` meaning `dL/dM[item] += a * pred + b * M[item]`.
#[derive(Debug, Clone, Default)]
pub struct RowGrad {
    pub pred: Vec<f64>,
    pub items: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RowLoss {
    pub nll: f64,
    pub nce: f64,
    pub grad: Option<RowGrad>,
}

/// Loss of one prediction row against item table `emb`, optionally with
/// its gradient for the weights `(alpha, beta)`.
pub fn row_loss(
    pred: &[f64],
    emb: &Matrix,
    terms: RowTerms<'_>,
    alpha: f64,
    beta: f64,
    with_grad: bool,
) -> RowLoss {
    let d = pred.len();
    let mut grad = with_grad.then(|| RowGrad {
        pred: vec![0.0; d],
        items: Vec::with_capacity(terms.sampled.len() + terms.contrastive.len() + 2),
    });

    // sampled softmax: logits[0] is the target
    let mut logits = Vec::with_capacity(terms.sampled.len() + 1);
    logits.push(dot(pred, emb.row(terms.target)));
    logits.extend(terms.sampled.iter().map(|&j| dot(pred, emb.row(j))));
    let lse = log_sum_exp(&logits);
    let nll = (lse - logits[0]).max(0.0);
    if let Some(g) = grad.as_mut() {
        if alpha != 0.0 {
            let items = std::iter::once(terms.target).chain(terms.sampled.iter().copied());
            for (k, (item, &s)) in items.zip(&logits).enumerate() {
                let p = (s - lse).exp();
                let ds = alpha * (p - if k == 0 { 1.0 } else { 0.0 });
                axpy(ds, emb.row(item), &mut g.pred);
                g.items.push((item, ds, 0.0));
            }
        }
    }

    let nce = if terms.contrastive.is_empty() {
        0.0
    } else {
        let cp = cosine(pred, emb.row(terms.target));
        let cn: Vec<f64> = terms.contrastive.iter().map(|&j| cosine(pred, emb.row(j))).collect();
        let value = info_nce_from_cosines(cp, &cn);
        if let Some(g) = grad.as_mut() {
            if beta != 0.0 {
                let mut all = Vec::with_capacity(cn.len() + 1);
                all.push(cp);
                all.extend_from_slice(&cn);
                let lse = log_sum_exp(&all);
                let items = std::iter::once(terms.target).chain(terms.contrastive.iter().copied());
                for (k, (item, &c)) in items.zip(&all).enumerate() {
                    let w = (c - lse).exp();
                    let dc = beta * (w - if k == 0 { 1.0 } else { 0.0 });
                    cosine_backward(pred, emb.row(item), dc, &mut g.pred, item, &mut g.items);
                }
            }
        }
        value
    };

    RowLoss { nll, nce, grad }
}

/// Adds `dc * dcos(a, b)/da` into `ga` and records `dc * dcos/db` for `b`.
fn cosine_backward(
    a: &[f64],
    b: &[f64],
    dc: f64,
    ga: &mut [f64],
    item: usize,
    items: &mut Vec<(usize, f64, f64)>,
) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let c = dot(a, b) / (na * nb);
    if c.abs() >= 1.0 {
        // clamped region
        return;
    }
    // dcos/da = b/(|a||b|) - c a/|a|^2 ; dcos/db = a/(|a||b|) - c b/|b|^2
    let inv = 1.0 / (na * nb);
    axpy(dc * inv, b, ga);
    axpy(-dc * c / (na * na), a, ga);
    items.push((item, dc * inv, -dc * c / (nb * nb)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn nll_examples() {
        assert!((nll_sampled_softmax(0.0, &[0.0, 0.0]) - 3f64.ln()).abs() < 1e-15);
        assert!(nll_sampled_softmax(40.0, &[0.0]) < 1e-15);
        assert!(nll_sampled_softmax(-5.0, &[3.0, 2.0]) > 0.0);
    }

    #[test]
    fn info_nce_examples() {
        let p = [1.0, 0.0];
        assert_eq!(info_nce(&p, &[3.0, 0.0], &[]), 0.0);
        let v = info_nce(&p, &[2.0, 0.0], &[&[0.0, 5.0]]);
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15, "{v}");
        let v = info_nce(&p, &[0.0, 1.0], &[&[0.0, 2.0], &[0.0, -3.0]]);
        assert!((v - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_counts_as_orthogonal() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let v = info_nce(&[0.0, 0.0], &[1.0, 0.0], &[&[0.0, 1.0]]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn negative_sampling_support_and_exhaustion() {
        let s = Session::new(vec![4, 7], vec![false, false]).unwrap();
        let mut rng = stream(1, Stream::Negatives);
        let r = sample_negatives(13, &s, 3, &mut rng);
        assert_eq!(r.items.len(), 3);
        assert!(!r.short);
        let allowed = [3, 5, 6, 8, 9, 10, 11, 12];
        assert!(r.items.iter().all(|i| allowed.contains(i)));
        assert!(r.items.windows(2).all(|w| w[0] < w[1]));

        let all = sample_negatives(13, &s, 8, &mut rng);
        assert_eq!(all.items, allowed);
        assert!(!all.short);
        let over = sample_negatives(13, &s, 1000, &mut rng);
        assert_eq!(over.items, allowed);
        assert!(over.short);

        let a = sample_negatives(13, &s, 4, &mut stream(9, Stream::Negatives));
        let b = sample_negatives(13, &s, 4, &mut stream(9, Stream::Negatives));
        assert_eq!(a, b);
    }

    #[test]
    fn row_gradient_matches_finite_differences() {
        let mut rng = stream(5, Stream::Sampling);
        let emb = Matrix::from_fn(9, 4, |_, _| rng.random_range(-1.0..1.0));
        let pred: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let terms = RowTerms {
            target: 3,
            sampled: &[5, 6, 8],
            contrastive: &[4, 7],
        };
        let (alpha, beta) = (0.7, 1.3);
        let f = |p: &[f64], e: &Matrix| {
            let r = row_loss(p, e, terms, alpha, beta, false);
            alpha * r.nll + beta * r.nce
        };
        let g = row_loss(&pred, &emb, terms, alpha, beta, true).grad.unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a[k] += h;
            b[k] -= h;
            let num = (f(&a, &emb) - f(&b, &emb)) / (2.0 * h);
            assert!((num - g.pred[k]).abs() < 1e-8, "pred {k}: {num} vs {}", g.pred[k]);
        }
        let mut dm = Matrix::zeros(9, 4);
        for &(item, a, b) in &g.items {
            let row = emb.row(item).to_vec();
            axpy(a, &pred, dm.row_mut(item));
            axpy(b, &row, dm.row_mut(item));
        }
        for r in 3..9 {
            for c in 0..4 {
                let mut a = emb.clone();
                let mut b = emb.clone();
                a.set(r, c, a.get(r, c) + h);
                b.set(r, c, b.get(r, c) - h);
                let num = (f(&pred, &a) - f(&pred, &b)) / (2.0 * h);
                assert!((num - dm.get(r, c)).abs() < 1e-8, "M[{r},{c}]");
            }
        }
    }
}
