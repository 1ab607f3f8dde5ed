//! Non-sequential factor-model baselines: WRMF fitted by alternating least
//! squares and BPR fitted by stochastic gradient ascent, each in a plain form
//! and two skip-aware forms.
//!
//! * `orig` ignores skip flags: every listened item is a positive.
//! * `bl` relabels skipped items as non-preferred. WRMF keeps their
//!   confidence but sets the target to 0; BPR drops them from the positives
//!   and draws negatives uniformly from unseen and skipped items.
//! * `nr` mixes the two kinds of negatives in a fixed ratio (`skip_ratio`
//!   skipped per unseen). BPR draws a skipped negative with probability
//!   `r / (1 + r)`; WRMF weights each session's skipped cells so their total
//!   weight is `r` times the total weight of its unseen cells.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::rank_from_scores;
use crate::matrix::{dot, Matrix};
use crate::params::ParamSet;
use crate::rng::{stream, substream, Stream};
use crate::session_data::{holdout_split, Session, FIRST_ITEM};

pub const BASELINE_KIND: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wrmf,
    Bpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Orig,
    Bl,
    Nr,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrmf" => Ok(Method::Wrmf),
            "bpr" => Ok(Method::Bpr),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "orig" => Ok(Variant::Orig),
            "bl" => Ok(Variant::Bl),
            "nr" => Ok(Variant::Nr),
            other => Err(Error::Config(format!("unknown baseline variant `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Wrmf => "wrmf",
            Method::Bpr => "bpr",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Orig => "orig",
            Variant::Bl => "bl",
            Variant::Nr => "nr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: Method,
    pub variant: Variant,
    pub factors: usize,
    pub regularization: f64,
    /// WRMF confidence slope: `c = 1 + confidence * count`.
    pub confidence: f64,
    /// ALS sweeps.
    pub iterations: usize,
    /// BPR step size.
    pub learning_rate: f64,
    /// BPR passes; each pass draws one triple per positive interaction.
    pub epochs: usize,
    /// Skipped negatives per unseen negative (`nr` only).
    pub skip_ratio: f64,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: Method, variant: Variant) -> Self {
        BaselineConfig {
            method,
            variant,
            factors: 32,
            regularization: 0.01,
            confidence: 40.0,
            iterations: 15,
            learning_rate: 0.05,
            epochs: 30,
            skip_ratio: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Config("factors must be positive".into()));
        }
        if !(self.regularization >= 0.0 && self.confidence >= 0.0 && self.skip_ratio >= 0.0) {
            return Err(Error::Config(
                "regularization, confidence and skip_ratio must be non-negative".into(),
            ));
        }
        if self.method == Method::Bpr && !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.method, self.variant)
    }
}

/// Session and item factors; item rows are indexed like the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MfParams {
    pub session_factors: Matrix,
    pub item_factors: Matrix,
}

/// Per-session item counts split by feedback.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionInteractions {
    /// `(item, listened count, skipped count)`, ascending item.
    pub items: Vec<(usize, u32, u32)>,
}

impl SessionInteractions {
    pub fn from_session(s: &Session) -> Self {
        let mut items: Vec<(usize, u32, u32)> = Vec::new();
        let mut order: Vec<(usize, bool)> = s.items().iter().copied().zip(s.skipped().iter().copied()).collect();
        order.sort_by_key(|&(i, _)| i);
        for (i, skip) in order {
            match items.last_mut() {
                Some(last) if last.0 == i => {
                    if skip { last.2 += 1 } else { last.1 += 1 }
                }
                _ => items.push((i, u32::from(!skip), u32::from(skip))),
            }
        }
        SessionInteractions { items }
    }
}

/// Sparse WRMF cells of one session: `(item, confidence, preference)`.
/// Cells not listed have confidence 1 and preference 0.
pub fn wrmf_cells(
    inter: &SessionInteractions,
    config: &BaselineConfig,
    num_items: usize,
) -> Vec<(usize, f64, f64)> {
    let a = config.confidence;
    match config.variant {
        Variant::Orig => inter
            .items
            .iter()
            .map(|&(i, l, s)| (i, 1.0 + a * f64::from(l + s), 1.0))
            .collect(),
        Variant::Bl => inter
            .items
            .iter()
            .map(|&(i, l, s)| {
                if l > 0 {
                    (i, 1.0 + a * f64::from(l), 1.0)
                } else {
                    (i, 1.0 + a * f64::from(s), 0.0)
                }
            })
            .collect(),
        Variant::Nr => {
            let skipped_only = inter.items.iter().filter(|c| c.1 == 0).count();
            let unseen = num_items.saturating_sub(inter.items.len());
            let w = if skipped_only == 0 {
                1.0
            } else {
                (config.skip_ratio * unseen as f64 / skipped_only as f64).max(1.0)
            };
            inter
                .items
                .iter()
                .map(|&(i, l, _)| {
                    if l > 0 {
                        (i, 1.0 + a * f64::from(l), 1.0)
                    } else {
                        (i, w, 0.0)
                    }
                })
                .collect()
        }
    }
}

fn init_factors(rows: usize, f: usize, seed: u64, counter: u64) -> Matrix {
    let mut rng = substream(seed, Stream::Baseline, counter);
    Matrix::from_fn(rows, f, |r, _| {
        if r < FIRST_ITEM && counter == 1 {
            0.0
        } else {
            rng.random_range(-0.01..0.01)
        }
    })
}

fn init_params(sessions: usize, vocab_size: usize, config: &BaselineConfig) -> MfParams {
    MfParams {
        session_factors: init_factors(sessions, config.factors, config.seed, 0),
        item_factors: init_factors(vocab_size, config.factors, config.seed, 1),
    }
}

/// Solves `a x = b` by Cholesky, retrying with a growing ridge if needed.
fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut ridge = 0.0;
    loop {
        if let Some(ch) = a.clone().cholesky() {
            return ch.solve(b);
        }
        let step = if ridge == 0.0 { 1e-8 * (a.trace().abs() / n as f64).max(1e-8) } else { ridge };
        log::warn!("normal equations not positive definite; adding ridge {step:e}");
        for k in 0..n {
            a[(k, k)] += step;
        }
        ridge = step * 10.0;
    }
}

fn gram(m: &Matrix, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let f = m.cols();
    let mut g = DMatrix::zeros(f, f);
    for r in rows {
        let v = m.row(r);
        for a in 0..f {
            for b in 0..f {
                g[(a, b)] += v[a] * v[b];
            }
        }
    }
    g
}

/// Least-squares factor for one row given fixed factors of the other side.
fn solve_row(
    base_gram: &DMatrix<f64>,
    other: &Matrix,
    cells: &[(usize, f64, f64)],
    reg: f64,
) -> Vec<f64> {
    let f = other.cols();
    let mut a = base_gram.clone();
    let mut b = DVector::zeros(f);
    for &(j, c, p) in cells {
        let y = other.row(j);
        for r in 0..f {
            for s in 0..f {
                a[(r, s)] += (c - 1.0) * y[r] * y[s];
            }
            b[r] += c * p * y[r];
        }
    }
    for r in 0..f {
        a[(r, r)] += reg;
    }
    solve_spd(a, &b).iter().copied().collect()
}

/// Weighted squared error over every session/real-item cell plus the L2 penalty.
pub fn wrmf_objective(params: &MfParams, cells: &[Vec<(usize, f64, f64)>], reg: f64) -> f64 {
    let x = &params.session_factors;
    let y = &params.item_factors;
    let mut total = 0.0;
    for (u, row) in cells.iter().enumerate() {
        let mut listed = vec![None; y.rows()];
        for &(i, c, p) in row {
            listed[i] = Some((c, p));
        }
        for i in FIRST_ITEM..y.rows() {
            let (c, p) = listed[i].unwrap_or((1.0, 0.0));
            let e = p - dot(x.row(u), y.row(i));
            total += c * e * e;
        }
    }
    let sq = |m: &Matrix, from: usize| (from..m.rows()).map(|r| dot(m.row(r), m.row(r))).sum::<f64>();
    total + reg * (sq(x, 0) + sq(y, FIRST_ITEM))
}

/// Alternating least squares. `on_half_sweep` sees the parameters after
/// every session and every item half-sweep.
pub fn wrmf_train_with(
    interactions: &[SessionInteractions],
    vocab_size: usize,
    config: &BaselineConfig,
    mut on_half_sweep: impl FnMut(&MfParams),
) -> Result<MfParams> {
    config.validate()?;
    if interactions.iter().all(|s| s.items.is_empty()) {
        return Err(Error::Data("no interactions to factorize".into()));
    }
    let num_items = vocab_size - FIRST_ITEM;
    let cells: Vec<Vec<(usize, f64, f64)>> = interactions
        .iter()
        .map(|s| wrmf_cells(s, config, num_items))
        .collect();
    let mut by_item: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); vocab_size];
    for (u, row) in cells.iter().enumerate() {
        for &(i, c, p) in row {
            by_item[i].push((u, c, p));
        }
    }
    let mut params = init_params(interactions.len(), vocab_size, config);
    let reg = config.regularization;
    for _ in 0..config.iterations {
        let g = gram(&params.item_factors, FIRST_ITEM..vocab_size);
        for (u, row) in cells.iter().enumerate() {
            let x = solve_row(&g, &params.item_factors, row, reg);
            params.session_factors.row_mut(u).copy_from_slice(&x);
        }
        on_half_sweep(&params);
        let g = gram(&params.session_factors, 0..interactions.len());
        for (i, col) in by_item.iter().enumerate().skip(FIRST_ITEM) {
            let y = solve_row(&g, &params.session_factors, col, reg);
            params.item_factors.row_mut(i).copy_from_slice(&y);
        }
        on_half_sweep(&params);
    }
    Ok(params)
}

pub fn wrmf_train(
    interactions: &[SessionInteractions],
    vocab_size: usize,
    config: &BaselineConfig,
) -> Result<MfParams> {
    wrmf_train_with(interactions, vocab_size, config, |_| {})
}

/// `(session, positive item, negative item)`.
pub type Triple = (usize, usize, usize);

/// Positive items and the two negative pools of one session.
fn bpr_pools(inter: &SessionInteractions, variant: Variant) -> (Vec<usize>, Vec<usize>) {
    match variant {
        Variant::Orig => (inter.items.iter().map(|c| c.0).collect(), Vec::new()),
        Variant::Bl | Variant::Nr => (
            inter.items.iter().filter(|c| c.1 > 0).map(|c| c.0).collect(),
            inter.items.iter().filter(|c| c.1 == 0).map(|c| c.0).collect(),
        ),
    }
}

fn draw_unseen<R: Rng + ?Sized>(inter: &SessionInteractions, vocab_size: usize, rng: &mut R) -> Option<usize> {
    if inter.items.len() >= vocab_size - FIRST_ITEM {
        return None;
    }
    loop {
        let j = rng.random_range(FIRST_ITEM..vocab_size);
        if inter.items.binary_search_by_key(&j, |c| c.0).is_err() {
            return Some(j);
        }
    }
}

/// Triples for one pass: one per positive interaction, sessions in order.
pub fn bpr_triples<R: Rng + ?Sized>(
    interactions: &[SessionInteractions],
    vocab_size: usize,
    config: &BaselineConfig,
    rng: &mut R,
) -> Vec<Triple> {
    let mut out = Vec::new();
    for (u, inter) in interactions.iter().enumerate() {
        let (positives, skipped) = bpr_pools(inter, config.variant);
        for &p in &positives {
            let neg = match config.variant {
                Variant::Orig => draw_unseen(inter, vocab_size, rng),
                Variant::Bl => {
                    let unseen = vocab_size - FIRST_ITEM - inter.items.len();
                    let pool = unseen + skipped.len();
                    if pool == 0 {
                        None
                    } else if rng.random_range(0..pool) < skipped.len() {
                        Some(skipped[rng.random_range(0..skipped.len())])
                    } else {
                        draw_unseen(inter, vocab_size, rng)
                    }
                }
                Variant::Nr => {
                    let r = config.skip_ratio;
                    if !skipped.is_empty() && rng.random::<f64>() < r / (1.0 + r) {
                        Some(skipped[rng.random_range(0..skipped.len())])
                    } else {
                        draw_unseen(inter, vocab_size, rng)
                            .or_else(|| skipped.first().copied())
                    }
                }
            };
            if let Some(n) = neg {
                out.push((u, p, n));
            }
        }
    }
    out
}

/// `-ln sigmoid(x)` computed without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Loss `-ln sigmoid(x_u . (y_p - y_n)) + reg/2 (|x_u|^2 + |y_p|^2 + |y_n|^2)`
/// and its gradients with respect to `x_u`, `y_p`, `y_n`.
pub fn bpr_triple_loss(
    xu: &[f64],
    yp: &[f64],
    yn: &[f64],
    reg: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x: f64 = xu.iter().zip(yp.iter().zip(yn)).map(|(a, (p, n))| a * (p - n)).sum();
    let sq = |v: &[f64]| dot(v, v);
    let loss = neg_log_sigmoid(x) + 0.5 * reg * (sq(xu) + sq(yp) + sq(yn));
    // d(-ln sigmoid(x))/dx = -(1 - sigmoid(x)) = -sigmoid(-x)
    let g = -crate::autodiff::sigmoid(-x);
    let gx = xu.iter().zip(yp.iter().zip(yn)).map(|(a, (p, n))| g * (p - n) + reg * a).collect();
    let gp = xu.iter().zip(yp).map(|(a, p)| g * a + reg * p).collect();
    let gn = xu.iter().zip(yn).map(|(a, n)| -g * a + reg * n).collect();
    (loss, gx, gp, gn)
}

/// Total triple loss and its gradient, for checking against finite differences.
pub fn bpr_objective(params: &MfParams, triples: &[Triple], reg: f64) -> (f64, MfParams) {
    let mut grad = MfParams {
        session_factors: Matrix::zeros(params.session_factors.rows(), params.session_factors.cols()),
        item_factors: Matrix::zeros(params.item_factors.rows(), params.item_factors.cols()),
    };
    let mut total = 0.0;
    for &(u, p, n) in triples {
        let (l, gx, gp, gn) = bpr_triple_loss(
            params.session_factors.row(u),
            params.item_factors.row(p),
            params.item_factors.row(n),
            reg,
        );
        total += l;
        crate::matrix::axpy(1.0, &gx, grad.session_factors.row_mut(u));
        crate::matrix::axpy(1.0, &gp, grad.item_factors.row_mut(p));
        crate::matrix::axpy(1.0, &gn, grad.item_factors.row_mut(n));
    }
    (total, grad)
}

/// Stochastic gradient descent on the triple loss, one update per triple.
pub fn bpr_train(
    interactions: &[SessionInteractions],
    vocab_size: usize,
    config: &BaselineConfig,
) -> Result<MfParams> {
    config.validate()?;
    let mut params = init_params(interactions.len(), vocab_size, config);
    let mut rng = stream(config.seed, Stream::Baseline);
    let probe = bpr_triples(interactions, vocab_size, config, &mut rng.clone());
    if probe.is_empty() {
        return Err(Error::Data("no (session, positive, negative) triple can be formed".into()));
    }
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        let mut triples = bpr_triples(interactions, vocab_size, config, &mut rng);
        rand::seq::SliceRandom::shuffle(triples.as_mut_slice(), &mut rng);
        for (u, p, n) in triples {
            let (_, gx, gp, gn) = bpr_triple_loss(
                params.session_factors.row(u),
                params.item_factors.row(p),
                params.item_factors.row(n),
                config.regularization,
            );
            crate::matrix::axpy(-lr, &gx, params.session_factors.row_mut(u));
            crate::matrix::axpy(-lr, &gp, params.item_factors.row_mut(p));
            crate::matrix::axpy(-lr, &gn, params.item_factors.row_mut(n));
        }
    }
    Ok(params)
}

/// Factor for a session not seen in training: one weighted least-squares
/// solve against the fixed item factors.
pub fn fold_in(params: &MfParams, inter: &SessionInteractions, config: &BaselineConfig) -> Vec<f64> {
    if inter.items.is_empty() {
        return vec![0.0; params.item_factors.cols()];
    }
    let y = &params.item_factors;
    let g = gram(y, FIRST_ITEM..y.rows());
    let cells = wrmf_cells(inter, config, y.rows() - FIRST_ITEM);
    solve_row(&g, y, &cells, config.regularization)
}

/// Rank of `target` by `dot(session factor, item factor)`, ties by index.
pub fn baseline_rank(item_factors: &Matrix, session_factor: &[f64], target: usize) -> usize {
    let scores: Vec<f64> = (0..item_factors.rows())
        .map(|j| dot(session_factor, item_factors.row(j)))
        .collect();
    rank_from_scores(&scores, target)
}

/// Interactions of every test prefix, one entry per dataset session
/// (empty for sessions too short to split).
pub fn test_prefix_interactions(dataset: &Dataset) -> Vec<SessionInteractions> {
    dataset
        .sessions
        .iter()
        .map(|s| match holdout_split(s) {
            Ok(h) => SessionInteractions::from_session(&h.test_prefix()),
            Err(_) => SessionInteractions::default(),
        })
        .collect()
}

/// Fits the configured baseline on every session's test prefix, so that each
/// test target is ranked with a session factor learned from exactly the
/// items preceding it.
pub fn fit(dataset: &Dataset, config: &BaselineConfig) -> Result<MfParams> {
    let inter = test_prefix_interactions(dataset);
    match config.method {
        Method::Wrmf => wrmf_train(&inter, dataset.vocab.len(), config),
        Method::Bpr => bpr_train(&inter, dataset.vocab.len(), config),
    }
}

/// Test-set metrics of a fitted baseline.
pub fn evaluate(params: &MfParams, dataset: &Dataset) -> Result<crate::eval::MetricsReport> {
    if params.session_factors.rows() != dataset.sessions.len()
        || params.item_factors.rows() != dataset.vocab.len()
    {
        return Err(Error::Integrity("baseline factors do not match the dataset".into()));
    }
    let (pos, skip) = crate::eval::collect_ranks(dataset, |i, _, target| {
        Ok(baseline_rank(&params.item_factors, params.session_factors.row(i), target))
    })?;
    crate::eval::compute_metrics(&pos, &skip)
}

/// Fraction of sampled item pairs whose model order matches the planted affinity order.
pub fn pairwise_accuracy(
    params: &MfParams,
    truth: &crate::synthetic::GroundTruth,
    pairs_per_session: usize,
    seed: u64,
) -> f64 {
    let mut rng = stream(seed, Stream::Sampling);
    let items = params.item_factors.rows();
    let (mut agree, mut total) = (0usize, 0usize);
    for (u, taste) in truth.tastes.iter().enumerate() {
        let x = params.session_factors.row(u);
        for _ in 0..pairs_per_session {
            let i = rng.random_range(FIRST_ITEM..items);
            let j = rng.random_range(FIRST_ITEM..items);
            let (ti, tj) = (truth.affinity(taste, i), truth.affinity(taste, j));
            if i == j || ti == tj {
                continue;
            }
            let (si, sj) = (dot(x, params.item_factors.row(i)), dot(x, params.item_factors.row(j)));
            total += 1;
            if (si > sj) == (ti > tj) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineCheckpointConfig {
    pub baseline: BaselineConfig,
    pub dataset_hash: String,
}

pub fn baseline_checkpoint(
    params: &MfParams,
    config: &BaselineCheckpointConfig,
    vocab_hash: &str,
) -> Result<Checkpoint> {
    let mut tensors = ParamSet::new();
    tensors.push("session_factors", params.session_factors.clone());
    tensors.push("item_factors", params.item_factors.clone());
    Ok(Checkpoint {
        kind: BASELINE_KIND.into(),
        config: serde_json::to_value(config)?,
        vocab_hash: vocab_hash.to_string(),
        tensors,
    })
}

pub fn load_baseline(checkpoint: &Checkpoint) -> Result<(MfParams, BaselineCheckpointConfig)> {
    if checkpoint.kind != BASELINE_KIND {
        return Err(Error::Integrity(format!(
            "checkpoint holds a `{}`, not a baseline",
            checkpoint.kind
        )));
    }
    let config: BaselineCheckpointConfig = serde_json::from_value(checkpoint.config.clone())?;
    let get = |name: &str| {
        checkpoint
            .tensors
            .by_name(name)
            .cloned()
            .ok_or_else(|| Error::Integrity(format!("baseline checkpoint lacks {name}")))
    };
    Ok((
        MfParams {
            session_factors: get("session_factors")?,
            item_factors: get("item_factors")?,
        },
        config,
    ))
}
