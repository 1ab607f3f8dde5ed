//! Sequence encoders over a shared item embedding table.
//!
//! All four encoders map a token sequence to one predicted embedding per
//! position; item scores are inner products with the same table that
//! embeds the inputs.

mod attention;
mod caser;
mod gru;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::objective::{row_loss, LossBreakdown, LossConfig, NegativeScope, RowTerms};
use crate::params::{ParamId, ParamSet};
use crate::rng::{stream, Stream};
use crate::session_data::{build_targets, Session, END, FIRST_ITEM, MASK, PAD};

/// Half-width of the truncated-normal initializer.
pub const INIT_BOUND: f64 = 0.02;

pub const ITEM_EMBEDDINGS: &str = "item_embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "gru4rec")]
    Recurrent,
    #[serde(rename = "caser")]
    Convolutional,
    #[serde(rename = "sasrec")]
    CausalAttention,
    #[serde(rename = "bert4rec")]
    BidirectionalAttention,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Recurrent,
        Architecture::Convolutional,
        Architecture::CausalAttention,
        Architecture::BidirectionalAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Recurrent => "gru4rec",
            Architecture::Convolutional => "caser",
            Architecture::CausalAttention => "sasrec",
            Architecture::BidirectionalAttention => "bert4rec",
        }
    }

    pub fn is_causal(self) -> bool {
        self != Architecture::BidirectionalAttention
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            Architecture::CausalAttention | Architecture::BidirectionalAttention
        )
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru4rec" | "recurrent" | "gru" => Ok(Architecture::Recurrent),
            "caser" | "convolutional" => Ok(Architecture::Convolutional),
            "sasrec" | "causal-attention" => Ok(Architecture::CausalAttention),
            "bert4rec" | "bidirectional-attention" => Ok(Architecture::BidirectionalAttention),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Size of the index space, reserved tokens included.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mask_prob: f64,
    /// Convolutional encoder: number of most recent items per window.
    pub window: usize,
    /// Convolutional encoder: horizontal filters per filter height.
    pub horizontal_filters: usize,
    pub vertical_filters: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 32-dimensional embeddings, length 20, 2 blocks,
    /// 8 heads, mask rate 0.2.
    pub fn new(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            vocab_size,
            embed_dim: 32,
            max_len: 20,
            blocks: 2,
            heads: 8,
            mask_prob: 0.2,
            window: 5,
            horizontal_filters: 16,
            vertical_filters: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_ITEM {
            return Err(Error::Config("vocabulary has no real items".into()));
        }
        if self.embed_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("embed_dim and max_len must be positive".into()));
        }
        if self.architecture.is_attention() {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return Err(Error::Conflict {
                    first: "embed_dim".into(),
                    second: "heads".into(),
                    message: format!(
                        "embedding size {} is not divisible by {} heads",
                        self.embed_dim, self.heads
                    ),
                });
            }
            if self.blocks == 0 {
                return Err(Error::Config("attention encoders need at least one block".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.architecture == Architecture::Convolutional
            && (self.window == 0 || self.horizontal_filters == 0 || self.vertical_filters == 0)
        {
            return Err(Error::Config("convolutional encoder needs window and filters > 0".into()));
        }
        Ok(())
    }

    fn caser_window(&self) -> usize {
        self.window.min(self.max_len)
    }
}

/// How a bidirectional encoder assembles its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode<'a> {
    /// Causal encoders: every position. Bidirectional: the end token is
    /// appended and only its row is returned.
    Inference,
    /// Bidirectional only: the last prefix item is replaced by the end
    /// token, the listed positions by the mask token, and rows are returned
    /// for the masked positions plus the end token. Causal encoders ignore
    /// the positions.
    Training { masked: &'a [usize] },
}

/// Predicted embeddings with the position each row predicts from.
///
/// A row with `target_from[r] = f` predicts the first non-skipped item at a
/// position `>= f`: `f = t + 1` for causal row `t`, and `f = u` for a masked
/// (or end-token) position `u` of the bidirectional encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub rows: Matrix,
    pub target_from: Vec<usize>,
}

/// Scores `pred . M[j]` for each candidate, in candidate order.
pub fn score_items(pred: &[f64], item_embeddings: &Matrix, candidates: &[usize]) -> Vec<f64> {
    candidates
        .iter()
        .map(|&j| dot(pred, item_embeddings.row(j)))
        .collect()
}

/// Model configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// One session's worth of training input for a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub session: Session,
    /// Sampled-softmax negatives shared by every row of the session.
    pub negatives: Vec<usize>,
    /// Masked positions (bidirectional encoder only).
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Average over contributing rows of the whole batch.
    Mean,
    /// Sum over contributing rows.
    Sum,
}

impl Model {
    /// Allocates the parameter layout and fills it with truncated-normal draws.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = Self::layout(&config);
        let mut rng = stream(seed, Stream::Init);
        params.fill_truncated_normal(&mut rng, INIT_BOUND);
        Ok(Model { config, params })
    }

    /// Zero-valued parameters with the layout of `config`.
    pub fn layout(config: &ModelConfig) -> ParamSet {
        let mut p = ParamSet::new();
        let d = config.embed_dim;
        p.push(ITEM_EMBEDDINGS, Matrix::zeros(config.vocab_size, d));
        match config.architecture {
            Architecture::Recurrent => gru::layout(&mut p, d),
            Architecture::Convolutional => caser::layout(&mut p, config, config.caser_window()),
            Architecture::CausalAttention | Architecture::BidirectionalAttention => {
                attention::layout(&mut p, config)
            }
        }
        p
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        config.validate()?;
        if !Self::layout(&config).same_layout(&params) {
            return Err(Error::Integrity("parameters do not match model layout".into()));
        }
        Ok(Model { config, params })
    }

    pub fn item_embeddings(&self) -> &Matrix {
        self.params.get(self.embeddings_id())
    }

    fn embeddings_id(&self) -> ParamId {
        ParamId(0)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        // the bidirectional end token may sit one past max_len
        let limit = self.config.max_len + usize::from(!self.config.architecture.is_causal());
        if tokens.len() > limit {
            return Err(Error::Data(format!(
                "sequence of length {} exceeds limit {limit}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "index {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass over raw tokens; the result has one row per token.
    fn forward<'p>(&'p self, tape: &mut Tape<'p>, tokens: &[usize]) -> Var {
        match self.config.architecture {
            Architecture::Recurrent => gru::forward(tape, &self.params, tokens),
            Architecture::Convolutional => {
                caser::forward(tape, &self.params, &self.config, self.config.caser_window(), tokens)
            }
            Architecture::CausalAttention => {
                attention::forward(tape, &self.params, &self.config, tokens, true)
            }
            Architecture::BidirectionalAttention => {
                attention::forward(tape, &self.params, &self.config, tokens, false)
            }
        }
    }

    /// Forward pass over raw tokens (padding, mask and end tokens allowed),
    /// returning every row.
    pub fn forward_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Matrix::zeros(0, self.config.embed_dim));
        }
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, tokens);
        Ok(tape.value(out).clone())
    }

    /// Token sequence and output rows for a prefix.
    fn assemble(&self, prefix: &[usize], mode: EncodeMode<'_>) -> Result<(Vec<usize>, Vec<usize>)> {
        if let Some(bad) = prefix.iter().find(|&&i| i < FIRST_ITEM && i != PAD) {
            return Err(Error::Data(format!("reserved index {bad} inside a prefix")));
        }
        let n = prefix.len();
        if n > self.config.max_len {
            return Err(Error::Data(format!(
                "prefix of length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if self.config.architecture.is_causal() {
            return Ok((prefix.to_vec(), (0..n).collect()));
        }
        match mode {
            EncodeMode::Inference => {
                let mut tokens = prefix.to_vec();
                tokens.push(END);
                Ok((tokens, vec![n]))
            }
            EncodeMode::Training { masked } => {
                if n == 0 {
                    return Ok((Vec::new(), Vec::new()));
                }
                let mut tokens = prefix.to_vec();
                tokens[n - 1] = END;
                let mut rows: Vec<usize> = Vec::with_capacity(masked.len() + 1);
                for &u in masked {
                    if u + 1 >= n {
                        return Err(Error::Data(format!(
                            "masked position {u} outside prefix of length {n}"
                        )));
                    }
                    tokens[u] = MASK;
                    rows.push(u);
                }
                rows.sort_unstable();
                rows.dedup();
                rows.push(n - 1);
                Ok((tokens, rows))
            }
        }
    }

    /// Predicted embeddings for a session prefix.
    pub fn encode(&self, prefix: &[usize], mode: EncodeMode<'_>) -> Result<EncoderOutput> {
        let (tokens, rows) = self.assemble(prefix, mode)?;
        self.check_tokens(&tokens)?;
        if tokens.is_empty() {
            return Ok(EncoderOutput {
                rows: Matrix::zeros(0, self.config.embed_dim),
                target_from: Vec::new(),
            });
        }
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, &tokens);
        let all = tape.value(out);
        let mut m = Matrix::zeros(rows.len(), all.cols());
        for (i, &r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(all.row(r));
        }
        let target_from = if self.config.architecture.is_causal() {
            rows.iter().map(|r| r + 1).collect()
        } else {
            rows
        };
        Ok(EncoderOutput { rows: m, target_from })
    }

    /// The embedding that ranks candidates for the item following `prefix`.
    pub fn predict_next(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Data("cannot predict from an empty prefix".into()));
        }
        let out = self.encode(prefix, EncodeMode::Inference)?;
        Ok(out.rows.row(out.rows.rows() - 1).to_vec())
    }

    /// Batch loss and, if requested, its exact gradient.
    ///
    /// Per-row losses over contributing rows (rows with a next-positive
    /// target) are averaged or summed per `reduction`. A batch without any
    /// contributing row has zero loss and `positions == 0`. `batch_id` only
    /// labels numeric errors.
    pub fn loss_and_gradients(
        &self,
        batch: &[TrainingExample],
        loss: &LossConfig,
        reduction: Reduction,
        with_grad: bool,
        batch_id: usize,
    ) -> Result<(LossBreakdown, Option<ParamSet>)> {
        let mut grads = with_grad.then(|| self.params.zeros_like());
        let emb = self.item_embeddings();

        struct SessionPass<'p> {
            tape: Tape<'p>,
            out: Var,
            rows: Vec<(usize, crate::objective::RowLoss)>,
        }

        let mut passes = Vec::with_capacity(batch.len());
        for ex in batch {
            let mode = EncodeMode::Training { masked: &ex.masked };
            let (tokens, rows) = self.assemble(ex.session.items(), mode)?;
            self.check_tokens(&tokens)?;
            if tokens.is_empty() {
                continue;
            }
            let targets = build_targets(&ex.session);
            let mut tape = Tape::new(&self.params);
            let out = self.forward(&mut tape, &tokens);
            let causal = self.config.architecture.is_causal();
            let mut row_losses = Vec::new();
            for &r in &rows {
                let from = if causal { r + 1 } else { r };
                let Some(m) = targets.positive_from(from) else { continue };
                let contrastive_pos = match loss.nce_negative_scope {
                    NegativeScope::BetweenNextPositive => targets.skips_in(from, m),
                    NegativeScope::AllSessionSkips => targets.negatives_all.clone(),
                };
                let contrastive: Vec<usize> =
                    contrastive_pos.iter().map(|&p| ex.session.items()[p]).collect();
                let terms = RowTerms {
                    target: ex.session.items()[m],
                    sampled: &ex.negatives,
                    contrastive: &contrastive,
                };
                let pred = tape.value(out).row(r);
                let rl = row_loss(pred, emb, terms, loss.alpha, loss.beta, with_grad);
                row_losses.push((r, rl));
            }
            if !row_losses.is_empty() {
                passes.push(SessionPass {
                    tape,
                    out,
                    rows: row_losses,
                });
            }
        }

        if passes.is_empty() {
            return Ok((LossBreakdown::default(), grads));
        }

        let total: usize = passes.iter().map(|p| p.rows.len()).sum();
        let w = match reduction {
            Reduction::Mean => 1.0 / total as f64,
            Reduction::Sum => 1.0,
        };
        let mut breakdown = LossBreakdown::default();
        for pass in passes {
            let count = pass.rows.len();
            let (mut nll, mut nce) = (0.0, 0.0);
            for (_, rl) in &pass.rows {
                nll += rl.nll;
                nce += rl.nce;
            }
            breakdown.nll += w * nll;
            breakdown.nce += w * nce;
            breakdown.positions += count;

            if let Some(grads) = grads.as_mut() {
                let out_value = pass.tape.value(pass.out);
                let mut seed = Matrix::zeros(out_value.rows(), out_value.cols());
                let table = grads.get_mut(ParamId(0));
                for (r, rl) in &pass.rows {
                    let g = rl.grad.as_ref().expect("gradient requested");
                    axpy(w, &g.pred, seed.row_mut(*r));
                    let pred = out_value.row(*r);
                    for &(item, a, b) in &g.items {
                        let own = emb.row(item);
                        let dst = table.row_mut(item);
                        axpy(w * a, pred, dst);
                        if b != 0.0 {
                            axpy(w * b, own, dst);
                        }
                    }
                }
                pass.tape.backward(pass.out, seed, grads);
            }
        }
        breakdown.combined = loss.alpha * breakdown.nll + loss.beta * breakdown.nce;

        if !breakdown.combined.is_finite() {
            return Err(Error::Numeric {
                batch: batch_id,
                message: format!("loss evaluated to {}", breakdown.combined),
            });
        }
        if let Some(g) = &grads {
            if !g.all_finite() {
                return Err(Error::Numeric {
                    batch: batch_id,
                    message: "non-finite gradient".into(),
                });
            }
        }
        Ok((breakdown, grads))
    }

    /// Loss only. Errors when no row has a next-positive target.
    pub fn combined_loss(
        &self,
        batch: &[TrainingExample],
        loss: &LossConfig,
        reduction: Reduction,
    ) -> Result<LossBreakdown> {
        let (b, _) = self.loss_and_gradients(batch, loss, reduction, false, 0)?;
        require_positions(&b)?;
        Ok(b)
    }

    /// Gradient of the combined loss with respect to every parameter.
    pub fn backward(
        &self,
        batch: &[TrainingExample],
        loss: &LossConfig,
        reduction: Reduction,
        batch_id: usize,
    ) -> Result<(LossBreakdown, ParamSet)> {
        let (b, g) = self.loss_and_gradients(batch, loss, reduction, true, batch_id)?;
        require_positions(&b)?;
        Ok((b, g.expect("gradient requested")))
    }
}

fn require_positions(b: &LossBreakdown) -> Result<()> {
    if b.positions == 0 {
        return Err(Error::Data("batch has no position with a next-positive target".into()));
    }
    Ok(())
}
