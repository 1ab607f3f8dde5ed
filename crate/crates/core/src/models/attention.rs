//! Self-attentive encoders with learned positions and pre-layer-norm blocks.
//!
//! The causal form bans attention to later positions; the bidirectional
//! form attends everywhere. Both ignore padding keys. The bidirectional form
//! adds a GELU projection head before scoring.

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;
use crate::params::ParamSet;
use crate::session_data::PAD;

use super::{ModelConfig, ITEM_EMBEDDINGS};

const POSITIONS: &str = "positional_embeddings";

fn block_name(b: usize, part: &str) -> String {
    format!("block{b}.{part}")
}

pub(super) fn layout(p: &mut ParamSet, config: &ModelConfig) {
    let d = config.embed_dim;
    // spare row: the end token may follow a full-length prefix
    p.push(POSITIONS, Matrix::zeros(config.max_len + 1, d));
    for b in 0..config.blocks {
        p.push(block_name(b, "ln1.gamma"), Matrix::zeros(1, d));
        p.push(block_name(b, "ln1.beta"), Matrix::zeros(1, d));
        for w in ["wq", "wk", "wv", "wo"] {
            p.push(block_name(b, w), Matrix::zeros(d, d));
        }
        p.push(block_name(b, "ln2.gamma"), Matrix::zeros(1, d));
        p.push(block_name(b, "ln2.beta"), Matrix::zeros(1, d));
        p.push(block_name(b, "ffn.w1"), Matrix::zeros(d, d));
        p.push(block_name(b, "ffn.b1"), Matrix::zeros(1, d));
        p.push(block_name(b, "ffn.w2"), Matrix::zeros(d, d));
        p.push(block_name(b, "ffn.b2"), Matrix::zeros(1, d));
    }
    p.push("final_ln.gamma", Matrix::zeros(1, d));
    p.push("final_ln.beta", Matrix::zeros(1, d));
    if config.architecture == super::Architecture::BidirectionalAttention {
        p.push("head.w", Matrix::zeros(d, d));
        p.push("head.b", Matrix::zeros(1, d));
    }
}

pub(super) fn forward<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    config: &ModelConfig,
    tokens: &[usize],
    causal: bool,
) -> Var {
    let n = tokens.len();
    let d = config.embed_dim;
    let heads = config.heads;
    let dh = d / heads;
    let p = |name: &str| params.expect_id(name);

    let mut x = tape.gather(p(ITEM_EMBEDDINGS), tokens);
    if causal {
        x = tape.scale(x, (d as f64).sqrt());
    }
    let positions: Vec<usize> = (0..n).collect();
    let pos = {
        let table = tape.param(p(POSITIONS));
        tape.select_rows(table, &positions)
    };
    x = tape.add(x, pos);

    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = tokens[j] != PAD && (!causal || j <= i);
        }
    }
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for b in 0..config.blocks {
        let g1 = tape.param(p(&block_name(b, "ln1.gamma")));
        let b1 = tape.param(p(&block_name(b, "ln1.beta")));
        let h = tape.layer_norm(x, g1, b1);
        let wq = tape.param(p(&block_name(b, "wq")));
        let wk = tape.param(p(&block_name(b, "wk")));
        let wv = tape.param(p(&block_name(b, "wv")));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(k, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, inv_sqrt);
            let a = tape.masked_softmax(s, &allowed);
            outs.push(tape.matmul(a, vh));
        }
        let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let wo = tape.param(p(&block_name(b, "wo")));
        let att = tape.matmul(att, wo);
        x = tape.add(x, att);

        let g2 = tape.param(p(&block_name(b, "ln2.gamma")));
        let b2 = tape.param(p(&block_name(b, "ln2.beta")));
        let h = tape.layer_norm(x, g2, b2);
        let w1 = tape.param(p(&block_name(b, "ffn.w1")));
        let c1 = tape.param(p(&block_name(b, "ffn.b1")));
        let w2 = tape.param(p(&block_name(b, "ffn.w2")));
        let c2 = tape.param(p(&block_name(b, "ffn.b2")));
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, c1);
        let f = if causal { tape.relu(f) } else { tape.gelu(f) };
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, c2);
        x = tape.add(x, f);
    }
    let g = tape.param(p("final_ln.gamma"));
    let bt = tape.param(p("final_ln.beta"));
    let mut out = tape.layer_norm(x, g, bt);
    if !causal {
        let hw = tape.param(p("head.w"));
        let hb = tape.param(p("head.b"));
        out = tape.matmul(out, hw);
        out = tape.add_row(out, hb);
        out = tape.gelu(out);
    }
    out
}
