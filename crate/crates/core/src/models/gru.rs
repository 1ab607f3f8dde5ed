//! Single-layer gated recurrent encoder.
//!
//! ```text
//! z = sigmoid(x Wz + h Uz + bz)
//! r = sigmoid(x Wr + h Ur + br)
//! n = tanh(x Wn + (r * h) Un + bn)
//! h' = n + z * (h - n)
//! ```
//!
//! The input projections for all steps are computed in one product; the
//! hidden state of each step goes through an output projection.

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;
use crate::params::ParamSet;

use super::ITEM_EMBEDDINGS;

pub(super) fn layout(p: &mut ParamSet, d: usize) {
    p.push("gru.input.w", Matrix::zeros(d, 3 * d));
    p.push("gru.input.b", Matrix::zeros(1, 3 * d));
    p.push("gru.hidden_zr.w", Matrix::zeros(d, 2 * d));
    p.push("gru.hidden_n.w", Matrix::zeros(d, d));
    p.push("output.w", Matrix::zeros(d, d));
    p.push("output.b", Matrix::zeros(1, d));
}

pub(super) fn forward<'p>(tape: &mut Tape<'p>, params: &'p ParamSet, tokens: &[usize]) -> Var {
    let d = params.by_name(ITEM_EMBEDDINGS).map(Matrix::cols).unwrap_or(0);
    let x = tape.gather(params.expect_id(ITEM_EMBEDDINGS), tokens);
    let w_in = tape.param(params.expect_id("gru.input.w"));
    let b_in = tape.param(params.expect_id("gru.input.b"));
    let u_zr = tape.param(params.expect_id("gru.hidden_zr.w"));
    let u_n = tape.param(params.expect_id("gru.hidden_n.w"));

    let xw = tape.matmul(x, w_in);
    let xw = tape.add_row(xw, b_in);

    let mut h = tape.constant(Matrix::zeros(1, d));
    let mut states = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let xt = tape.select_rows(xw, &[t]);
        let x_zr = tape.slice_cols(xt, 0, 2 * d);
        let x_n = tape.slice_cols(xt, 2 * d, d);
        let h_zr = tape.matmul(h, u_zr);
        let zr = tape.add(x_zr, h_zr);
        let zr = tape.sigmoid(zr);
        let z = tape.slice_cols(zr, 0, d);
        let r = tape.slice_cols(zr, d, d);
        let rh = tape.mul(r, h);
        let h_n = tape.matmul(rh, u_n);
        let n = tape.add(x_n, h_n);
        let n = tape.tanh(n);
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        h = tape.add(n, zd);
        states.push(h);
    }
    let hs = tape.concat_rows(&states);
    let w_out = tape.param(params.expect_id("output.w"));
    let b_out = tape.param(params.expect_id("output.b"));
    let y = tape.matmul(hs, w_out);
    tape.add_row(y, b_out)
}
