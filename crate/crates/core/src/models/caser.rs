//! Convolutional encoder over the last `L` item embeddings.
//!
//! For position `t` the window holds the embeddings of positions
//! `t-L+1..=t` (zeros before the session start). Horizontal filters of every
//! height `h` in `1..=L` slide over the window and are max-pooled; vertical
//! filters take weighted sums of the window rows. Both feature sets are
//! concatenated and projected back to `d` through a ReLU layer.

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;
use crate::params::ParamSet;

use super::{ModelConfig, ITEM_EMBEDDINGS};

fn horizontal(h: usize, part: &str) -> String {
    format!("caser.h{h}.{part}")
}

pub(super) fn layout(p: &mut ParamSet, config: &ModelConfig, window: usize) {
    let d = config.embed_dim;
    let fh = config.horizontal_filters;
    let fv = config.vertical_filters;
    for h in 1..=window {
        p.push(horizontal(h, "w"), Matrix::zeros(h * d, fh));
        p.push(horizontal(h, "b"), Matrix::zeros(1, fh));
    }
    p.push("caser.v.w", Matrix::zeros(window, fv));
    p.push("caser.fc.w", Matrix::zeros(window * fh + fv * d, d));
    p.push("caser.fc.b", Matrix::zeros(1, d));
}

/// Row lists of all height-`h` sub-windows of each position's window, position-major.
fn sub_windows(n: usize, window: usize, h: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(n * (window - h + 1));
    for t in 0..n {
        for s in 0..=window - h {
            let rows = (0..h)
                .map(|k| {
                    // position t - window + 1 + s + k, if non-negative
                    (t + 1 + s + k).checked_sub(window)
                })
                .collect();
            out.push(rows);
        }
    }
    out
}

pub(super) fn forward<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    config: &ModelConfig,
    window: usize,
    tokens: &[usize],
) -> Var {
    let n = tokens.len();
    let d = config.embed_dim;
    let p = |name: &str| params.expect_id(name);
    let e = tape.gather(p(ITEM_EMBEDDINGS), tokens);

    let mut features = Vec::with_capacity(window + 1);
    for h in 1..=window {
        let stacked = tape.window_concat(e, sub_windows(n, window, h));
        let w = tape.param(p(&horizontal(h, "w")));
        let b = tape.param(p(&horizontal(h, "b")));
        let c = tape.matmul(stacked, w);
        let c = tape.add_row(c, b);
        let c = tape.relu(c);
        features.push(tape.group_max(c, window - h + 1));
    }
    let full = tape.window_concat(e, sub_windows(n, window, window));
    let wv = tape.param(p("caser.v.w"));
    features.push(tape.vertical_conv(full, wv, d));

    let z = tape.concat_cols(&features);
    let w = tape.param(p("caser.fc.w"));
    let b = tape.param(p("caser.fc.b"));
    let y = tape.matmul(z, w);
    let y = tape.add_row(y, b);
    tape.relu(y)
}
