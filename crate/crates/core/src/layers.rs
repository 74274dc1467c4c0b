//! Transformer sub-layers shared by the backbone and the fluency model,
//! stored as slots of a [`ParamTable`].

use alloc::format;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::init::{xavier, SeededRng};
use crate::params::ParamTable;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormSlots {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

pub(crate) fn add_norm(p: &mut ParamTable, name: &str, d: usize) -> NormSlots {
    NormSlots {
        gamma: p.add(format!("{name}.gamma"), Tensor::filled(1, d, 1.0)),
        beta: p.add(format!("{name}.beta"), Tensor::zeros(1, d)),
    }
}

pub(crate) fn add_attention(p: &mut ParamTable, rng: &mut SeededRng, name: &str, d: usize) -> AttentionSlots {
    let mut lin = |p: &mut ParamTable, which: &str| {
        let w = p.add(format!("{name}.w{which}"), xavier(rng, d, d));
        let b = p.add(format!("{name}.b{which}"), Tensor::zeros(1, d));
        (w, b)
    };
    let (wq, bq) = lin(p, "q");
    let (wk, bk) = lin(p, "k");
    let (wv, bv) = lin(p, "v");
    let (wo, bo) = lin(p, "o");
    AttentionSlots { wq, bq, wk, bk, wv, bv, wo, bo }
}

pub(crate) fn add_ffn(p: &mut ParamTable, rng: &mut SeededRng, name: &str, d: usize, f: usize) -> FfnSlots {
    FfnSlots {
        w1: p.add(format!("{name}.w1"), xavier(rng, d, f)),
        b1: p.add(format!("{name}.b1"), Tensor::zeros(1, f)),
        w2: p.add(format!("{name}.w2"), xavier(rng, f, d)),
        b2: p.add(format!("{name}.b2"), Tensor::zeros(1, d)),
    }
}

pub(crate) fn norm<'a>(g: &mut Graph<'a>, p: &'a ParamTable, n: NormSlots, x: Var) -> Var {
    let gamma = g.param(p.get(n.gamma));
    let beta = g.param(p.get(n.beta));
    g.layer_norm(x, gamma, beta)
}

fn linear<'a>(g: &mut Graph<'a>, p: &'a ParamTable, x: Var, w: usize, b: usize) -> Var {
    let w = g.param(p.get(w));
    let b = g.param(p.get(b));
    g.linear(x, w, b)
}

/// Multi-head scaled dot-product attention of `query` over `memory`.
pub(crate) fn attention<'a>(
    g: &mut Graph<'a>,
    p: &'a ParamTable,
    a: AttentionSlots,
    heads: usize,
    query: Var,
    memory: Var,
    causal: bool,
) -> Var {
    let q = linear(g, p, query, a.wq, a.bq);
    let k = linear(g, p, memory, a.wk, a.bk);
    let v = linear(g, p, memory, a.wv, a.bv);
    let dk = g.value(q).cols() / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dk, dk), g.slice_cols(k, h * dk, dk), g.slice_cols(v, h * dk, dk))
        };
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, scale);
        let w = g.softmax_rows(s, causal);
        outs.push(g.matmul(w, vh));
    }
    let ctx = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, p, ctx, a.wo, a.bo)
}

pub(crate) fn ffn<'a>(g: &mut Graph<'a>, p: &'a ParamTable, f: FfnSlots, x: Var) -> Var {
    let h = linear(g, p, x, f.w1, f.b1);
    let h = g.gelu(h);
    linear(g, p, h, f.w2, f.b2)
}

/// Fixed sinusoidal position table `(max_len x d)`.
pub(crate) fn sinusoidal(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / libm::pow(10000.0, exponent);
            t.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    t
}

/// Token embeddings plus the first `ids.len()` rows of `positions`.
pub(crate) fn embed_with_positions<'a>(g: &mut Graph<'a>, p: &'a ParamTable, table: usize, positions: &Tensor, ids: &[usize]) -> Var {
    let table = g.param(p.get(table));
    let x = g.gather_rows(table, ids);
    let d = positions.cols();
    let pos = Tensor::from_vec(ids.len(), d, positions.data()[..ids.len() * d].to_vec()).expect("positions cover max_len");
    let pos = g.constant(pos);
    g.add(x, pos)
}
