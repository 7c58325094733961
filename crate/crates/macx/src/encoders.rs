//! Bidirectional LSTM encoders.
//!
//! Raw feature sequences become knowledge bases (one row per timestep),
//! the question becomes contextual words `O` plus a query vector `q`, and
//! each candidate answer becomes a single vector. Per-direction hidden
//! width is d/2 so the concatenated output is exactly the model width d.
//! Only the valid prefix of a sequence is run through the recurrence;
//! padded knowledge-base rows are zero and masked out of attention.

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Gate order used throughout: input, forget, cell, output.
pub const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Registry slots for one LSTM direction: per-gate input weights [d_in x h],
/// recurrent weights [h x h] and biases [h].
#[derive(Clone, Debug)]
pub struct LstmDirIds {
    pub w_x: [usize; 4],
    pub w_h: [usize; 4],
    pub b: [usize; 4],
    pub d_in: usize,
    pub hidden: usize,
}

/// A bidirectional encoder: forward and backward parameter sets.
#[derive(Clone, Debug)]
pub struct LstmIds {
    pub fwd: LstmDirIds,
    pub bwd: LstmDirIds,
}

impl LstmIds {
    pub fn d_in(&self) -> usize {
        self.fwd.d_in
    }

    /// Concatenated output width.
    pub fn d_out(&self) -> usize {
        self.fwd.hidden * 2
    }
}

fn glorot<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| T::from_f64(rng.range(-limit, limit)))
}

fn init_direction<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    rng: &mut Rng,
    prefix: &str,
    d_in: usize,
    hidden: usize,
) -> Result<LstmDirIds> {
    let mut w_x = [0usize; 4];
    let mut w_h = [0usize; 4];
    let mut b = [0usize; 4];
    for (gi, gate) in GATES.iter().enumerate() {
        w_x[gi] = reg.insert(format!("{prefix}.w_x_{gate}"), glorot(rng, d_in, hidden))?;
        w_h[gi] = reg.insert(format!("{prefix}.w_h_{gate}"), glorot(rng, hidden, hidden))?;
        // forget-gate bias starts at 1, everything else at 0
        let bias = if *gate == "f" {
            Tensor::from_fn(vec![hidden], |_| T::one())
        } else {
            Tensor::zeros(vec![hidden])
        };
        b[gi] = reg.insert(format!("{prefix}.b_{gate}"), bias)?;
    }
    Ok(LstmDirIds { w_x, w_h, b, d_in, hidden })
}

/// Registers a bidirectional LSTM with output width `d` (must be even).
pub fn init_lstm<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    rng: &mut Rng,
    prefix: &str,
    d_in: usize,
    d: usize,
) -> Result<LstmIds> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "lstm",
            shape: vec![d],
            reason: "output width must be even and positive".into(),
        });
    }
    let hidden = d / 2;
    Ok(LstmIds {
        fwd: init_direction(reg, rng, &format!("{prefix}.fwd"), d_in, hidden)?,
        bwd: init_direction(reg, rng, &format!("{prefix}.bwd"), d_in, hidden)?,
    })
}

/// Gate weights concatenated into fused matrices, once per sequence.
struct FusedDir {
    wx: NodeId, // [d_in, 4h]
    wh: NodeId, // [h, 4h]
    b: NodeId,  // [4h]
    hidden: usize,
}

fn fuse_direction<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    dir: &LstmDirIds,
) -> Result<FusedDir> {
    let wx_parts: Vec<NodeId> = dir.w_x.iter().map(|&i| g.param(reg, i)).collect();
    let wh_parts: Vec<NodeId> = dir.w_h.iter().map(|&i| g.param(reg, i)).collect();
    let b_parts: Vec<NodeId> = dir.b.iter().map(|&i| g.param(reg, i)).collect();
    Ok(FusedDir {
        wx: g.concat(&wx_parts, 1)?,
        wh: g.concat(&wh_parts, 1)?,
        b: g.concat(&b_parts, 0)?,
        hidden: dir.hidden,
    })
}

/// One recurrence step given the precomputed input projection
/// `zxb = x @ Wx + b` for this timestep.
fn step_fused<T: Scalar>(
    g: &mut Graph<T>,
    fused: &FusedDir,
    zxb: NodeId, // [1, 4h]
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h = fused.hidden;
    let rec = g.matmul(h_prev, fused.wh)?;
    let z = g.add(zxb, rec)?;
    let zi = g.narrow(z, 1, 0, h)?;
    let zf = g.narrow(z, 1, h, h)?;
    let zg = g.narrow(z, 1, 2 * h, h)?;
    let zo = g.narrow(z, 1, 3 * h, h)?;
    let gate_i = g.sigmoid(zi);
    let gate_f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let gate_o = g.sigmoid(zo);
    let keep = g.mul(gate_f, c_prev)?;
    let write = g.mul(gate_i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c);
    let h_out = g.mul(gate_o, c_act)?;
    Ok((h_out, c))
}

/// Standard LSTM recurrence for a single timestep:
/// sigmoid input/forget/output gates, tanh candidate and output activation.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    dir: &LstmDirIds,
    x: NodeId,      // [1, d_in]
    h_prev: NodeId, // [1, h]
    c_prev: NodeId, // [1, h]
) -> Result<(NodeId, NodeId)> {
    let (_, xw) = g.value(x).dims2()?;
    if xw != dir.d_in
        || g.value(h_prev).numel() != dir.hidden
        || g.value(c_prev).numel() != dir.hidden
    {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![dir.d_in, dir.hidden],
        });
    }
    let fused = fuse_direction(g, reg, dir)?;
    let zx = g.matmul(x, fused.wx)?;
    let bm = g.reshape(fused.b, vec![1, 4 * dir.hidden])?;
    let zxb = g.add(zx, bm)?;
    step_fused(g, &fused, zxb, h_prev, c_prev)
}

/// Hidden states over the valid prefix, one node per timestep in sequence
/// order. `reverse` runs the recurrence from the last valid step backwards
/// (results still indexed by position).
fn run_direction<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    dir: &LstmDirIds,
    x_valid: NodeId, // [valid, d_in]
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let (valid, _) = g.value(x_valid).dims2()?;
    let fused = fuse_direction(g, reg, dir)?;
    let zx = g.matmul(x_valid, fused.wx)?;
    let zxb = g.add_rows(zx, fused.b)?; // [valid, 4h]

    let mut h = g.input(Tensor::zeros(vec![1, dir.hidden]));
    let mut c = g.input(Tensor::zeros(vec![1, dir.hidden]));
    let mut out: Vec<Option<NodeId>> = vec![None; valid];
    let order: Vec<usize> =
        if reverse { (0..valid).rev().collect() } else { (0..valid).collect() };
    for t in order {
        let z_t = g.narrow(zxb, 0, t, 1)?;
        let (h_new, c_new) = step_fused(g, &fused, z_t, h, c)?;
        h = h_new;
        c = c_new;
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Graph handles for an encoded knowledge base.
pub struct KbNodes {
    /// [L x d]; padded rows are zero.
    pub k: NodeId,
    pub mask: Vec<bool>,
}

/// Graph handles for an encoded question.
pub struct QueryNodes {
    /// Contextual words, [S x d] over the valid length only.
    pub o: NodeId,
    pub o_mask: Vec<bool>,
    /// Query vector [1 x d]: final forward and final backward hidden states.
    pub q: NodeId,
}

fn check_width(seq: &FeatureSequence, ids: &LstmIds) -> Result<()> {
    if seq.width() != ids.d_in() {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![seq.len(), seq.width()],
            rhs: vec![ids.d_in()],
        });
    }
    Ok(())
}

fn valid_input<T: Scalar>(g: &mut Graph<T>, seq: &FeatureSequence) -> NodeId {
    let v = seq.valid_len();
    let w = seq.width();
    let data: Vec<T> = seq.data()[..v * w].iter().map(|&x| T::from_f32(x)).collect();
    g.input(Tensor::from_raw(vec![v, w], data))
}

fn bidirectional_rows<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    ids: &LstmIds,
    seq: &FeatureSequence,
) -> Result<(Vec<NodeId>, NodeId, NodeId)> {
    let x = valid_input(g, seq);
    let fwd = run_direction(g, reg, &ids.fwd, x, false)?;
    let bwd = run_direction(g, reg, &ids.bwd, x, true)?;
    let valid = seq.valid_len();
    let mut rows = Vec::with_capacity(valid);
    for t in 0..valid {
        rows.push(g.concat(&[fwd[t], bwd[t]], 1)?);
    }
    // last hidden states: forward at the end, backward at the start
    Ok((rows, fwd[valid - 1], bwd[0]))
}

/// Encodes a modality sequence into a knowledge base: row t concatenates
/// the forward hidden state over the valid prefix with the backward hidden
/// state over the valid suffix; padded rows are zero and the mask is copied
/// from the input.
pub fn encode_bidirectional<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    ids: &LstmIds,
    seq: &FeatureSequence,
) -> Result<KbNodes> {
    check_width(seq, ids)?;
    let (mut rows, _, _) = bidirectional_rows(g, reg, ids, seq)?;
    let d = ids.d_out();
    for _ in seq.valid_len()..seq.len() {
        rows.push(g.input(Tensor::zeros(vec![1, d])));
    }
    let k = g.concat(&rows, 0)?;
    Ok(KbNodes { k, mask: seq.mask().to_vec() })
}

/// Encodes the question into contextual words `O` (valid rows only) and the
/// query vector `q` built from the final hidden states of both directions.
pub fn encode_question<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    ids: &LstmIds,
    seq: &FeatureSequence,
) -> Result<QueryNodes> {
    check_width(seq, ids)?;
    let (rows, last_fwd, last_bwd) = bidirectional_rows(g, reg, ids, seq)?;
    let o = g.concat(&rows, 0)?;
    let q = g.concat(&[last_fwd, last_bwd], 1)?;
    Ok(QueryNodes { o, o_mask: vec![true; seq.valid_len()], q })
}

/// Encodes a candidate answer into its vector representation (the same
/// last-hidden-state rule as the query). All candidates share one encoder.
pub fn encode_answer<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    ids: &LstmIds,
    seq: &FeatureSequence,
) -> Result<NodeId> {
    check_width(seq, ids)?;
    let (_, last_fwd, last_bwd) = bidirectional_rows(g, reg, ids, seq)?;
    g.concat(&[last_fwd, last_bwd], 1)
}
