//! The recurrent reasoning cell.
//!
//! One step i: the control unit attends over the question's contextual
//! words to produce c_i; one read unit per modality attends over that
//! modality's timeline (all reads get the same c_i and the same previous
//! memory -- reads are parallel, not chained); the read results are fused
//! into a single representation by an affine map over their concatenation;
//! the write unit integrates the fused result into memory. The attention
//! score heads have no bias term: a bias shifts every logit equally and
//! softmax cancels it.

use crate::data::Modality;
use crate::encoders::{KbNodes, QueryNodes};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::rng::Rng;
use crate::tape::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Registry slots for one affine map y = x W + b with W [in x out].
#[derive(Clone, Copy, Debug)]
pub struct AffineIds {
    pub w: usize,
    pub b: usize,
}

/// Parameters of one modality's read unit.
#[derive(Clone, Debug)]
pub struct ReadIds {
    pub f_m: AffineIds,
    pub f_k: AffineIds,
    pub f_mk: AffineIds,
    /// Attention score map, d -> 1, no bias.
    pub score_w: usize,
}

/// Parameters of a full cell. Shared parts are reused identically at every
/// step; the question transform is per-step by default with a switch to
/// share a single transform across steps.
#[derive(Clone, Debug)]
pub struct CellIds {
    pub d: usize,
    pub p: usize,
    /// One entry per step, or a single shared entry.
    pub q_transform: Vec<AffineIds>,
    pub cq: AffineIds,
    /// Control attention score map, d -> 1, no bias.
    pub ctrl_score_w: usize,
    /// Read units in canonical modality order; disjoint parameter sets.
    pub reads: Vec<(Modality, ReadIds)>,
    /// Fusion weight [n*d x d] over the n fused modalities; absent when the
    /// cell fuses zero modalities (the fused result is then just the bias).
    pub fuse_w: Option<usize>,
    pub fuse_b: usize,
    pub write: AffineIds,
    pub c0: usize,
    pub m0: usize,
}

impl CellIds {
    pub fn read_ids(&self, m: Modality) -> Option<&ReadIds> {
        self.reads.iter().find(|(tag, _)| *tag == m).map(|(_, r)| r)
    }
}

fn glorot<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| T::from_f64(rng.range(-limit, limit)))
}

fn init_affine<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    rng: &mut Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<AffineIds> {
    let w = reg.insert(format!("{name}.w"), glorot(rng, d_in, d_out))?;
    let b = reg.insert(format!("{name}.b"), Tensor::zeros(vec![d_out]))?;
    Ok(AffineIds { w, b })
}

/// Registers one cell. `read_mods` lists the modalities that get read
/// units; `fuse_n` is how many of them the fusion layer combines (the
/// enabled subset may be smaller than the built subset so that ablations
/// keep a structurally identical registry).
pub fn init_cell<T: Scalar>(
    reg: &mut ParamRegistry<T>,
    rng: &mut Rng,
    prefix: &str,
    d: usize,
    p: usize,
    read_mods: &[Modality],
    fuse_n: usize,
    share_q_transform: bool,
) -> Result<CellIds> {
    let steps = if share_q_transform { 1 } else { p };
    let mut q_transform = Vec::with_capacity(steps);
    for i in 0..steps {
        let name = if share_q_transform {
            format!("{prefix}.f_q.shared")
        } else {
            format!("{prefix}.f_q.{}", i + 1)
        };
        q_transform.push(init_affine(reg, rng, &name, d, d)?);
    }
    let cq = init_affine(reg, rng, &format!("{prefix}.f_cq"), 2 * d, d)?;
    let ctrl_score_w = reg.insert(format!("{prefix}.f_c.w"), glorot(rng, d, 1))?;
    let mut reads = Vec::new();
    for &m in read_mods {
        let rp = format!("{prefix}.read.{}", m.tag());
        reads.push((
            m,
            ReadIds {
                f_m: init_affine(reg, rng, &format!("{rp}.f_m"), d, d)?,
                f_k: init_affine(reg, rng, &format!("{rp}.f_k"), d, d)?,
                f_mk: init_affine(reg, rng, &format!("{rp}.f_mk"), 2 * d, d)?,
                score_w: reg.insert(format!("{rp}.f_r.w"), glorot(rng, d, 1))?,
            },
        ));
    }
    let fuse_w = if fuse_n > 0 {
        Some(reg.insert(format!("{prefix}.fuse.w"), glorot(rng, fuse_n * d, d))?)
    } else {
        None
    };
    let fuse_b = reg.insert(format!("{prefix}.fuse.b"), Tensor::zeros(vec![d]))?;
    let write = init_affine(reg, rng, &format!("{prefix}.f_mr"), 2 * d, d)?;
    let c0 = reg.insert(format!("{prefix}.c0"), Tensor::zeros(vec![d]))?;
    let m0 = reg.insert(format!("{prefix}.m0"), Tensor::zeros(vec![d]))?;
    Ok(CellIds { d, p, q_transform, cq, ctrl_score_w, reads, fuse_w, fuse_b, write, c0, m0 })
}

/// x @ W + b for a row matrix or a stack of rows.
pub fn affine<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    ids: AffineIds,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(reg, ids.w);
    let b = g.param(reg, ids.b);
    let y = g.matmul(x, w)?;
    g.add_rows(y, b)
}

/// Control and memory threaded through the rollout; `i` counts completed
/// steps, with i = 0 holding the learned initial vectors.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub c: NodeId,
    pub m: NodeId,
    pub i: usize,
}

impl CellState {
    /// Initial state from the learned c0/m0 vectors.
    pub fn initial<T: Scalar>(
        g: &mut Graph<T>,
        reg: &ParamRegistry<T>,
        cell: &CellIds,
    ) -> Result<CellState> {
        let c0 = g.param(reg, cell.c0);
        let m0 = g.param(reg, cell.m0);
        let c = g.reshape(c0, vec![1, cell.d])?;
        let m = g.reshape(m0, vec![1, cell.d])?;
        Ok(CellState { c, m, i: 0 })
    }
}

/// Attention maps emitted by one step, for tracing and invariant checks,
/// plus the per-modality gathered matrices (the pre-attention
/// representations), which gradient probes need direct access to: their
/// bias rows influence attention logits uniformly across timesteps
/// whenever the ELU sits in its linear region, and softmax cancels
/// uniform shifts, so a loss on downstream values alone can give them
/// vanishing gradients.
#[derive(Debug)]
pub struct StepTrace {
    pub control: NodeId,
    pub reads: Vec<(Modality, NodeId)>,
    pub gathers: Vec<(Modality, NodeId)>,
}

/// Control unit for step `step` (1-based): attention over the contextual
/// words driven by the previous control and the (per-step) transformed
/// query; the new control is the attention-weighted sum of the words.
pub fn control_unit<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    cell: &CellIds,
    step: usize,
    c_prev: NodeId,
    q: NodeId,
    o: &QueryNodes,
) -> Result<(NodeId, NodeId)> {
    if step < 1 || step > cell.p {
        return Err(Error::StepOutOfRange { step, max: cell.p });
    }
    let tid = if cell.q_transform.len() == 1 { 0 } else { step - 1 };
    let fq = affine(g, reg, cell.q_transform[tid], q)?;
    let cq_in = g.concat(&[c_prev, fq], 1)?;
    let cq_lin = affine(g, reg, cell.cq, cq_in)?;
    let cq = g.elu(cq_lin);
    let cq_vec = g.reshape(cq, vec![cell.d])?;

    let weighted = g.mul_rows(o.o, cq_vec)?;
    let w_score = g.param(reg, cell.ctrl_score_w);
    let logits2 = g.matmul(weighted, w_score)?;
    let s = g.value(o.o).shape()[0];
    let logits = g.reshape(logits2, vec![s])?;
    let attn = g.masked_softmax(logits, &o.o_mask)?;
    let attn_row = g.reshape(attn, vec![1, s])?;
    let c_i = g.matmul(attn_row, o.o)?;
    Ok((c_i, attn))
}

/// Read unit: gathers information from each knowledge-base row (optionally
/// interacting with the previous memory), scores it against the control,
/// and returns the attention-weighted sum of the ORIGINAL rows.
pub fn read_unit<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    read: &ReadIds,
    m_prev: NodeId,
    kb: &KbNodes,
    c_i: NodeId,
) -> Result<ReadOut> {
    let d = g.value(m_prev).shape()[1];
    let fm = affine(g, reg, read.f_m, m_prev)?;
    let fm_vec = g.reshape(fm, vec![d])?;
    let fk = affine(g, reg, read.f_k, kb.k)?;
    let interact = g.mul_rows(fk, fm_vec)?;
    let cat = g.concat(&[interact, kb.k], 1)?;
    let info_lin = affine(g, reg, read.f_mk, cat)?;
    let info = g.elu(info_lin);

    let c_vec = g.reshape(c_i, vec![d])?;
    let scored = g.mul_rows(info, c_vec)?;
    let w_score = g.param(reg, read.score_w);
    let logits2 = g.matmul(scored, w_score)?;
    let l = g.value(kb.k).shape()[0];
    let logits = g.reshape(logits2, vec![l])?;
    let attn = g.masked_softmax(logits, &kb.mask)?;
    let attn_row = g.reshape(attn, vec![1, l])?;
    let r = g.matmul(attn_row, kb.k)?;
    Ok(ReadOut { r, attn, gathered: info })
}

/// Read-unit outputs: the read vector, its attention distribution, and the
/// gathered [L x d] matrix the attention was scored on.
#[derive(Clone, Copy, Debug)]
pub struct ReadOut {
    pub r: NodeId,
    pub attn: NodeId,
    pub gathered: NodeId,
}

/// Mid-level fusion: a purely affine map over the concatenated read
/// results. With zero read streams the result degenerates to the bias.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    cell: &CellIds,
    reads: &[NodeId],
) -> Result<NodeId> {
    let b = g.param(reg, cell.fuse_b);
    if reads.is_empty() {
        return g.reshape(b, vec![1, cell.d]);
    }
    let w = g.param(reg, cell.fuse_w.expect("fusion weight exists when streams do"));
    let cat = g.concat(reads, 1)?;
    let y = g.matmul(cat, w)?;
    g.add_rows(y, b)
}

/// Write unit: a single affine layer over [previous memory, fused read].
pub fn write_unit<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    cell: &CellIds,
    m_prev: NodeId,
    r: NodeId,
) -> Result<NodeId> {
    let cat = g.concat(&[m_prev, r], 1)?;
    affine(g, reg, cell.write, cat)
}

/// One full reasoning step: control, parallel reads over the given
/// knowledge bases (same c_i, same previous memory), fusion, write.
pub fn cell_step<T: Scalar>(
    g: &mut Graph<T>,
    reg: &ParamRegistry<T>,
    cell: &CellIds,
    state: CellState,
    q: NodeId,
    o: &QueryNodes,
    kbs: &[(Modality, &KbNodes)],
) -> Result<(CellState, StepTrace)> {
    if state.i >= cell.p {
        return Err(Error::StepOutOfRange { step: state.i + 1, max: cell.p });
    }
    let step = state.i + 1;
    let (c_i, ctrl_attn) = control_unit(g, reg, cell, step, state.c, q, o)?;

    let mut read_vals = Vec::with_capacity(kbs.len());
    let mut read_attns = Vec::with_capacity(kbs.len());
    let mut gathers = Vec::with_capacity(kbs.len());
    for &(m, kb) in kbs {
        let ids = cell.read_ids(m).ok_or(Error::MissingModality(m.tag()))?;
        let out = read_unit(g, reg, ids, state.m, kb, c_i)?;
        read_vals.push(out.r);
        read_attns.push((m, out.attn));
        gathers.push((m, out.gathered));
    }
    let r = fuse(g, reg, cell, &read_vals)?;
    let m_next = write_unit(g, reg, cell, state.m, r)?;
    Ok((
        CellState { c: c_i, m: m_next, i: step },
        StepTrace { control: ctrl_attn, reads: read_attns, gathers },
    ))
}
