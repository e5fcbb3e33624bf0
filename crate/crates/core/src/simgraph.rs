//! Similarity-graph machinery: top-k cosine graphs per modality, modality
//! fusion, the augmented user-item block adjacency with symmetric-degree
//! normalization, training-time edge denoising, and the learned gate that
//! rescales similarity edges on the tape.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel;
use crate::real::Real;
use crate::sparse::{CsrPattern, SparseCsr};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Rows processed per block when scanning for neighbors; bounds the live
/// similarity buffer to block * n floats.
pub const DEFAULT_BLOCK_ROWS: usize = 2048;

/// Directed top-k cosine graph. Row weights are clamped to [0, 1] after
/// selection; self-loops are excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub n: usize,
    pub k: usize,
    pub csr: SparseCsr<f32>,
}

/// Keeps each row's k strongest cosine neighbors. Selection runs on raw
/// similarities (ties broken toward the lower index); negatives clamp to
/// zero afterwards so downstream degrees stay nonnegative. Zero-norm rows
/// score zero against everything.
pub fn cosine_topk(feats: &Tensor<f32>, k: usize) -> Result<KnnGraph> {
    cosine_topk_blocked(feats, k, DEFAULT_BLOCK_ROWS)
}

pub fn cosine_topk_blocked(feats: &Tensor<f32>, k: usize, block_rows: usize) -> Result<KnnGraph> {
    let n = feats.rows();
    let d = feats.cols();
    if k < 1 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    if n < 2 {
        return Err(Error::Config(format!("top-k needs >= 2 rows, got {n}")));
    }
    let block_rows = block_rows.max(1);

    let mut normed = vec![0.0f32; n * d];
    for r in 0..n {
        let row = feats.row(r);
        let sq: f32 = row.iter().map(|v| v * v).sum();
        if sq > 0.0 {
            let inv = sq.sqrt().recip();
            for (o, &v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
    }

    let per_row: Vec<Vec<(usize, f32)>> = parallel::map_ranges(n, block_rows, |range| {
        let mut out = Vec::with_capacity(range.len());
        let mut sims = vec![0.0f32; n];
        let mut cand: Vec<(usize, f32)> = Vec::with_capacity(n - 1);
        for block_start in (range.start..range.end).step_by(block_rows) {
            let block_end = (block_start + block_rows).min(range.end);
            for r in block_start..block_end {
                let a = &normed[r * d..(r + 1) * d];
                for (c, s) in sims.iter_mut().enumerate() {
                    let b = &normed[c * d..(c + 1) * d];
                    let mut acc = 0.0f32;
                    for (&x, &y) in a.iter().zip(b) {
                        acc += x * y;
                    }
                    *s = acc;
                }
                cand.clear();
                cand.extend((0..n).filter(|&c| c != r).map(|c| (c, sims[c])));
                let keep = k.min(cand.len());
                cand.select_nth_unstable_by(keep - 1, |a, b| {
                    b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                });
                let mut kept: Vec<(usize, f32)> = cand[..keep]
                    .iter()
                    .map(|&(c, s)| (c, s.clamp(0.0, 1.0)))
                    .collect();
                kept.sort_unstable_by_key(|e| e.0);
                out.push(kept);
            }
        }
        out
    });

    let mut trips = Vec::new();
    for (r, kept) in per_row.iter().enumerate() {
        for &(c, w) in kept {
            trips.push((r, c, w));
        }
    }
    Ok(KnnGraph {
        n,
        k,
        csr: SparseCsr::from_triplets(n, n, &trips)?,
    })
}

/// Sums two modality graphs over the union of their supports.
pub fn fuse_modal_graphs(text: &KnnGraph, visual: &KnnGraph) -> Result<SparseCsr<f32>> {
    if text.n != visual.n {
        return Err(Error::dim(
            "fuse_modal_graphs",
            format!("{} vs {} nodes", text.n, visual.n),
        ));
    }
    text.csr.add(&visual.csr)
}

/// Block adjacency over users then items:
/// similarity blocks on the diagonal, interactions off-diagonal.
#[derive(Clone, Debug)]
pub struct AugmentedGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub a: SparseCsr<f32>,
    pub a_hat: SparseCsr<f32>,
}

/// Assembles [[Ru, R], [R^T, Ri]] with user rows 0..|U| and item rows
/// |U|..|U|+|I|, then normalizes. Missing similarity blocks stay empty.
pub fn assemble_augmented(
    r: &SparseCsr<f32>,
    ru: Option<&SparseCsr<f32>>,
    ri: Option<&SparseCsr<f32>>,
) -> Result<AugmentedGraph> {
    let (nu, ni) = (r.rows(), r.cols());
    if let Some(g) = ru {
        if g.rows() != nu || g.cols() != nu {
            return Err(Error::dim(
                "assemble_augmented",
                format!("user block {}x{} for {nu} users", g.rows(), g.cols()),
            ));
        }
    }
    if let Some(g) = ri {
        if g.rows() != ni || g.cols() != ni {
            return Err(Error::dim(
                "assemble_augmented",
                format!("item block {}x{} for {ni} items", g.rows(), g.cols()),
            ));
        }
    }
    let rt = r.transpose();
    let n = nu + ni;
    let mut trips = Vec::with_capacity(
        r.nnz() * 2 + ru.map_or(0, |g| g.nnz()) + ri.map_or(0, |g| g.nnz()),
    );
    if let Some(g) = ru {
        trips.extend(g.iter().map(|((a, b), v)| (a, b, v)));
    }
    trips.extend(r.iter().map(|((u, i), v)| (u, nu + i, v)));
    trips.extend(rt.iter().map(|((i, u), v)| (nu + i, u, v)));
    if let Some(g) = ri {
        trips.extend(g.iter().map(|((a, b), v)| (nu + a, nu + b, v)));
    }
    let a = SparseCsr::from_triplets(n, n, &trips)?;
    let a_hat = laplacian_normalize(&a)?;
    Ok(AugmentedGraph {
        n_users: nu,
        n_items: ni,
        a,
        a_hat,
    })
}

/// Symmetric degree normalization A_ij / sqrt(d_i * d_j) with d taken from
/// row sums. Entries touching a zero-degree endpoint become zero instead of
/// dividing by zero; all inputs must be nonnegative.
pub fn laplacian_normalize<T: Real>(a: &SparseCsr<T>) -> Result<SparseCsr<T>> {
    if a.values().iter().any(|&v| v < T::ZERO) {
        return Err(Error::Contract(
            "laplacian_normalize requires nonnegative entries".into(),
        ));
    }
    let degrees = a.row_sums();
    let inv_sqrt: Vec<T> = degrees
        .iter()
        .map(|&d| if d > T::ZERO { d.sqrt().recip() } else { T::ZERO })
        .collect();
    let mut out = a.clone();
    let row_of = a.pattern().slot_rows();
    for (slot, v) in out.values_mut().iter_mut().enumerate() {
        let r = row_of[slot];
        let c = a.col_indices()[slot];
        *v = *v * inv_sqrt[r] * inv_sqrt[c];
    }
    Ok(out)
}

/// Training-time interaction dropout: keeps ceil((1-rho) * nnz) edges of R,
/// sampled without replacement with probability proportional to
/// 1/sqrt(d_u * d_i). Inference always uses the full matrix.
pub fn denoise<R: Rng>(r: &SparseCsr<f32>, rho: f64, rng: &mut R) -> Result<SparseCsr<f32>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("denoise ratio must be in [0,1), got {rho}")));
    }
    if rho == 0.0 || r.nnz() == 0 {
        return Ok(r.clone());
    }
    let keep = (((1.0 - rho) * r.nnz() as f64).ceil() as usize).min(r.nnz());
    let user_deg = r.row_sums();
    let item_deg = r.transpose().row_sums();

    // weighted sampling without replacement via exponential keys:
    // ln(u)/w ranks identically to u^(1/w)
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(r.nnz());
    for ((u, i), _) in r.iter() {
        let w = 1.0 / (user_deg[u] as f64 * item_deg[i] as f64).sqrt();
        let key = rng.gen_range(0.0f64..1.0).max(f64::MIN_POSITIVE).ln() / w;
        keyed.push((key, u, i));
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let trips: Vec<(usize, usize, f32)> = keyed[..keep]
        .iter()
        .map(|&(_, u, i)| (u, i, r.get(u, i)))
        .collect();
    SparseCsr::from_triplets(r.rows(), r.cols(), &trips)
}

/// Rebuilds both similarity graphs from fused embeddings; used at inference
/// in place of the gated training-time graphs.
pub fn inference_graphs(
    fused_user: &Tensor<f32>,
    fused_item: &Tensor<f32>,
    k: usize,
) -> Result<(KnnGraph, KnnGraph)> {
    Ok((cosine_topk(fused_user, k)?, cosine_topk(fused_item, k)?))
}

/// Gate parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    pub w0: TensorId,
    pub w1: TensorId,
    pub b0: TensorId,
    pub b1: TensorId,
}

/// Rescales every edge (a, b) of a similarity graph by
/// sigmoid(relu(h_a * W0 + b0) . relu(h_b * W1 + b1)), differentiably.
/// Returns the graph pattern plus the gated edge values in slot order.
pub fn adaptive_weights<T: Real>(
    tape: &mut Tape<T>,
    graph: &SparseCsr<f32>,
    h_src: TensorId,
    h_dst: TensorId,
    gate: &GateIds,
) -> Result<(Rc<CsrPattern>, TensorId)> {
    let (n_src, _) = tape.shape(h_src);
    let (n_dst, _) = tape.shape(h_dst);
    if graph.rows() != n_src || graph.cols() != n_dst {
        return Err(Error::dim(
            "adaptive_weights",
            format!(
                "graph {}x{} vs embeddings {n_src}/{n_dst}",
                graph.rows(),
                graph.cols()
            ),
        ));
    }
    let pattern = graph.pattern();
    let src_idx = Rc::new(pattern.slot_rows());
    let dst_idx = Rc::new(pattern.col_idx.clone());

    let p0 = tape.matmul(h_src, gate.w0)?;
    let p0 = tape.add_row(p0, gate.b0)?;
    let p0 = tape.relu(p0);
    let p1 = tape.matmul(h_dst, gate.w1)?;
    let p1 = tape.add_row(p1, gate.b1)?;
    let p1 = tape.relu(p1);

    let lhs = tape.row_gather(p0, src_idx)?;
    let rhs = tape.row_gather(p1, dst_idx)?;
    let prod = tape.mul_elem(lhs, rhs)?;
    let inner = tape.row_sum(prod);
    let gates = tape.sigmoid(inner);

    let base = Tensor::from_vec(
        graph.nnz(),
        1,
        graph.values().iter().map(|&v| T::from_f32(v)).collect(),
    )?;
    let base = tape.constant(base);
    let gated = tape.mul_elem(gates, base)?;
    Ok((pattern, gated))
}

/// Precomputed wiring for assembling the augmented adjacency on the tape:
/// slot permutation from the concatenated block values plus endpoint indices
/// for degree computation.
pub struct AssemblyPlan {
    pub n_users: usize,
    pub n_items: usize,
    pub pattern: Rc<CsrPattern>,
    perm: Rc<Vec<usize>>,
    slot_rows: Rc<Vec<usize>>,
    slot_cols: Rc<Vec<usize>>,
    r_vals: Vec<f32>,
    rt_vals: Vec<f32>,
}

impl AssemblyPlan {
    /// `ru`/`ri` give block patterns whose values will arrive on the tape;
    /// `r` contributes static interaction edges (already denoised in
    /// training).
    pub fn new(r: &SparseCsr<f32>, ru: &CsrPattern, ri: &CsrPattern) -> Result<AssemblyPlan> {
        let (nu, ni) = (r.rows(), r.cols());
        if ru.rows != nu || ru.cols != nu || ri.rows != ni || ri.cols != ni {
            return Err(Error::dim(
                "assembly_plan",
                format!(
                    "blocks {}x{} / {}x{} for {nu} users, {ni} items",
                    ru.rows, ru.cols, ri.rows, ri.cols
                ),
            ));
        }
        let rt = r.transpose();
        let (eu, er, ei) = (ru.nnz(), r.nnz(), ri.nnz());
        let n = nu + ni;
        let total = eu + 2 * er + ei;

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(total);
        let mut perm = Vec::with_capacity(total);
        row_ptr.push(0);
        for u in 0..nu {
            for (j, &c) in ru.row_cols(u).iter().enumerate() {
                col_idx.push(c);
                perm.push(ru.row_ptr[u] + j);
            }
            for (j, &c) in r.row_cols(u).iter().enumerate() {
                col_idx.push(nu + c);
                perm.push(eu + r.row_ptr()[u] + j);
            }
            row_ptr.push(col_idx.len());
        }
        for i in 0..ni {
            for (j, &c) in rt.row_cols(i).iter().enumerate() {
                col_idx.push(c);
                perm.push(eu + er + rt.row_ptr()[i] + j);
            }
            for (j, &c) in ri.row_cols(i).iter().enumerate() {
                col_idx.push(nu + c);
                perm.push(eu + 2 * er + ri.row_ptr[i] + j);
            }
            row_ptr.push(col_idx.len());
        }
        let pattern = Rc::new(CsrPattern {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
        });
        let slot_rows = Rc::new(pattern.slot_rows());
        let slot_cols = Rc::new(pattern.col_idx.clone());
        Ok(AssemblyPlan {
            n_users: nu,
            n_items: ni,
            pattern: Rc::clone(&pattern),
            perm: Rc::new(perm),
            slot_rows,
            slot_cols,
            r_vals: r.values().to_vec(),
            rt_vals: rt.values().to_vec(),
        })
    }

    /// Joins block edge values, fills the augmented slot order, and applies
    /// symmetric degree normalization, all on the tape so gradients reach
    /// the gated blocks through the degrees as well.
    pub fn normalize_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ru_vals: TensorId,
        ri_vals: TensorId,
    ) -> Result<TensorId> {
        let n = self.n_users + self.n_items;
        let to_tensor = |vals: &[f32]| -> Result<Tensor<T>> {
            Tensor::from_vec(vals.len(), 1, vals.iter().map(|&v| T::from_f32(v)).collect())
        };
        let r_leaf = tape.constant(to_tensor(&self.r_vals)?);
        let rt_leaf = tape.constant(to_tensor(&self.rt_vals)?);
        let top = tape.vconcat(ru_vals, r_leaf)?;
        let bottom = tape.vconcat(rt_leaf, ri_vals)?;
        let all = tape.vconcat(top, bottom)?;
        let a_vals = tape.row_gather(all, Rc::clone(&self.perm))?;
        let degrees = tape.scatter_add_rows(a_vals, Rc::clone(&self.slot_rows), n)?;
        let inv_sqrt = tape.inv_sqrt_or_zero(degrees);
        let by_row = tape.row_gather(inv_sqrt, Rc::clone(&self.slot_rows))?;
        let by_col = tape.row_gather(inv_sqrt, Rc::clone(&self.slot_cols))?;
        let scaled = tape.mul_elem(a_vals, by_row)?;
        tape.mul_elem(scaled, by_col)
    }
}
