//! Forward pass: modality projection, positional identifiers, similarity
//! gating, augmented-graph propagation.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationFlags, AsgPairing};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::simgraph::{self, AssemblyPlan, GateIds};
use crate::sparse::SparseCsr;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub text_dim: usize,
    pub visual_dim: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub w0: Tensor<T>,
    pub w1: Tensor<T>,
    pub b0: Tensor<T>,
    pub b1: Tensor<T>,
}

/// Every trainable array. One projection per modality is shared by users and
/// items; the edge gates get separate parameter sets per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    pub w_text: Tensor<T>,
    pub b_text: Tensor<T>,
    pub w_visual: Tensor<T>,
    pub b_visual: Tensor<T>,
    pub ln_gain_text: Tensor<T>,
    pub ln_shift_text: Tensor<T>,
    pub ln_gain_visual: Tensor<T>,
    pub ln_shift_visual: Tensor<T>,
    pub gate_user: GateParams<T>,
    pub gate_item: GateParams<T>,
}

fn xavier<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

impl<T: Real> ModelParams<T> {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        let gate = |rng: &mut ChaCha8Rng| GateParams {
            w0: xavier(rng, d, d),
            w1: xavier(rng, d, d),
            b0: Tensor::zeros(1, d),
            b1: Tensor::zeros(1, d),
        };
        ModelParams {
            dims,
            w_text: xavier(&mut rng, dims.text_dim, d),
            b_text: Tensor::zeros(1, d),
            w_visual: xavier(&mut rng, dims.visual_dim, d),
            b_visual: Tensor::zeros(1, d),
            ln_gain_text: Tensor::filled(1, d, T::ONE),
            ln_shift_text: Tensor::zeros(1, d),
            ln_gain_visual: Tensor::filled(1, d, T::ONE),
            ln_shift_visual: Tensor::zeros(1, d),
            gate_user: gate(&mut rng),
            gate_item: gate(&mut rng),
        }
    }

    /// Fixed array order shared by the optimizer, checkpoints, and gradient
    /// extraction.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_text", &self.w_text),
            ("b_text", &self.b_text),
            ("w_visual", &self.w_visual),
            ("b_visual", &self.b_visual),
            ("ln_gain_text", &self.ln_gain_text),
            ("ln_shift_text", &self.ln_shift_text),
            ("ln_gain_visual", &self.ln_gain_visual),
            ("ln_shift_visual", &self.ln_shift_visual),
            ("gate_user_w0", &self.gate_user.w0),
            ("gate_user_w1", &self.gate_user.w1),
            ("gate_user_b0", &self.gate_user.b0),
            ("gate_user_b1", &self.gate_user.b1),
            ("gate_item_w0", &self.gate_item.w0),
            ("gate_item_w1", &self.gate_item.w1),
            ("gate_item_b0", &self.gate_item.b0),
            ("gate_item_b1", &self.gate_item.b1),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_text", &mut self.w_text),
            ("b_text", &mut self.b_text),
            ("w_visual", &mut self.w_visual),
            ("b_visual", &mut self.b_visual),
            ("ln_gain_text", &mut self.ln_gain_text),
            ("ln_shift_text", &mut self.ln_shift_text),
            ("ln_gain_visual", &mut self.ln_gain_visual),
            ("ln_shift_visual", &mut self.ln_shift_visual),
            ("gate_user_w0", &mut self.gate_user.w0),
            ("gate_user_w1", &mut self.gate_user.w1),
            ("gate_user_b0", &mut self.gate_user.b0),
            ("gate_user_b1", &mut self.gate_user.b1),
            ("gate_item_w0", &mut self.gate_item.w0),
            ("gate_item_w1", &mut self.gate_item.w1),
            ("gate_item_b0", &mut self.gate_item.b0),
            ("gate_item_b1", &mut self.gate_item.b1),
        ]
    }

    pub fn convert<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            w_text: self.w_text.convert(),
            b_text: self.b_text.convert(),
            w_visual: self.w_visual.convert(),
            b_visual: self.b_visual.convert(),
            ln_gain_text: self.ln_gain_text.convert(),
            ln_shift_text: self.ln_shift_text.convert(),
            ln_gain_visual: self.ln_gain_visual.convert(),
            ln_shift_visual: self.ln_shift_visual.convert(),
            gate_user: GateParams {
                w0: self.gate_user.w0.convert(),
                w1: self.gate_user.w1.convert(),
                b0: self.gate_user.b0.convert(),
                b1: self.gate_user.b1.convert(),
            },
            gate_item: GateParams {
                w0: self.gate_item.w0.convert(),
                w1: self.gate_item.w1.convert(),
                b0: self.gate_item.b0.convert(),
                b1: self.gate_item.b1.convert(),
            },
        }
    }
}

/// Tape handles for every parameter array, bound in `named()` order.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub w_text: TensorId,
    pub b_text: TensorId,
    pub w_visual: TensorId,
    pub b_visual: TensorId,
    pub ln_gain_text: TensorId,
    pub ln_shift_text: TensorId,
    pub ln_gain_visual: TensorId,
    pub ln_shift_visual: TensorId,
    pub gate_user: GateIds,
    pub gate_item: GateIds,
}

impl BoundParams {
    pub fn named_ids(&self) -> Vec<(&'static str, TensorId)> {
        vec![
            ("w_text", self.w_text),
            ("b_text", self.b_text),
            ("w_visual", self.w_visual),
            ("b_visual", self.b_visual),
            ("ln_gain_text", self.ln_gain_text),
            ("ln_shift_text", self.ln_shift_text),
            ("ln_gain_visual", self.ln_gain_visual),
            ("ln_shift_visual", self.ln_shift_visual),
            ("gate_user_w0", self.gate_user.w0),
            ("gate_user_w1", self.gate_user.w1),
            ("gate_user_b0", self.gate_user.b0),
            ("gate_user_b1", self.gate_user.b1),
            ("gate_item_w0", self.gate_item.w0),
            ("gate_item_w1", self.gate_item.w1),
            ("gate_item_b0", self.gate_item.b0),
            ("gate_item_b1", self.gate_item.b1),
        ]
    }
}

pub fn bind_params<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
    let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), true);
    BoundParams {
        w_text: leaf(&params.w_text),
        b_text: leaf(&params.b_text),
        w_visual: leaf(&params.w_visual),
        b_visual: leaf(&params.b_visual),
        ln_gain_text: leaf(&params.ln_gain_text),
        ln_shift_text: leaf(&params.ln_shift_text),
        ln_gain_visual: leaf(&params.ln_gain_visual),
        ln_shift_visual: leaf(&params.ln_shift_visual),
        gate_user: GateIds {
            w0: leaf(&params.gate_user.w0),
            w1: leaf(&params.gate_user.w1),
            b0: leaf(&params.gate_user.b0),
            b1: leaf(&params.gate_user.b1),
        },
        gate_item: GateIds {
            w0: leaf(&params.gate_item.w0),
            w1: leaf(&params.gate_item.w1),
            b0: leaf(&params.gate_item.b0),
            b1: leaf(&params.gate_item.b1),
        },
    }
}

/// Sinusoidal position table: even columns sin(pos / 10000^(2j/d)), odd
/// columns the matching cos. Odd widths are computed at d+1 and truncated.
/// Deterministic and non-trainable.
pub fn positional_encoding<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let d_eff = if d % 2 == 1 { d + 1 } else { d };
    let mut out = Tensor::zeros(n, d);
    for pos in 0..n {
        for j in 0..d_eff / 2 {
            let divisor = 10000f64.powf(2.0 * j as f64 / d_eff as f64);
            let angle = pos as f64 / divisor;
            if 2 * j < d {
                out.set(pos, 2 * j, T::from_f64(angle.sin()));
            }
            if 2 * j + 1 < d {
                out.set(pos, 2 * j + 1, T::from_f64(angle.cos()));
            }
        }
    }
    out
}

/// LN(tanh(x W + b)) with the given affine.
pub fn project<T: Real>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    gain: TensorId,
    shift: TensorId,
) -> Result<TensorId> {
    let lin = tape.matmul(x, w)?;
    let lin = tape.add_row(lin, b)?;
    let act = tape.tanh(lin);
    tape.layernorm(act, gain, shift, T::from_f64(LAYERNORM_EPS))
}

/// alpha * text + (1 - alpha) * visual.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    h_text: TensorId,
    h_visual: TensorId,
    alpha: f64,
) -> Result<TensorId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight must be in [0,1], got {alpha}")));
    }
    let t = tape.scale(h_text, T::from_f64(alpha));
    let v = tape.scale(h_visual, T::from_f64(1.0 - alpha));
    tape.add(t, v)
}

/// Mean of the L propagated layers; the un-propagated input joins the mean
/// only when `include_layer0` is set.
pub fn propagate<T: Real>(
    tape: &mut Tape<T>,
    a_hat: Rc<SparseCsr<T>>,
    h0: TensorId,
    layers: usize,
    include_layer0: bool,
) -> Result<TensorId> {
    if layers < 1 {
        return Err(Error::Config("propagation needs at least one layer".into()));
    }
    let mut h = h0;
    let mut acc = include_layer0.then_some(h0);
    for _ in 0..layers {
        h = tape.spmm(Rc::clone(&a_hat), h)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let denom = if include_layer0 { layers + 1 } else { layers };
    Ok(tape.scale(acc.expect("layers >= 1"), T::from_f64(1.0 / denom as f64)))
}

/// As `propagate` but over a pattern whose edge values live on the tape.
pub fn propagate_edges<T: Real>(
    tape: &mut Tape<T>,
    pattern: Rc<crate::sparse::CsrPattern>,
    vals: TensorId,
    h0: TensorId,
    layers: usize,
    include_layer0: bool,
) -> Result<TensorId> {
    if layers < 1 {
        return Err(Error::Config("propagation needs at least one layer".into()));
    }
    let mut h = h0;
    let mut acc = include_layer0.then_some(h0);
    for _ in 0..layers {
        h = tape.spmm_edges(Rc::clone(&pattern), vals, h)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let denom = if include_layer0 { layers + 1 } else { layers };
    Ok(tape.scale(acc.expect("layers >= 1"), T::from_f64(1.0 / denom as f64)))
}

/// Feature inputs already converted to the tape precision, plus the static
/// similarity graphs and position tables.
pub struct ForwardData<'a, T: Real> {
    pub user_text: &'a Tensor<T>,
    pub user_visual: &'a Tensor<T>,
    pub item_text: &'a Tensor<T>,
    pub item_visual: &'a Tensor<T>,
    pub static_ru: Option<&'a SparseCsr<f32>>,
    pub static_ri: Option<&'a SparseCsr<f32>>,
    pub pe_user: &'a Tensor<T>,
    pub pe_item: &'a Tensor<T>,
}

#[derive(Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Gated graphs; `interactions` is the (possibly denoised) training
    /// matrix for this epoch.
    Train { interactions: &'a SparseCsr<f32> },
    /// Similarity graphs recomputed from fused embeddings; full interaction
    /// matrix, no denoising.
    Infer { interactions: &'a SparseCsr<f32> },
}

pub struct ForwardSpec<'a> {
    pub flags: AblationFlags,
    pub alpha: f64,
    pub layers: usize,
    pub include_layer0: bool,
    pub asg_pairing: AsgPairing,
    /// Neighbor budget when inference rebuilds the similarity graphs.
    pub knn_k: usize,
    pub mode: ForwardMode<'a>,
}

/// Tape handles for every stage a loss may need.
pub struct EmbeddingBundle {
    pub n_users: usize,
    pub n_items: usize,
    /// Projections before positional identifiers.
    pub proj_user_text: TensorId,
    pub proj_user_visual: TensorId,
    pub proj_item_text: TensorId,
    pub proj_item_visual: TensorId,
    /// After positional identifiers (identity when they are disabled).
    pub id_user_text: TensorId,
    pub id_user_visual: TensorId,
    pub id_item_text: TensorId,
    pub id_item_visual: TensorId,
    pub fused_user: TensorId,
    pub fused_item: TensorId,
    /// Final encodings, users then items, (|U|+|I|) x d.
    pub encoded: TensorId,
}

impl EmbeddingBundle {
    /// Copies the encoded block apart into user and item matrices.
    pub fn split_encoded<T: Real>(&self, tape: &Tape<T>) -> (Tensor<T>, Tensor<T>) {
        let e = tape.value(self.encoded);
        let d = e.cols();
        let users = Tensor::from_vec(
            self.n_users,
            d,
            e.data()[..self.n_users * d].to_vec(),
        )
        .expect("sized");
        let items = Tensor::from_vec(
            self.n_items,
            d,
            e.data()[self.n_users * d..].to_vec(),
        )
        .expect("sized");
        (users, items)
    }
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    data: &ForwardData<'_, T>,
    spec: &ForwardSpec<'_>,
) -> Result<EmbeddingBundle> {
    spec.flags.validate()?;
    let n_users = data.user_text.rows();
    let n_items = data.item_text.rows();

    let ut = tape.constant(data.user_text.clone());
    let uv = tape.constant(data.user_visual.clone());
    let it = tape.constant(data.item_text.clone());
    let iv = tape.constant(data.item_visual.clone());

    let proj_user_text = project(tape, ut, bound.w_text, bound.b_text, bound.ln_gain_text, bound.ln_shift_text)?;
    let proj_item_text = project(tape, it, bound.w_text, bound.b_text, bound.ln_gain_text, bound.ln_shift_text)?;
    let proj_user_visual = project(tape, uv, bound.w_visual, bound.b_visual, bound.ln_gain_visual, bound.ln_shift_visual)?;
    let proj_item_visual = project(tape, iv, bound.w_visual, bound.b_visual, bound.ln_gain_visual, bound.ln_shift_visual)?;

    let (id_user_text, id_user_visual, id_item_text, id_item_visual) = if spec.flags.use_pe {
        if data.pe_user.shape() != (n_users, data.pe_user.cols())
            || data.pe_user.cols() != tape.value(proj_user_text).cols()
        {
            return Err(Error::dim(
                "forward",
                format!(
                    "position table {:?} vs projection {:?}",
                    data.pe_user.shape(),
                    tape.shape(proj_user_text)
                ),
            ));
        }
        let pu = tape.constant(data.pe_user.clone());
        let pi = tape.constant(data.pe_item.clone());
        (
            tape.add(proj_user_text, pu)?,
            tape.add(proj_user_visual, pu)?,
            tape.add(proj_item_text, pi)?,
            tape.add(proj_item_visual, pi)?,
        )
    } else {
        (proj_user_text, proj_user_visual, proj_item_text, proj_item_visual)
    };

    let fused_user = fuse(tape, id_user_text, id_user_visual, spec.alpha)?;
    let fused_item = fuse(tape, id_item_text, id_item_visual, spec.alpha)?;

    let encoded = if !spec.flags.use_age {
        tape.vconcat(fused_user, fused_item)?
    } else {
        let h0 = tape.vconcat(fused_user, fused_item)?;
        match spec.mode {
            ForwardMode::Train { interactions } if spec.flags.use_asg => {
                let ru = data.static_ru.ok_or_else(|| {
                    Error::Config("edge gating needs the static user graph".into())
                })?;
                let ri = data.static_ri.ok_or_else(|| {
                    Error::Config("edge gating needs the static item graph".into())
                })?;
                let (user_far, item_far) = match spec.asg_pairing {
                    AsgPairing::Cross => (id_user_visual, id_item_visual),
                    AsgPairing::Same => (id_user_text, id_item_text),
                };
                let (ru_pat, ru_vals) =
                    simgraph::adaptive_weights(tape, ru, id_user_text, user_far, &bound.gate_user)?;
                let (ri_pat, ri_vals) =
                    simgraph::adaptive_weights(tape, ri, id_item_text, item_far, &bound.gate_item)?;
                let plan = AssemblyPlan::new(interactions, &ru_pat, &ri_pat)?;
                let a_hat_vals = plan.normalize_on_tape(tape, ru_vals, ri_vals)?;
                propagate_edges(
                    tape,
                    Rc::clone(&plan.pattern),
                    a_hat_vals,
                    h0,
                    spec.layers,
                    spec.include_layer0,
                )?
            }
            ForwardMode::Train { interactions } => {
                let (ru, ri) = if spec.flags.use_static_graphs {
                    (data.static_ru, data.static_ri)
                } else {
                    (None, None)
                };
                let graph = simgraph::assemble_augmented(interactions, ru, ri)?;
                propagate(
                    tape,
                    Rc::new(graph.a_hat.convert::<T>()),
                    h0,
                    spec.layers,
                    spec.include_layer0,
                )?
            }
            ForwardMode::Infer { interactions } => {
                let (recomputed_u, recomputed_i);
                let (ru, ri): (Option<&SparseCsr<f32>>, Option<&SparseCsr<f32>>) =
                    if spec.flags.use_asg {
                        let fu: Tensor<f32> = tape.value(fused_user).convert();
                        let fi: Tensor<f32> = tape.value(fused_item).convert();
                        let (gu, gi) = simgraph::inference_graphs(&fu, &fi, spec.knn_k)?;
                        recomputed_u = gu.csr;
                        recomputed_i = gi.csr;
                        (Some(&recomputed_u), Some(&recomputed_i))
                    } else if spec.flags.use_static_graphs {
                        (data.static_ru, data.static_ri)
                    } else {
                        (None, None)
                    };
                let graph = simgraph::assemble_augmented(interactions, ru, ri)?;
                propagate(
                    tape,
                    Rc::new(graph.a_hat.convert::<T>()),
                    h0,
                    spec.layers,
                    spec.include_layer0,
                )?
            }
        }
    };

    Ok(EmbeddingBundle {
        n_users,
        n_items,
        proj_user_text,
        proj_user_visual,
        proj_item_text,
        proj_item_visual,
        id_user_text,
        id_user_visual,
        id_item_text,
        id_item_visual,
        fused_user,
        fused_item,
        encoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe: Tensor<f64> = positional_encoding(3, 6);
        for j in 0..3 {
            assert_eq!(pe.get(0, 2 * j), 0.0);
            assert_eq!(pe.get(0, 2 * j + 1), 1.0);
        }
    }

    #[test]
    fn position_one_first_column_is_sin1() {
        let pe: Tensor<f64> = positional_encoding(2, 4);
        assert!((pe.get(1, 0) - 1.0f64.sin()).abs() < 1e-9);
        assert!((pe.get(1, 0) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn positions_bounded_and_pairwise_distinct() {
        let pe: Tensor<f64> = positional_encoding(1000, 8);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut min_dist = f64::INFINITY;
        for a in 0..1000 {
            for b in (a + 1)..1000 {
                let d: f64 = pe
                    .row(a)
                    .iter()
                    .zip(pe.row(b))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist > 0.0, "min pairwise distance {min_dist}");
    }

    #[test]
    fn odd_width_padded_internally() {
        let pe: Tensor<f64> = positional_encoding(4, 5);
        assert_eq!(pe.shape(), (4, 5));
        assert!(pe.all_finite());
    }

    #[test]
    fn fuse_endpoints() {
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.leaf(Tensor::from_vec(1, 2, vec![2.0, 0.0]).unwrap(), false);
        let v = tape.leaf(Tensor::from_vec(1, 2, vec![0.0, 2.0]).unwrap(), false);
        let all_text = fuse(&mut tape, t, v, 1.0).unwrap();
        assert_eq!(tape.value(all_text).data(), &[2.0, 0.0]);
        let all_visual = fuse(&mut tape, t, v, 0.0).unwrap();
        assert_eq!(tape.value(all_visual).data(), &[0.0, 2.0]);
        let even = fuse(&mut tape, t, v, 0.5).unwrap();
        assert_eq!(tape.value(even).data(), &[1.0, 1.0]);
        assert!(fuse(&mut tape, t, v, 1.5).is_err());
    }

    #[test]
    fn propagate_identity_returns_input() {
        let mut tape: Tape<f64> = Tape::new();
        let h0 = tape.leaf(
            Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let eye = Rc::new(
            SparseCsr::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap(),
        );
        for layers in [1, 2, 5] {
            let out = propagate(&mut tape, Rc::clone(&eye), h0, layers, false).unwrap();
            assert!(tape.value(out).max_abs_diff(tape.value(h0)) < 1e-12);
        }
    }

    #[test]
    fn propagate_single_layer_is_one_hop() {
        let mut tape: Tape<f64> = Tape::new();
        let h0 = tape.leaf(Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap(), false);
        let a = Rc::new(SparseCsr::from_triplets(2, 2, &[(0, 1, 2.0)]).unwrap());
        let out = propagate(&mut tape, a, h0, 1, false).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0, 0.0]);
    }

    #[test]
    fn propagate_matches_dense_iteration_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let d = 3;
        let layers = 3;
        let mut trips = Vec::new();
        for r in 0..n {
            for c in 0..n {
                if rng.gen_bool(0.4) {
                    trips.push((r, c, rng.gen_range(0.1..1.0f64)));
                }
            }
        }
        let a = SparseCsr::from_triplets(n, n, &trips).unwrap();
        let h0v = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();

        let mut tape: Tape<f64> = Tape::new();
        let h0 = tape.leaf(h0v.clone(), false);
        let out = propagate(&mut tape, Rc::new(a.clone()), h0, layers, false).unwrap();

        let dense = a.densify();
        let mut h = h0v.clone();
        let mut acc = Tensor::zeros(n, d);
        for _ in 0..layers {
            h = dense.matmul(&h).unwrap();
            for (o, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        let expect = acc.map(|v| v / layers as f64);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn projection_of_zero_input_is_shift() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 3), false);
        let w = tape.leaf(Tensor::zeros(3, 4), false);
        let b = tape.leaf(Tensor::zeros(1, 4), false);
        let gain = tape.leaf(Tensor::filled(1, 4, 1.0), false);
        let shift = tape.leaf(Tensor::zeros(1, 4), false);
        let y = project(&mut tape, x, w, b, gain, shift).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_antisymmetric_closed_form() {
        // 1x2 input chosen so tanh output is (a, -a): LN gives about (1, -1)
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 1, vec![0.5]).unwrap(), false);
        let w = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(1, 2), false);
        let gain = tape.leaf(Tensor::filled(1, 2, 1.0), false);
        let shift = tape.leaf(Tensor::zeros(1, 2), false);
        let y = project(&mut tape, x, w, b, gain, shift).unwrap();
        assert!((tape.value(y).get(0, 0) - 1.0).abs() < 1e-4);
        assert!((tape.value(y).get(0, 1) + 1.0).abs() < 1e-4);
    }
}
