//! Finite-difference verification of every differentiable op and of the
//! end-to-end training loss, always computed in f64.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataset::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, sample_triplets};
use crate::model::{forward, BoundParams, ForwardMode, ForwardSpec, ModelDims, ModelParams};
use crate::pipeline::{prepare_from_parts, ModelInputs, PreparedData};
use crate::simgraph::GateIds;
use crate::sparse::SparseCsr;
use crate::tape::{Fault, Tape, TensorId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// Builds a scalar root from leaves bound in input order.
pub type ScalarBuilder = dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>;

/// Compares tape gradients of a scalar-valued builder against central finite
/// differences over every entry of every input. Returns the worst relative
/// error encountered.
pub fn fd_compare(
    inputs: &[Tensor<f64>],
    fault: Option<Fault>,
    build: &ScalarBuilder,
) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &ids)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::Contract("fd_compare needs a scalar root".into()));
    }
    let grads = tape.backward(root)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t: Tape<f64> = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let r = build(&mut t, &ids)?;
        Ok(t.value(r).scalar_value())
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .ok_or_else(|| Error::Contract("missing leaf adjoint".into()))?;
        for j in 0..input.len() {
            let mut plus: Vec<Tensor<f64>> = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus: Vec<Tensor<f64>> = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let ad = analytic.data()[j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            let rel = (ad - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Values bounded away from zero so kinked ops stay differentiable at the
/// sampled points.
fn rand_tensor_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn rand_positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn rand_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseCsr<f64> {
    let mut trips = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.gen_bool(density) {
                trips.push((r, c, rng.gen_range(0.2..1.0)));
            }
        }
    }
    if trips.is_empty() {
        trips.push((0, 0, 1.0));
    }
    SparseCsr::from_triplets(rows, cols, &trips).expect("indices in range")
}

/// Weights the output with a fixed tensor before reducing, so the scalar
/// root is sensitive to every output coordinate individually.
fn weighted_sum(tape: &mut Tape<f64>, out: TensorId, w: &Tensor<f64>) -> Result<TensorId> {
    let wid = tape.constant(w.clone());
    let prod = tape.mul_elem(out, wid)?;
    Ok(tape.sum(prod))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<ScalarBuilder>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<OpCase> = Vec::new();

    {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let w = rand_tensor(&mut rng, 3, 2);
        cases.push((
            "matmul",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.matmul(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 5, 4);
        let w = rand_tensor(&mut rng, 3, 5);
        cases.push((
            "matmul_nt",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.matmul_nt(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let sparse = Rc::new(rand_sparse(&mut rng, 5, 5, 0.4));
        let b = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 5, 3);
        cases.push((
            "spmm",
            vec![b],
            Box::new(move |t, ids| {
                let out = t.spmm(Rc::clone(&sparse), ids[0])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let sparse = rand_sparse(&mut rng, 5, 5, 0.4);
        let pattern = sparse.pattern();
        let vals = Tensor::from_vec(sparse.nnz(), 1, sparse.values().to_vec()).expect("sized");
        let b = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 5, 3);
        cases.push((
            "spmm_edges",
            vec![vals, b],
            Box::new(move |t, ids| {
                let out = t.spmm_edges(Rc::clone(&pattern), ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 2, 5);
        let w = rand_tensor(&mut rng, 2, 5);
        cases.push((
            "tanh",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.tanh(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor_away_from_zero(&mut rng, 2, 5);
        let w = rand_tensor(&mut rng, 2, 5);
        cases.push((
            "relu",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.relu(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 2, 5);
        let w = rand_tensor(&mut rng, 2, 5);
        cases.push((
            "sigmoid",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.sigmoid(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 3, 3);
        let b = rand_tensor(&mut rng, 3, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        cases.push((
            "add",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.add(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 3, 3);
        let b = rand_tensor(&mut rng, 3, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        cases.push((
            "sub",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.sub(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 3, 3);
        let b = rand_tensor(&mut rng, 3, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        cases.push((
            "mul_elem",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.mul_elem(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 3, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        cases.push((
            "scale",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.scale(ids[0], -1.7);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 4, 3);
        let bias = rand_tensor(&mut rng, 1, 3);
        let w = rand_tensor(&mut rng, 4, 3);
        cases.push((
            "add_row",
            vec![x, bias],
            Box::new(move |t, ids| {
                let out = t.add_row(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 2, 4);
        let gain = rand_positive(&mut rng, 1, 4);
        let shift = rand_tensor(&mut rng, 1, 4);
        let w = rand_tensor(&mut rng, 2, 4);
        cases.push((
            "layernorm",
            vec![x, gain, shift],
            Box::new(move |t, ids| {
                let out = t.layernorm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 4, 3);
        let idx = Rc::new(vec![0usize, 2, 0, 3]);
        let w = rand_tensor(&mut rng, 4, 3);
        cases.push((
            "row_gather",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.row_gather(ids[0], Rc::clone(&idx))?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 5, 2);
        let idx = Rc::new(vec![1usize, 0, 1, 2, 0]);
        let w = rand_tensor(&mut rng, 3, 2);
        cases.push((
            "scatter_add_rows",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.scatter_add_rows(ids[0], Rc::clone(&idx), 3)?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 3, 1);
        cases.push((
            "row_sum",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.row_sum(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 3, 4);
        cases.push((
            "sum",
            vec![x],
            Box::new(move |t, ids| Ok(t.sum(ids[0]))),
        ));
    }
    {
        let x = rand_tensor(&mut rng, 3, 5);
        let w = rand_tensor(&mut rng, 3, 1);
        cases.push((
            "row_log_sum_exp",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.row_log_sum_exp(ids[0])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_tensor_away_from_zero(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 3, 4);
        cases.push((
            "row_normalize",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.row_normalize(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let x = rand_positive(&mut rng, 3, 1);
        let w = rand_tensor(&mut rng, 3, 1);
        cases.push((
            "inv_sqrt_or_zero",
            vec![x],
            Box::new(move |t, ids| {
                let out = t.inv_sqrt_or_zero(ids[0]);
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 3, 2);
        let b = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 3, 6);
        cases.push((
            "hconcat",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.hconcat(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        let a = rand_tensor(&mut rng, 2, 3);
        let b = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 6, 3);
        cases.push((
            "vconcat",
            vec![a, b],
            Box::new(move |t, ids| {
                let out = t.vconcat(ids[0], ids[1])?;
                weighted_sum(t, out, &w)
            }),
        ));
    }
    {
        // composite: sum(tanh(x * w))
        let x = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 4, 2);
        cases.push((
            "sum_tanh_matmul",
            vec![x, w],
            Box::new(move |t, ids| {
                let prod = t.matmul(ids[0], ids[1])?;
                let act = t.tanh(prod);
                Ok(t.sum(act))
            }),
        ));
    }
    cases
}

/// Per-op finite-difference suite at one seed. `fault` is test plumbing to
/// prove a broken backward is caught and named.
pub fn run_op_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for (name, inputs, build) in op_cases(seed) {
        let max_rel_err = fd_compare(&inputs, fault, build.as_ref())?;
        report.checks.push(CheckResult {
            name: name.to_string(),
            max_rel_err,
            pass: max_rel_err < OP_TOLERANCE,
        });
    }
    Ok(report)
}

fn bound_from_ids(ids: &[TensorId]) -> BoundParams {
    BoundParams {
        w_text: ids[0],
        b_text: ids[1],
        w_visual: ids[2],
        b_visual: ids[3],
        ln_gain_text: ids[4],
        ln_shift_text: ids[5],
        ln_gain_visual: ids[6],
        ln_shift_visual: ids[7],
        gate_user: GateIds {
            w0: ids[8],
            w1: ids[9],
            b0: ids[10],
            b1: ids[11],
        },
        gate_item: GateIds {
            w0: ids[12],
            w1: ids[13],
            b0: ids[14],
            b1: ids[15],
        },
    }
}

/// Four users, three items, every module switched on, no edge dropping so
/// the forward pass is a fixed function of the parameters.
fn tiny_instance(seed: u64) -> Result<(PreparedData, TrainConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(String, String)> = [
        (0, 0),
        (0, 1),
        (1, 1),
        (1, 2),
        (2, 0),
        (2, 2),
        (3, 0),
        (3, 1),
        (3, 2),
    ]
    .iter()
    .map(|&(u, i)| (format!("u{u}"), format!("i{i}")))
    .collect();
    let feat = |rng: &mut ChaCha8Rng, rows: usize, dim: usize, m: Modality| {
        FeatureMatrix::new(
            m,
            Tensor::from_vec(
                rows,
                dim,
                (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
            )
            .expect("sized"),
        )
        .expect("finite")
    };
    let item_text = feat(&mut rng, 3, 5, Modality::Text);
    let item_visual = feat(&mut rng, 3, 6, Modality::Visual);
    let data = prepare_from_parts(&pairs, item_text, item_visual, seed, 2)?;
    let cfg = TrainConfig {
        d: 8,
        batch_size: 4,
        layers: 2,
        k: 2,
        rho: 0.0,
        tau: 0.2,
        seed,
        ..TrainConfig::default()
    };
    Ok((data, cfg))
}

/// Finite-difference check of the complete training loss against every
/// parameter entry, in f64.
pub fn run_end_to_end(seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let (data, cfg) = tiny_instance(seed)?;
    let inputs: ModelInputs<f64> = ModelInputs::build(&data, &cfg)?;
    let params = ModelParams::<f64>::init(
        ModelDims {
            text_dim: data.meta.text_dim,
            visual_dim: data.meta.visual_dim,
            d: cfg.d,
        },
        seed,
    );
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c4);
    let batch = sample_triplets(&data.set.train, cfg.batch_size, &mut batch_rng)?;

    let leaves: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
    let cfg2 = cfg.clone();
    let train = data.set.train.clone();
    let build = move |tape: &mut Tape<f64>, ids: &[TensorId]| -> Result<TensorId> {
        let bound = bound_from_ids(ids);
        let spec = ForwardSpec {
            flags: cfg2.flags,
            alpha: cfg2.alpha,
            layers: cfg2.layers,
            include_layer0: cfg2.include_layer0,
            asg_pairing: cfg2.asg_pairing,
            knn_k: cfg2.k,
            mode: ForwardMode::Train {
                interactions: &train,
            },
        };
        let bundle = forward(tape, &bound, &inputs.view(), &spec)?;
        let (total, _) = batch_loss(tape, &bundle, &batch, &cfg2)?;
        Ok(total)
    };
    let max_rel_err = fd_compare(&leaves, fault, &build)?;
    Ok(CheckResult {
        name: "end_to_end_loss".to_string(),
        max_rel_err,
        pass: max_rel_err < END_TO_END_TOLERANCE,
    })
}

/// Everything the gradient gate runs: the per-op suite plus the end-to-end
/// loss check.
pub fn run_full_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut report = run_op_suite(seed, fault)?;
    report.checks.push(run_end_to_end(seed, fault)?);
    Ok(report)
}
