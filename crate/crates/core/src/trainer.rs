//! Optimization loop: Adam over tape gradients, per-epoch interaction
//! denoising, early stopping on validation Recall@20.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluator::{score_embeddings, Split};
use crate::losses::{batch_loss, sample_triplets, LossReport};
use crate::model::{bind_params, forward, ForwardMode, ForwardSpec, ModelDims, ModelParams};
use crate::pipeline::{infer_embeddings, ModelInputs, PreparedData};
use crate::simgraph::denoise;
use crate::tape::Tape;

/// Bias-corrected Adam moments, one pair of buffers per parameter array in
/// declaration order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One Adam update for a single array. `step` is the already-incremented
/// global step used for bias correction.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
        let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        param[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub graph_ms: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub optimizer_ms: f64,
    pub eval_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_rec: f64,
    pub l_align: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall20: f64,
    #[serde(rename = "val_ndcg@20")]
    pub val_ndcg20: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileRecord>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub loss_reports: Vec<LossReport>,
    /// Set when optimization aborted on a non-finite loss or gradient; the
    /// checkpoint then holds the last finite parameters.
    pub diverged: Option<String>,
}

fn stream_seed(base: u64, epoch: usize, tag: u64) -> u64 {
    let mut h = base ^ 0x9e3779b97f4a7c15;
    for piece in [epoch as u64, tag] {
        h ^= piece.wrapping_mul(0xff51afd7ed558ccd);
        h = h.rotate_left(31).wrapping_mul(0xc4ceb9fe1a85ec53);
    }
    h
}

/// Trains from scratch on a prepared dataset. Deterministic for a fixed
/// config: all sampling is seeded from `cfg.seed`, the epoch and a stream
/// tag. Validation Recall@20 picks the checkpoint.
pub fn train(cfg: &TrainConfig, data: &PreparedData, data_dir: Option<String>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.set.train.nnz() == 0 {
        return Err(Error::EmptyInput("training split is empty".into()));
    }
    let dims = ModelDims {
        text_dim: data.meta.text_dim,
        visual_dim: data.meta.visual_dim,
        d: cfg.d,
    };
    let mut params = ModelParams::<f32>::init(dims, cfg.seed);
    let mut adam = AdamState::new(&params);
    let inputs: ModelInputs<f32> = ModelInputs::build(data, cfg)?;

    let steps_per_epoch = data.set.train.nnz().div_ceil(cfg.batch_size).max(1);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut loss_reports: Vec<LossReport> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut last_good = params.clone();
    let mut diverged = None;

    let mut val_ks = cfg.eval_ks.clone();
    if !val_ks.contains(&20) {
        val_ks.push(20);
        val_ks.sort_unstable();
    }

    'epochs: for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut prof = ProfileRecord {
            graph_ms: 0.0,
            forward_ms: 0.0,
            backward_ms: 0.0,
            optimizer_ms: 0.0,
            eval_ms: 0.0,
        };

        let graph_t = Instant::now();
        let denoised = if cfg.flags.use_age && cfg.rho > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, 1));
            denoise(&data.set.train, cfg.rho, &mut rng)?
        } else {
            data.set.train.clone()
        };
        prof.graph_ms += graph_t.elapsed().as_secs_f64() * 1e3;

        let mut batch_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, 2));
        let mut epoch_rec = 0.0f64;
        let mut epoch_align = 0.0f64;
        let mut epoch_total = 0.0f64;

        for _step in 0..steps_per_epoch {
            let fwd_t = Instant::now();
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let spec = ForwardSpec {
                flags: cfg.flags,
                alpha: cfg.alpha,
                layers: cfg.layers,
                include_layer0: cfg.include_layer0,
                asg_pairing: cfg.asg_pairing,
                knn_k: cfg.k,
                mode: ForwardMode::Train {
                    interactions: &denoised,
                },
            };
            let bundle = forward(&mut tape, &bound, &inputs.view(), &spec)?;
            let batch = sample_triplets(&data.set.train, cfg.batch_size, &mut batch_rng)?;
            let (total, report) = batch_loss(&mut tape, &bundle, &batch, cfg)?;
            prof.forward_ms += fwd_t.elapsed().as_secs_f64() * 1e3;

            if !report.l_total.is_finite() {
                diverged = Some(format!("non-finite loss at epoch {epoch}"));
                break 'epochs;
            }
            epoch_rec += report.l_rec;
            epoch_align += report.l_align_user + report.l_align_item;
            epoch_total += report.l_total;
            if cfg.log_losses {
                loss_reports.push(report);
            }

            let bwd_t = Instant::now();
            let grads = tape.backward(total)?;
            prof.backward_ms += bwd_t.elapsed().as_secs_f64() * 1e3;

            let opt_t = Instant::now();
            adam.step += 1;
            for (slot, ((name, id), (pname, tensor))) in bound
                .named_ids()
                .into_iter()
                .zip(params.named_mut())
                .enumerate()
            {
                debug_assert_eq!(name, pname);
                let grad = grads
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
                if !grad.all_finite() {
                    diverged = Some(format!("non-finite gradient for {name} at epoch {epoch}"));
                    break 'epochs;
                }
                adam_step(
                    tensor.data_mut(),
                    grad.data(),
                    &mut adam.m[slot],
                    &mut adam.v[slot],
                    adam.step,
                    cfg.lr,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                );
                // runaway magnitudes overflow the next forward pass, so
                // treat them as divergence while the state is still finite
                if !tensor.all_finite() || tensor.data().iter().any(|v| v.abs() > 1e20) {
                    diverged = Some(format!(
                        "non-finite or runaway values in {name} after update at epoch {epoch}"
                    ));
                    break 'epochs;
                }
            }
            prof.optimizer_ms += opt_t.elapsed().as_secs_f64() * 1e3;
        }

        let eval_t = Instant::now();
        let (e_users, e_items) = infer_embeddings(&params, &inputs, data, cfg)?;
        let val_report = score_embeddings(
            &e_users,
            &e_items,
            &data.set.train,
            &data.set.val,
            &data.set.test,
            Split::Val,
            &val_ks,
            cfg.score,
        )?;
        prof.eval_ms += eval_t.elapsed().as_secs_f64() * 1e3;

        let val_r20 = val_report.recall_at(20);
        let val_n20 = val_report.ndcg_at(20);
        log.push(EpochRecord {
            epoch,
            l_total: epoch_total / steps_per_epoch as f64,
            l_rec: epoch_rec / steps_per_epoch as f64,
            l_align: epoch_align / steps_per_epoch as f64,
            val_recall20: val_r20,
            val_ndcg20: val_n20,
            seconds: cfg.profile.then(|| epoch_start.elapsed().as_secs_f64()),
            profile: cfg.profile.then_some(prof),
        });

        last_good = params.clone();
        if val_r20 > best_val {
            best_val = val_r20;
            best_epoch = epoch;
            best_params = params.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    if best_epoch == 0 {
        // aborted before the first validation pass: keep the last finite
        // parameters rather than whatever the failing step produced
        best_params = last_good;
        best_val = 0.0;
    }
    let checkpoint = Checkpoint::new(
        cfg,
        best_params,
        data.set.n_users,
        data.set.n_items,
        best_epoch,
        best_val.max(0.0),
        data_dir,
    );
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_val_recall20: best_val.max(0.0),
        loss_reports,
        diverged,
    })
}

/// Candidate values per tunable; `None` keeps the base value.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub tau: Option<Vec<f64>>,
    pub rho: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub layers: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LeaderboardRow {
    pub tau: f64,
    pub rho: f64,
    pub k: usize,
    pub layers: usize,
    pub lr: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall20: f64,
    pub best_epoch: usize,
}

/// Trains every combination in the grid and ranks by validation Recall@20.
/// Returns the winning config with the leaderboard sorted descending.
pub fn grid_search(
    base: &TrainConfig,
    grid: &GridSpec,
    data: &PreparedData,
) -> Result<(TrainConfig, Vec<LeaderboardRow>)> {
    let taus = grid.tau.clone().unwrap_or_else(|| vec![base.tau]);
    let rhos = grid.rho.clone().unwrap_or_else(|| vec![base.rho]);
    let ks = grid.k.clone().unwrap_or_else(|| vec![base.k]);
    let layerss = grid.layers.clone().unwrap_or_else(|| vec![base.layers]);
    let lrs = grid.lr.clone().unwrap_or_else(|| vec![base.lr]);

    let mut rows = Vec::new();
    let mut best: Option<(f64, TrainConfig)> = None;
    for &tau in &taus {
        for &rho in &rhos {
            for &k in &ks {
                for &layers in &layerss {
                    for &lr in &lrs {
                        let cfg = TrainConfig {
                            tau,
                            rho,
                            k,
                            layers,
                            lr,
                            ..base.clone()
                        };
                        let outcome = train(&cfg, data, None)?;
                        rows.push(LeaderboardRow {
                            tau,
                            rho,
                            k,
                            layers,
                            lr,
                            val_recall20: outcome.best_val_recall20,
                            best_epoch: outcome.best_epoch,
                        });
                        let better = match &best {
                            None => true,
                            Some((score, _)) => outcome.best_val_recall20 > *score,
                        };
                        if better {
                            best = Some((outcome.best_val_recall20, cfg));
                        }
                    }
                }
            }
        }
    }
    rows.sort_by(|a, b| b.val_recall20.partial_cmp(&a.val_recall20).unwrap());
    let (_, winner) = best.ok_or_else(|| Error::Config("empty grid".into()))?;
    Ok((winner, rows))
}
