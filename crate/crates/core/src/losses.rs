//! Training objectives: inter-modal contrastive alignment, the softmax
//! recommendation loss over sampled triplets, and their sum.

use std::rc::Rc;

use rand::Rng;
use serde::Serialize;

use crate::config::{LossMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::EmbeddingBundle;
use crate::real::Real;
use crate::sparse::SparseCsr;
use crate::tape::{Tape, TensorId};

/// Sampled (user, positive, negative) indices; positives are training
/// interactions, negatives are not.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Uniform sampling over training pairs with a rejection-sampled negative
/// per pair. Users who interacted with every item cannot produce a negative
/// and are skipped.
pub fn sample_triplets<R: Rng>(
    r_train: &SparseCsr<f32>,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if r_train.nnz() == 0 {
        return Err(Error::EmptyInput("no training interactions to sample".into()));
    }
    let n_items = r_train.cols();
    let pairs: Vec<(usize, usize)> = r_train.iter().map(|((u, i), _)| (u, i)).collect();

    let mut batch = TripletBatch {
        users: Vec::with_capacity(batch_size),
        pos_items: Vec::with_capacity(batch_size),
        neg_items: Vec::with_capacity(batch_size),
    };
    let mut stale = 0usize;
    while batch.users.len() < batch_size {
        let (u, pos) = pairs[rng.gen_range(0..pairs.len())];
        if r_train.row_nnz(u) >= n_items {
            stale += 1;
            if stale > batch_size * 100 {
                return Err(Error::Data(
                    "every sampled user has interacted with all items".into(),
                ));
            }
            continue;
        }
        let neg = loop {
            let cand = rng.gen_range(0..n_items);
            if !r_train.contains(u, cand) {
                break cand;
            }
        };
        batch.users.push(u);
        batch.pos_items.push(pos);
        batch.neg_items.push(neg);
    }
    Ok(batch)
}

/// Contrastive alignment of anchor rows onto target rows: softmax over
/// cosine similarities at temperature tau with all other targets in the
/// batch as negatives.
pub fn infonce_align<T: Real>(
    tape: &mut Tape<T>,
    anchor: TensorId,
    target: TensorId,
    tau: f64,
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, _) = tape.shape(anchor);
    if tape.shape(anchor) != tape.shape(target) {
        return Err(Error::dim(
            "infonce_align",
            format!("{:?} vs {:?}", tape.shape(anchor), tape.shape(target)),
        ));
    }
    let inv_tau = T::from_f64(1.0 / tau);
    let an = tape.row_normalize(anchor);
    let tn = tape.row_normalize(target);
    let sims = tape.matmul_nt(an, tn)?;
    let logits = tape.scale(sims, inv_tau);
    let lse = tape.row_log_sum_exp(logits)?;
    let diag = tape.mul_elem(an, tn)?;
    let pos = tape.row_sum(diag);
    let pos = tape.scale(pos, inv_tau);
    let gap = tape.sub(lse, pos)?;
    let total = tape.sum(gap);
    Ok(tape.scale(total, T::from_f64(1.0 / b as f64)))
}

/// Softmax recommendation loss: each user's positive is normalized against
/// the batch's other positives plus that user's sampled negative.
pub fn rec_loss_sampled<T: Real>(
    tape: &mut Tape<T>,
    e_user: TensorId,
    e_pos: TensorId,
    e_neg: TensorId,
    tau: f64,
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, _) = tape.shape(e_user);
    let inv_tau = T::from_f64(1.0 / tau);
    let un = tape.row_normalize(e_user);
    let pn = tape.row_normalize(e_pos);
    let nn = tape.row_normalize(e_neg);

    let pos_block = tape.matmul_nt(un, pn)?;
    let neg_elem = tape.mul_elem(un, nn)?;
    let neg_col = tape.row_sum(neg_elem);
    let candidates = tape.hconcat(pos_block, neg_col)?;
    let logits = tape.scale(candidates, inv_tau);
    let lse = tape.row_log_sum_exp(logits)?;

    let diag_elem = tape.mul_elem(un, pn)?;
    let pos = tape.row_sum(diag_elem);
    let pos = tape.scale(pos, inv_tau);

    let gap = tape.sub(lse, pos)?;
    let total = tape.sum(gap);
    Ok(tape.scale(total, T::from_f64(1.0 / b as f64)))
}

/// Two-term form: mean of (s_neg - s_pos) / tau over the batch.
pub fn rec_loss_literal<T: Real>(
    tape: &mut Tape<T>,
    e_user: TensorId,
    e_pos: TensorId,
    e_neg: TensorId,
    tau: f64,
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, _) = tape.shape(e_user);
    let un = tape.row_normalize(e_user);
    let pn = tape.row_normalize(e_pos);
    let nn = tape.row_normalize(e_neg);
    let pos_elem = tape.mul_elem(un, pn)?;
    let pos = tape.row_sum(pos_elem);
    let neg_elem = tape.mul_elem(un, nn)?;
    let neg = tape.row_sum(neg_elem);
    let gap = tape.sub(neg, pos)?;
    let total = tape.sum(gap);
    Ok(tape.scale(total, T::from_f64(1.0 / (b as f64 * tau))))
}

/// Per-step scalar summary. The total is the exact sum of the parts.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub l_align_user: f64,
    pub l_align_item: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub batch_size: usize,
    pub tau: f64,
}

impl LossReport {
    fn new(l_align_user: f64, l_align_item: f64, l_rec: f64, batch_size: usize, tau: f64) -> Self {
        LossReport {
            l_align_user,
            l_align_item,
            l_rec,
            l_total: l_rec + l_align_user + l_align_item,
            batch_size,
            tau,
        }
    }
}

fn unique_in_order(idx: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    idx.iter().copied().filter(|i| seen.insert(*i)).collect()
}

/// Builds the full training objective for one batch on the tape and reports
/// the parts. Alignment runs over the batch's unique users and unique
/// positive items.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    bundle: &EmbeddingBundle,
    batch: &TripletBatch,
    cfg: &TrainConfig,
) -> Result<(TensorId, LossReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty triplet batch".into()));
    }
    let nu = bundle.n_users;
    let user_rows = Rc::new(batch.users.clone());
    let pos_rows = Rc::new(batch.pos_items.iter().map(|&i| nu + i).collect::<Vec<_>>());
    let neg_rows = Rc::new(batch.neg_items.iter().map(|&i| nu + i).collect::<Vec<_>>());

    let e_user = tape.row_gather(bundle.encoded, user_rows)?;
    let e_pos = tape.row_gather(bundle.encoded, pos_rows)?;
    let e_neg = tape.row_gather(bundle.encoded, neg_rows)?;

    let l_rec = match cfg.loss_mode {
        LossMode::Sampled => rec_loss_sampled(tape, e_user, e_pos, e_neg, cfg.tau)?,
        LossMode::Literal => rec_loss_literal(tape, e_user, e_pos, e_neg, cfg.tau)?,
    };

    let mut total = l_rec;
    let mut align_u_val = 0.0;
    let mut align_i_val = 0.0;
    if cfg.flags.use_align {
        let uniq_users = Rc::new(unique_in_order(&batch.users));
        let uniq_items = Rc::new(unique_in_order(&batch.pos_items));

        let align_of = |tape: &mut Tape<T>, text: TensorId, visual: TensorId, rows: &Rc<Vec<usize>>| -> Result<TensorId> {
            let t = tape.row_gather(text, Rc::clone(rows))?;
            let v = tape.row_gather(visual, Rc::clone(rows))?;
            let fwd = infonce_align(tape, t, v, cfg.tau)?;
            if cfg.symmetric_align {
                let rev = infonce_align(tape, v, t, cfg.tau)?;
                tape.add(fwd, rev)
            } else {
                Ok(fwd)
            }
        };
        let l_align_user = align_of(tape, bundle.id_user_text, bundle.id_user_visual, &uniq_users)?;
        let l_align_item = align_of(tape, bundle.id_item_text, bundle.id_item_visual, &uniq_items)?;
        align_u_val = tape.value(l_align_user).scalar_value().to_f64();
        align_i_val = tape.value(l_align_item).scalar_value().to_f64();
        let align = tape.add(l_align_user, l_align_item)?;
        total = tape.add(l_rec, align)?;
    }

    let report = LossReport::new(
        align_u_val,
        align_i_val,
        tape.value(l_rec).scalar_value().to_f64(),
        batch.len(),
        cfg.tau,
    );
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_element_batch_align_is_exactly_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(1, 3, vec![0.3, -0.2, 0.9]).unwrap(), false);
        let t = tape.leaf(Tensor::from_vec(1, 3, vec![-0.5, 0.1, 0.4]).unwrap(), false);
        let loss = infonce_align(&mut tape, a, t, 0.2).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        // diag cos = 1, off-diag = 0, tau = 0.2: loss = log(1 + e^-5)
        let mut tape: Tape<f64> = Tape::new();
        let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = tape.leaf(rows.clone(), false);
        let t = tape.leaf(rows, false);
        let loss = infonce_align(&mut tape, a, t, 0.2).unwrap();
        let expect = (1.0 + (-5.0f64).exp()).ln();
        assert!((tape.value(loss).scalar_value() - expect).abs() < 1e-9);
        assert!((expect - 0.006715).abs() < 1e-6);
    }

    #[test]
    fn align_nonnegative_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let a0 = mk(&mut rng);
        let t0 = mk(&mut rng);

        let eval = |a: &Tensor<f64>, t: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let ai = tape.leaf(a.clone(), false);
            let ti = tape.leaf(t.clone(), false);
            let l = infonce_align(&mut tape, ai, ti, 0.2).unwrap();
            tape.value(l).scalar_value()
        };
        let base = eval(&a0, &t0);
        assert!(base >= 0.0);

        let mut a1 = a0.clone();
        let mut t1 = t0.clone();
        for v in a1.row_mut(2) {
            *v *= 7.5;
        }
        for v in t1.row_mut(2) {
            *v *= 7.5;
        }
        assert!((eval(&a1, &t1) - base).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_candidate_count() {
        // one shared direction: every candidate similarity is 1
        let b = 2;
        let row = vec![0.6, 0.8];
        let all = Tensor::from_rows(&vec![row; b]).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let u = tape.leaf(all.clone(), false);
        let p = tape.leaf(all.clone(), false);
        let n = tape.leaf(all.clone(), false);
        let loss = rec_loss_sampled(&mut tape, u, p, n, 0.2).unwrap();
        let c = (b + 1) as f64;
        assert!((tape.value(loss).scalar_value() - c.ln()).abs() < 1e-6);
    }

    #[test]
    fn literal_mode_equal_similarities_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let u = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), false);
        let p = tape.leaf(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap(), false);
        // same cosine against u as p has
        let n = tape.leaf(Tensor::from_rows(&[vec![0.6, -0.8]]).unwrap(), false);
        let l = rec_loss_literal(&mut tape, u, p, n, 0.3).unwrap();
        assert!(tape.value(l).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn sampled_loss_matches_explicit_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = 2;
        let d = 4;
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(b, d, (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let (u, p, n) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let tau = 0.25;

        let mut tape: Tape<f64> = Tape::new();
        let ui = tape.leaf(u.clone(), false);
        let pi = tape.leaf(p.clone(), false);
        let ni = tape.leaf(n.clone(), false);
        let loss = rec_loss_sampled(&mut tape, ui, pi, ni, tau).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut expect = 0.0;
        for r in 0..b {
            let mut denom = 0.0;
            for c in 0..b {
                denom += (cos(u.row(r), p.row(c)) / tau).exp();
            }
            denom += (cos(u.row(r), n.row(r)) / tau).exp();
            let num = (cos(u.row(r), p.row(r)) / tau).exp();
            expect += -(num / denom).ln();
        }
        expect /= b as f64;
        assert!((tape.value(loss).scalar_value() - expect).abs() < 1e-6);
    }

    #[test]
    fn sampled_loss_decreases_as_positive_similarity_rises() {
        let eval = |pos_dir: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let u = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
            let p = tape.leaf(
                Tensor::from_rows(&[vec![pos_dir, (1.0 - pos_dir * pos_dir).sqrt()], vec![0.0, 1.0]])
                    .unwrap(),
                false,
            );
            let n = tape.leaf(Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap(), false);
            let l = rec_loss_sampled(&mut tape, u, p, n, 0.2).unwrap();
            tape.value(l).scalar_value()
        };
        let lo = eval(0.2);
        let hi = eval(0.9);
        assert!(hi < lo, "loss should fall as cos(u, pos) rises: {hi} vs {lo}");
    }

    #[test]
    fn triplet_negative_never_interacted() {
        let r = SparseCsr::from_triplets(1, 3, &[(0, 1, 1.0f32)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let b = sample_triplets(&r, 4, &mut rng).unwrap();
            for (&u, (&p, &n)) in b.users.iter().zip(b.pos_items.iter().zip(&b.neg_items)) {
                assert_eq!(u, 0);
                assert_eq!(p, 1);
                assert!(n == 0 || n == 2);
            }
        }
    }

    #[test]
    fn saturated_user_never_sampled() {
        // user 0 interacted with everything, so no negative exists for it
        let r = SparseCsr::from_triplets(
            2,
            3,
            &[(0, 0, 1.0f32), (0, 1, 1.0), (0, 2, 1.0), (1, 0, 1.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_triplets(&r, 16, &mut rng).unwrap();
        assert!(batch.users.iter().all(|&u| u == 1));
    }

    #[test]
    fn triplet_sampling_deterministic() {
        let r = SparseCsr::from_triplets(
            4,
            6,
            &[(0, 1, 1.0f32), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0), (0, 4, 1.0)],
        )
        .unwrap();
        let a = sample_triplets(&r, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_triplets(&r, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_pair_frequency_is_uniform() {
        let r = SparseCsr::from_triplets(
            2,
            4,
            &[(0, 0, 1.0f32), (0, 1, 1.0), (1, 2, 1.0), (1, 3, 1.0)],
        )
        .unwrap();
        let pairs: Vec<(usize, usize)> = r.iter().map(|((u, i), _)| (u, i)).collect();
        let draws = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut counts = vec![0usize; pairs.len()];
        let batch = sample_triplets(&r, draws, &mut rng).unwrap();
        for (&u, &p) in batch.users.iter().zip(&batch.pos_items) {
            let pos = pairs.iter().position(|&e| e == (u, p)).unwrap();
            counts[pos] += 1;
        }
        let p = 1.0 / pairs.len() as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() < 3.0 * sigma, "freq {freq} vs {p}");
        }
    }
}
