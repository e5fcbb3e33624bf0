//! Synthetic community-structured datasets used by the integration suites.
#![allow(dead_code)]

use idfree_core::dataset::{FeatureMatrix, Modality};
use idfree_core::pipeline::{prepare_from_parts, PreparedData};
use idfree_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_communities: usize,
    /// Taste sub-groups per community. Item features carry only the
    /// community signal, so sub-group structure is reachable through
    /// collaborative signal alone.
    pub n_subgroups: usize,
    /// Sub-groups each user prefers within their community.
    pub n_preferred: usize,
    pub feat_dim: usize,
    pub noise: f64,
    /// Rank of the feature-noise covariance. Low rank keeps per-coordinate
    /// deviation at `noise` while denying content the ability to identify
    /// individual items, which is what positional identity is for.
    pub noise_rank: usize,
    /// Marginal within-community interaction probability; concentrated on
    /// the user's preferred sub-groups.
    pub p_within: f64,
    pub p_cross: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two balanced communities, 16-d features with sigma = 0.1 noise,
    /// within-community interaction probability 0.3 against 0.01 across.
    pub fn two_community(seed: u64) -> Self {
        SynthSpec {
            n_users: 200,
            n_items: 100,
            n_communities: 2,
            n_subgroups: 5,
            n_preferred: 2,
            feat_dim: 16,
            noise: 0.1,
            noise_rank: 4,
            p_within: 0.3,
            p_cross: 0.01,
            seed,
        }
    }

    /// A second corpus with the same feature widths but different shape and
    /// community directions, for checkpoint transfer.
    pub fn transfer_target(seed: u64) -> Self {
        SynthSpec {
            n_users: 160,
            n_items: 400,
            n_communities: 4,
            n_subgroups: 5,
            n_preferred: 2,
            feat_dim: 16,
            noise: 0.1,
            noise_rank: 4,
            p_within: 0.3,
            p_cross: 0.01,
            seed,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn community_of(idx: usize, total: usize, communities: usize) -> usize {
    idx * communities / total
}

/// Draws item features around per-community mean directions and samples
/// interactions per (user, item): the within-community probability is
/// concentrated on the user's preferred sub-groups while keeping the stated
/// within-community marginal. Sub-groups never show up in features.
/// Feature rows are returned aligned with the dense item ids that the split
/// builder will assign to this exact pair list.
pub fn generate(spec: &SynthSpec) -> (Vec<(String, String)>, FeatureMatrix, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let text_means: Vec<Vec<f64>> = (0..spec.n_communities)
        .map(|_| unit_vector(&mut rng, spec.feat_dim))
        .collect();
    let visual_means: Vec<Vec<f64>> = (0..spec.n_communities)
        .map(|_| unit_vector(&mut rng, spec.feat_dim))
        .collect();

    // orthonormal noise basis per modality; items draw their deviation as a
    // combination of these directions with per-coordinate std `noise`
    let rank = spec.noise_rank.clamp(1, spec.feat_dim);
    let noise_basis = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
        while basis.len() < rank {
            let mut v: Vec<f64> = (0..spec.feat_dim).map(|_| gaussian(rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b.iter()) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for x in &mut v {
                    *x /= norm;
                }
                basis.push(v);
            }
        }
        basis
    };
    let text_basis = noise_basis(&mut rng);
    let visual_basis = noise_basis(&mut rng);
    let coeff_scale = spec.noise * (spec.feat_dim as f64 / rank as f64).sqrt();

    let mut item_text_rows: Vec<Vec<f32>> = Vec::with_capacity(spec.n_items);
    let mut item_visual_rows: Vec<Vec<f32>> = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let c = community_of(i, spec.n_items, spec.n_communities);
        // one latent style per item, expressed through both modality bases:
        // text and visual views describe the same underlying item
        let style: Vec<f64> = (0..rank).map(|_| coeff_scale * gaussian(&mut rng)).collect();
        let express = |mean: &[f64], basis: &[Vec<f64>]| -> Vec<f32> {
            let mut row: Vec<f64> = mean.to_vec();
            for (coeff, dir) in style.iter().zip(basis) {
                for (r, d) in row.iter_mut().zip(dir.iter()) {
                    *r += coeff * d;
                }
            }
            row.iter().map(|&v| v as f32).collect()
        };
        item_text_rows.push(express(&text_means[c], &text_basis));
        item_visual_rows.push(express(&visual_means[c], &visual_basis));
    }

    // marginal p_within = (n_preferred * p_pref + rest * p_other) / groups
    // with p_pref = 2 * p_within and p_other chosen to balance
    let g = spec.n_subgroups as f64;
    let pref = spec.n_preferred as f64;
    let p_pref = (2.0 * spec.p_within).min(1.0);
    let p_other = (g * spec.p_within - pref * p_pref) / (g - pref);
    assert!(p_other >= 0.0, "preference concentration exceeds the marginal");

    let mut pairs = Vec::new();
    for u in 0..spec.n_users {
        let cu = community_of(u, spec.n_users, spec.n_communities);
        // taste drifts along the user index: neighbors in id space share
        // most of their preferred groups
        let per_comm_users = spec.n_users / spec.n_communities;
        let within_u = u - cu * per_comm_users;
        let lead = within_u * spec.n_subgroups / per_comm_users;
        let preferred: Vec<usize> = (0..spec.n_preferred.min(spec.n_subgroups))
            .map(|o| (lead + o) % spec.n_subgroups)
            .collect();
        for i in 0..spec.n_items {
            let ci = community_of(i, spec.n_items, spec.n_communities);
            let p = if cu == ci {
                let per_comm = spec.n_items / spec.n_communities;
                let within_idx = i - ci * per_comm;
                let group = within_idx * spec.n_subgroups / per_comm;
                if preferred.contains(&group) {
                    p_pref
                } else {
                    p_other
                }
            } else {
                spec.p_cross
            };
            if rng.gen_bool(p) {
                pairs.push((format!("u{u}"), format!("i{i}")));
            }
        }
    }

    // dense ids follow first appearance in the pair list; reorder feature
    // rows to match, dropping items that never drew an interaction
    let live: Vec<usize> = {
        let mut seen = vec![false; spec.n_items];
        let mut live = Vec::new();
        for (_, item) in &pairs {
            let idx: usize = item[1..].parse().unwrap();
            if !seen[idx] {
                seen[idx] = true;
                live.push(idx);
            }
        }
        live
    };
    let text = FeatureMatrix::new(
        Modality::Text,
        Tensor::from_rows(&live.iter().map(|&i| item_text_rows[i].clone()).collect::<Vec<_>>())
            .unwrap(),
    )
    .unwrap();
    let visual = FeatureMatrix::new(
        Modality::Visual,
        Tensor::from_rows(&live.iter().map(|&i| item_visual_rows[i].clone()).collect::<Vec<_>>())
            .unwrap(),
    )
    .unwrap();
    (pairs, text, visual)
}

pub fn prepared(spec: &SynthSpec, knn_k: usize) -> PreparedData {
    let (pairs, text, visual) = generate(spec);
    prepare_from_parts(&pairs, text, visual, spec.seed, knn_k).unwrap()
}
