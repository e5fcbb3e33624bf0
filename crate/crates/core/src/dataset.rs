//! Interaction-log ingestion, dense ID remapping, per-user splitting, and
//! feature-matrix IO.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseCsr;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

/// Dense per-entity feature block, row-aligned to dense indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    data: Tensor<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, data: Tensor<f32>) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureMatrix { modality, data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        self.data.row(r)
    }
}

/// External-id <-> dense-index tables. Dense indices follow first appearance
/// in the interaction log.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IdMapsJson {
    users: BTreeMap<String, u32>,
    items: BTreeMap<String, u32>,
}

impl IdMaps {
    pub fn user_index(&self, ext: &str) -> Option<usize> {
        self.users.iter().position(|u| u == ext)
    }

    pub fn to_json(&self) -> Result<String> {
        let json = IdMapsJson {
            users: self
                .users
                .iter()
                .enumerate()
                .map(|(i, u)| (u.clone(), i as u32))
                .collect(),
            items: self
                .items
                .iter()
                .enumerate()
                .map(|(i, v)| (v.clone(), i as u32))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: IdMapsJson = serde_json::from_str(text)?;
        let invert = |m: &BTreeMap<String, u32>, what: &str| -> Result<Vec<String>> {
            let mut v = vec![String::new(); m.len()];
            for (ext, &idx) in m {
                let slot = v.get_mut(idx as usize).ok_or_else(|| {
                    Error::Data(format!("{what} index {idx} out of range in id map"))
                })?;
                *slot = ext.clone();
            }
            Ok(v)
        };
        Ok(IdMaps {
            users: invert(&json.users, "user")?,
            items: invert(&json.items, "item")?,
        })
    }
}

/// Implicit-feedback matrix split per user into train/val/test.
#[derive(Clone, Debug)]
pub struct InteractionSet {
    pub n_users: usize,
    pub n_items: usize,
    pub train: SparseCsr<f32>,
    pub val: SparseCsr<f32>,
    pub test: SparseCsr<f32>,
    pub id_maps: IdMaps,
    /// Users with zero training interactions; they get zero-vector features
    /// and never enter training batches.
    pub cold_users: Vec<bool>,
}

/// Reads `user_id`/`item_id` pairs from TSV or CSV. The delimiter is sniffed
/// from the first line; a header row naming the columns is optional. Extra
/// columns are ignored. Pairs come back in file order, duplicates included.
pub fn load_interactions(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ctx = path.display().to_string();
    let mut lines = text.lines().enumerate().peekable();

    let first = loop {
        match lines.peek() {
            Some((_, l)) if l.trim().is_empty() => {
                lines.next();
            }
            Some((_, l)) => break *l,
            None => return Err(Error::EmptyInput(ctx)),
        }
    };
    let delim = if first.contains('\t') { '\t' } else { ',' };

    let header: Vec<String> = first
        .split(delim)
        .map(|t| t.trim().to_ascii_lowercase())
        .collect();
    let (mut user_col, mut item_col) = (0usize, 1usize);
    let mut has_header = false;
    if let (Some(u), Some(i)) = (
        header.iter().position(|h| h == "user_id"),
        header.iter().position(|h| h == "item_id"),
    ) {
        has_header = true;
        user_col = u;
        item_col = i;
    }
    if has_header {
        lines.next();
    }

    let mut pairs = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        let need = user_col.max(item_col);
        if fields.len() <= need {
            return Err(Error::Parse {
                path: ctx,
                line: lineno + 1,
                msg: format!("expected at least {} columns, got {}", need + 1, fields.len()),
            });
        }
        let user = fields[user_col].trim();
        let item = fields[item_col].trim();
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: ctx,
                line: lineno + 1,
                msg: "empty user or item id".into(),
            });
        }
        pairs.push((user.to_string(), item.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput(ctx));
    }
    Ok(pairs)
}

/// Splits each user's deduplicated interactions by ratio; the fractional
/// remainders all land in train, so a single interaction trains. Dense ids
/// are assigned by first appearance, which keeps the result a pure function
/// of (pairs, seed).
pub fn build_splits(
    pairs: &[(String, String)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<InteractionSet> {
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no interaction pairs".into()));
    }

    let mut id_maps = IdMaps::default();
    let mut user_idx: BTreeMap<&str, usize> = BTreeMap::new();
    let mut item_idx: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_user: Vec<Vec<usize>> = Vec::new();

    for (u, i) in pairs {
        let uid = *user_idx.entry(u.as_str()).or_insert_with(|| {
            id_maps.users.push(u.clone());
            per_user.push(Vec::new());
            id_maps.users.len() - 1
        });
        let iid = *item_idx.entry(i.as_str()).or_insert_with(|| {
            id_maps.items.push(i.clone());
            id_maps.items.len() - 1
        });
        // dedup keeps the first occurrence
        if !per_user[uid].contains(&iid) {
            per_user[uid].push(iid);
        }
    }

    let n_users = id_maps.users.len();
    let n_items = id_maps.items.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_t = Vec::new();
    let mut val_t = Vec::new();
    let mut test_t = Vec::new();
    let mut cold_users = vec![false; n_users];

    for (u, items) in per_user.iter().enumerate() {
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let n = order.len();
        let n_val = (n as f64 * r_val).floor() as usize;
        let n_test = (n as f64 * r_test).floor() as usize;
        let n_train = n - n_val - n_test;
        for (pos, &i) in order.iter().enumerate() {
            let bucket = if pos < n_train {
                &mut train_t
            } else if pos < n_train + n_val {
                &mut val_t
            } else {
                &mut test_t
            };
            bucket.push((u, i, 1.0f32));
        }
        if n_train == 0 {
            cold_users[u] = true;
        }
    }

    Ok(InteractionSet {
        n_users,
        n_items,
        train: SparseCsr::from_triplets(n_users, n_items, &train_t)?,
        val: SparseCsr::from_triplets(n_users, n_items, &val_t)?,
        test: SparseCsr::from_triplets(n_users, n_items, &test_t)?,
        id_maps,
        cold_users,
    })
}

const FEATURE_MAGIC: &[u8; 4] = b"IDFV";
const FEATURE_VERSION: u8 = 1;

/// Binary feature container: `IDFV` + version, u32 LE rows, u32 LE dim,
/// then rows*dim f32 LE row-major.
pub fn save_features(feats: &FeatureMatrix, path: &Path) -> Result<()> {
    let t = feats.tensor();
    let mut buf = Vec::with_capacity(13 + 4 * t.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads the binary container, falling back to CSV (one feature row per
/// line) when the magic bytes are absent. `expect_rows` enforces alignment
/// with the entity count it will be joined against.
pub fn load_features(
    path: &Path,
    modality: Modality,
    expect_rows: Option<usize>,
) -> Result<FeatureMatrix> {
    let ctx = path.display().to_string();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(ctx.clone(), e))?;

    let tensor = if buf.len() >= 13 && &buf[0..4] == FEATURE_MAGIC {
        if buf[4] != FEATURE_VERSION {
            return Err(Error::Data(format!(
                "{ctx}: unsupported feature container version {}",
                buf[4]
            )));
        }
        let rows = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
        let need = 13 + 4 * rows * dim;
        if buf.len() != need {
            return Err(Error::Data(format!(
                "{ctx}: expected {need} bytes for {rows}x{dim}, got {}",
                buf.len()
            )));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for chunk in buf[13..].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Tensor::from_vec(rows, dim, data)?
    } else {
        let text = String::from_utf8(buf)
            .map_err(|_| Error::Data(format!("{ctx}: neither feature container nor UTF-8 CSV")))?;
        let mut rows: Vec<Vec<f32>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split(',') {
                let v: f32 = tok.trim().parse().map_err(|_| Error::Parse {
                    path: ctx.clone(),
                    line: lineno + 1,
                    msg: format!("bad float {tok:?}"),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput(ctx));
        }
        Tensor::from_rows(&rows)?
    };

    if let Some(expected) = expect_rows {
        if tensor.rows() != expected {
            return Err(Error::Data(format!(
                "{ctx}: feature rows {} do not align with entity count {expected}",
                tensor.rows()
            )));
        }
    }
    if !tensor.all_finite() {
        return Err(Error::Data(format!("{ctx}: non-finite feature value")));
    }
    FeatureMatrix::new(modality, tensor)
}

/// Per-user mean of interacted-item feature rows over the training split.
/// Users with no training interactions get a zero row and a cold flag.
pub fn user_modal_features(
    r_train: &SparseCsr<f32>,
    item_feats: &FeatureMatrix,
) -> Result<(FeatureMatrix, Vec<bool>)> {
    if r_train.cols() != item_feats.n_rows() {
        return Err(Error::dim(
            "user_modal_features",
            format!(
                "interaction columns {} vs feature rows {}",
                r_train.cols(),
                item_feats.n_rows()
            ),
        ));
    }
    let n_users = r_train.rows();
    let dim = item_feats.dim();
    let mut out = Tensor::zeros(n_users, dim);
    let mut cold = vec![false; n_users];
    for u in 0..n_users {
        let cols = r_train.row_cols(u);
        if cols.is_empty() {
            cold[u] = true;
            continue;
        }
        let inv = 1.0 / cols.len() as f32;
        let dst = out.row_mut(u);
        for &i in cols {
            for (d, &v) in dst.iter_mut().zip(item_feats.row(i)) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok((FeatureMatrix::new(item_feats.modality, out)?, cold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.tsv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_three_line_tsv() {
        let (_d, p) = write_tmp("u1\ti1\nu2\ti1\nu1\ti2\n");
        let pairs = load_interactions(&p).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0], ("u1".into(), "i1".into()));
    }

    #[test]
    fn missing_item_column_names_line() {
        let (_d, p) = write_tmp("u1\ti1\nu2\n");
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicates_survive_loading() {
        let (_d, p) = write_tmp("u1\ti1\nu1\ti1\n");
        assert_eq!(load_interactions(&p).unwrap().len(), 2);
    }

    #[test]
    fn empty_file_is_rejected() {
        let (_d, p) = write_tmp("");
        assert!(matches!(load_interactions(&p), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn header_and_extra_columns() {
        let (_d, p) = write_tmp("item_id,user_id,rating\ni9,u1,5\ni3,u1,2\n");
        let pairs = load_interactions(&p).unwrap();
        assert_eq!(pairs, vec![("u1".into(), "i9".into()), ("u1".into(), "i3".into())]);
    }

    #[test]
    fn ten_interactions_split_8_1_1() {
        let pairs: Vec<(String, String)> =
            (0..10).map(|i| ("u".to_string(), format!("i{i}"))).collect();
        let set = build_splits(&pairs, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(set.train.nnz(), 8);
        assert_eq!(set.val.nnz(), 1);
        assert_eq!(set.test.nnz(), 1);
    }

    #[test]
    fn single_interaction_goes_to_train() {
        let pairs = vec![("u".to_string(), "i".to_string())];
        let set = build_splits(&pairs, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(set.train.nnz(), 1);
        assert_eq!(set.val.nnz(), 0);
        assert_eq!(set.test.nnz(), 0);
        assert!(!set.cold_users[0]);
    }

    #[test]
    fn splits_are_deterministic() {
        let pairs: Vec<(String, String)> = (0..40)
            .map(|i| (format!("u{}", i % 4), format!("i{}", i % 13)))
            .collect();
        let a = build_splits(&pairs, (0.8, 0.1, 0.1), 11).unwrap();
        let b = build_splits(&pairs, (0.8, 0.1, 0.1), 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn splits_partition_unique_pairs() {
        let pairs: Vec<(String, String)> = (0..60)
            .map(|i| (format!("u{}", i % 5), format!("i{}", (i * 7) % 11)))
            .collect();
        let mut unique: Vec<(String, String)> = pairs.clone();
        unique.sort();
        unique.dedup();
        let set = build_splits(&pairs, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(set.train.nnz() + set.val.nnz() + set.test.nnz(), unique.len());
        for ((u, i), _) in set.train.iter() {
            assert!(!set.val.contains(u, i) && !set.test.contains(u, i));
        }
    }

    #[test]
    fn feature_container_roundtrip_and_csv_match() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.idfv");
        let csv = dir.path().join("f.csv");
        let m = FeatureMatrix::new(
            Modality::Text,
            Tensor::from_rows(&[vec![1.0f32, -2.5, 0.25], vec![4.0, 0.0, 1e-3]]).unwrap(),
        )
        .unwrap();
        save_features(&m, &bin).unwrap();
        std::fs::write(&csv, "1.0,-2.5,0.25\n4.0,0.0,0.001\n").unwrap();
        let from_bin = load_features(&bin, Modality::Text, Some(2)).unwrap();
        let from_csv = load_features(&csv, Modality::Text, Some(2)).unwrap();
        assert_eq!(from_bin, m);
        assert_eq!(from_csv, m);
    }

    #[test]
    fn feature_row_alignment_checked() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.idfv");
        let m = FeatureMatrix::new(Modality::Visual, Tensor::zeros(5, 3)).unwrap();
        save_features(&m, &bin).unwrap();
        assert!(load_features(&bin, Modality::Visual, Some(7)).is_err());
    }

    #[test]
    fn user_features_single_interaction_copies_row() {
        let r = SparseCsr::from_triplets(2, 4, &[(0, 3, 1.0f32)]).unwrap();
        let items = FeatureMatrix::new(
            Modality::Text,
            Tensor::from_rows(&[
                vec![1.0f32, 0.0],
                vec![0.0, 1.0],
                vec![0.5, 0.5],
                vec![0.25, 0.75],
            ])
            .unwrap(),
        )
        .unwrap();
        let (uf, cold) = user_modal_features(&r, &items).unwrap();
        assert_eq!(uf.row(0), &[0.25, 0.75]);
        assert_eq!(uf.row(1), &[0.0, 0.0]);
        assert_eq!(cold, vec![false, true]);
    }

    #[test]
    fn user_features_mean_of_two() {
        let r = SparseCsr::from_triplets(1, 2, &[(0, 0, 1.0f32), (0, 1, 1.0)]).unwrap();
        let items = FeatureMatrix::new(
            Modality::Text,
            Tensor::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let (uf, _) = user_modal_features(&r, &items).unwrap();
        assert_eq!(uf.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn user_features_match_dense_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (nu, ni, d) = (6, 4, 3);
        let mut trips = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.gen_bool(0.5) {
                    trips.push((u, i, 1.0f32));
                }
            }
        }
        let r = SparseCsr::from_triplets(nu, ni, &trips).unwrap();
        let data: Vec<f32> = (0..ni * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let items =
            FeatureMatrix::new(Modality::Visual, Tensor::from_vec(ni, d, data).unwrap()).unwrap();
        let (uf, _) = user_modal_features(&r, &items).unwrap();
        let dense = r.densify();
        for u in 0..nu {
            let count: f32 = (0..ni).map(|i| dense.get(u, i)).sum();
            for c in 0..d {
                let mut acc = 0.0f32;
                for i in 0..ni {
                    acc += dense.get(u, i) * items.row(i)[c];
                }
                let expect = if count > 0.0 { acc / count } else { 0.0 };
                assert!((uf.row(u)[c] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn id_maps_json_roundtrip() {
        let maps = IdMaps {
            users: vec!["alice".into(), "bob".into()],
            items: vec!["x".into(), "y".into(), "z".into()],
        };
        let back = IdMaps::from_json(&maps.to_json().unwrap()).unwrap();
        assert_eq!(maps, back);
    }
}
