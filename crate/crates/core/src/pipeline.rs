//! End-to-end orchestration: dataset preparation and persistence, inference
//! embeddings, and checkpoint evaluation (including cross-dataset transfer).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{
    build_splits, load_features, load_interactions, user_modal_features, FeatureMatrix, IdMaps,
    InteractionSet, Modality,
};
use crate::error::{Error, Result};
use crate::evaluator::{score_embeddings, EvalReport, Split};
use crate::model::{
    bind_params, forward, positional_encoding, ForwardData, ForwardMode, ForwardSpec, ModelParams,
};
use crate::real::Real;
use crate::simgraph::cosine_topk;
use crate::sparse::{self, SparseCsr};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareMeta {
    pub seed: u64,
    pub knn_k: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_cold_users: usize,
}

/// Everything a training or evaluation run needs, as produced by `prepare`.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub set: InteractionSet,
    pub item_text: FeatureMatrix,
    pub item_visual: FeatureMatrix,
    pub user_text: FeatureMatrix,
    pub user_visual: FeatureMatrix,
    pub graph_user_text: SparseCsr<f32>,
    pub graph_user_visual: SparseCsr<f32>,
    pub graph_item_text: SparseCsr<f32>,
    pub graph_item_visual: SparseCsr<f32>,
    pub meta: PrepareMeta,
}

impl PreparedData {
    pub fn fused_user_graph(&self) -> Result<SparseCsr<f32>> {
        self.graph_user_text.add(&self.graph_user_visual)
    }

    pub fn fused_item_graph(&self) -> Result<SparseCsr<f32>> {
        self.graph_item_text.add(&self.graph_item_visual)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, content).map_err(|e| Error::io(p.display().to_string(), e))
        };
        write("meta.json", serde_json::to_string_pretty(&self.meta)?)?;
        write("id_maps.json", self.set.id_maps.to_json()?)?;
        sparse::write_pairs(&self.set.train, &dir.join("train.tsv"))?;
        sparse::write_pairs(&self.set.val, &dir.join("val.tsv"))?;
        sparse::write_pairs(&self.set.test, &dir.join("test.tsv"))?;
        crate::dataset::save_features(&self.item_text, &dir.join("item_text.idfv"))?;
        crate::dataset::save_features(&self.item_visual, &dir.join("item_visual.idfv"))?;
        crate::dataset::save_features(&self.user_text, &dir.join("user_text.idfv"))?;
        crate::dataset::save_features(&self.user_visual, &dir.join("user_visual.idfv"))?;
        sparse::write_graph(&self.graph_user_text, &dir.join("graph_user_text.idfg"))?;
        sparse::write_graph(&self.graph_user_visual, &dir.join("graph_user_visual.idfg"))?;
        sparse::write_graph(&self.graph_item_text, &dir.join("graph_item_text.idfg"))?;
        sparse::write_graph(&self.graph_item_visual, &dir.join("graph_item_visual.idfg"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<PreparedData> {
        let meta_path = dir.join("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: PrepareMeta = serde_json::from_str(&meta_text)?;
        let maps_path = dir.join("id_maps.json");
        let maps_text = std::fs::read_to_string(&maps_path)
            .map_err(|e| Error::io(maps_path.display().to_string(), e))?;
        let id_maps = IdMaps::from_json(&maps_text)?;

        let train = sparse::read_pairs(&dir.join("train.tsv"), meta.n_users, meta.n_items)?;
        let val = sparse::read_pairs(&dir.join("val.tsv"), meta.n_users, meta.n_items)?;
        let test = sparse::read_pairs(&dir.join("test.tsv"), meta.n_users, meta.n_items)?;
        let cold_users = (0..meta.n_users).map(|u| train.row_nnz(u) == 0).collect();

        let set = InteractionSet {
            n_users: meta.n_users,
            n_items: meta.n_items,
            train,
            val,
            test,
            id_maps,
            cold_users,
        };
        Ok(PreparedData {
            item_text: load_features(&dir.join("item_text.idfv"), Modality::Text, Some(meta.n_items))?,
            item_visual: load_features(&dir.join("item_visual.idfv"), Modality::Visual, Some(meta.n_items))?,
            user_text: load_features(&dir.join("user_text.idfv"), Modality::Text, Some(meta.n_users))?,
            user_visual: load_features(&dir.join("user_visual.idfv"), Modality::Visual, Some(meta.n_users))?,
            graph_user_text: sparse::read_graph(&dir.join("graph_user_text.idfg"))?,
            graph_user_visual: sparse::read_graph(&dir.join("graph_user_visual.idfg"))?,
            graph_item_text: sparse::read_graph(&dir.join("graph_item_text.idfg"))?,
            graph_item_visual: sparse::read_graph(&dir.join("graph_item_visual.idfg"))?,
            set,
            meta,
        })
    }
}

/// Splits interactions, derives user features from interacted items, and
/// builds the four per-modality neighbor graphs.
pub fn prepare_from_parts(
    pairs: &[(String, String)],
    item_text: FeatureMatrix,
    item_visual: FeatureMatrix,
    seed: u64,
    knn_k: usize,
) -> Result<PreparedData> {
    let set = build_splits(pairs, SPLIT_RATIOS, seed)?;
    for (feats, what) in [(&item_text, "text"), (&item_visual, "visual")] {
        if feats.n_rows() != set.n_items {
            return Err(Error::Data(format!(
                "{what} feature rows {} do not align with {} items",
                feats.n_rows(),
                set.n_items
            )));
        }
    }
    let (user_text, cold_t) = user_modal_features(&set.train, &item_text)?;
    let (user_visual, cold_v) = user_modal_features(&set.train, &item_visual)?;
    debug_assert_eq!(cold_t, set.cold_users);
    debug_assert_eq!(cold_v, set.cold_users);

    let graph_user_text = cosine_topk(user_text.tensor(), knn_k)?.csr;
    let graph_user_visual = cosine_topk(user_visual.tensor(), knn_k)?.csr;
    let graph_item_text = cosine_topk(item_text.tensor(), knn_k)?.csr;
    let graph_item_visual = cosine_topk(item_visual.tensor(), knn_k)?.csr;

    let meta = PrepareMeta {
        seed,
        knn_k,
        n_users: set.n_users,
        n_items: set.n_items,
        text_dim: item_text.dim(),
        visual_dim: item_visual.dim(),
        n_train: set.train.nnz(),
        n_val: set.val.nnz(),
        n_test: set.test.nnz(),
        n_cold_users: set.cold_users.iter().filter(|&&c| c).count(),
    };
    Ok(PreparedData {
        set,
        item_text,
        item_visual,
        user_text,
        user_visual,
        graph_user_text,
        graph_user_visual,
        graph_item_text,
        graph_item_visual,
        meta,
    })
}

/// File-based entry point: interaction log plus the two item feature files.
pub fn prepare(
    interactions: &Path,
    text_features: &Path,
    visual_features: &Path,
    seed: u64,
    knn_k: usize,
) -> Result<PreparedData> {
    let pairs = load_interactions(interactions)?;
    // item count is fixed by the interaction log, so alignment is checked
    // after the split below; row order must already match dense item ids
    let item_text = load_features(text_features, Modality::Text, None)?;
    let item_visual = load_features(visual_features, Modality::Visual, None)?;
    prepare_from_parts(&pairs, item_text, item_visual, seed, knn_k)
}

/// Feature tensors, position tables, and similarity graphs staged at the
/// tape precision so each forward pass can borrow them.
pub struct ModelInputs<T: Real> {
    pub user_text: Tensor<T>,
    pub user_visual: Tensor<T>,
    pub item_text: Tensor<T>,
    pub item_visual: Tensor<T>,
    pub pe_user: Tensor<T>,
    pub pe_item: Tensor<T>,
    pub static_ru: Option<SparseCsr<f32>>,
    pub static_ri: Option<SparseCsr<f32>>,
}

impl<T: Real> ModelInputs<T> {
    pub fn build(data: &PreparedData, cfg: &TrainConfig) -> Result<ModelInputs<T>> {
        let needs_static = cfg.flags.use_age && (cfg.flags.use_asg || cfg.flags.use_static_graphs);
        Ok(ModelInputs {
            user_text: data.user_text.tensor().convert(),
            user_visual: data.user_visual.tensor().convert(),
            item_text: data.item_text.tensor().convert(),
            item_visual: data.item_visual.tensor().convert(),
            pe_user: positional_encoding(data.set.n_users, cfg.d),
            pe_item: positional_encoding(data.set.n_items, cfg.d),
            static_ru: needs_static.then(|| data.fused_user_graph()).transpose()?,
            static_ri: needs_static.then(|| data.fused_item_graph()).transpose()?,
        })
    }

    pub fn view(&self) -> ForwardData<'_, T> {
        ForwardData {
            user_text: &self.user_text,
            user_visual: &self.user_visual,
            item_text: &self.item_text,
            item_visual: &self.item_visual,
            static_ru: self.static_ru.as_ref(),
            static_ri: self.static_ri.as_ref(),
            pe_user: &self.pe_user,
            pe_item: &self.pe_item,
        }
    }
}

/// Inference-mode user and item encodings for the given parameters.
pub fn infer_embeddings(
    params: &ModelParams<f32>,
    inputs: &ModelInputs<f32>,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = bind_params(&mut tape, params);
    let spec = ForwardSpec {
        flags: cfg.flags,
        alpha: cfg.alpha,
        layers: cfg.layers,
        include_layer0: cfg.include_layer0,
        asg_pairing: cfg.asg_pairing,
        knn_k: cfg.k,
        mode: ForwardMode::Infer {
            interactions: &data.set.train,
        },
    };
    let bundle = forward(&mut tape, &bound, &inputs.view(), &spec)?;
    Ok(bundle.split_encoded(&tape))
}

/// Scores a checkpoint on a prepared dataset. For transfer the target
/// dataset differs from the training one; its feature widths must match the
/// model's projection inputs.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data: &PreparedData,
    split: Split,
) -> Result<EvalReport> {
    if ckpt.manifest.text_dim != data.meta.text_dim {
        return Err(Error::Data(format!(
            "text feature width mismatch: checkpoint expects {}, dataset has {}",
            ckpt.manifest.text_dim, data.meta.text_dim
        )));
    }
    if ckpt.manifest.visual_dim != data.meta.visual_dim {
        return Err(Error::Data(format!(
            "visual feature width mismatch: checkpoint expects {}, dataset has {}",
            ckpt.manifest.visual_dim, data.meta.visual_dim
        )));
    }
    let cfg = &ckpt.manifest.config;
    let inputs: ModelInputs<f32> = ModelInputs::build(data, cfg)?;
    let (e_users, e_items) = infer_embeddings(&ckpt.params, &inputs, data, cfg)?;
    score_embeddings(
        &e_users,
        &e_items,
        &data.set.train,
        &data.set.val,
        &data.set.test,
        split,
        &cfg.eval_ks,
        cfg.score,
    )
}
