//! Stage 2: dual-branch joint training and inference.
//!
//! The visual branch runs a trainable tail block over frozen trunk
//! features; the text branch runs a trainable linear projection over the
//! frozen synthesizer's pseudo text embeddings. Both branches share one
//! prototype classifier and one loss recipe (contrastive representation
//! learning plus classification with self-distillation); the combined
//! objective additionally maximizes the multi-modal mean entropy and
//! minimizes the cross-modal instance-consistency divergence. Inference
//! uses the visual branch only.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cache::EmbeddingCache;
use crate::data::{epoch_batches, Batch, Dataset, GcdSplit};
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::objectives::{self, compute_anchors_var, LossWeights, TemperatureSet};
use crate::optim::{cosine_lr, Sgd};
use crate::rng;
use crate::tes::TesModel;

/// Which part of the image encoder stage 2 fine-tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Train the final backbone block; classify on backbone-width
    /// features with the joint projection removed (the default).
    TailFinetune,
    /// Keep the tail frozen and train the joint projection instead;
    /// classify on joint-width features.
    ProjectorFinetune,
}

/// Stage-2 training configuration.
#[derive(Debug, Clone)]
pub struct DualTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub view_noise: f64,
    pub weights: LossWeights,
    pub temperatures: TemperatureSet,
    /// Reproduce the contrastive denominator that drops the positive.
    pub exclude_positive: bool,
    pub projection_dim: usize,
    pub hidden_dim: usize,
    /// One projector instance serving both branches.
    pub share_projector: bool,
    /// Select [`FeatureMode::ProjectorFinetune`].
    pub finetune_projector: bool,
    /// Read pseudo text embeddings from the stage-1 cache instead of
    /// recomputing them; valid only with augmentation disabled.
    pub use_cache_fast_path: bool,
    pub seed: u64,
}

impl DualTrainConfig {
    pub fn feature_mode(&self) -> FeatureMode {
        if self.finetune_projector {
            FeatureMode::ProjectorFinetune
        } else {
            FeatureMode::TailFinetune
        }
    }
}

/// A two-layer GELU projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl Projector {
    fn init(in_dim: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = 1.0 / (in_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((hidden, in_dim), |_| rng.gen_range(-bound1..bound1)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::from_shape_fn((out, hidden), |_| rng.gen_range(-bound2..bound2)),
            b2: Array2::zeros((1, out)),
        }
    }
}

/// Trainable stage-2 state. Only the tensors belonging to the active
/// [`FeatureMode`] are optimized; everything frozen lives in the encoder
/// and synthesizer passed to the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    pub mode_projector_finetune: bool,
    pub share_projector: bool,
    /// Trainable tail block (tail mode), seeded from the frozen tail.
    pub tail_w: Array2<f64>,
    pub tail_b: Array2<f64>,
    /// Trainable joint projection (projector mode), seeded from frozen.
    pub joint_w: Array2<f64>,
    pub projector_v: Projector,
    /// Present only with separate per-branch projectors.
    pub projector_t: Option<Projector>,
    /// Text projection into the feature space: feature_dim x joint_dim.
    pub text_proj_w: Array2<f64>,
    pub text_proj_b: Array2<f64>,
    /// K x feature_dim prototype rows, unit norm after every step.
    pub prototypes: Array2<f64>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub epochs_trained: usize,
}

impl DualModel {
    /// Initializes stage-2 state from the frozen encoder.
    ///
    /// Prototypes start at the centroids of a labeled-constrained
    /// k-means pass over the initial visual features (the non-parametric
    /// solution), unit-normalized; training refines them parametrically.
    /// A prototype initialized off the feature manifold gets an
    /// exponentially small softmax share under the cosine classifier and
    /// the entropy term can never revive it, so data-driven placement is
    /// what makes the desk-scale runs stable.
    pub fn init(
        encoder: &EncoderStack,
        dataset: &Dataset,
        split: &GcdSplit,
        config: &DualTrainConfig,
    ) -> Result<Self> {
        let num_classes = split.num_classes();
        if num_classes == 0 {
            return Err(Error::invalid_state("cannot classify into zero classes"));
        }
        let dims = encoder.dims();
        let feature_dim = match config.feature_mode() {
            FeatureMode::TailFinetune => dims.backbone_dim,
            FeatureMode::ProjectorFinetune => dims.joint_dim,
        };
        let (tail_w, tail_b) = encoder.tail_params();
        let mut r = rng::stream(config.seed, 0x50);
        let projector_v = Projector::init(
            feature_dim,
            config.hidden_dim,
            config.projection_dim,
            &mut r,
        );
        let projector_t = if config.share_projector {
            None
        } else {
            Some(Projector::init(
                feature_dim,
                config.hidden_dim,
                config.projection_dim,
                &mut r,
            ))
        };
        let bound = 1.0 / (dims.joint_dim as f64).sqrt();
        let text_proj_w = Array2::from_shape_fn((feature_dim, dims.joint_dim), |_| {
            r.gen_range(-bound..bound)
        });
        let text_proj_b = Array2::zeros((1, feature_dim));

        let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
        let latents = dataset.latents(&ids)?;
        let (backbone, joint) = encoder.encode_images(&latents)?;
        let mut initial_features = match config.feature_mode() {
            FeatureMode::TailFinetune => backbone,
            FeatureMode::ProjectorFinetune => joint,
        };
        normalize_rows_in_place(&mut initial_features);
        // constraints pin each old class to its prototype index
        let constraints: std::collections::BTreeMap<usize, usize> = split
            .labeled_ids
            .iter()
            .filter_map(|id| {
                let row = dataset.index_of(id)?;
                let class = dataset.get(id).and_then(|i| i.class_id)?;
                Some((row, split.class_index(class)?))
            })
            .collect();
        let clustering = crate::eval::ss_kmeans(
            &initial_features,
            &constraints,
            num_classes,
            config.seed.wrapping_add(0x52),
        )?;
        let mut prototypes = clustering.centroids;
        normalize_rows_in_place(&mut prototypes);

        Ok(Self {
            mode_projector_finetune: config.finetune_projector,
            share_projector: config.share_projector,
            tail_w: tail_w.clone(),
            tail_b: tail_b.clone(),
            joint_w: encoder.joint_weight().clone(),
            projector_v,
            projector_t,
            text_proj_w,
            text_proj_b,
            prototypes,
            feature_dim,
            num_classes,
            epochs_trained: 0,
        })
    }

    /// Names of the trainable tensors, in optimizer order.
    pub fn parameter_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        if self.mode_projector_finetune {
            names.push("joint.weight");
        } else {
            names.push("tail.weight");
            names.push("tail.bias");
        }
        names.extend([
            "projector_v.w1",
            "projector_v.b1",
            "projector_v.w2",
            "projector_v.b2",
        ]);
        if self.projector_t.is_some() {
            names.extend([
                "projector_t.w1",
                "projector_t.b1",
                "projector_t.w2",
                "projector_t.b2",
            ]);
        }
        names.extend([
            "text_projection.weight",
            "text_projection.bias",
            "classifier.prototypes",
        ]);
        names
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut params: Vec<&mut Array2<f64>> = Vec::new();
        if self.mode_projector_finetune {
            params.push(&mut self.joint_w);
        } else {
            params.push(&mut self.tail_w);
            params.push(&mut self.tail_b);
        }
        params.push(&mut self.projector_v.w1);
        params.push(&mut self.projector_v.b1);
        params.push(&mut self.projector_v.w2);
        params.push(&mut self.projector_v.b2);
        if let Some(pt) = self.projector_t.as_mut() {
            params.push(&mut pt.w1);
            params.push(&mut pt.b1);
            params.push(&mut pt.w2);
            params.push(&mut pt.b2);
        }
        params.push(&mut self.text_proj_w);
        params.push(&mut self.text_proj_b);
        params.push(&mut self.prototypes);
        params
    }

    /// Visual-branch features for raw latents (no augmentation), using
    /// the trained tensors.
    pub fn visual_features(
        &self,
        encoder: &EncoderStack,
        latents: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let trunk = encoder.trunk_features(latents)?;
        Ok(if self.mode_projector_finetune {
            encoder.apply_frozen_tail(&trunk).dot(&self.joint_w.t())
        } else {
            trunk.dot(&self.tail_w.t()) + &self.tail_b
        })
    }

    /// Text-branch features: the trained projection of pseudo text
    /// embeddings.
    pub fn text_features(&self, z_t: &Array2<f64>) -> Array2<f64> {
        z_t.dot(&self.text_proj_w.t()) + &self.text_proj_b
    }
}

fn normalize_rows_in_place(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row /= norm;
    }
}

/// Cosine logits of features against prototypes (both unit-normalized).
pub fn classify(features: &Array2<f64>, prototypes: &Array2<f64>) -> Result<Array2<f64>> {
    if prototypes.nrows() == 0 {
        return Err(Error::invalid_state("classifier has no prototypes"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_argument("non-finite features"));
    }
    let mut f = features.clone();
    normalize_rows_in_place(&mut f);
    let mut p = prototypes.clone();
    normalize_rows_in_place(&mut p);
    Ok(f.dot(&p.t()))
}

/// Argmax class indices from the visual branch; ties break to the lowest
/// index.
pub fn infer(
    model: &DualModel,
    encoder: &EncoderStack,
    latents: &Array2<f64>,
) -> Result<Vec<usize>> {
    let features = model.visual_features(encoder, latents)?;
    let logits = classify(&features, &model.prototypes)?;
    Ok(argmax_rows(&logits))
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (j, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, j);
                }
            }
            best.1
        })
        .collect()
}

/// Scalar values of one step's loss terms. Branch totals are the
/// lambda-weighted sums; `total` recombines as
/// `db_v + db_t - epsilon * h_mm + lambda_cico * cico`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub rep_self_v: f64,
    pub rep_sup_v: f64,
    pub cls_self_v: f64,
    pub cls_sup_v: f64,
    pub db_v: f64,
    pub rep_self_t: f64,
    pub rep_sup_t: f64,
    pub cls_self_t: f64,
    pub cls_sup_t: f64,
    pub db_t: f64,
    pub h_mm: f64,
    pub cico: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the stored components exactly as the step graph did.
    pub fn recombined(&self, weights: &LossWeights) -> f64 {
        self.db_v + self.db_t + (-weights.epsilon) * self.h_mm + weights.lambda_cico * self.cico
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy)]
pub struct DualEpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub tau_t: f64,
    pub mean: LossBreakdown,
}

struct ParamVars {
    feature_head: Vec<Var>,
    projector_v: Vec<Var>,
    projector_t: Option<Vec<Var>>,
    text_proj: Vec<Var>,
    prototypes: Var,
}

impl ParamVars {
    fn insert(tape: &Tape, model: &DualModel) -> Self {
        let feature_head = if model.mode_projector_finetune {
            vec![tape.param(model.joint_w.clone())]
        } else {
            vec![
                tape.param(model.tail_w.clone()),
                tape.param(model.tail_b.clone()),
            ]
        };
        let proj = |p: &Projector| -> Vec<Var> {
            vec![
                tape.param(p.w1.clone()),
                tape.param(p.b1.clone()),
                tape.param(p.w2.clone()),
                tape.param(p.b2.clone()),
            ]
        };
        ParamVars {
            feature_head,
            projector_v: proj(&model.projector_v),
            projector_t: model.projector_t.as_ref().map(proj),
            text_proj: vec![
                tape.param(model.text_proj_w.clone()),
                tape.param(model.text_proj_b.clone()),
            ],
            prototypes: tape.param(model.prototypes.clone()),
        }
    }

    fn all(&self) -> Vec<&Var> {
        let mut vars: Vec<&Var> = self.feature_head.iter().collect();
        vars.extend(self.projector_v.iter());
        if let Some(pt) = &self.projector_t {
            vars.extend(pt.iter());
        }
        vars.extend(self.text_proj.iter());
        vars.push(&self.prototypes);
        vars
    }
}

fn apply_projector(vars: &[Var], x: &Var) -> Var {
    x.matmul(&vars[0].t())
        .add_row(&vars[1])
        .gelu()
        .matmul(&vars[2].t())
        .add_row(&vars[3])
        .normalize_rows()
}

fn cosine_logits(features: &Var, prototypes: &Var) -> Var {
    features
        .normalize_rows()
        .matmul(&prototypes.normalize_rows().t())
}

/// One branch's loss from the two views' projected embeddings and
/// classifier logits. Returns (weighted branch loss, raw components
/// (rep_self, rep_sup, cls_self, cls_sup)).
#[allow(clippy::too_many_arguments)]
fn branch_loss(
    tape: &Tape,
    h_a: &Var,
    h_b: &Var,
    p_a: &Var,
    p_b: &Var,
    teacher_stack: &Var,
    labeled_rows: &[usize],
    labels: &[usize],
    weights: &LossWeights,
    temps: &TemperatureSet,
    tau_t: f64,
    exclude_positive: bool,
) -> Result<(Var, [f64; 4])> {
    let lambda = weights.lambda_balance;
    let rep_self = objectives::self_contrastive(tape, h_a, h_b, temps.tau_c, exclude_positive)?;
    let cls_self = objectives::self_distill(
        tape,
        &Var::vstack(&[p_a, p_b]),
        teacher_stack,
        tau_t,
        temps.tau_s,
    );
    // Supervised terms need labeled instances; contrastive additionally
    // needs at least two of them.
    let (rep_sup, cls_sup) = if labeled_rows.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let ha_l = h_a.gather_rows(labeled_rows);
        let hb_l = h_b.gather_rows(labeled_rows);
        let rep_sup = if labeled_rows.len() >= 2 {
            objectives::supervised_contrastive(tape, &ha_l, &hb_l, labels, temps.tau_c)?
        } else {
            tape.scalar(0.0)
        };
        let pa_l = p_a.gather_rows(labeled_rows);
        let pb_l = p_b.gather_rows(labeled_rows);
        let stacked = Var::vstack(&[&pa_l, &pb_l]);
        let mut twice: Vec<usize> = labels.to_vec();
        twice.extend_from_slice(labels);
        let cls_sup = objectives::supervised_ce(tape, &stacked, &twice, temps.tau_s)?;
        (rep_sup, cls_sup)
    };
    let total = rep_self
        .scale(1.0 - lambda)
        .add(&rep_sup.scale(lambda))
        .add(&cls_self.scale(1.0 - lambda))
        .add(&cls_sup.scale(lambda));
    let raw = [
        rep_self.scalar_value(),
        rep_sup.scalar_value(),
        cls_self.scalar_value(),
        cls_sup.scalar_value(),
    ];
    Ok((total, raw))
}

/// Pseudo text embeddings for one view, through the frozen synthesizer
/// pipeline (or the stage-1 cache on the fast path).
fn pseudo_text_for_view(
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
    latents: &Array2<f64>,
    cache: Option<&EmbeddingCache>,
) -> Result<Array2<f64>> {
    if let Some(cache) = cache {
        let (_, dim_t) = cache.dims();
        let mut out = Array2::zeros((batch.len(), dim_t));
        for (i, id) in batch.ids.iter().enumerate() {
            let row = cache.row_of(id).ok_or_else(|| {
                Error::invalid_state(format!("instance {id:?} missing from embedding cache"))
            })?;
            for (j, &v) in cache.text_row_f32(row).iter().enumerate() {
                out[(i, j)] = f64::from(v);
            }
        }
        return Ok(out);
    }
    let (_, joint) = encoder.encode_images(latents)?;
    tes.synthesize(encoder, &joint)
}

/// Per-view classifier logits of both branches, used to freeze the
/// self-distillation teachers during gradient verification.
#[derive(Debug, Clone)]
pub struct TeacherLogits {
    pub visual: [Array2<f64>; 2],
    pub text: [Array2<f64>; 2],
}

/// Plain (non-differentiable) forward pass producing the classifier
/// logits of both branches for both views of a batch.
pub fn classifier_view_logits(
    model: &DualModel,
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
) -> Result<TeacherLogits> {
    let mut visual = Vec::with_capacity(2);
    let mut text = Vec::with_capacity(2);
    for latents in [&batch.view_a, &batch.view_b] {
        let fv = model.visual_features(encoder, latents)?;
        visual.push(classify(&fv, &model.prototypes)?);
        let z_t = pseudo_text_for_view(encoder, tes, batch, latents, None)?;
        let ft = model.text_features(&z_t);
        text.push(classify(&ft, &model.prototypes)?);
    }
    let [va, vb]: [Array2<f64>; 2] = visual.try_into().expect("two views");
    let [ta, tb]: [Array2<f64>; 2] = text.try_into().expect("two views");
    Ok(TeacherLogits {
        visual: [va, vb],
        text: [ta, tb],
    })
}

struct StepGraph {
    total: Var,
    breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
fn build_step(
    tape: &Tape,
    params: &ParamVars,
    model: &DualModel,
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
    split: &GcdSplit,
    config: &DualTrainConfig,
    tau_t: f64,
    cache: Option<&EmbeddingCache>,
    frozen_teachers: Option<&TeacherLogits>,
) -> Result<StepGraph> {
    let labeled_rows = batch.labeled_rows();
    // class ids map to prototype indices through the split's class order
    let labels: Vec<usize> = labeled_rows
        .iter()
        .map(|&i| {
            let class = batch.labels[i].expect("labeled row");
            split.class_index(class).ok_or_else(|| {
                Error::invalid_state(format!("class {class} missing from the split"))
            })
        })
        .collect::<Result<_>>()?;

    // per-view features for both branches
    let mut feats_v = Vec::with_capacity(2);
    let mut feats_t = Vec::with_capacity(2);
    for latents in [&batch.view_a, &batch.view_b] {
        let trunk = encoder.trunk_features(latents)?;
        let fv = if model.mode_projector_finetune {
            let tail_out = tape.constant(encoder.apply_frozen_tail(&trunk));
            tail_out.matmul(&params.feature_head[0].t())
        } else {
            tape.constant(trunk)
                .matmul(&params.feature_head[0].t())
                .add_row(&params.feature_head[1])
        };
        feats_v.push(fv);
        let z_t = pseudo_text_for_view(encoder, tes, batch, latents, cache)?;
        let ft = tape
            .constant(z_t)
            .matmul(&params.text_proj[0].t())
            .add_row(&params.text_proj[1]);
        feats_t.push(ft);
    }

    let projector_t = params.projector_t.as_ref().unwrap_or(&params.projector_v);
    let h_v: Vec<Var> = feats_v
        .iter()
        .map(|f| apply_projector(&params.projector_v, f))
        .collect();
    let h_t: Vec<Var> = feats_t
        .iter()
        .map(|f| apply_projector(projector_t, f))
        .collect();
    let p_v: Vec<Var> = feats_v
        .iter()
        .map(|f| cosine_logits(f, &params.prototypes))
        .collect();
    let p_t: Vec<Var> = feats_t
        .iter()
        .map(|f| cosine_logits(f, &params.prototypes))
        .collect();

    // teachers: swapped-view logits, either live (stop-gradient applies
    // inside the distillation op) or frozen reference values
    let teacher_v = match frozen_teachers {
        Some(t) => {
            let stacked =
                ndarray::concatenate(ndarray::Axis(0), &[t.visual[1].view(), t.visual[0].view()])
                    .expect("matching widths");
            tape.constant(stacked)
        }
        None => Var::vstack(&[&p_v[1], &p_v[0]]),
    };
    let teacher_t = match frozen_teachers {
        Some(t) => {
            let stacked =
                ndarray::concatenate(ndarray::Axis(0), &[t.text[1].view(), t.text[0].view()])
                    .expect("matching widths");
            tape.constant(stacked)
        }
        None => Var::vstack(&[&p_t[1], &p_t[0]]),
    };

    let (db_v, raw_v) = branch_loss(
        tape,
        &h_v[0],
        &h_v[1],
        &p_v[0],
        &p_v[1],
        &teacher_v,
        &labeled_rows,
        &labels,
        &config.weights,
        &config.temperatures,
        tau_t,
        config.exclude_positive,
    )?;
    let (db_t, raw_t) = branch_loss(
        tape,
        &h_t[0],
        &h_t[1],
        &p_t[0],
        &p_t[1],
        &teacher_t,
        &labeled_rows,
        &labels,
        &config.weights,
        &config.temperatures,
        tau_t,
        config.exclude_positive,
    )?;

    let h_mm = objectives::mean_entropy(
        tape,
        &Var::vstack(&[&p_v[0], &p_v[1]]),
        &Var::vstack(&[&p_t[0], &p_t[1]]),
        config.temperatures.tau_s,
    );

    // cross-modal consistency over both views, anchored on the labeled
    // subset; skipped (0) when weighted out or when the batch has no
    // labeled instances
    let cico = if labeled_rows.is_empty() || config.weights.lambda_cico == 0.0 {
        tape.scalar(0.0)
    } else {
        let zv_l = Var::vstack(&[
            &feats_v[0].gather_rows(&labeled_rows),
            &feats_v[1].gather_rows(&labeled_rows),
        ]);
        let zt_l = Var::vstack(&[
            &feats_t[0].gather_rows(&labeled_rows),
            &feats_t[1].gather_rows(&labeled_rows),
        ]);
        let mut twice = labels.clone();
        twice.extend_from_slice(&labels);
        let (anchors_v, anchors_t, _) = compute_anchors_var(tape, &zv_l, &zt_l, &twice)?;
        let zv_all = Var::vstack(&[&feats_v[0], &feats_v[1]]);
        let zt_all = Var::vstack(&[&feats_t[0], &feats_t[1]]);
        objectives::cico_loss(tape, &zv_all, &zt_all, &anchors_v, &anchors_t)?
    };

    let total = db_v
        .add(&db_t)
        .add(&h_mm.scale(-config.weights.epsilon))
        .add(&cico.scale(config.weights.lambda_cico));

    let breakdown = LossBreakdown {
        rep_self_v: raw_v[0],
        rep_sup_v: raw_v[1],
        cls_self_v: raw_v[2],
        cls_sup_v: raw_v[3],
        db_v: db_v.scalar_value(),
        rep_self_t: raw_t[0],
        rep_sup_t: raw_t[1],
        cls_self_t: raw_t[2],
        cls_sup_t: raw_t[3],
        db_t: db_t.scalar_value(),
        h_mm: h_mm.scalar_value(),
        cico: cico.scalar_value(),
        total: total.scalar_value(),
    };
    Ok(StepGraph { total, breakdown })
}

/// Value-only total loss with component breakdown at the current
/// parameters (no training step).
pub fn total_loss(
    model: &DualModel,
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
    split: &GcdSplit,
    config: &DualTrainConfig,
    tau_t: f64,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let params = ParamVars::insert(&tape, model);
    let graph = build_step(
        &tape, &params, model, encoder, tes, batch, split, config, tau_t, None, None,
    )?;
    Ok(graph.breakdown)
}

/// Total loss with the self-distillation teachers pinned to reference
/// logits. Central differences of this function match the analytic
/// stop-gradient derivative when the reference is the same model.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_teacher_frozen(
    model: &DualModel,
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
    split: &GcdSplit,
    config: &DualTrainConfig,
    tau_t: f64,
    teachers: &TeacherLogits,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let params = ParamVars::insert(&tape, model);
    let graph = build_step(
        &tape,
        &params,
        model,
        encoder,
        tes,
        batch,
        split,
        config,
        tau_t,
        None,
        Some(teachers),
    )?;
    Ok(graph.breakdown)
}

/// Total loss plus analytic gradients for every trainable tensor, in
/// [`DualModel::parameter_names`] order. A probe for gradient checks;
/// the training loop computes the same quantities internally.
pub fn total_loss_with_gradients(
    model: &DualModel,
    encoder: &EncoderStack,
    tes: &TesModel,
    batch: &Batch,
    split: &GcdSplit,
    config: &DualTrainConfig,
    tau_t: f64,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let tape = Tape::new();
    let params = ParamVars::insert(&tape, model);
    let graph = build_step(
        &tape, &params, model, encoder, tes, batch, split, config, tau_t, None, None,
    )?;
    let grads = tape.backward(&graph.total);
    let arrays = params
        .all()
        .iter()
        .map(|v| {
            grads.wrt(v).cloned().unwrap_or_else(|| {
                let (r, c) = v.shape();
                Array2::zeros((r, c))
            })
        })
        .collect();
    Ok((graph.breakdown, arrays))
}

/// Mutable references to the trainable tensors in parameter order
/// (tensor-level access for gradient checks).
pub fn parameter_tensors_mut(model: &mut DualModel) -> Vec<&mut Array2<f64>> {
    model.parameters_mut()
}

/// Trains stage 2 from a fresh model and returns the final-epoch model
/// plus per-epoch records. The optimizer touches exactly the tensors
/// named by [`DualModel::parameter_names`]; prototypes are re-normalized
/// to unit rows after every step.
pub fn train_dual(
    dataset: &Dataset,
    split: &GcdSplit,
    tes: &TesModel,
    encoder: &EncoderStack,
    config: &DualTrainConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<(DualModel, Vec<DualEpochRecord>)> {
    let mut model = DualModel::init(encoder, dataset, split, config)?;
    let records = train_dual_in_place(dataset, split, tes, encoder, config, cache, &mut model)?;
    Ok((model, records))
}

/// Training loop over an existing model (e.g. a pre-built snapshot).
pub fn train_dual_in_place(
    dataset: &Dataset,
    split: &GcdSplit,
    tes: &TesModel,
    encoder: &EncoderStack,
    config: &DualTrainConfig,
    cache: Option<&EmbeddingCache>,
    model: &mut DualModel,
) -> Result<Vec<DualEpochRecord>> {
    config.weights.validate()?;
    config.temperatures.validate()?;
    if config.use_cache_fast_path {
        if config.view_noise != 0.0 {
            return Err(Error::invalid_argument(
                "the embedding-cache fast path requires augmentation to be disabled",
            ));
        }
        if cache.is_none() {
            return Err(Error::invalid_state(
                "use_cache_fast_path set but no embedding cache supplied",
            ));
        }
    }
    let cache = if config.use_cache_fast_path {
        cache
    } else {
        None
    };
    let expected = model.parameter_names();
    let mut records = Vec::with_capacity(config.epochs);
    let mut optimizer = Sgd::new(config.momentum);
    let mut batch_rng = rng::stream(config.seed, 0x51);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        let tau_t = config.temperatures.tau_t_at(epoch);
        let batches = epoch_batches(
            dataset,
            split,
            config.batch_size,
            config.view_noise,
            &mut batch_rng,
        )?;
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let params = ParamVars::insert(&tape, model);
            // the optimizer updates exactly the enumerated parameter set
            let vars = params.all();
            assert_eq!(vars.len(), expected.len(), "parameter set drifted");
            let graph = build_step(
                &tape, &params, model, encoder, tes, batch, split, config, tau_t, cache, None,
            )?;
            if !graph.breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("stage-2 loss breakdown: {:?}", graph.breakdown),
                });
            }
            let grads = tape.backward(&graph.total);
            let grad_arrays: Vec<Array2<f64>> = vars
                .iter()
                .map(|v| {
                    grads.wrt(v).cloned().unwrap_or_else(|| {
                        let (r, c) = v.shape();
                        Array2::zeros((r, c))
                    })
                })
                .collect();
            let mut param_refs = model.parameters_mut();
            optimizer.step(&mut param_refs, &grad_arrays, lr);
            normalize_rows_in_place(&mut model.prototypes);
            accumulate_breakdown(&mut sums, &graph.breakdown);
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        records.push(DualEpochRecord {
            epoch,
            learning_rate: lr,
            tau_t,
            mean: scale_breakdown(&sums, 1.0 / denom),
        });
        model.epochs_trained = epoch + 1;
    }
    Ok(records)
}

fn accumulate_breakdown(acc: &mut LossBreakdown, x: &LossBreakdown) {
    acc.rep_self_v += x.rep_self_v;
    acc.rep_sup_v += x.rep_sup_v;
    acc.cls_self_v += x.cls_self_v;
    acc.cls_sup_v += x.cls_sup_v;
    acc.db_v += x.db_v;
    acc.rep_self_t += x.rep_self_t;
    acc.rep_sup_t += x.rep_sup_t;
    acc.cls_self_t += x.cls_self_t;
    acc.cls_sup_t += x.cls_sup_t;
    acc.db_t += x.db_t;
    acc.h_mm += x.h_mm;
    acc.cico += x.cico;
    acc.total += x.total;
}

fn scale_breakdown(x: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        rep_self_v: x.rep_self_v * s,
        rep_sup_v: x.rep_sup_v * s,
        cls_self_v: x.cls_self_v * s,
        cls_sup_v: x.cls_sup_v * s,
        db_v: x.db_v * s,
        rep_self_t: x.rep_self_t * s,
        rep_sup_t: x.rep_sup_t * s,
        cls_self_t: x.cls_self_t * s,
        cls_sup_t: x.cls_sup_t * s,
        db_t: x.db_t * s,
        h_mm: x.h_mm * s,
        cico: x.cico * s,
        total: x.total * s,
    }
}

// -- checkpoint ---------------------------------------------------------------

const DUAL_MAGIC: &[u8; 8] = b"MMGCDDBM";

/// Writes a stage-2 checkpoint: versioned header, trainable tensors at
/// 32-bit, a config echo string, epoch count and seed.
pub fn save_dual(path: &Path, model: &DualModel, config_echo: &str, seed: u64) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(DUAL_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(1).map_err(io_err)?;
    w.write_u8(u8::from(model.mode_projector_finetune))
        .map_err(io_err)?;
    w.write_u8(u8::from(model.share_projector))
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.feature_dim as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.num_classes as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.epochs_trained as u32)
        .map_err(io_err)?;
    w.write_u64::<LittleEndian>(seed).map_err(io_err)?;
    let echo = config_echo.as_bytes();
    w.write_u32::<LittleEndian>(echo.len() as u32)
        .map_err(io_err)?;
    w.write_all(echo).map_err(io_err)?;
    let mut tensors: Vec<&Array2<f64>> = vec![
        &model.tail_w,
        &model.tail_b,
        &model.joint_w,
        &model.projector_v.w1,
        &model.projector_v.b1,
        &model.projector_v.w2,
        &model.projector_v.b2,
    ];
    if let Some(pt) = &model.projector_t {
        tensors.extend([&pt.w1, &pt.b1, &pt.w2, &pt.b2]);
    }
    tensors.extend([&model.text_proj_w, &model.text_proj_b, &model.prototypes]);
    w.write_u32::<LittleEndian>(tensors.len() as u32)
        .map_err(io_err)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.nrows() as u32)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(t.ncols() as u32)
            .map_err(io_err)?;
        for &v in t.iter() {
            w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a stage-2 checkpoint; returns the model (f32 tensors widened to
/// f64), the config echo and the seed.
pub fn load_dual(path: &Path) -> Result<(DualModel, String, u64)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DUAL_MAGIC {
        return Err(Error::format(path, "not a dual-branch checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != 1 {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mode_projector_finetune = r.read_u8().map_err(io_err)? != 0;
    let share_projector = r.read_u8().map_err(io_err)? != 0;
    let feature_dim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let num_classes = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let epochs_trained = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(io_err)?;
    let echo_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo).map_err(io_err)?;
    let echo = String::from_utf8(echo)
        .map_err(|e| Error::format(path, format!("config echo utf8: {e}")))?;
    let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let expected = if share_projector { 10 } else { 14 };
    if count != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} tensors, found {count}"),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut t = Array2::zeros((rows, cols));
        for v in t.iter_mut() {
            *v = f64::from(r.read_f32::<LittleEndian>().map_err(io_err)?);
        }
        tensors.push(t);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("tensor count validated");
    let tail_w = next();
    let tail_b = next();
    let joint_w = next();
    let projector_v = Projector {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
    };
    let projector_t = if share_projector {
        None
    } else {
        Some(Projector {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
    };
    let text_proj_w = next();
    let text_proj_b = next();
    let prototypes = next();
    Ok((
        DualModel {
            mode_projector_finetune,
            share_projector,
            tail_w,
            tail_b,
            joint_w,
            projector_v,
            projector_t,
            text_proj_w,
            text_proj_b,
            prototypes,
            feature_dim,
            num_classes,
            epochs_trained,
        },
        echo,
        seed,
    ))
}
