//! Stage 1: the text embedding synthesizer.
//!
//! A single affine map turns a frozen visual embedding into `k` pseudo
//! tokens that the frozen text encoder embeds back into the joint space.
//! Training pulls each instance's pseudo text embedding toward its own
//! visual embedding (align loss, symmetric batch contrastive) and, on
//! the labeled subset, toward the real class-name text embedding
//! (distill loss: cross-entropy over the class table plus a squared
//! distance). Both losses are computed on both views of every instance.
//! Only the synthesizer parameters receive gradients.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cache::EmbeddingCache;
use crate::data::{epoch_batches, Batch, Dataset, GcdSplit};
use crate::encoder::{ClassTextTable, EncoderStack, PROMPT_TEMPLATE};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Sgd};
use crate::rng;

/// The learnable map from a visual embedding to `k` pseudo tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TesModel {
    /// (k * token_dim) x joint_dim
    pub weight: Array2<f64>,
    /// 1 x (k * token_dim)
    pub bias: Array2<f64>,
    pub token_count: usize,
    pub token_dim: usize,
    pub joint_dim: usize,
    /// Align-loss temperature.
    pub tau_a: f64,
}

impl TesModel {
    /// Fresh model: weights uniform in +-1/sqrt(joint_dim), zero bias.
    pub fn init(
        joint_dim: usize,
        token_count: usize,
        token_dim: usize,
        tau_a: f64,
        seed: u64,
    ) -> Result<Self> {
        if token_count == 0 {
            return Err(Error::invalid_argument("token_count must be at least 1"));
        }
        if tau_a <= 0.0 {
            return Err(Error::invalid_argument("tau_a must be positive"));
        }
        let mut r = rng::stream(seed, 0x40);
        let bound = 1.0 / (joint_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((token_count * token_dim, joint_dim), |_| {
            r.gen_range(-bound..bound)
        });
        let bias = Array2::zeros((1, token_count * token_dim));
        Ok(Self {
            weight,
            bias,
            token_count,
            token_dim,
            joint_dim,
            tau_a,
        })
    }

    /// Deterministic linear map to pseudo tokens, shape (n, k, token_dim).
    pub fn project_to_tokens(&self, z_v: &Array2<f64>) -> Result<Array3<f64>> {
        if z_v.ncols() != self.joint_dim {
            return Err(Error::invalid_argument(format!(
                "input width {} does not match joint_dim {}",
                z_v.ncols(),
                self.joint_dim
            )));
        }
        let flat = z_v.dot(&self.weight.t()) + &self.bias;
        let n = z_v.nrows();
        Ok(Array3::from_shape_fn(
            (n, self.token_count, self.token_dim),
            |(i, k, j)| flat[(i, k * self.token_dim + j)],
        ))
    }

    /// Pseudo text embedding: tokens through the frozen text encoder,
    /// unit-norm rows.
    pub fn synthesize(&self, encoder: &EncoderStack, z_v: &Array2<f64>) -> Result<Array2<f64>> {
        let tokens = self.project_to_tokens(z_v)?;
        encoder.encode_pseudo_tokens(&tokens)
    }

    /// Constant matrix averaging the k token slots: (k * token_dim) -> token_dim.
    fn token_mean_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.token_dim, self.token_count * self.token_dim));
        for k in 0..self.token_count {
            for j in 0..self.token_dim {
                m[(j, k * self.token_dim + j)] = 1.0 / self.token_count as f64;
            }
        }
        m
    }

    /// Differentiable synthesis: `z_v` (constant) through the parameter
    /// vars and the frozen text head. Mirrors [`TesModel::synthesize`].
    pub fn synthesize_var(
        &self,
        tape: &Tape,
        encoder: &EncoderStack,
        z_v: &Var,
        weight: &Var,
        bias: &Var,
    ) -> Var {
        let (head_w, head_b) = encoder.text_head();
        let tokens_flat = z_v.matmul(&weight.t()).add_row(bias);
        let token_mean = tokens_flat.matmul(&tape.constant(self.token_mean_matrix()).t());
        token_mean
            .matmul(&tape.constant(head_w.clone()).t())
            .add_row(&tape.constant(head_b.clone()))
            .normalize_rows()
    }
}

/// Symmetric batch alignment loss between visual and pseudo text
/// embeddings (both unit-norm): InfoNCE in both directions with the
/// positive pair on the diagonal and the full batch in each denominator.
pub fn align_loss(_tape: &Tape, z_v: &Var, z_t: &Var, tau_a: f64) -> Result<Var> {
    let n = z_v.shape().0;
    if n == 0 {
        return Err(Error::invalid_argument("empty batch"));
    }
    if z_t.shape() != z_v.shape() {
        return Err(Error::invalid_argument("visual/text shape mismatch"));
    }
    let sims = z_v.matmul(&z_t.t()).scale(1.0 / tau_a);
    let idx: Vec<usize> = (0..n).collect();
    let diag = sims.select_per_row(&idx);
    let image_to_text = sims.logsumexp_rows().sub(&diag).mean_all();
    let text_to_image = sims.t().logsumexp_rows().sub(&diag).mean_all();
    Ok(image_to_text.add(&text_to_image))
}

/// Distillation loss on labeled instances: cross-entropy over the real
/// class table with the positive class excluded from the denominator (as
/// defined; `include_positive` restores the conventional softmax), plus
/// the squared distance to the class embedding. No temperature.
pub fn distill_loss(
    tape: &Tape,
    z_t_labeled: &Var,
    table: &ClassTextTable,
    class_rows: &[usize],
    include_positive: bool,
) -> Result<Var> {
    let n = z_t_labeled.shape().0;
    if n == 0 {
        return Err(Error::invalid_argument("no labeled rows"));
    }
    let num_classes = table.num_classes();
    if num_classes < 2 {
        return Err(Error::invalid_state(
            "distill loss needs at least 2 known classes (denominator would be empty)",
        ));
    }
    if class_rows.len() != n {
        return Err(Error::invalid_argument("one class row per instance"));
    }
    if let Some(&bad) = class_rows.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid_argument(format!(
            "class row {bad} out of range for {num_classes} classes"
        )));
    }
    let table_var = tape.constant(table.embeddings.clone());
    let logits = z_t_labeled.matmul(&table_var.t());
    let positives = logits.select_per_row(class_rows);
    let denom = if include_positive {
        logits.logsumexp_rows()
    } else {
        let mut mask = Array2::zeros((n, num_classes));
        for (i, &c) in class_rows.iter().enumerate() {
            mask[(i, c)] = f64::NEG_INFINITY;
        }
        logits.add(&tape.constant(mask)).logsumexp_rows()
    };
    let ce = denom.sub(&positives);
    let diff = z_t_labeled.sub(&table_var.gather_rows(class_rows));
    let sq = diff.mul(&diff).row_sums();
    Ok(ce.add(&sq).mean_all())
}

/// Stage-1 training configuration.
#[derive(Debug, Clone)]
pub struct TesTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub view_noise: f64,
    pub token_count: usize,
    pub tau_a: f64,
    /// Include the positive class in the distill denominator.
    pub distill_include_positive: bool,
    pub seed: u64,
}

/// Per-epoch stage-1 log record.
#[derive(Debug, Clone, Copy)]
pub struct TesEpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub align: f64,
    pub distill: f64,
    pub total: f64,
}

/// Builds the class text table for the split's old classes.
pub fn class_table_for_split(encoder: &EncoderStack, split: &GcdSplit) -> Result<ClassTextTable> {
    let mut names = Vec::with_capacity(split.old_classes.len());
    for &class in &split.old_classes {
        let name = encoder.class_name(class).ok_or_else(|| {
            Error::invalid_state(format!(
                "encoder backend has no class name for class {class}"
            ))
        })?;
        names.push(name);
    }
    encoder.encode_class_names(&names, PROMPT_TEMPLATE)
}

struct ViewLoss {
    total: Var,
    align: f64,
    distill: f64,
}

#[allow(clippy::too_many_arguments)]
fn view_loss(
    tape: &Tape,
    model: &TesModel,
    encoder: &EncoderStack,
    table: Option<&ClassTextTable>,
    batch: &Batch,
    latents: &Array2<f64>,
    weight: &Var,
    bias: &Var,
    include_positive: bool,
    split: &GcdSplit,
) -> Result<ViewLoss> {
    let (_, joint) = encoder.encode_images(latents)?;
    let z_v = tape.constant(joint);
    let z_t = model.synthesize_var(tape, encoder, &z_v, weight, bias);
    let align = align_loss(tape, &z_v, &z_t, model.tau_a)?;
    let labeled_rows = batch.labeled_rows();
    let (total, distill_value) = match table {
        Some(table) if !labeled_rows.is_empty() => {
            let mut class_rows = Vec::with_capacity(labeled_rows.len());
            for &row in &labeled_rows {
                let class = batch.labels[row].expect("labeled rows carry labels");
                let table_row = table.row_of(class).ok_or_else(|| {
                    Error::invalid_state(format!("class {class} missing from text table"))
                })?;
                class_rows.push(table_row);
                debug_assert!(split.is_old_class(class));
            }
            let z_labeled = z_t.gather_rows(&labeled_rows);
            let distill = distill_loss(tape, &z_labeled, table, &class_rows, include_positive)?;
            (align.add(&distill), distill.scalar_value())
        }
        _ => (align.clone(), 0.0),
    };
    Ok(ViewLoss {
        total,
        align: align.scalar_value(),
        distill: distill_value,
    })
}

/// Trains the synthesizer on the whole dataset (align on every instance,
/// distill on the labeled subset), averaging the objective over both
/// views each step. Returns the final-epoch model and the loss log.
pub fn train_tes(
    dataset: &Dataset,
    split: &GcdSplit,
    encoder: &EncoderStack,
    config: &TesTrainConfig,
) -> Result<(TesModel, Vec<TesEpochRecord>)> {
    let dims = encoder.dims();
    let mut model = TesModel::init(
        dims.joint_dim,
        config.token_count,
        dims.token_dim,
        config.tau_a,
        config.seed,
    )?;
    if config.token_count > dims.max_tokens {
        return Err(Error::invalid_argument(format!(
            "token_count {} exceeds encoder max_tokens {}",
            config.token_count, dims.max_tokens
        )));
    }
    let table = if split.labeled_ids.is_empty() {
        log::warn!("split has no labeled instances; training with the align loss only");
        None
    } else {
        Some(class_table_for_split(encoder, split)?)
    };

    let mut optimizer = Sgd::new(config.momentum);
    let mut batch_rng = rng::stream(config.seed, 0x41);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        let mut epoch_align = 0.0;
        let mut epoch_distill = 0.0;
        let mut steps = 0usize;
        let batches = epoch_batches(
            dataset,
            split,
            config.batch_size,
            config.view_noise,
            &mut batch_rng,
        )?;
        for (step, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let weight = tape.param(model.weight.clone());
            let bias = tape.param(model.bias.clone());
            let mut view_losses = Vec::with_capacity(2);
            for latents in [&batch.view_a, &batch.view_b] {
                view_losses.push(view_loss(
                    &tape,
                    &model,
                    encoder,
                    table.as_ref(),
                    batch,
                    latents,
                    &weight,
                    &bias,
                    config.distill_include_positive,
                    split,
                )?);
            }
            let total = view_losses[0].total.add(&view_losses[1].total).scale(0.5);
            let value = total.scalar_value();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("stage-1 loss became {value}"),
                });
            }
            let grads = tape.backward(&total);
            let gw = grads
                .wrt(&weight)
                .expect("weight receives gradient")
                .clone();
            let gb = grads.wrt(&bias).expect("bias receives gradient").clone();
            optimizer.step(&mut [&mut model.weight, &mut model.bias], &[gw, gb], lr);
            epoch_align += 0.5 * (view_losses[0].align + view_losses[1].align);
            epoch_distill += 0.5 * (view_losses[0].distill + view_losses[1].distill);
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        log.push(TesEpochRecord {
            epoch,
            learning_rate: lr,
            align: epoch_align / denom,
            distill: epoch_distill / denom,
            total: (epoch_align + epoch_distill) / denom,
        });
    }
    Ok((model, log))
}

/// Encodes the whole dataset (raw latents, no augmentation) and persists
/// frozen visual plus synthesized text embeddings per instance id.
pub fn export_embeddings(
    model: &TesModel,
    dataset: &Dataset,
    encoder: &EncoderStack,
) -> Result<EmbeddingCache> {
    let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
    let latents = dataset.latents(&ids)?;
    let (_, joint) = encoder.encode_images(&latents)?;
    let text = model.synthesize(encoder, &joint)?;
    EmbeddingCache::from_f64(ids, &joint, &text)
}

// -- checkpoint --------------------------------------------------------------

const TES_MAGIC: &[u8; 8] = b"MMGCDTES";

/// Writes a stage-1 checkpoint: dims header, f64 weights, temperature,
/// seed and epoch count.
pub fn save_tes(path: &Path, model: &TesModel, seed: u64, epochs: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(TES_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(1).map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.joint_dim as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.token_count as u32)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(model.token_dim as u32)
        .map_err(io_err)?;
    w.write_f64::<LittleEndian>(model.tau_a).map_err(io_err)?;
    w.write_u64::<LittleEndian>(seed).map_err(io_err)?;
    w.write_u32::<LittleEndian>(epochs as u32).map_err(io_err)?;
    for &v in model.weight.iter() {
        w.write_f64::<LittleEndian>(v).map_err(io_err)?;
    }
    for &v in model.bias.iter() {
        w.write_f64::<LittleEndian>(v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a stage-1 checkpoint; returns the model plus (seed, epochs).
pub fn load_tes(path: &Path) -> Result<(TesModel, u64, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TES_MAGIC {
        return Err(Error::format(path, "not a synthesizer checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != 1 {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let joint_dim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let token_count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let token_dim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let tau_a = r.read_f64::<LittleEndian>().map_err(io_err)?;
    let seed = r.read_u64::<LittleEndian>().map_err(io_err)?;
    let epochs = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut weight = Array2::zeros((token_count * token_dim, joint_dim));
    for v in weight.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    let mut bias = Array2::zeros((1, token_count * token_dim));
    for v in bias.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    Ok((
        TesModel {
            weight,
            bias,
            token_count,
            token_dim,
            joint_dim,
            tau_a,
        },
        seed,
        epochs,
    ))
}
