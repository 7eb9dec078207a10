//! Frozen image/text encoder contracts and their backends.
//!
//! Both training stages treat the encoders as fixed functions: the image
//! encoder yields a backbone feature and a unit-norm joint embedding per
//! input; the text encoder yields a unit-norm joint embedding either for
//! a class-name prompt or for a sequence of raw pseudo tokens. Stage 2
//! additionally clones the final "tail" block of the image encoder as
//! its trainable part.
//!
//! The `synthetic` backend is a deterministic oracle built from the
//! generator's per-class anchors: linear maps sized like the real thing,
//! with the joint projection fitted so each class's visual embedding
//! coincides with its text anchor (fitted mode). The `pretrained`
//! backend loads the same structure from a weight archive.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassId, OracleAlignment, SyntheticOracleParams};
use crate::error::{Error, Result};
use crate::rng;

/// Prompt used for real class names.
pub const PROMPT_TEMPLATE: &str = "a photo of a {CLS}";

/// Substitutes a class name into a prompt template.
pub fn build_prompt_with(template: &str, class_name: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::invalid_argument("class name must not be empty"));
    }
    if !template.contains("{CLS}") {
        return Err(Error::invalid_argument(format!(
            "prompt template {template:?} has no {{CLS}} placeholder"
        )));
    }
    Ok(template.replace("{CLS}", class_name))
}

/// `build_prompt_with` using the default template.
pub fn build_prompt(class_name: &str) -> Result<String> {
    build_prompt_with(PROMPT_TEMPLATE, class_name)
}

/// Encoder widths. `visual_dim` is the raw latent input width; the rest
/// mirror a vision-language model: post-backbone width, joint embedding
/// width, and the text encoder's token width / capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderDims {
    pub visual_dim: usize,
    pub backbone_dim: usize,
    pub joint_dim: usize,
    pub token_dim: usize,
    pub max_tokens: usize,
}

/// Real text embeddings of the known class names, unit-norm rows, row j
/// for `class_order[j]`.
#[derive(Debug, Clone)]
pub struct ClassTextTable {
    pub embeddings: Array2<f64>,
    pub class_order: Vec<ClassId>,
}

impl ClassTextTable {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Row index for a class id.
    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class)
    }
}

/// A frozen encoder pair plus the tail block stage 2 may clone and train.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    dims: EncoderDims,
    /// backbone_dim x visual_dim
    w_trunk: Array2<f64>,
    /// Frozen tail block (affine): backbone_dim x backbone_dim and 1 x backbone_dim.
    tail_w: Array2<f64>,
    tail_b: Array2<f64>,
    /// joint_dim x backbone_dim
    w_joint: Array2<f64>,
    /// Text head consuming the mean pseudo token: joint_dim x token_dim plus bias.
    head_w: Array2<f64>,
    head_b: Array2<f64>,
    /// Per-class (id, name, token anchor) entries, ascending id.
    class_entries: Vec<(ClassId, String, Vec<f64>)>,
    alignment: OracleAlignment,
    seed: u64,
}

/// Gain of the fitted oracle's random action on the anchor-complement
/// subspace; keeps instance noise visible in the joint embedding at
/// roughly a third of the class signal.
const NOISE_PASSTHROUGH: f64 = 0.5;

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gaussian(rng, sigma))
}

/// Solves A X = B for square A by Gaussian elimination with partial
/// pivoting. A is small (class count squared).
fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.nrows(), n);
    let m = b.ncols();
    let mut aug = Array2::zeros((n, n + m));
    aug.slice_mut(ndarray::s![.., ..n]).assign(a);
    aug.slice_mut(ndarray::s![.., n..]).assign(b);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                aug[(i, col)]
                    .abs()
                    .partial_cmp(&aug[(j, col)].abs())
                    .expect("finite pivots")
            })
            .expect("nonempty");
        if aug[(pivot, col)].abs() < 1e-12 {
            return Err(Error::invalid_state(
                "singular system while fitting the joint projection; anchors are degenerate",
            ));
        }
        if pivot != col {
            for j in 0..n + m {
                aug.swap((pivot, j), (col, j));
            }
        }
        let diag = aug[(col, col)];
        for j in col..n + m {
            aug[(col, j)] /= diag;
        }
        for i in 0..n {
            if i != col {
                let f = aug[(i, col)];
                if f != 0.0 {
                    for j in col..n + m {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
    }
    Ok(aug.slice(ndarray::s![.., n..]).to_owned())
}

fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row /= norm;
    }
    out
}

/// Modified Gram-Schmidt over rows, rescaled to `scale`. Fails on rank
/// deficiency (degenerate anchors).
fn orthonormalize_rows(x: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    assert!(n <= d, "cannot orthonormalize more rows than dimensions");
    let mut q = x.clone();
    for i in 0..n {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j)) / scale.powi(2);
            let prev = q.row(j).to_owned();
            let mut row = q.row_mut(i);
            row.scaled_add(-proj, &prev);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        if norm < 1e-9 {
            return Err(Error::invalid_state(
                "rank-deficient anchors; cannot build orthogonal token anchors",
            ));
        }
        let mut row = q.row_mut(i);
        row *= scale / norm;
    }
    Ok(q)
}

/// Random matrix with orthonormal columns (rows >= cols).
fn orthonormal_cols(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let g = gaussian_matrix(rng, cols, rows, 1.0);
    let q = orthonormalize_rows(&g, 1.0).expect("random Gaussian rows are full rank");
    q.t().to_owned()
}

impl EncoderStack {
    /// Builds the deterministic synthetic oracle from generator anchors.
    ///
    /// In fitted mode the joint projection is solved so that the joint
    /// embedding of each class's visual anchor equals its class text
    /// embedding; this requires the class count to stay at or below
    /// `backbone_dim`.
    pub fn synthetic(
        params: &SyntheticOracleParams,
        dims: &EncoderDims,
        seed: u64,
    ) -> Result<Self> {
        let num_classes = params.class_ids.len();
        if params.visual_anchors.ncols() != dims.visual_dim {
            return Err(Error::invalid_argument(format!(
                "visual anchor width {} does not match encoder visual_dim {}",
                params.visual_anchors.ncols(),
                dims.visual_dim
            )));
        }
        let text_dim = params.text_anchors.ncols();
        let mut r = rng::stream(seed, 0x30);
        let w_trunk = gaussian_matrix(
            &mut r,
            dims.backbone_dim,
            dims.visual_dim,
            1.0 / (dims.visual_dim as f64).sqrt(),
        );
        let tail_w = Array2::eye(dims.backbone_dim);
        let tail_b = Array2::zeros((1, dims.backbone_dim));

        let mut r = rng::stream(seed, 0x31);
        let w_tok = gaussian_matrix(
            &mut r,
            dims.token_dim,
            text_dim,
            1.0 / (text_dim as f64).sqrt(),
        );
        // An orthonormal-column head makes the token-to-joint map an
        // isometry, so the angular separation built below survives.
        let head_w = if dims.joint_dim >= dims.token_dim {
            orthonormal_cols(&mut r, dims.joint_dim, dims.token_dim)
        } else {
            gaussian_matrix(
                &mut r,
                dims.joint_dim,
                dims.token_dim,
                1.0 / (dims.token_dim as f64).sqrt(),
            )
        };
        // Nonzero bias so an all-zero token sequence still embeds somewhere.
        let head_b = gaussian_matrix(&mut r, 1, dims.joint_dim, 0.1);

        // Token anchor per class: text anchors projected to token space,
        // then orthogonalized across classes so distinct classes get
        // near-orthogonal text embeddings.
        if num_classes > dims.token_dim {
            return Err(Error::invalid_argument(format!(
                "synthetic oracle needs token_dim >= num_classes ({} < {})",
                dims.token_dim, num_classes
            )));
        }
        let projected = params.text_anchors.dot(&w_tok.t()); // C x token_dim
        let kappa_scale = (dims.token_dim as f64).sqrt();
        let kappa_mat = orthonormalize_rows(&projected, kappa_scale)?;
        let mut class_entries = Vec::with_capacity(num_classes);
        for (row, &class) in params.class_ids.iter().enumerate() {
            let kappa: Vec<f64> = kappa_mat.row(row).to_vec();
            class_entries.push((class, params.class_names[row].clone(), kappa));
        }

        // Target joint anchors: normalized text-head outputs.
        let mut targets = Array2::zeros((num_classes, dims.joint_dim));
        for (row, (_, _, kappa)) in class_entries.iter().enumerate() {
            for i in 0..dims.joint_dim {
                let mut v = head_b[(0, i)];
                for (j, &k) in kappa.iter().enumerate() {
                    v += head_w[(i, j)] * k;
                }
                targets[(row, i)] = v;
            }
        }
        let targets = normalize_rows(&targets);

        let w_joint = match params.alignment {
            OracleAlignment::Fitted => {
                if num_classes > dims.backbone_dim {
                    return Err(Error::invalid_argument(format!(
                        "fitted oracle needs backbone_dim >= num_classes ({} < {})",
                        dims.backbone_dim, num_classes
                    )));
                }
                // Anchor rows M (C x backbone); the fitted part maps every
                // class anchor exactly onto its text embedding.
                let anchor_rows = params.visual_anchors.dot(&w_trunk.t()); // C x backbone
                let gram = anchor_rows.dot(&anchor_rows.t()); // C x C
                let pinv = solve(&gram, &anchor_rows)?; // C x backbone
                let fitted = targets.t().dot(&pinv); // joint x backbone
                                                     // Complete with a random map on the anchors' orthogonal
                                                     // complement so instance-level variation survives into
                                                     // the joint space (real encoders are not rank-C).
                                                     // Anchors themselves are untouched: P kills their span.
                let span = anchor_rows.t().dot(&pinv); // backbone x backbone
                let complement = Array2::eye(dims.backbone_dim) - &span;
                let mut r = rng::stream(seed, 0x33);
                let random = gaussian_matrix(
                    &mut r,
                    dims.joint_dim,
                    dims.backbone_dim,
                    1.0 / (dims.backbone_dim as f64).sqrt(),
                );
                fitted + NOISE_PASSTHROUGH * random.dot(&complement)
            }
            OracleAlignment::Independent => {
                let mut r = rng::stream(seed, 0x32);
                gaussian_matrix(
                    &mut r,
                    dims.joint_dim,
                    dims.backbone_dim,
                    1.0 / (dims.backbone_dim as f64).sqrt(),
                )
            }
        };

        Ok(Self {
            dims: dims.clone(),
            w_trunk,
            tail_w,
            tail_b,
            w_joint,
            head_w,
            head_b,
            class_entries,
            alignment: params.alignment,
            seed,
        })
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    pub fn alignment(&self) -> OracleAlignment {
        self.alignment
    }

    /// Number of final blocks stage 2 may train (this stack has one).
    pub fn trainable_tail_depth(&self) -> usize {
        1
    }

    pub fn class_name(&self, class: ClassId) -> Option<&str> {
        self.class_entries
            .iter()
            .find(|(c, _, _)| *c == class)
            .map(|(_, n, _)| n.as_str())
    }

    /// Frozen trunk up to (excluding) the tail block: n x backbone_dim.
    pub fn trunk_features(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        if latents.ncols() != self.dims.visual_dim {
            return Err(Error::invalid_argument(format!(
                "latent width {} does not match encoder visual_dim {}",
                latents.ncols(),
                self.dims.visual_dim
            )));
        }
        Ok(latents.dot(&self.w_trunk.t()))
    }

    /// The frozen tail block applied to trunk features.
    pub fn apply_frozen_tail(&self, trunk: &Array2<f64>) -> Array2<f64> {
        trunk.dot(&self.tail_w.t()) + &self.tail_b
    }

    /// Joint projection of tail output, unit-norm rows.
    pub fn joint_from_tail(&self, tail_out: &Array2<f64>) -> Array2<f64> {
        normalize_rows(&tail_out.dot(&self.w_joint.t()))
    }

    /// Frozen full image encoding: (backbone features, joint embeddings).
    pub fn encode_images(&self, latents: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let trunk = self.trunk_features(latents)?;
        let backbone = self.apply_frozen_tail(&trunk);
        let joint = self.joint_from_tail(&backbone);
        Ok((backbone, joint))
    }

    /// Encodes class names through the prompt template into a text table.
    pub fn encode_class_names(&self, names: &[&str], template: &str) -> Result<ClassTextTable> {
        let mut seen = BTreeSet::new();
        for name in names {
            if !seen.insert(*name) {
                return Err(Error::invalid_argument(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        let mut embeddings = Array2::zeros((names.len(), self.dims.joint_dim));
        let mut class_order = Vec::with_capacity(names.len());
        for (row, name) in names.iter().enumerate() {
            // Prompt construction mirrors the real pipeline and validates
            // the name; the oracle then resolves the name directly.
            let _prompt = build_prompt_with(template, name)?;
            let entry = self
                .class_entries
                .iter()
                .find(|(_, n, _)| n == name)
                .ok_or_else(|| {
                    Error::invalid_argument(format!(
                        "class name {name:?} is unknown to this encoder backend"
                    ))
                })?;
            let tokens = Array3::from_shape_fn((1, 1, self.dims.token_dim), |(_, _, j)| entry.2[j]);
            let emb = self.encode_pseudo_tokens(&tokens)?;
            embeddings.row_mut(row).assign(&emb.row(0));
            class_order.push(entry.0);
        }
        Ok(ClassTextTable {
            embeddings,
            class_order,
        })
    }

    /// Embeds raw pseudo-token sequences: mean over the k tokens, affine
    /// text head, then unit normalization. Shape (n, k, token_dim) ->
    /// (n, joint_dim).
    pub fn encode_pseudo_tokens(&self, tokens: &Array3<f64>) -> Result<Array2<f64>> {
        let (_, k, token_dim) = tokens.dim();
        if k > self.dims.max_tokens {
            return Err(Error::invalid_argument(format!(
                "{k} pseudo tokens exceed the encoder's max_tokens {}",
                self.dims.max_tokens
            )));
        }
        if k == 0 {
            return Err(Error::invalid_argument("need at least one pseudo token"));
        }
        if token_dim != self.dims.token_dim {
            return Err(Error::invalid_argument(format!(
                "token width {token_dim} does not match encoder token_dim {}",
                self.dims.token_dim
            )));
        }
        let mean = tokens.mean_axis(Axis(1)).expect("k >= 1");
        let out = mean.dot(&self.head_w.t()) + &self.head_b;
        Ok(normalize_rows(&out))
    }

    /// Text-head parameters, for differentiable composition in stage 1.
    pub fn text_head(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.head_w, &self.head_b)
    }

    /// Frozen tail parameters; stage 2 clones these as its trainable start.
    pub fn tail_params(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.tail_w, &self.tail_b)
    }

    /// Joint projection weight; trainable instead of the tail under the
    /// projector-finetune switch.
    pub fn joint_weight(&self) -> &Array2<f64> {
        &self.w_joint
    }

    /// Flat copy of every frozen parameter, for integrity audits.
    pub fn frozen_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in [
            &self.w_trunk,
            &self.tail_w,
            &self.tail_b,
            &self.w_joint,
            &self.head_w,
            &self.head_b,
        ] {
            out.extend(a.iter().copied());
        }
        for (_, _, kappa) in &self.class_entries {
            out.extend(kappa.iter().copied());
        }
        out
    }

    // -- weight archive ------------------------------------------------

    /// Serializes the stack to a weight archive loadable as the
    /// `pretrained` backend.
    pub fn save_archive(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        w.write_all(b"MMGCDENC").map_err(io_err)?;
        w.write_u32::<LittleEndian>(1).map_err(io_err)?;
        for d in [
            self.dims.visual_dim,
            self.dims.backbone_dim,
            self.dims.joint_dim,
            self.dims.token_dim,
            self.dims.max_tokens,
        ] {
            w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
        }
        w.write_u8(match self.alignment {
            OracleAlignment::Fitted => 0,
            OracleAlignment::Independent => 1,
        })
        .map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.seed).map_err(io_err)?;
        for a in [
            &self.w_trunk,
            &self.tail_w,
            &self.tail_b,
            &self.w_joint,
            &self.head_w,
            &self.head_b,
        ] {
            write_matrix(&mut w, a).map_err(io_err)?;
        }
        w.write_u32::<LittleEndian>(self.class_entries.len() as u32)
            .map_err(io_err)?;
        for (class, name, kappa) in &self.class_entries {
            w.write_u32::<LittleEndian>(*class).map_err(io_err)?;
            let bytes = name.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)
                .map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
            w.write_u32::<LittleEndian>(kappa.len() as u32)
                .map_err(io_err)?;
            for &v in kappa {
                w.write_f64::<LittleEndian>(v).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads a weight archive written by [`EncoderStack::save_archive`].
    pub fn load_archive(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"MMGCDENC" {
            return Err(Error::format(path, "not an encoder weight archive"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != 1 {
            return Err(Error::format(
                path,
                format!("unsupported archive version {version}"),
            ));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        }
        let alignment = match r.read_u8().map_err(io_err)? {
            0 => OracleAlignment::Fitted,
            1 => OracleAlignment::Independent,
            other => {
                return Err(Error::format(
                    path,
                    format!("unknown alignment tag {other}"),
                ))
            }
        };
        let seed = r.read_u64::<LittleEndian>().map_err(io_err)?;
        let w_trunk = read_matrix(&mut r).map_err(io_err)?;
        let tail_w = read_matrix(&mut r).map_err(io_err)?;
        let tail_b = read_matrix(&mut r).map_err(io_err)?;
        let w_joint = read_matrix(&mut r).map_err(io_err)?;
        let head_w = read_matrix(&mut r).map_err(io_err)?;
        let head_b = read_matrix(&mut r).map_err(io_err)?;
        let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut class_entries = Vec::with_capacity(count);
        for _ in 0..count {
            let class = r.read_u32::<LittleEndian>().map_err(io_err)?;
            let len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io_err)?;
            let name = String::from_utf8(buf)
                .map_err(|e| Error::format(path, format!("class name utf8: {e}")))?;
            let klen = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut kappa = vec![0.0; klen];
            for v in &mut kappa {
                *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            class_entries.push((class, name, kappa));
        }
        Ok(Self {
            dims: EncoderDims {
                visual_dim: dims[0],
                backbone_dim: dims[1],
                joint_dim: dims[2],
                token_dim: dims[3],
                max_tokens: dims[4],
            },
            w_trunk,
            tail_w,
            tail_b,
            w_joint,
            head_w,
            head_b,
            class_entries,
            alignment,
            seed,
        })
    }
}

fn write_matrix<W: Write>(w: &mut W, a: &Array2<f64>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(a.nrows() as u32)?;
    w.write_u32::<LittleEndian>(a.ncols() as u32)?;
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> std::io::Result<Array2<f64>> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape from header"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticDatasetSpec};

    fn toy() -> (crate::data::Dataset, SyntheticOracleParams, EncoderStack) {
        let spec = SyntheticDatasetSpec {
            num_classes: 8,
            per_class: 20,
            visual_dim: 16,
            text_dim: 12,
            class_margin: 4.0,
            view_noise: 0.0,
            seed: 7,
        };
        let (dataset, params) = make_synthetic_dataset(&spec).unwrap();
        let dims = EncoderDims {
            visual_dim: 16,
            backbone_dim: 24,
            joint_dim: 16,
            token_dim: 12,
            max_tokens: 8,
        };
        let enc = EncoderStack::synthetic(&params, &dims, 21).unwrap();
        (dataset, params, enc)
    }

    fn latents(dataset: &crate::data::Dataset) -> Array2<f64> {
        let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
        dataset.latents(&ids).unwrap()
    }

    #[test]
    fn prompt_substitution() {
        assert_eq!(build_prompt("dog").unwrap(), "a photo of a dog");
        assert_eq!(
            build_prompt("Mourning Warbler").unwrap(),
            "a photo of a Mourning Warbler"
        );
        assert!(build_prompt("").is_err());
    }

    #[test]
    fn oracle_alignment_holds_at_zero_noise() {
        let (dataset, params, enc) = toy();
        let names: Vec<&str> = params.class_names.iter().map(|s| s.as_str()).collect();
        let table = enc.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        let (_, joint) = enc.encode_images(&latents(&dataset)).unwrap();
        for (row, inst) in dataset.instances().iter().enumerate() {
            let truth = inst.class_id.unwrap();
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (t, &class) in table.class_order.iter().enumerate() {
                let cos = joint.row(row).dot(&table.embeddings.row(t));
                if cos > best.0 {
                    best = (cos, class);
                }
            }
            assert_eq!(best.1, truth, "argmax over text table must equal the label");
            let own = table.row_of(truth).unwrap();
            let cos = joint.row(row).dot(&table.embeddings.row(own));
            assert!(cos >= 0.99, "class {truth}: cosine {cos} below 0.99");
        }
    }

    #[test]
    fn joint_embeddings_are_unit_norm() {
        let (dataset, _, enc) = toy();
        let (_, joint) = enc.encode_images(&latents(&dataset)).unwrap();
        for row in joint.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn frozen_mode_is_pure() {
        let (dataset, _, enc) = toy();
        let x = latents(&dataset);
        let (b1, j1) = enc.encode_images(&x).unwrap();
        let (b2, j2) = enc.encode_images(&x).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(j1, j2);
    }

    #[test]
    fn batching_matches_singletons() {
        let (dataset, _, enc) = toy();
        let x = latents(&dataset);
        let (batch_backbone, batch_joint) = enc.encode_images(&x).unwrap();
        for i in (0..dataset.len()).step_by(37) {
            let single = x.row(i).insert_axis(Axis(0)).to_owned();
            let (sb, sj) = enc.encode_images(&single).unwrap();
            for j in 0..sb.ncols() {
                assert!((sb[(0, j)] - batch_backbone[(i, j)]).abs() <= 1e-6);
            }
            for j in 0..sj.ncols() {
                assert!((sj[(0, j)] - batch_joint[(i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn class_table_orders_follow_input() {
        let (_, params, enc) = toy();
        let names: Vec<&str> = params.class_names.iter().map(|s| s.as_str()).collect();
        let fwd = enc.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        let mut rev = names.clone();
        rev.reverse();
        let bwd = enc.encode_class_names(&rev, PROMPT_TEMPLATE).unwrap();
        let n = names.len();
        for i in 0..n {
            assert_eq!(fwd.class_order[i], bwd.class_order[n - 1 - i]);
            for j in 0..fwd.embeddings.ncols() {
                assert_eq!(fwd.embeddings[(i, j)], bwd.embeddings[(n - 1 - i, j)]);
            }
        }
        assert!(enc
            .encode_class_names(&["class 000", "class 000"], PROMPT_TEMPLATE)
            .is_err());
    }

    #[test]
    fn class_table_cosines_stay_separated() {
        let (_, params, enc) = toy();
        let names: Vec<&str> = params.class_names[..4].iter().map(|s| s.as_str()).collect();
        let table = enc.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        assert_eq!(table.embeddings.nrows(), 4);
        for i in 0..4 {
            let norm = table.embeddings.row(i).dot(&table.embeddings.row(i)).sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
            for j in (i + 1)..4 {
                let cos = table.embeddings.row(i).dot(&table.embeddings.row(j));
                assert!(cos < 0.5, "classes {i},{j} too close: {cos}");
            }
        }
    }

    #[test]
    fn zero_tokens_embed_to_normalized_bias() {
        let (_, _, enc) = toy();
        let tokens = Array3::zeros((2, 3, 12));
        let out = enc.encode_pseudo_tokens(&tokens).unwrap();
        let (_, head_b) = enc.text_head();
        let norm = head_b.row(0).dot(&head_b.row(0)).sqrt();
        for i in 0..2 {
            for j in 0..16 {
                assert!((out[(i, j)] - head_b[(0, j)] / norm).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn token_anchor_preimage_recovers_class_embedding() {
        let (_, params, enc) = toy();
        let names: Vec<&str> = params.class_names.iter().map(|s| s.as_str()).collect();
        let table = enc.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        // All k tokens equal to a class's token anchor: the mean is the
        // anchor itself, so the embedding must match the class row.
        for (row, (_, _, kappa)) in enc.class_entries.iter().enumerate() {
            let tokens = Array3::from_shape_fn((1, 5, 12), |(_, _, j)| kappa[j]);
            let emb = enc.encode_pseudo_tokens(&tokens).unwrap();
            let cos = emb.row(0).dot(&table.embeddings.row(row));
            assert!(cos >= 0.99, "pre-image cosine {cos}");
        }
    }

    #[test]
    fn duplicated_token_rows_duplicate_outputs() {
        let (_, _, enc) = toy();
        let mut r = rng::stream(3, 3);
        let tokens = Array3::from_shape_fn((4, 3, 12), |_| r.gen_range(-1.0..1.0));
        let mut doubled = Array3::zeros((5, 3, 12));
        for i in 0..4 {
            doubled
                .slice_mut(ndarray::s![i, .., ..])
                .assign(&tokens.slice(ndarray::s![i, .., ..]));
        }
        doubled
            .slice_mut(ndarray::s![4, .., ..])
            .assign(&tokens.slice(ndarray::s![1, .., ..]));
        let out = enc.encode_pseudo_tokens(&doubled).unwrap();
        for j in 0..16 {
            assert_eq!(out[(4, j)], out[(1, j)]);
        }
    }

    #[test]
    fn token_capacity_is_enforced() {
        let (_, _, enc) = toy();
        let tokens = Array3::zeros((1, 9, 12));
        assert!(enc.encode_pseudo_tokens(&tokens).is_err());
    }

    #[test]
    fn archive_round_trip_preserves_behavior() {
        let (dataset, params, enc) = toy();
        let dir = std::env::temp_dir().join(format!("mmgcd-enc-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("weights.mmenc");
        enc.save_archive(&path).unwrap();
        let loaded = EncoderStack::load_archive(&path).unwrap();
        assert_eq!(loaded.frozen_snapshot(), enc.frozen_snapshot());
        let x = latents(&dataset);
        let (b1, j1) = enc.encode_images(&x).unwrap();
        let (b2, j2) = loaded.encode_images(&x).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(j1, j2);
        let names: Vec<&str> = params.class_names.iter().map(|s| s.as_str()).collect();
        let t1 = enc.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        let t2 = loaded.encode_class_names(&names, PROMPT_TEMPLATE).unwrap();
        assert_eq!(t1.embeddings, t2.embeddings);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn independent_alignment_keeps_pair_overlap() {
        // Paired dataset: joint embeddings of within-pair anchors stay close.
        let spec = SyntheticDatasetSpec {
            num_classes: 8,
            per_class: 2,
            visual_dim: 16,
            text_dim: 12,
            class_margin: 4.0,
            view_noise: 0.0,
            seed: 9,
        };
        let (_, params) = crate::data::make_paired_synthetic_dataset(&spec, 0.35, false).unwrap();
        let dims = EncoderDims {
            visual_dim: 16,
            backbone_dim: 24,
            joint_dim: 16,
            token_dim: 12,
            max_tokens: 8,
        };
        let enc = EncoderStack::synthetic(&params, &dims, 21).unwrap();
        let (_, joint) = enc.encode_images(&params.visual_anchors).unwrap();
        // twin classes stay collapsed in the joint space
        for p in 0..2 {
            let cos = joint.row(2 * p).dot(&joint.row(2 * p + 1));
            assert!(
                cos > 0.95,
                "twin pair {p} separated in joint space: cos {cos}"
            );
        }
        // far singleton classes stay distinct
        for a in 4..8 {
            for b in 0..8 {
                if a != b {
                    let cos = joint.row(a).dot(&joint.row(b));
                    assert!(cos < 0.9, "far class {a} collapsed onto {b}: cos {cos}");
                }
            }
        }
    }
}
