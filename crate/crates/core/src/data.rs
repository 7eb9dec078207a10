//! Datasets, category-discovery splits and two-view batch sampling.
//!
//! A dataset is a set of instances with integer class labels. A
//! [`GcdSplit`] partitions it into a labeled part covering only the
//! "old" classes and an unlabeled part covering everything, and batch
//! sampling pairs each drawn instance with two independently perturbed
//! views plus labeled-subset bookkeeping.
//!
//! Synthetic generators produce desk-scale stand-ins for image datasets:
//! per-class latent anchors with a guaranteed margin, instances as
//! anchors plus bounded noise, and oracle parameters handed to the
//! encoder module.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Stable instance identifier; ids sort lexicographically in files.
pub type InstanceId = String;

/// Integer category label.
pub type ClassId = u32;

/// Raw input reference: a synthetic latent vector or an external path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Latent(Vec<f64>),
    Path(String),
}

/// One data point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    /// Ground-truth label. `None` only in exported unlabeled manifests.
    pub class_id: Option<ClassId>,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// An in-memory dataset: instances sorted by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    instances: Vec<Instance>,
    by_id: BTreeMap<InstanceId, usize>,
    latent_dim: Option<usize>,
}

impl Dataset {
    /// Builds a dataset, sorting instances by id and validating ids are
    /// unique, classes are present, and latent dimensions agree.
    pub fn new(mut instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::invalid_argument("dataset must not be empty"));
        }
        instances.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_id = BTreeMap::new();
        let mut latent_dim = None;
        for (i, inst) in instances.iter().enumerate() {
            if by_id.insert(inst.id.clone(), i).is_some() {
                return Err(Error::invalid_argument(format!(
                    "duplicate instance id {:?}",
                    inst.id
                )));
            }
            if inst.class_id.is_none() {
                return Err(Error::invalid_argument(format!(
                    "instance {:?} has no class id; training datasets need ground truth",
                    inst.id
                )));
            }
            if let Payload::Latent(v) = &inst.payload {
                match latent_dim {
                    None => latent_dim = Some(v.len()),
                    Some(d) if d == v.len() => {}
                    Some(d) => {
                        return Err(Error::invalid_argument(format!(
                            "latent dimension mismatch: {} vs {}",
                            d,
                            v.len()
                        )))
                    }
                }
            }
        }
        Ok(Self {
            instances,
            by_id,
            latent_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.by_id.get(id).map(|&i| &self.instances[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Latent width, if any instance carries an inline latent.
    pub fn latent_dim(&self) -> Option<usize> {
        self.latent_dim
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.instances.iter().filter_map(|i| i.class_id).collect();
        set.into_iter().collect()
    }

    /// Stacks the raw latents of the given ids (row per id, id order kept).
    pub fn latents(&self, ids: &[InstanceId]) -> Result<Array2<f64>> {
        let dim = self
            .latent_dim
            .ok_or_else(|| Error::invalid_state("dataset has no inline latents"))?;
        let mut out = Array2::zeros((ids.len(), dim));
        for (r, id) in ids.iter().enumerate() {
            let inst = self
                .get(id)
                .ok_or_else(|| Error::invalid_argument(format!("unknown instance id {id:?}")))?;
            match &inst.payload {
                Payload::Latent(v) => {
                    for (c, &x) in v.iter().enumerate() {
                        out[(r, c)] = x;
                    }
                }
                Payload::Path(p) => {
                    return Err(Error::invalid_argument(format!(
                        "instance {id:?} has a path payload ({p}); no decoder backend is wired in"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// How the old-class subset is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OldClassPolicy {
    /// First N classes in ascending class-id order (multi-domain parity rule).
    FirstN,
    /// Seeded uniform sample without replacement.
    SeededRandom,
}

/// Partition of a dataset for category discovery: labeled instances cover
/// only the old classes; everything else is unlabeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcdSplit {
    pub seed: u64,
    /// Old (labeled-vocabulary) classes, ascending.
    pub old_classes: Vec<ClassId>,
    /// All classes: old first (ascending), then new (ascending). Position
    /// in this list is the classifier prototype index.
    pub all_classes: Vec<ClassId>,
    /// Labeled instance ids, sorted.
    pub labeled_ids: Vec<InstanceId>,
    /// Unlabeled instance ids, sorted.
    pub unlabeled_ids: Vec<InstanceId>,
}

impl GcdSplit {
    pub fn is_old_class(&self, class: ClassId) -> bool {
        self.old_classes.binary_search(&class).is_ok()
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        self.labeled_ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .is_ok()
    }

    /// Prototype index for a class: position in `all_classes`.
    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.all_classes.iter().position(|&c| c == class)
    }

    pub fn num_classes(&self) -> usize {
        self.all_classes.len()
    }

    pub fn old_class_set(&self) -> BTreeSet<ClassId> {
        self.old_classes.iter().copied().collect()
    }
}

/// Builds a category-discovery split.
///
/// Old classes are chosen by `policy`; for each old class with `n_c`
/// instances, exactly `floor(labeled_fraction * n_c)` seeded-random
/// instances become labeled. Every instance of a non-old class, and every
/// remaining old-class instance, is unlabeled. Deterministic in `seed`.
pub fn build_gcd_split(
    dataset: &Dataset,
    old_class_count: usize,
    labeled_fraction: f64,
    policy: OldClassPolicy,
    seed: u64,
) -> Result<GcdSplit> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("dataset must not be empty"));
    }
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::invalid_argument(format!(
            "labeled_fraction must lie in [0, 1], got {labeled_fraction}"
        )));
    }
    let classes = dataset.classes();
    if old_class_count > classes.len() {
        return Err(Error::invalid_argument(format!(
            "old_class_count {} exceeds the {} distinct classes",
            old_class_count,
            classes.len()
        )));
    }

    let mut old_classes: Vec<ClassId> = match policy {
        OldClassPolicy::FirstN => classes[..old_class_count].to_vec(),
        OldClassPolicy::SeededRandom => {
            let mut pool = classes.clone();
            let mut stream = rng::stream(seed, 0x01);
            rng::shuffle(&mut pool, &mut stream);
            pool.truncate(old_class_count);
            pool
        }
    };
    old_classes.sort_unstable();

    let old_set: BTreeSet<ClassId> = old_classes.iter().copied().collect();
    let mut all_classes = old_classes.clone();
    all_classes.extend(classes.iter().copied().filter(|c| !old_set.contains(c)));

    // Per-class labeled subsample: floor(fraction * n_c) instances.
    let mut per_class: BTreeMap<ClassId, Vec<InstanceId>> = BTreeMap::new();
    for inst in dataset.instances() {
        let class = inst.class_id.expect("validated in Dataset::new");
        per_class.entry(class).or_default().push(inst.id.clone());
    }
    let mut labeled: Vec<InstanceId> = Vec::new();
    for (&class, ids) in &per_class {
        if !old_set.contains(&class) {
            continue;
        }
        let take = ((labeled_fraction * ids.len() as f64).floor() as usize).min(ids.len());
        let mut pool = ids.clone();
        let mut stream = rng::stream(seed, 0x0100 + u64::from(class));
        rng::shuffle(&mut pool, &mut stream);
        pool.truncate(take);
        labeled.extend(pool);
    }
    labeled.sort();
    let labeled_set: BTreeSet<&InstanceId> = labeled.iter().collect();
    let unlabeled: Vec<InstanceId> = dataset
        .instances()
        .iter()
        .map(|i| i.id.clone())
        .filter(|id| !labeled_set.contains(id))
        .collect();

    Ok(GcdSplit {
        seed,
        old_classes,
        all_classes,
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
    })
}

/// A two-view mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<InstanceId>,
    /// First augmented view, one row per instance.
    pub view_a: Array2<f64>,
    /// Second augmented view.
    pub view_b: Array2<f64>,
    /// Ground-truth class for labeled instances, `None` elsewhere.
    pub labels: Vec<Option<ClassId>>,
    pub labeled_mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row indices of the labeled subset.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }
}

fn augment(base: &Array2<f64>, radius: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if radius == 0.0 {
        return base.clone();
    }
    let mut out = base.clone();
    for v in out.iter_mut() {
        *v += rng.gen_range(-radius..=radius);
    }
    out
}

fn assemble_batch(
    dataset: &Dataset,
    split: &GcdSplit,
    ids: Vec<InstanceId>,
    view_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let base = dataset.latents(&ids)?;
    let view_a = augment(&base, view_noise, rng);
    let view_b = augment(&base, view_noise, rng);
    let mut labels = Vec::with_capacity(ids.len());
    let mut labeled_mask = Vec::with_capacity(ids.len());
    for id in &ids {
        let labeled = split.is_labeled(id);
        labeled_mask.push(labeled);
        labels.push(if labeled {
            dataset.get(id).and_then(|i| i.class_id)
        } else {
            None
        });
    }
    Ok(Batch {
        ids,
        view_a,
        view_b,
        labels,
        labeled_mask,
    })
}

/// Draws `batch_size` instances uniformly from the whole dataset (with
/// replacement) and pairs each with two independently augmented views.
pub fn sample_batch(
    dataset: &Dataset,
    split: &GcdSplit,
    batch_size: usize,
    view_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::invalid_state("cannot sample from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch_size must be at least 1"));
    }
    let ids: Vec<InstanceId> = (0..batch_size)
        .map(|_| {
            dataset.instances()[rng.gen_range(0..dataset.len())]
                .id
                .clone()
        })
        .collect();
    assemble_batch(dataset, split, ids, view_noise, rng)
}

/// Shuffled full passes over the dataset for training loops.
///
/// Each epoch re-shuffles all instance ids with the stream and yields
/// consecutive chunks of `batch_size`; a trailing partial chunk is
/// dropped so every batch has the full size.
pub fn epoch_batches(
    dataset: &Dataset,
    split: &GcdSplit,
    batch_size: usize,
    view_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch_size must be at least 1"));
    }
    let mut ids: Vec<InstanceId> = dataset.instances().iter().map(|i| i.id.clone()).collect();
    rng::shuffle(&mut ids, rng);
    let usable = if ids.len() >= batch_size {
        ids.len() - ids.len() % batch_size
    } else {
        // tiny datasets still yield one (short) batch
        ids.len()
    };
    let mut batches = Vec::new();
    for chunk in ids[..usable].chunks(batch_size.min(usable.max(1))) {
        batches.push(assemble_batch(
            dataset,
            split,
            chunk.to_vec(),
            view_noise,
            rng,
        )?);
    }
    Ok(batches)
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Minimum pairwise distance between class anchors.
    pub class_margin: f64,
    /// Radius of the bounded uniform noise used both for instance spread
    /// around the anchor and for per-view augmentation.
    pub view_noise: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid_argument("num_classes must be at least 2"));
        }
        if self.class_margin <= 0.0 {
            return Err(Error::invalid_argument("class_margin must be positive"));
        }
        if self.view_noise < 0.0 {
            return Err(Error::invalid_argument("view_noise must be non-negative"));
        }
        if self.per_class == 0 {
            return Err(Error::invalid_argument("per_class must be at least 1"));
        }
        Ok(())
    }
}

/// Whether the oracle encoder's joint projection is fitted so visual
/// embeddings land on each class's text anchor, or left generic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleAlignment {
    /// Visual joint embedding of a class anchor coincides with its text
    /// anchor (cosine 1 at zero noise).
    Fitted,
    /// Generic random projection; visual and text geometries are
    /// independent. Used for the complementary-subspace study.
    Independent,
}

/// Ground-truth generator parameters consumed by the synthetic encoder.
#[derive(Debug, Clone)]
pub struct SyntheticOracleParams {
    /// Per-class visual latent anchors, row per class (class-id order).
    pub visual_anchors: Array2<f64>,
    /// Per-class text latent anchors, row per class.
    pub text_anchors: Array2<f64>,
    /// Class ids in row order.
    pub class_ids: Vec<ClassId>,
    /// Deterministic class names ("class 000", ...), row order.
    pub class_names: Vec<String>,
    pub seed: u64,
    pub alignment: OracleAlignment,
}

impl SyntheticOracleParams {
    pub fn class_name(&self, class: ClassId) -> Option<&str> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.class_names[i].as_str())
    }
}

const ANCHOR_RETRIES: usize = 2000;

/// Draws `count` Gaussian anchors in `dim` dimensions with pairwise
/// distance at least `margin`, retrying each anchor a bounded number of
/// times.
fn margin_anchors(
    count: usize,
    dim: usize,
    margin: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let mut anchors = Array2::zeros((count, dim));
    for c in 0..count {
        let mut placed = false;
        for _ in 0..ANCHOR_RETRIES {
            // Random direction scaled onto the sphere of radius `scale`:
            // with a common norm, the Euclidean margin also bounds the
            // pairwise cosine (the downstream pipeline is angular).
            let mut cand: Vec<f64> = (0..dim)
                .map(|_| {
                    // Box-Muller; two uniforms per normal draw
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let norm: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut cand {
                *v *= scale / norm;
            }
            let ok = (0..c).all(|prev| {
                let d2: f64 = (0..dim)
                    .map(|j| {
                        let d: f64 = anchors[(prev, j)] - cand[j];
                        d * d
                    })
                    .sum();
                d2.sqrt() >= margin
            });
            if ok {
                for (j, &v) in cand.iter().enumerate() {
                    anchors[(c, j)] = v;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::ResourceExhausted(format!(
                "could not place anchor {c} with margin {margin} in {dim} dimensions \
                 after {ANCHOR_RETRIES} tries; lower class_margin or raise the dimension"
            )));
        }
    }
    Ok(anchors)
}

/// Cone spread of visual anchors: directions are `base + CONE_SPREAD *
/// random`, normalized, so pairwise cosines concentrate well above zero.
const CONE_SPREAD: f64 = 0.7;

/// Draws anchors inside a cone at a radius chosen so the Euclidean
/// margin stays satisfiable despite the compressed angles.
fn cone_anchors(
    count: usize,
    dim: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    // worst-case in-cone cosine ~ 1 / (1 + CONE_SPREAD^2 / 3); radius such
    // that 2 r^2 (1 - cos) comfortably exceeds margin^2
    let radius = 2.0 * margin.max(1.0);
    let mut base: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm: f64 = base.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut base {
        *v /= norm;
    }
    let mut anchors = Array2::zeros((count, dim));
    for c in 0..count {
        let mut placed = false;
        for _ in 0..ANCHOR_RETRIES {
            let mut cand: Vec<f64> = (0..dim)
                .map(|j| base[j] + CONE_SPREAD * rng.gen_range(-1.0f64..1.0))
                .collect();
            let norm: f64 = cand.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut cand {
                *v *= radius / norm;
            }
            let ok = (0..c).all(|prev| {
                let d2: f64 = (0..dim)
                    .map(|j| {
                        let d: f64 = anchors[(prev, j)] - cand[j];
                        d * d
                    })
                    .sum();
                d2.sqrt() >= margin
            });
            if ok {
                for (j, &v) in cand.iter().enumerate() {
                    anchors[(c, j)] = v;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::ResourceExhausted(format!(
                "could not place anchor {c} with margin {margin} in {dim} dimensions \
                 after {ANCHOR_RETRIES} tries; lower class_margin or raise the dimension"
            )));
        }
    }
    Ok(anchors)
}

fn instances_around_anchors(
    spec: &SyntheticDatasetSpec,
    visual_anchors: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Instance> {
    let mut instances = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut serial = 0usize;
    for c in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let latent: Vec<f64> = (0..spec.visual_dim)
                .map(|j| {
                    let noise = if spec.view_noise == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-spec.view_noise..=spec.view_noise)
                    };
                    visual_anchors[(c, j)] + noise
                })
                .collect();
            instances.push(Instance {
                id: format!("i{serial:06}"),
                class_id: Some(c as ClassId),
                payload: Payload::Latent(latent),
                domain: None,
            });
            serial += 1;
        }
    }
    instances
}

fn synthetic_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class {c:03}")).collect()
}

/// Generates a margin-separated synthetic dataset plus oracle parameters.
///
/// Per class, a visual anchor and a text anchor are drawn with pairwise
/// distances of at least `class_margin`; instances are the visual anchor
/// plus bounded uniform noise of radius `view_noise`. Visual anchors sit
/// in a cone (compressed angles at a radius that still honors the
/// Euclidean margin), mimicking how real backbone features crowd one
/// region of the sphere; text anchors spread over the whole sphere.
pub fn make_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
) -> Result<(Dataset, SyntheticOracleParams)> {
    spec.validate()?;
    let scale = anchor_scale(spec.class_margin);
    let mut vis_rng = rng::stream(spec.seed, 0x10);
    let visual_anchors = cone_anchors(
        spec.num_classes,
        spec.visual_dim,
        spec.class_margin,
        &mut vis_rng,
    )?;
    let mut txt_rng = rng::stream(spec.seed, 0x11);
    let text_anchors = margin_anchors(
        spec.num_classes,
        spec.text_dim,
        spec.class_margin,
        scale,
        &mut txt_rng,
    )?;
    let mut inst_rng = rng::stream(spec.seed, 0x12);
    let dataset = Dataset::new(instances_around_anchors(
        spec,
        &visual_anchors,
        &mut inst_rng,
    ))?;
    let params = SyntheticOracleParams {
        visual_anchors,
        text_anchors,
        class_ids: (0..spec.num_classes as ClassId).collect(),
        class_names: synthetic_names(spec.num_classes),
        seed: spec.seed,
        alignment: OracleAlignment::Fitted,
    };
    Ok((dataset, params))
}

/// Generates the complementary-subspace variant: the first half of the
/// classes come in visual twin pairs whose anchors nearly coincide
/// (separated by `2 * pair_offset` along one shared direction), while
/// text anchors keep the full margin for every class. Visual-only
/// clustering merges each twin pair; the synthesized text features are
/// what can tell them apart. The second half of the classes sit on
/// well-separated anchors far from the twin region.
///
/// Splitting this dataset with the first-N policy and `num_classes / 2`
/// old classes makes the twins exactly the labeled classes, so the
/// twin-direction separation is learnable from labels; the far classes
/// stay clean discovery targets.
///
/// Requires `num_classes` divisible by 4. The oracle alignment is
/// [`OracleAlignment::Independent`]: the aligned-construction guarantee
/// deliberately cannot hold here.
///
/// With `pair_new_classes` the second half of the classes also form
/// visual twin pairs (maximal visual ambiguity everywhere); otherwise
/// they sit on well-separated far anchors (clean discovery targets).
pub fn make_paired_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    pair_offset: f64,
    pair_new_classes: bool,
) -> Result<(Dataset, SyntheticOracleParams)> {
    spec.validate()?;
    if !spec.num_classes.is_multiple_of(4) {
        return Err(Error::invalid_argument(
            "the complementary dataset needs num_classes divisible by 4",
        ));
    }
    if pair_offset <= 0.0 {
        return Err(Error::invalid_argument("pair_offset must be positive"));
    }
    let twins = if pair_new_classes {
        spec.num_classes
    } else {
        spec.num_classes / 2
    };
    let pairs = twins / 2;
    let singles = spec.num_classes - twins;
    // orthonormal frame: twin direction, pair-center axes, far axes
    let needed = 1 + pairs + singles;
    if needed > spec.visual_dim {
        return Err(Error::invalid_argument(format!(
            "visual_dim {} too small for the complementary layout ({needed} directions)",
            spec.visual_dim
        )));
    }
    let mut vis_rng = rng::stream(spec.seed, 0x20);
    let frame = orthonormal_frame(needed, spec.visual_dim, &mut vis_rng);
    let dir = frame.row(0);

    let margin = spec.class_margin;
    let mut visual_anchors = Array2::zeros((spec.num_classes, spec.visual_dim));
    // twin pairs around centers +-margin/2 along their own axes
    for p in 0..pairs {
        let axis = frame.row(1 + p);
        let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
        for j in 0..spec.visual_dim {
            let center = sign * 0.5 * margin * axis[j];
            visual_anchors[(2 * p, j)] = center + pair_offset * dir[j];
            visual_anchors[(2 * p + 1, j)] = center - pair_offset * dir[j];
        }
    }
    // far singleton classes at 2.5 margins, mutually orthogonal directions
    for s in 0..singles {
        let axis = frame.row(1 + pairs + s);
        for j in 0..spec.visual_dim {
            visual_anchors[(twins + s, j)] = 2.5 * margin * axis[j];
        }
    }

    let mut txt_rng = rng::stream(spec.seed, 0x21);
    let text_anchors = margin_anchors(
        spec.num_classes,
        spec.text_dim,
        spec.class_margin,
        anchor_scale(spec.class_margin),
        &mut txt_rng,
    )?;
    let mut inst_rng = rng::stream(spec.seed, 0x22);
    let dataset = Dataset::new(instances_around_anchors(
        spec,
        &visual_anchors,
        &mut inst_rng,
    ))?;
    let params = SyntheticOracleParams {
        visual_anchors,
        text_anchors,
        class_ids: (0..spec.num_classes as ClassId).collect(),
        class_names: synthetic_names(spec.num_classes),
        seed: spec.seed,
        alignment: OracleAlignment::Independent,
    };
    Ok((dataset, params))
}

/// Rows form a random orthonormal set (count <= dim).
fn orthonormal_frame(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut frame: Array2<f64> = Array2::zeros((count, dim));
    for i in 0..count {
        loop {
            for j in 0..dim {
                frame[(i, j)] = rng.gen_range(-1.0..1.0);
            }
            for prev in 0..i {
                let proj = frame.row(i).dot(&frame.row(prev));
                let prev_row = frame.row(prev).to_owned();
                let mut row = frame.row_mut(i);
                row.scaled_add(-proj, &prev_row);
            }
            let norm = frame.row(i).dot(&frame.row(i)).sqrt();
            if norm > 1e-6 {
                let mut row = frame.row_mut(i);
                row /= norm;
                break;
            }
        }
    }
    frame
}

fn anchor_scale(margin: f64) -> f64 {
    // Gaussian anchors at this scale make the margin easy to satisfy:
    // the expected distance between two N(0, s^2 I) points in d dims is
    // about s * sqrt(2d), kept comfortably above the requested margin.
    margin.max(1.0)
}

// ---------------------------------------------------------------------------
// Manifest and split files
// ---------------------------------------------------------------------------

/// Writes a line-delimited manifest. When `hide_unlabeled` is given,
/// instances in its unlabeled set are exported with `class_id: null`.
pub fn write_manifest(
    path: &Path,
    dataset: &Dataset,
    hide_unlabeled: Option<&GcdSplit>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in dataset.instances() {
        let mut record = inst.clone();
        if let Some(split) = hide_unlabeled {
            if !split.is_labeled(&inst.id) {
                record.class_id = None;
            }
        }
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::format(path, format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a line-delimited manifest into a dataset.
pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        instances.push(inst);
    }
    Dataset::new(instances)
}

/// Writes the split file: JSON with sorted id arrays, stable field order.
pub fn write_split(path: &Path, split: &GcdSplit) -> Result<()> {
    let text = serde_json::to_string_pretty(split)
        .map_err(|e| Error::format(path, format!("serialize: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a split file and re-validates its ordering invariants.
pub fn read_split(path: &Path) -> Result<GcdSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: GcdSplit =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for ids in [&split.labeled_ids, &split.unlabeled_ids] {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(path, "split ids must be sorted and unique"));
        }
    }
    Ok(split)
}
