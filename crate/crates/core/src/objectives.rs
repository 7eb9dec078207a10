//! Stage-2 loss primitives.
//!
//! Every operation here is a pure function from tape vars to a 1x1 loss
//! var, so the same code serves value checks, gradient checks and
//! training. Conventions shared by all ops:
//!
//! * similarity logits are plain dot products of the (unit-norm) inputs,
//!   scaled by `1 / temperature` where the loss defines one;
//! * batch reduction is the arithmetic mean over the anchor set named by
//!   each loss;
//! * `h` / `p` denote first-view quantities, `h'` / `p'` second-view.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Blend weights of the stage-2 objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Supervised/unsupervised balance (lambda), in [0, 1].
    pub lambda_balance: f64,
    /// Weight of the cross-modal instance-consistency term (lambda_c).
    pub lambda_cico: f64,
    /// Weight of the mean-entropy regularizer (epsilon).
    pub epsilon: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_balance) {
            return Err(Error::invalid_argument(format!(
                "lambda_balance must lie in [0, 1], got {}",
                self.lambda_balance
            )));
        }
        if self.lambda_cico < 0.0 || self.epsilon < 0.0 {
            return Err(Error::invalid_argument(
                "lambda_cico and epsilon must be non-negative",
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_balance: 0.35,
            lambda_cico: 1.0,
            epsilon: 1.0,
        }
    }
}

/// Softmax temperatures: contrastive, student, and a sharper teacher
/// that warms from `tau_t_start` to `tau_t_end` over the first
/// `tau_t_warmup_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSet {
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
}

impl TemperatureSet {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
            ("tau_t_start", self.tau_t_start),
            ("tau_t_end", self.tau_t_end),
        ] {
            if v <= 0.0 {
                return Err(Error::invalid_argument(format!("{name} must be positive")));
            }
        }
        if self.tau_t_start > self.tau_s || self.tau_t_end > self.tau_s {
            return Err(Error::invalid_argument(
                "teacher temperature must not exceed the student temperature",
            ));
        }
        Ok(())
    }

    /// Teacher temperature at an epoch: linear ramp, then flat.
    pub fn tau_t_at(&self, epoch: usize) -> f64 {
        if self.tau_t_warmup_epochs == 0 || epoch >= self.tau_t_warmup_epochs {
            return self.tau_t_end;
        }
        let t = epoch as f64 / self.tau_t_warmup_epochs as f64;
        self.tau_t_start + (self.tau_t_end - self.tau_t_start) * t
    }
}

impl Default for TemperatureSet {
    fn default() -> Self {
        Self {
            tau_c: 0.07,
            tau_s: 0.1,
            tau_t_start: 0.07,
            tau_t_end: 0.04,
            tau_t_warmup_epochs: 30,
        }
    }
}

/// Per-class prototypes of the labeled subset of one batch, unit-norm
/// rows, visual and text rows aligned by `anchor_classes`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
    /// Class indices present in the labeled subset, ascending.
    pub anchor_classes: Vec<usize>,
}

/// Supervised contrastive loss over the labeled subset.
///
/// For each anchor i, positives are the other labeled instances with the
/// same label; the denominator runs over every n != i. Anchors without
/// positives contribute nothing; if no anchor has a positive the loss is
/// 0 (with a warning). The mean is taken over all `n_l` anchors.
pub fn supervised_contrastive(
    tape: &Tape,
    h: &Var,
    h_prime: &Var,
    labels: &[usize],
    tau_c: f64,
) -> Result<Var> {
    let n = h.shape().0;
    if n < 2 {
        return Err(Error::invalid_argument(
            "supervised contrastive needs at least 2 labeled instances",
        ));
    }
    if labels.len() != n || h_prime.shape().0 != n {
        return Err(Error::invalid_argument(
            "labels and both views must cover the same instances",
        ));
    }
    let sims = h.matmul(&h_prime.t()).scale(1.0 / tau_c);

    let mut pos_weight = Array2::zeros((n, n));
    let mut active = Array2::zeros((n, 1));
    let mut any_active = false;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&q| q != i && labels[q] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        any_active = true;
        active[(i, 0)] = 1.0;
        for q in positives.iter() {
            pos_weight[(i, *q)] = 1.0 / positives.len() as f64;
        }
    }
    if !any_active {
        log::warn!("supervised contrastive batch has no positive pairs; returning 0");
        return Ok(tape.scalar(0.0));
    }

    let mut diag_mask = Array2::zeros((n, n));
    for i in 0..n {
        diag_mask[(i, i)] = f64::NEG_INFINITY;
    }
    let lse_excl = sims.add(&tape.constant(diag_mask)).logsumexp_rows();
    let mean_pos = sims.mul(&tape.constant(pos_weight)).row_sums();
    let per_anchor = lse_excl.sub(&mean_pos).mul(&tape.constant(active));
    Ok(per_anchor.sum_all().scale(1.0 / n as f64))
}

/// Self-supervised contrastive loss with positive pair `(h_i, h'_i)`.
///
/// By default the denominator includes the positive term (standard
/// InfoNCE); `exclude_positive` reproduces the variant whose denominator
/// runs over n != i only.
pub fn self_contrastive(
    tape: &Tape,
    h: &Var,
    h_prime: &Var,
    tau_c: f64,
    exclude_positive: bool,
) -> Result<Var> {
    let n = h.shape().0;
    if n == 0 {
        return Err(Error::invalid_argument("empty batch"));
    }
    if exclude_positive && n < 2 {
        return Err(Error::invalid_argument(
            "exclude_positive denominator is empty for a singleton batch",
        ));
    }
    let sims = h.matmul(&h_prime.t()).scale(1.0 / tau_c);
    let idx: Vec<usize> = (0..n).collect();
    let positives = sims.select_per_row(&idx);
    let denom = if exclude_positive {
        let mut diag_mask = Array2::zeros((n, n));
        for i in 0..n {
            diag_mask[(i, i)] = f64::NEG_INFINITY;
        }
        sims.add(&tape.constant(diag_mask)).logsumexp_rows()
    } else {
        sims.logsumexp_rows()
    };
    Ok(denom.sub(&positives).mean_all())
}

/// Cross-entropy of temperature-scaled logits against hard labels.
pub fn supervised_ce(_tape: &Tape, logits: &Var, labels: &[usize], tau_s: f64) -> Result<Var> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::invalid_argument("one label per logit row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let log_probs = logits.scale(1.0 / tau_s).log_softmax_rows();
    Ok(log_probs.select_per_row(labels).mean_all().neg())
}

/// Self-distillation: cross-entropy of the student distribution against
/// the sharper, gradient-stopped teacher distribution of the other view.
pub fn self_distill(_tape: &Tape, p: &Var, p_prime: &Var, tau_t: f64, tau_s: f64) -> Var {
    let n = p.shape().0 as f64;
    let teacher = p_prime.scale(1.0 / tau_t).softmax_rows().detach();
    let student_log = p.scale(1.0 / tau_s).log_softmax_rows();
    teacher.mul(&student_log).sum_all().scale(-1.0 / n)
}

/// Entropy of the mean prediction across the batch and both modalities.
///
/// `p_mm = mean over rows of softmax(p_v / tau_s) and softmax(p_t / tau_s)`,
/// returned as `H(p_mm)`. Maximizing this keeps prototypes from
/// collapsing onto a few clusters.
pub fn mean_entropy(_tape: &Tape, p_v: &Var, p_t: &Var, tau_s: f64) -> Var {
    let sv = p_v.scale(1.0 / tau_s).softmax_rows();
    let st = p_t.scale(1.0 / tau_s).softmax_rows();
    let mean = Var::vstack(&[&sv, &st]).col_means();
    // p * ln(max(p, tiny)) is 0 at p = 0, matching the entropy convention.
    mean.mul(&mean.clamp_min(1e-300).ln()).sum_all().neg()
}

/// Differentiable per-class anchors over the labeled subset: the mean of
/// each class's rows, unit-normalized. Returns (visual, text) anchor vars
/// plus the ascending class indices they cover.
pub fn compute_anchors_var(
    _tape: &Tape,
    z_v: &Var,
    z_t: &Var,
    labels: &[usize],
) -> Result<(Var, Var, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::invalid_state(
            "no labeled instances in batch; anchors are undefined",
        ));
    }
    if z_v.shape().0 != labels.len() || z_t.shape().0 != labels.len() {
        return Err(Error::invalid_argument(
            "anchor inputs and labels must cover the same instances",
        ));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut visual_parts = Vec::with_capacity(classes.len());
    let mut text_parts = Vec::with_capacity(classes.len());
    for &class in &classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        visual_parts.push(z_v.gather_rows(&rows).col_means().normalize_rows());
        text_parts.push(z_t.gather_rows(&rows).col_means().normalize_rows());
    }
    let visual_refs: Vec<&Var> = visual_parts.iter().collect();
    let text_refs: Vec<&Var> = text_parts.iter().collect();
    Ok((Var::vstack(&visual_refs), Var::vstack(&text_refs), classes))
}

/// Plain-array anchors (evaluated through the differentiable path).
pub fn compute_anchors(
    z_v: &Array2<f64>,
    z_t: &Array2<f64>,
    labels: &[usize],
) -> Result<AnchorSet> {
    let tape = Tape::new();
    let zv = tape.constant(z_v.clone());
    let zt = tape.constant(z_t.clone());
    let (visual, text, anchor_classes) = compute_anchors_var(&tape, &zv, &zt, labels)?;
    Ok(AnchorSet {
        visual: visual.value(),
        text: text.value(),
        anchor_classes,
    })
}

/// Cross-modal instance-consistency loss: the symmetric KL divergence
/// between each instance's softmax similarity distribution to the visual
/// anchors and to the text anchors, averaged with weight 1/(2n).
///
/// Features and anchors are unit-normalized before the dot products; no
/// temperature is applied.
pub fn cico_loss(
    _tape: &Tape,
    z_v: &Var,
    z_t: &Var,
    anchors_v: &Var,
    anchors_t: &Var,
) -> Result<Var> {
    let n = z_v.shape().0;
    if n == 0 || anchors_v.shape().0 == 0 {
        return Err(Error::invalid_argument("cico needs instances and anchors"));
    }
    if anchors_v.shape().0 != anchors_t.shape().0 {
        return Err(Error::invalid_argument(
            "visual and text anchor sets must align",
        ));
    }
    let logits_v = z_v.normalize_rows().matmul(&anchors_v.normalize_rows().t());
    let logits_t = z_t.normalize_rows().matmul(&anchors_t.normalize_rows().t());
    let s_v = logits_v.softmax_rows();
    let s_t = logits_t.softmax_rows();
    let lsm_v = logits_v.log_softmax_rows();
    let lsm_t = logits_t.log_softmax_rows();
    // KL(t||v) + KL(v||t) per row
    let kl_tv = s_t.mul(&lsm_t.sub(&lsm_v)).row_sums();
    let kl_vt = s_v.mul(&lsm_v.sub(&lsm_t)).row_sums();
    Ok(kl_tv.add(&kl_vt).sum_all().scale(0.5 / n as f64))
}

/// Value-only cico evaluation for probe measurements.
pub fn cico_value(z_v: &Array2<f64>, z_t: &Array2<f64>, anchors: &AnchorSet) -> Result<f64> {
    let tape = Tape::new();
    let loss = cico_loss(
        &tape,
        &tape.constant(z_v.clone()),
        &tape.constant(z_t.clone()),
        &tape.constant(anchors.visual.clone()),
        &tape.constant(anchors.text.clone()),
    )?;
    Ok(loss.scalar_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0f64));
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row /= norm;
        }
        m
    }

    // -- supervised contrastive -------------------------------------------

    /// Independent double-loop oracle.
    fn scon_oracle(h: &Array2<f64>, hp: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = h.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n)
                .filter(|&q| q != i && labels[q] == labels[i])
                .collect();
            if pos.is_empty() {
                continue;
            }
            let mut anchor = 0.0;
            for &q in &pos {
                let num = (h.row(i).dot(&hp.row(q)) / tau).exp();
                let den: f64 = (0..n)
                    .filter(|&m| m != i)
                    .map(|m| (h.row(i).dot(&hp.row(m)) / tau).exp())
                    .sum();
                anchor += -(num / den).ln();
            }
            total += anchor / pos.len() as f64;
        }
        total / n as f64
    }

    #[test]
    fn supervised_contrastive_two_instance_hand_case() {
        // Same label, h = h', orthogonal embeddings: evaluated exactly by
        // the 2x2 oracle.
        let tape = Tape::new();
        let h = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = supervised_contrastive(&tape, &h, &h, &[0, 0], 1.0).unwrap();
        let expect = scon_oracle(&h.value(), &h.value(), &[0, 0], 1.0);
        assert!((loss.scalar_value() - expect).abs() <= 1e-9);
    }

    #[test]
    fn supervised_contrastive_no_positives_is_zero() {
        let tape = Tape::new();
        let h = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = supervised_contrastive(&tape, &h, &h, &[0, 1], 0.5).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn supervised_contrastive_matches_brute_force() {
        let mut r = rng::stream(42, 1);
        for _ in 0..5 {
            let h = unit_rows(&mut r, 6, 4);
            let hp = unit_rows(&mut r, 6, 4);
            let labels = [0usize, 1, 0, 1, 0, 1];
            let tape = Tape::new();
            let hv = tape.constant(h.clone());
            let hpv = tape.constant(hp.clone());
            let loss = supervised_contrastive(&tape, &hv, &hpv, &labels, 0.07).unwrap();
            let expect = scon_oracle(&h, &hp, &labels, 0.07);
            assert!((loss.scalar_value() - expect).abs() <= 1e-9);
        }
    }

    // -- self contrastive --------------------------------------------------

    fn ucon_oracle(h: &Array2<f64>, hp: &Array2<f64>, tau: f64, exclude: bool) -> f64 {
        let n = h.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let num = (h.row(i).dot(&hp.row(i)) / tau).exp();
            let den: f64 = (0..n)
                .filter(|&m| !exclude || m != i)
                .map(|m| (h.row(i).dot(&hp.row(m)) / tau).exp())
                .sum();
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn self_contrastive_singleton_is_zero() {
        let tape = Tape::new();
        let h = tape.constant(array![[0.6, 0.8]]);
        let loss = self_contrastive(&tape, &h, &h, 1.0, false).unwrap();
        assert!(loss.scalar_value().abs() <= 1e-12);
        assert!(self_contrastive(&tape, &h, &h, 1.0, true).is_err());
    }

    #[test]
    fn self_contrastive_orthogonal_pair_closed_form() {
        // n=2 orthogonal, h = h', tau 1: each term -log(e / (e + 1)) = 0.3133.
        let tape = Tape::new();
        let h = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = self_contrastive(&tape, &h, &h, 1.0, false).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss.scalar_value() - expect).abs() <= 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn self_contrastive_matches_brute_force() {
        let mut r = rng::stream(43, 1);
        for exclude in [false, true] {
            let h = unit_rows(&mut r, 8, 5);
            let hp = unit_rows(&mut r, 8, 5);
            let tape = Tape::new();
            let hv = tape.constant(h.clone());
            let hpv = tape.constant(hp.clone());
            let loss = self_contrastive(&tape, &hv, &hpv, 0.07, exclude).unwrap();
            let expect = ucon_oracle(&h, &hp, 0.07, exclude);
            assert!((loss.scalar_value() - expect).abs() <= 1e-9);
        }
    }

    // -- supervised cross-entropy ------------------------------------------

    #[test]
    fn supervised_ce_closed_forms() {
        let tape = Tape::new();
        let logits = tape.constant(array![[1.0, 0.0]]);
        let loss = supervised_ce(&tape, &logits, &[0], 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss.scalar_value() - expect).abs() <= 1e-12);

        let uniform = tape.constant(array![[2.0, 2.0, 2.0, 2.0]]);
        let loss = supervised_ce(&tape, &uniform, &[2], 1.0).unwrap();
        assert!((loss.scalar_value() - 4f64.ln()).abs() <= 1e-12);

        let margin = tape.constant(array![[100.0, 0.0]]);
        let loss = supervised_ce(&tape, &margin, &[0], 1.0).unwrap();
        assert!(loss.scalar_value() < 1e-6);

        assert!(supervised_ce(&tape, &logits, &[5], 1.0).is_err());
    }

    // -- self distillation ---------------------------------------------------

    #[test]
    fn self_distill_hand_value() {
        // p = p' = [1, 0], teacher tau 0.5, student tau 1:
        // H([0.8808, 0.1192], [0.7311, 0.2689]) = 0.4325
        let tape = Tape::new();
        let p = tape.constant(array![[1.0, 0.0]]);
        let loss = self_distill(&tape, &p, &p, 0.5, 1.0);
        let t0 = 2f64.exp() / (2f64.exp() + 1.0);
        let s0 = 1f64.exp() / (1f64.exp() + 1.0);
        let expect = -(t0 * s0.ln() + (1.0 - t0) * (1.0 - s0).ln());
        assert!((loss.scalar_value() - expect).abs() <= 1e-12);
        assert!((expect - 0.4325).abs() < 1e-4);
    }

    #[test]
    fn self_distill_equal_temperature_is_entropy() {
        let tape = Tape::new();
        let p = tape.constant(array![[0.4, -1.0, 0.2], [2.0, 0.0, 1.0]]);
        let loss = self_distill(&tape, &p, &p, 0.1, 0.1);
        let s = p.scale(10.0).softmax_rows().value();
        let mut expect = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                expect -= s[(i, j)] * s[(i, j)].ln();
            }
        }
        expect /= 2.0;
        assert!((loss.scalar_value() - expect).abs() <= 1e-12);
    }

    #[test]
    fn self_distill_teacher_receives_no_gradient() {
        let tape = Tape::new();
        let p = tape.param(array![[0.5, -0.2], [1.0, 0.3]]);
        let p_prime = tape.param(array![[0.1, 0.9], [-0.4, 0.2]]);
        let loss = self_distill(&tape, &p, &p_prime, 0.05, 0.1);
        let grads = tape.backward(&loss);
        assert!(grads.wrt(&p).is_some());
        assert!(
            grads.wrt(&p_prime).is_none(),
            "teacher logits must sit behind a stop-gradient"
        );
    }

    // -- mean entropy --------------------------------------------------------

    #[test]
    fn mean_entropy_extremes() {
        let tape = Tape::new();
        // both branches uniform over 4 classes -> ln 4
        let uniform = tape.constant(Array2::zeros((3, 4)));
        let h = mean_entropy(&tape, &uniform, &uniform, 0.1);
        assert!((h.scalar_value() - 4f64.ln()).abs() <= 1e-12);

        // all predictions extremely confident on class 0 -> 0
        let mut hot = Array2::zeros((3, 4));
        for i in 0..3 {
            hot[(i, 0)] = 1e6;
        }
        let hot = tape.constant(hot);
        let h = mean_entropy(&tape, &hot, &hot, 1.0);
        assert!(h.scalar_value().abs() <= 1e-9, "got {}", h.scalar_value());

        // two-point uniform mean -> ln 2
        let mut a = Array2::zeros((1, 4));
        a[(0, 0)] = 1e6;
        let mut b = Array2::zeros((1, 4));
        b[(0, 1)] = 1e6;
        let h = mean_entropy(&tape, &tape.constant(a), &tape.constant(b), 1.0);
        assert!((h.scalar_value() - 2f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn mean_entropy_bounded_by_ln_k() {
        let mut r = rng::stream(44, 1);
        for _ in 0..20 {
            let tape = Tape::new();
            let pv = tape.constant(Array2::from_shape_fn((5, 6), |_| r.gen_range(-3.0..3.0)));
            let pt = tape.constant(Array2::from_shape_fn((5, 6), |_| r.gen_range(-3.0..3.0)));
            let h = mean_entropy(&tape, &pv, &pt, 0.1).scalar_value();
            assert!((0.0..=6f64.ln() + 1e-12).contains(&h));
        }
    }

    // -- anchors ---------------------------------------------------------------

    #[test]
    fn anchors_single_instance_per_class_are_the_instances() {
        let z = array![[3.0, 0.0], [0.0, 2.0]];
        let anchors = compute_anchors(&z, &z, &[4, 7]).unwrap();
        assert_eq!(anchors.anchor_classes, vec![4, 7]);
        assert_eq!(anchors.visual, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn anchors_mean_is_idempotent_for_duplicates() {
        let z = array![[1.0, 1.0], [1.0, 1.0], [0.0, 1.0]];
        let anchors = compute_anchors(&z, &z, &[2, 2, 9]).unwrap();
        let s = 0.5f64.sqrt();
        assert!((anchors.visual[(0, 0)] - s).abs() <= 1e-12);
        assert!((anchors.visual[(0, 1)] - s).abs() <= 1e-12);
    }

    #[test]
    fn anchors_match_per_class_brute_force() {
        let mut r = rng::stream(45, 1);
        let z_v = unit_rows(&mut r, 9, 5);
        let z_t = unit_rows(&mut r, 9, 5);
        let labels = [2usize, 0, 1, 0, 2, 1, 0, 2, 1];
        let anchors = compute_anchors(&z_v, &z_t, &labels).unwrap();
        assert_eq!(anchors.anchor_classes, vec![0, 1, 2]);
        for (row, &class) in anchors.anchor_classes.iter().enumerate() {
            let members: Vec<usize> = (0..9).filter(|&i| labels[i] == class).collect();
            let mut mean = [0.0; 5];
            for &i in &members {
                for (j, slot) in mean.iter_mut().enumerate() {
                    *slot += z_v[(i, j)] / members.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &m) in mean.iter().enumerate() {
                assert!((anchors.visual[(row, j)] - m / norm).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn anchors_reject_empty_labeled_subset() {
        let z = Array2::zeros((0, 3));
        assert!(compute_anchors(&z, &z, &[]).is_err());
    }

    // -- cico --------------------------------------------------------------------

    #[test]
    fn cico_zero_when_distributions_agree() {
        let tape = Tape::new();
        let z = tape.constant(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let anchors = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = cico_loss(&tape, &z, &z, &anchors, &anchors).unwrap();
        assert!(loss.scalar_value().abs() <= 1e-12);
    }

    #[test]
    fn cico_single_instance_hand_value() {
        // s_v = [0.5, 0.5]; s_t = [0.25, 0.75]:
        // 0.5 * (KL(t||v) + KL(v||t)) = 0.1373
        let s = 0.5f64.sqrt();
        let ln3 = 3f64.ln();
        // unit vector whose e2 minus e1 coordinate is ln 3
        let a = (-ln3 + (2.0 - ln3 * ln3).sqrt()) / 2.0;
        let b = a + ln3;
        let tape = Tape::new();
        let z_v = tape.constant(array![[s, s]]);
        let z_t = tape.constant(array![[a, b]]);
        let anchors = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = cico_loss(&tape, &z_v, &z_t, &anchors, &anchors).unwrap();

        let kl = |p: [f64; 2], q: [f64; 2]| -> f64 {
            p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln()
        };
        let expect = 0.5 * (kl([0.25, 0.75], [0.5, 0.5]) + kl([0.5, 0.5], [0.25, 0.75]));
        assert!((loss.scalar_value() - expect).abs() <= 1e-9);
        assert!((expect - 0.1373).abs() < 1e-4, "frozen reference value");
    }

    #[test]
    fn cico_nonnegative_and_symmetric() {
        let mut r = rng::stream(46, 1);
        for _ in 0..100 {
            let z_v = unit_rows(&mut r, 4, 3);
            let z_t = unit_rows(&mut r, 4, 3);
            let av = unit_rows(&mut r, 3, 3);
            let at = unit_rows(&mut r, 3, 3);
            let tape = Tape::new();
            let zv = tape.constant(z_v.clone());
            let zt = tape.constant(z_t.clone());
            let avv = tape.constant(av.clone());
            let atv = tape.constant(at.clone());
            let loss = cico_loss(&tape, &zv, &zt, &avv, &atv)
                .unwrap()
                .scalar_value();
            assert!(loss >= 0.0);
            // invariance under swapping the modalities
            let swapped = cico_loss(&tape, &zt, &zv, &atv, &avv)
                .unwrap()
                .scalar_value();
            assert!((loss - swapped).abs() <= 1e-12);
        }
    }

    #[test]
    fn cico_invariant_under_anchor_permutation() {
        let mut r = rng::stream(47, 1);
        let z_v = unit_rows(&mut r, 5, 4);
        let z_t = unit_rows(&mut r, 5, 4);
        let av = unit_rows(&mut r, 4, 4);
        let at = unit_rows(&mut r, 4, 4);
        let perm = [2usize, 0, 3, 1];
        let mut av_p = Array2::zeros((4, 4));
        let mut at_p = Array2::zeros((4, 4));
        for (to, &from) in perm.iter().enumerate() {
            av_p.row_mut(to).assign(&av.row(from));
            at_p.row_mut(to).assign(&at.row(from));
        }
        let tape = Tape::new();
        let loss = cico_loss(
            &tape,
            &tape.constant(z_v.clone()),
            &tape.constant(z_t.clone()),
            &tape.constant(av),
            &tape.constant(at),
        )
        .unwrap()
        .scalar_value();
        let permuted = cico_loss(
            &tape,
            &tape.constant(z_v),
            &tape.constant(z_t),
            &tape.constant(av_p),
            &tape.constant(at_p),
        )
        .unwrap()
        .scalar_value();
        assert!((loss - permuted).abs() <= 1e-12);
    }

    #[test]
    fn cico_degenerate_single_anchor_is_zero() {
        let tape = Tape::new();
        let z = tape.constant(array![[0.0, 1.0], [1.0, 0.0]]);
        let anchors = tape.constant(array![[0.6, 0.8]]);
        let loss = cico_loss(&tape, &z, &z, &anchors, &anchors).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    // -- gradient spot checks (the acceptance suite runs the full battery) ----

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut r = rng::stream(48, 1);
        for trial in 0..3 {
            let n = 4 + trial;
            let d = 4;
            let k = 3;
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let ce_labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let h0 = unit_rows(&mut r, n, d);
            let hp0 = unit_rows(&mut r, n, d);
            let logits0 = Array2::from_shape_fn((n, k), |_| r.gen_range(-1.0..1.0));
            let logits1 = Array2::from_shape_fn((n, k), |_| r.gen_range(-1.0..1.0));
            let anchors0 = unit_rows(&mut r, k, d);
            let anchors1 = unit_rows(&mut r, k, d);

            let labels_scon = labels.clone();
            let labels_ce = ce_labels.clone();
            type LossCase = Box<dyn Fn(&Tape, &[Var]) -> Var>;
            let cases: Vec<(&str, LossCase)> = vec![
                (
                    "supervised_contrastive",
                    Box::new(move |tape, vars| {
                        supervised_contrastive(tape, &vars[0], &vars[1], &labels_scon, 0.3).unwrap()
                    }),
                ),
                (
                    "self_contrastive",
                    Box::new(|tape, vars| {
                        self_contrastive(tape, &vars[0], &vars[1], 0.3, false).unwrap()
                    }),
                ),
                (
                    "supervised_ce",
                    Box::new(move |tape, vars| {
                        supervised_ce(tape, &vars[2], &labels_ce, 0.2).unwrap()
                    }),
                ),
                (
                    "mean_entropy",
                    Box::new(|tape, vars| mean_entropy(tape, &vars[2], &vars[3], 0.2)),
                ),
                (
                    "cico",
                    Box::new(|tape, vars| {
                        cico_loss(tape, &vars[0], &vars[1], &vars[4], &vars[5]).unwrap()
                    }),
                ),
            ];

            let inputs = vec![h0, hp0, logits0, logits1.clone(), anchors0, anchors1];
            for (name, f) in &cases {
                let build = |xs: &[Array2<f64>]| {
                    let tape = Tape::new();
                    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
                    let out = f(&tape, &vars);
                    (tape, vars, out)
                };
                let rel = fdcheck::max_relative_error(&build, &inputs, 1e-6);
                assert!(rel <= 1e-4, "{name}: rel err {rel:.3e}");
            }

            // self_distill: the teacher input is behind a stop-gradient by
            // contract, so finite differences only apply to the student.
            let teacher = logits1.clone();
            let build = move |xs: &[Array2<f64>]| {
                let tape = Tape::new();
                let student = tape.param(xs[0].clone());
                let teacher = tape.constant(teacher.clone());
                let out = self_distill(&tape, &student, &teacher, 0.1, 0.2);
                (tape, vec![student], out)
            };
            let rel = fdcheck::max_relative_error(&build, &inputs[2..3], 1e-6);
            assert!(rel <= 1e-4, "self_distill student side: rel err {rel:.3e}");
        }
    }
}
