//! Run reports: one structured text document per command.
//!
//! `key = value` lines in a stable order (config echo first, then
//! per-epoch records, then final metrics), so reports diff cleanly and
//! deterministic reruns can be compared field by field. Floats print in
//! shortest round-trip form.

use std::path::Path;
use std::time::Instant;

use crate::config::PipelineConfig;
use crate::dual::DualEpochRecord;
use crate::error::{Error, Result};
use crate::eval::AccReport;
use crate::tes::TesEpochRecord;

/// An ordered key-value report.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    entries: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut report = Self::default();
        report.put_str("format", "mmgcd-report");
        report.put_u64("version", 1);
        report.put_str("command", command);
        report.put_u64("seed", seed);
        report
    }

    fn push(&mut self, key: &str, value: String) {
        debug_assert!(
            !self.entries.iter().any(|(k, _)| k == key),
            "duplicate report key {key}"
        );
        self.entries.push((key.to_string(), value));
    }

    pub fn put_str(&mut self, key: &str, value: &str) {
        self.push(key, value.to_string());
    }

    pub fn put_u64(&mut self, key: &str, value: u64) {
        self.push(key, value.to_string());
    }

    pub fn put_usize(&mut self, key: &str, value: usize) {
        self.push(key, value.to_string());
    }

    pub fn put_f64(&mut self, key: &str, value: f64) {
        self.push(key, value.to_string());
    }

    pub fn put_bool(&mut self, key: &str, value: bool) {
        self.push(key, value.to_string());
    }

    /// Echoes the resolved configuration under `config.` keys.
    pub fn put_config(&mut self, config: &PipelineConfig) {
        for (k, v) in config.to_flat() {
            self.push(&format!("config.{k}"), v);
        }
    }

    /// Adds a grouped-accuracy block under `prefix`.
    pub fn put_acc(&mut self, prefix: &str, acc: &AccReport) {
        self.put_f64(&format!("{prefix}.acc_all"), acc.acc_all);
        match acc.acc_old {
            Some(v) => self.put_f64(&format!("{prefix}.acc_old"), v),
            None => self.put_str(&format!("{prefix}.acc_old"), "absent"),
        }
        match acc.acc_new {
            Some(v) => self.put_f64(&format!("{prefix}.acc_new"), v),
            None => self.put_str(&format!("{prefix}.acc_new"), "absent"),
        }
        for (class, (hit, total)) in &acc.per_class_counts {
            self.put_str(
                &format!("{prefix}.class.{class:04}"),
                &format!("{hit}/{total}"),
            );
        }
    }

    /// Adds one stage-1 epoch record.
    pub fn put_tes_epoch(&mut self, record: &TesEpochRecord) {
        let p = format!("epoch.{:04}", record.epoch);
        self.put_f64(&format!("{p}.lr"), record.learning_rate);
        self.put_f64(&format!("{p}.loss.align"), record.align);
        self.put_f64(&format!("{p}.loss.distill"), record.distill);
        self.put_f64(&format!("{p}.loss.total"), record.total);
    }

    /// Adds one stage-2 epoch record (all loss components).
    pub fn put_dual_epoch(&mut self, record: &DualEpochRecord) {
        let p = format!("epoch.{:04}", record.epoch);
        self.put_f64(&format!("{p}.lr"), record.learning_rate);
        self.put_f64(&format!("{p}.tau_t"), record.tau_t);
        let m = &record.mean;
        self.put_f64(&format!("{p}.loss.rep_self_v"), m.rep_self_v);
        self.put_f64(&format!("{p}.loss.rep_sup_v"), m.rep_sup_v);
        self.put_f64(&format!("{p}.loss.cls_self_v"), m.cls_self_v);
        self.put_f64(&format!("{p}.loss.cls_sup_v"), m.cls_sup_v);
        self.put_f64(&format!("{p}.loss.db_v"), m.db_v);
        self.put_f64(&format!("{p}.loss.rep_self_t"), m.rep_self_t);
        self.put_f64(&format!("{p}.loss.rep_sup_t"), m.rep_sup_t);
        self.put_f64(&format!("{p}.loss.cls_self_t"), m.cls_self_t);
        self.put_f64(&format!("{p}.loss.cls_sup_t"), m.cls_sup_t);
        self.put_f64(&format!("{p}.loss.db_t"), m.db_t);
        self.put_f64(&format!("{p}.loss.h_mm"), m.h_mm);
        self.put_f64(&format!("{p}.loss.cico"), m.cico);
        self.put_f64(&format!("{p}.loss.total"), m.total);
    }

    /// Appends the wall-clock field; call last.
    pub fn put_wallclock(&mut self, started: Instant) {
        self.put_f64("wallclock_seconds", started.elapsed().as_secs_f64());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(Error::invalid_argument(format!(
                    "report line {} is not `key = value`",
                    lineno + 1
                )));
            };
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Compares two reports: identical keys in identical order; numeric
    /// values within `tol`; other values equal. Keys listed in `skip`
    /// must exist in both but their values are ignored (wall-clock).
    /// Returns the list of differences.
    pub fn diff(&self, other: &Self, tol: f64, skip: &[&str]) -> Vec<String> {
        let mut diffs = Vec::new();
        if self.entries.len() != other.entries.len() {
            diffs.push(format!(
                "entry count differs: {} vs {}",
                self.entries.len(),
                other.entries.len()
            ));
            return diffs;
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                diffs.push(format!("key order differs: {ka} vs {kb}"));
                continue;
            }
            if skip.contains(&ka.as_str()) {
                continue;
            }
            match (va.parse::<f64>(), vb.parse::<f64>()) {
                (Ok(a), Ok(b)) => {
                    if !((a - b).abs() <= tol || (a.is_nan() && b.is_nan())) {
                        diffs.push(format!("{ka}: {a} vs {b}"));
                    }
                }
                _ => {
                    if va != vb {
                        diffs.push(format!("{ka}: {va:?} vs {vb:?}"));
                    }
                }
            }
        }
        diffs
    }
}
