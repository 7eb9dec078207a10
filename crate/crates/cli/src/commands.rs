//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmgcd_core::cache::EmbeddingCache;
use mmgcd_core::config::{DatasetKind, EncoderBackend, PipelineConfig};
use mmgcd_core::data::{
    build_gcd_split, make_paired_synthetic_dataset, make_synthetic_dataset, read_manifest,
    read_split, write_manifest, write_split, Dataset, GcdSplit, SyntheticOracleParams,
};
use mmgcd_core::dual::{infer, load_dual, save_dual, train_dual, DualModel};
use mmgcd_core::encoder::EncoderStack;
use mmgcd_core::error::Error as CoreError;
use mmgcd_core::eval::{concat_features, estimate_class_number, grouped_acc, ss_kmeans};
use mmgcd_core::report::MetricsReport;
use mmgcd_core::tes::{export_embeddings, load_tes, save_tes, train_tes};
use ndarray::Array2;

use crate::CommonArgs;

/// Exit-coded error: 2 for configuration problems, 3 for runtime ones.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

type CliResult<T> = Result<T, CliError>;

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn runtime_error(e: CoreError) -> CliError {
    CliError {
        code: 3,
        message: e.to_string(),
    }
}

/// Loads, validates and seed-overrides the configuration (exit code 2 on
/// any failure, with all violations listed).
fn load_config(common: &CommonArgs) -> CliResult<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::from_file(path).map_err(|e| config_error(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config
        .validate_paths()
        .map_err(|e| config_error(e.to_string()))?;
    Ok(config)
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!(
            "{what} path {} does not exist",
            path.display()
        )))
    }
}

/// Resolves the run directory: `--overwrite` writes into --out itself,
/// otherwise a fresh timestamped subdirectory is created.
fn resolve_out_dir(common: &CommonArgs) -> CliResult<PathBuf> {
    let base = &common.out;
    let dir = if common.overwrite {
        base.clone()
    } else {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut candidate = base.join(format!("run-{stamp}"));
        let mut counter = 1;
        while candidate.exists() {
            counter += 1;
            candidate = base.join(format!("run-{stamp}-{counter}"));
        }
        candidate
    };
    std::fs::create_dir_all(&dir).map_err(|e| runtime_error(CoreError::io(dir.clone(), e)))?;
    Ok(dir)
}

/// Dataset plus generator parameters (for synthetic kinds).
fn build_dataset(config: &PipelineConfig) -> CliResult<(Dataset, Option<SyntheticOracleParams>)> {
    match config.dataset.kind {
        DatasetKind::Synthetic => {
            let (dataset, params) =
                make_synthetic_dataset(&config.synthetic_spec()).map_err(runtime_error)?;
            Ok((dataset, Some(params)))
        }
        DatasetKind::SyntheticPaired => {
            let (dataset, params) = make_paired_synthetic_dataset(
                &config.synthetic_spec(),
                config.dataset.pair_offset,
                config.dataset.pair_new,
            )
            .map_err(runtime_error)?;
            Ok((dataset, Some(params)))
        }
        DatasetKind::Manifest => {
            let path = config
                .dataset
                .manifest
                .as_ref()
                .expect("validated at parse time");
            let dataset = read_manifest(path).map_err(runtime_error)?;
            Ok((dataset, None))
        }
    }
}

fn build_encoder(
    config: &PipelineConfig,
    params: Option<&SyntheticOracleParams>,
) -> CliResult<EncoderStack> {
    match config.encoder.backend {
        EncoderBackend::Synthetic => {
            let params = params.ok_or_else(|| {
                config_error("the synthetic encoder backend needs a synthetic dataset")
            })?;
            EncoderStack::synthetic(params, &config.encoder_dims(), config.encoder_seed())
                .map_err(runtime_error)
        }
        EncoderBackend::Pretrained => {
            let path = config
                .encoder
                .weights
                .as_ref()
                .expect("validated at parse time");
            EncoderStack::load_archive(path).map_err(runtime_error)
        }
    }
}

fn load_split_file(path: &Path) -> CliResult<GcdSplit> {
    require_file(path, "split")?;
    read_split(path).map_err(runtime_error)
}

/// Frozen visual embeddings plus cached pseudo text embeddings aligned
/// with the dataset's instance order.
fn cache_for_dataset(cache_path: &Path, dataset: &Dataset) -> CliResult<EmbeddingCache> {
    require_file(cache_path, "embedding cache")?;
    let cache = EmbeddingCache::read(cache_path).map_err(runtime_error)?;
    let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
    if cache.ids() != ids.as_slice() {
        return Err(runtime_error(CoreError::invalid_state(
            "embedding cache ids do not match the dataset; regenerate with `mmgcd tes-train`",
        )));
    }
    Ok(cache)
}

/// Ground-truth labels of the unlabeled set, in `split.unlabeled_ids`
/// order.
fn unlabeled_truth(dataset: &Dataset, split: &GcdSplit) -> Vec<u32> {
    split
        .unlabeled_ids
        .iter()
        .map(|id| {
            dataset
                .get(id)
                .and_then(|i| i.class_id)
                .expect("dataset covers the split")
        })
        .collect()
}

pub fn run_split(common: &CommonArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(common)?;
    let out = resolve_out_dir(common)?;
    let (dataset, _) = build_dataset(&config)?;
    let split = build_gcd_split(
        &dataset,
        config.split.old_class_count,
        config.split.labeled_fraction,
        config.split.policy,
        config.split_seed(),
    )
    .map_err(runtime_error)?;

    write_split(&out.join("split.json"), &split).map_err(runtime_error)?;
    write_manifest(&out.join("dataset.jsonl"), &dataset, None).map_err(runtime_error)?;
    write_manifest(&out.join("train_view.jsonl"), &dataset, Some(&split)).map_err(runtime_error)?;

    println!(
        "split: {} instances, {} classes ({} old); {} labeled, {} unlabeled",
        dataset.len(),
        split.all_classes.len(),
        split.old_classes.len(),
        split.labeled_ids.len(),
        split.unlabeled_ids.len(),
    );

    let mut report = MetricsReport::new("split", config.seed);
    report.put_config(&config);
    report.put_usize("split.instances", dataset.len());
    report.put_usize("split.classes", split.all_classes.len());
    report.put_usize("split.old_classes", split.old_classes.len());
    report.put_usize("split.labeled", split.labeled_ids.len());
    report.put_usize("split.unlabeled", split.unlabeled_ids.len());
    report.put_wallclock(started);
    report
        .write(&out.join("report.txt"))
        .map_err(runtime_error)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_tes_train(common: &CommonArgs, split_path: &Path) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(common)?;
    let split = load_split_file(split_path)?;
    let out = resolve_out_dir(common)?;
    let (dataset, params) = build_dataset(&config)?;
    let encoder = build_encoder(&config, params.as_ref())?;

    let train_config = config.tes_train_config();
    if train_config.epochs == 0 {
        log::warn!("tes.epochs = 0: checkpointing the initialized synthesizer without training");
    }
    let (model, log) =
        train_tes(&dataset, &split, &encoder, &train_config).map_err(runtime_error)?;
    save_tes(
        &out.join("tes.ckpt"),
        &model,
        train_config.seed,
        train_config.epochs,
    )
    .map_err(runtime_error)?;
    let cache = export_embeddings(&model, &dataset, &encoder).map_err(runtime_error)?;
    cache
        .write(&out.join("embeddings.cache"))
        .map_err(runtime_error)?;

    let mut report = MetricsReport::new("tes-train", config.seed);
    report.put_config(&config);
    for record in &log {
        report.put_tes_epoch(record);
    }
    if let Some(last) = log.last() {
        report.put_f64("final.loss.align", last.align);
        report.put_f64("final.loss.distill", last.distill);
        report.put_f64("final.loss.total", last.total);
        println!(
            "stage 1 done: {} epochs, final align {:.4}, distill {:.4}",
            log.len(),
            last.align,
            last.distill
        );
    }
    report.put_wallclock(started);
    report
        .write(&out.join("report.txt"))
        .map_err(runtime_error)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_train(
    common: &CommonArgs,
    split_path: &Path,
    tes_path: &Path,
    cache_path: Option<&Path>,
) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(common)?;
    let split = load_split_file(split_path)?;
    require_file(tes_path, "synthesizer checkpoint")?;
    let out = resolve_out_dir(common)?;
    let (dataset, params) = build_dataset(&config)?;
    let encoder = build_encoder(&config, params.as_ref())?;
    let (tes_model, _, _) = load_tes(tes_path).map_err(runtime_error)?;
    let cache = match cache_path {
        Some(p) => Some(cache_for_dataset(p, &dataset)?),
        None => None,
    };

    let train_config = config.dual_train_config();
    if train_config.epochs == 0 {
        log::warn!("train.epochs = 0: checkpointing the initialized model without training");
    }
    let (model, records) = train_dual(
        &dataset,
        &split,
        &tes_model,
        &encoder,
        &train_config,
        cache.as_ref(),
    )
    .map_err(runtime_error)?;
    save_dual(
        &out.join("dual.ckpt"),
        &model,
        &config.echo_string(),
        train_config.seed,
    )
    .map_err(runtime_error)?;

    let mut report = MetricsReport::new("train", config.seed);
    report.put_config(&config);
    for record in &records {
        report.put_dual_epoch(record);
    }
    // final accuracy on the unlabeled set, visual branch only
    let latents = dataset
        .latents(&split.unlabeled_ids)
        .map_err(runtime_error)?;
    let predictions = infer(&model, &encoder, &latents).map_err(runtime_error)?;
    let truth = unlabeled_truth(&dataset, &split);
    let acc = grouped_acc(&truth, &predictions, &split.old_class_set()).map_err(runtime_error)?;
    report.put_acc("final", &acc);
    report.put_wallclock(started);
    report
        .write(&out.join("report.txt"))
        .map_err(runtime_error)?;
    println!(
        "stage 2 done: {} epochs; all {:.3} old {} new {}",
        records.len(),
        acc.acc_all,
        acc.acc_old.map_or("absent".into(), |v| format!("{v:.3}")),
        acc.acc_new.map_or("absent".into(), |v| format!("{v:.3}")),
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Feature rows over the whole dataset plus the labeled-row constraint
/// map used by the k-means baselines.
fn kmeans_inputs(
    dataset: &Dataset,
    split: &GcdSplit,
    features: &Array2<f64>,
) -> (BTreeMap<usize, usize>, Vec<usize>) {
    let labeled: BTreeMap<usize, usize> = split
        .labeled_ids
        .iter()
        .map(|id| {
            let row = dataset.index_of(id).expect("split covers dataset");
            let class = dataset.get(id).and_then(|i| i.class_id).expect("labeled");
            (row, class as usize)
        })
        .collect();
    let unlabeled_rows: Vec<usize> = split
        .unlabeled_ids
        .iter()
        .map(|id| dataset.index_of(id).expect("split covers dataset"))
        .collect();
    debug_assert_eq!(features.nrows(), dataset.len());
    (labeled, unlabeled_rows)
}

fn kmeans_baseline(
    dataset: &Dataset,
    split: &GcdSplit,
    features: &Array2<f64>,
    seed: u64,
) -> CliResult<mmgcd_core::eval::AccReport> {
    let (labeled, unlabeled_rows) = kmeans_inputs(dataset, split, features);
    let clustering =
        ss_kmeans(features, &labeled, split.num_classes(), seed).map_err(runtime_error)?;
    let truth = unlabeled_truth(dataset, split);
    let predictions: Vec<usize> = unlabeled_rows
        .iter()
        .map(|&r| clustering.assignment[r])
        .collect();
    grouped_acc(&truth, &predictions, &split.old_class_set()).map_err(runtime_error)
}

pub fn run_eval(
    common: &CommonArgs,
    split_path: &Path,
    checkpoint: Option<&Path>,
    cache_path: Option<&Path>,
    with_ss_kmeans: bool,
    with_concat: bool,
) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(common)?;
    let split = load_split_file(split_path)?;
    if checkpoint.is_none() && !with_ss_kmeans && !with_concat {
        return Err(config_error(
            "nothing to evaluate: pass --checkpoint and/or --ss-kmeans / --concat-tes",
        ));
    }
    if with_concat && cache_path.is_none() {
        return Err(config_error("--concat-tes needs --cache"));
    }
    let out = resolve_out_dir(common)?;
    let (dataset, params) = build_dataset(&config)?;
    let encoder = build_encoder(&config, params.as_ref())?;
    let truth = unlabeled_truth(&dataset, &split);

    let mut report = MetricsReport::new("eval", config.seed);
    report.put_config(&config);

    let mut summary = Vec::new();
    if let Some(ckpt_path) = checkpoint {
        require_file(ckpt_path, "checkpoint")?;
        let (model, _, _) = load_dual(ckpt_path).map_err(runtime_error)?;
        if model.num_classes != split.num_classes() {
            return Err(runtime_error(CoreError::invalid_argument(format!(
                "checkpoint has {} classes but the split has {}",
                model.num_classes,
                split.num_classes()
            ))));
        }
        let acc = parametric_eval(&dataset, &split, &encoder, &model, &truth)?;
        summary.push(format!("parametric all {:.3}", acc.acc_all));
        report.put_acc("final", &acc);
    }

    let cache = match cache_path {
        Some(p) => Some(cache_for_dataset(p, &dataset)?),
        None => None,
    };
    if with_ss_kmeans {
        let features = match &cache {
            Some(cache) => cache.visual_f64(),
            None => {
                let ids: Vec<String> = dataset.instances().iter().map(|i| i.id.clone()).collect();
                let latents = dataset.latents(&ids).map_err(runtime_error)?;
                encoder.encode_images(&latents).map_err(runtime_error)?.1
            }
        };
        let acc = kmeans_baseline(&dataset, &split, &features, config.eval_seed())?;
        summary.push(format!("ss-kmeans all {:.3}", acc.acc_all));
        report.put_acc("sskmeans", &acc);
    }
    if with_concat {
        let cache = cache.as_ref().expect("checked above");
        let features =
            concat_features(&cache.visual_f64(), &cache.text_f64()).map_err(runtime_error)?;
        let acc = kmeans_baseline(&dataset, &split, &features, config.eval_seed())?;
        summary.push(format!("concat-tes all {:.3}", acc.acc_all));
        report.put_acc("concat", &acc);
    }

    report.put_wallclock(started);
    report
        .write(&out.join("report.txt"))
        .map_err(runtime_error)?;
    println!("eval: {}", summary.join("; "));
    println!("wrote {}", out.display());
    Ok(())
}

fn parametric_eval(
    dataset: &Dataset,
    split: &GcdSplit,
    encoder: &EncoderStack,
    model: &DualModel,
    truth: &[u32],
) -> CliResult<mmgcd_core::eval::AccReport> {
    let latents = dataset
        .latents(&split.unlabeled_ids)
        .map_err(runtime_error)?;
    let predictions = infer(model, encoder, &latents).map_err(runtime_error)?;
    grouped_acc(truth, &predictions, &split.old_class_set()).map_err(runtime_error)
}

pub fn run_estimate_k(common: &CommonArgs, split_path: &Path, cache_path: &Path) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(common)?;
    let split = load_split_file(split_path)?;
    let out = resolve_out_dir(common)?;
    let (dataset, _) = build_dataset(&config)?;
    let cache = cache_for_dataset(cache_path, &dataset)?;
    let (labeled, _) = kmeans_inputs(&dataset, &split, &cache.visual_f64());

    let k_range = config.estimate.k_min..=config.estimate.k_max;
    let true_k = dataset.classes().len();
    let mut report = MetricsReport::new("estimate-k", config.seed);
    report.put_config(&config);
    report.put_usize("estimate.true_k", true_k);

    let visual = estimate_class_number(
        &cache.visual_f64(),
        &labeled,
        k_range.clone(),
        config.estimate_seed(),
    )
    .map_err(runtime_error)?;
    let concat = concat_features(&cache.visual_f64(), &cache.text_f64()).map_err(runtime_error)?;
    let concat = estimate_class_number(&concat, &labeled, k_range, config.estimate_seed())
        .map_err(runtime_error)?;

    for (name, estimate) in [("visual", &visual), ("concat", &concat)] {
        report.put_usize(&format!("estimate.{name}.k_hat"), estimate.k_hat);
        report.put_usize(
            &format!("estimate.{name}.error"),
            estimate.k_hat.abs_diff(true_k),
        );
        for (k, score) in &estimate.scores {
            report.put_f64(&format!("estimate.{name}.score.{k:04}"), *score);
        }
    }
    report.put_wallclock(started);
    report
        .write(&out.join("report.txt"))
        .map_err(runtime_error)?;
    println!(
        "estimate-k: visual {} (err {}), concat {} (err {}), true {}",
        visual.k_hat,
        visual.k_hat.abs_diff(true_k),
        concat.k_hat,
        concat.k_hat.abs_diff(true_k),
        true_k
    );
    println!("wrote {}", out.display());
    Ok(())
}
