//! One function per pipeline command. All outputs are written atomically
//! (temp file or temp dir, then rename).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nowcast_core::datagen::{
    default_profiles, generate_dataset, read_dataset, write_array, write_dataset, Dataset,
    GridDims, RainMask,
};
use nowcast_core::eval::{self, SweepResult};
use nowcast_core::model::checkpoint::Checkpoint;
use nowcast_core::model::{BackboneConfig, FiLMAdapterSet};
use nowcast_core::training::{
    film_finetune, labeled_from_dataset, log_to_csv, self_distill, train_backbone, LabeledSet,
    TrainConfig, UnlabeledSample,
};
use nowcast_core::CoreError;

/// CLI failure with a stable exit-code mapping: usage 1, data/format 2,
/// numerical 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CoreError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(CoreError::Diverged { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CoreError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)
        .map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    tmp.write_all(bytes)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    tmp.persist(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e.error))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.join("manifest.json").exists() {
        return Err(CliError::Core(CoreError::format(format!(
            "dataset {} not found: run the `datagen` stage first",
            path.display()
        ))));
    }
    Ok(read_dataset(path)?)
}

fn load_checkpoint(path: &Path, required_stage: &str) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Core(CoreError::format(format!(
            "checkpoint {} not found: run the `{required_stage}` stage first",
            path.display()
        ))));
    }
    Ok(Checkpoint::load(path)?)
}

/// Deterministic per-(region, year) split: the last `val_fraction` of each
/// group's samples (in manifest order) become validation.
pub fn split_labeled(
    dataset: &Dataset,
    val_fraction: f64,
) -> Result<(LabeledSet, LabeledSet), CoreError> {
    let all = labeled_from_dataset(dataset)?;
    let mut by_group: BTreeMap<(u32, i32), Vec<usize>> = BTreeMap::new();
    for (i, s) in all.iter().enumerate() {
        by_group
            .entry((s.tag.region_id, s.tag.year))
            .or_default()
            .push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for indices in by_group.values() {
        let n = indices.len();
        let n_val = if n >= 2 {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for (k, &i) in indices.iter().enumerate() {
            if k < n - n_val {
                train.push(all[i].clone());
            } else {
                val.push(all[i].clone());
            }
        }
    }
    Ok((train, val))
}

pub struct DatagenArgs {
    pub out: PathBuf,
    pub regions: usize,
    pub years: Vec<i32>,
    pub events: u32,
    pub dims: GridDims,
    pub rain_threshold: f64,
    pub seed: u64,
}

pub fn cmd_datagen(args: &DatagenArgs) -> CliResult {
    if args.events == 0 {
        return Err(CliError::Usage("--events must be at least 1".to_string()));
    }
    if args.regions == 0 || args.years.is_empty() {
        return Err(CliError::Usage(
            "need at least one region and one year".to_string(),
        ));
    }
    let profiles = default_profiles(args.regions);
    let dataset = generate_dataset(
        args.seed,
        &profiles,
        &args.years,
        args.events,
        &args.dims,
        args.rain_threshold,
    )?;
    write_dataset(&dataset, &args.out)?;
    eprintln!(
        "datagen: {} samples ({} regions x {} years x {} events) -> {}",
        dataset.samples.len(),
        args.regions,
        args.years.len(),
        args.events,
        args.out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model_cfg_of: Box<dyn Fn(&GridDims) -> BackboneConfig>,
    pub train_cfg: TrainConfig,
    pub val_fraction: f64,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    let model_cfg = (args.model_cfg_of)(&dataset.manifest.dims);
    let (train, val) = split_labeled(&dataset, args.val_fraction)?;
    eprintln!(
        "train: {} train / {} val samples, seed {}",
        train.len(),
        val.len(),
        args.train_cfg.seed
    );
    let outcome = train_backbone(
        &model_cfg,
        &args.train_cfg,
        dataset.manifest.num_regions as usize,
        &train,
        &val,
    )?;
    for row in &outcome.log {
        eprintln!(
            "epoch {:3}  loss {:.4}  val_csi {}",
            row.epoch,
            row.train_loss,
            row.val_csi.map_or("NA".into(), |v| format!("{v:.4}"))
        );
    }
    fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    outcome.checkpoint.save(&args.out.join("backbone.ckpt"))?;
    write_atomic(
        &args.out.join("train_log.csv"),
        log_to_csv(&outcome.log).as_bytes(),
    )?;
    eprintln!(
        "train: best val CSI {:?} at epoch {} -> {}",
        outcome.checkpoint.best_val_csi,
        outcome.checkpoint.epoch,
        args.out.join("backbone.ckpt").display()
    );
    Ok(())
}

pub struct StageArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub train_cfg: TrainConfig,
    pub val_fraction: f64,
}

pub fn cmd_distill(args: &StageArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    let teacher = load_checkpoint(&args.checkpoint, "train")?;
    // Unsupervised view of the training split: inputs and tags only.
    let (train, _) = split_labeled(&dataset, args.val_fraction)?;
    let unlabeled: Vec<UnlabeledSample> = train
        .into_iter()
        .map(|s| UnlabeledSample { x: s.x, tag: s.tag })
        .collect();
    let outcome = self_distill(&teacher, &args.train_cfg, &unlabeled)?;
    for row in &outcome.log {
        eprintln!("distill epoch {:3}  loss {:.4}", row.epoch, row.train_loss);
    }
    fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    outcome.checkpoint.save(&args.out.join("distilled.ckpt"))?;
    write_atomic(
        &args.out.join("distill_log.csv"),
        log_to_csv(&outcome.log).as_bytes(),
    )?;
    eprintln!(
        "distill: {} epochs -> {}",
        outcome.log.len(),
        args.out.join("distilled.ckpt").display()
    );
    Ok(())
}

pub fn cmd_finetune(args: &StageArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    let mut ckpt = load_checkpoint(&args.checkpoint, "distill")?;
    let (train, _) = split_labeled(&dataset, args.val_fraction)?;

    let mut by_group: BTreeMap<(u32, i32), LabeledSet> = BTreeMap::new();
    for s in train {
        by_group
            .entry((s.tag.region_id, s.tag.year))
            .or_default()
            .push(s);
    }
    let mut produced = 0usize;
    for profile in &dataset.manifest.regions {
        for &year in &dataset.manifest.years {
            let key = (profile.region_id, year);
            match by_group.get(&key) {
                Some(set) => {
                    let adapters =
                        film_finetune(&ckpt, profile.region_id, year, set, &args.train_cfg)?;
                    ckpt.adapters.insert(key, adapters);
                    produced += 1;
                    eprintln!(
                        "finetune: region {} ({}) year {year} done ({} samples)",
                        profile.region_id,
                        profile.name,
                        set.len()
                    );
                }
                None => eprintln!(
                    "warning: region {} year {year} has no training samples, skipped",
                    profile.region_id
                ),
            }
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    ckpt.save(&args.out.join("finetuned.ckpt"))?;
    eprintln!(
        "finetune: {produced} adapter sets -> {}",
        args.out.join("finetuned.ckpt").display()
    );
    Ok(())
}

/// Adapters for a tag, falling back to identity with a warning.
fn adapters_for<'c>(
    ckpt: &'c Checkpoint,
    identity: &'c FiLMAdapterSet,
    region_id: u32,
    year: i32,
    warned: &mut std::collections::BTreeSet<(u32, i32)>,
) -> &'c FiLMAdapterSet {
    match ckpt.adapters.get(&(region_id, year)) {
        Some(a) => a,
        None => {
            if warned.insert((region_id, year)) {
                eprintln!(
                    "warning: no adapters for region {region_id} year {year}, using identity"
                );
            }
            identity
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepFile {
    pub sweep: SweepResult,
    pub checkpoint: String,
}

pub fn cmd_sweep(args: &StageArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, "finetune")?;
    let (_, val) = split_labeled(&dataset, args.val_fraction)?;
    if val.is_empty() {
        return Err(CliError::Core(CoreError::invalid(
            "validation split is empty; increase --events or val_fraction",
        )));
    }
    let mut groups: BTreeMap<(u32, i32), Vec<(ndarray::Array4<f32>, RainMask)>> = BTreeMap::new();
    let mut warned = std::collections::BTreeSet::new();
    for s in &val {
        let identity =
            FiLMAdapterSet::identity(&ckpt.backbone.config, s.tag.region_id, s.tag.year);
        let adapters = adapters_for(&ckpt, &identity, s.tag.region_id, s.tag.year, &mut warned);
        let probs = ckpt.backbone.forward(&s.x, &s.tag, Some(adapters))?;
        let truth = RainMask::new(
            s.target
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| u8::from(v >= 0.5)),
        )?;
        groups
            .entry((s.tag.region_id, s.tag.year))
            .or_default()
            .push((probs, truth));
    }
    let sweep = eval::threshold_sweep(&groups)?;
    for w in &sweep.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    write_atomic(&args.out.join("sweep.csv"), eval::sweep_to_csv(&sweep).as_bytes())?;
    let file = SweepFile {
        sweep,
        checkpoint: args.checkpoint.display().to_string(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CoreError::format(format!("sweep serialization: {e}")))?;
    write_atomic(&args.out.join("sweep.json"), json.as_bytes())?;
    for g in &file.sweep.groups {
        eprintln!(
            "sweep: region {} year {} best p {:?} csi {:?}",
            g.region_id, g.year, g.best_threshold, g.best_csi
        );
    }
    Ok(())
}

pub struct PredictArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub sweep: PathBuf,
    pub out: PathBuf,
    pub val_fraction: f64,
}

fn load_sweep(path: &Path) -> Result<SweepFile, CliError> {
    if !path.exists() {
        return Err(CliError::Core(CoreError::format(format!(
            "sweep file {} not found: run the `sweep` stage first",
            path.display()
        ))));
    }
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| CoreError::format(format!("{}: {e}", path.display())))?)
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult {
    let dataset = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, "finetune")?;
    let sweep = load_sweep(&args.sweep)?;
    let (_, val) = split_labeled(&dataset, args.val_fraction)?;

    let masks_dir = args.out.join("masks");
    fs::create_dir_all(&masks_dir)
        .map_err(|e| CoreError::io(masks_dir.display().to_string(), e))?;
    let mut warned = std::collections::BTreeSet::new();
    let mut count = 0usize;
    // Pair each val sample with its position so file names match the
    // dataset's (region, year, sample) identity.
    let mut per_group_counter: BTreeMap<(u32, i32), u32> = BTreeMap::new();
    for s in &val {
        let key = (s.tag.region_id, s.tag.year);
        let threshold = sweep.sweep.best_threshold(key.0, key.1).unwrap_or_else(|| {
            if warned.insert(key) {
                eprintln!(
                    "warning: no swept threshold for region {} year {}, using 0.5",
                    key.0, key.1
                );
            }
            0.5
        });
        let identity = FiLMAdapterSet::identity(&ckpt.backbone.config, key.0, key.1);
        let adapters = adapters_for(&ckpt, &identity, key.0, key.1, &mut warned);
        let probs = ckpt.backbone.forward(&s.x, &s.tag, Some(adapters))?;
        let mask = eval::predict_with_threshold(&probs, threshold)?;
        let idx = per_group_counter.entry(key).or_insert(0);
        let name = format!("r{:02}_{}_{:05}.mask", key.0, key.1, idx);
        *idx += 1;
        write_array(
            &masks_dir.join(name),
            &mask.mask.mapv(f32::from).view().into_dyn(),
        )?;
        count += 1;
    }
    eprintln!("predict: {count} masks -> {}", masks_dir.display());
    Ok(())
}

pub struct ReportArgs {
    pub sweep: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SummaryEntry {
    region_id: u32,
    year: i32,
    best_threshold: Option<f64>,
    csi: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    best_thresholds: Vec<SummaryEntry>,
    overall_mean_csi: Option<f64>,
    warnings: Vec<String>,
}

pub fn cmd_report(args: &ReportArgs) -> CliResult {
    let sweep = load_sweep(&args.sweep)?;
    let mut csv = String::from(
        "region,year,threshold,TP,FP,FN,TN,csi,f1,iou,accuracy,precision,recall\n",
    );
    let fmt = |m: Option<f64>| m.map_or("NA".to_string(), |v| format!("{v:.6}"));
    let mut entries = Vec::new();
    let mut csis = Vec::new();
    for g in &sweep.sweep.groups {
        if let Some(best) = g.best_threshold {
            let row = g
                .reports
                .iter()
                .find(|r| r.threshold == best)
                .expect("best threshold always comes from the report set");
            csv.push_str(&format!(
                "{},{},{:.1},{},{},{},{},{},{},{},{},{},{}\n",
                g.region_id,
                g.year,
                row.threshold,
                row.counts.true_pos,
                row.counts.false_pos,
                row.counts.false_neg,
                row.counts.true_neg,
                fmt(row.metrics.csi),
                fmt(row.metrics.f1),
                fmt(row.metrics.iou),
                fmt(row.metrics.accuracy),
                fmt(row.metrics.precision),
                fmt(row.metrics.recall),
            ));
        }
        if let Some(c) = g.best_csi {
            csis.push(c);
        }
        entries.push(SummaryEntry {
            region_id: g.region_id,
            year: g.year,
            best_threshold: g.best_threshold,
            csi: g.best_csi,
        });
    }
    let overall = if csis.is_empty() {
        None
    } else {
        Some(csis.iter().sum::<f64>() / csis.len() as f64)
    };
    let summary = Summary {
        best_thresholds: entries,
        overall_mean_csi: overall,
        warnings: sweep.sweep.warnings.clone(),
    };
    fs::create_dir_all(&args.out).map_err(|e| CoreError::io(args.out.display().to_string(), e))?;
    write_atomic(&args.out.join("report.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CoreError::format(format!("summary serialization: {e}")))?;
    write_atomic(&args.out.join("summary.json"), json.as_bytes())?;
    eprintln!(
        "report: overall mean CSI {:?} -> {}",
        overall,
        args.out.join("report.csv").display()
    );
    Ok(())
}
