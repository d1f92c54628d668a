//! Training, evaluation and ablation drivers behind the CLI.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dual_stream::{fuse_predictions, AlphaMode, DualStreamModel, LossRecord};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::dataset::{Manifest, Split, SplitData};
use crate::metrics::{evaluate, write_labels, write_predictions, ClassWeights, MetricsReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.dsck";
pub const LOSSES_FILE: &str = "losses.csv";
pub const LOSSES_HEADER: &str = "step,attention_loss,optical_loss,rgb_loss,total_loss";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trailing moving average of `values` ending at `end` (inclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let start = (end + 1).saturating_sub(window);
    let s = &values[start..=end];
    s.iter().sum::<f64>() / s.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualStreamModel,
    pub records: Vec<LossRecord>,
    pub checkpoint: PathBuf,
}

/// Trains on the train split of `data`, writing the checkpoint,
/// `losses.csv`, the effective config, and a summary into `out_dir`.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    mut on_step: impl FnMut(&LossRecord, usize),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let manifest = Manifest::read(data)?;
    let split = SplitData::load(&manifest, Split::Train)?;
    if split.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::EmptyEvaluation(format!("{} has no training samples", data.display())));
    }
    let mut model = DualStreamModel::new(&cfg.model, &cfg.dual, cfg.train.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5348_5546));
    let mut order: Vec<usize> = (0..split.len()).collect();
    let steps_per_epoch = split.len().div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;

    let losses_path = out_dir.join(LOSSES_FILE);
    let file = File::create(&losses_path).map_err(|e| Error::io(&losses_path, e))?;
    let mut losses = BufWriter::new(file);
    let io = |e| Error::io(&losses_path, e);
    writeln!(losses, "{LOSSES_HEADER}").map_err(io)?;
    let mut records = Vec::with_capacity(total_steps);
    for _ in 0..cfg.train.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| split.sample(i)).collect();
            let r = model.train_step(&batch)?;
            writeln!(
                losses,
                "{},{},{},{},{}",
                r.step, r.attention_loss, r.optical_loss, r.rgb_loss, r.total_loss
            )
            .map_err(io)?;
            on_step(&r, total_steps);
            records.push(r);
        }
    }
    losses.flush().map_err(io)?;

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&model, &cfg.model_hash()).save(&checkpoint)?;
    write_file(&out_dir.join("config.txt"), &cfg.to_text())?;
    write_file(&out_dir.join("summary.txt"), &train_summary(cfg, &model, &records))?;
    Ok(TrainOutcome {
        model,
        records,
        checkpoint,
    })
}

fn train_summary(cfg: &RunConfig, model: &DualStreamModel, records: &[LossRecord]) -> String {
    let mut s = format!(
        "model_hash {}\nparameters_per_stream {}\nsteps {}\nalpha {}\n",
        cfg.model_hash(),
        model.rgb.num_scalars(),
        records.len(),
        model.alpha
    );
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        let total: Vec<f64> = records.iter().map(|r| r.total_loss).collect();
        let att: Vec<f64> = records.iter().map(|r| r.attention_loss).collect();
        let end = records.len() - 1;
        s.push_str(&format!(
            "initial_total_loss {}\nfinal_total_loss {}\nfinal_total_loss_ma10 {}\nfinal_attention_loss_ma10 {}\n",
            first.total_loss,
            last.total_loss,
            moving_average(&total, end, 10),
            moving_average(&att, end, 10)
        ));
    }
    s
}

/// Rebuilds a model from a checkpoint written with a matching config.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<DualStreamModel> {
    let mut model = DualStreamModel::new(&cfg.model, &cfg.dual, cfg.train.seed)?;
    Checkpoint::load(checkpoint)?.apply(&mut model, &cfg.model_hash())?;
    Ok(model)
}

fn class_weights(cfg: &RunConfig) -> Result<ClassWeights> {
    match &cfg.eval.weights {
        Some(p) => ClassWeights::from_csv(p),
        None => Ok(ClassWeights::uniform()),
    }
}

fn labels_of(split: &SplitData) -> Vec<Vec<bool>> {
    split.labels.iter().map(|l| l.to_vec()).collect()
}

/// RGB-only evaluation of a checkpoint on one split. Writes
/// `predictions.csv`, `labels.csv`, `metrics.csv` and `metrics.txt`.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let model = load_model(cfg, checkpoint)?;
    let manifest = Manifest::read(data)?;
    let split_data = SplitData::load(&manifest, split)?;
    let scores = (0..split_data.len())
        .map(|i| model.infer_rgb(&split_data.rgb_tensor(i)))
        .collect::<Result<Vec<_>>>()?;
    let labels = labels_of(&split_data);
    let report = evaluate(&scores, &labels, &class_weights(cfg)?, cfg.eval.threshold)?;
    create_dir(out_dir)?;
    write_predictions(&out_dir.join("predictions.csv"), &split_data.ids, &scores)?;
    write_labels(&out_dir.join("labels.csv"), &split_data.ids, &labels)?;
    write_file(&out_dir.join("metrics.csv"), &report.to_csv())?;
    write_file(&out_dir.join("metrics.txt"), &report.to_table())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Fusion weight used, for the alpha axis.
    pub alpha: Option<f64>,
    pub report: MetricsReport,
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("variant,alpha,f1_normal,f2_ciw,map\n");
    for r in rows {
        let alpha = r.alpha.map_or(String::new(), |a| a.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant, alpha, r.report.f1_normal, r.report.f2_ciw, r.report.map
        ));
    }
    write_file(path, &out)
}

/// Trains one dual-stream model with a learned fusion weight, then scores
/// the val split under fixed weights 0 and 0.5, the learned weight, and 1.
/// The model is kept under `out_dir/model`.
pub fn ablate_alpha(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    on_step: impl FnMut(&LossRecord, usize),
) -> Result<Vec<AblationRow>> {
    let mut learned = cfg.clone();
    learned.dual.alpha = AlphaMode::Learned;
    let outcome = train(&learned, data, &out_dir.join("model"), on_step)?;
    let model = outcome.model;
    let manifest = Manifest::read(data)?;
    let val = SplitData::load(&manifest, Split::Val)?;
    let mut rgb = Vec::with_capacity(val.len());
    let mut motion = Vec::with_capacity(val.len());
    for i in 0..val.len() {
        let s = val.sample(i);
        rgb.push(model.infer_rgb(&s.rgb)?);
        motion.push(model.infer_motion(&s.motion)?);
    }
    let labels = labels_of(&val);
    let weights = class_weights(cfg)?;
    let mut rows = Vec::new();
    for (variant, alpha) in [
        ("fixed-0", 0.0),
        ("fixed-0.5", 0.5),
        ("learned", model.alpha),
        ("fixed-1", 1.0),
    ] {
        let scores = rgb
            .iter()
            .zip(&motion)
            .map(|(r, o)| fuse_predictions(r, o, alpha))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            variant: variant.into(),
            alpha: Some(alpha),
            report: evaluate(&scores, &labels, &weights, cfg.eval.threshold)?,
        });
    }
    write_ablation(&out_dir.join("ablation_alpha.csv"), &rows)?;
    Ok(rows)
}

/// Alignment-stage sets compared by the attention-layer ablation.
pub const ATTN_LAYER_VARIANTS: [&[usize]; 3] = [&[3, 4], &[4], &[3]];

/// Trains one model per alignment-stage set and scores each RGB-only.
pub fn ablate_attn_layer(
    cfg: &RunConfig,
    data: &Path,
    out_dir: &Path,
    mut on_step: impl FnMut(&str, &LossRecord, usize),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for stages in ATTN_LAYER_VARIANTS {
        let name = format!(
            "layers-{}",
            stages.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
        );
        let mut c = cfg.clone();
        c.dual.alignment_stages = stages.to_vec();
        let dir = out_dir.join(&name);
        let outcome = train(&c, data, &dir, |r, n| on_step(&name, r, n))?;
        let report = evaluate_checkpoint(&c, &outcome.checkpoint, data, Split::Val, &dir.join("eval"))?;
        rows.push(AblationRow {
            variant: name,
            alpha: None,
            report,
        });
    }
    write_ablation(&out_dir.join("ablation_attn_layer.csv"), &rows)?;
    Ok(rows)
}
