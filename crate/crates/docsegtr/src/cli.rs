//! Subcommands of the `docsegtr` binary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use docsegtr_core::attention::{
    attention_score_count, full_attention, twin_attention, AttentionMode, AttentionParams,
    AttnStats, TwinAttentionParams,
};
use docsegtr_core::evalkit::{
    average_precision, coco_map, iou_thresholds, EvalImage, PredInstance,
};
use docsegtr_core::heads::ClassCatalog;
use docsegtr_core::model::{export_predictions, init_params, predict};
use docsegtr_core::params::{Init, ParamStore};
use docsegtr_core::synthdoc::GenConfig;
use docsegtr_core::Graph;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{image_path, read_dataset, read_meta, write_dataset, ANNOTATIONS_FILE};
use crate::error::{AppError, AppResult};
use crate::ppm::{read_ppm, write_ppm, RgbImage};
use crate::records::{read_records, write_records, ImageRecord};
use crate::trainer::{train, CsvLog, TrainSet, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "docsegtr",
    version,
    about = "Instance-level document layout segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic page-layout dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Predict instances on one image or a whole dataset.
    Infer(InferArgs),
    /// Score predictions against ground truth with mask mAP.
    Eval(EvalArgs),
    /// Count and time full versus twin attention on one grid.
    BenchAttn(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub num: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GenConfig::default().min_instances)]
    pub min_inst: usize,
    #[arg(long, default_value_t = GenConfig::default().max_instances)]
    pub max_inst: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// key=value run config; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total optimizer steps, counted from the start of training.
    #[arg(long)]
    pub iters: u64,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV log of the steps run by this invocation.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint's parameters and optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run config the checkpoint was trained with; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single PPM image.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    /// Dataset directory; every image is predicted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overlay PPM (with --image) or directory of overlays (with --data).
    #[arg(long)]
    pub out_overlay: Option<PathBuf>,
    /// Prediction records file.
    #[arg(long)]
    pub out_pred: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory or ground-truth records file.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("expected HxW, got {s:?}"))
    };
    Ok((num(h)?, num(w)?))
}

/// Runs one subcommand; text meant for stdout is returned.
pub fn run(cli: Cli) -> AppResult<String> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
        Command::BenchAttn(a) => bench_attn(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> AppResult<String> {
    let gen = GenConfig {
        height: a.size.0,
        width: a.size.1,
        min_instances: a.min_inst,
        max_instances: a.max_inst,
        seed: a.seed,
    };
    write_dataset(&gen, a.num, &a.out, a.force)?;
    Ok(format!("wrote {} samples to {}\n", a.num, a.out.display()))
}

fn load_config(path: Option<&Path>) -> AppResult<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| AppError::io(path, e))
}

fn train_cmd(a: &TrainArgs) -> AppResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    let samples = read_dataset(&a.data)?;
    let set = TrainSet::new(&cfg, &samples)?;
    let mut state = match &a.resume {
        Some(p) => TrainState::from_checkpoint(&cfg, &Checkpoint::load(p)?)?,
        None => TrainState::fresh(&cfg)?,
    };
    let start = state.opt.iter;
    let mut log = match &a.log {
        Some(p) => Some((CsvLog::new(create(p)?).map_err(|e| AppError::io(p, e))?, p)),
        None => None,
    };
    let mut last = None;
    train(&cfg, &set, &mut state, a.iters, |row| {
        last = Some(*row);
        match &mut log {
            Some((l, p)) => l.row(row).map_err(|e| AppError::io(p, e)),
            None => Ok(()),
        }
    })?;
    if let Some((l, p)) = log {
        l.finish().map_err(|e| AppError::io(p, e))?;
    }
    state.checkpoint().save(&a.out)?;
    let mut msg = format!("trained iterations {start}..{}", state.opt.iter);
    if let Some(r) = last {
        write!(msg, ", last loss {}", r.total).expect("string write");
    }
    writeln!(msg, "; checkpoint {}", a.out.display()).expect("string write");
    Ok(msg)
}

/// Fixed tint of each class; classes past the table reuse it cyclically.
pub const CLASS_COLORS: [[u8; 3]; 5] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// Tints every predicted mask at 50% alpha, lowest score first so the most
/// confident instance ends on top.
pub fn overlay(img: &RgbImage, preds: &[PredInstance]) -> RgbImage {
    let mut out = img.clone();
    let mut order: Vec<&PredInstance> = preds.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    for p in order {
        let color = CLASS_COLORS[p.class_id % CLASS_COLORS.len()];
        for (i, &on) in p.mask.bits().iter().enumerate() {
            if on {
                for (v, &tint) in out.pixels[3 * i..3 * i + 3].iter_mut().zip(&color) {
                    *v = (u16::from(*v) + u16::from(tint)).div_ceil(2) as u8;
                }
            }
        }
    }
    out
}

fn infer(a: &InferArgs) -> AppResult<String> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let reference = init_params(&cfg.model, cfg.seed)?;
    let params = Checkpoint::load(&a.ckpt)?.params(&reference)?;
    let m = &cfg.model;
    let inputs: Vec<(String, PathBuf)> = match (&a.image, &a.data) {
        (Some(p), _) => {
            let id = p
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            vec![(id, p.clone())]
        }
        (None, Some(dir)) => {
            let meta = read_meta(dir)?;
            (0..meta.count)
                .map(|i| (crate::dataset::image_id(i), image_path(dir, i)))
                .collect()
        }
        (None, None) => return Err(AppError::Usage("pass --image or --data".into())),
    };
    if let (Some(dir), Some(_)) = (&a.out_overlay, &a.data) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut records = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for (id, path) in &inputs {
        let img = read_ppm(path)?;
        if (img.height, img.width) != (m.input_h, m.input_w) {
            return Err(AppError::format(
                path,
                format!(
                    "image is {}x{}, model expects {}x{}",
                    img.width, img.height, m.input_w, m.input_h
                ),
            ));
        }
        let set = predict(&params, m, &img.to_tensor(), &cfg.infer)?;
        let preds = export_predictions(&set, cfg.infer.mask_thr);
        total += preds.len();
        if let Some(out) = &a.out_overlay {
            let target = if a.data.is_some() {
                out.join(format!("{id}.ppm"))
            } else {
                out.clone()
            };
            write_ppm(&target, &overlay(&img, &preds))?;
        }
        records.push(ImageRecord::from_preds(
            id.clone(),
            img.height,
            img.width,
            &preds,
        ));
    }
    write_records(&a.out_pred, &records)?;
    Ok(format!("{total} instances on {} images\n", inputs.len()))
}

fn load_gt(path: &Path) -> AppResult<Vec<ImageRecord>> {
    if path.is_dir() {
        read_records(&path.join(ANNOTATIONS_FILE))
    } else {
        read_records(path)
    }
}

fn eval(a: &EvalArgs) -> AppResult<String> {
    let gt = load_gt(&a.gt)?;
    let preds = read_records(&a.pred)?;
    for p in &preds {
        match gt.iter().find(|g| g.image_id == p.image_id) {
            None => {
                return Err(AppError::format(
                    &a.pred,
                    format!("image {:?} is not in the ground truth", p.image_id),
                ))
            }
            Some(g) if (g.height, g.width) != (p.height, p.width) => {
                return Err(AppError::format(
                    &a.pred,
                    format!("image {:?} size differs from the ground truth", p.image_id),
                ))
            }
            Some(_) => {}
        }
    }
    let mut images = Vec::with_capacity(gt.len());
    for g in &gt {
        let mine: Vec<PredInstance> = preds
            .iter()
            .filter(|p| p.image_id == g.image_id)
            .map(ImageRecord::preds)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        images.push(EvalImage {
            gts: g.gts()?,
            preds: mine,
        });
    }
    let report = coco_map(&images)?;
    let [t50, t75] = [iou_thresholds()[0], iou_thresholds()[5]];
    let catalog = ClassCatalog::document();
    let mut out = format!("{:<8} {:>6} {:>6} {:>6}\n", "class", "AP", "AP50", "AP75");
    for (&c, &ap) in &report.per_class_ap {
        let name = catalog
            .name(c)
            .map_or_else(|| c.to_string(), str::to_string);
        let ap50 = average_precision(&images, c, t50)?.unwrap_or(0.0);
        let ap75 = average_precision(&images, c, t75)?.unwrap_or(0.0);
        writeln!(out, "{name:<8} {ap:>6.3} {ap50:>6.3} {ap75:>6.3}").expect("string write");
    }
    writeln!(
        out,
        "{:<8} {:>6.3} {:>6.3} {:>6.3}",
        "all", report.ap, report.ap50, report.ap75
    )
    .expect("string write");
    Ok(out)
}

/// Largest full-attention score tensor the benchmark materializes.
const BENCH_FULL_LIMIT: u64 = 1 << 24;

fn bench_attn(a: &BenchArgs) -> AppResult<String> {
    let (h, w, c) = (a.height, a.width, a.channels);
    if h == 0 || w == 0 {
        return Err(AppError::Usage("height and width must be >= 1".into()));
    }
    if a.heads == 0 || c % a.heads != 0 {
        return Err(AppError::Usage(format!(
            "{c} channels are not divisible into {} heads",
            a.heads
        )));
    }
    let full_formula = attention_score_count(h as u64, w as u64, AttentionMode::Full);
    let twin_formula = attention_score_count(h as u64, w as u64, AttentionMode::Twin);
    let mut store = ParamStore::new();
    let mut init = Init::new(0);
    AttentionParams::declare(&mut store, "full", c, &mut init);
    TwinAttentionParams::declare(&mut store, "twin", c, &mut init);
    let x = init.uniform(&[h, w, c], 1.0);

    let run = |twin: bool| -> AppResult<(u64, f64)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut stats = AttnStats::default();
        let t0 = Instant::now();
        if twin {
            twin_attention(
                &mut g,
                xv,
                &TwinAttentionParams::bind(&p, "twin", a.heads)?,
                &mut stats,
            )?;
        } else {
            full_attention(
                &mut g,
                xv,
                &AttentionParams::bind(&p, "full", a.heads)?,
                &mut stats,
            )?;
        }
        Ok((stats.score_entries, t0.elapsed().as_secs_f64() * 1e3))
    };
    let (twin_count, twin_ms) = run(true)?;
    let full = if full_formula * a.heads as u64 <= BENCH_FULL_LIMIT {
        Some(run(false)?)
    } else {
        None
    };

    let mut out = format!("grid {h}x{w}, channels {c}, heads {}\n", a.heads);
    match full {
        Some((n, _)) => writeln!(
            out,
            "full attention score entries: {n} (formula (h*w)^2 = {full_formula})"
        ),
        None => writeln!(
            out,
            "full attention score entries: not run (formula (h*w)^2 = {full_formula})"
        ),
    }
    .expect("string write");
    writeln!(
        out,
        "twin attention score entries: {twin_count} (formula h*w^2 + w*h^2 = {twin_formula})"
    )
    .expect("string write");
    writeln!(
        out,
        "ratio full/twin: {:.2}",
        full_formula as f64 / twin_formula as f64
    )
    .expect("string write");
    if let Some((_, ms)) = full {
        writeln!(out, "wall time full: {ms:.3} ms").expect("string write");
    }
    writeln!(out, "wall time twin: {twin_ms:.3} ms").expect("string write");
    if full.is_some_and(|(n, _)| n != full_formula) || twin_count != twin_formula {
        return Err(AppError::Core(docsegtr_core::Error::Numeric(
            "instrumented counts disagree with the closed form".into(),
        )));
    }
    Ok(out)
}
