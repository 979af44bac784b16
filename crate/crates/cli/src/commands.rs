use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use surfmetric::data::{
    generate_synthetic_dataset, index_dataset, load_and_preprocess, DatasetIndex, DefectKind,
    IndexOptions, SamplingConfig, SynthSpec,
};
use surfmetric::eval::{
    distance_map, evaluate, export_heatmap, load_prototype, save_prototype, score_features,
    EvalConfig, Label,
};
use surfmetric::model::{
    build_feature_extractor, load_checkpoint, save_checkpoint, train_with, TrainConfig,
    TrainingMeta,
};
use surfmetric::nn::AdamConfig;

use crate::config::RunConfig;
use crate::UsageError;

pub const INDEX_FILE: &str = "index.json";
pub const REPORT_FILE: &str = "report.csv";
pub const SCORES_FILE: &str = "scores.csv";

pub fn checkpoint_file(rep: usize) -> String {
    format!("rep{rep}.ckpt")
}

pub fn loss_file(rep: usize) -> String {
    format!("rep{rep}_loss.csv")
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long, default_value_t = 32)]
    train_good: usize,
    #[arg(long, default_value_t = 8)]
    test_good: usize,
    #[arg(long, default_value_t = 8)]
    defects_per_type: usize,
    /// Comma-separated subset of scratch, blob, crack.
    #[arg(long, value_delimiter = ',', default_value = "scratch,blob,crack")]
    defect_kinds: Vec<String>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl SynthArgs {
    pub fn apply(&self, _cfg: &mut RunConfig) {}
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset root (`<class>/train/good`, `<class>/test/<type>`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated known classes; the rest are novel.
    #[arg(long, value_delimiter = ',')]
    known: Option<Vec<String>>,
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.dataset_root = Some(d.clone());
        }
        if let Some(k) = &self.known {
            cfg.known_classes = k.clone();
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Side every image is resized to before sampling.
    #[arg(long)]
    target_side: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch, self.batch);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.repetitions, self.repetitions);
        set(&mut cfg.target_side, self.target_side);
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory holding the trained checkpoints (default: --out).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    target_side: Option<usize>,
    /// Write one heatmap per test image (first repetition).
    #[arg(long)]
    heatmaps: bool,
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        set(&mut cfg.repetitions, self.repetitions);
        set(&mut cfg.target_side, self.target_side);
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prototype: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    target_side: Option<usize>,
}

impl ScoreArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.target_side, self.target_side);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let defect_kinds = args
        .defect_kinds
        .iter()
        .map(|k| {
            DefectKind::parse(k.trim())
                .ok_or_else(|| UsageError(format!("unknown defect kind {k:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SynthSpec {
        seed: cfg.seed,
        n_classes: args.classes,
        side: args.side,
        train_good: args.train_good,
        test_good: args.test_good,
        defects_per_type: args.defects_per_type,
        defect_kinds,
        ..SynthSpec::default()
    };
    let out = &cfg.output_dir;
    if !args.force && out.is_dir() && fs::read_dir(out)?.next().is_some() {
        return Err(UsageError(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        ))
        .into());
    }
    let summary = generate_synthetic_dataset(&spec, out)?;
    println!(
        "wrote {} images and {} masks for {} classes ({}) under {}",
        summary.images_written,
        summary.masks_written,
        summary.classes.len(),
        summary.classes.join(", "),
        summary.root.display()
    );
    Ok(())
}

fn index_options(cfg: &RunConfig) -> IndexOptions {
    IndexOptions {
        known_classes: (!cfg.known_classes.is_empty()).then(|| cfg.known_classes.clone()),
        seed: cfg.seed,
    }
}

fn read_index(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A saved index next to the checkpoints wins, so evaluation sees the same
/// known/novel partition and train/prototype split as training.
fn resolve_index(cfg: &RunConfig, saved: Option<&Path>) -> Result<DatasetIndex> {
    if let Some(path) = saved.filter(|p| p.is_file()) {
        return read_index(path);
    }
    Ok(index_dataset(cfg.dataset_root()?, &index_options(cfg))?)
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let index = index_dataset(cfg.dataset_root()?, &index_options(cfg))?;
    create_out(&cfg.output_dir)?;
    let path = cfg.output_dir.join(INDEX_FILE);
    write(&path, &serde_json::to_string_pretty(&index)?)?;
    for c in &index.classes {
        println!(
            "{} ({:?}): {} train, {} prototype, {} good test, {} defect types",
            c.name,
            c.role,
            c.train_good.len(),
            c.prototype_good.len(),
            c.test_good.len(),
            c.test_defective.len()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let index = index_dataset(cfg.dataset_root()?, &index_options(cfg))?;
    create_out(&cfg.output_dir)?;
    write(
        &cfg.output_dir.join(INDEX_FILE),
        &serde_json::to_string_pretty(&index)?,
    )?;
    for rep in 0..cfg.repetitions {
        let seed = cfg.repetition_seed(rep);
        let tc = TrainConfig {
            adam: AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            batch_size: cfg.batch,
            epochs: cfg.epochs,
            seed,
            deterministic: cfg.deterministic_reduction,
            sampling: SamplingConfig::for_side(cfg.target_side),
        };
        let mut net = build_feature_extractor(seed);
        let history = train_with(&mut net, &index, &tc, |e| {
            eprintln!(
                "repetition {rep} (seed {seed}) epoch {}/{}: mean loss {:.6}",
                e.epoch, tc.epochs, e.mean_loss
            );
        })?;
        history.write_csv(&cfg.output_dir.join(loss_file(rep)))?;
        let path = cfg.output_dir.join(checkpoint_file(rep));
        let meta = TrainingMeta {
            epoch: cfg.epochs as u32,
            seed,
        };
        save_checkpoint(&net, meta, true, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ckpt_dir = args
        .checkpoints
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    let mut nets = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let path = ckpt_dir.join(checkpoint_file(rep));
        if !path.is_file() {
            return Err(UsageError(format!(
                "missing checkpoint {} for repetition {rep}; run `surfmetric train` first",
                path.display()
            ))
            .into());
        }
        nets.push(load_checkpoint(&path)?.net);
    }
    let index = resolve_index(cfg, Some(&ckpt_dir.join(INDEX_FILE)))?;
    create_out(&cfg.output_dir)?;
    let ecfg = EvalConfig {
        target_side: cfg.target_side,
        heatmap_dir: args.heatmaps.then(|| cfg.output_dir.join("heatmaps")),
        ..EvalConfig::default()
    };
    let run = evaluate(&nets, &index, &ecfg)?;

    for (rep, protos) in run.prototypes.iter().enumerate() {
        let dir = cfg.output_dir.join("prototypes").join(format!("rep{rep}"));
        create_out(&dir)?;
        for p in protos {
            save_prototype(p, &dir.join(format!("{}.proto", p.class_name)))?;
        }
    }
    let mut scores =
        String::from("repetition,class,image_id,label,defect_type,mean_distance,max_distance\n");
    for (rep, points) in run.points.iter().enumerate() {
        for p in points {
            let label = match p.label {
                Label::Good => "good",
                Label::Defective => "defective",
            };
            writeln!(
                scores,
                "{rep},{},{},{label},{},{},{}",
                p.class_name,
                p.image_id,
                p.defect_type.as_deref().unwrap_or(""),
                p.mean_distance,
                p.max_distance
            )?;
        }
    }
    write(&cfg.output_dir.join(SCORES_FILE), &scores)?;
    let report_path = cfg.output_dir.join(REPORT_FILE);
    run.report.write_csv(&report_path)?;

    for (class, m) in run.report.class_means() {
        println!("{class}: mean AUC {m:.4}");
    }
    if let Some(m) = run.report.mean_of_class_means() {
        println!("mean of class means: {m:.4}");
    }
    for a in &run.report.absent {
        println!("{}/{}: absent ({})", a.class_name, a.defect_type, a.reason);
    }
    println!("wrote {}", report_path.display());
    Ok(())
}

pub fn score(cfg: &RunConfig, args: &ScoreArgs) -> Result<()> {
    let net = load_checkpoint(&args.checkpoint)?.net;
    let proto = load_prototype(&args.prototype)?;
    let image = load_and_preprocess(&args.image, cfg.target_side)?;
    let map = distance_map(&net, &image, &proto)?;
    let (mean, max) = score_features(&map);
    create_out(&cfg.output_dir)?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let heatmap = cfg.output_dir.join(format!("{stem}_heatmap.png"));
    export_heatmap(&map, &heatmap)?;
    println!("{mean} {max}");
    eprintln!("wrote {}", heatmap.display());
    Ok(())
}
