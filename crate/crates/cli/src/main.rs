use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use slicefusion::config::ExperimentConfig;
use slicefusion::dataio::{load_split, load_volume, save_labels, Provenance, Split, INDEX_FILE};
use slicefusion::evaluator::{assess, run_config, write_reports, AblationConfig, DefectReport, DiceReport, SegCache};
use slicefusion::phantom::generate_dataset;
use slicefusion::stages::Pipeline;
use slicefusion::trainer::{
    load_stage_checkpoint, prepare_samples, save_stage_checkpoint, train_pipeline, train_ref, train_seg, write_history,
    Adam, HistoryRow, PipelineRunOptions, RunOptions, StageKind, StageMode, TrainedStage,
};
use slicefusion::Error;

const REPORT_DIR_ENV: &str = "SLICEFUSION_REPORT_DIR";
const SEG_CKPT: &str = "seg.ckpt";
const REF_CKPT: &str = "ref.ckpt";
const HISTORY: &str = "history.csv";

#[derive(Parser, Debug)]
#[command(name = "slicefusion", version, about = "Two-stage multi-slice cardiac segmentation experiments")]
struct Cli {
    /// Experiment file (TOML). Without one the desk preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Override the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Seg,
    Ref,
    Both,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset.
    Phantom {
        #[arg(long, default_value_t = 64)]
        n_train: usize,
        #[arg(long, default_value_t = 16)]
        n_test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Seg stage, the Ref stage, or both.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Continue from the checkpoints already in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict labels for one stack directory.
    Infer {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Dice and topology reports of the trained pipeline on the test split.
    Eval {
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configuration listed in the experiment file.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    overwrite: bool,
}

impl Ctx {
    fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.cfg.hash(), seed: self.cfg.seed() }
    }

    fn report_dir(&self) -> PathBuf {
        std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.cfg.paths.report_dir.clone())
    }

    fn refuse_clobber(&self, paths: &[PathBuf]) -> anyhow::Result<()> {
        if self.overwrite {
            return Ok(());
        }
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone())).context("pass --overwrite to replace it");
        }
        Ok(())
    }

    fn model_name(&self) -> String {
        AblationConfig { mode: self.cfg.train.slice_mode, variant: self.cfg.train.variant }.name()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) => 3,
        Some(Error::InvalidConfig(_) | Error::Exists(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let ctx = Ctx { cfg, overwrite: cli.overwrite };
    match cli.cmd {
        Cmd::Phantom { n_train, n_test, out } => cmd_phantom(&ctx, n_train, n_test, &out),
        Cmd::Train { stage, data, checkpoints, resume } => cmd_train(&ctx, stage, data, checkpoints, resume),
        Cmd::Infer { stack, out, checkpoints } => cmd_infer(&ctx, &stack, &out, checkpoints),
        Cmd::Eval { checkpoints, data, out } => cmd_eval(&ctx, checkpoints, data, out),
        Cmd::Ablate { data, out } => cmd_ablate(&ctx, data, out),
    }
}

fn cmd_phantom(ctx: &Ctx, n_train: usize, n_test: usize, out: &Path) -> anyhow::Result<()> {
    ctx.refuse_clobber(&[out.join(INDEX_FILE)])?;
    let index = generate_dataset(&ctx.cfg.phantom, n_train, n_test, out)?;
    println!("wrote {} train and {} test stacks to {}", index.train.len(), index.test.len(), out.display());
    Ok(())
}

fn stage_with_fresh_adam(model: slicefusion::stages::StageModel, lr: f64) -> TrainedStage {
    TrainedStage { adam: Adam::new(lr, &model.params), model, history: Vec::new() }
}

fn cmd_train(ctx: &Ctx, stage: StageArg, data: Option<PathBuf>, ckpt: Option<PathBuf>, resume: bool) -> anyhow::Result<()> {
    let cfg = &ctx.cfg;
    let data = data.unwrap_or_else(|| cfg.paths.dataset_root.clone());
    let dir = ckpt.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
    let (seg_path, ref_path, hist_path) = (dir.join(SEG_CKPT), dir.join(REF_CKPT), dir.join(HISTORY));
    let wants_ref = matches!(stage, StageArg::Ref | StageArg::Both);
    if wants_ref && !cfg.train.variant.has_ref() {
        bail!(Error::InvalidConfig(format!("{} has no Ref stage", ctx.model_name())));
    }
    let mut outputs = vec![hist_path.clone()];
    if matches!(stage, StageArg::Seg | StageArg::Both) {
        outputs.push(seg_path.clone());
    }
    if wants_ref {
        outputs.push(ref_path.clone());
    }
    if !resume {
        ctx.refuse_clobber(&outputs)?;
    }
    let train = load_split(&data, Split::Train).with_context(|| format!("loading training split from {}", data.display()))?;
    let prov = (ctx.cfg.hash(), ctx.cfg.seed());
    let opts = |path: &Path| RunOptions { checkpoint: Some(path.to_path_buf()), resume };
    let mut history: Vec<HistoryRow> = Vec::new();

    if cfg.train.stage_mode == StageMode::Joint {
        if !matches!(stage, StageArg::Both) || resume {
            bail!(Error::InvalidConfig("joint mode trains both stages at once and cannot resume".into()));
        }
        let out = train_pipeline(&train, &cfg.network, &cfg.train, &PipelineRunOptions::default())?;
        let mut seg = stage_with_fresh_adam(out.pipeline.seg, cfg.train.learning_rate);
        seg.history = out.history.clone();
        save_stage_checkpoint(&seg_path, StageKind::Seg, &seg, &cfg.train, cfg.train.epochs)?;
        let mut refine = stage_with_fresh_adam(out.pipeline.refine.expect("joint mode has a Ref stage"), cfg.train.learning_rate);
        refine.history = out.history.clone();
        save_stage_checkpoint(&ref_path, StageKind::Ref, &refine, &cfg.train, cfg.train.epochs)?;
        history = out.history;
    } else {
        let seg = match stage {
            StageArg::Seg | StageArg::Both => {
                let s = train_seg(&train, &cfg.network, &cfg.train, &opts(&seg_path))?;
                history.extend(s.history.iter().cloned());
                s.model
            }
            StageArg::Ref => {
                if !seg_path.exists() {
                    bail!(Error::Dependency(format!(
                        "Ref training needs a trained Seg stage at {}; run `train --stage seg` first",
                        seg_path.display()
                    )));
                }
                let loaded = load_stage_checkpoint(&seg_path)?;
                history.extend(loaded.stage.history.iter().cloned());
                loaded.stage.model
            }
        };
        if wants_ref {
            let r = train_ref(&train, &seg, &cfg.network, &cfg.train, &opts(&ref_path))?;
            history.extend(r.history.iter().cloned());
        }
    }
    write_history(&hist_path, &history, Some((&prov.0, prov.1)))?;
    if let Some(last) = history.last() {
        println!("trained {} epochs; final {} loss {:.5}", last.epoch, last.stage.name(), last.loss_total);
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

fn load_pipeline(ctx: &Ctx, dir: &Path) -> anyhow::Result<Pipeline> {
    let t = &ctx.cfg.train;
    let seg_path = dir.join(SEG_CKPT);
    if !seg_path.exists() {
        bail!(Error::Dependency(format!("no Seg checkpoint at {}", seg_path.display())));
    }
    let seg = load_stage_checkpoint(&seg_path)?.stage.model;
    let refine = if t.variant.has_ref() {
        let p = dir.join(REF_CKPT);
        if !p.exists() {
            bail!(Error::Dependency(format!("no Ref checkpoint at {}", p.display())));
        }
        Some(load_stage_checkpoint(&p)?.stage.model)
    } else {
        None
    };
    let pipeline = Pipeline { mode: t.slice_mode, variant: t.variant, seg, refine };
    pipeline.validate().context("checkpoints do not match the configured variant")?;
    Ok(pipeline)
}

fn cmd_infer(ctx: &Ctx, stack: &Path, out: &Path, ckpt: Option<PathBuf>) -> anyhow::Result<()> {
    ctx.refuse_clobber(&[out.join(slicefusion::dataio::LABELS_FILE)])?;
    let pipeline = load_pipeline(ctx, &ckpt.unwrap_or_else(|| ctx.cfg.paths.checkpoint_dir.clone()))?;
    let volume = load_volume(stack)?;
    if (volume.inplane_spacing_mm() - ctx.cfg.train.target_spacing_mm).abs() > 1e-9 {
        bail!(Error::InvalidStack(format!(
            "stack spacing {} mm differs from the trained {} mm; resample it first",
            volume.inplane_spacing_mm(),
            ctx.cfg.train.target_spacing_mm
        )));
    }
    let pred = pipeline.forward(&volume)?;
    save_labels(&pred.labels, &volume, out, Some(&ctx.provenance()))?;
    println!("wrote {} slices of labels to {}", pred.labels.dims().s, out.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, ckpt: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| ctx.report_dir());
    ctx.refuse_clobber(&[out.join(slicefusion::evaluator::DICE_FILE), out.join(slicefusion::evaluator::DEFECT_FILE)])?;
    let pipeline = load_pipeline(ctx, &ckpt.unwrap_or_else(|| ctx.cfg.paths.checkpoint_dir.clone()))?;
    let data = data.unwrap_or_else(|| ctx.cfg.paths.dataset_root.clone());
    let test = prepare_samples(&load_split(&data, Split::Test)?, &ctx.cfg.train)?;
    let (dice, defects) = assess(&ctx.model_name(), &pipeline, &test)?;
    let hash = ctx.cfg.hash();
    write_reports(&out, &dice, &defects, Some((&hash, ctx.cfg.seed())))?;
    println!("wrote {} Dice rows to {}", dice.rows.len(), out.display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, data: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = &ctx.cfg;
    let out = out.unwrap_or_else(|| ctx.report_dir().join(&cfg.eval.output_dir));
    let spec = cfg.ablation()?;
    let mut outputs = vec![out.join(slicefusion::evaluator::DICE_FILE)];
    outputs.extend(spec.0.iter().map(|c| out.join(c.slug()).join(slicefusion::evaluator::DICE_FILE)));
    ctx.refuse_clobber(&outputs)?;
    let data = data.unwrap_or_else(|| cfg.paths.dataset_root.clone());
    let train = load_split(&data, Split::Train)?;
    let test = load_split(&data, Split::Test)?;
    let hash = cfg.hash();
    let prov = Some((hash.as_str(), cfg.seed()));
    let (mut all_dice, mut all_defects) = (DiceReport::default(), DefectReport::default());
    let mut cache = SegCache::default();
    for c in &spec.0 {
        let r = run_config(*c, &train, &test, &cfg.network, &cfg.train, &mut cache)?;
        write_reports(&out.join(c.slug()), &r.dice, &r.defects, prov)?;
        println!("{}: {} topology defects", c.name(), r.defects.total());
        all_dice.extend(r.dice);
        all_defects.extend(r.defects);
    }
    write_reports(&out, &all_dice, &all_defects, prov)?;
    println!("reports in {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_map_to_one() {
        let e = anyhow::Error::new(Error::InvalidConfig("x".into()));
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&anyhow::Error::new(Error::Divergence { epoch: 2 })), 3);
        assert_eq!(exit_code(&anyhow::Error::new(Error::EmptyDataset("x".into()))), 2);
    }
}
