use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wsseg::datapipe::{format_precision_table, label_precision_report, load_real_dataset, write_corpus, CorpusConfig};
use wsseg::driver::{
    ablation_grid, evaluate, label_bundle, parse_cell, predict, render_overlay, train, write_ablation_csv, LabelMode,
    LossMode, RunConfig,
};
use wsseg::losses::gradcheck::{finite_diff_check, random_instance, LossKind, DEFAULT_STEP};
use wsseg::tinynet::{parameter_probe_check, Checkpoint};
use wsseg::{MaskGrid, Raster};

#[derive(Parser)]
#[command(name = "wsseg", version, about = "Weakly supervised nodule segmentation from extreme-point annotations")]
struct Cli {
    /// Relative output paths are resolved against this directory.
    #[arg(long, global = true, env = "WSSEG_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/ and test/ splits.
    GenData {
        /// JSON or TOML corpus config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Build pseudo-labels for a split and print their precision table.
    GenLabels {
        /// Split directory (images/, masks/, promptmasks/, annotations.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "H")]
        mode: String,
        /// Where to write location/foreground/background PNGs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic loss and network gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: u64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 24)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        probe_tolerance: f64,
    },
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split without annotations or prompts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of label/loss modes over several seeds.
    Ablate {
        #[command(flatten)]
        run: TrainArgs,
        /// Cells as <loss><label index>, e.g. P3,A3,E3.
        #[arg(long, value_delimiter = ',', default_value = "P3,A3,E3")]
        cells: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Sweep of contrastive weights; each value adds a block of rows.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Sweep of correlation weights.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, default_value = "ablation.csv")]
        csv: PathBuf,
    },
    /// Write prediction overlays (red hit, green miss, blue false alarm).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON or TOML run config; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    /// Optimizer steps per loss curriculum stage (0 trains all terms jointly).
    curriculum_stage_steps: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    label_mode: Option<String>,
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, root: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        macro_rules! set {
            ($($flag:ident => $field:expr),*) => {$(
                if let Some(v) = self.$flag { $field = v; }
            )*};
        }
        set!(epochs => cfg.epochs, batch_size => cfg.batch_size, lr => cfg.lr, curriculum_stage_steps => cfg.curriculum_stage_steps,
             lambda => cfg.weights.lambda, beta => cfg.weights.beta, seed => cfg.seed,
             train_size => cfg.synth.train, test_size => cfg.synth.test);
        if let Some(m) = &self.label_mode {
            cfg.label_mode = m.parse::<LabelMode>()?;
        }
        if let Some(m) = &self.loss_mode {
            cfg.loss_mode = m.parse::<LossMode>()?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.output_dir = cfg.output_dir.map(|d| rooted(root, &d));
        cfg.validate()?;
        Ok(cfg)
    }
}

fn rooted(root: Option<&Path>, path: &Path) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    } else {
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}

fn load_split(dir: &Path) -> Result<(Vec<Raster>, Vec<MaskGrid>, Vec<String>)> {
    let samples = load_real_dataset(dir)?;
    if samples.is_empty() {
        bail!("no usable samples under {}", dir.display());
    }
    // only images and ground truth cross into inference
    Ok(samples.into_iter().map(|s| (s.image, s.gt, s.id)).fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut i, mut g, mut n), (a, b, c)| {
            i.push(a);
            g.push(b);
            n.push(c);
            (i, g, n)
        },
    ))
}

fn run_gradcheck(instances: u64, step: f64, tolerance: f64, probes: usize, probe_tolerance: f64) -> Result<bool> {
    let mut ok = true;
    for kind in LossKind::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..instances {
            let report = finite_diff_check(kind, &random_instance(seed), step, seed)?;
            worst = worst.max(report.max_rel_error);
        }
        let pass = worst < tolerance;
        ok &= pass;
        println!("{:<24} max rel error {worst:.3e}  {}", kind.name(), if pass { "ok" } else { "FAIL" });
    }
    let worst = parameter_probe_check(0, probes)?;
    let pass = worst < probe_tolerance;
    ok &= pass;
    println!("{:<24} max rel error {worst:.3e}  {}", "network parameters", if pass { "ok" } else { "FAIL" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::GenData {
            config,
            out,
            train,
            test,
            seed,
            size,
        } => {
            let mut cfg: CorpusConfig = match config {
                Some(p) => load_config(&p)?,
                None => CorpusConfig::default(),
            };
            cfg.train = train.unwrap_or(cfg.train);
            cfg.test = test.unwrap_or(cfg.test);
            cfg.synth.seed = seed.unwrap_or(cfg.synth.seed);
            cfg.synth.size = size.unwrap_or(cfg.synth.size);
            let out = rooted(root, &out);
            write_corpus(&out, &cfg)?;
            println!("wrote {} train and {} test samples to {}", cfg.train, cfg.test, out.display());
        }
        Command::GenLabels { data, mode, out } => {
            let mode: LabelMode = mode.parse()?;
            let samples = load_real_dataset(&data)?;
            if samples.is_empty() {
                bail!("no usable samples under {}", data.display());
            }
            if let Some(out) = out.map(|o| rooted(root, &o)) {
                std::fs::create_dir_all(&out)?;
                for s in &samples {
                    let b = label_bundle(s, mode)?;
                    b.location.save(&out.join(format!("{}_location.png", s.id)))?;
                    b.foreground.save(&out.join(format!("{}_foreground.png", s.id)))?;
                    b.background.save(&out.join(format!("{}_background.png", s.id)))?;
                }
                let rows = label_precision_report(&samples)?;
                std::fs::write(out.join("precision.json"), serde_json::to_string_pretty(&rows)?)?;
            }
            print!("{}", format_precision_table(&label_precision_report(&samples)?));
        }
        Command::Gradcheck {
            instances,
            step,
            tolerance,
            probes,
            probe_tolerance,
        } => return run_gradcheck(instances, step, tolerance, probes, probe_tolerance),
        Command::Train(args) => {
            let cfg = args.resolve(root)?;
            let out = train(&cfg)?;
            let best = out.history.best();
            println!(
                "best epoch {}: mIoU {:.4} DSC {:.4} precision {:.4} HD95 {:.3} ({:.1}s)",
                best.epoch,
                best.validation.summary.miou.mean,
                best.validation.summary.dsc.mean,
                best.validation.summary.precision.mean,
                best.validation.summary.hd95.mean,
                out.history.wall_time_secs
            );
            println!("history fingerprint {}", out.history.fingerprint());
            if cfg.output_dir.is_none() {
                log::warn!("no output directory set; checkpoint not written");
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let params = Checkpoint::load(&checkpoint)?.params()?;
            let (images, gts, _) = load_split(&data)?;
            let report = evaluate(&params, &images, &gts)?;
            if let Some(out) = out.map(|o| rooted(root, &o)) {
                std::fs::create_dir_all(&out)?;
                report.write_csv(&out.join("metrics.csv"))?;
                report.write_summary_json(&out.join("summary.json"))?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary_json())?);
        }
        Command::Ablate {
            run,
            cells,
            seeds,
            lambdas,
            betas,
            csv,
        } => {
            let base = run.resolve(root)?;
            let cells = cells.iter().map(|c| parse_cell(c)).collect::<wsseg::Result<Vec<_>>>()?;
            let lambdas = if lambdas.is_empty() { vec![base.weights.lambda] } else { lambdas };
            let betas = if betas.is_empty() { vec![base.weights.beta] } else { betas };
            let mut rows = Vec::new();
            for &lambda in &lambdas {
                for &beta in &betas {
                    let mut cfg = base.clone();
                    cfg.weights.lambda = lambda;
                    cfg.weights.beta = beta;
                    if lambdas.len() * betas.len() > 1 {
                        cfg.output_dir = cfg.output_dir.map(|d| d.join(format!("lambda{lambda}_beta{beta}")));
                    }
                    rows.extend(ablation_grid(&cfg, &cells, &seeds)?);
                }
            }
            let csv = rooted(root, &csv);
            if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_ablation_csv(&csv, &rows)?;
            println!("{:<8} {:>6} {:>6} {:>16} {:>16} {:>16} {:>14}", "method", "lambda", "beta", "mIoU (%)", "DSC (%)", "Precision (%)", "HD95");
            for r in &rows {
                println!(
                    "{:<8} {:>6} {:>6} {:>16} {:>16} {:>16} {:>14}",
                    r.method,
                    r.lambda,
                    r.beta,
                    format!("{:.2}±{:.2}", 100.0 * r.miou_mean, 100.0 * r.miou_std),
                    format!("{:.2}±{:.2}", 100.0 * r.dsc_mean, 100.0 * r.dsc_std),
                    format!("{:.2}±{:.2}", 100.0 * r.precision_mean, 100.0 * r.precision_std),
                    format!("{:.2}±{:.2}", r.hd95_mean, r.hd95_std)
                );
            }
        }
        Command::Render {
            checkpoint,
            data,
            out,
            limit,
        } => {
            let params = Checkpoint::load(&checkpoint)?.params()?;
            let (mut images, mut gts, mut ids) = load_split(&data)?;
            if let Some(n) = limit {
                images.truncate(n);
                gts.truncate(n);
                ids.truncate(n);
            }
            let out = rooted(root, &out);
            std::fs::create_dir_all(&out)?;
            for ((img, gt), (pred, id)) in images.iter().zip(&gts).zip(predict(&params, &images)?.iter().zip(&ids)) {
                render_overlay(img, &pred.binarize(0.5), gt, &out.join(format!("{id}_overlay.png")))?;
            }
            println!("wrote {} overlays to {}", ids.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
