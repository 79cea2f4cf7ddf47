use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dp3df::bench::{bench, results_csv, BenchInstance};
use dp3df::config::RunConfig;
use dp3df::dp3df::{apply_dp3df, normalize_filters, FilterField, FilterGeometry};
use dp3df::io::{read_container, read_ppm, write_ppm};
use dp3df::predictor::{load_checkpoint, predict, Ablation};
use dp3df::synth::{load_dataset, make_dataset, save_dataset, window, Sequence};
use dp3df::tensor::Tensor;
use dp3df::{gradcheck, trainer, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dp3df", version, about = "Parametric 3D filter video restoration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` run configuration, applied over the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Upscale factor
    #[arg(long, global = true)]
    r: Option<usize>,
    #[arg(long, global = true)]
    kt: Option<usize>,
    #[arg(long, global = true)]
    kh: Option<usize>,
    #[arg(long, global = true)]
    kw: Option<usize>,
    /// full | no_temporal | no_spatial | no_residual
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Worker threads (0 = rayon default)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test dataset
    Synth,
    /// Train a predictor
    Train {
        /// Dataset directory written by `synth` (default: generate in memory)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Restore a frame sequence with a checkpoint or a filter fixture
    Infer {
        /// Directory of PPM frames, or a sequence directory with an `lln/` folder
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "filters")]
        model: Option<PathBuf>,
        /// Container with a `raw` section, or `weights` and `luma` sections
        #[arg(long)]
        filters: Option<PathBuf>,
    },
    /// Report PSNR/SSIM on a test set
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory (default: the configured test split)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck,
    /// Time the filter-application variants
    Bench {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Train and evaluate every ablation with identical settings
    Ablate {
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg.apply_kv(&text)?;
    }
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(r) = c.r {
        cfg.set_r(r);
    }
    let g = &mut cfg.predictor.geom;
    g.kt = c.kt.unwrap_or(g.kt);
    g.kh = c.kh.unwrap_or(g.kh);
    g.kw = c.kw.unwrap_or(g.kw);
    if let Some(a) = &c.ablation {
        cfg.predictor.ablation = a.parse::<Ablation>()?;
    }
    if let Some(t) = c.threads {
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract { op: "threads", detail: e.to_string() })?
        .install(f)
}

fn test_set(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sequence>> {
    match data {
        Some(d) if d.join("test").is_dir() => load_dataset(&d.join("test")),
        Some(d) => load_dataset(d),
        None => make_dataset(&cfg.test_spec()),
    }
}

fn train_set(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Sequence>> {
    match data {
        Some(d) if d.join("train").is_dir() => load_dataset(&d.join("train")),
        Some(d) => load_dataset(d),
        None => make_dataset(&cfg.data),
    }
}

fn read_frames(input: &Path) -> Result<Vec<Tensor<f32>>> {
    let dir = if input.join("lln").is_dir() { input.join("lln") } else { input.to_path_buf() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Io { path: dir.clone(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    paths.iter().map(|p| read_ppm(p)).collect()
}

fn fixture_field(path: &Path, geom: FilterGeometry) -> Result<FilterField<f32>> {
    let mut sections: BTreeMap<String, Tensor<f32>> = read_container(path)?;
    if let Some(raw) = sections.remove("raw") {
        return normalize_filters(&raw, &geom);
    }
    match (sections.remove("weights"), sections.remove("luma")) {
        (Some(w), Some(l)) => FilterField::from_parts(geom, w, l),
        _ => Err(Error::Format {
            kind: "filter fixture",
            detail: "expected a `raw` section or `weights` and `luma` sections".into(),
        }),
    }
}

fn infer(cfg: &RunConfig, out: &Path, input: &Path, model: Option<&Path>, filters: Option<&Path>) -> Result<()> {
    let frames = read_frames(input)?;
    let dirs = ["z", "r", "y"].map(|d| out.join(d));
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(|e| Error::Io { path: d.clone(), source: e })?;
    }
    let (predictor, weights) = match model {
        Some(m) => {
            let (p, w) = load_checkpoint(m)?;
            (Some(p), Some(w))
        }
        None => (None, None),
    };
    let field = match filters {
        Some(f) => Some(fixture_field(f, cfg.predictor.geom)?),
        None if predictor.is_none() => {
            return Err(Error::Contract { op: "infer", detail: "one of --model or --filters is required".into() })
        }
        None => None,
    };
    let n = (predictor.as_ref().map_or(cfg.predictor.geom.frames, |p| p.geom.frames) - 1) / 2;
    for t in 0..frames.len() {
        let clip = window(&frames, t, n)?;
        let (z, r, y) = match (&predictor, &weights, &field) {
            (Some(p), Some(w), _) => {
                let pr = predict(p, w, &clip)?;
                let r = pr.residual.unwrap_or_else(|| Tensor::zeros(pr.z.shape()));
                (pr.z, r, pr.y)
            }
            (_, _, Some(f)) => {
                let z = apply_dp3df(&clip, f)?;
                let y = z.map(|v| v.clamp(0.0, 1.0));
                (z.clone(), Tensor::zeros(z.shape()), y)
            }
            _ => unreachable!(),
        };
        let name = format!("frame_{t:04}.ppm");
        write_ppm(&dirs[0].join(&name), &z)?;
        // residuals are signed; stored offset by one half
        write_ppm(&dirs[1].join(&name), &r.map(|v| v + 0.5))?;
        write_ppm(&dirs[2].join(&name), &y)?;
    }
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth => {
            let cfg = run_config(c)?;
            let out = out_dir(c)?;
            with_threads(cfg.train.threads, || {
                save_dataset(&out.join("train"), &make_dataset(&cfg.data)?)?;
                save_dataset(&out.join("test"), &make_dataset(&cfg.test_spec())?)
            })?;
            write_text(&out.join("run.cfg"), &cfg.to_kv())?;
            println!("dataset written to {}", out.display());
        }
        Command::Train { data, steps } => {
            let mut cfg = run_config(c)?;
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
            }
            cfg.validate()?;
            let out = out_dir(c)?;
            write_text(&out.join("run.cfg"), &cfg.to_kv())?;
            let seqs = with_threads(cfg.train.threads, || train_set(&cfg, data.as_deref()))?;
            let outcome = trainer::train(&cfg.predictor, &cfg.train, &seqs, Some(&out))?;
            if let Some(last) = outcome.log.last() {
                println!("step {} total loss {:.6}", last.step + 1, last.terms.total);
            }
            println!("checkpoint written to {}", out.join("model.dpt").display());
        }
        Command::Infer { input, model, filters } => {
            let cfg = run_config(c)?;
            let out = out_dir(c)?;
            with_threads(cfg.train.threads, || infer(&cfg, &out, input, model.as_deref(), filters.as_deref()))?;
        }
        Command::Eval { model, data } => {
            let cfg = run_config(c)?;
            with_threads(cfg.train.threads, || -> Result<()> {
                let seqs = test_set(&cfg, data.as_deref())?;
                let baseline = trainer::evaluate_baseline(&seqs)?;
                let report = match model {
                    Some(m) => {
                        let (p, w) = load_checkpoint(m)?;
                        Some(trainer::evaluate(&p, &w, &seqs)?)
                    }
                    None => None,
                };
                println!("baseline\n{}", baseline.to_table());
                if let Some(r) = &report {
                    println!("model\n{}", r.to_table());
                }
                if let Some(dir) = &c.out {
                    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                    write_text(&dir.join("baseline_metrics.csv"), &baseline.to_csv())?;
                    if let Some(r) = &report {
                        write_text(&dir.join("metrics.csv"), &r.to_csv())?;
                    }
                }
                Ok(())
            })?;
        }
        Command::Gradcheck => {
            let seed = c.seed.unwrap_or(0);
            let report = gradcheck::run_suite(seed)?;
            println!("{}", report.to_table());
            return Ok(report.passed());
        }
        Command::Bench { size, frames, k, repeats } => {
            let threads = c.threads.unwrap_or(4).max(1);
            let inst = BenchInstance { height: *size, width: *size, frames: *frames, r: c.r.unwrap_or(4), k: *k, channels: 3 };
            let results = bench(&[inst], threads, *repeats, c.seed.unwrap_or(0))?;
            let csv = results_csv(&results);
            print!("{csv}");
            if let Some(dir) = &c.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                write_text(&dir.join("bench.csv"), &csv)?;
            }
            return Ok(results.iter().all(|r| r.passed_gate()));
        }
        Command::Ablate { steps } => {
            let mut cfg = run_config(c)?;
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
            }
            cfg.validate()?;
            let out = out_dir(c)?;
            let train = with_threads(cfg.train.threads, || make_dataset(&cfg.data))?;
            let test = with_threads(cfg.train.threads, || make_dataset(&cfg.test_spec()))?;
            let mut csv = String::from("variant,psnr,ssim\n");
            for a in Ablation::ALL {
                let p = cfg.predictor.clone().with_ablation(a);
                let outcome = trainer::train(&p, &cfg.train, &train, Some(&out.join(a.name())))?;
                let report = with_threads(cfg.train.threads, || trainer::evaluate(&p, &outcome.weights, &test))?;
                let (psnr, ssim) = report.mean().ok_or(Error::EmptyDataset)?;
                csv.push_str(&format!("{},{psnr:.4},{ssim:.4}\n", a.name()));
            }
            write_text(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
