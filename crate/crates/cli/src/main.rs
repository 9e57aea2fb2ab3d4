use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use neurogeom::completion::{closure_score, complete, CompletionConfig};
use neurogeom::experiments::{experiment, merge_json, overlay, ContrastConfig, ExperimentReport, RunContext, EXPERIMENTS};
use neurogeom::filtering::{lift_image, GaborBank};
use neurogeom::io::{
    load_png_grayscale, save_overlay_png, save_png_grayscale, write_field, write_json, FieldMetadata, NgfField,
};
use neurogeom::kernels::{v1_kernel, FokkerPlanckSpec, Kernel2D, Kernel3D};
use neurogeom::spectral::{group, GroupingConfig, UnitRecord};
use neurogeom::statistics::{corpus_histogram_from_paths, corpus_paths, elongation, k_diag, k_hor, project_max_theta, StatsConfig};
use neurogeom::stimuli::{gen_contrast, gen_kanizsa, KanizsaSpec, Shape};
use neurogeom::{Error, Result, ScalarField2D};

#[derive(Parser)]
#[command(name = "neurogeom", version, about = "Neurogeometric perception models: lifting, grouping, completion")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// JSON config merged over the defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lift an image to an orientation score.
    Lift {
        #[arg(long)]
        input: PathBuf,
        /// Output NGF file (complex, width × height × orientations).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
    },
    /// Group lifted points into perceptual units.
    Group {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        solver: Option<String>,
        #[command(flatten)]
        bank: BankArgs,
    },
    /// Staged contour and brightness completion.
    Complete {
        /// Input PNG; omit to generate a Kanizsa figure.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "square")]
        shape: Shape,
        #[arg(long, default_value_t = 0.0)]
        misalign: f64,
        /// Subsamples per pixel axis of the generated figure.
        #[arg(long, default_value_t = 8)]
        supersample: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Closure threshold, relative to the 99th percentile of |A|.
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[command(flatten)]
        bank: BankArgs,
    },
    /// Edge co-occurrence statistics of a PNG corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate a Kanizsa square or diamond.
    Kanizsa {
        #[arg(long, default_value = "square")]
        shape: Shape,
        #[arg(long, default_value_t = 0.0)]
        misalign: f64,
        #[arg(long)]
        out: PathBuf,
        /// Ideal illusory contour and inducer edges as JSON.
        #[arg(long)]
        contour: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        supersample: usize,
    },
    /// Simultaneous-contrast demo through the LGN pipeline.
    ContrastDemo {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the stimulus here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Square and diamond at 0, 6 and 12 degrees of misalignment.
    ObliqueSuite {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        supersample: Option<usize>,
    },
    /// First perceptual unit on Kanizsa figures.
    GroupingDemo {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print an experiment's default config.
    Config { experiment: String },
}

#[derive(Args)]
struct RunArgs {
    /// Directory for report.json and figures.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long, default_value_t = 16)]
    n_theta: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 6)]
    support_radius: usize,
}

impl BankArgs {
    fn bank(&self) -> Result<GaborBank> {
        GaborBank::new(self.n_theta, self.sigma, self.support_radius)
    }

    fn kernel(&self) -> Result<Kernel3D> {
        let spec = FokkerPlanckSpec {
            n_theta: self.n_theta,
            ..FokkerPlanckSpec::default()
        };
        Ok(Kernel3D::GroupStationary(v1_kernel(&spec)?))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            log::warn!("worker cap not applied: {e}");
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else { return Ok(Value::Null) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: &Cli) -> Result<bool> {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Lift { input, out, bank } => {
            let img = load_png_grayscale(input)?;
            let bank = bank.bank()?;
            let lift = lift_image(&img, &bank)?;
            let meta = FieldMetadata::new(format!("lift of {}", input.display()))
                .with_n_theta(bank.n_theta())
                .with_extra("gaborSigma", bank.sigma());
            write_field(out, &NgfField::from(&lift), &meta)?;
            println!("lifted {}x{}x{} -> {}", lift.width(), lift.height(), lift.n_theta(), out.display());
            Ok(true)
        }
        Command::Group { input, out_dir, units, solver, bank } => {
            create_dir(out_dir)?;
            let img = load_png_grayscale(input)?;
            let mut cfg: GroupingConfig = overlay(GroupingConfig::default(), &config)?;
            if let Some(n) = units {
                cfg.n_units = *n;
            }
            if let Some(s) = solver {
                cfg.solver = s.clone();
            }
            let lift = lift_image(&img, &bank.bank()?)?;
            let g = group(&lift, &bank.kernel()?, &cfg, cli.seed)?;
            let records: Vec<UnitRecord> = g.units.iter().map(|u| UnitRecord::new(u, &g.support)).collect();
            write_json(out_dir.join("units.json"), &records)?;
            save_overlay_png(out_dir.join("overlay.png"), &img, &g.unit_pixels(0))?;
            for (i, u) in g.units.iter().enumerate() {
                println!("unit {} saliency {:.6} members {}", i + 1, u.saliency, u.members.len());
            }
            Ok(true)
        }
        Command::Complete {
            input,
            shape,
            misalign,
            supersample,
            out_dir,
            mode,
            epsilon,
            tau,
            bank,
        } => {
            create_dir(out_dir)?;
            let (img, contour) = match input {
                Some(p) => (load_png_grayscale(p)?, None),
                None => {
                    let stim = gen_kanizsa(&KanizsaSpec {
                        shape: *shape,
                        misalign_degrees: *misalign,
                        supersample: *supersample,
                        ..KanizsaSpec::default()
                    })?;
                    (stim.image, Some(stim.contour))
                }
            };
            let mut cfg: CompletionConfig = overlay(CompletionConfig::default(), &config)?;
            if let Some(m) = mode {
                cfg.mode = m.clone();
            }
            if let Some(e) = epsilon {
                cfg.epsilon = *e;
            }
            let r = complete(&img, &cfg, &bank.kernel()?, &bank.bank()?, cli.seed)?;
            save_png_grayscale(out_dir.join("b.png"), &r.b, 0.0, 1.0)?;
            let meta = FieldMetadata::new("completion").with_spacing(cfg.spacing);
            write_field(out_dir.join("u.ngf"), &NgfField::from(&r.u), &meta)?;
            write_field(out_dir.join("A.ngf"), &NgfField::from(&r.a), &meta)?;
            let last = r.diagnostics.stages.last();
            let closure = contour.as_ref().map(|c| closure_score(&r, c, *tau)).transpose()?;
            let diag = json!({
                "L1": last.map(|s| s.l1),
                "L2": last.map(|s| s.l2),
                "L3": last.map(|s| s.l3),
                "closure": closure,
                "tau": tau,
                "stages": r.diagnostics.stages,
                "degenerate": r.diagnostics.degenerate,
                "maskUnits": r.diagnostics.mask_units,
                "maskPixels": r.diagnostics.mask_pixels,
            });
            write_json(out_dir.join("diagnostics.json"), &diag)?;
            match closure {
                Some(c) => println!("closure {c:.4}"),
                None => println!("completed {}x{}", img.width(), img.height()),
            }
            Ok(true)
        }
        Command::Stats {
            corpus,
            out_dir,
            radius,
            threshold,
        } => {
            create_dir(out_dir)?;
            let mut cfg: StatsConfig = overlay(StatsConfig::default(), &config)?;
            if let Some(r) = radius {
                cfg.radius = *r;
            }
            if let Some(t) = threshold {
                cfg.nms_threshold = *t;
            }
            let paths = corpus_paths(corpus)?;
            let h = corpus_histogram_from_paths(&paths, &cfg)?;
            write_field(
                out_dir.join("histogram.ngf"),
                &h.to_ngf(),
                &FieldMetadata::new("edge co-occurrence histogram").with_n_theta(h.n_theta()),
            )?;
            let (kh, kd) = (k_hor(&h)?, k_diag(&h)?);
            let (eh, ed) = (elongation(&kh)?, elongation(&kd)?);
            save_kernel_png(&out_dir.join("k_hor.png"), &project_max_theta(&kh))?;
            save_kernel_png(&out_dir.join("k_diag.png"), &project_max_theta(&kd))?;
            write_json(
                out_dir.join("stats.json"),
                &json!({
                    "images": paths.len(),
                    "totalPairs": h.total_pairs(),
                    "elongationHorizontal": eh,
                    "elongationDiagonal": ed,
                    "config": cfg,
                }),
            )?;
            println!("{} images, elongation horizontal {eh:.4} diagonal {ed:.4}", paths.len());
            Ok(true)
        }
        Command::Kanizsa {
            shape,
            misalign,
            out,
            contour,
            supersample,
        } => {
            let spec = KanizsaSpec {
                shape: *shape,
                misalign_degrees: *misalign,
                supersample: *supersample,
                ..overlay(KanizsaSpec::default(), &config)?
            };
            let stim = gen_kanizsa(&spec)?;
            save_png_grayscale(out, &stim.image, 0.0, 1.0)?;
            if let Some(path) = contour {
                write_json(
                    path,
                    &json!({
                        "spec": spec,
                        "contour": stim.contour,
                        "inducers": stim.inducer_points,
                    }),
                )?;
            }
            Ok(true)
        }
        Command::ContrastDemo { run, out } => {
            if let Some(path) = out {
                let cfg: ContrastConfig = overlay(ContrastConfig::default(), &config)?;
                save_png_grayscale(path, &gen_contrast(&cfg.stimulus)?, 0.0, 1.0)?;
            }
            run_experiment(cli, "contrast-demo", config, run)
        }
        Command::ObliqueSuite {
            run,
            epsilon,
            tau,
            cutoff,
            supersample,
        } => {
            let mut flags = json!({});
            if let Some(e) = epsilon {
                flags["completion"] = json!({ "epsilon": e });
            }
            if let Some(t) = tau {
                flags["tau"] = json!(t);
            }
            if let Some(c) = cutoff {
                flags["cutoff"] = json!(c);
            }
            if let Some(s) = supersample {
                flags["stimulus"] = json!({ "supersample": s });
            }
            let mut merged = config;
            if merged.is_null() {
                merged = json!({});
            }
            merge_json(&mut merged, &flags);
            run_experiment(cli, "oblique-suite", merged, run)
        }
        Command::GroupingDemo { run } => run_experiment(cli, "grouping-demo", config, run),
        Command::Config { experiment: name } => {
            let text = serde_json::to_string_pretty(&experiment(name)?.default_config())?;
            println!("{text}");
            Ok(true)
        }
    }
}

fn save_kernel_png(path: &Path, k: &Kernel2D) -> Result<()> {
    let side = 2 * k.radius() + 1;
    let field = ScalarField2D::new(side, side, 1.0, k.weights().to_vec())?;
    save_png_grayscale(path, &field, 0.0, k.max_weight())
}

fn run_experiment(cli: &Cli, id: &str, overrides: Value, args: &RunArgs) -> Result<bool> {
    debug_assert!(EXPERIMENTS.contains(id));
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
    }
    let ctx = RunContext {
        seed: cli.seed,
        workers: cli.workers,
        out_dir: args.out_dir.clone(),
    };
    let report = experiment(id)?.run(&overrides, &ctx)?;
    if let Some(dir) = &args.out_dir {
        write_json(dir.join("report.json"), &report)?;
    }
    print_report(&report);
    Ok(report.passed())
}

fn print_report(r: &ExperimentReport) {
    for c in &r.cells {
        match &c.error {
            Some(e) => println!("cell {}: failed: {e}", c.name),
            None => {
                let m: Vec<String> = c.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("cell {}: {}", c.name, m.join(" "));
            }
        }
    }
    for e in &r.expectations {
        println!("[{}] {} ({})", if e.met { "PASS" } else { "FAIL" }, e.name, e.detail);
    }
    println!("{}: {} in {:.1}s", r.id, if r.passed() { "all expectations met" } else { "expectations not met" }, r.wall_time_secs);
}
