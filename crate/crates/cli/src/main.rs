use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use radar_hqnn::experiment::{
    cmd_ablate, cmd_eval, cmd_render_scene, cmd_report, cmd_simulate, cmd_train, derived_table, ExperimentConfig,
    ExperimentError,
};
use radar_hqnn::model::VariantKind;
use radar_hqnn::scatter::{plate_rcs_normal, po_backscatter, rcs_from_coefficients, Aperture, PlaneWave};

#[derive(Parser, Debug)]
#[command(name = "radar-hqnn", version, about = "Indoor occupancy radar: simulation, hybrid training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single seed: dataset seed for `simulate`, model seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    snrs: Option<Vec<f64>>,
    #[arg(long, global = true)]
    noise_seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    fraction: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Option<Vec<String>>,
    /// `analytic`, `shots` (4096) or `shots-<n>`.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// `simulate` only: render a TOML scene file instead of the dataset.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    frames_per_cell: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Simulate,
    /// Train variants on the training split.
    Train,
    /// Evaluate trained checkpoints on the clean and noisy test split.
    Eval,
    /// Label-fraction ablation.
    Ablate,
    /// Aggregate evaluation results across seeds.
    Report,
    /// Built-in physics checks.
    Selftest {
        #[arg(value_enum, default_value = "po-plate")]
        check: SelfTest,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SelfTest {
    PoPlate,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(s) = cli.seed {
        match cli.command {
            Command::Simulate => cfg.dataset_seed = s,
            _ => cfg.seeds = vec![s],
        }
    }
    if let Some(s) = &cli.snrs {
        cfg.snrs_db = s.clone();
    }
    if let Some(s) = cli.noise_seed {
        cfg.noise_seed = s;
    }
    if let Some(f) = &cli.fraction {
        cfg.fractions = f.clone();
    }
    if let Some(v) = &cli.variant {
        cfg.variants = v.clone();
    }
    if let Some(m) = &cli.mode {
        cfg.mode = m.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(e) = cli.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = cli.frames_per_cell {
        cfg.frames_per_cell = n;
        cfg.sequences_per_cell = cfg.sequences_per_cell.min(n.max(2));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn po_plate() -> Result<(), String> {
    let lambda = 299_792_458.0 / 60e9;
    let side = 10.0 * lambda;
    let wave = PlaneWave::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), 0.0, std::f64::consts::FRAC_PI_2, lambda);
    let ap = Aperture::illuminated(&wave, side, side, lambda / 8.0);
    let (at, ap_) = po_backscatter(&ap, 0.0, std::f64::consts::FRAC_PI_2, wave.k0).map_err(|e| e.to_string())?;
    let rcs = rcs_from_coefficients(at, ap_);
    let expected = plate_rcs_normal(side, lambda);
    let rel = (rcs - expected).abs() / expected;
    println!("po-plate: side {side:.4} m, rcs {rcs:.6} m^2, closed form {expected:.6} m^2, rel err {rel:.2e}");
    if rel <= 0.01 {
        Ok(())
    } else {
        Err(format!("relative error {rel:.3e} above 1%"))
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Simulate => {
            if let Some(scene) = &cli.scene {
                let records = cmd_render_scene(&cfg, scene)?;
                println!("rendered {} frames to {}", records.len(), cfg.out_dir.join("scene").display());
                return Ok(());
            }
            let out = cmd_simulate(&cfg)?;
            print!("{}", derived_table(&out.derived));
            println!(
                "wrote {} frames to {} in {:.1} s",
                out.records.len(),
                cfg.dataset_dir().display(),
                out.wall_clock_s
            );
        }
        Command::Train => {
            let fraction = cli.fraction.as_ref().and_then(|f| f.first().copied()).unwrap_or(1.0);
            for v in cfg.variant_kinds()? {
                for &seed in &cfg.seeds {
                    let out = cmd_train(&cfg, v, seed, fraction)?;
                    let last = out.report.epochs.last();
                    println!(
                        "{v} seed {seed}: {} frames, final loss {:.4}, train acc {:.3}, {:.1} s, {} circuit evals -> {}",
                        out.train_size,
                        last.map_or(f64::NAN, |e| e.loss),
                        last.map_or(f64::NAN, |e| e.acc),
                        out.report.wall_clock_s,
                        out.report.pqc_evals,
                        out.checkpoint.display()
                    );
                }
            }
        }
        Command::Eval => {
            let out = cmd_eval(&cfg)?;
            for r in &out.rows {
                println!("{}", r.csv_row());
            }
            println!("noise identity verified for {} (file, snr) pairs", out.registry.hashes.len());
        }
        Command::Ablate => {
            let out = cmd_ablate(&cfg)?;
            println!("{} ablation runs written to {}", out.rows.len(), cfg.out_dir.join("ablation").display());
            if out.non_monotone.contains(&VariantKind::CompactCnn) {
                println!("warning: compact-cnn median BA is not monotone in the label fraction");
            }
        }
        Command::Report => {
            let out = cmd_report(&cfg)?;
            let summary = cfg.out_dir.join("report").join("summary.txt");
            match std::fs::read_to_string(&summary) {
                Ok(s) => print!("{s}"),
                Err(_) => println!("{} summary rows", out.rows.len()),
            }
        }
        Command::Selftest { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Command::Selftest { check: SelfTest::PoPlate } = cli.command {
        return match po_plate() {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: po-plate self-test failed: {e}");
                ExitCode::from(3)
            }
        };
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
