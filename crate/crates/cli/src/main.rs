use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use conelab::geometry::DiffeoMap;
use conelab::harness::{self, parse_angle, DomainCase, ExperimentConfig, ExperimentOutput};

#[derive(Parser)]
#[command(name = "conelab", version, about = "Blow-up solutions near conical boundary points")]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for CSV, JSON and .dat outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid size override for the selected command.
    #[arg(long, global = true)]
    resolution: Option<usize>,
    /// Print the reports as JSON instead of PASS/FAIL lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SphereDomain {
    Cap,
    Lune,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Opening angle, e.g. `pi/3` or `1.047`.
    #[arg(long, default_value = "pi/3")]
    alpha: String,
    /// `identity`, `example1:<c>` or `ball:<R>`.
    #[arg(long, default_value = "example1:0.05")]
    map: String,
    #[arg(long, default_value_t = 1e-6)]
    r_in: f64,
    #[arg(long, default_value_t = 0.5)]
    r_out: f64,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Planar wedge profile.
    Wedge {
        #[arg(long, default_value = "pi/2")]
        alpha: String,
    },
    /// Rotational cap profile.
    Cap {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value = "pi/3")]
        alpha: String,
    },
    /// Two-dimensional profile on a cap or lune of the sphere.
    Sphere {
        #[arg(long, value_enum, default_value_t = SphereDomain::Lune)]
        domain: SphereDomain,
        #[arg(long, default_value = "pi/2")]
        alpha: String,
    },
    /// Eigenpairs of the linearized operator on a cap.
    Eigen {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value = "pi/2")]
        alpha: String,
        /// Azimuthal mode.
        #[arg(long, default_value_t = 0)]
        mode: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// First-order expansion coefficient of a map (n = 3).
    Coeff {
        #[arg(long, default_value = "pi/2")]
        alpha: String,
        #[arg(long, default_value = "ball:1")]
        map: String,
    },
    /// Radial solution on a ball.
    Ball {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
    },
    /// One bracketed solve on a perturbed cone.
    Solve(CaseArgs),
    /// Ratio rate near the conical point.
    Thm1,
    /// Remainder rate after the first-order term.
    Thm2,
    /// Thin-wedge ratio sweep.
    Ex51,
    /// Boundary behaviour of the source term and the coefficient.
    Ex52,
    /// thm1, thm2, ex51 and ex52.
    All,
}

fn angle(s: &str) -> Result<f64> {
    Ok(parse_angle(s)?)
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: &Cli) -> Result<Vec<ExperimentOutput>> {
    let mut config = load_config(cli.config.as_ref())?;
    let res = cli.resolution;
    let profile_n = res.unwrap_or(config.profile_resolution);
    let outputs = match &cli.command {
        Command::Wedge { alpha } => vec![harness::run_wedge(&config, angle(alpha)?, res.unwrap_or(512))?],
        Command::Cap { n, alpha } => vec![harness::run_cap(&config, *n, angle(alpha)?, profile_n)?],
        Command::Sphere { domain, alpha } => vec![harness::run_sphere(
            &config,
            matches!(domain, SphereDomain::Lune),
            angle(alpha)?,
            res.unwrap_or(256),
        )?],
        Command::Eigen { n, alpha, mode, count } => {
            vec![harness::run_eigen(&config, *n, angle(alpha)?, *mode, *count, profile_n)?]
        }
        Command::Coeff { alpha, map } => {
            let map = DiffeoMap::from_name(map, 3)?;
            vec![harness::run_coeff(&config, &map, angle(alpha)?, profile_n)?]
        }
        Command::Ball { n, s } => vec![harness::run_ball(&config, *n, *s, res.unwrap_or(512))?],
        Command::Solve(a) => {
            if let Some(r) = res {
                config.meridian_resolution = r;
            }
            let case = DomainCase {
                label: "solve".into(),
                n: a.n,
                alpha: angle(&a.alpha)?,
                map: a.map.clone(),
                r_in: a.r_in,
                r_out: a.r_out,
                eps_out: a.eps,
            };
            vec![harness::run_solve(&config, &case)?]
        }
        Command::Thm1 | Command::Thm2 | Command::All => {
            if let Some(r) = res {
                config.meridian_resolution = r;
            }
            config.validate()?;
            match cli.command {
                Command::Thm1 => vec![harness::run_theorem1(&config)?],
                Command::Thm2 => vec![harness::run_theorem2(&config)?],
                _ => harness::run_all(&config)?,
            }
        }
        Command::Ex51 => {
            if let Some(r) = res {
                config.example51.resolution = r;
            }
            vec![harness::run_example51(&config)?]
        }
        Command::Ex52 => {
            if let Some(r) = res {
                config.profile_resolution = r;
            }
            vec![harness::run_example52(&config)?]
        }
    };
    Ok(outputs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outputs = match run(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(dir) = &cli.out {
        for o in &outputs {
            if let Err(e) = harness::write_outputs(o, dir) {
                eprintln!("error: writing outputs: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    if cli.json {
        let reports: Vec<_> = outputs.iter().map(|o| &o.report).collect();
        match serde_json::to_string_pretty(&reports) {
            Ok(s) => {
                let _ = writeln!(stdout, "{s}");
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    } else {
        for o in &outputs {
            let _ = write!(stdout, "{}", o.report.summary());
        }
    }
    if outputs.iter().all(|o| o.report.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch_dir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("conelab-cli-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("conelab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn profile_commands_pass_and_write_files() {
        let dir = scratch_dir("profiles");
        for args in [
            vec!["wedge", "--alpha", "pi", "--resolution", "128"],
            vec!["cap", "--alpha", "pi/2", "--resolution", "128"],
            vec!["ball", "--n", "4", "--s", "0.5", "--resolution", "64"],
            vec!["eigen", "--count", "2", "--resolution", "128"],
            vec!["coeff", "--map", "ball:1", "--resolution", "64"],
            vec!["sphere", "--domain", "cap", "--alpha", "pi/3", "--resolution", "64"],
        ] {
            let cli = parse(&args);
            let out = run(&cli).unwrap();
            assert!(out.iter().all(|o| o.report.passed()), "{args:?}: {}", out[0].report.summary());
            for o in &out {
                harness::write_outputs(o, &dir).unwrap();
            }
        }
        for f in ["wedge.csv", "wedge.dat", "wedge.json", "cap.json", "ball.csv", "eigen.dat", "coeff.csv", "sphere_rho.csv"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("wedge.json")).unwrap()).unwrap();
        assert_eq!(report["experiment"], "wedge");
        assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn config_file_drives_the_theorem_run() {
        let dir = scratch_dir("config");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cone.json");
        std::fs::write(
            &path,
            r#"{"name": "cone", "meridian_resolution": 32, "profile_resolution": 64,
                "theorem1": [{"label": "cone", "alpha": "pi/3", "map": "identity", "r_in": 1e-3, "eps_out": 0.0}]}"#,
        )
        .unwrap();
        let cli = parse(&["thm1", "--config", path.to_str().unwrap()]);
        let out = run(&cli).unwrap();
        assert!(out[0].report.passed(), "{}", out[0].report.summary());
        assert_eq!(out[0].report.criteria.last().unwrap().detail, "ratio at noise floor");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(run(&parse(&["wedge", "--alpha", "sideways"])).is_err());
        assert!(Cli::try_parse_from(["conelab", "nonsense"]).is_err());
        let dir = scratch_dir("bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, r#"{"meridian_resolution": 30}"#).unwrap();
        assert!(run(&parse(&["thm1", "--config", path.to_str().unwrap()])).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn thin_wedge_sweep_reports_a_failure() {
        let out = run(&parse(&["ex51", "--resolution", "64"])).unwrap();
        let r = &out[0].report;
        assert!(!r.passed());
        let names: Vec<&str> = r.criteria.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["s_independence", "max_deviation"]);
        assert_eq!(r.criteria[0].status, harness::Status::Pass);
    }
}
