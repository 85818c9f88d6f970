//! Command-line front end: single solves, convergence studies, and the
//! analytic oracle suite.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use periodic_helmholtz::mesh::{trace_l2_error, Mesh};
use periodic_helmholtz::geometry::SurfaceSelect;
use periodic_helmholtz::quasiperiodic::CellOperator;
use phelm_cli::config::{Method, ReferenceRule, ReparamName, StudyConfig};
use phelm_cli::{export, oracles, study, HarnessError};

#[derive(Parser)]
#[command(
    name = "phelm",
    version,
    about = "Plane-wave scattering by locally perturbed periodic surfaces"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    /// Uniform Brillouin panels with exact phase integrals.
    Standard,
    /// Cutoff-clustered collocation grid.
    HighOrder,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Standard => Method::Standard,
            MethodArg::HighOrder => Method::HighOrder,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReparamArg {
    /// Polynomial clustering map.
    G1,
    /// Exponential clustering map.
    G2,
}

impl From<ReparamArg> for ReparamName {
    fn from(r: ReparamArg) -> Self {
        match r {
            ReparamArg::G1 => ReparamName::G1,
            ReparamArg::G2 => ReparamName::G2,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the unperturbed quasi-periodic cell problem and report the
    /// reflected modes and energy balance.
    #[command(allow_negative_numbers = true)]
    Periodic {
        /// Surface name: flat, gamma1, or gamma2.
        #[arg(long, default_value = "gamma1")]
        surface: String,
        /// Height of the flat surface; ignored for catalog surfaces.
        #[arg(long, default_value_t = 1.75)]
        surface_height: f64,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        /// Target mesh width.
        #[arg(long, default_value_t = 0.04)]
        h: f64,
        /// Trace modes kept in the radiation block.
        #[arg(long)]
        modes: Option<i64>,
        /// Write the nodal total field as CSV.
        #[arg(long)]
        fields: Option<PathBuf>,
    },
    /// Solve the locally perturbed problem at one resolution.
    #[command(allow_negative_numbers = true)]
    Perturbed {
        #[arg(long, value_enum, default_value_t = MethodArg::Standard)]
        method: MethodArg,
        /// Clustering map for the high-order method.
        #[arg(long, value_enum, default_value_t = ReparamArg::G1)]
        reparam: ReparamArg,
        #[arg(long, default_value = "gamma1")]
        surface: String,
        #[arg(long, default_value_t = 1.75)]
        surface_height: f64,
        /// Perturbation name: none, p1, or p2.
        #[arg(long, default_value = "p1")]
        perturbation: String,
        /// Multiplier on the perturbation amplitude.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        /// Target mesh width.
        #[arg(long, default_value_t = 0.08)]
        h: f64,
        /// Brillouin resolution.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        modes: Option<i64>,
        /// Write the nodal total field of the central cell as CSV.
        #[arg(long)]
        fields: Option<PathBuf>,
        /// Write the total top trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a convergence study described by a TOML config.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the analytic oracle suite; exits nonzero if any oracle fails.
    Oracles,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.cmd {
        Cmd::Periodic {
            surface,
            surface_height,
            k,
            alpha,
            h,
            modes,
            fields,
        } => periodic(&surface, surface_height, k, alpha, h, modes, fields),
        Cmd::Perturbed {
            method,
            reparam,
            surface,
            surface_height,
            perturbation,
            scale,
            k,
            alpha,
            h,
            n,
            modes,
            fields,
            trace,
        } => {
            let cfg = single_run_config(
                method.into(),
                reparam.into(),
                surface,
                surface_height,
                perturbation,
                scale,
                k,
                alpha,
                h,
                n,
                modes,
            );
            perturbed(&cfg, fields, trace)
        }
        Cmd::Study { config } => run_study_command(&config),
        Cmd::Oracles => Ok(run_oracles()),
    }
}

fn periodic(
    surface: &str,
    surface_height: f64,
    k: f64,
    alpha: f64,
    h: f64,
    modes: Option<i64>,
    fields: Option<PathBuf>,
) -> Result<ExitCode, HarnessError> {
    if !(alpha.abs() < k) {
        return Err(HarnessError::Config(format!(
            "incidence requires |alpha| < k, got alpha = {alpha}, k = {k}"
        )));
    }
    let profile = study::named_surface(surface, 2.0 * std::f64::consts::PI, surface_height)?;
    let (nx, ny) = study::divisions(&profile, 4.0, h);
    let mesh = Arc::new(Mesh::build(&profile, SurfaceSelect::Base, 4.0, nx, ny)?);
    let op = match modes {
        Some(j) => CellOperator::with_modes(mesh, k, j),
        None => CellOperator::new(mesh, k),
    };
    println!(
        "surface {surface}, k = {k}, alpha = {alpha}, mesh {nx} x {ny} ({} unknowns)",
        op.mesh().free_count()
    );
    let sol = op.solve_incident(alpha)?;
    let reflections = op.reflection_coefficients(alpha, &sol);
    println!("order    beta                         |R|          energy share");
    let beta0 = (k * k - alpha * alpha).sqrt();
    for m in &reflections {
        let share = if m.beta.im == 0.0 {
            m.beta.re / beta0 * m.amplitude.norm_sqr()
        } else {
            0.0
        };
        println!(
            "{:>5}    {:>12.6} {:>+12.6}i    {:.3e}    {:.6}",
            m.n,
            m.beta.re,
            m.beta.im,
            m.amplitude.norm(),
            share
        );
    }
    println!(
        "energy defect |sum - 1| = {:.3e}",
        op.energy_defect(alpha, &reflections)
    );
    if let Some(path) = fields {
        // Physical field: unwind the quasi-periodic phase at each node.
        let values: Vec<Complex64> = op
            .mesh()
            .nodes()
            .iter()
            .zip(&sol.values)
            .map(|(x, &v)| (Complex64::i() * alpha * x[0]).exp() * v)
            .collect();
        export::write_field_csv(&path, &export::nodal_field(op.mesh(), &values))?;
        println!("wrote nodal field to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn single_run_config(
    method: Method,
    reparam: ReparamName,
    surface: String,
    surface_height: f64,
    perturbation: String,
    scale: f64,
    k: f64,
    alpha: f64,
    h: f64,
    n: usize,
    modes: Option<i64>,
) -> StudyConfig {
    StudyConfig {
        surface,
        surface_height,
        perturbation,
        perturbation_scale: scale,
        k,
        alpha,
        period: 2.0 * std::f64::consts::PI,
        truncation: 4.0,
        blend_height: 3.9,
        method,
        reparam,
        mesh_widths: vec![h],
        bloch_counts: vec![n],
        reference: ReferenceRule { n, h },
        modes,
        csv_out: None,
        json_out: None,
    }
}

fn perturbed(
    cfg: &StudyConfig,
    fields: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Result<ExitCode, HarnessError> {
    cfg.validate()?;
    let tc = study::transform_coefficients(cfg)?;
    let op = study::operator_at(cfg, &tc, cfg.mesh_widths[0])?;
    let n = cfg.bloch_counts[0];
    println!(
        "surface {} + {} (x{}), k = {}, alpha = {}, {} unknowns, {} panels",
        cfg.surface,
        cfg.perturbation,
        cfg.perturbation_scale,
        cfg.k,
        cfg.alpha,
        op.mesh().free_count(),
        n
    );
    let sol = study::solve_cell(cfg, &tc, &op, n)?;
    let xs = sol.mesh().top_abscissae();
    let diff = sol.mesh().top_trace(&sol.difference_at_nodes(0));
    let zeros = vec![Complex64::ZERO; xs.len()];
    println!(
        "coupling support: {} sites; reconstruction consistency {:.3e}",
        sol.coupled_values.len(),
        sol.consistency
    );
    println!(
        "difference-field trace norm {:.6e}",
        trace_l2_error(&xs, &diff, &xs, &zeros, cfg.period)
    );
    if let Some(path) = trace {
        let (txs, tvs) = sol.total_top_trace(0);
        let samples: Vec<export::FieldSample> = txs
            .iter()
            .zip(&tvs)
            .map(|(&x, &v)| export::FieldSample::new([x, cfg.truncation], v))
            .collect();
        export::write_field_csv(&path, &samples)?;
        println!("wrote top trace to {}", path.display());
    }
    if let Some(path) = fields {
        let values = sol.total_at_nodes(0);
        export::write_field_csv(&path, &export::nodal_field(sol.mesh(), &values))?;
        println!("wrote nodal field to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_study_command(path: &std::path::Path) -> Result<ExitCode, HarnessError> {
    let cfg = StudyConfig::load(path)?;
    let table = study::run_study_with(&cfg, |line| eprintln!("{line}"))?;
    print_table(&table);
    if let Some(csv) = &cfg.csv_out {
        export::write_table_csv(csv, &table)?;
        println!("wrote {}", csv.display());
    }
    if let Some(json) = &cfg.json_out {
        std::fs::write(json, export::artifact_json(&cfg, &table)?)?;
        println!("wrote {}", json.display());
    }
    if cfg.csv_out.is_none() && cfg.json_out.is_none() {
        print!("{}", export::table_csv(&table));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_table(table: &study::ErrorTable) {
    print!("{:>8}", "N \\ h");
    for h in &table.mesh_widths {
        print!("  {h:>12}");
    }
    println!("  {:>8}", "order");
    for (i, &n) in table.bloch_counts.iter().enumerate() {
        print!("{n:>8}");
        for j in 0..table.mesh_widths.len() {
            let marker = if table.is_reference_cell(i, j) { "*" } else { "" };
            print!("  {:>12.5e}{marker}", table.errors[i][j]);
        }
        match table.row_orders[i] {
            Some(o) => println!("  {o:>8.2}"),
            None => println!("  {:>8}", "-"),
        }
    }
    print!("{:>8}", "order");
    for o in &table.col_orders {
        match o {
            Some(o) => print!("  {o:>12.2}"),
            None => print!("  {:>12}", "-"),
        }
    }
    println!();
    println!(
        "reference: N = {}, h = {} (cells marked * are the reference)",
        table.reference_n, table.reference_h
    );
}

fn run_oracles() -> ExitCode {
    let outcomes = oracles::oracle_suite();
    let mut ok = true;
    for o in &outcomes {
        println!(
            "[{}] {}: {}",
            if o.passed { "pass" } else { "FAIL" },
            o.name,
            o.detail
        );
        ok &= o.passed;
    }
    if ok {
        println!("all {} oracles passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
