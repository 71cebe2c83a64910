//! `pertbound` command-line front end.
//!
//! Exit codes: 0 success, 1 bound below the exact norm, 2 usage or
//! configuration error, 3 numeric guard (singular resolvent, size limit).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pertbound::automaton::TailBound;
use pertbound::config::{format_f64, parse_config, parse_orders, write_config, ConfigFile, PauliSection};
use pertbound::gadget::{build_gadget, verify_leading_orders, GadgetSpec, SPINS};
use pertbound::oracle::{build_operator, geometric_bound, ExactSeries};
use pertbound::{Automaton, Error};

const BOUND_HEADER: &str = "order,z,ca_bound,tail_bound,tuples_total,wall_ms";
const COMPARE_HEADER: &str = "order,z,ca_bound,exact_inf,exact_2,geometric,ratio_ca_exact";
/// Relative slack allowed when checking `ca_bound >= exact_inf`.
const SOUNDNESS_SLACK: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "pertbound", version, about = "Symmetric-polynomial bounds on self-energy perturbation terms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bound ||T_r||_inf with the cellular automaton.
    Bound(RunArgs),
    /// Compare the bound with exact norms computed from the Pauli sections.
    Compare(RunArgs),
    /// Build the 11-spin three-body gadget and write its configuration.
    Gadget(GadgetArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// `2..8` or `2, 3, 5`; overrides the configuration.
    #[arg(long)]
    orders: Option<String>,
    /// Comma-separated list of z values; overrides the configuration.
    #[arg(long, allow_hyphen_values = true)]
    z: Option<String>,
    /// Also write closed-form terms.
    #[arg(long)]
    trace: bool,
    /// Report a tail bound only once ca_bound is at or below this threshold.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write 0 in the wall_ms column.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct GadgetArgs {
    #[arg(long, allow_hyphen_values = true)]
    alpha1: f64,
    #[arg(long, allow_hyphen_values = true)]
    alpha2: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    z: String,
    #[arg(long, default_value = "2..8")]
    orders: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Soundness(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Arity { .. } | Error::UnsupportedOrder(_) | Error::DimensionMismatch { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bound(a) => cmd_bound(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Gadget(a) => cmd_gadget(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Soundness(m)) => {
            eprintln!("soundness violation: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("PB_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("PB_THREADS must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn parse_z_list(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--z: `{}` is not a number", x.trim())))
        })
        .collect()
}

struct Plan {
    file: ConfigFile,
    orders: Vec<usize>,
    z_values: Vec<f64>,
    trace: bool,
    eta: Option<f64>,
}

fn plan(a: &RunArgs) -> Result<Plan, Failure> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.config.display())))?;
    let file = parse_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.config.display())))?;
    let orders = match &a.orders {
        Some(s) => parse_orders(s).map_err(|e| Failure::Usage(format!("--orders: {e}")))?,
        None => file.orders.clone(),
    };
    if let Some(&r) = orders.iter().find(|&&r| r < 2) {
        return Err(Failure::Usage(format!("orders must be at least 2, got {r}")));
    }
    let z_values = match &a.z {
        Some(s) => parse_z_list(s)?,
        None => file.z_values.clone(),
    };
    Ok(Plan {
        orders,
        z_values,
        trace: a.trace || file.trace,
        eta: a.eta.or(file.eta),
        file,
    })
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn trace_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.txt");
    out.with_file_name(name)
}

fn cmd_bound(a: &RunArgs) -> Result<(), Failure> {
    let p = plan(a)?;
    let workers = threads()?;
    let mut csv = String::from(BOUND_HEADER);
    csv.push('\n');
    let mut trace = String::new();
    let mut singular = Vec::new();
    // Build one automaton per z up front; a singular z is skipped everywhere.
    let mut automata = Vec::new();
    for &z in &p.z_values {
        let cfg = p.file.model.at_z(z)?;
        match Automaton::build(&cfg) {
            Ok(aut) => automata.push((z, aut.with_trace(p.trace).with_threads(workers)?)),
            Err(e @ Error::SingularResolvent { .. }) => {
                eprintln!("warning: skipping z = {}: {e}", format_f64(z));
                singular.push(z);
            }
            Err(e) => return Err(e.into()),
        }
    }
    for &r in &p.orders {
        for (z, aut) in automata.iter_mut() {
            let t0 = Instant::now();
            let res = aut.run(r)?;
            let ms = if a.no_timing { 0 } else { t0.elapsed().as_millis() };
            let tail = match aut.tail_bound(res.value) {
                TailBound::Divergent { .. } => "inf".to_string(),
                TailBound::Finite { value, .. } => match p.eta {
                    Some(eta) if res.value > eta => String::new(),
                    _ => format_f64(value),
                },
            };
            let _ = writeln!(
                csv,
                "{r},{},{},{tail},{},{ms}",
                format_f64(*z),
                format_f64(res.value),
                res.tuples_emitted
            );
            if let Some(terms) = &res.trace {
                let _ = writeln!(trace, "# order {r}, z = {}", format_f64(*z));
                for t in terms {
                    let _ = writeln!(trace, "{t}");
                }
            }
        }
    }
    emit(&a.out, &csv)?;
    if p.trace {
        match &a.out {
            Some(out) => {
                let path = trace_path(out);
                fs::write(&path, &trace).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
            }
            None => eprint!("{trace}"),
        }
    }
    if !singular.is_empty() {
        return Err(Failure::Numeric(format!(
            "singular resolvent at z = {}",
            singular.iter().map(|z| format_f64(*z)).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

fn section<'a>(s: &'a Option<PauliSection>, name: &str) -> Result<&'a PauliSection, Failure> {
    s.as_ref()
        .ok_or_else(|| Failure::Usage(format!("compare needs a [pauli.{name}] section with the exact model")))
}

fn cmd_compare(a: &RunArgs) -> Result<(), Failure> {
    let p = plan(a)?;
    let workers = threads()?;
    let hs = section(&p.file.hamiltonian, "H")?;
    let vs = section(&p.file.perturbation, "V")?;
    if hs.spins != vs.spins {
        return Err(Failure::Usage(format!(
            "[pauli.H] has {} spins but [pauli.V] has {}",
            hs.spins, vs.spins
        )));
    }
    let guard = |e: Error| match e {
        Error::Size(m) => Failure::Numeric(format!("{m}; run `pertbound bound` for bounds without the exact comparison")),
        other => other.into(),
    };
    let h = build_operator(&hs.terms, hs.spins).map_err(guard)?;
    let v = build_operator(&vs.terms, vs.spins).map_err(guard)?;
    let series = ExactSeries::new(&h, &v, Some(p.file.model.cutoff()))?;
    let v_norm = series.v_norm()?;
    let r_max = p.orders.iter().copied().max().unwrap_or(0);

    let mut rows: Vec<(usize, f64, String)> = Vec::new();
    let mut violations = Vec::new();
    for &z in &p.z_values {
        let d = series.min_distance(z)?;
        let exact = series.term_norms(z, r_max)?;
        let mut aut = Automaton::build(&p.file.model.at_z(z)?)?.with_threads(workers)?;
        for &r in &p.orders {
            let ca = aut.run(r)?.value;
            let ex = exact[r - 2];
            let ratio = if ex.inf_norm > 0.0 {
                format_f64(ca / ex.inf_norm)
            } else {
                String::new()
            };
            if ca < ex.inf_norm - SOUNDNESS_SLACK * ex.inf_norm {
                violations.push(format!(
                    "order {r}, z = {}: {} < {}",
                    format_f64(z),
                    format_f64(ca),
                    format_f64(ex.inf_norm)
                ));
            }
            let line = format!(
                "{r},{},{},{},{},{},{ratio}",
                format_f64(z),
                format_f64(ca),
                format_f64(ex.inf_norm),
                format_f64(ex.two_norm),
                format_f64(geometric_bound(v_norm, d, r))
            );
            rows.push((r, z, line));
        }
    }
    // Order-major, then z in the order given.
    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    for &r in &p.orders {
        for (_, _, line) in rows.iter().filter(|x| x.0 == r) {
            csv.push_str(line);
            csv.push('\n');
        }
    }
    emit(&a.out, &csv)?;
    if !violations.is_empty() {
        return Err(Failure::Soundness(violations.join("; ")));
    }
    Ok(())
}

fn cmd_gadget(a: &GadgetArgs) -> Result<(), Failure> {
    let spec = GadgetSpec::new(a.alpha1, a.alpha2, a.delta).map_err(|e| Failure::Usage(e.to_string()))?;
    let z_values = parse_z_list(&a.z)?;
    let orders = parse_orders(&a.orders).map_err(|e| Failure::Usage(format!("--orders: {e}")))?;
    let g = build_gadget(spec)?;
    let file = ConfigFile {
        model: g.model.at_z(z_values.first().copied().unwrap_or(0.0))?,
        z_values: z_values.clone(),
        orders,
        eta: None,
        trace: false,
        hamiltonian: Some(PauliSection {
            spins: SPINS,
            terms: g.h.clone(),
        }),
        perturbation: Some(PauliSection {
            spins: SPINS,
            terms: g.v.clone(),
        }),
    };
    let text = format!(
        "# three-body gadget: alpha1 = {}, alpha2 = {}, delta = {}\n{}",
        format_f64(spec.alpha1),
        format_f64(spec.alpha2),
        format_f64(spec.delta),
        write_config(&file)
    );

    let model = &g.model;
    let t = model.transitions();
    let mut report = String::new();
    let _ = writeln!(report, "mu1 = {}", format_f64(spec.mu1()));
    let _ = writeln!(report, "mu2 = {}", format_f64(spec.mu2()));
    let _ = writeln!(report, "mu_max / delta = {}", format_f64(spec.mu_ratio()));
    let levels: Vec<String> = model.spectrum().levels().iter().map(|x| format_f64(*x)).collect();
    let _ = writeln!(report, "levels = {}", levels.join(", "));
    if let Some(d) = model.spectrum().degeneracies() {
        let d: Vec<String> = d.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(report, "degeneracies = {}", d.join(", "));
    }
    for (s, row) in t.matrix().iter().enumerate() {
        let row: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(report, "M[{s}] = {}", row.join(" "));
    }
    let lambdas: Vec<String> = t.lambdas().iter().map(|x| format_f64(*x)).collect();
    let _ = writeln!(report, "lambda = {}", lambdas.join(", "));
    let _ = writeln!(report, "omega = {}", format_f64(t.omega()));
    let check = verify_leading_orders(spec, 0.0)?;
    let _ = writeln!(
        report,
        "leading orders at z = 0: distance = {}, tolerance = {}, shift = {}: {}",
        format_f64(check.distance),
        format_f64(check.tolerance),
        format_f64(check.shift),
        if check.pass { "PASS" } else { "FAIL" }
    );

    match &a.out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
            print!("{report}");
        }
        None => {
            print!("{text}");
            eprint!("{report}");
        }
    }
    Ok(())
}
