//! The four pipelines behind the subcommands. Each returns its artifacts in
//! memory and writes them under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rticert::certify::{self, AuditReport, AuxConstants, Certificate};
use rticert::constants::{self, ConstantsBundle, EstimationReport};
use rticert::coupled::{self, ClosedLoopTrace};
use rticert::kv::{format_value, KvFile};
use rticert::Error;

use crate::config::ScenarioConfig;
use crate::{trace_csv, CliError};

/// Constants published for the Chen example.
pub const REPORTED_BUNDLE: &str = include_str!("../configs/reported_chen.txt");

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn sci(v: f64) -> String {
    format!("{v:.4e}")
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub traces: Vec<ClosedLoopTrace>,
    pub audits: Vec<Option<AuditReport>>,
    pub certificate: Option<Certificate>,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Rolls the coupled loop from every configured initial state. With a bundle,
/// `V_so` is filled in and each trace is audited.
pub fn simulate(
    cfg: &ScenarioConfig,
    bundle: Option<&ConstantsBundle>,
    seed: u64,
    out: &Path,
) -> Result<SimulateOutcome, CliError> {
    let spec = cfg.ocp_spec()?;
    let settings = cfg.rti_settings();
    let t = cfg.sampling_time;
    let certificate = match bundle {
        Some(b) => match certify::stability_condition(&b.aux(), t) {
            Ok(c) => Some(c),
            Err(Error::OutOfDomain { .. }) => None,
            Err(e) => return Err(e.into()),
        },
        None => None,
    };
    let radius = match bundle {
        Some(b) => cfg.initial.z0_radius_factor * b.r_tilde_z,
        None => cfg.initial.z0_radius,
    };
    let states = cfg.initial_states();
    let results = states
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (z0, _) = coupled::settled_start(&spec, &settings, x0, radius, cfg.initial.settle_steps, &mut rng)?;
            let mut trace = coupled::rollout(&spec, &settings, t, x0, &z0, cfg.n_steps, true)?;
            let audit = match (bundle, &certificate) {
                (Some(b), Some(c)) => {
                    trace.attach_v_so(b.q, c.w_hat[1] / c.w_hat[0]);
                    Some(certify::audit_trace(b, c, &trace)?)
                }
                _ => None,
            };
            Ok((trace, audit))
        })
        .collect::<Vec<rticert::Result<_>>>();

    let mut traces = Vec::new();
    let mut audits = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (trace, audit) = r.map_err(|e| CliError::Runtime(format!("initial state {i}: {e}")))?;
        traces.push(trace);
        audits.push(audit);
    }

    let mut files = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        let path = out.join(format!("trace_{i}.csv"));
        write_file(&path, &trace_csv::write_trace(trace)?)?;
        files.push(path);
    }
    let plot = out.join("plot.gp");
    write_file(&plot, &plot_script(traces.len(), cfg.nx()))?;
    files.push(plot);

    let mut summary = String::new();
    let _ = writeln!(summary, "# closed-loop runs: T = {}, {} steps, |z0 - z_bar(x0)| = {}", t, cfg.n_steps, sci(radius));
    for (i, (trace, audit)) in traces.iter().zip(&audits).enumerate() {
        let x0 = &states[i];
        let _ = write!(
            summary,
            "trace {i}: x0 = [{}]  final |x| = {}",
            x0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
            sci(trace.final_state().norm())
        );
        if let Some(a) = audit {
            let counts = a.summary().iter().skip(1).map(|(k, n)| format!("{k} = {n}")).collect::<Vec<_>>().join(", ");
            let _ = write!(summary, "  audit: {counts}");
        }
        summary.push('\n');
    }
    let path = out.join("simulate_summary.txt");
    write_file(&path, &summary)?;
    files.push(path);
    Ok(SimulateOutcome { traces, audits, certificate, files, summary })
}

fn plot_script(n_traces: usize, nx: usize) -> String {
    let mut s = String::from(
        "# gnuplot -p plot.gp\nset datafile separator ','\nset key autotitle columnhead\nset grid\n",
    );
    let each = |col: &str, title: &str| -> String {
        (0..n_traces)
            .map(|i| format!("'trace_{i}.csv' using 2:{col} with lines title '{title} {i}'"))
            .collect::<Vec<_>>()
            .join(", \\\n     ")
    };
    let _ = writeln!(s, "\nset title 'states'\nset xlabel 't [s]'");
    let cols: Vec<String> = (1..=nx)
        .map(|j| {
            (0..n_traces)
                .map(|i| format!("'trace_{i}.csv' using 2:{} with lines title 'x{j} ({i})'", j + 2))
                .collect::<Vec<_>>()
                .join(", \\\n     ")
        })
        .collect();
    let _ = writeln!(s, "plot {}\npause -1", cols.join(", \\\n     "));
    let _ = writeln!(s, "\nset title 'V_so'\nset logscale y\nplot {}\npause -1", each("(column('V_so'))", "V_so"));
    let _ = writeln!(s, "\nset title 'optimizer error E'\nplot {}\npause -1", each("(column('E'))", "E"));
    s
}

#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub report: EstimationReport,
    pub path: PathBuf,
    pub text: String,
}

/// Estimates the constants bundle and writes `bundle.txt`.
pub fn estimate(cfg: &ScenarioConfig, seed: Option<u64>, out: &Path) -> Result<EstimateOutcome, CliError> {
    let seed = seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::Config("seed: required for estimation runs (config `seed` or --seed)".into()))?;
    let spec = cfg.ocp_spec()?;
    let settings = cfg.rti_settings();
    let report = constants::estimate_all(&spec, &settings, &cfg.estimation_config(seed))?;
    let mut kv = report.bundle.to_kv();
    let data = &report.dataset;
    let state = |i: usize| format!("{:?}", data.points[i].x.as_slice());
    let l = &report.lyapunov;
    kv.comment(format!("a1 attained at x = {}", state(l.a1.at.0)));
    kv.comment(format!("a2 attained at x = {}", state(l.a2.at.0)));
    kv.comment(format!("a3 attained on the step from x = {}", state(l.a3.at.0)));
    kv.comment(format!("mu_tilde attained between x = {} and {}", state(l.mu_tilde.at.0), state(l.mu_tilde.at.1)));
    kv.comment(format!(
        "sigma attained between x = {} and {}",
        state(report.sigma.at.0),
        state(report.sigma.at.1)
    ));
    kv.comment(format!(
        "kappa_hat attained at x = {:?}, probe radius {}",
        report.kappa.worst_state.as_slice(),
        format_value(report.kappa.worst_radius)
    ));
    let text = kv.render();
    let path = out.join("bundle.txt");
    write_file(&path, &text)?;
    Ok(EstimateOutcome { report, path, text })
}

/// A bundle file: a full estimated bundle, or auxiliary constants only.
#[derive(Debug, Clone)]
pub enum LoadedBundle {
    Full(Box<ConstantsBundle>, AuxConstants),
    Partial(AuxConstants),
}

impl LoadedBundle {
    pub fn aux(&self) -> &AuxConstants {
        match self {
            LoadedBundle::Full(_, a) | LoadedBundle::Partial(a) => a,
        }
    }

    pub fn full(&self) -> Option<&ConstantsBundle> {
        match self {
            LoadedBundle::Full(b, _) => Some(b),
            LoadedBundle::Partial(_) => None,
        }
    }
}

pub fn load_bundle(text: &str) -> Result<LoadedBundle, CliError> {
    let bad = |e: Error| CliError::Config(format!("bundle: {e}"));
    let kv = KvFile::parse(text).map_err(bad)?;
    let reported_t5 = kv.get("reported_T5");
    let reported_beta = kv.get("reported_beta");
    if kv.get("a1").is_some() {
        let b = ConstantsBundle::from_kv(&kv).map_err(bad)?;
        let aux = AuxConstants { reported_t5, reported_beta, ..b.aux() };
        return Ok(LoadedBundle::Full(Box::new(b), aux));
    }
    let aux = AuxConstants {
        q: kv.require("q").map_err(bad)?,
        a_bar: kv.require("a_bar").map_err(bad)?,
        kappa: kv.require("kappa").map_err(bad)?,
        gamma_hat: kv.require("gamma_hat").map_err(bad)?,
        mu_hat: kv.require("mu_hat").map_err(bad)?,
        reported_t5,
        reported_beta,
    };
    aux.validate().map_err(bad)?;
    Ok(LoadedBundle::Partial(aux))
}

pub fn load_bundle_file(path: &Path) -> Result<LoadedBundle, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read bundle {}: {e}", path.display())))?;
    load_bundle(&text)
}

#[derive(Debug, Clone)]
pub struct CertifyLine {
    pub t: f64,
    /// Certificate, or the reason the sampling time is outside the domain.
    pub outcome: Result<Certificate, String>,
}

#[derive(Debug, Clone)]
pub struct CertifyOutcome {
    pub lines: Vec<CertifyLine>,
    pub t3p: Option<f64>,
    pub t4p: Option<f64>,
    pub t_max: Option<f64>,
    pub text: String,
}

/// Stability certificates for each sampling time.
pub fn certify(bundle: &LoadedBundle, ts: &[f64]) -> Result<CertifyOutcome, CliError> {
    if ts.is_empty() {
        return Err(CliError::Config("T: at least one sampling time is required (--T)".into()));
    }
    if let Some(t) = ts.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(CliError::Config(format!("T: sampling times must be positive, got {t}")));
    }
    let aux = bundle.aux();
    let full = bundle.full();
    let (t3p, t4p, t_max) = (full.map(|b| b.t3p), full.map(|b| b.t4p), full.map(|b| b.t_max));
    let na = |v: Option<f64>| v.map(sci).unwrap_or_else(|| "n/a".into());
    let mut text = String::new();
    let kind = if full.is_some() { "estimated bundle" } else { "auxiliary constants only" };
    let _ = writeln!(text, "# stability certificates ({kind})");
    let _ = writeln!(
        text,
        "# q = {}, a_bar = {}, kappa = {}, gamma_hat = {}, mu_hat = {}",
        aux.q,
        sci(aux.a_bar),
        sci(aux.kappa),
        sci(aux.gamma_hat),
        sci(aux.mu_hat)
    );
    let mut lines = Vec::new();
    for &t in ts {
        match certify::stability_condition(aux, t) {
            Ok(c) => {
                let _ = writeln!(
                    text,
                    "T = {}: {}  condition_value = {}  spectral_radius = {}  beta = {}  d_hat = {}  T3' = {}  T4' = {}  T5 = {}  T_max = {}",
                    sci(t),
                    if c.stable { "stable" } else { "not certified" },
                    sci(c.condition_value),
                    sci(c.spectral_radius),
                    sci(c.beta),
                    sci(c.d_hat),
                    na(t3p),
                    na(t4p),
                    sci(c.t5),
                    na(t_max)
                );
                if let Some(tm) = t_max {
                    if t > tm {
                        let _ = writeln!(text, "  note: T exceeds T_max = {}; the certificate is not backed by the invariance bounds", sci(tm));
                    }
                }
                for n in &c.notes {
                    let _ = writeln!(text, "  note: {n}");
                }
                lines.push(CertifyLine { t, outcome: Ok(c) });
            }
            Err(e @ Error::OutOfDomain { .. }) => {
                let _ = writeln!(text, "T = {}: out-of-domain ({e})", sci(t));
                lines.push(CertifyLine { t, outcome: Err(e.to_string()) });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(CertifyOutcome { lines, t3p, t4p, t_max, text })
}

pub fn write_certificate(outcome: &CertifyOutcome, out: &Path) -> Result<PathBuf, CliError> {
    let path = out.join("certificate.txt");
    write_file(&path, &outcome.text)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct ReproduceOutcome {
    pub estimate: EstimateOutcome,
    pub certify: CertifyOutcome,
    pub simulate: SimulateOutcome,
    pub summary: String,
}

/// Estimate, certify and simulate the pinned Chen scenario.
pub fn reproduce_chen(cfg: &ScenarioConfig, seed: Option<u64>, out: &Path) -> Result<ReproduceOutcome, CliError> {
    let estimate = estimate(cfg, seed, out)?;
    let bundle = &estimate.report.bundle;
    let loaded = LoadedBundle::Full(Box::new(bundle.clone()), bundle.aux());
    let cert = certify(&loaded, &[cfg.sampling_time])?;
    write_certificate(&cert, out)?;
    let sim_seed = seed.or(cfg.seed).unwrap_or(0);
    let simulate = simulate(cfg, Some(bundle), sim_seed, out)?;
    let summary = chen_summary(bundle, &cert, &simulate)?;
    write_file(&out.join("summary.txt"), &summary)?;
    Ok(ReproduceOutcome { estimate, certify: cert, simulate, summary })
}

fn chen_summary(b: &ConstantsBundle, cert: &CertifyOutcome, sim: &SimulateOutcome) -> Result<String, CliError> {
    let reported_kv = KvFile::parse(REPORTED_BUNDLE).map_err(|e| CliError::Runtime(e.to_string()))?;
    let reported = |k: &str| reported_kv.get(k).unwrap_or(f64::NAN);
    let mut s = String::new();
    let _ = writeln!(s, "# Chen example: reported constants next to this run's estimates");
    let _ = writeln!(s, "# reported values come from an unpublished sampling protocol; agreement is indicative only");
    let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>9}", "constant", "reported", "estimated", "ratio");
    let rows = [
        ("a_bar", reported("a_bar"), b.a_bar),
        ("kappa", reported("kappa"), b.kappa),
        ("gamma_hat", reported("gamma_hat"), b.gamma_hat),
        ("mu_hat", reported("mu_hat"), b.mu_hat),
        ("beta", reported("reported_beta"), b.beta),
        ("T5", reported("reported_T5"), b.t5),
    ];
    for (name, r, e) in rows {
        let _ = writeln!(s, "{:<10} {:>12.4e} {:>12.4e} {:>9.3}", name, r, e, e / r);
    }
    let reported_aux = match load_bundle(REPORTED_BUNDLE)? {
        LoadedBundle::Partial(a) => a,
        LoadedBundle::Full(_, a) => a,
    };
    let _ = writeln!(s, "T5 from the reported constants by formula: {}", sci(certify::t5(&reported_aux)));
    let _ = writeln!(s, "kappa_hat = {}  sigma = {}  a1 = {}  a2 = {}  a3 = {}", sci(b.kappa_hat), sci(b.sigma), sci(b.a1), sci(b.a2), sci(b.a3));
    let _ = writeln!(s, "T3' = {}  T4' = {}  T5 = {}  T_max = {}", sci(b.t3p), sci(b.t4p), sci(b.t5), sci(b.t_max));
    let _ = writeln!(s, "\n# certificate");
    s.push_str(&cert.text);
    let _ = writeln!(s, "\n# closed loop and audit");
    s.push_str(&sim.summary);
    let total = |f: fn(&AuditReport) -> usize| sim.audits.iter().flatten().map(f).sum::<usize>();
    let _ = writeln!(
        s,
        "V_so increases: {}  value-recursion violations: {}  error-recursion violations: {}",
        total(|a| a.v_so_increases.len()),
        total(|a| a.value_violations.len()),
        total(|a| a.error_violations.len())
    );
    Ok(s)
}
