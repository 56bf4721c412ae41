use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use subwalk::model::{build_detector, InitialState, WalkModel};
use subwalk::output::{fmt_2dp, fmt_g};
use subwalk::spectral::{classify, deterministic_certificate, levels_of, ClassificationExport, ClassifyOptions};
use subwalk::stroboscopic::{fn_series, nbar_truncated, pdet_truncated};
use subwalk::sweep::{
    run_nbar_scan, run_pdet_heatmap, run_table_dark_count, verify, Method, SweepSpec, TauGrid, VerifyOptions,
};
use subwalk::vectorized::{build_operators, critical_times, fn_closed_form, nbar_matrix, pdet_matrix, Nbar};

#[derive(Parser)]
#[command(name = "subwalk", version, about = "Detection statistics of a stroboscopically monitored quantum walk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Default)]
struct Common {
    /// JSON sweep spec; command-line flags override its fields.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// nn, nnn or custom:<path>
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    size: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// start:stop:steps
    #[arg(long, global = true)]
    tau_grid: Option<TauGrid>,
    /// Comma-separated detector sites, e.g. "0,5".
    #[arg(long, global = true)]
    detector: Option<String>,
    /// Generate every detector {0, d2, ..} of this rank.
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// Comma-separated initial sites.
    #[arg(long, global = true)]
    initial: Option<String>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    nmax: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Write to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Energies, eigenvector levels and degeneracies.
    Spectrum,
    /// Dark/bright classification per level.
    Classify {
        /// Include dark and bright vectors in JSON output.
        #[arg(long)]
        vectors: bool,
        /// Regroup levels by U(tau) phases when tau is critical.
        #[arg(long)]
        regroup: bool,
    },
    /// Whether every localized initial state is detected with certainty.
    Certificate,
    /// Total detection probability for each initial site.
    Pdet,
    /// First-detection probabilities F_n by direct simulation.
    FnSeries {
        /// Also print the closed-form F_n column.
        #[arg(long)]
        closed_form: bool,
    },
    /// Mean number of measurements until detection at a single tau.
    Nbar,
    /// Critical periods 2 pi n / |E' - E| up to tau-max.
    CriticalTimes {
        #[arg(long, default_value_t = TAU)]
        tau_max: f64,
    },
    /// P_det over detector variants and initial sites.
    Heatmap,
    /// Dark counts and P_det for every two-site detector {0, d2}.
    Table,
    /// n̄ over a tau grid with divergence census.
    Scan,
    /// Cross-check all methods; nonzero exit status on any breach.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn parse_sites(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad site '{t}'")))
        .collect()
}

fn resolve_spec(c: &Common) -> Result<SweepSpec> {
    let mut spec = match &c.spec {
        Some(path) => SweepSpec::load(path)?,
        None => SweepSpec::default(),
    };
    if let Some(m) = &c.model {
        spec.model = m.clone();
    }
    if let Some(v) = c.size {
        spec.size = v;
    }
    if let Some(v) = c.gamma {
        spec.gamma = v;
    }
    if let Some(v) = c.tau {
        spec.tau = v;
    }
    if let Some(v) = c.tau_grid {
        spec.tau_grid = Some(v);
    }
    if let Some(d) = &c.detector {
        spec.detector = Some(parse_sites(d)?);
        spec.rank = None;
    }
    if let Some(r) = c.rank {
        spec.rank = Some(r);
        spec.detector = None;
    }
    if let Some(i) = &c.initial {
        spec.initial = Some(parse_sites(i)?);
    }
    if let Some(m) = c.method {
        spec.method = m;
    }
    if let Some(v) = c.nmax {
        spec.n_max = v;
    }
    if let Some(v) = c.tol {
        spec.tol = v;
    }
    Ok(spec)
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn single_detector(spec: &SweepSpec, model: &WalkModel) -> Result<subwalk::model::Detector> {
    match &spec.detector {
        Some(sites) => Ok(build_detector(model.size(), sites)?),
        None => Ok(build_detector(model.size(), &[0])?),
    }
}

fn first_initial(spec: &SweepSpec, model: &WalkModel) -> Result<InitialState> {
    let s = spec.initial_sites(model.size())?.first().copied().unwrap_or(0);
    Ok(InitialState::localized(model.size(), s)?)
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    energy: f64,
    level: usize,
    degeneracy: usize,
    momentum: Option<usize>,
}

fn cmd_spectrum(spec: &SweepSpec, format: Format) -> Result<String> {
    let model = spec.build_model()?;
    let spectrum = model.spectrum()?;
    let levels = levels_of(&spectrum);
    let mut rows = Vec::new();
    let mut index = 0;
    for l in &levels {
        for _ in 0..l.degeneracy() {
            rows.push(SpectrumRow {
                index,
                energy: spectrum.energies[index],
                level: l.index,
                degeneracy: l.degeneracy(),
                momentum: spectrum.momenta.as_ref().map(|m| m[index]),
            });
            index += 1;
        }
    }
    if format == Format::Json {
        return json(&rows);
    }
    let mut out = String::from("index,energy,level,degeneracy,momentum\n");
    for r in &rows {
        let p = r.momentum.map_or(String::new(), |p| p.to_string());
        writeln!(out, "{},{},{},{},{}", r.index, fmt_g(r.energy), r.level, r.degeneracy, p)?;
    }
    Ok(out)
}

fn cmd_classify(spec: &SweepSpec, format: Format, vectors: bool, regroup: bool, tau_given: bool) -> Result<String> {
    let model = spec.build_model()?;
    let det = single_detector(spec, &model)?;
    let opts = ClassifyOptions {
        tau: tau_given.then_some(spec.tau),
        regroup_at_critical: regroup,
        ..Default::default()
    };
    let c = classify(&model.spectrum()?, &det, &opts)?;
    for w in &c.warnings {
        eprintln!("warning: {}", serde_json::to_string(w)?);
    }
    if format == Format::Json {
        return json(&ClassificationExport::new(&c, vectors));
    }
    let mut out = String::from("level,energy,degeneracy,rank,n_dark\n");
    for l in &c.levels {
        writeln!(out, "{},{},{},{},{}", l.level, fmt_g(l.energy), l.degeneracy, l.rank, l.n_dark)?;
    }
    Ok(out)
}

fn cmd_certificate(spec: &SweepSpec, format: Format) -> Result<String> {
    let model = spec.build_model()?;
    let det = single_detector(spec, &model)?;
    let c = classify(&model.spectrum()?, &det, &ClassifyOptions::default())?;
    let cert = deterministic_certificate(&c, &det);
    if format == Format::Json {
        return json(&cert);
    }
    let mut out = String::from("key,value\n");
    writeln!(out, "certified,{}", cert.certified)?;
    writeln!(out, "c1_holds,{}", cert.c1_holds)?;
    writeln!(out, "c2_holds,{}", cert.c2_holds)?;
    writeln!(out, "n_dark_total,{}", cert.n_dark_total)?;
    writeln!(out, "detector_rank,{}", cert.detector_rank)?;
    writeln!(out, "max_degeneracy,{}", cert.max_degeneracy)?;
    writeln!(out, "rank_covers_degeneracy,{}", cert.rank_covers_degeneracy)?;
    Ok(out)
}

fn cmd_pdet(spec: &SweepSpec, format: Format) -> Result<String> {
    let mut spec = spec.clone();
    if spec.detector.is_none() && spec.rank.is_none() {
        spec.detector = Some(vec![0]);
    }
    if spec.rank.is_some() {
        bail!("pdet takes a single detector; use heatmap for detector families");
    }
    let h = run_pdet_heatmap(&spec)?;
    if let Some(delta) = h.cross_check_delta {
        eprintln!("spectral cross-check: max |dP_det| = {}", fmt_g(delta));
    }
    if format == Format::Json {
        return json(&h);
    }
    let method = serde_json::to_value(h.method)?;
    let mut out = String::from("s,p_det,p_det_2dp,method\n");
    for (c, s) in h.initial.iter().enumerate() {
        let p = h.cell(0, c);
        writeln!(out, "{},{},{},{}", s, fmt_g(p), fmt_2dp(p), method.as_str().unwrap_or(""))?;
    }
    Ok(out)
}

fn cmd_fn_series(spec: &SweepSpec, format: Format, closed_form: bool) -> Result<String> {
    let model = spec.build_model()?;
    let det = single_detector(spec, &model)?;
    let phi = first_initial(spec, &model)?;
    let opts = subwalk::stroboscopic::SeriesOptions {
        n_max: spec.n_max,
        conv_tol: spec.tol,
    };
    let series = fn_series(&model, &det, &phi, spec.tau, opts)?;
    eprintln!(
        "{} terms, truncated P_det = {}, converged = {}",
        series.len(),
        fmt_g(pdet_truncated(&series)),
        series.converged
    );
    if format == Format::Json {
        return json(&series);
    }
    if !closed_form {
        return Ok(series.to_csv());
    }
    let ops = build_operators(&model, &det, &phi, spec.tau)?;
    let closed = subwalk::vectorized::fn_closed_form_series(&ops, series.len());
    let mut out = String::from("n,F_n,S_n,cumulative,F_n_closed_form\n");
    for (i, line) in series.to_csv().lines().skip(1).enumerate() {
        writeln!(out, "{},{}", line, fmt_g(closed[i]))?;
    }
    debug_assert!((fn_closed_form(&ops, 1) - closed[0]).abs() < 1e-12);
    Ok(out)
}

#[derive(Serialize)]
struct NbarRow {
    s: usize,
    tau: f64,
    p_det: f64,
    nbar: Nbar,
    nbar_truncated: Option<f64>,
}

fn cmd_nbar(spec: &SweepSpec, format: Format) -> Result<String> {
    let model = spec.build_model()?;
    let det = single_detector(spec, &model)?;
    let mut rows = Vec::new();
    for s in spec.initial_sites(model.size())? {
        let phi = InitialState::localized(model.size(), s)?;
        let ops = build_operators(&model, &det, &phi, spec.tau)?;
        let nbar = nbar_matrix(&ops)?;
        let truncated = if spec.method == Method::Direct {
            let opts = subwalk::stroboscopic::SeriesOptions {
                n_max: spec.n_max,
                conv_tol: spec.tol,
            };
            nbar_truncated(&fn_series(&model, &det, &phi, spec.tau, opts)?).ok()
        } else {
            None
        };
        rows.push(NbarRow {
            s,
            tau: spec.tau,
            p_det: if nbar == Nbar::Undefined { 0.0 } else { pdet_matrix(&ops).unwrap_or(f64::NAN) },
            nbar,
            nbar_truncated: truncated,
        });
    }
    if format == Format::Json {
        return json(&rows);
    }
    let mut out = String::from("s,tau,p_det,nbar,status,nbar_truncated\n");
    for r in &rows {
        let (value, status) = match r.nbar {
            Nbar::Finite { value } => (fmt_g(value), "finite"),
            Nbar::Divergent { .. } => ("inf".into(), "divergent"),
            Nbar::Undefined => ("nan".into(), "undefined"),
        };
        let t = r.nbar_truncated.map_or(String::new(), fmt_g);
        writeln!(out, "{},{},{},{},{},{}", r.s, fmt_g(r.tau), fmt_g(r.p_det), value, status, t)?;
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(String, bool)> {
    let spec = resolve_spec(&cli.common)?;
    let format = cli.common.format;
    let tau_given = cli.common.tau.is_some();
    let output = match cli.command {
        Command::Spectrum => cmd_spectrum(&spec, format)?,
        Command::Classify { vectors, regroup } => cmd_classify(&spec, format, vectors, regroup, tau_given)?,
        Command::Certificate => cmd_certificate(&spec, format)?,
        Command::Pdet => cmd_pdet(&spec, format)?,
        Command::FnSeries { closed_form } => cmd_fn_series(&spec, format, closed_form)?,
        Command::Nbar => cmd_nbar(&spec, format)?,
        Command::CriticalTimes { tau_max } => {
            let crit = critical_times(&spec.build_model()?, tau_max)?;
            match format {
                Format::Json => json(&crit)?,
                Format::Csv => crit.to_csv(),
            }
        }
        Command::Heatmap => {
            let h = run_pdet_heatmap(&spec)?;
            match format {
                Format::Json => json(&h)?,
                Format::Csv => h.to_csv(),
            }
        }
        Command::Table => {
            let model = spec.build_model()?;
            let s = spec.initial.as_ref().and_then(|v| v.first().copied()).unwrap_or(1);
            let table = run_table_dark_count(&model, s)?;
            match format {
                Format::Json => json(&table)?,
                Format::Csv => table.to_csv(),
            }
        }
        Command::Scan => {
            let scan = run_nbar_scan(&spec)?;
            eprintln!("{}", scan.summary());
            match format {
                Format::Json => json(&scan)?,
                Format::Csv => scan.profile.to_csv(),
            }
        }
        Command::Verify { inject_fault } => {
            let report = verify(&spec, VerifyOptions { inject_fault })?;
            for f in &report.failures {
                eprintln!("FAIL {f}");
            }
            let text = match format {
                Format::Json => json(&report)?,
                Format::Csv => report.summary() + "\n",
            };
            return Ok((text, report.passed()));
        }
    };
    Ok((output, true))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_path = cli.common.out.clone();
    match run(cli) {
        Ok((text, ok)) => {
            let written = match &out_path {
                Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            };
            if let Err(e) = written {
                eprintln!("error: {e:#}");
                return ExitCode::FAILURE;
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
