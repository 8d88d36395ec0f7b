use std::io;

use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use wavekin::acceptance::{self, AcceptConfig};
use wavekin::dynamics::{integrate, step_count, DynamicsError, IterateBundle};
use wavekin::kinetic::{self, BroadenedDelta, DeltaKind, KineticError};
use wavekin::multimode_pdf::{
    evolve_joint, evolve_joint_moments, factorization_residual, mutual_information, Bath,
    JointMoments, JointPdf, MultimodeError, PeierlsOperator,
};
use wavekin::onemode_pdf::{
    evolve_moments, stability_limit, stationary_pdf, step_pdf_with_boundary, AmplitudePdf,
    PdfError, CFL,
};
use wavekin::phase_stats::{
    omega_nl, toy_phase_demo, IntegerLaw, PhaseError, PrincipalValueKernel,
};
use wavekin::rpa_ensemble::{spectrum, track_ensemble, AmplitudeLaw, Ensemble, EnsembleError};
use wavekin::stats::mean_estimate;
use wavekin::wave_system::{Coupling, Dispersion, Mode, ModeGrid, SystemError, WaveSystem};
use wavekin::wick_oracle::{run_verification, OracleError, VerifyInputs};

use crate::config::{ConfigError, LawKind, RunConfig, SpectrumSpec};
use crate::output::{f, OutputDir, Table};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("wave_system: {0}")]
    System(#[from] SystemError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("rpa_ensemble: {0}")]
    Ensemble(#[from] EnsembleError),
    #[error("kinetic: {0}")]
    Kinetic(#[from] KineticError),
    #[error("onemode_pdf: {0}")]
    Pdf(#[from] PdfError),
    #[error("multimode_pdf: {0}")]
    Multimode(#[from] MultimodeError),
    #[error("phase_stats: {0}")]
    Phase(#[from] PhaseError),
    #[error("wick_oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// What a subcommand hands back for `report.json`.
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Self {
            report,
            passed: true,
        }
    }
}

fn range_err(key: &str, message: impl Into<String>) -> CliError {
    ConfigError::Range {
        key: key.into(),
        message: message.into(),
    }
    .into()
}

pub fn build_system(cfg: &RunConfig) -> Result<WaveSystem, CliError> {
    let s = &cfg.system;
    let grid = ModeGrid::new(s.d, s.length, s.half_width)?;
    let disp = Dispersion::from_name(&s.dispersion.name, &s.dispersion.param_list())?;
    let coupling = Coupling::from_name(&s.coupling.name, &s.coupling.param_list())?;
    Ok(WaveSystem::new(grid, disp, coupling, s.epsilon)?)
}

pub fn initial_spectrum(cfg: &RunConfig, sys: &WaveSystem) -> Result<Vec<f64>, CliError> {
    let key = "ensemble.amplitude_law.spectrum";
    let g = sys.grid();
    let zero = g.zero();
    let n = match &cfg.ensemble.amplitude_law.spectrum {
        SpectrumSpec::InverseOnePlusK { scale } => g
            .indices()
            .map(|l| {
                if l == zero {
                    0.0
                } else {
                    scale / (1.0 + wavekin::wave_system::norm(&g.wavevector(l)))
                }
            })
            .collect(),
        SpectrumSpec::Equilibrium { temperature } => {
            kinetic::Spectrum::equilibrium(sys, *temperature).0
        }
        SpectrumSpec::Values { values } => {
            if values.len() != sys.len() {
                return Err(range_err(
                    key,
                    format!("has {} values, grid has {} modes", values.len(), sys.len()),
                ));
            }
            if values[zero] != 0.0 {
                return Err(range_err(key, "zero mode must carry no intensity"));
            }
            values.clone()
        }
    };
    Ok(n)
}

fn amplitude_law(cfg: &RunConfig, n: &[f64]) -> AmplitudeLaw {
    match cfg.ensemble.amplitude_law.kind {
        LawKind::Exponential => AmplitudeLaw::ExponentialIntensity { means: n.to_vec() },
        LawKind::Deterministic => AmplitudeLaw::Deterministic {
            amplitudes: n.iter().map(|x| x.sqrt()).collect(),
        },
    }
}

fn delta_for(cfg: &RunConfig, sys: &WaveSystem) -> Result<BroadenedDelta, CliError> {
    let k = &cfg.kinetic;
    let width = k
        .width
        .unwrap_or_else(|| BroadenedDelta::default_for(sys).width);
    Ok(BroadenedDelta::new(k.kind, width)?)
}

fn mode_index(sys: &WaveSystem, comps: &[i32], key: &str) -> Result<usize, CliError> {
    let mut m: Mode = [0; 3];
    m[..comps.len()].copy_from_slice(comps);
    let l = sys
        .grid()
        .index(m)
        .ok_or_else(|| range_err(key, format!("mode {comps:?} is off the grid")))?;
    if l == sys.grid().zero() {
        return Err(range_err(key, "the zero mode does not evolve"));
    }
    Ok(l)
}

fn k_header(d: usize) -> Vec<String> {
    ["kx", "ky", "kz"][..d]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn k_cells(sys: &WaveSystem, l: usize) -> Vec<String> {
    let m = sys.grid().mode(l);
    m[..sys.grid().dim()]
        .iter()
        .map(|c| c.to_string())
        .collect()
}

fn header(front: &[&str], d: usize, back: &[&str]) -> Vec<String> {
    front
        .iter()
        .map(|s| s.to_string())
        .chain(k_header(d))
        .chain(back.iter().map(|s| s.to_string()))
        .collect()
}

fn table(cols: &[String]) -> Table {
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    Table::new(&refs)
}

fn energy(sys: &WaveSystem, n: &[f64]) -> f64 {
    n.iter().zip(sys.freqs()).map(|(a, w)| a * w).sum()
}

#[derive(Serialize)]
struct ExpansionCheck {
    time: f64,
    /// Max-norm error of the truncated series with 0, 1 and 2 corrections.
    errors: [f64; 3],
    ordered: bool,
}

fn expansion_check(
    sys: &WaveSystem,
    a0: &wavekin::dynamics::ComplexField,
    time: f64,
    dt: f64,
) -> Result<ExpansionCheck, CliError> {
    let exact = integrate(sys, a0, a0.time + time, dt.min(time / 100.0))?;
    let bundle = IterateBundle::compute(sys, &a0.amps, time);
    let mut errors = [0.0; 3];
    for (order, e) in errors.iter_mut().enumerate() {
        let approx = bundle.series(sys.epsilon(), order);
        *e = approx
            .iter()
            .zip(&exact.amps)
            .map(|(a, b): (&Complex64, &Complex64)| (a - b).norm())
            .fold(0.0, f64::max);
    }
    Ok(ExpansionCheck {
        time,
        errors,
        ordered: errors[2] < errors[1] && errors[1] < errors[0],
    })
}

pub fn simulate(cfg: &RunConfig, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let sys = build_system(cfg)?;
    let n = initial_spectrum(cfg, &sys)?;
    let law = amplitude_law(cfg, &n);
    let d = &cfg.dynamics;
    let mut times: Vec<f64> = cfg
        .ensemble
        .snapshot_times
        .iter()
        .copied()
        .filter(|&t| t <= d.t_end)
        .collect();
    if times.last() != Some(&d.t_end) {
        times.push(d.t_end);
    }

    let mut ens = Ensemble::generate(&sys, &law, seed, cfg.ensemble.members)?;
    let expansion = expansion_check(
        &sys,
        &ens.members[0],
        d.t_expansion
            .unwrap_or_else(|| sys.default_expansion_time()),
        d.dt,
    )?;
    let dim = sys.grid().dim();
    let mut spectra = table(&header(
        &["seed", "time", "mode"],
        dim,
        &["omega", "n", "stderr"],
    ));
    let mut fields = table(&header(
        &["seed", "time", "member", "mode"],
        dim,
        &["re", "im"],
    ));
    let mut snapshots = Vec::new();
    let initial_energy = energy(&sys, &n);
    for &t in &times {
        if t > ens.members[0].time {
            ens = ens.evolve(&sys, t, d.dt)?;
        }
        let est = spectrum(&ens);
        for (l, e) in est.iter().enumerate() {
            let mut row = vec![seed.to_string(), f(t), l.to_string()];
            row.extend(k_cells(&sys, l));
            row.extend([f(sys.freq(l)), f(e.value), f(e.stderr)]);
            spectra.row(row);
        }
        for (m, field) in ens.members.iter().take(d.dump_members).enumerate() {
            for (l, a) in field.amps.iter().enumerate() {
                let mut row = vec![seed.to_string(), f(t), m.to_string(), l.to_string()];
                row.extend(k_cells(&sys, l));
                row.extend([f(a.re), f(a.im)]);
                fields.row(row);
            }
        }
        let means: Vec<f64> = est.iter().map(|e| e.value).collect();
        snapshots.push(json!({
            "time": t,
            "wave_action": means.iter().sum::<f64>(),
            "energy": energy(&sys, &means),
        }));
    }
    out.write_table("spectra.csv", spectra)?;
    out.write_table("fields.csv", fields)?;
    Ok(Outcome::ok(json!({
        "modes": sys.len(),
        "members": ens.len(),
        "nonlinear_time": sys.nonlinear_time(),
        "initial_energy": initial_energy,
        "snapshots": snapshots,
        "expansion": expansion,
    })))
}

pub fn kinetic_run(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let sys = build_system(cfg)?;
    let n0 = initial_spectrum(cfg, &sys)?;
    let delta = delta_for(cfg, &sys)?;
    let k = &cfg.kinetic;
    let t_end = k.t_end.unwrap_or_else(|| sys.nonlinear_time());
    let dt = k.dt.unwrap_or(t_end / 200.0);
    let traj = kinetic::evolve_kinetic(&sys, &n0, t_end, dt, &delta, k.record_every)?;
    let dim = sys.grid().dim();
    let mut t = table(&header(&["time", "mode"], dim, &["n"]));
    for (time, n) in traj.times.iter().zip(&traj.spectra) {
        for (l, v) in n.iter().enumerate() {
            let mut row = vec![f(*time), l.to_string()];
            row.extend(k_cells(&sys, l));
            row.push(f(*v));
            t.row(row);
        }
    }
    out.write_table("kinetic.csv", t)?;
    let last = traj.last();
    Ok(Outcome::ok(json!({
        "delta": delta,
        "t_end": t_end,
        "dt": dt,
        "records": traj.times.len(),
        "clipped": traj.clipped,
        "energy": [energy(&sys, &n0), energy(&sys, last)],
        "stationarity_residual": [
            kinetic::stationarity_residual(&sys, &n0, &delta),
            kinetic::stationarity_residual(&sys, last, &delta),
        ],
    })))
}

pub fn pdf(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let sys = build_system(cfg)?;
    let n = initial_spectrum(cfg, &sys)?;
    let delta = delta_for(cfg, &sys)?;
    let o = &cfg.onemode;
    let j = mode_index(&sys, &o.mode, "onemode.mode")?;
    let eta = kinetic::eta(&sys, &n, &delta)[j];
    let gamma = kinetic::gamma(&sys, &n, &delta)[j];
    if !(eta > 0.0 && gamma > 0.0) {
        return Err(PdfError::Degenerate.into());
    }
    let n_star = eta / gamma;
    let s_max = o.s_max_over_n * n_star;
    let mean0 = o.initial_fraction * n_star;
    let mut p = AmplitudePdf::exponential(mean0, s_max, o.cells, j);
    let t_end = o.t_end_over_relaxation / gamma;
    let dt =
        o.dt.unwrap_or_else(|| CFL * stability_limit(&p, eta, gamma));
    let steps = step_count(t_end, dt);
    let h = t_end / steps as f64;
    let every = (steps / o.snapshots).max(1);

    let mut grid = Table::new(&["time", "cell", "s_lo", "s_hi", "density"]);
    let push = |grid: &mut Table, p: &AmplitudePdf| {
        for i in 0..p.cells() {
            grid.row([
                f(p.time),
                i.to_string(),
                f(p.edges[i]),
                f(p.edges[i + 1]),
                f(p.density[i]),
            ]);
        }
    };
    push(&mut grid, &p);
    for step in 1..=steps {
        p = step_pdf_with_boundary(&p, eta, gamma, h, o.flux)?;
        p.time = step as f64 * h;
        if step % every == 0 || step == steps {
            push(&mut grid, &p);
        }
    }
    out.write_table("pdf.csv", grid)?;

    let stat = stationary_pdf(eta, gamma, o.flux, s_max, o.cells)?;
    let mut st = Table::new(&["cell", "s_center", "evolved", "stationary", "closed_form"]);
    for (i, s) in p.centers().iter().enumerate() {
        st.row([
            i.to_string(),
            f(*s),
            f(p.density[i]),
            f(stat.pdf.density[i]),
            f(stat.density(*s)),
        ]);
    }
    out.write_table("stationary.csv", st)?;

    let factorial = |k: u32| (1..=k).map(f64::from).product::<f64>();
    let m0: Vec<f64> = (0..=4)
        .map(|k| factorial(k) * mean0.powi(k as i32))
        .collect();
    let hierarchy = evolve_moments(&m0, eta, gamma, t_end, h)?;
    let mut mt = Table::new(&["order", "grid", "hierarchy"]);
    for (k, m) in hierarchy.iter().enumerate() {
        mt.row([k.to_string(), f(p.moment(k as u32)), f(*m)]);
    }
    out.write_table("moments.csv", mt)?;

    Ok(Outcome::ok(json!({
        "mode": j,
        "eta": eta,
        "gamma": gamma,
        "stationary_mean": n_star,
        "t_end": t_end,
        "steps": steps,
        "mass": p.mass(),
        "l1_to_stationary": p.l1_distance(&stat.pdf),
        "flux": o.flux,
    })))
}

pub fn peierls(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let sys = build_system(cfg)?;
    let n = initial_spectrum(cfg, &sys)?;
    let delta = delta_for(cfg, &sys)?;
    let pc = &cfg.peierls;
    let active = pc
        .active_modes
        .iter()
        .map(|m| mode_index(&sys, m, "peierls.active_modes"))
        .collect::<Result<Vec<_>, _>>()?;
    let means: Vec<f64> = active.iter().map(|&l| n[l]).collect();
    let s_max: Vec<f64> = means.iter().map(|m| pc.s_max_over_n * m).collect();
    let bath = if pc.frozen_bath {
        Bath::Frozen(n.clone())
    } else {
        Bath::Isolated
    };
    let op = PeierlsOperator::new(&sys, &active, &delta, &bath)?;
    let p0 = JointPdf::product_exponential(&active, &means, &s_max, pc.cells_per_dim)?;
    let t_end = pc.t_end_over_tnl * sys.nonlinear_time();
    let steps = pc.dt.map(|dt| step_count(t_end, dt));
    let p1 = evolve_joint(&p0, &op, t_end, steps)?;

    let mut marg = Table::new(&["mode", "cell", "s_center", "initial", "final"]);
    for (a, &l) in active.iter().enumerate() {
        let h = p0.width(a);
        let (m0, m1) = (p0.marginal(a), p1.marginal(a));
        for i in 0..pc.cells_per_dim {
            marg.row([
                l.to_string(),
                i.to_string(),
                f((i as f64 + 0.5) * h),
                f(m0[i]),
                f(m1[i]),
            ]);
        }
    }
    out.write_table("marginals.csv", marg)?;

    let closure = pc.closure()?;
    let moments = evolve_joint_moments(
        &JointMoments::independent_exponential(&active, &means),
        &op,
        closure,
        t_end,
        steps.unwrap_or(200),
    )?;
    let k = active.len();
    let mut cum = Table::new(&["mode_a", "mode_b", "grid", "moments"]);
    for a in 0..k {
        for b in a..k {
            let mut pa = vec![0u32; k];
            pa[a] += 1;
            let mut pb = vec![0u32; k];
            pb[b] += 1;
            let mut pab = vec![0u32; k];
            pab[a] += 1;
            pab[b] += 1;
            let grid = p1.moment(&pab) - p1.moment(&pa) * p1.moment(&pb);
            cum.row([
                active[a].to_string(),
                active[b].to_string(),
                f(grid),
                f(moments.cumulant(a, b)),
            ]);
        }
    }
    out.write_table("cumulants.csv", cum)?;

    let factorization: Vec<Value> = factorization_residual(&p1)
        .into_iter()
        .map(|((ma, mb), r)| {
            let slot = |m| active.iter().position(|&l| l == m).expect("active mode");
            json!({
                "pair": [ma, mb],
                "residual": r,
                "mutual_information": mutual_information(&p1, slot(ma), slot(mb)),
            })
        })
        .collect();
    Ok(Outcome::ok(json!({
        "active": active,
        "t_end": t_end,
        "closure": closure,
        "mass": p1.mass(),
        "l1_change": p1.l1_distance(&p0),
        "factorization": factorization,
    })))
}

/// Amplitudes are fixed at `√n` whatever the configured law: a member whose
/// amplitude is near zero has no well-defined phase to unwrap.
pub fn phase(cfg: &RunConfig, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let sys = build_system(cfg)?;
    let n = initial_spectrum(cfg, &sys)?;
    let law = AmplitudeLaw::Deterministic {
        amplitudes: n.iter().map(|x| x.sqrt()).collect(),
    };
    let ph = &cfg.phase;
    let zero = sys.grid().zero();
    let skip: Vec<usize> = (0..sys.len())
        .filter(|&l| l == zero || n[l] == 0.0)
        .collect();
    let ens = Ensemble::generate(&sys, &law, seed, cfg.ensemble.members)?;
    let tracks = track_ensemble(&sys, &ens, &[0.0, ph.t_end], ph.dt, &skip)?;

    let delta = BroadenedDelta::new(DeltaKind::FiniteTime, 1.0 / ph.t_end)?;
    let eta = kinetic::eta(&sys, &n, &delta);
    let drift = omega_nl(&sys, &n, &PrincipalValueKernel::finite_time(ph.t_end)?);
    let dim = sys.grid().dim();
    let mut t = table(&header(
        &["seed", "window", "mode"],
        dim,
        &[
            "mean_rate",
            "mean_rate_stderr",
            "predicted_drift",
            "variance_rate",
            "predicted_variance_rate",
        ],
    ));
    for l in (0..sys.len()).filter(|l| !skip.contains(l)) {
        let dphi: Vec<f64> = tracks.iter().map(|tr| tr.at(1, l) - tr.at(0, l)).collect();
        let m = mean_estimate(&dphi);
        let var = dphi.iter().map(|x| (x - m.value).powi(2)).sum::<f64>()
            / (dphi.len().max(2) - 1) as f64;
        let mut row = vec![seed.to_string(), f(ph.t_end), l.to_string()];
        row.extend(k_cells(&sys, l));
        row.extend([
            f(m.value / ph.t_end),
            f(m.stderr / ph.t_end),
            f(drift[l]),
            f(var / ph.t_end),
            f(eta[l] / n[l]),
        ]);
        t.row(row);
    }
    out.write_table("phase.csv", t)?;

    let toy = toy_phase_demo(
        IntegerLaw::Uniform {
            lo: ph.toy_lo,
            hi: ph.toy_hi,
        },
        ph.toy_samples,
        seed,
    )?;
    Ok(Outcome::ok(json!({
        "members": ens.len(),
        "window": ph.t_end,
        "toy": toy,
        "toy_consistent_3_sigma": toy.consistent(3.0),
    })))
}

fn line_system(cfg: &RunConfig, b: i64, coupling: Coupling) -> Result<WaveSystem, CliError> {
    let s = &cfg.system;
    let grid = ModeGrid::new(1, s.length, b)?;
    let disp = Dispersion::from_name(&s.dispersion.name, &s.dispersion.param_list())?;
    Ok(WaveSystem::new(grid, disp, coupling, s.epsilon)?)
}

/// Runs the expansion battery on one-dimensional grids with the configured
/// dispersion and the generic test couplings.
pub fn verify(cfg: &RunConfig, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let v = &cfg.verify;
    let closed = v
        .closed_form_b
        .iter()
        .map(|&b| line_system(cfg, b, acceptance::generic_coupling()))
        .collect::<Result<Vec<_>, _>>()?;
    let battery = line_system(cfg, v.battery_b, acceptance::generic_coupling())?;
    let free = line_system(cfg, 3, acceptance::split_coupling())?;
    let valence = v
        .valence_b
        .iter()
        .map(|&b| line_system(cfg, b, acceptance::generic_coupling()))
        .collect::<Result<Vec<_>, _>>()?;
    let report = run_verification(&VerifyInputs {
        closed_form: &closed,
        battery: &battery,
        self_free: &free,
        valence: &valence,
        t: v.t,
        seed,
    })?;
    let mut t = Table::new(&["check", "passed", "residual", "tolerance", "detail"]);
    for c in &report.checks {
        t.row([
            c.name.clone(),
            c.passed.to_string(),
            f(c.residual),
            f(c.tolerance),
            c.detail.clone().unwrap_or_default(),
        ]);
    }
    out.write_table("verify.csv", t)?;
    Ok(Outcome {
        passed: report.passed,
        report: serde_json::to_value(&report).expect("report serializes"),
    })
}

pub fn accept(
    cfg: &RunConfig,
    seed: Option<u64>,
    out: &mut OutputDir,
) -> Result<Outcome, CliError> {
    let ac = AcceptConfig {
        seed: seed.unwrap_or(AcceptConfig::default().seed),
        mutation: cfg.accept.mutation,
    };
    let mut t = Table::new(&[
        "criterion",
        "measurement",
        "value",
        "target",
        "tolerance",
        "passed",
        "informational",
    ]);
    let mut reports = Vec::new();
    for &id in &cfg.accept.criteria {
        let r = acceptance::run(id, &ac);
        eprintln!("{}", r.summary());
        for m in &r.measurements {
            t.row([
                id.to_string(),
                m.name.clone(),
                f(m.value),
                f(m.target),
                f(m.tolerance),
                m.passed.to_string(),
                m.informational.to_string(),
            ]);
        }
        reports.push(r);
    }
    out.write_table("acceptance.csv", t)?;
    let passed = reports.iter().all(|r| r.passed);
    Ok(Outcome {
        passed,
        report: json!({
            "seed": ac.seed,
            "mutation": ac.mutation,
            "passed": passed,
            "criteria": reports,
        }),
    })
}
