//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Arguments that do not start with `-` select criteria by key substring.
//! With `MCWF_ACCEPTANCE_STRICT=1` any failure makes the process exit with 1.

use std::time::Instant;

use mcwf::engine::{DpControls, StepwiseEngine, TrajectoryRecord};
use mcwf::ensemble::{
    critical_dp, run_ensemble, run_trajectories, summarize, time_average, EnsembleConfig, Estimate,
    Method, TimeAverage,
};
use mcwf::integrating::IntegratingControls;
use mcwf::master::{evolve_master, DensityMatrix};
use mcwf::oracle::{one_step_mean_gap, run_discrete_chain, three_jump_prob, ChainSpec};
use mcwf::rng::trajectory_rng;
use mcwf::series::{deviation, TimeSeries};
use mcwf::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 0x2F1E_55A7;
const N_INDEX: usize = 1;
const KAPPA: f64 = 1.0;
const N_TH: f64 = 5.0;
const FREE_CUTOFF: usize = 110;
const DRIVEN_CUTOFF: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mode(cutoff: usize, n_th: f64, eta: C64, delta: f64, picture: Picture) -> QuantumSystem {
    let p = ModeParams {
        cutoff,
        kappa: KAPPA,
        n_th,
        eta,
        delta,
    };
    make_mode_system(&p, picture).unwrap()
}

fn free_mode(cutoff: usize) -> QuantumSystem {
    mode(
        cutoff,
        N_TH,
        C64::new(0.0, 0.0),
        0.0,
        Picture::NonUnitaryInteraction,
    )
}

fn stepwise(dp: f64, dt_sample: f64, t_final: f64, n: usize, seed: u64) -> EnsembleConfig {
    EnsembleConfig::new(
        Method::Stepwise(DpControls::new(dp, dt_sample, t_final)),
        n,
        seed,
    )
}

/// Ensemble mean of `<n>` on the sampling grid.
fn mean_n(records: &[TrajectoryRecord]) -> Vec<f64> {
    let mut acc = vec![0.0; records[0].n_samples()];
    for r in records {
        assert!(
            r.is_complete(),
            "trajectory {} failed: {:?}",
            r.stream,
            r.failure
        );
        for (a, x) in acc.iter_mut().zip(r.observable(N_INDEX)) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= records.len() as f64);
    acc
}

fn slim(mut records: Vec<TrajectoryRecord>) -> Vec<TrajectoryRecord> {
    records.iter_mut().for_each(|r| r.final_state = Vec::new());
    records
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Shared, lazily computed inputs.
#[derive(Default)]
struct Context {
    free_master: Option<Vec<f64>>,
    free_dp01: Option<Vec<TrajectoryRecord>>,
}

impl Context {
    /// `<n>` of the undriven mode from `|10>` on `0.05 * u`, `u = 0..=100`.
    fn free_master(&mut self) -> &[f64] {
        self.free_master.get_or_insert_with(|| {
            let sys = mode(
                FREE_CUTOFF,
                N_TH,
                C64::new(0.0, 0.0),
                0.0,
                Picture::Interaction,
            );
            let rho0 =
                DensityMatrix::from_pure(&StateVector::fock(10, FREE_CUTOFF).unwrap()).unwrap();
            let sol =
                evolve_master(&rho0, &sys, 0.05, 5.0, &StepControl::new(1e-12, 1e-10)).unwrap();
            sol.series.column("n").unwrap().to_vec()
        })
    }

    fn free_dp01(&mut self) -> &[TrajectoryRecord] {
        self.free_dp01.get_or_insert_with(|| {
            let cfg = stepwise(0.1, 0.05, 5.0, 10_000, SEED + 2);
            slim(
                run_trajectories(
                    &StateVector::fock(10, FREE_CUTOFF).unwrap(),
                    &free_mode(FREE_CUTOFF),
                    &cfg,
                )
                .unwrap(),
            )
        })
    }
}

fn free_grid() -> Vec<f64> {
    TimeSeries::uniform_grid(0.05, 100)
}

fn master_reference(ctx: &mut Context) -> Outcome {
    let exact = |t: f64| N_TH + (10.0 - N_TH) * (-2.0 * KAPPA * t).exp();
    let err = free_grid()
        .iter()
        .zip(ctx.free_master())
        .map(|(&t, n)| (n - exact(t)).abs())
        .fold(0.0, f64::max);
    let sys = mode(40, N_TH, C64::new(0.0, 0.0), 0.0, Picture::Interaction);
    let rho0 = DensityMatrix::from_pure(&StateVector::fock(10, 40).unwrap()).unwrap();
    let t0 = Instant::now();
    evolve_master(&rho0, &sys, 0.05, 5.0, &StepControl::new(1e-12, 1e-10)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        err < 1e-6 && secs < 10.0,
        format!("max |<n> - closed form| = {err:.2e} at cutoff {FREE_CUTOFF}; cutoff 40 run took {secs:.2} s"),
    )
}

fn master_agreement(ctx: &mut Context) -> Outcome {
    let master = ctx.free_master().to_vec();
    let records = ctx.free_dp01();
    let grid = free_grid();
    let d_all = deviation(&grid, &mean_n(records), &master).unwrap();
    let d_1k = deviation(&grid, &mean_n(&records[..1000]), &master).unwrap();
    outcome(
        d_all < 0.03 && d_1k > d_all,
        format!("deviation {d_all:.4} with 10^4 trajectories, {d_1k:.4} with 10^3"),
    )
}

fn sqrt_n_law(ctx: &mut Context) -> Outcome {
    let master = ctx.free_master().to_vec();
    let grid = free_grid();
    let cfg = stepwise(0.02, 0.05, 5.0, 10_000, SEED + 3);
    let records = slim(
        run_trajectories(
            &StateVector::fock(10, FREE_CUTOFF).unwrap(),
            &free_mode(FREE_CUTOFF),
            &cfg,
        )
        .unwrap(),
    );
    let sizes = [100usize, 1000, 10_000];
    let devs: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let groups: Vec<f64> = records
                .chunks_exact(n)
                .map(|g| deviation(&grid, &mean_n(g), &master).unwrap())
                .collect();
            groups.iter().sum::<f64>() / groups.len() as f64
        })
        .collect();
    let lx: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = devs.iter().map(|d| d.ln()).collect();
    let slope = fit_slope(&lx, &ly);
    outcome(
        (slope + 0.5).abs() <= 0.1,
        format!(
            "slope {slope:.3}; mean deviations {:.4} / {:.4} / {:.4}",
            devs[0], devs[1], devs[2]
        ),
    )
}

/// Pooled per-step mean dt divided by `dp` for `dp = 0.01 .. 0.99`.
fn dp_scan(dt_sample: f64, n: usize, seed: u64) -> Vec<(f64, Estimate)> {
    let sys = free_mode(FREE_CUTOFF);
    let psi = StateVector::fock(10, FREE_CUTOFF).unwrap();
    (1..100)
        .map(|i| {
            let dp = i as f64 * 0.01;
            let r = run_ensemble(&psi, &sys, &stepwise(dp, dt_sample, 5.0, n, seed + i)).unwrap();
            let m = r.stats.mean_dt;
            (
                dp,
                Estimate {
                    mean: m.mean / dp,
                    se: m.se / dp,
                },
            )
        })
        .collect()
}

/// Adjacent grid pairs whose difference exceeds three pooled standard errors.
fn discontinuities(scan: &[(f64, Estimate)]) -> Vec<(f64, f64, f64)> {
    scan.windows(2)
        .filter_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let z = (b.1.mean - a.1.mean) / a.1.se.hypot(b.1.se);
            (z.abs() > 3.0).then_some((a.0, b.0, z))
        })
        .collect()
}

fn show(flags: &[(f64, f64, f64)]) -> String {
    let parts: Vec<String> = flags
        .iter()
        .map(|f| format!("{:.2}-{:.2} ({:+.1} SE)", f.0, f.1, f.2))
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(", ")
    }
}

fn criticality(_: &mut Context) -> Outcome {
    let sys = free_mode(FREE_CUTOFF);
    let psi = StateVector::fock(10, FREE_CUTOFF).unwrap();
    let below = run_ensemble(&psi, &sys, &stepwise(0.49, 0.05, 5.0, 2000, SEED + 40))
        .unwrap()
        .stats;
    let above = run_ensemble(&psi, &sys, &stepwise(0.51, 0.05, 5.0, 2000, SEED + 41))
        .unwrap()
        .stats;
    let (yb, ya) = (below.mean_dt.mean / 0.49, above.mean_dt.mean / 0.51);
    let se = (below.mean_dt.se / 0.49).hypot(above.mean_dt.se / 0.51);
    let jump = (ya - yb) / se;
    let flags = discontinuities(&dp_scan(0.25, 200, SEED + 400));
    outcome(
        below.full_step_fraction == 0.0 && above.full_step_fraction > 0.0 && jump > 3.0 && flags.is_empty(),
        format!(
            "critical dp {:.3}; full-step fraction {:.1e} / {:.2e}; mean dt/dp {:.3e} -> {:.3e} ({jump:.1} SE); Dt = 0.25 flags: {}",
            critical_dp(0, KAPPA, N_TH, 0.05),
            below.full_step_fraction,
            above.full_step_fraction,
            yb,
            ya,
            show(&flags)
        ),
    )
}

fn double_criticality(_: &mut Context) -> Outcome {
    let dt = 0.015625;
    let flags = discontinuities(&dp_scan(dt, 200, SEED + 500));
    let near = |c: f64| {
        flags
            .iter()
            .any(|f| f.0 >= c - 0.02 - 1e-9 && f.1 <= c + 0.02 + 1e-9)
    };
    let (c0, c1) = (
        critical_dp(0, KAPPA, N_TH, dt),
        critical_dp(1, KAPPA, N_TH, dt),
    );
    outcome(
        near(c0) && near(c1),
        format!("critical dp {c0} and {c1}; flagged: {}", show(&flags)),
    )
}

fn jump_bookkeeping(ctx: &mut Context) -> Outcome {
    let psi = StateVector::fock(10, FREE_CUTOFF).unwrap();
    let sys = free_mode(FREE_CUTOFF);
    let diff = |r: &TrajectoryRecord| r.stats.jumps[0] as f64 - r.stats.jumps[1] as f64;
    let mut small: Vec<f64> = ctx.free_dp01().iter().map(diff).collect();
    let mut cfg = stepwise(0.1, 0.05, 5.0, 10_000, SEED + 2);
    cfg.first_index = 10_000;
    small.extend(run_trajectories(&psi, &sys, &cfg).unwrap().iter().map(diff));
    let large: Vec<f64> = run_trajectories(&psi, &sys, &stepwise(0.9, 0.05, 5.0, 20_000, SEED + 6))
        .unwrap()
        .iter()
        .map(diff)
        .collect();
    let (s, l) = (Estimate::from_values(&small), Estimate::from_values(&large));
    outcome(
        (s.mean - 5.0).abs() <= 0.1 && (l.mean - 5.0).abs() > 3.0 * l.se,
        format!(
            "emissions - absorptions: dp 0.1 {:.3} +- {:.3}, dp 0.9 {:.3} +- {:.3} ({:.1} SE from 5)",
            s.mean,
            s.se,
            l.mean,
            l.se,
            (l.mean - 5.0).abs() / l.se
        ),
    )
}

fn control_contention(_: &mut Context) -> Outcome {
    let run = |eta: f64, dp: f64, cutoff: usize, n: usize, seed: u64| {
        let sys = mode(
            cutoff,
            N_TH,
            C64::new(eta, 0.0),
            0.0,
            Picture::NonUnitaryInteraction,
        );
        let r = run_ensemble(
            &StateVector::fock(10, cutoff).unwrap(),
            &sys,
            &stepwise(dp, 0.05, 1.0, n, seed),
        )
        .unwrap();
        let measured = r.stats.time_weighted_dt.mean;
        (
            measured,
            measured / (dp * r.stats.mean_inverse_rate.mean) - 1.0,
        )
    };
    let (_, e1) = run(1.0, 0.05, DRIVEN_CUTOFF, 100, SEED + 70);
    let (_, e3) = run(3.0, 0.05, DRIVEN_CUTOFF, 100, SEED + 71);
    let large: Vec<(f64, f64)> = [1.0, 3.0, 5.0]
        .iter()
        .enumerate()
        .map(|(i, &eta)| run(eta, 0.8, 120, 100, SEED + 72 + i as u64))
        .collect();
    let e5 = large[2].1;
    let monotone = large.windows(2).all(|w| w[1].0 < w[0].0);
    outcome(
        e1.abs() <= 0.1 && e3.abs() <= 0.1 && e5.abs() > 0.3 && monotone,
        format!(
            "relative offset from dp <1/r>: eta 1 {e1:+.3}, eta 3 {e3:+.3} at dp 0.05, eta 5 {e5:+.3} at dp 0.8; mean dt at dp 0.8 for eta 1/3/5: {:.3e} / {:.3e} / {:.3e}",
            large[0].0, large[1].0, large[2].0
        ),
    )
}

/// Up and down rates of the thermal photon-number chain.
fn up(n: usize) -> f64 {
    2.0 * KAPPA * N_TH * (n as f64 + 1.0)
}

fn down(n: usize) -> f64 {
    2.0 * KAPPA * (N_TH + 1.0) * n as f64
}

/// `(Q^2 f)(n) / 2` for `f(m) = m`: the `dt^2` coefficient of `E[X(dt)]`.
fn brute_force_gap_coefficient(n: usize) -> f64 {
    let drift = |m: usize| up(m) - down(m);
    let q2 = up(n) * (drift(n + 1) - drift(n))
        + if n > 0 {
            down(n) * (drift(n - 1) - drift(n))
        } else {
            0.0
        };
    q2 / 2.0
}

fn oracle_scaling(_: &mut Context) -> Outcome {
    let spec = ChainSpec::new(KAPPA, N_TH).unwrap();
    let coef = brute_force_gap_coefficient(10);
    let ratio_at = |dt: f64| one_step_mean_gap(10, dt, &spec).unwrap() / (dt * dt) / coef;
    let conv: Vec<f64> = [1e-3, 1e-4, 1e-5].iter().map(|&dt| ratio_at(dt)).collect();
    let dt = 1e-3;
    let doubling =
        one_step_mean_gap(10, 2.0 * dt, &spec).unwrap() / one_step_mean_gap(10, dt, &spec).unwrap();
    let g = [up(0) + down(0), up(1) + down(1), up(2) + down(2)];
    let dts: Vec<f64> = (0..=20)
        .map(|k| 1e-4 * 10f64.powf(k as f64 / 10.0))
        .collect();
    let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = dts
        .iter()
        .map(|&d| three_jump_prob(g, d).unwrap().ln())
        .collect();
    let slope = fit_slope(&lx, &ly);
    outcome(
        (conv[2] - 1.0).abs() < 0.01 && (3.5..=4.5).contains(&doubling) && (slope - 3.0).abs() <= 0.1,
        format!(
            "gap/dt^2 over brute-force coefficient {coef}: {:.5} / {:.5} / {:.5}; gap(2dt)/gap(dt) = {doubling:.3}; three-jump slope {slope:.3}",
            conv[0], conv[1], conv[2]
        ),
    )
}

fn chain_equivalence(_: &mut Context) -> Outcome {
    let (n0, runs, cutoff) = (10usize, 100_000usize, 120usize);
    let ctl = DpControls::new(0.25, 0.05, 1.0);
    let cfg = EnsembleConfig::new(Method::Stepwise(ctl), runs, SEED + 90);
    let records = run_trajectories(
        &StateVector::fock(n0, cutoff).unwrap(),
        &free_mode(cutoff),
        &cfg,
    )
    .unwrap();
    let mut engine = vec![0u64; cutoff];
    for r in &records {
        assert!(
            r.is_complete(),
            "trajectory {} failed: {:?}",
            r.stream,
            r.failure
        );
        engine[r.observable(N_INDEX).last().unwrap().round() as usize] += 1;
    }
    drop(records);
    let spec = ChainSpec::new(KAPPA, N_TH).unwrap();
    let mut chain = vec![0u64; cutoff];
    for i in 0..runs as u64 {
        let run = run_discrete_chain(
            n0,
            &spec,
            &ctl,
            f64::INFINITY,
            &mut trajectory_rng(SEED + 91, i),
        )
        .unwrap();
        chain[*run.samples.last().unwrap()] += 1;
    }
    // Merge neighbouring states until each bin expects at least five per sample.
    let mut bins = Vec::new();
    let (mut a, mut b) = (0u64, 0u64);
    for (x, y) in engine.iter().zip(&chain) {
        a += x;
        b += y;
        if a + b >= 10 {
            bins.push((a, b));
            a = 0;
            b = 0;
        }
    }
    if a + b > 0 {
        let last = bins.last_mut().unwrap();
        last.0 += a;
        last.1 += b;
    }
    let stat: f64 = bins
        .iter()
        .map(|&(a, b)| (a as f64 - b as f64).powi(2) / (a + b) as f64)
        .sum();
    let dof = bins.len() - 1;
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    outcome(
        p > 0.01,
        format!("chi-square {stat:.1} on {dof} degrees of freedom, p = {p:.3}"),
    )
}

/// `rho + dt L[rho]` for a pure `rho`, with `H = 0`.
fn euler_lindblad(psi: &[C64], jumps: &[Vec<C64>], dt: f64) -> Vec<C64> {
    let d = psi.len();
    let mut rho: Vec<C64> = (0..d * d).map(|k| psi[k / d] * psi[k % d].conj()).collect();
    let base = rho.clone();
    for j in jumps {
        let jd = |r: usize, c: usize| j[c * d + r].conj();
        let mut jtj = vec![C64::new(0.0, 0.0); d * d];
        for r in 0..d {
            for c in 0..d {
                jtj[r * d + c] = (0..d).map(|k| jd(r, k) * j[k * d + c]).sum();
            }
        }
        for r in 0..d {
            for c in 0..d {
                let mut s = C64::new(0.0, 0.0);
                for k in 0..d {
                    for l in 0..d {
                        s += j[r * d + k] * base[k * d + l] * jd(l, c);
                    }
                }
                let anti: C64 = (0..d)
                    .map(|k| jtj[r * d + k] * base[k * d + c] + base[r * d + k] * jtj[k * d + c])
                    .sum();
                rho[r * d + c] += dt * (s - 0.5 * anti);
            }
        }
    }
    rho
}

fn diad_residual(dt: f64, draws: usize, seed: u64) -> f64 {
    let d = 16;
    let sys = mode(
        d,
        N_TH,
        C64::new(0.0, 0.0),
        0.0,
        Picture::NonUnitaryInteraction,
    );
    let mut psi0 = vec![C64::new(0.0, 0.0); d];
    psi0[9] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    psi0[10] = psi0[9];
    let ctl = DpControls::new(0.5, dt, dt).without_rejection();
    let mut engine = StepwiseEngine::new(&sys, ctl, StepControl::default()).unwrap();
    let mut rng = trajectory_rng(seed, 0);
    let mut counts = [0u64; 3];
    let mut states: [Option<Vec<C64>>; 3] = [None, None, None];
    let mut psi = psi0.clone();
    for _ in 0..draws {
        psi.copy_from_slice(&psi0);
        engine.reset(&psi).unwrap();
        let adv = engine.advance(&mut psi, 0.0, dt, &mut rng).unwrap();
        assert_eq!(adv.record.dt_did, dt);
        let k = adv.record.jump_index.map_or(0, |m| m + 1);
        counts[k] += 1;
        if states[k].is_none() {
            let n = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            states[k] = Some(psi.iter().map(|z| z / n).collect());
        }
    }
    let mut rho = vec![C64::new(0.0, 0.0); d * d];
    for (c, s) in counts.iter().zip(&states) {
        if let Some(s) = s {
            let w = *c as f64 / draws as f64;
            for r in 0..d {
                for k in 0..d {
                    rho[r * d + k] += w * s[r] * s[k].conj();
                }
            }
        }
    }
    let jumps: Vec<Vec<C64>> = sys.jumps().iter().map(|j| j.to_dense()).collect();
    let target = euler_lindblad(&psi0, &jumps, dt);
    rho.iter()
        .zip(&target)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn one_step_diad(_: &mut Context) -> Outcome {
    let r1 = diad_residual(1e-3, 1_000_000, SEED + 100);
    let r2 = diad_residual(5e-4, 1_000_000, SEED + 101);
    let factor = r1 / r2;
    outcome(
        (3.0..=5.0).contains(&factor),
        format!("residual {r1:.3e} at dt 1e-3, {r2:.3e} at dt 5e-4, factor {factor:.2}"),
    )
}

fn coherent_decay(_: &mut Context) -> Outcome {
    let cutoff = 40;
    let sys = mode(
        cutoff,
        0.0,
        C64::new(0.0, 0.0),
        0.0,
        Picture::NonUnitaryInteraction,
    );
    let psi = StateVector::coherent(C64::new(2.0, 0.0), cutoff)
        .unwrap()
        .state;
    let cfg = stepwise(0.1, 0.05, 5.0, 1, SEED + 110);
    let rec = run_trajectories(&psi, &sys, &cfg).unwrap().remove(0);
    let err = free_grid()
        .iter()
        .zip(rec.observable(N_INDEX))
        .map(|(&t, n)| (n - 4.0 * (-2.0 * KAPPA * t).exp()).abs())
        .fold(0.0, f64::max);
    outcome(
        rec.is_complete() && err < 1e-6,
        format!(
            "max |<n> - 4 exp(-2t)| = {err:.2e} over {} jumps",
            rec.stats.jumps[0]
        ),
    )
}

/// Deviation of the ensemble mean from `master` and its bootstrap standard error.
fn deviation_with_error(
    series: &[Vec<f64>],
    grid: &[f64],
    master: &[f64],
    seed: u64,
) -> (f64, f64) {
    let n = series.len();
    let mean_of = |idx: &mut dyn Iterator<Item = usize>| {
        let mut acc = vec![0.0; grid.len()];
        for i in idx {
            acc.iter_mut().zip(&series[i]).for_each(|(a, x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    };
    let dev = deviation(grid, &mean_of(&mut (0..n)), master).unwrap();
    let mut rng = trajectory_rng(seed, 0);
    let boot: Vec<f64> = (0..200)
        .map(|_| {
            let mut idx = (0..n)
                .map(|_| rng.random_range(0..n))
                .collect::<Vec<_>>()
                .into_iter();
            deviation(grid, &mean_of(&mut idx), master).unwrap()
        })
        .collect();
    let m = boot.iter().sum::<f64>() / boot.len() as f64;
    let sd = (boot.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (boot.len() - 1) as f64).sqrt();
    (dev, sd)
}

fn method_parity(_: &mut Context) -> Outcome {
    let (t_final, dt) = (0.5, 0.05);
    let eta = C64::new(1.0, 0.0);
    let psi = StateVector::fock(10, DRIVEN_CUTOFF).unwrap();
    let rho0 = DensityMatrix::from_pure(&psi).unwrap();
    let sys_ip = mode(DRIVEN_CUTOFF, N_TH, eta, 0.0, Picture::Interaction);
    let master =
        evolve_master(&rho0, &sys_ip, dt, t_final, &StepControl::new(1e-12, 1e-10)).unwrap();
    let master_n = master.series.column("n").unwrap().to_vec();
    let sys = mode(
        DRIVEN_CUTOFF,
        N_TH,
        eta,
        0.0,
        Picture::NonUnitaryInteraction,
    );
    let grid = TimeSeries::uniform_grid(dt, 10);
    let series = |cfg: EnsembleConfig| -> Vec<Vec<f64>> {
        run_trajectories(&psi, &sys, &cfg)
            .unwrap()
            .iter()
            .map(|r| {
                assert!(
                    r.is_complete(),
                    "trajectory {} failed: {:?}",
                    r.stream,
                    r.failure
                );
                r.observable(N_INDEX)
            })
            .collect()
    };
    let mut ictl = IntegratingControls::new(dt, t_final);
    ictl.norm_tol = 1e-3;
    ictl.max_iters = 5;
    let integ = series(EnsembleConfig::new(
        Method::Integrating(ictl),
        10_000,
        SEED + 120,
    ));
    let (di, si) = deviation_with_error(&integ, &grid, &master_n, SEED + 122);
    let step = series(stepwise(0.02, dt, t_final, 10_000, SEED + 121));
    let (ds, ss) = deviation_with_error(&step, &grid, &master_n, SEED + 123);
    let pooled = si.hypot(ss);
    outcome(
        (di - ds).abs() <= 2.0 * pooled,
        format!("deviation integrating {di:.2e} +- {si:.1e}, stepwise {ds:.2e} +- {ss:.1e}"),
    )
}

fn picture_invariance(_: &mut Context) -> Outcome {
    let (cutoff, n_th, delta) = (40, 1.0, 0.7);
    let eta = C64::new(1.0, 0.5);
    let psi = StateVector::fock(2, cutoff).unwrap();
    let rho0 = DensityMatrix::from_pure(&psi).unwrap();
    let columns = ["re_a", "im_a", "n"];
    let masters: Vec<_> = Picture::ALL
        .iter()
        .map(|&p| {
            evolve_master(
                &rho0,
                &mode(cutoff, n_th, eta, delta, p),
                0.1,
                2.0,
                &StepControl::new(1e-12, 1e-10),
            )
            .unwrap()
        })
        .collect();
    let mut master_gap: f64 = 0.0;
    for m in &masters[1..] {
        for c in columns {
            for (a, b) in masters[0]
                .series
                .column(c)
                .unwrap()
                .iter()
                .zip(m.series.column(c).unwrap())
            {
                master_gap = master_gap.max((a - b).abs());
            }
        }
    }
    let ensembles: Vec<_> = Picture::ALL
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            run_ensemble(
                &psi,
                &mode(cutoff, n_th, eta, delta, p),
                &stepwise(0.05, 0.1, 2.0, 2000, SEED + 130 + i as u64),
            )
            .unwrap()
        })
        .collect();
    let mut max_z: f64 = 0.0;
    for e in &ensembles[1..] {
        for c in columns {
            let se = format!("se_{c}");
            let (m0, s0) = (
                ensembles[0].column(c),
                ensembles[0].standard_error.column(&se).unwrap(),
            );
            let (m1, s1) = (e.column(c), e.standard_error.column(&se).unwrap());
            for u in 1..m0.len() {
                max_z = max_z.max((m0[u] - m1[u]).abs() / s0[u].hypot(s1[u]));
            }
        }
    }
    let sys = mode(
        DRIVEN_CUTOFF,
        N_TH,
        C64::new(1.0, 0.0),
        2.0,
        Picture::NonUnitaryInteraction,
    );
    let psi = StateVector::fock(10, DRIVEN_CUTOFF).unwrap();
    let mut ctl = DpControls::new(0.05, 0.1, 5.0);
    let plain = run_trajectories(
        &psi,
        &sys,
        &EnsembleConfig::new(Method::Stepwise(ctl), 1, SEED + 133),
    )
    .unwrap()
    .remove(0);
    ctl.renormalize = false;
    let raw = run_trajectories(
        &psi,
        &sys,
        &EnsembleConfig::new(Method::Stepwise(ctl), 1, SEED + 133),
    )
    .unwrap()
    .remove(0);
    let unstable = raw.max_norm_drift > 1e3 || raw.failure.is_some();
    outcome(
        master_gap < 1e-6 && max_z <= 4.0 && plain.is_complete() && unstable,
        format!(
            "master pictures differ by {master_gap:.1e}; largest MCWF gap {max_z:.2} SE; norm drift {:.3} renormalized, {:.2e} without{}",
            plain.max_norm_drift,
            raw.max_norm_drift,
            raw.failure.as_ref().map_or(String::new(), |f| format!(" (stopped: {})", f.error))
        ),
    )
}

fn time_averaging(_: &mut Context) -> Outcome {
    let cutoff = 120;
    let sys = free_mode(cutoff);
    let mut cfg = stepwise(0.1, 0.05, 500.0, 1, SEED + 140);
    cfg.record_steps = true;
    let records = run_trajectories(&StateVector::fock(5, cutoff).unwrap(), &sys, &cfg).unwrap();
    let rec = &records[0];
    assert!(rec.is_complete());
    let grid: Vec<(f64, Option<f64>)> = rec
        .observable(N_INDEX)
        .into_iter()
        .map(|n| (n, None))
        .collect();
    let equal_time = time_average(&grid, TimeAverage::EqualTime).unwrap();
    let steps: Vec<(f64, Option<f64>)> = rec
        .steps
        .iter()
        .filter(|s| !s.rejected_layer2)
        .map(|s| (s.tracked_before.unwrap(), Some(s.dt_did)))
        .collect();
    let weighted = time_average(&steps, TimeAverage::EqualSteps).unwrap();
    let unweighted_samples: Vec<(f64, Option<f64>)> = steps.iter().map(|s| (s.0, None)).collect();
    let unweighted = time_average(&unweighted_samples, TimeAverage::EqualTime).unwrap();
    let corr = summarize(&records, &sys, 0.05, 0.0)
        .unwrap()
        .stats
        .dt_tracked_correlation
        .unwrap();
    // Negative correlation means high n is visited by more, shorter steps.
    let expected_sign = -corr.signum();
    // n relaxes at rate 2 kappa with variance nTh (nTh + 1).
    let se = (2.0 * N_TH * (N_TH + 1.0) / (2.0 * KAPPA) / 500.0).sqrt();
    outcome(
        (equal_time / N_TH - 1.0).abs() <= 0.03
            && (weighted / N_TH - 1.0).abs() <= 0.03
            && corr < 0.0
            && (unweighted - N_TH).signum() == expected_sign,
        format!(
            "equal-time {equal_time:.3}, step-weighted {weighted:.3} (single-trajectory SE {se:.3}), unweighted {unweighted:.3}; dt-n correlation {corr:.3}"
        ),
    )
}

type Criterion = (&'static str, &'static str, fn(&mut Context) -> Outcome);

const CRITERIA: [Criterion; 14] = [
    (
        "master",
        "master solver matches the thermal closed form",
        master_reference,
    ),
    (
        "ensemble",
        "stepwise ensemble converges to the master solution",
        master_agreement,
    ),
    ("sqrtn", "deviation falls as one over root N", sqrt_n_law),
    (
        "critical",
        "criticality at the full-step threshold",
        criticality,
    ),
    (
        "double",
        "two critical points at a short sampling interval",
        double_criticality,
    ),
    ("jumps", "mean jump balance", jump_bookkeeping),
    (
        "contention",
        "jump-probability control against ODE control",
        control_contention,
    ),
    (
        "oracle",
        "one-step gap and three-jump scaling",
        oracle_scaling,
    ),
    (
        "chain",
        "engine and birth-death chain agree in distribution",
        chain_equivalence,
    ),
    (
        "diad",
        "one-step ensemble reproduces the master equation",
        one_step_diad,
    ),
    (
        "coherent",
        "coherent decay is invariant under jumps",
        coherent_decay,
    ),
    (
        "parity",
        "integrating and stepwise methods agree",
        method_parity,
    ),
    (
        "picture",
        "picture invariance and renormalization",
        picture_invariance,
    ),
    ("average", "time-averaging rules", time_averaging),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let strict = std::env::var("MCWF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut ctx = Context::default();
    let mut failed = 0;
    let mut ran = 0;
    for (key, name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = check(&mut ctx);
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "[{}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
