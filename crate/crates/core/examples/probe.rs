//! Development probe. Not part of the deliverable; removed before release.

use std::f64::consts::{PI, TAU};

use stocsf_core::dynamics::{self, FlowConfig, Scheme};
use stocsf_core::geometry::{self, CurvatureState, Point};
use stocsf_core::noise;
use stocsf_core::oracles;

fn circle_state(r0: f64, n: usize) -> CurvatureState {
    CurvatureState::new(vec![1.0 / r0; n], TAU * r0, 0.0).unwrap()
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "e1" => e1_blowup_stop(),
        "e2" => e2_scheme_agreement(),
        "e3" => e3_area_law(),
        "e4" => e4_strong_order(),
        "e5" => e5_gbm_variance(),
        "e9" => e9_circle_reference(),
        "e10" => e10_exact_length_residual(),
        "turn" => turning_conservation(),
        "e3b" => true_csf_area_residual(),
        "e3c" => transport_term_comparison(),
        _ => eprintln!("unknown probe '{which}'"),
    }
}

fn e1_blowup_stop() {
    let config = FlowConfig::new(0.0, 128, 1e-5, 0.6, Scheme::Deterministic);
    let path = noise::sample_path(0, 1e-5, 1).unwrap();
    let t0 = std::time::Instant::now();
    let record = dynamics::run_flow(&circle_state(1.0, 128), &config, &path, 1000).unwrap();
    println!(
        "stop reason: {}, stop time: {}, final L: {}, sup_f: {}, wall: {:.2}s",
        record.stop_reason,
        record.stop_time,
        record.final_snapshot().length,
        record.final_snapshot().diagnostics.sup_f,
        t0.elapsed().as_secs_f64()
    );
    // Also criterion-1 style run: t_end = 0.4
    let config = FlowConfig::new(0.0, 128, 1e-5, 0.4, Scheme::Deterministic);
    let t0 = std::time::Instant::now();
    let record = dynamics::run_flow(&circle_state(1.0, 128), &config, &path, 100).unwrap();
    let mut worst_rel = 0.0f64;
    let mut worst_turn = 0.0f64;
    let mut worst_res = 0.0f64;
    for s in &record.snapshots {
        let exact = TAU * (1.0 - 2.0 * s.t).sqrt();
        worst_rel = worst_rel.max((s.length - exact).abs() / exact);
        worst_turn = worst_turn.max((s.length * s.curvature.iter().sum::<f64>() / s.curvature.len() as f64 - TAU).abs());
        worst_res = worst_res.max(s.diagnostics.exact_length_residual);
    }
    println!(
        "criterion1: reason {}, max rel L err {:.3e}, max |Lmean(f)-2pi| {:.3e}, max exact-length residual {:.3e}, wall {:.2}s, snapshots {}",
        record.stop_reason, worst_rel, worst_turn, worst_res,
        t0.elapsed().as_secs_f64(), record.snapshots.len()
    );
}

fn e2_scheme_agreement() {
    // EM (Ito) vs Heun (Strat) on shared coarsened paths.
    let n = 32;
    let t_end = 0.1;
    let sigma = 0.1;
    let base_dt = 2e-3;
    let levels = 6;
    let finest_factor = 1usize << (levels - 1);
    let fine_dt = base_dt / finest_factor as f64;
    let n_fine = (t_end / fine_dt).round() as usize;

    let mut mean_sups = vec![0.0f64; levels];
    let mut all_pass_2 = 0;
    let mut all_pass_13 = 0;
    let trials = 100;
    for seed in 0..trials {
        let fine = noise::sample_path(seed, fine_dt, n_fine).unwrap();
        let mut sups = Vec::new();
        for j in 0..levels {
            let dt = base_dt / (1u64 << j) as f64;
            let path = fine.coarsen(finest_factor >> j).unwrap();
            let cfg_em = FlowConfig::new(sigma, n, dt, t_end, Scheme::EulerMaruyama);
            let cfg_heun = FlowConfig::new(sigma, n, dt, t_end, Scheme::HeunStratonovich);
            let mut a = circle_state(1.0, n);
            let mut b = circle_state(1.0, n);
            let mut sup = 0.0f64;
            for &dw in path.increments() {
                a = dynamics::advance(&a, &cfg_em, dw).unwrap();
                b = dynamics::advance(&b, &cfg_heun, dw).unwrap();
                let diff = (a.length - b.length).abs()
                    + a.curvature
                        .iter()
                        .zip(&b.curvature)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                sup = sup.max(diff);
            }
            sups.push(sup);
        }
        let ratios: Vec<f64> = sups.windows(2).map(|w| w[0] / w[1]).collect();
        if seed < 8 {
            println!("seed {seed}: sups {sups:?} ratios {ratios:?}");
        }
        if ratios.iter().all(|&r| r >= 2.0) {
            all_pass_2 += 1;
        }
        if ratios.iter().all(|&r| r >= 1.3) {
            all_pass_13 += 1;
        }
        for (acc, s) in mean_sups.iter_mut().zip(&sups) {
            *acc += s / trials as f64;
        }
    }
    println!("of {trials} seeds: all-ratios>=2.0 {all_pass_2}, all-ratios>=1.3 {all_pass_13}");
    let mean_ratios: Vec<f64> = mean_sups.windows(2).map(|w| w[0] / w[1]).collect();
    println!("seed-averaged sups {mean_sups:?}");
    println!("seed-averaged ratios {mean_ratios:?}");
}

fn e3_area_law() {
    // Circle to t = 0.4.
    let config = FlowConfig::new(0.0, 128, 1e-5, 0.4, Scheme::Deterministic);
    let path = noise::sample_path(0, 1e-5, 1).unwrap();
    let record = dynamics::run_flow(&circle_state(1.0, 128), &config, &path, 400).unwrap();
    let residuals = oracles::deterministic_area_law(&record).unwrap();
    let worst = residuals.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    println!("circle area-law worst residual to t=0.4: {worst:.3e}");

    // Ellipse (2,1) to t = 0.5 (half the area-law extinction time).
    let pts: Vec<Point> = (0..4096)
        .map(|i| {
            let t = TAU * i as f64 / 4096.0;
            Point::new(2.0 * t.cos(), t.sin())
        })
        .collect();
    let curve = geometry::Curve::closed(pts).unwrap();
    let state = geometry::curvature_from_curve(&curve, 128).unwrap();
    let config = FlowConfig::new(0.0, 128, 1e-5, 0.5, Scheme::Deterministic);
    let record = dynamics::run_flow(&state, &config, &path, 500).unwrap();
    println!("ellipse run: {} to t = {}", record.stop_reason, record.stop_time);
    let residuals = oracles::deterministic_area_law(&record).unwrap();
    let worst = residuals.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    println!("ellipse area-law worst residual to t=0.5: {worst:.3e}");
    for (t, r) in residuals.iter().step_by(20) {
        println!("  t={t:.3} residual={r:.4e}");
    }
    let last = record.final_snapshot();
    println!(
        "  final turning {:.6}, closure defect {:.3e}",
        last.diagnostics.turning_number, last.diagnostics.closure_defect
    );
}

fn e4_strong_order() {
    let initial = circle_state(1.0, 64);
    for (sigma, label) in [(0.1, "sigma=0.1"), (0.0, "sigma=0")] {
        let config = FlowConfig::new(sigma, 64, 4e-4, 0.1, Scheme::EulerMaruyama);
        let seeds: Vec<u64> = (0..8).collect();
        let t0 = std::time::Instant::now();
        let est = oracles::estimate_strong_order(&initial, &config, &seeds, 4).unwrap();
        println!(
            "{label}: fitted order {:.3}, errors {:?}, excluded {:?}, wall {:.2}s",
            est.fitted_order,
            est.errors,
            est.excluded_seeds,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn e5_gbm_variance() {
    // f = 0 ensemble via run_flow directly.
    let sigma = 0.2;
    let t = 0.5;
    let dt = 1e-3;
    let count = 10_000;
    let n_steps = 500;
    let mut logs = Vec::with_capacity(count);
    let t0 = std::time::Instant::now();
    for i in 0..count as u64 {
        let path = noise::sample_path(1000 + i, dt, n_steps).unwrap();
        let config = FlowConfig::new(sigma, 8, dt, t, Scheme::EulerMaruyama).with_seed(1000 + i);
        let initial = CurvatureState::new(vec![0.0; 8], 1.0, 0.0).unwrap();
        let record = dynamics::run_flow(&initial, &config, &path, n_steps).unwrap();
        logs.push(record.final_snapshot().length.ln());
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let expected = 4.0 * sigma * sigma * PI * PI * t;
    println!(
        "GBM ensemble: mean log L {mean:.4}, var {var:.5} vs expected {expected:.5} (ratio {:.4}), wall {:.2}s",
        var / expected,
        t0.elapsed().as_secs_f64()
    );
}

fn e9_circle_reference() {
    let sigma = 0.1;
    let dt: f64 = 1e-5;
    let t_end = 0.1;
    let n = 64;
    for seed in [7u64, 8, 9] {
        let n_coarse = (t_end / dt).round() as usize;
        let fine = noise::sample_path(seed, dt / 100.0, 100 * n_coarse).unwrap();
        let reference = oracles::circle_sde_reference(1.0, sigma, &fine, dt, t_end).unwrap();
        let coarse = fine.coarsen(100).unwrap();
        let config = FlowConfig::new(sigma, n, dt, t_end, Scheme::EulerMaruyama);
        let mut state = circle_state(1.0, n);
        let mut sup_rel_l = 0.0f64;
        let mut sup_rel_f = 0.0f64;
        let mut sup_flat = 0.0f64;
        for (k, &dw) in coarse.increments().iter().enumerate() {
            state = dynamics::advance(&state, &config, dw).unwrap();
            let fmax = state.curvature.iter().cloned().fold(f64::MIN, f64::max);
            let fmin = state.curvature.iter().cloned().fold(f64::MAX, f64::min);
            sup_flat = sup_flat.max(fmax - fmin);
            let l_ref = reference.length[k + 1];
            let f_ref = reference.curvature[k + 1];
            sup_rel_l = sup_rel_l.max((state.length - l_ref).abs() / l_ref);
            sup_rel_f = sup_rel_f.max((state.curvature[0] - f_ref).abs() / f_ref);
        }
        println!(
            "seed {seed}: sup rel L err {sup_rel_l:.3e}, sup rel f err {sup_rel_f:.3e}, sup flatness {sup_flat:.3e}"
        );
    }
}

fn e10_exact_length_residual() {
    for seed in [7u64, 11, 23] {
        let dt: f64 = 1e-5;
        let n_steps = (0.1f64 / dt).round() as usize;
        let path = noise::sample_path(seed, dt, n_steps).unwrap();
        for scheme in [Scheme::HeunStratonovich, Scheme::EulerMaruyama] {
            let config = FlowConfig::new(0.1, 128, dt, 0.1, scheme).with_seed(seed);
            let record = dynamics::run_flow(&circle_state(1.0, 128), &config, &path, 100).unwrap();
            let worst = record
                .snapshots
                .iter()
                .map(|s| s.diagnostics.exact_length_residual)
                .fold(0.0, f64::max);
            let worst_turn = record
                .snapshots
                .iter()
                .map(|s| (s.diagnostics.turning_number - 1.0).abs() * TAU)
                .fold(0.0, f64::max);
            println!(
                "seed {seed} {scheme}: max residual {worst:.3e}, max |Lmean(f)-2pi| {worst_turn:.3e}, reason {}",
                record.stop_reason
            );
        }
    }
}

fn turning_conservation() {
    // sigma = 0.1 run on N = 128 grid, Heun, t = 0.1: criterion-2 part b.
    e10_exact_length_residual();
}

/// Independent curve-shortening reference in the material parameterization:
/// evolves curvature K(u) and metric v(u) on a fixed u-grid with
/// K_t = (1/v) d/du((1/v) dK/du) + K^3, v_t = -K^2 v; RK2 in time.
fn true_csf_area_residual() {
    let m = 512;
    let dt: f64 = 2e-6;
    let t_end = 0.5;
    // Ellipse (2,1) sampled uniformly in the angle parameter.
    let mut k: Vec<f64> = (0..m)
        .map(|i| {
            let th = TAU * i as f64 / m as f64;
            2.0 / (1.0 + 3.0 * th.sin() * th.sin()).powf(1.5)
        })
        .collect();
    let mut v: Vec<f64> = (0..m)
        .map(|i| {
            let th = TAU * i as f64 / m as f64;
            (1.0 + 3.0 * th.sin() * th.sin()).sqrt()
        })
        .collect();
    let h = TAU / m as f64;
    let rhs = |k: &Vec<f64>, v: &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut dk = vec![0.0; m];
        let mut dv = vec![0.0; m];
        // w = (1/v) dK/du at half-points, then (1/v) d(w)/du at nodes.
        let mut w = vec![0.0; m]; // w[i] at i+1/2
        for i in 0..m {
            let ip = (i + 1) % m;
            w[i] = (k[ip] - k[i]) / h * 2.0 / (v[i] + v[ip]);
        }
        for i in 0..m {
            let im = (i + m - 1) % m;
            let kss = (w[i] - w[im]) / h / v[i];
            dk[i] = kss + k[i] * k[i] * k[i];
            dv[i] = -k[i] * k[i] * v[i];
        }
        (dk, dv)
    };
    let steps = (t_end / dt).round() as usize;
    let area0 = {
        // area from (k, v): theta_u = v*k, positions by cumulative trapezoid
        let area = |k: &Vec<f64>, v: &Vec<f64>| -> f64 {
            let mut theta = vec![0.0f64; m + 1];
            for i in 0..m {
                theta[i + 1] = theta[i] + h * v[i] * k[i];
            }
            let mut x = vec![0.0f64; m + 1];
            let mut y = vec![0.0f64; m + 1];
            for i in 0..m {
                x[i + 1] = x[i] + h * v[i] * theta[i].cos();
                y[i + 1] = y[i] + h * v[i] * theta[i].sin();
            }
            let mut a = 0.0;
            for i in 0..m {
                a += x[i] * y[i + 1] - x[i + 1] * y[i];
            }
            a / 2.0
        };
        area(&k, &v)
    };
    println!("true-CSF initial area {area0:.6} (pi*a*b = {:.6})", PI * 2.0);
    let area_fn = |k: &Vec<f64>, v: &Vec<f64>| -> f64 {
        let mut theta = vec![0.0f64; m + 1];
        for i in 0..m {
            theta[i + 1] = theta[i] + h * v[i] * k[i];
        }
        let mut x = vec![0.0f64; m + 1];
        let mut y = vec![0.0f64; m + 1];
        for i in 0..m {
            x[i + 1] = x[i] + h * v[i] * theta[i].cos();
            y[i + 1] = y[i] + h * v[i] * theta[i].sin();
        }
        let mut a = 0.0;
        for i in 0..m {
            a += x[i] * y[i + 1] - x[i + 1] * y[i];
        }
        a / 2.0
    };
    let mut worst = 0.0f64;
    for s in 0..steps {
        let (dk1, dv1) = rhs(&k, &v);
        let k1: Vec<f64> = (0..m).map(|i| k[i] + dt * dk1[i]).collect();
        let v1: Vec<f64> = (0..m).map(|i| v[i] + dt * dv1[i]).collect();
        let (dk2, dv2) = rhs(&k1, &v1);
        for i in 0..m {
            k[i] += 0.5 * dt * (dk1[i] + dk2[i]);
            v[i] += 0.5 * dt * (dv1[i] + dv2[i]);
        }
        if (s + 1) % (steps / 25) == 0 {
            let t = (s + 1) as f64 * dt;
            let a = area_fn(&k, &v);
            let resid = (a - (area0 - TAU * t)).abs();
            worst = worst.max(resid);
            if (s + 1) % (steps / 5) == 0 {
                println!("  t={t:.3} area={a:.6} residual={resid:.3e}");
            }
        }
    }
    println!("true-CSF worst area residual to t={t_end}: {worst:.3e}");
}

/// Literal torus equation vs the same equation with the dropped transport
/// term restored, on a mildly perturbed circle; monitors turning number.
fn transport_term_comparison() {
    let n = 256;
    let dt: f64 = 1e-6;
    let t_end = 0.2;
    let eps = 0.1;
    let f0: Vec<f64> = (0..n)
        .map(|j| 1.0 + eps * (TAU * j as f64 / n as f64).cos())
        .collect();

    for restore_transport in [false, true] {
        let mut f = f0.clone();
        let mut l = TAU;
        let steps = (t_end / dt).round() as usize;
        for _ in 0..steps {
            let g = f.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let mut df = vec![0.0; n];
            // cumulative integral of f^2 up to r_j (rectangle rule)
            let mut cum = vec![0.0; n];
            let mut acc = 0.0;
            for j in 0..n {
                cum[j] = acc;
                acc += f[j] * f[j] / n as f64;
            }
            for j in 0..n {
                let jp = (j + 1) % n;
                let jm = (j + n - 1) % n;
                let fr = 0.5 * n as f64 * (f[jp] - f[jm]);
                let frr = (n as f64) * (n as f64) * (f[jp] - 2.0 * f[j] + f[jm]);
                let r = j as f64 / n as f64;
                let mut transport = -r * fr * g;
                if restore_transport {
                    transport += fr * cum[j];
                }
                df[j] = frr / (l * l) + f[j] * f[j] * f[j] + transport;
            }
            let dl = -l * g;
            for j in 0..n {
                f[j] += dt * df[j];
            }
            l += dt * dl;
        }
        let turning = l * f.iter().sum::<f64>() / n as f64 / TAU;
        let fmax = f.iter().cloned().fold(f64::MIN, f64::max);
        println!(
            "restore_transport={restore_transport}: turning at t={t_end} = {turning:.6}, sup f = {fmax:.4}, L = {l:.5}"
        );
    }
}
