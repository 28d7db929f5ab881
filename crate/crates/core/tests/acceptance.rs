//! Acceptance suite. Runs without the test harness so every criterion line
//! shows up in `cargo test` output; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lpvi::connection::trivial_connection;
use lpvi::integrator::{
    residual_first_order, residual_order_k, residual_second_order, run_trajectory, NewtonSettings, StepState,
    TrajectoryRecord,
};
use lpvi::liegroup::{GroupElement, GroupTag};
use lpvi::model::{HoSystemModel, ReducedWindow};
use lpvi::systems::{
    beanie_control_initial_state, beanie_first_order_initial_state, build_beanie_model, build_electron_model,
    electron_initial_state, electron_state_from_samples, electron_window, group_from_omega, listed_epsilon,
    omega_from_group, BeanieParams, BeanieVariant, ElectronParams, EpsilonLabel,
};
use lpvi::verify::{
    beanie_first_order_convergence, derivative_check, electron_convergence, kkt_oracle, kkt_residual, monitor_trajectory, random_windows,
    regularity_sweep, ErrorNorm, KktBoundary, KktPoint,
};

const ELECTRON_INIT: [f64; 12] = [1.0, 0.0, 0.5, 0.0, 1.0, 0.0, -1.0, 0.0, -0.5, 0.0, -1.0, 0.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_cond(rec: &TrajectoryRecord) -> f64 {
    rec.reports.iter().map(|r| r.cond_estimate).fold(0.0, f64::max)
}

fn electron_run(h: f64, steps: usize, lambda0: f64) -> (HoSystemModel, TrajectoryRecord) {
    let p = ElectronParams::default();
    let model = build_electron_model(&p, h).unwrap();
    let state = electron_initial_state(&p, h, &ELECTRON_INIT, lambda0).unwrap();
    let rec = run_trajectory(&model, &state, steps, &NewtonSettings::default()).unwrap();
    (model, rec)
}

fn beanie_first_order_run() -> (HoSystemModel, TrajectoryRecord) {
    let p = BeanieParams::default();
    let h = 0.01;
    let model = build_beanie_model(&p, h, BeanieVariant::FirstOrder).unwrap();
    let state = beanie_first_order_initial_state(&p, h, 0.3, 0.5, [1.0, -0.5, 0.8]).unwrap();
    let rec = run_trajectory(&model, &state, 5000, &NewtonSettings::default()).unwrap();
    (model, rec)
}

fn criterion_1(conds: &mut Vec<(String, f64)>) -> Outcome {
    let (model, rec) = electron_run(0.01, 10_000, 0.25);
    let q = ElectronParams::default().charge_ratio();
    let rep = monitor_trajectory(&model, &rec).unwrap();
    let chi_max = rep.constraints.series().unwrap().max_deviation;
    let xi_dev = rec
        .group_parts()
        .iter()
        .map(|g| (g.angle() - q).abs())
        .fold(0.0, f64::max);
    let drift = rep.multiplier_drift.series().unwrap().max_deviation;
    conds.push(("electron h=0.01 N=10000".into(), max_cond(&rec)));
    outcome(
        rec.completed() && rec.reports.len() == 10_000 && chi_max == 0.0 && xi_dev == 0.0 && drift <= 1e-9,
        format!(
            "steps {} | max |chi| {chi_max:e} | max |xi_n - e/c| {xi_dev:e} | max |lambda_n - lambda_0| {drift:.3e}",
            rec.reports.len()
        ),
    )
}

fn criteria_2_3(conds: &mut Vec<(String, f64)>) -> (Outcome, Outcome) {
    let (model, rec) = beanie_first_order_run();
    let rep = monitor_trajectory(&model, &rec).unwrap();
    let transport = rep.transport.series().unwrap();
    let omega3 = rep.omega3.series().unwrap();
    conds.push(("beanie first order h=0.01 N=5000".into(), max_cond(&rec)));
    let ok = rec.completed() && rec.reports.len() == 5000;
    (
        outcome(
            ok && transport.values.len() == 5000 && transport.max_deviation <= 1e-9,
            format!("max |M_n - Ad*_W M_(n-1)|_inf {:.3e} over {} steps", transport.max_deviation, transport.values.len()),
        ),
        outcome(ok && omega3.max_deviation <= 1e-9, format!("max |Omega3^n - Omega3^0| {:.3e}", omega3.max_deviation)),
    )
}

fn criterion_4(conds: &mut Vec<(String, f64)>) -> Outcome {
    let p = ElectronParams::default();
    let h_list = [0.04, 0.02, 0.01, 0.005];
    let rep = electron_convergence(&p, &ELECTRON_INIT, &h_list, 1.0, &NewtonSettings::default(), 100, ErrorNorm::Sup)
        .unwrap();
    for &h in &h_list {
        let (_, rec) = electron_run(h, (1.0 / h).round() as usize - 3, 0.0);
        conds.push((format!("electron h={h} T=1"), max_cond(&rec)));
    }
    let beanie = beanie_first_order_convergence(
        &BeanieParams::default(),
        0.3,
        0.5,
        [1.0, -0.5, 0.8],
        &h_list,
        1.0,
        &NewtonSettings::default(),
        100,
    )
    .unwrap();
    outcome(
        rep.within((0.8, 1.2)),
        format!(
            "errors {:?} | pair orders {:?} | fitted order {:.4} (fit residual {:.2e})\n      beanie first order (same h list, for reference): fitted order {:.4}",
            rep.errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
            rep.pair_orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>(),
            rep.fitted_order,
            rep.fit_residual,
            beanie.fitted_order
        ),
    )
}

fn kkt_case(model: &HoSystemModel, state: &StepState) -> (bool, String) {
    let rec = run_trajectory(model, state, 3, &NewtonSettings::default()).unwrap();
    let marching = KktPoint::from_record(model, &rec);
    let march_res = kkt_residual(model, &marching).unwrap().amax();
    let b = KktBoundary::from_point(model, &marching);
    let out = kkt_oracle(model, &b, Some(&marching), 7, 4).unwrap();
    let dev = out.deviation_from_reference.unwrap_or(f64::NAN);
    let pass = rec.completed() && march_res <= 1e-8 && out.converged && out.step_residual <= 1e-8;
    (
        pass,
        format!(
            "{}: marching KKT residual {march_res:.2e} | oracle converged {} ({}/{} starts) | step residual at KKT point {:.2e} | deviation {dev:.2e}",
            model.name(),
            out.converged,
            out.converged_starts,
            out.starts,
            out.step_residual
        ),
    )
}

fn criterion_5() -> Outcome {
    let h = 0.1;
    let ep = ElectronParams::default();
    let em = build_electron_model(&ep, h).unwrap();
    let es = electron_initial_state(&ep, h, &ELECTRON_INIT, 0.25).unwrap();
    let (a, da) = kkt_case(&em, &es);
    let bp = BeanieParams::default();
    let bm = build_beanie_model(&bp, h, BeanieVariant::OptimalControl).unwrap();
    let bs = beanie_control_initial_state(&bp, h, [0.0, 0.05, 0.12, 0.2], [1.0, 0.2, 0.5], [[0.1, -0.1, 0.2]; 2])
        .unwrap();
    let (b, db) = kkt_case(&bm, &bs);
    outcome(a && b, format!("{da}\n      {db}"))
}

fn smooth_sequence(rng: &mut ChaCha8Rng, count: usize, r: usize, h: f64) -> Vec<DVector<f64>> {
    let coef: Vec<[f64; 4]> = (0..r)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    (0..count)
        .map(|j| {
            let t = j as f64 * h;
            DVector::from_fn(r, |s, _| coef[s].iter().rev().fold(0.0, |acc, c| acc * t + c))
        })
        .collect()
}

fn windows_from(points: &[DVector<f64>], parts: &[GroupElement], k: usize) -> Vec<ReducedWindow> {
    (0..=points.len() - 1 - k)
        .map(|j| ReducedWindow::new(points[j..=j + k].to_vec(), parts[j..j + k].to_vec()).unwrap())
        .collect()
}

fn scaled(model: &HoSystemModel, mut v: DVector<f64>) -> DVector<f64> {
    model.scale_rows(&mut v);
    v
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 3];
    let h = 0.01;
    let bp = BeanieParams::default();
    let c = bp.coupling();
    let random_omega = |rng: &mut ChaCha8Rng, n: usize, pts: &[DVector<f64>]| -> Vec<GroupElement> {
        let o0: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let rate: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        (0..n)
            .map(|j| {
                let om = std::array::from_fn(|a| o0[a] + rate[a] * j as f64 * h);
                group_from_omega(om, pts[j + 1][0] - pts[j][0], c, h)
            })
            .collect()
    };
    let fo = build_beanie_model(&bp, h, BeanieVariant::FirstOrder).unwrap();
    let oc = build_beanie_model(&bp, h, BeanieVariant::OptimalControl).unwrap();
    let ep = ElectronParams {
        field: [0.3, -0.2, 1.0],
        ..Default::default()
    };
    let el = build_electron_model(&ep, h).unwrap();
    for _ in 0..100 {
        // k = 1
        let pts = smooth_sequence(&mut rng, 3, 1, h);
        let parts = random_omega(&mut rng, 2, &pts);
        let w = windows_from(&pts, &parts, 1);
        let state = StepState::new(vec![w[0].clone()], vec![DVector::zeros(0)], 1).unwrap();
        let gen = residual_order_k(&fo, &state, &w[1], &[]).unwrap();
        let hand = residual_first_order(&fo, &w[0], &w[1], &[], &[]).unwrap();
        worst[0] = worst[0].max((scaled(&fo, gen) - scaled(&fo, hand)).amax());
        // k = 2, beanie optimal control
        let pts = smooth_sequence(&mut rng, 5, 1, h);
        let parts = random_omega(&mut rng, 4, &pts);
        let w = windows_from(&pts, &parts, 2);
        let lam: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect();
        worst[1] = worst[1].max(compare_k2(&oc, &w, &lam));
        // k = 2, electron
        let pts = smooth_sequence(&mut rng, 5, 3, h);
        let parts: Vec<GroupElement> = (0..4).map(|_| GroupElement::so2(rng.random_range(-1.0..1.0))).collect();
        let w = windows_from(&pts, &parts, 2);
        let lam: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0))).collect();
        worst[2] = worst[2].max(compare_k2(&el, &w, &lam));
    }
    outcome(
        worst.iter().all(|w| *w <= 1e-12),
        format!(
            "max scaled |general - hand-coded|: beanie k=1 {:.2e}, beanie optimal control k=2 {:.2e}, electron k=2 {:.2e} (100 windows each)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn compare_k2(model: &HoSystemModel, w: &[ReducedWindow], lam: &[DVector<f64>]) -> f64 {
    let state = StepState::new(vec![w[0].clone(), w[1].clone()], vec![lam[0].clone(), lam[1].clone()], 2).unwrap();
    let gen = residual_order_k(model, &state, &w[2], lam[2].as_slice()).unwrap();
    let hand = residual_second_order(
        model,
        [&w[0], &w[1], &w[2]],
        [lam[0].as_slice(), lam[1].as_slice(), lam[2].as_slice()],
    )
    .unwrap();
    (scaled(model, gen) - scaled(model, hand)).amax()
}

fn criterion_7() -> (Outcome, String) {
    let h = 0.01;
    let bp = BeanieParams::default();
    let models = [
        build_electron_model(&ElectronParams::default(), h).unwrap(),
        build_beanie_model(&bp, h, BeanieVariant::FirstOrder).unwrap(),
        build_beanie_model(&bp, h, BeanieVariant::OptimalControl).unwrap(),
    ];
    let mut pass = true;
    let mut lines = Vec::new();
    for m in &models {
        let wins = random_windows(m, 50, 77);
        let rep = derivative_check(m, &wins).unwrap();
        let worst = rep.worst().unwrap();
        pass &= rep.failures(1e-5).is_empty();
        lines.push(format!(
            "{}: worst {:.2e} ({} slot {})",
            m.name(),
            worst.worst_relative_error,
            worst.func,
            worst.slot
        ));
        if m.name() == "beanie-optimal-control" {
            // The eight constraint covectors are the slot-4/5 group gradients.
            let eps: Vec<String> = rep
                .entries
                .iter()
                .filter(|e| e.func.starts_with("chi") && e.slot >= 4)
                .map(|e| format!("{} slot {}: {:.1e}", e.func, e.slot, e.worst_relative_error))
                .collect();
            lines.push(format!("constraint covectors: {}", eps.join(", ")));
        }
    }
    // Listed closed forms against finite differences, for the record.
    let m = &models[2];
    let c = bp.coupling();
    let mut info = Vec::new();
    for label in EpsilonLabel::listed() {
        let mut worst: f64 = 0.0;
        for w in random_windows(m, 50, 78) {
            let (slot, a) = match label {
                EpsilonLabel::N4(a) | EpsilonLabel::Prev4(a) => (4, a),
                EpsilonLabel::N5(a) | EpsilonLabel::Prev5(a) => (5, a),
            };
            let om = omega_from_group(w.group(0), w.shape(1)[0] - w.shape(0)[0], c, h);
            let th = om[2] - c * (w.shape(1)[0] - w.shape(0)[0]) / h;
            let listed = listed_epsilon(label, h, om, th);
            let fd = m.fd_slot_derivative(lpvi::model::Func::Constraint(a), slot, &w).unwrap();
            let fd = fd.right().coords().to_vec();
            let diff = listed.iter().zip(&fd).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / fd.iter().map(|v| v.abs()).fold(1.0, f64::max));
        }
        info.push(format!("{} {:.2e}", label.name(), worst));
    }
    (
        outcome(pass, lines.join("\n      ")),
        format!("listed closed-form covectors vs finite differences (relative): {}", info.join(", ")),
    )
}

fn criterion_8(conds: &[(String, f64)]) -> Outcome {
    let nominal_ok = conds.iter().all(|(_, c)| c.is_finite() && *c < 1e12);
    let dup = HoSystemModel::new(
        "duplicate-constraints",
        1,
        2,
        0.1,
        trivial_connection(1, GroupTag::So2),
        |w| {
            let v = (w.shape(1)[0] - w.shape(0)[0]) / 0.1;
            0.05 * v * v
        },
        |w| {
            let c = w.group(0).angle() - 0.2;
            DVector::from_row_slice(&[c, c])
        },
    )
    .unwrap();
    let w0 = ReducedWindow::new(
        vec![DVector::from_row_slice(&[0.0]), DVector::from_row_slice(&[0.1])],
        vec![GroupElement::so2(0.2)],
    )
    .unwrap();
    let state = StepState::new(vec![w0], vec![DVector::zeros(2)], 1).unwrap();
    let rec = run_trajectory(&dup, &state, 5, &NewtonSettings::default()).unwrap();
    let sweep = regularity_sweep(&rec);
    let flagged = sweep.flagged.first() == Some(&1);
    let summary: Vec<String> = conds.iter().map(|(n, c)| format!("{n}: {c:.2e}")).collect();
    outcome(
        nominal_ok && flagged,
        format!("max condition estimates {} | rank-deficient set flagged at steps {:?}", summary.join(", "), sweep.flagged),
    )
}

fn criterion_9() -> Outcome {
    let p = ElectronParams::default();
    let model = build_electron_model(&p, 0.01).unwrap();
    let z = DVector::zeros(3);
    let state = electron_state_from_samples(&p, [&z, &z, &z, &z], 0.0).unwrap();
    let rec = run_trajectory(&model, &state, 1000, &NewtonSettings::default()).unwrap();
    let worst = rec.shape_points().iter().map(|x| x.amax()).fold(0.0, f64::max);
    let _ = electron_window([&z, &z, &z], p.charge_ratio());
    outcome(
        rec.completed() && rec.reports.len() == 1000 && worst == 0.0,
        format!("steps {} | max |x_n| {worst:e}", rec.reports.len()),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut conds = Vec::new();
    let timed = |f: &mut dyn FnMut() -> Vec<Outcome>| {
        let t = Instant::now();
        let out = f();
        (out, t.elapsed().as_secs_f64())
    };
    let (o, t) = timed(&mut || vec![criterion_1(&mut conds)]);
    results.push((1, "charge conservation", o.into_iter().next().unwrap(), t));
    let (o, t) = timed(&mut || {
        let (a, b) = criteria_2_3(&mut conds);
        vec![a, b]
    });
    let mut o = o.into_iter();
    results.push((2, "coadjoint momentum transport", o.next().unwrap(), t));
    results.push((3, "Omega3 invariance", o.next().unwrap(), 0.0));
    let (o, t) = timed(&mut || vec![criterion_4(&mut conds)]);
    results.push((4, "consistency order", o.into_iter().next().unwrap(), t));
    let (o, t) = timed(&mut || vec![criterion_5()]);
    results.push((5, "variational oracle equivalence", o.into_iter().next().unwrap(), t));
    let (o, t) = timed(&mut || vec![criterion_6()]);
    results.push((6, "assembly cross-check", o.into_iter().next().unwrap(), t));
    let t7 = Instant::now();
    let (o7, info7) = criterion_7();
    results.push((7, "derivative fidelity", o7, t7.elapsed().as_secs_f64()));
    let t8 = Instant::now();
    let o8 = criterion_8(&conds);
    results.push((8, "regularity", o8, t8.elapsed().as_secs_f64()));
    let (o, t) = timed(&mut || vec![criterion_9()]);
    results.push((9, "fixed point", o.into_iter().next().unwrap(), t));

    let mut all = true;
    for (n, name, o, t) in &results {
        all &= o.pass;
        println!(
            "{} criterion {n} ({name}) [{t:.1}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if *n == 7 {
            println!("INFO criterion 7: {info7}");
        }
    }
    println!("acceptance: {}", if all { "all criteria pass" } else { "FAILURES present" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
