//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use orbitsim::experiment::{self, Overrides, RunOutcome};
use orbitsim::homotopy::{kkt_residual, solve_joint, HomotopyAlignment, JointOptions, JointStage};
use orbitsim::integrator::{orbit, propagate_sensitivity, simulate, Rk4Map, SensitivityMode, DEFAULT_DT};
use orbitsim::io;
use orbitsim::similarity::{closed_form_align, cost, decoupled_gradient, mean_sq_misfit, similarity_degree, CoupledStage, SimilarityMatrix};
use orbitsim::staging::{pontryagin_align, solve_coupled, StagePlan, StageReport};
use orbitsim::systems::{lorenz_chua_hybrid, make_hybrid, make_system, SystemSpec, NO_OVERRIDES};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn catalog() -> Vec<SystemSpec> {
    ["lorenz", "chua", "rossler", "chen", "lu"]
        .iter()
        .map(|n| make_system(n, NO_OVERRIDES).unwrap())
        .collect()
}

fn random_vec(rng: &mut StdRng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-r..r))
}

fn random_matrix(rng: &mut StdRng, n: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.random_range(-r..r))
}

fn near_identity(rng: &mut StdRng) -> SimilarityMatrix {
    SimilarityMatrix::new(DMatrix::identity(3, 3) + random_matrix(rng, 3, 0.3), 1e4).unwrap()
}

fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-12)
}

/// Central difference of `f` in every entry of `a`.
fn fd_matrix(a: &SimilarityMatrix, f: impl Fn(&SimilarityMatrix) -> f64) -> DMatrix<f64> {
    let n = a.dim();
    DMatrix::from_fn(n, n, |i, j| {
        let h = 1e-6 * a.entries()[(i, j)].abs().max(1.0);
        let shift = |s: f64| {
            let mut m = a.entries().clone();
            m[(i, j)] += s;
            f(&SimilarityMatrix::new(m, a.bound()).unwrap())
        };
        (shift(h) - shift(-h)) / (2.0 * h)
    })
}

fn oracle_recovery() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let (mut worst_entry, mut worst_omega) = (0.0f64, 0.0f64);
    let mut rho_ok = true;
    for _ in 0..100 {
        let truth = loop {
            let m = random_matrix(&mut rng, 3, 2.0);
            if m.clone().svd(false, false).singular_values.min() > 0.1 {
                break m;
            }
        };
        let xs: Vec<_> = (0..20).map(|_| random_vec(&mut rng, 3, 5.0)).collect();
        let ys: Vec<_> = xs.iter().map(|x| &truth * x).collect();
        let a = closed_form_align(&xs, &ys, 0.0).map_err(|e| e.to_string())?;
        worst_entry = worst_entry.max((a.entries() - &truth).amax());
        let omega = mean_sq_misfit(&a, &xs, &ys).map_err(|e| e.to_string())?;
        worst_omega = worst_omega.max(omega);
        rho_ok &= (similarity_degree(omega).unwrap() - 1.0).abs() < 1e-12;
    }
    check(
        worst_entry < 1e-8 && worst_omega < 1e-12 && rho_ok,
        format!("max entry error {worst_entry:.2e}, max omega {worst_omega:.2e}"),
    )
}

fn gradients() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let systems = catalog();
    let (mut dec, mut cou, mut lam) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..20 {
        let len = 1 + t % 5;
        let a = near_identity(&mut rng);

        let xs: Vec<_> = (0..=len).map(|_| random_vec(&mut rng, 3, 5.0)).collect();
        let ys: Vec<_> = (0..=len).map(|_| random_vec(&mut rng, 3, 5.0)).collect();
        let tau = rng.random_range(0.0..0.1);
        let g = decoupled_gradient(&a, &xs, &ys, tau).unwrap();
        dec = dec.max(rel_err(&g, &fd_matrix(&a, |m| cost(m, &xs, &ys, tau).unwrap())));

        let x_sys = &systems[t % 5];
        let y_sys = &systems[(t + 1 + t / 5) % 5];
        let x0 = random_vec(&mut rng, 3, 2.0);
        let x_map = Rk4Map::new(x_sys, DEFAULT_DT, None).unwrap();
        let y_map = Rk4Map::new(y_sys, DEFAULT_DT, None).unwrap();
        let stage = CoupledStage::new(&x0, &x_map, &y_map, len).unwrap();
        let r = stage.residual(&a).unwrap();
        cou = cou.max(rel_err(&(r * 2.0), &fd_matrix(&a, |m| stage.cost(m).unwrap())));

        let h1 = lorenz_chua_hybrid();
        let h2 = make_hybrid(systems[3].clone(), systems[4].clone()).unwrap();
        let l = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let joint = JointStage::new(x0.clone(), &h1, &h2, len, DEFAULT_DT).unwrap();
        let cand = HomotopyAlignment {
            a: a.clone(),
            lambda: l,
            kkt_a_norm: 0.0,
            kkt_lambda_norm: 0.0,
        };
        let (_, g) = kkt_residual(&cand, &x0, &h1, &h2, len, DEFAULT_DT).unwrap();
        let fd = [0, 1].map(|i| {
            let h = 1e-6;
            let (mut up, mut down) = (l, l);
            up[i] += h;
            down[i] -= h;
            (joint.cost(&a, up).unwrap() - joint.cost(&a, down).unwrap()) / (2.0 * h)
        });
        let got = DMatrix::from_row_slice(1, 2, &[2.0 * g[0], 2.0 * g[1]]);
        lam = lam.max(rel_err(&got, &DMatrix::from_row_slice(1, 2, &fd)));
    }
    check(
        dec < 1e-4 && cou < 1e-4 && lam < 1e-4,
        format!("relative errors: decoupled {dec:.2e}, coupled {cou:.2e}, lambda {lam:.2e}"),
    )
}

fn sensitivities() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut systems = catalog();
    systems.push(lorenz_chua_hybrid());
    let (mut state_err, mut lambda_err) = (0.0f64, 0.0f64);
    for sys in &systems {
        let lambda = sys.is_hybrid().then_some(0.4);
        let x0 = DVector::from_element(3, 0.1) + random_vec(&mut rng, 3, 1.0);
        let seed = DMatrix::identity(3, 3) + random_matrix(&mut rng, 3, 0.5);
        let traj = simulate(sys, &x0, 10, DEFAULT_DT, lambda).unwrap();
        let sens = propagate_sensitivity(sys, &traj, &SensitivityMode::StateSeeded(seed.clone())).unwrap();
        let h = 1e-6;
        for k in [5, 10] {
            let fd = DMatrix::from_columns(
                &(0..3)
                    .map(|c| {
                        let d = seed.column(c) * h;
                        let up = simulate(sys, &(&x0 + &d), k, DEFAULT_DT, lambda).unwrap().states[k].clone();
                        let down = simulate(sys, &(&x0 - &d), k, DEFAULT_DT, lambda).unwrap().states[k].clone();
                        (up - down) / (2.0 * h)
                    })
                    .collect::<Vec<_>>(),
            );
            state_err = state_err.max(rel_err(&sens[k], &fd));
        }
        if let Some(l) = lambda {
            let sens = propagate_sensitivity(sys, &traj, &SensitivityMode::LambdaForced).unwrap();
            for k in [5, 10] {
                let at = |v: f64| simulate(sys, &x0, k, DEFAULT_DT, Some(v)).unwrap().states[k].clone();
                let fd = (at(l + h) - at(l - h)) / (2.0 * h);
                lambda_err = lambda_err.max(rel_err(&sens[k], &DMatrix::from_column_slice(3, 1, fd.as_slice())));
            }
        }
    }
    check(
        state_err < 1e-4 && lambda_err < 1e-4,
        format!("relative errors: state-seeded {state_err:.2e}, lambda-forced {lambda_err:.2e}"),
    )
}

fn similarity_degree_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let at_zero = similarity_degree(0.0).unwrap();
    let mut omegas: Vec<f64> = (0..1000).map(|_| 10f64.powf(rng.random_range(-6.0..6.0))).collect();
    omegas.sort_by(f64::total_cmp);
    let rhos: Vec<f64> = omegas.iter().map(|w| similarity_degree(*w).unwrap()).collect();
    let in_range = rhos.iter().all(|r| *r > 0.0 && *r <= 1.0);
    let decreasing = rhos.windows(2).zip(omegas.windows(2)).all(|(r, w)| w[0] == w[1] || r[1] < r[0]);
    let e1 = std::f64::consts::E - 1.0;
    let gap = (similarity_degree(e1).unwrap() - 1.0 / e1).abs();
    check(
        at_zero == 1.0 && in_range && decreasing && gap <= 1e-12,
        format!("rho(0) = {at_zero}, in (0,1]: {in_range}, strictly decreasing: {decreasing}, |rho(e-1) - 1/(e-1)| = {gap:.1e}"),
    )
}

fn recipe_run(name: &str, dir: &Path, tau: Option<f64>) -> Result<Vec<RunOutcome>, String> {
    let overrides = Overrides {
        output_dir: Some(dir.to_path_buf()),
        tau,
        tol: None,
    };
    let configs = experiment::recipe_runs(name, &overrides).map_err(|e| e.to_string())?;
    experiment::run_many(&configs)
        .into_iter()
        .collect::<orbitsim::Result<Vec<_>>>()
        .map_err(|e| e.to_string())
}

fn below(reports: &[StageReport], level: f64) -> usize {
    reports.iter().filter(|r| r.rho < level).count()
}

fn example41(dir: &Path) -> Outcome {
    let ridge = recipe_run("example4.1", &dir.join("ridge"), Some(1e-4))?.remove(0);
    let plain = recipe_run("example4.1", &dir.join("plain"), Some(0.0))?.remove(0);
    let low = below(&ridge.reports, 0.9);
    let above = plain.reports.iter().filter(|r| r.rho > 0.9).count();
    let median = ridge.summary.stage_rho.map_or(f64::NAN, |s| s.median);
    let parsed = ["orbit_x", "orbit_ax", "orbit_y", "plane_xy", "plane_xz", "plane_yz"]
        .iter()
        .all(|f| io::read_table(&dir.join("ridge").join(format!("{f}.csv"))).is_ok_and(|t| t.rows.len() == 2001));
    check(
        ridge.reports.len() == 200 && low <= 10 && 2 * above > plain.reports.len() && median > 0.9 && parsed,
        format!(
            "tau 1e-4: {low}/200 stages below 0.9, median {median:.4}; tau 0: {above}/200 above 0.9; plot files parse: {parsed}"
        ),
    )
}

fn example42(dir: &Path) -> Outcome {
    let run = recipe_run("example4.2", dir, None)?.remove(0);
    let min = run.reports.iter().map(|r| r.rho).fold(f64::INFINITY, f64::min);
    check(
        run.reports.len() == 200 && run.reports.iter().all(|r| r.rho > 0.95),
        format!("min stage rho {min:.4} over {} stages", run.reports.len()),
    )
}

fn non_decreasing(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[1] >= w[0] - 1e-12)
}

fn example43(dir: &Path) -> Outcome {
    let run = recipe_run("example4.3", dir, None)?.remove(0);
    let converged = run.reports.iter().filter(|r| r.converged).count();
    let min = run.reports.iter().map(|r| r.rho).fold(f64::INFINITY, f64::min);
    let c = &run.cumulative;
    let (start, end) = (c[0], c[c.len() - 1]);
    let mono = non_decreasing(c);
    check(
        converged == 200 && min >= 0.9999 && mono && (0.97..1.0).contains(&start) && end >= 0.999,
        format!("{converged}/200 converged, min stage rho {min:.6}, curve {start:.6} -> {end:.9}, non-decreasing: {mono}"),
    )
}

fn example44(dir: &Path) -> Outcome {
    let run = recipe_run("example4.4", dir, None)?.remove(0);
    let c = &run.cumulative;
    let (start, end) = (c[0], c[c.len() - 1]);
    let mono = non_decreasing(c);
    check(end >= 0.999 && mono, format!("curve {start:.6} -> {end:.9}, non-decreasing: {mono}"))
}

fn example45(dir: &Path) -> Outcome {
    let runs = recipe_run("example4.5", dir, None)?;
    let mut ok = runs.len() == 4;
    let mut details = Vec::new();
    for (u, run) in experiment::EXAMPLE45_CONTROLS.iter().zip(&runs) {
        let in_box = run
            .reports
            .iter()
            .all(|r| r.lambda.is_some_and(|l| l.iter().all(|v| (0.0..=1.0).contains(v))));
        let good = run.reports.iter().filter(|r| r.rho >= 0.99).count();
        let mono = non_decreasing(&run.cumulative);
        let series = dir.join(format!("u_{u}")).join("series.csv");
        let series_ok = io::read_table(&series).is_ok_and(|t| t.rows.len() == 1001);
        ok &= in_box && mono && 10 * good >= 9 * run.reports.len() && series_ok;
        details.push(format!(
            "u={u}: {good}/{} stages rho >= 0.99, lambda in box {in_box}, non-decreasing {mono}, {} converged",
            run.reports.len(),
            run.summary.converged_stages
        ));
    }
    check(ok, details.join("; "))
}

fn structural() -> Outcome {
    let mut rng = StdRng::seed_from_u64(10);
    let x0 = DVector::from_element(3, 0.1);

    let h = lorenz_chua_hybrid();
    let lu = make_system("lu", [("u", 8.0)]).unwrap();
    let stage = JointStage::new(x0.clone(), &h, &lu, 10, DEFAULT_DT).unwrap();
    let l = [0.5, 0.5];
    let frozen = JointOptions {
        lambda_lo: l,
        lambda_hi: l,
        ..JointOptions::default()
    };
    let (joint, _) = solve_joint(&stage, SimilarityMatrix::identity(3), l, &frozen).unwrap();
    let (direct, _) = solve_coupled(
        &x0,
        &stage.x_map(l).unwrap(),
        &stage.y_map(l).unwrap(),
        10,
        SimilarityMatrix::identity(3),
        &frozen.solver,
    )
    .unwrap();
    let joint_gap = (joint.a.entries() - direct.entries()).amax();

    let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
    let chua = make_system("chua", NO_OVERRIDES).unwrap();
    let x = simulate(&lorenz, &x0, 2000, DEFAULT_DT, None).unwrap();
    let y = simulate(&chua, &x0, 2000, DEFAULT_DT, None).unwrap();
    let single = pontryagin_align(&x, &y, &StagePlan::new(2000, 1).unwrap(), 1e-4).unwrap();
    let whole = closed_form_align(&x.states, &y.states, 1e-4).unwrap();
    let stage_gap = (single[0].a.entries() - whole.entries()).amax();

    let mut bitwise = true;
    let systems = catalog();
    for (i, from) in systems.iter().enumerate() {
        let to = &systems[(i + 1) % systems.len()];
        let hybrid = make_hybrid(from.clone(), to.clone()).unwrap();
        for _ in 0..50 {
            let s = random_vec(&mut rng, 3, 20.0);
            let bits = |v: DVector<f64>| v.iter().map(|c| c.to_bits()).collect::<Vec<_>>();
            bitwise &= bits(hybrid.field(&s, Some(0.0)).unwrap()) == bits(from.field(&s, None).unwrap());
            bitwise &= bits(hybrid.field(&s, Some(1.0)).unwrap()) == bits(to.field(&s, None).unwrap());
        }
    }
    // The reference orbit of a hybrid at an endpoint is the constituent's orbit.
    let end_orbit = orbit(&Rk4Map::new(&h, DEFAULT_DT, Some(1.0)).unwrap(), &x0, 100).unwrap();
    bitwise &= end_orbit == orbit(&Rk4Map::new(&lorenz, DEFAULT_DT, None).unwrap(), &x0, 100).unwrap();

    check(
        joint_gap <= 1e-10 && stage_gap <= 1e-12 && bitwise,
        format!("frozen joint vs coupled {joint_gap:.1e}, single stage vs closed form {stage_gap:.1e}, endpoints bitwise: {bitwise}"),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| root.path().join(name);
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("oracle recovery", Duration::from_secs(1), Box::new(oracle_recovery)),
        ("gradient and residual checks", Duration::from_secs(30), Box::new(gradients)),
        ("sensitivity checks", Duration::from_secs(30), Box::new(sensitivities)),
        ("similarity degree", Duration::MAX, Box::new(similarity_degree_properties)),
        ("Lorenz vs Chua staged fits", Duration::from_secs(60), Box::new(move || example41(&dir("e41")))),
        ("Lorenz vs Rossler staged fits", Duration::from_secs(60), Box::new(move || example42(&dir("e42")))),
        ("Bellman Lorenz to Chen", Duration::from_secs(300), Box::new(move || example43(&dir("e43")))),
        ("Bellman Lorenz to Lu", Duration::from_secs(300), Box::new(move || example44(&dir("e44")))),
        ("homotopy hybrid vs controlled Lu", Duration::from_secs(600), Box::new(move || example45(&dir("e45")))),
        ("structural equivalences", Duration::MAX, Box::new(structural)),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let timing = if *limit == Duration::MAX {
            format!("{:.2}s", elapsed.as_secs_f64())
        } else {
            format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs())
        };
        let (pass, detail) = match outcome {
            Ok(d) => (elapsed <= *limit, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("criterion {:>2} {}: {} ({timing}) {detail}", i + 1, if pass { "PASS" } else { "FAIL" }, name);
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
