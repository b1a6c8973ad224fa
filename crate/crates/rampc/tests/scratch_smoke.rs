//! Temporary end-to-end smoke checks (replaced by the real suites).

use nalgebra::DVector;
use rampc::design::{run_design, DesignInput};
use rampc::model::example_system;
use rampc::rampc::{roa_scan, EstimatorSnapshot, RampcConfig, RampcController, TerminalChoice};
use rampc::tube::BoundVariant;

fn artifact() -> (rampc::model::SystemSpec, rampc::design::DesignArtifact) {
    let spec = example_system();
    let input = DesignInput::from_json(include_str!("../data/example_design.json")).unwrap();
    let artifact = run_design(&spec, &input).unwrap();
    (spec, artifact)
}

#[test]
fn smoke_design_and_solve() {
    let (spec, art) = artifact();
    assert!(art.any_certified());
    eprintln!(
        "vertex simple ok: {:?}",
        art.terminal_simple.vertex.ok.is_some()
    );
    eprintln!(
        "vertex alt ok: {:?}, err: {:?}",
        art.terminal_alternative.vertex.ok.is_some(),
        art.terminal_alternative.vertex.error
    );
    eprintln!(
        "normball alt ok: {:?}",
        art.terminal_alternative.normball.ok.is_some()
    );
    eprintln!("roa_terminal present: {}", art.roa_terminal.is_some());

    let cfg = RampcConfig::new(12, BoundVariant::Vertex, TerminalChoice::Alternative);
    let ctrl = RampcController::from_artifact(&spec, &art, cfg).unwrap();
    let snap = EstimatorSnapshot {
        theta_bar: spec.theta_set0.center.clone(),
        eta: spec.theta_set0.radius,
        theta_hat: spec.theta_set0.center.clone(),
    };

    // Origin: zero objective, immediately optimal.
    let sol0 = ctrl.solve(&snap, &DVector::zeros(2), None);
    eprintln!(
        "origin: status {:?} iters {} obj {:.3e} maxres {:.3e}",
        sol0.report.status, sol0.report.iterations, sol0.objective, sol0.max_residual
    );
    assert!(sol0.feasible(1e-7));
    assert!(sol0.objective.abs() < 1e-12);

    // Paper-style initial condition.
    let x0 = DVector::from_vec(vec![0.1, 0.1]);
    let sol = ctrl.solve(&snap, &x0, None);
    eprintln!(
        "x0=(0.1,0.1): status {:?} iters {} obj {:.6} maxres {:.3e} s_N {:.3e}",
        sol.report.status, sol.report.iterations, sol.objective, sol.max_residual, sol.s[12]
    );
    assert!(sol.feasible(1e-7), "max residual {}", sol.max_residual);

    // One closed-loop step without disturbance: candidate must be feasible.
    let u = sol.u_apply();
    let x1 = spec.model.eval_f_theta(&x0, &u, &spec.theta_star);
    let cand = ctrl.candidate_shift(&sol, &snap, &x1);
    eprintln!(
        "candidate: maxres {:.3e} nestedness {:.3e}",
        cand.max_residual, cand.nestedness_slack
    );
    assert!(cand.max_residual <= 1e-6, "candidate residual {}", cand.max_residual);
    assert!(cand.nestedness_slack >= -1e-9);

    let warm = ctrl.solve(&snap, &x1, Some(&cand.z));
    eprintln!(
        "warm resolve: status {:?} iters {} obj {:.6}",
        warm.report.status, warm.report.iterations, warm.objective
    );
    assert!(warm.feasible(1e-7));
}

#[test]
fn smoke_simple_terminal_and_roa() {
    let (spec, art) = artifact();
    let snap = EstimatorSnapshot {
        theta_bar: spec.theta_set0.center.clone(),
        eta: spec.theta_set0.radius,
        theta_hat: spec.theta_set0.center.clone(),
    };

    let cfg = RampcConfig::new(12, BoundVariant::Vertex, TerminalChoice::Simple);
    let ctrl = RampcController::from_artifact(&spec, &art, cfg).unwrap();
    let x0 = DVector::from_vec(vec![0.05, 0.05]);
    let sol = ctrl.solve(&snap, &x0, None);
    eprintln!(
        "simple terminal: status {:?} iters {} obj {:.6} maxres {:.3e}",
        sol.report.status, sol.report.iterations, sol.objective, sol.max_residual
    );
    assert!(sol.feasible(1e-7));

    // Tiny ROA scan, ROA terminal, vertex variant.
    let cfg = RampcConfig::new(4, BoundVariant::Vertex, TerminalChoice::Roa);
    let ctrl = RampcController::from_artifact(&spec, &art, cfg).unwrap();
    let grid: Vec<DVector<f64>> = vec![
        DVector::zeros(2),
        DVector::from_vec(vec![0.05, 0.05]),
        DVector::from_vec(vec![0.1, 0.1]),
        DVector::from_vec(vec![-0.1, 0.1]),
    ];
    let scan = roa_scan(&ctrl, &snap, &grid);
    eprintln!("roa mask {:?} pct {:.1}", scan.feasible, scan.percentage);
    assert!(scan.feasible[0], "origin must be feasible");
}
