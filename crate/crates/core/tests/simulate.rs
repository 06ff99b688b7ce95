use ctsls::constraints::{build_supports, random_samples, ResponseEnsemble};
use ctsls::h2::synth_h2;
use ctsls::linalg::{spectral_abscissa, CMat, RVec};
use ctsls::plant::{make_chain, make_grid, CostWeights, GridParams, Plant};
use ctsls::poles::spiral_poles;
use ctsls::simulate::*;
use num_complex::Complex64;

fn chain_design(k: usize, d: usize) -> (Plant, ResponseEnsemble) {
    let plant = make_chain(11, 0.6, 0.4, 1.0).unwrap();
    let weights = CostWeights::identity(11, 11, 1.0, 10.0);
    let mask = build_supports(&plant, d).unwrap();
    let res = synth_h2(&plant, &weights, &spiral_poles(k).unwrap(), Some(&mask)).unwrap();
    (plant, res.ensemble)
}

fn unit(n: usize, i: usize) -> RVec {
    let mut v = RVec::zeros(n);
    v[i] = 1.0;
    v
}

#[test]
fn controller_transfer_matches_response_ratio() {
    let (plant, ens) = chain_design(4, 2);
    let ctrl = realize_controller(&plant, &ens).unwrap();
    assert_eq!(ctrl.removed_modes, 11);
    assert_eq!(ctrl.order(), 11 * 3);
    for s in random_samples(20, 5.0, 7, &ens.poles) {
        let (px, pu) = ens.evaluate(s).unwrap();
        let Some(inv) = px.try_inverse() else { continue };
        let expected = pu * inv;
        let got = ctrl.transfer(s).unwrap();
        let err = (&got - &expected).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(err <= 1e-6 * (1.0 + expected.iter().map(|z| z.norm()).fold(0.0, f64::max)), "err {err:.3e} at {s}");
    }
}

#[test]
fn v_loop_carries_origin_modes_unobservable_from_u() {
    let (_, ens) = chain_design(4, 2);
    let full = v_loop_realization(&ens).unwrap();
    let zeros = ctsls::linalg::eigenvalues(&full.ak).iter().filter(|z| z.norm() < 1e-8).count();
    assert_eq!(zeros, 11);
    // Same transfer function with and without the origin modes.
    let reduced = realize_controller_unchecked(&ens).unwrap();
    let s = Complex64::new(0.3, 1.1);
    let err = (full.transfer(s).unwrap() - reduced.transfer(s).unwrap()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(err < 1e-9);
}

#[test]
fn chain_closed_loop_is_internally_stable() {
    let (plant, ens) = chain_design(4, 2);
    let ctrl = realize_controller(&plant, &ens).unwrap();
    let report = internal_stability_check(&plant, &ctrl).unwrap();
    assert!(report.stable, "{report:?}");
    let acl = closed_loop_matrix(&plant, &ctrl).unwrap();
    assert!(spectral_abscissa(&acl) < 0.0);
}

#[test]
fn corrupted_ensemble_is_flagged() {
    // The chain designs tolerate a doubled input response; the swing-equation grid does not.
    let plant = make_grid(&GridParams::uniform(3, 3, 1.0, 1.0, 1.0)).unwrap();
    let weights = CostWeights::identity(18, 9, 1.0, 1.0);
    let mask = build_supports(&plant, 2).unwrap();
    let mut ens = synth_h2(&plant, &weights, &spiral_poles(4).unwrap(), Some(&mask)).unwrap().ensemble;
    let sound = realize_controller(&plant, &ens).unwrap();
    assert!(internal_stability_check(&plant, &sound).unwrap().stable);
    for f in &mut ens.phi_u {
        *f *= Complex64::new(2.0, 0.0);
    }
    assert!(realize_controller(&plant, &ens).is_err());
    let ctrl = realize_controller_unchecked(&ens).unwrap();
    let report = internal_stability_check(&plant, &ctrl).unwrap();
    assert!(!report.stable, "{report:?}");
    assert!(report.spectral_abscissa > 0.0);
}

#[test]
fn simulation_matches_partial_fraction_response() {
    let (plant, ens) = chain_design(4, 2);
    let ctrl = realize_controller(&plant, &ens).unwrap();
    let x0 = unit(11, 5);
    let sim = simulate_closed_loop(&plant, &ctrl, &x0, &Disturbance::Zero, 20.0, 0.05).unwrap();
    assert!(!sim.unstable);
    let mut err: f64 = 0.0;
    let mut imag: f64 = 0.0;
    for (k, &t) in sim.t.iter().enumerate() {
        let (x, u, im) = ens.impulse_response(&x0, t);
        imag = imag.max(im);
        err = err.max((sim.x.row(k).transpose() - x).amax());
        err = err.max((sim.u.row(k).transpose() - u).amax());
    }
    assert!(err <= 1e-6, "sup error {err:.3e}");
    assert!(imag <= 1e-10, "imaginary part {imag:.3e}");
}

#[test]
fn impulse_and_initial_state_agree() {
    let (plant, ens) = chain_design(4, 2);
    let ctrl = realize_controller(&plant, &ens).unwrap();
    let e = unit(11, 5);
    let a = simulate_closed_loop(&plant, &ctrl, &e, &Disturbance::Zero, 5.0, 0.1).unwrap();
    let b = simulate_closed_loop(&plant, &ctrl, &RVec::zeros(11), &Disturbance::Impulse(e), 5.0, 0.1).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.u, b.u);
}

#[test]
fn disturbance_stays_in_two_hop_neighbourhood() {
    let (plant, ens) = chain_design(4, 2);
    let ctrl = realize_controller(&plant, &ens).unwrap();
    let x0 = unit(11, 5);
    let sim = simulate_closed_loop(&plant, &ctrl, &x0, &Disturbance::Zero, 30.0, 0.05).unwrap();
    let allowed: Vec<bool> = (0..11).map(|i: usize| i.abs_diff(5) <= 2).collect();
    assert_eq!(reachable_states(&ens, &x0), allowed);
    let summary = sim.summary(&allowed);
    assert!(summary.containment_max_leak <= 1e-8, "{summary:?}");
    assert!(summary.settling_time_2pct.is_some());
    assert_eq!(sim.subsystem_peaks.len(), 11);
    let json = serde_json::to_value(&summary).unwrap();
    assert!(json.get("containment_max_leak").is_some());
}

#[test]
fn static_gain_check_on_trivial_ensemble() {
    let plant = Plant::from_matrices(ctsls::linalg::RMat::identity(3, 3) * 0.5, ctsls::linalg::RMat::identity(3, 3)).unwrap();
    let poles = ctsls::poles::PoleSet::new(&[Complex64::new(-1.5, 0.0)]).unwrap();
    let ens = ResponseEnsemble {
        poles,
        phi_x: vec![CMat::identity(3, 3)],
        phi_u: vec![CMat::identity(3, 3) * Complex64::new(-2.0, 0.0)],
    };
    let ctrl = realize_controller(&plant, &ens).unwrap();
    let acl = closed_loop_matrix(&plant, &ctrl).unwrap();
    for z in ctsls::linalg::eigenvalues(&acl) {
        assert!((z - Complex64::new(-1.5, 0.0)).norm() < 1e-12);
    }
}
