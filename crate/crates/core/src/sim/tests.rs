use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::control::{FixedGain, GainAction, OpenLoop};

fn reference() -> (TrafficParams<f64>, EquilibriumPoint<f64>) {
    let p = TrafficParams::reference();
    let eq = model::equilibrium(&p).unwrap();
    (p, eq)
}

fn grid(p: &TrafficParams<f64>, dx: f64, dt: f64, horizon: f64) -> Grid<f64> {
    make_grid(p, dx, dt, horizon, 0.0).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Emits `h_eq + 1e-3 * (n mod 7)` at its n-th call so every step's command is distinct.
struct Ramp {
    calls: usize,
}

impl Controller<f64> for Ramp {
    fn command(
        &mut self,
        state: &TrafficState<f64>,
        _prev: &InputProfile<f64>,
        params: &TrafficParams<f64>,
        _eq: &EquilibriumPoint<f64>,
    ) -> Result<(InputProfile<f64>, usize)> {
        let h = params.gap_acc_eq + 1e-3 * (self.calls % 7) as f64;
        self.calls += 1;
        Ok((InputProfile::constant(state.nodes(), h), 0))
    }

    fn name(&self) -> &'static str {
        "ramp"
    }
}

#[test]
fn equilibrium_is_a_fixed_point_over_3000_steps() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 300.0);
    let start = TrafficState::uniform(g.nodes(), eq.rho, eq.v);
    let input = InputProfile::constant(g.nodes(), p.gap_acc_eq);
    let mut s = start.clone();
    for n in 0..g.steps {
        s = step(&s, &input, &p, &g, n).unwrap();
        if n == 0 {
            assert!(s.max_deviation(&start) < 1e-12);
        }
    }
    assert!(s.max_deviation(&start) < 1e-9);
}

#[test]
fn three_node_update_matches_hand_computation() {
    let p = TrafficParams {
        road_length: 10.0,
        ..TrafficParams::reference()
    };
    let g = Grid {
        cells: 2,
        dx: 5.0,
        steps: 1,
        dt: 0.1,
        delay_steps: 0,
    };
    let rho = [0.10, 0.11, 0.12];
    let v = [3.0, 2.8, 2.5];
    let h = [1.5, 1.2, 1.8];
    let state = TrafficState {
        rho: rho.to_vec(),
        v: v.to_vec(),
        t: 0.0,
    };
    let next = step(&state, &InputProfile(h.to_vec()), &p, &g, 0).unwrap();

    // Independent evaluation of the closed forms for the reference parameters.
    let (alpha, kappa, l, hm) = (0.15, 2.0 / 60.0, 5.0, 1.0);
    let tau = 1.0 / (alpha / 2.0 + (1.0 - alpha) / 60.0);
    let hmix = |h: f64| (alpha + (1.0 - alpha) * kappa) / (alpha + (1.0 - alpha) * kappa * h / hm) * h;
    let vmix = |r: f64, h: f64| (1.0 / r - l) / hmix(h);
    let (dt, dx) = (0.1, 5.0);

    // Node 1: v > 0 so density uses backward differences.
    let rho1 = rho[1] - dt * (v[1] * (rho[1] - rho[0]) / dx + rho[1] * (v[1] - v[0]) / dx);
    let lambda2 = v[1] - 1.0 / (hmix(h[1]) * rho[1]);
    assert!(lambda2 < 0.0);
    let v1 = v[1] - dt * lambda2 * (v[2] - v[1]) / dx + dt * (vmix(rho[1], h[1]) - v[1]) / tau;
    assert_relative_eq!(next.rho[1], rho1, epsilon = 1e-12);
    assert_relative_eq!(next.v[1], v1, epsilon = 1e-12);

    // Boundaries.
    assert_relative_eq!(next.rho[0], rho1, epsilon = 1e-12);
    assert_relative_eq!(next.v[0], (1.0 / 3.0) / rho1, epsilon = 1e-12);
    let v2 = v[2] + dt * (vmix(rho[2], h[2]) - v[2]) / tau;
    assert_relative_eq!(next.v[2], v2, epsilon = 1e-12);
    assert_relative_eq!(next.rho[2], rho1, epsilon = 1e-12);
    assert_relative_eq!(next.t, 0.1);
}

#[test]
fn cfl_threshold_at_equilibrium() {
    let (p, eq) = reference();
    let state = TrafficState::uniform(201, eq.rho, eq.v);
    let input = InputProfile::constant(201, p.gap_acc_eq);
    let speed = max_char_speed(&state, &input, &p).unwrap();
    // |lambda2| = 1/(h_mix rho) - v dominates lambda1 = v.
    let oracle = 1.0 / (1.3896103896103895 * eq.rho) - eq.v;
    assert_relative_eq!(speed, oracle, max_relative = 1e-12);
    assert_relative_eq!(speed, 3.598, max_relative = 1e-3);
    let threshold = 5.0 / speed;
    assert_relative_eq!(threshold, 1.3896, max_relative = 1e-3);

    let at = |dt: f64| Grid {
        cells: 200,
        dx: 5.0,
        steps: 1,
        dt,
        delay_steps: 0,
    };
    let err = step(&state, &input, &p, &at(threshold * 1.001), 0).unwrap_err();
    assert!(matches!(err, Error::Cfl { step: 0, .. }), "{err}");
    assert!(step(&state, &input, &p, &at(threshold * 0.999), 0).is_ok());
    assert!(step(&state, &input, &p, &at(1.0), 0).is_ok());
}

#[test]
fn cfl_rejection_happens_before_the_run_starts() {
    let (p, _) = reference();
    let g = Grid {
        cells: 200,
        dx: 5.0,
        steps: 10,
        dt: 2.0,
        delay_steps: 0,
    };
    let err = simulate(&mut OpenLoop, &p, &g, &SimOptions::default(), &mut rng()).unwrap_err();
    assert!(matches!(err, Error::Cfl { step: 0, .. }));
}

#[test]
fn boundaries_leave_equilibrium_unchanged() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let s = TrafficState::uniform(g.nodes(), eq.rho, eq.v);
    let mut next = s.clone();
    let tau = model::tau_mix(p.acc_ratio, p.tau_acc, p.tau_manual).unwrap();
    apply_boundaries(&s, &mut next, &InputProfile::constant(g.nodes(), p.gap_acc_eq), &p, &g, tau).unwrap();
    assert_relative_eq!(next.v[0], eq.v, max_relative = 1e-12);
    assert_relative_eq!(next.v[g.cells], eq.v, max_relative = 1e-12);
    assert_eq!(next.rho[0], eq.rho);
}

#[test]
fn inflow_boundary_at_double_density() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let s = TrafficState::uniform(g.nodes(), eq.rho, eq.v);
    let mut next = s.clone();
    next.rho[1] = 2.0 * eq.rho;
    let tau = model::tau_mix(p.acc_ratio, p.tau_acc, p.tau_manual).unwrap();
    apply_boundaries(&s, &mut next, &InputProfile::constant(g.nodes(), p.gap_acc_eq), &p, &g, tau).unwrap();
    assert_eq!(next.rho[0], 2.0 * eq.rho);
    assert_relative_eq!(next.v[0], 1.5524, max_relative = 1e-4);
    assert_relative_eq!(next.v[0], eq.v / 2.0, max_relative = 1e-12);
}

#[test]
fn outflow_velocity_at_relaxation_target_is_unchanged() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let m = g.cells;
    let mut s = TrafficState::uniform(g.nodes(), 0.09, 3.0);
    s.v[m] = model::v_mix(0.09, 1.5, &p).unwrap();
    let mut next = s.clone();
    let tau = model::tau_mix(p.acc_ratio, p.tau_acc, p.tau_manual).unwrap();
    apply_boundaries(&s, &mut next, &InputProfile::constant(g.nodes(), 1.5), &p, &g, tau).unwrap();
    assert_eq!(next.v[m], s.v[m]);
}

#[test]
fn initial_condition_matches_profile() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let s = initial_state(&p, &eq, &g, 0.010).unwrap();
    assert_relative_eq!(s.rho[0], eq.rho + 0.010, max_relative = 1e-14);
    assert_relative_eq!(s.v[0], (1.0 / 3.0) / (eq.rho + 0.010), max_relative = 1e-14);
    // Half a period of the four-period cosine is 125 m, so node 25 sits in a trough.
    assert_relative_eq!(s.rho[25], eq.rho - 0.010, max_relative = 1e-12);
    let flat = initial_state(&p, &eq, &g, 0.0).unwrap();
    assert!(flat.rho.iter().all(|&r| r == eq.rho));
    assert!(flat.v.iter().all(|&v| (v - eq.v).abs() < 1e-14));
}

#[test]
fn trace_has_one_snapshot_per_step_plus_initial() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 10.0);
    let trace = simulate(&mut OpenLoop, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    assert_eq!(trace.len(), g.steps + 1);
    assert_eq!(trace.commanded.len(), g.steps);
    assert_eq!(trace.nodes(), 201);
    assert!(trace.diverged.is_none());
}

#[test]
fn zero_amplitude_open_loop_stays_at_equilibrium() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 20.0);
    let options = SimOptions {
        amplitude: 0.0,
        alpha_noise: None,
    };
    let trace = simulate(&mut OpenLoop, &p, &g, &options, &mut rng()).unwrap();
    let target = TrafficState::uniform(g.nodes(), eq.rho, eq.v);
    for n in 0..trace.len() {
        assert!(trace.state(n).max_deviation(&target) < 1e-12);
    }
}

#[test]
fn delayed_input_is_the_command_from_d_steps_earlier() {
    let p = TrafficParams::reference().with_delay(4.0);
    let g = grid(&p, 5.0, 0.1, 20.0);
    assert_eq!(g.delay_steps, 40);
    let trace = simulate(&mut Ramp { calls: 0 }, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    for n in 0..g.steps {
        if n < 40 {
            assert!(trace.applied[n].iter().all(|&h| h == p.gap_acc_eq));
        } else {
            assert_eq!(trace.applied[n], trace.commanded[n - 40]);
        }
    }
}

#[test]
fn zero_delay_applies_the_command_immediately() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 2.0);
    let trace = simulate(&mut Ramp { calls: 0 }, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    assert_eq!(trace.applied, trace.commanded);
}

#[test]
fn destabilizing_gains_end_in_a_flagged_trace() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 300.0);
    let mut ctrl = FixedGain {
        gains: GainAction::new(0.0, 1.0, 60.0),
    };
    let trace = simulate(&mut ctrl, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    let div = trace.diverged.as_ref().expect("run should diverge");
    assert_eq!(trace.len(), div.step + 1);
    for n in 0..trace.len() {
        assert!(trace.state(n).find_violation(&p).is_none());
    }
}

#[test]
fn per_step_alpha_noise_is_seeded() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 5.0);
    let options = SimOptions {
        amplitude: 0.01,
        alpha_noise: Some(AlphaNoise {
            mean: 0.15,
            std: 0.15,
            per_step: true,
        }),
    };
    let a = simulate(&mut OpenLoop, &p, &g, &options, &mut rng()).unwrap();
    let b = simulate(&mut OpenLoop, &p, &g, &options, &mut rng()).unwrap();
    let clean = simulate(&mut OpenLoop, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    assert_eq!(a.rho, b.rho);
    assert_ne!(a.rho, clean.rho);
}

#[test]
fn alpha_noise_is_clamped_to_unit_interval() {
    let noise = AlphaNoise {
        mean: 0.5,
        std: 10.0,
        per_step: true,
    };
    let mut r = rng();
    for _ in 0..1000 {
        let a = noise.sample(&mut r);
        assert!((0.0..=1.0).contains(&a));
    }
}

/// Max density error at t = 20 s against a run on a grid four times finer.
fn coarse_error(p: &TrafficParams<f64>, dx: f64, reference: &Trace<f64>, ref_dx: f64) -> f64 {
    let dt = dx / 50.0;
    let g = grid(p, dx, dt, 20.0);
    let trace = simulate(&mut OpenLoop, p, &g, &SimOptions::default(), &mut rng()).unwrap();
    let last = trace.rho.last().unwrap();
    let ratio = (dx / ref_dx).round() as usize;
    let fine = reference.rho.last().unwrap();
    last.iter()
        .enumerate()
        .map(|(i, r)| (r - fine[i * ratio]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn scheme_converges_at_first_order() {
    let (p, _) = reference();
    let (coarse, fine) = (20.0, 10.0);
    let ref_dx = fine / 4.0;
    let rg = grid(&p, ref_dx, ref_dx / 50.0, 20.0);
    let reference = simulate(&mut OpenLoop, &p, &rg, &SimOptions::default(), &mut rng()).unwrap();
    let e_coarse = coarse_error(&p, coarse, &reference, ref_dx);
    let e_fine = coarse_error(&p, fine, &reference, ref_dx);
    let order = (e_coarse / e_fine).log2();
    assert!(order >= 0.8, "observed order {order} (errors {e_coarse}, {e_fine})");
}

#[test]
fn step_rejects_mismatched_shapes() {
    let (p, eq) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let s = TrafficState::uniform(g.nodes(), eq.rho, eq.v);
    let err = step(&s, &InputProfile::constant(5, 1.5), &p, &g, 0).unwrap_err();
    assert!(matches!(err, Error::Shape { context: "input", .. }));
}

#[test]
fn trace_csv_round_trips() {
    let (p, _) = reference();
    let g = grid(&p, 5.0, 0.1, 1.0);
    let trace = simulate(&mut Ramp { calls: 0 }, &p, &g, &SimOptions::default(), &mut rng()).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf, &TraceCsvOptions::default()).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(trace::TRACE_SCHEMA));
    let back = Trace::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), trace.len());
    assert_eq!(back.rho, trace.rho);
    assert_eq!(back.v, trace.v);
    assert_eq!(back.applied[..g.steps], trace.applied[..]);

    let mut sub = Vec::new();
    trace
        .write_csv(&mut sub, &TraceCsvOptions { time_stride: 5, space_stride: 10 })
        .unwrap();
    let back = Trace::read_csv(sub.as_slice()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.nodes(), 21);
    assert_relative_eq!(back.dt, 0.5, max_relative = 1e-12);
    assert_relative_eq!(back.dx, 50.0);
}

#[test]
fn f32_simulation_tracks_f64() {
    let p64 = TrafficParams::<f64>::reference();
    let p32 = TrafficParams::<f32>::reference();
    let g64 = make_grid(&p64, 5.0, 0.1, 10.0, 0.0).unwrap();
    let g32 = make_grid(&p32, 5.0f32, 0.1, 10.0, 0.0).unwrap();
    let a = simulate(&mut OpenLoop, &p64, &g64, &SimOptions::default(), &mut rng()).unwrap();
    let b = simulate(&mut OpenLoop, &p32, &g32, &SimOptions::default(), &mut rng()).unwrap();
    for (x, y) in a.rho.last().unwrap().iter().zip(b.rho.last().unwrap()) {
        assert_relative_eq!(*x, f64::from(*y), max_relative = 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn accepted_steps_preserve_positivity(
        amp in 0.0f64..0.03,
        eta in (-1.0f64..1.0, -1.0f64..1.0, -60.0f64..60.0),
    ) {
        let (p, _) = reference();
        let g = grid(&p, 5.0, 0.1, 30.0);
        let mut ctrl = FixedGain { gains: GainAction::new(eta.0, eta.1, eta.2) };
        let opts = SimOptions { amplitude: amp, alpha_noise: None };
        let trace = simulate(&mut ctrl, &p, &g, &opts, &mut rng()).unwrap();
        for n in 0..trace.len() {
            prop_assert!(trace.state(n).find_violation(&p).is_none());
        }
        for h in trace.applied.iter().flatten() {
            prop_assert!(*h >= p.gap_min && *h <= p.gap_max);
        }
    }

    #[test]
    fn delay_buffer_returns_exact_lagged_sequence(d in 0usize..12, len in 1usize..40) {
        let fill = InputProfile::constant(2, -1.0);
        let mut buf = DelayBuffer::new(d, fill.clone());
        for n in 0..len {
            let out = buf.push_pop(InputProfile::constant(2, n as f64));
            if n < d {
                prop_assert_eq!(out, fill.clone());
            } else {
                prop_assert_eq!(out, InputProfile::constant(2, (n - d) as f64));
            }
        }
    }
}
