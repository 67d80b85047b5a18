//! Snapped value iteration against brute-force recursion over input sequences.

use stopvi::{
    run_fixed_horizon, ControlProblem, CubicIntegrator, InterpMode, RectGrid, RunOptions,
    StoppingCriterion,
};

/// `J_k(x) = min_u ℓ(x, u) + J_{k-1}(snap(f(x, u)))`, `J_{-1} = 0`, with
/// `snap` rounding each coordinate to the integer lattice inside `[-r, r]`.
fn brute<P: ControlProblem<f64>>(p: &P, x: &[f64], inputs: &[f64], k: usize, r: f64) -> f64 {
    inputs
        .iter()
        .map(|&u| {
            let stage = p.stage_cost(x, &[u]);
            if k == 0 {
                return stage;
            }
            let next = [
                (x[0] + u).round().clamp(-r, r),
                (x[1] + u * u * u).round().clamp(-r, r),
            ];
            stage + brute(p, &next, inputs, k - 1, r)
        })
        .fold(f64::INFINITY, f64::min)
}

fn check(bound: f64, n_inputs: usize) {
    let r = 3.0;
    let p = CubicIntegrator::new(bound);
    let sg = RectGrid::new(vec![-r, -r], vec![r, r], vec![7, 7]).unwrap();
    let ig = RectGrid::uniform_1d(-bound, bound, n_inputs).unwrap();
    let inputs: Vec<f64> = (0..n_inputs).map(|i| ig.coord(0, i)).collect();
    let options = RunOptions {
        interp: InterpMode::NearestNeighbor,
        ..RunOptions::default()
    };
    for d in 0..=4 {
        let run = run_fixed_horizon(
            &p,
            sg.clone(),
            ig.clone(),
            StoppingCriterion::uniform(0.0),
            d,
            &options,
        )
        .unwrap();
        assert_eq!(run.d, d);
        for node in 0..sg.len() {
            let x = sg.node_state(&sg.unflatten(node)).unwrap();
            let want = brute(&p, &x, &inputs, d, r);
            assert_eq!(run.v_curr.values()[node], want, "d={d} x={x:?}");
        }
    }
}

#[test]
fn three_inputs_match_enumeration() {
    check(1.0, 3);
}

#[test]
fn five_inputs_match_enumeration() {
    check(2.0, 5);
}

#[test]
fn horizon_zero_is_cheapest_stage() {
    let p = CubicIntegrator::new(1.0);
    let sg = RectGrid::new(vec![-3.0, -3.0], vec![3.0, 3.0], vec![7, 7]).unwrap();
    let ig = RectGrid::uniform_1d(-1.0, 1.0, 3).unwrap();
    let run = run_fixed_horizon(
        &p,
        sg.clone(),
        ig,
        StoppingCriterion::uniform(0.0),
        0,
        &RunOptions::default(),
    )
    .unwrap();
    for node in 0..sg.len() {
        let x = sg.node_state(&sg.unflatten(node)).unwrap();
        assert_eq!(run.v_curr.values()[node], p.sigma(&x));
        assert_eq!(run.policy[node], 1);
    }
}
