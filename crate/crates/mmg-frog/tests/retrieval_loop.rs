//! End-to-end retrieval checks on synthetic spectrograms.

use mmg_frog::*;

fn truth_state(time: &TimeGrid, dbs: &[f64], t0: f64, chirp: f64) -> GaussianStateSpec {
    let modes: Vec<_> = (0..dbs.len())
        .map(|n| hermite_gaussian_mode(time, n, t0, chirp, n).unwrap())
        .collect();
    let basis = ModeBasis::new(modes, time).unwrap();
    GaussianStateSpec::new(
        basis,
        dbs.iter().map(|&d| squeezing_db_to_variance(d)).collect(),
        dbs.iter().map(|&d| squeezing_db_to_variance(-d)).collect(),
        vec![0.0; dbs.len()],
        0.0,
    )
    .unwrap()
}

#[test]
fn noiseless_two_mode_retrieval_converges() {
    let time = TimeGrid::centered(128, 4.0).unwrap();
    let delays = DelayGrid::symmetric(32, 8.0).unwrap();
    let gate = chirped_gaussian_gate(&time, 100.0, 0.5, 50.0, 0.0).unwrap();
    let fns = gate_functions(&gate, &time).unwrap();
    let truth = truth_state(&time, &[3.0, 2.0], 25.0, 1.0);
    let measured = synthesize_spectrogram(&truth, &fns, &time, &delays, true).unwrap();

    let mut cfg = RetrievalConfig::new(2, 7);
    cfg.max_iters = 40_000;
    let result = retrieve(&measured, &fns, &time, &cfg).unwrap();
    for (i, l) in result.loss_trace.iter().enumerate() {
        if i % 250 == 0 {
            eprintln!("  trace[{i}] = {l:.4e}");
        }
    }
    eprintln!(
        "final_loss = {:.3e}, iters = {}, var_x = {:?}, var_p = {:?}, diag = {:?}",
        result.final_loss, result.iterations_run, result.var_x, result.var_p, result.diagnostics
    );
    let mm = match_modes(&truth.basis, &result.basis, time.dt()).unwrap();
    eprintln!("fidelities = {:?}", mm.fidelities);
    assert!(result.final_loss < 0.01, "loss = {}", result.final_loss);
    for (i, &f) in mm.fidelities.iter().enumerate() {
        assert!(f > 0.99, "mode {i} fidelity {f}");
    }
    for i in 0..2 {
        let j = mm.permutation[i];
        let db_t = variance_to_squeezing_db(truth.var_x[i]);
        let db_r = variance_to_squeezing_db(result.var_x[j]);
        eprintln!("mode {i}: truth {db_t:.3} dB, recovered {db_r:.3} dB");
        assert!(
            (db_r - db_t).abs() / db_t.abs() < 0.05,
            "mode {i}: {db_t} vs {db_r}"
        );
    }
}
