use otfs_scma_core::sim::{
    results_csv, run_experiment, BudgetConfig, ChannelKind, ExperimentConfig, GridConfig,
    SchemeKind,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        grid: GridConfig { m: 8, n: 4 },
        budget: BudgetConfig {
            max_frames: 10,
            max_bit_errors: 5000,
            chunk: 4,
        },
        ..Default::default()
    }
}

#[test]
fn noiseless_identity_has_no_errors() {
    let mut cfg = small();
    cfg.ebn0_db = vec![60.0];
    cfg.channel.kind = ChannelKind::Identity;
    cfg.schemes = SchemeKind::ALL.to_vec();
    for r in run_experiment(&cfg).unwrap() {
        assert_eq!(r.frames, 10);
        assert_eq!(r.bit_errors, 0, "{}", r.scheme);
        assert_eq!(r.ber, 0.0);
    }
}

#[test]
fn same_seed_same_bytes_other_seed_differs() {
    let mut cfg = small();
    cfg.ebn0_db = vec![4.0, 8.0];
    let a = results_csv(&run_experiment(&cfg).unwrap()).unwrap();
    let b = results_csv(&run_experiment(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    let c = results_csv(&run_experiment(&cfg).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bit_accounting_is_exact() {
    let mut cfg = small();
    cfg.ebn0_db = vec![0.0];
    cfg.schemes = vec![SchemeKind::TwoStage, SchemeKind::Joint];
    for r in run_experiment(&cfg).unwrap() {
        // frames * (MN / K) * J * log2 M
        assert_eq!(r.total_bits, r.frames * (32 / 4) * 6 * 2);
        assert_eq!(r.ber, r.bit_errors as f64 / r.total_bits as f64);
        assert!(r.bit_errors > 0);
    }
}

#[test]
fn ber_falls_with_snr_on_average() {
    let mut cfg = small();
    cfg.ebn0_db = vec![0.0, 10.0, 20.0];
    cfg.budget.max_frames = 30;
    let rows = run_experiment(&cfg).unwrap();
    assert!(
        rows[0].ber > rows[1].ber && rows[1].ber > rows[2].ber,
        "{rows:?}"
    );
}
