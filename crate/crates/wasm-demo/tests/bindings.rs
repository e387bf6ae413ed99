use ndftm_wasm::{concrete_histogram, proportions, simulate};

#[test]
fn proportions_reject_mismatched_lengths() {
    assert!(proportions(&[1.0], &[0.0, 1.0]).is_err());
}

#[test]
fn simulation_is_seeded() {
    assert_eq!(simulate(4, 3, 0.4, 0.0, false, 9).unwrap(), simulate(4, 3, 0.4, 0.0, false, 9).unwrap());
    assert_ne!(simulate(4, 3, 0.4, 0.0, false, 9).unwrap(), simulate(4, 3, 0.4, 0.0, false, 10).unwrap());
}

#[test]
fn low_temperature_draws_pile_up_at_the_ends() {
    let h = concrete_histogram(0.5, 0.05, 10_000, 10, 2).unwrap();
    assert!(h[0] + h[9] > 0.9);
}
