mod common;

use common::motzkin;
use dmpc::poly::Polynomial;
use dmpc::sdp::{solve_sdp, SdpStatus};
use dmpc::sos::{find_gram, gram_transcribe, monomial_basis, verify_gram};
use proptest::prelude::*;

#[test]
fn motzkin_is_not_sos() {
    let p = motzkin();
    // nonnegative on a grid, as a sanity check on the construction
    for i in -20..=20 {
        for j in -20..=20 {
            let v = p.evaluate(&[i as f64 / 10.0, j as f64 / 10.0]).unwrap();
            assert!(v >= -1e-12);
        }
    }
    let sdp = gram_transcribe(&p, &monomial_basis(2, 3)).unwrap();
    let sol = solve_sdp(&sdp).unwrap();
    assert_eq!(sol.status, SdpStatus::PrimalInfeasible);
}

fn random_square_sum(seed: u64) -> Polynomial {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let basis = monomial_basis(2, 2);
    let mut p = Polynomial::zero(2);
    for _ in 0..3 {
        let mut q = Polynomial::zero(2);
        for m in &basis {
            q = &q + &Polynomial::monomial(m.clone(), rng.gen_range(-1.0..1.0));
        }
        p = &p + &(&q * &q);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn solved_grams_verify(seed in 0u64..10_000) {
        let p = random_square_sum(seed);
        let cert = find_gram(&p, &monomial_basis(2, 2)).unwrap();
        let cert = cert.expect("sum of squares must be found");
        prop_assert!(verify_gram(&p, &cert, 1e-6).valid);
    }
}

