use proptest::prelude::*;
use qtwin_core::channel::{
    entanglement_ttl, gg_pdf, link_transmittance, memory_fidelity, rytov_to_gg, sample_irradiance, sample_pointing_error,
    secret_key_rate, GammaGammaParams, LinkBudgetInputs, QkdLinkModel, QuantumMemorySpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_inputs() -> impl Strategy<Value = LinkBudgetInputs> {
    (500.0..1600.0f64, 0.01..2.0f64, 0.5..200.0f64, 0.0..3000.0f64, 0.0..5.0f64, 0.0..20.0f64, 0.0..20.0f64).prop_map(
        |(wavelength_nm, rx_aperture_m, divergence_urad, range_km, extinction_db_per_km, atm_path_km, pointing_jitter_urad)| {
            LinkBudgetInputs {
                wavelength_nm,
                rx_aperture_m,
                divergence_urad,
                range_km,
                extinction_db_per_km,
                atm_path_km,
                pointing_jitter_urad,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn transmittance_stays_in_unit_interval(
        inputs in arb_inputs(),
        sigma_r2 in 0.0..10.0f64,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gg = rytov_to_gg(sigma_r2, inputs.rx_aperture_m, inputs.range_km, inputs.wavelength_nm).unwrap();
        for _ in 0..16 {
            let i = if gg.is_degenerate() { 1.0 } else { sample_irradiance(&gg, &mut rng) };
            let offset = sample_pointing_error(inputs.pointing_jitter_urad, &mut rng);
            let b = link_transmittance(&inputs, i, offset);
            prop_assert!((0.0..=1.0).contains(&b.eta_total));
            for f in [b.eta_geo, b.eta_atm, b.eta_point] {
                prop_assert!((0.0..=1.0).contains(&f));
            }
            prop_assert!(b.eta_turb >= 0.0);
        }
    }

    #[test]
    fn key_rate_is_non_negative_and_monotone(mut grid in prop::collection::vec(0.0..1.0f64, 2..64)) {
        let model = QkdLinkModel::default();
        grid.sort_by(f64::total_cmp);
        let rates: Vec<f64> = grid.iter().map(|e| secret_key_rate(&model, *e)).collect();
        prop_assert!(rates.iter().all(|r| *r >= 0.0));
        prop_assert!(rates.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn fidelity_decays_strictly(t2 in 1e-3..10.0f64, a in 0.0..20.0f64, gap in 1e-3..5.0f64) {
        let spec = QuantumMemorySpec { t2_s: t2, f_min: 0.85, capacity: 4 };
        let f0 = memory_fidelity(&spec, a * t2).unwrap();
        let f1 = memory_fidelity(&spec, (a + gap) * t2).unwrap();
        prop_assert!(f1 < f0);
        prop_assert!(f1 > 0.5);
    }

    #[test]
    fn ttl_inverts_the_decay(t2 in 1e-3..10.0f64, f_min in 0.51..0.999f64) {
        let spec = QuantumMemorySpec { t2_s: t2, f_min, capacity: 4 };
        let ttl = entanglement_ttl(&spec).unwrap();
        prop_assert!((memory_fidelity(&spec, ttl).unwrap() - f_min).abs() <= 1e-12);
    }

    #[test]
    fn sampler_is_a_function_of_the_seed(alpha in 0.5..20.0f64, beta in 0.5..20.0f64, seed in any::<u64>()) {
        let p = GammaGammaParams::new(alpha, beta, 1.0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            let (a, b) = (sample_irradiance(&p, &mut r1), sample_irradiance(&p, &mut r2));
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a > 0.0);
        }
    }

    #[test]
    fn pdf_is_a_density(alpha in 0.5..20.0f64, beta in 0.5..20.0f64, i in 1e-4..10.0f64) {
        let p = GammaGammaParams::new(alpha, beta, 1.0).unwrap();
        let d = gg_pdf(i, &p).unwrap();
        prop_assert!(d.is_finite() && d >= 0.0);
    }
}

/// Second moment against the closed form on a few shape pairs, 10^6 draws.
#[test]
fn moments_match_closed_forms() {
    for (alpha, beta, i0) in [(4.0, 2.0, 1.0), (11.6, 10.1, 0.35), (2.5, 1.2, 2.0)] {
        let p = GammaGammaParams::new(alpha, beta, i0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = sample_irradiance(&p, &mut rng);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let si = s2 / n as f64 / (mean * mean) - 1.0;
        assert!((mean - i0).abs() / i0 < 0.01, "{alpha},{beta}: mean {mean}");
        assert!((si - p.scintillation_index()).abs() / p.scintillation_index() < 0.02, "{alpha},{beta}: SI {si}");
    }
}
