//! Property tests for the proximal kernel, the losses and the run configuration.

use nalgebra::DMatrix;
use proptest::prelude::*;

use erm_asymptotics::config::{cell_seed, RunConfig};
use erm_asymptotics::linalg::min_eigenvalue;
use erm_asymptotics::linmodel::{EffectiveNoise, LossModel, MultinomialLoss, SquaredLoss};
use erm_asymptotics::prox::prox;

const K: usize = 2;

fn spd() -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(-1.0..1.0f64, K * K), 0.05..2.0f64).prop_map(|(a, shift)| {
        let a = DMatrix::from_vec(K, K, a);
        &a * a.transpose() + DMatrix::identity(K, K) * shift
    })
}

fn point(scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, K)
}

fn instance() -> impl Strategy<Value = (bool, Vec<f64>)> {
    prop_oneof![
        (0..=K).prop_map(|c| (true, (0..K).map(|j| if j + 1 == c { 1.0 } else { 0.0 }).collect())),
        point(2.0).prop_map(|y| (false, y)),
    ]
}

fn build(multinomial: bool) -> Box<dyn LossModel> {
    if multinomial {
        Box::new(MultinomialLoss::multinomial(K))
    } else {
        Box::new(SquaredLoss::new(K, 1.0))
    }
}

fn quad(m: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    (0..K).map(|i| (0..K).map(|j| a[i] * m[(i, j)] * b[j]).sum::<f64>()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prox_is_firmly_nonexpansive_in_the_noise_metric(
        (multinomial, y) in instance(), s in spd(), z1 in point(4.0), z2 in point(4.0),
    ) {
        let loss = build(multinomial);
        let noise = EffectiveNoise::new(s.clone()).unwrap();
        let a = prox(loss.as_ref(), &y, &z1, &noise).unwrap();
        let b = prox(loss.as_ref(), &y, &z2, &noise).unwrap();
        let sinv = s.try_inverse().unwrap();
        let dx: Vec<f64> = a.x.iter().zip(&b.x).map(|(p, q)| p - q).collect();
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| p - q).collect();
        let gap = quad(&sinv, &dx, &dx) - quad(&sinv, &dx, &dz);
        prop_assert!(gap <= 1e-9 * (1.0 + quad(&sinv, &dz, &dz)), "gap {gap:e}");
    }

    #[test]
    fn prox_residual_is_small((multinomial, y) in instance(), s in spd(), z in point(6.0)) {
        let loss = build(multinomial);
        let p = prox(loss.as_ref(), &y, &z, &EffectiveNoise::new(s).unwrap()).unwrap();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(p.residual <= 1e-10 * (1.0 + zn), "residual {:e}", p.residual);
    }

    #[test]
    fn envelope_is_below_the_loss((multinomial, y) in instance(), s in spd(), z in point(4.0)) {
        let loss = build(multinomial);
        let p = prox(loss.as_ref(), &y, &z, &EffectiveNoise::new(s).unwrap()).unwrap();
        let l = loss.value(&z, &y);
        prop_assert!(p.envelope <= l + 1e-12 * (1.0 + l.abs()), "envelope {} loss {}", p.envelope, l);
    }

    #[test]
    fn multinomial_hessian_is_psd((_, y) in instance().prop_filter("one-hot", |(m, _)| *m), v in point(30.0)) {
        let loss = MultinomialLoss::multinomial(K);
        let mut g = vec![0.0; K];
        let mut h = vec![0.0; K * K];
        let value = loss.eval(&v, &y, &mut g, &mut h);
        prop_assert!(value >= 0.0 && value.is_finite());
        let h = DMatrix::from_row_slice(K, K, &h);
        prop_assert!((&h - h.transpose()).amax() <= 1e-15);
        prop_assert!(min_eigenvalue(&h) >= -1e-15);
    }

    #[test]
    fn config_roundtrips_through_toml(
        alphas in prop::collection::vec(0.5..50.0f64, 1..4),
        lambda in 1e-3..10.0f64,
        rho in -0.9..0.9f64,
        seed in any::<u64>(),
    ) {
        let text = format!(
            "k = 2\nk0 = 2\nr00 = [[1.0, {rho:?}], [{rho:?}, 1.0]]\nseed = {seed}\n\n[theory]\nalpha = {alphas:?}\nlambda = [{lambda:?}]\n"
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        let again = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn cell_seeds_are_distinct(seed in any::<u64>(), a in 0usize..10_000, b in 0usize..10_000) {
        prop_assume!(a != b);
        prop_assert_ne!(cell_seed(seed, a), cell_seed(seed, b));
        prop_assert_eq!(cell_seed(seed, a), cell_seed(seed, a));
    }
}
