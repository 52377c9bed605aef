//! Loss functions: degeneracy of the semantic variants, agreement with direct
//! formula evaluation, and relabelling rates.

use proptest::prelude::*;
use semkge::losses::{bcel, bcel_targets, phl, pll, FlipContext, LossFamily, LossSpec, Variant};

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n)
}

/// Plain evaluation of the hinge sum with per-negative margins.
fn hinge_oracle(margin: f64, pos: &[f64], neg: &[f64], labels: &[f64]) -> f64 {
    let k = neg.len() / pos.len();
    neg.iter()
        .enumerate()
        .map(|(j, &f)| (margin * labels[j] + f - pos[j / k]).max(0.0))
        .sum()
}

fn bce_oracle(scores: &[f64], targets: &[f64]) -> f64 {
    let terms: Vec<f64> = scores
        .iter()
        .zip(targets)
        .map(|(&f, &l)| {
            let p = (1.0 / (1.0 + (-f).exp())).clamp(1e-7, 1.0 - 1e-7);
            l * p.ln() + (1.0 - l) * (1.0 - p).ln()
        })
        .collect();
    -terms.iter().sum::<f64>() / scores.len() as f64
}

fn logistic_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    scores.iter().zip(labels).map(|(&f, &l)| (1.0 + (-l * f).exp()).ln()).sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn phl_s_with_unit_epsilon_is_vanilla(
        pos in scores(4), neg in scores(8), validity in prop::collection::vec(any::<bool>(), 8), margin in 0.1f64..5.0,
    ) {
        let v = LossSpec::vanilla(LossFamily::Phl).with_margin(margin);
        let s = v.with_variant(Variant::S, 1.0);
        let a = phl(&v, &pos, &neg, &validity).unwrap();
        let b = phl(&s, &pos, &neg, &validity).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bcel_s_with_zero_epsilon_is_vanilla(
        f in scores(12), positive in prop::collection::vec(any::<bool>(), 12),
        validity in prop::collection::vec(any::<bool>(), 12), seed in any::<u64>(),
    ) {
        let v = LossSpec::vanilla(LossFamily::Bcel);
        let flips = FlipContext::new(seed, 0, 0);
        for s in [v.with_variant(Variant::S, 0.0), v.with_variant(Variant::SPrime, 0.0)] {
            let tv = bcel_targets(&v, &positive, &validity, &flips, 0).unwrap();
            let ts = bcel_targets(&s, &positive, &validity, &flips, 0).unwrap();
            prop_assert_eq!(&tv, &ts);
            let a = bcel(&v, &f, &tv).unwrap();
            let b = bcel(&s, &f, &ts).unwrap();
            prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pll_s_with_zero_epsilon_is_vanilla(
        f in scores(9), validity in prop::collection::vec(any::<bool>(), 9), seed in any::<u64>(),
    ) {
        let labels: Vec<f64> = (0..9).map(|i| if i < 3 { 1.0 } else { -1.0 }).collect();
        let v = LossSpec::vanilla(LossFamily::Pll);
        let s = v.with_variant(Variant::S, 0.0);
        let flips = FlipContext::new(seed, 2, 5);
        let a = pll(&v, &f, &labels, &validity, &flips).unwrap();
        let b = pll(&s, &f, &labels, &validity, &flips).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn phl_matches_direct_sum(
        pos in scores(3), neg in scores(6), validity in prop::collection::vec(any::<bool>(), 6),
        margin in 0.1f64..5.0, eps in 0.01f64..=1.0,
    ) {
        let spec = LossSpec::vanilla(LossFamily::Phl).with_margin(margin).with_variant(Variant::S, eps);
        let labels: Vec<f64> = validity.iter().map(|&v| if v { eps } else { 1.0 }).collect();
        let out = phl(&spec, &pos, &neg, &validity).unwrap();
        prop_assert!(close(out.value, hinge_oracle(margin, &pos, &neg, &labels)));
        prop_assert!(out.value >= 0.0);
    }

    #[test]
    fn bcel_matches_direct_formula(f in scores(10), targets in prop::collection::vec(0.0f64..=1.0, 10)) {
        let out = bcel(&LossSpec::vanilla(LossFamily::Bcel), &f, &targets).unwrap();
        prop_assert!(close(out.value, bce_oracle(&f, &targets)));
    }

    #[test]
    fn pll_s_prime_matches_direct_formula(
        f in scores(6), validity in prop::collection::vec(any::<bool>(), 6), eps in -1.0f64..=1.0,
    ) {
        let labels = [1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let spec = LossSpec::vanilla(LossFamily::Pll).with_variant(Variant::SPrime, eps);
        let expect: Vec<f64> = labels
            .iter()
            .zip(&validity)
            .map(|(&l, &v)| if l < 0.0 && v { eps } else { l })
            .collect();
        let out = pll(&spec, &f, &labels, &validity, &FlipContext::new(0, 0, 0)).unwrap();
        // the direct log(1 + exp) overflows for large margins, so restrict the comparison
        if f.iter().all(|x| x.abs() < 15.0) {
            prop_assert!(close(out.value, logistic_oracle(&f, &expect)));
        }
    }
}

#[test]
fn hand_computed_values() {
    // γ = 1, positive at 0.2, negative at 0.5
    let v = LossSpec::vanilla(LossFamily::Phl);
    let out = phl(&v, &[0.2], &[0.5], &[false]).unwrap();
    assert!((out.value - 1.3).abs() < 1e-10);
    // the same negative when valid, with ε = 0.5
    let s = v.with_variant(Variant::S, 0.5);
    let out = phl(&s, &[0.2], &[0.5], &[true]).unwrap();
    assert!((out.value - 0.8).abs() < 1e-10);

    // BCEL row with sigma(f) = (0.9, 0.2) and targets (1, 0)
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let b = bcel(&LossSpec::vanilla(LossFamily::Bcel), &[logit(0.9), logit(0.2)], &[1.0, 0.0]).unwrap();
    let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((b.value - expect).abs() < 1e-10);
    assert!((b.value - 0.1643).abs() < 1e-4);

    // PLL: label +1 at 0 and -1 at 0 both cost log 2
    let p = pll(&LossSpec::vanilla(LossFamily::Pll), &[0.0, 0.0], &[1.0, -1.0], &[false, false], &FlipContext::new(0, 0, 0)).unwrap();
    assert!((p.value - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let phl = LossSpec::vanilla(LossFamily::Phl);
    assert!(phl.with_variant(Variant::S, 0.0).validate().is_err());
    assert!(phl.with_variant(Variant::S, 1.5).validate().is_err());
    assert!(phl.with_variant(Variant::SPrime, 0.5).validate().is_err());
    assert!(phl.with_margin(0.0).validate().is_err());
    let bcel = LossSpec::vanilla(LossFamily::Bcel);
    assert!(bcel.with_variant(Variant::S, 1.0).validate().is_err());
    assert!(bcel.with_variant(Variant::S, -0.1).validate().is_err());
    assert!(bcel.with_variant(Variant::SPrime, 1.0).validate().is_ok());
    let pll = LossSpec::vanilla(LossFamily::Pll);
    assert!(pll.with_variant(Variant::S, 1.1).validate().is_err());
    assert!(pll.with_variant(Variant::SPrime, -0.1).validate().is_ok());
    assert!(pll.with_variant(Variant::SPrime, -1.1).validate().is_err());
}

#[test]
fn stochastic_relabelling_happens_at_rate_epsilon() {
    let n = 20_000;
    let eps = 0.3;
    let sigma = (eps * (1.0 - eps) / n as f64).sqrt();
    let flips = FlipContext::new(17, 4, 9);

    let positive = vec![false; n];
    let validity: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let spec = LossSpec::vanilla(LossFamily::Bcel).with_variant(Variant::SPrime, eps);
    let t = bcel_targets(&spec, &positive, &validity, &flips, 0).unwrap();
    let flipped: Vec<f64> = t.iter().zip(&validity).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
    let rate = flipped.iter().sum::<f64>() / flipped.len() as f64;
    assert!((rate - eps).abs() < 4.0 * sigma * 2f64.sqrt(), "BCEL-S' rate {rate}");
    assert!(t.iter().zip(&validity).all(|(&x, &v)| v || x == 0.0));

    let labels = vec![-1.0; n];
    let all_valid = vec![true; n];
    let spec = LossSpec::vanilla(LossFamily::Pll).with_variant(Variant::S, eps);
    let l = semkge::losses::pll_labels(&spec, &labels, &all_valid, &flips).unwrap();
    let rate = l.iter().filter(|&&x| x == 1.0).count() as f64 / n as f64;
    assert!((rate - eps).abs() < 4.0 * sigma, "PLL-S rate {rate}");
}
