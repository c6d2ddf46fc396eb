//! Analytic cost model against an independent stage-by-stage summation.

use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use vit_inversion::cost::{
    cost_dmi, cost_pri, cost_smi_star, sa_bound_factor, verify_ordering, CostParams, CostReport,
};

fn q(x: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

fn frac(a: u64, b: u64) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

fn sa_units(n: &BigRational, d: &BigRational) -> BigRational {
    q(4) * n * d * d + q(2) * n * n * d
}

fn ffn_units(n: &BigRational, d: &BigRational) -> BigRational {
    q(8) * n * d * d
}

/// Stage sum: `I/v` trajectories, each running `v` stages of `T/v`
/// iterations over `N·(v−k+1)/v` patches.
fn pri_oracle(p: &CostParams) -> (BigRational, BigRational) {
    let d = q(p.d);
    let trajectories = frac(p.images, p.v);
    let stage_iters = frac(p.iterations, p.v);
    let mut sa = q(0);
    let mut ffn = q(0);
    for k in 1..=p.v {
        let active = frac(p.n * (p.v - k + 1), p.v);
        sa += sa_units(&active, &d);
        ffn += ffn_units(&active, &d);
    }
    let scale = trajectories * stage_iters * q(p.layers);
    (&scale * sa, scale * ffn)
}

fn smi_oracle(p: &CostParams) -> (BigRational, BigRational) {
    let active = frac(p.n, p.v);
    let scale = q(p.layers * p.images * p.iterations);
    let d = q(p.d);
    (&scale * sa_units(&active, &d), scale * ffn_units(&active, &d))
}

fn dmi_oracle(p: &CostParams) -> (BigRational, BigRational) {
    let scale = q(p.layers * p.images * p.iterations);
    let (n, d) = (q(p.n), q(p.d));
    (&scale * sa_units(&n, &d), scale * ffn_units(&n, &d))
}

fn params() -> impl Strategy<Value = CostParams> {
    (1u64..=4096, 1u64..=1024, 1u64..=48, 1u64..=100_000, 1u64..=10_000, 2u64..=64)
        .prop_map(|(n, d, layers, images, iterations, v)| CostParams { n, d, layers, images, iterations, v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn closed_forms_equal_stage_sums(p in params()) {
        let pri = cost_pri(&p).unwrap();
        let smi = cost_smi_star(&p).unwrap();
        let dmi = cost_dmi(&p).unwrap();
        prop_assert_eq!((pri.sa.clone(), pri.ffn.clone()), pri_oracle(&p));
        prop_assert_eq!((smi.sa.clone(), smi.ffn.clone()), smi_oracle(&p));
        prop_assert_eq!((dmi.sa.clone(), dmi.ffn.clone()), dmi_oracle(&p));
    }

    #[test]
    fn ffn_ordering_is_unconditional(p in params()) {
        let pri = pri_oracle(&p).1;
        let smi = smi_oracle(&p).1;
        let dmi = dmi_oracle(&p).1;
        prop_assert!(pri < smi && smi < dmi);
        prop_assert!(verify_ordering(&p).unwrap().ffn_ordering);
        prop_assert_eq!(&pri / &smi, frac(p.v + 1, 2 * p.v));
    }

    #[test]
    fn sa_ordering_holds_exactly_below_bound(p in params()) {
        let (pri, smi, dmi) = (pri_oracle(&p).0, smi_oracle(&p).0, dmi_oracle(&p).0);
        let holds = pri < smi && smi < dmi;
        let v = p.v;
        let bound = frac(6 * v * (v - 1), 2 * v * v - 3 * v + 1) * q(p.d);
        let verdict = verify_ordering(&p).unwrap();
        prop_assert_eq!(holds, q(p.n) < bound);
        prop_assert_eq!(verdict.sa_ordering, holds);
        prop_assert_eq!(verdict.n_below_bound, holds);
    }

    #[test]
    fn smi_star_sa_always_below_dmi(p in params()) {
        prop_assert!(smi_oracle(&p).0 < dmi_oracle(&p).0);
    }
}

fn toy(v: u64) -> CostParams {
    CostParams { n: 16, d: 64, layers: 4, images: 1, iterations: 400, v }
}

#[test]
fn toy_ffn_ratios_are_exact() {
    for (v, expected) in [(2, frac(3, 4)), (4, frac(5, 8)), (7, frac(4, 7))] {
        let p = toy(v);
        let ratio = cost_pri(&p).unwrap().ffn / cost_smi_star(&p).unwrap().ffn;
        assert_eq!(ratio, expected, "v = {v}");
    }
}

#[test]
fn sa_boundary_on_both_sides() {
    // v = 2 gives a bound factor of exactly 4, so N = 4d is the tie.
    assert_eq!(sa_bound_factor(2).unwrap(), q(4));
    for d in [1u64, 16, 64, 384] {
        for (n, expected) in [(4 * d - 1, true), (4 * d, false), (4 * d + 1, false)] {
            let p = CostParams { n, d, layers: 2, images: 8, iterations: 100, v: 2 };
            let verdict = verify_ordering(&p).unwrap();
            assert_eq!(verdict.sa_ordering, expected, "N={n} d={d}");
            assert_eq!(verdict.n_below_bound, expected, "N={n} d={d}");
        }
    }
    // v = 4: factor 72/21 = 24/7, integral bound at d = 7.
    assert_eq!(sa_bound_factor(4).unwrap(), frac(24, 7));
    for (n, expected) in [(23, true), (24, false), (25, false)] {
        let p = CostParams { n, d: 7, layers: 1, images: 4, iterations: 8, v: 4 };
        let pri = pri_oracle(&p).0;
        let smi = smi_oracle(&p).0;
        assert_eq!(pri < smi, expected, "oracle N={n}");
        assert_eq!(verify_ordering(&p).unwrap().sa_ordering, expected, "N={n}");
    }
}

#[test]
fn bound_factor_tends_to_three() {
    let f = sa_bound_factor(1_000_000).unwrap();
    assert!(f > q(3) && f < frac(3001, 1000));
    assert!(sa_bound_factor(1).is_err());
}

#[test]
fn invalid_parameters_are_rejected() {
    let good = toy(4);
    assert!(cost_pri(&CostParams { v: 1, ..good }).is_err());
    assert!(verify_ordering(&CostParams { v: 0, ..good }).is_err());
    assert!(cost_dmi(&CostParams { n: 0, ..good }).is_err());
    assert!(cost_smi_star(&CostParams { iterations: 0, ..good }).is_err());
    assert!(CostReport::new(&CostParams { d: 0, ..good }).is_err());
}

#[test]
fn toy_table_values() {
    let p = CostParams { n: 16, d: 64, layers: 4, images: 1, iterations: 400, v: 4 };
    let dmi = cost_dmi(&p).unwrap();
    assert_eq!(dmi.ffn, q(400 * 4 * 8 * 16 * 64 * 64));
    assert_eq!(dmi.sa, q(400 * 4 * (4 * 16 * 64 * 64 + 2 * 16 * 16 * 64)));
    let table = CostReport::new(&p).unwrap().to_table();
    assert!(table.contains("PRI/SMI* FFN ratio  5/8"));
}
