use plasthom::energy::energy_total;
use plasthom::finsler::{distance, gamma_interp, sample_in_k, InterpMode, Interpolator, MinkowskiNorm};
use plasthom::gluing::{build_annuli, build_cutoff, glue, random_fields};
use plasthom::grid::{box_mask, GridDomain};
use plasthom::io::config_hash;
use plasthom::materials::{MaterialModel, WeightField};
use plasthom::Mat3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn catalog() -> Vec<MaterialModel> {
    let q = |w, h| MaterialModel::quadratic(w, h).unwrap();
    vec![
        q(WeightField::Homogeneous { weight: 2.0 }, WeightField::Homogeneous { weight: 1.0 }),
        q(
            WeightField::TwoPhaseLaminate { a: 1.0, b: 4.0, axis: 1, fraction: 0.3 },
            WeightField::TwoPhaseLaminate { a: 1.0, b: 3.0, axis: 0, fraction: 0.5 },
        ),
        q(WeightField::Checkerboard { a: 1.0, b: 4.0 }, WeightField::Checkerboard { a: 2.0, b: 1.0 }),
    ]
}

fn mat(v: &[f64]) -> Mat3 {
    Mat3::from_row_slice(v).unwrap()
}

// dyadic coordinates so that x + 1 is exact
fn coord() -> impl Strategy<Value = f64> {
    (0u32..(1 << 20)).prop_map(|k| k as f64 / (1u32 << 20) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn densities_are_periodic_and_nonnegative(
        x in prop::array::uniform3(coord()),
        f in prop::collection::vec(-3.0f64..3.0, 9),
        axis in 0usize..3,
        seed in any::<u64>(),
    ) {
        let f = mat(&f);
        let mut shifted = x;
        shifted[axis] += 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in catalog() {
            prop_assert_eq!(m.eval_w(&x, &f), m.eval_w(&shifted, &f));
            prop_assert!(m.eval_w(&x, &f) >= 0.0);
            let p = sample_in_k(&mut rng, &m.norm, m.k_radius);
            let h = m.eval_h(&x, &p);
            prop_assert!(h >= 0.0 && h.is_finite());
            prop_assert_eq!(h, m.eval_h(&shifted, &p));
        }
    }

    #[test]
    fn distance_axioms(seed in any::<u64>()) {
        let norm = MinkowskiNorm::Frobenius;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sample_in_k(&mut rng, &norm, 0.5);
        let b = sample_in_k(&mut rng, &norm, 0.5);
        let c = sample_in_k(&mut rng, &norm, 0.5);
        prop_assert!(distance(&norm, &a, &a).unwrap() <= 1e-12);
        let ab = distance(&norm, &a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(distance(&norm, &a, &c).unwrap() <= ab + distance(&norm, &b, &c).unwrap() + 1e-6);
    }

    #[test]
    fn interpolation_stays_on_sl3(seed in any::<u64>(), t in 0.0f64..=1.0, exact in any::<bool>()) {
        let norm = MinkowskiNorm::Frobenius;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = sample_in_k(&mut rng, &norm, 0.5);
        let g = sample_in_k(&mut rng, &norm, 0.5);
        let mode = if exact { InterpMode::GeodesicExact } else { InterpMode::GroupExp };
        let p = gamma_interp(&norm, 0.5, t, &f, &g, mode).unwrap();
        prop_assert!((p.value().det() - 1.0).abs() <= 1e-9);
        let f0 = gamma_interp(&norm, 0.5, 0.0, &f, &g, mode).unwrap();
        let g1 = gamma_interp(&norm, 0.5, 1.0, &f, &g, mode).unwrap();
        prop_assert_eq!(f0.value(), f.value());
        prop_assert_eq!(g1.value(), g.value());
    }

    #[test]
    fn energy_is_additive_over_disjoint_masks(
        split in 1usize..9,
        seed in any::<u64>(),
        eps in prop::sample::select(vec![1.0, 0.5, 0.25]),
    ) {
        let full = GridDomain::cube(2, 1.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, p) = random_fields(&full, &mut rng, 0.1, 0.1);
        let cut = split as f64 / 10.0;
        let a = box_mask(&full, &[0.0, 0.0], &[cut, 1.0]);
        let b = box_mask(&full, &[cut, 0.0], &[1.0, 1.0]);
        let m = &catalog()[1];
        let eval = |mask: &Vec<bool>| energy_total(m, eps, &y, &p, &full.clone().with_mask(mask.clone()).unwrap()).unwrap();
        let (ea, eb, whole) = (eval(&a), eval(&b), energy_total(m, eps, &y, &p, &full).unwrap());
        prop_assert!((ea.total + eb.total - whole.total).abs() <= 1e-12 * whole.total.max(1.0));
        prop_assert!(ea.total <= whole.total && eb.total <= whole.total);
    }

    #[test]
    fn glue_is_exact_where_the_cutoff_is_pure(seed in any::<u64>(), layer in 1usize..=3) {
        let dom = GridDomain::cube(2, 1.0, 64).unwrap();
        let ap = box_mask(&dom, &[0.3, 0.3], &[0.7, 0.7]);
        let a = box_mask(&dom, &[0.02, 0.02], &[0.98, 0.98]);
        let dec = build_annuli(&dom, &ap, &a, 3).unwrap();
        let cut = build_cutoff(&dom, &dec, layer).unwrap();
        prop_assert!(cut.gradient_max <= cut.gradient_bound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y1, p1) = random_fields(&dom, &mut rng, 0.2, 0.2);
        let (y2, p2) = random_fields(&dom, &mut rng, 0.2, 0.2);
        let interp = Interpolator::new(MinkowskiNorm::Frobenius, 0.5, InterpMode::GroupExp);
        let g = glue(&interp, &cut.phi, &y1, &p1, &y2, &p2).unwrap();
        prop_assert!(g.max_det_drift <= 1e-9);
        for (k, &phi) in cut.phi.iter().enumerate() {
            let (ys, ps) = if phi == 1.0 { (&y1, &p1) } else if phi == 0.0 { (&y2, &p2) } else { continue };
            prop_assert_eq!(g.y.node(k), ys.node(k));
            prop_assert_eq!(g.p.nodes[k].value(), ps.nodes[k].value());
        }
    }

    #[test]
    fn config_hash_ignores_layout(a in -1e6f64..1e6, b in any::<u32>(), name in "[a-z]{1,8}") {
        let one = format!("{{\"alpha\": {a:?}, \"beta\": {b}, \"name\": \"{name}\"}}");
        let two = format!("{{\n  \"name\": \"{name}\",\n  \"beta\": {b},\n  \"alpha\": {a:?}\n}}");
        prop_assert_eq!(config_hash(&one).unwrap(), config_hash(&two).unwrap());
        let other = format!("{{\"alpha\": {a:?}, \"beta\": {}, \"name\": \"{name}\"}}", b as u64 + 1);
        prop_assert_ne!(config_hash(&one).unwrap(), config_hash(&other).unwrap());
    }
}
