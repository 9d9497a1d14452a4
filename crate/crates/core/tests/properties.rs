use candle_core::Tensor;
use manifold_prune::agents::{gumbel_sigmoid_ste, GumbelDraw};
use manifold_prune::archspec::{build_spec, harden, macs_of, PrunableSpec};
use manifold_prune::config::{EmbeddingSource, ModelConfig, RunConfig, SimilarityMode};
use manifold_prune::evalreport::{frechet_distance, FrechetStats};
use manifold_prune::manifold::{build_index, EmbeddingSet};
use manifold_prune::models::{GeneratorConfig, GeneratorNet};
use manifold_prune::nn::DEVICE;
use manifold_prune::objectives::{resource_loss, sparsity_loss};
use manifold_prune::util::rng_for;
use proptest::prelude::*;
use std::sync::OnceLock;

fn spec() -> &'static PrunableSpec {
    static SPEC: OnceLock<PrunableSpec> = OnceLock::new();
    SPEC.get_or_init(|| {
        let m = ModelConfig { base_width: 4, depth: 2, ..Default::default() };
        let g = GeneratorNet::new(GeneratorConfig::from_model(&m, 16), &mut rng_for(0, "prop")).unwrap();
        build_spec(&g).unwrap()
    })
}

fn resource(v: &[f64], p: f64) -> f64 {
    let t = Tensor::new(v, &DEVICE).unwrap();
    resource_loss(spec(), &t, p).unwrap().to_scalar::<f64>().unwrap()
}

fn soft_vector() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, spec().num_units())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn macs_monotone_in_each_unit(v in soft_vector(), i in 0usize..1000) {
        let i = i % v.len();
        let mut lo = v.clone();
        let mut hi = v.clone();
        lo[i] = 0.0;
        hi[i] = 1.0;
        let (a, b) = (macs_of(spec(), &lo).unwrap(), macs_of(spec(), &hi).unwrap());
        prop_assert!(a <= b);
        let all = macs_of(spec(), &vec![1.0; v.len()]).unwrap();
        prop_assert!(b <= all + 1e-6);
        prop_assert!(macs_of(spec(), &v).unwrap() >= spec().fixed_macs);
    }

    #[test]
    fn resource_nonnegative_and_zero_within_budget(v in soft_vector(), p in 0.05f64..=1.0) {
        let r = resource(&v, p);
        let prunable = macs_of(spec(), &v).unwrap() - spec().fixed_macs;
        prop_assert!(r >= 0.0);
        if prunable <= p * spec().t_total {
            prop_assert_eq!(r, 0.0);
        } else {
            prop_assert!((r - (prunable / (p * spec().t_total)).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn hardened_vectors_keep_a_unit_per_layer(v in soft_vector()) {
        let a = harden(spec(), &v).unwrap();
        for (off, len) in spec().prunable_layers() {
            prop_assert!(a.bits[off..off + len].iter().any(|&b| b == 1));
        }
        let again = harden(spec(), &a.as_f64()).unwrap();
        prop_assert_eq!(again.bits, a.bits);
    }

    #[test]
    fn sparsity_is_the_mean(v in proptest::collection::vec(0.0f32..=1.0, 1..64)) {
        let s = sparsity_loss(&Tensor::new(v.as_slice(), &DEVICE).unwrap()).unwrap().to_scalar::<f32>().unwrap();
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        prop_assert!((s - mean).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn ste_outputs_are_binary_roundings(
        pairs in proptest::collection::vec((-10.0f64..10.0, -3.0f64..8.0), 1..50),
        tau in 0.1f64..4.0,
    ) {
        let (o, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let draw = GumbelDraw::new(Tensor::new(g.as_slice(), &DEVICE).unwrap(), tau).unwrap();
        let (v, soft) = gumbel_sigmoid_ste(&Tensor::new(o.as_slice(), &DEVICE).unwrap(), &draw).unwrap();
        let (v, soft) = (v.to_vec1::<f64>().unwrap(), soft.to_vec1::<f64>().unwrap());
        for (h, s) in v.iter().zip(&soft) {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert_eq!(*h, if *s >= 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn index_is_scale_invariant_and_permutation_equivariant(
        raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 8..20),
        scales in proptest::collection::vec(0.1f64..10.0, 20),
        rot in 0usize..20,
    ) {
        let n = raw.len();
        let vectors: Vec<Vec<f64>> =
            raw.iter().map(|v| v.iter().map(|x| x + 1e-3).collect()).collect();
        let ids: Vec<usize> = (0..n).collect();
        let base = build_index(&EmbeddingSet::new(ids.clone(), vectors.clone(), EmbeddingSource::Encoder).unwrap(), 3, SimilarityMode::Signed).unwrap();

        let scaled: Vec<Vec<f64>> =
            vectors.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let s_idx = build_index(&EmbeddingSet::new(ids.clone(), scaled, EmbeddingSource::Encoder).unwrap(), 3, SimilarityMode::Signed).unwrap();
        for i in 0..n {
            let a: Vec<f32> = base.neighbors_of(i).unwrap().iter().map(|p| p.1).collect();
            let b: Vec<f32> = s_idx.neighbors_of(i).unwrap().iter().map(|p| p.1).collect();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        // Relabel ids by a cyclic shift of the storage order; similarities carry over.
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let p_vectors: Vec<Vec<f64>> = perm.iter().map(|&j| vectors[j].clone()).collect();
        let p_ids: Vec<usize> = perm.iter().map(|&j| j + 100).collect();
        let p_idx = build_index(&EmbeddingSet::new(p_ids, p_vectors, EmbeddingSource::Encoder).unwrap(), 3, SimilarityMode::Signed).unwrap();
        for i in 0..n {
            let a: Vec<f32> = base.neighbors_of(i).unwrap().iter().map(|p| p.1).collect();
            let b: Vec<f32> = p_idx.neighbors_of(i + 100).unwrap().iter().map(|p| p.1).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn frechet_symmetric_and_zero_on_self(
        a in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 4..30),
        b in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 4..30),
    ) {
        let (sa, sb) = (FrechetStats::from_rows(&a).unwrap(), FrechetStats::from_rows(&b).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&sb, &sa).unwrap()).abs() < 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&sa, &sa).unwrap() < 1e-6);
    }

    #[test]
    fn config_round_trips_through_toml(l1 in 0.0f64..10.0, p in 0.01f64..=1.0, seed in 0..=i64::MAX as u64) {
        let mut c = RunConfig::default();
        c.apply_override(&format!("lambda1={l1:?}")).unwrap();
        c.apply_override(&format!("p={p:?}")).unwrap();
        c.seed = seed;
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
