use std::collections::HashSet;
use std::sync::OnceLock;

use basetx_core::basetx::{
    argmax, attend, base_adapted_prototype, classify, project_qkv, BaseTransformer, NormMode, TransformerConfig,
};
use basetx_core::encoder::{Encoder, EncoderConfig, FeatureMap, Provenance};
use basetx_core::episodes::{sample_episode, synth_dataset, Split, SplitDataset, SynthConfig};
use basetx_core::losses::{cross_entropy_value, info_nce_value};
use basetx_core::membank::{build_bank, MemoryBank};
use basetx_core::ndkernel::Tensor;
use basetx_core::query::{semantic_topc, SemanticSource};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(t: Tensor) -> FeatureMap {
    FeatureMap {
        tensor: t,
        provenance: Provenance::FrozenPhi0,
    }
}

fn maps(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureMap> {
    (0..k).map(|_| map(Tensor::randn(vec![c, 2, 2], 1.0, rng))).collect()
}

struct Fixture {
    ds: SplitDataset,
    semantic: SemanticSource,
    bank: MemoryBank,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let out = synth_dataset(&SynthConfig {
            images_per_class: 6,
            image_size: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        let enc = EncoderConfig {
            input_size: 16,
            channels: 4,
            ..EncoderConfig::default()
        };
        let phi0 = Encoder::new(enc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().freeze();
        let bank = build_bank(&out.dataset, &phi0, 200, 0).unwrap();
        Fixture {
            ds: out.dataset,
            semantic: SemanticSource::Matrix(out.similarity),
            bank,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_normalized(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5,
                                     d in 1usize..5, joint in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(vec![m, d], 2.0, &mut rng);
        let keys = Tensor::randn(vec![k, n, d], 2.0, &mut rng);
        let mode = if joint { NormMode::LiteralMjn } else { NormMode::PerQuery };
        let a = attend(&q, &keys, mode, false).unwrap();
        let s = a.scores.data();
        let row = k * n;
        match mode {
            NormMode::PerQuery => for r in s.chunks(row) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            },
            NormMode::LiteralMjn => prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9),
        }
        prop_assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn base_order_does_not_matter(seed in any::<u64>(), k in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = maps(4, 1, &mut rng).remove(0);
        let bases = maps(4, k, &mut rng);
        let bt = BaseTransformer::new(4, TransformerConfig { heads, ..Default::default() }, &mut rng).unwrap();
        let (p, _) = base_adapted_prototype(&support, &bases, &bt, 0).unwrap();
        let mut shuffled = bases.clone();
        shuffled.reverse();
        let r = rng.gen_range(0..k);
        shuffled.rotate_left(r);
        let (pp, _) = base_adapted_prototype(&support, &shuffled, &bt, 0).unwrap();
        prop_assert!(p.p.max_abs_diff(&pp.p) < 1e-10);
    }

    #[test]
    fn zero_values_leave_the_query(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = maps(4, 1, &mut rng).remove(0);
        let bases = maps(4, k, &mut rng);
        let mut bt = BaseTransformer::new(4, TransformerConfig::default(), &mut rng).unwrap();
        bt.heads.zero('v');
        let (p, _) = base_adapted_prototype(&support, &bases, &bt, 0).unwrap();
        let (q, _, _) = project_qkv(&support, &bases, &bt.heads).unwrap();
        prop_assert_eq!(p.p.data(), q.data());
    }

    #[test]
    fn temperature_keeps_the_prediction(seed in any::<u64>(), ways in 2usize..6, t1 in 0.01f64..10.0, t2 in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bt = BaseTransformer::new(4, TransformerConfig::default(), &mut rng).unwrap();
        let bases = maps(4, 3, &mut rng);
        let protos: Vec<_> = maps(4, ways, &mut rng)
            .iter()
            .enumerate()
            .map(|(i, s)| base_adapted_prototype(s, &bases, &bt, i).unwrap().0)
            .collect();
        let test = maps(4, 1, &mut rng).remove(0);
        let a = classify(&test, &protos, &bt, t1).unwrap();
        let b = classify(&test, &protos, &bt, t2).unwrap();
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn infonce_ignores_a_common_shift(seed in any::<u64>(), n in 2usize..6, d in 1usize..5, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let b = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let offset: Vec<f64> = (0..d).map(|i| shift * (i as f64 + 1.0)).collect();
        let moved = |t: &Tensor| {
            let data = t.data().iter().enumerate().map(|(i, x)| x + offset[i % d]).collect();
            Tensor::new(vec![n, d], data).unwrap()
        };
        let base = info_nce_value(&a, &b, false).unwrap();
        let shifted = info_nce_value(&moved(&a), &moved(&b), false).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn ce_falls_as_the_target_logit_rises(seed in any::<u64>(), n in 2usize..6, step in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(vec![1, n], 2.0, &mut rng);
        let target = rng.gen_range(0..n);
        let mut raised = logits.data().to_vec();
        raised[target] += step;
        let before = cross_entropy_value(&logits, &[target]).unwrap();
        let after = cross_entropy_value(&Tensor::new(vec![1, n], raised).unwrap(), &[target]).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn fetch_never_returns_the_excluded_class(seed in any::<u64>(), k_total in 1usize..40, n in 1usize..6) {
        let bank = &fixture().bank;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exclude = rng.gen_range(0..bank.num_classes());
        let mut classes: Vec<usize> = (0..bank.num_classes()).filter(|&c| c != exclude).collect();
        let r = rng.gen_range(0..classes.len());
        classes.rotate_left(r);
        classes.truncate(n);
        let at = rng.gen_range(0..=classes.len());
        classes.insert(at, exclude);
        let picks = bank.fetch(&classes, k_total, Some(exclude), &mut rng).unwrap();
        prop_assert_eq!(picks.len(), k_total);
        prop_assert!(picks.iter().all(|&(c, i)| c != exclude && classes.contains(&c) && i < bank.class_len(c)));
    }

    #[test]
    fn semantic_query_returns_distinct_classes(class in 0usize..20, c in 1usize..8, exclude in any::<bool>()) {
        let f = fixture();
        let labels = f.bank.labels();
        let ex = exclude.then_some(class);
        let top = semantic_topc(&labels[class], &f.semantic, labels, c, ex).unwrap();
        prop_assert_eq!(top.len(), c);
        prop_assert_eq!(top.iter().collect::<HashSet<_>>().len(), c);
        prop_assert!(ex.map_or(true, |e| !top.contains(&e)));
        prop_assert_eq!(&top, &semantic_topc(&labels[class], &f.semantic, labels, c, ex).unwrap());
    }

    #[test]
    fn episode_labels_are_a_bijection(seed in any::<u64>(), way in 1usize..6, shot in 1usize..3, queries in 1usize..3) {
        let ds = &fixture().ds;
        for split in [Split::Base, Split::Novel] {
            let e = sample_episode(ds, split, way, shot, queries, seed).unwrap();
            prop_assert_eq!(e.classes.iter().collect::<HashSet<_>>().len(), way);
            for items in [&e.support, &e.query] {
                let seen: HashSet<usize> = items.iter().map(|i| i.label).collect();
                prop_assert_eq!(seen, (0..way).collect::<HashSet<_>>());
                prop_assert!(items.iter().all(|i| e.classes[i.label] == i.class));
            }
        }
    }
}

#[test]
fn splits_are_disjoint() {
    let ds = &fixture().ds;
    let base: HashSet<String> = ds.labels(Split::Base).into_iter().collect();
    for split in [Split::Val, Split::Novel] {
        assert!(ds.labels(split).iter().all(|l| !base.contains(l)));
    }
}
