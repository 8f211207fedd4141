use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vip_core::curation::{curate, Candidate, PairRules, Source};
use vip_core::diffusion::{normal_points, NoiseSchedule, ScheduleConfig};
use vip_core::nn::{checkpoint, EpsilonNet, NetArch, Tensor};
use vip_core::reward::{evaluate_samples, GroundTruthMixture, RewardSpec, TARGET_AFFINITY};
use vip_core::rng;

fn arch() -> impl Strategy<Value = (NetArch, u64, Vec<bool>)> {
    (1usize..5, 2usize..12, 1usize..6, any::<u64>()).prop_flat_map(|(blocks, width, temb, seed)| {
        let arch = NetArch {
            input_dim: 2,
            time_embed_dim: temb * 2,
            hidden_width: width,
            n_blocks: blocks,
        };
        (Just(arch), Just(seed), proptest::collection::vec(any::<bool>(), blocks))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_round_trip((arch, seed, mask) in arch()) {
        let mut net = EpsilonNet::new(arch, seed).unwrap();
        // Block 0 stays active; a net needs at least one block.
        for (i, &on) in mask.iter().enumerate().skip(1) {
            net.set_block_active(i, on).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let hash = checkpoint::save(&net, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        prop_assert_eq!(checkpoint::checkpoint_hash(&back).unwrap(), hash);
        prop_assert_eq!(back.state_hash(), net.state_hash());
        prop_assert_eq!(back.block_active(), net.block_active());
        let x = normal_points(5, &mut rng::rng(seed));
        let t = [0, 1, 2, 3, 4];
        let a = net.forward(&x, &t).unwrap();
        let b = back.forward(&x, &t).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn eval_counts_partition_samples(seed in any::<u64>(), n in 1usize..400, spread in 0.1f64..4.0) {
        let mix = GroundTruthMixture::default();
        let spec = RewardSpec::default();
        let x = normal_points(n, &mut rng::rng(seed)).map(|v| v * spread);
        let r = evaluate_samples(&x, &spec, &mix, seed);
        prop_assert_eq!(r.mode_counts.iter().sum::<usize>() + r.ood_count, n);
        let mean = r.properties.values().sum::<f64>() / r.properties.len() as f64;
        prop_assert_eq!(r.total.to_bits(), mean.to_bits());
    }

    #[test]
    fn eval_is_permutation_invariant(seed in any::<u64>(), n in 2usize..200) {
        let mix = GroundTruthMixture::default();
        let spec = RewardSpec::default();
        let x = normal_points(n, &mut rng::rng(seed)).map(|v| v * 2.0);
        let mut pts = x.points();
        pts.reverse();
        let a = evaluate_samples(&x, &spec, &mix, 0);
        let b = evaluate_samples(&Tensor::from_points(&pts), &spec, &mix, 0);
        prop_assert_eq!(&a.mode_counts, &b.mode_counts);
        prop_assert!((a.total - b.total).abs() <= 1e-12 * a.total.abs().max(1.0));
    }

    #[test]
    fn q_sample_is_affine_in_inputs(seed in any::<u64>(), t in 0usize..100) {
        let s = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
        let mut r = rng::rng(seed);
        let x0 = normal_points(4, &mut r);
        let eps = normal_points(4, &mut r);
        let xt = s.q_sample(&x0, &[t; 4], &eps).unwrap();
        let ab = s.alpha_bar()[t];
        for i in 0..4 {
            for d in 0..2 {
                let want = ab.sqrt() * x0.row(i)[d] + (1.0 - ab).sqrt() * eps.row(i)[d];
                prop_assert!((xt.row(i)[d] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn curation_invariant_to_reward_scale(
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
        alpha in 0.0f64..1.0,
        tau in -3.0f64..0.0,
    ) {
        let mut r = rng::rng(seed);
        let pts = |r: &mut rng::Rng, n| normal_points(n, r).points();
        let make = |pts: Vec<[f64; 2]>, source, c: f64| -> Vec<Candidate> {
            pts.into_iter()
                .enumerate()
                .map(|(i, p)| Candidate {
                    sample: p,
                    scores: [(TARGET_AFFINITY.to_string(), -c * (p[0].powi(2) + p[1].powi(2)).sqrt())]
                        .into_iter()
                        .collect(),
                    source,
                    condition_id: i,
                })
                .collect()
        };
        let tp = pts(&mut r, 50);
        let sp = pts(&mut r, 50);
        let rules = |c: f64| PairRules {
            targets: vec![TARGET_AFFINITY.to_string()],
            tau: [(TARGET_AFFINITY.to_string(), c * tau)].into_iter().collect::<BTreeMap<_, _>>(),
            alpha,
            max_pairs: 20,
        };
        let ids = |c: f64| -> BTreeSet<usize> {
            curate(&make(tp.clone(), Source::Teacher, c), &make(sp.clone(), Source::Student, c), &rules(c), 0, None)
                .iter()
                .map(|p| p.condition_id)
                .collect()
        };
        prop_assert_eq!(ids(1.0), ids(scale));
    }
}
