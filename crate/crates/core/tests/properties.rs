//! Property tests over randomly generated architectures.

use mdshare::archspec::zoo;
use mdshare::mdnet::checkpoint::{load_checkpoint, save_checkpoint};
use mdshare::ops::Tensor4;
use mdshare::planner::enumeration;
use mdshare::{
    build_plan, count_conv_params, plan_param_count, total_model_params, ArchitectureSpec, HeadSpec, ModelF64,
    SharingPlan, Strategy as Sharing,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch_from(seed: u64) -> ArchitectureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let arch = zoo::random_small(&mut rng, 6);
        if arch.validate().is_ok() && arch.feature_sizes(8, 8).is_ok() {
            return arch;
        }
    }
}

fn strategy() -> impl Strategy<Value = Sharing> {
    prop_oneof![
        Just(Sharing::TopSpecific),
        Just(Sharing::BottomSpecific),
        Just(Sharing::Random),
    ]
}

fn selected_pairs(plan: &SharingPlan) -> Vec<(usize, usize)> {
    plan.selection
        .iter()
        .flat_map(|(&l, fs)| fs.iter().map(move |&f| (l, f)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn achieved_budget_is_within_one_filter(arch_seed in any::<u64>(), s in strategy(), fraction in 0.0f64..=1.0, seed in 0u64..4) {
        let arch = arch_from(arch_seed);
        let plan = build_plan(&arch, s, fraction, seed).unwrap();
        let achieved = plan_param_count(&plan, &arch).unwrap();
        prop_assert_eq!(achieved, plan.achieved_params);
        let gap = (achieved as f64 - fraction * count_conv_params(&arch) as f64).abs();
        prop_assert!(gap <= arch.max_filter_cost() as f64);
    }

    #[test]
    fn selection_is_a_prefix_of_the_enumeration(arch_seed in any::<u64>(), s in strategy(), fraction in 0.0f64..=1.0, seed in 0u64..4) {
        let arch = arch_from(arch_seed);
        let plan = build_plan(&arch, s, fraction, seed).unwrap();
        let order = enumeration(&arch, s, seed);
        let mut prefix = order[..plan.num_selected()].to_vec();
        prefix.sort_unstable();
        prop_assert_eq!(prefix, selected_pairs(&plan));
    }

    #[test]
    fn plans_nest_as_the_budget_grows(arch_seed in any::<u64>(), s in strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, seed in 0u64..4) {
        let arch = arch_from(arch_seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = build_plan(&arch, s, lo, seed).unwrap();
        let large = build_plan(&arch, s, hi, seed).unwrap();
        prop_assert!(small.achieved_params <= large.achieved_params);
        for (l, f) in selected_pairs(&small) {
            prop_assert!(large.is_selected(l, f));
        }
    }

    #[test]
    fn plans_are_seed_deterministic(arch_seed in any::<u64>(), s in strategy(), fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let arch = arch_from(arch_seed);
        let a = build_plan(&arch, s, fraction, seed).unwrap();
        let b = build_plan(&arch, s, fraction, seed).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(&a, &b);
        let reread = SharingPlan::from_toml_str(&a.to_toml_string()).unwrap();
        prop_assert_eq!(a, reread);
    }

    #[test]
    fn model_total_grows_with_every_extra_domain(arch_seed in any::<u64>(), s in strategy(), fraction in 0.0f64..=1.0, classes in 2usize..8) {
        let arch = arch_from(arch_seed);
        let plan = build_plan(&arch, s, fraction, 0).unwrap();
        let heads: Vec<HeadSpec> = (0..3).map(|i| HeadSpec::new(format!("d{i}"), classes)).collect();
        let one = total_model_params(&arch, &plan, &heads[..1], 1).unwrap();
        let three = total_model_params(&arch, &plan, &heads, 3).unwrap();
        let per_domain = plan.achieved_params + arch.bn_params() + heads[0].params(arch.head_in_features);
        prop_assert_eq!(three - one, 2 * per_domain);
        prop_assert_eq!(one, count_conv_params(&arch) + arch.bn_params() + heads[0].params(arch.head_in_features));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(arch_seed in any::<u64>(), s in strategy(), fraction in 0.0f64..=1.0, init in any::<u64>()) {
        let arch = arch_from(arch_seed);
        let plan = build_plan(&arch, s, fraction, 1).unwrap();
        let heads: Vec<HeadSpec> = (0..2).map(|i| HeadSpec::new(format!("d{i}"), 3)).collect();
        let mut model = ModelF64::assemble(&arch, &plan, &heads).unwrap();
        model.init_random(init);
        let c = arch.layers[0].in_channels;
        let x = Tensor4::from_vec(2, c, 8, 8, (0..2 * c * 64).map(|i| (i as f64 * 0.37).sin()).collect());
        model.forward_train(1, &x).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &dir.path().join("full"), false).unwrap();
        let loaded: ModelF64 = load_checkpoint(&dir.path().join("full")).unwrap();
        prop_assert_eq!(loaded.state_digest(), model.state_digest());
        prop_assert!(loaded == model);

        save_checkpoint(&model, &dir.path().join("live"), true).unwrap();
        let live: ModelF64 = load_checkpoint(&dir.path().join("live")).unwrap();
        for d in 0..2 {
            prop_assert_eq!(live.forward_index(d, &x).unwrap(), model.forward_index(d, &x).unwrap());
        }
    }
}

#[test]
fn random_plans_differ_across_seeds() {
    let arch = zoo::desk_cnn();
    let a = build_plan(&arch, Sharing::Random, 0.3, 1).unwrap();
    let b = build_plan(&arch, Sharing::Random, 0.3, 2).unwrap();
    assert_ne!(a.selection, b.selection);
}
