use founddiff::ctsim::{Anatomy, Exposure};
use founddiff::dadiff::DacbVariant;
use founddiff::perception::OptimizerKind;
use founddiff_cli::RunConfig;
use proptest::prelude::*;

fn dose() -> impl Strategy<Value = f64> {
    prop_oneof![(2u32..50).prop_map(|d| 1.0 / d as f64), 0.05f64..=1.0]
}

prop_compose! {
    fn any_config()(
        seed in any::<u64>(),
        size_pow in 0u32..3,
        n0 in 1e3f64..1e7,
        fixed in any::<bool>(),
        fam_mask in 1usize..8,
        fractions in prop::collection::vec(dose(), 1..6),
        split in prop::collection::vec(dose(), 2..6),
        tau in 0.01f64..2.0,
        d_e in 1usize..64,
        levels in 1usize..4,
        base_width in 1usize..16,
        eta in 0.0f64..3.0,
        steps in 2usize..2000,
        lr in 1e-6f64..1e-1,
        variant in 0usize..3,
        sgd in any::<bool>(),
        flags in any::<(bool, bool, bool)>(),
        path in "[a-z/_.]{1,20}",
    ) -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.size = 32 << size_pow;
        c.n0 = n0;
        c.exposure = if fixed { Exposure::Fixed } else { Exposure::Auto };
        c.families = Anatomy::ALL.into_iter().filter(|a| fam_mask & (1 << a.index()) != 0).collect();
        c.fractions = fractions;
        let mut split = split;
        split.dedup();
        let half = split.len() / 2;
        c.seen_fractions = split[..half.max(1)].to_vec();
        c.unseen_fractions = split[half.max(1)..].iter().copied().filter(|f| !c.seen_fractions.contains(f)).collect();
        if c.unseen_fractions.is_empty() {
            c.unseen_fractions = vec![0.999];
            c.seen_fractions.retain(|&f| f != 0.999);
        }
        c.tau = tau;
        c.d_e = d_e;
        c.levels = levels;
        c.widths = (0..levels).map(|l| 2 * base_width << l).collect();
        c.eta = eta;
        c.diffusion_steps = steps;
        c.lr = lr;
        c.variant = [DacbVariant::Full, DacbVariant::DoseOnly, DacbVariant::AnatomyOnly][variant];
        c.perception_optimizer = if sgd { OptimizerKind::Sgd } else { OptimizerKind::Adam };
        (c.resume, c.stochastic_init, c.verify_quick) = flags;
        c.dataset = path.into();
        c
    }
}

proptest! {
    #[test]
    fn parse_serialize_parse_is_identity(cfg in any_config()) {
        prop_assume!(cfg.validate().is_ok());
        let once = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&once, &cfg);
        prop_assert_eq!(RunConfig::parse(&once.to_text()).unwrap(), once);
    }
}

#[test]
fn generator_mostly_yields_valid_configs() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let valid = (0..200)
        .filter(|_| any_config().new_tree(&mut runner).unwrap().current().validate().is_ok())
        .count();
    assert!(valid > 100, "only {valid} of 200 generated configs were valid");
}
