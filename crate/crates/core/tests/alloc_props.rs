mod common;

use common::small_config;
use proptest::prelude::*;
use qvit_core::alloc::{allocate_bits, model_size_bits, AllocMode, AllocOptions, BitAllocation};
use qvit_core::lrp::{importance_scores, ImportanceTable};
use qvit_core::{Error, LayerId, ViTParams};

fn params(blocks: usize) -> ViTParams {
    let mut cfg = small_config();
    cfg.blocks = blocks;
    ViTParams::init(&cfg, 0).unwrap()
}

fn table(blocks: usize, raw: &[f64]) -> ImportanceTable {
    let ids = LayerId::scored(blocks);
    let c: Vec<(LayerId, f64)> = ids.iter().copied().zip(raw.iter().copied()).collect();
    importance_scores(&c, 1).unwrap()
}

fn opts(mode: AllocMode, boosted: usize) -> AllocOptions {
    AllocOptions {
        base_bits: 4,
        mode,
        boosted_blocks: boosted,
        ..AllocOptions::default()
    }
}

fn contributions() -> impl Strategy<Value = Vec<f64>> {
    // Seven scored layers per block, four blocks; a few exact zeros and ties.
    prop::collection::vec(
        prop_oneof![1 => Just(0.0), 1 => Just(0.5), 8 => 1e-6f64..10.0],
        28,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn greedy_respects_budget(raw in contributions(), boosted in 1usize..=2) {
        prop_assume!(raw.iter().any(|&c| c > 0.0));
        let p = params(4);
        let alloc = allocate_bits(&table(4, &raw), &p, &opts(AllocMode::Greedy, boosted)).unwrap();
        let budget = model_size_bits(&BitAllocation::uniform(&p.config, 4).unwrap(), &p).unwrap();
        prop_assert!(model_size_bits(&alloc, &p).unwrap() <= budget);
        alloc.validate(&p.config).unwrap();
    }

    #[test]
    fn boosted_blocks_go_up_and_others_never_do(raw in contributions(), boosted in 1usize..=2, per_block in any::<bool>()) {
        prop_assume!(raw.iter().any(|&c| c > 0.0));
        let p = params(4);
        let mode = if per_block { AllocMode::PerBlock } else { AllocMode::Greedy };
        let alloc = allocate_bits(&table(4, &raw), &p, &opts(mode, boosted)).unwrap();
        for (id, bits) in &alloc.bits {
            let widths: Vec<u32> = bits.w_bits.into_iter().chain([bits.a_bits]).collect();
            match id.block_index() {
                Some(b) if b <= boosted => prop_assert!(widths.iter().all(|&w| w == 5), "{id}"),
                Some(_) => prop_assert!(widths.iter().all(|&w| w == 3 || w == 4), "{id}"),
                None => prop_assert!(widths.iter().all(|&w| w == 4), "{id}"),
            }
        }
    }

    #[test]
    fn greedy_lowers_least_important_per_parameter_first(raw in contributions()) {
        prop_assume!(raw.iter().any(|&c| c > 0.0));
        let p = params(4);
        let t = table(4, &raw);
        let alloc = allocate_bits(&t, &p, &opts(AllocMode::Greedy, 1)).unwrap();
        let density = |id: LayerId| t.importance(id).unwrap() / p.weight_count(id) as f64;
        let eligible: Vec<LayerId> = LayerId::scored(4)
            .into_iter()
            .filter(|id| id.has_weights() && id.block_index().unwrap() > 1)
            .collect();
        let lowered: Vec<LayerId> = eligible.iter().copied().filter(|&id| alloc.get(id).unwrap().w_bits == Some(3)).collect();
        for &d in &lowered {
            for &k in eligible.iter().filter(|k| !lowered.contains(k)) {
                prop_assert!(density(d) <= density(k), "{d} lowered before {k}");
            }
        }
    }

    #[test]
    fn allocation_ignores_contribution_scale(raw in contributions(), c in 1e-3f64..1e3) {
        prop_assume!(raw.iter().any(|&x| x > 0.0));
        let p = params(4);
        let scaled: Vec<f64> = raw.iter().map(|x| x * c).collect();
        for mode in [AllocMode::Greedy, AllocMode::PerBlock] {
            let a = allocate_bits(&table(4, &raw), &p, &opts(mode, 2)).unwrap();
            let b = allocate_bits(&table(4, &scaled), &p, &opts(mode, 2)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn unattainable_budget_reports_shortfall() {
    // Two equal blocks: boosting one is exactly paid for by the other.
    let p = params(2);
    let a = allocate_bits(&table(2, &[1.0; 14]), &p, &opts(AllocMode::Greedy, 1)).unwrap();
    let budget = model_size_bits(&BitAllocation::uniform(&p.config, 4).unwrap(), &p).unwrap();
    assert_eq!(model_size_bits(&a, &p).unwrap(), budget);
    // Two boosted blocks cannot be paid for by one.
    let p = params(3);
    match allocate_bits(&table(3, &[1.0; 21]), &p, &opts(AllocMode::Greedy, 2)) {
        Err(Error::Allocation(msg)) => assert!(msg.contains("shortfall"), "{msg}"),
        r => panic!("expected allocation error, got {r:?}"),
    }
}

#[test]
fn uniform_and_boost_only_sizes() {
    let p = params(4);
    let t = table(4, &[1.0; 28]);
    let uni = allocate_bits(&t, &p, &opts(AllocMode::Uniform, 1)).unwrap();
    assert_eq!(uni, BitAllocation::uniform(&p.config, 4).unwrap());
    let boost = allocate_bits(&t, &p, &opts(AllocMode::BoostOnly, 1)).unwrap();
    let block1: u64 = LayerId::scored(4)
        .into_iter()
        .filter(|id| id.block_index() == Some(1))
        .map(|id| p.weight_count(id) as u64)
        .sum();
    assert_eq!(
        model_size_bits(&boost, &p).unwrap(),
        model_size_bits(&uni, &p).unwrap() + block1
    );
}
