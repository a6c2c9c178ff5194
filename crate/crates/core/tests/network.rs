mod common;

use proptest::prelude::*;
use reid_autodiff::{Tape, Tensor};
use reid_core::attention::AttentionKind;
use reid_core::fusion::FusionMode;
use reid_core::network::{
    build_model, is_classifier, Ctx, ModelSpec, Preset, ReidModel, Variant, VariantFlags,
};

fn embeddings(model: &ReidModel<f32>, whole: &Tensor<f32>, parts: &[Tensor<f32>; 4]) -> [Vec<f32>; 5] {
    let e = &model.embed(whole, parts).unwrap()[0];
    [
        e.global.clone(),
        e.parts[0].clone(),
        e.parts[1].clone(),
        e.parts[2].clone(),
        e.parts[3].clone(),
    ]
}

fn nudge(model: &mut ReidModel<f32>, prefix: &str) {
    let names: Vec<String> = model.params.names().to_vec();
    let mut hit = 0;
    for name in names.iter().filter(|n| n.starts_with(prefix)) {
        let id = model.params.find(name).unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.05);
        hit += 1;
    }
    assert!(hit > 0, "no parameter starts with {prefix}");
}

#[test]
fn conv1_is_one_parameter_set_feeding_every_branch() {
    let mut model = common::desk_model::<f32>(Variant::IntraInter, 4, 0);
    common::randomize(&mut model, 1);
    let conv1: Vec<&String> = model.params.names().iter().filter(|n| n.starts_with("conv1")).collect();
    assert_eq!(conv1, ["conv1.w", "conv1.b"]);
    let (whole, parts) = common::random_inputs(&model, 1, 2);
    let before = embeddings(&model, &whole, &parts);
    nudge(&mut model, "conv1");
    let after = embeddings(&model, &whole, &parts);
    for (b, a) in before.iter().zip(&after) {
        assert_ne!(b, a);
    }
}

#[test]
fn part_branches_have_independent_parameters() {
    let mut model = common::desk_model::<f32>(Variant::IntraInter, 4, 0);
    common::randomize(&mut model, 3);
    let (whole, parts) = common::random_inputs(&model, 1, 4);
    let before = embeddings(&model, &whole, &parts);
    nudge(&mut model, "upper_body.block3");
    let after = embeddings(&model, &whole, &parts);
    for i in 0..5 {
        if i == 2 {
            assert_ne!(before[i], after[i]);
        } else {
            assert_eq!(before[i], after[i]);
        }
    }
}

#[test]
fn part_branches_are_half_width_copies_of_each_other() {
    let model = common::desk_model::<f32>(Variant::Intra, 4, 0);
    let widths = |b: usize| -> Vec<(usize, usize)> {
        model.branches[b].blocks.iter().map(|k| (k.config.mid, k.config.cout)).collect()
    };
    let global = widths(0);
    for b in 1..5 {
        let part = widths(b);
        assert_eq!(part, global.iter().map(|&(m, c)| (m / 2, c / 2)).collect::<Vec<_>>());
    }
}

#[test]
fn paper_extents_and_no_final_downsampling() {
    let spec = ModelSpec {
        preset: Preset::Paper,
        q: 10,
        flags: Variant::Aligned.flags(),
    };
    let model = build_model::<f32>(spec, 0).unwrap();
    let global = model.branches[0].extents(&model.conv1);
    assert_eq!(global, [(96, 48), (96, 48), (48, 24), (24, 12), (24, 12)]);
    let part = model.branches[1].extents(&model.conv1);
    assert_eq!(part, [(48, 48), (48, 48), (24, 24), (12, 12), (12, 12)]);
    assert_eq!(model.params.get(model.conv1.w).len() + model.params.get(model.conv1.b).len(), 896);
    assert_eq!(model.conv1.cost((384, 192)).0, (192, 96));
}

#[test]
fn doubling_channels_quadruples_convolution_cost() {
    let model = common::desk_model::<f32>(Variant::Baseline, 4, 0);
    let mut wide = model.conv1.clone();
    wide.cin *= 2;
    wide.cout *= 2;
    assert_eq!(wide.cost((96, 48)).1, 4 * model.conv1.cost((96, 48)).1);
}

#[test]
fn counted_macs_match_the_cost_report() {
    for variant in Variant::ALL {
        let model = common::desk_model::<f32>(variant, 5, 0);
        let (whole, parts) = common::random_inputs(&model, 1, 0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params.bind(&tape, false), false, 0.0, 0);
        model.forward(&ctx, tape.constant(whole), parts.map(|t| tape.constant(t))).unwrap();
        let heads: u64 = model.branches.iter().map(|b| b.head.macs()).sum::<u64>()
            + model.fused_head.as_ref().map_or(0, |h| h.macs());
        assert_eq!(ctx.macs(), model.cost().macs + heads, "{variant}");
    }
}

#[test]
fn heads_produce_batch_by_q_logits_and_identical_rows_agree() {
    let model = common::desk_model::<f32>(Variant::IntraInter, 7, 0);
    let (whole, parts) = common::random_inputs(&model, 1, 5);
    let twice = |t: &Tensor<f32>| Tensor::stack(&[&t.index_outer(0), &t.index_outer(0)]).unwrap();
    let (whole, parts) = (twice(&whole), parts.map(|p| twice(&p)));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, model.params.bind(&tape, false), false, 0.0, 0);
    let out = model.forward(&ctx, tape.constant(whole.clone()), parts.clone().map(|t| tape.constant(t))).unwrap();
    for l in out.intra_logits.iter().chain(out.fused_logits.as_ref()) {
        assert_eq!(tape.shape(*l), vec![2, 7]);
    }
    let e = model.embed(&whole, &parts).unwrap();
    assert_eq!(e[0], e[1]);
    assert_eq!(e[0].final_feature.len(), 192);
    assert_eq!(e[0].final_feature[..64], e[0].global[..]);
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = common::desk_model::<f32>(Variant::Baseline, 3, 0);
    let parts = [0; 4].map(|_| Tensor::zeros(&[1, 24, 48, 3]));
    let err = model.embed(&Tensor::zeros(&[1, 384, 192, 3]), &parts).unwrap_err();
    assert!(err.to_string().contains("desk"), "{err}");
    let spec = ModelSpec {
        preset: Preset::Desk,
        q: 1,
        flags: Variant::Baseline.flags(),
    };
    assert!(build_model::<f32>(spec, 0).is_err());
}

#[test]
fn classifier_parameters_are_separated_from_the_trunk() {
    let small = common::desk_model::<f32>(Variant::IntraInter, 3, 0).cost();
    let large = common::desk_model::<f32>(Variant::IntraInter, 300, 0).cost();
    assert_eq!(small.params_trunk, large.params_trunk);
    assert_eq!(small.macs, large.macs);
    assert!(large.params_total > small.params_total);
    assert!(is_classifier("head.fused") && !is_classifier("global.reduce.w"));
}

#[test]
fn same_seed_builds_the_same_trunk_regardless_of_q() {
    let a = common::desk_model::<f32>(Variant::Intra, 3, 42);
    let b = common::desk_model::<f32>(Variant::Intra, 9, 42);
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        if !is_classifier(na) {
            assert_eq!(ta, tb, "{na}");
        }
    }
}

fn flags_strategy() -> impl Strategy<Value = VariantFlags> {
    (
        any::<bool>(),
        prop_oneof![Just(None), Just(Some(AttentionKind::Decomposed)), Just(Some(AttentionKind::Monolithic))],
        prop_oneof![Just(FusionMode::Concat), Just(FusionMode::Fc), Just(FusionMode::InterAttention)],
        any::<bool>(),
    )
        .prop_map(|(pose_parts, attention, fusion, global_weight)| VariantFlags {
            pose_parts,
            attention,
            fusion,
            global_weight,
        })
}

proptest! {
    #[test]
    fn variant_flags_round_trip_through_bits(flags in flags_strategy()) {
        prop_assert_eq!(VariantFlags::from_bits(flags.to_bits()), Some(flags));
    }

    #[test]
    fn unknown_flag_bits_are_rejected(bits in 64u32..) {
        prop_assert_eq!(VariantFlags::from_bits(bits), None);
    }
}

#[test]
fn variant_names_parse_back() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("full".parse::<Variant>().is_err());
    assert_eq!("paper".parse::<Preset>().unwrap(), Preset::Paper);
}
