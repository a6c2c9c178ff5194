mod common;

use common::oracle::{brute_force, instance, record};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reid_core::evaluation::{average_precision, cmc, evaluate, l2_normalize, rank_gallery, Role};

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ties = 0;
    for _ in 0..300 {
        let (q, g) = instance(&mut rng);
        let report = evaluate(&q, &g, 20);
        let (want_cmc, want_map, n) = brute_force(&q, &g, 20);
        assert_eq!(report.cmc, want_cmc);
        assert_eq!(report.map, want_map);
        assert_eq!(report.outcomes.len(), n);
        assert_eq!(report.excluded.len(), q.len() - n);
        ties += report
            .outcomes
            .iter()
            .filter(|o| o.ranking.windows(2).any(|w| w[0].1 == w[1].1))
            .count();
    }
    assert!(ties > 100, "instances should exercise distance ties");
}

#[test]
fn hand_ranked_cases() {
    let acc = cmc(&[Some(1), Some(2), Some(4)], 4);
    assert_eq!(acc[0], 1.0 / 3.0);
    assert_eq!(acc[1], 2.0 / 3.0);
    assert_eq!(acc[3], 1.0);
    assert_eq!(average_precision(&[true, false, true]), (1.0 + 2.0 / 3.0) / 2.0);
    assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn same_camera_same_identity_is_never_retrieved() {
    let q = vec![record(3, 0, Role::Query, vec![0.0])];
    let g = vec![
        record(3, 0, Role::Gallery, vec![0.0]),
        record(5, 0, Role::Gallery, vec![1.0]),
        record(3, 1, Role::Gallery, vec![2.0]),
    ];
    let r = evaluate(&q, &g, 2);
    assert_eq!(r.outcomes[0].ranking.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(r.outcomes[0].first_correct, Some(2));
    assert_eq!(r.cmc, [0.0, 1.0]);
    assert_eq!(r.map, 0.5);
}

#[test]
fn queries_with_empty_filtered_gallery_are_excluded() {
    let q = vec![
        record(1, 0, Role::Query, vec![0.0]),
        record(2, 0, Role::Query, vec![0.0]),
    ];
    let g = vec![record(1, 0, Role::Gallery, vec![0.0])];
    let r = evaluate(&q, &g, 1);
    assert_eq!(r.excluded, [0]);
    assert_eq!(r.unmatched, [1]);
    assert_eq!(r.cmc, [0.0]);
    assert!(r.to_csv().contains("excluded,1"));
}

#[test]
fn ties_break_by_gallery_index() {
    let q = record(0, 0, Role::Query, vec![0.0, 0.0]);
    let g: Vec<_> = (0..4).map(|i| record(9, 1, Role::Gallery, vec![1.0, 0.0].into_iter().map(|v| if i % 2 == 0 { v } else { -v }).collect())).collect();
    let r = rank_gallery(&q, &g);
    assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), [0, 1, 2, 3]);
}

#[test]
fn per_query_lines_list_top_entries() {
    let q = vec![record(1, 0, Role::Query, vec![0.0])];
    let g = vec![record(2, 1, Role::Gallery, vec![1.0]), record(1, 1, Role::Gallery, vec![3.0])];
    let r = evaluate(&q, &g, 2);
    let csv = r.per_query_csv(&q, &g, 5);
    assert_eq!(csv.lines().nth(1).unwrap(), "0,1,0,2,0.500000,2:1.0000:0 1:3.0000:1");
}

proptest! {
    #[test]
    fn normalized_vectors_have_unit_length(v in prop::collection::vec(-100.0f32..100.0, 1..64)) {
        let mut v = v;
        let zero = v.iter().all(|&x| x == 0.0);
        l2_normalize(&mut v);
        let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        prop_assert!(zero || (n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(firsts in prop::collection::vec(prop::option::of(1usize..30), 1..40)) {
        let acc = cmc(&firsts, 25);
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(acc.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn average_precision_lies_in_unit_interval(c in prop::collection::vec(any::<bool>(), 0..50)) {
        let ap = average_precision(&c);
        prop_assert!((0.0..=1.0).contains(&ap));
        if c.first() == Some(&true) && c.iter().filter(|&&x| x).count() == 1 {
            prop_assert_eq!(ap, 1.0);
        }
    }
}
