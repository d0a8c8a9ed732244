use std::collections::HashSet;

use emkd_core::encoder::left_pad;
use emkd_core::masking::{make_views, mask_count, mask_sequence, MaskedView};
use emkd_core::rng::StreamRng;
use proptest::prelude::*;
use rand::SeedableRng;

const MASK: usize = 50;
const PAD: usize = 51;

fn check_view(v: &MaskedView, seq: &[usize], rho: f64) {
    let real = seq.iter().filter(|&&x| x != PAD).count();
    assert_eq!(v.masked_indices.len(), mask_count(real, rho));
    assert!(v.masked_indices.windows(2).all(|w| w[0] < w[1]));
    for (&i, &orig) in v.masked_indices.iter().zip(&v.originals) {
        assert_ne!(seq[i], PAD);
        assert_eq!(v.ids[i], MASK);
        assert_eq!(orig, seq[i]);
    }
    assert_eq!(v.restore(), seq);
}

#[test]
fn mask_count_follows_real_length_for_every_length() {
    let t = 50;
    for n in 1usize..=t {
        // ⌈0.15·n⌉ in integer arithmetic
        let want = ((15 * n).div_ceil(100)).max(1);
        assert_eq!(mask_count(n, 0.15), want, "n = {n}");

        let seq = left_pad(&(0..n).collect::<Vec<_>>(), t, PAD);
        let mut rng = StreamRng::seed_from_u64(n as u64);
        let v = mask_sequence(&seq, 0.15, MASK, PAD, &mut rng).unwrap();
        check_view(&v, &seq, 0.15);
    }
}

#[test]
fn sized_examples() {
    let seq: Vec<usize> = (0..10).collect();
    let mut rng = StreamRng::seed_from_u64(0);
    assert_eq!(mask_sequence(&seq, 0.15, MASK, PAD, &mut rng).unwrap().masked_indices.len(), 2);

    let one = [PAD, PAD, PAD, 4];
    let v = mask_sequence(&one, 0.15, MASK, PAD, &mut rng).unwrap();
    assert_eq!(v.masked_indices, vec![3]);
    assert_eq!(v.ids, vec![PAD, PAD, PAD, MASK]);
}

#[test]
fn seed_forty_two_fixture() {
    let seq: Vec<usize> = (10..20).collect();
    let draw = || {
        let mut rng = StreamRng::seed_from_u64(42);
        mask_sequence(&seq, 0.15, MASK, PAD, &mut rng).unwrap().masked_indices
    };
    let first = draw();
    assert_eq!(first, draw());
    assert_eq!(first, GOLDEN_42);
}

// recorded from the first run
const GOLDEN_42: [usize; 2] = [2, 6];

#[test]
fn single_view_is_a_singleton() {
    let seq: Vec<usize> = (0..8).collect();
    let mut rng = StreamRng::seed_from_u64(3);
    let views = make_views(&seq, 1, 0.15, MASK, PAD, &mut rng).unwrap();
    assert_eq!(views.len(), 1);
    assert_eq!(views[0].view_index, 1);
}

#[test]
fn four_views_of_fifty_items_are_not_all_equal() {
    let seq: Vec<usize> = (0..50).collect();
    for seed in 0..10 {
        let mut rng = StreamRng::seed_from_u64(seed);
        let views = make_views(&seq, 4, 0.15, MASK, PAD, &mut rng).unwrap();
        let distinct: HashSet<_> = views.iter().map(|v| v.masked_indices.clone()).collect();
        assert!(distinct.len() >= 2, "seed {seed}");
    }
}

#[test]
fn eight_views_satisfy_view_invariants() {
    let seq = left_pad(&[5, 9, 2, 2, 7, 30, 41, 0, 12], 20, PAD);
    let mut rng = StreamRng::seed_from_u64(8);
    let views = make_views(&seq, 8, 0.3, MASK, PAD, &mut rng).unwrap();
    assert_eq!(views.len(), 8);
    for (i, v) in views.iter().enumerate() {
        assert_eq!(v.view_index, i + 1);
        check_view(v, &seq, 0.3);
    }
}

#[test]
fn zero_views_is_rejected() {
    let mut rng = StreamRng::seed_from_u64(0);
    assert!(make_views(&[1, 2], 0, 0.15, MASK, PAD, &mut rng).is_err());
}

proptest! {
    #[test]
    fn pads_are_never_masked_and_restore_is_exact(
        items in prop::collection::vec(0usize..50, 1..30),
        t in 30usize..40,
        rho in 0.05f64..0.95,
        m in 1usize..5,
        seed in any::<u64>(),
    ) {
        let seq = left_pad(&items, t, PAD);
        let mut rng = StreamRng::seed_from_u64(seed);
        for v in make_views(&seq, m, rho, MASK, PAD, &mut rng).unwrap() {
            prop_assert!(v.masked_indices.iter().all(|&i| seq[i] != PAD));
            prop_assert_eq!(v.masked_indices.len(), mask_count(items.len(), rho));
            prop_assert_eq!(v.restore(), seq.clone());
        }
    }
}
