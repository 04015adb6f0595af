mod common;

use keydyn::data::{KeystrokeEvent, KeystrokeSequence};
use keydyn::features::{extract_features, normalize_keycode, pad_truncate, PairLabel, PairPool};
use proptest::prelude::*;
use rand::Rng;

fn shifted(seq: &KeystrokeSequence, offset: f64) -> KeystrokeSequence {
    KeystrokeSequence {
        events: seq
            .events
            .iter()
            .map(|e| KeystrokeEvent::new(e.keycode, e.press_time + offset, e.release_time + offset).unwrap())
            .collect(),
        ..seq.clone()
    }
}

#[test]
fn features_match_raw_timestamp_oracle() {
    let mut r = common::rng(1);
    for _ in 0..200 {
        let seq = common::random_sequence(&mut r, 50);
        let f = extract_features(&seq).unwrap();
        assert_eq!(f.len(), seq.len());
        let ev = &seq.events;
        for i in 0..ev.len() {
            let row = f.rows[i];
            assert!((row.hl - (ev[i].release_time - ev[i].press_time) / 1000.0).abs() < 1e-12);
            assert_eq!(row.key, ev[i].keycode as f64 / 255.0);
            if i + 1 < ev.len() {
                assert!((row.il - (ev[i + 1].press_time - ev[i].release_time) / 1000.0).abs() < 1e-12);
                assert!((row.pl - (ev[i + 1].press_time - ev[i].press_time) / 1000.0).abs() < 1e-12);
                assert!((row.rl - (ev[i + 1].release_time - ev[i].release_time) / 1000.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn latency_identities(seed in any::<u64>(), len in 2usize..80) {
        let seq = common::random_sequence(&mut common::rng(seed), len);
        let f = extract_features(&seq).unwrap();
        for i in 0..len - 1 {
            let (a, b) = (f.rows[i], f.rows[i + 1]);
            prop_assert!((a.pl - (a.il + a.hl)).abs() <= 1e-12);
            prop_assert!((a.rl - (a.pl + b.hl - a.hl)).abs() <= 1e-12);
            prop_assert!(a.hl >= 0.0 && a.pl >= 0.0);
        }
    }

    #[test]
    fn integer_offsets_leave_features_unchanged(seed in any::<u64>(), len in 2usize..60, offset in -1_000_000i64..1_000_000_000) {
        let seq = common::random_sequence(&mut common::rng(seed), len);
        prop_assert_eq!(extract_features(&seq).unwrap(), extract_features(&shifted(&seq, offset as f64)).unwrap());
    }

    #[test]
    fn arbitrary_offsets_move_features_by_rounding_only(seed in any::<u64>(), len in 2usize..60, offset in -1e6f64..1e9) {
        let seq = common::random_sequence(&mut common::rng(seed), len);
        let a = extract_features(&seq).unwrap();
        let b = extract_features(&shifted(&seq, offset)).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            for (u, v) in x.to_array().iter().zip(y.to_array()) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + offset.abs() / 1000.0));
            }
        }
    }

    #[test]
    fn mask_accounting(seed in any::<u64>(), len in 2usize..90, m in 1usize..90) {
        let seq = common::random_sequence(&mut common::rng(seed), len);
        let f = extract_features(&seq).unwrap();
        let p = pad_truncate(&f, m).unwrap();
        prop_assert_eq!(p.matrix.dim(), (m, 5));
        prop_assert_eq!(p.mask.iter().filter(|&&b| b).count(), len.min(m));
        for i in 0..m {
            prop_assert_eq!(p.mask[i], i < len.min(m));
            if i < len.min(m) {
                prop_assert_eq!(p.matrix.row(i).to_vec(), f.rows[i].to_array().to_vec());
            } else {
                prop_assert!(p.matrix.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn keycode_normalization_is_bounded(code in 0u32..=255) {
        let v = normalize_keycode(code).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, code as f64 / 255.0);
    }
}

#[test]
fn sampled_pairs_carry_correct_labels() {
    let users = common::population(12, 4, 5, 10, 3);
    let pool = PairPool::new(&users, 8).unwrap();
    let mut r = common::rng(9);
    for _ in 0..50 {
        let size = r.random_range(1..40);
        let batch = pool.sample(size, &mut r).unwrap();
        assert_eq!((batch.left.len(), batch.right.len(), batch.labels.len()), (size, size, size));
        let genuine = batch.labels.iter().filter(|&&l| l == PairLabel::Genuine).count();
        assert!(genuine.abs_diff(size - genuine) <= 1);
        for (label, ((u, i), (v, j))) in batch.labels.iter().zip(&batch.sources) {
            match label {
                PairLabel::Genuine => assert!(u == v && i != j),
                PairLabel::Impostor => assert_ne!(u, v),
            }
        }
    }
}

#[test]
fn pair_universe_per_user() {
    let users = common::population(3, 15, 2, 4, 0);
    let pool = PairPool::new(&users, 4).unwrap();
    assert!((0..3).all(|u| pool.genuine_pairs(u) == 105));
}

#[test]
fn full_batch_is_balanced() {
    let users = common::population(20, 3, 2, 4, 0);
    let batch = PairPool::new(&users, 4).unwrap().sample(512, &mut common::rng(0)).unwrap();
    let genuine = batch.labels.iter().filter(|&&l| l == PairLabel::Genuine).count();
    assert_eq!((genuine, 512 - genuine), (256, 256));
}
