mod common;

use keydyn::data::{
    generate_synthetic, parse_dataset, split_users, write_dataset, SyntheticSpec, TextFormat,
    UserCollection,
};
use keydyn::features::extract_features;
use proptest::prelude::*;
use std::collections::{BTreeSet, HashMap};

fn roundtrip(users: &UserCollection, format: &TextFormat) -> UserCollection {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    write_dataset(users, &path, format).unwrap();
    let (back, report) = parse_dataset(&path, format).unwrap();
    assert!(report.rejected_rows.is_empty());
    assert_eq!(report.dropped_sequences, 0);
    back
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn written_collections_parse_back_identically(
        users in 1usize..6, seqs in 1usize..5, min in 2usize..10, extra in 0usize..10,
        noise in 0.0f64..1.0, seed in any::<u64>(), comma in any::<bool>(),
    ) {
        let spec = SyntheticSpec {
            num_users: users, sequences_per_user: seqs, min_keys: min, max_keys: min + extra,
            noise_scale: noise, seed, ..Default::default()
        };
        let original = generate_synthetic(&spec).unwrap();
        let format = TextFormat { delimiter: if comma { b',' } else { b'\t' }, ..Default::default() };
        prop_assert_eq!(roundtrip(&original, &format), original);
    }

    #[test]
    fn split_partitions_users(n in 2usize..60, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let all = common::population(n, 1, 2, 3, seed);
        let (train, test) = split_users(&all, fraction, seed).unwrap();
        let a: BTreeSet<&str> = train.user_ids().collect();
        let b: BTreeSet<&str> = test.user_ids().collect();
        prop_assert!(a.is_disjoint(&b));
        let union: BTreeSet<&str> = a.union(&b).copied().collect();
        prop_assert_eq!(union, all.user_ids().collect::<BTreeSet<_>>());
        prop_assert!(!a.is_empty() && !b.is_empty());
    }
}

#[test]
fn fractional_timestamps_roundtrip() {
    let mut r = common::rng(5);
    let mut users = UserCollection::new();
    let mut seq = common::random_sequence(&mut r, 12);
    for ev in &mut seq.events {
        ev.press_time += 0.125;
        ev.release_time += 0.375;
    }
    users.insert_user("u", vec![seq]);
    assert_eq!(roundtrip(&users, &TextFormat::default()), users);
}

#[test]
fn split_mirrors_population_ratio() {
    let all = common::population(168, 1, 2, 3, 1);
    let (train, test) = split_users(&all, 68.0 / 168.0, 1).unwrap();
    assert_eq!((train.num_users(), test.num_users()), (68, 100));
}

/// Pooled within-user variance of hold latency per keycode and of press
/// latency per keycode digraph, i.e. the spread left once user and key
/// content are fixed.
fn intra_user_variance(users: &UserCollection) -> f64 {
    let mut groups: HashMap<(String, u8, Option<u8>), Vec<f64>> = HashMap::new();
    for (id, seqs) in users.iter() {
        for s in seqs {
            let f = extract_features(s).unwrap();
            for (i, ev) in s.events.iter().enumerate() {
                groups.entry((id.to_string(), ev.keycode, None)).or_default().push(f.rows[i].hl);
                if let Some(next) = s.events.get(i + 1) {
                    groups.entry((id.to_string(), ev.keycode, Some(next.keycode))).or_default().push(f.rows[i].pl);
                }
            }
        }
    }
    let (mut ss, mut dof) = (0.0, 0usize);
    for v in groups.values().filter(|v| v.len() > 1) {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        ss += v.iter().map(|x| (x - mu).powi(2)).sum::<f64>();
        dof += v.len() - 1;
    }
    ss / dof as f64
}

#[test]
fn lower_noise_never_raises_intra_user_variance() {
    let levels = [0.0, 0.1, 0.2, 0.3, 0.5, 0.8];
    let mut violations = 0;
    for seed in 0..30 {
        let vars: Vec<f64> = levels
            .iter()
            .map(|&noise| {
                intra_user_variance(
                    &generate_synthetic(&SyntheticSpec {
                        num_users: 8,
                        sequences_per_user: 6,
                        min_keys: 20,
                        max_keys: 30,
                        noise_scale: noise,
                        seed,
                        ..Default::default()
                    })
                    .unwrap(),
                )
            })
            .collect();
        violations += vars.windows(2).filter(|w| w[0] > w[1]).count();
    }
    assert_eq!(violations, 0);
}
