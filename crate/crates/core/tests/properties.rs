use proptest::prelude::*;

use skiprec::eval::{hit_rate, map_at_10, mrr_at_10};
use skiprec::models::{Architecture, Model, ModelConfig, Reduction, TrainingExample};
use skiprec::objective::{info_nce_from_cosines, info_nce_upper_bound, LossConfig, NegativeScope};
use skiprec::rng::{stream, Stream};
use skiprec::session_data::{
    build_targets, build_vocabulary, chunk_bounds, filter_and_split, holdout_split, sessionize,
    Event, LabeledSession, Session, FIRST_ITEM,
};

fn events_strategy() -> impl Strategy<Value = Vec<Event>> {
    // (user, increment) pairs; timestamps accumulate per user
    prop::collection::vec((0usize..3, 0i64..3000), 0..60).prop_map(|rows| {
        let mut clock = [0i64; 3];
        rows.into_iter()
            .enumerate()
            .map(|(i, (u, dt))| {
                clock[u] += dt;
                Event {
                    user_key: format!("u{u}"),
                    timestamp: clock[u],
                    track_key: format!("u{u}:{i}"),
                    skip_annotation: None,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sessionization_respects_the_gap(events in events_strategy(), gap in 1i64..2500) {
        let total = events.len();
        let sessions = sessionize(events, gap);
        prop_assert_eq!(sessions.iter().map(|s| s.events.len()).sum::<usize>(), total);
        let user = |s: &skiprec::session_data::RawSession| s.events[0].track_key.split(':').next().unwrap().to_string();
        for s in &sessions {
            prop_assert!(!s.events.is_empty());
            let prefix = format!("{}:", user(s));
            prop_assert!(s.events.iter().all(|e| e.track_key.starts_with(&prefix)));
            for w in s.events.windows(2) {
                prop_assert!(w[1].timestamp >= w[0].timestamp);
                prop_assert!(w[1].timestamp - w[0].timestamp <= gap);
            }
        }
        for w in sessions.windows(2) {
            if user(&w[0]) == user(&w[1]) {
                let end = w[0].events.last().unwrap().timestamp;
                prop_assert!(w[1].events[0].timestamp - end > gap);
            }
        }
    }

    #[test]
    fn targets_match_a_brute_force_scan(skipped in prop::collection::vec(any::<bool>(), 1..25)) {
        let n = skipped.len();
        let s = Session::new((0..n).map(|i| FIRST_ITEM + i).collect(), skipped.clone()).unwrap();
        let t = build_targets(&s);
        let all: Vec<usize> = (0..n).filter(|&p| skipped[p]).collect();
        prop_assert_eq!(&t.negatives_all, &all);
        for p in 0..n {
            let brute = (p + 1..n).find(|&j| !skipped[j]);
            prop_assert_eq!(t.next_positive[p], brute);
            match brute {
                Some(m) => {
                    prop_assert!(!skipped[m]);
                    let between: Vec<usize> = (p + 1..m).collect();
                    prop_assert!(between.iter().all(|&j| skipped[j]));
                    prop_assert_eq!(&t.negatives_between[p], &between);
                }
                None => prop_assert!(t.negatives_between[p].is_empty()),
            }
            prop_assert!(t.negatives_between[p].iter().all(|j| all.contains(j)));
        }
    }

    #[test]
    fn chunks_conserve_order(len in 0usize..120, min in 1usize..8, max in 1usize..30) {
        let bounds = chunk_bounds(len, min, max);
        for b in &bounds {
            prop_assert!(b.len() >= min && b.len() <= max);
        }
        let mut covered = 0;
        for b in &bounds {
            prop_assert_eq!(b.start, covered);
            covered = b.end;
        }
        // only a trailing chunk can be dropped, unless every chunk is too short
        if max >= min {
            prop_assert!(len - covered < min);
        } else {
            prop_assert!(bounds.is_empty());
        }

        let tracks: Vec<String> = (0..len).map(|i| format!("k{i}")).collect();
        let s = LabeledSession { tracks: tracks.clone(), skipped: vec![false; len] };
        let parts = filter_and_split(vec![s], min, max);
        let mut joined: Vec<String> = parts.iter().flat_map(|p| p.tracks.clone()).collect();
        joined.extend_from_slice(&tracks[covered..]);
        prop_assert_eq!(joined, tracks);
    }

    #[test]
    fn vocabulary_round_trips(keys in prop::collection::vec("[a-z]{1,3}", 1..40)) {
        let sessions = vec![LabeledSession { skipped: vec![false; keys.len()], tracks: keys.clone() }];
        let v = build_vocabulary(&sessions);
        for k in &keys {
            let i = v.index(k).unwrap();
            prop_assert!(i >= FIRST_ITEM);
            prop_assert_eq!(v.key(i), Some(k.as_str()));
        }
        let encoded = v.encode(&sessions[0]).unwrap();
        let decoded: Vec<&str> = encoded.items().iter().map(|&i| v.key(i).unwrap()).collect();
        prop_assert_eq!(decoded, keys.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn holdout_reassembles(skipped in prop::collection::vec(any::<bool>(), 3..25)) {
        let n = skipped.len();
        let s = Session::new((0..n).map(|i| FIRST_ITEM + i % 7).collect(), skipped).unwrap();
        prop_assert_eq!(holdout_split(&s).unwrap().reassemble(), s);
    }

    #[test]
    fn hit_rate_is_monotone_and_map_is_truncated_mrr(ranks in prop::collection::vec(1usize..60, 1..200)) {
        let mut last = 0.0;
        for k in 1..=60 {
            let h = hit_rate(&ranks, k);
            prop_assert!(h >= last && (0.0..=1.0).contains(&h));
            last = h;
        }
        prop_assert_eq!(map_at_10(&ranks), mrr_at_10(&ranks));
    }

    #[test]
    fn info_nce_is_monotone(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 1..12),
        bump in 1e-3f64..0.5,
        which in any::<prop::sample::Index>(),
    ) {
        let base = info_nce_from_cosines(pos, &negs);
        prop_assert!(base >= 0.0 && base <= info_nce_upper_bound(negs.len()));
        if pos + bump <= 1.0 {
            prop_assert!(info_nce_from_cosines(pos + bump, &negs) < base);
        }
        let j = which.index(negs.len());
        if negs[j] + bump <= 1.0 {
            let mut up = negs.clone();
            up[j] += bump;
            prop_assert!(info_nce_from_cosines(pos, &up) > base);
        }
    }

    #[test]
    fn info_nce_ignores_negative_order(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 0..12),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = negs.clone();
        shuffled.shuffle(&mut stream(seed, Stream::Sampling));
        prop_assert_eq!(
            info_nce_from_cosines(pos, &negs).to_bits(),
            info_nce_from_cosines(pos, &shuffled).to_bits()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn combined_loss_is_linear_in_weights(
        seed in any::<u64>(),
        alpha in 0.0f64..3.0,
        beta in 0.0f64..3.0,
        flags in prop::collection::vec(any::<bool>(), 6),
        arch_index in 0usize..4,
    ) {
        let arch = Architecture::ALL[arch_index];
        let mut cfg = ModelConfig::new(arch, 16);
        cfg.embed_dim = 4;
        cfg.heads = 2;
        cfg.max_len = 8;
        cfg.window = 3;
        cfg.horizontal_filters = 2;
        cfg.vertical_filters = 2;
        let model = Model::init(cfg, seed).unwrap();
        let mut skipped = flags;
        skipped[1] = false;
        let session = Session::new(vec![3, 8, 5, 12, 9, 4], skipped).unwrap();
        let batch = [TrainingExample {
            session,
            negatives: vec![6, 7, 10, 11],
            masked: if arch.is_causal() { vec![] } else { vec![1] },
        }];
        let loss = |a: f64, b: f64| LossConfig {
            alpha: a,
            beta: b,
            num_negatives: 4,
            nce_negative_scope: NegativeScope::AllSessionSkips,
        };
        let one = model.combined_loss(&batch, &loss(alpha, beta), Reduction::Mean).unwrap();
        let two = model.combined_loss(&batch, &loss(2.0 * alpha, 2.0 * beta), Reduction::Mean).unwrap();
        let expect = alpha * one.nll + beta * one.nce;
        prop_assert!((one.combined - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        prop_assert!((two.combined - 2.0 * one.combined).abs() <= 1e-12 * one.combined.abs().max(1e-300));
    }
}
