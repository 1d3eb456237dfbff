use std::collections::{BTreeMap, BTreeSet};

use moshpit_core::dht::SimDht;
use moshpit_core::matchmaking::{
    form_groups, initial_index, next_group_key, FaultPlan, MatchConfig, MatchOutcome, MatchPeer,
    Phase,
};
use moshpit_core::{GridConfig, GroupKey, PeerId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_consensus(out: &MatchOutcome) {
    let mut seen = BTreeSet::new();
    for g in &out.groups {
        assert!(!g.members.is_empty());
        assert_eq!(g.members[0], g.leader);
        for m in &g.members {
            assert!(seen.insert(*m), "{m} sealed twice");
            let st = &out.states[m];
            if st.phase != Phase::Failed {
                assert_eq!(st.members, g.members);
                assert_eq!(st.leader, Some(g.leader));
            }
        }
    }
}

fn scenario() -> impl Strategy<Value = (Vec<MatchPeer>, FaultPlan, usize)> {
    (1usize..12, 1usize..4, 2usize..8, any::<u64>()).prop_map(|(n, keys, max_group, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let peers: Vec<MatchPeer> = (0..n)
            .map(|i| MatchPeer {
                start: rng.random_range(0..4),
                clock_skew: rng.random_range(-3..4),
                ..MatchPeer::new(PeerId(i as u32), GroupKey::new(vec![rng.random_range(0..keys)]))
            })
            .collect();
        let mut faults = FaultPlan::none();
        for p in &peers {
            if rng.random_bool(0.3) {
                faults = faults.fail(p.id, rng.random_range(0..30));
            }
        }
        (peers, faults, max_group)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn guarantees_under_fail_stop((peers, faults, max_group) in scenario()) {
        let cfg = MatchConfig::new(3, max_group).unwrap();
        let mut dht = SimDht::default();
        let out = form_groups(0, &peers, &mut dht, &cfg, &faults).unwrap();
        check_consensus(&out);
        let budget = cfg.tick_budget(peers.len(), faults.len());
        for p in &peers {
            let alive = !faults.fail_at.contains_key(&p.id);
            if alive {
                let g = out.group_of(p.id).expect("live peer left unsealed");
                prop_assert!(g.sealed_at <= budget, "sealed at {} > {}", g.sealed_at, budget);
                prop_assert!(g.members.len() <= max_group);
                prop_assert!(g.members.iter().all(|m| peers.iter().any(|q| q.id == *m && q.key == p.key)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn cohorts_form_one_group_without_failures(n in 1usize..16, keys in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let peers: Vec<MatchPeer> = (0..n)
            .map(|i| MatchPeer {
                clock_skew: rng.random_range(-100..100),
                ..MatchPeer::new(PeerId(i as u32), GroupKey::new(vec![rng.random_range(0..keys)]))
            })
            .collect();
        let mut dht = SimDht::default();
        let out = form_groups(0, &peers, &mut dht, &MatchConfig::default(), &FaultPlan::none()).unwrap();
        check_consensus(&out);
        let mut cohorts: BTreeMap<GroupKey, BTreeSet<PeerId>> = BTreeMap::new();
        for p in &peers {
            cohorts.entry(p.key.clone()).or_default().insert(p.id);
        }
        prop_assert_eq!(out.groups.len(), cohorts.len());
        for g in &out.groups {
            let members: BTreeSet<PeerId> = g.members.iter().copied().collect();
            prop_assert_eq!(&members, &cohorts[&g.key]);
            let mut prios: Vec<_> = g.members.iter().map(|m| peers[m.index()].priority()).collect();
            let sorted = { let mut s = prios.clone(); s.sort(); s };
            prop_assert_eq!(&prios, &sorted);
            prios.clear();
        }
    }
}

#[test]
fn full_grid_never_repeats_a_pair_in_consecutive_rounds() {
    for m in 2..=4usize {
        for d in 1..=3u32 {
            let grid = GridConfig::new(m, d as usize, 1).unwrap();
            let n = m.pow(d);
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut keys: Vec<GroupKey> = (0..n).map(|i| initial_index(i, &grid).unwrap()).collect();
                let mut prev: Option<Vec<usize>> = None;
                let mut dht = SimDht::default();
                for round in 0..(2 * d as u64 + 1) {
                    let peers: Vec<MatchPeer> = (0..n)
                        .map(|i| MatchPeer {
                            clock_skew: rng.random_range(0..1000),
                            ..MatchPeer::new(PeerId(i as u32), keys[i].clone())
                        })
                        .collect();
                    let out = form_groups(round, &peers, &mut dht, &MatchConfig::new(3, m).unwrap(), &FaultPlan::none()).unwrap();
                    let mut group_of = vec![usize::MAX; n];
                    for (gi, g) in out.groups.iter().enumerate() {
                        assert_eq!(g.members.len(), m, "M={m} d={d}");
                        for (chunk, p) in g.members.iter().enumerate() {
                            group_of[p.index()] = gi;
                            keys[p.index()] = next_group_key(&keys[p.index()], chunk, m).unwrap();
                        }
                    }
                    if let (Some(before), true) = (&prev, d > 1) {
                        for a in 0..n {
                            for b in a + 1..n {
                                assert!(
                                    !(before[a] == before[b] && group_of[a] == group_of[b]),
                                    "M={m} d={d} round {round}: peers {a},{b} met twice"
                                );
                            }
                        }
                    }
                    prev = Some(group_of);
                }
            }
        }
    }
}

#[test]
fn initial_groups_never_exceed_m() {
    for m in 1..=6usize {
        for d in 1..=4usize {
            let grid = GridConfig::new(m, d, 1).unwrap();
            let mut count: BTreeMap<GroupKey, usize> = BTreeMap::new();
            for i in 0..grid.capacity().unwrap() {
                *count.entry(initial_index(i, &grid).unwrap()).or_default() += 1;
            }
            assert!(count.values().all(|&c| c == m));
        }
    }
}
