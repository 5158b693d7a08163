use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use tacit_core::clock::{Clock, ManualClock};
use tacit_core::registry::{AccessSpec, DeviceDescriptor, Location, Registry, RegistryError};

const CAPS: [&str; 3] = ["visual.display", "audio.speaker", "vision.camera"];
const ZONES: [&str; 2] = ["concourse", "platform-4"];
const TTL: u64 = 1_000;

fn device(id: usize, caps: &[usize], zone: usize) -> DeviceDescriptor {
    DeviceDescriptor {
        id: format!("dev-{id}"),
        capabilities: caps.iter().map(|&c| CAPS[c].to_string()).collect(),
        location: Location::new(ZONES[zone], id as f64, 0.0),
        access: AccessSpec::rest(format!("http://dev-{id}.local")),
        last_heartbeat: 0,
        extra: BTreeMap::new(),
    }
}

#[derive(Debug, Clone)]
enum Op {
    Register { id: usize, caps: Vec<usize>, zone: usize },
    Heartbeat { id: usize, back: u64 },
    Remove { id: usize },
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..12usize, proptest::collection::vec(0..CAPS.len(), 1..3), 0..ZONES.len())
            .prop_map(|(id, caps, zone)| Op::Register { id, caps, zone }),
        3 => (0..12usize, prop_oneof![Just(0u64), 0..50u64]).prop_map(|(id, back)| Op::Heartbeat { id, back }),
        1 => (0..12usize).prop_map(|id| Op::Remove { id }),
        2 => (0..800u64).prop_map(Op::Advance),
    ]
}

proptest! {
    /// Replays random operations against the registry and a plain map; every
    /// query afterwards must match a filter over the map.
    #[test]
    fn query_matches_model(ops in proptest::collection::vec(op(), 1..60)) {
        let clock = Arc::new(ManualClock::new(10_000));
        let registry = Registry::in_memory(clock.clone());
        let mut model: BTreeMap<String, DeviceDescriptor> = BTreeMap::new();
        for op in ops {
            match op {
                Op::Register { id, caps, zone } => {
                    let mut d = device(id, &caps, zone);
                    registry.register(d.clone()).unwrap();
                    let prev = model.get(&d.id).map_or(0, |p| p.last_heartbeat);
                    d.last_heartbeat = clock.now_ms().max(prev);
                    model.insert(d.id.clone(), d);
                }
                Op::Heartbeat { id, back } => {
                    let key = format!("dev-{id}");
                    let at = clock.now_ms() - back;
                    let got = registry.heartbeat(&key, at);
                    match model.get_mut(&key) {
                        None => prop_assert!(matches!(got, Err(RegistryError::UnknownDevice(_)))),
                        Some(d) if at < d.last_heartbeat => {
                            let stale = matches!(got, Err(RegistryError::StaleTimestamp { .. }));
                            prop_assert!(stale);
                        }
                        Some(d) => {
                            prop_assert!(got.is_ok());
                            d.last_heartbeat = at;
                        }
                    }
                }
                Op::Remove { id } => {
                    let key = format!("dev-{id}");
                    prop_assert_eq!(registry.remove(&key).is_ok(), model.remove(&key).is_some());
                }
                Op::Advance(ms) => clock.advance(ms),
            }
        }
        let now = clock.now_ms();
        for cap in CAPS {
            for zone in [None, Some(ZONES[0]), Some(ZONES[1])] {
                let expected: Vec<_> = model
                    .values()
                    .filter(|d| d.capabilities.contains(cap))
                    .filter(|d| now - d.last_heartbeat <= TTL)
                    .filter(|d| zone.is_none_or(|z| d.location.zone == z))
                    .cloned()
                    .collect();
                prop_assert_eq!(registry.query(cap, now, TTL, zone), expected);
            }
        }
        let snapshot = registry.snapshot(now);
        prop_assert_eq!(snapshot.devices().to_vec(), model.values().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn register_is_idempotent(caps in proptest::collection::vec(0..CAPS.len(), 1..3), zone in 0..ZONES.len(), n in 1..5usize) {
        let clock = Arc::new(ManualClock::new(500));
        let registry = Registry::in_memory(clock);
        let d = device(1, &caps, zone);
        for _ in 0..n {
            registry.register(d.clone()).unwrap();
        }
        prop_assert_eq!(registry.len(), 1);
        let stored = registry.get("dev-1").unwrap();
        prop_assert_eq!(stored.capabilities, d.capabilities);
        prop_assert_eq!(stored.last_heartbeat, 500);
    }

    #[test]
    fn persistence_round_trips(ids in proptest::collection::btree_set(0..50usize, 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let clock = Arc::new(ManualClock::new(2_000));
        let before = {
            let registry = Registry::open(&path, clock.clone()).unwrap();
            for &id in &ids {
                registry.register(device(id, &[id % 3], id % 2)).unwrap();
            }
            registry.snapshot(2_000)
        };
        let reopened = Registry::open(&path, clock).unwrap();
        prop_assert_eq!(reopened.snapshot(2_000), before);
    }
}

#[test]
fn concurrent_writers_keep_heartbeats_monotone() {
    let clock = Arc::new(ManualClock::new(1));
    let registry = Arc::new(Registry::in_memory(clock));
    for id in 0..4 {
        registry.register(device(id, &[0], 0)).unwrap();
    }
    let threads: Vec<_> = (0..8u64)
        .map(|t| {
            let registry = registry.clone();
            std::thread::spawn(move || {
                let mut accepted = BTreeSet::new();
                for i in 0..2_000u64 {
                    let id = format!("dev-{}", (i + t) % 4);
                    let at = i * 8 + t + 1;
                    match registry.heartbeat(&id, at) {
                        Ok(()) => {
                            accepted.insert((id, at));
                        }
                        Err(RegistryError::StaleTimestamp { stored, given, .. }) => assert!(given < stored),
                        Err(e) => panic!("{e}"),
                    }
                    if i % 97 == 0 {
                        let extra = 100 + t as usize;
                        registry.register(device(extra, &[1], 1)).unwrap();
                        registry.remove(&format!("dev-{extra}")).unwrap();
                    }
                }
                accepted
            })
        })
        .collect();
    let accepted: BTreeSet<_> = threads.into_iter().flat_map(|t| t.join().unwrap()).collect();
    assert_eq!(registry.len(), 4);
    for id in 0..4 {
        let key = format!("dev-{id}");
        let max = accepted.iter().filter(|(k, _)| *k == key).map(|(_, at)| *at).max().unwrap();
        assert_eq!(registry.get(&key).unwrap().last_heartbeat, max);
    }
}
