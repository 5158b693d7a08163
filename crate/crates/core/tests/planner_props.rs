use std::collections::BTreeMap;

use proptest::prelude::*;
use tacit_core::dsl::{Constraint, CoordinationLogic, RoleSpec};
use tacit_core::planner::{plan_bindings, replan, score_for_distance, PlanContext};
use tacit_core::registry::{AccessSpec, DeviceDescriptor, Location, RegistrySnapshot};

const CAPS: [&str; 3] = ["visual.display", "audio.speaker", "vision.camera"];
const NOW: u64 = 100_000;
const TTL: u64 = 30_000;

fn devices() -> impl Strategy<Value = Vec<DeviceDescriptor>> {
    proptest::collection::vec((0..CAPS.len(), -20..20i32, -20..20i32, 0..2 * TTL), 1..40).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (cap, x, y, age))| DeviceDescriptor {
                id: format!("dev-{i:02}"),
                capabilities: [CAPS[cap].to_string()].into(),
                location: Location::new("z", x as f64, y as f64),
                access: AccessSpec::rest(format!("http://dev-{i}.local")),
                last_heartbeat: NOW - age,
                extra: BTreeMap::new(),
            })
            .collect()
    })
}

fn logic() -> impl Strategy<Value = CoordinationLogic> {
    proptest::collection::vec((0..CAPS.len(), proptest::option::of(5..30u32)), 1..5).prop_map(|roles| {
        CoordinationLogic {
            name: "p".into(),
            roles: roles
                .into_iter()
                .enumerate()
                .map(|(i, (cap, radius))| RoleSpec {
                    name: format!("role{i}"),
                    capability: CAPS[cap].into(),
                    constraints: radius
                        .map(|r| Constraint::NearUser { radius_m: Some(r as f64) })
                        .into_iter()
                        .collect(),
                    span: Default::default(),
                })
                .collect(),
            handlers: vec![],
        }
    })
}

fn ctx() -> PlanContext {
    PlanContext {
        user_location: Location::new("z", 0.0, 0.0),
        now: NOW,
        ttl_ms: TTL,
        excluded: Default::default(),
    }
}

proptest! {
    #[test]
    fn plan_ignores_insertion_order(devs in devices(), logic in logic(), seed in any::<u64>()) {
        let mut shuffled = devs.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        shuffled.reverse();
        let a = plan_bindings(&logic, &RegistrySnapshot::new(NOW, devs), &ctx());
        let b = plan_bindings(&logic, &RegistrySnapshot::new(NOW, shuffled), &ctx());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scores_follow_distance(devs in devices(), logic in logic()) {
        let snapshot = RegistrySnapshot::new(NOW, devs);
        if let Ok(plan) = plan_bindings(&logic, &snapshot, &ctx()) {
            for b in plan.bindings.values() {
                let d = snapshot.get(&b.device_id).unwrap();
                let expected = score_for_distance(ctx().user_location.distance_to(&d.location));
                prop_assert_eq!(b.score, expected);
                prop_assert!(b.score > 0.0 && b.score <= 1.0);
            }
        }
    }

    #[test]
    fn replan_keeps_unaffected_roles_and_never_reuses_the_failed_device(
        devs in devices(),
        logic in logic(),
        pick in any::<proptest::sample::Index>(),
    ) {
        let snapshot = RegistrySnapshot::new(NOW, devs);
        let Ok(prior) = plan_bindings(&logic, &snapshot, &ctx()) else { return Ok(()) };
        let bound: Vec<_> = prior.bindings.values().map(|b| b.device_id.clone()).collect();
        let failed = pick.get(&bound).clone();
        match replan(&logic, &snapshot, &ctx(), &failed, &prior) {
            Ok(next) => {
                for (role, b) in &next.bindings {
                    prop_assert_ne!(&b.device_id, &failed);
                    if prior.bindings[role].device_id != failed {
                        prop_assert_eq!(&b.device_id, &prior.bindings[role].device_id);
                    }
                }
            }
            Err(e) => {
                let role = e.to_string();
                prop_assert!(prior.bindings.iter().any(|(r, b)| b.device_id == failed && role.contains(r.as_str())));
            }
        }
        // a device that is not bound changes nothing
        let same = replan(&logic, &snapshot, &ctx(), "not-bound", &prior);
        prop_assert_eq!(same, Ok(prior));
    }
}
