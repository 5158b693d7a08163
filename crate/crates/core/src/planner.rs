//! Role-to-device binding and route selection.
//!
//! Each role is resolved independently: among live devices that offer the
//! role's capability and satisfy its constraints, the one nearest the user
//! wins (score `1 / (1 + distance)`), ties going to the smaller device id.
//! Devices reachable over REST or SOAP are dispatched to directly; native
//! devices are reached through their gateway.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::dsl::{CoordinationLogic, RoleSpec};
use crate::registry::{is_alive, AccessKind, AccessSpec, DeviceDescriptor, Location, RegistrySnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanContext {
    pub user_location: Location,
    pub now: Millis,
    pub ttl_ms: Millis,
    #[serde(default)]
    pub excluded: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispatchRoute {
    DirectRest {
        endpoint: String,
    },
    DirectSoap {
        endpoint: String,
    },
    ViaGateway {
        gateway_id: String,
        driver: String,
        native_address: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub device_id: String,
    pub route: DispatchRoute,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingPlan {
    pub logic_name: String,
    pub bindings: BTreeMap<String, Binding>,
    pub planned_at: Millis,
}

impl BindingPlan {
    pub fn roles_bound_to<'a>(&'a self, device_id: &'a str) -> impl Iterator<Item = &'a str> {
        self.bindings
            .iter()
            .filter(move |(_, b)| b.device_id == device_id)
            .map(|(r, _)| r.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum PlanError {
    #[error("ROLE_UNSATISFIED({0})")]
    RoleUnsatisfied(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("access spec of kind {kind} lacks `{field}`")]
pub struct RouteError {
    pub kind: AccessKind,
    pub field: &'static str,
}

/// Maps an access spec to its dispatch route. Depends on nothing else.
pub fn route_for(access: &AccessSpec) -> Result<DispatchRoute, RouteError> {
    let need = |v: &Option<String>, field: &'static str| {
        v.clone().ok_or(RouteError {
            kind: access.kind,
            field,
        })
    };
    Ok(match access.kind {
        AccessKind::Rest => DispatchRoute::DirectRest {
            endpoint: need(&access.endpoint, "endpoint")?,
        },
        AccessKind::Soap => DispatchRoute::DirectSoap {
            endpoint: need(&access.endpoint, "endpoint")?,
        },
        AccessKind::Native => DispatchRoute::ViaGateway {
            gateway_id: need(&access.gateway_id, "gateway_id")?,
            driver: need(&access.driver, "driver")?,
            native_address: need(&access.native_address, "native_address")?,
        },
    })
}

pub fn score_for_distance(distance_m: f64) -> f64 {
    1.0 / (1.0 + distance_m)
}

/// Distance to the user if `device` may serve `role` under `ctx`.
pub fn eligible_distance(role: &RoleSpec, device: &DeviceDescriptor, ctx: &PlanContext) -> Option<f64> {
    if ctx.excluded.contains(&device.id)
        || !device.capabilities.contains(&role.capability)
        || !is_alive(device, ctx.now, ctx.ttl_ms)
    {
        return None;
    }
    if let Some(zone) = role.in_zone() {
        if device.location.zone != zone {
            return None;
        }
    }
    let d = ctx.user_location.distance_to(&device.location);
    if let Some(Some(radius)) = role.near_user() {
        if d > radius {
            return None;
        }
    }
    Some(d)
}

fn bind(device: &DeviceDescriptor, distance: f64) -> Option<Binding> {
    Some(Binding {
        device_id: device.id.clone(),
        route: route_for(&device.access).ok()?,
        score: score_for_distance(distance),
    })
}

fn select(role: &RoleSpec, snapshot: &RegistrySnapshot, ctx: &PlanContext) -> Option<Binding> {
    let mut best: Option<Binding> = None;
    // snapshot is sorted by id, so keeping the first maximum breaks ties
    // toward the smaller id
    for device in snapshot.devices() {
        let Some(d) = eligible_distance(role, device, ctx) else {
            continue;
        };
        let Some(candidate) = bind(device, d) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| candidate.score > b.score) {
            best = Some(candidate);
        }
    }
    best
}

/// Binds every declared role or fails on the first unsatisfiable one.
pub fn plan_bindings(
    logic: &CoordinationLogic,
    snapshot: &RegistrySnapshot,
    ctx: &PlanContext,
) -> Result<BindingPlan, PlanError> {
    let mut bindings = BTreeMap::new();
    for role in &logic.roles {
        let binding =
            select(role, snapshot, ctx).ok_or_else(|| PlanError::RoleUnsatisfied(role.name.clone()))?;
        bindings.insert(role.name.clone(), binding);
    }
    Ok(BindingPlan {
        logic_name: logic.name.clone(),
        bindings,
        planned_at: ctx.now,
    })
}

/// Re-plans after `failed` stopped responding. Roles whose prior device is
/// still eligible keep it; the rest are re-selected with `failed` excluded.
pub fn replan(
    logic: &CoordinationLogic,
    snapshot: &RegistrySnapshot,
    ctx: &PlanContext,
    failed: &str,
    prior: &BindingPlan,
) -> Result<BindingPlan, PlanError> {
    if prior.roles_bound_to(failed).next().is_none() {
        return Ok(prior.clone());
    }
    let mut ctx = ctx.clone();
    ctx.excluded.insert(failed.to_string());
    let mut bindings = BTreeMap::new();
    for role in &logic.roles {
        let kept = prior.bindings.get(&role.name).and_then(|b| {
            let device = snapshot.get(&b.device_id)?;
            let d = eligible_distance(role, device, &ctx)?;
            bind(device, d)
        });
        let binding = match kept {
            Some(b) => b,
            None => select(role, snapshot, &ctx)
                .ok_or_else(|| PlanError::RoleUnsatisfied(role.name.clone()))?,
        };
        bindings.insert(role.name.clone(), binding);
    }
    Ok(BindingPlan {
        logic_name: logic.name.clone(),
        bindings,
        planned_at: ctx.now,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn device(id: &str, cap: &str, access: AccessSpec, x: f64, y: f64) -> DeviceDescriptor {
        DeviceDescriptor {
            id: id.into(),
            capabilities: [cap.to_string()].into(),
            location: Location::new("concourse", x, y),
            access,
            last_heartbeat: 1_000,
            extra: BTreeMap::new(),
        }
    }

    fn ctx() -> PlanContext {
        PlanContext {
            user_location: Location::new("concourse", 0.0, 0.0),
            now: 1_000,
            ttl_ms: 30_000,
            excluded: BTreeSet::new(),
        }
    }

    fn display_logic() -> CoordinationLogic {
        parse("service s { role disp requires capability visual.display near user on request() { disp.show() } }")
            .unwrap()
    }

    fn three_displays() -> RegistrySnapshot {
        RegistrySnapshot::new(
            1_000,
            [
                device("disp-1", "visual.display", AccessSpec::rest("http://h:1"), 10.0, 0.0),
                device("disp-2", "visual.display", AccessSpec::soap("http://h:2"), 0.0, 5.0),
                device(
                    "disp-3",
                    "visual.display",
                    AccessSpec::native("gw-1", "lineproto", "sim:7001"),
                    -20.0,
                    0.0,
                ),
            ],
        )
    }

    #[test]
    fn nearest_display_wins() {
        let plan = plan_bindings(&display_logic(), &three_displays(), &ctx()).unwrap();
        let b = &plan.bindings["disp"];
        assert_eq!(b.device_id, "disp-2");
        assert_eq!(b.score, 1.0 / 6.0);
        assert_eq!(b.route, DispatchRoute::DirectSoap { endpoint: "http://h:2".into() });
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        let snap = RegistrySnapshot::new(
            0,
            [
                device("a-2", "visual.display", AccessSpec::rest("http://h:2"), 3.0, 4.0),
                device("a-1", "visual.display", AccessSpec::rest("http://h:1"), -3.0, -4.0),
            ],
        );
        let plan = plan_bindings(&display_logic(), &snap, &ctx()).unwrap();
        assert_eq!(plan.bindings["disp"].device_id, "a-1");
    }

    #[test]
    fn empty_registry_is_unsatisfied() {
        let err = plan_bindings(&display_logic(), &RegistrySnapshot::new(0, []), &ctx()).unwrap_err();
        assert_eq!(err, PlanError::RoleUnsatisfied("disp".into()));
    }

    #[test]
    fn constraints_filter() {
        let logic = parse(
            r#"service s { role disp requires capability visual.display near user within 8 m in zone "concourse" on request() { disp.show() } }"#,
        )
        .unwrap();
        let mut snap_devices = three_displays().devices().to_vec();
        snap_devices[1].location.zone = "platform".into();
        let snap = RegistrySnapshot::new(0, snap_devices);
        // disp-2 is in another zone, disp-1 and disp-3 are beyond 8 m
        assert!(plan_bindings(&logic, &snap, &ctx()).is_err());
    }

    #[test]
    fn stale_and_excluded_devices_are_skipped() {
        let mut c = ctx();
        c.excluded.insert("disp-2".into());
        let plan = plan_bindings(&display_logic(), &three_displays(), &c).unwrap();
        assert_eq!(plan.bindings["disp"].device_id, "disp-1");
        c.now = 1_000 + 30_001;
        assert!(plan_bindings(&display_logic(), &three_displays(), &c).is_err());
    }

    #[test]
    fn routes() {
        assert_eq!(
            route_for(&AccessSpec::rest("E")).unwrap(),
            DispatchRoute::DirectRest { endpoint: "E".into() }
        );
        assert_eq!(
            route_for(&AccessSpec::soap("E")).unwrap(),
            DispatchRoute::DirectSoap { endpoint: "E".into() }
        );
        assert_eq!(
            route_for(&AccessSpec::native("gw-1", "lineproto", "sim:7001")).unwrap(),
            DispatchRoute::ViaGateway {
                gateway_id: "gw-1".into(),
                driver: "lineproto".into(),
                native_address: "sim:7001".into()
            }
        );
    }

    fn two_role_logic() -> CoordinationLogic {
        parse(
            "service s { role disp requires capability visual.display near user
               role spk requires capability audio.speaker near user
               on request() { disp.show() spk.announce() } }",
        )
        .unwrap()
    }

    fn two_role_snapshot() -> RegistrySnapshot {
        let mut devices = three_displays().devices().to_vec();
        devices.push(device("spk-1", "audio.speaker", AccessSpec::rest("http://h:9"), 1.0, 1.0));
        devices.push(device("spk-2", "audio.speaker", AccessSpec::rest("http://h:8"), 9.0, 9.0));
        RegistrySnapshot::new(0, devices)
    }

    #[test]
    fn replan_swaps_only_the_failed_role() {
        let logic = two_role_logic();
        let snap = two_role_snapshot();
        let prior = plan_bindings(&logic, &snap, &ctx()).unwrap();
        assert_eq!(prior.bindings["disp"].device_id, "disp-2");
        let next = replan(&logic, &snap, &ctx(), "disp-2", &prior).unwrap();
        assert_eq!(next.bindings["disp"].device_id, "disp-1");
        assert_eq!(next.bindings["spk"], prior.bindings["spk"]);

        // oracle: plan over the snapshot minus the failed device
        let without: Vec<_> = snap.devices().iter().filter(|d| d.id != "disp-2").cloned().collect();
        let oracle = plan_bindings(&logic, &RegistrySnapshot::new(0, without), &ctx()).unwrap();
        assert_eq!(next.bindings["disp"], oracle.bindings["disp"]);
    }

    #[test]
    fn replan_without_substitute() {
        let logic = two_role_logic();
        let snap = two_role_snapshot();
        let only_spk: Vec<_> = snap.devices().iter().filter(|d| d.id != "spk-2").cloned().collect();
        let snap = RegistrySnapshot::new(0, only_spk);
        let prior = plan_bindings(&logic, &snap, &ctx()).unwrap();
        assert_eq!(
            replan(&logic, &snap, &ctx(), "spk-1", &prior).unwrap_err(),
            PlanError::RoleUnsatisfied("spk".into())
        );
    }

    #[test]
    fn replan_for_non_participant_is_identity() {
        let logic = two_role_logic();
        let snap = two_role_snapshot();
        let prior = plan_bindings(&logic, &snap, &ctx()).unwrap();
        assert_eq!(replan(&logic, &snap, &ctx(), "disp-3", &prior).unwrap(), prior);
    }

    #[test]
    fn one_device_may_fill_several_roles() {
        let logic = parse(
            "service s { role a requires capability visual.display role b requires capability visual.display
               on request() { a.show() b.show() } }",
        )
        .unwrap();
        let plan = plan_bindings(&logic, &three_displays(), &ctx()).unwrap();
        assert_eq!(plan.bindings["a"].device_id, plan.bindings["b"].device_id);
    }
}
