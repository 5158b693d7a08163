use std::time::{Duration, Instant};

use proptest::prelude::*;
use tacit_core::dsl::{
    parse, parse_bytes, pretty_print, Condition, Constraint, CoordinationLogic, Expr, Handler, RelOp, RoleSpec,
    Statement, Trigger,
};

const RESERVED: &[&str] = &[
    "service", "role", "requires", "capability", "near", "user", "within", "m", "in", "zone", "on", "when", "request",
];

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}".prop_filter("keyword", |s| !RESERVED.contains(&s.as_str()))
}

fn capability() -> impl Strategy<Value = String> {
    proptest::collection::vec(ident(), 1..4).prop_map(|p| p.join("."))
}

fn number() -> impl Strategy<Value = f64> {
    prop_oneof![(0u32..10_000).prop_map(f64::from), (0.0..1e6f64)]
}

fn text() -> impl Strategy<Value = String> {
    prop_oneof!["[ -~]{0,12}", any::<String>().prop_map(|s| s.chars().take(8).collect())]
}

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![text().prop_map(Expr::str), number().prop_map(Expr::num), ident().prop_map(Expr::var)];
    leaf.prop_recursive(3, 12, 3, |inner| {
        (ident(), proptest::collection::vec(inner, 0..3)).prop_map(|(f, args)| Expr::call(f, args))
    })
}

fn role() -> impl Strategy<Value = RoleSpec> {
    (
        ident(),
        capability(),
        proptest::option::of(proptest::option::of(number())),
        proptest::option::of(text()),
        any::<bool>(),
    )
        .prop_map(|(name, capability, near, zone, zone_first)| {
            let near = near.map(|radius_m| Constraint::NearUser { radius_m });
            let zone = zone.map(|zone| Constraint::InZone { zone });
            let constraints = if zone_first {
                zone.into_iter().chain(near).collect()
            } else {
                near.into_iter().chain(zone).collect()
            };
            RoleSpec {
                name,
                capability,
                constraints,
                span: Default::default(),
            }
        })
}

fn statement() -> impl Strategy<Value = Statement> {
    (ident(), ident(), proptest::collection::vec(expr(), 0..3), proptest::option::of(ident())).prop_map(
        |(role, verb, args, subscription)| Statement {
            role,
            verb,
            args,
            subscription,
            span: Default::default(),
        },
    )
}

fn handler() -> impl Strategy<Value = Handler> {
    let trigger = prop_oneof![
        proptest::collection::vec(ident(), 0..3).prop_map(|params| Trigger::Request { params }),
        (ident(), proptest::collection::vec(ident(), 0..3))
            .prop_map(|(event_type, params)| Trigger::Event { event_type, params }),
    ];
    let guard = proptest::option::of((expr(), any::<bool>(), expr()).prop_map(|(lhs, eq, rhs)| Condition {
        lhs,
        op: if eq { RelOp::Eq } else { RelOp::Ne },
        rhs,
        span: Default::default(),
    }));
    (trigger, guard, proptest::collection::vec(statement(), 0..4)).prop_map(|(trigger, guard, body)| Handler {
        trigger,
        guard,
        body,
        span: Default::default(),
    })
}

fn logic() -> impl Strategy<Value = CoordinationLogic> {
    (ident(), proptest::collection::vec(role(), 0..4), proptest::collection::vec(handler(), 0..4))
        .prop_map(|(name, roles, handlers)| CoordinationLogic { name, roles, handlers })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parse_inverts_pretty_print(ast in logic()) {
        let text = pretty_print(&ast);
        let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &ast);
        prop_assert_eq!(pretty_print(&back), text);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..1024)) {
        let t = Instant::now();
        let _ = parse_bytes(&bytes);
        prop_assert!(t.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn parse_errors_point_inside_the_input(src in "[ -~\n]{0,200}") {
        if let Err(e) = parse(&src) {
            let lines = src.split('\n').count() as u32;
            prop_assert!(e.line >= 1 && e.line <= lines, "{:?}", e);
            prop_assert!(e.column >= 1);
        }
    }
}

#[test]
fn deep_nesting_is_rejected_not_overflowed() {
    let depth = 10_000;
    let src = format!(
        "service s {{ role r requires capability a on request() {{ r.x({}1{}) }} }}",
        "f(".repeat(depth),
        ")".repeat(depth)
    );
    assert!(parse(&src).is_err());
}
