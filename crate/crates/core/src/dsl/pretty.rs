use std::fmt::Write;

use super::ast::*;

/// Canonical text: two-space indent, one statement per line.
pub fn pretty_print(logic: &CoordinationLogic) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "service {} {{", logic.name);
    for role in &logic.roles {
        let _ = write!(out, "  role {} requires capability {}", role.name, role.capability);
        for c in &role.constraints {
            match c {
                Constraint::NearUser { radius_m: None } => out.push_str(" near user"),
                Constraint::NearUser {
                    radius_m: Some(r),
                } => {
                    let _ = write!(out, " near user within {} m", format_number(*r));
                }
                Constraint::InZone { zone } => {
                    let _ = write!(out, " in zone {}", quote(zone));
                }
            }
        }
        out.push('\n');
    }
    for (i, h) in logic.handlers.iter().enumerate() {
        if i > 0 || !logic.roles.is_empty() {
            out.push('\n');
        }
        let _ = write!(
            out,
            "  on {}({})",
            h.trigger.name(),
            h.trigger.params().join(", ")
        );
        if let Some(g) = &h.guard {
            let _ = write!(out, " when {} {} {}", expr(&g.lhs), g.op.symbol(), expr(&g.rhs));
        }
        out.push_str(" {\n");
        for s in &h.body {
            let _ = write!(out, "    {}.{}({})", s.role, s.verb, exprs(&s.args));
            if let Some(evt) = &s.subscription {
                let _ = write!(out, " -> {evt}");
            }
            out.push('\n');
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}

fn exprs(args: &[Expr]) -> String {
    args.iter().map(expr).collect::<Vec<_>>().join(", ")
}

fn expr(e: &Expr) -> String {
    match e {
        Expr::Str { value } => quote(value),
        Expr::Num { value } => format_number(*value),
        Expr::Var { name } => name.clone(),
        Expr::Call { function, args } => format!("{function}({})", exprs(args)),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}
