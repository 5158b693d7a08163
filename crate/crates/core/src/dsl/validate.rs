use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub path: String,
    pub message: String,
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(
            f,
            "{}:{}: {sev}: {} ({})",
            self.line, self.column, self.message, self.path
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

struct Checker<'a> {
    vocabulary: &'a BTreeSet<String>,
    table_functions: &'a BTreeSet<String>,
    findings: Vec<Finding>,
}

impl Checker<'_> {
    fn push(&mut self, severity: Severity, path: String, span: Span, message: String) {
        self.findings.push(Finding {
            severity,
            path,
            message,
            line: span.line,
            column: span.column,
        });
    }

    fn expr(&mut self, e: &Expr, scope: &HashSet<&str>, path: &str, span: Span) {
        match e {
            Expr::Str { .. } | Expr::Num { .. } => {}
            Expr::Var { name } => {
                if !scope.contains(name.as_str()) {
                    self.push(
                        Severity::Error,
                        path.to_string(),
                        span,
                        format!("variable `{name}` is not bound by the trigger"),
                    );
                }
            }
            Expr::Call { function, args } => {
                if !self.table_functions.contains(function) {
                    self.push(
                        Severity::Error,
                        path.to_string(),
                        span,
                        format!("unknown table function `{function}`"),
                    );
                }
                for a in args {
                    self.expr(a, scope, path, span);
                }
            }
        }
    }
}

/// Static checks over a parsed logic. Findings are sorted by source position.
///
/// Variables in scope for a handler are its own trigger parameters plus the
/// parameters declared by any `on request(...)` trigger (the session's
/// request parameters).
pub fn validate(
    logic: &CoordinationLogic,
    vocabulary: &BTreeSet<String>,
    table_functions: &BTreeSet<String>,
) -> ValidationReport {
    let mut ck = Checker {
        vocabulary,
        table_functions,
        findings: Vec::new(),
    };

    let mut seen_roles = HashSet::new();
    for (i, role) in logic.roles.iter().enumerate() {
        let path = format!("roles[{i}]");
        if !seen_roles.insert(role.name.as_str()) {
            ck.push(
                Severity::Error,
                path.clone(),
                role.span,
                format!("duplicate role `{}`", role.name),
            );
        }
        if !ck.vocabulary.contains(&role.capability) {
            ck.push(
                Severity::Error,
                format!("{path}.capability"),
                role.span,
                format!("capability `{}` is not in the vocabulary", role.capability),
            );
        }
        let near = role
            .constraints
            .iter()
            .filter(|c| matches!(c, Constraint::NearUser { .. }))
            .count();
        let zone = role.constraints.len() - near;
        if near > 1 || zone > 1 {
            ck.push(
                Severity::Error,
                format!("{path}.constraints"),
                role.span,
                format!("role `{}` repeats a constraint kind", role.name),
            );
        }
    }

    let event_types: HashSet<&str> = logic
        .handlers
        .iter()
        .filter_map(|h| match &h.trigger {
            Trigger::Event { event_type, .. } => Some(event_type.as_str()),
            Trigger::Request { .. } => None,
        })
        .collect();
    let request_params = logic.request_params();
    let mut used_roles = HashSet::new();

    for (i, h) in logic.handlers.iter().enumerate() {
        let scope: HashSet<&str> = h
            .trigger
            .params()
            .iter()
            .map(String::as_str)
            .chain(request_params.iter().copied())
            .collect();
        if let Some(g) = &h.guard {
            let path = format!("handlers[{i}].guard");
            ck.expr(&g.lhs, &scope, &path, g.span);
            ck.expr(&g.rhs, &scope, &path, g.span);
        }
        for (j, s) in h.body.iter().enumerate() {
            let path = format!("handlers[{i}].body[{j}]");
            used_roles.insert(s.role.as_str());
            if logic.role(&s.role).is_none() {
                ck.push(
                    Severity::Error,
                    path.clone(),
                    s.span,
                    format!("undeclared role `{}`", s.role),
                );
            }
            if !crate::registry::is_lower_ident(&s.verb) {
                ck.push(
                    Severity::Error,
                    path.clone(),
                    s.span,
                    format!("verb `{}` must match [a-z][a-z0-9_]*", s.verb),
                );
            }
            for a in &s.args {
                ck.expr(a, &scope, &path, s.span);
            }
            if let Some(evt) = &s.subscription {
                if !event_types.contains(evt.as_str()) {
                    ck.push(
                        Severity::Warning,
                        path.clone(),
                        s.span,
                        format!("subscription `{evt}` has no `on {evt}` handler"),
                    );
                }
            }
        }
    }

    for (i, role) in logic.roles.iter().enumerate() {
        if !used_roles.contains(role.name.as_str()) {
            ck.push(
                Severity::Warning,
                format!("roles[{i}]"),
                role.span,
                format!("role `{}` is never used", role.name),
            );
        }
    }

    let mut findings = ck.findings;
    findings.sort_by_key(|f| (f.line, f.column));
    ValidationReport { findings }
}
