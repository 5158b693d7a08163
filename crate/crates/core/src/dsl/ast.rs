use serde::{Deserialize, Serialize};

/// 1-based source position. Positions never participate in equality, so two
/// ASTs compare equal when they have the same structure.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub line: u32,
    pub column: u32,
}

impl Span {
    pub fn new(line: u32, column: u32) -> Self {
        Self { line, column }
    }
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationLogic {
    pub name: String,
    pub roles: Vec<RoleSpec>,
    pub handlers: Vec<Handler>,
}

impl CoordinationLogic {
    pub fn role(&self, name: &str) -> Option<&RoleSpec> {
        self.roles.iter().find(|r| r.name == name)
    }

    /// Parameter names declared by `on request(...)` triggers, in order of
    /// first appearance. These are in scope in every handler.
    pub fn request_params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for h in &self.handlers {
            if let Trigger::Request { params } = &h.trigger {
                for p in params {
                    if !out.contains(&p.as_str()) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    pub capability: String,
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub span: Span,
}

impl RoleSpec {
    /// `Some(None)` means `near user` without a radius.
    pub fn near_user(&self) -> Option<Option<f64>> {
        self.constraints.iter().find_map(|c| match c {
            Constraint::NearUser { radius_m } => Some(*radius_m),
            _ => None,
        })
    }

    pub fn in_zone(&self) -> Option<&str> {
        self.constraints.iter().find_map(|c| match c {
            Constraint::InZone { zone } => Some(zone.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    NearUser { radius_m: Option<f64> },
    InZone { zone: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handler {
    pub trigger: Trigger,
    pub guard: Option<Condition>,
    pub body: Vec<Statement>,
    #[serde(default)]
    pub span: Span,
}

pub const REQUEST_TRIGGER: &str = "request";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Request { params: Vec<String> },
    Event { event_type: String, params: Vec<String> },
}

impl Trigger {
    pub fn name(&self) -> &str {
        match self {
            Trigger::Request { .. } => REQUEST_TRIGGER,
            Trigger::Event { event_type, .. } => event_type,
        }
    }

    pub fn params(&self) -> &[String] {
        match self {
            Trigger::Request { params } | Trigger::Event { params, .. } => params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub role: String,
    pub verb: String,
    pub args: Vec<Expr>,
    pub subscription: Option<String>,
    #[serde(default)]
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Str { value: String },
    Num { value: f64 },
    Var { name: String },
    Call { function: String, args: Vec<Expr> },
}

impl Expr {
    pub fn str(value: impl Into<String>) -> Self {
        Expr::Str {
            value: value.into(),
        }
    }

    pub fn num(value: f64) -> Self {
        Expr::Num { value }
    }

    pub fn var(name: impl Into<String>) -> Self {
        Expr::Var { name: name.into() }
    }

    pub fn call(function: impl Into<String>, args: Vec<Expr>) -> Self {
        Expr::Call {
            function: function.into(),
            args,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl RelOp {
    pub fn symbol(self) -> &'static str {
        match self {
            RelOp::Eq => "==",
            RelOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub lhs: Expr,
    pub op: RelOp,
    pub rhs: Expr,
    #[serde(default)]
    pub span: Span,
}

/// Integers print without a fractional part; everything else uses the
/// shortest representation that parses back to the same value.
pub fn format_number(n: f64) -> String {
    if n.is_finite() && n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}
