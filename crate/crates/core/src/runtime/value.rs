use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{format_number, Condition, Expr, RelOp};

/// An evaluated argument or parameter.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Str(String),
}

/// Integral numbers serialize as JSON integers, matching [`Value::canonical`].
impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        const EXACT: f64 = 9_007_199_254_740_992.0;
        match self {
            Value::Num(n) if n.fract() == 0.0 && n.abs() < EXACT => s.serialize_i64(*n as i64),
            Value::Num(n) => s.serialize_f64(*n),
            Value::Str(v) => s.serialize_str(v),
        }
    }
}

impl Value {
    /// Strings as-is, numbers in canonical form (`3`, not `3.0`).
    pub fn canonical(&self) -> String {
        match self {
            Value::Num(n) => format_number(*n),
            Value::Str(s) => s.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Num(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EvalError {
    #[error("TABLE_MISS({function},{key:?})")]
    TableMiss { function: String, key: String },
    #[error("UNBOUND_VARIABLE({0})")]
    Unbound(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::TableMiss { .. } => "TABLE_MISS",
            EvalError::Unbound(_) => "UNBOUND_VARIABLE",
        }
    }
}

/// Named lookup tables backing the language's table functions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tables(pub BTreeMap<String, BTreeMap<String, String>>);

#[derive(Deserialize)]
#[serde(untagged)]
enum TablesFile {
    Wrapped { tables: Tables },
    Bare(Tables),
}

impl Tables {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, function: &str, entries: &[(&str, &str)]) -> Self {
        self.0.insert(
            function.to_string(),
            entries
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        );
        self
    }

    pub fn function_names(&self) -> std::collections::BTreeSet<String> {
        self.0.keys().cloned().collect()
    }

    /// Parses either a bare `{"table": {...}}` document or any JSON object
    /// with a `tables` member (such as a scenario file).
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str::<TablesFile>(text)? {
            TablesFile::Wrapped { tables } => tables,
            TablesFile::Bare(t) => t,
        })
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Keys are the canonical argument values joined by `,`.
    pub fn lookup(&self, function: &str, args: &[Value]) -> Result<Value, EvalError> {
        let key = args.iter().map(Value::canonical).collect::<Vec<_>>().join(",");
        self.0
            .get(function)
            .and_then(|t| t.get(&key))
            .map(|v| Value::Str(v.clone()))
            .ok_or(EvalError::TableMiss {
                function: function.to_string(),
                key,
            })
    }
}

pub fn evaluate(
    expr: &Expr,
    bindings: &BTreeMap<String, Value>,
    tables: &Tables,
) -> Result<Value, EvalError> {
    match expr {
        Expr::Str { value } => Ok(Value::Str(value.clone())),
        Expr::Num { value } => Ok(Value::Num(*value)),
        Expr::Var { name } => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::Unbound(name.clone())),
        Expr::Call { function, args } => {
            let args = args
                .iter()
                .map(|a| evaluate(a, bindings, tables))
                .collect::<Result<Vec<_>, _>>()?;
            tables.lookup(function, &args)
        }
    }
}

/// Guards compare canonical string forms.
pub fn evaluate_condition(
    cond: &Condition,
    bindings: &BTreeMap<String, Value>,
    tables: &Tables,
) -> Result<bool, EvalError> {
    let lhs = evaluate(&cond.lhs, bindings, tables)?.canonical();
    let rhs = evaluate(&cond.rhs, bindings, tables)?.canonical();
    Ok(match cond.op {
        RelOp::Eq => lhs == rhs,
        RelOp::Ne => lhs != rhs,
    })
}
