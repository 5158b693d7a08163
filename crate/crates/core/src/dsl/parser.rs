use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::ParseError;
use crate::registry::is_lower_ident;

const MAX_EXPR_DEPTH: usize = 64;

pub fn parse(source: &str) -> Result<CoordinationLogic, ParseError> {
    let tokens = tokenize(source)?;
    let mut p = Parser { tokens, pos: 0 };
    let logic = p.logic()?;
    p.expect(&Tok::Eof, "end of input")?;
    Ok(logic)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        // the token list always ends with Eof, and Eof is never consumed
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn advance(&mut self) -> Token {
        let t = self.peek().clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        let t = self.peek();
        let message = match t.tok {
            Tok::Eof => format!("unexpected end of input, expected {expected}"),
            ref found => format!("expected {expected}, found {found}"),
        };
        ParseError::at(t.span, message)
    }

    fn expect(&mut self, tok: &Tok, what: &str) -> Result<Span, ParseError> {
        if &self.peek().tok == tok {
            Ok(self.advance().span)
        } else {
            Err(self.error(what))
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<Span, ParseError> {
        if self.at_keyword(kw) {
            Ok(self.advance().span)
        } else {
            Err(self.error(&format!("`{kw}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Span), ParseError> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                Ok((s, self.advance().span))
            }
            _ => Err(self.error(what)),
        }
    }

    fn logic(&mut self) -> Result<CoordinationLogic, ParseError> {
        self.keyword("service")?;
        let (name, _) = self.ident("service name")?;
        self.expect(&Tok::LBrace, "`{`")?;
        let mut roles = Vec::new();
        while self.at_keyword("role") {
            roles.push(self.role()?);
        }
        let mut handlers = Vec::new();
        while self.at_keyword("on") {
            handlers.push(self.handler()?);
        }
        if !roles.is_empty() || !handlers.is_empty() {
            self.expect(&Tok::RBrace, "`on` or `}`")?;
        } else {
            self.expect(&Tok::RBrace, "`role`, `on` or `}`")?;
        }
        Ok(CoordinationLogic {
            name,
            roles,
            handlers,
        })
    }

    fn role(&mut self) -> Result<RoleSpec, ParseError> {
        let span = self.keyword("role")?;
        let (name, _) = self.ident("role name")?;
        self.keyword("requires")?;
        self.keyword("capability")?;
        let capability = self.qname()?;
        let mut constraints = Vec::new();
        loop {
            let at = self.peek().span;
            let constraint = if self.at_keyword("near") {
                self.advance();
                self.keyword("user")?;
                let radius_m = if self.at_keyword("within") {
                    self.advance();
                    let r = match self.peek().tok {
                        Tok::Num(n) => n,
                        _ => return Err(self.error("radius in meters")),
                    };
                    self.advance();
                    self.keyword("m")?;
                    Some(r)
                } else {
                    None
                };
                Constraint::NearUser { radius_m }
            } else if self.at_keyword("in") {
                self.advance();
                self.keyword("zone")?;
                let zone = match &self.peek().tok {
                    Tok::Str(s) => s.clone(),
                    _ => return Err(self.error("zone string")),
                };
                self.advance();
                Constraint::InZone { zone }
            } else {
                break;
            };
            let duplicate = constraints
                .iter()
                .any(|c| std::mem::discriminant(c) == std::mem::discriminant(&constraint));
            if duplicate {
                return Err(ParseError::at(
                    at,
                    format!("role `{name}` repeats a constraint kind"),
                ));
            }
            constraints.push(constraint);
        }
        Ok(RoleSpec {
            name,
            capability,
            constraints,
            span,
        })
    }

    fn qname(&mut self) -> Result<String, ParseError> {
        let (mut name, _) = self.ident("capability name")?;
        while self.peek().tok == Tok::Dot {
            self.advance();
            let (part, _) = self.ident("capability name segment")?;
            name.push('.');
            name.push_str(&part);
        }
        Ok(name)
    }

    fn handler(&mut self) -> Result<Handler, ParseError> {
        let span = self.keyword("on")?;
        let (trigger_name, _) = self.ident("trigger name")?;
        self.expect(&Tok::LParen, "`(`")?;
        let mut params = Vec::new();
        if self.peek().tok != Tok::RParen {
            params.push(self.ident("parameter name")?.0);
            while self.peek().tok == Tok::Comma {
                self.advance();
                params.push(self.ident("parameter name")?.0);
            }
        }
        self.expect(&Tok::RParen, "`,` or `)`")?;
        let trigger = if trigger_name == REQUEST_TRIGGER {
            Trigger::Request { params }
        } else {
            Trigger::Event {
                event_type: trigger_name,
                params,
            }
        };
        let guard = if self.at_keyword("when") {
            self.advance();
            Some(self.condition()?)
        } else {
            None
        };
        self.expect(&Tok::LBrace, "`when` or `{`")?;
        let mut body = Vec::new();
        while self.peek().tok != Tok::RBrace {
            body.push(self.statement()?);
        }
        self.advance();
        Ok(Handler {
            trigger,
            guard,
            body,
            span,
        })
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        let (role, span) = self.ident("statement or `}`")?;
        self.expect(&Tok::Dot, "`.`")?;
        let (verb, verb_span) = self.ident("verb")?;
        if !is_lower_ident(&verb) {
            return Err(ParseError::at(
                verb_span,
                format!("verb `{verb}` must match [a-z][a-z0-9_]*"),
            ));
        }
        let args = self.call_args(0)?;
        let subscription = if self.peek().tok == Tok::Arrow {
            self.advance();
            Some(self.ident("event name")?.0)
        } else {
            None
        };
        Ok(Statement {
            role,
            verb,
            args,
            subscription,
            span,
        })
    }

    fn call_args(&mut self, depth: usize) -> Result<Vec<Expr>, ParseError> {
        self.expect(&Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.peek().tok != Tok::RParen {
            args.push(self.expr(depth)?);
            while self.peek().tok == Tok::Comma {
                self.advance();
                args.push(self.expr(depth)?);
            }
        }
        self.expect(&Tok::RParen, "`,` or `)`")?;
        Ok(args)
    }

    fn condition(&mut self) -> Result<Condition, ParseError> {
        let span = self.peek().span;
        let lhs = self.expr(0)?;
        let op = match self.peek().tok {
            Tok::EqEq => RelOp::Eq,
            Tok::NotEq => RelOp::Ne,
            _ => return Err(self.error("`==` or `!=`")),
        };
        self.advance();
        let rhs = self.expr(0)?;
        Ok(Condition { lhs, op, rhs, span })
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth >= MAX_EXPR_DEPTH {
            return Err(ParseError::at(self.peek().span, "expression nested too deeply"));
        }
        match self.peek().tok.clone() {
            Tok::Str(value) => {
                self.advance();
                Ok(Expr::Str { value })
            }
            Tok::Num(value) => {
                self.advance();
                Ok(Expr::Num { value })
            }
            Tok::Ident(name) => {
                self.advance();
                if self.peek().tok == Tok::LParen {
                    let args = self.call_args(depth + 1)?;
                    Ok(Expr::Call {
                        function: name,
                        args,
                    })
                } else {
                    Ok(Expr::Var { name })
                }
            }
            _ => Err(self.error("expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_service() {
        let l = parse(
            "service s { role d requires capability visual.display on request(x) { d.show(x) } }",
        )
        .unwrap();
        assert_eq!(l.name, "s");
        assert_eq!(l.roles.len(), 1);
        assert_eq!(l.handlers.len(), 1);
        assert_eq!(l.handlers[0].body.len(), 1);
        assert_eq!(l.roles[0].capability, "visual.display");
        assert_eq!(l.handlers[0].trigger, Trigger::Request { params: vec!["x".into()] });
        assert_eq!(l.handlers[0].body[0].args, vec![Expr::var("x")]);
    }

    #[test]
    fn unexpected_eof() {
        let e = parse("service s {").unwrap_err();
        assert_eq!(e.line, 1);
        assert_eq!(e.column, 12);
        assert!(e.message.contains("unexpected end of input"), "{}", e.message);
    }

    #[test]
    fn constraints_guards_and_subscriptions() {
        let l = parse(
            r#"service s {
              role c requires capability vision.camera near user within 12.5 m in zone "Gate A"
              on request(dest) { c.monitor() -> movement }
              on movement(direction) when direction != lookup(dest) { c.ping() }
            }"#,
        )
        .unwrap();
        let role = &l.roles[0];
        assert_eq!(role.near_user(), Some(Some(12.5)));
        assert_eq!(role.in_zone(), Some("Gate A"));
        assert_eq!(l.handlers[0].body[0].subscription.as_deref(), Some("movement"));
        let guard = l.handlers[1].guard.as_ref().unwrap();
        assert_eq!(guard.op, RelOp::Ne);
        assert_eq!(guard.rhs, Expr::call("lookup", vec![Expr::var("dest")]));
        assert_eq!(guard.span.line, 4);
    }

    #[test]
    fn duplicate_constraint_is_rejected() {
        let e = parse("service s { role c requires capability a near user near user }").unwrap_err();
        assert!(e.message.contains("repeats"));
        assert_eq!(e.column, 52);
    }

    #[test]
    fn verb_must_be_lowercase() {
        let e = parse("service s { role d requires capability a on request() { d.Show() } }")
            .unwrap_err();
        assert!(e.message.contains("verb"));
    }

    #[test]
    fn roles_must_precede_handlers() {
        let e = parse(
            "service s { on request() { } role d requires capability a }",
        )
        .unwrap_err();
        assert!(e.message.contains("found `role`"), "{}", e.message);
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let src = format!(
            "service s {{ role d requires capability a on request() {{ d.f({}) }} }}",
            "f(".repeat(10_000)
        );
        assert!(parse(&src).unwrap_err().message.contains("nested"));
    }

    #[test]
    fn no_device_ids_in_grammar() {
        // a statement addresses a role, never a device, so a device-like
        // identifier in role position is just an undeclared role name
        let l = parse("service s { on request() { disp-1.show() } }");
        assert!(l.is_err());
    }
}
