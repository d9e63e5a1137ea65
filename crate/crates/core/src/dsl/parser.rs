//! Recursive-descent parser for `WHEN condition DO statements`.

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::SyntaxError;
use crate::value::Value;

/// Parenthesis nesting limit, so hostile input cannot exhaust the stack.
const MAX_NESTING: usize = 64;

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    nesting: usize,
}

/// Parse rule source into an untyped program.
pub fn parse_program(src: &str) -> Result<Program, SyntaxError> {
    let mut p = Parser { toks: tokenize(src)?, pos: 0, nesting: 0 };
    let prog = p.program()?;
    p.expect(&Tok::Eof)?;
    Ok(prog)
}

/// Parse a standalone condition (query filters).
pub fn parse_condition(src: &str) -> Result<Condition, SyntaxError> {
    let mut p = Parser { toks: tokenize(src)?, pos: 0, nesting: 0 };
    let c = p.condition()?;
    p.expect(&Tok::Eof)?;
    Ok(c)
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, msg: impl Into<String>) -> SyntaxError {
        let t = &self.toks[self.pos];
        SyntaxError { line: t.line, col: t.col, message: msg.into() }
    }

    fn unexpected(&self, wanted: &str) -> SyntaxError {
        self.error(format!("expected {wanted}, found {}", self.peek().describe()))
    }

    fn expect(&mut self, t: &Tok) -> Result<(), SyntaxError> {
        if self.peek() == t {
            self.bump();
            Ok(())
        } else {
            let wanted = match t {
                Tok::Eof => "end of input".to_string(),
                other => other.describe(),
            };
            Err(self.unexpected(&wanted))
        }
    }

    fn ident(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn program(&mut self) -> Result<Program, SyntaxError> {
        self.expect(&Tok::When)?;
        let condition = self.condition()?;
        self.expect(&Tok::Do)?;
        let mut stmts = vec![self.stmt()?];
        loop {
            if *self.peek() == Tok::Semi {
                self.bump();
            }
            match self.peek() {
                Tok::Set | Tok::SetOn | Tok::Insert => stmts.push(self.stmt()?),
                _ => break,
            }
        }
        Ok(Program { condition, script: Script { stmts } })
    }

    fn condition(&mut self) -> Result<Condition, SyntaxError> {
        let mut lhs = self.conjunction()?;
        while *self.peek() == Tok::Or {
            self.bump();
            let rhs = self.conjunction()?;
            lhs = Condition::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> Result<Condition, SyntaxError> {
        let mut lhs = self.atom()?;
        while *self.peek() == Tok::And {
            self.bump();
            let rhs = self.atom()?;
            lhs = Condition::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Condition, SyntaxError> {
        match self.peek().clone() {
            Tok::LParen => {
                if self.nesting >= MAX_NESTING {
                    return Err(self.error("conditions nested too deeply"));
                }
                self.bump();
                self.nesting += 1;
                let c = self.condition()?;
                self.nesting -= 1;
                self.expect(&Tok::RParen)?;
                Ok(c)
            }
            Tok::True => {
                self.bump();
                Ok(Condition::always())
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen && (name == "changes" || name == "changes_to") {
                    self.bump();
                    let field = self.ident()?;
                    let clause = if name == "changes" {
                        Clause::Changes(field)
                    } else {
                        self.expect(&Tok::Comma)?;
                        Clause::ChangesTo(field, self.literal()?)
                    };
                    self.expect(&Tok::RParen)?;
                    return Ok(Condition::Clause(clause));
                }
                if matches!(self.peek(), Tok::Ident(w) if w == "in") {
                    self.bump();
                    self.expect(&Tok::LBracket)?;
                    let mut list = Vec::new();
                    if *self.peek() != Tok::RBracket {
                        list.push(self.literal()?);
                        while *self.peek() == Tok::Comma {
                            self.bump();
                            list.push(self.literal()?);
                        }
                    }
                    self.expect(&Tok::RBracket)?;
                    return Ok(Condition::Clause(Clause::In { field: name, list }));
                }
                let op = match self.peek() {
                    Tok::EqEq => CmpOp::Eq,
                    Tok::Ne => CmpOp::Ne,
                    Tok::Lt => CmpOp::Lt,
                    Tok::Le => CmpOp::Le,
                    Tok::Gt => CmpOp::Gt,
                    Tok::Ge => CmpOp::Ge,
                    _ => return Err(self.unexpected("comparison operator")),
                };
                self.bump();
                let rhs = if self.at_cur() {
                    Operand::Cur(self.cur_ref()?)
                } else {
                    Operand::Lit(self.literal()?)
                };
                Ok(Condition::Clause(Clause::Cmp { field: name, op, rhs }))
            }
            _ => Err(self.unexpected("condition")),
        }
    }

    fn at_cur(&self) -> bool {
        matches!(self.peek(), Tok::Ident(w) if w == "cur")
    }

    fn cur_ref(&mut self) -> Result<String, SyntaxError> {
        self.bump();
        self.expect(&Tok::Dot)?;
        self.ident()
    }

    fn literal(&mut self) -> Result<Value, SyntaxError> {
        let v = match self.peek().clone() {
            Tok::Int(i) => Value::Int(i),
            Tok::Str(s) => Value::Text(s),
            Tok::Ident(w) if w == "true" => Value::Bool(true),
            Tok::Ident(w) if w == "false" => Value::Bool(false),
            Tok::Ident(w) if w == "null" => Value::Null,
            _ => return Err(self.unexpected("literal")),
        };
        self.bump();
        Ok(v)
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        if self.at_cur() {
            let f = self.cur_ref()?;
            if *self.peek() == Tok::Plus {
                self.bump();
                return match self.peek().clone() {
                    Tok::Int(n) => {
                        self.bump();
                        Ok(Expr::CurPlus(f, n))
                    }
                    _ => Err(self.unexpected("integer literal")),
                };
            }
            return Ok(Expr::Cur(f));
        }
        Ok(Expr::Lit(self.literal()?))
    }

    fn assign(&mut self) -> Result<Assign, SyntaxError> {
        let field = self.ident()?;
        self.expect(&Tok::Assign)?;
        Ok(Assign { field, expr: self.expr()? })
    }

    fn assign_list(&mut self, end: Option<&Tok>) -> Result<Vec<Assign>, SyntaxError> {
        let mut out = Vec::new();
        if end.is_some_and(|e| self.peek() == e) {
            return Ok(out);
        }
        out.push(self.assign()?);
        while *self.peek() == Tok::Comma {
            self.bump();
            out.push(self.assign()?);
        }
        Ok(out)
    }

    fn stmt(&mut self) -> Result<Stmt, SyntaxError> {
        match self.peek() {
            Tok::Set => {
                self.bump();
                Ok(Stmt::Set(self.assign()?))
            }
            Tok::SetOn => {
                self.bump();
                let table = self.ident()?;
                self.expect(&Tok::Where)?;
                let filter = self.condition()?;
                self.expect(&Tok::Colon)?;
                let assigns = self.assign_list(None)?;
                Ok(Stmt::SetOn { table, filter, assigns })
            }
            Tok::Insert => {
                self.bump();
                let table = self.ident()?;
                self.expect(&Tok::LBrace)?;
                let assigns = self.assign_list(Some(&Tok::RBrace))?;
                self.expect(&Tok::RBrace)?;
                Ok(Stmt::Insert { table, assigns })
            }
            _ => Err(self.unexpected("statement (SET, SET_ON or INSERT)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmp(f: &str, v: i64) -> Condition {
        Condition::Clause(Clause::Cmp { field: f.into(), op: CmpOp::Eq, rhs: Operand::Lit(Value::Int(v)) })
    }

    #[test]
    fn minimal_program() {
        let p = parse_program("WHEN u_priority == 1 DO SET u_state = 2").unwrap();
        assert_eq!(p.condition, cmp("u_priority", 1));
        assert_eq!(p.script.stmts, vec![Stmt::Set(Assign::lit("u_state", 2i64))]);
    }

    #[test]
    fn changes_to_with_insert() {
        let p = parse_program("WHEN changes_to(u_match_status, 3) DO INSERT u_approval { u_ref = cur.id }").unwrap();
        assert_eq!(p.condition, Condition::Clause(Clause::ChangesTo("u_match_status".into(), Value::Int(3))));
        assert_eq!(
            p.script.stmts,
            vec![Stmt::Insert { table: "u_approval".into(), assigns: vec![Assign::new("u_ref", Expr::Cur("id".into()))] }]
        );
    }

    #[test]
    fn missing_operand_reports_position() {
        let e = parse_program("WHEN u_x == DO SET u_y = 1").unwrap_err();
        assert_eq!((e.line, e.col), (1, 13));
        assert!(e.message.contains("literal"));
    }

    #[test]
    fn and_binds_tighter_and_is_left_associative() {
        let p = parse_program("WHEN u_a == 1 AND u_b == 2 OR u_c == 3 AND u_d == 4 AND u_e == 5 DO SET u_a = 1").unwrap();
        let expected = Condition::or(
            Condition::and(cmp("u_a", 1), cmp("u_b", 2)),
            Condition::and(Condition::and(cmp("u_c", 3), cmp("u_d", 4)), cmp("u_e", 5)),
        );
        assert_eq!(p.condition, expected);
    }

    #[test]
    fn full_statement_forms() {
        let src = r#"WHEN TRUE DO SET_ON u_line WHERE u_po == cur.id AND u_state in [1, 2]: u_status = 4, u_n = cur.u_n + -1;
            INSERT u_log {}
            SET u_flag = true"#;
        let p = parse_program(src).unwrap();
        assert_eq!(p.script.stmts.len(), 3);
        match &p.script.stmts[0] {
            Stmt::SetOn { table, assigns, .. } => {
                assert_eq!(table, "u_line");
                assert_eq!(assigns[1].expr, Expr::CurPlus("u_n".into(), -1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deep_nesting_rejected_cleanly() {
        let src = format!("WHEN {}TRUE{} DO SET u_a = 1", "(".repeat(500), ")".repeat(500));
        assert!(parse_program(&src).is_err());
        let ok = format!("WHEN {}TRUE{} DO SET u_a = 1", "(".repeat(10), ")".repeat(10));
        assert!(parse_program(&ok).is_ok());
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(parse_program("WHEN TRUE DO SET u_a = 1 )").is_err());
        assert!(parse_program("").is_err());
        assert!(parse_program("WHEN TRUE DO").is_err());
    }
}
