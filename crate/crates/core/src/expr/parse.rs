//! Text grammar for expressions.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' INT)*
//! primary := NUMBER | 'x' INT | 'c' INT | FUNC '(' expr ')' | '(' expr ')'
//! FUNC    := sin | cos | exp | log | square | id
//! ```
//!
//! Variables are 1-based (`x1` is `Var(0)`), as are coefficient slots (`c1`
//! is `Coeff(0)`). `^2` maps to the square operator; larger integer powers
//! are shorthand for products of squares and multiplications.

use super::{Expr, ExprError, Op};

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0, end: text.len() };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(syntax(t.pos, format!("unexpected {}", t.kind.describe())));
    }
    Ok(e)
}

/// Renders `e` in the grammar above. `parse(format(e))` evaluates
/// identically to `e`.
pub fn format(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(e, 0, &mut out);
    out
}

/// `base^n` built from square and mul.
pub(crate) fn pow_expr(base: &Expr, n: u32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => base.clone(),
        n if n % 2 == 0 => Expr::square(pow_expr(base, n / 2)),
        n => Expr::mul(pow_expr(base, n - 1), base.clone()),
    }
}

fn syntax(pos: usize, msg: impl Into<String>) -> ExprError {
    ExprError::Syntax { pos, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Num(f64),
    Int(u64, f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl Kind {
    fn describe(&self) -> String {
        match self {
            Kind::Num(v) | Kind::Int(_, v) => format!("number {v}"),
            Kind::Ident(s) => format!("identifier '{s}'"),
            Kind::Plus => "'+'".into(),
            Kind::Minus => "'-'".into(),
            Kind::Star => "'*'".into(),
            Kind::Slash => "'/'".into(),
            Kind::Caret => "'^'".into(),
            Kind::LParen => "'('".into(),
            Kind::RParen => "')'".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Kind::Plus,
            b'-' => Kind::Minus,
            b'*' => Kind::Star,
            b'/' => Kind::Slash,
            b'^' => Kind::Caret,
            b'(' => Kind::LParen,
            b')' => Kind::RParen,
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                let mut integral = true;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'.' {
                    integral = false;
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        integral = false;
                        j = k;
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let s = &text[i..j];
                let v: f64 = s.parse().map_err(|_| syntax(start, format!("malformed number '{s}'")))?;
                i = j;
                let kind = match (integral, s.parse::<u64>()) {
                    (true, Ok(n)) => Kind::Int(n, v),
                    _ => Kind::Num(v),
                };
                out.push(Token { kind, pos: start });
                continue;
            }
            c if c.is_ascii_alphabetic() => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_alphanumeric() {
                    j += 1;
                }
                out.push(Token { kind: Kind::Ident(text[i..j].to_string()), pos: start });
                i = j;
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(syntax(start, format!("unexpected character '{ch}'")));
            }
        };
        out.push(Token { kind, pos: start });
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_kind(&self) -> Option<&Kind> {
        self.peek().map(|t| &t.kind)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, kind: Kind) -> Result<(), ExprError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(syntax(t.pos, format!("expected {}, found {}", kind.describe(), t.kind.describe()))),
            None => Err(syntax(self.end, format!("expected {}, found end of input", kind.describe()))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek_kind() {
                Some(Kind::Plus) => Op::Add,
                Some(Kind::Minus) => Op::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek_kind() {
                Some(Kind::Star) => Op::Mul,
                Some(Kind::Slash) => Op::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek_kind() != Some(&Kind::Minus) {
            return self.power();
        }
        self.pos += 1;
        // "-3.5" is a literal unless a power follows it.
        if let Some(Kind::Num(v) | Kind::Int(_, v)) = self.peek_kind().cloned() {
            let next_is_caret = matches!(self.tokens.get(self.pos + 1).map(|t| &t.kind), Some(Kind::Caret));
            if !next_is_caret {
                self.pos += 1;
                return Ok(Expr::Const(-v));
            }
        }
        let inner = self.unary()?;
        Ok(Expr::mul(Expr::Const(-1.0), inner))
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.primary()?;
        while self.peek_kind() == Some(&Kind::Caret) {
            self.pos += 1;
            let at = self.here();
            match self.bump().map(|t| t.kind) {
                Some(Kind::Int(n, _)) if (1..=64).contains(&n) => base = pow_expr(&base, n as u32),
                _ => return Err(syntax(at, "exponent must be an integer between 1 and 64")),
            }
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let at = self.here();
        let tok = self.bump().ok_or_else(|| syntax(at, "unexpected end of input"))?;
        match tok.kind {
            Kind::Num(v) | Kind::Int(_, v) => Ok(Expr::Const(v)),
            Kind::LParen => {
                let e = self.expr()?;
                self.expect(Kind::RParen)?;
                Ok(e)
            }
            Kind::Ident(name) => {
                if let Some(op) = function_op(&name) {
                    self.expect(Kind::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Kind::RParen)?;
                    return Ok(Expr::unary(op, arg));
                }
                let indexed = |prefix: char| -> Option<usize> {
                    let rest = name.strip_prefix(prefix)?;
                    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                        return None;
                    }
                    rest.parse::<usize>().ok().filter(|&n| n >= 1).map(|n| n - 1)
                };
                if let Some(i) = indexed('x') {
                    Ok(Expr::Var(i))
                } else if let Some(k) = indexed('c') {
                    Ok(Expr::Coeff(k))
                } else {
                    Err(syntax(tok.pos, format!("unknown identifier '{name}'")))
                }
            }
            other => Err(syntax(tok.pos, format!("unexpected {}", other.describe()))),
        }
    }
}

fn function_op(name: &str) -> Option<Op> {
    Some(match name {
        "sin" => Op::Sin,
        "cos" => Op::Cos,
        "exp" => Op::Exp,
        "log" => Op::Log,
        "square" => Op::Square,
        "id" => Op::Id,
        _ => return None,
    })
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(Op::Add | Op::Sub, ..) => 1,
        Expr::Binary(..) => 2,
        Expr::Unary(Op::Square, _) => 4,
        Expr::Const(c) if c.is_sign_negative() || !c.is_finite() => 0,
        _ => 5,
    }
}

fn write_number(v: f64, out: &mut String) {
    if v.is_nan() {
        out.push_str("(0/0)");
    } else if v.is_infinite() {
        out.push_str(if v > 0.0 { "(1/0)" } else { "(-1/0)" });
    } else if v == 0.0 || (1e-5..1e16).contains(&v.abs()) {
        out.push_str(&format!("{v}"));
    } else {
        out.push_str(&format!("{v:e}"));
    }
}

fn write_expr(e: &Expr, min_prec: u8, out: &mut String) {
    let wrap = precedence(e) < min_prec || (min_prec > 0 && precedence(e) == 0);
    if wrap {
        out.push('(');
    }
    match e {
        Expr::Const(c) => {
            if c.is_sign_negative() && c.is_finite() {
                out.push('-');
                write_number(-c, out);
            } else {
                write_number(*c, out);
            }
        }
        Expr::Coeff(k) => out.push_str(&format!("c{}", k + 1)),
        Expr::Var(i) => out.push_str(&format!("x{}", i + 1)),
        Expr::Unary(Op::Square, a) => {
            write_expr(a, 4, out);
            out.push_str("^2");
        }
        Expr::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            write_expr(a, 0, out);
            out.push(')');
        }
        Expr::Binary(op, a, b) => {
            let (sym, lp, rp) = match op {
                Op::Add => (" + ", 1, 2),
                Op::Sub => (" - ", 1, 2),
                Op::Mul => ("*", 2, 3),
                _ => ("/", 2, 3),
            };
            write_expr(a, lp, out);
            out.push_str(sym);
            write_expr(b, rp, out);
        }
    }
    if wrap {
        out.push(')');
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_sum_of_squares() {
        let e = Expr::add(Expr::square(Expr::Var(0)), Expr::square(Expr::Var(1)));
        assert_eq!(format(&e), "x1^2 + x2^2");
    }

    #[test]
    fn parses_koza_expression() {
        let e = parse("sin(x1^2)*cos(x1) - 1").unwrap();
        assert_eq!(e.depth(), 4);
        let v = e.eval(&[0.7], &[]).unwrap();
        assert!((v - ((0.49f64).sin() * 0.7f64.cos() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse("1 - 2 - 3").unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), -4.0);
        let e = parse("8/2/2").unwrap();
        assert_eq!(e.eval(&[], &[]).unwrap(), 2.0);
        let e = parse("-x1^2").unwrap();
        assert_eq!(e.eval(&[3.0], &[]).unwrap(), -9.0);
        let e = parse("2*x1^3").unwrap();
        assert_eq!(e.eval(&[2.0], &[]).unwrap(), 16.0);
        let e = parse("x1 - (x2 - 1)").unwrap();
        assert_eq!(format(&e), "x1 - (x2 - 1)");
    }

    #[test]
    fn negative_constants_roundtrip() {
        let e = Expr::sub(Expr::Var(0), Expr::Const(-2.5));
        let s = format(&e);
        assert_eq!(s, "x1 - (-2.5)");
        assert_eq!(parse(&s).unwrap(), e);
        let tiny = Expr::mul(Expr::Const(1.5e-9), Expr::Var(0));
        assert_eq!(parse(&format(&tiny)).unwrap(), tiny);
    }

    #[test]
    fn coefficient_slots() {
        let e = parse("c1*x1 + c2*sin(c3*x1)").unwrap();
        assert_eq!(e.coeff_count(), 3);
        assert_eq!(format(&e), "c1*x1 + c2*sin(c3*x1)");
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse("x1 + * 2") {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos, 5),
            other => panic!("unexpected {other:?}"),
        }
        match parse("sin(x1") {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos, 6),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("x0").is_err());
        assert!(parse("foo(x1)").is_err());
        assert!(parse("x1^0.5").is_err());
        assert!(parse("").is_err());
    }
}
