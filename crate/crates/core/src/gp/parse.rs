//! Parser for kernel expression strings such as
//! `se(1, 0.5) + matern52(0.3, =2) * periodic(=1, 1.3, =1)`.
//!
//! Arguments are hyperparameter values in declaration order; a leading `=`
//! marks the parameter as fixed during MMLE. `*` binds tighter than `+`.

use super::kernel::{KernelExpr, Param};
use crate::error::{Error, Result};

pub fn parse_kernel(src: &str) -> Result<KernelExpr> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let expr = p.sum()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Config(format!("kernel expression: {msg} at column {}", self.pos + 1))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn sum(&mut self) -> Result<KernelExpr> {
        let mut terms = vec![self.product()?];
        while self.eat(b'+') {
            terms.push(self.product()?);
        }
        Ok(flatten(terms, true))
    }

    fn product(&mut self) -> Result<KernelExpr> {
        let mut factors = vec![self.atom()?];
        while self.eat(b'*') {
            factors.push(self.atom()?);
        }
        Ok(flatten(factors, false))
    }

    fn atom(&mut self) -> Result<KernelExpr> {
        if self.eat(b'(') {
            let e = self.sum()?;
            self.expect(b')')?;
            return Ok(e);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default().to_ascii_lowercase();
        if name.is_empty() {
            return Err(self.error("expected a kernel name"));
        }
        self.expect(b'(')?;
        let mut args = Vec::new();
        if !self.eat(b')') {
            loop {
                args.push(self.param()?);
                if self.eat(b')') {
                    break;
                }
                self.expect(b',')?;
            }
        }
        let want = match name.as_str() {
            "se" | "rbf" | "matern52" => 2,
            "periodic" | "rq" => 3,
            _ => return Err(self.error(&format!("unknown kernel '{name}'"))),
        };
        if args.len() != want {
            return Err(self.error(&format!("{name} takes {want} arguments, got {}", args.len())));
        }
        Ok(match name.as_str() {
            "se" | "rbf" => KernelExpr::SquaredExponential { amplitude: args[0], lengthscale: args[1] },
            "matern52" => KernelExpr::Matern52 { amplitude: args[0], lengthscale: args[1] },
            "periodic" => KernelExpr::Periodic { amplitude: args[0], lengthscale: args[1], period: args[2] },
            _ => KernelExpr::RationalQuadratic { amplitude: args[0], lengthscale: args[1], shape: args[2] },
        })
    }

    fn param(&mut self) -> Result<Param> {
        let fixed = self.eat(b'=');
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || b".eE+-".contains(&self.src[self.pos]))
        {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
        let value: f64 = text.parse().map_err(|_| self.error(&format!("bad number '{text}'")))?;
        Ok(Param { value, fixed })
    }
}

fn flatten(mut items: Vec<KernelExpr>, is_sum: bool) -> KernelExpr {
    if items.len() == 1 {
        return items.pop().expect("one item");
    }
    let mut out = Vec::new();
    for it in items {
        match (it, is_sum) {
            (KernelExpr::Sum { terms }, true) => out.extend(terms),
            (KernelExpr::Product { factors }, false) => out.extend(factors),
            (other, _) => out.push(other),
        }
    }
    if is_sum {
        KernelExpr::Sum { terms: out }
    } else {
        KernelExpr::Product { factors: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_heart_rate_form() {
        let k = parse_kernel("matern52(1, 2) + se(0.5, 3)").unwrap();
        assert_eq!(k, KernelExpr::heart_rate(1.0, 2.0, 0.5, 3.0));
    }

    #[test]
    fn precedence_and_fixed_markers() {
        let k = parse_kernel("se(1,2) + se(3, 4) * periodic(=1, 5, =1) + rq(6,7,8) + se(9,10)").unwrap();
        assert_eq!(k, KernelExpr::mauna_loa([1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]));
    }

    #[test]
    fn display_round_trips() {
        let k = KernelExpr::mauna_loa([1.5, 2., 3., 4e-3, 5., 6., 7., 8., 9., 10.]);
        assert_eq!(parse_kernel(&k.to_string()).unwrap(), k);
    }

    #[test]
    fn reports_errors() {
        assert!(parse_kernel("se(1)").is_err());
        assert!(parse_kernel("foo(1, 2)").is_err());
        assert!(parse_kernel("se(1, 2) +").is_err());
        assert!(parse_kernel("se(1, x)").is_err());
    }
}
