use serde::{Deserialize, Serialize};

use super::{ExprError, Op};

/// Numeric guards shared by the protected evaluator and the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtectionConfig {
    /// Outputs of mul, div, exp and square are clamped to this magnitude.
    pub out_threshold: f64,
    /// Minimum magnitude of a division denominator.
    pub div_eps: f64,
    /// Offset added to `|a|` before taking a logarithm.
    pub log_eps: f64,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self { out_threshold: 1e4, div_eps: 1e-6, log_eps: 1e-9 }
    }
}

impl ProtectionConfig {
    pub fn validate(&self) -> Result<(), ExprError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.out_threshold) {
            return Err(ExprError::Protection(format!("out_threshold must be > 0, got {}", self.out_threshold)));
        }
        if !ok(self.div_eps) {
            return Err(ExprError::Protection(format!("div_eps must be > 0, got {}", self.div_eps)));
        }
        if !ok(self.log_eps) {
            return Err(ExprError::Protection(format!("log_eps must be > 0, got {}", self.log_eps)));
        }
        Ok(())
    }
}

/// Result of one protected operator application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Protected {
    /// Operator output before the magnitude clamp (may be infinite for exp).
    pub pre: f64,
    pub post: f64,
    pub clamped: bool,
}

/// `v <- v * Th / |v|` when `|v| > Th`. Infinite values map to `±Th`.
#[inline]
pub fn clamp_output(v: f64, th: f64) -> (f64, bool) {
    if v.abs() > th {
        (th.copysign(v), true)
    } else {
        (v, false)
    }
}

/// Denominator replaced by `sign(q) * max(|q|, eps)`, with `sign(0) = +1`.
#[inline]
pub fn guard_denominator(q: f64, eps: f64) -> f64 {
    let m = q.abs().max(eps);
    if q.is_sign_negative() && q != 0.0 {
        -m
    } else {
        m
    }
}

#[inline]
pub fn guard_log_arg(a: f64, eps: f64) -> f64 {
    a.abs() + eps
}

fn clamps(op: Op) -> bool {
    matches!(op, Op::Mul | Op::Div | Op::Exp | Op::Square)
}

/// Applies `op` with protection. `b` is ignored for unary operators.
#[inline]
pub fn apply_protected(op: Op, a: f64, b: f64, p: &ProtectionConfig) -> Protected {
    let pre = match op {
        Op::Div => a / guard_denominator(b, p.div_eps),
        Op::Log => guard_log_arg(a, p.log_eps).ln(),
        _ => op.apply(a, b),
    };
    if clamps(op) {
        let (post, clamped) = clamp_output(pre, p.out_threshold);
        Protected { pre, post, clamped }
    } else {
        Protected { pre, post: pre, clamped: false }
    }
}

/// Local partials of the protected operator. Clamps are straight-through;
/// exp uses its clamped output as its derivative so the signal stays finite.
#[inline]
pub(crate) fn protected_partials(op: Op, a: f64, b: f64, out: f64, p: &ProtectionConfig) -> (f64, f64) {
    match op {
        Op::Div => {
            let q = guard_denominator(b, p.div_eps);
            let dq = if b.abs() >= p.div_eps { 1.0 } else { 0.0 };
            (1.0 / q, -a / (q * q) * dq)
        }
        Op::Log => {
            let sign = if a < 0.0 { -1.0 } else { 1.0 };
            (sign / guard_log_arg(a, p.log_eps), 0.0)
        }
        Op::Exp => (out, 0.0),
        _ => op.partials(a, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_rescales_to_threshold() {
        assert_eq!(clamp_output(2e4, 1e4), (1e4, true));
        assert_eq!(clamp_output(-2e4, 1e4), (-1e4, true));
        assert_eq!(clamp_output(f64::INFINITY, 1e4), (1e4, true));
        assert_eq!(clamp_output(5.0, 1e4), (5.0, false));
    }

    #[test]
    fn unguarded_ops_pass_through() {
        let p = ProtectionConfig::default();
        let r = apply_protected(Op::Add, 1e5, 1e5, &p);
        assert_eq!(r.post, 2e5);
        assert!(!r.clamped);
        let s = apply_protected(Op::Square, 1e3, 0.0, &p);
        assert!(s.clamped);
        assert_eq!(s.post, 1e4);
    }

    #[test]
    fn validate_rejects_non_positive() {
        let bad = ProtectionConfig { div_eps: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(ProtectionConfig::default().validate().is_ok());
    }
}
