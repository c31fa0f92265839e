//! Tree-walking evaluation, generic over the scalar type.
//!
//! The same walk serves plain `f64` evaluation and dual-number runs of any
//! nesting depth; `eval_derivs` wraps it to produce gradients and Hessian
//! blocks with respect to a caller-chosen variable list.

use super::dual::{Dual, Real};
use super::{BinOp, Expr, Func};
use crate::error::{Error, Result};

/// Variable lookup abstraction so the evaluator can run over either owned
/// pair lists or split name/value slices without copies.
pub trait Lookup<T> {
    fn get_var(&self, name: &str) -> Option<T>;
}

/// Name -> value environment used by the generic evaluator.
///
/// Lookups are linear scans: environments here hold a dozen-odd entries and
/// short keys, where a scan beats hashing.
pub struct Env<'a, T> {
    entries: &'a [(String, T)],
}

impl<'a, T: Copy> Env<'a, T> {
    pub fn new(entries: &'a [(String, T)]) -> Self {
        Env { entries }
    }
}

impl<T: Copy> Lookup<T> for Env<'_, T> {
    fn get_var(&self, name: &str) -> Option<T> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Environment over parallel name/value slices; the name table is built
/// once per system and reused across evaluations.
pub struct SplitEnv<'a, T> {
    pub names: &'a [String],
    pub values: &'a [T],
}

impl<T: Copy> Lookup<T> for SplitEnv<'_, T> {
    fn get_var(&self, name: &str) -> Option<T> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

/// Scalar bindings for the public `f64` entry points.
///
/// Duplicate names are rejected at insertion; looking up an unbound name is
/// an error, never a default.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    entries: Vec<(String, f64)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateBinding { name: name.into() });
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnboundVariable { name: name.into() })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }
}

impl<const N: usize> From<[(&str, f64); N]> for Bindings {
    fn from(pairs: [(&str, f64); N]) -> Self {
        let mut b = Bindings::new();
        for (name, value) in pairs {
            b.set(name, value).expect("duplicate binding in literal");
        }
        b
    }
}

fn domain_error(node: &Expr, reason: &str) -> Error {
    Error::Domain {
        expr: node.to_string(),
        reason: reason.into(),
    }
}

/// Evaluate over any `Real` scalar. Domain checks inspect the real part
/// only; IEEE non-finite results from `/` are propagated, not trapped.
pub fn eval_generic<T: Real, L: Lookup<T>>(expr: &Expr, env: &L) -> Result<T> {
    match expr {
        Expr::Num(v) => Ok(T::from_f64(*v)),
        Expr::Var(name) => env
            .get_var(name)
            .ok_or_else(|| Error::UnboundVariable { name: name.clone() }),
        Expr::Neg(inner) => Ok(-eval_generic(inner, env)?),
        Expr::Bin(op, lhs, rhs) => {
            let a = eval_generic(lhs, env)?;
            let b = eval_generic(rhs, env)?;
            match op {
                BinOp::Add => Ok(a + b),
                BinOp::Sub => Ok(a - b),
                BinOp::Mul => Ok(a * b),
                BinOp::Div => Ok(a / b),
                BinOp::Pow => pow(expr, a, b),
            }
        }
        Expr::Call(func, arg) => {
            let x = eval_generic(arg, env)?;
            let v = x.value();
            match func {
                Func::Sin => Ok(x.sin()),
                Func::Cos => Ok(x.cos()),
                Func::Tan => Ok(x.tan()),
                Func::Sqrt => {
                    if v < 0.0 {
                        Err(domain_error(expr, "sqrt of negative value"))
                    } else {
                        Ok(x.sqrt())
                    }
                }
                Func::Exp => Ok(x.exp()),
                Func::Log => {
                    if v <= 0.0 {
                        Err(domain_error(expr, "log of non-positive value"))
                    } else {
                        Ok(x.ln())
                    }
                }
                Func::Abs => Ok(x.abs()),
            }
        }
    }
}

/// `a^b`. A constant integer exponent takes the exact `powi` route (valid
/// for negative and zero bases); anything else requires a positive base so
/// that `exp(b ln a)` stays real.
fn pow<T: Real>(node: &Expr, a: T, b: T) -> Result<T> {
    let bv = b.value();
    if b.is_constant() && bv.fract() == 0.0 && bv.abs() <= 2.0_f64.powi(31) {
        return Ok(a.powi(bv as i64));
    }
    if a.value() <= 0.0 {
        return Err(domain_error(
            node,
            "power of non-positive base with non-integer exponent",
        ));
    }
    Ok((b * a.ln()).exp())
}

/// Evaluate to a plain double.
pub fn eval(expr: &Expr, bindings: &Bindings) -> Result<f64> {
    eval_generic(expr, &Env::new(bindings.entries()))
}

/// Value, gradient, and (for `order == 2`) Hessian block from `eval_derivs`.
#[derive(Debug, Clone)]
pub struct Derivs {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Symmetric `wrt x wrt` second-derivative block, row-major.
    pub hessian: Option<Vec<Vec<f64>>>,
}

/// Exact forward-mode derivatives of `expr` with respect to `wrt`.
///
/// Order 1 seeds one dual per variable; order 2 additionally runs nested
/// duals over every unordered variable pair. No truncation error beyond
/// floating point.
pub fn eval_derivs(expr: &Expr, bindings: &Bindings, wrt: &[&str], order: u8) -> Result<Derivs> {
    assert!(order == 1 || order == 2, "order must be 1 or 2");
    for name in wrt {
        bindings.get(name)?;
    }
    let k = wrt.len();
    let mut value = None;
    let mut gradient = vec![0.0; k];

    let base: Vec<(String, f64)> = bindings.entries().to_vec();

    if order == 1 {
        if k == 0 {
            value = Some(eval(expr, bindings)?);
        }
        for (i, seed_name) in wrt.iter().enumerate() {
            let env: Vec<(String, Dual<f64>)> = base
                .iter()
                .map(|(n, v)| {
                    let d = if n == seed_name {
                        Dual::seeded(*v)
                    } else {
                        Dual::constant(*v)
                    };
                    (n.clone(), d)
                })
                .collect();
            let out = eval_generic(expr, &Env::new(&env))?;
            value = Some(out.re);
            gradient[i] = out.du;
        }
        return Ok(Derivs {
            value: value.expect("evaluated"),
            gradient,
            hessian: None,
        });
    }

    let mut hessian = vec![vec![0.0; k]; k];
    if k == 0 {
        value = Some(eval(expr, bindings)?);
    }
    for i in 0..k {
        for j in i..k {
            let env: Vec<(String, Dual<Dual<f64>>)> = base
                .iter()
                .map(|(n, v)| {
                    let outer = n == wrt[i];
                    let inner = n == wrt[j];
                    let re = if inner {
                        Dual::seeded(*v)
                    } else {
                        Dual::constant(*v)
                    };
                    let du = if outer {
                        Dual::constant(1.0)
                    } else {
                        Dual::constant(0.0)
                    };
                    (n.clone(), Dual::new(re, du))
                })
                .collect();
            let out = eval_generic(expr, &Env::new(&env))?;
            value = Some(out.re.re);
            gradient[j] = out.re.du;
            gradient[i] = out.du.re;
            hessian[i][j] = out.du.du;
            hessian[j][i] = out.du.du;
        }
    }
    Ok(Derivs {
        value: value.expect("evaluated"),
        gradient,
        hessian: Some(hessian),
    })
}

/// Value and gradient with respect to the table entries at positions
/// `wrt`, over a generic scalar. The name table is shared; only values
/// are copied into dual space.
pub fn grad_indexed<T: Real>(
    expr: &Expr,
    names: &[String],
    values: &[T],
    wrt: &[usize],
) -> Result<(T, Vec<T>)> {
    if wrt.is_empty() {
        let v = eval_generic(expr, &SplitEnv { names, values })?;
        return Ok((v, Vec::new()));
    }
    let mut dual_vals: Vec<Dual<T>> = values.iter().map(|v| Dual::constant(*v)).collect();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); wrt.len()];
    for (k, &i) in wrt.iter().enumerate() {
        dual_vals[i].du = T::one();
        let out = eval_generic(
            expr,
            &SplitEnv {
                names,
                values: &dual_vals,
            },
        )?;
        dual_vals[i].du = T::zero();
        value = out.re;
        grad[k] = out.du;
    }
    Ok((value, grad))
}

/// Value, gradient and symmetric second-derivative block over positions
/// `wrt`, via nested duals (one pass per unordered pair).
pub fn hess_indexed<T: Real>(
    expr: &Expr,
    names: &[String],
    values: &[T],
    wrt: &[usize],
) -> Result<(T, Vec<T>, Vec<Vec<T>>)> {
    let k = wrt.len();
    if k == 0 {
        let v = eval_generic(expr, &SplitEnv { names, values })?;
        return Ok((v, Vec::new(), Vec::new()));
    }
    let mut dual_vals: Vec<Dual<Dual<T>>> = values
        .iter()
        .map(|v| Dual::constant(Dual::constant(*v)))
        .collect();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); k];
    let mut hess = vec![vec![T::zero(); k]; k];
    for a in 0..k {
        for b in a..k {
            let (i, j) = (wrt[a], wrt[b]);
            dual_vals[i].re.du = T::one();
            dual_vals[j].du.re = T::one();
            let out = eval_generic(
                expr,
                &SplitEnv {
                    names,
                    values: &dual_vals,
                },
            )?;
            dual_vals[i].re.du = T::zero();
            dual_vals[j].du.re = T::zero();
            value = out.re.re;
            grad[a] = out.re.du;
            grad[b] = out.du.re;
            hess[a][b] = out.du.du;
            hess[b][a] = out.du.du;
        }
    }
    Ok((value, grad, hess))
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn basic_values() {
        let b = Bindings::from([("x", 3.0)]);
        assert_eq!(eval(&parse("x^2").unwrap(), &b).unwrap(), 9.0);
        assert_eq!(
            eval(&parse("pi").unwrap(), &Bindings::new()).unwrap(),
            std::f64::consts::PI
        );
    }

    #[test]
    fn domain_errors_name_the_subexpression() {
        let b = Bindings::from([("x", -1.0)]);
        let err = eval(&parse("1 + sqrt(x)").unwrap(), &b).unwrap_err();
        match err {
            Error::Domain { expr, .. } => assert_eq!(expr, "sqrt(x)"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(eval(&parse("log(0)").unwrap(), &Bindings::new()).is_err());
        // non-integer exponent of a negative base
        assert!(eval(&parse("x^0.5").unwrap(), &b).is_err());
        // integer exponent of a negative base is fine
        assert_eq!(eval(&parse("x^3").unwrap(), &b).unwrap(), -1.0);
    }

    #[test]
    fn unbound_variable_is_an_error() {
        let err = eval(&parse("x + y").unwrap(), &Bindings::from([("x", 1.0)])).unwrap_err();
        match err {
            Error::UnboundVariable { name } => assert_eq!(name, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn division_follows_ieee() {
        let v = eval(&parse("1/x").unwrap(), &Bindings::from([("x", 0.0)])).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn gradients_match_hand_values() {
        let b = Bindings::from([("x", 3.0)]);
        let d = eval_derivs(&parse("x^2").unwrap(), &b, &["x"], 1).unwrap();
        assert_eq!(d.value, 9.0);
        assert_eq!(d.gradient, vec![6.0]);

        let b = Bindings::from([("x", 2.0), ("y", 5.0)]);
        let d = eval_derivs(&parse("x*y").unwrap(), &b, &["y"], 1).unwrap();
        assert_eq!(d.value, 10.0);
        assert_eq!(d.gradient, vec![2.0]);
    }

    #[test]
    fn second_order_sin() {
        let b = Bindings::from([("t", 0.0)]);
        let d = eval_derivs(&parse("sin(t)").unwrap(), &b, &["t"], 2).unwrap();
        assert_eq!(d.value, 0.0);
        assert!((d.gradient[0] - 1.0).abs() < 1e-15);
        assert_eq!(d.hessian.unwrap()[0][0], 0.0);
    }

    #[test]
    fn orders_agree_on_value_and_gradient() {
        let b = Bindings::from([("x", 0.7), ("y", -1.2)]);
        let e = parse("sin(x*y) + exp(x) / (2 + cos(y))").unwrap();
        let d1 = eval_derivs(&e, &b, &["x", "y"], 1).unwrap();
        let d2 = eval_derivs(&e, &b, &["x", "y"], 2).unwrap();
        assert!((d1.value - d2.value).abs() < 1e-15);
        for i in 0..2 {
            assert!((d1.gradient[i] - d2.gradient[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn mixed_partials_are_symmetric_and_exact() {
        // f = x^2 y + y^3: fxx = 2y, fxy = 2x, fyy = 6y
        let b = Bindings::from([("x", 1.5), ("y", -0.5)]);
        let e = parse("x^2*y + y^3").unwrap();
        let d = eval_derivs(&e, &b, &["x", "y"], 2).unwrap();
        let h = d.hessian.unwrap();
        assert!((h[0][0] - 2.0 * -0.5).abs() < 1e-14);
        assert!((h[0][1] - 2.0 * 1.5).abs() < 1e-14);
        assert!((h[1][0] - h[0][1]).abs() < 1e-15);
        assert!((h[1][1] - 6.0 * -0.5).abs() < 1e-14);
    }
}
