use crate::error::{Error, Result};

/// A model whose trainable state is a fixed, ordered list of f64 tensors.
pub trait Parameters {
    /// Visits every tensor as `(name, shape, values)` in a stable order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Visits the same tensors mutably, in the same order as [`visit`](Self::visit).
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

pub fn param_count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(p));
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

pub fn assign_flat<P: Parameters + ?Sized>(p: &mut P, src: &[f64]) -> Result<()> {
    let n = param_count(p);
    if n != src.len() {
        return Err(Error::Shape(format!("expected {n} parameters, got {}", src.len())));
    }
    let mut offset = 0;
    p.visit_mut(&mut |v| {
        v.copy_from_slice(&src[offset..offset + v.len()]);
        offset += v.len();
    });
    Ok(())
}

/// `into += other`, parameter by parameter.
pub fn accumulate<P: Parameters + ?Sized>(into: &mut P, other: &P) {
    let src = flatten(other);
    let mut offset = 0;
    into.visit_mut(&mut |v| {
        let n = v.len();
        for (a, b) in v.iter_mut().zip(&src[offset..offset + n]) {
            *a += b;
        }
        offset += n;
    });
}

/// `target = tau * online + (1 - tau) * target`.
pub fn blend<P: Parameters + ?Sized>(target: &mut P, online: &P, tau: f64) {
    let src = flatten(online);
    let mut offset = 0;
    target.visit_mut(&mut |v| {
        let n = v.len();
        for (t, o) in v.iter_mut().zip(&src[offset..offset + n]) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        offset += n;
    });
}
