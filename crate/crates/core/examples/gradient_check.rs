//! Finite-difference checks of tape gradients.
//!
//! Run with `cargo run --release --example gradient_check`.

use factharness::diffmath::{grad_check, Tape, Var};
use factharness::Result;

fn check(name: &str, shapes: &[Vec<usize>], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
    let worst = (0..3).map(|seed| grad_check(&f, shapes, seed)).collect::<Result<Vec<_>>>()?;
    println!("{name:<24} worst relative error {:.2e}", worst.iter().cloned().fold(0.0, f64::max));
    Ok(())
}

fn main() -> Result<()> {
    check("matmul + sum", &[vec![3, 4], vec![4, 2]], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        t.sum(m)
    })?;
    check("softmax rows", &[vec![2, 5], vec![2, 5]], |t, v| {
        let s = t.softmax(v[0], 1)?;
        let w = t.mul(s, v[1])?;
        t.sum(w)
    })?;
    check("layer norm", &[vec![3, 6], vec![1, 6], vec![1, 6], vec![3, 6]], |t, v| {
        let n = t.layer_norm(v[0], v[1], v[2])?;
        let w = t.mul(n, v[3])?;
        t.sum(w)
    })?;
    check("sigmoid gate", &[vec![2, 3], vec![2, 3]], |t, v| {
        let g = t.sigmoid(v[0])?;
        let w = t.mul(g, v[1])?;
        t.sum(w)
    })?;
    check("cross entropy", &[vec![4, 7]], |t, v| t.cross_entropy(v[0], &[1, 3, 0, 6], &[1.0, 0.5, 1.0, 2.0]))?;
    Ok(())
}
