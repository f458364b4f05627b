//! Scalar arithmetic that runs either on plain `f64` or on a [`Tape`].
//!
//! Plant dynamics and rewards are written once against [`Real`] and evaluated
//! both ways: on the tape during training, on `f64` during evaluation.

use std::ops::{Add, Mul, Neg, Sub};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn value(self) -> f64;
    /// Constant in the same evaluation context as `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
    fn square(self) -> Self;
    /// max(self, 0)
    fn pos(self) -> Self;

    fn add_c(self, c: f64) -> Self;
    fn mul_c(self, c: f64) -> Self;

    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn square(self) -> Self {
        self * self
    }
    fn pos(self) -> Self {
        self.max(0.0)
    }
    fn add_c(self, c: f64) -> Self {
        self + c
    }
    fn mul_c(self, c: f64) -> Self {
        self * c
    }
    fn div(self, rhs: Self) -> Self {
        self / rhs
    }
}

/// Scalar node handle with operator overloading.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub tape: &'t Tape,
    pub id: NodeId,
}

impl<'t> Var<'t> {
    pub fn new(tape: &'t Tape, id: NodeId) -> Self {
        Self { tape, id }
    }

    pub fn constant(tape: &'t Tape, value: f64) -> Self {
        Self::new(tape, tape.scalar(value))
    }

    pub fn input(tape: &'t Tape, value: f64) -> Self {
        Self::new(tape, tape.input(Tensor::scalar(value)))
    }
}

// Scalar-only ops cannot mismatch in shape.
impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::new(self.tape, self.tape.add(self.id, rhs.id).expect("scalar add"))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::new(self.tape, self.tape.sub(self.id, rhs.id).expect("scalar sub"))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::new(self.tape, self.tape.mul(self.id, rhs.id).expect("scalar mul"))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        Var::new(self.tape, self.tape.scale(self.id, -1.0))
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.tape.scalar_value(self.id)
    }
    fn lift(self, c: f64) -> Self {
        Var::constant(self.tape, c)
    }
    fn exp(self) -> Self {
        Var::new(self.tape, self.tape.exp(self.id))
    }
    fn recip(self) -> Self {
        Var::new(self.tape, self.tape.recip(self.id))
    }
    fn square(self) -> Self {
        Var::new(self.tape, self.tape.square(self.id))
    }
    fn pos(self) -> Self {
        Var::new(self.tape, self.tape.relu(self.id))
    }
    fn add_c(self, c: f64) -> Self {
        Var::new(self.tape, self.tape.add_const(self.id, c))
    }
    fn mul_c(self, c: f64) -> Self {
        Var::new(self.tape, self.tape.scale(self.id, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<R: Real>(x: R) -> R {
        (x.square() * x).add_c(1.0) - x.mul_c(2.0).exp().recip()
    }

    #[test]
    fn f64_and_tape_agree() {
        let tape = Tape::new();
        let x = Var::input(&tape, 0.7);
        let y = poly(x);
        assert_eq!(y.value(), poly(0.7));
        let g = tape.backward(y.id).unwrap().wrt(x.id).item();
        let expected = 3.0 * 0.49 + 2.0 * (-1.4f64).exp();
        assert!((g - expected).abs() < 1e-12);
    }
}
