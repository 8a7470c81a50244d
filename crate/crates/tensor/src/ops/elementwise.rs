use std::sync::Arc;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    /// Unary pointwise map with derivative expressed through input and output.
    fn pointwise(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[*self], move |g| {
            let d = x
                .data()
                .iter()
                .zip(y2.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d).unwrap())]
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().add(&other.value())?;
        Ok(self
            .tape
            .op(v, &[*self, *other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.tape.op(v, &[*self, *other], |g| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let v = a.mul(&b)?;
        Ok(self.tape.op(v, &[*self, *other], move |g| {
            vec![Some(g.mul(&b).unwrap()), Some(g.mul(&a).unwrap())]
        }))
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + s);
        self.tape.op(v, &[*self], |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, s: T) -> Var<'t, T> {
        let v = self.value().scale(s);
        self.tape.op(v, &[*self], move |g| vec![Some(g.scale(s))])
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.pointwise(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        self.pointwise(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.pointwise(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.pointwise(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&self) -> Var<'t, T> {
        self.pointwise(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Var<'t, T> {
        self.pointwise(|x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.pointwise(|x| x.exp(), |_, y| y)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(x.sum()), &[*self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::lit(self.value().len().max(1) as f64);
        self.sum().mul_scalar(T::one() / n)
    }
}
