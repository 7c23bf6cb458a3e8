//! Central-difference verification of analytic gradients.

use super::{bce_terms, DenseNet};
use crate::error::{check_dim, AirdError, Result};

/// Loss value plus every relu pre-activation seen while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub relu_preacts: Vec<f64>,
}

/// A scalar objective over a flat parameter vector.
pub trait GradientCheckable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f32;
    fn set_param(&mut self, i: usize, v: f32);
    fn probe(&self) -> Result<Probe>;
    fn analytic_gradient(&self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation moved a relu unit within the kink margin.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)` maximized over all parameters.
///
/// A parameter is skipped when perturbing it flips a relu unit's sign or
/// moves a unit whose pre-activation lies within `10 ×` the induced change
/// of zero. The difference quotient uses the actually stored perturbed
/// values, since `w ± step` is rounded to `f32`.
pub fn check_gradients_of<M: GradientCheckable + ?Sized>(model: &mut M, step: f32) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(AirdError::config("finite-difference step must be positive"));
    }
    let analytic = model.analytic_gradient()?;
    if analytic.len() != model.num_params() {
        return Err(AirdError::ShapeMismatch("analytic gradient length".into()));
    }
    let base = model.probe()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..model.num_params() {
        let w = model.param(i);
        let up = w + step;
        let down = w - step;
        model.set_param(i, up);
        let plus = model.probe();
        model.set_param(i, down);
        let minus = model.probe();
        model.set_param(i, w);
        let (plus, minus) = (plus?, minus?);
        if near_kink(&base.relu_preacts, &plus.relu_preacts, &minus.relu_preacts) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (up as f64 - down as f64);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

fn near_kink(base: &[f64], plus: &[f64], minus: &[f64]) -> bool {
    base.iter().zip(plus).zip(minus).any(|((&z, &p), &m)| {
        let moved = (p - z).abs().max((m - z).abs());
        let crosses = (z > 0.0) != (p > 0.0) || (z > 0.0) != (m > 0.0);
        crosses || (moved > 0.0 && z.abs() <= 10.0 * moved)
    })
}

/// Scalar losses over a network output.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `0.5 * |y - target|^2`
    Quadratic(Vec<f64>),
    /// `sum_k w_k y_k`
    Linear(Vec<f64>),
    /// Binary cross-entropy of a single probability output.
    Bce(f64),
}

impl LossSpec {
    pub fn eval(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            LossSpec::Quadratic(t) => {
                check_dim(t.len(), y.len())?;
                let g: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
                Ok((0.5 * g.iter().map(|d| d * d).sum::<f64>(), g))
            }
            LossSpec::Linear(w) => {
                check_dim(w.len(), y.len())?;
                Ok((y.iter().zip(w).map(|(a, b)| a * b).sum(), w.clone()))
            }
            LossSpec::Bce(t) => {
                check_dim(1, y.len())?;
                let (l, g) = bce_terms(y[0], *t);
                Ok((l, vec![g]))
            }
        }
    }
}

struct NetObjective<'a> {
    net: &'a mut DenseNet,
    x: &'a [f64],
    loss: &'a LossSpec,
}

impl GradientCheckable for NetObjective<'_> {
    fn num_params(&self) -> usize {
        self.net.param_count()
    }

    fn param(&self, i: usize) -> f32 {
        self.net.param(i)
    }

    fn set_param(&mut self, i: usize, v: f32) {
        self.net.set_param(i, v);
    }

    fn probe(&self) -> Result<Probe> {
        let (y, tape) = self.net.forward(self.x)?;
        Ok(Probe {
            loss: self.loss.eval(&y)?.0,
            relu_preacts: tape.relu_preacts(self.net).collect(),
        })
    }

    fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let (y, tape) = self.net.forward(self.x)?;
        let (_, g) = self.loss.eval(&y)?;
        Ok(self.net.backward(&tape, &g)?.0.flatten())
    }
}

/// Checks every parameter of `net` under `loss(net(x))`.
pub fn check_gradients(net: &mut DenseNet, x: &[f64], loss: &LossSpec, step: f32) -> Result<GradCheckReport> {
    check_gradients_of(&mut NetObjective { net, x, loss }, step)
}

#[cfg(test)]
mod tests {
    use super::super::{Activation, Layer};
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_quadratic_is_exact() {
        let mut rng = crate::seeded_rng(5);
        let mut net = DenseNet::new(&[4, 3], &[Activation::Linear], &mut rng).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0];
        let r = check_gradients(&mut net, &x, &LossSpec::Quadratic(vec![1.0, 0.0, -1.0]), 1e-3).unwrap();
        assert_eq!(r.skipped, 0);
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn random_relu_nets() {
        for seed in 0..10 {
            let mut rng = crate::seeded_rng(seed);
            let mut net = DenseNet::new(
                &[6, 8, 5, 2],
                &[Activation::Relu, Activation::Relu, Activation::Linear],
                &mut rng,
            )
            .unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = check_gradients(&mut net, &x, &LossSpec::Quadratic(vec![0.3, -0.7]), 1e-3).unwrap();
            assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
            assert!(r.checked > r.skipped);
        }
    }

    #[test]
    fn sigmoid_bce_net() {
        let mut rng = crate::seeded_rng(11);
        let mut net =
            DenseNet::new(&[5, 7, 1], &[Activation::Relu, Activation::Sigmoid], &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9, 0.1, -0.3];
        let r = check_gradients(&mut net, &x, &LossSpec::Bce(1.0), 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn kink_is_excluded() {
        // Hidden unit 0 has pre-activation exactly zero.
        let mut net = DenseNet::from_layers(vec![
            Layer {
                inputs: 2,
                outputs: 2,
                weights: vec![1.0, -1.0, 0.5, 0.25],
                bias: vec![0.0, 0.1],
                activation: Activation::Relu,
            },
            Layer {
                inputs: 2,
                outputs: 1,
                weights: vec![1.0, 1.0],
                bias: vec![0.0],
                activation: Activation::Linear,
            },
        ])
        .unwrap();
        let r = check_gradients(&mut net, &[1.0, 1.0], &LossSpec::Quadratic(vec![2.0]), 1e-3).unwrap();
        // W[0][0], W[0][1], b[0] touch the kinked unit.
        assert_eq!(r.skipped, 3);
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }
}
