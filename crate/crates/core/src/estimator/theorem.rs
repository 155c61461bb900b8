//! Constructed instances on which the accuracy gradient can be compared with
//! the magnitude of the output-utility gradient and with the decoupled
//! product of input-space gradients.
//!
//! An instance is a set of elements, each scoring a disjoint (or, for
//! adversarial instances, overlapping) slice of an input vector
//! `y(k) = y0 + k * d`. Accuracy is `sum f(e) C(e)` and utility `sum f(e)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ComputationRecord, NdArray, NodeId};
use crate::detector::signed_confidence;

pub const LINEAR_TOLERANCE: f64 = 1e-9;
pub const SIGMOID_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// `f(e)` is affine in the input.
    Linear,
    /// `f(e) = 2 sigmoid(s (score - theta)) - 1` with a sigmoid score.
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct InstanceElement {
    /// Input coordinates the element reads and their weights.
    pub support: Vec<(usize, f64)>,
    pub bias: f64,
    /// +1 when the element is confirmed by the reference, -1 otherwise.
    pub confirmed: f64,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub shape: Shape,
    pub y0: Vec<f64>,
    pub direction: Vec<f64>,
    pub k: f64,
    pub step: f64,
    pub threshold: f64,
    pub sharpness: f64,
    pub elements: Vec<InstanceElement>,
    /// Whether the instance was built to satisfy all assumptions.
    pub compliant: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub name: String,
    pub shape: Shape,
    pub compliant: bool,
    /// Difference quotient of the accuracy.
    pub acc_grad: f64,
    /// Magnitude of the utility difference quotient.
    pub output_grad: f64,
    /// `|dz/dy| . |dy/dk|` with `dz/dy` from one backward pass.
    pub decoupled: f64,
    pub gap: f64,
    pub monotone: bool,
    pub disjoint: bool,
    pub aligned: bool,
    pub passed: bool,
}

impl TheoremReport {
    pub fn tolerance(&self) -> f64 {
        match self.shape {
            Shape::Linear => LINEAR_TOLERANCE,
            Shape::Sigmoid => SIGMOID_TOLERANCE,
        }
    }

    pub fn assumptions_hold(&self) -> bool {
        self.monotone && self.disjoint && self.aligned
    }
}

impl Instance {
    fn y_at(&self, k: f64) -> Vec<f64> {
        self.y0.iter().zip(&self.direction).map(|(a, d)| a + k * d).collect()
    }

    fn raw_score(&self, e: &InstanceElement, y: &[f64]) -> f64 {
        e.bias + e.support.iter().map(|&(p, w)| w * y[p]).sum::<f64>()
    }

    /// `f(e)` evaluated directly, without the autodiff engine.
    fn f(&self, e: &InstanceElement, y: &[f64]) -> f64 {
        let a = self.raw_score(e, y);
        match self.shape {
            Shape::Linear => 2.0 * a - 1.0,
            Shape::Sigmoid => signed_confidence(crate::autodiff::sigmoid(a), self.threshold, self.sharpness),
        }
    }

    /// Record computing `f(e)` for the listed elements, summed.
    fn record(&self, which: &[usize]) -> ComputationRecord {
        let n = self.y0.len();
        let mut rec = ComputationRecord::new();
        let y = rec.input(&[n]);
        let mut total: Option<NodeId> = None;
        for &i in which {
            let e = &self.elements[i];
            let mut w = vec![0.0; n];
            for &(p, v) in &e.support {
                w[p] += v;
            }
            let wn = rec.param(NdArray::new(&[n], w).expect("length n"));
            let prod = rec.mul(y, wn).expect("same shape");
            let dot = rec.sum(prod).expect("vector");
            let a = rec.offset(dot, e.bias).expect("scalar");
            let f = match self.shape {
                Shape::Linear => {
                    let twice = rec.scale(a, 2.0).expect("scalar");
                    rec.offset(twice, -1.0).expect("scalar")
                }
                Shape::Sigmoid => {
                    let score = rec.sigmoid(a).expect("scalar");
                    let s = rec.scale(score, self.sharpness).expect("scalar");
                    let shifted = rec.offset(s, -self.sharpness * self.threshold).expect("scalar");
                    let soft = rec.sigmoid(shifted).expect("scalar");
                    let twice = rec.scale(soft, 2.0).expect("scalar");
                    rec.offset(twice, -1.0).expect("scalar")
                }
            };
            total = Some(match total {
                None => f,
                Some(t) => rec.add(t, f).expect("scalar"),
            });
        }
        rec.set_output(total.expect("non-empty")).expect("scalar");
        rec
    }

    fn input_gradient(&self, which: &[usize], y: &[f64]) -> Vec<f64> {
        let mut rec = self.record(which);
        rec.forward(&NdArray::from_vec(y.to_vec())).expect("shapes fixed");
        rec.backward(true).expect("forward ran").into_data()
    }

    pub fn verify(&self) -> TheoremReport {
        let y = self.y_at(self.k);
        let y_next = self.y_at(self.k + self.step);
        let h = self.step;

        let mut acc = 0.0;
        let mut util = 0.0;
        let mut monotone = true;
        for e in &self.elements {
            let df = self.f(e, &y_next) - self.f(e, &y);
            if df * e.confirmed < 0.0 {
                monotone = false;
            }
            acc += df * e.confirmed;
            util += df;
        }
        let acc_grad = acc / h;
        let output_grad = (util / h).abs();

        let all: Vec<usize> = (0..self.elements.len()).collect();
        let g = self.input_gradient(&all, &y);
        let decoupled: f64 = g.iter().zip(&self.direction).map(|(a, b)| a.abs() * b.abs()).sum();

        // each element's own gradient must equal the full gradient masked to
        // its support
        let mut disjoint = true;
        for (i, e) in self.elements.iter().enumerate() {
            let own = self.input_gradient(&[i], &y);
            let mut mask = vec![false; y.len()];
            for &(p, _) in &e.support {
                mask[p] = true;
            }
            for p in 0..y.len() {
                let masked = if mask[p] { g[p] } else { 0.0 };
                let scale = own[p].abs().max(masked.abs()).max(1e-300);
                if (masked - own[p]).abs() > 1e-12 * scale {
                    disjoint = false;
                }
            }
        }

        let products: Vec<f64> = g.iter().zip(&self.direction).map(|(a, b)| a * b).collect();
        let aligned = products.iter().all(|&v| v >= 0.0) || products.iter().all(|&v| v <= 0.0);

        let gap = (acc_grad - output_grad).abs().max((acc_grad - decoupled).abs());
        let mut report = TheoremReport {
            name: self.name.clone(),
            shape: self.shape,
            compliant: self.compliant,
            acc_grad,
            output_grad,
            decoupled,
            gap,
            monotone,
            disjoint,
            aligned,
            passed: false,
        };
        report.passed = if self.compliant {
            report.assumptions_hold() && gap < report.tolerance()
        } else {
            !report.assumptions_hold()
        };
        report
    }
}

fn element(support: Vec<(usize, f64)>, bias: f64, confirmed: f64) -> InstanceElement {
    InstanceElement {
        support,
        bias,
        confirmed,
    }
}

fn base(name: &str, shape: Shape, n: usize, compliant: bool) -> Instance {
    Instance {
        name: name.to_string(),
        shape,
        y0: vec![0.0; n],
        direction: vec![0.0; n],
        k: 0.0,
        step: match shape {
            Shape::Linear => 1.0 / 3.0,
            Shape::Sigmoid => 1e-6,
        },
        threshold: 0.5,
        sharpness: 20.0,
        elements: Vec::new(),
        compliant,
    }
}

/// Random compliant instance: disjoint supports, every weight-direction
/// product of one sign, and reference labels that agree with it.
pub fn random_instance(shape: Shape, elements: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 4;
    let n = elements * width + 2;
    let mut inst = base(&format!("{shape:?}-{elements}-seed{seed}").to_lowercase(), shape, n, true);
    inst.k = rng.random_range(0.0..1.0);
    // all elements move together: either all confirmed and rising, or all
    // unconfirmed and falling
    let rising = rng.random_bool(0.5);
    for (p, v) in inst.y0.iter_mut().enumerate() {
        *v = ((p * 37 + seed as usize) % 11) as f64 / 11.0;
    }
    for e in 0..elements {
        let mut support = Vec::with_capacity(width);
        for j in 0..width {
            let p = e * width + j;
            let w: f64 = rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let d: f64 = rng.random_range(0.1..0.5);
            inst.direction[p] = if (w > 0.0) == rising { d } else { -d };
            let w = match shape {
                Shape::Linear => w * 0.1,
                Shape::Sigmoid => w,
            };
            support.push((p, w));
        }
        let bias = match shape {
            Shape::Linear => 0.5,
            Shape::Sigmoid => rng.random_range(-0.5..0.5),
        };
        inst.elements.push(element(support, bias, if rising { 1.0 } else { -1.0 }));
    }
    inst
}

/// The standard suite: compliant instances first, then adversarial ones.
pub fn suite() -> Vec<Instance> {
    let mut out = Vec::new();

    let mut one = base("linear-single", Shape::Linear, 3, true);
    one.direction = vec![0.5, 0.0, 0.0];
    one.elements.push(element(vec![(0, 0.2)], 0.4, 1.0));
    out.push(one);

    let mut two = base("linear-two-disjoint", Shape::Linear, 4, true);
    two.direction = vec![0.3, 0.1, 0.2, 0.0];
    two.elements.push(element(vec![(0, 0.2), (1, 0.1)], 0.3, 1.0));
    two.elements.push(element(vec![(2, 0.4)], 0.6, 1.0));
    out.push(two);

    let mut falling = base("linear-unconfirmed-falling", Shape::Linear, 4, true);
    falling.direction = vec![-0.2, 0.3, 0.0, 0.0];
    falling.elements.push(element(vec![(0, 0.5), (1, -0.1)], 0.2, -1.0));
    out.push(falling);

    let mut s1 = base("sigmoid-single", Shape::Sigmoid, 3, true);
    s1.y0 = vec![0.1, 0.0, 0.0];
    s1.direction = vec![0.4, 0.0, 0.0];
    s1.elements.push(element(vec![(0, 1.5)], -0.1, 1.0));
    out.push(s1);

    let mut s3 = base("sigmoid-three-disjoint", Shape::Sigmoid, 7, true);
    s3.y0 = vec![0.2, 0.1, 0.0, 0.3, 0.5, 0.2, 0.0];
    s3.direction = vec![0.3, 0.2, 0.4, -0.1, 0.2, 0.1, 0.0];
    s3.elements.push(element(vec![(0, 1.0), (1, 0.5)], -0.2, 1.0));
    s3.elements.push(element(vec![(2, 0.8)], 0.1, 1.0));
    s3.elements.push(element(vec![(3, -0.6), (4, 0.3), (5, 0.7)], -0.3, 1.0));
    out.push(s3);

    for seed in 0..3 {
        out.push(random_instance(Shape::Linear, 2 + seed as usize, 100 + seed));
    }
    for seed in 0..4 {
        out.push(random_instance(Shape::Sigmoid, 1 + seed as usize, 200 + seed));
    }

    // mixed signs inside one element: the product of magnitudes overshoots
    // the magnitude of the product
    let mut mixed = base("violates-alignment", Shape::Sigmoid, 3, false);
    mixed.direction = vec![0.4, 0.3, 0.0];
    mixed.elements.push(element(vec![(0, 1.2), (1, -0.8)], 0.0, 1.0));
    out.push(mixed);

    // an unconfirmed element gaining confidence lowers the accuracy while
    // raising the utility
    let mut false_positive = base("violates-monotonicity", Shape::Linear, 4, false);
    false_positive.direction = vec![0.3, 0.0, 0.2, 0.0];
    false_positive.elements.push(element(vec![(0, 0.2)], 0.4, 1.0));
    false_positive.elements.push(element(vec![(2, 0.3)], 0.1, -1.0));
    out.push(false_positive);

    // two elements reading the same coordinate
    let mut shared = base("violates-disjointness", Shape::Sigmoid, 3, false);
    shared.direction = vec![0.2, 0.2, 0.0];
    shared.elements.push(element(vec![(0, 1.0), (1, 0.4)], 0.0, 1.0));
    shared.elements.push(element(vec![(1, 0.6)], 0.1, 1.0));
    out.push(shared);

    out
}
