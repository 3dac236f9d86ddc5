//! Define-by-run reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records one forward pass; `backward` replays it in reverse,
//! handing each node's upstream gradient to a stored closure that returns
//! the gradients of its parents. Sphere operators append nodes through the
//! vjp functions in [`crate::ops`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Region, SphericalKernel};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Scale floor shared with the entropy stage; below it the Gaussian bin
/// mass degenerates into a single spike.
pub const SIGMA_MIN: f64 = 0.11;

const LN2: f64 = std::f64::consts::LN_2;

type BackpropFn = Box<dyn Fn(&Graph, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backprop: Option<BackpropFn>,
}

/// Kernel parameters registered on a graph.
#[derive(Debug, Clone, Copy)]
pub struct KernelIds {
    pub theta: [NodeId; 9],
    pub bias: Option<NodeId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros when the loss never touched it.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backprop: Option<BackpropFn>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents,
            backprop,
        });
        self.nodes.len() - 1
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None)
    }

    pub fn kernel(&mut self, kernel: &SphericalKernel) -> KernelIds {
        let theta = std::array::from_fn(|k| self.leaf(kernel.theta[k].clone()));
        let bias = kernel.bias.as_ref().map(|b| self.leaf(b.clone()));
        KernelIds { theta, bias }
    }

    fn kernel_value(&self, ids: &KernelIds) -> SphericalKernel {
        SphericalKernel {
            theta: std::array::from_fn(|k| self.value(ids.theta[k]).clone()),
            bias: ids.bias.map(|b| self.value(b).clone()),
        }
    }

    fn kernel_parents(x: NodeId, ids: &KernelIds) -> Vec<NodeId> {
        let mut parents = Vec::with_capacity(11);
        parents.push(x);
        parents.extend(ids.theta);
        if let Some(b) = ids.bias {
            parents.push(b);
        }
        parents
    }

    fn pack_kernel_grads(
        dx: Tensor,
        dtheta: [Tensor; 9],
        db: Tensor,
        has_bias: bool,
    ) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(11);
        out.push(dx);
        out.extend(dtheta);
        if has_bias {
            out.push(db);
        }
        out
    }

    // ---- elementwise and shape ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|_, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|_, g| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |graph, g| {
                vec![g.hadamard(graph.value(b)), g.hadamard(graph.value(a))]
            })),
        )
    }

    /// out = s * x + c
    pub fn affine(&mut self, x: NodeId, s: f64, c: f64) -> NodeId {
        let value = self.value(x).map(|v| s * v + c);
        self.push(value, vec![x], Some(Box::new(move |_, g| vec![g.scale(s)])))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Some(Box::new(move |graph, g| {
                vec![g.zip_map(graph.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |graph, g| {
                vec![g.zip_map(graph.value(x), |gv, xv| {
                    let y = sigmoid(xv);
                    gv * y * (1.0 - y)
                })]
            })),
        )
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |graph, g| {
                vec![g.zip_map(graph.value(x), |gv, xv| gv * sigmoid(xv))]
            })),
        )
    }

    /// x (n x k) * w (k x m), no bias.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let value = self.value(x).matmul(self.value(w));
        self.push(
            value,
            vec![x, w],
            Some(Box::new(move |graph, g| {
                vec![
                    g.matmul_transpose(graph.value(w)),
                    graph.value(x).transpose_matmul(g),
                ]
            })),
        )
    }

    /// Adds a 1 x c bias row to every row of x.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let value = self.value(x).add_bias_row(self.value(bias));
        self.push(
            value,
            vec![x, bias],
            Some(Box::new(|_, g| vec![g.clone(), g.col_sums()])),
        )
    }

    /// Repeats a 1 x c row n times.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let src = self.value(x);
        debug_assert_eq!(src.rows(), 1);
        let cols = src.cols();
        let mut value = Tensor::zeros(n, cols);
        for r in 0..n {
            value.row_mut(r).copy_from_slice(src.row(0));
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(|_, g| vec![g.col_sums()])),
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        debug_assert_eq!(ta.rows(), tb.rows());
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut value = Tensor::zeros(ta.rows(), ca + cb);
        for r in 0..ta.rows() {
            value.row_mut(r)[..ca].copy_from_slice(ta.row(r));
            value.row_mut(r)[ca..].copy_from_slice(tb.row(r));
        }
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |_, g| {
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                vec![ga, gb]
            })),
        )
    }

    /// Columns [from, to) of x.
    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let t = self.value(x);
        let cols = t.cols();
        let mut value = Tensor::zeros(t.rows(), to - from);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[from..to]);
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut gx = Tensor::zeros(g.rows(), cols);
                for r in 0..g.rows() {
                    gx.row_mut(r)[from..to].copy_from_slice(g.row(r));
                }
                vec![gx]
            })),
        )
    }

    /// Averages each block of four child rows; the pooled downsampling
    /// variant.
    pub fn avgpool4(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = t.rows() / 4;
        let cols = t.cols();
        let mut value = Tensor::zeros(n, cols);
        for i in 0..n {
            for c in 0..4 {
                let src = t.row(4 * i + c);
                for (o, s) in value.row_mut(i).iter_mut().zip(src) {
                    *o += s * 0.25;
                }
            }
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut gx = Tensor::zeros(g.rows() * 4, cols);
                for i in 0..g.rows() {
                    for c in 0..4 {
                        for (o, s) in gx.row_mut(4 * i + c).iter_mut().zip(g.row(i)) {
                            *o = s * 0.25;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Keeps rows 4i: the child-0 subsampling used by strided n-hop stages.
    pub fn subsample4(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = t.rows() / 4;
        let cols = t.cols();
        let mut value = Tensor::zeros(n, cols);
        for i in 0..n {
            value.row_mut(i).copy_from_slice(t.row(4 * i));
        }
        self.push(
            value,
            vec![x],
            Some(Box::new(move |_, g| {
                let mut gx = Tensor::zeros(g.rows() * 4, cols);
                for i in 0..g.rows() {
                    gx.row_mut(4 * i).copy_from_slice(g.row(i));
                }
                vec![gx]
            })),
        )
    }

    // ---- quantization surrogates ---------------------------------------

    /// Training-time quantization: adds one uniform(-1/2, 1/2) draw per
    /// element; the gradient passes through unchanged.
    pub fn quantize_noise<R: Rng>(&mut self, x: NodeId, rng: &mut R) -> NodeId {
        let value = {
            let t = self.value(x);
            let mut v = t.clone();
            for e in v.data_mut() {
                *e += rng.gen_range(-0.5..0.5);
            }
            v
        };
        self.push(value, vec![x], Some(Box::new(|_, g| vec![g.clone()])))
    }

    /// Rounding with a straight-through gradient.
    pub fn round_ste(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::round);
        self.push(value, vec![x], Some(Box::new(|_, g| vec![g.clone()])))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean squared error over all elements, a 1x1 node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        debug_assert_eq!((ta.rows(), ta.cols()), (tb.rows(), tb.cols()));
        let n = ta.len() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(
            Tensor::scalar(sum / n),
            vec![a, b],
            Some(Box::new(move |graph, g| {
                let s = 2.0 * g.item() / n;
                let da = graph
                    .value(a)
                    .zip_map(graph.value(b), |x, y| s * (x - y));
                let db = da.scale(-1.0);
                vec![da, db]
            })),
        )
    }

    /// Total information content in bits of y under elementwise discretized
    /// Gaussians: sum over elements of -log2(Phi((d+1/2)/s) - Phi((d-1/2)/s))
    /// with d = y - mu and s clamped to SIGMA_MIN. A 1x1 node.
    pub fn gaussian_bits(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        let (ty, tmu, tsigma) = (self.value(y), self.value(mu), self.value(sigma));
        debug_assert_eq!((ty.rows(), ty.cols()), (tmu.rows(), tmu.cols()));
        debug_assert_eq!((ty.rows(), ty.cols()), (tsigma.rows(), tsigma.cols()));
        let mut total = 0.0;
        for ((&yv, &mv), &sv) in ty.data().iter().zip(tmu.data()).zip(tsigma.data()) {
            total += gaussian_bin_bits(yv - mv, sv);
        }
        self.push(
            Tensor::scalar(total),
            vec![y, mu, sigma],
            Some(Box::new(move |graph, g| {
                let gs = g.item();
                let (ty, tmu, tsigma) = (graph.value(y), graph.value(mu), graph.value(sigma));
                let mut dy = Tensor::zeros(ty.rows(), ty.cols());
                let mut dmu = Tensor::zeros(ty.rows(), ty.cols());
                let mut dsigma = Tensor::zeros(ty.rows(), ty.cols());
                for idx in 0..ty.len() {
                    let (dd, ds) =
                        gaussian_bin_bits_grad(ty.data()[idx] - tmu.data()[idx], tsigma.data()[idx]);
                    dy.data_mut()[idx] = gs * dd;
                    dmu.data_mut()[idx] = -gs * dd;
                    dsigma.data_mut()[idx] = gs * ds;
                }
                vec![dy, dmu, dsigma]
            })),
        )
    }

    // ---- sphere operators ------------------------------------------------

    pub fn conv_h0(&mut self, x: NodeId, theta0: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let value = ops::conv_h0(
            self.value(x),
            self.value(theta0),
            bias.map(|b| self.value(b)),
        )?;
        let mut parents = vec![x, theta0];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            value,
            parents,
            Some(Box::new(move |graph, g| {
                let (dx, dt, db) = ops::conv_h0_vjp(graph.value(x), graph.value(theta0), g);
                let mut out = vec![dx, dt];
                if bias.is_some() {
                    out.push(db);
                }
                out
            })),
        ))
    }

    pub fn conv_h1(&mut self, region: &Region, x: NodeId, k: &KernelIds) -> Result<NodeId> {
        let kernel = self.kernel_value(k);
        let value = ops::conv_h1(region, self.value(x), &kernel)?;
        let region = region.clone();
        let k = *k;
        Ok(self.push(
            value,
            Self::kernel_parents(x, &k),
            Some(Box::new(move |graph, g| {
                let kernel = graph.kernel_value(&k);
                let (dx, dtheta, db) = ops::conv_h1_vjp(&region, graph.value(x), &kernel, g);
                Self::pack_kernel_grads(dx, dtheta, db, k.bias.is_some())
            })),
        ))
    }

    pub fn masked_conv_h1(&mut self, region: &Region, x: NodeId, k: &KernelIds) -> Result<NodeId> {
        let kernel = self.kernel_value(k);
        let value = ops::masked_conv_h1(region, self.value(x), &kernel)?;
        let region = region.clone();
        let k = *k;
        Ok(self.push(
            value,
            Self::kernel_parents(x, &k),
            Some(Box::new(move |graph, g| {
                let kernel = graph.kernel_value(&k);
                let (dx, dtheta, db) =
                    ops::masked_conv_h1_vjp(&region, graph.value(x), &kernel, g);
                Self::pack_kernel_grads(dx, dtheta, db, k.bias.is_some())
            })),
        ))
    }

    pub fn conv_down4(&mut self, fine: &Region, x: NodeId, k: &KernelIds) -> Result<NodeId> {
        let kernel = self.kernel_value(k);
        let value = ops::conv_down4(fine, self.value(x), &kernel)?;
        let fine = fine.clone();
        let k = *k;
        Ok(self.push(
            value,
            Self::kernel_parents(x, &k),
            Some(Box::new(move |graph, g| {
                let kernel = graph.kernel_value(&k);
                let (dx, dtheta, db) = ops::conv_down4_vjp(&fine, graph.value(x), &kernel, g);
                Self::pack_kernel_grads(dx, dtheta, db, k.bias.is_some())
            })),
        ))
    }

    pub fn tconv_up4(
        &mut self,
        coarse: &Region,
        fine: &Region,
        x: NodeId,
        k: &KernelIds,
    ) -> Result<NodeId> {
        let kernel = self.kernel_value(k);
        let value = ops::tconv_up4(coarse, fine, self.value(x), &kernel)?;
        let (coarse, fine) = (coarse.clone(), fine.clone());
        let k = *k;
        Ok(self.push(
            value,
            Self::kernel_parents(x, &k),
            Some(Box::new(move |graph, g| {
                let kernel = graph.kernel_value(&k);
                let (dx, dtheta, db) =
                    ops::tconv_up4_vjp(&coarse, &fine, graph.value(x), &kernel, g);
                Self::pack_kernel_grads(dx, dtheta, db, k.bias.is_some())
            })),
        ))
    }

    pub fn shuffle_up4(&mut self, coarse: &Region, x: NodeId, k: &KernelIds) -> Result<NodeId> {
        let kernel = self.kernel_value(k);
        let value = ops::shuffle_up4(coarse, self.value(x), &kernel)?;
        let coarse = coarse.clone();
        let k = *k;
        Ok(self.push(
            value,
            Self::kernel_parents(x, &k),
            Some(Box::new(move |graph, g| {
                let kernel = graph.kernel_value(&k);
                let (dx, dtheta, db) = ops::shuffle_up4_vjp(&coarse, graph.value(x), &kernel, g);
                Self::pack_kernel_grads(dx, dtheta, db, k.bias.is_some())
            })),
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Config("backward needs a scalar loss node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let Some(bp) = &self.nodes[id].backprop else {
                continue;
            };
            let parent_grads = bp(self, &g);
            debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
            for (pid, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // Stable for large |x|.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of the unit bin centered at distance `d` from the mean
/// of a Gaussian with scale `sigma` (clamped to SIGMA_MIN). Evaluated on
/// the lower tail so the difference keeps full precision far from the mean.
#[inline]
pub fn gaussian_bin_mass(d: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    let hi = (d + 0.5) / s;
    let lo = (d - 0.5) / s;
    if d > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// -log2 of the bin mass, floored to keep the value finite far out in the
/// tails.
#[inline]
pub fn gaussian_bin_bits(d: f64, sigma: f64) -> f64 {
    -gaussian_bin_mass(d, sigma).max(1e-300).log2()
}

/// (d bits / d d, d bits / d sigma); zero sigma-gradient when the clamp at
/// SIGMA_MIN is active.
#[inline]
fn gaussian_bin_bits_grad(d: f64, sigma: f64) -> (f64, f64) {
    let clamped = sigma < SIGMA_MIN;
    let s = sigma.max(SIGMA_MIN);
    let hi = (d + 0.5) / s;
    let lo = (d - 0.5) / s;
    let p = gaussian_bin_mass(d, sigma).max(1e-300);
    let dp_dd = (normal_pdf(hi) - normal_pdf(lo)) / s;
    let dp_ds = (-normal_pdf(hi) * hi + normal_pdf(lo) * lo) / s;
    let factor = -1.0 / (p * LN2);
    (factor * dp_dd, if clamped { 0.0 } else { factor * dp_ds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::healpix::HealpixGrid;
    use std::sync::Arc;

    #[test]
    fn add_mul_chain_gradients() {
        // L = sum over elements of (a*b + 2a)^2 / n, checked against hand math.
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(1, 2, vec![1.5, -0.5]));
        let b = g.leaf(Tensor::from_vec(1, 2, vec![2.0, 3.0]));
        let prod = g.mul(a, b);
        let two_a = g.affine(a, 2.0, 0.0);
        let s = g.add(prod, two_a);
        let zero = g.leaf(Tensor::zeros(1, 2));
        let loss = g.mse(s, zero);
        let grads = g.backward(loss).unwrap();
        // s = [1.5*2+3, -0.5*3-1] = [6, -2.5]; L = (36 + 6.25)/2
        assert!((g.value(loss).item() - (36.0 + 6.25) / 2.0).abs() < 1e-12);
        // dL/ds = s ; dL/da = s*(b+2), dL/db = s*a
        let da = grads.get(a).unwrap();
        let db = grads.get(b).unwrap();
        assert!((da.at(0, 0) - 6.0 * 4.0).abs() < 1e-12);
        assert!((da.at(0, 1) - (-2.5) * 5.0).abs() < 1e-12);
        assert!((db.at(0, 0) - 6.0 * 1.5).abs() < 1e-12);
        assert!((db.at(0, 1) - (-2.5) * -0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bits_matches_cdf_oracle() {
        // d=0, sigma=0.5: mass = Phi(1) - Phi(-1).
        let p = gaussian_bin_mass(0.0, 0.5);
        assert!((p - 0.682_689_492_137_085_9).abs() < 1e-12);
        let bits = gaussian_bin_bits(0.0, 0.5);
        assert!((bits - 0.550_698_548_602_282_5).abs() < 1e-12);
        // d=1, sigma=2: frozen from the CDF oracle.
        let bits = gaussian_bin_bits(1.0, 2.0);
        assert!((bits - 2.517_326_631_187_261_3).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bits_monotone_in_distance() {
        let mut last = gaussian_bin_bits(0.0, 0.7);
        for step in 1..30 {
            let d = step as f64 * 0.25;
            let now = gaussian_bin_bits(d, 0.7);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn quantize_noise_bounded_and_round_ste() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(10, 4, |r, c| (r as f64) - (c as f64) * 0.3));
        let q = g.quantize_noise(x, &mut rng);
        for (a, b) in g.value(q).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 0.5);
        }
        let r = g.round_ste(x);
        assert_eq!(g.value(r).at(2, 0), 2.0);

        let mut g2 = Graph::new();
        let x2 = g2.leaf(Tensor::from_vec(1, 2, vec![2.4, -2.4]));
        let r2 = g2.round_ste(x2);
        assert_eq!(g2.value(r2).data(), &[2.0, -2.0]);
    }

    /// Central finite differences on a scalar-valued graph builder.
    fn finite_diff_check(
        build: impl Fn(&mut Graph, &[Tensor]) -> (Vec<NodeId>, NodeId),
        leaves: &[Tensor],
        tol: f64,
    ) {
        let mut g = Graph::new();
        let (ids, loss) = build(&mut g, leaves);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[li], leaf.rows(), leaf.cols());
            for e in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[e] += h;
                let mut gp = Graph::new();
                let (_, lp) = build(&mut gp, &plus);
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[e] -= h;
                let mut gm = Graph::new();
                let (_, lm) = build(&mut gm, &minus);
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "leaf {li} elem {e}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn finite_diff_elementwise_chain() {
        let leaves = vec![
            Tensor::from_fn(3, 2, |r, c| 0.3 * (r as f64) - 0.2 * (c as f64) + 0.1),
            Tensor::from_fn(3, 2, |r, c| 0.25 * ((r + c) as f64) - 0.4),
        ];
        finite_diff_check(
            |g, ls| {
                let a = g.leaf(ls[0].clone());
                let b = g.leaf(ls[1].clone());
                let m = g.mul(a, b);
                let r = g.relu(m);
                let s = g.sigmoid(r);
                let p = g.softplus(s);
                let target = g.leaf(Tensor::zeros(3, 2));
                let loss = g.mse(p, target);
                (vec![a, b], loss)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn finite_diff_conv_h1_small() {
        let grid = Arc::new(HealpixGrid::new(2).unwrap());
        let region = Region::full(grid);
        let mut leaves = vec![Tensor::from_fn(48, 2, |r, c| ((r * 2 + c) as f64 * 0.37).sin())];
        for k in 0..9 {
            leaves.push(Tensor::from_fn(2, 2, |r, c| {
                ((k * 4 + r * 2 + c) as f64 * 0.21).cos() * 0.5
            }));
        }
        leaves.push(Tensor::from_fn(1, 2, |_, c| 0.05 * (c as f64 + 1.0)));
        let region2 = region.clone();
        finite_diff_check(
            move |g, ls| {
                let x = g.leaf(ls[0].clone());
                let theta = std::array::from_fn(|k| g.leaf(ls[1 + k].clone()));
                let bias = g.leaf(ls[10].clone());
                let k = KernelIds {
                    theta,
                    bias: Some(bias),
                };
                let y = g.conv_h1(&region2, x, &k).unwrap();
                let target = g.leaf(Tensor::zeros(48, 2));
                let loss = g.mse(y, target);
                let mut ids = vec![x];
                ids.extend(theta);
                ids.push(bias);
                (ids, loss)
            },
            &leaves,
            1e-5,
        );
    }

    #[test]
    fn finite_diff_gaussian_bits() {
        let leaves = vec![
            Tensor::from_fn(4, 3, |r, c| 0.4 * (r as f64) - 0.3 * (c as f64)),
            Tensor::from_fn(4, 3, |r, c| 0.1 * ((r + c) as f64) - 0.2),
            Tensor::from_fn(4, 3, |r, c| 0.5 + 0.2 * ((r * 3 + c) as f64 % 5.0)),
        ];
        finite_diff_check(
            |g, ls| {
                let y = g.leaf(ls[0].clone());
                let mu = g.leaf(ls[1].clone());
                let sigma = g.leaf(ls[2].clone());
                let loss = g.gaussian_bits(y, mu, sigma);
                (vec![y, mu, sigma], loss)
            },
            &leaves,
            1e-5,
        );
    }
}
