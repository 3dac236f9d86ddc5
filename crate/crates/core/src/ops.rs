//! Linear operators on the sphere: 0/1/n-hop convolution, strided
//! downsampling, causally masked convolution, transposed convolution,
//! pixel-shuffle unpooling, and patch extraction.
//!
//! Every operator is a pure function of its inputs. The per-element
//! accumulation order is fixed (bias, center, then neighbor slots 0..8,
//! each summed over input channels in order) so that the parallel
//! full-field path and the sequential decoding path produce bit-identical
//! results.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::healpix::{HealpixGrid, NEIGHBOR_SLOTS};
use crate::signal::SphereSignal;
use crate::tensor::{accumulate_row, Tensor};

/// Weights of one spherical kernel: a center matrix, one matrix per
/// neighbor slot, and an optional bias row.
#[derive(Debug, Clone)]
pub struct SphericalKernel {
    /// theta[0] is the kernel center; theta[1 + slot] is aligned with the
    /// grid's neighbor slot order.
    pub theta: [Tensor; 9],
    pub bias: Option<Tensor>,
}

impl SphericalKernel {
    pub fn new(theta: [Tensor; 9], bias: Option<Tensor>) -> Result<Self> {
        let k = Self { theta, bias };
        k.dims()?;
        Ok(k)
    }

    /// All nine matrices share (l_in, l_out); the bias row must match l_out.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (li, lo) = (self.theta[0].rows(), self.theta[0].cols());
        for t in &self.theta {
            if t.rows() != li || t.cols() != lo {
                return Err(Error::ShapeMismatch(
                    "kernel matrices disagree on shape".into(),
                ));
            }
        }
        if let Some(b) = &self.bias {
            if b.rows() != 1 || b.cols() != lo {
                return Err(Error::ShapeMismatch("kernel bias width mismatch".into()));
            }
        }
        Ok((li, lo))
    }

    /// Trainable scalar count: (9 * l_in + 1) * l_out with bias,
    /// 9 * l_in * l_out without.
    pub fn param_count(&self) -> usize {
        let n: usize = self.theta.iter().map(Tensor::len).sum();
        n + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Identifies a contiguous nested block extracted from a larger sphere.
/// `root` is the pixel index at resolution `n_side >> depth` whose
/// descendants form the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchFrame {
    pub root: usize,
    pub depth: u32,
    pub n_side: u32,
}

/// The index domain an operator runs over: the full sphere or a nested
/// patch of it. Out-of-domain neighbors read as missing, which is the same
/// `w = 0` rule the sphere applies at its 24 seven-neighbor pixels.
#[derive(Clone)]
pub struct Region {
    grid: Arc<HealpixGrid>,
    base: usize,
    len: usize,
}

impl Region {
    pub fn full(grid: Arc<HealpixGrid>) -> Self {
        let len = grid.n_pix();
        Self { grid, base: 0, len }
    }

    pub fn patch(grid: Arc<HealpixGrid>, frame: PatchFrame) -> Result<Self> {
        if grid.n_side() != frame.n_side {
            return Err(Error::GridMismatch {
                expected: frame.n_side,
                got: grid.n_side(),
            });
        }
        let len = 1usize << (2 * frame.depth);
        let base = frame.root.checked_shl(2 * frame.depth).unwrap_or(usize::MAX);
        if base.saturating_add(len) > grid.n_pix() {
            return Err(Error::IndexOutOfRange {
                index: base + len - 1,
                len: grid.n_pix(),
            });
        }
        Ok(Self { grid, base, len })
    }

    pub fn grid(&self) -> &Arc<HealpixGrid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_side(&self) -> u32 {
        self.grid.n_side()
    }

    /// Neighbor lookup in region-local indices.
    #[inline]
    pub fn neighbor(&self, i: usize, slot: usize) -> Option<usize> {
        let j = self.grid.neighbor(self.base + i, slot)?;
        if j >= self.base && j < self.base + self.len {
            Some(j - self.base)
        } else {
            None
        }
    }

    /// The same region one resolution level down (quarter the pixels).
    pub fn coarser(&self, coarse_grid: Arc<HealpixGrid>) -> Result<Region> {
        if coarse_grid.n_side() * 2 != self.n_side() {
            return Err(Error::GridMismatch {
                expected: self.n_side() / 2,
                got: coarse_grid.n_side(),
            });
        }
        Ok(Region {
            grid: coarse_grid,
            base: self.base / 4,
            len: self.len / 4,
        })
    }

    /// The same region one resolution level up (four times the pixels).
    pub fn finer(&self, fine_grid: Arc<HealpixGrid>) -> Result<Region> {
        if fine_grid.n_side() != self.n_side() * 2 {
            return Err(Error::GridMismatch {
                expected: self.n_side() * 2,
                got: fine_grid.n_side(),
            });
        }
        Ok(Region {
            grid: fine_grid,
            base: self.base * 4,
            len: self.len * 4,
        })
    }
}

fn check_channels(x: &Tensor, li: usize) -> Result<()> {
    if x.cols() != li {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            x.cols(),
            li
        )));
    }
    Ok(())
}

fn check_rows(region: &Region, x: &Tensor) -> Result<()> {
    if x.rows() != region.len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} rows, region has {} pixels",
            x.rows(),
            region.len()
        )));
    }
    Ok(())
}

fn bias_broadcast(rows: usize, cols: usize, bias: Option<&Tensor>) -> Tensor {
    match bias {
        Some(b) => {
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(b.row(0));
            }
            out
        }
        None => Tensor::zeros(rows, cols),
    }
}

/// 0-hop convolution: a per-pixel linear map.
pub fn conv_h0(x: &Tensor, theta0: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    check_channels(x, theta0.rows())?;
    if let Some(b) = bias {
        if b.rows() != 1 || b.cols() != theta0.cols() {
            return Err(Error::ShapeMismatch("bias width mismatch".into()));
        }
    }
    let mut out = bias_broadcast(x.rows(), theta0.cols(), bias);
    out.matmul_acc(x, theta0);
    Ok(out)
}

/// Gradients of [`conv_h0`]: (d_x, d_theta0, d_bias).
pub fn conv_h0_vjp(x: &Tensor, theta0: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = g.matmul_transpose(theta0);
    let dt = x.transpose_matmul(g);
    let db = g.col_sums();
    (dx, dt, db)
}

/// 1-hop spherical convolution: center term plus the eight neighbor terms,
/// with missing neighbors contributing zero.
pub fn conv_h1(region: &Region, x: &Tensor, kernel: &SphericalKernel) -> Result<Tensor> {
    let (li, lo) = kernel.dims()?;
    check_channels(x, li)?;
    check_rows(region, x)?;
    let mut out = bias_broadcast(region.len(), lo, kernel.bias.as_ref());
    out.data_mut()
        .par_chunks_mut(lo)
        .enumerate()
        .for_each(|(i, row)| {
            accumulate_row(row, x.row(i), &kernel.theta[0]);
            for slot in 0..NEIGHBOR_SLOTS {
                if let Some(j) = region.neighbor(i, slot) {
                    accumulate_row(row, x.row(j), &kernel.theta[1 + slot]);
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv_h1`]: (d_x, d_theta, d_bias).
pub fn conv_h1_vjp(
    region: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    g: &Tensor,
) -> (Tensor, [Tensor; 9], Tensor) {
    let mut dx = g.matmul_transpose(&kernel.theta[0]);
    let mut dtheta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(0, 0));
    dtheta[0] = x.transpose_matmul(g);
    for slot in 0..NEIGHBOR_SLOTS {
        let gx = gather_slot(region, x, slot, false);
        dtheta[1 + slot] = gx.transpose_matmul(g);
        let u = g.matmul_transpose(&kernel.theta[1 + slot]);
        for i in 0..region.len() {
            if let Some(j) = region.neighbor(i, slot) {
                let src = u.row(i).to_vec();
                for (d, s) in dx.row_mut(j).iter_mut().zip(&src) {
                    *d += s;
                }
            }
        }
    }
    (dx, dtheta, g.col_sums())
}

/// Causally masked 1-hop convolution: only neighbors with a smaller nested
/// index contribute, and the center term is dropped so the output at pixel
/// i never reads x_i itself.
pub fn masked_conv_h1(region: &Region, x: &Tensor, kernel: &SphericalKernel) -> Result<Tensor> {
    let (li, lo) = kernel.dims()?;
    check_channels(x, li)?;
    check_rows(region, x)?;
    let mut out = bias_broadcast(region.len(), lo, kernel.bias.as_ref());
    out.data_mut()
        .par_chunks_mut(lo)
        .enumerate()
        .for_each(|(i, row)| masked_context_row(region, x, kernel, i, row));
    Ok(out)
}

/// Accumulates the masked-convolution output for one pixel into `row`.
/// The sequential entropy decoder calls this directly; the full-field path
/// above must keep the identical slot and channel order.
pub fn masked_context_row(
    region: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    i: usize,
    row: &mut [f64],
) {
    for slot in 0..NEIGHBOR_SLOTS {
        if let Some(j) = region.neighbor(i, slot) {
            if j < i {
                accumulate_row(row, x.row(j), &kernel.theta[1 + slot]);
            }
        }
    }
}

/// Gradients of [`masked_conv_h1`]; d_theta[0] stays zero since the center
/// weights never enter the forward pass.
pub fn masked_conv_h1_vjp(
    region: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    g: &Tensor,
) -> (Tensor, [Tensor; 9], Tensor) {
    let (li, _) = kernel.dims().expect("validated in forward");
    let mut dx = Tensor::zeros(x.rows(), li);
    let mut dtheta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(0, 0));
    dtheta[0] = Tensor::zeros(kernel.theta[0].rows(), kernel.theta[0].cols());
    for slot in 0..NEIGHBOR_SLOTS {
        let gx = gather_slot(region, x, slot, true);
        dtheta[1 + slot] = gx.transpose_matmul(g);
        let u = g.matmul_transpose(&kernel.theta[1 + slot]);
        for i in 0..region.len() {
            if let Some(j) = region.neighbor(i, slot) {
                if j < i {
                    let src = u.row(i).to_vec();
                    for (d, s) in dx.row_mut(j).iter_mut().zip(&src) {
                        *d += s;
                    }
                }
            }
        }
    }
    (dx, dtheta, g.col_sums())
}

/// Strided downsampling convolution: the 1-hop kernel is evaluated on the
/// fine grid only at child-0 pixels 4i, and output row i keeps that value.
pub fn conv_down4(fine: &Region, x: &Tensor, kernel: &SphericalKernel) -> Result<Tensor> {
    if fine.n_side() < 2 {
        return Err(Error::InvalidResolution(fine.n_side() / 2));
    }
    let (li, lo) = kernel.dims()?;
    check_channels(x, li)?;
    check_rows(fine, x)?;
    let n_coarse = fine.len() / 4;
    let mut out = bias_broadcast(n_coarse, lo, kernel.bias.as_ref());
    out.data_mut()
        .par_chunks_mut(lo)
        .enumerate()
        .for_each(|(i, row)| {
            let fi = 4 * i;
            accumulate_row(row, x.row(fi), &kernel.theta[0]);
            for slot in 0..NEIGHBOR_SLOTS {
                if let Some(j) = fine.neighbor(fi, slot) {
                    accumulate_row(row, x.row(j), &kernel.theta[1 + slot]);
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv_down4`].
pub fn conv_down4_vjp(
    fine: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    g: &Tensor,
) -> (Tensor, [Tensor; 9], Tensor) {
    let (li, _) = kernel.dims().expect("validated in forward");
    let n_coarse = fine.len() / 4;
    let mut dx = Tensor::zeros(x.rows(), li);
    let mut dtheta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(0, 0));

    let x0 = gather_child0(fine, x, None);
    dtheta[0] = x0.transpose_matmul(g);
    let u0 = g.matmul_transpose(&kernel.theta[0]);
    for i in 0..n_coarse {
        let src = u0.row(i).to_vec();
        for (d, s) in dx.row_mut(4 * i).iter_mut().zip(&src) {
            *d += s;
        }
    }
    for slot in 0..NEIGHBOR_SLOTS {
        let xk = gather_child0(fine, x, Some(slot));
        dtheta[1 + slot] = xk.transpose_matmul(g);
        let u = g.matmul_transpose(&kernel.theta[1 + slot]);
        for i in 0..n_coarse {
            if let Some(j) = fine.neighbor(4 * i, slot) {
                let src = u.row(i).to_vec();
                for (d, s) in dx.row_mut(j).iter_mut().zip(&src) {
                    *d += s;
                }
            }
        }
    }
    (dx, dtheta, g.col_sums())
}

/// Transposed convolution for 4x upsampling: every coarse pixel scatters
/// its weighted kernel onto the fine grid, centered at child pixel 4i,
/// with overlaps accumulating.
pub fn tconv_up4(coarse: &Region, fine: &Region, x: &Tensor, kernel: &SphericalKernel) -> Result<Tensor> {
    if fine.n_side() != coarse.n_side() * 2 || fine.len() != coarse.len() * 4 {
        return Err(Error::GridMismatch {
            expected: coarse.n_side() * 2,
            got: fine.n_side(),
        });
    }
    let (li, lo) = kernel.dims()?;
    check_channels(x, li)?;
    check_rows(coarse, x)?;
    let mut out = bias_broadcast(fine.len(), lo, kernel.bias.as_ref());
    let center = x.matmul(&kernel.theta[0]);
    for i in 0..coarse.len() {
        let fi = 4 * i;
        let src = center.row(i);
        let dst = out.row_mut(fi);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    for slot in 0..NEIGHBOR_SLOTS {
        let contrib = x.matmul(&kernel.theta[1 + slot]);
        for i in 0..coarse.len() {
            if let Some(j) = fine.neighbor(4 * i, slot) {
                let src = contrib.row(i).to_vec();
                for (d, s) in out.row_mut(j).iter_mut().zip(&src) {
                    *d += s;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`tconv_up4`]. The input gradient is the adjoint gather:
/// read the fine gradient at 4i and its fine neighbors with transposed
/// weights.
pub fn tconv_up4_vjp(
    coarse: &Region,
    fine: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    g: &Tensor,
) -> (Tensor, [Tensor; 9], Tensor) {
    let (li, _) = kernel.dims().expect("validated in forward");
    let mut dx = Tensor::zeros(coarse.len(), li);
    let mut dtheta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(0, 0));

    let u0 = gather_child0(fine, g, None);
    dx.add_assign(&u0.matmul_transpose(&kernel.theta[0]));
    dtheta[0] = x.transpose_matmul(&u0);
    for slot in 0..NEIGHBOR_SLOTS {
        let uk = gather_child0(fine, g, Some(slot));
        dx.add_assign(&uk.matmul_transpose(&kernel.theta[1 + slot]));
        dtheta[1 + slot] = x.transpose_matmul(&uk);
    }
    (dx, dtheta, g.col_sums())
}

/// Pixel-shuffle upsampling: a 1-hop convolution with 4 * l_out channels
/// at the coarse resolution, whose channel group c lands on child 4i + c.
pub fn shuffle_up4(coarse: &Region, x: &Tensor, kernel: &SphericalKernel) -> Result<Tensor> {
    let (_, lo4) = kernel.dims()?;
    if lo4 % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pixel shuffle needs output channels divisible by 4, got {lo4}"
        )));
    }
    let conv = conv_h1(coarse, x, kernel)?;
    Ok(shuffle_rearrange(&conv))
}

/// Moves channel group c of coarse pixel i to fine pixel 4i + c.
pub fn shuffle_rearrange(conv: &Tensor) -> Tensor {
    let lo = conv.cols() / 4;
    let mut out = Tensor::zeros(conv.rows() * 4, lo);
    for i in 0..conv.rows() {
        let src = conv.row(i);
        for c in 0..4 {
            out.row_mut(4 * i + c).copy_from_slice(&src[c * lo..(c + 1) * lo]);
        }
    }
    out
}

/// Adjoint of [`shuffle_rearrange`].
pub fn shuffle_rearrange_adjoint(g: &Tensor) -> Tensor {
    let lo = g.cols();
    let n = g.rows() / 4;
    let mut out = Tensor::zeros(n, 4 * lo);
    for i in 0..n {
        for c in 0..4 {
            let src = g.row(4 * i + c).to_vec();
            out.row_mut(i)[c * lo..(c + 1) * lo].copy_from_slice(&src);
        }
    }
    out
}

/// Gradients of [`shuffle_up4`].
pub fn shuffle_up4_vjp(
    coarse: &Region,
    x: &Tensor,
    kernel: &SphericalKernel,
    g: &Tensor,
) -> (Tensor, [Tensor; 9], Tensor) {
    let gc = shuffle_rearrange_adjoint(g);
    conv_h1_vjp(coarse, x, kernel, &gc)
}

/// Cascade of n 1-hop convolutions with the stage outputs summed, giving
/// an n-hop receptive field.
pub fn conv_hn(region: &Region, x: &Tensor, kernels: &[SphericalKernel]) -> Result<Tensor> {
    if kernels.is_empty() {
        return Err(Error::Config("conv_hn needs at least one kernel".into()));
    }
    let mut stage = conv_h1(region, x, &kernels[0])?;
    let mut sum = stage.clone();
    for kernel in &kernels[1..] {
        stage = conv_h1(region, &stage, kernel)?;
        sum.add_assign(&stage);
    }
    Ok(sum)
}

/// Copies the contiguous nested block under `root` (at resolution
/// `n_side >> depth`) out of a full-sphere signal.
pub fn extract_patch(x: &SphereSignal, root: usize, depth: u32) -> Result<(Tensor, PatchFrame)> {
    let len = 1usize
        .checked_shl(2 * depth)
        .ok_or_else(|| Error::InvalidInput("patch depth overflow".into()))?;
    let base = root
        .checked_mul(len)
        .ok_or_else(|| Error::InvalidInput("patch root overflow".into()))?;
    if base + len > x.n_pix() {
        return Err(Error::IndexOutOfRange {
            index: base + len - 1,
            len: x.n_pix(),
        });
    }
    let cols = x.channels();
    let mut out = Tensor::zeros(len, cols);
    for i in 0..len {
        out.row_mut(i).copy_from_slice(x.values().row(base + i));
    }
    Ok((
        out,
        PatchFrame {
            root,
            depth,
            n_side: x.n_side(),
        },
    ))
}

/// Rows of x read through one neighbor slot; missing neighbors give zero
/// rows. With `causal`, only neighbors with smaller index are read. For a
/// fine region, pass the coarse row count implicitly by calling
/// [`gather_child0`] instead.
fn gather_slot(region: &Region, x: &Tensor, slot: usize, causal: bool) -> Tensor {
    let mut out = Tensor::zeros(region.len(), x.cols());
    for i in 0..region.len() {
        if let Some(j) = region.neighbor(i, slot) {
            if !causal || j < i {
                out.row_mut(i).copy_from_slice(x.row(j));
            }
        }
    }
    out
}

/// Rows of a fine-grid tensor read at child-0 pixels 4i (slot `None`) or at
/// their fine neighbors (slot `Some`); one row per coarse pixel.
fn gather_child0(fine: &Region, x: &Tensor, slot: Option<usize>) -> Tensor {
    let n_coarse = fine.len() / 4;
    let mut out = Tensor::zeros(n_coarse, x.cols());
    for i in 0..n_coarse {
        let src = match slot {
            None => Some(4 * i),
            Some(s) => fine.neighbor(4 * i, s),
        };
        if let Some(j) = src {
            out.row_mut(i).copy_from_slice(x.row(j));
        }
    }
    out
}

/// Convenience wrapper running [`conv_h1`] on a full-sphere signal.
pub fn conv_h1_signal(
    grid: &Arc<HealpixGrid>,
    x: &SphereSignal,
    kernel: &SphericalKernel,
) -> Result<SphereSignal> {
    if grid.n_side() != x.n_side() {
        return Err(Error::GridMismatch {
            expected: x.n_side(),
            got: grid.n_side(),
        });
    }
    let region = Region::full(Arc::clone(grid));
    let out = conv_h1(&region, x.values(), kernel)?;
    SphereSignal::new(x.n_side(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::healpix::HealpixGrid;

    fn grid(n_side: u32) -> Arc<HealpixGrid> {
        Arc::new(HealpixGrid::new(n_side).unwrap())
    }

    fn ones_kernel(li: usize, lo: usize) -> SphericalKernel {
        SphericalKernel::new(
            std::array::from_fn(|_| Tensor::from_fn(li, lo, |_, _| 1.0)),
            None,
        )
        .unwrap()
    }

    fn identity_kernel(c: usize) -> SphericalKernel {
        let mut theta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(c, c));
        theta[0] = Tensor::from_fn(c, c, |r, col| if r == col { 1.0 } else { 0.0 });
        SphericalKernel::new(theta, None).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        let x = Tensor::from_fn(48, 3, |r, c| (r * 3 + c) as f64 * 0.1);
        let out = conv_h1(&region, &x, &identity_kernel(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn constant_input_counts_neighbors() {
        // All-ones 1x1 kernels on a constant signal count 1 + valid slots.
        let g = grid(4);
        let region = Region::full(Arc::clone(&g));
        let c = 0.75;
        let x = Tensor::from_fn(region.len(), 1, |_, _| c);
        let out = conv_h1(&region, &x, &ones_kernel(1, 1)).unwrap();
        let mut eights = 0;
        let mut sevens = 0;
        for i in 0..region.len() {
            let valid = (0..NEIGHBOR_SLOTS).filter(|&s| region.neighbor(i, s).is_some()).count();
            let want = c * (valid + 1) as f64;
            assert!((out.at(i, 0) - want).abs() < 1e-12);
            if valid == 8 {
                eights += 1;
            } else {
                sevens += 1;
            }
        }
        assert_eq!(sevens, 24);
        assert_eq!(eights, region.len() - 24);
    }

    #[test]
    fn conv_h0_equals_conv_h1_without_neighbors() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        let x = Tensor::from_fn(48, 2, |r, c| ((r + 1) as f64).sin() + c as f64);
        let theta0 = Tensor::from_fn(2, 3, |r, c| (r as f64 - c as f64) * 0.3);
        let bias = Tensor::from_fn(1, 3, |_, c| c as f64 * 0.1);
        let mut theta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(2, 3));
        theta[0] = theta0.clone();
        let kernel = SphericalKernel::new(theta, Some(bias.clone())).unwrap();
        let a = conv_h0(&x, &theta0, Some(&bias)).unwrap();
        let b = conv_h1(&region, &x, &kernel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_conv_first_pixel_gets_bias_only() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        let x = Tensor::from_fn(48, 2, |r, c| (r + c) as f64);
        let bias = Tensor::from_vec(1, 2, vec![0.25, -1.5]);
        let kernel = SphericalKernel::new(
            std::array::from_fn(|_| Tensor::from_fn(2, 2, |_, _| 1.0)),
            Some(bias.clone()),
        )
        .unwrap();
        let out = masked_conv_h1(&region, &x, &kernel).unwrap();
        assert_eq!(out.row(0), bias.row(0));
    }

    #[test]
    fn masked_conv_pixel6_reads_exactly_1345() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        // Indicator input: channel value = pixel index. With 1x1 sum kernel
        // the output at pixel 6 is the sum of contributing indices.
        let x = Tensor::from_fn(48, 1, |r, _| r as f64);
        let out = masked_conv_h1(&region, &x, &ones_kernel(1, 1)).unwrap();
        assert_eq!(out.at(6, 0), (1 + 3 + 4 + 5) as f64);
    }

    #[test]
    fn masked_conv_ignores_future_pixels() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        let kernel = SphericalKernel::new(
            std::array::from_fn(|k| Tensor::from_fn(1, 1, |_, _| 0.3 + 0.1 * k as f64)),
            None,
        )
        .unwrap();
        let x = Tensor::from_fn(48, 1, |r, _| (r as f64 * 0.7).cos());
        let base = masked_conv_h1(&region, &x, &kernel).unwrap();
        for i in [0usize, 6, 17, 40] {
            for j in i..48 {
                let mut x2 = x.clone();
                x2.set(j, 0, x2.at(j, 0) + 10.0);
                let out = masked_conv_h1(&region, &x2, &kernel).unwrap();
                assert_eq!(out.at(i, 0), base.at(i, 0), "out_{i} changed by x_{j}");
            }
        }
    }

    #[test]
    fn down4_identity_center_subsamples() {
        let g = grid(4);
        let fine = Region::full(Arc::clone(&g));
        let x = Tensor::from_fn(192, 2, |r, c| (r * 2 + c) as f64);
        let out = conv_down4(&fine, &x, &identity_kernel(2)).unwrap();
        assert_eq!(out.rows(), 48);
        for i in 0..48 {
            assert_eq!(out.row(i), x.row(4 * i));
        }
    }

    #[test]
    fn down4_rejects_base_resolution() {
        let g = grid(1);
        let fine = Region::full(Arc::clone(&g));
        let x = Tensor::zeros(12, 1);
        assert!(conv_down4(&fine, &x, &ones_kernel(1, 1)).is_err());
    }

    #[test]
    fn tconv_zero_kernel_gives_zero() {
        let cg = grid(2);
        let fg = grid(4);
        let coarse = Region::full(Arc::clone(&cg));
        let fine = Region::full(Arc::clone(&fg));
        let kernel = SphericalKernel::new(std::array::from_fn(|_| Tensor::zeros(2, 3)), None).unwrap();
        let x = Tensor::from_fn(48, 2, |r, c| (r + c) as f64);
        let out = tconv_up4(&coarse, &fine, &x, &kernel).unwrap();
        assert_eq!(out, Tensor::zeros(192, 3));
    }

    #[test]
    fn tconv_delta_footprint_is_child0_neighborhood() {
        let cg = grid(2);
        let fg = grid(4);
        let coarse = Region::full(Arc::clone(&cg));
        let fine = Region::full(Arc::clone(&fg));
        let p = 11usize;
        let mut x = Tensor::zeros(48, 1);
        x.set(p, 0, 1.0);
        let out = tconv_up4(&coarse, &fine, &x, &ones_kernel(1, 1)).unwrap();
        let mut expected: std::collections::BTreeSet<usize> = [4 * p].into_iter().collect();
        for slot in 0..NEIGHBOR_SLOTS {
            if let Some(j) = fine.neighbor(4 * p, slot) {
                expected.insert(j);
            }
        }
        for i in 0..192 {
            let want = if expected.contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(out.at(i, 0), want, "fine pixel {i}");
        }
    }

    #[test]
    fn shuffle_places_channel_groups_on_children() {
        let cg = grid(2);
        let coarse = Region::full(Arc::clone(&cg));
        // Identity-like kernel: center maps channel c to output 4 groups
        // carrying distinct constants per pixel row.
        let x = Tensor::from_fn(48, 1, |r, _| r as f64);
        let mut theta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(1, 4));
        theta[0] = Tensor::from_vec(1, 4, vec![1.0, 10.0, 100.0, 1000.0]);
        let kernel = SphericalKernel::new(theta, None).unwrap();
        let out = shuffle_up4(&coarse, &x, &kernel).unwrap();
        assert_eq!(out.rows(), 192);
        assert_eq!(out.cols(), 1);
        for i in 0..48 {
            assert_eq!(out.at(4 * i, 0), i as f64);
            assert_eq!(out.at(4 * i + 1, 0), i as f64 * 10.0);
            assert_eq!(out.at(4 * i + 2, 0), i as f64 * 100.0);
            assert_eq!(out.at(4 * i + 3, 0), i as f64 * 1000.0);
        }
    }

    #[test]
    fn shuffle_rejects_bad_channel_count() {
        let cg = grid(2);
        let coarse = Region::full(Arc::clone(&cg));
        let x = Tensor::zeros(48, 1);
        assert!(shuffle_up4(&coarse, &x, &ones_kernel(1, 3)).is_err());
    }

    #[test]
    fn param_count_formula() {
        let mut theta: [Tensor; 9] = std::array::from_fn(|_| Tensor::zeros(128, 192));
        theta[0] = Tensor::zeros(128, 192);
        let k = SphericalKernel::new(theta, Some(Tensor::zeros(1, 192))).unwrap();
        assert_eq!(k.param_count(), (9 * 128 + 1) * 192);
        assert_eq!(k.param_count(), 221_376);
    }

    #[test]
    fn patch_extraction_and_single_pixel() {
        let sig = SphereSignal::new(4, Tensor::from_fn(192, 1, |r, _| r as f64)).unwrap();
        let (frag, frame) = extract_patch(&sig, 3, 0).unwrap();
        assert_eq!(frag.rows(), 1);
        assert_eq!(frag.at(0, 0), 3.0);
        assert_eq!(frame, PatchFrame { root: 3, depth: 0, n_side: 4 });
        let (frag, _) = extract_patch(&sig, 2, 2).unwrap();
        assert_eq!(frag.rows(), 16);
        assert_eq!(frag.at(0, 0), 32.0);
        assert!(extract_patch(&sig, 12, 2).is_err());
    }

    #[test]
    fn conv_hn_reduces_to_h1_and_is_linear() {
        let g = grid(2);
        let region = Region::full(Arc::clone(&g));
        let k1 = ones_kernel(2, 3);
        let x = Tensor::from_fn(48, 2, |r, c| ((r * 5 + c) as f64 * 0.13).sin());
        let a = conv_hn(&region, &x, std::slice::from_ref(&k1)).unwrap();
        let b = conv_h1(&region, &x, &k1).unwrap();
        assert_eq!(a, b);

        let k2 = ones_kernel(3, 3);
        let y = Tensor::from_fn(48, 2, |r, c| ((r + 2 * c) as f64 * 0.21).cos());
        let lhs = conv_hn(
            &region,
            &x.scale(2.0).add(&y.scale(-0.5)),
            &[k1.clone(), k2.clone()],
        )
        .unwrap();
        let rhs = conv_hn(&region, &x, &[k1.clone(), k2.clone()])
            .unwrap()
            .scale(2.0)
            .add(&conv_hn(&region, &y, &[k1, k2]).unwrap().scale(-0.5));
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn two_hop_delta_support_matches_bfs() {
        let g = grid(4);
        let region = Region::full(Arc::clone(&g));
        let p = 77usize;
        let mut x = Tensor::zeros(192, 1);
        x.set(p, 0, 1.0);
        let out = conv_hn(&region, &x, &[ones_kernel(1, 1), ones_kernel(1, 1)]).unwrap();
        // BFS oracle over the neighbor table.
        let mut dist = vec![usize::MAX; 192];
        dist[p] = 0;
        let mut frontier = vec![p];
        for d in 1..=2 {
            let mut nextf = Vec::new();
            for &u in &frontier {
                for v in g.neighbors(u).unwrap().iter().flatten() {
                    if dist[*v] == usize::MAX {
                        dist[*v] = d;
                        nextf.push(*v);
                    }
                }
            }
            frontier = nextf;
        }
        for i in 0..192 {
            let inside = dist[i] <= 2;
            assert_eq!(out.at(i, 0) != 0.0, inside, "pixel {i} dist {}", dist[i]);
        }
    }

    #[test]
    fn patch_conv_matches_global_on_interior() {
        let g = grid(8);
        let full = Region::full(Arc::clone(&g));
        let sig = SphereSignal::new(
            8,
            Tensor::from_fn(768, 2, |r, c| ((r * 3 + c) as f64 * 0.05).sin()),
        )
        .unwrap();
        let kernel = SphericalKernel::new(
            std::array::from_fn(|k| Tensor::from_fn(2, 2, |r, c| ((k + r + 2 * c) as f64 * 0.3).cos())),
            Some(Tensor::from_vec(1, 2, vec![0.1, -0.2])),
        )
        .unwrap();
        let global = conv_h1(&full, sig.values(), &kernel).unwrap();

        let (frag, frame) = extract_patch(&sig, 5, 3).unwrap();
        let region = Region::patch(Arc::clone(&g), frame).unwrap();
        let local = conv_h1(&region, &frag, &kernel).unwrap();
        let base = 5 * 64;
        for i in 0..64 {
            let interior = (0..NEIGHBOR_SLOTS).all(|s| region.neighbor(i, s).is_some());
            if interior {
                assert_eq!(local.row(i), global.row(base + i), "interior pixel {i}");
            }
        }
        // The patch has interior pixels at all.
        assert!((0..64).any(|i| (0..NEIGHBOR_SLOTS).all(|s| region.neighbor(i, s).is_some())));
    }
}
