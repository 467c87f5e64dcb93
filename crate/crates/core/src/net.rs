//! The Q-network and its gradients, written directly on ndarray.
//!
//! Architecture, fixed by the grid shape and action count:
//!
//! ```text
//! input  [4, 18, 26]
//! conv1  32 filters 6x6 stride 2 -> [32, 7, 11], leaky ReLU
//! conv2  64 filters 3x3 stride 2 -> [64, 3, 5],  leaky ReLU
//! fc     960 -> 100,                             leaky ReLU
//! out    100 -> 5, linear
//! ```
//!
//! Convolutions run as im2col plus one matrix product per layer, which turns
//! both the forward and the backward pass into a handful of gemm calls. The
//! whole module is generic over `f32`/`f64`: training runs in `f32`, while
//! the finite-difference tests instantiate `f64` where the comparisons are
//! meaningful.

use crate::env::Action;
use crate::grid::{CHANNELS, COLS, ROWS};
use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONV1_FILTERS: usize = 32;
pub const CONV1_KERNEL: usize = 6;
pub const CONV2_FILTERS: usize = 64;
pub const CONV2_KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const CONV1_H: usize = (ROWS - CONV1_KERNEL) / STRIDE + 1;
pub const CONV1_W: usize = (COLS - CONV1_KERNEL) / STRIDE + 1;
pub const CONV2_H: usize = (CONV1_H - CONV2_KERNEL) / STRIDE + 1;
pub const CONV2_W: usize = (CONV1_W - CONV2_KERNEL) / STRIDE + 1;
pub const FLAT: usize = CONV2_FILTERS * CONV2_H * CONV2_W;
pub const HIDDEN: usize = 100;

/// Negative-side slope of the leaky ReLU. The subgradient at zero is also
/// this value.
pub const LEAKY_SLOPE: f64 = 0.01;

/// All learnable tensors. The same container holds parameters, gradients,
/// and optimizer state, so everything that walks parameters does it through
/// [`Params::layers`] in this one canonical order.
#[derive(Clone, Debug)]
pub struct Params<F> {
    pub conv1_w: Array4<F>,
    pub conv1_b: Array1<F>,
    pub conv2_w: Array4<F>,
    pub conv2_b: Array1<F>,
    pub fc_w: Array2<F>,
    pub fc_b: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: NdFloat> Params<F> {
    pub fn zeros() -> Params<F> {
        Params {
            conv1_w: Array4::zeros((CONV1_FILTERS, CHANNELS, CONV1_KERNEL, CONV1_KERNEL)),
            conv1_b: Array1::zeros(CONV1_FILTERS),
            conv2_w: Array4::zeros((CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL)),
            conv2_b: Array1::zeros(CONV2_FILTERS),
            fc_w: Array2::zeros((HIDDEN, FLAT)),
            fc_b: Array1::zeros(HIDDEN),
            out_w: Array2::zeros((Action::COUNT, HIDDEN)),
            out_b: Array1::zeros(Action::COUNT),
        }
    }

    /// Uniform He initialization: each weight tensor is drawn from
    /// U(-l, l) with l = sqrt(6 / fan_in); biases start at zero. Draws are
    /// made in `f64` in a fixed order so every float width sees the same
    /// underlying numbers.
    pub fn he_init(seed: u64) -> Params<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros();
        let mut fill = |w: &mut [F], fan_in: usize| {
            let l = (6.0 / fan_in as f64).sqrt();
            for v in w {
                *v = F::from(rng.gen_range(-l..l)).unwrap();
            }
        };
        fill(p.conv1_w.as_slice_mut().unwrap(), CHANNELS * CONV1_KERNEL * CONV1_KERNEL);
        fill(p.conv2_w.as_slice_mut().unwrap(), CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL);
        fill(p.fc_w.as_slice_mut().unwrap(), FLAT);
        fill(p.out_w.as_slice_mut().unwrap(), HIDDEN);
        p
    }

    pub fn layers(&self) -> [(&'static str, ArrayViewD<'_, F>); 8] {
        [
            ("conv1_w", self.conv1_w.view().into_dyn()),
            ("conv1_b", self.conv1_b.view().into_dyn()),
            ("conv2_w", self.conv2_w.view().into_dyn()),
            ("conv2_b", self.conv2_b.view().into_dyn()),
            ("fc_w", self.fc_w.view().into_dyn()),
            ("fc_b", self.fc_b.view().into_dyn()),
            ("out_w", self.out_w.view().into_dyn()),
            ("out_b", self.out_b.view().into_dyn()),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, F>); 8] {
        [
            ("conv1_w", self.conv1_w.view_mut().into_dyn()),
            ("conv1_b", self.conv1_b.view_mut().into_dyn()),
            ("conv2_w", self.conv2_w.view_mut().into_dyn()),
            ("conv2_b", self.conv2_b.view_mut().into_dyn()),
            ("fc_w", self.fc_w.view_mut().into_dyn()),
            ("fc_b", self.fc_b.view_mut().into_dyn()),
            ("out_w", self.out_w.view_mut().into_dyn()),
            ("out_b", self.out_b.view_mut().into_dyn()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, v)| v.len()).sum()
    }
}

fn leaky<F: NdFloat>(z: F) -> F {
    if z > F::zero() {
        z
    } else {
        z * F::from(LEAKY_SLOPE).unwrap()
    }
}

fn leaky_grad<F: NdFloat>(z: F) -> F {
    if z > F::zero() {
        F::one()
    } else {
        F::from(LEAKY_SLOPE).unwrap()
    }
}

/// Unrolls stride-`stride` valid-padding patches of `x` into a matrix with
/// one patch per column, batch patches side by side.
fn im2col<F: NdFloat>(x: &Array4<F>, k: usize, stride: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let p = oh * ow;
    let mut cols = Array2::zeros((c * k * k, b * p));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..k {
                for j in 0..k {
                    let row = (ci * k + i) * k + j;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            cols[[row, bi * p + oy * ow + ox]] =
                                x[[bi, ci, oy * stride + i, ox * stride + j]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im<F: NdFloat>(
    dcols: &Array2<F>,
    dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Array4<F> {
    let (b, c, h, w) = dim;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let p = oh * ow;
    let mut dx = Array4::zeros(dim);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..k {
                for j in 0..k {
                    let row = (ci * k + i) * k + j;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[[bi, ci, oy * stride + i, ox * stride + j]] +=
                                dcols[[row, bi * p + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<F: NdFloat>(
    x: &Array4<F>,
    w: &Array4<F>,
    b: &Array1<F>,
    stride: usize,
) -> (Array4<F>, Array2<F>) {
    let (bsz, _, h, wd) = x.dim();
    let (oc, _, k, _) = w.dim();
    let oh = (h - k) / stride + 1;
    let ow = (wd - k) / stride + 1;
    let p = oh * ow;
    let cols = im2col(x, k, stride);
    let w_mat = w.view().into_shape_with_order((oc, w.len() / oc)).unwrap();
    let prod = w_mat.dot(&cols);
    let mut z = Array4::zeros((bsz, oc, oh, ow));
    for bi in 0..bsz {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    z[[bi, o, oy, ox]] = prod[[o, bi * p + oy * ow + ox]] + b[o];
                }
            }
        }
    }
    (z, cols)
}

/// Returns (dw, db, dcols). The caller turns `dcols` into an input gradient
/// with [`col2im`] when one is needed.
fn conv_backward<F: NdFloat>(
    dz: &Array4<F>,
    cols: &Array2<F>,
    w: &Array4<F>,
) -> (Array4<F>, Array1<F>, Array2<F>) {
    let (bsz, oc, oh, ow) = dz.dim();
    let p = oh * ow;
    let mut dz_mat = Array2::zeros((oc, bsz * p));
    for bi in 0..bsz {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    dz_mat[[o, bi * p + oy * ow + ox]] = dz[[bi, o, oy, ox]];
                }
            }
        }
    }
    let db = dz_mat.sum_axis(ndarray::Axis(1));
    let dw_mat = dz_mat.dot(&cols.t());
    let dw = dw_mat.into_shape_with_order(w.raw_dim()).unwrap();
    let w_mat = w.view().into_shape_with_order((oc, w.len() / oc)).unwrap();
    let dcols = w_mat.t().dot(&dz_mat);
    (dw, db, dcols)
}

/// Everything the backward pass reuses from a forward pass.
pub struct Cache<F> {
    x: Array4<F>,
    cols1: Array2<F>,
    z1: Array4<F>,
    cols2: Array2<F>,
    z2: Array4<F>,
    flat: Array2<F>,
    z_fc: Array2<F>,
    a_fc: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct QNetwork<F> {
    pub params: Params<F>,
}

impl<F: NdFloat> QNetwork<F> {
    pub fn new(seed: u64) -> QNetwork<F> {
        QNetwork { params: Params::he_init(seed) }
    }

    /// Q-values for a batch of grids, shape `[batch, actions]`.
    pub fn forward(&self, x: &Array4<F>) -> Array2<F> {
        self.forward_cached(x.clone()).0
    }

    pub fn forward_cached(&self, x: Array4<F>) -> (Array2<F>, Cache<F>) {
        let p = &self.params;
        let (z1, cols1) = conv_forward(&x, &p.conv1_w, &p.conv1_b, STRIDE);
        let a1 = z1.mapv(leaky);
        let (z2, cols2) = conv_forward(&a1, &p.conv2_w, &p.conv2_b, STRIDE);
        let bsz = x.dim().0;
        let flat = z2.mapv(leaky).into_shape_with_order((bsz, FLAT)).unwrap();
        let z_fc = flat.dot(&p.fc_w.t()) + &p.fc_b;
        let a_fc = z_fc.mapv(leaky);
        let q = a_fc.dot(&p.out_w.t()) + &p.out_b;
        (q, Cache { x, cols1, z1, cols2, z2, flat, z_fc, a_fc })
    }

    /// Q-values for a single grid.
    pub fn forward_one(&self, grid: &ndarray::Array3<F>) -> Array1<F> {
        let x = grid
            .view()
            .into_shape_with_order((1, CHANNELS, ROWS, COLS))
            .unwrap()
            .to_owned();
        let q = self.forward(&x);
        q.row(0).to_owned()
    }

    /// Backpropagates `dq` (gradient of a scalar loss with respect to the
    /// Q-output) through the cached forward pass. The gradient with respect
    /// to the input grids is never needed and is not formed.
    pub fn backward(&self, cache: &Cache<F>, dq: &Array2<F>) -> Params<F> {
        let p = &self.params;
        let mut g = Params::zeros();

        g.out_w = dq.t().dot(&cache.a_fc);
        g.out_b = dq.sum_axis(ndarray::Axis(0));
        let da_fc = dq.dot(&p.out_w);
        let dz_fc = da_fc * cache.z_fc.mapv(leaky_grad);

        g.fc_w = dz_fc.t().dot(&cache.flat);
        g.fc_b = dz_fc.sum_axis(ndarray::Axis(0));
        let dflat = dz_fc.dot(&p.fc_w);

        let bsz = cache.x.dim().0;
        let da2 = dflat
            .into_shape_with_order((bsz, CONV2_FILTERS, CONV2_H, CONV2_W))
            .unwrap();
        let dz2 = da2 * cache.z2.mapv(leaky_grad);
        let (dw2, db2, dcols2) = conv_backward(&dz2, &cache.cols2, &p.conv2_w);
        g.conv2_w = dw2;
        g.conv2_b = db2;

        let da1 = col2im(
            &dcols2,
            (bsz, CONV1_FILTERS, CONV1_H, CONV1_W),
            CONV2_KERNEL,
            STRIDE,
        );
        let dz1 = da1 * cache.z1.mapv(leaky_grad);
        let (dw1, db1, _) = conv_backward(&dz1, &cache.cols1, &p.conv1_w);
        g.conv1_w = dw1;
        g.conv1_b = db1;
        g
    }
}
