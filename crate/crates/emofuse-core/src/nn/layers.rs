//! Layers with exact analytical backward passes.
//!
//! Every layer owns its parameters, gradient buffers, and the forward
//! cache its backward pass needs. Forward passes take `keep_cache: bool`;
//! inference paths pass `false` and skip the bookkeeping. Sequence layers
//! operate on B × T × D batches whose padded suffix positions hold zeros;
//! callers re-apply [`apply_mask`] after each layer so that convention
//! survives bias terms.

use super::{xavier_uniform, ParamHost, ParamVisit, Scalar};
use crate::error::{Error, Result};
use crate::util::{uniform_f64, Rng};
use ndarray::{concatenate, Array1, Array2, Array3, Axis};

/// Fully connected map, y = xW + b.
pub struct Dense<S: Scalar> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
    pub frozen: bool,
    /// When false the bias is pinned at zero and hidden from parameter
    /// walks: it never trains, serializes, or enters gradient checks.
    /// Used for layers whose output feeds a normalization that would
    /// cancel any uniform shift exactly.
    has_bias: bool,
    cache_x: Option<Array2<S>>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w = Array2::from_shape_vec((d_in, d_out), xavier_uniform(d_in, d_out, d_in * d_out, rng))
            .expect("shape matches draw count");
        Dense {
            w,
            b: Array1::from_elem(d_out, S::ZERO),
            gw: Array2::from_elem((d_in, d_out), S::ZERO),
            gb: Array1::from_elem(d_out, S::ZERO),
            frozen: false,
            has_bias: true,
            cache_x: None,
        }
    }

    /// A dense layer with no bias term.
    pub fn without_bias(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::new(d_in, d_out, rng);
        layer.has_bias = false;
        layer
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&mut self, x: &Array2<S>, keep_cache: bool) -> Array2<S> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        if keep_cache {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let x = self.cache_x.take().expect("backward without cached forward");
        self.gw += &x.t().dot(gy);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.t())
    }

    /// Apply the map independently at every time step of a sequence batch.
    pub fn forward_seq(&mut self, x: &Array3<S>, keep_cache: bool) -> Array3<S> {
        let (b, t, d) = x.dim();
        let flat = x
            .view()
            .into_shape_with_order((b * t, d))
            .expect("standard layout");
        let y = self.forward(&flat.to_owned(), keep_cache);
        let d_out = self.d_out();
        y.into_shape_with_order((b, t, d_out)).expect("standard layout")
    }

    pub fn backward_seq(&mut self, gy: &Array3<S>) -> Array3<S> {
        let (b, t, d_out) = gy.dim();
        let flat = gy
            .view()
            .into_shape_with_order((b * t, d_out))
            .expect("standard layout");
        let gx = self.backward(&flat.to_owned());
        let d_in = self.d_in();
        gx.into_shape_with_order((b, t, d_in)).expect("standard layout")
    }
}

impl<S: Scalar> ParamHost<S> for Dense<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        let frozen = self.frozen;
        let dims = vec![self.w.nrows(), self.w.ncols()];
        f(ParamVisit {
            name: "weight".into(),
            dims,
            value: self.w.as_slice_mut().expect("standard layout"),
            grad: Some(self.gw.as_slice_mut().expect("standard layout")),
            frozen,
        });
        if self.has_bias {
            let dims = vec![self.b.len()];
            f(ParamVisit {
                name: "bias".into(),
                dims,
                value: self.b.as_slice_mut().expect("standard layout"),
                grad: Some(self.gb.as_slice_mut().expect("standard layout")),
                frozen,
            });
        }
    }
}

/// Same-length 1-D convolution over the time axis (cross-correlation with
/// zero padding). Kernel sizes must be odd so the output aligns with the
/// input.
pub struct Conv1d<S: Scalar> {
    /// K × D_in × N_F.
    pub w: Array3<S>,
    pub b: Array1<S>,
    pub gw: Array3<S>,
    pub gb: Array1<S>,
    pub kernel: usize,
    pub frozen: bool,
    /// See [`Dense::without_bias`]: false pins the bias at zero and
    /// hides it from parameter walks.
    has_bias: bool,
    cache: Option<Conv1dCache<S>>,
}

struct Conv1dCache<S: Scalar> {
    x2: Array2<S>,
    b: usize,
    t: usize,
    d_in: usize,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(d_in: usize, n_f: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Model(format!(
                "conv kernel must be odd, got {kernel}"
            )));
        }
        let fan_in = kernel * d_in;
        let fan_out = kernel * n_f;
        let w = Array3::from_shape_vec(
            (kernel, d_in, n_f),
            xavier_uniform(fan_in, fan_out, kernel * d_in * n_f, rng),
        )
        .expect("shape matches draw count");
        Ok(Conv1d {
            w,
            b: Array1::from_elem(n_f, S::ZERO),
            gw: Array3::from_elem((kernel, d_in, n_f), S::ZERO),
            gb: Array1::from_elem(n_f, S::ZERO),
            kernel,
            frozen: false,
            has_bias: true,
            cache: None,
        })
    }

    /// A convolution with no bias term.
    pub fn without_bias(d_in: usize, n_f: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::new(d_in, n_f, kernel, rng)?;
        layer.has_bias = false;
        Ok(layer)
    }

    pub fn d_in(&self) -> usize {
        self.w.dim().1
    }

    pub fn n_f(&self) -> usize {
        self.w.dim().2
    }

    fn im2col(&self, x: &Array3<S>) -> Array2<S> {
        let (b, t, d) = x.dim();
        let c = self.kernel / 2;
        let mut x2 = Array2::from_elem((b * t, self.kernel * d), S::ZERO);
        for bi in 0..b {
            for ti in 0..t {
                let row = bi * t + ti;
                for k in 0..self.kernel {
                    let src = ti as isize + k as isize - c as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for di in 0..d {
                        x2[[row, k * d + di]] = x[[bi, src as usize, di]];
                    }
                }
            }
        }
        x2
    }

    pub fn forward(&mut self, x: &Array3<S>, keep_cache: bool) -> Array3<S> {
        let (b, t, d) = x.dim();
        assert_eq!(d, self.d_in(), "conv input width mismatch");
        let x2 = self.im2col(x);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((self.kernel * d, self.n_f()))
            .expect("standard layout");
        let mut y2 = x2.dot(&w2);
        y2 += &self.b;
        if keep_cache {
            self.cache = Some(Conv1dCache { x2, b, t, d_in: d });
        }
        y2.into_shape_with_order((b, t, self.n_f()))
            .expect("standard layout")
    }

    pub fn backward(&mut self, gy: &Array3<S>) -> Array3<S> {
        let cache = self.cache.take().expect("backward without cached forward");
        let (b, t, d) = (cache.b, cache.t, cache.d_in);
        let n_f = self.n_f();
        let gy2 = gy
            .view()
            .into_shape_with_order((b * t, n_f))
            .expect("standard layout");

        let gw2 = cache.x2.t().dot(&gy2);
        let mut gw_view = self
            .gw
            .view_mut()
            .into_shape_with_order((self.kernel * d, n_f))
            .expect("standard layout");
        gw_view += &gw2;
        self.gb += &gy2.sum_axis(Axis(0));

        let w2 = self
            .w
            .view()
            .into_shape_with_order((self.kernel * d, n_f))
            .expect("standard layout");
        let gx2 = gy2.dot(&w2.t());

        let c = self.kernel / 2;
        let mut gx = Array3::from_elem((b, t, d), S::ZERO);
        for bi in 0..b {
            for ti in 0..t {
                let row = bi * t + ti;
                for k in 0..self.kernel {
                    let src = ti as isize + k as isize - c as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for di in 0..d {
                        gx[[bi, src as usize, di]] += gx2[[row, k * d + di]];
                    }
                }
            }
        }
        gx
    }
}

impl<S: Scalar> ParamHost<S> for Conv1d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        let frozen = self.frozen;
        let dims = self.w.shape().to_vec();
        f(ParamVisit {
            name: "weight".into(),
            dims,
            value: self.w.as_slice_mut().expect("standard layout"),
            grad: Some(self.gw.as_slice_mut().expect("standard layout")),
            frozen,
        });
        if self.has_bias {
            let dims = vec![self.b.len()];
            f(ParamVisit {
                name: "bias".into(),
                dims,
                value: self.b.as_slice_mut().expect("standard layout"),
                grad: Some(self.gb.as_slice_mut().expect("standard layout")),
                frozen,
            });
        }
    }
}

/// Per-channel batch normalization.
///
/// For sequence inputs the batch statistics pool over the batch and the
/// valid time steps jointly; padded positions contribute nothing. A frozen
/// instance always normalizes with its running statistics and never
/// updates them, so a frozen layer's behavior is a pure function of its
/// checkpoint.
pub struct BatchNorm<S: Scalar> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub g_gamma: Array1<S>,
    pub g_beta: Array1<S>,
    pub running_mean: Array1<S>,
    pub running_var: Array1<S>,
    pub momentum: f64,
    pub eps: f64,
    pub frozen: bool,
    cache: Option<BnCache<S>>,
}

struct BnCache<S: Scalar> {
    xhat: Array3<S>,
    inv_std: Array1<S>,
    mask: Array2<bool>,
    n_valid: f64,
    used_batch_stats: bool,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::from_elem(channels, S::ONE),
            beta: Array1::from_elem(channels, S::ZERO),
            g_gamma: Array1::from_elem(channels, S::ZERO),
            g_beta: Array1::from_elem(channels, S::ZERO),
            running_mean: Array1::from_elem(channels, S::ZERO),
            running_var: Array1::from_elem(channels, S::ONE),
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_seq(
        &mut self,
        x: &Array3<S>,
        mask: &Array2<bool>,
        train: bool,
        keep_cache: bool,
    ) -> Result<Array3<S>> {
        let (b, t, c) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        assert_eq!(mask.dim(), (b, t), "batchnorm mask mismatch");

        let use_batch_stats = train && !self.frozen;
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(Error::Model("batchnorm saw zero valid elements".into()));
        }
        let n = S::from_f64(n_valid as f64);

        let (mean, var) = if use_batch_stats {
            let mut mean = Array1::from_elem(c, S::ZERO);
            for bi in 0..b {
                for ti in 0..t {
                    if mask[[bi, ti]] {
                        for ci in 0..c {
                            mean[ci] += x[[bi, ti, ci]];
                        }
                    }
                }
            }
            mean.mapv_inplace(|v| v / n);
            let mut var = Array1::from_elem(c, S::ZERO);
            for bi in 0..b {
                for ti in 0..t {
                    if mask[[bi, ti]] {
                        for ci in 0..c {
                            let d = x[[bi, ti, ci]] - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
            }
            var.mapv_inplace(|v| v / n);

            let keep = S::from_f64(1.0 - self.momentum);
            let take = S::from_f64(self.momentum);
            for ci in 0..c {
                self.running_mean[ci] = self.running_mean[ci] * keep + mean[ci] * take;
                self.running_var[ci] = self.running_var[ci] * keep + var[ci] * take;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let eps = S::from_f64(self.eps);
        let inv_std = var.mapv(|v| S::ONE / (v + eps).sqrt());

        let mut xhat = Array3::from_elem((b, t, c), S::ZERO);
        let mut y = Array3::from_elem((b, t, c), S::ZERO);
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let xh = (x[[bi, ti, ci]] - mean[ci]) * inv_std[ci];
                    xhat[[bi, ti, ci]] = xh;
                    y[[bi, ti, ci]] = self.gamma[ci] * xh + self.beta[ci];
                }
            }
        }
        if keep_cache {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                mask: mask.clone(),
                n_valid: n_valid as f64,
                used_batch_stats: use_batch_stats,
            });
        }
        Ok(y)
    }

    pub fn backward_seq(&mut self, gy: &Array3<S>) -> Array3<S> {
        let cache = self.cache.take().expect("backward without cached forward");
        let (b, t, c) = gy.dim();
        let n = S::from_f64(cache.n_valid);

        let mut sum_gy = Array1::from_elem(c, S::ZERO);
        let mut sum_gy_xhat = Array1::from_elem(c, S::ZERO);
        for bi in 0..b {
            for ti in 0..t {
                if cache.mask[[bi, ti]] {
                    for ci in 0..c {
                        sum_gy[ci] += gy[[bi, ti, ci]];
                        sum_gy_xhat[ci] += gy[[bi, ti, ci]] * cache.xhat[[bi, ti, ci]];
                    }
                }
            }
        }
        self.g_beta += &sum_gy;
        self.g_gamma += &sum_gy_xhat;

        let mut gx = Array3::from_elem((b, t, c), S::ZERO);
        if cache.used_batch_stats {
            for bi in 0..b {
                for ti in 0..t {
                    if cache.mask[[bi, ti]] {
                        for ci in 0..c {
                            let term = gy[[bi, ti, ci]]
                                - sum_gy[ci] / n
                                - cache.xhat[[bi, ti, ci]] * sum_gy_xhat[ci] / n;
                            gx[[bi, ti, ci]] = self.gamma[ci] * cache.inv_std[ci] * term;
                        }
                    }
                }
            }
        } else {
            for bi in 0..b {
                for ti in 0..t {
                    if cache.mask[[bi, ti]] {
                        for ci in 0..c {
                            gx[[bi, ti, ci]] =
                                self.gamma[ci] * cache.inv_std[ci] * gy[[bi, ti, ci]];
                        }
                    }
                }
            }
        }
        gx
    }

    /// Batch normalization over a plain B × C matrix (every row valid).
    pub fn forward_flat(&mut self, x: &Array2<S>, train: bool, keep_cache: bool) -> Result<Array2<S>> {
        let (b, c) = x.dim();
        let x3 = x
            .view()
            .into_shape_with_order((b, 1, c))
            .expect("standard layout")
            .to_owned();
        let mask = Array2::from_elem((b, 1), true);
        let y = self.forward_seq(&x3, &mask, train, keep_cache)?;
        Ok(y.into_shape_with_order((b, c)).expect("standard layout"))
    }

    pub fn backward_flat(&mut self, gy: &Array2<S>) -> Array2<S> {
        let (b, c) = gy.dim();
        let gy3 = gy
            .view()
            .into_shape_with_order((b, 1, c))
            .expect("standard layout")
            .to_owned();
        let gx = self.backward_seq(&gy3);
        gx.into_shape_with_order((b, c)).expect("standard layout")
    }
}

impl<S: Scalar> ParamHost<S> for BatchNorm<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>)) {
        let frozen = self.frozen;
        let c = self.gamma.len();
        f(ParamVisit {
            name: "gamma".into(),
            dims: vec![c],
            value: self.gamma.as_slice_mut().expect("standard layout"),
            grad: Some(self.g_gamma.as_slice_mut().expect("standard layout")),
            frozen,
        });
        f(ParamVisit {
            name: "beta".into(),
            dims: vec![c],
            value: self.beta.as_slice_mut().expect("standard layout"),
            grad: Some(self.g_beta.as_slice_mut().expect("standard layout")),
            frozen,
        });
        f(ParamVisit {
            name: "running_mean".into(),
            dims: vec![c],
            value: self.running_mean.as_slice_mut().expect("standard layout"),
            grad: None,
            frozen,
        });
        f(ParamVisit {
            name: "running_var".into(),
            dims: vec![c],
            value: self.running_var.as_slice_mut().expect("standard layout"),
            grad: None,
            frozen,
        });
    }
}

/// ReLU over a sequence batch.
#[derive(Default)]
pub struct Relu3<S: Scalar> {
    cache: Option<Array3<bool>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Relu3<S> {
    pub fn new() -> Self {
        Relu3 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array3<S>, keep_cache: bool) -> Array3<S> {
        if keep_cache {
            self.cache = Some(x.mapv(|v| v > S::ZERO));
        }
        x.mapv(|v| v.maximum(S::ZERO))
    }

    pub fn backward(&mut self, gy: &Array3<S>) -> Array3<S> {
        let on = self.cache.take().expect("backward without cached forward");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&on).for_each(|g, &keep| {
            if !keep {
                *g = S::ZERO;
            }
        });
        gx
    }
}

/// ReLU over a flat B × D matrix.
#[derive(Default)]
pub struct Relu2<S: Scalar> {
    cache: Option<Array2<bool>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Relu2<S> {
    pub fn new() -> Self {
        Relu2 {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array2<S>, keep_cache: bool) -> Array2<S> {
        if keep_cache {
            self.cache = Some(x.mapv(|v| v > S::ZERO));
        }
        x.mapv(|v| v.maximum(S::ZERO))
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let on = self.cache.take().expect("backward without cached forward");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&on).for_each(|g, &keep| {
            if !keep {
                *g = S::ZERO;
            }
        });
        gx
    }
}

/// Inverted dropout. Active only while training and only when the layer
/// consuming its output is itself trainable; inference is the identity.
pub struct Dropout<S: Scalar> {
    pub rate: f64,
    pub active: bool,
    cache: Option<Array3<S>>,
}

impl<S: Scalar> Dropout<S> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Dropout {
            rate,
            active: true,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<S>, train: bool, rng: &mut Rng, keep_cache: bool) -> Array3<S> {
        if !train || !self.active || self.rate == 0.0 {
            self.cache = None;
            return x.clone();
        }
        let scale = S::from_f64(1.0 / (1.0 - self.rate));
        let factors = Array3::from_shape_simple_fn(x.dim(), || {
            if uniform_f64(rng) < self.rate {
                S::ZERO
            } else {
                scale
            }
        });
        let y = x * &factors;
        if keep_cache {
            self.cache = Some(factors);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array3<S>) -> Array3<S> {
        match self.cache.take() {
            Some(factors) => gy * &factors,
            None => gy.clone(),
        }
    }
}

/// Zero out padded positions in place. Applied after every sequence layer
/// (bias terms and batchnorm shift padded zeros away from zero), and to
/// gradients flowing back into a sequence, which keeps padded positions
/// out of every parameter gradient.
pub fn apply_mask<S: Scalar>(x: &mut Array3<S>, mask: &Array2<bool>) {
    let (b, t, d) = x.dim();
    assert_eq!(mask.dim(), (b, t), "mask shape mismatch");
    for bi in 0..b {
        for ti in 0..t {
            if !mask[[bi, ti]] {
                for di in 0..d {
                    x[[bi, ti, di]] = S::ZERO;
                }
            }
        }
    }
}

/// Mean over the valid steps of each row.
pub fn masked_mean_pool<S: Scalar>(x: &Array3<S>, mask: &Array2<bool>) -> Result<Array2<S>> {
    let (b, t, d) = x.dim();
    assert_eq!(mask.dim(), (b, t), "mask shape mismatch");
    let mut y = Array2::from_elem((b, d), S::ZERO);
    for bi in 0..b {
        let count = mask.row(bi).iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Model(format!("pooling over all-masked row {bi}")));
        }
        let inv = S::ONE / S::from_f64(count as f64);
        for ti in 0..t {
            if mask[[bi, ti]] {
                for di in 0..d {
                    y[[bi, di]] += x[[bi, ti, di]];
                }
            }
        }
        for di in 0..d {
            y[[bi, di]] *= inv;
        }
    }
    Ok(y)
}

/// Backward of [`masked_mean_pool`]: spread each row gradient uniformly
/// over that row's valid steps.
pub fn masked_mean_pool_backward<S: Scalar>(
    gy: &Array2<S>,
    mask: &Array2<bool>,
    t: usize,
) -> Array3<S> {
    let (b, d) = gy.dim();
    assert_eq!(mask.dim(), (b, t), "mask shape mismatch");
    let mut gx = Array3::from_elem((b, t, d), S::ZERO);
    for bi in 0..b {
        let count = mask.row(bi).iter().filter(|&&m| m).count();
        let inv = S::ONE / S::from_f64(count as f64);
        for ti in 0..t {
            if mask[[bi, ti]] {
                for di in 0..d {
                    gx[[bi, ti, di]] = gy[[bi, di]] * inv;
                }
            }
        }
    }
    gx
}

/// Column-wise concatenation of two row-aligned matrices.
pub fn concat_cols<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

/// Inverse of [`concat_cols`] on a gradient.
pub fn split_cols<S: Scalar>(g: &Array2<S>, d_first: usize) -> (Array2<S>, Array2<S>) {
    let a = g.slice(ndarray::s![.., ..d_first]).to_owned();
    let b = g.slice(ndarray::s![.., d_first..]).to_owned();
    (a, b)
}
