use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

use super::{Module, Param};
use crate::rng::Rng;

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "kernel {k} larger than padded input {n}+2*{p}");
    (n + 2 * p - k) / s + 1
}

/// Unfold `(N, C, H, W)` into `(C*k*k, N*Ho*Wo)` patch columns.
pub fn im2col(x: ArrayView4<f64>, k: usize, s: usize, p: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, k, s, p), out_size(w, k, s, p));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut out = vec![0.0; c * k * k * ncols];
    out.par_chunks_mut(ncols).enumerate().for_each(|(r, row)| {
        let ci = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        for ni in 0..n {
            let plane = &xs[(ni * c + ci) * h * w..][..h * w];
            for oy in 0..ho {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &plane[iy as usize * w..][..w];
                let dst = &mut row[(ni * ho + oy) * wo..][..wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix >= 0 && ix < w as isize {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((c * k * k, ncols), out).expect("shape")
}

/// Fold patch columns back into `(N, C, H, W)`, summing overlaps. Inverse
/// (adjoint) of [`im2col`].
pub fn col2im(cols: ArrayView2<f64>, n: usize, c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Array4<f64> {
    let (ho, wo) = (out_size(h, k, s, p), out_size(w, k, s, p));
    assert_eq!(cols.dim(), (c * k * k, n * ho * wo), "col2im shape");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(pi, plane)| {
        let ni = pi / c;
        let ci = pi % c;
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &cs[r * ncols + ni * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// `(C, N, H, W)`-ordered 2D view of a batch: rows are channels.
fn channels_major(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("shape")
}

fn batch_major(y: Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    y.into_shape_with_order((c, n, h, w))
        .expect("shape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn add_bias(y: &mut Array4<f64>, bias: &Option<Param>) {
    if let Some(b) = bias {
        for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(b.value.iter()) {
            ch += bv;
        }
    }
}

fn accumulate_bias(bias: &mut Option<Param>, dy: &Array4<f64>) {
    if let Some(b) = bias {
        for (g, ch) in b.grad.iter_mut().zip(dy.axis_iter(Axis(1))) {
            *g += ch.sum();
        }
    }
}

#[derive(Debug, Clone)]
enum ConvCache {
    Cols { cols: Array2<f64>, n: usize, h: usize, w: usize },
    Broadcast { e: Array2<f64>, h: usize, w: usize },
}

/// Strided 2D convolution, weight `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, bias: bool, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(&[out_ch, in_ch, k, k], 0.0, init_std, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_res(&self, n: usize) -> usize {
        out_size(n, self.k, self.stride, self.pad)
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("contiguous weight")
    }

    fn compute(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = (self.out_res(h), self.out_res(w));
        let cols = im2col(x.view(), self.k, self.stride, self.pad);
        let y2 = self.w2().dot(&cols);
        let mut y = batch_major(y2, n, self.out_ch, ho, wo);
        add_bias(&mut y, &self.bias);
        (y, cols)
    }

    /// Inference without caching.
    pub fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        self.compute(x).0
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (y, cols) = self.compute(x);
        self.cache = Some(ConvCache::Cols { cols, n, h, w });
        y
    }

    /// Validity of each kernel tap along one axis for every output index.
    fn tap_mask(&self, len: usize) -> Vec<Vec<bool>> {
        (0..self.out_res(len))
            .map(|o| {
                (0..self.k)
                    .map(|t| {
                        let i = (o * self.stride + t) as isize - self.pad as isize;
                        i >= 0 && i < len as isize
                    })
                    .collect()
            })
            .collect()
    }

    /// Convolve the `(N, C)` vectors broadcast to constant `C x h x w` maps.
    /// Equal to `forward` on the explicitly broadcast tensor, without
    /// materialising it.
    pub fn forward_broadcast(&mut self, e: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
        let y = self.apply_broadcast(e, h, w);
        self.cache = Some(ConvCache::Broadcast { e: e.clone(), h, w });
        y
    }

    pub fn apply_broadcast(&self, e: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
        let (n, c) = e.dim();
        assert_eq!(c, self.in_ch, "broadcast conv input channels");
        let (k, o) = (self.k, self.out_ch);
        // taps[n, o*k*k] = sum_c e[n, c] * W[o, c, ky, kx]
        let wt = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4d weight")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, o * k * k))
            .expect("shape");
        let taps = e.dot(&wt);
        let (rm, cm) = (self.tap_mask(h), self.tap_mask(w));
        let (ho, wo) = (rm.len(), cm.len());
        let mut y = Array4::zeros((n, o, ho, wo));
        let mut partial = vec![0.0; ho * k];
        for ni in 0..n {
            let trow = taps.row(ni).to_vec();
            for oi in 0..o {
                let t = &trow[oi * k * k..][..k * k];
                let bias = self.bias.as_ref().map_or(0.0, |b| b.value[oi]);
                // partial[oy, kx] = sum over valid ky of t[ky, kx]
                partial.fill(0.0);
                for (oy, rmask) in rm.iter().enumerate() {
                    for ky in (0..k).filter(|&ky| rmask[ky]) {
                        for kx in 0..k {
                            partial[oy * k + kx] += t[ky * k + kx];
                        }
                    }
                }
                let mut plane = y.slice_mut(ndarray::s![ni, oi, .., ..]);
                for oy in 0..ho {
                    let prow = &partial[oy * k..][..k];
                    for (ox, cmask) in cm.iter().enumerate() {
                        let mut acc = bias;
                        for kx in 0..k {
                            if cmask[kx] {
                                acc += prow[kx];
                            }
                        }
                        plane[[oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient. After
    /// `forward_broadcast` the returned array is the gradient with respect
    /// to the `(N, C)` vectors, shaped `(N, C, 1, 1)`.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        accumulate_bias(&mut self.bias, dy);
        let (k, o, c) = (self.k, self.out_ch, self.in_ch);
        match self.cache.as_ref().expect("forward before backward") {
            ConvCache::Cols { cols, n, h, w } => {
                let (n, h, w) = (*n, *h, *w);
                let dy2 = channels_major(dy);
                let dw = dy2.dot(&cols.t());
                let mut g = self.weight.grad.view_mut().into_shape_with_order((o, c * k * k)).expect("shape");
                g += &dw;
                let dcols = self.w2().t().dot(&dy2);
                col2im(dcols.view(), n, c, h, w, k, self.stride, self.pad)
            }
            ConvCache::Broadcast { e, h, w } => {
                let (rm, cm) = (self.tap_mask(*h), self.tap_mask(*w));
                let n = e.nrows();
                let mut t = Array2::<f64>::zeros((n, o * k * k));
                let mut q = vec![0.0; rm.len() * k];
                for ni in 0..n {
                    for oi in 0..o {
                        // q[oy, kx] = sum over ox with kx valid of dy[oy, ox]
                        q.fill(0.0);
                        let plane = dy.slice(ndarray::s![ni, oi, .., ..]);
                        for oy in 0..rm.len() {
                            for (ox, cmask) in cm.iter().enumerate() {
                                let d = plane[[oy, ox]];
                                for kx in 0..k {
                                    if cmask[kx] {
                                        q[oy * k + kx] += d;
                                    }
                                }
                            }
                        }
                        for (oy, rmask) in rm.iter().enumerate() {
                            for ky in (0..k).filter(|&ky| rmask[ky]) {
                                for kx in 0..k {
                                    t[[ni, oi * k * k + ky * k + kx]] += q[oy * k + kx];
                                }
                            }
                        }
                    }
                }
                // dW[o, c, ky, kx] = sum_n e[n, c] * t[n, o, ky, kx]
                let dw = e.t().dot(&t).into_shape_with_order((c, o, k, k)).expect("shape");
                let mut g = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix4>().expect("4d");
                g += &dw.permuted_axes([1, 0, 2, 3]);
                let w2 = self.weight.value.view().into_dimensionality::<ndarray::Ix4>().expect("4d");
                let mut de = Array4::zeros((n, c, 1, 1));
                let wt = w2
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c, o * k * k))
                    .expect("shape");
                let de2 = t.dot(&wt.t());
                for ni in 0..n {
                    for ci in 0..c {
                        de[[ni, ci, 0, 0]] = de2[[ni, ci]];
                    }
                }
                de
            }
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Transposed convolution, weight `(in, out, k, k)`; output resolution
/// `(H - 1) * stride - 2 * pad + k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Array2<f64>, usize, usize, usize)>,
}

impl ConvTranspose2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, bias: bool, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(&[in_ch, out_ch, k, k], 0.0, init_std, rng),
            bias: bias.then(|| Param::zeros(&[out_ch])),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_res(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_ch, self.out_ch * self.k * self.k))
            .expect("contiguous weight")
    }

    fn compute(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "deconv input channels");
        let (ho, wo) = (self.out_res(h), self.out_res(w));
        let x2 = channels_major(x);
        let cols = self.w2().t().dot(&x2);
        let mut y = col2im(cols.view(), n, self.out_ch, ho, wo, self.k, self.stride, self.pad);
        add_bias(&mut y, &self.bias);
        (y, x2)
    }

    pub fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        self.compute(x).0
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (y, x2) = self.compute(x);
        self.cache = Some((x2, n, h, w));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        accumulate_bias(&mut self.bias, dy);
        let (x2, n, h, w) = self.cache.as_ref().expect("forward before backward");
        let (n, h, w) = (*n, *h, *w);
        let dcols = im2col(dy.view(), self.k, self.stride, self.pad);
        let dw = x2.dot(&dcols.t());
        let (ci, co, k) = (self.in_ch, self.out_ch, self.k);
        let mut g = self.weight.grad.view_mut().into_shape_with_order((ci, co * k * k)).expect("shape");
        g += &dw;
        let dx2 = self.w2().dot(&dcols);
        batch_major(dx2, n, ci, h, w)
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use ndarray::Array;

    /// Direct nested-loop convolution oracle.
    fn conv_naive(x: &Array4<f64>, w: &Array4<f64>, s: usize, p: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut y = Array4::zeros((n, o, ho, wo));
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[ni, ci, iy as usize, ix as usize]] * w[[oi, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, oi, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Scatter-based transposed convolution oracle.
    fn deconv_naive(x: &Array4<f64>, w: &Array4<f64>, s: usize, p: usize) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (_, o, k, _) = w.dim();
        let ho = (h - 1) * s + k - 2 * p;
        let wo = (wd - 1) * s + k - 2 * p;
        let mut y = Array4::zeros((n, o, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for iy in 0..h {
                    for ix in 0..wd {
                        for oi in 0..o {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * s + ky) as isize - p as isize;
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                        y[[ni, oi, oy as usize, ox as usize]] += x[[ni, ci, iy, ix]] * w[[ci, oi, ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut r = rng(seed);
        Array::from_shape_simple_fn(shape, || crate::rng::standard_normal(&mut r))
    }

    fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = rng(1);
        let mut conv = Conv2d::new(3, 5, 4, 2, 1, false, 0.5, &mut r);
        let x = randn((2, 3, 8, 8), 2);
        let y = conv.forward(&x);
        let w = conv.weight.value.clone().into_dimensionality().unwrap();
        assert!(max_abs_diff(&y, &conv_naive(&x, &w, 2, 1)) < 1e-12);
    }

    #[test]
    fn deconv_matches_naive() {
        let mut r = rng(3);
        let mut d = ConvTranspose2d::new(4, 3, 4, 2, 1, false, 0.5, &mut r);
        let x = randn((2, 4, 4, 4), 4);
        let y = d.forward(&x);
        assert_eq!(y.dim(), (2, 3, 8, 8));
        let w = d.weight.value.clone().into_dimensionality().unwrap();
        assert!(max_abs_diff(&y, &deconv_naive(&x, &w, 2, 1)) < 1e-12);
        let mut d1 = ConvTranspose2d::new(4, 3, 4, 1, 0, false, 0.5, &mut r);
        let x1 = randn((2, 4, 1, 1), 5);
        let w1 = d1.weight.value.clone().into_dimensionality().unwrap();
        assert!(max_abs_diff(&d1.forward(&x1), &deconv_naive(&x1, &w1, 1, 0)) < 1e-12);
    }

    /// <col2im(C), X> == <C, im2col(X)> for random C, X.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = randn((2, 3, 7, 6), 9);
        let cols = im2col(x.view(), 3, 2, 1);
        let mut r = rng(10);
        let c = Array2::from_shape_simple_fn(cols.raw_dim(), || crate::rng::standard_normal(&mut r));
        let lhs: f64 = col2im(c.view(), 2, 3, 7, 6, 3, 2, 1).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = c.iter().zip(&cols).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn broadcast_conv_equals_explicit_broadcast() {
        let mut r = rng(11);
        let mut conv = Conv2d::new(5, 4, 4, 2, 1, true, 0.3, &mut r);
        conv.bias.as_mut().unwrap().value.fill(0.1);
        let mut e = Array2::zeros((3, 5));
        for (i, v) in e.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let x = Array4::from_shape_fn((3, 5, 8, 8), |(n, c, _, _)| e[[n, c]]);
        let mut twin = conv.clone();
        let y1 = conv.forward_broadcast(&e, 8, 8);
        let y2 = twin.forward(&x);
        assert!(max_abs_diff(&y1, &y2) < 1e-12);

        let dy = randn(y1.dim(), 12);
        let de = conv.backward(&dy);
        let dx = twin.backward(&dy);
        let gw1 = &conv.weight.grad;
        let gw2 = &twin.weight.grad;
        assert!(gw1.iter().zip(gw2).all(|(a, b)| (a - b).abs() < 1e-10));
        for n in 0..3 {
            for c in 0..5 {
                let summed: f64 = dx.slice(ndarray::s![n, c, .., ..]).sum();
                assert!((de[[n, c, 0, 0]] - summed).abs() < 1e-10);
            }
        }
    }
}
