use rand::Rng;

use super::gemm::{rm, sgemm, tr};
use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `x` into a `(C·k·k) × (OH·OW)` patch matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f32> {
    let n = oh * ow;
    let mut cols = vec![0.0f32; x.c * k * k * n];
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..][..x.w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back onto a `c × h × w` grid.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Tensor {
    let n = oh * ow;
    let mut x = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut x.data[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * ow..][..ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution with square kernels, zero padding, and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Conv2d { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(self.cout, oh, ow);
        let bias = ps.get(self.bias);
        for (o, b) in bias.iter().enumerate() {
            y.data[o * n..(o + 1) * n].fill(*b);
        }
        let owned;
        let cols: &[f32] = if self.is_pointwise() {
            &x.data
        } else {
            owned = im2col(x, self.k, self.stride, self.pad, oh, ow);
            &owned
        };
        sgemm(self.cout, kk, n, ps.get(self.weight), rm(kk), cols, rm(n), 1.0, &mut y.data);
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&self, ps: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads, need_dx: bool) -> Option<Tensor> {
        let (oh, ow) = (dy.h, dy.w);
        let n = oh * ow;
        let kk = self.cin * self.k * self.k;
        {
            let db = grads.get_mut(self.bias);
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy.data[o * n..(o + 1) * n].iter().sum::<f32>();
            }
        }
        let owned;
        let cols: &[f32] = if self.is_pointwise() {
            &x.data
        } else {
            owned = im2col(x, self.k, self.stride, self.pad, oh, ow);
            &owned
        };
        // dW (cout × kk) += dY (cout × n) · colsᵀ (n × kk)
        sgemm(self.cout, n, kk, &dy.data, rm(n), cols, tr(n), 1.0, grads.get_mut(self.weight));
        if !need_dx {
            return None;
        }
        // dcols (kk × n) = Wᵀ (kk × cout) · dY (cout × n)
        let mut dcols = vec![0.0f32; kk * n];
        sgemm(kk, self.cout, n, ps.get(self.weight), tr(kk), &dy.data, rm(n), 0.0, &mut dcols);
        if self.is_pointwise() {
            return Some(Tensor { c: x.c, h: x.h, w: x.w, data: dcols });
        }
        Some(col2im(&dcols, x.c, x.h, x.w, self.k, self.stride, self.pad, oh, ow))
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]'s patch mapping).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // each output pixel sees about cin·k²/stride² inputs
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let weight = store.add_normal(format!("{name}.weight"), vec![cin, cout, k, k], fan_in, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        ConvTranspose2d { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s - 1) * self.stride + self.k - 2 * self.pad;
        (f(h), f(w))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "deconv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let n = x.h * x.w;
        let ckk = self.cout * self.k * self.k;
        // cols (ckk × n) = Wᵀ (ckk × cin) · X (cin × n)
        let mut cols = vec![0.0f32; ckk * n];
        sgemm(ckk, self.cin, n, ps.get(self.weight), tr(ckk), &x.data, rm(n), 0.0, &mut cols);
        let mut y = col2im(&cols, self.cout, oh, ow, self.k, self.stride, self.pad, x.h, x.w);
        let plane = oh * ow;
        for (o, b) in ps.get(self.bias).iter().enumerate() {
            y.data[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        y
    }

    pub fn backward(&self, ps: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads, need_dx: bool) -> Option<Tensor> {
        let n = x.h * x.w;
        let ckk = self.cout * self.k * self.k;
        let plane = dy.h * dy.w;
        {
            let db = grads.get_mut(self.bias);
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy.data[o * plane..(o + 1) * plane].iter().sum::<f32>();
            }
        }
        let dcols = im2col(dy, self.k, self.stride, self.pad, x.h, x.w);
        // dW (cin × ckk) += X (cin × n) · dcolsᵀ (n × ckk)
        sgemm(self.cin, n, ckk, &x.data, rm(n), &dcols, tr(n), 1.0, grads.get_mut(self.weight));
        if !need_dx {
            return None;
        }
        // dX (cin × n) = W (cin × ckk) · dcols (ckk × n)
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        sgemm(self.cin, ckk, n, ps.get(self.weight), rm(ckk), &dcols, rm(n), 0.0, &mut dx.data);
        Some(dx)
    }
}

/// Fully connected layer on flat vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), vec![fan_out, fan_in], fan_in, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![fan_out], 0.0);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.fan_in, "linear input width");
        let mut y = ps.get(self.bias).to_vec();
        sgemm(self.fan_out, self.fan_in, 1, ps.get(self.weight), rm(self.fan_in), x, rm(1), 1.0, &mut y);
        y
    }

    pub fn backward(&self, ps: &ParamStore, x: &[f32], dy: &[f32], grads: &mut Grads, need_dx: bool) -> Option<Vec<f32>> {
        grads.get_mut(self.bias).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        sgemm(self.fan_out, 1, self.fan_in, dy, rm(1), x, rm(self.fan_in), 1.0, grads.get_mut(self.weight));
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0f32; self.fan_in];
        sgemm(self.fan_in, self.fan_out, 1, ps.get(self.weight), tr(self.fan_in), dy, rm(1), 0.0, &mut dx);
        Some(dx)
    }
}

/// Learned linear map between spatial layouts, shared across channels:
/// each channel plane is flattened, multiplied by an `(oh·ow) × (ih·iw)`
/// matrix, and reshaped. Equivalent to a 1×1 convolution over positions.
#[derive(Debug, Clone)]
pub struct SpatialResample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl SpatialResample {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_hw: (usize, usize), out_hw: (usize, usize), rng: &mut R) -> Self {
        let (ni, no) = (in_hw.0 * in_hw.1, out_hw.0 * out_hw.1);
        let weight = store.add_normal(format!("{name}.weight"), vec![no, ni], ni, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![no], 0.0);
        SpatialResample { weight, bias, in_hw, out_hw }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!((x.h, x.w), self.in_hw, "resample input size");
        let (ni, no) = (x.h * x.w, self.out_hw.0 * self.out_hw.1);
        let mut y = Tensor::zeros(x.c, self.out_hw.0, self.out_hw.1);
        let bias = ps.get(self.bias);
        for c in 0..x.c {
            y.data[c * no..(c + 1) * no].copy_from_slice(bias);
        }
        // Y (c × no) = X (c × ni) · Wᵀ (ni × no)
        sgemm(x.c, ni, no, &x.data, rm(ni), ps.get(self.weight), tr(ni), 1.0, &mut y.data);
        y
    }

    pub fn backward(&self, ps: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut Grads, need_dx: bool) -> Option<Tensor> {
        let (ni, no) = (x.h * x.w, dy.h * dy.w);
        {
            let db = grads.get_mut(self.bias);
            for c in 0..x.c {
                db.iter_mut().zip(&dy.data[c * no..(c + 1) * no]).for_each(|(g, d)| *g += d);
            }
        }
        // dW (no × ni) += dYᵀ (no × c) · X (c × ni)
        sgemm(no, x.c, ni, &dy.data, tr(no), &x.data, rm(ni), 1.0, grads.get_mut(self.weight));
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        sgemm(x.c, no, ni, &dy.data, rm(no), ps.get(self.weight), rm(ni), 0.0, &mut dx.data);
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution, independent of im2col/gemm.
    fn naive_conv(ps: &ParamStore, l: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = l.out_hw(x.h, x.w);
        let w = ps.get(l.weight);
        let b = ps.get(l.bias);
        let mut y = Tensor::zeros(l.cout, oh, ow);
        for o in 0..l.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o] as f64;
                    for ci in 0..l.cin {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                                let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    s += w[((o * l.cin + ci) * l.k + ky) * l.k + kx] as f64
                                        * x.data[x.idx(ci, iy as usize, ix as usize)] as f64;
                                }
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = s as f32;
                }
            }
        }
        y
    }

    /// Scatter definition of a transposed convolution.
    fn naive_deconv(ps: &ParamStore, l: &ConvTranspose2d, x: &Tensor) -> Tensor {
        let (oh, ow) = l.out_hw(x.h, x.w);
        let w = ps.get(l.weight);
        let b = ps.get(l.bias);
        let mut y = Tensor::zeros(l.cout, oh, ow);
        for o in 0..l.cout {
            y.data[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
        }
        for ci in 0..l.cin {
            for iy in 0..x.h {
                for ix in 0..x.w {
                    for o in 0..l.cout {
                        for ky in 0..l.k {
                            for kx in 0..l.k {
                                let oy = (iy * l.stride + ky) as isize - l.pad as isize;
                                let ox = (ix * l.stride + kx) as isize - l.pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    y.data[(o * oh + oy as usize) * ow + ox as usize] +=
                                        w[((ci * l.cout + o) * l.k + ky) * l.k + kx] * x.data[x.idx(ci, iy, ix)];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)].iter().enumerate() {
            let l = Conv2d::new(&mut ps, &format!("c{i}"), 3, 5, k, s, p, &mut rng);
            ps.get_mut(l.bias).iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
            let x = rand_tensor(3, 9, 7, &mut rng);
            assert_close(&l.forward(&ps, &x).data, &naive_conv(&ps, &l, &x).data, 1e-5);
        }
    }

    #[test]
    fn deconv_matches_naive_and_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let l = ConvTranspose2d::new(&mut ps, "d", 4, 3, 4, 2, 1, &mut rng);
        ps.get_mut(l.bias).iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let x = rand_tensor(4, 8, 8, &mut rng);
        let y = l.forward(&ps, &x);
        assert_eq!(y.shape(), (3, 16, 16));
        assert_close(&y.data, &naive_deconv(&ps, &l, &x).data, 1e-5);
    }

    /// Inner-product test of the backward passes: for a random upstream
    /// gradient g, <g, dL/dθ as returned> must match finite differences of
    /// <g, f(θ)>. Evaluated in f64 from f32 forward passes with a loose step.
    fn fd_check<F>(params: &mut ParamStore, ids: &[ParamId], analytic: &Grads, f: F)
    where
        F: Fn(&ParamStore) -> f64,
    {
        let h = 1e-2f32;
        for &id in ids {
            for j in [0usize, 3, 7] {
                let j = j % params.get(id).len();
                let orig = params.get(id)[j];
                params.get_mut(id)[j] = orig + h;
                let up = f(params);
                params.get_mut(id)[j] = orig - h;
                let dn = f(params);
                params.get_mut(id)[j] = orig;
                let fd = (up - dn) / (2.0 * h as f64);
                let an = analytic.get(id)[j] as f64;
                assert!((fd - an).abs() <= 2e-2 * (1.0 + an.abs()), "{}[{j}] fd {fd} vs {an}", params.name(id));
            }
        }
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_and_deconv_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, 1, &mut rng);
        let de = ConvTranspose2d::new(&mut ps, "d", 3, 2, 4, 2, 1, &mut rng);
        let x = rand_tensor(2, 6, 6, &mut rng);
        let mid = conv.forward(&ps, &x);
        let y = de.forward(&ps, &mid);
        let g = rand_tensor(y.c, y.h, y.w, &mut rng);
        let mut grads = Grads::zeros_like(&ps);
        let dmid = de.backward(&ps, &mid, &g, &mut grads, true).unwrap();
        let dx = conv.backward(&ps, &x, &dmid, &mut grads, true).unwrap();
        let ids = [conv.weight, conv.bias, de.weight, de.bias];
        fd_check(&mut ps, &ids, &grads, |p| dot(&g.data, &de.forward(p, &conv.forward(p, &x)).data));

        // input gradient
        for j in [0, 5, 20, 71] {
            let mut xp = x.clone();
            xp.data[j] += 1e-2;
            let mut xm = x.clone();
            xm.data[j] -= 1e-2;
            let fd = (dot(&g.data, &de.forward(&ps, &conv.forward(&ps, &xp)).data)
                - dot(&g.data, &de.forward(&ps, &conv.forward(&ps, &xm)).data))
                / 2e-2;
            assert!((fd - dx.data[j] as f64).abs() <= 2e-2 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn linear_and_resample_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", 12, 4, &mut rng);
        let rs = SpatialResample::new(&mut ps, "r", (2, 3), (3, 3), &mut rng);
        let x = rand_tensor(2, 2, 3, &mut rng);
        let f = |p: &ParamStore| -> (Tensor, Vec<f32>) {
            let r = rs.forward(p, &x);
            let l = lin.forward(p, &x.data);
            (r, l)
        };
        let (r, l) = f(&ps);
        let gr = rand_tensor(r.c, r.h, r.w, &mut rng);
        let gl: Vec<f32> = (0..l.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = Grads::zeros_like(&ps);
        let dxr = rs.backward(&ps, &x, &gr, &mut grads, true).unwrap();
        let dxl = lin.backward(&ps, &x.data, &gl, &mut grads, true).unwrap();
        let ids = [lin.weight, lin.bias, rs.weight, rs.bias];
        fd_check(&mut ps, &ids, &grads, |p| {
            let (r, l) = f(p);
            dot(&gr.data, &r.data) + dot(&gl, &l)
        });
        // both maps are linear in x: <g, f(x)> - bias term = <dx, x>
        let bias_r: f64 = (0..r.c).map(|c| dot(&gr.data[c * 9..(c + 1) * 9], ps.get(rs.bias))).sum();
        assert!((dot(&gr.data, &r.data) - bias_r - dot(&dxr.data, &x.data)).abs() < 1e-4);
        let bias_l = dot(&gl, ps.get(lin.bias));
        assert!((dot(&gl, &l) - bias_l - dot(&dxl, &x.data)).abs() < 1e-4);
    }
}
