//! Parameter-free tensor operations and their backward passes.

use super::{Tensor, LEAKY_SLOPE};

#[cfg(test)]
thread_local! {
    static SLOPE_OVERRIDE: std::cell::Cell<Option<f32>> = const { std::cell::Cell::new(None) };
}

/// Replaces the leaky slope on the current test thread; `Some(1.0)` makes
/// the whole network linear so finite differences are exact.
#[cfg(test)]
pub(crate) fn set_test_slope(v: Option<f32>) {
    SLOPE_OVERRIDE.with(|s| s.set(v));
}

#[inline]
fn slope() -> f32 {
    #[cfg(test)]
    if let Some(v) = SLOPE_OVERRIDE.with(|s| s.get()) {
        return v;
    }
    LEAKY_SLOPE
}

pub fn leaky_relu(mut x: Tensor) -> Tensor {
    let a = slope();
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= a
        }
    });
    x
}

pub fn leaky_relu_vec(mut x: Vec<f32>) -> Vec<f32> {
    let a = slope();
    x.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= a
        }
    });
    x
}

/// Backward through a leaky ReLU given its output (sign is preserved).
pub fn leaky_relu_backward(y: &[f32], dy: &mut [f32]) {
    let a = slope();
    for (g, v) in dy.iter_mut().zip(y) {
        if *v < 0.0 {
            *g *= a;
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax(z: &[f32]) -> Vec<f32> {
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradient w.r.t. softmax logits given the softmax output `a` and `dL/da`.
pub fn softmax_backward(a: &[f32], da: &[f32]) -> Vec<f32> {
    let dot: f32 = a.iter().zip(da).map(|(x, y)| x * y).sum();
    a.iter().zip(da).map(|(x, g)| x * (g - dot)).collect()
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial size");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
}

/// Splits a channel-concatenated gradient back into its `(first, rest)` parts.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * g.h * g.w;
    (
        Tensor { c: first, h: g.h, w: g.w, data: g.data[..cut].to_vec() },
        Tensor { c: g.c - first, h: g.h, w: g.w, data: g.data[cut..].to_vec() },
    )
}

/// 2×2 max pooling with stride 2 (forward only; used on fixed inputs).
pub fn max_pool2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for i in 0..oh {
            for j in 0..ow {
                let m = x.data[x.idx(c, 2 * i, 2 * j)]
                    .max(x.data[x.idx(c, 2 * i, 2 * j + 1)])
                    .max(x.data[x.idx(c, 2 * i + 1, 2 * j)])
                    .max(x.data[x.idx(c, 2 * i + 1, 2 * j + 1)]);
                y.data[(c * oh + i) * ow + j] = m;
            }
        }
    }
    y
}

/// Multiplies every channel of `x` by the `h × w` map `a`.
pub fn mul_spatial(x: &Tensor, a: &[f32]) -> Tensor {
    let plane = x.h * x.w;
    assert_eq!(a.len(), plane, "spatial weight size");
    let mut y = x.clone();
    for c in 0..x.c {
        y.data[c * plane..(c + 1) * plane].iter_mut().zip(a).for_each(|(v, w)| *v *= w);
    }
    y
}

/// Returns `(dx, da)` for [`mul_spatial`].
pub fn mul_spatial_backward(x: &Tensor, a: &[f32], dy: &Tensor) -> (Tensor, Vec<f32>) {
    let plane = x.h * x.w;
    let dx = mul_spatial(dy, a);
    let mut da = vec![0.0f32; plane];
    for c in 0..x.c {
        let xs = &x.data[c * plane..(c + 1) * plane];
        let gs = &dy.data[c * plane..(c + 1) * plane];
        for p in 0..plane {
            da[p] += xs[p] * gs[p];
        }
    }
    (dx, da)
}

/// Nearest-neighbour enlargement by `r`.
pub fn upsample_nearest(x: &Tensor, r: usize) -> Tensor {
    let (oh, ow) = (x.h * r, x.w * r);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for i in 0..oh {
            for j in 0..ow {
                y.data[(c * oh + i) * ow + j] = x.data[x.idx(c, i / r, j / r)];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(dy: &Tensor, r: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.h / r, dy.w / r);
    for c in 0..dy.c {
        for i in 0..dy.h {
            for j in 0..dy.w {
                let k = dx.idx(c, i / r, j / r);
                dx.data[k] += dy.data[(c * dy.h + i) * dy.w + j];
            }
        }
    }
    dx
}

/// Average over each channel plane.
pub fn global_mean(x: &Tensor) -> Vec<f32> {
    (0..x.c).map(|c| x.plane(c).iter().sum::<f32>() / (x.h * x.w) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_backward_matches_fd() {
        let z = [0.3f32, -1.2, 2.0, 0.1];
        let g = [0.5f32, -0.3, 0.8, 0.1];
        let a = softmax(&z);
        let dz = softmax_backward(&a, &g);
        for i in 0..4 {
            let mut zp = z;
            zp[i] += 1e-3;
            let mut zm = z;
            zm[i] -= 1e-3;
            let f = |z: &[f32]| softmax(z).iter().zip(&g).map(|(a, g)| a * g).sum::<f32>();
            let fd = (f(&zp) - f(&zm)) / 2e-3;
            assert!((fd - dz[i]).abs() < 1e-3);
        }
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_attention_scales_features() {
        let x = Tensor::from_vec(2, 7, 7, (0..98).map(|v| v as f32).collect()).unwrap();
        let a = vec![1.0 / 49.0; 49];
        let y = mul_spatial(&x, &a);
        for (u, v) in y.data.iter().zip(&x.data) {
            assert!((u - v / 49.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_vec(1, 2, 2, vec![1., 2., 3., 4.]).unwrap();
        let y = upsample_nearest(&x, 2);
        assert_eq!(y.data[..4], [1., 1., 2., 2.]);
        let back = upsample_nearest_backward(&Tensor::from_vec(1, 4, 4, vec![1.0; 16]).unwrap(), 2);
        assert_eq!(back.data, vec![4.0; 4]);
    }

    #[test]
    fn pool_and_concat() {
        let x = Tensor::from_vec(1, 2, 4, vec![1., 5., 2., 0., 3., 4., 8., 1.]).unwrap();
        assert_eq!(max_pool2(&x).data, vec![5., 8.]);
        let c = concat_channels(&x, &x);
        let (a, b) = split_channels(&c, 1);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }
}
