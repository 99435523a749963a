//! Minimal CHW tensors, 3×3 convolutions and dense layers with hand-written backward passes.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Tensor {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert!(a.h == b.h && a.w == b.w);
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
    }

    pub fn split(&self, c0: usize) -> (Tensor, Tensor) {
        let n = self.h * self.w;
        (
            Tensor { c: c0, h: self.h, w: self.w, data: self.data[..c0 * n].to_vec() },
            Tensor { c: self.c - c0, h: self.h, w: self.w, data: self.data[c0 * n..].to_vec() },
        )
    }

    pub fn relu(&self) -> Tensor {
        Tensor { data: self.data.iter().map(|&v| v.max(0.0)).collect(), ..*self }
    }

    /// Gradient through a ReLU whose output is `out`.
    pub fn relu_backward(out: &Tensor, grad: &Tensor) -> Tensor {
        Tensor { data: out.data.iter().zip(&grad.data).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect(), ..*grad }
    }

    /// 2×2 average pooling, dropping a trailing odd row or column.
    pub fn avg_pool(&self) -> Tensor {
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut out = Tensor::zeros(self.c, h2, w2);
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * self.w + 2 * x;
                    dst[y * w2 + x] = 0.25 * (src[i] + src[i + 1] + src[i + self.w] + src[i + self.w + 1]);
                }
            }
        }
        out
    }

    pub fn avg_pool_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(grad.c, h, w);
        for c in 0..grad.c {
            let g = grad.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..grad.h {
                for x in 0..grad.w {
                    let v = 0.25 * g[y * grad.w + x];
                    let i = 2 * y * w + 2 * x;
                    dst[i] += v;
                    dst[i + 1] += v;
                    dst[i + w] += v;
                    dst[i + w + 1] += v;
                }
            }
        }
        out
    }

    /// Nearest-neighbour upsampling to `h × w`.
    pub fn upsample(&self, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let sy = (y / 2).min(self.h - 1);
                for x in 0..w {
                    dst[y * w + x] = src[sy * self.w + (x / 2).min(self.w - 1)];
                }
            }
        }
        out
    }

    pub fn upsample_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(grad.c, h, w);
        for c in 0..grad.c {
            let g = grad.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..grad.h {
                let sy = (y / 2).min(h - 1);
                for x in 0..grad.w {
                    dst[sy * w + (x / 2).min(w - 1)] += g[y * grad.w + x];
                }
            }
        }
        out
    }
}

/// Offsets of a 3×3 tap: the valid output range along one axis and the input shift.
fn tap_range(k: usize, len: usize) -> (usize, usize, isize) {
    match k {
        0 => (1, len, -1),
        1 => (0, len, 0),
        _ => (0, len.saturating_sub(1), 1),
    }
}

/// 3×3 convolution, stride 1, zero padding 1. Weights are `[out][in][3][3]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Conv {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w = (0..cout * cin * 9).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        Conv { cin, cout, w, b: vec![0.0; cout] }
    }

    pub fn zeroed(cin: usize, cout: usize) -> Conv {
        Conv { cin, cout, w: vec![0.0; cout * cin * 9], b: vec![0.0; cout] }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(self.cout, h, w);
        for o in 0..self.cout {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.b[o]);
            for i in 0..self.cin {
                let src = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1, dy) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = self.w[((o * self.cin + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1, dx) = tap_range(kx, w);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let d = &mut dst[y * w + x0..y * w + x1];
                            let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            for (a, b) in d.iter_mut().zip(s) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `gw`, `gb` and returns the input gradient.
    pub fn backward(&self, x: &Tensor, grad: &Tensor, gw: &mut [f32], gb: &mut [f32], need_input: bool) -> Tensor {
        let (h, w) = (x.h, x.w);
        let mut din = Tensor::zeros(if need_input { self.cin } else { 0 }, h, w);
        for o in 0..self.cout {
            let g = grad.plane(o);
            gb[o] += g.iter().sum::<f32>();
            for i in 0..self.cin {
                let src = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1, dy) = tap_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1, dx) = tap_range(kx, w);
                        let widx = ((o * self.cin + i) * 3 + ky) * 3 + kx;
                        let wv = self.w[widx];
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let gs = &g[y * w + x0..y * w + x1];
                            let lo = sy * w + (x0 as isize + dx) as usize;
                            let hi = sy * w + (x1 as isize + dx) as usize;
                            for (a, b) in gs.iter().zip(&src[lo..hi]) {
                                acc += a * b;
                            }
                            if need_input && wv != 0.0 {
                                let d = &mut din.plane_mut(i)[lo..hi];
                                for (a, b) in d.iter_mut().zip(gs) {
                                    *a += wv * b;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        din
    }
}

/// Dense layer `y = W x + b` with `W` as `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    pub cin: usize,
    pub cout: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Dense {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Dense {
        let std = (1.0 / cin as f64).sqrt();
        let w = (0..cout * cin).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        Dense { cin, cout, w, b: vec![0.0; cout] }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.cout).map(|o| self.b[o] + self.w[o * self.cin..(o + 1) * self.cin].iter().zip(x).map(|(a, b)| a * b).sum::<f32>()).collect()
    }

    pub fn backward(&self, x: &[f32], grad: &[f32], gw: &mut [f32], gb: &mut [f32]) {
        for o in 0..self.cout {
            gb[o] += grad[o];
            for i in 0..self.cin {
                gw[o * self.cin + i] += grad[o] * x[i];
            }
        }
    }
}

/// Sinusoidal embedding of a position in [0, 1], scaled to a 1000-step range.
pub(crate) fn time_embedding(pos: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let t = pos * 1000.0;
    let mut e = Vec::with_capacity(dim);
    for k in 0..half {
        let f = (-(1000f64).ln() * k as f64 / half as f64).exp();
        e.push((t * f).sin() as f32);
    }
    for k in 0..half {
        let f = (-(1000f64).ln() * k as f64 / half as f64).exp();
        e.push((t * f).cos() as f32);
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor { c, h, w, data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::new(2, 3, &mut rng);
        let x = random(2, 5, 4, &mut rng);
        let y = conv.forward(&x);
        for o in 0..3 {
            for py in 0..5 {
                for px in 0..4 {
                    let mut s = conv.b[o] as f64;
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                                if sy >= 0 && sy < 5 && sx >= 0 && sx < 4 {
                                    s += conv.w[((o * 2 + i) * 3 + ky) * 3 + kx] as f64
                                        * x.data[(i * 5 + sy as usize) * 4 + sx as usize] as f64;
                                }
                            }
                        }
                    }
                    assert!((s - y.data[(o * 5 + py) * 4 + px] as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv::new(3, 2, &mut rng);
        conv.b.iter_mut().for_each(|b| *b = 0.0);
        let x = random(3, 6, 7, &mut rng);
        let g = random(2, 6, 7, &mut rng);
        let mut gw = vec![0.0; conv.w.len()];
        let mut gb = vec![0.0; 2];
        let dx = conv.backward(&x, &g, &mut gw, &mut gb, true);
        assert!((dot(&conv.forward(&x), &g) - dot(&x, &dx)).abs() < 1e-4);
        let k = 13;
        let h = 1e-2;
        let mut cp = conv.clone();
        cp.w[k] += h;
        let fd = (dot(&cp.forward(&x), &g) - dot(&conv.forward(&x), &g)) / h as f64;
        assert!((fd - gw[k] as f64).abs() < 1e-3, "{fd} vs {}", gw[k]);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(2, 7, 6, &mut rng);
        let g = random(2, 3, 3, &mut rng);
        assert!((dot(&x.avg_pool(), &g) - dot(&x, &Tensor::avg_pool_backward(&g, 7, 6))).abs() < 1e-5);
        let g = random(2, 7, 6, &mut rng);
        let s = random(2, 3, 3, &mut rng);
        assert!((dot(&s.upsample(7, 6), &g) - dot(&s, &Tensor::upsample_backward(&g, 3, 3))).abs() < 1e-5);
    }
}
