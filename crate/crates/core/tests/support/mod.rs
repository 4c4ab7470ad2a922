//! Straight-line f64 reference implementations used as test oracles. Nothing
//! here calls into the library's numeric kernels; parameters are only read.
#![allow(dead_code)]

use adf_core::attention::{Attention, CbamParams, GateMlp, SeParams};
use adf_core::backbone::Backbone;
use adf_core::flow::{Flow, Subnet};
use adf_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Map3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map3 { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Map3 {
            c: s[0],
            h: s[1],
            w: s[2],
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.d[(c * self.h + y) * self.w + x] = v;
    }
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Direct-sum convolution; `kernel` is `[O, C, KH, KW]`.
pub fn conv(x: &Map3, kernel: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Map3 {
    let ks = kernel.shape();
    let (o, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    assert_eq!(c, x.c);
    let k = f64s(kernel);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut out = Map3::zeros(o, oh, ow);
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += k[((oc * c + ic) * kh + dy) * kw + dx] * x.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(oc, y, xx, acc);
            }
        }
    }
    out
}

pub fn relu(mut x: Map3) -> Map3 {
    x.d.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn max_pool(x: &Map3, window: usize, stride: usize) -> Map3 {
    let oh = (x.h - window) / stride + 1;
    let ow = (x.w - window) / stride + 1;
    let mut out = Map3::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        m = m.max(x.at(c, y * stride + dy, xx * stride + dx));
                    }
                }
                out.set(c, y, xx, m);
            }
        }
    }
    out
}

pub fn gap(x: &Map3) -> Vec<f64> {
    (0..x.c)
        .map(|c| {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(c, y, xx);
                }
            }
            s / (x.h * x.w) as f64
        })
        .collect()
}

pub fn gmp(x: &Map3) -> Vec<f64> {
    (0..x.c)
        .map(|c| {
            let mut m = f64::NEG_INFINITY;
            for y in 0..x.h {
                for xx in 0..x.w {
                    m = m.max(x.at(c, y, xx));
                }
            }
            m
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, x.len());
    let wd = w.data();
    (0..o)
        .map(|r| b.data()[r] as f64 + (0..i).map(|c| wd[r * i + c] as f64 * x[c]).sum::<f64>())
        .collect()
}

pub fn mlp(m: &GateMlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(&m.w1, &m.b1, x).into_iter().map(|v| v.max(0.0)).collect();
    affine(&m.w2, &m.b2, &h)
}

pub fn scale_channels(x: &Map3, g: &[f64]) -> Map3 {
    let mut out = x.clone();
    let plane = x.h * x.w;
    for (i, v) in out.d.iter_mut().enumerate() {
        *v *= g[i / plane];
    }
    out
}

pub fn se(x: &Map3, p: &SeParams) -> Map3 {
    let gates: Vec<f64> = mlp(&p.mlp, &gap(x)).into_iter().map(sigmoid).collect();
    scale_channels(x, &gates)
}

pub fn cbam(x: &Map3, p: &CbamParams) -> Map3 {
    let a = mlp(&p.mlp, &gap(x));
    let m = mlp(&p.mlp, &gmp(x));
    let gates: Vec<f64> = a.iter().zip(&m).map(|(a, m)| sigmoid(a + m)).collect();
    let xc = scale_channels(x, &gates);
    let mut maps = Map3::zeros(2, x.h, x.w);
    for y in 0..x.h {
        for xx in 0..x.w {
            let vals: Vec<f64> = (0..x.c).map(|c| xc.at(c, y, xx)).collect();
            maps.set(0, y, xx, vals.iter().sum::<f64>() / x.c as f64);
            maps.set(1, y, xx, vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let k = p.spatial_kernel.shape()[2];
    let logits = conv(&maps, &p.spatial_kernel, &[p.spatial_bias.data()[0] as f64], 1, (k - 1) / 2);
    let mut out = xc.clone();
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                out.set(c, y, xx, xc.at(c, y, xx) * sigmoid(logits.at(0, y, xx)));
            }
        }
    }
    out
}

pub fn attention(x: &Map3, a: &Attention) -> Map3 {
    match a {
        Attention::None => x.clone(),
        Attention::Se(p) => se(x, p),
        Attention::Cbam(p) => cbam(x, p),
    }
}

/// Half-pixel-center bilinear resize with edge clamping.
pub fn resize(x: &Map3, oh: usize, ow: usize) -> Map3 {
    let mut out = Map3::zeros(x.c, oh, ow);
    let coord = |d: usize, n_in: usize, n_out: usize| {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    for c in 0..x.c {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, x.h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, x.w, ow);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                out.set(c, y, xx, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Output of every stage at one scale.
pub fn backbone_stage_outputs(bb: &Backbone, image: &Tensor, scale: usize) -> Vec<Map3> {
    let spec = bb.spec();
    let mut x = resize(&Map3::from_tensor(image), scale, scale);
    let mut outs = Vec::new();
    for (i, st) in bb.stages().iter().enumerate() {
        let ss = &spec.stages[i];
        let mut y = relu(conv(&x, &st.kernel, &f64s(&st.bias), ss.stride, ss.padding));
        if let Some(p) = ss.pool {
            y = max_pool(&y, p.window, p.stride);
        }
        x = attention(&y, &st.attention);
        outs.push(x.clone());
    }
    outs
}

/// Runs stages `from..` starting from a given activation, then pools.
pub fn backbone_tail(bb: &Backbone, start: &Map3, from: usize) -> Vec<f64> {
    let spec = bb.spec();
    let mut x = start.clone();
    for (i, st) in bb.stages().iter().enumerate().skip(from) {
        let ss = &spec.stages[i];
        let mut y = relu(conv(&x, &st.kernel, &f64s(&st.bias), ss.stride, ss.padding));
        if let Some(p) = ss.pool {
            y = max_pool(&y, p.window, p.stride);
        }
        x = attention(&y, &st.attention);
    }
    gap(&x)
}

pub fn backbone(bb: &Backbone, image: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for &s in &bb.spec().scales {
        let outs = backbone_stage_outputs(bb, image, s);
        out.extend(gap(outs.last().unwrap()));
    }
    out
}

pub fn subnet(s: &Subnet, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(&s.w1, &s.b1, x).into_iter().map(|v| v.max(0.0)).collect();
    affine(&s.w2, &s.b2, &h)
}

/// `(z, log_det)`.
pub fn flow(f: &Flow, x: &[f64]) -> (Vec<f64>, f64) {
    let alpha = f.config().clamp as f64;
    let clamp = |v: f64| alpha * (v / alpha).tanh();
    let d = x.len();
    let h = d / 2;
    let mut cur = x.to_vec();
    let mut log_det = 0.0;
    for b in f.blocks() {
        let u: Vec<f64> = b.permutation.iter().map(|&p| cur[p as usize]).collect();
        let (u1, u2) = u.split_at(h);
        let a2: Vec<f64> = subnet(&b.s2, u2).into_iter().map(clamp).collect();
        let t2 = subnet(&b.t2, u2);
        let v1: Vec<f64> = (0..h).map(|i| u1[i] * a2[i].exp() + t2[i]).collect();
        let a1: Vec<f64> = subnet(&b.s1, &v1).into_iter().map(clamp).collect();
        let t1 = subnet(&b.t1, &v1);
        let v2: Vec<f64> = (0..h).map(|i| u2[i] * a1[i].exp() + t1[i]).collect();
        log_det += a1.iter().sum::<f64>() + a2.iter().sum::<f64>();
        cur = v1.into_iter().chain(v2).collect();
    }
    (cur, log_det)
}

pub fn nll(z: &[f64], log_det: f64) -> f64 {
    0.5 * z.iter().map(|v| v * v).sum::<f64>() - log_det
}

pub fn flow_nll(f: &Flow, x: &[f64]) -> f64 {
    let (z, ld) = flow(f, x);
    nll(&z, ld)
}

/// nll of one image through backbone and flow.
pub fn image_nll(bb: &Backbone, f: &Flow, image: &Tensor) -> f64 {
    flow_nll(f, &backbone(bb, image))
}

/// Central difference around `orig` using the exact f32-representable step.
/// `eval(v)` must evaluate the loss with the parameter set to `v`.
pub fn central_diff(orig: f32, eps: f32, mut eval: impl FnMut(f32) -> f64) -> f64 {
    let plus = orig + eps;
    let minus = orig - eps;
    (eval(plus) - eval(minus)) / (plus as f64 - minus as f64)
}

/// `|a - n| <= max(rel * max(|a|, |n|), floor)`.
pub fn close(a: f64, n: f64, rel: f64, floor: f64) -> bool {
    (a - n).abs() <= (rel * a.abs().max(n.abs())).max(floor)
}
