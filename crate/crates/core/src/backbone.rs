//! Shared convolutional feature extractor and spatial pyramid pooling.
//!
//! The stack is `conv3x3 -> ReLU -> conv3x3 -> ReLU -> maxpool 2x2/2`, run
//! once per image. Each proposal is then pooled from the shared feature map
//! over a pyramid of `g x g` grids into a fixed-length vector.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::synthdata::Proposal;

thread_local! {
    static CONV_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of conv-stack forward passes run on the current thread.
pub fn conv_stack_evaluations() -> u64 {
    CONV_EVALS.with(Cell::get)
}

/// Channel-major activations, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(
                "feature_map",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub levels: Vec<usize>,
    pub channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: vec![2, 1],
            channels: 8,
        }
    }
}

impl PyramidConfig {
    /// The 4-level, 32-channel layout (960-dimensional output).
    pub fn large() -> Self {
        Self {
            levels: vec![4, 3, 2, 1],
            channels: 32,
        }
    }

    pub fn bins(&self) -> usize {
        self.levels.iter().map(|g| g * g).sum()
    }

    /// Output length `d = channels * sum(g^2)`.
    pub fn dim(&self) -> usize {
        self.channels * self.bins()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::Config {
                path: "pyramid.levels".into(),
                msg: format!("need a nonempty list of positive grid sizes, got {:?}", self.levels),
            });
        }
        if self.channels == 0 {
            return Err(Error::Config {
                path: "pyramid.channels".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Two 3x3 convolution layers. Weights are `out x (in * 9)`, biases `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub conv1_w: Matrix,
    pub conv1_b: Matrix,
    pub conv2_w: Matrix,
    pub conv2_b: Matrix,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    pool_argmax: Vec<u32>,
}

impl ConvCache {
    /// ReLU on/off flags followed by max-pool winners; two caches with equal
    /// patterns lie in the same linear piece of the stack.
    pub fn pattern(&self) -> Vec<u32> {
        self.z1
            .iter()
            .chain(&self.z2)
            .map(|&z| (z > 0.0) as u32)
            .chain(self.pool_argmax.iter().copied())
            .collect()
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// 3x3, stride 1, zero padding 1. `out` must be zeroed or hold the bias.
fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &Matrix, out: &mut [f64]) {
    let cout = weight.rows();
    for o in 0..cout {
        let wrow = weight.row(o);
        let oplane = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let iplane = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wrow[i * 9 + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // output x range whose source column x + kx - 1 is inside the image
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let src = &iplane[(iy - 1) * w..iy * w];
                        let dst = &mut oplane[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            dst[x] += wv * src[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Weight and (optionally) input gradients of [`conv3x3`].
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &Matrix,
    dout: &[f64],
    dw: &mut Matrix,
    db: &mut Matrix,
    mut din: Option<&mut [f64]>,
) {
    let cout = weight.rows();
    for o in 0..cout {
        let gplane = &dout[o * h * w..(o + 1) * h * w];
        db.as_mut_slice()[o] += gplane.iter().sum::<f64>();
        for i in 0..cin {
            let iplane = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    let k = i * 9 + ky * 3 + kx;
                    let wv = weight.get(o, k);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let src = &iplane[(iy - 1) * w..iy * w];
                        let g = &gplane[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            acc += g[x] * src[x + kx - 1];
                        }
                        if let Some(d) = din.as_deref_mut() {
                            if wv != 0.0 {
                                let dst = &mut d[i * h * w + (iy - 1) * w..i * h * w + iy * w];
                                for x in x0..x1 {
                                    dst[x + kx - 1] += wv * g[x];
                                }
                            }
                        }
                    }
                    dw.as_mut_slice()[o * weight.cols() + k] += acc;
                }
            }
        }
    }
}

impl ConvStack {
    pub fn init(in_channels: usize, hidden: usize, channels: usize, rng: &mut SeededRng) -> Self {
        Self {
            conv1_w: Matrix::uniform(hidden, in_channels * 9, glorot(in_channels * 9, hidden * 9), rng),
            conv1_b: Matrix::zeros(1, hidden),
            conv2_w: Matrix::uniform(channels, hidden * 9, glorot(hidden * 9, channels * 9), rng),
            conv2_b: Matrix::zeros(1, channels),
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize, channels: usize) -> Self {
        Self {
            conv1_w: Matrix::zeros(hidden, in_channels * 9),
            conv1_b: Matrix::zeros(1, hidden),
            conv2_w: Matrix::zeros(channels, hidden * 9),
            conv2_b: Matrix::zeros(1, channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1_w.cols() / 9
    }

    pub fn hidden(&self) -> usize {
        self.conv1_w.rows()
    }

    pub fn channels(&self) -> usize {
        self.conv2_w.rows()
    }

    fn check(&self) -> Result<()> {
        let ok = self.conv1_w.cols().is_multiple_of(9)
            && self.conv1_b.shape() == (1, self.hidden())
            && self.conv2_w.cols() == self.hidden() * 9
            && self.conv2_b.shape() == (1, self.channels());
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "conv_stack",
                format!(
                    "conv1 {:?}+{:?}, conv2 {:?}+{:?}",
                    self.conv1_w.shape(),
                    self.conv1_b.shape(),
                    self.conv2_w.shape(),
                    self.conv2_b.shape()
                ),
            ))
        }
    }

    /// Runs the stack on a `channels x height x width` image.
    pub fn forward(&self, pixels: &[f64], height: usize, width: usize) -> Result<(FeatureMap, ConvCache)> {
        self.check()?;
        let cin = self.in_channels();
        if pixels.len() != cin * height * width {
            return Err(Error::shape(
                "conv_stack",
                format!("image has {} values, expected {cin}x{height}x{width}", pixels.len()),
            ));
        }
        if height < 2 || width < 2 {
            return Err(Error::shape("conv_stack", format!("image {height}x{width} smaller than the 2x2 pool")));
        }
        CONV_EVALS.with(|c| c.set(c.get() + 1));
        let (h, w) = (height, width);
        let plane = h * w;
        let (hid, ch) = (self.hidden(), self.channels());

        let mut z1 = vec![0.0; hid * plane];
        for (o, chunk) in z1.chunks_mut(plane).enumerate() {
            chunk.fill(self.conv1_b.as_slice()[o]);
        }
        conv3x3(pixels, cin, h, w, &self.conv1_w, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();

        let mut z2 = vec![0.0; ch * plane];
        for (o, chunk) in z2.chunks_mut(plane).enumerate() {
            chunk.fill(self.conv2_b.as_slice()[o]);
        }
        conv3x3(&a1, hid, h, w, &self.conv2_w, &mut z2);

        let (ph, pw) = (h / 2, w / 2);
        let mut pooled = vec![0.0; ch * ph * pw];
        let mut pool_argmax = vec![0u32; ch * ph * pw];
        for c in 0..ch {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = c * plane + (2 * py + dy) * w + 2 * px + dx;
                            let v = z2[idx].max(0.0);
                            if v > best {
                                best = v;
                                arg = idx;
                            }
                        }
                    }
                    let o = (c * ph + py) * pw + px;
                    pooled[o] = best;
                    pool_argmax[o] = arg as u32;
                }
            }
        }
        let fm = FeatureMap::new(ch, ph, pw, pooled)?;
        Ok((
            fm,
            ConvCache {
                height: h,
                width: w,
                input: pixels.to_vec(),
                z1,
                a1,
                z2,
                pool_argmax,
            },
        ))
    }

    /// Accumulates weight gradients for an upstream gradient on the feature map.
    pub fn backward(&self, cache: &ConvCache, dfm: &FeatureMap, grads: &mut ConvStack) -> Result<()> {
        let (h, w) = (cache.height, cache.width);
        let plane = h * w;
        let ch = self.channels();
        if dfm.values.len() != cache.pool_argmax.len() {
            return Err(Error::shape(
                "conv_stack_backward",
                format!("gradient has {} values, pooled map {}", dfm.values.len(), cache.pool_argmax.len()),
            ));
        }
        let mut dz2 = vec![0.0; ch * plane];
        for (g, &arg) in dfm.values.iter().zip(&cache.pool_argmax) {
            let arg = arg as usize;
            if cache.z2[arg] > 0.0 {
                dz2[arg] += g;
            }
        }
        let hid = self.hidden();
        let mut da1 = vec![0.0; hid * plane];
        conv3x3_backward(
            &cache.a1,
            hid,
            h,
            w,
            &self.conv2_w,
            &dz2,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
            Some(&mut da1),
        );
        for (d, &z) in da1.iter_mut().zip(&cache.z1) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        conv3x3_backward(
            &cache.input,
            self.in_channels(),
            h,
            w,
            &self.conv1_w,
            &da1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
            None,
        );
        Ok(())
    }
}

/// Argmax cells (flat indices into the feature map) behind one pooled vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SppCache {
    pub argmax: Vec<u32>,
}

fn cell_range(lo_frac: f64, hi_frac: f64, size: usize) -> (usize, usize) {
    let lo = ((lo_frac * size as f64).floor() as usize).min(size - 1);
    let hi = ((hi_frac * size as f64).ceil() as usize).max(lo + 1).min(size);
    (lo, hi)
}

/// `g` bins over `[lo, hi)`: bin `k` spans `[lo + floor(k n / g), lo + ceil((k+1) n / g))`.
fn bin_bounds(lo: usize, hi: usize, g: usize, k: usize) -> (usize, usize) {
    let n = hi - lo;
    let start = lo + (k * n) / g;
    let end = lo + ((k + 1) * n).div_ceil(g);
    (start, end)
}

/// Max-pools the region `coords` (normalized `x1, y1, x2, y2`) over every
/// pyramid level. Output is level-major, then bin (row-major), then channel.
pub fn spp_pool(fm: &FeatureMap, coords: &[f64; 4], cfg: &PyramidConfig) -> Result<(Vec<f64>, SppCache)> {
    cfg.validate()?;
    if fm.channels != cfg.channels {
        return Err(Error::shape(
            "spp_pool",
            format!("feature map has {} channels, pyramid expects {}", fm.channels, cfg.channels),
        ));
    }
    let [l1, l2, l3, l4] = *coords;
    if !(0.0 <= l1 && l1 < l3 && l3 <= 1.0 && 0.0 <= l2 && l2 < l4 && l4 <= 1.0) {
        return Err(Error::Invalid(format!("proposal coordinates {coords:?} not a box in [0,1]")));
    }
    let (x_lo, x_hi) = cell_range(l1, l3, fm.width);
    let (y_lo, y_hi) = cell_range(l2, l4, fm.height);
    let d = cfg.dim();
    let mut out = Vec::with_capacity(d);
    let mut argmax = Vec::with_capacity(d);
    let plane = fm.height * fm.width;
    for &g in &cfg.levels {
        for by in 0..g {
            let (ys, ye) = bin_bounds(y_lo, y_hi, g, by);
            for bx in 0..g {
                let (xs, xe) = bin_bounds(x_lo, x_hi, g, bx);
                for c in 0..fm.channels {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for y in ys..ye {
                        for x in xs..xe {
                            let idx = c * plane + y * fm.width + x;
                            let v = fm.values[idx];
                            if v.is_nan() {
                                return Err(Error::NonFinite(format!("feature map cell {idx} is NaN")));
                            }
                            if v > best {
                                best = v;
                                arg = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(arg as u32);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), d);
    Ok((out, SppCache { argmax }))
}

/// Routes `grad` (length `d`) to the argmax cells, accumulating into `dfm`.
pub fn spp_backward(cache: &SppCache, grad: &[f64], dfm: &mut FeatureMap) {
    for (&g, &arg) in grad.iter().zip(&cache.argmax) {
        dfm.values[arg as usize] += g;
    }
}

/// Pools every proposal into one row of the `N x d` matrix `D`.
pub fn encode_proposals(fm: &FeatureMap, proposals: &[Proposal], cfg: &PyramidConfig) -> Result<(Matrix, Vec<SppCache>)> {
    if proposals.is_empty() {
        return Err(Error::Invalid("no proposals".into()));
    }
    let d = cfg.dim();
    let mut values = Vec::with_capacity(proposals.len() * d);
    let mut caches = Vec::with_capacity(proposals.len());
    for p in proposals {
        let (row, cache) = spp_pool(fm, &p.coords, cfg)?;
        values.extend_from_slice(&row);
        caches.push(cache);
    }
    Ok((Matrix::new(proposals.len(), d, values)?, caches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::BoxRect;

    fn random_fm(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let stack = ConvStack::zeros(1, 4, 8);
        let img = vec![0.7; 16 * 16];
        let (fm, _) = stack.forward(&img, 16, 16).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width), (8, 8, 8));
        assert!(fm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_pools_input() {
        let mut stack = ConvStack::zeros(1, 1, 1);
        stack.conv1_w.set(0, 4, 1.0);
        stack.conv2_w.set(0, 4, 1.0);
        let mut rng = SeededRng::new(2);
        let img: Vec<f64> = (0..36).map(|_| rng.uniform(0.0, 1.0)).collect();
        let (fm, _) = stack.forward(&img, 6, 6).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let m = [img[2 * y * 6 + 2 * x], img[2 * y * 6 + 2 * x + 1], img[(2 * y + 1) * 6 + 2 * x], img[(2 * y + 1) * 6 + 2 * x + 1]]
                    .into_iter()
                    .fold(f64::MIN, f64::max);
                assert_eq!(fm.at(0, y, x), m);
            }
        }
    }

    #[test]
    fn paper_pyramid_dimension() {
        assert_eq!(PyramidConfig::large().dim(), 960);
        assert_eq!(PyramidConfig::default().dim(), 40);
    }

    #[test]
    fn full_box_level_one_is_global_max() {
        let mut rng = SeededRng::new(1);
        let fm = random_fm(&mut rng, 3, 5, 7);
        let cfg = PyramidConfig {
            levels: vec![1],
            channels: 3,
        };
        let (v, _) = spp_pool(&fm, &[0.0, 0.0, 1.0, 1.0], &cfg).unwrap();
        for c in 0..3 {
            let m = fm.values[c * 35..(c + 1) * 35].iter().copied().fold(f64::MIN, f64::max);
            assert_eq!(v[c], m);
        }
    }

    #[test]
    fn constant_map_gives_constant_vector() {
        let fm = FeatureMap::new(4, 6, 6, vec![0.37; 144]).unwrap();
        let cfg = PyramidConfig {
            levels: vec![3, 2, 1],
            channels: 4,
        };
        let (v, _) = spp_pool(&fm, &[0.1, 0.2, 0.4, 0.9], &cfg).unwrap();
        assert_eq!(v.len(), 4 * 14);
        assert!(v.iter().all(|&x| x == 0.37));
    }

    #[test]
    fn tiny_box_maps_to_one_cell() {
        let mut rng = SeededRng::new(8);
        let fm = random_fm(&mut rng, 2, 8, 8);
        let cfg = PyramidConfig::default().with_channels(2);
        let (v, cache) = spp_pool(&fm, &[0.5, 0.5, 0.51, 0.51], &cfg).unwrap();
        assert_eq!(v.len(), cfg.dim());
        // every bin of every level reads cell (4, 4)
        for (k, &arg) in cache.argmax.iter().enumerate() {
            assert_eq!(arg as usize, (k % 2) * 64 + 4 * 8 + 4);
        }
    }

    #[test]
    fn nan_is_rejected() {
        let mut fm = FeatureMap::zeros(1, 2, 2);
        fm.values[0] = f64::NAN;
        let cfg = PyramidConfig {
            levels: vec![1],
            channels: 1,
        };
        assert!(spp_pool(&fm, &[0.0, 0.0, 1.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn identical_proposals_identical_rows() {
        let mut rng = SeededRng::new(3);
        let fm = random_fm(&mut rng, 8, 16, 16);
        let p = Proposal::new(BoxRect::new(3, 5, 20, 30).unwrap(), 32, 32);
        let (d, _) = encode_proposals(&fm, &[p; 5], &PyramidConfig::default()).unwrap();
        assert_eq!(d.shape(), (5, 40));
        for i in 1..5 {
            assert_eq!(d.row(i), d.row(0));
        }
    }

    #[test]
    fn conv_runs_once_per_image() {
        let mut rng = SeededRng::new(5);
        let stack = ConvStack::init(1, 4, 8, &mut rng);
        let img: Vec<f64> = (0..32 * 32).map(|_| rng.uniform(0.0, 1.0)).collect();
        let before = conv_stack_evaluations();
        let (fm, _) = stack.forward(&img, 32, 32).unwrap();
        let props: Vec<Proposal> = (0..16)
            .map(|i| Proposal::new(BoxRect::new(i, i, 16 + i, 16 + i).unwrap(), 32, 32))
            .collect();
        encode_proposals(&fm, &props, &PyramidConfig::default()).unwrap();
        assert_eq!(conv_stack_evaluations() - before, 1);
    }

    impl PyramidConfig {
        fn with_channels(mut self, c: usize) -> Self {
            self.channels = c;
            self
        }
    }
}
