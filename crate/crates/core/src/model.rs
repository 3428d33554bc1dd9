//! The full network and the flat baseline: parameters, per-image forward
//! pass with cached intermediates, and the matching backward pass.

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_proposals, spp_backward, ConvCache, ConvStack, FeatureMap, PyramidConfig, SppCache};
use crate::error::{Error, Result};
use crate::hashcode::{cross_proposal_fusion, fusion_backward, semantic_project, semantic_project_backward, InstanceRep};
use crate::labelprob::{
    cross_hypothesis_maxpool, image_probability, maxpool_backward, proposal_probabilities,
    proposal_probabilities_backward, PooledScores,
};
use crate::numerics::{affine_backward, affine_forward, Matrix, SeededRng};
use crate::synthdata::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Proposals, label probabilities and cross-proposal fusion.
    Full,
    /// Global average pool of the feature map, one affine layer to `c x b`.
    FlatBaseline,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Full => 0,
            ModelKind::FlatBaseline => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Full),
            1 => Some(ModelKind::FlatBaseline),
            _ => None,
        }
    }
}

/// Hyper-shape of a model; every tensor shape follows from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub categories: usize,
    pub bits: usize,
    pub semantic_bits: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub pyramid: PyramidConfig,
}

impl ModelShape {
    pub fn dim(&self) -> usize {
        self.pyramid.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        let positive = [
            ("categories", self.categories),
            ("bits", self.bits),
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    path: format!("model.{name}"),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// All learnable tensors. Biases are `1 x n` matrices; tensors a model kind
/// does not use are `0 x 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub shape: ModelShape,
    pub backbone: ConvStack,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
    pub hash_w: Matrix,
    pub hash_b: Matrix,
    pub sem_w: Matrix,
    pub sem_b: Matrix,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(kind: ModelKind, shape: ModelShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let (c, b, q, d) = (shape.categories, shape.bits, shape.semantic_bits, shape.dim());
        let ch = shape.pyramid.channels;
        let backbone = ConvStack::init(shape.in_channels, shape.hidden, ch, rng);
        let affine = |rows: usize, cols: usize, rng: &mut SeededRng| {
            (Matrix::uniform(rows, cols, glorot(rows, cols), rng), Matrix::zeros(1, cols))
        };
        let params = match kind {
            ModelKind::Full => {
                let (cls_w, cls_b) = affine(d, c, rng);
                let (hash_w, hash_b) = affine(d, b, rng);
                let (sem_w, sem_b) = affine(c * b, q, rng);
                Self {
                    kind,
                    shape,
                    backbone,
                    cls_w,
                    cls_b,
                    hash_w,
                    hash_b,
                    sem_w,
                    sem_b,
                }
            }
            ModelKind::FlatBaseline => {
                let (hash_w, hash_b) = affine(ch, c * b, rng);
                Self {
                    kind,
                    shape,
                    backbone,
                    cls_w: Matrix::zeros(0, 0),
                    cls_b: Matrix::zeros(0, 0),
                    hash_w,
                    hash_b,
                    sem_w: Matrix::zeros(0, 0),
                    sem_b: Matrix::zeros(0, 0),
                }
            }
        };
        Ok(params)
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            kind: self.kind,
            shape: self.shape.clone(),
            backbone: ConvStack {
                conv1_w: z(&self.backbone.conv1_w),
                conv1_b: z(&self.backbone.conv1_b),
                conv2_w: z(&self.backbone.conv2_w),
                conv2_b: z(&self.backbone.conv2_b),
            },
            cls_w: z(&self.cls_w),
            cls_b: z(&self.cls_b),
            hash_w: z(&self.hash_w),
            hash_b: z(&self.hash_b),
            sem_w: z(&self.sem_w),
            sem_b: z(&self.sem_b),
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("conv1_w", &self.backbone.conv1_w),
            ("conv1_b", &self.backbone.conv1_b),
            ("conv2_w", &self.backbone.conv2_w),
            ("conv2_b", &self.backbone.conv2_b),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("hash_w", &self.hash_w),
            ("hash_b", &self.hash_b),
            ("sem_w", &self.sem_w),
            ("sem_b", &self.sem_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.backbone.conv1_w,
            &mut self.backbone.conv1_b,
            &mut self.backbone.conv2_w,
            &mut self.backbone.conv2_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.hash_w,
            &mut self.hash_b,
            &mut self.sem_w,
            &mut self.sem_b,
        ]
    }

    /// Expected `(rows, cols)` of every tensor for `kind` and `shape`.
    pub fn expected_shapes(kind: ModelKind, shape: &ModelShape) -> [(usize, usize); 10] {
        let (c, b, q, d) = (shape.categories, shape.bits, shape.semantic_bits, shape.dim());
        let (cin, hid, ch) = (shape.in_channels, shape.hidden, shape.pyramid.channels);
        let conv = [(hid, cin * 9), (1, hid), (ch, hid * 9), (1, ch)];
        let rest = match kind {
            ModelKind::Full => [(d, c), (1, c), (d, b), (1, b), (c * b, q), (1, q)],
            ModelKind::FlatBaseline => [(0, 0), (0, 0), (ch, c * b), (1, c * b), (0, 0), (0, 0)],
        };
        let mut out = [(0, 0); 10];
        out[..4].copy_from_slice(&conv);
        out[4..].copy_from_slice(&rest);
        out
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::expected_shapes(self.kind, &self.shape);
        for ((name, m), want) in self.tensors().iter().zip(expected) {
            if m.shape() != want {
                return Err(Error::shape("model", format!("{name} is {:?}, expected {want:?}", m.shape())));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// `self += alpha * other` over every tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let others = other.tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(others) {
            dst.add_scaled(alpha, src);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn has_semantic_head(&self) -> bool {
        self.kind == ModelKind::Full && self.shape.semantic_bits > 0
    }
}

/// Cached intermediates of the full model's heads.
#[derive(Debug, Clone)]
pub struct FullCache {
    pub d: Matrix,
    pub spp: Vec<SppCache>,
    pub logits: Matrix,
    pub pooled: PooledScores,
    pub probs: Matrix,
    pub feats: Matrix,
}

#[derive(Debug, Clone)]
pub enum HeadCache {
    Full(FullCache),
    Flat { gap: Matrix },
}

/// One image's forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub conv: ConvCache,
    pub fm: FeatureMap,
    pub head: HeadCache,
    /// Image-level category probabilities (uniform for the baseline).
    pub p: Vec<f64>,
    pub f: InstanceRep,
    pub s: Option<Vec<f64>>,
}

impl Forward {
    /// Which linear piece of the network this pass lies in.
    pub fn pattern(&self) -> Vec<u32> {
        let mut out = self.conv.pattern();
        if let HeadCache::Full(c) = &self.head {
            for s in &c.spp {
                out.extend_from_slice(&s.argmax);
            }
            out.extend(c.pooled.argmax_rows.iter().map(|&r| r as u32));
        }
        out
    }

    pub fn probs(&self) -> Option<&Matrix> {
        match &self.head {
            HeadCache::Full(c) => Some(&c.probs),
            HeadCache::Flat { .. } => None,
        }
    }
}

/// Upstream gradients flowing into one image's forward pass.
#[derive(Debug, Clone)]
pub struct Upstream {
    /// Gradient on the pooled scores `m`.
    pub grad_m: Option<Vec<f64>>,
    pub df: InstanceRep,
    pub ds: Option<Vec<f64>>,
}

impl Upstream {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            grad_m: None,
            df: InstanceRep::zeros(shape.categories, shape.bits),
            ds: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grad_m.is_none() && self.ds.is_none() && self.df.values.iter().all(|&v| v == 0.0)
    }
}

pub fn image_pixels(record: &Record) -> Vec<f64> {
    record.scene.pixels.iter().map(|&p| p as f64).collect()
}

impl ModelParams {
    pub fn forward(&self, record: &Record) -> Result<Forward> {
        let scene = &record.scene;
        if scene.labels.len() != self.shape.categories {
            return Err(Error::shape(
                "forward",
                format!("scene {} has {} labels, model has c={}", scene.id, scene.labels.len(), self.shape.categories),
            ));
        }
        let (fm, conv) = self.backbone.forward(&image_pixels(record), scene.height, scene.width)?;
        match self.kind {
            ModelKind::Full => {
                let (d, spp) = encode_proposals(&fm, &record.proposals, &self.shape.pyramid)?;
                let logits = affine_forward(&d, &self.cls_w, self.cls_b.as_slice())?;
                let pooled = cross_hypothesis_maxpool(&logits)?;
                let p = image_probability(&pooled);
                let probs = proposal_probabilities(&logits);
                let feats = affine_forward(&d, &self.hash_w, self.hash_b.as_slice())?;
                let f = cross_proposal_fusion(&probs, &feats)?;
                let s = if self.has_semantic_head() {
                    Some(semantic_project(&f, &self.sem_w, self.sem_b.as_slice())?)
                } else {
                    None
                };
                Ok(Forward {
                    conv,
                    fm,
                    head: HeadCache::Full(FullCache {
                        d,
                        spp,
                        logits,
                        pooled,
                        probs,
                        feats,
                    }),
                    p,
                    f,
                    s,
                })
            }
            ModelKind::FlatBaseline => {
                let plane = (fm.height * fm.width) as f64;
                let gap: Vec<f64> = fm
                    .values
                    .chunks(fm.height * fm.width)
                    .map(|c| c.iter().sum::<f64>() / plane)
                    .collect();
                let gap = Matrix::new(1, fm.channels, gap)?;
                let flat = affine_forward(&gap, &self.hash_w, self.hash_b.as_slice())?;
                let c = self.shape.categories;
                let f = InstanceRep {
                    categories: c,
                    bits: self.shape.bits,
                    values: flat.into_values(),
                };
                Ok(Forward {
                    conv,
                    fm,
                    head: HeadCache::Flat { gap },
                    p: vec![1.0 / c as f64; c],
                    f,
                    s: None,
                })
            }
        }
    }

    /// Accumulates parameter gradients for one image into `grads`.
    pub fn backward(&self, fwd: &Forward, up: &Upstream, grads: &mut ModelParams) -> Result<()> {
        let mut dfm = FeatureMap::zeros(fwd.fm.channels, fwd.fm.height, fwd.fm.width);
        match &fwd.head {
            HeadCache::Full(cache) => {
                let mut df = up.df.clone();
                if let Some(ds) = &up.ds {
                    if !self.has_semantic_head() {
                        return Err(Error::Invalid("semantic gradient for a model without a semantic head".into()));
                    }
                    let g = semantic_project_backward(&fwd.f, &self.sem_w, ds)?;
                    grads.sem_w.add_scaled(1.0, &g.dw);
                    for (a, b) in grads.sem_b.as_mut_slice().iter_mut().zip(&g.dbias) {
                        *a += b;
                    }
                    for (a, b) in df.values.iter_mut().zip(g.dx.as_slice()) {
                        *a += b;
                    }
                }
                let (dprobs, dfeats) = fusion_backward(&cache.probs, &cache.feats, &df)?;
                let mut dlogits = proposal_probabilities_backward(&cache.probs, &dprobs);
                if let Some(gm) = &up.grad_m {
                    dlogits.add_scaled(1.0, &maxpool_backward(&cache.pooled, gm, cache.logits.rows()));
                }
                let gh = affine_backward(&cache.d, &self.hash_w, &dfeats)?;
                let gc = affine_backward(&cache.d, &self.cls_w, &dlogits)?;
                grads.hash_w.add_scaled(1.0, &gh.dw);
                grads.cls_w.add_scaled(1.0, &gc.dw);
                for (a, b) in grads.hash_b.as_mut_slice().iter_mut().zip(&gh.dbias) {
                    *a += b;
                }
                for (a, b) in grads.cls_b.as_mut_slice().iter_mut().zip(&gc.dbias) {
                    *a += b;
                }
                let mut dd = gh.dx;
                dd.add_scaled(1.0, &gc.dx);
                for (i, spp) in cache.spp.iter().enumerate() {
                    spp_backward(spp, dd.row(i), &mut dfm);
                }
            }
            HeadCache::Flat { gap } => {
                let dy = Matrix::new(1, up.df.values.len(), up.df.values.clone())?;
                let g = affine_backward(gap, &self.hash_w, &dy)?;
                grads.hash_w.add_scaled(1.0, &g.dw);
                for (a, b) in grads.hash_b.as_mut_slice().iter_mut().zip(&g.dbias) {
                    *a += b;
                }
                let plane = dfm.height * dfm.width;
                for (c, chunk) in dfm.values.chunks_mut(plane).enumerate() {
                    chunk.fill(g.dx.as_slice()[c] / plane as f64);
                }
            }
        }
        self.backbone.backward(&fwd.conv, &dfm, &mut grads.backbone)
    }
}
