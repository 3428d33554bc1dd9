//! Hash coding: cross-proposal fusion into the grouped instance-aware
//! representation, sign binarization, the triplet losses, and the code file.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Forward, ModelParams};
use crate::numerics::{affine_backward, affine_forward, AffineGrads, Matrix};
use crate::synthdata::{LabelVector, Record};

/// Packed bit string. Bit 0 is the most significant bit of word 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitCode {
    len: usize,
    words: Vec<u64>,
}

impl BitCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (k, &b) in bits.iter().enumerate() {
            if b {
                code.set(k);
            }
        }
        code
    }

    pub fn from_words(len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::shape("bitcode", format!("{} words for {len} bits", words.len())));
        }
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= !0u64 << (64 - len % 64);
            }
        }
        Ok(Self { len, words })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        self.words[k / 64] >> (63 - k % 64) & 1 == 1
    }

    fn set(&mut self, k: usize) {
        self.words[k / 64] |= 1 << (63 - k % 64);
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|k| self.get(k)).collect()
    }

    /// Hex digits, four bits each, most significant (bit 0) first; the last
    /// digit is zero-padded on the right.
    pub fn to_hex(&self) -> String {
        (0..self.len.div_ceil(4))
            .map(|n| {
                let nibble = (0..4).fold(0u32, |acc, i| {
                    let k = 4 * n + i;
                    (acc << 1) | (k < self.len && self.get(k)) as u32
                });
                char::from_digit(nibble, 16).expect("nibble")
            })
            .collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if hex.len() != len.div_ceil(4) {
            return Err(Error::Invalid(format!("{} hex digits for {len} bits", hex.len())));
        }
        let mut code = Self::zeros(len);
        for (n, ch) in hex.chars().enumerate() {
            let nibble = ch
                .to_digit(16)
                .ok_or_else(|| Error::Invalid(format!("bad hex digit `{ch}`")))?;
            for i in 0..4 {
                let k = 4 * n + i;
                if nibble >> (3 - i) & 1 == 1 {
                    if k >= len {
                        return Err(Error::Invalid(format!("padding bit {k} set in `{hex}`")));
                    }
                    code.set(k);
                }
            }
        }
        Ok(code)
    }
}

/// `bit = 1` iff the value is strictly positive.
pub fn binarize(values: &[f64]) -> BitCode {
    let mut code = BitCode::zeros(values.len());
    for (k, &v) in values.iter().enumerate() {
        if v > 0.0 {
            code.set(k);
        }
    }
    code
}

/// Fused representation `f`: `c` groups of `b` values, group-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRep {
    pub categories: usize,
    pub bits: usize,
    pub values: Vec<f64>,
}

impl InstanceRep {
    pub fn zeros(categories: usize, bits: usize) -> Self {
        Self {
            categories,
            bits,
            values: vec![0.0; categories * bits],
        }
    }

    #[inline]
    pub fn group(&self, j: usize) -> &[f64] {
        &self.values[j * self.bits..(j + 1) * self.bits]
    }

    #[inline]
    pub fn group_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.bits..(j + 1) * self.bits]
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::new(1, self.values.len(), self.values.clone()).expect("finite representation")
    }
}

/// `f^(j) = (1/N) sum_i P[i][j] H[i]`.
pub fn cross_proposal_fusion(probs: &Matrix, feats: &Matrix) -> Result<InstanceRep> {
    if probs.rows() != feats.rows() || probs.rows() == 0 {
        return Err(Error::shape(
            "cross_proposal_fusion",
            format!("P has {} rows, H has {}", probs.rows(), feats.rows()),
        ));
    }
    let n = probs.rows() as f64;
    let mut f = InstanceRep::zeros(probs.cols(), feats.cols());
    for i in 0..probs.rows() {
        let h = feats.row(i);
        for (j, &pij) in probs.row(i).iter().enumerate() {
            for (o, &hk) in f.group_mut(j).iter_mut().zip(h) {
                *o += pij * hk;
            }
        }
    }
    f.values.iter_mut().for_each(|v| *v /= n);
    Ok(f)
}

/// Gradients `(dP, dH)` of the fusion for an upstream gradient `df`.
pub fn fusion_backward(probs: &Matrix, feats: &Matrix, df: &InstanceRep) -> Result<(Matrix, Matrix)> {
    if probs.rows() != feats.rows() || df.categories != probs.cols() || df.bits != feats.cols() {
        return Err(Error::shape(
            "fusion_backward",
            format!(
                "P {:?}, H {:?}, df {}x{}",
                probs.shape(),
                feats.shape(),
                df.categories,
                df.bits
            ),
        ));
    }
    let n = probs.rows() as f64;
    let mut dp = Matrix::zeros(probs.rows(), probs.cols());
    let mut dh = Matrix::zeros(feats.rows(), feats.cols());
    for i in 0..probs.rows() {
        let h = feats.row(i);
        for j in 0..probs.cols() {
            let g = df.group(j);
            dp.set(i, j, g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n);
            let pij = probs.get(i, j) / n;
            for (o, &gk) in dh.row_mut(i).iter_mut().zip(g) {
                *o += pij * gk;
            }
        }
    }
    Ok((dp, dh))
}

/// Loss value and subgradients with respect to the anchor, positive and negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

pub const DEFAULT_MARGIN: f64 = 1.0;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, margin - |a - neg|^2 + |a - pos|^2)`; all gradients are zero when
/// the hinge is inactive.
pub fn triplet_loss_with_margin(a: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> Result<TripletOutput> {
    if a.len() != pos.len() || a.len() != neg.len() {
        return Err(Error::shape(
            "triplet_loss",
            format!("lengths {}, {}, {}", a.len(), pos.len(), neg.len()),
        ));
    }
    let slack = margin - sq_dist(a, neg) + sq_dist(a, pos);
    let n = a.len();
    if slack <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; n],
            grad_pos: vec![0.0; n],
            grad_neg: vec![0.0; n],
        });
    }
    Ok(TripletOutput {
        loss: slack,
        grad_anchor: neg.iter().zip(pos).map(|(n, p)| 2.0 * (n - p)).collect(),
        grad_pos: pos.iter().zip(a).map(|(p, a)| 2.0 * (p - a)).collect(),
        grad_neg: a.iter().zip(neg).map(|(a, n)| 2.0 * (a - n)).collect(),
    })
}

pub fn triplet_loss(a: &[f64], pos: &[f64], neg: &[f64]) -> Result<TripletOutput> {
    triplet_loss_with_margin(a, pos, neg, DEFAULT_MARGIN)
}

/// Triplet loss on group `j` only. Returned gradients are full-size
/// representations with every other group zero.
pub fn category_triplet_loss(
    anchor: &InstanceRep,
    pos: &InstanceRep,
    neg: &InstanceRep,
    j: usize,
    margin: f64,
) -> Result<(f64, [InstanceRep; 3])> {
    let shape = (anchor.categories, anchor.bits);
    if (pos.categories, pos.bits) != shape || (neg.categories, neg.bits) != shape || j >= shape.0 {
        return Err(Error::shape(
            "category_triplet_loss",
            format!("group {j} of {shape:?}, {:?}, {:?}", (pos.categories, pos.bits), (neg.categories, neg.bits)),
        ));
    }
    let out = triplet_loss_with_margin(anchor.group(j), pos.group(j), neg.group(j), margin)?;
    let lift = |g: &[f64]| {
        let mut r = InstanceRep::zeros(shape.0, shape.1);
        r.group_mut(j).copy_from_slice(g);
        r
    };
    Ok((
        out.loss,
        [lift(&out.grad_anchor), lift(&out.grad_pos), lift(&out.grad_neg)],
    ))
}

/// `s = flatten(f) W_s + bias`.
pub fn semantic_project(f: &InstanceRep, weight: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.rows() != f.values.len() {
        return Err(Error::shape(
            "semantic_project",
            format!("f has {} values, W_s is {:?}", f.values.len(), weight.shape()),
        ));
    }
    Ok(affine_forward(&f.as_row(), weight, bias)?.into_values())
}

/// Gradients of [`semantic_project`]; `dx` is the gradient on `flatten(f)`.
pub fn semantic_project_backward(f: &InstanceRep, weight: &Matrix, ds: &[f64]) -> Result<AffineGrads> {
    let dy = Matrix::new(1, ds.len(), ds.to_vec())?;
    affine_backward(&f.as_row(), weight, &dy)
}

/// `2^sim_pos - 2^sim_neg`.
pub fn triplet_weight(sim_pos: usize, sim_neg: usize) -> Result<f64> {
    if sim_pos <= sim_neg {
        return Err(Error::Invalid(format!(
            "weighted triplet needs sim(I, I+) > sim(I, I-), got {sim_pos} <= {sim_neg}"
        )));
    }
    Ok(2f64.powi(sim_pos as i32) - 2f64.powi(sim_neg as i32))
}

/// Triplet loss scaled by [`triplet_weight`].
pub fn weighted_triplet_loss(
    s: &[f64],
    s_pos: &[f64],
    s_neg: &[f64],
    sim_pos: usize,
    sim_neg: usize,
    margin: f64,
) -> Result<TripletOutput> {
    let w = triplet_weight(sim_pos, sim_neg)?;
    let mut out = triplet_loss_with_margin(s, s_pos, s_neg, margin)?;
    out.loss *= w;
    for g in [&mut out.grad_anchor, &mut out.grad_pos, &mut out.grad_neg] {
        g.iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

/// Number of labels relevant to both images.
pub fn shared_labels(a: &LabelVector, b: &LabelVector) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape("shared_labels", format!("{} vs {} labels", a.len(), b.len())));
    }
    Ok(a.flags().iter().zip(b.flags()).filter(|(x, y)| **x == 1 && **y == 1).count())
}

/// Everything retrieval needs to know about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBundle {
    pub id: u64,
    pub category_codes: Vec<BitCode>,
    pub probs: Vec<f64>,
    pub semantic: Option<BitCode>,
}

impl CodeBundle {
    pub fn categories(&self) -> usize {
        self.category_codes.len()
    }

    pub fn bits(&self) -> usize {
        self.category_codes.first().map_or(0, BitCode::len)
    }

    pub fn semantic_bits(&self) -> usize {
        self.semantic.as_ref().map_or(0, BitCode::len)
    }
}

/// Codes and probabilities read off a finished forward pass.
pub fn bundle_from_forward(id: u64, fwd: &Forward) -> CodeBundle {
    CodeBundle {
        id,
        category_codes: (0..fwd.f.categories).map(|j| binarize(fwd.f.group(j))).collect(),
        probs: fwd.p.clone(),
        semantic: fwd.s.as_deref().map(binarize),
    }
}

/// Runs the whole network on one image and binarizes its representations.
pub fn encode_image(record: &Record, model: &ModelParams) -> Result<CodeBundle> {
    let fwd = model.forward(record)?;
    Ok(bundle_from_forward(record.scene.id, &fwd))
}

/// [`encode_image`] over a slice of records, output in input order.
pub fn encode_all(records: &[Record], model: &ModelParams, exec: Execution) -> Result<Vec<CodeBundle>> {
    exec.map(records, |r| encode_image(r, model)).into_iter().collect()
}

/// `id  c  b  q  hex_1 .. hex_c  p_1 .. p_c  semantic_hex|-`, tab separated.
pub fn format_bundle(bundle: &CodeBundle) -> String {
    let mut out = format!(
        "{}\t{}\t{}\t{}",
        bundle.id,
        bundle.categories(),
        bundle.bits(),
        bundle.semantic_bits()
    );
    for code in &bundle.category_codes {
        write!(out, "\t{}", code.to_hex()).expect("write to string");
    }
    for p in &bundle.probs {
        write!(out, "\t{p}").expect("write to string");
    }
    match &bundle.semantic {
        Some(s) => write!(out, "\t{}", s.to_hex()),
        None => write!(out, "\t-"),
    }
    .expect("write to string");
    out
}

pub fn parse_bundle(line: &str, file: &str, record: usize) -> Result<CodeBundle> {
    let bad = |msg: String| Error::format(file, record, msg);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 {
        return Err(bad(format!("expected header fields, found {}", fields.len())));
    }
    let num = |k: usize, name: &str| -> Result<usize> {
        fields[k].parse().map_err(|e| bad(format!("{name}: {e}")))
    };
    let id: u64 = fields[0].parse().map_err(|e| bad(format!("id: {e}")))?;
    let (c, b, q) = (num(1, "c")?, num(2, "b")?, num(3, "q")?);
    if fields.len() != 4 + 2 * c + 1 {
        return Err(bad(format!("expected {} fields for c={c}, found {}", 5 + 2 * c, fields.len())));
    }
    let category_codes = fields[4..4 + c]
        .iter()
        .map(|h| BitCode::from_hex(h, b).map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let probs = fields[4 + c..4 + 2 * c]
        .iter()
        .map(|p| {
            let v: f64 = p.parse().map_err(|e| bad(format!("probability `{p}`: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("probability `{p}` not finite")));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let sem = fields[4 + 2 * c];
    let semantic = match (sem, q) {
        ("-", 0) => None,
        ("-", _) => return Err(bad(format!("q={q} but no semantic code"))),
        (h, _) => Some(BitCode::from_hex(h, q).map_err(|e| bad(e.to_string()))?),
    };
    Ok(CodeBundle {
        id,
        category_codes,
        probs,
        semantic,
    })
}

pub fn write_codes(path: &Path, bundles: &[CodeBundle]) -> Result<()> {
    let mut text = String::new();
    for b in bundles {
        text.push_str(&format_bundle(b));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_codes(path: &Path) -> Result<Vec<CodeBundle>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.is_empty() {
            out.push(parse_bundle(&line, &name, i + 1)?);
        }
    }
    Ok(out)
}
