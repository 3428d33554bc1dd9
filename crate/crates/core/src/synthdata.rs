//! Synthetic multi-label scenes, their region proposals, and the dataset
//! file format.
//!
//! Every scene is a noise background with `k` non-overlapping objects of
//! distinct categories. Each category draws a stripe texture with its own
//! orientation, so the category is recoverable from local structure alone.
//!
//! A dataset record is one tab-separated line:
//!
//! ```text
//! id  c  flags  H  W  base64(pixels as f32 LE)  (cat,x1,y1,x2,y2)*  (x1,y1,x2,y2)*
//! ```
//!
//! Boxes are half-open pixel rectangles: `x1 <= x < x2`, `y1 <= y < y2`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Binary ground-truth label indicator for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::Invalid(format!("label flags must be 0/1: {flags:?}")));
        }
        Ok(Self(flags))
    }

    pub fn zeros(c: usize) -> Self {
        Self(vec![0; c])
    }

    pub fn from_categories(c: usize, cats: impl IntoIterator<Item = usize>) -> Self {
        let mut flags = vec![0; c];
        for j in cats {
            flags[j] = 1;
        }
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn has(&self, j: usize) -> bool {
        self.0[j] == 1
    }

    pub fn flags(&self) -> &[u8] {
        &self.0
    }

    /// Number of relevant labels, `|c+|`.
    pub fn count(&self) -> usize {
        self.0.iter().map(|&f| f as usize).sum()
    }

    pub fn categories(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, f)| **f == 1).map(|(j, _)| j)
    }
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxRect {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoxRect {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Invalid(format!("degenerate box ({x1},{y1},{x2},{y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> u64 {
        (self.x2 - self.x1) as u64 * (self.y2 - self.y1) as u64
    }

    pub fn intersection(&self, other: &BoxRect) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w as u64 * h as u64
    }

    pub fn iou(&self, other: &BoxRect) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    fn fits(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: BoxRect,
}

/// One image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels x height x width`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub objects: Vec<SceneObject>,
    pub labels: LabelVector,
}

/// A candidate box plus its coordinates normalized by image width/height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoxRect,
    pub coords: [f64; 4],
}

impl Proposal {
    pub fn new(bbox: BoxRect, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self {
            bbox,
            coords: [
                bbox.x1 as f64 / w,
                bbox.y1 as f64 / h,
                bbox.x2 as f64 / w,
                bbox.y2 as f64 / h,
            ],
        }
    }
}

/// Scene plus its proposals: one line of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub scene: Scene,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub stripe_period: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            categories: 4,
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 2,
            min_object_size: 10,
            max_object_size: 16,
            noise: 0.3,
            stripe_period: 4.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: String| {
            Err(Error::Config {
                path: format!("scene.{path}"),
                msg,
            })
        };
        if self.categories < 2 {
            return err("categories", format!("need at least 2, got {}", self.categories));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return err(
                "min_objects",
                format!("need 1 <= min ({}) <= max ({})", self.min_objects, self.max_objects),
            );
        }
        if self.max_objects > self.categories {
            return err(
                "max_objects",
                format!("{} exceeds category count {}", self.max_objects, self.categories),
            );
        }
        if self.min_object_size < 2 || self.min_object_size > self.max_object_size {
            return err(
                "min_object_size",
                format!(
                    "need 2 <= min ({}) <= max ({})",
                    self.min_object_size, self.max_object_size
                ),
            );
        }
        if self.max_object_size > self.width.min(self.height) {
            return err(
                "max_object_size",
                format!("{} does not fit a {}x{} image", self.max_object_size, self.width, self.height),
            );
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return err("noise", format!("must lie in [0, 1], got {}", self.noise));
        }
        if !(self.stripe_period > 0.0) {
            return err("stripe_period", format!("must be positive, got {}", self.stripe_period));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Proposals per image, `N`.
    pub count: usize,
    /// Jittered copies emitted per ground-truth object.
    pub copies_per_object: usize,
    /// Max coordinate jitter as a fraction of box width/height.
    pub jitter: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            count: 16,
            copies_per_object: 3,
            jitter: 0.2,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Config {
                path: "proposals.count".into(),
                msg: "need at least one proposal".into(),
            });
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return Err(Error::Config {
                path: "proposals.jitter".into(),
                msg: format!("must lie in [0, 0.2], got {}", self.jitter),
            });
        }
        Ok(())
    }
}

const PLACEMENT_RETRIES: usize = 200;
const POSITION_TRIES: usize = 50;
const JITTER_RETRIES: usize = 50;

fn stripe_value(category: usize, categories: usize, period: f64, phase: f64, x: f64, y: f64) -> f64 {
    let theta = std::f64::consts::PI * category as f64 / categories as f64;
    let t = x * theta.cos() + y * theta.sin();
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * t / period + phase).cos()
}

/// Draws one scene. The result is a pure function of the RNG state and `cfg`.
/// Places one box per category without overlap. A layout that gets stuck is
/// discarded and redrawn from scratch.
fn place_objects(cats: &[usize], rng: &mut SeededRng, cfg: &SceneConfig) -> Option<Vec<SceneObject>> {
    let (w, h) = (cfg.width, cfg.height);
    'layout: for _ in 0..PLACEMENT_RETRIES {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(cats.len());
        for &category in cats {
            let bw = rng.int_in(cfg.min_object_size, cfg.max_object_size);
            let bh = rng.int_in(cfg.min_object_size, cfg.max_object_size);
            let mut placed = None;
            for _ in 0..POSITION_TRIES {
                let x1 = rng.int_in(0, w - bw) as u32;
                let y1 = rng.int_in(0, h - bh) as u32;
                let bbox = BoxRect {
                    x1,
                    y1,
                    x2: x1 + bw as u32,
                    y2: y1 + bh as u32,
                };
                if objects.iter().all(|o| o.bbox.intersection(&bbox) == 0) {
                    placed = Some(bbox);
                    break;
                }
            }
            match placed {
                Some(bbox) => objects.push(SceneObject { category, bbox }),
                None => continue 'layout,
            }
        }
        return Some(objects);
    }
    None
}

pub fn generate_scene(id: u64, rng: &mut SeededRng, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let k = rng.int_in(cfg.min_objects, cfg.max_objects);
    let mut cats = rng.sample_indices(cfg.categories, k);
    cats.sort_unstable();

    let objects = place_objects(&cats, rng, cfg).ok_or_else(|| {
        Error::Generation(format!(
            "could not place {k} non-overlapping objects after {PLACEMENT_RETRIES} layouts: {cfg:?}"
        ))
    })?;

    let mut pixels: Vec<f32> = (0..w * h)
        .map(|_| rng.uniform(0.0, cfg.noise) as f32)
        .collect();
    for obj in &objects {
        let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        for y in obj.bbox.y1..obj.bbox.y2 {
            for x in obj.bbox.x1..obj.bbox.x2 {
                let v = stripe_value(obj.category, cfg.categories, cfg.stripe_period, phase, x as f64, y as f64);
                let jitter = rng.uniform(-0.5, 0.5) * cfg.noise * 0.5;
                pixels[y as usize * w + x as usize] = (v + jitter).clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(Scene {
        id,
        channels: 1,
        height: h,
        width: w,
        pixels,
        labels: LabelVector::from_categories(cfg.categories, cats),
        objects,
    })
}

fn jitter_box(b: &BoxRect, frac: f64, w: u32, h: u32, rng: &mut SeededRng) -> BoxRect {
    let bw = (b.x2 - b.x1) as f64;
    let bh = (b.y2 - b.y1) as f64;
    let shift = |v: u32, span: f64, rng: &mut SeededRng| -> i64 {
        let d = (rng.uniform(-frac, frac) * span).round() as i64;
        v as i64 + d
    };
    let x1 = shift(b.x1, bw, rng).clamp(0, w as i64 - 1);
    let y1 = shift(b.y1, bh, rng).clamp(0, h as i64 - 1);
    let x2 = shift(b.x2, bw, rng).clamp(x1 + 1, w as i64);
    let y2 = shift(b.y2, bh, rng).clamp(y1 + 1, h as i64);
    BoxRect {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32,
        y2: y2 as u32,
    }
}

/// Jittered copies of every object box (IoU >= 0.5 with their source,
/// emitted round-robin over objects) followed by random distractors, exactly
/// `cfg.count` proposals in total.
pub fn generate_proposals(scene: &Scene, cfg: &ProposalConfig, rng: &mut SeededRng) -> Result<Vec<Proposal>> {
    if cfg.count < 1 {
        return Err(Error::Invalid("proposal count must be at least 1".into()));
    }
    if cfg.count < scene.objects.len() {
        return Err(Error::Invalid(format!(
            "{} proposals cannot cover {} objects",
            cfg.count,
            scene.objects.len()
        )));
    }
    let (w, h) = (scene.width as u32, scene.height as u32);
    let mut boxes = Vec::with_capacity(cfg.count);
    'copies: for _ in 0..cfg.copies_per_object.max(1) {
        for obj in &scene.objects {
            if boxes.len() == cfg.count {
                break 'copies;
            }
            let mut chosen = obj.bbox;
            if cfg.jitter > 0.0 {
                for _ in 0..JITTER_RETRIES {
                    let cand = jitter_box(&obj.bbox, cfg.jitter, w, h, rng);
                    if cand.iou(&obj.bbox) >= 0.5 {
                        chosen = cand;
                        break;
                    }
                }
            }
            boxes.push(chosen);
        }
    }
    while boxes.len() < cfg.count {
        let x1 = rng.int_in(0, w as usize - 2) as u32;
        let y1 = rng.int_in(0, h as usize - 2) as u32;
        let x2 = rng.int_in(x1 as usize + 2, w as usize) as u32;
        let y2 = rng.int_in(y1 as usize + 2, h as usize) as u32;
        boxes.push(BoxRect { x1, y1, x2, y2 });
    }
    Ok(boxes
        .into_iter()
        .map(|b| Proposal::new(b, scene.width, scene.height))
        .collect())
}

/// Sizes of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub database: usize,
    pub query: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            database: 800,
            query: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Database,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Database, Split::Query];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Database => "database",
            Split::Query => "query",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tsv", self.name())
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Database => 2,
            Split::Query => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "database" => Ok(Split::Database),
            "query" => Ok(Split::Query),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One generated record. Each image draws from its own stream keyed by
/// `(seed, split, index)`, so splits can be generated in any order.
pub fn generate_record(
    seed: u64,
    split: Split,
    index: usize,
    id: u64,
    scene_cfg: &SceneConfig,
    prop_cfg: &ProposalConfig,
) -> Result<Record> {
    let mut rng = SeededRng::for_stream(seed, (split.stream() << 40) | index as u64);
    let scene = generate_scene(id, &mut rng, scene_cfg)?;
    let proposals = generate_proposals(&scene, prop_cfg, &mut rng)?;
    Ok(Record { scene, proposals })
}

/// All three splits. Ids are contiguous: train first, then database, then query.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Record>,
    pub database: Vec<Record>,
    pub query: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Database => &self.database,
            Split::Query => &self.query,
        }
    }

    pub fn find(&self, id: u64) -> Option<&Record> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).iter())
            .find(|r| r.scene.id == id)
    }
}

pub fn generate_dataset(
    seed: u64,
    sizes: SplitSizes,
    scene_cfg: &SceneConfig,
    prop_cfg: &ProposalConfig,
    exec: crate::exec::Execution,
) -> Result<Dataset> {
    scene_cfg.validate()?;
    prop_cfg.validate()?;
    let gen = |split: Split, n: usize, first_id: u64| -> Result<Vec<Record>> {
        let idx: Vec<usize> = (0..n).collect();
        exec.map(&idx, |&i| generate_record(seed, split, i, first_id + i as u64, scene_cfg, prop_cfg))
            .into_iter()
            .collect()
    };
    let train = gen(Split::Train, sizes.train, 0)?;
    let database = gen(Split::Database, sizes.database, sizes.train as u64)?;
    let query = gen(Split::Query, sizes.query, (sizes.train + sizes.database) as u64)?;
    Ok(Dataset {
        train,
        database,
        query,
    })
}

/// Sidecar describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub proposals: usize,
    pub seed: u64,
    pub splits: SplitSizes,
    pub config_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

fn fmt_boxes(out: &mut String, boxes: impl Iterator<Item = (Option<usize>, BoxRect)>) {
    for (cat, b) in boxes {
        match cat {
            Some(c) => write!(out, "({c},{},{},{},{})", b.x1, b.y1, b.x2, b.y2),
            None => write!(out, "({},{},{},{})", b.x1, b.y1, b.x2, b.y2),
        }
        .expect("write to string");
    }
}

/// Canonical text form of one record, without the trailing newline.
pub fn format_record(rec: &Record) -> String {
    let s = &rec.scene;
    let mut out = String::new();
    let flags: String = s.labels.flags().iter().map(|f| char::from(b'0' + f)).collect();
    let mut bytes = Vec::with_capacity(s.pixels.len() * 4);
    for p in &s.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    write!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t",
        s.id,
        s.labels.len(),
        flags,
        s.height,
        s.width,
        B64.encode(&bytes)
    )
    .expect("write to string");
    fmt_boxes(&mut out, s.objects.iter().map(|o| (Some(o.category), o.bbox)));
    out.push('\t');
    fmt_boxes(&mut out, rec.proposals.iter().map(|p| (None, p.bbox)));
    out
}

fn parse_tuples(field: &str, arity: usize) -> std::result::Result<Vec<Vec<u32>>, String> {
    let mut out = Vec::new();
    let mut rest = field;
    while !rest.is_empty() {
        let body = rest
            .strip_prefix('(')
            .ok_or_else(|| format!("expected `(` at `{rest}`"))?;
        let end = body.find(')').ok_or("unterminated tuple")?;
        let vals: std::result::Result<Vec<u32>, _> = body[..end].split(',').map(str::parse).collect();
        let vals = vals.map_err(|e| format!("bad integer in `{}`: {e}", &body[..end]))?;
        if vals.len() != arity {
            return Err(format!("expected {arity} values, got {}", vals.len()));
        }
        out.push(vals);
        rest = &body[end + 1..];
    }
    Ok(out)
}

/// Parses one record; `record` is the 1-based record number used in errors.
pub fn parse_record(line: &str, file: &str, record: usize) -> Result<Record> {
    let bad = |msg: String| Error::format(file, record, msg);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(bad(format!("expected 8 fields, found {}", fields.len())));
    }
    let id: u64 = fields[0].parse().map_err(|e| bad(format!("id: {e}")))?;
    let c: usize = fields[1].parse().map_err(|e| bad(format!("c: {e}")))?;
    let flags: Vec<u8> = fields[2]
        .bytes()
        .map(|b| match b {
            b'0' => Ok(0),
            b'1' => Ok(1),
            _ => Err(bad(format!("label flag `{}`", b as char))),
        })
        .collect::<Result<_>>()?;
    if flags.len() != c {
        return Err(bad(format!("{} label flags for c={c}", flags.len())));
    }
    let height: usize = fields[3].parse().map_err(|e| bad(format!("H: {e}")))?;
    let width: usize = fields[4].parse().map_err(|e| bad(format!("W: {e}")))?;
    let bytes = B64.decode(fields[5]).map_err(|e| bad(format!("pixels: {e}")))?;
    let plane = height * width * 4;
    if plane == 0 || bytes.is_empty() || bytes.len() % plane != 0 {
        return Err(bad(format!("pixel block of {} bytes for {height}x{width}", bytes.len())));
    }
    let pixels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mkbox = |v: &[u32]| -> Result<BoxRect> {
        let b = BoxRect::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(e.to_string()))?;
        if !b.fits(width as u32, height as u32) {
            return Err(bad(format!("box {v:?} outside {width}x{height} image")));
        }
        Ok(b)
    };
    let objects = parse_tuples(fields[6], 5)
        .map_err(|e| bad(format!("objects: {e}")))?
        .into_iter()
        .map(|v| {
            if v[0] as usize >= c {
                return Err(bad(format!("object category {} >= c={c}", v[0])));
            }
            Ok(SceneObject {
                category: v[0] as usize,
                bbox: mkbox(&v[1..])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let proposals = parse_tuples(fields[7], 4)
        .map_err(|e| bad(format!("proposals: {e}")))?
        .into_iter()
        .map(|v| Ok(Proposal::new(mkbox(&v)?, width, height)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Record {
        scene: Scene {
            id,
            channels: bytes.len() / plane,
            height,
            width,
            pixels,
            objects,
            labels: LabelVector(flags),
        },
        proposals,
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for rec in records {
        buf.extend_from_slice(format_record(rec).as_bytes());
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line, &name, i + 1)?);
    }
    Ok(out)
}

/// SHA-256 over the canonical serialization of a split.
pub fn content_hash(records: &[Record]) -> String {
    let mut h = Sha256::new();
    for rec in records {
        h.update(format_record(rec).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn write_dataset(dir: &Path, data: &Dataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_records(&dir.join(split.file_name()), data.split(split))?;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Record>> {
    read_records(&dir.join(split.file_name()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(dir, Split::Train)?,
        database: read_split(dir, Split::Database)?,
        query: read_split(dir, Split::Query)?,
    })
}

/// Replaces the proposals of every record whose id appears in `external`.
/// Returns how many records were updated.
pub fn apply_proposal_overrides(records: &mut [Record], external: &[Record]) -> Result<usize> {
    let by_id: std::collections::HashMap<u64, &Record> =
        external.iter().map(|r| (r.scene.id, r)).collect();
    let mut n = 0;
    for rec in records.iter_mut() {
        if let Some(ext) = by_id.get(&rec.scene.id) {
            if ext.proposals.is_empty() {
                return Err(Error::Invalid(format!("external record {} has no proposals", rec.scene.id)));
            }
            rec.proposals = ext
                .proposals
                .iter()
                .map(|p| {
                    if !p.bbox.fits(rec.scene.width as u32, rec.scene.height as u32) {
                        return Err(Error::Invalid(format!(
                            "external box {:?} outside image {}",
                            p.bbox, rec.scene.id
                        )));
                    }
                    Ok(Proposal::new(p.bbox, rec.scene.width, rec.scene.height))
                })
                .collect::<Result<_>>()?;
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn single_object_scene_has_one_label() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..scene_cfg()
        };
        for seed in 0..20 {
            let s = generate_scene(0, &mut SeededRng::new(seed), &cfg).unwrap();
            assert_eq!(s.labels.count(), 1);
            assert_eq!(s.objects.len(), 1);
        }
    }

    #[test]
    fn labels_match_objects() {
        let cfg = SceneConfig {
            max_objects: 3,
            ..scene_cfg()
        };
        for seed in 0..50 {
            let s = generate_scene(seed, &mut SeededRng::new(seed), &cfg).unwrap();
            let from_objects = LabelVector::from_categories(4, s.objects.iter().map(|o| o.category));
            assert_eq!(s.labels, from_objects);
            assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            for o in &s.objects {
                assert!(o.bbox.fits(32, 32));
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_record(9, Split::Train, 3, 3, &scene_cfg(), &ProposalConfig::default()).unwrap();
        let b = generate_record(9, Split::Train, 3, 3, &scene_cfg(), &ProposalConfig::default()).unwrap();
        assert_eq!(a, b);
        let bits = |r: &Record| r.scene.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn impossible_placement_is_rejected() {
        let cfg = SceneConfig {
            categories: 4,
            min_objects: 4,
            max_objects: 4,
            min_object_size: 20,
            max_object_size: 20,
            ..scene_cfg()
        };
        let err = generate_scene(0, &mut SeededRng::new(1), &cfg).unwrap_err();
        assert!(err.to_string().contains("min_object_size: 20"), "{err}");
    }

    #[test]
    fn proposals_cover_objects() {
        let cfg = SceneConfig {
            min_objects: 2,
            max_objects: 2,
            ..scene_cfg()
        };
        for seed in 0..30 {
            let mut rng = SeededRng::new(seed);
            let s = generate_scene(0, &mut rng, &cfg).unwrap();
            let props = generate_proposals(&s, &ProposalConfig::default(), &mut rng).unwrap();
            assert_eq!(props.len(), 16);
            for o in &s.objects {
                let hits = props.iter().filter(|p| p.bbox.iou(&o.bbox) >= 0.5).count();
                assert!(hits >= 1);
            }
            let covering = props
                .iter()
                .filter(|p| s.objects.iter().any(|o| p.bbox.iou(&o.bbox) >= 0.5))
                .count();
            assert!(covering >= 2);
            for p in &props {
                let [l1, l2, l3, l4] = p.coords;
                assert!(0.0 <= l1 && l1 < l3 && l3 <= 1.0);
                assert!(0.0 <= l2 && l2 < l4 && l4 <= 1.0);
                assert!(p.bbox.area() >= 4);
            }
        }
    }

    #[test]
    fn zero_jitter_copies_true_boxes() {
        let mut rng = SeededRng::new(4);
        let cfg = SceneConfig {
            min_objects: 2,
            max_objects: 2,
            ..scene_cfg()
        };
        let s = generate_scene(0, &mut rng, &cfg).unwrap();
        let pc = ProposalConfig {
            jitter: 0.0,
            ..Default::default()
        };
        let props = generate_proposals(&s, &pc, &mut rng).unwrap();
        for (p, o) in props.iter().zip(&s.objects) {
            assert_eq!(p.bbox, o.bbox);
        }
    }

    #[test]
    fn full_box_normalizes_to_unit_square() {
        let p = Proposal::new(BoxRect::new(0, 0, 32, 24).unwrap(), 32, 24);
        assert_eq!(p.coords, [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn proposal_count_errors() {
        let s = generate_scene(0, &mut SeededRng::new(0), &scene_cfg()).unwrap();
        let pc = ProposalConfig {
            count: 0,
            ..Default::default()
        };
        assert!(generate_proposals(&s, &pc, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn record_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<Record> = (0..10)
            .map(|i| generate_record(1, Split::Train, i, i as u64, &scene_cfg(), &ProposalConfig::default()).unwrap())
            .collect();
        let path = dir.path().join("train.tsv");
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);

        let text = fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        fs::write(&path, &text[..cut]).unwrap();
        let err = read_records(&path).unwrap_err().to_string();
        assert!(err.contains("record 10"), "{err}");
    }

    #[test]
    fn overrides_replace_proposals() {
        let mut recs = vec![generate_record(1, Split::Train, 0, 7, &scene_cfg(), &ProposalConfig::default()).unwrap()];
        let mut ext = recs[0].clone();
        ext.proposals = vec![Proposal::new(BoxRect::new(1, 1, 5, 5).unwrap(), 32, 32)];
        assert_eq!(apply_proposal_overrides(&mut recs, &[ext]).unwrap(), 1);
        assert_eq!(recs[0].proposals.len(), 1);
        assert_eq!(recs[0].proposals[0].bbox, BoxRect::new(1, 1, 5, 5).unwrap());
    }
}
