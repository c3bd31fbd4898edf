//! Synthetic shapes: a small binary-image analogue of dSprites with known
//! property dependencies, plus the analytic measurement oracle.
//!
//! Properties are `size`, `x`, `y` and `xy = (x + y) / 2`, optionally
//! followed by a binary `shape` (0 = square, 1 = ellipse). Values are kept in
//! their raw units; the header records each property's range so callers can
//! map to `[0, 1]`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"CVAEDATA";
const VERSION: u32 = 1;

pub const SIZE_RANGE: (f64, f64) = (0.2, 0.9);
pub const POS_RANGE: (f64, f64) = (0.25, 0.75);

/// Size grid searched by [`measure`]; wider than the render range so
/// decoded images outside it are still measured sensibly.
const SIZE_SEARCH: (f64, f64) = (0.05, 1.2);
const SIZE_STEPS: usize = 460;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Ellipse,
}

impl ShapeKind {
    pub fn as_property(self) -> f64 {
        match self {
            ShapeKind::Square => 0.0,
            ShapeKind::Ellipse => 1.0,
        }
    }

    /// Half extents in pixels along x and y.
    fn half_extents(self, size: f64, side: usize) -> (f64, f64) {
        let n = side as f64;
        match self {
            ShapeKind::Square => (size * n / 4.0, size * n / 4.0),
            ShapeKind::Ellipse => (size * n / 4.0, size * n / 6.0),
        }
    }
}

/// Square binary image, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<bool>,
}

impl Image {
    pub fn blank(side: usize) -> Self {
        Self {
            side,
            pixels: vec![false; side * side],
        }
    }

    /// Thresholds probabilities at 0.5.
    pub fn from_probabilities<T: Scalar>(side: usize, probs: &[T]) -> Result<Self> {
        if probs.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities for a {side}×{side} image",
                probs.len()
            )));
        }
        Ok(Self {
            side,
            pixels: probs.iter().map(|&p| p.as_f64() > 0.5).collect(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.side + col]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn mirror_horizontal(&self) -> Self {
        let n = self.side;
        let pixels = (0..n * n).map(|i| self.pixels[(i / n) * n + (n - 1 - i % n)]).collect();
        Self { side: n, pixels }
    }

    /// Binary PGM (P5, maxval 255), on pixels white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels.iter().map(|&p| if p { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    fn pack(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.pixels.len().div_ceil(8)];
        for (i, &p) in self.pixels.iter().enumerate() {
            if p {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        bytes
    }

    fn unpack(side: usize, bytes: &[u8]) -> Self {
        let pixels = (0..side * side)
            .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
            .collect();
        Self { side, pixels }
    }
}

/// Renders a filled shape centred at `(x·N, y·N)` (x to the right, y down).
/// A pixel is on when its centre lies inside the shape; a shape too small to
/// cover any pixel centre lights the pixel(s) nearest its centre instead.
pub fn render(kind: ShapeKind, size: f64, x: f64, y: f64, side: usize) -> Result<Image> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("canvas side {side} is below 8")));
    }
    if !(SIZE_RANGE.0..=SIZE_RANGE.1).contains(&size) {
        return Err(Error::InvalidArgument(format!("size {size} outside {SIZE_RANGE:?}")));
    }
    let n = side as f64;
    let (a, b) = kind.half_extents(size, side);
    let (cx, cy) = (x * n, y * n);
    if !(cx - a >= 0.0 && cx + a <= n && cy - b >= 0.0 && cy + b <= n) {
        return Err(Error::InvalidArgument(format!(
            "{kind:?} of size {size} at ({x}, {y}) leaves the canvas"
        )));
    }
    let dist = |r: usize, c: usize| {
        let dx = (c as f64 + 0.5 - cx) / a;
        let dy = (r as f64 + 0.5 - cy) / b;
        match kind {
            ShapeKind::Square => dx.abs().max(dy.abs()),
            ShapeKind::Ellipse => (dx * dx + dy * dy).sqrt(),
        }
    };
    let mut img = Image::blank(side);
    for r in 0..side {
        for c in 0..side {
            img.pixels[r * side + c] = dist(r, c) <= 1.0;
        }
    }
    if img.count() == 0 {
        let best = (0..side * side)
            .map(|i| dist(i / side, i % side))
            .fold(f64::INFINITY, f64::min);
        for i in 0..side * side {
            img.pixels[i] = dist(i / side, i % side) <= best + 1e-12;
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub size: f64,
    pub x: f64,
    pub y: f64,
    pub xy: f64,
    pub kind: ShapeKind,
}

impl Measurement {
    /// Property vector in dataset order.
    pub fn properties(&self, with_shape: bool) -> Vec<f64> {
        let mut v = vec![self.size, self.x, self.y, self.xy];
        if with_shape {
            v.push(self.kind.as_property());
        }
        v
    }
}

/// Analytic property oracle. Position is the pixel centroid; kind and size
/// are the render parameters whose rasterisation at that centroid disagrees
/// with the image in the fewest pixels (ties averaged over size).
pub fn measure(img: &Image) -> Result<Measurement> {
    let count = img.count();
    if count == 0 {
        return Err(Error::InvalidArgument("cannot measure an empty image".into()));
    }
    let n = img.side as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..img.side {
        for c in 0..img.side {
            if img.get(r, c) {
                sx += c as f64 + 0.5;
                sy += r as f64 + 0.5;
            }
        }
    }
    let (cx, cy) = (sx / count as f64, sy / count as f64);
    let mut best = (usize::MAX, ShapeKind::Square, 0.0);
    for kind in [ShapeKind::Square, ShapeKind::Ellipse] {
        let (mut dmin, mut total, mut ties) = (usize::MAX, 0.0, 0usize);
        for step in 0..=SIZE_STEPS {
            let size = SIZE_SEARCH.0 + (SIZE_SEARCH.1 - SIZE_SEARCH.0) * step as f64 / SIZE_STEPS as f64;
            let (a, b) = kind.half_extents(size, img.side);
            let d = (0..img.pixels.len())
                .filter(|&i| {
                    inside(
                        kind,
                        (i % img.side) as f64 + 0.5 - cx,
                        (i / img.side) as f64 + 0.5 - cy,
                        a,
                        b,
                    ) != img.pixels[i]
                })
                .count();
            if d < dmin {
                (dmin, total, ties) = (d, size, 1);
            } else if d == dmin {
                total += size;
                ties += 1;
            }
        }
        if dmin < best.0 {
            best = (dmin, kind, total / ties as f64);
        }
    }
    let (x, y) = (cx / n, cy / n);
    Ok(Measurement {
        size: best.2,
        x,
        y,
        xy: (x + y) / 2.0,
        kind: best.1,
    })
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, a: f64, b: f64) -> bool {
    let (u, v) = (dx / a, dy / b);
    match kind {
        ShapeKind::Square => u.abs().max(v.abs()) <= 1.0,
        ShapeKind::Ellipse => u * u + v * v <= 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub kind: ShapeKind,
    pub properties: Vec<f64>,
}

/// Options for [`make_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    pub side: usize,
    pub with_shape: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            side: 16,
            with_shape: false,
        }
    }
}

impl DataOptions {
    pub fn property_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["size", "x", "y", "xy"].iter().map(|s| s.to_string()).collect();
        if self.with_shape {
            names.push("shape".into());
        }
        names
    }

    pub fn property_ranges(&self) -> Vec<(f64, f64)> {
        let mut r = vec![SIZE_RANGE, POS_RANGE, POS_RANGE, POS_RANGE];
        if self.with_shape {
            r.push((0.0, 1.0));
        }
        r
    }
}

/// Sample `index` of the dataset with this seed; independent of every other index.
pub fn sample_at(opts: &DataOptions, seed: u64, index: u64) -> Result<SyntheticSample> {
    let mut rng = Rng::derive(seed, index);
    let kind = if rng.bernoulli(0.5) {
        ShapeKind::Ellipse
    } else {
        ShapeKind::Square
    };
    let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
    let size = lerp(SIZE_RANGE, rng.uniform());
    let x = lerp(POS_RANGE, rng.uniform());
    let y = lerp(POS_RANGE, rng.uniform());
    let image = render(kind, size, x, y, opts.side)?;
    let mut properties = vec![size, x, y, (x + y) / 2.0];
    if opts.with_shape {
        properties.push(kind.as_property());
    }
    Ok(SyntheticSample {
        image,
        kind,
        properties,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
    pub samples: Vec<SyntheticSample>,
}

/// Samples `first..first + n` of the stream for `seed`.
pub fn make_dataset_range(opts: &DataOptions, seed: u64, first: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let samples = (0..n as u64)
        .map(|i| sample_at(opts, seed, first + i))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        side: opts.side,
        names: opts.property_names(),
        ranges: opts.property_ranges(),
        samples,
    })
}

pub fn make_dataset(opts: &DataOptions, n: usize, seed: u64) -> Result<Dataset> {
    make_dataset_range(opts, seed, 0, n)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn properties(&self) -> usize {
        self.names.len()
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn with_shape(&self) -> bool {
        self.names.last().is_some_and(|n| n == "shape")
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.ranges)
            .map(|(&v, &(lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.ranges)
            .map(|(&v, &(lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    /// Images of the selected samples as a `B×N²` tensor of 0/1.
    pub fn images<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.pixels();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(
                self.samples[i]
                    .image
                    .pixels
                    .iter()
                    .map(|&p| if p { T::one() } else { T::zero() }),
            );
        }
        Tensor::new([idx.len(), d], data).expect("consistent shape")
    }

    /// Properties of the selected samples mapped to `[0, 1]`, `B×m`.
    pub fn targets<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let m = self.properties();
        let data = idx
            .iter()
            .flat_map(|&i| self.normalize(&self.samples[i].properties))
            .map(T::of)
            .collect();
        Tensor::new([idx.len(), m], data).expect("consistent shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for (name, &(lo, hi)) in self.names.iter().zip(&self.ranges) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&s.image.pack());
            out.push(matches!(s.kind, ShapeKind::Ellipse) as u8);
            for p in &s.properties {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |d: &str| Error::format("dataset file", d);
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::format("dataset file", "truncated"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let side = u32_at(take(4)?) as usize;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let m = u32_at(take(4)?) as usize;
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let mut names = Vec::with_capacity(m);
        let mut ranges = Vec::with_capacity(m);
        for _ in 0..m {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("property name is not UTF-8"))?;
            names.push(name.to_string());
            ranges.push((f64_at(take(8)?), f64_at(take(8)?)));
        }
        let bitmap = (side * side).div_ceil(8);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let image = Image::unpack(side, take(bitmap)?);
            let kind = match take(1)?[0] {
                0 => ShapeKind::Square,
                1 => ShapeKind::Ellipse,
                k => return Err(bad(&format!("unknown shape kind {k}"))),
            };
            let properties = (0..m).map(|_| take(8).map(f64_at)).collect::<Result<_>>()?;
            samples.push(SyntheticSample {
                image,
                kind,
                properties,
            });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            side,
            names,
            ranges,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Latent-to-property dependency mask used for scoring (`l×m`).
///
/// Latent 0 drives size, latent 1 drives x, y and xy, latents 2 and 3 tie
/// xy to x and y respectively, latents 4 and 5 are pure x and y, and latent
/// 6 drives the shape kind when present. Requires `l ≥ 6` (7 with shape).
pub fn ground_truth_mask(latents: usize, with_shape: bool) -> Result<Tensor<f64>> {
    let m = if with_shape { 5 } else { 4 };
    let needed = if with_shape { 7 } else { 6 };
    if latents < needed {
        return Err(Error::InvalidArgument(format!(
            "ground-truth mask needs at least {needed} latents, got {latents}"
        )));
    }
    let (size, x, y, xy, shape) = (0, 1, 2, 3, 4);
    let mut entries = vec![
        (0, size),
        (1, x),
        (1, y),
        (1, xy),
        (2, x),
        (2, xy),
        (3, y),
        (3, xy),
        (4, x),
        (5, y),
    ];
    if with_shape {
        entries.push((6, shape));
    }
    let mut mask = Tensor::zeros([latents, m]);
    for (r, c) in entries {
        mask.set(r, c, 1.0);
    }
    Ok(mask)
}

/// Correlated property pairs of the construction: `(x, xy)`, `(y, xy)` and `(x, y)`.
pub fn expected_pairs() -> BTreeSet<(usize, usize)> {
    [(1, 3), (2, 3), (1, 2)].into_iter().collect()
}
