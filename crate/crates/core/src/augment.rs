//! Seeded geometric augmentation of (image, mask) pairs.
//!
//! Images are resampled bilinearly, masks with nearest neighbour, so masks
//! stay binary under any chain. Out-of-frame pixels become 0 in both.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeoTransform {
    HFlip,
    VFlip,
    /// Shift right by `dx` and down by `dy` pixels.
    Translate { dx: i64, dy: i64 },
    /// Magnify about the frame centre by `factor`; frame dims are kept.
    Scale(f64),
    /// Keep the rectangle with top-left `(y, x)` and size `h x w`.
    Crop { y: usize, x: usize, h: usize, w: usize },
    Resize { h: usize, w: usize },
}

impl fmt::Display for GeoTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GeoTransform::HFlip => write!(f, "hflip"),
            GeoTransform::VFlip => write!(f, "vflip"),
            GeoTransform::Translate { dx, dy } => write!(f, "translate({dx},{dy})"),
            GeoTransform::Scale(s) => write!(f, "scale({s})"),
            GeoTransform::Crop { y, x, h, w } => write!(f, "crop({y},{x},{h},{w})"),
            GeoTransform::Resize { h, w } => write!(f, "resize({h},{w})"),
        }
    }
}

impl FromStr for GeoTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse transform `{s}`"));
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => (n, rest.strip_suffix(')').ok_or_else(bad)?),
            None => (s, ""),
        };
        let nums = |n: usize| -> Result<Vec<&str>> {
            let v: Vec<&str> = args.split(',').map(str::trim).collect();
            if v.len() == n { Ok(v) } else { Err(bad()) }
        };
        let int = |v: &str| v.parse::<i64>().map_err(|_| bad());
        let uint = |v: &str| v.parse::<usize>().map_err(|_| bad());
        Ok(match name {
            "hflip" if args.is_empty() => GeoTransform::HFlip,
            "vflip" if args.is_empty() => GeoTransform::VFlip,
            "translate" => {
                let v = nums(2)?;
                GeoTransform::Translate { dx: int(v[0])?, dy: int(v[1])? }
            }
            "scale" => GeoTransform::Scale(nums(1)?[0].parse().map_err(|_| bad())?),
            "crop" => {
                let v = nums(4)?;
                GeoTransform::Crop { y: uint(v[0])?, x: uint(v[1])?, h: uint(v[2])?, w: uint(v[3])? }
            }
            "resize" => {
                let v = nums(2)?;
                GeoTransform::Resize { h: uint(v[0])?, w: uint(v[1])? }
            }
            _ => return Err(bad()),
        })
    }
}

/// Transforms applied left to right. Canonical text joins them with `;`;
/// the empty chain is `identity`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformChain(pub Vec<GeoTransform>);

impl TransformChain {
    pub fn is_identity(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TransformChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("identity");
        }
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for TransformChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(TransformChain::default());
        }
        s.split(';').map(str::parse).collect::<Result<Vec<_>>>().map(TransformChain)
    }
}

/// Bilinear sample of one plane at continuous pixel-centre coordinates.
/// Points more than half a pixel outside the frame read as 0.
fn bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, sy: f64, sx: f64) -> T {
    if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
        return T::zero();
    }
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let at = |y: usize, x: usize| plane[y * w + x].to_f64_lossless();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    T::from_f64_lossy(top * (1.0 - fy) + bottom * fy)
}

fn nearest<T: Scalar>(plane: &[T], h: usize, w: usize, sy: f64, sx: f64) -> T {
    let y = (sy + 0.5).floor();
    let x = (sx + 0.5).floor();
    if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
        return T::zero();
    }
    plane[y as usize * w + x as usize]
}

/// Resamples every plane onto an `oh x ow` grid; `map(y, x)` gives the
/// source coordinate of output pixel `(y, x)`.
fn remap<T: Scalar>(
    t: &Tensor<T>,
    oh: usize,
    ow: usize,
    interp: fn(&[T], usize, usize, f64, f64) -> T,
    map: impl Fn(usize, usize) -> (f64, f64),
) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = Vec::with_capacity(s.n() * s.c() * oh * ow);
    for plane in t.data().chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = map(y, x);
                out.push(interp(plane, h, w, sy, sx));
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), oh, ow), out).expect("finite resample")
}

/// Pure index permutation / shift; exact for both images and masks.
fn shift<T: Scalar>(t: &Tensor<T>, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = Vec::with_capacity(t.len());
    for plane in t.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                out.push(src(y, x).map_or(T::zero(), |(sy, sx)| plane[sy * w + sx]));
            }
        }
    }
    Tensor::from_vec(s, out).expect("finite shift")
}

fn apply_one<T: Scalar>(t: &Tensor<T>, op: GeoTransform, is_mask: bool) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let interp: fn(&[T], usize, usize, f64, f64) -> T = if is_mask { nearest } else { bilinear };
    match op {
        GeoTransform::HFlip => shift(t, |y, x| Some((y, w - 1 - x))),
        GeoTransform::VFlip => shift(t, |y, x| Some((h - 1 - y, x))),
        GeoTransform::Translate { dx, dy } => shift(t, |y, x| {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            (sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64).then_some((sy as usize, sx as usize))
        }),
        GeoTransform::Scale(f) => {
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            remap(t, h, w, interp, |y, x| ((y as f64 + 0.5 - cy) / f + cy - 0.5, (x as f64 + 0.5 - cx) / f + cx - 0.5))
        }
        GeoTransform::Crop { y: y0, x: x0, h: ch, w: cw } => {
            remap(t, ch, cw, nearest, |y, x| ((y + y0) as f64, (x + x0) as f64))
        }
        GeoTransform::Resize { h: oh, w: ow } => {
            let ry = h as f64 / oh as f64;
            let rx = w as f64 / ow as f64;
            remap(t, oh, ow, interp, |y, x| ((y as f64 + 0.5) * ry - 0.5, (x as f64 + 0.5) * rx - 0.5))
        }
    }
}

fn check_op(op: GeoTransform, h: usize, w: usize) -> Result<()> {
    match op {
        GeoTransform::Scale(f) if !(f > 0.0 && f.is_finite()) => {
            Err(Error::InvalidArgument(format!("scale factor must be positive and finite, got {f}")))
        }
        GeoTransform::Crop { y, x, h: ch, w: cw } if ch == 0 || cw == 0 || y + ch > h || x + cw > w => {
            Err(Error::InvalidArgument(format!("crop rect ({y},{x},{ch},{cw}) lies outside the {h}x{w} frame")))
        }
        GeoTransform::Resize { h: 0, .. } | GeoTransform::Resize { w: 0, .. } => {
            Err(Error::InvalidArgument("resize to zero dims".into()))
        }
        _ => Ok(()),
    }
}

/// Applies `op` to image `(n, c, h, w)` and mask `(n, 1, h, w)` alike.
pub fn apply<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>, op: GeoTransform) -> Result<(Tensor<T>, Tensor<T>)> {
    let (si, sm) = (image.shape(), mask.shape());
    ensure_same_shape("augment::apply", si.with_channels(1), sm)?;
    check_op(op, si.h(), si.w())?;
    Ok((apply_one(image, op, false), apply_one(mask, op, true)))
}

pub fn apply_chain<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    chain: &TransformChain,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pair = (image.clone(), mask.clone());
    for &op in &chain.0 {
        pair = apply(&pair.0, &pair.1, op)?;
    }
    Ok(pair)
}

/// Parameter ranges for sampled chains.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub target_count: usize,
    pub seed: u64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_translate: f64,
    /// Largest shift as a fraction of the frame side.
    pub max_translate: f64,
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    /// Probability of a crop followed by a resize back to frame dims.
    pub p_crop: f64,
    /// Crop side as a fraction of the frame side.
    pub crop_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            target_count: 1960,
            seed: 0,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_translate: 0.5,
            max_translate: 0.1,
            p_scale: 0.5,
            scale_range: (1.0, 1.3),
            p_crop: 0.3,
            crop_range: (0.8, 1.0),
        }
    }
}

pub(crate) const AUGMENT_KEYS: &[&str] = &[
    "augment.target_count",
    "augment.p_hflip",
    "augment.p_vflip",
    "augment.p_translate",
    "augment.max_translate",
    "augment.p_scale",
    "augment.scale_range",
    "augment.p_crop",
    "augment.crop_range",
];

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_hflip, self.p_vflip, self.p_translate, self.p_scale, self.p_crop];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("augment probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.max_translate) {
            return Err(Error::InvalidArgument(format!("max_translate must lie in [0, 1), got {}", self.max_translate)));
        }
        let (a, b) = self.scale_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale_range must satisfy 0 < lo <= hi, got ({a}, {b})")));
        }
        let (a, b) = self.crop_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::InvalidArgument(format!("crop_range must satisfy 0 < lo <= hi <= 1, got ({a}, {b})")));
        }
        Ok(())
    }

    /// Reads `augment.*` keys; the seed comes from the run seed.
    pub fn from_kv(kv: &KvConfig, seed: u64) -> Result<AugmentSpec> {
        let d = AugmentSpec::default();
        let pair = |key: &str, default: (f64, f64)| -> Result<(f64, f64)> {
            match kv.list::<f64>(key)? {
                None => Ok(default),
                Some(v) if v.len() == 2 => Ok((v[0], v[1])),
                Some(_) => Err(kv.invalid_value(key, format!("`{key}` needs two values"))),
            }
        };
        let spec = AugmentSpec {
            target_count: kv.parsed_or("augment.target_count", d.target_count)?,
            seed,
            p_hflip: kv.parsed_or("augment.p_hflip", d.p_hflip)?,
            p_vflip: kv.parsed_or("augment.p_vflip", d.p_vflip)?,
            p_translate: kv.parsed_or("augment.p_translate", d.p_translate)?,
            max_translate: kv.parsed_or("augment.max_translate", d.max_translate)?,
            p_scale: kv.parsed_or("augment.p_scale", d.p_scale)?,
            scale_range: pair("augment.scale_range", d.scale_range)?,
            p_crop: kv.parsed_or("augment.p_crop", d.p_crop)?,
            crop_range: pair("augment.crop_range", d.crop_range)?,
        };
        spec.validate().map_err(|e| kv.invalid_value("augment.target_count", e.to_string()))?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("augment.target_count", self.target_count);
        kv.set("augment.p_hflip", self.p_hflip);
        kv.set("augment.p_vflip", self.p_vflip);
        kv.set("augment.p_translate", self.p_translate);
        kv.set("augment.max_translate", self.max_translate);
        kv.set("augment.p_scale", self.p_scale);
        kv.set("augment.scale_range", format!("{},{}", self.scale_range.0, self.scale_range.1));
        kv.set("augment.p_crop", self.p_crop);
        kv.set("augment.crop_range", format!("{},{}", self.crop_range.0, self.crop_range.1));
        kv
    }

    /// Draws one non-identity chain for an `h x w` frame.
    pub fn sample_chain(&self, rng: &mut impl Rng, h: usize, w: usize) -> TransformChain {
        for _ in 0..64 {
            let mut ops = Vec::new();
            if rng.random_bool(self.p_crop) {
                let f = rng.random_range(self.crop_range.0..=self.crop_range.1);
                let ch = ((h as f64 * f).round() as usize).clamp(1, h);
                let cw = ((w as f64 * f).round() as usize).clamp(1, w);
                let y = rng.random_range(0..=h - ch);
                let x = rng.random_range(0..=w - cw);
                ops.push(GeoTransform::Crop { y, x, h: ch, w: cw });
                ops.push(GeoTransform::Resize { h, w });
            }
            if rng.random_bool(self.p_scale) {
                let f = rng.random_range(self.scale_range.0..=self.scale_range.1);
                // Three decimals keep the canonical text short and exact.
                ops.push(GeoTransform::Scale((f * 1000.0).round() / 1000.0));
            }
            if rng.random_bool(self.p_translate) {
                let my = (h as f64 * self.max_translate) as i64;
                let mx = (w as f64 * self.max_translate) as i64;
                let dy = rng.random_range(-my..=my);
                let dx = rng.random_range(-mx..=mx);
                if dx != 0 || dy != 0 {
                    ops.push(GeoTransform::Translate { dx, dy });
                }
            }
            if rng.random_bool(self.p_hflip) {
                ops.push(GeoTransform::HFlip);
            }
            if rng.random_bool(self.p_vflip) {
                ops.push(GeoTransform::VFlip);
            }
            if !ops.is_empty() {
                return TransformChain(ops);
            }
        }
        TransformChain(vec![GeoTransform::HFlip])
    }
}

/// One output of an expansion: where it came from and how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionRecord {
    pub id: usize,
    pub source: usize,
    pub chain: TransformChain,
}

/// Decides the whole expansion without touching pixel data.
///
/// Outputs `0..n` are the originals. Every later output takes its source
/// round-robin and draws its chain from a ChaCha8 stream keyed on
/// `(seed, id)`, so any output can be regenerated on its own.
pub fn plan_expansion(source_dims: &[(usize, usize)], spec: &AugmentSpec) -> Result<Vec<ExpansionRecord>> {
    spec.validate()?;
    let n = source_dims.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot expand an empty source set".into()));
    }
    if spec.target_count < n {
        return Err(Error::InvalidArgument(format!(
            "target_count {} is below the {n} sources",
            spec.target_count
        )));
    }
    Ok((0..spec.target_count)
        .map(|id| {
            if id < n {
                return ExpansionRecord { id, source: id, chain: TransformChain::default() };
            }
            let source = id % n;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(id as u64);
            let (h, w) = source_dims[source];
            ExpansionRecord { id, source, chain: spec.sample_chain(&mut rng, h, w) }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct AugmentedPair<T> {
    pub record: ExpansionRecord,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// In-memory expansion to exactly `spec.target_count` pairs.
pub fn expand_dataset<T: Scalar>(
    samples: &[(Tensor<T>, Tensor<T>)],
    spec: &AugmentSpec,
) -> Result<Vec<AugmentedPair<T>>> {
    let dims: Vec<_> = samples.iter().map(|(x, _)| (x.shape().h(), x.shape().w())).collect();
    let plan = plan_expansion(&dims, spec)?;
    plan.into_par_iter()
        .map(|record| {
            let (x, y) = &samples[record.source];
            let (image, mask) = apply_chain(x, y, &record.chain)?;
            Ok(AugmentedPair { record, image, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let img = Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let mask = Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| ((y + x) % 3 == 0) as u8 as f64);
        (img, mask)
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "crop(1,2,5,6);resize(8,8);scale(1.125);translate(3,-2);hflip;vflip";
        let chain: TransformChain = text.parse().unwrap();
        assert_eq!(chain.to_string(), text);
        assert_eq!("identity".parse::<TransformChain>().unwrap(), TransformChain::default());
        assert!("spin(3)".parse::<TransformChain>().is_err());
    }

    #[test]
    fn translate_by_width_clears_frame() {
        let (x, y) = pair(6, 8);
        let (a, b) = apply(&x, &y, GeoTransform::Translate { dx: 8, dy: 0 }).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translate_shifts_by_one() {
        let (x, y) = pair(4, 5);
        let (a, _) = apply(&x, &y, GeoTransform::Translate { dx: 1, dy: 2 }).unwrap();
        assert_eq!(a.get([0, 1, 3, 4]), x.get([0, 1, 1, 3]));
        assert_eq!(a.get([0, 1, 1, 4]), 0.0);
    }

    #[test]
    fn bad_arguments_rejected() {
        let (x, y) = pair(6, 8);
        assert!(apply(&x, &y, GeoTransform::Scale(0.0)).is_err());
        assert!(apply(&x, &y, GeoTransform::Scale(-1.0)).is_err());
        assert!(apply(&x, &y, GeoTransform::Crop { y: 2, x: 0, h: 5, w: 8 }).is_err());
        let wrong = Tensor::zeros(Shape::new(1, 1, 6, 7));
        assert!(apply(&x, &wrong, GeoTransform::HFlip).is_err());
    }

    #[test]
    fn resize_identity_is_exact() {
        let (x, y) = pair(6, 8);
        let (a, b) = apply(&x, &y, GeoTransform::Resize { h: 6, w: 8 }).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, y);
    }

    #[test]
    fn target_equal_to_sources_is_identity() {
        let samples = vec![pair(6, 8), pair(6, 8)];
        let spec = AugmentSpec { target_count: 2, ..AugmentSpec::default() };
        let out = expand_dataset(&samples, &spec).unwrap();
        assert_eq!(out.len(), 2);
        for (o, s) in out.iter().zip(&samples) {
            assert!(o.record.chain.is_identity());
            assert_eq!(o.image, s.0);
        }
        assert!(expand_dataset::<f64>(&[], &spec).is_err());
        assert!(expand_dataset(&samples, &AugmentSpec { target_count: 1, ..spec }).is_err());
    }
}
