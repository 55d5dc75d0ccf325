//! Challenging transformations: cropping and general affine warps, color
//! changes and superpixel noise, plus the rules that carry flows and masks
//! from the teacher frame into the student frame.
//!
//! Affine transforms map student-frame coordinates `p~` to teacher-frame
//! coordinates `p = L p~ + t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_same_shape, Error, Result};
use crate::flow::{FlowField, MaskMap};
use crate::image::{check_dims, Image, LUMA_WEIGHTS};
use crate::sampling::{in_bounds, Grid};
use crate::superpixel::{inject_superpixel_noise, superpixel_segment, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform =
        AffineTransform { a11: 1.0, a12: 0.0, a21: 0.0, a22: 1.0, tx: 0.0, ty: 0.0 };

    pub fn translation(tx: f64, ty: f64) -> AffineTransform {
        AffineTransform { tx, ty, ..Self::IDENTITY }
    }

    pub fn scaling(s: f64) -> AffineTransform {
        AffineTransform { a11: s, a22: s, ..Self::IDENTITY }
    }

    /// Scale `s` and rotation `theta` (radians) about the origin.
    pub fn similarity(s: f64, theta: f64) -> AffineTransform {
        let (sin, cos) = theta.sin_cos();
        AffineTransform { a11: s * cos, a12: -s * sin, a21: s * sin, a22: s * cos, tx: 0.0, ty: 0.0 }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn is_integer_translation(&self) -> bool {
        self.a11 == 1.0
            && self.a22 == 1.0
            && self.a12 == 0.0
            && self.a21 == 0.0
            && self.tx.fract() == 0.0
            && self.ty.fract() == 0.0
    }

    fn check_invertible(&self) -> Result<()> {
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return Err(Error::InvalidParameter(format!("affine transform is singular (det {d})")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty)
    }

    /// Applies only the linear part.
    #[inline]
    pub fn apply_linear(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y, self.a21 * x + self.a22 * y)
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        self.check_invertible()?;
        let d = self.det();
        let (a11, a12, a21, a22) = (self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d);
        Ok(AffineTransform {
            a11,
            a12,
            a21,
            a22,
            tx: -(a11 * self.tx + a12 * self.ty),
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn then(&self, first: &AffineTransform) -> AffineTransform {
        let (tx, ty) = self.apply(first.tx, first.ty);
        AffineTransform {
            a11: self.a11 * first.a11 + self.a12 * first.a21,
            a12: self.a11 * first.a12 + self.a12 * first.a22,
            a21: self.a21 * first.a11 + self.a22 * first.a21,
            a22: self.a21 * first.a12 + self.a22 * first.a22,
            tx,
            ty,
        }
    }
}

/// Appearance change applied per pixel: gamma, contrast about 0.5, brightness
/// offset, then saturation and hue rotation in YIQ space, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorTransform {
    pub contrast: f64,
    pub brightness: f64,
    pub saturation: f64,
    /// Radians.
    pub hue_shift: f64,
    pub gamma: f64,
}

impl ColorTransform {
    pub const IDENTITY: ColorTransform =
        ColorTransform { contrast: 1.0, brightness: 0.0, saturation: 1.0, hue_shift: 0.0, gamma: 1.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0) || !(self.gamma > 0.0) || !(self.saturation >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid color transform {self:?}")));
        }
        if !self.brightness.is_finite() || !self.hue_shift.is_finite() {
            return Err(Error::InvalidParameter("non-finite color parameter".into()));
        }
        Ok(())
    }
}

/// Resamples `img` into the student frame: `out(p~) = img(L p~ + t)`, bilinear
/// and border clamped.
pub fn affine_apply_image(img: &Image, a: &AffineTransform, out_shape: (usize, usize)) -> Result<Image> {
    a.check_invertible()?;
    let (oh, ow) = out_shape;
    check_dims(oh, ow)?;
    let c = img.channels();
    let grid = img.grid();
    let mut data = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = a.apply(x as f64, y as f64);
            let i = (y * ow + x) * c;
            grid.sample(sx, sy, &mut data[i..i + c]);
        }
    }
    Ok(Image::from_parts(oh, ow, c, data))
}

/// Carries a flow field into the student frame: `w^T(p~) = L^-1 w(L p~ + t)`.
/// The mask flags samples whose location was inside the source field.
pub fn transform_flow(
    flow: &FlowField,
    a: &AffineTransform,
    out_shape: (usize, usize),
) -> Result<(FlowField, MaskMap)> {
    let inv = a.inverse()?;
    let (oh, ow) = out_shape;
    check_dims(oh, ow)?;
    let grid = Grid { height: flow.height(), width: flow.width(), channels: 2, data: flow.data() };
    let mut data = vec![0.0; oh * ow * 2];
    let mut valid = vec![0.0; oh * ow];
    let mut s = [0.0; 2];
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = a.apply(x as f64, y as f64);
            let inside = grid.sample(sx, sy, &mut s);
            let (u, v) = inv.apply_linear(s[0], s[1]);
            let p = y * ow + x;
            data[p * 2] = u;
            data[p * 2 + 1] = v;
            valid[p] = if inside { 1.0 } else { 0.0 };
        }
    }
    Ok((FlowField::from_parts(oh, ow, data), MaskMap::from_parts(oh, ow, valid)))
}

/// Nearest-neighbor resampling of a mask into the student frame; samples that
/// fall outside the source take `out_of_bounds_value`.
pub fn transform_mask(
    mask: &MaskMap,
    a: &AffineTransform,
    out_shape: (usize, usize),
    out_of_bounds_value: f64,
) -> Result<MaskMap> {
    a.check_invertible()?;
    let (oh, ow) = out_shape;
    check_dims(oh, ow)?;
    if !(0.0..=1.0).contains(&out_of_bounds_value) {
        return Err(Error::InvalidParameter("out-of-bounds mask value must be in [0, 1]".into()));
    }
    let (h, w) = mask.shape();
    let mut data = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = a.apply(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            data[y * ow + x] = if in_bounds(h, w, rx, ry) {
                mask.get(rx as usize, ry as usize)
            } else {
                out_of_bounds_value
            };
        }
    }
    Ok(MaskMap::from_parts(oh, ow, data))
}

const YIQ_FROM_RGB: [[f64; 3]; 3] = [
    [LUMA_WEIGHTS[0], LUMA_WEIGHTS[1], LUMA_WEIGHTS[2]],
    [0.595716, -0.274453, -0.321263],
    [0.211456, -0.522591, 0.311135],
];

fn rgb_from_yiq(yiq: [f64; 3]) -> [f64; 3] {
    let [y, i, q] = yiq;
    [
        y + 0.9563 * i + 0.6210 * q,
        y - 0.2721 * i - 0.6474 * q,
        y - 1.1070 * i + 1.7046 * q,
    ]
}

/// Applies a color transform. Geometry is untouched.
pub fn color_apply(img: &Image, c: &ColorTransform) -> Result<Image> {
    c.validate()?;
    if c.is_identity() {
        return Ok(img.clone());
    }
    let tone = |v: f64| {
        let v = v.clamp(0.0, 1.0).powf(c.gamma);
        0.5 + c.contrast * (v - 0.5) + c.brightness
    };
    let chroma = c.saturation != 1.0 || c.hue_shift != 0.0;
    let (sin, cos) = c.hue_shift.sin_cos();
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(img.channels()) {
        if img.channels() == 3 && chroma {
            let rgb = [tone(px[0]), tone(px[1]), tone(px[2])];
            let m = &YIQ_FROM_RGB;
            let y = m[0][0] * rgb[0] + m[0][1] * rgb[1] + m[0][2] * rgb[2];
            let i = m[1][0] * rgb[0] + m[1][1] * rgb[1] + m[1][2] * rgb[2];
            let q = m[2][0] * rgb[0] + m[2][1] * rgb[1] + m[2][2] * rgb[2];
            let (i2, q2) = (c.saturation * (cos * i - sin * q), c.saturation * (sin * i + cos * q));
            data.extend(rgb_from_yiq([y, i2, q2]).iter().map(|v| v.clamp(0.0, 1.0)));
        } else {
            data.extend(px.iter().map(|&v| tone(v).clamp(0.0, 1.0)));
        }
    }
    Ok(Image::from_parts(img.height(), img.width(), img.channels(), data))
}

/// Occlusions that exist for the student but not for the teacher:
/// `clamp(O~ - O^T, 0, 1)`.
pub fn hallucinated_occlusion(student_occ: &MaskMap, teacher_occ_t: &MaskMap) -> Result<MaskMap> {
    ensure_same_shape("hallucinated_occlusion", student_occ.shape(), teacher_occ_t.shape())?;
    let data = student_occ
        .data()
        .iter()
        .zip(teacher_occ_t.data())
        .map(|(s, t)| (s - t).clamp(0.0, 1.0))
        .collect();
    Ok(MaskMap::from_parts(student_occ.height(), student_occ.width(), data))
}

/// Parameters of a superpixel noise injection; the segmentation itself is
/// recomputed from the transformed second image when the bundle is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuperpixelNoise {
    pub segments: usize,
    pub compactness: f64,
    pub count: usize,
    pub seed: u64,
}

/// Which kinds of challenge a bundle contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransformKinds {
    pub crop: bool,
    pub geometric: bool,
    pub noise: bool,
    pub color: bool,
}

impl TransformKinds {
    pub fn any(&self) -> bool {
        self.crop || self.geometric || self.noise || self.color
    }

    fn names(&self) -> Vec<&'static str> {
        [("crop", self.crop), ("geometric", self.geometric), ("noise", self.noise), ("color", self.color)]
            .into_iter()
            .filter_map(|(n, on)| on.then_some(n))
            .collect()
    }
}

/// One sampled challenging transformation, complete enough to replay.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBundle {
    pub affine: AffineTransform,
    pub color: ColorTransform,
    pub noise: Option<SuperpixelNoise>,
    /// `(height, width)` of the student frame.
    pub output_shape: (usize, usize),
    pub kinds: TransformKinds,
}

impl TransformBundle {
    pub fn identity(shape: (usize, usize)) -> TransformBundle {
        TransformBundle {
            affine: AffineTransform::IDENTITY,
            color: ColorTransform::IDENTITY,
            noise: None,
            output_shape: shape,
            kinds: TransformKinds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.output_shape.0, self.output_shape.1)?;
        self.affine.check_invertible()?;
        self.color.validate()?;
        if let Some(n) = &self.noise {
            if n.segments < 2 || !(n.compactness > 0.0) {
                return Err(Error::InvalidParameter("invalid superpixel noise parameters".into()));
            }
        }
        Ok(())
    }

    /// `key=value` record, one entry per line.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let a = &self.affine;
        let c = &self.color;
        let _ = writeln!(s, "output.height={}", self.output_shape.0);
        let _ = writeln!(s, "output.width={}", self.output_shape.1);
        let _ = writeln!(s, "kinds={}", self.kinds.names().join(","));
        for (k, v) in [("a11", a.a11), ("a12", a.a12), ("a21", a.a21), ("a22", a.a22), ("tx", a.tx), ("ty", a.ty)] {
            let _ = writeln!(s, "affine.{k}={v:?}");
        }
        for (k, v) in [
            ("contrast", c.contrast),
            ("brightness", c.brightness),
            ("saturation", c.saturation),
            ("hue_shift", c.hue_shift),
            ("gamma", c.gamma),
        ] {
            let _ = writeln!(s, "color.{k}={v:?}");
        }
        match &self.noise {
            None => {
                let _ = writeln!(s, "noise=none");
            }
            Some(n) => {
                let _ = writeln!(s, "noise.segments={}", n.segments);
                let _ = writeln!(s, "noise.compactness={:?}", n.compactness);
                let _ = writeln!(s, "noise.count={}", n.count);
                let _ = writeln!(s, "noise.seed={}", n.seed);
            }
        }
        s
    }

    pub fn from_record(text: &str) -> Result<TransformBundle> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bundle line {}: expected key=value", n + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Format(format!("bundle key {k} repeated")));
            }
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("bundle is missing {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("bundle value {k}={v} is not a number")))
        }
        let output_shape = (num("output.height", take("output.height")?)?, num("output.width", take("output.width")?)?);
        let mut kinds = TransformKinds::default();
        for name in take("kinds")?.split(',').filter(|s| !s.is_empty()) {
            match name {
                "crop" => kinds.crop = true,
                "geometric" => kinds.geometric = true,
                "noise" => kinds.noise = true,
                "color" => kinds.color = true,
                other => return Err(Error::Format(format!("unknown transform kind {other}"))),
            }
        }
        let mut f = |k: &str| -> Result<f64> { num(k, take(k)?) };
        let affine = AffineTransform {
            a11: f("affine.a11")?,
            a12: f("affine.a12")?,
            a21: f("affine.a21")?,
            a22: f("affine.a22")?,
            tx: f("affine.tx")?,
            ty: f("affine.ty")?,
        };
        let color = ColorTransform {
            contrast: f("color.contrast")?,
            brightness: f("color.brightness")?,
            saturation: f("color.saturation")?,
            hue_shift: f("color.hue_shift")?,
            gamma: f("color.gamma")?,
        };
        let noise = match kv.remove("noise").as_deref() {
            Some("none") => None,
            Some(other) => return Err(Error::Format(format!("bad noise value {other}"))),
            None => {
                let mut g = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("bundle is missing {k}")));
                Some(SuperpixelNoise {
                    segments: num("noise.segments", g("noise.segments")?)?,
                    compactness: num("noise.compactness", g("noise.compactness")?)?,
                    count: num("noise.count", g("noise.count")?)?,
                    seed: num("noise.seed", g("noise.seed")?)?,
                })
            }
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Format(format!("unknown bundle key {k}")));
        }
        let bundle = TransformBundle { affine, color, noise, output_shape, kinds };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// The student-frame inputs produced by a bundle.
#[derive(Clone, Debug)]
pub struct TransformedPair {
    pub i1: Image,
    pub i2: Image,
    /// 1 where the second image was replaced by noise.
    pub noise_mask: MaskMap,
    pub labels: Option<LabelMap>,
    pub noised_ids: Vec<u32>,
}

/// Applies a bundle to an image pair: geometry to both frames, then color to
/// both, then superpixel noise to the second frame.
pub fn apply_bundle(i1: &Image, i2: &Image, bundle: &TransformBundle) -> Result<TransformedPair> {
    ensure_same_shape("apply_bundle", i1.shape(), i2.shape())?;
    bundle.validate()?;
    let geo = |img: &Image| {
        if bundle.affine.is_identity() && bundle.output_shape == img.shape() {
            Ok(img.clone())
        } else {
            affine_apply_image(img, &bundle.affine, bundle.output_shape)
        }
    };
    let t1 = color_apply(&geo(i1)?, &bundle.color)?;
    let t2 = color_apply(&geo(i2)?, &bundle.color)?;
    let (oh, ow) = bundle.output_shape;
    match &bundle.noise {
        None => Ok(TransformedPair {
            i1: t1,
            i2: t2,
            noise_mask: MaskMap::from_parts(oh, ow, vec![0.0; oh * ow]),
            labels: None,
            noised_ids: Vec::new(),
        }),
        Some(n) => {
            let labels = superpixel_segment(&t2, n.segments.min(oh * ow), n.compactness, n.seed)?;
            let injected = inject_superpixel_noise(&t2, &labels, n.count.min(labels.count()), n.seed.wrapping_add(1))?;
            Ok(TransformedPair {
                i1: t1,
                i2: injected.image,
                noise_mask: injected.mask,
                labels: Some(labels),
                noised_ids: injected.noised_ids,
            })
        }
    }
}

/// Ranges and probabilities for sampling challenging transformations.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformPolicy {
    pub crop_probability: f64,
    /// Kept fraction of each dimension.
    pub crop_fraction: (f64, f64),
    pub geometric_probability: f64,
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_range: (f64, f64),
    pub noise_probability: f64,
    pub superpixels: usize,
    pub compactness: f64,
    pub noise_count: (usize, usize),
    pub color_probability: f64,
    pub contrast_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Radians.
    pub hue_range: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl Default for TransformPolicy {
    fn default() -> Self {
        TransformPolicy {
            crop_probability: 0.8,
            crop_fraction: (0.75, 0.9),
            geometric_probability: 0.3,
            scale_range: (0.9, 1.2),
            rotation_range: (-5.0, 5.0),
            noise_probability: 0.7,
            superpixels: 200,
            compactness: 0.1,
            noise_count: (1, 5),
            color_probability: 0.5,
            contrast_range: (0.7, 1.3),
            brightness_range: (-0.15, 0.15),
            saturation_range: (0.7, 1.3),
            hue_range: (-0.2, 0.2),
            gamma_range: (0.7, 1.5),
        }
    }
}

impl TransformPolicy {
    /// Occlusion hallucination only: crop plus superpixel noise, always both.
    pub fn hallucination() -> TransformPolicy {
        TransformPolicy {
            crop_probability: 1.0,
            geometric_probability: 0.0,
            noise_probability: 1.0,
            color_probability: 0.0,
            ..TransformPolicy::default()
        }
    }

    /// Named preset with the training crop of the KITTI setup (320 x 896).
    pub fn kitti_crop(input_shape: (usize, usize)) -> TransformPolicy {
        let f = (320.0 / input_shape.0 as f64).min(1.0).min(896.0 / input_shape.1 as f64);
        TransformPolicy { crop_fraction: (f, f), ..TransformPolicy::default() }
    }

    /// Named preset with the training crop of the Sintel setup (384 x 768).
    pub fn sintel_crop(input_shape: (usize, usize)) -> TransformPolicy {
        let f = (384.0 / input_shape.0 as f64).min(1.0).min(768.0 / input_shape.1 as f64);
        TransformPolicy { crop_fraction: (f, f), ..TransformPolicy::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.crop_probability,
            self.geometric_probability,
            self.noise_probability,
            self.color_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("policy probabilities must be in [0, 1]".into()));
        }
        if probs.iter().all(|&p| p == 0.0) {
            return Err(Error::InvalidParameter("empty transform policy".into()));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !ordered(self.crop_fraction) || self.crop_fraction.0 <= 0.0 || self.crop_fraction.1 > 1.0 {
            return Err(Error::InvalidParameter("crop fraction must be within (0, 1]".into()));
        }
        if !ordered(self.scale_range) || self.scale_range.0 <= 0.0 {
            return Err(Error::InvalidParameter("scale range must be positive".into()));
        }
        if self.noise_count.0 > self.noise_count.1 || self.superpixels < 2 {
            return Err(Error::InvalidParameter("bad superpixel noise settings".into()));
        }
        if self.contrast_range.0 <= 0.0 || self.gamma_range.0 <= 0.0 {
            return Err(Error::InvalidParameter("contrast and gamma must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Samples a bundle for a pair of the given input shape. The result always
/// contains at least one challenging component: when none is drawn, one kind
/// is picked with probability proportional to its policy weight.
pub fn sample_transform(policy: &TransformPolicy, input_shape: (usize, usize), seed: u64) -> Result<TransformBundle> {
    policy.validate()?;
    let (h, w) = input_shape;
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = [
        policy.crop_probability,
        policy.geometric_probability,
        policy.noise_probability,
        policy.color_probability,
    ];
    let mut on: [bool; 4] = probs.map(|p| rng.random::<f64>() < p);
    if !on.iter().any(|&b| b) {
        let total: f64 = probs.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = 3;
        for (i, p) in probs.iter().enumerate() {
            if pick < *p {
                chosen = i;
                break;
            }
            pick -= p;
        }
        on[chosen] = true;
    }
    let kinds = TransformKinds { crop: on[0], geometric: on[1], noise: on[2], color: on[3] };

    let (mut oh, mut ow, mut oy, mut ox) = (h, w, 0usize, 0usize);
    if kinds.crop {
        let fh = uniform(&mut rng, policy.crop_fraction);
        let fw = uniform(&mut rng, policy.crop_fraction);
        oh = ((h as f64 * fh).round() as usize).clamp(2, h);
        ow = ((w as f64 * fw).round() as usize).clamp(2, w);
        oy = rng.random_range(0..=h - oh);
        ox = rng.random_range(0..=w - ow);
    }
    let affine = if kinds.geometric {
        let s = uniform(&mut rng, policy.scale_range);
        let theta = uniform(&mut rng, policy.rotation_range).to_radians();
        let lin = AffineTransform::similarity(s, theta);
        let out_center = ((ow - 1) as f64 / 2.0, (oh - 1) as f64 / 2.0);
        let in_center = (ox as f64 + out_center.0, oy as f64 + out_center.1);
        let (lx, ly) = lin.apply_linear(out_center.0, out_center.1);
        AffineTransform { tx: in_center.0 - lx, ty: in_center.1 - ly, ..lin }
    } else {
        AffineTransform::translation(ox as f64, oy as f64)
    };
    let color = if kinds.color {
        ColorTransform {
            contrast: uniform(&mut rng, policy.contrast_range),
            brightness: uniform(&mut rng, policy.brightness_range),
            saturation: uniform(&mut rng, policy.saturation_range),
            hue_shift: uniform(&mut rng, policy.hue_range),
            gamma: uniform(&mut rng, policy.gamma_range),
        }
    } else {
        ColorTransform::IDENTITY
    };
    let noise = if kinds.noise {
        Some(SuperpixelNoise {
            segments: policy.superpixels,
            compactness: policy.compactness,
            count: rng.random_range(policy.noise_count.0..=policy.noise_count.1),
            seed: rng.random(),
        })
    } else {
        None
    };
    Ok(TransformBundle { affine, color, noise, output_shape: (oh, ow), kinds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random()).unwrap()
    }

    #[test]
    fn affine_inverse_round_trips() {
        let a = AffineTransform { a11: 1.2, a12: 0.3, a21: -0.1, a22: 0.9, tx: 4.0, ty: -2.5 };
        let inv = a.inverse().unwrap();
        let (x, y) = inv.apply(a.apply(3.0, 7.0).0, a.apply(3.0, 7.0).1);
        assert!((x - 3.0).abs() < 1e-12 && (y - 7.0).abs() < 1e-12);
        assert!(inv.then(&a).apply(1.5, 2.5).0 - 1.5 < 1e-12);
        assert!(AffineTransform::scaling(0.0).inverse().is_err());
    }

    #[test]
    fn identity_and_crop_images() {
        let img = random_image(10, 12, 1);
        assert_eq!(affine_apply_image(&img, &AffineTransform::IDENTITY, (10, 12)).unwrap(), img);
        let crop = affine_apply_image(&img, &AffineTransform::translation(4.0, 2.0), (6, 5)).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(crop.pixel(x, y), img.pixel(x + 4, y + 2));
            }
        }
    }

    #[test]
    fn crop_offset_10_4() {
        let img = random_image(20, 30, 2);
        let crop = affine_apply_image(&img, &AffineTransform::translation(10.0, 4.0), (12, 16)).unwrap();
        assert_eq!(crop.pixel(3, 5), img.pixel(13, 9));
    }

    #[test]
    fn downscaling_doubles_ramp_slope() {
        let ramp = Image::from_fn(8, 20, 1, |x, _, _| 0.03 * x as f64).unwrap();
        let out = affine_apply_image(&ramp, &AffineTransform::scaling(2.0), (4, 10)).unwrap();
        for x in 0..9 {
            assert!((out.get(x + 1, 1, 0) - out.get(x, 1, 0) - 0.06).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_transform_rules() {
        let f = FlowField::from_fn(8, 8, |x, y| (x as f64 * 0.5, y as f64 - 3.0)).unwrap();
        let (same, valid) = transform_flow(&f, &AffineTransform::IDENTITY, (8, 8)).unwrap();
        assert_eq!(same, f);
        assert_eq!(valid.sum(), 64.0);

        // crop: vectors unchanged, positions shifted
        let (c, valid) = transform_flow(&f, &AffineTransform::translation(2.0, 3.0), (5, 6)).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(c.get(x, y), f.get(x + 2, y + 3));
            }
        }
        assert_eq!(valid.sum(), 30.0);

        let k = FlowField::constant(8, 8, 4.0, 0.0).unwrap();
        let (s, _) = transform_flow(&k, &AffineTransform::scaling(2.0), (4, 4)).unwrap();
        assert!(s.data().chunks(2).all(|p| (p[0] - 2.0).abs() < 1e-12 && p[1].abs() < 1e-12));
    }

    #[test]
    fn mask_transform_rules() {
        let m = MaskMap::from_fn(6, 6, |x, y| ((x * y) % 2) as f64).unwrap();
        assert_eq!(transform_mask(&m, &AffineTransform::IDENTITY, (6, 6), 0.0).unwrap(), m);
        let sub = transform_mask(&m, &AffineTransform::translation(1.0, 2.0), (3, 4), 0.0).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(sub.get(x, y), m.get(x + 1, y + 2));
            }
        }
        let shifted = transform_mask(&MaskMap::filled(6, 6, 1.0).unwrap(), &AffineTransform::translation(3.0, 0.0), (6, 6), 0.0).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(shifted.get(x, y), if x + 3 < 6 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn color_rules() {
        let img = random_image(4, 4, 3);
        assert_eq!(color_apply(&img, &ColorTransform::IDENTITY).unwrap(), img);
        let bright = ColorTransform { brightness: 1.0, ..ColorTransform::IDENTITY };
        assert!(color_apply(&img, &bright).unwrap().data().iter().all(|&v| v == 1.0));
        let gray = Image::filled(2, 2, 3, 0.6).unwrap();
        let out = color_apply(&gray, &ColorTransform { contrast: 2.0, ..ColorTransform::IDENTITY }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        // gray stays gray under saturation and hue changes
        let out = color_apply(&gray, &ColorTransform { saturation: 0.5, hue_shift: 0.7, ..ColorTransform::IDENTITY }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-3));
        assert!(color_apply(&img, &ColorTransform { gamma: 0.0, ..ColorTransform::IDENTITY }).is_err());
    }

    #[test]
    fn hallucination_truth_table() {
        let s = MaskMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = MaskMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let o = hallucinated_occlusion(&s, &t).unwrap();
        assert_eq!(o.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_policy_gives_pure_crop() {
        let policy = TransformPolicy {
            crop_probability: 1.0,
            geometric_probability: 0.0,
            noise_probability: 0.0,
            color_probability: 0.0,
            ..TransformPolicy::default()
        };
        let b = sample_transform(&policy, (40, 60), 11).unwrap();
        assert!(b.affine.is_integer_translation());
        assert!(b.noise.is_none());
        assert!(b.color.is_identity());
        assert!(b.output_shape.0 < 40 && b.output_shape.1 < 60);
    }

    #[test]
    fn sampling_is_deterministic_and_never_empty() {
        let p = TransformPolicy::default();
        for seed in 0..50 {
            let a = sample_transform(&p, (48, 64), seed).unwrap();
            assert_eq!(a, sample_transform(&p, (48, 64), seed).unwrap());
            assert!(a.kinds.any());
        }
        let empty = TransformPolicy {
            crop_probability: 0.0,
            geometric_probability: 0.0,
            noise_probability: 0.0,
            color_probability: 0.0,
            ..p
        };
        assert!(sample_transform(&empty, (48, 64), 0).is_err());
    }

    #[test]
    fn kind_frequencies_follow_policy() {
        let p = TransformPolicy::default();
        let n = 1000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let k = sample_transform(&p, (48, 64), seed as u64).unwrap().kinds;
            for (c, on) in counts.iter_mut().zip([k.crop, k.geometric, k.noise, k.color]) {
                *c += on as usize;
            }
        }
        let probs = [p.crop_probability, p.geometric_probability, p.noise_probability, p.color_probability];
        for (c, p) in counts.iter().zip(probs) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.05, "frequency {freq} vs {p}");
        }
    }

    #[test]
    fn bundle_record_round_trips() {
        for seed in 0..20 {
            let b = sample_transform(&TransformPolicy::default(), (48, 64), seed).unwrap();
            let back = TransformBundle::from_record(&b.to_record()).unwrap();
            assert_eq!(back, b);
        }
        let id = TransformBundle::identity((5, 6));
        assert_eq!(TransformBundle::from_record(&id.to_record()).unwrap(), id);
        assert!(TransformBundle::from_record("bogus=1\n").is_err());
        let extra = format!("{}unknown.key=3\n", id.to_record());
        assert!(TransformBundle::from_record(&extra).is_err());
    }

    #[test]
    fn color_commutes_with_flow_transport() {
        let img = random_image(12, 12, 4);
        let f = FlowField::from_fn(12, 12, |x, y| (0.1 * x as f64, -0.2 * y as f64)).unwrap();
        let bundle = TransformBundle {
            color: ColorTransform { contrast: 1.2, brightness: 0.05, ..ColorTransform::IDENTITY },
            ..TransformBundle::identity((12, 12))
        };
        let a = apply_bundle(&img, &img, &bundle).unwrap();
        let (fa, _) = transform_flow(&f, &bundle.affine, bundle.output_shape).unwrap();
        let (fb, _) = transform_flow(&f, &AffineTransform::IDENTITY, (12, 12)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(a.i1, color_apply(&img, &bundle.color).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn round_trip_transport_recovers_flow(
                s in 0.8f64..1.25, theta in -0.2f64..0.2, tx in -2.0f64..2.0, ty in -2.0f64..2.0, seed in 0u64..100
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (a0, a1, a2) = (rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                let f = FlowField::from_fn(24, 24, |x, y| (a0 + a1 * x as f64, a0 - a2 * y as f64)).unwrap();
                let a = AffineTransform { tx, ty, ..AffineTransform::similarity(s, theta) };
                let inv = a.inverse().unwrap();
                let (student, valid) = transform_flow(&f, &a, (24, 24)).unwrap();
                let (back, valid_back) = transform_flow(&student, &inv, (24, 24)).unwrap();
                let lipschitz = a1.abs().max(a2.abs()) * 2.0;
                for y in 2..22usize {
                    for x in 2..22usize {
                        let (sx, sy) = inv.apply(x as f64, y as f64);
                        let (rx, ry) = (sx.round(), sy.round());
                        let src_ok = valid_back.get(x, y) == 1.0
                            && in_bounds(24, 24, sx.floor(), sy.floor())
                            && in_bounds(24, 24, sx.ceil(), sy.ceil())
                            && valid.get(rx.clamp(0.0, 23.0) as usize, ry.clamp(0.0, 23.0) as usize) == 1.0;
                        if !src_ok { continue; }
                        let (u0, v0) = f.get(x, y);
                        let (u1, v1) = back.get(x, y);
                        prop_assert!((u0 - u1).abs() <= lipschitz + 1e-9);
                        prop_assert!((v0 - v1).abs() <= lipschitz + 1e-9);
                    }
                }
            }

            #[test]
            fn integer_crop_transport_is_exact(ox in 0usize..6, oy in 0usize..6, seed in 0u64..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = FlowField::from_fn(12, 12, |_, _| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).unwrap();
                let m = MaskMap::from_fn(12, 12, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 }).unwrap();
                let a = AffineTransform::translation(ox as f64, oy as f64);
                let (tf, _) = transform_flow(&f, &a, (6, 6)).unwrap();
                let tm = transform_mask(&m, &a, (6, 6), 1.0).unwrap();
                for y in 0..6 { for x in 0..6 {
                    prop_assert_eq!(tf.get(x, y), f.get(x + ox, y + oy));
                    prop_assert_eq!(tm.get(x, y), m.get(x + ox, y + oy));
                }}
            }

            #[test]
            fn hallucination_is_binary_and_disjoint(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 16)) {
                let s = MaskMap::new(4, 4, bits.iter().map(|b| b.0 as u8 as f64).collect()).unwrap();
                let t = MaskMap::new(4, 4, bits.iter().map(|b| b.1 as u8 as f64).collect()).unwrap();
                let o = hallucinated_occlusion(&s, &t).unwrap();
                for (ov, tv) in o.data().iter().zip(t.data()) {
                    prop_assert!(*ov == 0.0 || *ov == 1.0);
                    prop_assert_eq!(ov * tv, 0.0);
                }
            }
        }
    }
}
