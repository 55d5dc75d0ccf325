//! Synthetic scenes with exact ground truth.
//!
//! A scene is a textured background plus layers composited back to front.
//! Every surface carries a procedural texture attached to its own frame-1
//! coordinates, so moving it is exact: a point `q` of surface `k` appears at
//! `motion_k(q)` in the second frame with the same color.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowField, MaskMap};
use crate::image::{check_dims, Image};
use crate::io;
use crate::transform::AffineTransform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Inclusive pixel bounds.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// A moving textured object. `motion` maps frame-1 points to frame-2 points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    pub texture_seed: u64,
    pub motion: AffineTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background_motion: AffineTransform,
    /// Back to front.
    pub layers: Vec<Layer>,
    /// Period in pixels of the coarsest texture octave.
    pub texture_scale: f64,
    pub seed: u64,
}

/// A rendered scene with ground truth in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub i1: Image,
    pub i2: Image,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub occ_fwd: MaskMap,
    pub occ_bwd: MaskMap,
}

fn hash(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (sx, sy) = (fade(tx), fade(ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = hash(seed, ix, iy) + sx * (hash(seed, ix + 1, iy) - hash(seed, ix, iy));
    let b = hash(seed, ix, iy + 1) + sx * (hash(seed, ix + 1, iy + 1) - hash(seed, ix, iy + 1));
    a + sy * (b - a)
}

const OCTAVES: [(f64, f64); 3] = [(1.0, 0.5), (2.0, 0.3), (4.0, 0.2)];

/// Band-limited texture in `[0.15, 0.75]`, evaluated in surface coordinates.
fn texture(seed: u64, scale: f64, x: f64, y: f64, out: &mut [f64; 3]) {
    for (c, o) in out.iter_mut().enumerate() {
        let mut v = 0.0;
        for (k, &(freq, amp)) in OCTAVES.iter().enumerate() {
            let s = seed.wrapping_add(((c * OCTAVES.len() + k) as u64).wrapping_mul(0x632B_E59B_D9B4_E019));
            v += amp * value_noise(s, x * freq / scale, y * freq / scale);
        }
        *o = 0.15 + 0.6 * v;
    }
}

struct Surfaces<'a> {
    spec: &'a SceneSpec,
    inverse: Vec<AffineTransform>,
}

impl<'a> Surfaces<'a> {
    fn new(spec: &'a SceneSpec) -> Result<Surfaces<'a>> {
        let inverse = std::iter::once(&spec.background_motion)
            .chain(spec.layers.iter().map(|l| &l.motion))
            .map(|m| m.inverse())
            .collect::<Result<_>>()?;
        Ok(Surfaces { spec, inverse })
    }

    fn motion(&self, k: usize) -> &AffineTransform {
        if k == 0 {
            &self.spec.background_motion
        } else {
            &self.spec.layers[k - 1].motion
        }
    }

    fn seed(&self, k: usize) -> u64 {
        if k == 0 {
            self.spec.seed
        } else {
            self.spec.layers[k - 1].texture_seed
        }
    }

    /// Surface visible at `(x, y)` of frame 1 (index 0 is the background).
    fn top1(&self, x: f64, y: f64) -> usize {
        (1..=self.spec.layers.len()).rev().find(|&k| self.spec.layers[k - 1].shape.contains(x, y)).unwrap_or(0)
    }

    fn top2(&self, x: f64, y: f64) -> usize {
        (1..=self.spec.layers.len())
            .rev()
            .find(|&k| {
                let (qx, qy) = self.inverse[k].apply(x, y);
                self.spec.layers[k - 1].shape.contains(qx, qy)
            })
            .unwrap_or(0)
    }
}

fn in_view(h: usize, w: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

impl SceneSpec {
    /// A static, layer-free scene.
    pub fn static_background(height: usize, width: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            height,
            width,
            background_motion: AffineTransform::IDENTITY,
            layers: Vec::new(),
            texture_scale: 8.0,
            seed,
        }
    }

    /// Whole-frame translation by `(tx, ty)`.
    pub fn translation(height: usize, width: usize, tx: f64, ty: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            background_motion: AffineTransform::translation(tx, ty),
            ..SceneSpec::static_background(height, width, seed)
        }
    }

    pub fn is_integer_motion(&self) -> bool {
        self.background_motion.is_integer_translation()
            && self.layers.iter().all(|l| l.motion.is_integer_translation())
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width)?;
        if !(self.texture_scale > 0.0) {
            return Err(Error::InvalidParameter("texture scale must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.motion.inverse()?;
            let (inside, kept) = self.layer_coverage(l);
            if inside == 0 {
                return Err(Error::InvalidParameter(format!("layer {i} covers no pixel of the first frame")));
            }
            if 2 * kept < inside {
                return Err(Error::InvalidParameter(format!("layer {i} leaves the view in the second frame")));
            }
        }
        self.background_motion.inverse()?;
        Ok(())
    }

    /// Frame-1 pixels of the layer, and how many of them stay in view.
    fn layer_coverage(&self, l: &Layer) -> (usize, usize) {
        let (mut inside, mut kept) = (0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if l.shape.contains(x as f64, y as f64) {
                    inside += 1;
                    let (qx, qy) = l.motion.apply(x as f64, y as f64);
                    kept += in_view(self.height, self.width, qx, qy) as usize;
                }
            }
        }
        (inside, kept)
    }
}

/// Renders a scene and its exact ground truth.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let s = Surfaces::new(spec)?;
    let n = h * w;
    let (mut i1, mut i2) = (vec![0.0; n * 3], vec![0.0; n * 3]);
    let (mut wf, mut wb) = (vec![0.0; n * 2], vec![0.0; n * 2]);
    let (mut of, mut ob) = (vec![0.0; n], vec![0.0; n]);
    let mut rgb = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (xf, yf) = (x as f64, y as f64);

            let k = s.top1(xf, yf);
            texture(s.seed(k), spec.texture_scale, xf, yf, &mut rgb);
            i1[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            let (qx, qy) = s.motion(k).apply(xf, yf);
            wf[p * 2] = qx - xf;
            wf[p * 2 + 1] = qy - yf;
            let visible = in_view(h, w, qx, qy) && s.top2(qx, qy) == k;
            of[p] = if visible { 0.0 } else { 1.0 };

            let k = s.top2(xf, yf);
            let (rx, ry) = s.inverse[k].apply(xf, yf);
            texture(s.seed(k), spec.texture_scale, rx, ry, &mut rgb);
            i2[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            wb[p * 2] = rx - xf;
            wb[p * 2 + 1] = ry - yf;
            let visible = in_view(h, w, rx, ry) && s.top1(rx, ry) == k;
            ob[p] = if visible { 0.0 } else { 1.0 };
        }
    }
    Ok(Scene {
        i1: Image::from_parts(h, w, 3, i1),
        i2: Image::from_parts(h, w, 3, i2),
        flow_fwd: FlowField::from_parts(h, w, wf),
        flow_bwd: FlowField::from_parts(h, w, wb),
        occ_fwd: MaskMap::from_parts(h, w, of),
        occ_bwd: MaskMap::from_parts(h, w, ob),
    })
}

/// Random integer-translation scene: a background and `layers` objects, every
/// motion within `max_shift` pixels per axis, every pair of motions differing
/// by at least `sqrt(2)`, every layer at least half in view after moving.
pub fn random_translation_spec(
    height: usize,
    width: usize,
    layers: usize,
    max_shift: i32,
    seed: u64,
) -> Result<SceneSpec> {
    check_dims(height, width)?;
    if max_shift < 1 {
        return Err(Error::InvalidParameter("max_shift must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = |rng: &mut ChaCha8Rng| {
        (rng.random_range(-max_shift..=max_shift) as f64, rng.random_range(-max_shift..=max_shift) as f64)
    };
    let bg = shift(&mut rng);
    let mut spec = SceneSpec {
        background_motion: AffineTransform::translation(bg.0, bg.1),
        ..SceneSpec::static_background(height, width, rng.random())
    };
    let mut motions = vec![bg];
    for _ in 0..layers {
        let mut placed = false;
        for _ in 0..1000 {
            let t = shift(&mut rng);
            if motions.iter().any(|m| (m.0 - t.0).powi(2) + (m.1 - t.1).powi(2) < 2.0) {
                continue;
            }
            let (w, h) = (width as f64, height as f64);
            let (sw, sh) = (rng.random_range(0.15..0.4) * w, rng.random_range(0.15..0.4) * h);
            let (cx, cy) = (rng.random_range(0.2..0.8) * w, rng.random_range(0.2..0.8) * h);
            let shape = if rng.random::<bool>() {
                Shape::Rect { x0: (cx - sw / 2.0).round(), y0: (cy - sh / 2.0).round(), x1: (cx + sw / 2.0).round(), y1: (cy + sh / 2.0).round() }
            } else {
                Shape::Ellipse { cx: cx.round(), cy: cy.round(), rx: sw / 2.0, ry: sh / 2.0 }
            };
            let layer = Layer { shape, texture_seed: rng.random(), motion: AffineTransform::translation(t.0, t.1) };
            let (inside, kept) = spec.layer_coverage(&layer);
            if inside == 0 || 2 * kept < inside {
                continue;
            }
            spec.layers.push(layer);
            motions.push(t);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidParameter(format!("could not place {layers} distinct layers")));
        }
    }
    Ok(spec)
}

/// Pure horizontal motion toward the left, as seen by a rectified stereo rig:
/// the background shifts by `-base` pixels and each layer by `-(base + 2k)`.
pub fn horizontal_translation_spec(height: usize, width: usize, base: i32, layers: usize, seed: u64) -> Result<SceneSpec> {
    check_dims(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SceneSpec {
        background_motion: AffineTransform::translation(-(base as f64), 0.0),
        ..SceneSpec::static_background(height, width, rng.random())
    };
    let (w, h) = (width as f64, height as f64);
    for k in 1..=layers {
        let d = -(base as f64 + 2.0 * k as f64);
        let (sw, sh) = (rng.random_range(0.2..0.35) * w, rng.random_range(0.2..0.35) * h);
        let (cx, cy) = (rng.random_range(0.3..0.7) * w, rng.random_range(0.3..0.7) * h);
        spec.layers.push(Layer {
            shape: Shape::Rect { x0: (cx - sw / 2.0).round(), y0: (cy - sh / 2.0).round(), x1: (cx + sw / 2.0).round(), y1: (cy + sh / 2.0).round() },
            texture_seed: rng.random(),
            motion: AffineTransform::translation(d, 0.0),
        });
    }
    spec.validate()?;
    Ok(spec)
}

impl Scene {
    pub fn shape(&self) -> (usize, usize) {
        self.i1.shape()
    }

    /// Writes `i1.png`, `i2.png`, `flow_fwd.flo`, `flow_bwd.flo`,
    /// `occ_fwd.pgm` and `occ_bwd.pgm` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        io::write_image(&self.i1, dir.join("i1.png"))?;
        io::write_image(&self.i2, dir.join("i2.png"))?;
        io::flow_write(&self.flow_fwd, dir.join("flow_fwd.flo"))?;
        io::flow_write(&self.flow_bwd, dir.join("flow_bwd.flo"))?;
        io::write_mask_pgm(&self.occ_fwd, dir.join("occ_fwd.pgm"))?;
        io::write_mask_pgm(&self.occ_bwd, dir.join("occ_bwd.pgm"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Scene> {
        let dir = dir.as_ref();
        Ok(Scene {
            i1: io::read_image(dir.join("i1.png"))?,
            i2: io::read_image(dir.join("i2.png"))?,
            flow_fwd: io::flow_read(dir.join("flow_fwd.flo"))?,
            flow_bwd: io::flow_read(dir.join("flow_bwd.flo"))?,
            occ_fwd: io::read_mask_pgm(dir.join("occ_fwd.pgm"))?,
            occ_bwd: io::read_mask_pgm(dir.join("occ_bwd.pgm"))?,
        })
    }
}
