//! SLIC-style superpixels and superpixel noise injection.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::MaskMap;
use crate::image::Image;

const SLIC_ITERATIONS: usize = 5;

/// Per-pixel segment ids, contiguous in `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl LabelMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count of every segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lum: f64,
    x: f64,
    y: f64,
}

/// k-means over `(luminance, x, y)` from a jittered grid, five iterations,
/// then connectivity enforcement. `compactness` is the luminance difference
/// that weighs as much as one grid interval of spatial distance.
pub fn superpixel_segment(img: &Image, target_count: usize, compactness: f64, seed: u64) -> Result<LabelMap> {
    let (h, w) = img.shape();
    let n = h * w;
    if target_count < 2 {
        return Err(Error::InvalidParameter(format!("superpixel count {target_count} must be >= 2")));
    }
    if target_count > n {
        return Err(Error::InvalidParameter(format!(
            "superpixel count {target_count} exceeds {n} pixels"
        )));
    }
    if !(compactness > 0.0) {
        return Err(Error::InvalidParameter("compactness must be > 0".into()));
    }
    let lum = img.luminance();
    let step = (n as f64 / target_count as f64).sqrt();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let (cell_w, cell_h) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = ((i as f64 + 0.5) * cell_w - 0.5 + rng.random_range(-0.25..0.25) * cell_w)
                .clamp(0.0, (w - 1) as f64);
            let y = ((j as f64 + 0.5) * cell_h - 0.5 + rng.random_range(-0.25..0.25) * cell_h)
                .clamp(0.0, (h - 1) as f64);
            centers.push(Center { lum: lum.get(x.round() as usize, y.round() as usize, 0), x, y });
        }
    }

    let spatial = (compactness / step).powi(2);
    let reach = (2.0 * step).ceil() as isize;
    let mut assign = vec![0u32; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..SLIC_ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            let ys = (cy - reach).max(0) as usize..=((cy + reach).min(h as isize - 1) as usize);
            for y in ys {
                let xs = (cx - reach).max(0) as usize..=((cx + reach).min(w as isize - 1) as usize);
                for x in xs {
                    let dl = lum.get(x, y, 0) - c.lum;
                    let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = dl * dl + spatial * ds;
                    let p = y * w + x;
                    if d < dist[p] {
                        dist[p] = d;
                        assign[p] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let a = &mut acc[assign[y * w + x] as usize];
                a.0 += lum.get(x, y, 0);
                a.1 += x as f64;
                a.2 += y as f64;
                a.3 += 1;
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let m = a.3 as f64;
                *c = Center { lum: a.0 / m, x: a.1 / m, y: a.2 / m };
            }
        }
    }
    Ok(enforce_connectivity(h, w, &assign))
}

/// Keeps the largest connected piece of every cluster; every other piece is
/// merged into its largest adjacent region. Ids are then renumbered in
/// raster order of first appearance.
fn enforce_connectivity(h: usize, w: usize, assign: &[u32]) -> LabelMap {
    let n = h * w;
    let neighbors = |p: usize| {
        let (x, y) = (p % w, p / w);
        let mut out = [usize::MAX; 4];
        if x > 0 {
            out[0] = p - 1;
        }
        if x + 1 < w {
            out[1] = p + 1;
        }
        if y > 0 {
            out[2] = p - w;
        }
        if y + 1 < h {
            out[3] = p + w;
        }
        out
    };
    // connected components of equal cluster id
    let mut comp = vec![usize::MAX; n];
    let mut comp_size = Vec::new();
    let mut comp_cluster = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_size.len();
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbors(p) {
                if q != usize::MAX && comp[q] == usize::MAX && assign[q] == assign[start] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comp_size.push(size);
        comp_cluster.push(assign[start]);
    }
    let ncomp = comp_size.len();
    let mut largest = std::collections::HashMap::new();
    for c in 0..ncomp {
        let e = largest.entry(comp_cluster[c]).or_insert(c);
        if comp_size[c] > comp_size[*e] {
            *e = c;
        }
    }
    let mut adjacent = vec![Vec::new(); ncomp];
    for p in 0..n {
        for q in neighbors(p) {
            if q != usize::MAX && comp[q] != comp[p] && !adjacent[comp[p]].contains(&comp[q]) {
                adjacent[comp[p]].push(comp[q]);
            }
        }
    }
    // union-find over components
    let mut parent: Vec<usize> = (0..ncomp).collect();
    let mut group_size = comp_size.clone();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut orphans: Vec<usize> = (0..ncomp).filter(|c| largest[&comp_cluster[*c]] != *c).collect();
    orphans.sort_by_key(|&c| (comp_size[c], c));
    for o in orphans {
        let ro = find(&mut parent, o);
        let mut best: Option<(usize, usize)> = None;
        for &a in &adjacent[o] {
            let ra = find(&mut parent, a);
            if ra == ro {
                continue;
            }
            if best.is_none_or(|(s, r)| group_size[ra] > s || (group_size[ra] == s && ra < r)) {
                best = Some((group_size[ra], ra));
            }
        }
        if let Some((_, target)) = best {
            parent[ro] = target;
            group_size[target] += group_size[ro];
        }
    }
    let mut relabel = vec![u32::MAX; ncomp];
    let mut labels = vec![0u32; n];
    let mut count = 0u32;
    for p in 0..n {
        let root = find(&mut parent, comp[p]);
        if relabel[root] == u32::MAX {
            relabel[root] = count;
            count += 1;
        }
        labels[p] = relabel[root];
    }
    LabelMap { height: h, width: w, labels, count: count as usize }
}

/// Result of replacing whole segments with noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseInjection {
    pub image: Image,
    /// 1 on replaced pixels.
    pub mask: MaskMap,
    pub noised_ids: Vec<u32>,
}

/// Replaces `count` uniformly chosen segments with independent uniform noise
/// in every channel.
pub fn inject_superpixel_noise(img: &Image, labels: &LabelMap, count: usize, seed: u64) -> Result<NoiseInjection> {
    if (labels.height, labels.width) != img.shape() {
        return Err(Error::ShapeMismatch("label map and image differ in size".into()));
    }
    if count > labels.count {
        return Err(Error::InvalidParameter(format!(
            "cannot noise {count} of {} segments",
            labels.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noised_ids: Vec<u32> = sample(&mut rng, labels.count, count).into_iter().map(|i| i as u32).collect();
    noised_ids.sort_unstable();
    let mut chosen = vec![false; labels.count];
    for &id in &noised_ids {
        chosen[id as usize] = true;
    }
    let (h, w) = img.shape();
    let mut out = img.clone();
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if chosen[labels.get(x, y) as usize] {
                mask[y * w + x] = 1.0;
                for c in 0..img.channels() {
                    out.set(x, y, c, rng.random::<f64>());
                }
            }
        }
    }
    Ok(NoiseInjection { image: out, mask: MaskMap::from_parts(h, w, mask), noised_ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        Image::from_fn(h, w, 3, |x, y, c| 0.5 * base[y * w + x] + 0.1 * c as f64).unwrap()
    }

    fn is_connected(labels: &LabelMap, id: u32) -> bool {
        let (h, w) = (labels.height, labels.width);
        let start = match labels.labels.iter().position(|&l| l == id) {
            Some(p) => p,
            None => return false,
        };
        let mut seen = vec![false; h * w];
        let mut stack = vec![start];
        seen[start] = true;
        let mut n = 0;
        while let Some(p) = stack.pop() {
            n += 1;
            let (x, y) = (p % w, p / w);
            let mut push = |q: usize| {
                if !seen[q] && labels.labels[q] == id {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        n == labels.labels.iter().filter(|&&l| l == id).count()
    }

    #[test]
    fn constant_image_gives_balanced_cells() {
        let img = Image::filled(24, 32, 1, 0.4).unwrap();
        let labels = superpixel_segment(&img, 4, 0.1, 3).unwrap();
        assert_eq!(labels.count(), 4);
        let ideal = (24 * 32) as f64 / 4.0;
        for s in labels.sizes() {
            assert!((s as f64) < 2.0 * ideal && (s as f64) > ideal / 2.0, "size {s}");
        }
    }

    #[test]
    fn partition_is_contiguous_and_connected() {
        let img = texture(30, 40, 1);
        let labels = superpixel_segment(&img, 24, 0.1, 7).unwrap();
        let k = labels.count() as u32;
        assert!(labels.labels().iter().all(|&l| l < k));
        for id in 0..k {
            assert!(is_connected(&labels, id), "segment {id} is split");
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let img = texture(20, 20, 2);
        assert_eq!(
            superpixel_segment(&img, 10, 0.1, 5).unwrap(),
            superpixel_segment(&img, 10, 0.1, 5).unwrap()
        );
    }

    #[test]
    fn rejects_bad_counts() {
        let img = texture(4, 4, 3);
        assert!(superpixel_segment(&img, 17, 0.1, 0).is_err());
        assert!(superpixel_segment(&img, 1, 0.1, 0).is_err());
    }

    #[test]
    fn noise_extremes() {
        let img = texture(16, 16, 4);
        let labels = superpixel_segment(&img, 8, 0.1, 1).unwrap();
        let none = inject_superpixel_noise(&img, &labels, 0, 9).unwrap();
        assert_eq!(none.image, img);
        assert_eq!(none.mask.sum(), 0.0);
        let all = inject_superpixel_noise(&img, &labels, labels.count(), 9).unwrap();
        assert_eq!(all.mask.sum(), 256.0);
        assert!(inject_superpixel_noise(&img, &labels, labels.count() + 1, 9).is_err());
    }

    #[test]
    fn noised_area_matches_expected_fraction() {
        let img = texture(32, 32, 5);
        let labels = superpixel_segment(&img, 20, 0.1, 2).unwrap();
        let count = 5;
        let trials = 100;
        let mean: f64 = (0..trials)
            .map(|s| inject_superpixel_noise(&img, &labels, count, s).unwrap().mask.sum() / 1024.0)
            .sum::<f64>()
            / trials as f64;
        let expect = count as f64 / labels.count() as f64;
        // segment sizes vary; the standard error of 100 draws is well under 0.03
        assert!((mean - expect).abs() < 0.03, "mean {mean}, expected {expect}");
    }
}
