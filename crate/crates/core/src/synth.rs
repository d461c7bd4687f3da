//! Procedural labelled figures whose parts mirror the fine taxonomy, and the
//! on-disk dataset writer that lays them out as support/query splits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::exec;
use crate::protocol::{select_fixed_supports, ManifestEntry, Sample, SplitManifest, Splits};
use crate::raster::{write_pgm, write_ppm};
use crate::taxonomy::*;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 48;
pub const MIN_REGION: usize = 8;
pub const COLOR_JITTER: f64 = 0.08;
pub const BACKGROUND_NOISE: f64 = 0.05;

const PALETTE: [[f64; 3]; 12] = [
    [0.5, 0.5, 0.5],    // background (replaced per figure)
    [0.80, 0.22, 0.20], // hat
    [0.28, 0.17, 0.10], // hair
    [0.90, 0.72, 0.60], // face
    [0.25, 0.50, 0.80], // upper-clothes
    [0.72, 0.30, 0.58], // dress
    [0.20, 0.18, 0.16], // belt
    [0.62, 0.46, 0.22], // bag
    [0.90, 0.72, 0.60], // arms
    [0.22, 0.26, 0.50], // pants
    [0.90, 0.72, 0.60], // legs
    [0.12, 0.12, 0.14], // shoes
];

/// Everything that determines one rendered figure.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureSpec {
    pub seed: u64,
    pub head_radius: f64,
    pub torso_width: f64,
    pub torso_height: f64,
    pub arm_width: f64,
    pub arm_length: f64,
    pub leg_width: f64,
    pub leg_gap: f64,
    pub leg_length: f64,
    pub pants_fraction: f64,
    pub shoe_height: f64,
    pub hat_height: f64,
    pub colors: [[f64; 3]; 12],
    pub hat: bool,
    pub dress: bool,
    pub bag: bool,
    pub belt: bool,
    pub bag_on_left: bool,
    pub offset: (f64, f64),
    pub rotation: f64,
    pub background: [f64; 3],
}

fn jitter(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, COLOR_JITTER).expect("valid sigma");
    base.map(|c| (c + n.sample(rng)).clamp(0.0, 1.0))
}

impl FigureSpec {
    /// Draw proportions, wardrobe and colours from `seed`, scaled to the canvas.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = height.min(width) as f64 / 64.0;
        let mut colors = PALETTE;
        let skin = jitter(PALETTE[FACE as usize], &mut rng);
        for (id, c) in colors.iter_mut().enumerate() {
            *c = match id as ClassId {
                FACE | ARMS | LEGS => skin,
                _ => jitter(PALETTE[id], &mut rng),
            };
        }
        let dress = rng.gen_bool(0.3);
        FigureSpec {
            seed,
            head_radius: s * rng.gen_range(6.0..7.0),
            torso_width: s * rng.gen_range(18.0..22.0),
            torso_height: s * rng.gen_range(14.0..17.0),
            arm_width: s * rng.gen_range(5.0..6.0),
            arm_length: s * rng.gen_range(15.0..19.0),
            leg_width: s * rng.gen_range(6.5..8.0),
            leg_gap: s * rng.gen_range(1.0..2.0),
            leg_length: s * rng.gen_range(17.0..20.0),
            pants_fraction: rng.gen_range(0.45..0.65),
            shoe_height: s * rng.gen_range(4.0..5.0),
            hat_height: s * rng.gen_range(3.0..4.5),
            colors,
            hat: rng.gen_bool(0.4),
            dress,
            bag: rng.gen_bool(0.4),
            belt: !dress && rng.gen_bool(0.45),
            bag_on_left: rng.gen_bool(0.5),
            offset: (s * rng.gen_range(-5.0..5.0), s * rng.gen_range(-2.0..2.0)),
            rotation: rng.gen_range(-0.08..0.08),
            background: [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)],
        }
    }

    pub fn present_classes(&self) -> Vec<ClassId> {
        let mut out = vec![HAIR, FACE, ARMS, LEGS, SHOES];
        if self.hat {
            out.push(HAT);
        }
        if self.dress {
            out.push(DRESS);
        } else {
            out.extend([UPPER_CLOTHES, PANTS]);
        }
        if self.belt {
            out.push(BELT);
        }
        if self.bag {
            out.push(BAG);
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Vertical trapezoid centred on `cx`.
    Trapezoid { cx: f64, y0: f64, y1: f64, top: f64, bottom: f64 },
}

impl Shape {
    fn rect_c(cx: f64, half_w: f64, y0: f64, y1: f64) -> Shape {
        Shape::Rect { x0: cx - half_w, y0, x1: cx + half_w, y1 }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Trapezoid { cx, y0, y1, top, bottom } => {
                if y < y0 || y >= y1 {
                    return false;
                }
                let t = (y - y0) / (y1 - y0);
                (x - cx).abs() < top + t * (bottom - top)
            }
        }
    }
}

/// Layers from front to back.
fn layout(spec: &FigureSpec, height: usize, width: usize) -> (Vec<(ClassId, Shape)>, (f64, f64)) {
    let hr = spec.head_radius;
    let hair_top_pad = 1.4 * hr / 5.0;
    let hat_h = if spec.hat { spec.hat_height } else { 0.0 };
    let neck = 1.0;
    let total = hat_h + hair_top_pad + 2.0 * hr + neck + spec.torso_height + spec.leg_length;
    let cx = width as f64 / 2.0 + spec.offset.0;
    let top = (height as f64 - total) / 2.0 + spec.offset.1;

    let head_top = top + hat_h;
    let head_cy = head_top + hair_top_pad + hr;
    let shoulder = head_cy + hr + neck;
    let hip = shoulder + spec.torso_height;
    let feet = hip + spec.leg_length;
    let half_torso = spec.torso_width / 2.0;
    let lw = spec.leg_width;
    let leg_x = |side: f64| cx + side * (spec.leg_gap / 2.0 + lw / 2.0);

    let mut front: Vec<(ClassId, Shape)> = Vec::new();
    if spec.bag {
        let side = if spec.bag_on_left { -1.0 } else { 1.0 };
        let bx = cx + side * (half_torso + spec.arm_width + 1.5);
        front.push((BAG, Shape::rect_c(bx, 3.0 * hr / 5.0 + 0.5, hip - 4.0, hip + 4.0)));
    }
    if spec.hat {
        front.push((HAT, Shape::rect_c(cx, hr + 1.5, head_top - 1.2, head_top + 0.3)));
        front.push((HAT, Shape::rect_c(cx, hr * 0.75, head_top - hat_h, head_top)));
    }
    front.push((FACE, Shape::Ellipse { cx, cy: head_cy + 0.35 * hr / 5.0 * 2.0, rx: hr * 0.85, ry: hr * 0.88 }));
    front.push((HAIR, Shape::Ellipse { cx, cy: head_cy - 0.12 * hr, rx: hr + 0.8, ry: hr + 0.5 }));
    let arm_top = shoulder + 1.0;
    for side in [-1.0, 1.0] {
        let ax = cx + side * (half_torso + 0.5 + spec.arm_width / 2.0);
        front.push((ARMS, Shape::rect_c(ax, spec.arm_width / 2.0, arm_top, arm_top + spec.arm_length)));
    }
    if spec.belt {
        front.push((BELT, Shape::rect_c(cx, half_torso, hip - 3.0, hip)));
    }
    if spec.dress {
        let bottom = hip + spec.leg_length * spec.pants_fraction * 0.8;
        front.push((DRESS, Shape::Trapezoid { cx, y0: shoulder, y1: bottom, top: half_torso, bottom: half_torso + 3.0 }));
    } else {
        front.push((UPPER_CLOTHES, Shape::rect_c(cx, half_torso, shoulder, hip)));
        let pants_end = hip + spec.leg_length * spec.pants_fraction;
        front.push((PANTS, Shape::rect_c(cx, spec.leg_gap / 2.0 + lw, hip, hip + 3.0)));
        for side in [-1.0, 1.0] {
            front.push((PANTS, Shape::rect_c(leg_x(side), lw / 2.0 + 0.5, hip, pants_end)));
        }
    }
    for side in [-1.0, 1.0] {
        let x = leg_x(side);
        front.push((SHOES, Shape::Rect { x0: x - lw / 2.0 - 0.5, y0: feet - spec.shoe_height, x1: x + lw / 2.0 + 1.0, y1: feet }));
        front.push((LEGS, Shape::rect_c(x, lw / 2.0, hip, feet - spec.shoe_height)));
    }
    (front, (cx, (top + feet) / 2.0))
}

/// Render a figure. The mask is exactly the rendered coverage of each part.
pub fn generate(spec: &FigureSpec, height: usize, width: usize) -> Result<Sample> {
    if height < MIN_SIZE || width < MIN_SIZE {
        return Err(Error::Gen(format!("canvas {height}x{width} is below the {MIN_SIZE}px minimum")));
    }
    let (layers, (pcx, pcy)) = layout(spec, height, width);
    let (sin, cos) = spec.rotation.sin_cos();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let amp = BACKGROUND_NOISE * 3f64.sqrt();
    let mut labels = vec![BACKGROUND; height * width];
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 + 0.5 - pcx, y as f64 + 0.5 - pcy);
            let (fx, fy) = (pcx + cos * dx + sin * dy, pcy - sin * dx + cos * dy);
            let id = layers.iter().find(|(_, s)| s.contains(fx, fy)).map_or(BACKGROUND, |(c, _)| *c);
            labels[y * width + x] = id;
            if id == BACKGROUND {
                pixels.extend(spec.background.map(|c| (c + rng.gen_range(-amp..amp)).clamp(0.0, 1.0)));
            } else {
                pixels.extend(spec.colors[id as usize]);
            }
        }
    }
    let mask = LabelMask::new(height, width, labels, Granularity::Fine)?;
    for c in spec.present_classes() {
        let n = mask.count(c);
        if n < MIN_REGION {
            return Err(Error::Gen(format!("class {c} covers {n} pixels, need at least {MIN_REGION}")));
        }
    }
    if mask.labels().contains(&BACKGROUND) && (0..width).any(|x| mask.get(0, x) != BACKGROUND || mask.get(height - 1, x) != BACKGROUND) {
        return Err(Error::Gen("figure touches the top or bottom canvas edge".into()));
    }
    Ok(Sample { image: Tensor::new(&[height, width, 3], pixels)?, mask })
}

/// Sizes and counts for a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// s_train, q_train, s_test, q_test.
    pub counts: [usize; 4],
    pub fixed_supports: usize,
    pub fold: u8,
}

fn sample_seed(master: u64, split: usize, index: usize) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = master ^ ((split as u64) << 40) ^ index as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const SPLIT_NAMES: [&str; 4] = ["s_train", "q_train", "s_test", "q_test"];

/// Render every sample of the four splits in memory.
pub fn generate_samples(spec: &DatasetSpec, parallel: bool) -> Result<[Vec<Sample>; 4]> {
    let render = |split: usize| -> Result<Vec<Sample>> {
        exec::map_range(spec.counts[split], parallel, |i| {
            let fs = FigureSpec::random(sample_seed(spec.seed, split, i), spec.height, spec.width);
            generate(&fs, spec.height, spec.width)
        })
        .into_iter()
        .collect()
    };
    Ok([render(0)?, render(1)?, render(2)?, render(3)?])
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, &n) in SPLIT_NAMES.iter().zip(&self.counts) {
            if n == 0 {
                return Err(config_err!("data.counts.{name} must be at least 1"));
            }
        }
        if self.fixed_supports == 0 || self.fixed_supports > self.counts[2] {
            return Err(config_err!("data.fixed_supports must be in 1..={}", self.counts[2]));
        }
        if self.height < MIN_SIZE || self.width < MIN_SIZE {
            return Err(config_err!("data.height and data.width must be at least {MIN_SIZE}"));
        }
        ClassTaxonomy::standard().select_fold(self.fold)?;
        Ok(())
    }
}

/// Write `images/`, `masks/` and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, parallel: bool) -> Result<SplitManifest> {
    spec.validate()?;
    let samples = generate_samples(spec, parallel)?;
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut lists: [Vec<ManifestEntry>; 4] = Default::default();
    for (split, set) in samples.iter().enumerate() {
        let entries: Vec<ManifestEntry> = (0..set.len())
            .map(|i| {
                let id = format!("{}_{i:04}", SPLIT_NAMES[split]);
                ManifestEntry { image: format!("images/{id}.ppm"), mask: format!("masks/{id}.pgm"), id }
            })
            .collect();
        let written: Vec<Result<()>> = exec::map_range(set.len(), parallel, |i| {
            write_ppm(&out_dir.join(&entries[i].image), &set[i].image)?;
            write_pgm(&out_dir.join(&entries[i].mask), &set[i].mask)
        });
        written.into_iter().collect::<Result<()>>()?;
        lists[split] = entries;
    }
    let masks: Vec<LabelMask> = samples[2].iter().map(|s| s.mask.clone()).collect();
    let fixed = select_fixed_supports(&masks, spec.fixed_supports);
    let [s_train, q_train, s_test, q_test] = lists;
    let manifest = SplitManifest {
        fold: spec.fold,
        fixed_supports: fixed.iter().map(|&i| s_test[i].id.clone()).collect(),
        splits: Splits { s_train, q_train, s_test, q_test },
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox_top(mask: &LabelMask, id: ClassId) -> Option<usize> {
        (0..mask.height()).find(|&y| (0..mask.width()).any(|x| mask.get(y, x) == id))
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = FigureSpec::random(42, 64, 64);
        assert_eq!(generate(&spec, 64, 64).unwrap(), generate(&spec, 64, 64).unwrap());
        assert_eq!(FigureSpec::random(42, 64, 64), spec);
    }

    #[test]
    fn wardrobe_flags_control_classes() {
        for seed in 0..200 {
            let mut spec = FigureSpec::random(seed, 64, 64);
            spec.hat = false;
            let s = generate(&spec, 64, 64).unwrap();
            assert_eq!(s.mask.count(HAT), 0);
            let present = s.mask.foreground_classes();
            assert_eq!(present, spec.present_classes(), "seed {seed}");
        }
    }

    #[test]
    fn small_canvas_rejected() {
        let spec = FigureSpec::random(1, 40, 40);
        assert!(matches!(generate(&spec, 40, 40), Err(Error::Gen(_))));
    }

    #[test]
    fn thousand_seeds_hold_generator_properties() {
        let mut seen = [0usize; 12];
        for seed in 0..1000 {
            let spec = FigureSpec::random(seed, 64, 64);
            let s = generate(&spec, 64, 64).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let m = &s.mask;
            assert!(m.labels().iter().all(|&l| l <= SHOES));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for c in m.classes_present() {
                seen[c as usize] += 1;
            }
            if !spec.dress {
                for c in [PANTS, LEGS, SHOES, HAIR, FACE] {
                    assert!(m.count(c) > 0, "seed {seed} lacks class {c}");
                }
                let pants = bbox_top(m, PANTS).unwrap();
                let legs = bbox_top(m, LEGS).unwrap();
                let shoes = bbox_top(m, SHOES).unwrap();
                assert!(pants < legs && legs < shoes, "seed {seed}: {pants} {legs} {shoes}");
            }
            if spec.hat {
                assert!(bbox_top(m, HAT).unwrap() < bbox_top(m, HAIR).unwrap());
            }
        }
        for (c, &n) in seen.iter().enumerate() {
            assert!(n >= 200, "class {c} appears in only {n} of 1000 samples");
        }
    }

    #[test]
    fn other_canvas_sizes_work() {
        for (h, w) in [(48, 48), (96, 64), (128, 128)] {
            for seed in 0..50 {
                generate(&FigureSpec::random(seed, h, w), h, w).unwrap();
            }
        }
    }
}
