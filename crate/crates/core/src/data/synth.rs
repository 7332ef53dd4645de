use rand::Rng;

use super::{Dataset, SampleRecord, Split, SplitSet};
use crate::error::{Error, Result};
use crate::rng::{stream, tag, StreamRng};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Garment colors shared by all identities, so that identities differ mostly by arrangement.
pub const PALETTE: [[f64; 3]; 10] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.70, 0.20],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.20],
    [0.92, 0.92, 0.92],
    [0.08, 0.08, 0.08],
    [0.95, 0.55, 0.10],
    [0.55, 0.20, 0.70],
    [0.10, 0.75, 0.80],
    [0.50, 0.30, 0.15],
];

const COLOR_JITTER: f64 = 0.06;
const MAX_REROLLS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub num_cams: usize,
    pub height: usize,
    pub width: usize,
}

impl GenConfig {
    /// 40 identities, so the train split holds 20 identities of 10 images.
    pub fn desk() -> Self {
        GenConfig {
            num_ids: 40,
            imgs_per_id: 10,
            num_cams: 2,
            height: 48,
            width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 4 || self.num_cams < 2 || self.imgs_per_id < 2 {
            return Err(Error::Config(format!(
                "need num_ids >= 4, num_cams >= 2 and imgs_per_id >= 2, got {}, {}, {}",
                self.num_ids, self.num_cams, self.imgs_per_id
            )));
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::Config(format!("image size {}x{} is too small", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    /// In `[0, 1]`; 0 disables every corruption.
    pub severity: f64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!("severity must lie in [0, 1], got {}", self.severity)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occlusion {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub offset: f64,
    pub scale: f64,
    pub occlusion: Option<Occlusion>,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        offset: 0.0,
        scale: 1.0,
        occlusion: None,
    };

    pub fn is_identity(&self) -> bool {
        self.offset == 0.0 && self.scale == 1.0 && self.occlusion.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub head: [f64; 3],
    pub torso: [f64; 3],
    pub legs: [f64; 3],
    pub stripe: [f64; 3],
    /// 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 two-tone torso.
    pub pattern: u8,
    /// Head, torso and legs as fractions of the body height.
    pub proportions: [f64; 3],
    pub width_frac: f64,
}

impl IdentitySpec {
    pub fn random(id: usize, rng: &mut StreamRng) -> Self {
        let mut picks = [0usize; 4];
        for i in 0..4 {
            loop {
                let c = rng.random_range(0..PALETTE.len());
                if !picks[..i].contains(&c) {
                    picks[i] = c;
                    break;
                }
            }
        }
        let mut color = |i: usize| {
            let base = PALETTE[picks[i]];
            let mut out = [0.0; 3];
            for (o, b) in out.iter_mut().zip(base) {
                *o = (b + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0);
            }
            out
        };
        let (head, torso, legs, stripe) = (color(0), color(1), color(2), color(3));
        let h = rng.random_range(0.15..0.22);
        let t = rng.random_range(0.33..0.45);
        IdentitySpec {
            id,
            head,
            torso,
            legs,
            stripe,
            pattern: rng.random_range(0..4u8),
            proportions: [h, t, 1.0 - h - t],
            width_frac: rng.random_range(0.55..0.8),
        }
    }

    fn color_at(&self, row: usize, col: usize, height: usize, left: usize) -> [f64; 3] {
        let y = (row as f64 + 0.5) / height as f64;
        let [h, t, _] = self.proportions;
        if y < h {
            return self.head;
        }
        if y >= h + t {
            return self.legs;
        }
        let torso_row = row - ((h * height as f64).floor() as usize).min(row);
        let striped = match self.pattern {
            1 => (torso_row / 3) % 2 == 1,
            2 => ((col - left) / 2) % 2 == 1,
            3 => y >= h + t / 2.0,
            _ => false,
        };
        if striped {
            self.stripe
        } else {
            self.torso
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraSpec {
    pub brightness: f64,
    /// Weight of the cyclic channel rotation mixed into each pixel.
    pub hue: f64,
    pub noise: f64,
}

impl CameraSpec {
    pub fn random(rng: &mut StreamRng) -> Self {
        CameraSpec {
            brightness: rng.random_range(0.85..1.15),
            hue: rng.random_range(0.0..0.12),
            noise: rng.random_range(0.01..0.04),
        }
    }
}

fn check_image(op: &'static str, image: &Tensor<f64>) -> Result<(usize, usize)> {
    match image.shape() {
        &[CHANNELS, h, w] => Ok((h, w)),
        s => Err(Error::shape(op, s, &[CHANNELS, 0, 0])),
    }
}

/// Shifts content down by `offset · H` rows, rescales vertically about the center, then
/// paints the occlusion box. Rows pulled from outside the image replicate the edge.
pub fn apply_misalignment(image: &Tensor<f64>, c: &Corruption) -> Result<Tensor<f64>> {
    let (h, w) = check_image("apply_misalignment", image)?;
    if !(-0.3..=0.3).contains(&c.offset) || !(0.7..=1.3).contains(&c.scale) {
        return Err(Error::invalid(
            "apply_misalignment",
            format!("offset {} or scale {} out of range", c.offset, c.scale),
        ));
    }
    if let Some(o) = &c.occlusion {
        if o.w == 0 || o.h == 0 || o.x + o.w > w || o.y + o.h > h {
            return Err(Error::invalid("apply_misalignment", format!("occlusion {o:?} outside {h}x{w}")));
        }
    }
    let shift = (c.offset * h as f64).round() as isize;
    let center = h as f64 / 2.0;
    let src_row = |y: usize| -> usize {
        let scaled = (center + (y as f64 + 0.5 - center) / c.scale).floor() as isize;
        let scaled = scaled.clamp(0, h as isize - 1);
        (scaled - shift).clamp(0, h as isize - 1) as usize
    };
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..CHANNELS {
        for y in 0..h {
            let sy = src_row(y);
            let (d, s) = ((ch * h + y) * w, (ch * h + sy) * w);
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    if let Some(o) = &c.occlusion {
        for (ch, &v) in o.color.iter().enumerate() {
            for y in o.y..o.y + o.h {
                let row = (ch * h + y) * w;
                out[row + o.x..row + o.x + o.w].fill(v);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Corruption for one sample. Uniforms are drawn unconditionally and scaled by severity,
/// so a sample's corruption grows continuously with severity.
fn draw_corruption(rng: &mut StreamRng, severity: f64, h: usize, w: usize) -> Corruption {
    let u: [f64; 7] = std::array::from_fn(|_| rng.random::<f64>());
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let offset = (2.0 * u[0] - 1.0) * 0.3 * severity + 0.0;
    let scale = 1.0 + (2.0 * u[1] - 1.0) * 0.3 * severity;
    let occlusion = (u[2] < 0.5 * severity).then(|| {
        let area = u[3] * 0.25 * severity;
        let fw = area + (1.0 - area) * u[4];
        let ow = ((fw * w as f64).floor() as usize).min(w);
        let oh = (((area / fw) * h as f64).floor() as usize).min(h);
        (ow > 0 && oh > 0).then(|| Occlusion {
            x: ((w - ow + 1) as f64 * u[5]).floor() as usize % (w - ow + 1),
            y: ((h - oh + 1) as f64 * u[6]).floor() as usize % (h - oh + 1),
            w: ow,
            h: oh,
            color,
        })
    });
    Corruption {
        offset,
        scale,
        occlusion: occlusion.flatten(),
    }
}

/// Renders sample `index` of the dataset seeded by `seed`, returning the image and its corruption.
pub fn render_sample(
    spec: &IdentitySpec,
    camera: &CameraSpec,
    gen: &GenConfig,
    severity: f64,
    seed: u64,
    index: u64,
) -> Result<(Tensor<f64>, Corruption)> {
    let (h, w) = (gen.height, gen.width);
    let mut rng = stream(seed, tag::SAMPLE, index);
    let corruption = draw_corruption(&mut rng, severity, h, w);

    let grey = rng.random_range(0.25..0.75);
    let bg: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.05..0.05));
    let pw = ((spec.width_frac * w as f64).round() as usize).clamp(2, w);
    let slack = (w - pw) as isize;
    let left = (slack / 2 + rng.random_range(-1..=1i64) as isize).clamp(0, slack) as usize;
    let mut data = vec![0.0; CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = if x >= left && x < left + pw {
                spec.color_at(y, x, h, left)
            } else {
                bg
            };
            for ch in 0..CHANNELS {
                data[(ch * h + y) * w + x] = px[ch];
            }
        }
    }
    let clean = Tensor::new(&[CHANNELS, h, w], data)?;
    let mut img = apply_misalignment(&clean, &corruption)?.into_data();

    let plane = h * w;
    for i in 0..plane {
        let rgb: [f64; 3] = std::array::from_fn(|ch| img[ch * plane + i] * camera.brightness);
        for ch in 0..CHANNELS {
            let mixed = (1.0 - camera.hue) * rgb[ch] + camera.hue * rgb[(ch + 1) % CHANNELS];
            let noise = camera.noise * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
            img[ch * plane + i] = (mixed + noise).clamp(0.0, 1.0);
        }
    }
    Ok((Tensor::new(&[CHANNELS, h, w], img)?, corruption))
}

/// Query/gallery assignment for one test identity: per camera, its first image becomes a
/// query if every query keeps a gallery image from another camera.
fn assign_queries(cameras: &[usize]) -> Option<Vec<bool>> {
    let mut is_query = vec![false; cameras.len()];
    let mut seen = Vec::new();
    for (i, &c) in cameras.iter().enumerate() {
        if seen.contains(&c) {
            continue;
        }
        seen.push(c);
        is_query[i] = true;
        let ok = cameras.iter().enumerate().filter(|&(j, _)| is_query[j]).all(|(_, &qc)| {
            cameras
                .iter()
                .enumerate()
                .any(|(j, &gc)| !is_query[j] && gc != qc)
        });
        if !ok {
            is_query[i] = false;
        }
    }
    is_query.iter().any(|&q| q).then_some(is_query)
}

pub fn identity_specs(gen: &GenConfig, seed: u64) -> Vec<IdentitySpec> {
    (0..gen.num_ids)
        .map(|id| IdentitySpec::random(id, &mut stream(seed, tag::IDENTITY, id as u64)))
        .collect()
}

pub fn camera_specs(gen: &GenConfig, seed: u64) -> Vec<CameraSpec> {
    (0..gen.num_cams)
        .map(|c| CameraSpec::random(&mut stream(seed, tag::CAMERA, c as u64)))
        .collect()
}

/// The first half of the identities train; the rest are split into query and gallery.
pub fn generate_dataset(gen: &GenConfig, corruption: &CorruptionConfig, seed: u64) -> Result<Dataset> {
    gen.validate()?;
    corruption.validate()?;
    let specs = identity_specs(gen, seed);
    let cams = camera_specs(gen, seed);
    let train_ids = gen.num_ids / 2;
    let mut parts: [(Vec<SampleRecord>, Vec<f32>); 3] = Default::default();
    for spec in &specs {
        let train = spec.id < train_ids;
        let mut rng = stream(seed, tag::SPLIT, spec.id as u64);
        let mut attempt = 0;
        let (cameras, queries) = loop {
            let cameras: Vec<usize> = (0..gen.imgs_per_id).map(|_| rng.random_range(0..gen.num_cams)).collect();
            if train {
                break (cameras, vec![false; gen.imgs_per_id]);
            }
            if let Some(q) = assign_queries(&cameras) {
                break (cameras, q);
            }
            attempt += 1;
            if attempt >= MAX_REROLLS {
                return Err(Error::Dataset(format!(
                    "identity {} has no feasible query/gallery split after {MAX_REROLLS} attempts",
                    spec.id
                )));
            }
        };
        for (k, (&cam, &q)) in cameras.iter().zip(&queries).enumerate() {
            let index = (spec.id * gen.imgs_per_id + k) as u64;
            let (img, corr) = render_sample(spec, &cams[cam], gen, corruption.severity, seed, index)?;
            let split = match (train, q) {
                (true, _) => Split::Train,
                (false, true) => Split::Query,
                (false, false) => Split::Gallery,
            };
            let part = &mut parts[split as usize];
            part.0.push(SampleRecord {
                entry_name: format!("{split}_{:05}", part.0.len()),
                identity: spec.id,
                camera: cam,
                split,
                corruption: corr,
            });
            part.1.extend(img.data().iter().map(|&v| v as f32));
        }
    }
    let [train, query, gallery] = parts.map(|(records, pixels)| {
        let shape = [records.len(), CHANNELS, gen.height, gen.width];
        SplitSet {
            images: Tensor::new(&shape, pixels).expect("pixel count matches"),
            records,
        }
    });
    Ok(Dataset { train, query, gallery })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> GenConfig {
        GenConfig {
            num_ids: 20,
            imgs_per_id: 10,
            num_cams: 2,
            height: 48,
            width: 16,
        }
    }

    #[test]
    fn record_count_and_shapes() {
        let d = generate_dataset(&small(), &CorruptionConfig { severity: 0.5 }, 3).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.train.len(), 100);
        assert_eq!(d.image_shape(), (3, 48, 16));
        let (labels, classes) = d.train_classes();
        assert_eq!(classes, 10);
        assert!(labels.iter().all(|&l| l < 10));
        assert!(d.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn severity_zero_is_uncorrupted() {
        let d = generate_dataset(&small(), &CorruptionConfig { severity: 0.0 }, 3).unwrap();
        for s in Split::ALL {
            for r in &d.split(s).records {
                assert!(r.corruption.is_identity());
                assert!(r.corruption.offset.is_sign_positive());
            }
        }
    }

    #[test]
    fn split_protocol_holds() {
        for seed in 0..5 {
            let d = generate_dataset(&small(), &CorruptionConfig { severity: 0.3 }, seed).unwrap();
            let train: HashSet<usize> = d.train.identities().into_iter().collect();
            let test: HashSet<usize> = d.query.identities().into_iter().chain(d.gallery.identities()).collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), 20);
            for q in &d.query.records {
                assert!(d
                    .gallery
                    .records
                    .iter()
                    .any(|g| g.identity == q.identity && g.camera != q.camera));
            }
        }
    }

    #[test]
    fn corruption_parameters_stay_in_range() {
        let gen = small();
        for s in [0.1, 0.6, 1.0] {
            let d = generate_dataset(&gen, &CorruptionConfig { severity: s }, 9).unwrap();
            for r in d.train.records.iter().chain(&d.gallery.records) {
                let c = r.corruption;
                assert!(c.offset.abs() <= 0.3 * s + 1e-12);
                assert!((c.scale - 1.0).abs() <= 0.3 * s + 1e-12);
                if let Some(o) = c.occlusion {
                    let area = (o.w * o.h) as f64 / (gen.width * gen.height) as f64;
                    assert!(area <= 0.25 * s + 1e-12, "area {area} at severity {s}");
                }
            }
        }
    }

    #[test]
    fn identity_specs_are_valid() {
        for spec in identity_specs(&GenConfig::desk(), 1) {
            assert!((spec.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(spec.proportions.iter().all(|&p| p > 0.0));
            for c in [spec.head, spec.torso, spec.legs, spec.stripe] {
                assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    fn two_band(h: usize, w: usize) -> Tensor<f64> {
        let mut data = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in h / 2..h {
                data[(ch * h + y) * w..(ch * h + y + 1) * w].fill(1.0);
            }
        }
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn misalignment_examples() {
        let img = two_band(48, 16);
        assert_eq!(apply_misalignment(&img, &Corruption::NONE).unwrap(), img);

        let shifted = apply_misalignment(&img, &Corruption { offset: 0.25, ..Corruption::NONE }).unwrap();
        let boundary = (0..48).find(|&y| shifted.data()[y * 16] == 1.0).unwrap();
        assert_eq!(boundary, 24 + 12);
        assert_eq!(shifted.shape(), img.shape());

        let cover = Occlusion { x: 0, y: 0, w: 16, h: 48, color: [0.3, 0.3, 0.3] };
        let out = apply_misalignment(&img, &Corruption { occlusion: Some(cover), ..Corruption::NONE }).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));

        let stretched = apply_misalignment(&img, &Corruption { scale: 1.3, ..Corruption::NONE }).unwrap();
        assert_eq!(stretched.data()[24 * 16], 1.0);
        assert_eq!(stretched.data()[23 * 16], 0.0);

        for bad in [
            Corruption { offset: 0.4, ..Corruption::NONE },
            Corruption { scale: 0.6, ..Corruption::NONE },
            Corruption { occlusion: Some(Occlusion { x: 10, y: 0, w: 8, h: 2, color: [0.0; 3] }), ..Corruption::NONE },
        ] {
            assert!(apply_misalignment(&img, &bad).is_err());
        }
    }

    #[test]
    fn corruption_grows_with_severity() {
        let gen = GenConfig::desk();
        let specs = identity_specs(&gen, 4);
        let cams = camera_specs(&gen, 4);
        let diff_at = |s: f64| -> f64 {
            (0..100u64)
                .map(|i| {
                    let spec = &specs[i as usize % specs.len()];
                    let cam = &cams[i as usize % cams.len()];
                    let (clean, _) = render_sample(spec, cam, &gen, 0.0, 4, i).unwrap();
                    let (bad, _) = render_sample(spec, cam, &gen, s, 4, i).unwrap();
                    clean.data().iter().zip(bad.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                        / clean.numel() as f64
                })
                .sum::<f64>()
                / 100.0
        };
        let levels: Vec<f64> = (0..=5).map(|k| diff_at(k as f64 * 0.2)).collect();
        assert_eq!(levels[0], 0.0);
        assert!(levels.windows(2).all(|w| w[0] <= w[1]), "{levels:?}");
    }

    #[test]
    fn query_assignment_rules() {
        assert_eq!(assign_queries(&[0, 1]), Some(vec![true, false]));
        assert_eq!(assign_queries(&[0, 0, 0]), None);
        assert_eq!(assign_queries(&[0, 0, 1, 1]), Some(vec![true, false, true, false]));
        let bad = GenConfig { imgs_per_id: 2, num_cams: 2, ..small() };
        assert!(generate_dataset(&bad, &CorruptionConfig { severity: 0.0 }, 0).is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = CorruptionConfig { severity: 0.0 };
        assert!(generate_dataset(&GenConfig { num_ids: 3, ..small() }, &ok, 0).is_err());
        assert!(generate_dataset(&GenConfig { num_cams: 1, ..small() }, &ok, 0).is_err());
        assert!(generate_dataset(&small(), &CorruptionConfig { severity: 1.5 }, 0).is_err());
    }
}
