//! Deterministic synthetic feature pyramids standing in for a CNN backbone.
//!
//! Every class owns a few spatially localized parts. Each part is rendered at every
//! level as a Gaussian blob with a class- and level-specific channel loading; blobs
//! widen as resolution coarsens going up the pyramid. Classes are grouped into
//! superclasses that share their first part, which keeps neighbouring classes
//! confusable. Per-sample variation (part jitter, amplitude jitter, pixel noise)
//! scales with the level's noise setting. With probability `corruption` a level is
//! replaced by a saturated map (one random constant per channel), which carries no
//! class information and has a flat activation map.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FeaturePyramid};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Scale of per-sample variation at this level.
    pub noise: f64,
    /// Probability that this level is saturated for a given sample.
    pub corruption: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub levels: Vec<LevelSpec>,
    pub classes: usize,
    pub samples_per_class: usize,
    pub parts_per_class: usize,
    /// Number of consecutive classes sharing their first part.
    pub superclass_size: usize,
    /// Blob standard deviation at level 1, in normalized image coordinates.
    pub blob_width: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            levels: vec![
                LevelSpec {
                    channels: 16,
                    rows: 16,
                    cols: 16,
                    noise: 0.6,
                    corruption: 0.3,
                },
                LevelSpec {
                    channels: 24,
                    rows: 8,
                    cols: 8,
                    noise: 0.6,
                    corruption: 0.3,
                },
                LevelSpec {
                    channels: 32,
                    rows: 4,
                    cols: 4,
                    noise: 0.6,
                    corruption: 0.3,
                },
            ],
            classes: 16,
            samples_per_class: 40,
            parts_per_class: 3,
            superclass_size: 2,
            blob_width: 0.08,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("synthetic spec needs at least one level"));
        }
        if self.classes == 0 {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        if self.parts_per_class == 0 || self.superclass_size == 0 {
            return Err(Error::config(
                "parts_per_class and superclass_size must be positive",
            ));
        }
        if !(self.blob_width > 0.0) {
            return Err(Error::config("blob_width must be positive"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.channels == 0 || l.rows == 0 || l.cols == 0 {
                return Err(Error::config(format!(
                    "level {} has a zero dimension ({}x{}x{})",
                    i + 1,
                    l.channels,
                    l.rows,
                    l.cols
                )));
            }
            if !(l.noise >= 0.0) || !(0.0..=1.0).contains(&l.corruption) {
                return Err(Error::config(format!(
                    "level {} needs noise >= 0 and corruption in [0, 1]",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone)]
struct Part {
    y: f64,
    x: f64,
    /// Channel loading per level.
    loadings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct ClassPattern {
    parts: Vec<Part>,
}

/// Class prototypes for one dataset seed; samples are drawn from it on demand.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    spec: SynthSpec,
    seed: u64,
    classes: Vec<ClassPattern>,
    /// Per-level, per-channel background activation.
    background: Vec<Vec<f64>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_part(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Part {
    let loadings = spec
        .levels
        .iter()
        .map(|l| {
            (0..l.channels)
                .map(|_| {
                    if rng.random::<f64>() < 0.35 {
                        rng.random_range(0.5..1.5)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Part {
        y: rng.random_range(0.15..0.85),
        x: rng.random_range(0.15..0.85),
        loadings,
    }
}

impl SyntheticBackbone {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = spec
            .levels
            .iter()
            .map(|l| (0..l.channels).map(|_| rng.random_range(0.0..0.2)).collect())
            .collect();
        let groups = spec.classes.div_ceil(spec.superclass_size);
        let shared: Vec<Part> = (0..groups).map(|_| random_part(&mut rng, &spec)).collect();
        let classes = (0..spec.classes)
            .map(|c| {
                let mut parts = vec![shared[c / spec.superclass_size].clone()];
                for _ in 1..spec.parts_per_class {
                    parts.push(random_part(&mut rng, &spec));
                }
                ClassPattern { parts }
            })
            .collect();
        Ok(Self {
            spec,
            seed,
            classes,
            background,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Draw sample `index` of class `label`. Deterministic in `(spec, seed, label, index)`.
    pub fn sample(&self, label: u32, index: usize) -> Result<FeaturePyramid> {
        let class = self.classes.get(label as usize).ok_or_else(|| {
            Error::config(format!(
                "label {label} out of range for {} classes",
                self.spec.classes
            ))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
            self.seed ^ splitmix(((label as u64) << 32) | index as u64),
        ));
        let mut levels = Vec::with_capacity(self.spec.num_levels());
        for (li, lspec) in self.spec.levels.iter().enumerate() {
            let (c, h, w) = (lspec.channels, lspec.rows, lspec.cols);
            let corrupted = lspec.corruption > 0.0 && rng.random::<f64>() < lspec.corruption;
            let data = if corrupted {
                let levels: Vec<f32> = (0..c).map(|_| rng.random_range(0.0..1.5) as f32).collect();
                Array3::from_shape_fn((c, h, w), |(ch, _, _)| levels[ch])
            } else {
                self.render(&mut rng, class, li, lspec)
            };
            levels.push(FeatureMap::new(data, li + 1)?);
        }
        FeaturePyramid::new(levels, format!("c{label:03}_s{index:04}"), label)
    }

    fn render(
        &self,
        rng: &mut ChaCha8Rng,
        class: &ClassPattern,
        li: usize,
        lspec: &LevelSpec,
    ) -> Array3<f32> {
        let (c, h, w) = (lspec.channels, lspec.rows, lspec.cols);
        let noise = lspec.noise;
        let sigma = self.spec.blob_width * (1.0 + 0.5 * li as f64);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for (ch, bg) in self.background[li].iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), ch).fill(*bg);
        }
        for part in &class.parts {
            let jy: f64 = StandardNormal.sample(rng);
            let jx: f64 = StandardNormal.sample(rng);
            let ja: f64 = StandardNormal.sample(rng);
            let py = part.y + 0.06 * noise * jy;
            let px = part.x + 0.06 * noise * jx;
            let amp = (1.0 + 0.3 * noise * ja).max(0.0);
            for y in 0..h {
                let cy = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let cx = (x as f64 + 0.5) / w as f64;
                    let d2 = (cy - py).powi(2) + (cx - px).powi(2);
                    let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    for (ch, load) in part.loadings[li].iter().enumerate() {
                        if *load != 0.0 {
                            out[[ch, y, x]] += load * g;
                        }
                    }
                }
            }
        }
        if noise > 0.0 {
            for v in out.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += 0.25 * noise * n;
            }
        }
        out.mapv(|v| v as f32)
    }
}

/// One sample of class `label` from the backbone built for `(spec, seed)`.
pub fn synthesize_pyramid(
    spec: &SynthSpec,
    seed: u64,
    label: u32,
    index: usize,
) -> Result<FeaturePyramid> {
    SyntheticBackbone::new(spec.clone(), seed)?.sample(label, index)
}

/// `classes × samples_per_class` pyramids ordered by class, then index.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<FeaturePyramid>> {
    let backbone = SyntheticBackbone::new(spec.clone(), seed)?;
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for label in 0..spec.classes as u32 {
        for i in 0..spec.samples_per_class {
            out.push(backbone.sample(label, i)?);
        }
    }
    Ok(out)
}

/// Zero-shot split: the first half of the classes train, the rest evaluate.
pub fn split_by_class(
    data: Vec<FeaturePyramid>,
    classes: usize,
) -> (Vec<FeaturePyramid>, Vec<FeaturePyramid>) {
    let cut = (classes / 2) as u32;
    data.into_iter().partition(|p| p.label < cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(spec: &mut SynthSpec) {
        for l in &mut spec.levels {
            l.noise = 0.0;
            l.corruption = 0.0;
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SynthSpec::default();
        let a = synthesize_pyramid(&spec, 7, 3, 5).unwrap();
        let b = synthesize_pyramid(&spec, 7, 3, 5).unwrap();
        assert_eq!(a, b);
        let c = synthesize_pyramid(&spec, 8, 3, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_same_class_is_identical() {
        let mut spec = SynthSpec::default();
        quiet(&mut spec);
        let bb = SyntheticBackbone::new(spec, 11).unwrap();
        let a = bb.sample(2, 0).unwrap();
        let b = bb.sample(2, 9).unwrap();
        assert_eq!(a.levels(), b.levels());
    }

    #[test]
    fn noiseless_classes_differ_at_every_level() {
        let mut spec = SynthSpec::default();
        quiet(&mut spec);
        let bb = SyntheticBackbone::new(spec, 11).unwrap();
        let a = bb.sample(0, 0).unwrap();
        let b = bb.sample(1, 0).unwrap();
        for (ma, mb) in a.levels().iter().zip(b.levels()) {
            let differing = ma
                .data()
                .iter()
                .zip(mb.data().iter())
                .filter(|(x, y)| x != y)
                .count();
            assert!(differing > 0, "level {} identical", ma.level());
        }
    }

    #[test]
    fn corrupted_levels_are_spatially_constant() {
        let mut spec = SynthSpec::default();
        for l in &mut spec.levels {
            l.corruption = 1.0;
        }
        let p = synthesize_pyramid(&spec, 1, 0, 0).unwrap();
        for m in p.levels() {
            for ch in m.data().outer_iter() {
                let first = ch[[0, 0]];
                assert!(ch.iter().all(|&v| v == first));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::default();
        spec.classes = 0;
        assert!(matches!(
            SyntheticBackbone::new(spec, 0),
            Err(Error::Config(_))
        ));
        let mut spec = SynthSpec::default();
        spec.levels[1].rows = 0;
        assert!(SyntheticBackbone::new(spec, 0).is_err());
        let mut spec = SynthSpec::default();
        spec.levels.clear();
        assert!(SyntheticBackbone::new(spec, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_by_class() {
        let mut spec = SynthSpec::default();
        spec.classes = 4;
        spec.samples_per_class = 3;
        let (train, test) = split_by_class(synthesize_dataset(&spec, 0).unwrap(), 4);
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 6);
        assert!(train.iter().all(|p| p.label < 2));
        assert!(test.iter().all(|p| p.label >= 2));
    }
}
