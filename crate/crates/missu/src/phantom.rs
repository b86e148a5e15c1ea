//! Seeded synthetic phantoms with nested lesion classes, plus the
//! preprocessing (foreground z-score) and augmentation (flips, intensity
//! shift/scale, crop) protocol.
//!
//! Lesions are concentric ellipsoids with strictly shrinking semi-axes, so
//! the class regions nest by construction: region(3) within region(2)
//! within region(1), mirroring the whole/core/enhancing evaluation
//! convention. Voxel labels store the innermost containing ellipsoid; the
//! cumulative sets `label >= k` are the nested regions.

use crate::error::{Error, Result};
use crate::volume::{DType, Sample, SegMask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Minimum phantom side length; smaller volumes cannot hold three nested
/// shells with at least one voxel each.
pub const MIN_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: (usize, usize, usize),
    /// 4 = background + three nested classes; 2 = background + one region.
    pub num_classes: usize,
    pub modalities: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: (32, 32, 32),
            num_classes: 4,
            modalities: 2,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.shape;
        if h < MIN_SIDE || w < MIN_SIDE || d < MIN_SIDE {
            return Err(Error::PhantomTooSmall {
                min: MIN_SIDE,
                got: self.shape,
            });
        }
        if self.num_classes != 2 && self.num_classes != 4 {
            return Err(Error::InvalidConfig(
                "phantom num_classes must be 2 or 4".into(),
            ));
        }
        if self.modalities == 0 {
            return Err(Error::InvalidConfig("modalities must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for i in 0..3 {
            let t = (p[i] - self.center[i]) / self.semi_axes[i];
            q += t * t;
        }
        q <= 1.0
    }
}

/// Deterministic phantom for sample `index` of a dataset: the RNG stream is
/// derived from (spec.seed, index), so samples are independent and parallel
/// generation stays reproducible.
pub fn generate_phantom_indexed(spec: &PhantomSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let dims = [spec.shape.0 as f64, spec.shape.1 as f64, spec.shape.2 as f64];
    let lesions = spec.num_classes - 1;

    // Rejection loop: shells can come out empty at unlucky draws near the
    // minimum size; the loop continues the same stream, so the result is
    // still a pure function of (seed, index).
    for _attempt in 0..64 {
        let center: [f64; 3] = [
            dims[0] * rng.gen_range(0.40..0.60),
            dims[1] * rng.gen_range(0.40..0.60),
            dims[2] * rng.gen_range(0.40..0.60),
        ];
        let mut ellipsoids: Vec<Ellipsoid> = Vec::with_capacity(lesions);
        let outer: [f64; 3] = [
            dims[0] * rng.gen_range(0.26..0.36),
            dims[1] * rng.gen_range(0.26..0.36),
            dims[2] * rng.gen_range(0.26..0.36),
        ];
        ellipsoids.push(Ellipsoid {
            center,
            semi_axes: outer,
        });
        for _ in 1..lesions {
            let ratio: f64 = rng.gen_range(0.55..0.75);
            let prev = &ellipsoids.last().unwrap().semi_axes;
            ellipsoids.push(Ellipsoid {
                center,
                semi_axes: [prev[0] * ratio, prev[1] * ratio, prev[2] * ratio],
            });
        }

        let mut mask = SegMask::new(spec.shape);
        let mut histogram = vec![0usize; spec.num_classes];
        for x in 0..spec.shape.0 {
            for y in 0..spec.shape.1 {
                for z in 0..spec.shape.2 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    // Innermost containing ellipsoid wins.
                    let mut label = 0u8;
                    for (k, e) in ellipsoids.iter().enumerate() {
                        if e.contains(p) {
                            label = (k + 1) as u8;
                        }
                    }
                    let idx = mask.index(x, y, z);
                    mask.data[idx] = label;
                    histogram[label as usize] += 1;
                }
            }
        }
        if histogram.iter().any(|&c| c == 0) {
            continue;
        }

        // Per-(modality, class) intensity bands: class k sits around k with
        // a +-0.25 jitter, leaving a clear margin from the zero background.
        let mut means = vec![vec![0.0f64; spec.num_classes]; spec.modalities];
        for m in 0..spec.modalities {
            for k in 1..spec.num_classes {
                means[m][k] = k as f64 + rng.gen_range(-0.25..0.25);
            }
        }
        let mut volume = Volume::new(spec.modalities, spec.shape, DType::F32);
        volume.spacing = [1.0; 3];
        for m in 0..spec.modalities {
            for v in 0..mask.voxels() {
                let label = mask.data[v] as usize;
                let value = if label == 0 {
                    0.0
                } else {
                    let noise: f64 = rng.sample(StandardNormal);
                    means[m][label] + spec.noise_sigma * noise
                };
                // Stored at file precision so disk round-trips are exact.
                volume.data[m * mask.voxels() + v] = value as f32 as f64;
            }
        }
        return Ok(Sample { volume, mask });
    }
    Err(Error::PhantomDegenerate {
        classes: spec.num_classes,
        seed: spec.seed,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    generate_phantom_indexed(spec, 0)
}

/// Per-modality z-score over nonzero voxels; zero (background) voxels stay
/// zero. Errors when a modality has fewer than two nonzero voxels or zero
/// variance.
pub fn zscore_normalize(volume: &Volume) -> Result<Volume> {
    let voxels = volume.voxels();
    let mut out = volume.clone();
    for m in 0..volume.channels {
        let slice = &volume.data[m * voxels..(m + 1) * voxels];
        let nonzero: Vec<f64> = slice.iter().copied().filter(|&v| v != 0.0).collect();
        if nonzero.len() < 2 {
            return Err(Error::DegenerateModality {
                modality: m,
                reason: format!("{} nonzero voxels", nonzero.len()),
            });
        }
        let n = nonzero.len() as f64;
        let mean = nonzero.iter().sum::<f64>() / n;
        let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-12 {
            return Err(Error::DegenerateModality {
                modality: m,
                reason: "zero variance over nonzero voxels".into(),
            });
        }
        for (o, &v) in out.data[m * voxels..(m + 1) * voxels]
            .iter_mut()
            .zip(slice)
        {
            if v != 0.0 {
                *o = (v - mean) / std;
            }
        }
    }
    out.dtype = DType::F64;
    Ok(out)
}

/// Concrete augmentation draw. Axis order is (H, W, D).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: [bool; 3],
    pub shift: f64,
    pub scale: f64,
    pub crop_offset: [usize; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: [false; 3],
            shift: 0.0,
            scale: 1.0,
            crop_offset: [0; 3],
        }
    }
}

/// Sample augmentation parameters: each axis flips with p = 0.5, intensity
/// shift is uniform in [-0.1, 0.1], scale uniform in [0.9, 1.1], and the
/// crop offset is uniform over valid positions.
pub fn sample_augment_params<R: Rng>(
    rng: &mut R,
    vol_shape: (usize, usize, usize),
    crop_shape: (usize, usize, usize),
) -> Result<AugmentParams> {
    let vs = [vol_shape.0, vol_shape.1, vol_shape.2];
    let cs = [crop_shape.0, crop_shape.1, crop_shape.2];
    if cs.iter().zip(&vs).any(|(c, v)| c > v) {
        return Err(Error::CropTooLarge {
            crop: crop_shape,
            vol: vol_shape,
        });
    }
    let flip = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let shift = rng.gen_range(-0.1..=0.1);
    let scale = rng.gen_range(0.9..=1.1);
    let mut crop_offset = [0usize; 3];
    for i in 0..3 {
        crop_offset[i] = if vs[i] == cs[i] {
            0
        } else {
            rng.gen_range(0..=(vs[i] - cs[i]))
        };
    }
    Ok(AugmentParams {
        flip,
        shift,
        scale,
        crop_offset,
    })
}

/// Apply a concrete augmentation: flips move volume and mask identically;
/// intensity scale/shift touch the volume only; both are cropped to
/// `crop_shape` at the drawn offset.
pub fn apply_augment(
    sample: &Sample,
    params: &AugmentParams,
    crop_shape: (usize, usize, usize),
) -> Result<Sample> {
    sample.validate()?;
    let (vh, vw, vd) = sample.volume.shape;
    let (ch, cw, cd) = crop_shape;
    let off = params.crop_offset;
    if ch + off[0] > vh || cw + off[1] > vw || cd + off[2] > vd {
        return Err(Error::CropTooLarge {
            crop: crop_shape,
            vol: sample.volume.shape,
        });
    }

    let map = |i: usize, flip: bool, n: usize| if flip { n - 1 - i } else { i };
    let mut volume = Volume::new(sample.volume.channels, crop_shape, sample.volume.dtype);
    volume.spacing = sample.volume.spacing;
    let mut mask = SegMask::new(crop_shape);
    for x in 0..ch {
        for y in 0..cw {
            for z in 0..cd {
                // Flip in the source frame, then crop.
                let sx = map(x + off[0], params.flip[0], vh);
                let sy = map(y + off[1], params.flip[1], vw);
                let sz = map(z + off[2], params.flip[2], vd);
                let dst = mask.index(x, y, z);
                mask.data[dst] = sample.mask.data[sample.mask.index(sx, sy, sz)];
                for c in 0..volume.channels {
                    let v = sample.volume.data[sample.volume.index(c, sx, sy, sz)];
                    let dst = volume.index(c, x, y, z);
                    volume.data[dst] = v * params.scale + params.shift;
                }
            }
        }
    }
    Ok(Sample { volume, mask })
}

/// Draw parameters and apply them.
pub fn augment<R: Rng>(
    sample: &Sample,
    rng: &mut R,
    crop_shape: (usize, usize, usize),
) -> Result<Sample> {
    let params = sample_augment_params(rng, sample.volume.shape, crop_shape)?;
    apply_augment(sample, &params, crop_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&spec()).unwrap();
        let b = generate_phantom(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_indexed(&spec(), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn four_class_histogram_and_nesting() {
        let s = generate_phantom(&spec()).unwrap();
        let mut hist = [0usize; 4];
        for &l in &s.mask.data {
            hist[l as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c > 0), "histogram {hist:?}");
        // Cumulative regions nest: every voxel with label >= k+1 also has
        // label >= k by construction of the innermost-wins labeling.
        for v in 0..s.mask.voxels() {
            let l = s.mask.data[v];
            assert!(l <= 3);
        }
        // The nesting statement on sets: region(k) = {label >= k}.
        let count = |k: u8| s.mask.data.iter().filter(|&&l| l >= k).count();
        assert!(count(3) < count(2) && count(2) < count(1));
    }

    #[test]
    fn too_small_shape_is_rejected() {
        let s = PhantomSpec {
            shape: (8, 32, 32),
            ..spec()
        };
        assert!(matches!(
            generate_phantom(&s),
            Err(Error::PhantomTooSmall { .. })
        ));
    }

    #[test]
    fn two_class_phantom() {
        let s = PhantomSpec {
            num_classes: 2,
            ..spec()
        };
        let sample = generate_phantom(&s).unwrap();
        assert!(sample.mask.data.iter().any(|&l| l == 1));
        assert!(sample.mask.data.iter().all(|&l| l <= 1));
    }

    #[test]
    fn background_is_exactly_zero_and_foreground_is_not() {
        let s = generate_phantom(&spec()).unwrap();
        let voxels = s.mask.voxels();
        for m in 0..s.volume.channels {
            for v in 0..voxels {
                let val = s.volume.data[m * voxels + v];
                if s.mask.data[v] == 0 {
                    assert_eq!(val, 0.0);
                } else {
                    assert_ne!(val, 0.0);
                }
            }
        }
    }

    #[test]
    fn zscore_two_point_example() {
        let mut v = Volume::new(1, (16, 16, 16), DType::F32);
        v.data[0] = 1.0;
        v.data[1] = 3.0;
        let z = zscore_normalize(&v).unwrap();
        assert!((z.data[0] - -1.0).abs() < 1e-12);
        assert!((z.data[1] - 1.0).abs() < 1e-12);
        assert!(z.data[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_statistics_after_call() {
        let s = generate_phantom(&spec()).unwrap();
        let z = zscore_normalize(&s.volume).unwrap();
        let voxels = z.voxels();
        for m in 0..z.channels {
            let nonzero: Vec<f64> = z.data[m * voxels..(m + 1) * voxels]
                .iter()
                .copied()
                .filter(|&v| v != 0.0)
                .collect();
            let n = nonzero.len() as f64;
            let mean = nonzero.iter().sum::<f64>() / n;
            let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
        }
    }

    #[test]
    fn zscore_constant_modality_is_degenerate() {
        let mut v = Volume::new(1, (16, 16, 16), DType::F32);
        for x in v.data.iter_mut().take(100) {
            *x = 2.0;
        }
        assert!(matches!(
            zscore_normalize(&v),
            Err(Error::DegenerateModality { .. })
        ));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = generate_phantom(&spec()).unwrap();
        let params = AugmentParams {
            flip: [true, true, true],
            ..AugmentParams::identity()
        };
        let once = apply_augment(&s, &params, s.volume.shape).unwrap();
        let twice = apply_augment(&once, &params, s.volume.shape).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn identity_params_are_a_noop() {
        let s = generate_phantom(&spec()).unwrap();
        let out = apply_augment(&s, &AugmentParams::identity(), s.volume.shape).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn flip_moves_volume_and_mask_together() {
        // A delta-labeled voxel keeps its intensity under every flip combo.
        let s = generate_phantom(&spec()).unwrap();
        for bits in 0..8u8 {
            let params = AugmentParams {
                flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                ..AugmentParams::identity()
            };
            let f = apply_augment(&s, &params, s.volume.shape).unwrap();
            let voxels = s.mask.voxels();
            // Compare intensity histograms conditioned on label; flipping
            // must not change the (label, intensity) pairing.
            let mut orig: Vec<(u8, u64)> = (0..voxels)
                .map(|v| (s.mask.data[v], s.volume.data[v].to_bits()))
                .collect();
            let mut flip: Vec<(u8, u64)> = (0..voxels)
                .map(|v| (f.mask.data[v], f.volume.data[v].to_bits()))
                .collect();
            orig.sort_unstable();
            flip.sort_unstable();
            assert_eq!(orig, flip);
        }
    }

    #[test]
    fn crop_larger_than_volume_fails() {
        let s = generate_phantom(&spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            augment(&s, &mut rng, (64, 32, 32)),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn flip_frequency_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_augment_params(&mut rng, (32, 32, 32), (32, 32, 32)).unwrap();
            for i in 0..3 {
                if p.flip[i] {
                    counts[i] += 1;
                }
            }
            assert!((-0.1..=0.1).contains(&p.shift));
            assert!((0.9..=1.1).contains(&p.scale));
            assert_eq!(p.crop_offset, [0; 3]);
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "flip frequency {freq}");
        }
    }

    #[test]
    fn crop_offsets_cover_valid_range() {
        let s = generate_phantom(&spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = (16, 16, 16);
        let mut seen_nonzero = false;
        for _ in 0..50 {
            let p = sample_augment_params(&mut rng, s.volume.shape, crop).unwrap();
            for i in 0..3 {
                assert!(p.crop_offset[i] <= 16);
            }
            seen_nonzero |= p.crop_offset.iter().any(|&o| o > 0);
            let out = apply_augment(&s, &p, crop).unwrap();
            assert_eq!(out.volume.shape, crop);
            assert_eq!(out.mask.shape, crop);
        }
        assert!(seen_nonzero);
    }
}
