use rand::Rng;

use super::{SegSample, IGNORE};
use crate::error::{Error, Result};

/// Range of the random rescaling factor.
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);

/// One geometric transform: rescale, optional horizontal flip, then a crop
/// whose top-left corner sits at `(offset_y, offset_x)` in the rescaled
/// image. Negative offsets (or crops running past the edge) pad with
/// [`IGNORE`] labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    pub offset_y: isize,
    pub offset_x: isize,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            flip: false,
            offset_y: 0,
            offset_x: 0,
        }
    }
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn random_offset(rng: &mut impl Rng, scaled: usize, crop: usize) -> isize {
    let (lo, hi) = if scaled >= crop {
        (0, (scaled - crop) as isize)
    } else {
        (scaled as isize - crop as isize, 0)
    };
    rng.gen_range(lo..=hi)
}

/// Draws a random scale in [`SCALE_RANGE`], a fair-coin flip and a crop
/// position, then applies them.
pub fn augment(sample: &SegSample, rng: &mut impl Rng, crop_h: usize, crop_w: usize) -> SegSample {
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let flip = rng.gen_bool(0.5);
    let sh = scaled_len(sample.height, scale);
    let sw = scaled_len(sample.width, scale);
    let params = AugmentParams {
        scale,
        flip,
        offset_y: random_offset(rng, sh, crop_h),
        offset_x: random_offset(rng, sw, crop_w),
    };
    apply_augment(sample, &params, crop_h, crop_w)
}

/// Image pixels are resampled bilinearly (half-pixel centres), labels by
/// nearest neighbour, both through the same geometric map.
pub fn apply_augment(sample: &SegSample, params: &AugmentParams, crop_h: usize, crop_w: usize) -> SegSample {
    let scale = params.scale.clamp(SCALE_RANGE.0, SCALE_RANGE.1);
    let (h, w) = (sample.height, sample.width);
    let (sh, sw) = (scaled_len(h, scale), scaled_len(w, scale));
    let (ry_ratio, rx_ratio) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let mut image = vec![0.5f32; crop_h * crop_w * 3];
    let mut labels = vec![IGNORE; crop_h * crop_w];

    for y in 0..crop_h {
        let ry = y as isize + params.offset_y;
        if ry < 0 || ry >= sh as isize {
            continue;
        }
        let sy = ((ry as f64 + 0.5) * ry_ratio - 0.5).clamp(0.0, (h - 1) as f64);
        let ly = (((ry as f64 + 0.5) * ry_ratio) as usize).min(h - 1);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..crop_w {
            let mut rx = x as isize + params.offset_x;
            if rx < 0 || rx >= sw as isize {
                continue;
            }
            if params.flip {
                rx = sw as isize - 1 - rx;
            }
            let sx = ((rx as f64 + 0.5) * rx_ratio - 0.5).clamp(0.0, (w - 1) as f64);
            let lx = (((rx as f64 + 0.5) * rx_ratio) as usize).min(w - 1);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            let (p00, p01) = (sample.pixel(y0, x0), sample.pixel(y0, x1));
            let (p10, p11) = (sample.pixel(y1, x0), sample.pixel(y1, x1));
            let o = (y * crop_w + x) * 3;
            for c in 0..3 {
                let top = p00[c] + fx * (p01[c] - p00[c]);
                let bot = p10[c] + fx * (p11[c] - p10[c]);
                image[o + c] = top + fy * (bot - top);
            }
            labels[y * crop_w + x] = sample.labels[ly * w + lx];
        }
    }
    SegSample {
        height: crop_h,
        width: crop_w,
        image,
        labels,
    }
}

/// Nearest-neighbour label downsampling, sampling the source at the centre
/// of every target cell.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, hd: usize, wd: usize) -> Result<Vec<u8>> {
    if hd == 0 || wd == 0 {
        return Err(Error::invalid("downsample_labels: zero target dimension"));
    }
    if hd > h || wd > w || labels.len() != h * w {
        return Err(Error::invalid(format!(
            "downsample_labels: cannot map {h}x{w} ({} labels) to {hd}x{wd}",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(hd * wd);
    for i in 0..hd {
        let sy = ((2 * i + 1) * h) / (2 * hd);
        for j in 0..wd {
            let sx = ((2 * j + 1) * w) / (2 * wd);
            out.push(labels[sy * w + sx]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, DatasetSpec, Split};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sample() -> SegSample {
        generate_sample(&DatasetSpec::default(), Split::Train, 5).unwrap()
    }

    #[test]
    fn identity_params_are_identity() {
        let s = sample();
        let out = apply_augment(&s, &AugmentParams::identity(), s.height, s.width);
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_is_original() {
        let s = sample();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let once = apply_augment(&s, &flip, s.height, s.width);
        assert_ne!(once, s);
        let twice = apply_augment(&once, &flip, s.height, s.width);
        assert_eq!(twice, s);
    }

    #[test]
    fn shrinking_pads_with_ignore() {
        let s = sample();
        let p = AugmentParams {
            scale: 0.5,
            flip: false,
            offset_y: 0,
            offset_x: 0,
        };
        let out = apply_augment(&s, &p, 64, 64);
        assert_eq!(out.labels[63 * 64 + 63], IGNORE);
        assert_ne!(out.labels[0], IGNORE);
        // out-of-range scales are clamped
        let q = AugmentParams { scale: 0.01, ..p };
        assert_eq!(apply_augment(&s, &q, 64, 64), out);
    }

    #[test]
    fn downsample_examples() {
        let quad: Vec<u8> = (0..16).map(|i| ((i / 8) * 2 + (i % 4) / 2) as u8).collect();
        assert_eq!(downsample_labels(&quad, 4, 4, 2, 2).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(downsample_labels(&quad, 4, 4, 4, 4).unwrap(), quad);
        let constant = vec![3u8; 64 * 48];
        for (hd, wd) in [(1, 1), (16, 12), (7, 5), (64, 48)] {
            let d = downsample_labels(&constant, 64, 48, hd, wd).unwrap();
            assert!(d.iter().all(|&l| l == 3));
        }
        let mut with_ignore = vec![1u8; 16];
        with_ignore[5] = IGNORE;
        assert_eq!(downsample_labels(&with_ignore, 4, 4, 2, 2).unwrap()[0], IGNORE);
        assert!(downsample_labels(&quad, 4, 4, 0, 2).is_err());
        assert!(downsample_labels(&quad, 4, 4, 5, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn augmentation_never_invents_classes(seed in any::<u64>(), idx in 0usize..20) {
            let s = generate_sample(&DatasetSpec::default(), Split::Train, idx).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&s, &mut rng, 64, 64);
            for l in &out.labels {
                prop_assert!(*l == IGNORE || s.labels.contains(l));
            }
            prop_assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
