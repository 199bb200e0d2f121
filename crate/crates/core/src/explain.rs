//! Metrics (mIoU, pixel error, prototype overlap, prototype utilisation)
//! and explanation artifacts (activation maps, assignment maps).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{kernels, Real};
use crate::segmodel::{assign_prototypes, segment_logits, SegModel};
use crate::synthdata::{write_pgm, write_ppm};
use crate::synthdata::{downsample_labels, SegSample, IGNORE};
use crate::trainer::Stage;

/// One line of the per-stage training report.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRow {
    pub stage: Stage,
    pub active_prototypes: usize,
    pub val_miou: f64,
    pub train_loss: f64,
}

/// Colours for classes and prototypes (index mod 20). Black is reserved
/// for unassigned pixels.
pub const PALETTE: [[u8; 3]; 20] = [
    [128, 128, 128],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
];

pub fn prototype_color(j: usize) -> [u8; 3] {
    PALETTE[j % 20]
}

/// `(ground truth, prediction)` counts over non-IGNORE pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    /// Row-major `counts[gt·C + pred]`.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub mean: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![gt.len()],
                rhs: vec![pred.len()],
            });
        }
        let c = self.num_classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                continue;
            }
            let bad = if g as usize >= c { g } else { p };
            if g as usize >= c || p as usize >= c {
                return Err(Error::LabelOutOfRange {
                    label: bad as usize,
                    classes: c,
                });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.counts[c * self.num_classes + c]).sum()
    }

    pub fn miou(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(Error::invalid("mIoU of an empty confusion matrix"));
        }
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
                let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(MiouReport {
            mean: scored.iter().sum::<f64>() / scored.len() as f64,
            per_class,
        })
    }

    /// `1 − trace/total`; 0 when nothing was scored.
    pub fn pixel_error(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            1.0 - self.trace() as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelError {
    pub value: f64,
    /// Set when every pixel was IGNORE.
    pub empty: bool,
}

/// Fraction of non-IGNORE pixels with `pred ≠ gt`.
pub fn pixel_error(preds: &[u8], gts: &[u8]) -> Result<PixelError> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "pixel_error",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    let (mut wrong, mut total) = (0usize, 0usize);
    for (&p, &g) in preds.iter().zip(gts) {
        if g != IGNORE {
            total += 1;
            wrong += (p != g) as usize;
        }
    }
    Ok(PixelError {
        value: if total == 0 { 0.0 } else { wrong as f64 / total as f64 },
        empty: total == 0,
    })
}

/// Confusion counts of the model's predictions over `samples`.
pub fn confusion_over<T: Real>(model: &SegModel<T>, samples: &[SegSample]) -> Result<ConfusionAccumulator> {
    let c = model.config.num_classes;
    let parts: Vec<Result<ConfusionAccumulator>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict_segmentation(s)?;
            let mut acc = ConfusionAccumulator::new(c);
            acc.add(&s.labels, &pred)?;
            Ok(acc)
        })
        .collect();
    let mut acc = ConfusionAccumulator::new(c);
    for p in parts {
        acc.merge(&p?);
    }
    Ok(acc)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        v[lo]
    } else {
        v[lo] + frac * (v[hi] - v[lo])
    }
}

/// Mask of the entries at or above the map's own `q`-th percentile.
pub fn binarize(map: &[f64], q: f64) -> Vec<bool> {
    let t = percentile(map, q);
    map.iter().map(|&v| v >= t).collect()
}

/// `|A∩B| / |A∪B|`, 1 for two empty masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    /// Mean pair IoU per class; `None` when the class has fewer than two
    /// active prototypes.
    pub per_class: Vec<Option<f64>>,
    /// Mean over every (pair, image) term of every class.
    pub mean: Option<f64>,
    pub percentile: f64,
    /// Number of (pair, image) terms.
    pub pairs: usize,
}

/// Overlap from raw activation maps: `maps[image][j]` is prototype `j`'s
/// map in that image (empty for inactive prototypes).
pub fn overlap_from_maps(maps: &[Vec<Vec<f64>>], class_of: &[usize], active: &[bool], num_classes: usize, q: f64) -> OverlapReport {
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for image in maps {
        let masks: Vec<Option<Vec<bool>>> = (0..class_of.len())
            .map(|j| active[j].then(|| binarize(&image[j], q)))
            .collect();
        for j in 0..class_of.len() {
            for k in j + 1..class_of.len() {
                if class_of[j] != class_of[k] {
                    continue;
                }
                if let (Some(a), Some(b)) = (&masks[j], &masks[k]) {
                    sums[class_of[j]] += mask_iou(a, b);
                    counts[class_of[j]] += 1;
                }
            }
        }
    }
    let pairs: usize = counts.iter().sum();
    OverlapReport {
        per_class: (0..num_classes).map(|c| (counts[c] > 0).then(|| sums[c] / counts[c] as f64)).collect(),
        mean: (pairs > 0).then(|| sums.iter().sum::<f64>() / pairs as f64),
        percentile: q,
        pairs,
    }
}

/// Mean pairwise IoU of same-class prototypes' binarized activation maps,
/// at feature resolution, pooled over pairs and images.
pub fn prototype_overlap<T: Real>(model: &SegModel<T>, samples: &[SegSample], q: f64) -> Result<OverlapReport> {
    let m = model.prototypes.len();
    let maps: Vec<Result<Vec<Vec<f64>>>> = samples
        .par_iter()
        .map(|s| {
            let out = model.head(&model.features(s)?)?;
            let n = out.hd * out.wd;
            Ok((0..m)
                .map(|j| {
                    if model.prototypes.active[j] {
                        out.activations[j * n..(j + 1) * n].iter().map(|v| v.to_f64().unwrap()).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect())
        })
        .collect();
    let maps = maps.into_iter().collect::<Result<Vec<_>>>()?;
    let p = &model.prototypes;
    Ok(overlap_from_maps(&maps, &p.class_of, &p.active, p.num_classes, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    /// `counts[c]` lists `(prototype, assigned points)` for the active
    /// prototypes of class `c`.
    pub counts: Vec<Vec<(usize, u64)>>,
    /// Entropy of each class's assignment distribution divided by the log
    /// of its active prototype count; `None` for classes without points.
    pub entropy: Vec<Option<f64>>,
}

impl Utilization {
    /// Mean normalized entropy over classes with points.
    pub fn mean_entropy(&self) -> Option<f64> {
        let v: Vec<f64> = self.entropy.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Normalized entropy of a count histogram over `k` bins; 0 when `k ≤ 1`.
pub fn normalized_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.len() <= 1 || total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

/// Labels at feature resolution with classes that have no active
/// prototype masked out.
fn assignable_labels<T: Real>(model: &SegModel<T>, s: &SegSample, hd: usize, wd: usize) -> Result<Vec<u8>> {
    let mut labels = downsample_labels(&s.labels, s.height, s.width, hd, wd)?;
    let p = &model.prototypes;
    for l in labels.iter_mut() {
        if *l != IGNORE && p.class_members(*l as usize).is_empty() {
            *l = IGNORE;
        }
    }
    Ok(labels)
}

/// How labelled feature points distribute over each class's prototypes.
/// Points of classes left without active prototypes are not counted.
pub fn utilization_histogram<T: Real>(model: &SegModel<T>, samples: &[SegSample]) -> Result<Utilization> {
    let p = &model.prototypes;
    let parts: Vec<Result<Vec<u64>>> = samples
        .par_iter()
        .map(|s| {
            let z = model.features(s)?;
            let labels = assignable_labels(model, s, z.hd, z.wd)?;
            let mut hist = vec![0u64; p.len()];
            for j in assign_prototypes(&z, &labels, p, model.epsilon())?.into_iter().flatten() {
                hist[j] += 1;
            }
            Ok(hist)
        })
        .collect();
    let mut hist = vec![0u64; p.len()];
    for part in parts {
        for (h, v) in hist.iter_mut().zip(part?) {
            *h += v;
        }
    }
    let counts: Vec<Vec<(usize, u64)>> = (0..p.num_classes)
        .map(|c| p.class_members(c).into_iter().map(|j| (j, hist[j])).collect())
        .collect();
    let entropy = counts
        .iter()
        .map(|cls| {
            let v: Vec<u64> = cls.iter().map(|&(_, n)| n).collect();
            (v.iter().sum::<u64>() > 0).then(|| normalized_entropy(&v))
        })
        .collect();
    Ok(Utilization { counts, entropy })
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub miou: MiouReport,
    pub pixel_error: f64,
    pub overlap: OverlapReport,
    pub utilization: Utilization,
    pub active_prototypes: usize,
}

pub fn evaluate<T: Real>(model: &SegModel<T>, samples: &[SegSample]) -> Result<EvalMetrics> {
    let acc = confusion_over(model, samples)?;
    Ok(EvalMetrics {
        miou: acc.miou()?,
        pixel_error: acc.pixel_error(),
        overlap: prototype_overlap(model, samples, 95.0)?,
        utilization: utilization_histogram(model, samples)?,
        active_prototypes: model.prototypes.active_count(),
    })
}

/// `metric,class,value` rows; `class` is `all` for aggregates and empty
/// values mark metrics that are undefined for that class.
pub fn metrics_csv(m: &EvalMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("metric,class,value\n");
    let _ = writeln!(s, "miou,all,{}", m.miou.mean);
    for (c, v) in m.miou.per_class.iter().enumerate() {
        let _ = writeln!(s, "iou,{c},{}", opt(*v));
    }
    let _ = writeln!(s, "pixel_error,all,{}", m.pixel_error);
    let _ = writeln!(s, "overlap,all,{}", opt(m.overlap.mean));
    for (c, v) in m.overlap.per_class.iter().enumerate() {
        let _ = writeln!(s, "overlap,{c},{}", opt(*v));
    }
    let _ = writeln!(s, "overlap_pairs,all,{}", m.overlap.pairs);
    let _ = writeln!(s, "utilization_entropy,all,{}", opt(m.utilization.mean_entropy()));
    for (c, v) in m.utilization.entropy.iter().enumerate() {
        let _ = writeln!(s, "utilization_entropy,{c},{}", opt(*v));
    }
    for (c, cls) in m.utilization.counts.iter().enumerate() {
        for &(j, n) in cls {
            let _ = writeln!(s, "assigned_points,{c}:{j},{n}");
        }
    }
    let _ = writeln!(s, "active_prototypes,all,{}", m.active_prototypes);
    s
}

/// Files written by [`export_explanations`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn paint(indices: &[Option<usize>], color: impl Fn(usize) -> [u8; 3]) -> Vec<u8> {
    indices
        .iter()
        .flat_map(|i| i.map_or([0, 0, 0], &color))
        .collect()
}

/// Writes `pred.ppm` (class colours), `assign.ppm` (most activated
/// same-class prototype per pixel, black where unassigned), one
/// min-max normalized `act_<j>.pgm` per active prototype (or only `only`)
/// and `manifest.txt`.
pub fn export_explanations<T: Real>(model: &SegModel<T>, sample: &SegSample, image_id: usize, out_dir: &Path, only: Option<usize>) -> Result<ExportSummary> {
    let p = &model.prototypes;
    let protos: Vec<usize> = match only {
        Some(j) if j < p.len() && p.active[j] => vec![j],
        Some(j) => {
            return Err(Error::invalid(format!(
                "prototype {j} is not active; valid ids: {:?}",
                p.active_indices()
            )))
        }
        None => p.active_indices(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (sample.height, sample.width);
    let z = model.features(sample)?;
    let out = model.head(&z)?;
    let mut summary = ExportSummary {
        files: Vec::new(),
        warnings: Vec::new(),
    };

    let pred = segment_logits(&out.logits, out.num_classes, out.hd, out.wd, h, w);
    let path = out_dir.join("pred.ppm");
    let classes: Vec<Option<usize>> = pred.iter().map(|&c| Some(c as usize)).collect();
    write_ppm(&path, w, h, &paint(&classes, |c| PALETTE[c % 20]))?;
    summary.files.push(path);

    let labels = assignable_labels(model, sample, z.hd, z.wd)?;
    let assigned = assign_prototypes(&z, &labels, p, model.epsilon())?;
    let full: Vec<Option<usize>> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            assigned[(y * z.hd / h) * z.wd + x * z.wd / w]
        })
        .collect();
    let path = out_dir.join("assign.ppm");
    write_ppm(&path, w, h, &paint(&full, prototype_color))?;
    summary.files.push(path);

    let n = out.hd * out.wd;
    for &j in &protos {
        let map = kernels::bilinear_forward(&out.activations[j * n..(j + 1) * n], 1, out.hd, out.wd, h, w);
        let vals: Vec<f64> = map.iter().map(|v| v.to_f64().unwrap()).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let grey: Vec<u8> = vals
            .iter()
            .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
            .collect();
        let path = out_dir.join(format!("act_{j}.pgm"));
        write_pgm(&path, w, h, &grey)?;
        summary.files.push(path);
    }

    let mut manifest = format!("image {image_id}\n");
    let projected = protos.iter().all(|&j| p.provenance[j].is_some());
    if !projected {
        summary
            .warnings
            .push("model is not projected; provenance omitted from the manifest".into());
    }
    for &j in &protos {
        let [r, g, b] = prototype_color(j);
        let _ = write!(manifest, "prototype {j} class {} color {r},{g},{b}", p.class_of[j]);
        if let (true, Some(pr)) = (projected, p.provenance[j]) {
            let _ = write!(manifest, " source_image {} row {} col {}", pr.image, pr.row, pr.col);
        }
        manifest.push('\n');
    }
    let path = out_dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    summary.files.push(path);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_example() {
        let mut acc = ConfusionAccumulator::new(2);
        acc.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let r = acc.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean - 0.5833).abs() < 1e-4);
        assert_eq!(acc.pixel_error(), 0.25);
        assert_eq!(pixel_error(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap().value, 0.25);
    }

    #[test]
    fn miou_edge_cases() {
        let mut acc = ConfusionAccumulator::new(3);
        acc.add(&[0, 1, IGNORE], &[0, 1, 2]).unwrap();
        let r = acc.miou().unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class[2], None);
        assert!(ConfusionAccumulator::new(2).miou().is_err());
        let e = pixel_error(&[1, 1], &[IGNORE, IGNORE]).unwrap();
        assert_eq!((e.value, e.empty), (0.0, true));
        assert!(acc.add(&[3], &[0]).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 95.0), 18.05);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 100.0), 19.0);
        assert_eq!(binarize(&v, 95.0).iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn overlap_examples() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| (39 - i) as f64).collect();
        let class_of = [0, 0];
        let active = [true, true];
        let same = overlap_from_maps(&[vec![a.clone(), a.clone()]], &class_of, &active, 1, 95.0);
        assert_eq!(same.mean, Some(1.0));
        let disjoint = overlap_from_maps(&[vec![a.clone(), b]], &class_of, &active, 1, 95.0);
        assert_eq!(disjoint.mean, Some(0.0));
        // top-2 masks {3, 4} and {2, 4}: 1/3
        let d = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let c = vec![0.0, 0.0, 5.0, 0.0, 5.0];
        let half = overlap_from_maps(&[vec![d, c]], &class_of, &active, 1, 75.0);
        assert!((half.mean.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let lone = overlap_from_maps(&[vec![a.clone(), a]], &class_of, &[true, false], 1, 95.0);
        assert_eq!((lone.mean, lone.pairs), (None, 0));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(normalized_entropy(&[12]), 0.0);
        assert!((normalized_entropy(&[5, 5, 5]) - 1.0).abs() < 1e-15);
        assert_eq!(normalized_entropy(&[7, 0]), 0.0);
    }
}
