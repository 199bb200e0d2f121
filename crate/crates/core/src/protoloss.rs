//! Training objectives: pointwise cross-entropy, the Jeffrey-similarity
//! diversity loss over same-class prototypes, and the L1 penalty on
//! off-class last-layer weights.
//!
//! The plain functions work on `f64` values and serve as references; the
//! `*_var` functions build the same quantities on a [`Tape`].

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::{lit, Real, Tape, Tensor, Var};
use crate::segmodel::{FeatureMap, ForwardVars, LastLayer, PrototypeSet};
use crate::synthdata::IGNORE;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the diversity loss.
    pub lambda_j: f64,
    /// Weight of the off-class L1 penalty.
    pub lambda_l1: f64,
    pub epsilon: f64,
    /// Softmax over `−d²` instead of `d²` when building distance vectors.
    pub negate_distances: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_j: 0.25,
            lambda_l1: 1e-4,
            epsilon: 1e-4,
            negate_distances: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_j >= 0.0) || !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// A strictly positive probability vector, kept together with its
/// logarithm so divergences stay finite when entries are tiny.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
    logs: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("probability vector entries must be positive"));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probability vector sums to {s}")));
        }
        let logs = values.iter().map(|v| v.ln()).collect();
        Ok(ProbVector { values, logs })
    }

    /// Softmax of `scores`.
    pub fn softmax(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("softmax of an empty vector"));
        }
        Ok(ProbVector {
            values: kernels::softmax_rows(scores, scores.len()),
            logs: kernels::log_softmax_rows(scores, scores.len()),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn same_len(u: &ProbVector, v: &ProbVector) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "divergence",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(())
}

/// `KL(U‖V) = Σ u log(u/v)`.
pub fn kl_divergence(u: &ProbVector, v: &ProbVector) -> Result<f64> {
    same_len(u, v)?;
    Ok((0..u.len()).map(|i| u.values[i] * (u.logs[i] - v.logs[i])).sum::<f64>().max(0.0))
}

/// `½·KL(U‖V) + ½·KL(V‖U) = ½·Σ (u−v)(log u − log v)`.
pub fn jeffrey_divergence(u: &ProbVector, v: &ProbVector) -> Result<f64> {
    same_len(u, v)?;
    Ok(0.5
        * (0..u.len())
            .map(|i| (u.values[i] - v.values[i]) * (u.logs[i] - v.logs[i]))
            .sum::<f64>())
}

/// Mean of `exp(−D_J)` over all unordered pairs.
pub fn jeffrey_similarity(dists: &[ProbVector]) -> Result<f64> {
    let l = dists.len();
    if l < 2 {
        return Err(Error::invalid("Jeffrey similarity needs at least two distributions"));
    }
    let mut total = 0.0;
    for i in 0..l {
        for j in i + 1..l {
            total += (-jeffrey_divergence(&dists[i], &dists[j])?).exp();
        }
    }
    Ok(total / (l * (l - 1) / 2) as f64)
}

/// Softmax over the squared distances from `p` to every class-`c` feature
/// point, in row-major point order.
pub fn distance_vector<T: Real>(z: &FeatureMap<T>, labels_d: &[u8], c: usize, p: &[T], negate: bool) -> Result<ProbVector> {
    let scores: Vec<f64> = (0..z.points())
        .filter(|&i| labels_d[i] as usize == c && labels_d[i] != IGNORE)
        .map(|i| {
            let d: f64 = z
                .point(i)
                .iter()
                .zip(p)
                .map(|(&a, &b)| {
                    let t = (a - b).to_f64().unwrap();
                    t * t
                })
                .sum();
            if negate {
                -d
            } else {
                d
            }
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::invalid(format!("class {c} has no feature points")));
    }
    ProbVector::softmax(&scores)
}

/// Jeffrey similarity of the distance vectors of `members` (prototype
/// indices of class `c`); 0 when there are fewer than two.
pub fn diversity_loss_class<T: Real>(z: &FeatureMap<T>, labels_d: &[u8], c: usize, proto: &PrototypeSet<T>, members: &[usize], negate: bool) -> Result<f64> {
    if !labels_d.iter().any(|&l| l as usize == c && l != IGNORE) {
        return Err(Error::invalid(format!("class {c} is absent from the label map")));
    }
    if members.len() < 2 {
        return Ok(0.0);
    }
    let dists = members
        .iter()
        .map(|&j| distance_vector(z, labels_d, c, proto.vector(j), negate))
        .collect::<Result<Vec<_>>>()?;
    jeffrey_similarity(&dists)
}

/// Mean of the class losses over the classes present in `labels_d`.
pub fn total_diversity_loss<T: Real>(z: &FeatureMap<T>, labels_d: &[u8], proto: &PrototypeSet<T>, negate: bool) -> Result<f64> {
    let present = present_classes(labels_d, proto.num_classes)?;
    if present.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &present {
        total += diversity_loss_class(z, labels_d, c, proto, &proto.class_members(c), negate)?;
    }
    Ok(total / present.len() as f64)
}

/// Mean over non-IGNORE points of `−log softmax(logits)[label]`.
pub fn cross_entropy_map(logits: &[f64], labels: &[u8], num_classes: usize) -> Result<f64> {
    if logits.len() != labels.len() * num_classes {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_map",
            lhs: vec![logits.len()],
            rhs: vec![labels.len(), num_classes],
        });
    }
    let logp = kernels::log_softmax_rows(logits, num_classes);
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: num_classes,
            });
        }
        total -= logp[i * num_classes + l as usize];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `Σ_c Σ_{j ∉ P_c} |w_h[j][c]|`.
pub fn off_class_l1<T: Real>(layer: &LastLayer<T>, proto: &PrototypeSet<T>) -> f64 {
    let c = proto.num_classes;
    let w = layer.weights.data();
    let mut s = 0.0;
    for j in 0..proto.len() {
        for k in 0..c {
            if !(proto.active[j] && proto.class_of[j] == k) {
                s += w[j * c + k].to_f64().unwrap().abs();
            }
        }
    }
    s
}

fn present_classes(labels_d: &[u8], num_classes: usize) -> Result<Vec<usize>> {
    let mut seen = vec![false; num_classes];
    for &l in labels_d {
        if l == IGNORE {
            continue;
        }
        *seen.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
            label: l as usize,
            classes: num_classes,
        })? = true;
    }
    Ok((0..num_classes).filter(|&c| seen[c]).collect())
}

/// Cross-entropy over the forward pass logits.
pub fn cross_entropy_var<T: Real>(tape: &mut Tape<T>, logits: Var, labels_d: &[u8]) -> Result<Var> {
    let targets: Vec<Option<usize>> = labels_d
        .iter()
        .map(|&l| (l != IGNORE).then_some(l as usize))
        .collect();
    tape.cross_entropy(logits, &targets)
}

/// Diversity loss built from the `N×A` distance node of a forward pass.
/// `active[a]` is the prototype behind column `a`.
pub fn diversity_loss_var<T: Real>(tape: &mut Tape<T>, dist: Var, active: &[usize], class_of: &[usize], num_classes: usize, labels_d: &[u8], negate: bool) -> Result<Var> {
    let present = present_classes(labels_d, num_classes)?;
    let mut terms = Vec::new();
    for &c in &present {
        let cols: Vec<usize> = (0..active.len()).filter(|&a| class_of[active[a]] == c).collect();
        if cols.len() < 2 {
            continue;
        }
        let pts: Vec<usize> = (0..labels_d.len()).filter(|&i| labels_d[i] as usize == c).collect();
        let (k, n) = (cols.len(), pts.len());
        let g = tape.gather2d(dist, &pts, &cols)?;
        let mut scores = tape.transpose(g)?;
        if negate {
            scores = tape.neg(scores)?;
        }
        let log_u = tape.log_softmax_rows(scores)?;
        let u = tape.exp(log_u)?;
        // one row per pair (i, j), +1 at i and −1 at j
        let pairs = k * (k - 1) / 2;
        let mut a = vec![T::zero(); pairs * k];
        let mut r = 0;
        for i in 0..k {
            for j in i + 1..k {
                a[r * k + i] = T::one();
                a[r * k + j] = -T::one();
                r += 1;
            }
        }
        let a = tape.constant(Tensor::new(vec![pairs, k], a)?);
        let du = tape.matmul(a, u)?;
        let dl = tape.matmul(a, log_u)?;
        let prod = tape.mul(du, dl)?;
        let ones = tape.constant(Tensor::full(&[n, 1], lit(-0.5)));
        let neg_dj = tape.matmul(prod, ones)?;
        let sim = tape.exp(neg_dj)?;
        terms.push(tape.mean(sim)?);
    }
    if terms.is_empty() {
        return Ok(tape.scalar(T::zero()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    // classes present but with fewer than two prototypes count as zeros
    tape.scale(total, lit(1.0 / present.len() as f64))
}

/// `L_CE + λ_J·L_J` for one image.
pub fn joint_loss_var<T: Real>(tape: &mut Tape<T>, fw: &ForwardVars, labels_d: &[u8], proto: &PrototypeSet<T>, cfg: &LossConfig) -> Result<Var> {
    if labels_d.len() != fw.hd * fw.wd {
        return Err(Error::ShapeMismatch {
            op: "joint_loss",
            lhs: vec![fw.hd, fw.wd],
            rhs: vec![labels_d.len()],
        });
    }
    let ce = cross_entropy_var(tape, fw.logits, labels_d)?;
    if cfg.lambda_j == 0.0 {
        return Ok(ce);
    }
    let lj = diversity_loss_var(tape, fw.dist, &fw.active, &proto.class_of, proto.num_classes, labels_d, cfg.negate_distances)?;
    let weighted = tape.scale(lj, lit(cfg.lambda_j))?;
    tape.add(ce, weighted)
}

/// `λ_L1·Σ_c Σ_{j ∉ P_c} |w_h[j][c]|` on the last-layer node `w`.
pub fn l1_penalty_var<T: Real>(tape: &mut Tape<T>, w: Var, proto: &PrototypeSet<T>, lambda_l1: f64) -> Result<Var> {
    let c = proto.num_classes;
    let mask: Vec<T> = (0..proto.len() * c)
        .map(|i| {
            let (j, k) = (i / c, i % c);
            if proto.active[j] && proto.class_of[j] == k {
                T::zero()
            } else {
                T::one()
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(vec![proto.len(), c], mask)?);
    let abs = tape.abs(w)?;
    let off = tape.mul(abs, mask)?;
    let s = tape.sum(off)?;
    tape.scale(s, lit(lambda_l1))
}

/// `joint + λ_L1·L1`.
pub fn finetune_loss_var<T: Real>(tape: &mut Tape<T>, joint: Var, w: Var, proto: &PrototypeSet<T>, cfg: &LossConfig) -> Result<Var> {
    let l1 = l1_penalty_var(tape, w, proto, cfg.lambda_l1)?;
    tape.add(joint, l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::init_last_layer;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let (a, b) = (pv(&[0.9, 0.1]), pv(&[0.1, 0.9]));
        assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
        assert!((kl_divergence(&a, &b).unwrap() - 0.8 * 9f64.ln()).abs() < 1e-12);
        assert!((kl_divergence(&a, &b).unwrap() - 1.7578).abs() < 1e-4);
        let c = pv(&[0.5, 0.5]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&c, &a).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.5108).abs() < 1e-4);
        assert!(kl_divergence(&a, &pv(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn jeffrey_examples() {
        let (a, b) = (pv(&[0.9, 0.1]), pv(&[0.1, 0.9]));
        assert_eq!(jeffrey_divergence(&a, &a).unwrap(), 0.0);
        let d = jeffrey_divergence(&a, &b).unwrap();
        assert!((d - 1.7578).abs() < 1e-4);
        assert_eq!(d, jeffrey_divergence(&b, &a).unwrap());
        assert!((jeffrey_similarity(&[a.clone(), b.clone()]).unwrap() - 0.1725).abs() < 1e-4);
        assert_eq!(jeffrey_similarity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 1.0);
        assert!(jeffrey_similarity(&[a]).is_err());
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.0, 0.0]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        let s = ProbVector::softmax(&[1.0, 0.0]).unwrap();
        assert!((s.values()[0] - 0.7311).abs() < 1e-4);
        assert!((s.values()[1] - 0.2689).abs() < 1e-4);
    }

    fn toy_map() -> (FeatureMap<f64>, Vec<u8>) {
        let z = FeatureMap {
            hd: 2,
            wd: 2,
            dim: 2,
            data: vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 3.0, 3.0],
        };
        (z, vec![1, 1, 0, IGNORE])
    }

    #[test]
    fn distance_vector_examples() {
        let (z, labels) = toy_map();
        // two class-1 points equidistant from the origin
        let v = distance_vector(&z, &labels, 1, &[0.0, 0.0], false).unwrap();
        assert_eq!(v.values(), &[0.5, 0.5]);
        let v = distance_vector(&z, &labels, 1, &[-1.0, 0.0], false).unwrap();
        let want = ProbVector::softmax(&[4.0, 0.0]).unwrap();
        assert_eq!(v, want);
        // squared distances (1, 0) → larger mass on the farther point
        let z2 = FeatureMap {
            hd: 1,
            wd: 2,
            dim: 1,
            data: vec![1.0, 0.0],
        };
        let v = distance_vector(&z2, &[2, 2], 2, &[0.0], false).unwrap();
        assert!((v.values()[0] - 0.7311).abs() < 1e-4 && (v.values()[1] - 0.2689).abs() < 1e-4);
        assert_eq!(distance_vector(&z, &labels, 0, &[5.0, 5.0], false).unwrap().values(), &[1.0]);
        assert!(distance_vector(&z, &labels, 2, &[5.0, 5.0], false).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let zeros = vec![0.0; 6];
        assert!((cross_entropy_map(&zeros, &[0, 1, 1], 2).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_map(&[1000.0, 0.0], &[0], 2).unwrap() < 1e-300);
        assert_eq!(cross_entropy_map(&zeros, &[IGNORE; 3], 2).unwrap(), 0.0);
        assert!(matches!(
            cross_entropy_map(&zeros, &[0, 2, 1], 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn l1_at_init() {
        let proto = crate::segmodel::init_prototypes::<f64>(3, 10, 4, 0).unwrap();
        let layer = init_last_layer(&proto);
        assert_eq!(off_class_l1(&layer, &proto), 30.0);
        let mut tape = Tape::new();
        let w = tape.leaf(layer.weights.clone(), true);
        let l = l1_penalty_var(&mut tape, w, &proto, 1e-4).unwrap();
        assert!((tape.value(l).item() - 30.0 * 1e-4).abs() < 1e-15);
        let zero = l1_penalty_var(&mut tape, w, &proto, 0.0).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }
}
