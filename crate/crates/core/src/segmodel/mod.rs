//! The segmentation network: a small convolutional backbone producing a
//! `D`-dimensional feature map, a prototype layer scoring every feature
//! point against every prototype, and a linear last layer mapping prototype
//! activations to class logits.

pub mod checkpoint;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::{lit, Real, Tape, Tensor, Var};
use crate::seeding::{mix, rng_for};
use crate::synthdata::{SegSample, IGNORE};
use checkpoint::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneVariant {
    Plain,
    /// Adds a strided 1×1 shortcut from the first stage into the last one.
    Skip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output channels of each 3×3 stage.
    pub widths: Vec<usize>,
    /// Total stride `s`; the feature map is `H/s × W/s`.
    pub downsample: usize,
    /// Feature dimension `D`.
    pub out_dim: usize,
}

impl BackboneConfig {
    /// Stage strides: 1 for the first stage, then 2 until the total stride
    /// is reached, then 1.
    pub fn strides(&self) -> Result<Vec<usize>> {
        let s = self.downsample;
        if s == 0 || !s.is_power_of_two() {
            return Err(Error::Config(format!("downsample must be a power of two, got {s}")));
        }
        let halvings = s.trailing_zeros() as usize;
        if halvings + 1 > self.widths.len() {
            return Err(Error::Config(format!(
                "downsample {s} needs at least {} stages, got {}",
                halvings + 1,
                self.widths.len()
            )));
        }
        Ok((0..self.widths.len())
            .map(|i| if (1..=halvings).contains(&i) { 2 } else { 1 })
            .collect())
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.out_dim < 2 {
            return Err(Error::Config(format!("feature dimension must be >= 2, got {}", self.out_dim)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.variant == BackboneVariant::Skip && self.widths.len() < 2 {
            return Err(Error::Config("the skip backbone needs at least two stages".into()));
        }
        self.strides()?;
        if !height.is_multiple_of(self.downsample) || !width.is_multiple_of(self.downsample) {
            return Err(Error::Config(format!(
                "downsample {} does not divide {height}x{width}",
                self.downsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub protos_per_class: usize,
    /// ε of the log similarity.
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.backbone.validate(height, width)?;
        if self.num_classes == 0 || self.num_classes > IGNORE as usize {
            return Err(Error::Config(format!("bad class count {}", self.num_classes)));
        }
        if self.protos_per_class == 0 {
            return Err(Error::Config("protos_per_class must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Which optimizer/freezing group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// 3×3 stages and the skip shortcut.
    Core,
    /// Final 1×1 projection to `D`.
    Projection,
    Prototypes,
    LastLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f64> {
    pub config: BackboneConfig,
    pub params: Vec<NamedParam<T>>,
}

fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| lit::<T>(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Real> Backbone<T> {
    /// He-normal kernels, zero biases. The input has 3 channels.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.strides()?;
        let mut rng = rng_for(&[seed]);
        let mut params = Vec::new();
        let mut c_in = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            params.push(NamedParam {
                name: format!("backbone.conv{i}.weight"),
                group: ParamGroup::Core,
                value: normal_tensor(&mut rng, &[w, c_in, 3, 3], (2.0 / (c_in * 9) as f64).sqrt()),
            });
            params.push(NamedParam {
                name: format!("backbone.conv{i}.bias"),
                group: ParamGroup::Core,
                value: Tensor::zeros(&[w]),
            });
            c_in = w;
        }
        if config.variant == BackboneVariant::Skip {
            let (first, last) = (config.widths[0], *config.widths.last().unwrap());
            params.push(NamedParam {
                name: "backbone.skip.weight".into(),
                group: ParamGroup::Core,
                value: normal_tensor(&mut rng, &[last, first, 1, 1], (1.0 / first as f64).sqrt()),
            });
        }
        params.push(NamedParam {
            name: "backbone.proj.weight".into(),
            group: ParamGroup::Projection,
            value: normal_tensor(&mut rng, &[config.out_dim, c_in, 1, 1], (1.0 / c_in as f64).sqrt()),
        });
        params.push(NamedParam {
            name: "backbone.proj.bias".into(),
            group: ParamGroup::Projection,
            value: Tensor::zeros(&[config.out_dim]),
        });
        Ok(Backbone {
            config: config.clone(),
            params,
        })
    }

    /// `x[3×H×W]` → feature map `[D×H/s×W/s]`. `vars` are the tape handles
    /// of [`Self::params`], in order.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let strides = self.config.strides()?;
        let n = strides.len();
        let mut h = x;
        let mut first = None;
        for (i, &stride) in strides.iter().enumerate() {
            let conv = tape.conv2d(h, vars[2 * i], stride, 1)?;
            let mut pre = tape.channel_bias(conv, vars[2 * i + 1])?;
            if i == n - 1 && self.config.variant == BackboneVariant::Skip {
                let src: Var = first.expect("skip source recorded");
                let shortcut = tape.conv2d(src, vars[2 * n], self.config.downsample / strides[0], 0)?;
                pre = tape.add(pre, shortcut)?;
            }
            h = tape.relu(pre)?;
            if i == 0 {
                first = Some(h);
            }
        }
        let k = vars.len();
        let proj = tape.conv2d(h, vars[k - 2], 1, 0)?;
        tape.channel_bias(proj, vars[k - 1])
    }
}

/// Where a prototype was projected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T: Real = f64> {
    /// `M×D`.
    pub vectors: Tensor<T>,
    pub class_of: Vec<usize>,
    pub active: Vec<bool>,
    pub provenance: Vec<Option<Provenance>>,
    pub num_classes: usize,
}

impl<T: Real> PrototypeSet<T> {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, j: usize) -> &[T] {
        let d = self.dim();
        &self.vectors.data()[j * d..(j + 1) * d]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.active[j]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// `P_c`: active prototypes of class `c`, ascending.
    pub fn class_members(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.active[j] && self.class_of[j] == c).collect()
    }

    pub fn is_projected(&self) -> bool {
        self.active_indices().iter().all(|&j| self.provenance[j].is_some())
    }
}

/// `M = C·per_class` prototypes drawn uniformly from `[0,1)^D`; prototypes
/// `c·per_class .. (c+1)·per_class` belong to class `c`.
pub fn init_prototypes<T: Real>(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<PrototypeSet<T>> {
    if per_class == 0 || num_classes == 0 || dim == 0 {
        return Err(Error::invalid("init_prototypes: counts and dimension must be positive"));
    }
    let m = num_classes * per_class;
    let mut rng = rng_for(&[seed]);
    let data = (0..m * dim).map(|_| lit::<T>(rng.gen::<f64>())).collect();
    Ok(PrototypeSet {
        vectors: Tensor::new(vec![m, dim], data)?,
        class_of: (0..m).map(|j| j / per_class).collect(),
        active: vec![true; m],
        provenance: vec![None; m],
        num_classes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LastLayer<T: Real = f64> {
    /// `M×C`.
    pub weights: Tensor<T>,
}

impl<T: Real> LastLayer<T> {
    pub fn zero_row(&mut self, j: usize) {
        let c = self.weights.shape()[1];
        self.weights.data_mut()[j * c..(j + 1) * c].iter_mut().for_each(|v| *v = T::zero());
    }
}

/// 1 for the prototype's own class, −0.5 elsewhere.
pub fn init_last_layer<T: Real>(proto: &PrototypeSet<T>) -> LastLayer<T> {
    let c = proto.num_classes;
    let mut w = Vec::with_capacity(proto.len() * c);
    for &own in &proto.class_of {
        w.extend((0..c).map(|k| if k == own { T::one() } else { lit(-0.5) }));
    }
    LastLayer {
        weights: Tensor::new(vec![proto.len(), c], w).expect("shape matches"),
    }
}

/// `log((‖z−p‖² + 1) / (‖z−p‖² + ε))`.
pub fn similarity<T: Real>(z: &[T], p: &[T], eps: T) -> T {
    let d: T = z.iter().zip(p).map(|(&a, &b)| (a - b) * (a - b)).sum();
    activation(d, eps)
}

#[inline]
pub(crate) fn activation<T: Real>(sq_dist: T, eps: T) -> T {
    (sq_dist + T::one()).ln() - (sq_dist + eps).ln()
}

/// Backbone output stored point-major: point `i·wd + k` occupies
/// `data[(i·wd + k)·dim ..][..dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f64> {
    pub hd: usize,
    pub wd: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn points(&self) -> usize {
        self.hd * self.wd
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub hd: usize,
    pub wd: usize,
    pub num_classes: usize,
    /// `H_d·W_d × C`, point-major.
    pub logits: Vec<T>,
    /// `M × H_d·W_d`. Rows of inactive prototypes are zero.
    pub activations: Vec<T>,
}

/// Prototype activations and class logits for every feature point.
/// Inactive prototypes contribute nothing.
pub fn head_forward<T: Real>(z: &FeatureMap<T>, proto: &PrototypeSet<T>, layer: &LastLayer<T>, eps: T) -> Result<HeadOutput<T>> {
    if proto.dim() != z.dim {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            lhs: vec![z.points(), z.dim],
            rhs: proto.vectors.shape().to_vec(),
        });
    }
    let active = proto.active_indices();
    if active.is_empty() {
        return Err(Error::NoActivePrototypes);
    }
    let (n, m, c, d) = (z.points(), proto.len(), proto.num_classes, z.dim);
    let mut pa = Vec::with_capacity(active.len() * d);
    let mut wa = Vec::with_capacity(active.len() * c);
    for &j in &active {
        pa.extend_from_slice(proto.vector(j));
        wa.extend_from_slice(&layer.weights.data()[j * c..(j + 1) * c]);
    }
    let dist = kernels::sq_dist(&z.data, &pa, n, active.len(), d);
    let act: Vec<T> = dist.iter().map(|&v| activation(v, eps)).collect();
    let mut logits = vec![T::zero(); n * c];
    kernels::matmul_into(&act, &wa, &mut logits, n, active.len(), c, false, false, false);
    let mut activations = vec![T::zero(); m * n];
    for (a, &j) in active.iter().enumerate() {
        for i in 0..n {
            activations[j * n + i] = act[i * active.len() + a];
        }
    }
    Ok(HeadOutput {
        hd: z.hd,
        wd: z.wd,
        num_classes: c,
        logits,
        activations,
    })
}

/// Bilinear (align-corners) resize of point-major `hd×wd×C` logits to
/// `h×w`, then per-pixel argmax. Ties go to the lowest class id.
pub fn segment_logits<T: Real>(logits: &[T], c: usize, hd: usize, wd: usize, h: usize, w: usize) -> Vec<u8> {
    let n = hd * wd;
    let mut planes = vec![T::zero(); c * n];
    for i in 0..n {
        for k in 0..c {
            planes[k * n + i] = logits[i * c + k];
        }
    }
    let up = kernels::bilinear_forward(&planes, c, hd, wd, h, w);
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if up[k * hw + p] > up[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Image as a `3×H×W` tensor centred on zero.
pub fn image_tensor<T: Real>(sample: &SegSample) -> Tensor<T> {
    let hw = sample.height * sample.width;
    let mut data = vec![T::zero(); 3 * hw];
    for (p, px) in sample.image.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * hw + p] = lit::<T>(px[ch] as f64 - 0.5);
        }
    }
    Tensor::new(vec![3, sample.height, sample.width], data).expect("shape matches")
}

/// Tape handles of every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<Var>,
    pub prototypes: Var,
    pub last_layer: Var,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub hd: usize,
    pub wd: usize,
    /// Active prototype indices; column `a` of `dist`/`activations` is
    /// prototype `active[a]`.
    pub active: Vec<usize>,
    /// `N×D`.
    pub features: Var,
    /// `N×A` squared distances.
    pub dist: Var,
    /// `N×A`.
    pub activations: Var,
    /// `N×C`.
    pub logits: Var,
}

/// Identifies one parameter tensor of a [`SegModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Backbone(usize),
    Prototypes,
    LastLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Real = f64> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub prototypes: PrototypeSet<T>,
    pub last_layer: LastLayer<T>,
}

impl<T: Real> SegModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::init(&config.backbone, mix(&[seed, 1]))?;
        let prototypes = init_prototypes(
            config.num_classes,
            config.protos_per_class,
            config.backbone.out_dim,
            mix(&[seed, 2]),
        )?;
        let last_layer = init_last_layer(&prototypes);
        Ok(SegModel {
            config: config.clone(),
            backbone,
            prototypes,
            last_layer,
        })
    }

    pub fn epsilon(&self) -> T {
        lit(self.config.epsilon)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.backbone.params.len()).map(ParamId::Backbone).collect();
        ids.push(ParamId::Prototypes);
        ids.push(ParamId::LastLayer);
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        match id {
            ParamId::Backbone(i) => &self.backbone.params[i].value,
            ParamId::Prototypes => &self.prototypes.vectors,
            ParamId::LastLayer => &self.last_layer.weights,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        match id {
            ParamId::Backbone(i) => &mut self.backbone.params[i].value,
            ParamId::Prototypes => &mut self.prototypes.vectors,
            ParamId::LastLayer => &mut self.last_layer.weights,
        }
    }

    pub fn param_group(&self, id: ParamId) -> ParamGroup {
        match id {
            ParamId::Backbone(i) => self.backbone.params[i].group,
            ParamId::Prototypes => ParamGroup::Prototypes,
            ParamId::LastLayer => ParamGroup::LastLayer,
        }
    }

    pub fn param_name(&self, id: ParamId) -> String {
        match id {
            ParamId::Backbone(i) => self.backbone.params[i].name.clone(),
            ParamId::Prototypes => "prototypes.vectors".into(),
            ParamId::LastLayer => "last_layer.weights".into(),
        }
    }

    /// Registers every parameter as a tape leaf; `trainable` decides which
    /// groups require gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> ModelVars {
        let backbone = self
            .backbone
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        ModelVars {
            backbone,
            prototypes: tape.leaf(self.prototypes.vectors.clone(), trainable(ParamGroup::Prototypes)),
            last_layer: tape.leaf(self.last_layer.weights.clone(), trainable(ParamGroup::LastLayer)),
        }
    }

    fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let s = self.config.backbone.downsample;
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image {height}x{width} is not divisible by the backbone stride {s}"
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass over one image `[3×H×W]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ModelVars, image: &Tensor<T>) -> Result<ForwardVars> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(format!("expected a 3×H×W image, got {s:?}")));
        }
        self.check_image(s[1], s[2])?;
        let active = self.prototypes.active_indices();
        if active.is_empty() {
            return Err(Error::NoActivePrototypes);
        }
        let x = tape.constant(image.clone());
        let fmap = self.backbone.forward(tape, &vars.backbone, x)?;
        let fs = tape.value(fmap).shape().to_vec();
        let (d, hd, wd) = (fs[0], fs[1], fs[2]);
        let flat = tape.reshape(fmap, &[d, hd * wd])?;
        let features = tape.transpose(flat)?;
        let protos = tape.gather_rows(vars.prototypes, &active)?;
        let dist = tape.sq_dist(features, protos)?;
        let num = tape.add_scalar(dist, T::one())?;
        let den = tape.add_scalar(dist, self.epsilon())?;
        let (ln_num, ln_den) = (tape.log(num)?, tape.log(den)?);
        let activations = tape.sub(ln_num, ln_den)?;
        let w = tape.gather_rows(vars.last_layer, &active)?;
        let logits = tape.matmul(activations, w)?;
        Ok(ForwardVars {
            hd,
            wd,
            active,
            features,
            dist,
            activations,
            logits,
        })
    }

    pub fn features(&self, sample: &SegSample) -> Result<FeatureMap<T>> {
        self.check_image(sample.height, sample.width)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .backbone
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let x = tape.constant(image_tensor(sample));
        let fmap = self.backbone.forward(&mut tape, &vars, x)?;
        let t = tape.value(fmap);
        let (d, hd, wd) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let n = hd * wd;
        let mut data = vec![T::zero(); n * d];
        for ch in 0..d {
            for i in 0..n {
                data[i * d + ch] = t.data()[ch * n + i];
            }
        }
        Ok(FeatureMap { hd, wd, dim: d, data })
    }

    pub fn head(&self, z: &FeatureMap<T>) -> Result<HeadOutput<T>> {
        head_forward(z, &self.prototypes, &self.last_layer, self.epsilon())
    }

    /// Per-pixel class map at image resolution.
    pub fn predict_segmentation(&self, sample: &SegSample) -> Result<Vec<u8>> {
        let out = self.head(&self.features(sample)?)?;
        Ok(segment_logits(&out.logits, out.num_classes, out.hd, out.wd, sample.height, sample.width))
    }

    /// Activation of prototype `j` upsampled to image resolution, row-major.
    pub fn prototype_activation_map(&self, sample: &SegSample, j: usize) -> Result<Vec<T>> {
        if j >= self.prototypes.len() || !self.prototypes.active[j] {
            return Err(Error::invalid(format!("prototype {j} is not an active prototype")));
        }
        let out = self.head(&self.features(sample)?)?;
        let n = out.hd * out.wd;
        let row = &out.activations[j * n..(j + 1) * n];
        Ok(kernels::bilinear_forward(row, 1, out.hd, out.wd, sample.height, sample.width))
    }

    /// Appends parameters and prototype bookkeeping under their names.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        for p in &self.backbone.params {
            ck.push_real(&p.name, &p.value);
        }
        let pr = &self.prototypes;
        ck.push_real("prototypes.vectors", &pr.vectors);
        let class_of: Vec<u32> = pr.class_of.iter().map(|&c| c as u32).collect();
        ck.push_u32("prototypes.class_of", &[pr.len()], &class_of);
        let active: Vec<u8> = pr.active.iter().map(|&a| a as u8).collect();
        ck.push_u8("prototypes.active", &active);
        let prov: Vec<i64> = pr
            .provenance
            .iter()
            .flat_map(|p| match p {
                Some(p) => [p.image as i64, p.row as i64, p.col as i64],
                None => [-1, -1, -1],
            })
            .collect();
        ck.push_i64("prototypes.provenance", &[pr.len(), 3], &prov);
        ck.push_real("last_layer.weights", &self.last_layer.weights);
    }

    /// Rebuilds a model for `config` from checkpoint tensors, checking every
    /// shape against the configuration.
    pub fn from_checkpoint(config: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = SegModel::<T>::new(config, 0)?;
        let mismatch = |name: &str, want: &[usize], got: &[usize]| {
            Error::Checkpoint(format!("tensor `{name}` has shape {got:?}, config expects {want:?}"))
        };
        for p in &mut model.backbone.params {
            let t = ck.real::<T>(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(mismatch(&p.name, p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        let m = model.prototypes.len();
        let vectors = ck.real::<T>("prototypes.vectors")?;
        if vectors.shape() != model.prototypes.vectors.shape() {
            return Err(mismatch("prototypes.vectors", model.prototypes.vectors.shape(), vectors.shape()));
        }
        let class_of = ck.u32s("prototypes.class_of")?;
        let active = ck.u8s("prototypes.active")?;
        let prov = ck.i64s("prototypes.provenance")?;
        if class_of.len() != m || active.len() != m || prov.len() != 3 * m {
            return Err(Error::Checkpoint("prototype bookkeeping does not match the prototype count".into()));
        }
        if class_of.iter().any(|&c| c as usize >= config.num_classes) {
            return Err(Error::Checkpoint("prototype class out of range".into()));
        }
        let weights = ck.real::<T>("last_layer.weights")?;
        if weights.shape() != model.last_layer.weights.shape() {
            return Err(mismatch("last_layer.weights", model.last_layer.weights.shape(), weights.shape()));
        }
        model.prototypes = PrototypeSet {
            vectors,
            class_of: class_of.iter().map(|&c| c as usize).collect(),
            active: active.iter().map(|&a| a != 0).collect(),
            provenance: prov
                .chunks_exact(3)
                .map(|p| {
                    (p[0] >= 0).then(|| Provenance {
                        image: p[0] as usize,
                        row: p[1] as usize,
                        col: p[2] as usize,
                    })
                })
                .collect(),
            num_classes: config.num_classes,
        };
        model.last_layer = LastLayer { weights };
        Ok(model)
    }
}

/// For each labelled feature point, the most activated active prototype of
/// its ground-truth class (lowest index on ties). `None` at IGNORE points.
pub fn assign_prototypes<T: Real>(z: &FeatureMap<T>, labels_d: &[u8], proto: &PrototypeSet<T>, eps: T) -> Result<Vec<Option<usize>>> {
    if labels_d.len() != z.points() {
        return Err(Error::ShapeMismatch {
            op: "assign_prototypes",
            lhs: vec![z.hd, z.wd],
            rhs: vec![labels_d.len()],
        });
    }
    if proto.dim() != z.dim {
        return Err(Error::ShapeMismatch {
            op: "assign_prototypes",
            lhs: vec![z.dim],
            rhs: vec![proto.dim()],
        });
    }
    let members: Vec<Vec<usize>> = (0..proto.num_classes).map(|c| proto.class_members(c)).collect();
    labels_d
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == IGNORE {
                return Ok(None);
            }
            let c = l as usize;
            let cands = members.get(c).ok_or(Error::LabelOutOfRange {
                label: c,
                classes: proto.num_classes,
            })?;
            let mut best: Option<(usize, T)> = None;
            for &j in cands {
                let g = similarity(z.point(i), proto.vector(j), eps);
                if best.is_none_or(|(_, b)| g > b) {
                    best = Some((j, g));
                }
            }
            best.map(|(j, _)| Some(j)).ok_or(Error::EmptyClass(c))
        })
        .collect()
}
