//! The black-box classifier: preprocessing, a small one-vs-rest CNN, the
//! prediction interface every downstream module relies on, and the balanced
//! multi-class accuracy metric.

use std::collections::BTreeMap;

use exemplar_nn::{
    loss, Adam, BatchNorm2d, Conv2d, Dense, Layer, MaxPool2d, Relu, Reshape, Sequential, Sigmoid, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub code: String,
}

/// Independent per-class sigmoid scores; they need not sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    /// Index of the highest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.0.iter().enumerate() {
            if s > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Anything that maps a preprocessed image to per-class scores.
///
/// Implementations must be deterministic: the same input always produces the
/// same scores.
pub trait BlackBox: Send + Sync {
    fn class_codes(&self) -> &[String];

    /// Expected `(height, width, channels)` of inputs.
    fn input_dims(&self) -> (usize, usize, usize);

    fn scores_batch(&self, images: &[Image]) -> Result<Vec<ClassScores>>;

    fn num_classes(&self) -> usize {
        self.class_codes().len()
    }

    fn label(&self, id: usize) -> ClassLabel {
        ClassLabel { id, code: self.class_codes()[id].clone() }
    }
}

fn check_dims(bb: &dyn BlackBox, img: &Image) -> Result<()> {
    if img.dims() != bb.input_dims() {
        return Err(Error::Shape(format!("classifier expects {:?} images, got {:?}", bb.input_dims(), img.dims())));
    }
    Ok(())
}

pub fn predict(bb: &dyn BlackBox, img: &Image) -> Result<(ClassScores, ClassLabel)> {
    check_dims(bb, img)?;
    let scores = bb
        .scores_batch(std::slice::from_ref(img))?
        .pop()
        .ok_or_else(|| Error::Invalid("black box returned no scores".into()))?;
    let label = bb.label(scores.argmax());
    Ok((scores, label))
}

/// Label ids for a batch of images.
pub fn predict_labels(bb: &dyn BlackBox, images: &[Image]) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    for img in images {
        check_dims(bb, img)?;
    }
    Ok(bb.scores_batch(images)?.iter().map(ClassScores::argmax).collect())
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::Invalid(format!("{} predictions for {} ground-truth labels", preds.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("balanced accuracy of an empty set".into()));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(truth) {
        let entry = per_class.entry(t).or_default();
        entry.1 += 1;
        if p == t {
            entry.0 += 1;
        }
    }
    let recall_sum: f64 = per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(recall_sum / per_class.len() as f64)
}

// ------------------------------------------------------------ preprocessing

/// Random geometric augmentation used for training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Extra zoom applied after fitting the shorter edge to the target.
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Inputs whose shorter edge would need more than this upscale are rejected.
    pub max_upscale: f64,
    pub random_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_range: (1.0, 1.15), max_rotation_deg: 20.0, max_upscale: 4.0, random_crop: true }
    }
}

impl AugmentConfig {
    /// No zoom, no rotation, centered crop.
    pub fn identity() -> Self {
        Self { scale_range: (1.0, 1.0), max_rotation_deg: 0.0, max_upscale: 4.0, random_crop: false }
    }
}

fn sample_bilinear(img: &Image, fy: f64, fx: f64, ch: usize) -> f64 {
    let fy = fy.clamp(0.0, (img.height() - 1) as f64);
    let fx = fx.clamp(0.0, (img.width() - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let top = img.get(y0, x0, ch) * (1.0 - tx) + img.get(y0, x1, ch) * tx;
    let bottom = img.get(y1, x0, ch) * (1.0 - tx) + img.get(y1, x1, ch) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Randomly rescales, rotates and crops `img` to `target_res x target_res`.
/// The aspect ratio is never distorted; rotation is about the image center
/// with border replication.
pub fn preprocess_train<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    target_res: usize,
    cfg: &AugmentConfig,
) -> Result<Image> {
    if target_res < 8 {
        return Err(Error::Config(format!("target resolution {target_res} below 8")));
    }
    let short = img.height().min(img.width()) as f64;
    let fit = target_res as f64 / short;
    if fit > cfg.max_upscale {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} needs {fit:.2}x upscale to reach {target_res}, limit is {}",
            img.height(),
            img.width(),
            cfg.max_upscale
        )));
    }
    let (lo, hi) = cfg.scale_range;
    let zoom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let scale = fit * zoom.max(1.0);
    let theta = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let (sh, sw) = (img.height() as f64 * scale, img.width() as f64 * scale);
    let t = target_res as f64;
    let (slack_y, slack_x) = ((sh - t).max(0.0), (sw - t).max(0.0));
    let (oy, ox) = if cfg.random_crop {
        (rng.gen_range(0.0..=slack_y), rng.gen_range(0.0..=slack_x))
    } else {
        (slack_y / 2.0, slack_x / 2.0)
    };
    let (cy, cx) = (sh / 2.0, sw / 2.0);
    let (sin, cos) = theta.sin_cos();
    let c = img.channels();
    let mut out = vec![0.0; target_res * target_res * c];
    for i in 0..target_res {
        for j in 0..target_res {
            let (mut py, mut px) = (i as f64 + 0.5 + oy, j as f64 + 0.5 + ox);
            if theta != 0.0 {
                let (dy, dx) = (py - cy, px - cx);
                py = cy + dy * cos - dx * sin;
                px = cx + dy * sin + dx * cos;
            }
            let (sy, sx) = (py / scale - 0.5, px / scale - 0.5);
            for ch in 0..c {
                out[(i * target_res + j) * c + ch] = sample_bilinear(img, sy, sx, ch);
            }
        }
    }
    Image::from_clamped(target_res, target_res, c, out)
}

/// Resizes the shorter edge to `resize_edge` (aspect preserved), then takes
/// the central `crop x crop` window.
pub fn preprocess_eval(img: &Image, resize_edge: usize, crop: usize) -> Result<Image> {
    if crop > resize_edge {
        return Err(Error::Config(format!("crop {crop} exceeds resize edge {resize_edge}")));
    }
    let (h, w) = (img.height(), img.width());
    let (nh, nw) = if h <= w {
        (resize_edge, ((w as f64) * resize_edge as f64 / h as f64).round() as usize)
    } else {
        (((h as f64) * resize_edge as f64 / w as f64).round() as usize, resize_edge)
    };
    let resized = img.resize(nh, nw);
    resized.crop((nh - crop) / 2, (nw - crop) / 2, crop, crop)
}

// --------------------------------------------------------------- the CNN

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Filters per conv stage; each stage halves the resolution.
    pub filters: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bn_momentum: f64,
    /// Augment training batches with [`preprocess_train`]; `None` disables it.
    pub augment: Option<AugmentConfig>,
    /// Draw each training example from a uniformly chosen class, which
    /// oversamples rare classes.
    pub balanced_sampling: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 28,
            channels: 3,
            filters: vec![8, 16],
            epochs: 6,
            batch_size: 32,
            learning_rate: 2e-3,
            bn_momentum: 0.9,
            augment: Some(AugmentConfig {
                scale_range: (1.0, 1.1),
                max_rotation_deg: 15.0,
                max_upscale: 4.0,
                random_crop: true,
            }),
            balanced_sampling: true,
            seed: 0,
        }
    }
}

/// Metadata stored next to the classifier weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub resolution: usize,
    pub channels: usize,
    pub filters: Vec<usize>,
    pub bn_momentum: f64,
    pub class_codes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CnnClassifier {
    pub spec: ClassifierSpec,
    pub net: Sequential,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_balanced_accuracy: f64,
    pub val_balanced_accuracy: Option<f64>,
}

impl CnnClassifier {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        if spec.class_codes.len() < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut net = Sequential::default();
        let mut ch = spec.channels;
        let mut res = spec.resolution;
        for &f in &spec.filters {
            net.push(Layer::Conv2d(Conv2d::new(ch, f, 3, 1, 1, rng)));
            net.push(Layer::BatchNorm2d(BatchNorm2d::new(f, spec.bn_momentum)));
            net.push(Layer::Relu(Relu::default()));
            net.push(Layer::MaxPool2d(MaxPool2d::default()));
            ch = f;
            res = res.div_ceil(2);
        }
        let flat = ch * res * res;
        net.push(Layer::Reshape(Reshape::new(&[flat])));
        net.push(Layer::Dense(Dense::new(flat, spec.class_codes.len(), rng)));
        net.push(Layer::Sigmoid(Sigmoid::default()));
        Ok(Self { spec, net })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new("classifier");
        c.meta.insert("spec".into(), serde_json::to_value(&self.spec)?);
        c.meta.insert("class_codes".into(), serde_json::to_value(&self.spec.class_codes)?);
        c.meta.insert("resolution".into(), self.spec.resolution.into());
        for (n, t) in self.net.named_state() {
            c.tensors.push((n, t.clone()));
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind() != Some("classifier") {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found {:?}", c.kind())));
        }
        let spec: ClassifierSpec = c.spec()?;
        let mut model = Self::new(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        model.net.load_state(&c.lookup())?;
        Ok(model)
    }

    /// One-vs-rest binary cross-entropy over a batch; accumulates gradients
    /// (training-mode batch norm) and returns the loss.
    pub fn bce_loss_grads(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let k = self.spec.class_codes.len();
        let probs = self.net.forward(batch, true)?;
        let mut target = Tensor::zeros(&[labels.len(), k]);
        for (i, &l) in labels.iter().enumerate() {
            target.data_mut()[i * k + l] = 1.0;
        }
        let (l, g) = loss::bce(&probs, &target);
        self.net.backward(&g)?;
        Ok(l)
    }
}

impl BlackBox for CnnClassifier {
    fn class_codes(&self) -> &[String] {
        &self.spec.class_codes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        (self.spec.resolution, self.spec.resolution, self.spec.channels)
    }

    fn scores_batch(&self, images: &[Image]) -> Result<Vec<ClassScores>> {
        let k = self.spec.class_codes.len();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for img in chunk {
                check_dims(self, img)?;
            }
            let probs = self.net.infer(&Image::batch_tensor(chunk)?)?;
            out.extend(probs.data().chunks(k).map(|r| ClassScores(r.to_vec())));
        }
        Ok(out)
    }
}

/// Trains the one-vs-rest CNN. Classes without training examples are
/// reported with a warning and skipped by the balanced sampler.
pub fn train_classifier(
    train: &Dataset,
    val: Option<&Dataset>,
    config: &ClassifierConfig,
) -> Result<(CnnClassifier, TrainReport)> {
    let num_classes = train.class_codes.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Invalid(format!("training data has {} populated classes, need at least 2", present.len())));
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            log::warn!("class {} has no training examples", train.class_codes[c]);
        }
    }
    for img in &train.images {
        if img.channels() != config.channels {
            return Err(Error::Shape(format!(
                "training image has {} channels, config expects {}",
                img.channels(),
                config.channels
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = ClassifierSpec {
        resolution: config.resolution,
        channels: config.channels,
        filters: config.filters.clone(),
        bn_momentum: config.bn_momentum,
        class_codes: train.class_codes.clone(),
    };
    let mut model = CnnClassifier::new(spec, &mut rng)?;
    let mut opt = Adam::new(config.learning_rate);
    let res = config.resolution;
    let batch = config.batch_size.max(1);
    let steps = train.len().div_ceil(batch);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let idx: Vec<usize> = if config.balanced_sampling {
                (0..batch)
                    .map(|_| {
                        let c = present[rng.gen_range(0..present.len())];
                        by_class[c][rng.gen_range(0..by_class[c].len())]
                    })
                    .collect()
            } else {
                order[step * batch..((step + 1) * batch).min(order.len())].to_vec()
            };
            let mut images = Vec::with_capacity(idx.len());
            for &i in &idx {
                let img = &train.images[i];
                let img = match &config.augment {
                    Some(aug) => preprocess_train(img, &mut rng, res, aug)?,
                    None => img.resize(res, res),
                };
                images.push(img);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            model.net.zero_grad();
            let l = model.bce_loss_grads(&Image::batch_tensor(&images)?, &labels)?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: 0,
                    step: epoch * steps + step,
                    what: "classifier loss is not finite".into(),
                });
            }
            opt.step(model.net.params_mut());
            epoch_loss += l;
        }
        let mean = epoch_loss / steps as f64;
        log::info!("classifier epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }

    let eval = |ds: &Dataset| -> Result<f64> {
        let imgs: Vec<Image> = ds.images.iter().map(|i| i.resize(res, res)).collect();
        balanced_accuracy(&predict_labels(&model, &imgs)?, &ds.labels)
    };
    report.train_balanced_accuracy = eval(train)?;
    if let Some(v) = val {
        if !v.is_empty() {
            report.val_balanced_accuracy = Some(eval(v)?);
        }
    }
    Ok((model, report))
}
