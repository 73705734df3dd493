#![allow(dead_code)]

use exemplar_core::aae::{AaeModel, AaeSpec, MbdConfig, PriorSpec};
use exemplar_core::classifier::{BlackBox, ClassScores};
use exemplar_core::image::Image;
use exemplar_core::surrogate::{Node, Op, Rule, SurrogateTree};
use exemplar_core::Result;
use exemplar_nn::{Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic stand-in for a trained classifier: the class is the
/// brightest channel, scores are the channel means.
pub struct ChannelBox {
    pub codes: Vec<String>,
    pub res: usize,
}

impl ChannelBox {
    pub fn new(res: usize) -> Self {
        Self { codes: vec!["RED".into(), "GREEN".into(), "BLUE".into()], res }
    }
}

impl BlackBox for ChannelBox {
    fn class_codes(&self) -> &[String] {
        &self.codes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        (self.res, self.res, 3)
    }

    fn scores_batch(&self, images: &[Image]) -> Result<Vec<ClassScores>> {
        Ok(images
            .iter()
            .map(|img| {
                let mut sums = [0.0; 3];
                for px in img.pixels().chunks(3) {
                    for c in 0..3 {
                        sums[c] += px[c];
                    }
                }
                let n = (img.height() * img.width()) as f64;
                ClassScores(sums.iter().map(|s| s / n).collect())
            })
            .collect())
    }
}

/// Two classes split at a brightness threshold, calibrated to the median
/// brightness of a model's prior decodes so that both classes occur.
pub struct BrightnessBox {
    pub codes: Vec<String>,
    pub res: usize,
    pub threshold: f64,
}

fn brightness(img: &Image) -> f64 {
    img.pixels().iter().sum::<f64>() / img.pixels().len() as f64
}

impl BrightnessBox {
    pub fn calibrated(m: &AaeModel) -> Self {
        let codes = exemplar_core::aae::sample_prior(&m.spec.prior, 201, &mut ChaCha8Rng::seed_from_u64(99));
        let mut b: Vec<f64> = m.decode_batch(&codes).unwrap().iter().map(brightness).collect();
        b.sort_by(f64::total_cmp);
        Self { codes: vec!["DARK".into(), "LIGHT".into()], res: m.resolution(), threshold: b[100] }
    }
}

impl BlackBox for BrightnessBox {
    fn class_codes(&self) -> &[String] {
        &self.codes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        (self.res, self.res, 3)
    }

    fn scores_batch(&self, images: &[Image]) -> Result<Vec<ClassScores>> {
        Ok(images
            .iter()
            .map(|img| {
                let p = 1.0 / (1.0 + (-(brightness(img) - self.threshold) * 1e3).exp());
                ClassScores(vec![1.0 - p, p])
            })
            .collect())
    }
}

pub fn tiny_spec(res: usize, k: usize) -> AaeSpec {
    AaeSpec {
        latent_dim: k,
        channels: 3,
        base_resolution: res,
        stage_index: 1,
        filters: vec![4],
        disc_width: 8,
        mbd: MbdConfig { kernels: 3, dims: 2 },
        bn_momentum: 0.95,
        kernel_size: 3,
        conv_stride: 1,
        leaky_slope: 0.2,
        prior: PriorSpec::standard(k),
        score_context: 7,
    }
}

pub fn tiny_aae(res: usize, k: usize, seed: u64) -> AaeModel {
    AaeModel::new(tiny_spec(res, k), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_image<R: Rng + ?Sized>(h: usize, w: usize, c: usize, rng: &mut R) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum AaeLoss {
    Reconstruction,
    Discriminator,
    Generator,
}

/// Tensors held fixed while parameters are perturbed.
struct LossInputs {
    clean: Tensor,
    pixel_noise: Tensor,
    prior: Tensor,
    noise_a: Tensor,
    noise_b: Tensor,
}

fn eval_loss(m: &mut AaeModel, which: AaeLoss, inp: &LossInputs) -> f64 {
    m.zero_grad();
    match which {
        AaeLoss::Reconstruction => m.reconstruction_loss_grads(&inp.clean, &inp.pixel_noise).unwrap(),
        AaeLoss::Discriminator => {
            m.discriminator_loss_grads(&inp.prior, &inp.clean, &inp.noise_a, &inp.noise_b).unwrap()
        }
        AaeLoss::Generator => m.generator_loss_grads(&inp.clean, &inp.noise_a).unwrap(),
    }
}

fn trained_params(m: &mut AaeModel, which: AaeLoss) -> Vec<&mut Param> {
    match which {
        AaeLoss::Reconstruction => {
            let mut v = m.encoder.params_mut();
            v.extend(m.decoder.params_mut());
            v
        }
        AaeLoss::Discriminator => m.discriminator.params_mut(),
        AaeLoss::Generator => m.encoder.params_mut(),
    }
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-4)` between the
/// analytic gradient of `which` and central differences (h = 1e-5), over
/// every parameter the loss trains, on a 8x8, k = 4 model in f64.
pub fn aae_gradient_error(which: AaeLoss, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = tiny_aae(8, 4, seed);
    let n = 4;
    let images: Vec<Image> = (0..n).map(|_| random_image(8, 8, 3, &mut rng)).collect();
    let clean = Image::batch_tensor(&images).unwrap();
    let inp = LossInputs {
        pixel_noise: Tensor::randn(clean.shape(), 0.1, &mut rng),
        clean,
        prior: Tensor::randn(&[n, 4], 1.0, &mut rng),
        noise_a: Tensor::randn(&[n, 4], 0.1, &mut rng),
        noise_b: Tensor::randn(&[n, 4], 0.1, &mut rng),
    };

    let mut a = m.clone();
    eval_loss(&mut a, which, &inp);
    let analytic: Vec<Vec<f64>> = trained_params(&mut a, which).iter().map(|p| p.grad.data().to_vec()).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &ga) in grads.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut c = m.clone();
                trained_params(&mut c, which)[pi].value.data_mut()[j] += delta;
                eval_loss(&mut c, which, &inp)
            };
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max((ga - num).abs() / ga.abs().max(num.abs()).max(1e-4));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Balanced accuracy computed the long way: per-class recall from a
/// confusion count, averaged over classes present in the truth.
pub fn balanced_accuracy_oracle(preds: &[usize], truth: &[usize]) -> f64 {
    let k = truth.iter().chain(preds).copied().max().unwrap_or(0) + 1;
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&p, &t) in preds.iter().zip(truth) {
        tot[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tot[c] > 0).collect();
    present.iter().map(|&c| hit[c] as f64 / tot[c] as f64).sum::<f64>() / present.len() as f64
}

/// Per-pixel median by full sort of the difference stack, computed
/// independently of the library's median helper.
pub fn saliency_oracle(x: &Image, exemplars: &[Image]) -> Vec<f64> {
    (0..x.pixels().len())
        .map(|p| {
            let mut d: Vec<f64> = exemplars.iter().map(|e| x.pixels()[p] - e.pixels()[p]).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = d.len();
            if n % 2 == 1 {
                d[n / 2]
            } else {
                (d[n / 2 - 1] + d[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Leaf reached by `h`, walking the arena directly.
pub fn route(tree: &SurrogateTree, h: &[f64]) -> usize {
    let mut i = 0;
    loop {
        match &tree.nodes[i] {
            Node::Split { feature, threshold, left, right } => {
                i = if h[*feature] <= *threshold { *left } else { *right }
            }
            Node::Leaf { .. } => return i,
        }
    }
}

pub struct OracleLeaf {
    pub class: usize,
    /// Per feature: tightest `<=` bound and tightest `>` bound.
    pub bounds: Vec<(Option<f64>, Option<f64>)>,
    pub size: usize,
    pub purity: f64,
}

/// Leaves in left-to-right order with their path bounds.
pub fn oracle_leaves(tree: &SurrogateTree) -> Vec<OracleLeaf> {
    fn walk(tree: &SurrogateTree, i: usize, bounds: Vec<(Option<f64>, Option<f64>)>, out: &mut Vec<OracleLeaf>) {
        match &tree.nodes[i] {
            Node::Split { feature, threshold, left, right } => {
                let mut l = bounds.clone();
                l[*feature].0 = Some(l[*feature].0.map_or(*threshold, |b| b.min(*threshold)));
                walk(tree, *left, l, out);
                let mut r = bounds;
                r[*feature].1 = Some(r[*feature].1.map_or(*threshold, |b| b.max(*threshold)));
                walk(tree, *right, r, out);
            }
            Node::Leaf { class, counts } => {
                let size: usize = counts.iter().sum();
                out.push(OracleLeaf {
                    class: *class,
                    bounds,
                    size,
                    purity: *counts.iter().max().unwrap() as f64 / size.max(1) as f64,
                });
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, 0, vec![(None, None); tree.num_features], &mut out);
    out
}

pub fn oracle_violations(leaf: &OracleLeaf, h: &[f64]) -> usize {
    leaf.bounds
        .iter()
        .enumerate()
        .map(|(f, (le, gt))| le.is_some_and(|t| h[f] > t) as usize + gt.is_some_and(|t| h[f] <= t) as usize)
        .sum()
}

pub fn rule_bounds(rule: &Rule, k: usize) -> Vec<(Option<f64>, Option<f64>)> {
    let mut b = vec![(None, None); k];
    for c in &rule.conditions {
        match c.op {
            Op::Le => b[c.feature].0 = Some(c.threshold),
            Op::Gt => b[c.feature].1 = Some(c.threshold),
        }
    }
    b
}
