//! Explanation assembly: rule-constrained latent sampling for exemplars and
//! counterexemplars, the median-difference saliency map, neighborhood
//! statistics, and the serializable explanation record.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::aae::{AaeModel, LatentCode};
use crate::classifier::{predict, BlackBox, ClassLabel, ClassScores};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::neighborhood::{generate_neighborhood, GeneticParams, Neighborhood};
use crate::surrogate::{
    counterfactual_rules_against, extract_rule, fidelity, fit_surrogate, satisfies, Rule, RuleRecord, TreeConfig,
};

/// Candidates decoded and scored together; fixed so results do not depend
/// on the thread count.
const SAMPLE_CHUNK: usize = 16;
/// Candidates per round of rejection sampling; also fixed, so the attempt
/// count recorded in an explanation does not depend on the thread count.
const SAMPLE_WAVE: usize = 8 * SAMPLE_CHUNK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub genetic: GeneticParams,
    pub tree: TreeConfig,
    pub exemplars: usize,
    pub counterexemplars_per_rule: usize,
    pub counter_rule_limit: usize,
    /// Sampling budget is this many attempts per requested image.
    pub budget_factor: usize,
    /// Standard deviation of the truncated Gaussian around the explained code.
    pub spread: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            genetic: GeneticParams::default(),
            tree: TreeConfig::default(),
            exemplars: 4,
            counterexemplars_per_rule: 1,
            counter_rule_limit: 3,
            budget_factor: 50,
            spread: 1.0,
        }
    }
}

/// Mixes a base seed with a stream tag and index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One synthetic image produced by rule-constrained sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub code: LatentCode,
    pub image: Image,
    pub label: ClassLabel,
    pub disc_score: f64,
    /// Index of the attempt that produced it, for reproducibility.
    pub attempt: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub attempts: usize,
    pub diagnostic: Option<String>,
}

/// Draws `value` from `N(mean, sd^2)` truncated to `(lo, hi]` by inverse CDF,
/// working in the upper tail when the interval sits above the mean so that
/// far-tail intervals keep precision. The result always lies in `(lo, hi]`.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    debug_assert!(lo < hi);
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    let u: f64 = rng.gen();
    let x = if a > 0.0 {
        let (pa, pb) = (std.sf(a), std.sf(b));
        if pa > pb {
            -std.inverse_cdf(pb + u * (pa - pb))
        } else {
            a + u * (b.min(a + 1.0) - a)
        }
    } else {
        let (pa, pb) = (std.cdf(a), std.cdf(b));
        if pb > pa {
            std.inverse_cdf(pa + u * (pb - pa))
        } else {
            b - u * (b - a.max(b - 1.0))
        }
    };
    let v = mean + sd * x;
    if v <= lo {
        lo.next_up().min(hi)
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Proposes a code for `rule`: constrained features come from a Gaussian
/// around `center` truncated to the rule's interval, free features from the
/// model prior.
pub fn propose<R: Rng + ?Sized>(
    rule: &Rule,
    center: &LatentCode,
    m: &AaeModel,
    spread: f64,
    rng: &mut R,
) -> LatentCode {
    let mut out = Vec::with_capacity(center.dim());
    for (i, &c) in center.0.iter().enumerate() {
        let (lo, hi) = rule.interval(i);
        let v = if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
            let (mu, sd) = m.spec.prior.marginal(i);
            let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            mu + sd * e
        } else {
            truncated_normal(c, spread, lo, hi, rng)
        };
        out.push(v);
    }
    LatentCode(out)
}

/// Rejection sampling of images whose codes satisfy `rule`, pass the
/// discriminator at `tau`, and which the black box assigns to `target`.
/// Attempt `i` uses its own RNG seeded from `(seed, i)`; candidates are
/// evaluated in parallel and accepted in attempt order.
#[allow(clippy::too_many_arguments)]
pub fn sample_rule(
    rule: &Rule,
    target: usize,
    center: &LatentCode,
    m: &AaeModel,
    bb: &dyn BlackBox,
    count: usize,
    budget: usize,
    tau: f64,
    spread: f64,
    seed: u64,
) -> Result<SampleSet> {
    let mut set = SampleSet::default();
    if count == 0 {
        return Ok(set);
    }
    let mut next = 0usize;
    while set.samples.len() < count && next < budget {
        let end = (next + SAMPLE_WAVE).min(budget);
        let starts: Vec<usize> = (next..end).step_by(SAMPLE_CHUNK).collect();
        let results: Vec<Result<Vec<Option<Sample>>>> = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + SAMPLE_CHUNK).min(end)).collect();
                let codes: Vec<LatentCode> = idx
                    .iter()
                    .map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5A17, i as u64));
                        propose(rule, center, m, spread, &mut rng)
                    })
                    .collect();
                let images = m.decode_batch(&codes)?;
                let scores = bb.scores_batch(&images)?;
                let mut out = Vec::with_capacity(idx.len());
                for (((code, image), s), &attempt) in codes.into_iter().zip(images).zip(scores).zip(&idx) {
                    let label = s.argmax();
                    if label != target || !satisfies(rule, &code)? {
                        out.push(None);
                        continue;
                    }
                    let d = m.validity_scores(std::slice::from_ref(&code))?[0];
                    out.push((d >= tau).then(|| Sample {
                        code,
                        image,
                        label: bb.label(label),
                        disc_score: d,
                        attempt,
                    }));
                }
                Ok(out)
            })
            .collect();
        for r in results {
            for s in r?.into_iter().flatten() {
                if set.samples.len() < count {
                    set.samples.push(s);
                }
            }
        }
        next = end;
    }
    set.attempts = next;
    if set.samples.len() < count {
        set.diagnostic =
            Some(format!("found {} of {count} samples for {} within {budget} attempts", set.samples.len(), rule));
    }
    Ok(set)
}

/// Exemplars: samples inside `rule` classified as `target`.
#[allow(clippy::too_many_arguments)]
pub fn generate_exemplars(
    rule: &Rule,
    target: usize,
    center: &LatentCode,
    m: &AaeModel,
    bb: &dyn BlackBox,
    count: usize,
    budget: usize,
    tau: f64,
    spread: f64,
    seed: u64,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::Invalid("exemplar count must be at least 1".into()));
    }
    sample_rule(rule, target, center, m, bb, count, budget, tau, spread, seed)
}

/// Counterexemplars: for each counterfactual rule, samples inside it that
/// the black box assigns to the rule's class.
#[allow(clippy::too_many_arguments)]
pub fn generate_counterexemplars(
    rules: &[Rule],
    center: &LatentCode,
    m: &AaeModel,
    bb: &dyn BlackBox,
    count_per_rule: usize,
    budget: usize,
    tau: f64,
    spread: f64,
    seed: u64,
) -> Result<SampleSet> {
    let mut set = SampleSet::default();
    let mut notes = Vec::new();
    for (i, rule) in rules.iter().enumerate() {
        let s = sample_rule(
            rule,
            rule.consequent.id,
            center,
            m,
            bb,
            count_per_rule,
            budget,
            tau,
            spread,
            derive_seed(seed, 0xC0, i as u64),
        )?;
        set.attempts += s.attempts;
        set.samples.extend(s.samples);
        notes.extend(s.diagnostic);
    }
    if !notes.is_empty() {
        set.diagnostic = Some(notes.join("; "));
    }
    Ok(set)
}

/// Signed saliency: per pixel and channel, the median of `x - exemplar`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// HWC, one value per pixel and channel.
    pub values: Vec<f64>,
}

impl SaliencyMap {
    /// Channel mean per pixel, row-major.
    pub fn display(&self) -> Vec<f64> {
        self.values.chunks(self.channels).map(|p| p.iter().sum::<f64>() / self.channels as f64).collect()
    }

    pub fn range(&self) -> (f64, f64) {
        let d = self.display();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

/// Median with the even-count convention `(a + b) / 2` of the central pair.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn saliency_map(x: &Image, exemplars: &[Image]) -> Result<SaliencyMap> {
    if exemplars.is_empty() {
        return Err(Error::Invalid("saliency needs at least one exemplar".into()));
    }
    if let Some(e) = exemplars.iter().find(|e| e.dims() != x.dims()) {
        return Err(Error::Shape(format!("exemplar {:?} differs from input {:?}", e.dims(), x.dims())));
    }
    let mut diffs = vec![0.0; exemplars.len()];
    let values = x
        .pixels()
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            for (d, e) in diffs.iter_mut().zip(exemplars) {
                *d = v - e.pixels()[p];
            }
            median(&mut diffs)
        })
        .collect();
    Ok(SaliencyMap { height: x.height(), width: x.width(), channels: x.channels(), values })
}

/// Valid-instance counts per class code.
pub fn neighborhood_stats(nbh: &Neighborhood) -> BTreeMap<String, usize> {
    nbh.class_counts()
}

/// Renders saliency over the input: positive regions tinted brown,
/// negative regions green, with opacity proportional to magnitude.
pub fn saliency_overlay(x: &Image, s: &SaliencyMap) -> Result<Image> {
    const BROWN: [f64; 3] = [0.545, 0.271, 0.075];
    const GREEN: [f64; 3] = [0.0, 0.502, 0.0];
    const MAX_ALPHA: f64 = 0.7;
    if (x.height(), x.width()) != (s.height, s.width) {
        return Err(Error::Shape("saliency and image sizes differ".into()));
    }
    let rgb = x.to_rgb();
    let d = s.display();
    let peak = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut px = Vec::with_capacity(rgb.pixels().len());
    for (i, base) in rgb.pixels().chunks(3).enumerate() {
        let (alpha, tint) = if peak > 0.0 && d[i] != 0.0 {
            (MAX_ALPHA * d[i].abs() / peak, if d[i] > 0.0 { BROWN } else { GREEN })
        } else {
            (0.0, BROWN)
        };
        for c in 0..3 {
            px.push(base[c] * (1.0 - alpha) + tint[c] * alpha);
        }
    }
    Image::from_clamped(x.height(), x.width(), 3, px)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ready,
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub explain: u64,
    pub neighborhood: u64,
    pub exemplars: u64,
    pub counterexemplars: u64,
}

impl Seeds {
    pub fn from_base(seed: u64) -> Self {
        Self {
            explain: seed,
            neighborhood: derive_seed(seed, 1, 0),
            exemplars: derive_seed(seed, 2, 0),
            counterexemplars: derive_seed(seed, 3, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub input: Image,
    pub scores: ClassScores,
    pub label: ClassLabel,
    pub latent: LatentCode,
    pub rule: Rule,
    pub counter_rules: Vec<Rule>,
    pub neighborhood_stats: BTreeMap<String, usize>,
    pub neighborhood_total: usize,
    pub exemplars: Vec<Sample>,
    pub counterexemplars: Vec<Sample>,
    pub saliency: Option<SaliencyMap>,
    pub fidelity: Option<f64>,
    pub status: Status,
    pub seeds: Seeds,
    pub diagnostics: Vec<String>,
}

/// Runs the full pipeline: encode, neighborhood, surrogate, rules,
/// exemplars, counterexemplars, saliency. A neighborhood without both
/// same-class and other-class instances yields a `Degenerate` explanation
/// with the locally constant rule and no counterfactual content.
pub fn explain(x: &Image, bb: &dyn BlackBox, m: &AaeModel, cfg: &ExplainConfig, seed: u64) -> Result<Explanation> {
    let seeds = Seeds::from_base(seed);
    let (scores, label) = predict(bb, x)?;
    let z = m.encode(x)?;
    let tau = cfg.genetic.tau;
    let budget = cfg.budget_factor.max(1);
    let mut diagnostics = Vec::new();

    let (nbh, degenerate) = match generate_neighborhood(&z, Some(label.id), bb, m, &cfg.genetic, seeds.neighborhood) {
        Ok(n) => (n, false),
        Err(Error::DegenerateLocality { neighborhood, .. }) => (*neighborhood, true),
        Err(e) => return Err(e),
    };
    let stats = neighborhood_stats(&nbh);
    let total = nbh.valid_count();

    let (rule, counter_rules, fid) = if degenerate {
        diagnostics.push(format!(
            "degenerate locality: {} same-class and {} other-class valid neighbors after {} attempts",
            nbh.eq.len(),
            nbh.neq.len(),
            nbh.attempts
        ));
        let rule = Rule { conditions: Vec::new(), consequent: label.clone() };
        (rule, Vec::new(), None)
    } else {
        let tree = fit_surrogate(&nbh, &cfg.tree, bb.class_codes())?;
        let rule = extract_rule(&tree, &z)?;
        if rule.consequent.id != label.id {
            diagnostics.push(format!(
                "surrogate predicts {} at the explained code, black box predicts {}",
                rule.consequent.code, label.code
            ));
        }
        // Ranked against the black-box label of x, which can differ from
        // the surrogate's class at z.
        let counter_rules = counterfactual_rules_against(&tree, &z, label.id, cfg.counter_rule_limit)?;
        (rule, counter_rules, Some(fidelity(&tree, &nbh)?))
    };

    // Exemplars share the factual rule's region but must carry the black
    // box's label for the input.
    let factual = Rule { conditions: rule.conditions.clone(), consequent: label.clone() };
    let ex = generate_exemplars(
        &factual,
        label.id,
        &z,
        m,
        bb,
        cfg.exemplars.max(1),
        budget * cfg.exemplars.max(1),
        tau,
        cfg.spread,
        seeds.exemplars,
    )?;
    diagnostics.extend(ex.diagnostic);
    let cx = if counter_rules.is_empty() {
        SampleSet::default()
    } else {
        generate_counterexemplars(
            &counter_rules,
            &z,
            m,
            bb,
            cfg.counterexemplars_per_rule,
            budget * cfg.counterexemplars_per_rule.max(1),
            tau,
            cfg.spread,
            seeds.counterexemplars,
        )?
    };
    diagnostics.extend(cx.diagnostic);
    let images: Vec<Image> = ex.samples.iter().map(|s| s.image.clone()).collect();
    let saliency = if images.is_empty() { None } else { Some(saliency_map(x, &images)?) };

    Ok(Explanation {
        input: x.clone(),
        scores,
        label,
        latent: z,
        rule,
        counter_rules,
        neighborhood_stats: stats,
        neighborhood_total: total,
        exemplars: ex.samples,
        counterexemplars: cx.samples,
        saliency,
        fidelity: fid,
        status: if degenerate { Status::Degenerate } else { Status::Ready },
        seeds,
        diagnostics,
    })
}

impl Explanation {
    /// Classes reachable through counterfactual rules.
    pub fn counter_classes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.counter_rules.iter().map(|r| r.consequent.code.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Samples additional exemplars with a fresh seed and recomputes saliency.
    pub fn add_exemplars(
        &mut self,
        bb: &dyn BlackBox,
        m: &AaeModel,
        cfg: &ExplainConfig,
        count: usize,
        seed: u64,
    ) -> Result<usize> {
        let factual = Rule { conditions: self.rule.conditions.clone(), consequent: self.label.clone() };
        let set = generate_exemplars(
            &factual,
            self.label.id,
            &self.latent,
            m,
            bb,
            count,
            cfg.budget_factor.max(1) * count,
            cfg.genetic.tau,
            cfg.spread,
            seed,
        )?;
        let added = set.samples.len();
        self.diagnostics.extend(set.diagnostic);
        self.exemplars.extend(set.samples);
        if !self.exemplars.is_empty() {
            let imgs: Vec<Image> = self.exemplars.iter().map(|s| s.image.clone()).collect();
            self.saliency = Some(saliency_map(&self.input, &imgs)?);
        }
        Ok(added)
    }

    /// Samples additional counterexemplars from the counter-rules whose
    /// class matches `target_class` (all counter-rules when `None`).
    /// Returns `None` when no counter-rule has that class.
    #[allow(clippy::too_many_arguments)]
    pub fn add_counterexemplars(
        &mut self,
        bb: &dyn BlackBox,
        m: &AaeModel,
        cfg: &ExplainConfig,
        count: usize,
        target_class: Option<&str>,
        seed: u64,
    ) -> Result<Option<usize>> {
        let rules: Vec<Rule> = self
            .counter_rules
            .iter()
            .filter(|r| target_class.is_none_or(|c| r.consequent.code == c))
            .cloned()
            .collect();
        if rules.is_empty() {
            return Ok(None);
        }
        let set = generate_counterexemplars(
            &rules,
            &self.latent,
            m,
            bb,
            count,
            cfg.budget_factor.max(1) * count.max(1),
            cfg.genetic.tau,
            cfg.spread,
            seed,
        )?;
        let added = set.samples.len();
        self.diagnostics.extend(set.diagnostic);
        self.counterexemplars.extend(set.samples);
        Ok(Some(added))
    }

    /// JSON-ready record; images go into `store` as content-addressed PNGs.
    pub fn to_record(&self, store: &mut ArtifactStore) -> Result<ExplanationRecord> {
        let input = store.put_image(&self.input)?;
        let exemplars = self.exemplars.iter().map(|s| store.put_image(&s.image)).collect::<Result<Vec<_>>>()?;
        let counterexemplars = self
            .counterexemplars
            .iter()
            .map(|s| Ok(CounterexemplarRecord { image: store.put_image(&s.image)?, label: s.label.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let saliency = match &self.saliency {
            Some(s) => {
                let overlay = saliency_overlay(&self.input, s)?;
                let (min, max) = s.range();
                Some(SaliencyRecord {
                    r#ref: store.put_image(&overlay)?,
                    min,
                    max,
                    height: s.height,
                    width: s.width,
                    values: s.display(),
                })
            }
            None => None,
        };
        Ok(ExplanationRecord {
            input_id: input.trim_end_matches(".png").rsplit('/').next().unwrap_or_default().to_string(),
            input,
            label: self.label.clone(),
            scores: self.scores.0.clone(),
            latent: self.latent.0.clone(),
            rule: self.rule.record(),
            counter_rules: self.counter_rules.iter().map(Rule::record).collect(),
            neighborhood_stats: self.neighborhood_stats.clone(),
            neighborhood_total: self.neighborhood_total,
            exemplars,
            counterexemplars,
            saliency,
            seeds: self.seeds,
            status: self.status,
            fidelity: self.fidelity,
            diagnostics: self.diagnostics.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexemplarRecord {
    pub image: String,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    /// Rendered brown/green overlay.
    pub r#ref: String,
    pub min: f64,
    pub max: f64,
    pub height: usize,
    pub width: usize,
    /// Channel-mean saliency, row-major.
    pub values: Vec<f64>,
}

/// Serialized explanation; field order is fixed, maps are sorted, so equal
/// explanations serialize to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub input_id: String,
    pub input: String,
    pub label: ClassLabel,
    pub scores: Vec<f64>,
    pub latent: Vec<f64>,
    pub rule: RuleRecord,
    pub counter_rules: Vec<RuleRecord>,
    pub neighborhood_stats: BTreeMap<String, usize>,
    pub neighborhood_total: usize,
    pub exemplars: Vec<String>,
    pub counterexemplars: Vec<CounterexemplarRecord>,
    pub saliency: Option<SaliencyRecord>,
    pub seeds: Seeds,
    pub status: Status,
    pub fidelity: Option<f64>,
    pub diagnostics: Vec<String>,
}

/// Content-addressed PNG blobs, keyed `artifacts/<sha256>.png`.
#[derive(Clone, Debug, Default)]
pub struct ArtifactStore {
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl ArtifactStore {
    pub fn put(&mut self, png: Vec<u8>) -> String {
        let key = format!("artifacts/{}.png", hex::encode(Sha256::digest(&png)));
        self.blobs.entry(key.clone()).or_insert(png);
        key
    }

    pub fn put_image(&mut self, img: &Image) -> Result<String> {
        Ok(self.put(img.to_png_bytes()?))
    }

    /// Writes every blob under `root`, skipping files that already exist.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for (key, bytes) in &self.blobs {
            let path = root.join(key);
            if path.exists() {
                continue;
            }
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, bytes)?;
        }
        Ok(())
    }
}
