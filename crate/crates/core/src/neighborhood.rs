//! Latent neighborhood generation: a genetic search around an encoded
//! instance, discriminator validation, and black-box labeling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aae::{AaeModel, LatentCode};
use crate::classifier::{BlackBox, ClassLabel, ClassScores};
use crate::error::{Error, Result};
use crate::image::Image;

/// Decoding and scoring happen in chunks of this many codes; the chunking is
/// fixed so parallel evaluation gives the same floating-point results as a
/// serial run.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneticParams {
    /// Total neighborhood size N, split between the two searches.
    pub population: usize,
    pub generations: usize,
    pub crossover: f64,
    /// Per-coordinate mutation probability.
    pub mutation_prob: f64,
    /// Standard deviation of the Gaussian mutation.
    pub mutation_scale: f64,
    /// Discriminator acceptance threshold.
    pub tau: f64,
    /// Fraction of N given to the same-class search.
    pub split: f64,
    pub tournament: usize,
    pub elite_fraction: f64,
    /// Extra attempts, each multiplying the mutation scale by `widen_factor`,
    /// when one partition comes out empty.
    pub max_retries: usize,
    pub widen_factor: f64,
}

impl Default for GeneticParams {
    fn default() -> Self {
        Self {
            population: 100,
            generations: 20,
            crossover: 0.5,
            mutation_prob: 0.2,
            mutation_scale: 0.4,
            tau: 0.5,
            split: 0.5,
            tournament: 3,
            elite_fraction: 0.1,
            max_retries: 3,
            widen_factor: 2.0,
        }
    }
}

impl GeneticParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if !prob(self.crossover) || !prob(self.mutation_prob) || !prob(self.split) || !prob(self.elite_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.mutation_scale >= 0.0) || self.tournament == 0 {
            return Err(Error::Config("mutation scale must be >= 0 and tournament >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentInstance {
    pub code: LatentCode,
    pub decoded: Image,
    pub label: ClassLabel,
    pub valid: bool,
    pub fitness: f64,
}

/// Serializable summary of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub code: Vec<f64>,
    pub label: String,
    pub valid: bool,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub center: LatentCode,
    /// The class instances are compared against.
    pub reference: ClassLabel,
    pub instances: Vec<LatentInstance>,
    /// Indices of valid instances labeled like the reference.
    pub eq: Vec<usize>,
    /// Indices of valid instances labeled differently.
    pub neq: Vec<usize>,
    pub params: GeneticParams,
    pub seed: u64,
    /// Mutation scale of the attempt that produced this neighborhood.
    pub mutation_scale: f64,
    pub attempts: usize,
}

impl Neighborhood {
    pub fn valid_instances(&self) -> impl Iterator<Item = &LatentInstance> {
        self.instances.iter().filter(|i| i.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_instances().count()
    }

    /// Counts per class code over valid instances.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for inst in self.valid_instances() {
            *out.entry(inst.label.code.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn records(&self) -> Vec<InstanceRecord> {
        self.instances
            .iter()
            .map(|i| InstanceRecord {
                code: i.code.0.clone(),
                label: i.label.code.clone(),
                valid: i.valid,
                fitness: i.fitness,
            })
            .collect()
    }
}

/// LORE-style fitness: class indicator, plus closeness `1 - d(h, z)`, minus
/// a penalty for the unchanged point itself.
pub fn fitness_value(class_match: bool, h: &LatentCode, z: &LatentCode) -> f64 {
    let indicator = if class_match { 1.0 } else { 0.0 };
    let identical = if h == z { 1.0 } else { 0.0 };
    indicator + (1.0 - h.normalized_distance(z)) - identical
}

fn label_of(bb: &dyn BlackBox, m: &AaeModel, z: &LatentCode) -> Result<usize> {
    Ok(score_codes(bb, m, std::slice::from_ref(z))?.remove(0).1.argmax())
}

/// Fitness for the same-class search.
pub fn fitness_eq(h: &LatentCode, z: &LatentCode, bb: &dyn BlackBox, m: &AaeModel) -> Result<f64> {
    Ok(fitness_value(label_of(bb, m, h)? == label_of(bb, m, z)?, h, z))
}

/// Fitness for the different-class search.
pub fn fitness_neq(h: &LatentCode, z: &LatentCode, bb: &dyn BlackBox, m: &AaeModel) -> Result<f64> {
    Ok(fitness_value(label_of(bb, m, h)? != label_of(bb, m, z)?, h, z))
}

/// True iff the discriminator score of `h` (see [`AaeModel::validity_scores`]) is at least `tau`.
pub fn validate_latent(m: &AaeModel, h: &LatentCode, tau: f64) -> Result<bool> {
    Ok(m.validity_scores(std::slice::from_ref(h))?[0] >= tau)
}

/// Decodes and scores codes in fixed chunks, in parallel, preserving order.
fn score_codes(bb: &dyn BlackBox, m: &AaeModel, codes: &[LatentCode]) -> Result<Vec<(Image, ClassScores)>> {
    let chunks: Vec<Result<Vec<(Image, ClassScores)>>> = codes
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let images = m.decode_batch(chunk)?;
            let scores = bb.scores_batch(&images)?;
            Ok(images.into_iter().zip(scores).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(codes.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Decodes, labels and validates one code.
pub fn label_instance(bb: &dyn BlackBox, m: &AaeModel, h: &LatentCode, tau: f64) -> Result<LatentInstance> {
    Ok(label_instances(bb, m, std::slice::from_ref(h), tau)?.remove(0))
}

/// Batch form of [`label_instance`]; fitness is left at zero.
pub fn label_instances(bb: &dyn BlackBox, m: &AaeModel, codes: &[LatentCode], tau: f64) -> Result<Vec<LatentInstance>> {
    let scored = score_codes(bb, m, codes)?;
    let valid: Vec<Result<bool>> = codes.par_iter().map(|h| validate_latent(m, h, tau)).collect();
    scored
        .into_iter()
        .zip(codes)
        .zip(valid)
        .map(|(((decoded, scores), code), valid)| {
            Ok(LatentInstance {
                code: code.clone(),
                decoded,
                label: bb.label(scores.argmax()),
                valid: valid?,
                fitness: 0.0,
            })
        })
        .collect()
}

struct Individual {
    code: LatentCode,
    label: usize,
    fitness: f64,
}

fn mutate<R: Rng + ?Sized>(code: &mut LatentCode, prob: f64, noise: Option<&Normal<f64>>, rng: &mut R) {
    for v in &mut code.0 {
        if rng.gen::<f64>() < prob {
            if let Some(n) = noise {
                *v += n.sample(rng);
            }
        }
    }
}

fn evaluate(
    codes: Vec<LatentCode>,
    z: &LatentCode,
    reference: usize,
    want_same: bool,
    bb: &dyn BlackBox,
    m: &AaeModel,
) -> Result<Vec<Individual>> {
    let scored = score_codes(bb, m, &codes)?;
    Ok(codes
        .into_iter()
        .zip(scored)
        .map(|(code, (_, s))| {
            let label = s.argmax();
            let fitness = fitness_value((label == reference) == want_same, &code, z);
            Individual { code, label, fitness }
        })
        .collect())
}

/// Best of `size` uniformly drawn individuals; ties go to the lower index.
fn tournament<R: Rng + ?Sized>(pop: &[Individual], size: usize, rng: &mut R) -> usize {
    let mut best = rng.gen_range(0..pop.len());
    for _ in 1..size {
        let c = rng.gen_range(0..pop.len());
        if pop[c].fitness > pop[best].fitness || (pop[c].fitness == pop[best].fitness && c < best) {
            best = c;
        }
    }
    best
}

/// Elite fitness after each generation, for diagnostics and tests.
pub type EliteTrace = Vec<f64>;

#[allow(clippy::too_many_arguments)]
fn evolve<R: Rng + ?Sized>(
    z: &LatentCode,
    reference: usize,
    want_same: bool,
    size: usize,
    params: &GeneticParams,
    scale: f64,
    bb: &dyn BlackBox,
    m: &AaeModel,
    rng: &mut R,
) -> Result<(Vec<Individual>, EliteTrace)> {
    if size == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let noise =
        if scale > 0.0 { Some(Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?) } else { None };
    let init: Vec<LatentCode> = (0..size)
        .map(|_| {
            let mut c = z.clone();
            mutate(&mut c, params.mutation_prob, noise.as_ref(), rng);
            c
        })
        .collect();
    let mut pop = evaluate(init, z, reference, want_same, bb, m)?;
    let elite = ((size as f64 * params.elite_fraction).ceil() as usize).clamp(1, size);
    let mut trace = Vec::with_capacity(params.generations + 1);
    let rank = |pop: &mut Vec<Individual>| {
        // Stable: equal fitness keeps generation order.
        pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
    };
    rank(&mut pop);
    trace.push(pop[0].fitness);
    for _ in 0..params.generations {
        let mut children = Vec::with_capacity(size - elite);
        while children.len() < size - elite {
            let a = tournament(&pop, params.tournament, rng);
            let b = tournament(&pop, params.tournament, rng);
            let mut child = pop[a].code.clone();
            if rng.gen::<f64>() < params.crossover {
                for (i, v) in child.0.iter_mut().enumerate() {
                    if rng.gen::<bool>() {
                        *v = pop[b].code.0[i];
                    }
                }
            }
            mutate(&mut child, params.mutation_prob, noise.as_ref(), rng);
            if child.is_finite() {
                children.push(child);
            }
        }
        let mut next: Vec<Individual> = pop.drain(..elite).collect();
        next.extend(evaluate(children, z, reference, want_same, bb, m)?);
        pop = next;
        rank(&mut pop);
        trace.push(pop[0].fitness);
    }
    Ok((pop, trace))
}

/// Runs both searches once at the given mutation scale.
fn attempt(
    z: &LatentCode,
    reference: usize,
    bb: &dyn BlackBox,
    m: &AaeModel,
    params: &GeneticParams,
    scale: f64,
    seed: u64,
) -> Result<(Vec<LatentInstance>, EliteTrace, EliteTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_eq = ((params.population as f64) * params.split).round() as usize;
    let n_neq = params.population - n_eq;
    let (eq, trace_eq) = evolve(z, reference, true, n_eq, params, scale, bb, m, &mut rng)?;
    let (neq, trace_neq) = evolve(z, reference, false, n_neq, params, scale, bb, m, &mut rng)?;
    let pop: Vec<Individual> = eq.into_iter().chain(neq).collect();
    let codes: Vec<LatentCode> = pop.iter().map(|i| i.code.clone()).collect();
    let mut instances = label_instances(bb, m, &codes, params.tau)?;
    for (inst, ind) in instances.iter_mut().zip(&pop) {
        debug_assert_eq!(inst.label.id, ind.label);
        inst.fitness = ind.fitness;
    }
    Ok((instances, trace_eq, trace_neq))
}

/// Elite-fitness traces of both searches for one attempt (same-class first).
pub fn elite_traces(
    z: &LatentCode,
    reference: usize,
    bb: &dyn BlackBox,
    m: &AaeModel,
    params: &GeneticParams,
    seed: u64,
) -> Result<(EliteTrace, EliteTrace)> {
    let (_, a, b) = attempt(z, reference, bb, m, params, params.mutation_scale, seed)?;
    Ok((a, b))
}

/// Generates the neighborhood of `z`. Instances are compared against
/// `reference` when given, otherwise against the black-box label of
/// `decode(z)`. When either partition is empty the search is retried with
/// a wider mutation scale; if it stays empty the result is a
/// [`Error::DegenerateLocality`] carrying the last neighborhood.
pub fn generate_neighborhood(
    z: &LatentCode,
    reference: Option<usize>,
    bb: &dyn BlackBox,
    m: &AaeModel,
    params: &GeneticParams,
    seed: u64,
) -> Result<Neighborhood> {
    params.validate()?;
    if z.dim() != m.latent_dim() {
        return Err(Error::Shape(format!("latent code has length {}, model uses {}", z.dim(), m.latent_dim())));
    }
    let reference = match reference {
        Some(r) => r,
        None => label_of(bb, m, z)?,
    };
    let mut scale = params.mutation_scale;
    let mut last = None;
    for attempt_idx in 0..=params.max_retries {
        let attempt_seed = seed.wrapping_add(attempt_idx as u64);
        let (instances, _, _) = attempt(z, reference, bb, m, params, scale, attempt_seed)?;
        let (mut eq, mut neq) = (Vec::new(), Vec::new());
        for (i, inst) in instances.iter().enumerate() {
            if inst.valid {
                if inst.label.id == reference {
                    eq.push(i);
                } else {
                    neq.push(i);
                }
            }
        }
        let nbh = Neighborhood {
            center: z.clone(),
            reference: bb.label(reference),
            instances,
            eq,
            neq,
            params: params.clone(),
            seed,
            mutation_scale: scale,
            attempts: attempt_idx + 1,
        };
        if !nbh.eq.is_empty() && !nbh.neq.is_empty() {
            return Ok(nbh);
        }
        log::debug!(
            "neighborhood attempt {} at scale {scale}: {} same-class, {} other-class",
            attempt_idx + 1,
            nbh.eq.len(),
            nbh.neq.len()
        );
        last = Some(nbh);
        scale *= params.widen_factor;
    }
    Err(Error::DegenerateLocality { class: reference, neighborhood: Box::new(last.expect("at least one attempt")) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(v: &[f64]) -> LatentCode {
        LatentCode(v.to_vec())
    }

    #[test]
    fn fitness_examples() {
        let z = code(&[0.0; 4]);
        // Normalized distance 0.3 means Euclidean 0.6 for k = 4.
        let h = code(&[0.6, 0.0, 0.0, 0.0]);
        assert!((h.normalized_distance(&z) - 0.3).abs() < 1e-15);
        assert_eq!(fitness_value(true, &z, &z), 1.0);
        assert!((fitness_value(true, &h, &z) - 1.7).abs() < 1e-12);
        assert!((fitness_value(false, &h, &z) - 0.7).abs() < 1e-12);
        assert_eq!(fitness_value(false, &z, &z), 0.0);
        let far = code(&[2.0, 0.0, 0.0, 0.0]);
        assert!((fitness_value(false, &far, &z) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(GeneticParams::default().validate().is_ok());
        let bad = GeneticParams { tau: 1.0, ..GeneticParams::default() };
        assert!(bad.validate().is_err());
        let bad = GeneticParams { population: 1, ..GeneticParams::default() };
        assert!(bad.validate().is_err());
    }
}
