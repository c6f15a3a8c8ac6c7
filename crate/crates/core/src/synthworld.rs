//! Seeded synthetic scenes: per-(class, attribute) embedding clusters with
//! 2-D centroids, background tokens, and query embeddings, so selection and
//! loss behavior can be measured against known ground truth.
//!
//! Geometry: each class gets a random unit prototype direction; its
//! attribute prototypes sit at a common angle `attribute_separation` from
//! one another (class center + scaled simplex directions in the orthogonal
//! complement). Tokens are prototypes plus isotropic Gaussian noise of scale
//! `1/concentration`, re-normalized onto the sphere, which makes small
//! separations plus noise produce exactly the confusable same-class,
//! different-attribute tokens the selection mechanism has to cope with.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, ExpressionEmbedding, QueryKind, TokenBatch, TokenEmbedding, TokenLabel};
use crate::error::{Error, Result};
use crate::Point;

/// Current scenario document version.
pub const SCENARIO_VERSION: u32 = 1;

/// One object class: how many target tokens each of its attributes gets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// Target token count per attribute; length = number of attributes.
    pub attribute_targets: Vec<usize>,
}

impl ClassSpec {
    pub fn new(attribute_targets: Vec<usize>) -> Self {
        Self { attribute_targets }
    }

    pub fn uniform(attributes: usize, targets_each: usize) -> Self {
        Self {
            attribute_targets: vec![targets_each; attributes],
        }
    }
}

/// Everything needed to generate a scenario deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Embedding dimension D.
    pub dimension: usize,
    pub classes: Vec<ClassSpec>,
    /// Random unit-vector tokens carrying no object.
    pub background_tokens: usize,
    /// Cluster concentration kappa; token noise scale is 1/kappa.
    pub concentration: f64,
    /// Angle between attribute prototypes of the same class, radians in
    /// (0, pi).
    pub attribute_separation: f64,
    /// Side length of the square scene.
    pub scene_extent: f64,
    /// Minimum distance between placed centroids.
    pub min_spacing: f64,
    /// Noise scale applied to query embeddings (0 = queries equal the
    /// prototypes exactly).
    pub query_noise: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dimension: 16,
            classes: vec![ClassSpec::uniform(2, 10)],
            background_tokens: 20,
            concentration: 18.0,
            attribute_separation: 0.5,
            scene_extent: 100.0,
            min_spacing: 1.0,
            query_noise: 0.0,
        }
    }
}

impl ScenarioSpec {
    /// Check the spec invariants.
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(Error::InvalidConfig(format!(
                "dimension must be at least 2, got {}",
                self.dimension
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("at least one class required".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.attribute_targets.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "class {i} has no attributes"
                )));
            }
        }
        if !(self.attribute_separation > 0.0 && self.attribute_separation < std::f64::consts::PI) {
            return Err(Error::InvalidConfig(format!(
                "attribute separation must lie strictly in (0, pi), got {}",
                self.attribute_separation
            )));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        if !(self.scene_extent > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "scene extent must be positive, got {}",
                self.scene_extent
            )));
        }
        if self.min_spacing < 0.0 || self.query_noise < 0.0 {
            return Err(Error::InvalidConfig(
                "min_spacing and query_noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Total number of target (real-object) tokens.
    pub fn total_targets(&self) -> usize {
        self.classes
            .iter()
            .map(|c| c.attribute_targets.iter().sum::<usize>())
            .sum()
    }
}

/// A query embedding together with what it refers to and its ground-truth
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioQuery {
    pub class: usize,
    /// `None` marks the class-agnostic (class-only) query.
    pub attribute: Option<usize>,
    pub embedding: ExpressionEmbedding,
    pub n_ground_truth: usize,
}

/// A generated scene: the labeled token batch, per-token centroids (None
/// for background tokens), and the query embeddings with their counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScenarioDoc", try_from = "ScenarioDoc")]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub batch: TokenBatch,
    pub points: Vec<Option<Point>>,
    pub queries: Vec<ScenarioQuery>,
}

impl Scenario {
    /// The batch with `is_target` rewritten relative to one query: true for
    /// tokens the query actually refers to (matching class, and matching
    /// attribute unless the query is class-only).
    pub fn batch_for_query(&self, query: &ScenarioQuery) -> TokenBatch {
        let labels = self
            .batch
            .labels()
            .expect("scenario batches always carry labels")
            .iter()
            .map(|l| TokenLabel {
                class: l.class,
                attribute: l.attribute,
                is_target: l.is_target
                    && l.class == Some(query.class)
                    && query.attribute.map_or(true, |a| l.attribute == Some(a)),
            })
            .collect();
        let id = match query.attribute {
            Some(a) => format!("{}:c{}a{}", self.batch.instance_id(), query.class, a),
            None => format!("{}:c{}", self.batch.instance_id(), query.class),
        };
        self.batch
            .clone()
            .with_labels(labels)
            .expect("label count unchanged")
            .with_instance_id(id)
    }

    /// Ground-truth centroids of the query's target tokens.
    pub fn target_points(&self, query: &ScenarioQuery) -> Vec<Point> {
        let batch = self.batch_for_query(query);
        let labels = batch.labels().expect("labels present");
        self.points
            .iter()
            .zip(labels)
            .filter_map(|(p, l)| if l.is_target { *p } else { None })
            .collect()
    }

    /// The class-only query for a class, if present.
    pub fn class_query(&self, class: usize) -> Option<&ScenarioQuery> {
        self.queries
            .iter()
            .find(|q| q.class == class && q.attribute.is_none())
    }
}

/// Draw a standard Gaussian vector.
fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random unit vector.
fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(u) = normalize(&gaussian_vector(rng, dim)) {
            return u;
        }
    }
}

/// Orthonormal basis of size k in the complement of `center`.
fn complement_basis(rng: &mut ChaCha8Rng, center: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    let dim = center.len();
    if dim < k + 1 {
        return Err(Error::InfeasibleSpec(format!(
            "dimension {dim} too small for {k} attributes (need at least {})",
            k + 1
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while basis.len() < k {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InfeasibleSpec(
                "could not build an orthonormal attribute basis".into(),
            ));
        }
        let mut v = gaussian_vector(rng, dim);
        for prev in std::iter::once(center).chain(basis.iter().map(|b| b.as_slice())) {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= proj * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

/// Attribute prototypes for one class: unit vectors at pairwise angle
/// `theta` from one another, all at a common angle from the class center.
///
/// Uses regular-simplex directions in the orthogonal complement, so the
/// pairwise angle is exact whenever `(k-1) cos(theta) + 1 >= 0`.
fn attribute_prototypes(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    k: usize,
    theta: f64,
) -> Result<Vec<Vec<f64>>> {
    if k == 1 {
        return Ok(vec![center.to_vec()]);
    }
    let cos_theta = theta.cos();
    let cos2_rho = ((k as f64 - 1.0) * cos_theta + 1.0) / k as f64;
    if cos2_rho < 0.0 {
        return Err(Error::InfeasibleSpec(format!(
            "separation {theta} rad is unreachable for {k} attributes"
        )));
    }
    let rho = cos2_rho.sqrt().acos();
    let basis = complement_basis(rng, center, k)?;

    // Regular simplex: k unit vectors with pairwise dot -1/(k-1), expressed
    // in the complement basis.
    let mut simplex = Vec::with_capacity(k);
    for j in 0..k {
        let mut coords = vec![-1.0 / k as f64; k];
        coords[j] += 1.0;
        let norm: f64 = coords.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut dir = vec![0.0; center.len()];
        for (m, c) in coords.iter().enumerate() {
            for (d, b) in dir.iter_mut().zip(&basis[m]) {
                *d += (c / norm) * b;
            }
        }
        simplex.push(dir);
    }

    let (cos_rho, sin_rho) = (rho.cos(), rho.sin());
    Ok(simplex
        .into_iter()
        .map(|u| {
            center
                .iter()
                .zip(&u)
                .map(|(c, ui)| cos_rho * c + sin_rho * ui)
                .collect()
        })
        .collect())
}

/// Sample centroids uniformly in the scene square with minimum spacing.
fn place_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    extent: f64,
    min_spacing: f64,
) -> Result<Vec<Point>> {
    let mut placed: Vec<Point> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..10_000 {
            let candidate = [rng.gen::<f64>() * extent, rng.gen::<f64>() * extent];
            let clear = placed.iter().all(|p| {
                let dx = p[0] - candidate[0];
                let dy = p[1] - candidate[1];
                (dx * dx + dy * dy).sqrt() >= min_spacing
            });
            if clear {
                placed.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {count} centroids with spacing {min_spacing} in extent {extent}"
            )));
        }
    }
    Ok(placed)
}

fn perturbed_query(
    rng: &mut ChaCha8Rng,
    prototype: &[f64],
    noise: f64,
    kind: QueryKind,
) -> Result<ExpressionEmbedding> {
    if noise == 0.0 {
        return ExpressionEmbedding::normalized(prototype, kind);
    }
    let g = gaussian_vector(rng, prototype.len());
    let values: Vec<f64> = prototype
        .iter()
        .zip(&g)
        .map(|(p, n)| p + noise * n)
        .collect();
    ExpressionEmbedding::normalized(&values, kind)
}

/// Generate a scenario. Pure function of the spec: identical specs
/// (including the seed) produce bit-identical scenarios.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_scale = 1.0 / spec.concentration;

    let mut tokens: Vec<TokenEmbedding> = Vec::new();
    let mut labels: Vec<TokenLabel> = Vec::new();
    let mut prototypes: Vec<(Vec<f64>, Vec<Vec<f64>>)> = Vec::new(); // (center, per-attribute)

    for class in &spec.classes {
        let center = random_unit(&mut rng, spec.dimension);
        let protos = attribute_prototypes(
            &mut rng,
            &center,
            class.attribute_targets.len(),
            spec.attribute_separation,
        )?;
        prototypes.push((center, protos));
    }

    for (ci, class) in spec.classes.iter().enumerate() {
        for (ai, &count) in class.attribute_targets.iter().enumerate() {
            let proto = &prototypes[ci].1[ai];
            for _ in 0..count {
                let g = gaussian_vector(&mut rng, spec.dimension);
                let values: Vec<f64> = proto
                    .iter()
                    .zip(&g)
                    .map(|(p, n)| p + noise_scale * n)
                    .collect();
                tokens.push(TokenEmbedding::normalized(&values)?);
                labels.push(TokenLabel {
                    class: Some(ci),
                    attribute: Some(ai),
                    is_target: true,
                });
            }
        }
    }
    let real_tokens = tokens.len();
    for _ in 0..spec.background_tokens {
        tokens.push(TokenEmbedding::new(random_unit(&mut rng, spec.dimension))?);
        labels.push(TokenLabel {
            class: None,
            attribute: None,
            is_target: false,
        });
    }

    let placed = place_points(&mut rng, real_tokens, spec.scene_extent, spec.min_spacing)?;
    let mut points: Vec<Option<Point>> = placed.into_iter().map(Some).collect();
    points.extend(std::iter::repeat(None).take(spec.background_tokens));

    let mut queries = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        for (ai, &count) in class.attribute_targets.iter().enumerate() {
            queries.push(ScenarioQuery {
                class: ci,
                attribute: Some(ai),
                embedding: perturbed_query(
                    &mut rng,
                    &prototypes[ci].1[ai],
                    spec.query_noise,
                    QueryKind::MaskedExpression,
                )?,
                n_ground_truth: count,
            });
        }
    }
    for (ci, class) in spec.classes.iter().enumerate() {
        queries.push(ScenarioQuery {
            class: ci,
            attribute: None,
            embedding: perturbed_query(
                &mut rng,
                &prototypes[ci].0,
                spec.query_noise,
                QueryKind::ClassOnly,
            )?,
            n_ground_truth: class.attribute_targets.iter().sum(),
        });
    }

    let batch = TokenBatch::new(tokens, Some(labels), format!("scn-{}", spec.seed))?;
    Ok(Scenario {
        spec: spec.clone(),
        batch,
        points,
        queries,
    })
}

/// Sweepable spec parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// `attribute_separation` (theta).
    Theta,
    /// `concentration` (kappa).
    Kappa,
    /// `background_tokens`.
    BackgroundCount,
    /// Targets per attribute, applied to every class and attribute.
    TargetsPerAttribute,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" | "attribute-separation" => Ok(Self::Theta),
            "kappa" | "concentration" => Ok(Self::Kappa),
            "background" | "background-count" => Ok(Self::BackgroundCount),
            "targets" | "targets-per-attribute" => Ok(Self::TargetsPerAttribute),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }
}

impl SweepAxis {
    pub fn apply(&self, spec: &ScenarioSpec, value: f64) -> Result<ScenarioSpec> {
        let mut spec = spec.clone();
        match self {
            SweepAxis::Theta => spec.attribute_separation = value,
            SweepAxis::Kappa => spec.concentration = value,
            SweepAxis::BackgroundCount | SweepAxis::TargetsPerAttribute => {
                if value < 0.0 || value.fract() != 0.0 || !value.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "count-valued sweep axis needs a non-negative integer, got {value}"
                    )));
                }
                let count = value as usize;
                match self {
                    SweepAxis::BackgroundCount => spec.background_tokens = count,
                    SweepAxis::TargetsPerAttribute => {
                        for class in &mut spec.classes {
                            for t in &mut class.attribute_targets {
                                *t = count;
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
        Ok(spec)
    }
}

/// One scenario per value, varying a single spec parameter. Seeds derive
/// deterministically from the template seed and the value index
/// (`seed + index`); all other fields are preserved.
pub fn sweep(template: &ScenarioSpec, axis: &str, values: &[f64]) -> Result<Vec<Scenario>> {
    let axis: SweepAxis = axis.parse()?;
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut spec = axis.apply(template, value)?;
            spec.seed = template.seed.wrapping_add(i as u64);
            generate(&spec)
        })
        .collect()
}

// --- serialized document -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenDoc {
    values: Vec<f64>,
    class: Option<usize>,
    attribute: Option<usize>,
    is_target: bool,
    point: Option<Point>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryDoc {
    class: usize,
    attribute: Option<usize>,
    values: Vec<f64>,
    n: usize,
}

/// Versioned on-disk form of a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    version: u32,
    spec: ScenarioSpec,
    tokens: Vec<TokenDoc>,
    queries: Vec<QueryDoc>,
}

impl From<Scenario> for ScenarioDoc {
    fn from(s: Scenario) -> Self {
        let labels = s.batch.labels().expect("scenario batches carry labels");
        let tokens = s
            .batch
            .tokens()
            .iter()
            .zip(labels)
            .zip(&s.points)
            .map(|((t, l), p)| TokenDoc {
                values: t.values().to_vec(),
                class: l.class,
                attribute: l.attribute,
                is_target: l.is_target,
                point: *p,
            })
            .collect();
        let queries = s
            .queries
            .iter()
            .map(|q| QueryDoc {
                class: q.class,
                attribute: q.attribute,
                values: q.embedding.values().to_vec(),
                n: q.n_ground_truth,
            })
            .collect();
        ScenarioDoc {
            version: SCENARIO_VERSION,
            spec: s.spec,
            tokens,
            queries,
        }
    }
}

impl TryFrom<ScenarioDoc> for Scenario {
    type Error = Error;

    fn try_from(doc: ScenarioDoc) -> Result<Self> {
        if doc.version != SCENARIO_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                doc.version
            )));
        }
        doc.spec.validate()?;
        let mut tokens = Vec::with_capacity(doc.tokens.len());
        let mut labels = Vec::with_capacity(doc.tokens.len());
        let mut points = Vec::with_capacity(doc.tokens.len());
        for t in doc.tokens {
            tokens.push(TokenEmbedding::new(t.values)?);
            labels.push(TokenLabel {
                class: t.class,
                attribute: t.attribute,
                is_target: t.is_target,
            });
            points.push(t.point);
        }
        let queries = doc
            .queries
            .into_iter()
            .map(|q| {
                let kind = if q.attribute.is_some() {
                    QueryKind::MaskedExpression
                } else {
                    QueryKind::ClassOnly
                };
                Ok(ScenarioQuery {
                    class: q.class,
                    attribute: q.attribute,
                    embedding: ExpressionEmbedding::new(q.values, kind)?,
                    n_ground_truth: q.n,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = TokenBatch::new(tokens, Some(labels), format!("scn-{}", doc.spec.seed))?;
        Ok(Scenario {
            spec: doc.spec,
            batch,
            points,
            queries,
        })
    }
}
