use ndarray::{s, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::plan::CompositionPlan;
use crate::data::{stratified_split_labels, Cohort, PatientRecord, Provenance, Splits};
use crate::error::{Error, Result};
use crate::model::{DataSchema, HealthGen, MODEL_TAG};
use crate::nn::{Graph, Mat};
use crate::rng::{substream, Rng};

/// Records sampled per tape; blocks run in parallel.
const BLOCK: usize = 256;

/// Validation share of a synthetic cohort's own split; synthetic cohorts
/// have no test split.
const SYNTHETIC_FRACTIONS: [f64; 3] = [0.70 / 0.85, 0.15 / 0.85, 0.0];

/// A trained model that can emit records for requested `(s, y)` pairs.
pub trait SequenceGenerator: Sync {
    fn schema(&self) -> &DataSchema;
    /// Stable id of the parameters, recorded in the synthetic provenance.
    fn generator_id(&self) -> String;
    /// One record per request; row `k` uses the stream `(seed, "sample",
    /// first + k)` so output does not depend on block boundaries.
    fn sample_block(&self, requests: &[(Vec<u32>, Vec<u8>)], first: usize, seed: u64) -> Result<Vec<PatientRecord>>;
}

/// Standard-normal and uniform draws for one generated record, in the order
/// they are consumed.
#[derive(Clone, Debug)]
pub struct SampleNoise {
    pub v: Vec<f64>,
    /// `T·D` uniforms compared against the mask probabilities.
    pub u: Vec<f64>,
    pub z0: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

impl SampleNoise {
    pub fn draw(rng: &mut Rng, steps: usize, features: usize, dim_v: usize, dim_z: usize) -> Self {
        let n = |k: usize, rng: &mut Rng| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
        let v = n(dim_v, rng);
        let u = (0..steps * features).map(|_| rng.random::<f64>()).collect();
        let z0 = n(dim_z, rng);
        let mut z = Vec::with_capacity(steps);
        let mut x = Vec::with_capacity(steps);
        for _ in 0..steps {
            z.push(n(dim_z, rng));
            x.push(n(features, rng));
        }
        SampleNoise { v, u, z0, z, x }
    }
}

fn stack(rows: &[&[f64]]) -> Mat {
    let cols = rows.first().map_or(0, |r| r.len());
    Mat::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

impl HealthGen {
    /// Ancestral sampling for a block of rows.
    ///
    /// `v ~ N(0, I)`, the whole mask from the mask decoder, `z_0 ~ N(0, I)`,
    /// then per step `z_t`, `x_t` and the next forward state, which consumes
    /// `x_t` with unobserved cells set to zero as in training.
    /// Returns `(x, m)` as `[B, T·D]`, with `x` zero where `m` is zero.
    pub fn generate_rows(&self, cond: &Mat, noise: &[SampleNoise]) -> Result<(Mat, Mat)> {
        let b = noise.len();
        if cond.nrows() != b || cond.ncols() != self.condition_width() {
            return Err(Error::shape("generation conditioning", b * self.condition_width(), cond.len()));
        }
        let (t_len, d) = (self.schema.steps, self.schema.features);
        let mut g = Graph::new(&self.store);
        let v = g.constant(stack(&noise.iter().map(|n| n.v.as_slice()).collect::<Vec<_>>()));
        let c = (cond.ncols() > 0).then(|| g.constant(cond.clone()));
        let probs = self.decode_m(&mut g, v, c);
        let u = stack(&noise.iter().map(|n| n.u.as_slice()).collect::<Vec<_>>());
        let m_flat = Mat::from_shape_fn((b, t_len * d), |(i, j)| (u[[i, j]] < g.value(probs)[[i, j]]) as u8 as f64);

        let mut x_flat = Mat::zeros((b, t_len * d));
        let zero_x = g.zeros(b, d);
        let h0 = g.zeros(b, self.config.dim_h);
        let mut h = self.h_step(&mut g, zero_x, v, h0);
        let mut z = g.constant(stack(&noise.iter().map(|n| n.z0.as_slice()).collect::<Vec<_>>()));
        for t in 0..t_len {
            let prior = self.dynamics_p(&mut g, z, h);
            z = prior.reparameterize(&mut g, stack(&noise.iter().map(|n| n.z[t].as_slice()).collect::<Vec<_>>()));
            let px = self.decode_x(&mut g, z, h, v, c);
            let xt = px.reparameterize(&mut g, stack(&noise.iter().map(|n| n.x[t].as_slice()).collect::<Vec<_>>()));
            let mut masked = g.value(xt).clone();
            let mt = m_flat.slice(s![.., t * d..(t + 1) * d]);
            ndarray::Zip::from(&mut masked).and(&mt).for_each(|x, &m| {
                if m == 0.0 {
                    *x = 0.0;
                }
            });
            x_flat.slice_mut(s![.., t * d..(t + 1) * d]).assign(&masked);
            if t + 1 < t_len {
                let fed = g.constant(masked);
                h = self.h_step(&mut g, fed, v, h);
            }
        }
        Ok((x_flat, m_flat))
    }

    /// One record for `(s, y)`. `s` is ignored unless the model conditions
    /// on statics.
    pub fn sample_patient(&self, s: &[u32], y: &[u8], rng: &mut Rng) -> Result<PatientRecord> {
        let noise = SampleNoise::draw(rng, self.schema.steps, self.schema.features, self.config.dim_v, self.config.dim_z);
        let cond = Mat::from_shape_vec((1, self.condition_width()), self.schema.condition_row(self.use_s(), s, y))
            .map_err(|e| Error::InvalidParam(e.to_string()))?;
        let (x, m) = self.generate_rows(&cond, std::slice::from_ref(&noise))?;
        Ok(to_record(String::new(), &x, &m, 0, &self.schema, s, y))
    }
}

/// Record `i` of flat `[B, T·D]` outputs, cast to storage types.
pub(crate) fn to_record(
    id: String,
    x: &Mat,
    m: &Mat,
    i: usize,
    schema: &DataSchema,
    s: &[u32],
    y: &[u8],
) -> PatientRecord {
    let (t_len, d) = (schema.steps, schema.features);
    let m_grid = Array2::from_shape_fn((t_len, d), |(t, j)| m[[i, t * d + j]] as u8);
    let x_grid = Array2::from_shape_fn((t_len, d), |(t, j)| {
        if m_grid[[t, j]] == 1 {
            x[[i, t * d + j]] as f32
        } else {
            0.0
        }
    });
    PatientRecord {
        id,
        x: x_grid,
        m: m_grid,
        s: s.to_vec(),
        y: y.to_vec(),
    }
}

impl SequenceGenerator for HealthGen {
    fn schema(&self) -> &DataSchema {
        &self.schema
    }

    fn generator_id(&self) -> String {
        format!("{MODEL_TAG}:{:016x}", self.store.fingerprint())
    }

    fn sample_block(&self, requests: &[(Vec<u32>, Vec<u8>)], first: usize, seed: u64) -> Result<Vec<PatientRecord>> {
        let (t_len, d) = (self.schema.steps, self.schema.features);
        let noise: Vec<SampleNoise> = (0..requests.len())
            .map(|k| {
                let mut rng = substream(seed, "sample", (first + k) as u64);
                SampleNoise::draw(&mut rng, t_len, d, self.config.dim_v, self.config.dim_z)
            })
            .collect();
        let width = self.condition_width();
        let mut cond = Mat::zeros((requests.len(), width));
        for (i, (s, y)) in requests.iter().enumerate() {
            cond.row_mut(i).assign(&ndarray::Array1::from(self.schema.condition_row(self.use_s(), s, y)));
        }
        let (x, m) = self.generate_rows(&cond, &noise)?;
        Ok(requests
            .iter()
            .enumerate()
            .map(|(i, (s, y))| to_record(String::new(), &x, &m, i, &self.schema, s, y))
            .collect())
    }
}

/// Expands `plan` into records, in plan order, with ids `syn-000000`, ...
///
/// The cohort carries the generator's manifest, vocabulary, labels and
/// standardizer, and its own stratified train/validation split on the
/// first label (everything in train when that is infeasible).
pub fn synthesize_cohort<G: SequenceGenerator>(generator: &G, plan: &CompositionPlan, seed: u64) -> Result<Cohort> {
    plan.validate()?;
    let schema = generator.schema();
    if plan.labels != schema.labels {
        return Err(Error::InvalidParam(format!(
            "plan labels {:?} differ from the generator's {:?}",
            plan.labels, schema.labels
        )));
    }
    for cell in &plan.cells {
        if cell.s.len() != schema.vocab.variables.len()
            || cell.s.iter().zip(&schema.vocab.variables).any(|(&c, v)| c as usize >= v.categories.len())
        {
            return Err(Error::InvalidParam(format!("plan cell static codes {:?} outside the vocabulary", cell.s)));
        }
    }
    let requests: Vec<(Vec<u32>, Vec<u8>)> = plan
        .cells
        .iter()
        .flat_map(|c| std::iter::repeat_n((c.s.clone(), c.y.clone()), c.count))
        .collect();
    let blocks: Vec<Vec<PatientRecord>> = requests
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(k, chunk)| generator.sample_block(chunk, k * BLOCK, seed))
        .collect::<Result<_>>()?;
    let mut records: Vec<PatientRecord> = blocks.into_iter().flatten().collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.id = format!("syn-{i:06}");
    }
    let labels: Vec<u8> = records.iter().map(|r| r.y.first().copied().unwrap_or(0)).collect();
    let splits = match stratified_split_labels(&labels, SYNTHETIC_FRACTIONS, seed) {
        Ok(s) => s,
        Err(Error::StratificationInfeasible { .. }) => Splits::all(records.len()),
        Err(e) => return Err(e),
    };
    let cohort = Cohort {
        records,
        manifest: schema.manifest()?,
        vocab: schema.vocab.clone(),
        label_names: schema.labels.clone(),
        standardizer: schema.standardizer.clone(),
        splits,
        provenance: Provenance::Synthetic {
            generator: generator.generator_id(),
            plan: serde_json::to_value(plan)?,
        },
    };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{plan_composition, PlanCell, PlanMode};
    use crate::model::tests::{micro_config, schema};
    use crate::model::HealthGenConfig;
    use std::collections::BTreeMap;

    fn model(cfg: HealthGenConfig) -> HealthGen {
        HealthGen::new(cfg, schema(4, 3), 7).unwrap()
    }

    fn plan(cells: Vec<(Vec<u32>, u8, usize)>) -> CompositionPlan {
        CompositionPlan {
            mode: PlanMode::MirrorReal,
            labels: vec!["vent".into()],
            cells: cells
                .into_iter()
                .map(|(s, y, count)| PlanCell { s, y: vec![y], count })
                .collect(),
            warnings: vec![],
        }
    }

    fn tab(c: &Cohort) -> BTreeMap<(Vec<u32>, Vec<u8>), usize> {
        let mut t = BTreeMap::new();
        for r in &c.records {
            *t.entry((r.s.clone(), r.y.clone())).or_default() += 1;
        }
        t
    }

    #[test]
    fn sample_shapes_and_binary_mask() {
        let m = model(micro_config());
        let r = m.sample_patient(&[0], &[1], &mut substream(1, "t", 0)).unwrap();
        assert_eq!(r.x.dim(), (4, 3));
        assert_eq!(r.m.dim(), (4, 3));
        assert!(r.m.iter().all(|&v| v <= 1));
        for (x, m) in r.x.iter().zip(r.m.iter()) {
            assert!(x.is_finite());
            if *m == 0 {
                assert_eq!(x.to_bits(), 0);
            }
        }
    }

    #[test]
    fn saturated_mask_decoder_observes_everything() {
        let mut m = model(micro_config());
        let last = m.config.dec_m_hidden.len();
        let w = m.store.id(&format!("theta_m.dec.{last}.weight")).unwrap();
        let b = m.store.id(&format!("theta_m.dec.{last}.bias")).unwrap();
        m.store.value_mut(w).fill(0.0);
        m.store.value_mut(b).fill(50.0);
        for k in 0..5 {
            let r = m.sample_patient(&[0], &[0], &mut substream(2, "t", k)).unwrap();
            assert!(r.m.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn cohort_matches_plan_exactly() {
        let m = model(micro_config());
        let p = plan(vec![(vec![0], 1, 7), (vec![2], 0, 5), (vec![1], 1, 3)]);
        let c = synthesize_cohort(&m, &p, 11).unwrap();
        assert_eq!(c.len(), 15);
        let t = tab(&c);
        assert_eq!(t[&(vec![0], vec![1])], 7);
        assert_eq!(t[&(vec![2], vec![0])], 5);
        assert_eq!(t[&(vec![1], vec![1])], 3);
        c.splits.check_partition(c.len()).unwrap();
        assert!(matches!(c.provenance, Provenance::Synthetic { .. }));
    }

    #[test]
    fn all_positive_plan() {
        let m = model(micro_config());
        let c = synthesize_cohort(&m, &plan(vec![(vec![0], 1, 10)]), 0).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.records.iter().all(|r| r.y == vec![1]));
    }

    #[test]
    fn mirror_plan_reproduces_positive_rate() {
        let real = crate::data::testutil::random_cohort(60, 4, 3, 5);
        let sch = DataSchema::from_cohort(&real, &["vent".into()]).unwrap();
        let m = HealthGen::new(micro_config(), sch, 7).unwrap();
        let idx: Vec<usize> = (0..real.len()).collect();
        let p = plan_composition(&real, &idx, &["vent".into()], &PlanMode::MirrorReal).unwrap();
        let c = synthesize_cohort(&m, &p, 3).unwrap();
        assert_eq!(c.positive_rate(0, &(0..c.len()).collect::<Vec<_>>()), real.positive_rate(0, &idx));
    }

    #[test]
    fn seeds_change_content_not_tabulation() {
        let m = model(micro_config());
        let p = plan(vec![(vec![0], 1, 6), (vec![1], 0, 6)]);
        let a = synthesize_cohort(&m, &p, 1).unwrap();
        let b = synthesize_cohort(&m, &p, 2).unwrap();
        assert_eq!(tab(&a), tab(&b));
        assert!(a.records.iter().zip(&b.records).any(|(r, q)| r.x != q.x || r.m != q.m));
        let again = synthesize_cohort(&m, &p, 1).unwrap();
        assert_eq!(a.records, again.records);
    }

    #[test]
    fn output_independent_of_block_boundaries() {
        let m = model(micro_config());
        let p = plan(vec![(vec![0], 1, BLOCK + 3)]);
        let c = synthesize_cohort(&m, &p, 4).unwrap();
        let single = m
            .sample_block(&[(vec![0], vec![1])], BLOCK + 1, 4)
            .unwrap()
            .remove(0);
        assert_eq!(c.records[BLOCK + 1].x, single.x);
        assert_eq!(c.records[BLOCK + 1].m, single.m);
    }

    #[test]
    fn unconditional_model_never_reads_statics() {
        let m = model(micro_config());
        assert!(!m.use_s());
        let a = synthesize_cohort(&m, &plan(vec![(vec![0], 1, 4), (vec![1], 0, 4)]), 9).unwrap();
        let b = synthesize_cohort(&m, &plan(vec![(vec![2], 1, 4), (vec![0], 0, 4)]), 9).unwrap();
        for (r, q) in a.records.iter().zip(&b.records) {
            assert_eq!(r.x.mapv(f32::to_bits), q.x.mapv(f32::to_bits));
            assert_eq!(r.m, q.m);
        }
    }

    #[test]
    fn conditional_model_reads_statics() {
        let cfg = HealthGenConfig {
            condition_on_s: true,
            ..micro_config()
        };
        let m = model(cfg);
        let a = synthesize_cohort(&m, &plan(vec![(vec![0], 1, 4)]), 9).unwrap();
        let b = synthesize_cohort(&m, &plan(vec![(vec![2], 1, 4)]), 9).unwrap();
        assert!(a.records.iter().zip(&b.records).any(|(r, q)| r.x != q.x));
    }

    #[test]
    fn plan_outside_vocabulary_rejected() {
        let m = model(micro_config());
        assert!(synthesize_cohort(&m, &plan(vec![(vec![5], 1, 2)]), 0).is_err());
    }
}
