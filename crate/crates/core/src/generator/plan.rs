use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanMode {
    /// Same size and (s, y) cross-tabulation as the real records.
    MirrorReal,
    /// Same total, split equally over the categories of one static variable.
    BalancedOver { variable: String },
    /// Synthetic-only top-up that brings every category of one static
    /// variable to the size of the largest.
    AugmentToParity { variable: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCell {
    pub s: Vec<u32>,
    pub y: Vec<u8>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub mode: PlanMode,
    /// Label names the `y` vectors refer to.
    pub labels: Vec<String>,
    pub cells: Vec<PlanCell>,
    /// Categories that could not be planned, e.g. absent from the real data.
    pub warnings: Vec<String>,
}

impl CompositionPlan {
    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Records planned per category of static variable `var`.
    pub fn category_counts(&self, var: usize, categories: usize) -> Vec<usize> {
        let mut out = vec![0; categories];
        for c in &self.cells {
            out[c.s[var] as usize] += c.count;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::InvalidParam("composition plan has no records".into()));
        }
        if self.cells.iter().any(|c| c.y.len() != self.labels.len()) {
            return Err(Error::InvalidParam("plan cell label width mismatch".into()));
        }
        Ok(())
    }
}

/// Splits `total` proportionally to `weights` by largest remainder; ties go
/// to the lower index.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Plans a synthetic cohort from the real records at `indices`.
pub fn plan_composition(
    cohort: &Cohort,
    indices: &[usize],
    labels: &[String],
    mode: &PlanMode,
) -> Result<CompositionPlan> {
    let label_idx: Vec<usize> = labels.iter().map(|l| cohort.label_index(l)).collect::<Result<_>>()?;
    let mut table: BTreeMap<(Vec<u32>, Vec<u8>), usize> = BTreeMap::new();
    for &i in indices {
        let r = &cohort.records[i];
        let y = label_idx.iter().map(|&l| r.y[l]).collect();
        *table.entry((r.s.clone(), y)).or_default() += 1;
    }
    let real: Vec<PlanCell> = table
        .into_iter()
        .map(|((s, y), count)| PlanCell { s, y, count })
        .collect();
    let mut warnings = Vec::new();
    let cells = match mode {
        PlanMode::MirrorReal => real,
        PlanMode::BalancedOver { variable } | PlanMode::AugmentToParity { variable } => {
            let var = cohort.vocab.variable_index(variable).ok_or_else(|| Error::Unknown {
                kind: "static variable".into(),
                name: variable.clone(),
            })?;
            let cats = &cohort.vocab.variables[var].categories;
            let per_cat: Vec<usize> = (0..cats.len())
                .map(|k| real.iter().filter(|c| c.s[var] as usize == k).map(|c| c.count).sum())
                .collect();
            let present: Vec<usize> = (0..cats.len()).filter(|&k| per_cat[k] > 0).collect();
            for (k, name) in cats.iter().enumerate() {
                if per_cat[k] == 0 {
                    warnings.push(format!("category {name} of {variable} has no real records; planned 0"));
                }
            }
            let targets: Vec<usize> = match mode {
                PlanMode::BalancedOver { .. } => {
                    let shares = apportion(indices.len(), &vec![1; present.len()]);
                    let mut t = vec![0; cats.len()];
                    present.iter().zip(shares).for_each(|(&k, n)| t[k] = n);
                    t
                }
                _ => {
                    let max = per_cat.iter().copied().max().unwrap_or(0);
                    (0..cats.len())
                        .map(|k| if per_cat[k] > 0 { max - per_cat[k] } else { 0 })
                        .collect()
                }
            };
            let mut cells = Vec::new();
            for k in present {
                let within: Vec<&PlanCell> = real.iter().filter(|c| c.s[var] as usize == k).collect();
                let counts = apportion(targets[k], &within.iter().map(|c| c.count).collect::<Vec<_>>());
                for (c, n) in within.into_iter().zip(counts) {
                    if n > 0 {
                        cells.push(PlanCell {
                            s: c.s.clone(),
                            y: c.y.clone(),
                            count: n,
                        });
                    }
                }
            }
            cells
        }
    };
    Ok(CompositionPlan {
        mode: mode.clone(),
        labels: labels.to_vec(),
        cells,
        warnings,
    })
}
