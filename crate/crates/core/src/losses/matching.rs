use super::dice::{dice_coefficient, vpq_similarity};
use super::targets::ClipTargets;
use crate::error::{Error, Result};
use crate::model::SlotLayout;

/// Tolerance under which two assignment totals count as tied.
const TIE_TOL: f64 = 1e-12;

/// Pairing of ground-truth tubes with prediction slots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// `(gt index, slot)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    /// Slots paired with nothing, ascending.
    pub unmatched_slots: Vec<usize>,
}

impl Matching {
    pub fn slot_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(g, _)| g == gt).map(|&(_, s)| s)
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`) with the shortest-augmenting-path Hungarian method.
fn min_cost_assignment(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let n = cost.len();
    let m = cols;
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best total similarity over injections of `rows` into `cols`.
fn best_total(sim: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| -sim[i][j]).collect())
        .collect();
    min_cost_assignment(&cost, cols.len())
        .iter()
        .zip(rows)
        .map(|(&c, &i)| sim[i][cols[c]])
        .sum()
}

/// Maximum-similarity assignment of `K` rows to distinct columns of a
/// `K×N` matrix. Among optimal assignments the lexicographically smallest
/// `(row → column)` sequence is returned.
pub fn hungarian_match(sim: &[Vec<f64>]) -> Result<Vec<usize>> {
    let k = sim.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = sim[0].len();
    if sim.iter().any(|r| r.len() != n) {
        return Err(Error::Contract(
            "similarity matrix rows differ in length".into(),
        ));
    }
    if k > n {
        return Err(Error::Capacity { gt: k, slots: n });
    }
    if let Some(bad) = sim.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite similarity {bad}")));
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let optimum = best_total(sim, &all_rows, &all_cols);

    // Fix rows in order to the smallest column that still admits an optimal
    // completion.
    let mut assignment = Vec::with_capacity(k);
    let mut used = vec![false; n];
    let mut fixed_total = 0.0;
    for i in 0..k {
        let rest_rows: Vec<usize> = (i + 1..k).collect();
        let mut chosen = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let rest_cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != j).collect();
            let total = fixed_total + sim[i][j] + best_total(sim, &rest_rows, &rest_cols);
            if total >= optimum - TIE_TOL {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        used[j] = true;
        fixed_total += sim[i][j];
        assignment.push(j);
    }
    Ok(assignment)
}

/// Similarity of every thing ground truth against every thing slot.
pub fn thing_similarity(
    class_probs: &[f64],
    tube_probs: &[f64],
    targets: &ClipTargets,
    layout: &SlotLayout,
    classes: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let pixels = targets.pixel_count();
    let thing_gts: Vec<usize> = (0..targets.tubes.len())
        .filter(|&i| targets.tubes[i].is_thing)
        .collect();
    let sim = thing_gts
        .iter()
        .map(|&i| {
            let gt = &targets.tubes[i];
            layout
                .thing_slots()
                .map(|j| {
                    let p = class_probs[j * (classes + 1) + gt.class_id as usize];
                    let d = dice_coefficient(&gt.mask, &tube_probs[j * pixels..(j + 1) * pixels])?;
                    Ok(vpq_similarity(p, d))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((thing_gts, sim))
}

/// Hungarian matching of thing tubes to thing slots plus the fixed pairing
/// of stuff tubes with their bound slots.
pub fn match_predictions(
    class_probs: &[f64],
    tube_probs: &[f64],
    targets: &ClipTargets,
    layout: &SlotLayout,
    classes: usize,
) -> Result<Matching> {
    let n = layout.memory();
    if class_probs.len() != n * (classes + 1) || tube_probs.len() != n * targets.pixel_count() {
        return Err(Error::Contract(
            "prediction sizes disagree with the slot layout".into(),
        ));
    }
    let (thing_gts, sim) = thing_similarity(class_probs, tube_probs, targets, layout, classes)?;
    let thing_slots = layout.thing_slots().len();
    if thing_gts.len() > thing_slots {
        return Err(Error::Capacity {
            gt: thing_gts.len(),
            slots: thing_slots,
        });
    }
    let assignment = hungarian_match(&sim)?;
    let mut pairs: Vec<(usize, usize)> = thing_gts
        .iter()
        .zip(&assignment)
        .map(|(&g, &j)| (g, layout.thing_slots().start + j))
        .collect();
    for (i, gt) in targets.tubes.iter().enumerate() {
        if !gt.is_thing {
            let slot = layout.slot_of_stuff(gt.class_id).ok_or_else(|| {
                Error::Contract(format!("stuff class {} has no memory slot", gt.class_id))
            })?;
            pairs.push((i, slot));
        }
    }
    pairs.sort_unstable();
    let mut taken = vec![false; n];
    for &(_, s) in &pairs {
        taken[s] = true;
    }
    let unmatched_slots = (0..n).filter(|&s| !taken[s]).collect();
    Ok(Matching {
        pairs,
        unmatched_slots,
    })
}
