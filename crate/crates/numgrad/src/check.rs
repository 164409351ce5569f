//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{ComputeGraph, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Worst-case comparison for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// |analytic − numeric| / max(1, |analytic|, |numeric|), maximized over entries.
    pub max_rel_error: f64,
    /// Flat index where the maximum occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Compare the graph's analytic gradients against central finite differences
/// for every bound parameter, entry by entry.
///
/// The graph must be in deterministic mode: dropout masks were recorded at
/// construction and are replayed by `reeval`, and training-mode batch norm
/// recomputes batch statistics from the perturbed inputs. The store is
/// mutated during probing and restored before returning.
pub fn check_gradients(
    graph: &mut ComputeGraph,
    store: &mut ParamStore,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    graph.reeval(store)?;
    let analytic = graph.backward()?;
    let names: Vec<String> = graph.param_names().cloned().collect();

    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let len = store.get(&name)?.len();
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            passed: true,
        };
        for i in 0..len {
            let original = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = original + epsilon;
            graph.reeval(store)?;
            let plus = graph.loss_value()?;
            store.get_mut(&name)?.data_mut()[i] = original - epsilon;
            graph.reeval(store)?;
            let minus = graph.loss_value()?;
            store.get_mut(&name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[&name].data()[i];
            let err = rel_error(a, numeric);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic_at_worst = a;
                worst.numeric_at_worst = numeric;
            }
        }
        worst.passed = worst.max_rel_error <= tolerance;
        entries.push(worst);
    }
    graph.reeval(store)?;
    Ok(GradCheckReport { tolerance, entries })
}
