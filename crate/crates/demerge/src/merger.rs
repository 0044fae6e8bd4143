//! A [`Merger`] that computes Fisher diagonals and Gram matrices from the
//! models it is handed, so combined-mode evolution can merge candidates whose
//! statistics were never precomputed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use demerge_core::eval::Evaluator;
use demerge_core::inference::{self, Batch, MlpSpec};
use demerge_core::merging::{
    self, FisherState, GramState, MergeAux, MergeError, MergeMethod, MergeSpec, Merger,
};
use demerge_core::FlatVector;

use crate::config::FisherConfig;

/// Entries kept per slot. Accepted members recur every generation; rejected
/// candidates never come back.
const CACHE_PER_SLOT: usize = 4;

type Cache<T> = Mutex<HashMap<usize, Vec<(FlatVector, Arc<T>)>>>;

pub struct ModelAwareMerger<'a> {
    spec: MlpSpec,
    /// Data for slot `i`'s statistics, normally that model's own dev split.
    slot_data: Vec<Batch>,
    fisher: FisherConfig,
    fisher_seed: u64,
    theta_pre: Option<FlatVector>,
    evaluator: Option<&'a dyn Evaluator>,
    fishers: Cache<FisherState>,
    grams: Cache<GramState>,
}

impl std::fmt::Debug for ModelAwareMerger<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelAwareMerger")
            .field("slots", &self.slot_data.len())
            .field("fisher", &self.fisher)
            .field("theta_pre", &self.theta_pre.is_some())
            .field("evaluator", &self.evaluator.is_some())
            .finish()
    }
}

fn cached<T>(
    cache: &Cache<T>,
    slot: usize,
    weights: &FlatVector,
    compute: impl FnOnce() -> Result<T, MergeError>,
) -> Result<Arc<T>, MergeError> {
    let hit = cache.lock().expect("lock").get(&slot).and_then(|entries| {
        entries
            .iter()
            .find(|(w, _)| w.bits_eq(weights))
            .map(|(_, s)| Arc::clone(s))
    });
    if let Some(stats) = hit {
        return Ok(stats);
    }
    let stats = Arc::new(compute()?);
    let mut guard = cache.lock().expect("lock");
    let entries = guard.entry(slot).or_default();
    if entries.len() == CACHE_PER_SLOT {
        entries.remove(0);
    }
    entries.push((weights.clone(), Arc::clone(&stats)));
    Ok(stats)
}

impl<'a> ModelAwareMerger<'a> {
    pub fn new(
        spec: MlpSpec,
        slot_data: Vec<Batch>,
        fisher: FisherConfig,
        fisher_seed: u64,
    ) -> Self {
        Self {
            spec,
            slot_data,
            fisher,
            fisher_seed,
            theta_pre: None,
            evaluator: None,
            fishers: Mutex::default(),
            grams: Mutex::default(),
        }
    }

    /// Base weights for TIES.
    pub fn with_theta_pre(mut self, theta_pre: FlatVector) -> Self {
        self.theta_pre = Some(theta_pre);
        self
    }

    /// Dev evaluator for greedy soup.
    pub fn with_evaluator(mut self, evaluator: &'a dyn Evaluator) -> Self {
        self.evaluator = Some(evaluator);
        self
    }

    fn data(&self, slot: usize) -> Result<&Batch, MergeError> {
        self.slot_data.get(slot).ok_or_else(|| {
            MergeError::InvalidParameter(format!(
                "slot {slot} has no statistics data ({} slots configured)",
                self.slot_data.len()
            ))
        })
    }

    pub fn fisher(
        &self,
        slot: usize,
        weights: &FlatVector,
    ) -> Result<Arc<FisherState>, MergeError> {
        let data = self.data(slot)?;
        let draws = if self.fisher.draws == 0 {
            data.len()
        } else {
            self.fisher.draws
        };
        cached(&self.fishers, slot, weights, || {
            inference::fisher_diagonal(
                &self.spec,
                weights,
                data,
                self.fisher.labels,
                draws,
                self.fisher_seed,
            )
            .map_err(|e| MergeError::Statistics(format!("Fisher for slot {slot}: {e}")))
        })
    }

    pub fn grams(&self, slot: usize, weights: &FlatVector) -> Result<Arc<GramState>, MergeError> {
        let data = self.data(slot)?;
        cached(&self.grams, slot, weights, || {
            inference::capture_grams(&self.spec, weights, data)
                .map_err(|e| MergeError::Statistics(format!("Grams for slot {slot}: {e}")))
        })
    }
}

impl Merger for ModelAwareMerger<'_> {
    fn merge(&self, models: &[&FlatVector], spec: &MergeSpec) -> Result<FlatVector, MergeError> {
        let mut aux = MergeAux {
            theta_pre: self.theta_pre.as_ref(),
            evaluator: self.evaluator,
            ..MergeAux::default()
        };
        let fishers: Vec<FisherState>;
        let grams: Vec<GramState>;
        if models.len() > 1 {
            match spec.method {
                MergeMethod::Fisher => {
                    fishers = models
                        .iter()
                        .enumerate()
                        .map(|(i, m)| self.fisher(i, m).map(|f| (*f).clone()))
                        .collect::<Result<_, _>>()?;
                    aux.fishers = Some(&fishers);
                }
                MergeMethod::RegMean => {
                    grams = models
                        .iter()
                        .enumerate()
                        .map(|(i, m)| self.grams(i, m).map(|g| (*g).clone()))
                        .collect::<Result<_, _>>()?;
                    aux.grams = Some(&grams);
                }
                _ => {}
            }
        }
        merging::merge(models, spec, &aux)
    }
}
