//! State space and transition structure of a multi-state model.
//!
//! A [`TransitionModel`] holds two views of the same process:
//!
//! * the *observed* model: the states and transitions that appear in the data;
//! * the *extended* model: every observed transition into a death state that
//!   carries a split annotation is replaced by an excess and a population
//!   transition, each leading to its own absorbing state.
//!
//! Observed transitions have dense ids `1..=M`. Derived transitions get ids
//! `M+1, M+2, ...`, two per split (excess first, then population), in the
//! order the splits were declared.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a state in the observed model (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub usize);

/// Transition id, dense and 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransId(pub u32);

impl TransId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for TransId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has no states")]
    Empty,
    #[error("duplicate state label `{0}`")]
    DuplicateState(String),
    #[error("transition references unknown state `{0}`")]
    UnknownState(String),
    #[error("transition from `{0}` to itself")]
    SelfTransition(String),
    #[error("duplicate transition `{0}` -> `{1}`")]
    DuplicateTransition(String, String),
    #[error("transition out of absorbing state `{0}`")]
    FromAbsorbing(String),
    #[error("transient state `{0}` has no outgoing transition")]
    NoExit(String),
    #[error("split annotation references unknown transition {0}")]
    UnknownTransition(TransId),
    #[error("transition {0} is split more than once")]
    DuplicateSplit(TransId),
    #[error("transition {0} does not lead to a death (absorbing) state and cannot be split")]
    SplitNonDeath(TransId),
    #[error("state label `{0}` produced by a split clashes with an existing state")]
    LabelClash(String),
    #[error("invalid model config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read model config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpec {
    #[serde(alias = "label")]
    pub name: String,
    #[serde(default)]
    pub absorbing: bool,
}

impl StateSpec {
    pub fn transient(name: &str) -> Self {
        Self { name: name.to_string(), absorbing: false }
    }

    pub fn absorbing(name: &str) -> Self {
        Self { name: name.to_string(), absorbing: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: String,
    pub to: String,
}

impl TransitionSpec {
    pub fn new(from: &str, to: &str) -> Self {
        Self { from: from.to_string(), to: to.to_string() }
    }
}

/// A split annotation: the bare id, or the id with explicit labels for the
/// two derived states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Id(u32),
    Labelled {
        trans: u32,
        #[serde(default)]
        excess: Option<String>,
        #[serde(default)]
        population: Option<String>,
    },
}

impl SplitSpec {
    fn trans(&self) -> TransId {
        match self {
            SplitSpec::Id(id) => TransId(*id),
            SplitSpec::Labelled { trans, .. } => TransId(*trans),
        }
    }
}

/// JSON form of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub states: Vec<StateSpec>,
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub split: Vec<SplitSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Observed,
    Excess,
    Population,
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransitionKind::Observed => "observed",
            TransitionKind::Excess => "excess",
            TransitionKind::Population => "population",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedTransition {
    pub id: TransId,
    pub from: StateId,
    pub to: StateId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub parent: TransId,
    pub excess: TransId,
    pub population: TransId,
}

/// A state of the extended model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtState {
    pub label: String,
    pub absorbing: bool,
    /// Observed state this one stands for (split states map to the death state they replace).
    pub origin: StateId,
    pub kind: TransitionKind,
}

/// A transition of the extended model; `from`/`to` index [`TransitionModel::ext_states`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtTransition {
    pub id: TransId,
    pub from: usize,
    pub to: usize,
    pub kind: TransitionKind,
    /// Observed transition this one derives from (itself for unsplit transitions).
    pub parent: TransId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    states: Vec<StateSpec>,
    transitions: Vec<ObservedTransition>,
    splits: Vec<Split>,
    ext_states: Vec<ExtState>,
    ext_transitions: Vec<ExtTransition>,
    obs_to_ext: Vec<Option<usize>>,
    split_specs: Vec<SplitSpec>,
}

/// Validates the observed structure and derives the extended model.
pub fn build_model(
    states: &[StateSpec],
    transitions: &[TransitionSpec],
    split: &[SplitSpec],
) -> Result<TransitionModel, ModelError> {
    if states.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut index = HashMap::new();
    for (i, s) in states.iter().enumerate() {
        if index.insert(s.name.as_str(), StateId(i)).is_some() {
            return Err(ModelError::DuplicateState(s.name.clone()));
        }
    }
    let lookup = |name: &str| index.get(name).copied().ok_or_else(|| ModelError::UnknownState(name.to_string()));

    let mut seen = HashSet::new();
    let mut obs = Vec::with_capacity(transitions.len());
    for (i, t) in transitions.iter().enumerate() {
        let from = lookup(&t.from)?;
        let to = lookup(&t.to)?;
        if from == to {
            return Err(ModelError::SelfTransition(t.from.clone()));
        }
        if states[from.0].absorbing {
            return Err(ModelError::FromAbsorbing(t.from.clone()));
        }
        if !seen.insert((from, to)) {
            return Err(ModelError::DuplicateTransition(t.from.clone(), t.to.clone()));
        }
        obs.push(ObservedTransition { id: TransId(i as u32 + 1), from, to });
    }
    for (i, s) in states.iter().enumerate() {
        if !s.absorbing && !obs.iter().any(|t| t.from.0 == i) {
            return Err(ModelError::NoExit(s.name.clone()));
        }
    }

    let m = obs.len() as u32;
    let mut splits = Vec::with_capacity(split.len());
    let mut split_seen = HashSet::new();
    for (k, spec) in split.iter().enumerate() {
        let parent = spec.trans();
        if parent.0 == 0 || parent.0 > m {
            return Err(ModelError::UnknownTransition(parent));
        }
        if !split_seen.insert(parent) {
            return Err(ModelError::DuplicateSplit(parent));
        }
        let target = obs[parent.index()].to;
        if !states[target.0].absorbing {
            return Err(ModelError::SplitNonDeath(parent));
        }
        let k = k as u32;
        splits.push(Split {
            parent,
            excess: TransId(m + 2 * k + 1),
            population: TransId(m + 2 * k + 2),
        });
    }

    // An observed death state disappears when every transition into it is split.
    let removed: Vec<bool> = (0..states.len())
        .map(|i| {
            let incoming: Vec<_> = obs.iter().filter(|t| t.to.0 == i).collect();
            !incoming.is_empty() && incoming.iter().all(|t| split_seen.contains(&t.id))
        })
        .collect();

    let mut ext_states = Vec::new();
    let mut obs_to_ext = vec![None; states.len()];
    for (i, s) in states.iter().enumerate() {
        if !removed[i] {
            obs_to_ext[i] = Some(ext_states.len());
            ext_states.push(ExtState {
                label: s.name.clone(),
                absorbing: s.absorbing,
                origin: StateId(i),
                kind: TransitionKind::Observed,
            });
        }
    }

    let mut ext_transitions: Vec<ExtTransition> = obs
        .iter()
        .filter(|t| !split_seen.contains(&t.id))
        .map(|t| ExtTransition {
            id: t.id,
            from: obs_to_ext[t.from.0].expect("source states are never removed"),
            to: obs_to_ext[t.to.0].expect("unsplit targets are kept"),
            kind: TransitionKind::Observed,
            parent: t.id,
        })
        .collect();

    let mut labels: HashSet<String> = ext_states.iter().map(|s| s.label.clone()).collect();
    for (sp, spec) in splits.iter().zip(split) {
        let parent = obs[sp.parent.index()];
        let target = &states[parent.to.0].name;
        let shared = obs.iter().filter(|t| t.to == parent.to && split_seen.contains(&t.id)).count() > 1;
        let default = |suffix: &str| {
            if shared {
                format!("{}.{}[{}]", target, suffix, states[parent.from.0].name)
            } else {
                format!("{}.{}", target, suffix)
            }
        };
        let (e_label, p_label) = match spec {
            SplitSpec::Labelled { excess, population, .. } => (
                excess.clone().unwrap_or_else(|| default("e")),
                population.clone().unwrap_or_else(|| default("p")),
            ),
            SplitSpec::Id(_) => (default("e"), default("p")),
        };
        let from = obs_to_ext[parent.from.0].expect("source states are never removed");
        for (label, kind, id) in [
            (e_label, TransitionKind::Excess, sp.excess),
            (p_label, TransitionKind::Population, sp.population),
        ] {
            if !labels.insert(label.clone()) {
                return Err(ModelError::LabelClash(label));
            }
            let to = ext_states.len();
            ext_states.push(ExtState { label, absorbing: true, origin: parent.to, kind });
            ext_transitions.push(ExtTransition { id, from, to, kind, parent: sp.parent });
        }
    }

    Ok(TransitionModel {
        states: states.to_vec(),
        transitions: obs,
        splits,
        ext_states,
        ext_transitions,
        obs_to_ext,
        split_specs: split.to_vec(),
    })
}

impl TransitionModel {
    pub fn from_config(config: &ModelConfig) -> Result<Self, ModelError> {
        build_model(&config.states, &config.transitions, &config.split)
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_str(s)?;
        Self::from_config(&config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            states: self.states.clone(),
            transitions: self
                .transitions
                .iter()
                .map(|t| TransitionSpec::new(&self.states[t.from.0].name, &self.states[t.to.0].name))
                .collect(),
            split: self.split_specs.clone(),
        }
    }

    /// Illness-death model with relapse: ARF -> Relapse, ARF -> NRM, Relapse -> DaR,
    /// with both death transitions split.
    pub fn illness_death() -> Self {
        let states = [
            StateSpec::transient("ARF"),
            StateSpec::transient("Relapse"),
            StateSpec::absorbing("NRM"),
            StateSpec::absorbing("DaR"),
        ];
        let transitions = [
            TransitionSpec::new("ARF", "Relapse"),
            TransitionSpec::new("ARF", "NRM"),
            TransitionSpec::new("Relapse", "DaR"),
        ];
        build_model(&states, &transitions, &[SplitSpec::Id(2), SplitSpec::Id(3)])
            .expect("illness-death model is valid")
    }

    /// The same observed model with every split annotation removed.
    pub fn without_splits(&self) -> Self {
        let transitions: Vec<_> = self
            .transitions
            .iter()
            .map(|t| TransitionSpec::new(&self.states[t.from.0].name, &self.states[t.to.0].name))
            .collect();
        build_model(&self.states, &transitions, &[]).expect("observed part was already validated")
    }

    pub fn states(&self) -> &[StateSpec] {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_id(&self, label: &str) -> Option<StateId> {
        self.states.iter().position(|s| s.name == label).map(StateId)
    }

    pub fn is_absorbing(&self, state: StateId) -> bool {
        self.states[state.0].absorbing
    }

    pub fn transitions(&self) -> &[ObservedTransition] {
        &self.transitions
    }

    pub fn transition(&self, id: TransId) -> Option<&ObservedTransition> {
        if id.0 == 0 {
            return None;
        }
        self.transitions.get(id.index())
    }

    pub fn outgoing(&self, state: StateId) -> impl Iterator<Item = &ObservedTransition> {
        self.transitions.iter().filter(move |t| t.from == state)
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, parent: TransId) -> Option<&Split> {
        self.splits.iter().find(|s| s.parent == parent)
    }

    pub fn ext_states(&self) -> &[ExtState] {
        &self.ext_states
    }

    pub fn n_ext_states(&self) -> usize {
        self.ext_states.len()
    }

    /// Active transitions of the extended model (split parents replaced by their halves).
    pub fn ext_transitions(&self) -> &[ExtTransition] {
        &self.ext_transitions
    }

    pub fn ext_transition(&self, id: TransId) -> Option<&ExtTransition> {
        self.ext_transitions.iter().find(|t| t.id == id)
    }

    /// Extended-state index of an observed state, `None` when it was replaced by split states.
    pub fn ext_index(&self, state: StateId) -> Option<usize> {
        self.obs_to_ext[state.0]
    }

    pub fn ext_state_index(&self, label: &str) -> Option<usize> {
        self.ext_states.iter().position(|s| s.label == label)
    }

    /// Largest transition id in use (observed plus derived).
    pub fn max_trans_id(&self) -> u32 {
        self.transitions.len() as u32 + 2 * self.splits.len() as u32
    }

    /// Kind of any transition id, observed parents included.
    pub fn kind_of(&self, id: TransId) -> Option<TransitionKind> {
        if self.transition(id).is_some() {
            return Some(TransitionKind::Observed);
        }
        self.splits.iter().find_map(|s| {
            if s.excess == id {
                Some(TransitionKind::Excess)
            } else if s.population == id {
                Some(TransitionKind::Population)
            } else {
                None
            }
        })
    }

    /// Human-readable name of a transition, e.g. `ARF->NRM.e`.
    pub fn trans_label(&self, id: TransId) -> String {
        if let Some(t) = self.ext_transition(id) {
            return format!("{}->{}", self.ext_states[t.from].label, self.ext_states[t.to].label);
        }
        match self.transition(id) {
            Some(t) => format!("{}->{}", self.states[t.from.0].name, self.states[t.to.0].name),
            None => format!("trans{}", id),
        }
    }
}
