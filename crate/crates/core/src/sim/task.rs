use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::SimCatalog;
use super::env::{Event, Page, SimEnv};
use super::SimError;
use crate::model::{Domain, Task, Trajectory, Verdict, VerdictLabel};
use crate::verifier::parse::render_response;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum SimTaskSpec {
    BuyCheapestWithAttr { category: String, attribute: String },
    FindCheapestNavigate { category: String },
    CountAndComment { category: String, attribute: String },
}

/// Evidence the strict oracle asks for, in checking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Missing {
    Outcome,
    Sort,
    Inspect,
}

impl Missing {
    pub fn feedback(self, spec: &SimTaskSpec) -> &'static str {
        match (self, spec) {
            (Missing::Outcome, _) => {
                "The final state does not satisfy the objective. Go back and make sure the right item is selected before stopping."
            }
            (Missing::Sort, _) => {
                "The results were never sorted. Go back, sort the results by price (lowest first) and confirm the cheapest matching item before finishing."
            }
            (Missing::Inspect, SimTaskSpec::CountAndComment { .. }) => {
                "Not every counted item was checked. Open each matching item and inspect its attributes before posting the count."
            }
            (Missing::Inspect, _) => {
                "The item's attributes were never checked. Open the item page and inspect its attributes before adding it to the cart."
            }
        }
    }
}

/// What a correct episode must end with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Item(u32),
    Count { ids: Vec<u32> },
}

impl SimTaskSpec {
    pub fn objective(&self) -> String {
        match self {
            SimTaskSpec::BuyCheapestWithAttr { category, attribute } => {
                format!("Buy the cheapest {category} with the attribute '{attribute}'.")
            }
            SimTaskSpec::FindCheapestNavigate { category } => {
                format!("Navigate to the page of the cheapest {category}.")
            }
            SimTaskSpec::CountAndComment { category, attribute } => {
                format!("Count the {category} items with the attribute '{attribute}' and post the number as a comment.")
            }
        }
    }

    pub fn category(&self) -> &str {
        match self {
            SimTaskSpec::BuyCheapestWithAttr { category, .. }
            | SimTaskSpec::FindCheapestNavigate { category }
            | SimTaskSpec::CountAndComment { category, .. } => category,
        }
    }

    pub fn attribute(&self) -> Option<&str> {
        match self {
            SimTaskSpec::BuyCheapestWithAttr { attribute, .. } | SimTaskSpec::CountAndComment { attribute, .. } => {
                Some(attribute)
            }
            SimTaskSpec::FindCheapestNavigate { .. } => None,
        }
    }

    /// Search query an agent would type for this task.
    pub fn query(&self) -> String {
        match self.attribute() {
            Some(a) => format!("{a} {}", self.category()),
            None => self.category().to_string(),
        }
    }

    pub fn matching<'a>(&'a self, catalog: &'a SimCatalog) -> Vec<&'a super::catalog::Item> {
        catalog.in_category(self.category()).filter(|i| self.attribute().is_none_or(|a| i.has(a))).collect()
    }

    pub fn target(&self, catalog: &SimCatalog) -> Result<Target, SimError> {
        let matching = self.matching(catalog);
        if matching.is_empty() {
            return Err(SimError::Unsatisfiable(self.objective()));
        }
        Ok(match self {
            SimTaskSpec::CountAndComment { .. } => Target::Count { ids: matching.iter().map(|i| i.id).collect() },
            _ => Target::Item(matching.iter().min_by_key(|i| i.price_cents).expect("non-empty").id),
        })
    }

    pub fn task(&self, id: impl Into<String>) -> Task {
        Task::new(id, Domain::Sim, self.objective())
    }

    /// Draws a satisfiable spec.
    pub fn sample(catalog: &SimCatalog, rng: &mut impl Rng) -> Self {
        loop {
            let category = catalog.categories[rng.random_range(0..catalog.categories.len())].clone();
            let attrs = catalog.attributes_of(&category);
            let attribute = attrs[rng.random_range(0..attrs.len())].clone();
            let spec = match rng.random_range(0..3) {
                0 => SimTaskSpec::BuyCheapestWithAttr { category, attribute },
                1 => SimTaskSpec::FindCheapestNavigate { category },
                _ => SimTaskSpec::CountAndComment { category, attribute },
            };
            if spec.target(catalog).is_ok() {
                return spec;
            }
        }
    }

    /// Every satisfiable spec over the catalog.
    pub fn all(catalog: &SimCatalog) -> Vec<Self> {
        let mut out = Vec::new();
        for category in &catalog.categories {
            out.push(SimTaskSpec::FindCheapestNavigate { category: category.clone() });
            for attribute in catalog.attributes_of(category) {
                out.push(SimTaskSpec::BuyCheapestWithAttr { category: category.clone(), attribute: attribute.clone() });
                out.push(SimTaskSpec::CountAndComment { category: category.clone(), attribute });
            }
        }
        out.retain(|s| s.target(catalog).is_ok());
        out
    }

    pub fn sample_seeded(catalog: &SimCatalog, seed: u64) -> Self {
        Self::sample(catalog, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Replays parsed actions from a fresh environment.
pub fn replay<'a>(catalog: Arc<SimCatalog>, actions: impl IntoIterator<Item = &'a str>) -> SimEnv {
    let mut env = SimEnv::new(catalog);
    for a in actions {
        env.step(a);
    }
    env
}

pub fn replay_trajectory(catalog: Arc<SimCatalog>, trajectory: &Trajectory) -> SimEnv {
    replay(catalog, trajectory.steps.iter().map(|s| s.action.parsed_action.as_str()))
}

/// Final-state check only.
pub fn permissive(spec: &SimTaskSpec, env: &SimEnv) -> Result<bool, SimError> {
    Ok(match spec.target(env.catalog())? {
        Target::Item(t) => match spec {
            SimTaskSpec::FindCheapestNavigate { .. } => matches!(env.page(), Page::Item { id, .. } if *id == t),
            _ => env.cart() == [t],
        },
        Target::Count { ids } => env.comments().last().is_some_and(|c| c.trim().parse::<usize>().ok() == Some(ids.len())),
    })
}

fn last_index(events: &[Event], pred: impl Fn(&Event) -> bool) -> Option<usize> {
    events.iter().rposition(pred)
}

/// Final state plus the evidence steps. `Ok(None)` means success.
pub fn strict(spec: &SimTaskSpec, env: &SimEnv) -> Result<Option<Missing>, SimError> {
    if !permissive(spec, env)? {
        return Ok(Some(Missing::Outcome));
    }
    let events = env.events();
    let sorted_before = |end: usize, t: u32| {
        events[..end].iter().any(|e| matches!(e, Event::Sorted { ids } if ids.contains(&t)))
    };
    let inspected_before = |end: usize, t: u32| events[..end].contains(&Event::Inspected(t));
    Ok(match (spec, spec.target(env.catalog())?) {
        (SimTaskSpec::BuyCheapestWithAttr { .. }, Target::Item(t)) => {
            let end = last_index(events, |e| *e == Event::Added(t)).expect("cart holds the target");
            if !sorted_before(end, t) {
                Some(Missing::Sort)
            } else if !inspected_before(end, t) {
                Some(Missing::Inspect)
            } else {
                None
            }
        }
        (SimTaskSpec::FindCheapestNavigate { .. }, Target::Item(t)) => {
            let end = last_index(events, |e| *e == Event::Opened(t)).unwrap_or(0);
            (!sorted_before(end, t)).then_some(Missing::Sort)
        }
        (_, Target::Count { ids }) => {
            let end = last_index(events, |e| matches!(e, Event::Commented(_))).expect("a comment was posted");
            ids.iter().any(|t| !inspected_before(end, *t)).then_some(Missing::Inspect)
        }
        _ => unreachable!("target kind follows the template"),
    })
}

/// Both oracle verdicts for a finished trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdicts {
    pub permissive: bool,
    pub strict: bool,
}

pub fn oracles(spec: &SimTaskSpec, env: &SimEnv) -> Result<OracleVerdicts, SimError> {
    Ok(OracleVerdicts { permissive: permissive(spec, env)?, strict: strict(spec, env)?.is_none() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    /// Accepts whenever the final state looks right.
    Biased,
    /// Accepts only when the evidence steps are present.
    Grounded,
}

impl std::str::FromStr for MockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "biased" => Ok(MockKind::Biased),
            "grounded" => Ok(MockKind::Grounded),
            _ => Err(format!("unknown mock verifier `{s}`")),
        }
    }
}

/// Completion text the scripted verifier would produce.
pub fn mock_completion(kind: MockKind, spec: &SimTaskSpec, env: &SimEnv) -> Result<String, SimError> {
    let missing = match kind {
        MockKind::Biased => (!permissive(spec, env)?).then_some(Missing::Outcome),
        MockKind::Grounded => strict(spec, env)?,
    };
    Ok(match missing {
        None => render_response(
            VerdictLabel::Success,
            Some("The final state matches the objective and the trajectory supports it."),
            "Well done, the task is complete.",
        ),
        Some(m) => render_response(
            VerdictLabel::Failure,
            Some(&format!("The trajectory is missing a required step ({m:?}).")),
            m.feedback(spec),
        ),
    })
}

pub fn mock_verifier(kind: MockKind, trajectory: &Trajectory, spec: &SimTaskSpec, catalog: Arc<SimCatalog>) -> Result<Verdict, SimError> {
    let env = replay_trajectory(catalog, trajectory);
    let raw = mock_completion(kind, spec, &env)?;
    Ok(crate::verifier::parse::parse_verdict(&raw, crate::verifier::parse::ResponseFormat::Standard)
        .expect("mock completions are well formed"))
}
