use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::catalog::SimCatalog;
use super::env::SimAction;
use super::task::{SimTaskSpec, Target};
use super::SimError;
use crate::model::ActionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Reads the answer off the first results page and stops.
    GreedyFlawed,
    /// Sorts and inspects before acting.
    Thorough,
    /// Greedy first; redoes the task thoroughly after feedback.
    Backtracking,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::GreedyFlawed, PolicyKind::Thorough, PolicyKind::Backtracking];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::GreedyFlawed => "greedy",
            PolicyKind::Thorough => "thorough",
            PolicyKind::Backtracking => "backtracking",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "greedy" | "greedy_flawed" => Ok(PolicyKind::GreedyFlawed),
            "thorough" => Ok(PolicyKind::Thorough),
            "backtracking" => Ok(PolicyKind::Backtracking),
            _ => Err(format!("unknown policy `{s}`")),
        }
    }
}

type Planned = (SimAction, &'static str);

/// Plan-following agent. Plans are fixed by the spec and catalog; the seed
/// only varies the wording of the answer given at stop.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    kind: PolicyKind,
    spec: SimTaskSpec,
    target: Target,
    plan: VecDeque<Planned>,
    seed: u64,
    revisions: u32,
}

fn answer(spec: &SimTaskSpec, target: &Target, seed: u64) -> String {
    match (spec, target) {
        (_, Target::Count { ids }) => ids.len().to_string(),
        (SimTaskSpec::FindCheapestNavigate { .. }, _) => {
            if seed.is_multiple_of(2) { "This is the cheapest item.".into() } else { "Found it.".into() }
        }
        _ => {
            if seed.is_multiple_of(2) { "The item has been added to your cart.".into() } else { "Done.".into() }
        }
    }
}

impl ScriptedPolicy {
    pub fn new(kind: PolicyKind, spec: &SimTaskSpec, catalog: &SimCatalog, seed: u64) -> Result<Self, SimError> {
        let target = spec.target(catalog)?;
        let mut p = Self { kind, spec: spec.clone(), target, plan: VecDeque::new(), seed, revisions: 0 };
        p.plan = match kind {
            PolicyKind::GreedyFlawed | PolicyKind::Backtracking => p.greedy_plan(),
            PolicyKind::Thorough => p.thorough_plan(),
        };
        Ok(p)
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn revisions(&self) -> u32 {
        self.revisions
    }

    fn stop(&self) -> Planned {
        (SimAction::Stop(answer(&self.spec, &self.target, self.seed)), "I believe the task is complete.")
    }

    fn greedy_plan(&self) -> VecDeque<Planned> {
        let mut plan = VecDeque::new();
        plan.push_back((SimAction::Search(self.spec.query()), "Let me search for the item."));
        match &self.target {
            Target::Item(t) => {
                plan.push_back((SimAction::Click(*t), "This one looks cheapest in the list."));
                if !matches!(self.spec, SimTaskSpec::FindCheapestNavigate { .. }) {
                    plan.push_back((SimAction::AddToCart, "I will add it to the cart."));
                }
            }
            Target::Count { ids } => {
                plan.push_back((SimAction::Comment(ids.len().to_string()), "I count the results on the page."));
            }
        }
        plan.push_back(self.stop());
        plan
    }

    fn inspect_all(ids: &[u32], plan: &mut VecDeque<Planned>) {
        for id in ids {
            plan.push_back((SimAction::Click(*id), "Let me open this result."));
            plan.push_back((SimAction::Inspect, "I need to check its attributes."));
            plan.push_back((SimAction::GoBack, "Back to the results."));
        }
    }

    fn thorough_plan(&self) -> VecDeque<Planned> {
        let mut plan = VecDeque::new();
        plan.push_back((SimAction::Search(self.spec.query()), "Let me search for the item."));
        self.careful_finish(&mut plan, false);
        plan
    }

    /// Steps after a results page is showing.
    fn careful_finish(&self, plan: &mut VecDeque<Planned>, in_cart: bool) {
        match &self.target {
            Target::Item(t) => {
                plan.push_back((SimAction::SortPriceAsc, "Sorting by price puts the cheapest first."));
                plan.push_back((SimAction::Click(*t), "The first result is the cheapest."));
                plan.push_back((SimAction::Inspect, "I should confirm its attributes."));
                if !matches!(self.spec, SimTaskSpec::FindCheapestNavigate { .. }) {
                    if in_cart {
                        plan.push_back((SimAction::RemoveFromCart(*t), "I will redo the purchase properly."));
                    }
                    plan.push_back((SimAction::AddToCart, "It matches, adding it to the cart."));
                }
            }
            Target::Count { ids } => {
                Self::inspect_all(ids, plan);
                plan.push_back((SimAction::Comment(ids.len().to_string()), "All matches checked, posting the count."));
            }
        }
        plan.push_back(self.stop());
    }

    /// Next action. Feedback only changes the plan of the backtracking
    /// policy; the others carry on and stop again.
    pub fn next(&mut self, feedback: Option<&str>) -> ActionRecord {
        if feedback.is_some() && self.kind == PolicyKind::Backtracking {
            self.revisions += 1;
            let mut plan = VecDeque::new();
            if matches!(self.target, Target::Item(_)) {
                plan.push_back((SimAction::GoBack, "The feedback says I skipped steps, going back."));
            }
            let in_cart = !matches!(self.spec, SimTaskSpec::FindCheapestNavigate { .. });
            self.careful_finish(&mut plan, in_cart);
            self.plan = plan;
        }
        let (action, thought) = self.plan.pop_front().unwrap_or_else(|| self.stop());
        record(&action, thought)
    }

    /// Periodic-mode replan: start the remaining plan over.
    pub fn replan(&mut self) {
        self.revisions += 1;
        self.plan = self.thorough_plan();
    }
}

fn record(action: &SimAction, thought: &str) -> ActionRecord {
    let parsed = action.render();
    ActionRecord {
        raw_generation: format!(
            "Let's think step-by-step. {thought} In summary, the next action I will perform is ```{parsed}```"
        ),
        parsed_action: parsed,
        rationale: Some(thought.to_string()),
    }
}
