//! Deterministic assembly of every verifier prompt variant.
//!
//! Prompt text lives in `templates/*.tmpl` (embedded at compile time). This
//! module only decides which template pieces make up a variant and how the
//! task and trajectory are laid out as chat messages.

pub mod template;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Domain, ImageRef, State, Task, Trajectory};
use crate::store::ImageRoot;
use template::{Context, Template, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }
}

/// Joins adjacent text parts.
pub(crate) fn merge_text(parts: Vec<Part>) -> Vec<Part> {
    let mut out: Vec<Part> = Vec::with_capacity(parts.len());
    for p in parts {
        match (out.last_mut(), p) {
            (Some(Part::Text(prev)), Part::Text(t)) => prev.push_str(&t),
            (_, Part::Text(t)) if t.is_empty() => {}
            (_, p) => out.push(p),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<Part>) -> Self {
        Self { role, parts: merge_text(parts) }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, vec![Part::Text(text.into())])
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self::new(Role::User, parts)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, vec![Part::Text(text.into())])
    }

    /// Concatenated text content, images omitted.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }
}

/// Plain-text rendering of a message list, used for golden files and logs.
pub fn transcript(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        let role = match m.role {
            Role::System => "SYSTEM",
            Role::User => "USER",
            Role::Assistant => "ASSISTANT",
        };
        out.push_str("=== ");
        out.push_str(role);
        out.push_str(" ===\n");
        for p in &m.parts {
            match p {
                Part::Text(t) => out.push_str(t),
                Part::Image(i) => {
                    out.push_str("[image:");
                    out.push_str(&i.uri);
                    out.push(']');
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvProfile {
    VisualWebArena,
    OSWorld,
    Robomimic,
    Sim,
}

impl EnvProfile {
    pub const ALL: [EnvProfile; 4] =
        [EnvProfile::VisualWebArena, EnvProfile::OSWorld, EnvProfile::Robomimic, EnvProfile::Sim];

    pub fn name(self) -> &'static str {
        match self {
            EnvProfile::VisualWebArena => "visualwebarena",
            EnvProfile::OSWorld => "osworld",
            EnvProfile::Robomimic => "robomimic",
            EnvProfile::Sim => "sim",
        }
    }

    /// Alternative index for `{web | computer}` phrase groups.
    pub fn phrase_binding(self) -> Option<usize> {
        match self {
            EnvProfile::VisualWebArena | EnvProfile::Sim => Some(0),
            EnvProfile::OSWorld => Some(1),
            EnvProfile::Robomimic => None,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Classifieds | Domain::Reddit | Domain::Shopping => EnvProfile::VisualWebArena,
            Domain::Osworld => EnvProfile::OSWorld,
            Domain::Robomimic => EnvProfile::Robomimic,
            Domain::Sim => EnvProfile::Sim,
        }
    }

    fn is_web(self) -> bool {
        matches!(self, EnvProfile::VisualWebArena | EnvProfile::Sim)
    }
}

impl fmt::Display for EnvProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vwa" | "web" | "visualwebarena" => Ok(EnvProfile::VisualWebArena),
            "osworld" | "os" => Ok(EnvProfile::OSWorld),
            "robomimic" => Ok(EnvProfile::Robomimic),
            "sim" => Ok(EnvProfile::Sim),
            _ => Err(format!("unknown profile `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    NoCoTBinary,
    NoCoT,
    CoT,
    PanRubric,
    SGVFirstStep,
    SGVSecondStep,
    SGVUnifiedFirstStep,
    MonolithicRetrieveVerify,
    RobomimicSGVFirst,
    RobomimicSGVSecond,
    RobomimicNoSGV,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 11] = [
        PromptVariant::NoCoTBinary,
        PromptVariant::NoCoT,
        PromptVariant::CoT,
        PromptVariant::PanRubric,
        PromptVariant::SGVFirstStep,
        PromptVariant::SGVSecondStep,
        PromptVariant::SGVUnifiedFirstStep,
        PromptVariant::MonolithicRetrieveVerify,
        PromptVariant::RobomimicSGVFirst,
        PromptVariant::RobomimicSGVSecond,
        PromptVariant::RobomimicNoSGV,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            PromptVariant::NoCoTBinary => "nocot_binary",
            PromptVariant::NoCoT => "nocot",
            PromptVariant::CoT => "cot",
            PromptVariant::PanRubric => "pan_rubric",
            PromptVariant::SGVFirstStep => "sgv_first_step",
            PromptVariant::SGVSecondStep => "sgv_second_step",
            PromptVariant::SGVUnifiedFirstStep => "sgv_unified_first_step",
            PromptVariant::MonolithicRetrieveVerify => "monolithic",
            PromptVariant::RobomimicSGVFirst => "robomimic_sgv_first",
            PromptVariant::RobomimicSGVSecond => "robomimic_sgv_second",
            PromptVariant::RobomimicNoSGV => "robomimic_no_sgv",
        }
    }

    fn is_robomimic(self) -> bool {
        matches!(
            self,
            PromptVariant::RobomimicSGVFirst | PromptVariant::RobomimicSGVSecond | PromptVariant::RobomimicNoSGV
        )
    }

    pub fn supports(self, profile: EnvProfile) -> bool {
        match profile {
            EnvProfile::Robomimic => self.is_robomimic(),
            EnvProfile::OSWorld => !self.is_robomimic() && self != PromptVariant::PanRubric,
            EnvProfile::VisualWebArena | EnvProfile::Sim => !self.is_robomimic(),
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("variant {variant} is not available for profile {profile}")]
    Unsupported { profile: EnvProfile, variant: PromptVariant },
    #[error("profile {0} has no system prompt; its templates are self-contained")]
    NoSystemPrompt(EnvProfile),
    #[error("priors are required by {0}")]
    MissingPriors(PromptVariant),
    #[error("priors supplied to non-grounded variant {0}")]
    UnexpectedPriors(PromptVariant),
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("objective text is empty")]
    EmptyObjective,
    #[error("image for step {step} cannot be resolved: {uri}")]
    UnresolvableStepImage { step: u32, uri: String },
    #[error("objective image {index} cannot be resolved: {uri}")]
    UnresolvableObjectiveImage { index: usize, uri: String },
    #[error("framing state {index} lies beyond the framing horizon {horizon}")]
    FramingLeak { index: u32, horizon: u32 },
    #[error("state {0} has no screenshot or observation to show")]
    EmptyState(u32),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Raw template sources, keyed by file stem.
const SOURCES: &[(&str, &str)] = &[
    ("verifier_system.web", include_str!("../../templates/verifier_system.web.tmpl")),
    ("verifier_system.computer", include_str!("../../templates/verifier_system.computer.tmpl")),
    ("rules.web", include_str!("../../templates/rules.web.tmpl")),
    ("rules.computer", include_str!("../../templates/rules.computer.tmpl")),
    ("rules.monolithic", include_str!("../../templates/rules.monolithic.tmpl")),
    ("evaluation", include_str!("../../templates/evaluation.tmpl")),
    ("evaluation.monolithic", include_str!("../../templates/evaluation.monolithic.tmpl")),
    ("first_step_system", include_str!("../../templates/first_step_system.tmpl")),
    ("first_step_request", include_str!("../../templates/first_step_request.tmpl")),
    ("unified_first_step_request", include_str!("../../templates/unified_first_step_request.tmpl")),
    ("initial_screenshot_label", include_str!("../../templates/initial_screenshot_label.tmpl")),
    ("pan_system", include_str!("../../templates/pan_system.tmpl")),
    ("pan_request", include_str!("../../templates/pan_request.tmpl")),
    ("trajectory_objective", include_str!("../../templates/trajectory_objective.tmpl")),
    ("trajectory_state", include_str!("../../templates/trajectory_state.tmpl")),
    ("trajectory_state_text", include_str!("../../templates/trajectory_state_text.tmpl")),
    ("robomimic_first", include_str!("../../templates/robomimic_first.tmpl")),
    ("robomimic_second", include_str!("../../templates/robomimic_second.tmpl")),
    ("robomimic_verify", include_str!("../../templates/robomimic_verify.tmpl")),
];

/// Templates loaded and phrase-resolved for one profile.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    profile: EnvProfile,
    templates: HashMap<String, Template>,
}

impl TemplateSet {
    pub fn load(profile: EnvProfile) -> Result<Self, TemplateError> {
        Self::load_from(profile, SOURCES.iter().map(|(k, v)| (*k, *v)))
    }

    /// Loads from explicit sources; only templates whose header lists the
    /// profile are kept.
    pub fn load_from<'a>(
        profile: EnvProfile,
        sources: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, TemplateError> {
        let mut templates = HashMap::new();
        for (key, src) in sources {
            if !header_lists_profile(src, profile.name()) {
                continue;
            }
            let t = Template::parse(src, profile.phrase_binding(), profile.name())?;
            templates.insert(key.to_string(), t);
        }
        Ok(Self { profile, templates })
    }

    pub fn profile(&self) -> EnvProfile {
        self.profile
    }

    fn get(&self, key: &str) -> Result<&Template, PromptError> {
        self.templates.get(key).ok_or(PromptError::Template(TemplateError::MissingHeader(format!(
            "{key} (not bound to profile {})",
            self.profile
        ))))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.templates.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

fn header_lists_profile(src: &str, profile: &str) -> bool {
    src.lines()
        .skip(1)
        .take_while(|l| *l != "---")
        .find_map(|l| l.strip_prefix("profiles:"))
        .is_some_and(|p| p.split_whitespace().any(|x| x == profile))
}

/// All template sets plus the image root used to check references.
#[derive(Debug, Clone)]
pub struct PromptAssembler {
    sets: HashMap<EnvProfile, TemplateSet>,
    images: ImageRoot,
}

impl PromptAssembler {
    pub fn new(images: ImageRoot) -> Result<Self, TemplateError> {
        let mut sets = HashMap::new();
        for p in EnvProfile::ALL {
            sets.insert(p, TemplateSet::load(p)?);
        }
        Ok(Self { sets, images })
    }

    pub fn images(&self) -> &ImageRoot {
        &self.images
    }

    fn set(&self, profile: EnvProfile) -> &TemplateSet {
        &self.sets[&profile]
    }

    fn check(&self, profile: EnvProfile, variant: PromptVariant) -> Result<(), PromptError> {
        if variant.supports(profile) {
            Ok(())
        } else {
            Err(PromptError::Unsupported { profile, variant })
        }
    }

    /// System prompt for a web/computer variant. SGV-only lines are included
    /// iff `sgv_enabled`.
    pub fn render_system_prompt(
        &self,
        profile: EnvProfile,
        variant: PromptVariant,
        sgv_enabled: bool,
    ) -> Result<String, PromptError> {
        if profile == EnvProfile::Robomimic {
            return Err(PromptError::NoSystemPrompt(profile));
        }
        self.check(profile, variant)?;
        let set = self.set(profile);
        let ctx = Context::new().flag("sgv", sgv_enabled);
        let text = match variant {
            PromptVariant::PanRubric => set.get("pan_system")?.render_text(&ctx)?,
            PromptVariant::SGVFirstStep => set.get("first_step_system")?.render_text(&ctx)?,
            _ => {
                let rules_key = if variant == PromptVariant::MonolithicRetrieveVerify {
                    "rules.monolithic"
                } else if profile.is_web() {
                    "rules.web"
                } else {
                    "rules.computer"
                };
                let rules = set.get(rules_key)?.render_text(&ctx)?;
                let system_key =
                    if profile.is_web() { "verifier_system.web" } else { "verifier_system.computer" };
                set.get(system_key)?.render_text(&ctx.var("rules", rules))?
            }
        };
        Ok(text)
    }

    /// Objective message followed by one (user state, assistant action) pair
    /// per retained step. `window = Some(k)` keeps the last `k` steps.
    pub fn render_trajectory_messages(
        &self,
        profile: EnvProfile,
        task: &Task,
        trajectory: &Trajectory,
        window: Option<usize>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        if trajectory.steps.is_empty() {
            return Err(PromptError::EmptyTrajectory);
        }
        let set = self.set(profile);
        let images = self.objective_images(task)?;
        let objective = set.get("trajectory_objective")?.render(
            &Context::new().var("objective", task.objective_text.clone()).slot("images", images),
        )?;
        let mut messages = vec![ChatMessage::user(objective)];
        let keep = window.unwrap_or(trajectory.steps.len()).min(trajectory.steps.len());
        let retained = &trajectory.steps[trajectory.steps.len() - keep..];
        for (i, step) in retained.iter().enumerate() {
            let offset = (keep - i).to_string();
            let parts = self.state_parts(set, &step.state, &offset)?;
            messages.push(ChatMessage::user(parts));
            messages.push(ChatMessage::assistant(step.action.parsed_action.clone()));
        }
        Ok(messages)
    }

    fn state_parts(&self, set: &TemplateSet, state: &State, offset: &str) -> Result<Vec<Part>, PromptError> {
        match (&state.screenshot, &state.text_observation) {
            (Some(shot), _) => {
                self.ensure_step_image(state.index, shot)?;
                let mut parts = set.get("trajectory_state")?.render(
                    &Context::new().var("offset", offset).slot("screenshot", vec![Part::Image(shot.clone())]),
                )?;
                if let Some(notes) = &state.annotations {
                    parts.push(Part::Text(format!("\n{notes}")));
                }
                Ok(parts)
            }
            (None, Some(text)) => Ok(set
                .get("trajectory_state_text")?
                .render(&Context::new().var("offset", offset).var("observation", text.clone()))?),
            (None, None) => Err(PromptError::EmptyState(state.index)),
        }
    }

    fn ensure_step_image(&self, step: u32, image: &ImageRef) -> Result<(), PromptError> {
        if self.images.is_resolvable(image) {
            Ok(())
        } else {
            Err(PromptError::UnresolvableStepImage { step, uri: image.uri.clone() })
        }
    }

    fn objective_images(&self, task: &Task) -> Result<Vec<Part>, PromptError> {
        task.objective_images
            .iter()
            .enumerate()
            .map(|(index, img)| {
                if self.images.is_resolvable(img) {
                    Ok(Part::Image(img.clone()))
                } else {
                    Err(PromptError::UnresolvableObjectiveImage { index, uri: img.uri.clone() })
                }
            })
            .collect()
    }

    /// Final user turn with the criteria and response format.
    ///
    /// `cot` only matters for the grounded second step and the monolithic
    /// variant; the other variants fix it.
    pub fn render_evaluation_prompt(
        &self,
        profile: EnvProfile,
        variant: PromptVariant,
        cot: bool,
        priors: Option<&str>,
    ) -> Result<String, PromptError> {
        self.check(profile, variant)?;
        let set = self.set(profile);
        match (variant, priors) {
            (PromptVariant::SGVSecondStep, None) => return Err(PromptError::MissingPriors(variant)),
            (PromptVariant::SGVSecondStep, Some(_)) => {}
            (_, Some(_)) => return Err(PromptError::UnexpectedPriors(variant)),
            _ => {}
        }
        let (cot, binary) = match variant {
            PromptVariant::NoCoTBinary => (false, true),
            PromptVariant::NoCoT => (false, false),
            PromptVariant::CoT => (true, false),
            PromptVariant::SGVSecondStep | PromptVariant::MonolithicRetrieveVerify => (cot, false),
            _ => return Err(PromptError::Unsupported { profile, variant }),
        };
        let ctx = Context::new()
            .flag("cot", cot)
            .flag("binary", binary)
            .flag("sgv", priors.is_some())
            .var("priors", priors.unwrap_or_default());
        let key = if variant == PromptVariant::MonolithicRetrieveVerify {
            "evaluation.monolithic"
        } else {
            "evaluation"
        };
        Ok(set.get(key)?.render_text(&ctx)?)
    }

    /// Request for the prior-retrieval step. Only task-framing states may be
    /// shown; any state with index beyond `horizon` is rejected.
    pub fn render_first_step_prompt(
        &self,
        profile: EnvProfile,
        task: &Task,
        framing_states: &[State],
        horizon: u32,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.first_step(profile, PromptVariant::SGVFirstStep, task, framing_states, horizon)
    }

    /// First step of the unified ablation: verifier system prompt, retrieval
    /// request.
    pub fn render_unified_first_step_prompt(
        &self,
        profile: EnvProfile,
        task: &Task,
        framing_states: &[State],
        horizon: u32,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.first_step(profile, PromptVariant::SGVUnifiedFirstStep, task, framing_states, horizon)
    }

    fn first_step(
        &self,
        profile: EnvProfile,
        variant: PromptVariant,
        task: &Task,
        framing_states: &[State],
        horizon: u32,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.check(profile, variant)?;
        if task.objective_text.trim().is_empty() {
            return Err(PromptError::EmptyObjective);
        }
        if let Some(s) = framing_states.iter().find(|s| s.index > horizon) {
            return Err(PromptError::FramingLeak { index: s.index, horizon });
        }
        let set = self.set(profile);
        let system = self.render_system_prompt(profile, variant, true)?;
        let label = set.get("initial_screenshot_label")?.render_text(&Context::new())?;

        let mut list = Vec::new();
        let mut n = 0usize;
        for (index, img) in task.objective_images.iter().enumerate() {
            if !self.images.is_resolvable(img) {
                return Err(PromptError::UnresolvableObjectiveImage { index, uri: img.uri.clone() });
            }
            if n > 0 {
                list.push(Part::text("\n"));
            }
            list.push(Part::Text(format!("Image {n}: ")));
            list.push(Part::Image(img.clone()));
            n += 1;
        }
        for state in framing_states {
            if n > 0 {
                list.push(Part::text("\n"));
            }
            list.push(Part::Text(format!("Image {n}: {label} ")));
            match (&state.screenshot, &state.text_observation) {
                (Some(shot), _) => {
                    self.ensure_step_image(state.index, shot)?;
                    list.push(Part::Image(shot.clone()));
                }
                (None, Some(text)) => list.push(Part::Text(text.clone())),
                (None, None) => return Err(PromptError::EmptyState(state.index)),
            }
            n += 1;
        }
        let key = if variant == PromptVariant::SGVFirstStep {
            "first_step_request"
        } else {
            "unified_first_step_request"
        };
        let request = set
            .get(key)?
            .render(&Context::new().var("objective", task.objective_text.clone()).slot("images", list))?;
        Ok(vec![ChatMessage::system(system), ChatMessage::user(request)])
    }

    /// Full single-call verification request: system, trajectory, evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn render_verification(
        &self,
        profile: EnvProfile,
        variant: PromptVariant,
        cot: bool,
        task: &Task,
        trajectory: &Trajectory,
        priors: Option<&str>,
        window: Option<usize>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        if variant == PromptVariant::PanRubric {
            if priors.is_some() {
                return Err(PromptError::UnexpectedPriors(variant));
            }
            return self.render_pan(profile, task, trajectory);
        }
        let sgv = variant == PromptVariant::SGVSecondStep;
        let system = self.render_system_prompt(profile, variant, sgv)?;
        let evaluation = self.render_evaluation_prompt(profile, variant, cot, priors)?;
        let mut messages = vec![ChatMessage::system(system)];
        messages.extend(self.render_trajectory_messages(profile, task, trajectory, window)?);
        messages.push(ChatMessage::user(vec![Part::Text(evaluation)]));
        Ok(messages)
    }

    fn render_pan(
        &self,
        profile: EnvProfile,
        task: &Task,
        trajectory: &Trajectory,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.check(profile, PromptVariant::PanRubric)?;
        let last = trajectory.steps.last().ok_or(PromptError::EmptyTrajectory)?;
        let set = self.set(profile);
        let history = trajectory
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}: {}", i + 1, s.action.parsed_action))
            .collect::<Vec<_>>()
            .join("\n");
        let snapshot = match (&last.state.screenshot, &last.state.text_observation) {
            (Some(shot), _) => {
                self.ensure_step_image(last.state.index, shot)?;
                vec![Part::Image(shot.clone())]
            }
            (None, Some(text)) => vec![Part::Text(text.clone())],
            (None, None) => return Err(PromptError::EmptyState(last.state.index)),
        };
        let system = self.render_system_prompt(profile, PromptVariant::PanRubric, false)?;
        let request = set.get("pan_request")?.render(
            &Context::new()
                .var("objective", task.objective_text.clone())
                .var("history", history)
                .slot("screenshot", snapshot),
        )?;
        Ok(vec![ChatMessage::system(system), ChatMessage::user(request)])
    }

    /// Manipulation prompts: a single user message carrying the time stamp
    /// `n/N` and one image.
    pub fn render_robomimic(
        &self,
        variant: PromptVariant,
        task: &Task,
        image_state: &State,
        timestamp: (u32, u32),
        priors: Option<&str>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.check(EnvProfile::Robomimic, variant)?;
        let set = self.set(EnvProfile::Robomimic);
        let (key, needs_priors) = match variant {
            PromptVariant::RobomimicSGVFirst => ("robomimic_first", false),
            PromptVariant::RobomimicSGVSecond => ("robomimic_second", true),
            _ => ("robomimic_verify", false),
        };
        match (needs_priors, priors) {
            (true, None) => return Err(PromptError::MissingPriors(variant)),
            (false, Some(_)) => return Err(PromptError::UnexpectedPriors(variant)),
            _ => {}
        }
        let image = match (&image_state.screenshot, &image_state.text_observation) {
            (Some(shot), _) => {
                self.ensure_step_image(image_state.index, shot)?;
                vec![Part::Image(shot.clone())]
            }
            (None, Some(text)) => vec![Part::Text(text.clone())],
            (None, None) => return Err(PromptError::EmptyState(image_state.index)),
        };
        let ctx = Context::new()
            .var("objective", task.objective_text.clone())
            .var("timestamp", format!("{}/{}", timestamp.0, timestamp.1))
            .var("priors", priors.unwrap_or_default())
            .slot("image", image);
        Ok(vec![ChatMessage::user(set.get(key)?.render(&ctx)?)])
    }
}

/// Appends the configured objective suffix once.
pub fn apply_objective_suffix(task: &Task) -> Task {
    let mut out = task.clone();
    if let Some(suffix) = task.objective_suffix.as_deref().filter(|s| !s.is_empty()) {
        if !task.objective_text.ends_with(suffix) {
            out.objective_text = format!("{} {}", task.objective_text, suffix);
        }
    }
    out
}

/// The suffix used for tasks that must end on a specific item page.
pub const NAVIGATE_TO_ITEM_SUFFIX: &str =
    "To finish the task, please make sure to navigate to the page of the corresponding item.";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionRecord;

    fn assembler() -> PromptAssembler {
        PromptAssembler::new(ImageRoot::new("/nonexistent")).unwrap()
    }

    fn text_trajectory(n: u32) -> Trajectory {
        let mut t = Trajectory::new("t1");
        for i in 0..n {
            t.push(State::with_text(i, format!("page {i}")), ActionRecord::parsed(format!("click [{i}]")));
        }
        t
    }

    #[test]
    fn every_profile_loads() {
        for p in EnvProfile::ALL {
            let set = TemplateSet::load(p).unwrap();
            assert!(!set.names().is_empty(), "{p}");
        }
    }

    #[test]
    fn robomimic_rejects_web_variants() {
        let a = assembler();
        assert_eq!(
            a.render_system_prompt(EnvProfile::Robomimic, PromptVariant::CoT, false),
            Err(PromptError::NoSystemPrompt(EnvProfile::Robomimic))
        );
        assert!(matches!(
            a.render_system_prompt(EnvProfile::OSWorld, PromptVariant::PanRubric, false),
            Err(PromptError::Unsupported { .. })
        ));
    }

    #[test]
    fn sgv_rule_only_when_enabled() {
        let a = assembler();
        let off = a.render_system_prompt(EnvProfile::VisualWebArena, PromptVariant::CoT, false).unwrap();
        let on = a.render_system_prompt(EnvProfile::VisualWebArena, PromptVariant::CoT, true).unwrap();
        assert!(off.starts_with(
            "You are an intelligent agent tasked with supervising an assistant navigating a web browser"
        ));
        assert!(!off.contains("Use the web knowledge as a rule"));
        assert!(on.contains("5. Use the web knowledge as a rule"));
        assert!(on.ends_with("consider the context of the task given to you."));
    }

    #[test]
    fn trajectory_labels_count_back_from_the_present() {
        let a = assembler();
        let task = Task::new("t1", Domain::Sim, "find it");
        let msgs =
            a.render_trajectory_messages(EnvProfile::Sim, &task, &text_trajectory(2), None).unwrap();
        assert_eq!(msgs.len(), 5);
        assert!(msgs[1].text().starts_with("### STATE `t-2`"));
        assert!(msgs[3].text().starts_with("### STATE `t-1`"));
        assert_eq!(msgs[4].text(), "click [1]");
    }

    #[test]
    fn window_keeps_the_last_steps() {
        let a = assembler();
        let task = Task::new("t1", Domain::Sim, "find it");
        let msgs =
            a.render_trajectory_messages(EnvProfile::Sim, &task, &text_trajectory(5), Some(1)).unwrap();
        assert_eq!(msgs.len(), 3);
        assert!(msgs[1].text().contains("page 4"));
        assert!(msgs[1].text().starts_with("### STATE `t-1`"));
    }

    #[test]
    fn missing_screenshot_names_the_step() {
        let a = assembler();
        let task = Task::new("t1", Domain::Shopping, "find it");
        let mut t = text_trajectory(2);
        t.steps[1].state.screenshot = Some(ImageRef::png("images/t1/1.png"));
        let err = a.render_trajectory_messages(EnvProfile::VisualWebArena, &task, &t, None).unwrap_err();
        assert_eq!(err, PromptError::UnresolvableStepImage { step: 1, uri: "images/t1/1.png".into() });
    }

    #[test]
    fn evaluation_prompt_preconditions() {
        let a = assembler();
        let p = EnvProfile::VisualWebArena;
        let cot = a.render_evaluation_prompt(p, PromptVariant::CoT, true, None).unwrap();
        assert!(cot.contains("REASONING:") && cot.contains("EVALUATION:") && cot.contains("FEEDBACK:"));
        let sgv = a
            .render_evaluation_prompt(p, PromptVariant::SGVSecondStep, true, Some("sort by price"))
            .unwrap();
        assert!(sgv.starts_with("## General web knowledge: sort by price\n\n\nNow please"));
        assert_eq!(
            a.render_evaluation_prompt(p, PromptVariant::NoCoT, false, Some("x")),
            Err(PromptError::UnexpectedPriors(PromptVariant::NoCoT))
        );
        let binary = a.render_evaluation_prompt(p, PromptVariant::NoCoTBinary, false, None).unwrap();
        assert!(!binary.contains("PARTIAL SUCCESS"));
        assert!(!binary.contains("REASONING"));
    }

    #[test]
    fn first_step_guards_against_leakage() {
        let a = assembler();
        let task = Task::new("t1", Domain::Sim, "buy it");
        let leak = [State::with_text(5, "late page")];
        assert_eq!(
            a.render_first_step_prompt(EnvProfile::Sim, &task, &leak, 0),
            Err(PromptError::FramingLeak { index: 5, horizon: 0 })
        );
        let empty = Task::new("t1", Domain::Sim, " ");
        assert_eq!(
            a.render_first_step_prompt(EnvProfile::Sim, &empty, &[], 0),
            Err(PromptError::EmptyObjective)
        );
        let msgs = a.render_first_step_prompt(EnvProfile::Sim, &task, &[State::with_text(0, "home")], 0).unwrap();
        assert!(msgs[1]
            .text()
            .ends_with("<Description of how tasks such as this are typically accomplished on the web>."));
    }

    #[test]
    fn suffix_is_idempotent() {
        let mut task = Task::new(
            "t",
            Domain::Classifieds,
            "Find me the cheapest red Toyota. It should be between $3000 to $6000.",
        );
        assert_eq!(apply_objective_suffix(&task), task);
        task.objective_suffix = Some(NAVIGATE_TO_ITEM_SUFFIX.into());
        let once = apply_objective_suffix(&task);
        assert_eq!(
            once.objective_text,
            "Find me the cheapest red Toyota. It should be between $3000 to $6000. To finish the task, please make sure to navigate to the page of the corresponding item."
        );
        assert_eq!(apply_objective_suffix(&once), once);
    }
}
