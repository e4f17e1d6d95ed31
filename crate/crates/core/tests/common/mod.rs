#![allow(dead_code)]

pub mod populations;

use std::path::{Path, PathBuf};

use serde::Deserialize;
use trajverify::model::{Task, Trajectory};
use trajverify::prompt::{transcript, EnvProfile, PromptAssembler, PromptError, PromptVariant};
use trajverify::store::ImageRoot;

pub fn prompt_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts")
}

#[derive(Debug, Deserialize)]
pub struct ProfileFixture {
    pub task: Task,
    pub trajectory: Trajectory,
    pub priors: String,
    #[serde(default)]
    pub horizon: Option<u32>,
}

#[derive(Debug, Deserialize)]
pub struct Case {
    pub name: String,
    pub profile: String,
    pub variant: PromptVariant,
    pub cot: bool,
}

#[derive(Debug, Deserialize)]
pub struct PromptFixture {
    pub vwa: ProfileFixture,
    pub osworld: ProfileFixture,
    pub robomimic: ProfileFixture,
    pub cases: Vec<Case>,
}

impl PromptFixture {
    pub fn load() -> Self {
        let raw = std::fs::read_to_string(prompt_fixture_dir().join("fixture.json")).expect("fixture");
        serde_json::from_str(&raw).expect("fixture json")
    }

    fn profile(&self, name: &str) -> (EnvProfile, &ProfileFixture) {
        match name {
            "vwa" => (EnvProfile::VisualWebArena, &self.vwa),
            "osworld" => (EnvProfile::OSWorld, &self.osworld),
            "robomimic" => (EnvProfile::Robomimic, &self.robomimic),
            other => panic!("unknown fixture profile {other}"),
        }
    }

    /// Renders one case to its transcript.
    pub fn render(&self, assembler: &PromptAssembler, case: &Case) -> Result<String, PromptError> {
        let (profile, fx) = self.profile(&case.profile);
        let first = &fx.trajectory.steps[0].state;
        let last = &fx.trajectory.steps.last().expect("non-empty").state;
        let msgs = match case.variant {
            PromptVariant::SGVFirstStep => {
                assembler.render_first_step_prompt(profile, &fx.task, std::slice::from_ref(first), 0)?
            }
            PromptVariant::SGVUnifiedFirstStep => {
                assembler.render_unified_first_step_prompt(profile, &fx.task, std::slice::from_ref(first), 0)?
            }
            PromptVariant::RobomimicSGVFirst
            | PromptVariant::RobomimicSGVSecond
            | PromptVariant::RobomimicNoSGV => {
                let stamp = (last.index, fx.horizon.expect("robomimic horizon"));
                let (image, priors) = match case.variant {
                    PromptVariant::RobomimicSGVFirst => (first, None),
                    PromptVariant::RobomimicSGVSecond => (last, Some(fx.priors.as_str())),
                    _ => (last, None),
                };
                assembler.render_robomimic(case.variant, &fx.task, image, stamp, priors)?
            }
            v => {
                let priors = (v == PromptVariant::SGVSecondStep).then_some(fx.priors.as_str());
                assembler.render_verification(profile, v, case.cot, &fx.task, &fx.trajectory, priors, None)?
            }
        };
        Ok(transcript(&msgs))
    }
}

pub fn fixture_assembler() -> PromptAssembler {
    PromptAssembler::new(ImageRoot::new(prompt_fixture_dir())).expect("templates load")
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(prompt_fixture_dir().join("golden").join(format!("{name}.txt"))).expect("golden file")
}
