mod common;

use std::collections::BTreeSet;

use common::{fixture_assembler, golden, PromptFixture};
use trajverify::prompt::PromptVariant;

#[test]
fn every_case_matches_its_golden_file() {
    let fx = PromptFixture::load();
    let assembler = fixture_assembler();
    let mut failures = Vec::new();
    for case in &fx.cases {
        let rendered = fx.render(&assembler, case).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        if rendered != golden(&case.name) {
            failures.push(case.name.clone());
        }
    }
    assert!(failures.is_empty(), "mismatched goldens: {failures:?}");
}

#[test]
fn cases_cover_all_variants() {
    let fx = PromptFixture::load();
    let covered: BTreeSet<String> = fx.cases.iter().map(|c| c.variant.slug().to_string()).collect();
    for v in PromptVariant::ALL {
        assert!(covered.contains(v.slug()), "no golden for {v}");
    }
}

#[test]
fn rendered_prompts_have_no_leftover_placeholders() {
    let fx = PromptFixture::load();
    let assembler = fixture_assembler();
    for case in &fx.cases {
        let text = fx.render(&assembler, case).unwrap();
        assert!(!text.contains("{{"), "{}", case.name);
        assert!(!text.contains("<<"), "{}", case.name);
        assert!(!text.contains(" | "), "{}: unresolved pipe group", case.name);
    }
}
