//! Golden-file checks: rendered prompts must match the hand-built fixtures
//! byte for byte.

use skillspace::planner_high::{build_prompt, ActionCatalog, PromptTemplate, TaskSpec};

#[test]
fn basic_prompt_matches_fixture() {
    let task = TaskSpec::new(&["tomato"]);
    let prompt = build_prompt(&task, &ActionCatalog::skills_only(), PromptTemplate::Basic).unwrap();
    let fixture = include_str!("fixtures/prompt_basic_tomato.txt");
    assert_eq!(prompt, fixture);
}

#[test]
fn hidden_prior_prompt_matches_fixture() {
    let task = TaskSpec::new(&["potato", "mushroom", "salt"]);
    let prompt =
        build_prompt(&task, &ActionCatalog::hidden_env(), PromptTemplate::HiddenPrior).unwrap();
    let fixture = include_str!("fixtures/prompt_hidden_prior.txt");
    assert_eq!(prompt, fixture);
}

#[test]
fn exploration_prompt_matches_fixture() {
    let task = TaskSpec::new(&["tomato", "oil"]);
    let prompt =
        build_prompt(&task, &ActionCatalog::skills_only(), PromptTemplate::Exploration).unwrap();
    let fixture = include_str!("fixtures/prompt_exploration.txt");
    assert_eq!(prompt, fixture);
}
