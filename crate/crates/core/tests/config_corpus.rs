use std::path::PathBuf;

use huddle_core::config::{self, ConfigErrors, ErrorKind};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn ty(key: &str, expected: &str) -> ErrorKind {
    ErrorKind::TypeError {
        key: key.into(),
        expected: expected.into(),
    }
}

fn missing(section: &str, key: &str) -> ErrorKind {
    ErrorKind::MissingKey {
        section: section.into(),
        key: key.into(),
    }
}

fn load(name: &str) -> ConfigErrors {
    let path = fixture(&format!("malformed/{name}"));
    if name.ends_with(".plan") {
        config::load_plan_file(&path).unwrap_err()
    } else {
        config::load_agent_file(&path).unwrap_err()
    }
}

type Expected = Vec<(Option<usize>, ErrorKind)>;

fn expected() -> Vec<(&'static str, Expected)> {
    vec![
        (
            "m01_key_outside_section.agent",
            vec![(Some(1), ErrorKind::KeyOutsideSection)],
        ),
        (
            "m02_duplicate_key.agent",
            vec![(
                Some(7),
                ErrorKind::DuplicateKey {
                    section: "llm".into(),
                    key: "temperature".into(),
                },
            )],
        ),
        (
            "m03_unterminated_block.agent",
            vec![(Some(10), ErrorKind::UnterminatedBlock)],
        ),
        (
            "m04_bad_header.agent",
            vec![
                (Some(1), ErrorKind::BadHeader),
                (Some(3), ErrorKind::BadHeader),
            ],
        ),
        (
            "m05_bad_values.agent",
            vec![
                (Some(5), ty("temperature", "real")),
                (Some(6), ty("context_length", "range >= 1")),
                (Some(7), ty("request_timeout_s", "range > 0")),
                (Some(12), ty("priority", "range [0,1]")),
            ],
        ),
        (
            "m06_missing_keys.agent",
            vec![
                (Some(1), missing("llm", "model")),
                (Some(7), missing("persona", "agent_name")),
                (Some(7), missing("persona", "instructions")),
            ],
        ),
        (
            "m07_missing_section.agent",
            vec![(None, ErrorKind::MissingSection("persona".into()))],
        ),
        (
            "m08_inline_api_key.agent",
            vec![
                (Some(2), ty("provider_url", "http(s) URL")),
                (Some(4), ErrorKind::ForbiddenKey("api_key".into())),
                (Some(5), ty("api_key_env", "environment variable name")),
                (Some(7), ty("context_length", "integer")),
                (Some(12), ty("interests", "non-empty list of event labels")),
            ],
        ),
        (
            "m09_stage_gap.plan",
            vec![(None, ErrorKind::GapInStages { missing: 2 })],
        ),
        (
            "m10_bad_stages.plan",
            vec![
                (Some(5), ErrorKind::BadTrigger),
                (Some(8), ErrorKind::EmptyStage("2".into())),
                (Some(11), missing("stage.3", "trigger")),
                (Some(13), ty("command.reveal_task", "key=value list")),
            ],
        ),
    ]
}

#[test]
fn persona_fixtures_parse() {
    let agents = config::load_agents_dir(&fixture("agents")).unwrap();
    let names: Vec<&str> = agents
        .iter()
        .map(|a| a.persona.agent_name.as_str())
        .collect();
    assert_eq!(names, ["Facilitator", "Tutor"]);
    let tutor = &agents[1];
    assert_eq!(tutor.llm.context_length, 5);
    assert!(tutor
        .persona
        .instructions
        .contains("You are an expert programming tutor"));
    assert!(tutor.persona.examples.contains("+ means 'one or more'"));
    let facilitator = &agents[0];
    assert!(facilitator
        .persona
        .instructions
        .contains("encourage active participation from all students"));
    assert_eq!(
        facilitator.persona.interests,
        ["inactivity", "apt_opportunity"]
    );
}

#[test]
fn every_malformed_config_reports_its_errors() {
    let corpus = expected();
    assert_eq!(corpus.len(), 10);
    for (name, want) in corpus {
        let got: Expected = load(name)
            .errors
            .into_iter()
            .map(|e| (e.line, e.kind))
            .collect();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn error_display_is_path_and_line() {
    let errors = load("m04_bad_header.agent");
    let path = fixture("malformed/m04_bad_header.agent");
    let shown = errors.to_string();
    let lines: Vec<&str> = shown.lines().collect();
    assert_eq!(
        lines,
        [
            format!("{}:1: malformed section header", path.display()),
            format!("{}:3: malformed section header", path.display()),
        ]
    );
}

#[test]
fn shipped_server_config_and_plan_load() {
    let server = config::load_server_file(&fixture("server.conf")).unwrap();
    assert_eq!(server.tick_interval_ms, 250);
    assert_eq!(server.inactivity_s, 120);
    assert!(!server.actors.iter().any(|a| a.name == "hinter"));
    let greeter = server.actors.iter().find(|a| a.name == "greeter").unwrap();
    assert_eq!(greeter.priority, 0.55);
    let plan = config::load_plan_file(&fixture("regex8.plan")).unwrap();
    assert_eq!(plan.stages.len(), 8);
    assert_eq!(plan.author, "Bot");
}
