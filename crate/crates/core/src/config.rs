//! Plain-text configuration: agents, plans and server settings.
//!
//! Grammar, line by line:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! key = """
//! multi-line value, kept verbatim
//! """
//! ```
//!
//! Section names and keys are case-sensitive. Loading never stops at the
//! first problem: every error in a file is collected and reported together,
//! each with its line number.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use url::Url;

use crate::actors::{TemplateActorSpec, DEFAULT_AUTHOR};
use crate::coordinator::PASS_SENTINEL;
use crate::domain::Payload;
use crate::listeners::{RuleTable, DEFAULT_INACTIVITY_S, EVENT_QUEUE_CAPACITY};
use crate::llm::{AgentSpec, LlmParams, PersonaParams};
use crate::plan::{Plan, Stage, StageTrigger};

const BLOCK_FENCE: &str = "\"\"\"";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

/// A parsed configuration file, sections and keys in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDocument {
    pub path: Option<PathBuf>,
    pub sections: Vec<Section>,
}

impl ConfigDocument {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.section(section).and_then(|s| s.get(key))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ErrorKind {
    DuplicateKey { section: String, key: String },
    UnterminatedBlock,
    KeyOutsideSection,
    BadHeader,
    MalformedLine,
    MissingSection(String),
    MissingKey { section: String, key: String },
    TypeError { key: String, expected: String },
    ForbiddenKey(String),
    UnexpectedSection(String),
    GapInStages { missing: usize },
    BadTrigger,
    EmptyStage(String),
    EmptyPlan,
    BadRules(String),
    DuplicateAgent(String),
    Io(String),
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorKind::DuplicateKey { section, key } => {
                write!(f, "duplicate key {key:?} in section [{section}]")
            }
            ErrorKind::UnterminatedBlock => write!(f, "multi-line value is never closed with \"\"\""),
            ErrorKind::KeyOutsideSection => write!(f, "key appears before any [section] header"),
            ErrorKind::BadHeader => write!(f, "malformed section header"),
            ErrorKind::MalformedLine => write!(f, "expected `key = value`"),
            ErrorKind::MissingSection(s) => write!(f, "missing section [{s}]"),
            ErrorKind::MissingKey { section, key } => write!(f, "missing key {key:?} in [{section}]"),
            ErrorKind::TypeError { key, expected } => write!(f, "{key}: expected {expected}"),
            ErrorKind::ForbiddenKey(key) => write!(
                f,
                "{key} must not be stored in a config file; name an environment variable with api_key_env"
            ),
            ErrorKind::UnexpectedSection(s) => write!(f, "unexpected section [{s}]"),
            ErrorKind::GapInStages { missing } => write!(f, "stage.{missing} is missing"),
            ErrorKind::BadTrigger => write!(
                f,
                "trigger must be `after:<seconds>` or `event:<label>[:<key>=<value>]`"
            ),
            ErrorKind::EmptyStage(id) => write!(f, "stage.{id} has neither a prompt nor commands"),
            ErrorKind::EmptyPlan => write!(f, "plan has no [stage.N] sections"),
            ErrorKind::BadRules(reason) => write!(f, "rule table: {reason}"),
            ErrorKind::DuplicateAgent(name) => write!(f, "agent name {name:?} is used twice"),
            ErrorKind::Io(reason) => write!(f, "{reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub kind: ErrorKind,
}

impl ConfigError {
    fn at(line: usize, kind: ErrorKind) -> Self {
        Self {
            line: Some(line),
            kind,
        }
    }

    fn file(kind: ErrorKind) -> Self {
        Self { line: None, kind }
    }
}

/// Every problem found in one file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors {
    pub path: Option<PathBuf>,
    pub errors: Vec<ConfigError>,
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<config>".into());
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match e.line {
                Some(line) => write!(f, "{path}:{line}: {}", e.kind)?,
                None => write!(f, "{path}: {}", e.kind)?,
            }
        }
        Ok(())
    }
}

impl ConfigErrors {
    fn new(path: Option<PathBuf>, mut errors: Vec<ConfigError>) -> Self {
        errors.sort_by_key(|e| e.line);
        Self { path, errors }
    }

    fn check<T>(path: &Option<PathBuf>, errors: Vec<ConfigError>, value: T) -> Result<T, Self> {
        if errors.is_empty() {
            Ok(value)
        } else {
            Err(Self::new(path.clone(), errors))
        }
    }
}

fn valid_section_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Parses configuration text.
pub fn parse(text: &str) -> Result<ConfigDocument, ConfigErrors> {
    let mut doc = ConfigDocument::default();
    let mut errors = Vec::new();
    let mut current: Option<usize> = None;
    // keys under a rejected header are not reported again
    let mut after_bad_header = false;
    let mut lines = text.lines().enumerate();

    while let Some((index, raw)) = lines.next() {
        let line_no = index + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            let name = line
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .map(str::trim);
            match name {
                Some(name) if valid_section_name(name) => {
                    after_bad_header = false;
                    let existing = doc.sections.iter().position(|s| s.name == name);
                    current = Some(existing.unwrap_or_else(|| {
                        doc.sections.push(Section {
                            name: name.to_string(),
                            line: line_no,
                            entries: Vec::new(),
                        });
                        doc.sections.len() - 1
                    }));
                }
                _ => {
                    errors.push(ConfigError::at(line_no, ErrorKind::BadHeader));
                    current = None;
                    after_bad_header = true;
                }
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(ConfigError::at(line_no, ErrorKind::MalformedLine));
            continue;
        };
        let (key, mut value) = (key.trim().to_string(), value.trim().to_string());
        if value == BLOCK_FENCE {
            let mut body = Vec::new();
            let mut closed = false;
            for (_, block_line) in lines.by_ref() {
                if block_line.trim() == BLOCK_FENCE {
                    closed = true;
                    break;
                }
                body.push(block_line);
            }
            if !closed {
                errors.push(ConfigError::at(line_no, ErrorKind::UnterminatedBlock));
                break;
            }
            value = body.join("\n");
        }
        if key.is_empty() {
            errors.push(ConfigError::at(line_no, ErrorKind::MalformedLine));
            continue;
        }
        let Some(section) = current.map(|i| &mut doc.sections[i]) else {
            if !after_bad_header {
                errors.push(ConfigError::at(line_no, ErrorKind::KeyOutsideSection));
            }
            continue;
        };
        if section.get(&key).is_some() {
            errors.push(ConfigError::at(
                line_no,
                ErrorKind::DuplicateKey {
                    section: section.name.clone(),
                    key,
                },
            ));
            continue;
        }
        section.entries.push(Entry {
            key,
            value,
            line: line_no,
        });
    }

    ConfigErrors::check(&None, errors, doc)
}

/// Reads and parses a file, tagging errors with its path.
pub fn parse_file(path: &Path) -> Result<ConfigDocument, ConfigErrors> {
    let text = fs::read_to_string(path).map_err(|e| {
        ConfigErrors::new(
            Some(path.to_path_buf()),
            vec![ConfigError::file(ErrorKind::Io(format!(
                "cannot read file: {e}"
            )))],
        )
    })?;
    let mut doc = parse(&text).map_err(|e| ConfigErrors {
        path: Some(path.to_path_buf()),
        ..e
    })?;
    doc.path = Some(path.to_path_buf());
    Ok(doc)
}

/// Description and predicate of the values a key accepts.
type Range<'a, T> = Option<(&'a str, &'a dyn Fn(&T) -> bool)>;

/// Typed access to one section that records every failure.
struct Fields<'a> {
    section: Option<&'a Section>,
    name: &'a str,
    errors: &'a mut Vec<ConfigError>,
}

impl<'a> Fields<'a> {
    fn new(doc: &'a ConfigDocument, name: &'a str, errors: &'a mut Vec<ConfigError>) -> Self {
        Self {
            section: doc.section(name),
            name,
            errors,
        }
    }

    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.section.and_then(|s| s.get(key))
    }

    fn missing(&mut self, key: &str) {
        let Some(section) = self.section else {
            return;
        };
        let line = Some(section.line);
        self.errors.push(ConfigError {
            line,
            kind: ErrorKind::MissingKey {
                section: self.name.to_string(),
                key: key.to_string(),
            },
        });
    }

    fn type_error(&mut self, entry: &Entry, expected: &str) {
        self.errors.push(ConfigError::at(
            entry.line,
            ErrorKind::TypeError {
                key: entry.key.clone(),
                expected: expected.to_string(),
            },
        ));
    }

    fn text(&mut self, key: &str) -> Option<String> {
        match self.entry(key) {
            Some(e) if !e.value.trim().is_empty() => Some(e.value.clone()),
            Some(e) => {
                self.type_error(e, "non-empty text");
                None
            }
            None => {
                self.missing(key);
                None
            }
        }
    }

    fn text_or(&mut self, key: &str, default: &str) -> String {
        self.entry(key)
            .map(|e| e.value.clone())
            .unwrap_or_else(|| default.to_string())
    }

    fn parsed<T>(
        &mut self,
        key: &str,
        default: Option<T>,
        kind: &str,
        parse: impl Fn(&str) -> Option<T>,
        range: Range<'_, T>,
    ) -> Option<T> {
        let Some(entry) = self.entry(key) else {
            if default.is_none() {
                self.missing(key);
            }
            return default;
        };
        let Some(value) = parse(entry.value.trim()) else {
            self.type_error(entry, kind);
            return None;
        };
        if let Some((desc, ok)) = range {
            if !ok(&value) {
                self.type_error(entry, &format!("range {desc}"));
                return None;
            }
        }
        Some(value)
    }

    fn real(&mut self, key: &str, default: Option<f64>, range: Range<'_, f64>) -> Option<f64> {
        let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        self.parsed(key, default, "real", parse, range)
    }

    fn integer(&mut self, key: &str, default: Option<u64>, range: Range<'_, u64>) -> Option<u64> {
        self.parsed(key, default, "integer", |s| s.parse::<u64>().ok(), range)
    }
}

fn require_section(doc: &ConfigDocument, name: &str, errors: &mut Vec<ConfigError>) {
    if doc.section(name).is_none() {
        errors.push(ConfigError::file(ErrorKind::MissingSection(
            name.to_string(),
        )));
    }
}

fn env_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Reads an agent definition from `[llm]` and `[persona]`.
pub fn load_agent(doc: &ConfigDocument) -> Result<AgentSpec, ConfigErrors> {
    let mut errors = Vec::new();
    require_section(doc, "llm", &mut errors);
    require_section(doc, "persona", &mut errors);

    let unit = |v: &f64| (0.0..=1.0).contains(v);
    let positive = |v: &f64| *v > 0.0;
    let non_negative = |v: &f64| *v >= 0.0;

    let llm = {
        let mut f = Fields::new(doc, "llm", &mut errors);
        if let Some(entry) = f.entry("api_key") {
            f.errors.push(ConfigError::at(
                entry.line,
                ErrorKind::ForbiddenKey("api_key".into()),
            ));
        }
        let provider_url = f.text("provider_url").and_then(|raw| {
            let entry = f.entry("provider_url").expect("present");
            match Url::parse(raw.trim()) {
                Ok(url) if matches!(url.scheme(), "http" | "https") => Some(url),
                _ => {
                    f.type_error(entry, "http(s) URL");
                    None
                }
            }
        });
        let model = f.text("model");
        let api_key_env = f.text("api_key_env").and_then(|name| {
            let name = name.trim().to_string();
            if env_var_name(&name) {
                Some(name)
            } else {
                let entry = f.entry("api_key_env").expect("present");
                f.type_error(entry, "environment variable name");
                None
            }
        });
        let temperature = f.real(
            "temperature",
            None,
            Some(("[0,2]", &|v| (0.0..=2.0).contains(v))),
        );
        let context_length = f.integer("context_length", None, Some((">= 1", &|v| *v >= 1)));
        let request_timeout_s = f.real("request_timeout_s", Some(30.0), Some(("> 0", &positive)));
        match (
            provider_url,
            model,
            api_key_env,
            temperature,
            context_length,
            request_timeout_s,
        ) {
            (
                Some(provider_url),
                Some(model),
                Some(api_key_env),
                Some(temperature),
                Some(n),
                Some(t),
            ) => Some(LlmParams {
                provider_url,
                model: model.trim().to_string(),
                api_key_env,
                temperature,
                context_length: n as usize,
                request_timeout_s: t,
            }),
            _ => None,
        }
    };

    let persona = {
        let mut f = Fields::new(doc, "persona", &mut errors);
        let agent_name = f.text("agent_name").map(|s| s.trim().to_string());
        let instructions = f.text("instructions");
        let scenario = f.text_or("scenario", "");
        let style = f.text_or("style", "");
        let examples = f.text_or("examples", "");
        let interests = match f.entry("interests") {
            Some(entry) => {
                let list = split_list(&entry.value);
                if list.is_empty() {
                    f.type_error(entry, "non-empty list of event labels");
                    None
                } else {
                    Some(list)
                }
            }
            None => Some(vec!["chat".to_string()]),
        };
        let priority = f.real(
            "priority",
            Some(PersonaParams::DEFAULT_PRIORITY),
            Some(("[0,1]", &unit)),
        );
        let timeout_s = f.real(
            "timeout_s",
            Some(PersonaParams::DEFAULT_TIMEOUT_S),
            Some(("> 0", &positive)),
        );
        let decay_rate = f.real(
            "decay_rate",
            Some(PersonaParams::DEFAULT_DECAY_RATE),
            Some((">= 0", &non_negative)),
        );
        let pass_sentinel = f.text_or("pass_sentinel", PASS_SENTINEL).trim().to_string();
        if pass_sentinel.is_empty() {
            let entry = f.entry("pass_sentinel").expect("only empty when set");
            f.type_error(entry, "non-empty text");
        }
        match (
            agent_name,
            instructions,
            interests,
            priority,
            timeout_s,
            decay_rate,
        ) {
            (
                Some(agent_name),
                Some(instructions),
                Some(interests),
                Some(priority),
                Some(timeout_s),
                Some(decay_rate),
            ) if !pass_sentinel.is_empty() => Some(PersonaParams {
                agent_name,
                scenario,
                instructions,
                interests,
                style,
                examples,
                priority,
                timeout_s,
                decay_rate,
                pass_sentinel,
            }),
            _ => None,
        }
    };

    match (llm, persona) {
        (Some(llm), Some(persona)) if errors.is_empty() => Ok(AgentSpec { llm, persona }),
        _ => Err(ConfigErrors::new(doc.path.clone(), errors)),
    }
}

fn multiline(key: &str, value: &str) -> String {
    if value.contains('\n') || value != value.trim() {
        format!("{key} = {BLOCK_FENCE}\n{value}\n{BLOCK_FENCE}\n")
    } else {
        format!("{key} = {value}\n")
    }
}

/// Canonical text form of an agent; `load_agent(parse(render_agent(a)))` is `a`.
pub fn render_agent(agent: &AgentSpec) -> String {
    let llm = &agent.llm;
    let p = &agent.persona;
    let mut out = String::from("[llm]\n");
    out += &format!("provider_url = {}\n", llm.provider_url);
    out += &format!("model = {}\n", llm.model);
    out += &format!("api_key_env = {}\n", llm.api_key_env);
    out += &format!("temperature = {:?}\n", llm.temperature);
    out += &format!("context_length = {}\n", llm.context_length);
    out += &format!("request_timeout_s = {:?}\n", llm.request_timeout_s);
    out += "\n[persona]\n";
    out += &format!("agent_name = {}\n", p.agent_name);
    for (key, value) in [
        ("scenario", &p.scenario),
        ("instructions", &p.instructions),
        ("style", &p.style),
        ("examples", &p.examples),
    ] {
        if !value.is_empty() {
            out += &multiline(key, value);
        }
    }
    out += &format!("interests = {}\n", p.interests.join(", "));
    out += &format!("priority = {:?}\n", p.priority);
    out += &format!("timeout_s = {:?}\n", p.timeout_s);
    out += &format!("decay_rate = {:?}\n", p.decay_rate);
    out += &format!("pass_sentinel = {}\n", p.pass_sentinel);
    out
}

fn parse_trigger(raw: &str) -> Option<StageTrigger> {
    if let Some(secs) = raw.strip_prefix("after:") {
        let t: f64 = secs.trim().parse().ok()?;
        return (t.is_finite() && t >= 0.0).then_some(StageTrigger::AfterSeconds(t));
    }
    let rest = raw.strip_prefix("event:")?;
    let (label, matching) = match rest.split_once(':') {
        Some((label, cond)) => {
            let (k, v) = cond.split_once('=')?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return None;
            }
            (label, Some((k.to_string(), v.to_string())))
        }
        None => (rest, None),
    };
    let label = label.trim();
    (!label.is_empty()).then(|| StageTrigger::OnEvent {
        label: label.to_string(),
        matching,
    })
}

fn parse_payload(raw: &str) -> Option<Payload> {
    let mut payload = Payload::new();
    for pair in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=')?;
        let k = k.trim();
        if k.is_empty() {
            return None;
        }
        payload.insert(k.to_string(), v.trim().to_string());
    }
    Some(payload)
}

/// Reads a plan from `[stage.1]`, `[stage.2]`, ... and an optional `[plan]`.
pub fn load_plan(doc: &ConfigDocument) -> Result<Plan, ConfigErrors> {
    let mut errors = Vec::new();
    let mut numbered: Vec<(usize, &Section)> = Vec::new();
    for section in &doc.sections {
        match section.name.strip_prefix("stage.") {
            Some(k) => match k.parse::<usize>() {
                Ok(k) if k >= 1 => numbered.push((k, section)),
                _ => errors.push(ConfigError::at(
                    section.line,
                    ErrorKind::UnexpectedSection(section.name.clone()),
                )),
            },
            None if section.name == "plan" => {}
            None => errors.push(ConfigError::at(
                section.line,
                ErrorKind::UnexpectedSection(section.name.clone()),
            )),
        }
    }
    numbered.sort_by_key(|(k, _)| *k);
    if numbered.is_empty() {
        errors.push(ConfigError::file(ErrorKind::EmptyPlan));
    }
    for (expected, (k, _)) in (1..).zip(&numbered) {
        if *k != expected {
            errors.push(ConfigError::file(ErrorKind::GapInStages {
                missing: expected,
            }));
            break;
        }
    }

    let mut stages = Vec::new();
    for (k, section) in &numbered {
        let id = k.to_string();
        let trigger = match section.get("trigger") {
            Some(entry) => {
                let parsed = parse_trigger(entry.value.trim());
                if parsed.is_none() {
                    errors.push(ConfigError::at(entry.line, ErrorKind::BadTrigger));
                }
                parsed
            }
            None => {
                errors.push(ConfigError::at(
                    section.line,
                    ErrorKind::MissingKey {
                        section: section.name.clone(),
                        key: "trigger".into(),
                    },
                ));
                None
            }
        };
        let prompt = section
            .get("prompt")
            .map(|e| e.value.clone())
            .filter(|p| !p.trim().is_empty());
        let mut commands = Vec::new();
        for entry in &section.entries {
            if let Some(name) = entry.key.strip_prefix("command.") {
                match parse_payload(&entry.value) {
                    Some(payload) if !name.is_empty() => commands.push((name.to_string(), payload)),
                    _ => errors.push(ConfigError::at(
                        entry.line,
                        ErrorKind::TypeError {
                            key: entry.key.clone(),
                            expected: "key=value list".into(),
                        },
                    )),
                }
            } else if !matches!(entry.key.as_str(), "trigger" | "prompt") {
                errors.push(ConfigError::at(
                    entry.line,
                    ErrorKind::TypeError {
                        key: entry.key.clone(),
                        expected: "one of trigger, prompt, command.<name>".into(),
                    },
                ));
            }
        }
        if prompt.is_none() && commands.is_empty() {
            errors.push(ConfigError::at(
                section.line,
                ErrorKind::EmptyStage(id.clone()),
            ));
        }
        if let Some(trigger) = trigger {
            stages.push(Stage {
                id,
                trigger,
                prompt,
                commands,
            });
        }
    }

    let author = doc
        .get("plan", "author")
        .map(|e| e.value.trim().to_string())
        .filter(|a| !a.is_empty())
        .unwrap_or_else(|| DEFAULT_AUTHOR.to_string());
    ConfigErrors::check(&doc.path, errors, Plan { stages, author })
}

/// Settings read from `server.conf`.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub tick_interval_ms: u64,
    pub cooldown_s: f64,
    pub emit_floor: f64,
    pub pass_sentinel: String,
    pub inactivity_s: u64,
    pub queue_capacity: usize,
    pub greeting_rules: RuleTable,
    pub apt_rules: RuleTable,
    pub actors: Vec<TemplateActorSpec>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let listeners = crate::listeners::ListenerSettings::default();
        Self {
            tick_interval_ms: 250,
            cooldown_s: 3.0,
            emit_floor: 0.05,
            pass_sentinel: PASS_SENTINEL.to_string(),
            inactivity_s: DEFAULT_INACTIVITY_S,
            queue_capacity: EVENT_QUEUE_CAPACITY,
            greeting_rules: listeners.greeting,
            apt_rules: listeners.apt,
            actors: TemplateActorSpec::builtins(),
        }
    }
}

fn load_rules(
    base: Option<&Path>,
    entry: Option<&Entry>,
    fallback: RuleTable,
    errors: &mut Vec<ConfigError>,
) -> RuleTable {
    let Some(entry) = entry else {
        return fallback;
    };
    let path = base
        .map(|b| b.join(entry.value.trim()))
        .unwrap_or_else(|| PathBuf::from(entry.value.trim()));
    let parsed = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))
        .and_then(|text| RuleTable::parse(&text).map_err(|e| format!("{}: {e}", path.display())));
    match parsed {
        Ok(table) => table,
        Err(reason) => {
            errors.push(ConfigError::at(entry.line, ErrorKind::BadRules(reason)));
            fallback
        }
    }
}

/// Reads `[coordinator]`, `[listeners]` and `[actor.<name>]` sections. Rule
/// table paths are resolved against the document's directory.
pub fn load_server(doc: &ConfigDocument) -> Result<ServerConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let mut config = ServerConfig::default();
    let base = doc.path.as_deref().and_then(Path::parent);

    let unit = |v: &f64| (0.0..=1.0).contains(v);
    let positive = |v: &f64| *v > 0.0;
    let non_negative = |v: &f64| *v >= 0.0;

    {
        let mut f = Fields::new(doc, "coordinator", &mut errors);
        if let Some(v) = f.integer(
            "tick_interval_ms",
            Some(config.tick_interval_ms),
            Some((">= 1", &|v| *v >= 1)),
        ) {
            config.tick_interval_ms = v;
        }
        if let Some(v) = f.real(
            "cooldown_s",
            Some(config.cooldown_s),
            Some((">= 0", &non_negative)),
        ) {
            config.cooldown_s = v;
        }
        if let Some(v) = f.real(
            "emit_floor",
            Some(config.emit_floor),
            Some(("[0,1]", &unit)),
        ) {
            config.emit_floor = v;
        }
        config.pass_sentinel = f.text_or("pass_sentinel", PASS_SENTINEL).trim().to_string();
    }
    {
        let mut f = Fields::new(doc, "listeners", &mut errors);
        if let Some(v) = f.integer(
            "inactivity_s",
            Some(config.inactivity_s),
            Some((">= 1", &|v| *v >= 1)),
        ) {
            config.inactivity_s = v;
        }
        if let Some(v) = f.integer(
            "queue_capacity",
            Some(config.queue_capacity as u64),
            Some((">= 1", &|v| *v >= 1)),
        ) {
            config.queue_capacity = v as usize;
        }
    }
    let greeting = doc.get("listeners", "greeting_rules");
    let apt = doc.get("listeners", "apt_rules");
    config.greeting_rules = load_rules(base, greeting, config.greeting_rules, &mut errors);
    config.apt_rules = load_rules(base, apt, config.apt_rules, &mut errors);

    for section in &doc.sections {
        let name = match section.name.as_str() {
            "coordinator" | "listeners" => continue,
            other => match other.strip_prefix("actor.") {
                Some(name) if !name.is_empty() => name,
                _ => {
                    errors.push(ConfigError::at(
                        section.line,
                        ErrorKind::UnexpectedSection(section.name.clone()),
                    ));
                    continue;
                }
            },
        };
        let existing = config.actors.iter().position(|a| a.name == name);
        let mut spec = existing
            .map(|i| config.actors[i].clone())
            .unwrap_or(TemplateActorSpec {
                name: name.to_string(),
                author: DEFAULT_AUTHOR.to_string(),
                templates: Default::default(),
                priority: PersonaParams::DEFAULT_PRIORITY,
                timeout_s: PersonaParams::DEFAULT_TIMEOUT_S,
                decay_rate: PersonaParams::DEFAULT_DECAY_RATE,
            });
        let mut f = Fields::new(doc, &section.name, &mut errors);
        let enabled = f.parsed(
            "enabled",
            Some(true),
            "true or false",
            |s| s.parse::<bool>().ok(),
            None,
        );
        spec.author = f.text_or("author", &spec.author).trim().to_string();
        if let Some(v) = f.real("priority", Some(spec.priority), Some(("[0,1]", &unit))) {
            spec.priority = v;
        }
        if let Some(v) = f.real("timeout_s", Some(spec.timeout_s), Some(("> 0", &positive))) {
            spec.timeout_s = v;
        }
        if let Some(v) = f.real(
            "decay_rate",
            Some(spec.decay_rate),
            Some((">= 0", &non_negative)),
        ) {
            spec.decay_rate = v;
        }
        for entry in &section.entries {
            if let Some(label) = entry.key.strip_prefix("on.") {
                if label.is_empty() || entry.value.trim().is_empty() {
                    f.type_error(entry, "on.<label> = <template>");
                } else {
                    spec.templates
                        .insert(label.to_string(), entry.value.clone());
                }
            }
        }
        if spec.templates.is_empty() {
            f.errors.push(ConfigError::at(
                section.line,
                ErrorKind::MissingKey {
                    section: section.name.clone(),
                    key: "on.<label>".into(),
                },
            ));
        }
        match (existing, enabled) {
            (Some(i), Some(false)) => {
                config.actors.remove(i);
            }
            (Some(i), _) => config.actors[i] = spec,
            (None, Some(false)) => {}
            (None, _) => config.actors.push(spec),
        }
    }
    ConfigErrors::check(&doc.path, errors, config)
}

pub fn load_agent_file(path: &Path) -> Result<AgentSpec, ConfigErrors> {
    load_agent(&parse_file(path)?)
}

pub fn load_plan_file(path: &Path) -> Result<Plan, ConfigErrors> {
    load_plan(&parse_file(path)?)
}

pub fn load_server_file(path: &Path) -> Result<ServerConfig, ConfigErrors> {
    load_server(&parse_file(path)?)
}

/// Loads every `*.agent` file in `dir`, sorted by file name.
pub fn load_agents_dir(dir: &Path) -> Result<Vec<AgentSpec>, Vec<ConfigErrors>> {
    let listing = fs::read_dir(dir).map_err(|e| {
        vec![ConfigErrors::new(
            Some(dir.to_path_buf()),
            vec![ConfigError::file(ErrorKind::Io(format!(
                "cannot read agents directory: {e}"
            )))],
        )]
    })?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "agent"))
        .collect();
    paths.sort();
    let mut agents: Vec<AgentSpec> = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        match load_agent_file(&path) {
            Ok(agent) => {
                if agents
                    .iter()
                    .any(|a| a.persona.agent_name == agent.persona.agent_name)
                {
                    failures.push(ConfigErrors::new(
                        Some(path),
                        vec![ConfigError::file(ErrorKind::DuplicateAgent(
                            agent.persona.agent_name,
                        ))],
                    ));
                } else {
                    agents.push(agent);
                }
            }
            Err(e) => failures.push(e),
        }
    }
    if failures.is_empty() {
        Ok(agents)
    } else {
        Err(failures)
    }
}
