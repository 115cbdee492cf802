//! Prompt assembly, view merging and report generation backends.
//!
//! Templates are plain text files with `[system]`, `[user]` and repeatable
//! `[example]` sections. Placeholders are written `{name}`. The built-in
//! templates live in `templates/` and can be replaced at run time.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phrase_graph::KeyPhrase;

pub const API_KEY_ENV: &str = "RA_RRG_API_KEY";
pub const NONE_MARKER: &str = "(none)";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

const BUILTIN_EXTRACTION: &str = include_str!("../templates/extraction.txt");
const BUILTIN_SINGLE_VIEW: &str = include_str!("../templates/single_view.txt");
const BUILTIN_MULTI_VIEW: &str = include_str!("../templates/multi_view.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Extraction,
    SingleView,
    MultiView,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Extraction => "extraction",
            TemplateId::SingleView => "single_view",
            TemplateId::MultiView => "multi_view",
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            TemplateId::Extraction => &["report", "radgraph_phrases"],
            TemplateId::SingleView => &["key_phrases"],
            TemplateId::MultiView => &["frontal_phrases", "lateral_phrases"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extraction" => Ok(Self::Extraction),
            "single_view" => Ok(Self::SingleView),
            "multi_view" => Ok(Self::MultiView),
            other => Err(Error::validation(format!("unknown template id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub system: String,
    pub user: String,
    pub examples: Vec<String>,
    /// How many of `examples` to include, 0 to 3.
    pub example_count: usize,
}

fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if close > 0 && after[..close].bytes().all(|b| b.is_ascii_lowercase() || b == b'_') => {
                out.push(&after[..close]);
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Substitutes every `{name}` in `template` in a single pass; substituted
/// values are never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if close > 0 && after[..close].bytes().all(|b| b.is_ascii_lowercase() || b == b'_') => {
                let name = &after[..close];
                let value = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::validation(format!("placeholder {{{name}}} left unfilled")))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl PromptTemplate {
    /// Parses the sectioned template format.
    pub fn parse(id: TemplateId, text: &str) -> Result<Self> {
        let mut system = None;
        let mut user = None;
        let mut examples = Vec::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let mut finish = |section: Option<(String, Vec<&str>)>| -> Result<()> {
            if let Some((name, lines)) = section {
                let body = lines.join("\n").trim_matches('\n').to_owned();
                match name.as_str() {
                    "system" if system.is_none() => system = Some(body),
                    "user" if user.is_none() => user = Some(body),
                    "example" => examples.push(body),
                    "system" | "user" => return Err(Error::parse("template", format!("duplicate [{name}] section"))),
                    other => return Err(Error::parse("template", format!("unknown section [{other}]"))),
                }
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim_end();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && !trimmed.contains(' ') {
                finish(current.take())?;
                current = Some((trimmed[1..trimmed.len() - 1].to_owned(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(trimmed);
            } else if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Err(Error::parse("template", format!("line {}: text outside a section", i + 1)));
            }
        }
        finish(current.take())?;
        let user = user.ok_or_else(|| Error::parse("template", "missing [user] section"))?;
        let system = system.unwrap_or_default();
        let present = placeholders(&user);
        for req in id.required() {
            if !present.contains(req) {
                return Err(Error::parse("template", format!("{id} template lacks the {{{req}}} placeholder")));
            }
        }
        let example_count = examples.len().min(1);
        Ok(Self {
            id,
            system,
            user,
            examples,
            example_count,
        })
    }

    pub fn builtin(id: TemplateId) -> Self {
        let text = match id {
            TemplateId::Extraction => BUILTIN_EXTRACTION,
            TemplateId::SingleView => BUILTIN_SINGLE_VIEW,
            TemplateId::MultiView => BUILTIN_MULTI_VIEW,
        };
        Self::parse(id, text).expect("built-in templates are valid")
    }

    pub fn load(id: TemplateId, path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(id, &std::fs::read_to_string(path)?)
    }

    pub fn with_examples(mut self, count: usize) -> Result<Self> {
        if count > 3 {
            return Err(Error::validation(format!("in-context example count must be 0 to 3, got {count}")));
        }
        if count > self.examples.len() {
            return Err(Error::validation(format!(
                "template {} has only {} examples",
                self.id,
                self.examples.len()
            )));
        }
        self.example_count = count;
        Ok(self)
    }

    fn render(&self, values: &[(&str, &str)]) -> Result<(String, String)> {
        let mut examples = String::new();
        for (i, ex) in self.examples.iter().take(self.example_count).enumerate() {
            examples.push_str(&format!("Example {}:\n{ex}\n\n", i + 1));
        }
        if !examples.is_empty() {
            examples.push_str("Now the actual input.\n");
        }
        let mut all = values.to_vec();
        all.push(("examples", examples.as_str()));
        Ok((fill(&self.system, &all)?, fill(&self.user, &all)?))
    }
}

/// Renders phrases as `- ` bullets, or the none marker for an empty list.
pub fn format_phrase_list<S: AsRef<str>>(phrases: &[S]) -> String {
    if phrases.is_empty() {
        return NONE_MARKER.to_owned();
    }
    phrases.iter().map(|p| format!("- {}", p.as_ref())).collect::<Vec<_>>().join("\n")
}

/// The phrase lists a prompt was assembled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub template: TemplateId,
    pub phrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lateral_phrases: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    pub provenance: Provenance,
}

fn texts(phrases: &[KeyPhrase]) -> Vec<String> {
    phrases.iter().map(|p| p.text.clone()).collect()
}

pub fn build_extraction_prompt(report: &str, radgraph_phrases: &[KeyPhrase], template: &PromptTemplate) -> Result<Prompt> {
    if template.id != TemplateId::Extraction {
        return Err(Error::validation(format!("expected an extraction template, got {}", template.id)));
    }
    if report.trim().is_empty() {
        return Err(Error::validation("report text is empty"));
    }
    let list = format_phrase_list(&texts(radgraph_phrases));
    let (system, user) = template.render(&[("report", report.trim()), ("radgraph_phrases", &list)])?;
    Ok(Prompt {
        system,
        user,
        provenance: Provenance {
            template: TemplateId::Extraction,
            phrases: texts(radgraph_phrases),
            lateral_phrases: None,
        },
    })
}

/// Templates for [`build_rag_prompt`].
#[derive(Debug, Clone)]
pub struct RagTemplates {
    pub single_view: PromptTemplate,
    pub multi_view: PromptTemplate,
}

impl Default for RagTemplates {
    fn default() -> Self {
        Self {
            single_view: PromptTemplate::builtin(TemplateId::SingleView),
            multi_view: PromptTemplate::builtin(TemplateId::MultiView),
        }
    }
}

/// Single-view prompt when `lateral` is `None`, two-view prompt otherwise.
pub fn build_rag_prompt(frontal: &[KeyPhrase], lateral: Option<&[KeyPhrase]>, templates: &RagTemplates) -> Result<Prompt> {
    if frontal.is_empty() && lateral.is_none_or(|l| l.is_empty()) {
        return Err(Error::validation("no key phrases to build a report from"));
    }
    let front_list = format_phrase_list(&texts(frontal));
    match lateral {
        None => {
            let (system, user) = templates.single_view.render(&[("key_phrases", &front_list)])?;
            Ok(Prompt {
                system,
                user,
                provenance: Provenance {
                    template: TemplateId::SingleView,
                    phrases: texts(frontal),
                    lateral_phrases: None,
                },
            })
        }
        Some(lat) => {
            let lat_list = format_phrase_list(&texts(lat));
            let (system, user) = templates
                .multi_view
                .render(&[("frontal_phrases", &front_list), ("lateral_phrases", &lat_list)])?;
            Ok(Prompt {
                system,
                user,
                provenance: Provenance {
                    template: TemplateId::MultiView,
                    phrases: texts(frontal),
                    lateral_phrases: Some(texts(lat)),
                },
            })
        }
    }
}

/// Splits a leading "no " or "maybe " status prefix off a phrase.
fn split_status(p: &str) -> (&str, &str) {
    for prefix in ["no ", "maybe "] {
        if p.len() > prefix.len() && p.is_char_boundary(prefix.len()) && p[..prefix.len()].eq_ignore_ascii_case(prefix) {
            return (&p[..prefix.len()], &p[prefix.len()..]);
        }
    }
    ("", p)
}

/// Frontal phrases first, then lateral phrases that neither repeat nor
/// contradict a frontal one. Exact duplicates are kept once.
pub fn merge_views(frontal: &[KeyPhrase], lateral: &[KeyPhrase]) -> Vec<KeyPhrase> {
    let mut out: Vec<KeyPhrase> = Vec::with_capacity(frontal.len() + lateral.len());
    for p in frontal {
        if !out.iter().any(|q| q.text == p.text) {
            out.push(p.clone());
        }
    }
    let frontal_count = out.len();
    for p in lateral {
        if out.iter().any(|q| q.text == p.text) {
            continue;
        }
        let (status, core) = split_status(&p.text);
        let conflicts = out[..frontal_count].iter().any(|q| {
            let (s, c) = split_status(&q.text);
            c == core && !s.eq_ignore_ascii_case(status)
        });
        if !conflicts {
            out.push(p.clone());
        }
    }
    out
}

/// Reads the bullet list that follows the last line equal to `heading`.
pub fn list_after_heading(text: &str, heading: &str) -> Option<Vec<String>> {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.iter().rposition(|l| l.trim() == heading)?;
    let mut out = Vec::new();
    for line in &lines[start + 1..] {
        let line = line.trim();
        if line == NONE_MARKER {
            break;
        }
        match line.strip_prefix("- ") {
            Some(p) if !p.trim().is_empty() => out.push(p.trim().to_owned()),
            _ => break,
        }
    }
    Some(out)
}

/// Parses a list answer: `- ` bullets when present, otherwise one phrase per
/// non-empty line with trailing periods removed.
pub fn parse_phrase_list(answer: &str) -> Vec<String> {
    let bullets: Vec<String> = answer
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- ").map(|p| p.trim().to_owned()))
        .filter(|p| !p.is_empty())
        .collect();
    if !bullets.is_empty() {
        return bullets;
    }
    answer
        .lines()
        .map(|l| l.trim().trim_end_matches('.').trim().to_owned())
        .filter(|l| !l.is_empty() && l != NONE_MARKER)
        .collect()
}

fn sentence(p: &str) -> String {
    let mut chars = p.trim().chars();
    let mut s: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    /// Offline stand-in that turns the prompt's phrase lists into sentences.
    Mock,
    /// OpenAI-compatible chat completion endpoint.
    Remote {
        endpoint: String,
        model: String,
        timeout: Duration,
        temperature: f64,
        api_key: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationClient {
    pub backend: Backend,
}

impl GenerationClient {
    pub fn mock() -> Self {
        Self { backend: Backend::Mock }
    }

    /// Remote client; the API key is read from `RA_RRG_API_KEY` if set.
    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>, timeout: Duration, temperature: f64) -> Self {
        Self {
            backend: Backend::Remote {
                endpoint: endpoint.into(),
                model: model.into(),
                timeout,
                temperature,
                api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Verbatim backend output.
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn mock_generate(prompt: &Prompt) -> Result<Report> {
    let missing = |h: &str| Error::validation(format!("prompt has no {h:?} list"));
    let phrases: Vec<String> = match prompt.provenance.template {
        TemplateId::Extraction => {
            list_after_heading(&prompt.user, "RadGraph phrases:").ok_or_else(|| missing("RadGraph phrases:"))?
        }
        TemplateId::SingleView => list_after_heading(&prompt.user, "Key phrases:").ok_or_else(|| missing("Key phrases:"))?,
        TemplateId::MultiView => {
            let to_kp = |v: Vec<String>| v.iter().map(KeyPhrase::new).collect::<Result<Vec<_>>>();
            let f = list_after_heading(&prompt.user, "Frontal key phrases:").ok_or_else(|| missing("Frontal key phrases:"))?;
            let l = list_after_heading(&prompt.user, "Lateral key phrases:").ok_or_else(|| missing("Lateral key phrases:"))?;
            texts(&merge_views(&to_kp(f)?, &to_kp(l)?))
        }
    };
    let warning = phrases.is_empty().then(|| "no phrases to report".to_owned());
    Ok(Report {
        text: phrases.iter().map(|p| sentence(p)).collect::<Vec<_>>().join(" "),
        provenance: prompt.provenance.clone(),
        warning,
    })
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

fn remote_generate(prompt: &Prompt, backend: &Backend) -> Result<Report> {
    let Backend::Remote {
        endpoint,
        model,
        timeout,
        temperature,
        api_key,
    } = backend
    else {
        unreachable!("called with the remote backend only")
    };
    let ext = |m: String| Error::External(format!("{endpoint}: {m}"));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(*timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut messages = Vec::with_capacity(2);
    if !prompt.system.is_empty() {
        messages.push(ChatMessage {
            role: "system",
            content: &prompt.system,
        });
    }
    messages.push(ChatMessage {
        role: "user",
        content: &prompt.user,
    });
    let body = ChatRequest {
        model,
        messages,
        temperature: *temperature,
    };
    let mut req = agent.post(endpoint.as_str());
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(&body).map_err(|e| ext(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let detail = resp.body_mut().read_to_string().unwrap_or_default();
        let detail: String = detail.chars().take(200).collect();
        return Err(ext(format!("HTTP {status}: {detail}")));
    }
    let value: serde_json::Value = resp
        .body_mut()
        .read_json()
        .map_err(|e| ext(format!("bad response body: {e}")))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ext("response lacks choices[0].message.content".into()))?;
    if text.trim().is_empty() {
        return Err(ext("empty completion".into()));
    }
    Ok(Report {
        text: text.to_owned(),
        provenance: prompt.provenance.clone(),
        warning: None,
    })
}

pub fn generate_report(prompt: &Prompt, client: &GenerationClient) -> Result<Report> {
    match &client.backend {
        Backend::Mock => mock_generate(prompt),
        remote @ Backend::Remote { .. } => remote_generate(prompt, remote),
    }
}

/// Generates one report per prompt with at most `max_in_flight` concurrent
/// requests. Results keep the input order.
pub fn generate_reports(prompts: &[Prompt], client: &GenerationClient, max_in_flight: usize) -> Vec<Result<Report>> {
    let workers = max_in_flight.max(1).min(prompts.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Report>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let r = generate_report(&prompts[i], client);
                *slots[i].lock().expect("no panics while holding the lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("lock not poisoned").expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(items: &[&str]) -> Vec<KeyPhrase> {
        items.iter().map(|s| KeyPhrase::new(s).unwrap()).collect()
    }

    fn strs(v: &[KeyPhrase]) -> Vec<&str> {
        v.iter().map(|p| p.as_str()).collect()
    }

    #[test]
    fn builtin_templates_parse() {
        for id in [TemplateId::Extraction, TemplateId::SingleView, TemplateId::MultiView] {
            let t = PromptTemplate::builtin(id);
            assert_eq!(t.example_count, 1);
            assert!(!t.system.is_empty());
        }
    }

    #[test]
    fn extraction_prompt_contents() {
        let t = PromptTemplate::builtin(TemplateId::Extraction);
        let report = "Stable mild cardiomegaly. No effusion.";
        let p = build_extraction_prompt(report, &kp(&["mild cardiomegaly", "no effusion"]), &t).unwrap();
        assert!(p.user.contains(report));
        assert!(p.user.contains("- mild cardiomegaly\n- no effusion"));
        for word in ["\"new\"", "\"improved\"", "\"unchanged\""] {
            assert!(p.user.contains(word), "{word}");
        }
        assert!(!p.user.contains('{'));

        let empty = build_extraction_prompt(report, &[], &t).unwrap();
        assert!(empty.user.contains("RadGraph phrases:\n(none)"));
        assert!(build_extraction_prompt("  ", &[], &t).is_err());
    }

    #[test]
    fn unfilled_placeholder_is_an_error() {
        let t = PromptTemplate::parse(TemplateId::Extraction, "[user]\n{report}\n{radgraph_phrases}\n{findings}").unwrap();
        let err = build_extraction_prompt("x", &[], &t).unwrap_err();
        assert!(err.to_string().contains("{findings}"));
        assert!(PromptTemplate::parse(TemplateId::SingleView, "[user]\nno list here").is_err());
        assert!(PromptTemplate::parse(TemplateId::SingleView, "stray\n[user]\n{key_phrases}").is_err());
    }

    #[test]
    fn braces_in_values_are_not_rescanned() {
        let t = PromptTemplate::builtin(TemplateId::SingleView);
        let p = build_rag_prompt(&kp(&["odd {key_phrases} text"]), None, &RagTemplates::default()).unwrap();
        assert!(p.user.contains("- odd {key_phrases} text"));
        assert_eq!(t.id, TemplateId::SingleView);
    }

    #[test]
    fn example_count_controls_examples() {
        let t = PromptTemplate::builtin(TemplateId::SingleView).with_examples(0).unwrap();
        let templates = RagTemplates {
            single_view: t,
            ..Default::default()
        };
        let p = build_rag_prompt(&kp(&["a"]), None, &templates).unwrap();
        assert!(!p.user.contains("Example 1"));
        assert!(PromptTemplate::builtin(TemplateId::SingleView).with_examples(4).is_err());
        assert!(PromptTemplate::builtin(TemplateId::SingleView).with_examples(2).is_err());
    }

    #[test]
    fn rag_prompt_selection() {
        let t = RagTemplates::default();
        let p = build_rag_prompt(&kp(&["a b", "c", "d"]), None, &t).unwrap();
        assert_eq!(p.provenance.template, TemplateId::SingleView);
        assert!(p.user.contains("Key phrases:\n- a b\n- c\n- d\n"));

        let p = build_rag_prompt(&kp(&["x"]), Some(&kp(&["y"])), &t).unwrap();
        assert_eq!(p.provenance.template, TemplateId::MultiView);
        assert!(p.user.contains("Frontal key phrases:\n- x\n"));
        assert!(p.user.contains("Lateral key phrases:\n- y\n"));

        let p = build_rag_prompt(&[], Some(&kp(&["y"])), &t).unwrap();
        assert!(p.user.contains("Frontal key phrases:\n(none)\n"));
        assert!(build_rag_prompt(&[], None, &t).is_err());
        assert!(build_rag_prompt(&[], Some(&[]), &t).is_err());
    }

    #[test]
    fn merge_examples() {
        assert_eq!(strs(&merge_views(&kp(&["no pleural effusion"]), &kp(&["pleural effusion"]))), ["no pleural effusion"]);
        assert_eq!(strs(&merge_views(&kp(&["cardiomegaly"]), &kp(&["cardiomegaly"]))), ["cardiomegaly"]);
        assert_eq!(strs(&merge_views(&kp(&["a", "b"]), &kp(&["c"]))), ["a", "b", "c"]);
        assert_eq!(strs(&merge_views(&kp(&["edema"]), &kp(&["maybe edema", "no edema"]))), ["edema"]);
        assert_eq!(strs(&merge_views(&kp(&["no edema"]), &kp(&["maybe edema"]))), ["no edema"]);
    }

    #[test]
    fn mock_reports() {
        let t = RagTemplates::default();
        let client = GenerationClient::mock();
        let p = build_rag_prompt(&kp(&["no pleural effusion", "mild cardiomegaly"]), None, &t).unwrap();
        let r = generate_report(&p, &client).unwrap();
        assert_eq!(r.text, "No pleural effusion. Mild cardiomegaly.");
        assert_eq!(r.warning, None);

        let p = build_rag_prompt(&kp(&["no pleural effusion"]), Some(&kp(&["pleural effusion"])), &t).unwrap();
        let r = generate_report(&p, &client).unwrap();
        assert_eq!(r.text, "No pleural effusion.");
        assert_eq!(r.provenance.lateral_phrases.as_deref(), Some(&["pleural effusion".to_owned()][..]));

        let p = build_rag_prompt(&[], Some(&kp(&[])), &t);
        assert!(p.is_err());
        let empty = Prompt {
            system: String::new(),
            user: "Key phrases:\n(none)\n".into(),
            provenance: Provenance {
                template: TemplateId::SingleView,
                phrases: vec![],
                lateral_phrases: None,
            },
        };
        let r = generate_report(&empty, &client).unwrap();
        assert_eq!(r.text, "");
        assert!(r.warning.is_some());
    }

    #[test]
    fn concurrent_generation_keeps_order() {
        let t = RagTemplates::default();
        let prompts: Vec<Prompt> = (0..9).map(|i| build_rag_prompt(&kp(&[&format!("finding {i}")]), None, &t).unwrap()).collect();
        let out = generate_reports(&prompts, &GenerationClient::mock(), 3);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().text, format!("Finding {i}."));
        }
        assert!(generate_reports(&[], &GenerationClient::mock(), 4).is_empty());
    }

    #[test]
    fn remote_errors_surface() {
        let client = GenerationClient::remote("http://127.0.0.1:9/v1/chat/completions", "m", Duration::from_millis(300), 0.0);
        let p = build_rag_prompt(&kp(&["a"]), None, &RagTemplates::default()).unwrap();
        assert!(matches!(generate_report(&p, &client), Err(Error::External(_))));
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_phrase_list("Sure:\n- a\n- b c\n"), ["a", "b c"]);
        assert_eq!(parse_phrase_list("A.\n\nB c.\n"), ["A", "B c"]);
    }

    fn phrase() -> impl Strategy<Value = String> {
        (prop::option::of(prop::sample::select(vec!["no ", "maybe "])), prop::sample::select(vec!["edema", "effusion", "nodule", "mild cardiomegaly", "atelectasis"]))
            .prop_map(|(p, c)| format!("{}{c}", p.unwrap_or("")))
    }

    proptest! {
        #[test]
        fn merge_properties(f in prop::collection::vec(phrase(), 0..6), l in prop::collection::vec(phrase(), 0..6)) {
            let (f, l) = (kp(&f.iter().map(String::as_str).collect::<Vec<_>>()), kp(&l.iter().map(String::as_str).collect::<Vec<_>>()));
            let m = merge_views(&f, &l);
            // Idempotent on an already merged list.
            prop_assert_eq!(&merge_views(&m, &[]), &m);
            // No duplicates.
            for (i, a) in m.iter().enumerate() {
                prop_assert!(m[i + 1..].iter().all(|b| b.text != a.text));
            }
            // Every frontal phrase survives, in order, before any lateral one.
            let mut dedup_f: Vec<&str> = Vec::new();
            for p in &f {
                if !dedup_f.contains(&p.as_str()) {
                    dedup_f.push(p.as_str());
                }
            }
            prop_assert_eq!(&strs(&m)[..dedup_f.len()], &dedup_f[..]);
            // Surviving lateral phrases never contradict a frontal phrase.
            for p in &m[dedup_f.len()..] {
                let (s, c) = split_status(&p.text);
                let consistent = f.iter().all(|q| {
                    let (s2, c2) = split_status(&q.text);
                    c2 != c || s2 == s
                });
                prop_assert!(consistent);
            }
        }

        #[test]
        fn prompt_lists_each_phrase_once(items in prop::collection::btree_set("[a-z]{3,8}( [a-z]{3,8})?", 1..6)) {
            let items: Vec<&str> = items.iter().map(String::as_str).collect();
            let p = build_rag_prompt(&kp(&items), None, &RagTemplates::default()).unwrap();
            let list = list_after_heading(&p.user, "Key phrases:").unwrap();
            for it in &items {
                prop_assert_eq!(list.iter().filter(|x| x == it).count(), 1);
            }
            let r = generate_report(&p, &GenerationClient::mock()).unwrap();
            prop_assert_eq!(&r, &generate_report(&p, &GenerationClient::mock()).unwrap());
            for s in r.text.split(". ") {
                let s = s.trim_end_matches('.').to_lowercase();
                prop_assert!(items.contains(&s.as_str()));
            }
        }
    }
}
