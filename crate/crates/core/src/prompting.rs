//! Few-shot causality prompt assembly, rendering, and reply parsing.
//!
//! A rendered causality prompt is the introduction template followed by the
//! few-shot examples (most similar first) and the test context, separated by
//! blank lines. Each example is the dialogue, its four labeled knowledge
//! blocks, and the ground-truth `sys:` reply. The test block carries only the
//! two user-side blocks; the model is expected to produce the rest.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::knowledge::{format_phrases, InferenceSet, JoinStyle, Relation};
use crate::text;

pub const LABEL_USER_WANTS: &str = "user wants to:";
pub const LABEL_USER_REACTS: &str = "user reacts to:";
pub const LABEL_SYS_INTENT: &str = "sys's intent:";
pub const LABEL_SYS_REACTS: &str = "sys reacts to:";
pub const LABEL_SYS: &str = "sys:";

pub const KNOWLEDGE_LABELS: [&str; 4] =
    [LABEL_USER_WANTS, LABEL_USER_REACTS, LABEL_SYS_INTENT, LABEL_SYS_REACTS];

pub const CAUSALITY_V1: &str = "causality-v1";
pub const BASELINE_V1: &str = "baseline-v1";

const CAUSALITY_V1_TEXT: &str = include_str!("../assets/templates/causality_v1.txt");
const BASELINE_V1_TEXT: &str = include_str!("../assets/templates/baseline_v1.txt");

/// Looks up a versioned introduction template.
pub fn introduction(id: &str) -> Option<&'static str> {
    match id {
        CAUSALITY_V1 => Some(CAUSALITY_V1_TEXT),
        BASELINE_V1 => Some(BASELINE_V1_TEXT),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Causality,
    Baseline,
}

impl Variant {
    pub fn default_intro(self) -> &'static str {
        match self {
            Variant::Causality => CAUSALITY_V1,
            Variant::Baseline => BASELINE_V1,
        }
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causality" => Ok(Variant::Causality),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::pre(format!("unknown prompt variant {other:?}"))),
        }
    }
}

/// Renders dialogue turns as `user: ...` / `sys: ...` lines.
pub fn render_dialogue(turns: &[Utterance]) -> String {
    let mut out = String::new();
    for (i, u) in turns.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(u.speaker.as_str());
        out.push_str(": ");
        out.push_str(&text::normalize_whitespace(&u.text));
    }
    out
}

/// The four causality blocks of one few-shot example, always in
/// want / react / intent / react order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBlocks {
    pub user_wants: Vec<String>,
    pub user_reacts: Vec<String>,
    pub sys_intent: Vec<String>,
    pub sys_reacts: Vec<String>,
}

impl KnowledgeBlocks {
    pub fn render(&self) -> String {
        format!(
            "{LABEL_USER_WANTS} {}\n{LABEL_USER_REACTS} {}\n{LABEL_SYS_INTENT} {}\n{LABEL_SYS_REACTS} {}",
            format_phrases(&self.user_wants, JoinStyle::Sentence),
            format_phrases(&self.user_reacts, JoinStyle::Sentence),
            format_phrases(&self.sys_intent, JoinStyle::Sentence),
            format_phrases(&self.sys_reacts, JoinStyle::Sentence),
        )
    }
}

/// User-side knowledge for the test input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserKnowledge {
    pub wants: Vec<String>,
    pub reacts: Vec<String>,
}

impl UserKnowledge {
    pub fn from_sets(sets: [&InferenceSet; 2]) -> Result<Self> {
        let (wants, reacts) = assign_pair(sets, Relation::XWant, "user")?;
        Ok(Self {
            wants: wants.phrases.clone(),
            reacts: reacts.phrases.clone(),
        })
    }

    pub fn render(&self) -> String {
        user_causality_text(&self.wants, &self.reacts)
    }
}

/// Canonical serialization of user-side causality, shared by prompts and by
/// the generator's user encoder.
pub fn user_causality_text(wants: &[String], reacts: &[String]) -> String {
    format!(
        "{LABEL_USER_WANTS} {}\n{LABEL_USER_REACTS} {}",
        format_phrases(wants, JoinStyle::Semicolon),
        format_phrases(reacts, JoinStyle::Semicolon)
    )
}

/// Canonical serialization of sys-side causality for the sys encoder.
pub fn sys_causality_text(intent: &[String], reacts: &[String]) -> String {
    format!(
        "{LABEL_SYS_INTENT} {}\n{LABEL_SYS_REACTS} {}",
        format_phrases(intent, JoinStyle::Semicolon),
        format_phrases(reacts, JoinStyle::Semicolon)
    )
}

fn assign_pair<'a>(
    sets: [&'a InferenceSet; 2],
    first: Relation,
    side: &str,
) -> Result<(&'a InferenceSet, &'a InferenceSet)> {
    let [a, b] = sets;
    let (x, y) = if a.relation == first { (a, b) } else { (b, a) };
    if x.relation != first || y.relation != Relation::XReact {
        return Err(Error::pre(format!(
            "{side} knowledge needs ({first}, xReact), got ({}, {})",
            a.relation, b.relation
        )));
    }
    for s in [x, y] {
        if s.phrases.is_empty() {
            return Err(Error::Empty(format!("{side} {} inference set", s.relation)));
        }
    }
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub conversation_id: String,
    pub context_text: String,
    /// Absent for raw (baseline) examples.
    pub knowledge: Option<KnowledgeBlocks>,
    pub response_text: String,
}

impl FewShotExample {
    fn render(&self, with_knowledge: bool) -> String {
        let mut out = self.context_text.clone();
        if with_knowledge {
            if let Some(k) = &self.knowledge {
                out.push('\n');
                out.push_str(&k.render());
            }
        }
        out.push('\n');
        out.push_str(LABEL_SYS);
        out.push(' ');
        out.push_str(&self.response_text);
        out
    }
}

/// Assembles one few-shot example from a training dialogue, its ground-truth
/// reply, and the four inference sets. Each pair may be given in either
/// order; blocks always come out as want, react, intent, react.
pub fn build_fewshot(
    conversation_id: &str,
    context: &[Utterance],
    reference: Option<&Utterance>,
    user_k: [&InferenceSet; 2],
    sys_k: [&InferenceSet; 2],
) -> Result<FewShotExample> {
    let reference = reference.ok_or_else(|| Error::Missing {
        what: "reference sys response".into(),
        id: conversation_id.to_string(),
    })?;
    if context.is_empty() {
        return Err(Error::Missing {
            what: "context".into(),
            id: conversation_id.to_string(),
        });
    }
    let (wants, u_reacts) = assign_pair(user_k, Relation::XWant, "user")?;
    let (intent, s_reacts) = assign_pair(sys_k, Relation::XIntent, "sys")?;
    Ok(FewShotExample {
        conversation_id: conversation_id.to_string(),
        context_text: render_dialogue(context),
        knowledge: Some(KnowledgeBlocks {
            user_wants: wants.phrases.clone(),
            user_reacts: u_reacts.phrases.clone(),
            sys_intent: intent.phrases.clone(),
            sys_reacts: s_reacts.phrases.clone(),
        }),
        response_text: text::normalize_whitespace(&reference.text),
    })
}

/// A few-shot example without knowledge, for the baseline prompt.
pub fn build_raw_example(
    conversation_id: &str,
    context: &[Utterance],
    reference: Option<&Utterance>,
) -> Result<FewShotExample> {
    let reference = reference.ok_or_else(|| Error::Missing {
        what: "reference sys response".into(),
        id: conversation_id.to_string(),
    })?;
    Ok(FewShotExample {
        conversation_id: conversation_id.to_string(),
        context_text: render_dialogue(context),
        knowledge: None,
        response_text: text::normalize_whitespace(&reference.text),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub intro_id: String,
    pub introduction: String,
    pub examples: Vec<FewShotExample>,
    pub test_context: String,
    pub test_knowledge: Option<UserKnowledge>,
    pub variant: Variant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub k: usize,
    /// Permits `k == 0` for zero-shot baseline prompts.
    pub allow_zero_shot: bool,
}

impl PromptOptions {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            allow_zero_shot: false,
        }
    }
}

pub fn build_prompt(
    intro_id: &str,
    fewshots: Vec<FewShotExample>,
    test_context: &[Utterance],
    test_user_k: Option<UserKnowledge>,
    variant: Variant,
    opts: PromptOptions,
) -> Result<PromptBundle> {
    if opts.k == 0 && !(opts.allow_zero_shot && variant == Variant::Baseline) {
        return Err(Error::pre("k must be at least 1"));
    }
    if fewshots.len() != opts.k {
        return Err(Error::pre(format!(
            "expected {} few-shot examples, got {}",
            opts.k,
            fewshots.len()
        )));
    }
    if test_context.is_empty() {
        return Err(Error::pre("empty test context"));
    }
    let introduction = introduction(intro_id)
        .ok_or_else(|| Error::pre(format!("unknown introduction template {intro_id:?}")))?;
    if variant == Variant::Causality && intro_id != CAUSALITY_V1 {
        return Err(Error::pre("causality prompts use the causality-v1 introduction"));
    }
    let (examples, test_knowledge) = match variant {
        Variant::Causality => {
            let k = test_user_k.ok_or_else(|| Error::Missing {
                what: "test user knowledge".into(),
                id: "causality prompt".into(),
            })?;
            if let Some(ex) = fewshots.iter().find(|e| e.knowledge.is_none()) {
                return Err(Error::Missing {
                    what: "example knowledge".into(),
                    id: ex.conversation_id.clone(),
                });
            }
            (fewshots, Some(k))
        }
        Variant::Baseline => {
            let stripped = fewshots
                .into_iter()
                .map(|mut e| {
                    e.knowledge = None;
                    e
                })
                .collect();
            (stripped, None)
        }
    };
    Ok(PromptBundle {
        intro_id: intro_id.to_string(),
        introduction: introduction.to_string(),
        examples,
        test_context: render_dialogue(test_context),
        test_knowledge,
        variant,
    })
}

/// Renders the full prompt with LF line endings and a trailing newline.
pub fn render(bundle: &PromptBundle) -> String {
    let with_knowledge = bundle.variant == Variant::Causality;
    let mut sections: Vec<String> = Vec::with_capacity(bundle.examples.len() + 2);
    sections.push(bundle.introduction.replace("\r\n", "\n").trim_end().to_string());
    for ex in &bundle.examples {
        sections.push(ex.render(with_knowledge));
    }
    let mut test = bundle.test_context.clone();
    if with_knowledge {
        if let Some(k) = &bundle.test_knowledge {
            test.push('\n');
            test.push_str(&k.render());
        }
    }
    sections.push(test);
    let mut out = sections.join("\n\n");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonedOutput {
    pub sys_intent: Vec<String>,
    pub sys_react: Vec<String>,
    pub response: String,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Formats a well-formed reply in the layout the introduction asks for.
pub fn format_reply(intent: &[String], reacts: &[String], response: &str) -> String {
    format!(
        "{LABEL_SYS_INTENT} {}\n{LABEL_SYS_REACTS} {}\n{LABEL_SYS} {}",
        format_phrases(intent, JoinStyle::Semicolon),
        format_phrases(reacts, JoinStyle::Semicolon),
        response
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Intent,
    React,
    Response,
}

const FIELD_PATTERNS: &[(&str, Field)] = &[
    ("sys's intentions:", Field::Intent),
    ("sys's intention:", Field::Intent),
    ("sys's intents:", Field::Intent),
    ("sys's intent:", Field::Intent),
    ("sys intent:", Field::Intent),
    ("sys reacts to:", Field::React),
    ("sys's reactions:", Field::React),
    ("sys's reaction:", Field::React),
    ("sys reaction:", Field::React),
    ("sys:", Field::Response),
];

struct Hit {
    start: usize,
    end: usize,
    field: Field,
}

fn find_labels(raw: &str) -> Vec<Hit> {
    let bytes = raw.as_bytes();
    let mut hits = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !raw.is_char_boundary(i) || (i > 0 && !label_boundary(raw, i)) {
            i += 1;
            continue;
        }
        let found = FIELD_PATTERNS
            .iter()
            .find_map(|(pat, field)| match_label(raw, i, pat).map(|end| (end, *field)));
        match found {
            Some((end, field)) => {
                hits.push(Hit { start: i, end, field });
                i = end;
            }
            None => i += 1,
        }
    }
    hits
}

fn label_boundary(raw: &str, i: usize) -> bool {
    match raw[..i].chars().next_back() {
        Some(c) => !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}' || c == '_'),
        None => true,
    }
}

/// Case-insensitive match of an ASCII label at `start`, accepting a curly
/// apostrophe for `'` and optional markdown emphasis or a closing quote
/// before the colon. Returns the byte offset just past the colon.
fn match_label(raw: &str, start: usize, pat: &str) -> Option<usize> {
    let mut chars = raw[start..].char_indices().peekable();
    for p in pat.chars() {
        if p == ':' {
            while let Some(&(_, c)) = chars.peek() {
                if c == '*' || c == '"' || c == '_' {
                    chars.next();
                } else {
                    break;
                }
            }
        }
        let (_, c) = chars.next()?;
        let ok = match p {
            '\'' => c == '\'' || c == '\u{2019}',
            _ => c.eq_ignore_ascii_case(&p),
        };
        if !ok {
            return None;
        }
    }
    Some(start + chars.peek().map_or(raw.len() - start, |&(j, _)| j))
}

fn clean_value(v: &str) -> String {
    // a blank line ends the field; anything after it is trailing prose
    let mut kept = Vec::new();
    for line in v.trim_start().lines() {
        if line.trim().is_empty() {
            if kept.is_empty() {
                continue;
            }
            break;
        }
        kept.push(line.trim());
    }
    let joined = kept.join(" ");
    joined
        .trim_matches(|c: char| c.is_whitespace() || c == '*' || c == '"' || c == '_')
        .to_string()
}

fn split_phrases(v: &str) -> Vec<String> {
    text::dedupe_phrases(v.split([';', '.', '\n']))
}

/// Extracts `sys's intent:`, `sys reacts to:` and `sys:` from a raw reply.
///
/// Labels are matched case-insensitively anywhere they start a token, so
/// fields may be reordered, wrapped in markdown, or surrounded by prose.
/// Each value runs to the next label or the first blank line. The first
/// occurrence of a duplicated field wins.
pub fn parse_reasoned(raw: &str) -> Result<ReasonedOutput> {
    let parse_err = |reason: &str| Error::Parse {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    if raw.trim().is_empty() {
        return Err(parse_err("empty reply"));
    }
    let hits = find_labels(raw);
    let mut warnings = Vec::new();
    let mut intent: Option<String> = None;
    let mut react: Option<String> = None;
    let mut response: Option<String> = None;
    for (n, hit) in hits.iter().enumerate() {
        let stop = hits.get(n + 1).map_or(raw.len(), |h| h.start);
        let value = clean_value(&raw[hit.end..stop]);
        let slot = match hit.field {
            Field::Intent => &mut intent,
            Field::React => &mut react,
            Field::Response => &mut response,
        };
        if slot.is_some() {
            warnings.push(format!(
                "duplicate {:?} field at byte {} ignored",
                hit.field, hit.start
            ));
            continue;
        }
        *slot = Some(value);
    }
    let response = response.ok_or_else(|| parse_err("missing \"sys:\" field"))?;
    if response.is_empty() {
        return Err(parse_err("empty \"sys:\" field"));
    }
    let sys_intent = intent.as_deref().map(split_phrases).unwrap_or_default();
    let sys_react = react.as_deref().map(split_phrases).unwrap_or_default();
    if sys_intent.is_empty() {
        warnings.push("no sys intent parsed".into());
    }
    if sys_react.is_empty() {
        warnings.push("no sys reaction parsed".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ReasonedOutput {
        sys_intent,
        sys_react,
        response,
        raw: raw.to_string(),
        warnings,
    })
}
