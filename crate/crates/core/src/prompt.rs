//! Prompt gateway: decide whether a user prompt needs rewriting into the
//! training-caption style, and rewrite it through an external chat model or
//! the offline rule tables.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Caption-style examples included in both system prompts.
pub const STYLE_EXAMPLES: [&str; 9] = [
    "person walking with their arms swinging back to front and walking in a general circle",
    "a person is standing and then makes a stomping gesture",
    "the figure bends down on its hands and knees and then crawls forward",
    "a person jumps and then side steps to the left",
    "a person casually walks forward",
    "The person takes 4 steps backwards.",
    "The person was pushed but did not fall.",
    "This person kicks with his right leg then jabs several times.",
    "a person lifting both arms together in front of them and then lifts them back down",
];

const DETERMINE_INSTRUCTIONS: &str = "You are now an expert in human motion machine learning. Your task is to determine prompts for a model trained on the HumanML3D dataset, which generates motion sequences from text. I will provide you with some training set prompt examples. Please use these examples to determine whether the user's input needs to be rephrased to better match the dataset's description style. Simply respond with yes or no.";

const REWRITE_INSTRUCTIONS: &str = "You are now an expert in human behavior machine learning. You need to write prompts for a model trained on the HumanML3D dataset that generates motion sequences from text. You need to describe abstract actions directly in English as concrete movements, specifying detailed limb movements and directions. Please output the detailed description directly, limited to one sentence and within 25 words. Do not include interactions with specific objects, only describe human movements. If the input prompt is already a concrete motion description and in English, please return the original input prompt without modification. As a reference, the original dataset contains only everyday actions, boxing actions, and street dance types.";

const REWRITE_NOTES: &str = "Note:
Do not write specific characters; the action subject should be \"a man\" or \"a person\" since there are no specific characters in the training set, such as knights, wizards, soldiers, etc. You should describe their figure through limb movement as much as possible.
Do not include objects being held, as the training set does not have specific objects like swords, knives, or guns. Describe their figure through limb movement instead.
Your description should use simple and clear language, avoiding complex vocabulary.
Try to mimic the wording style of the prompt examples I provided as much as possible.
Examples:
Input: A person anxiously paces after getting up, feeling restless.
Output: a man rises from the ground, walks in a circle, and sits back down on the ground.

Input: A medieval knight is fighting.
Output: A person stands firmly, raising a sword high, then lunges forward, swinging the sword from right to left while shifting weight onto his front foot.

Input: a man walks in a figure 8
Output: a man walks in a figure 8

Input: a man crawls forward
Output: a man crawls forward

Input: a person walks in a circle
Output: a person walks in a circle

Input: a man is battling
Output: a man is boxing and bouncing around";

pub fn determine_system_prompt(examples: &[&str]) -> String {
    let mut s = format!("{DETERMINE_INSTRUCTIONS}\nExamples:\n");
    s.push_str(&examples.join("\n"));
    s
}

pub fn rewrite_system_prompt(examples: &[&str]) -> String {
    let mut s = format!("{REWRITE_INSTRUCTIONS}\nExamples from the training set:\n");
    s.push_str(&examples.join("\n"));
    s.push('\n');
    s.push_str(REWRITE_NOTES);
    s
}

pub const MAX_WORDS: usize = 25;

/// A chat-completions style model: one system and one user message in, the
/// assistant text out.
pub trait ChatBackend {
    fn complete(&self, system: &str, user: &str) -> Result<String, String>;
}

/// Offline rule tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FallbackTables {
    /// Character or role words replaced by "person".
    pub roles: Vec<String>,
    /// Ordered phrase substitutions, applied before role replacement.
    pub phrases: Vec<(String, String)>,
    /// Held-object nouns that a rewrite must not contain.
    pub banned_objects: Vec<String>,
}

impl FallbackTables {
    /// Words or phrases whose presence means a prompt needs rewriting.
    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.roles
            .iter()
            .map(String::as_str)
            .chain(self.phrases.iter().map(|(from, _)| from.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendUsed {
    External,
    Fallback,
    /// Gateway disabled; the raw prompt was passed through.
    Bypass,
}

impl BackendUsed {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendUsed::External => "external",
            BackendUsed::Fallback => "fallback",
            BackendUsed::Bypass => "bypass",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptDecision {
    pub original: String,
    pub needs_rewrite: bool,
    /// Present iff `needs_rewrite`.
    pub rewritten: Option<String>,
    pub backend: BackendUsed,
    pub warnings: Vec<String>,
}

impl PromptDecision {
    /// The text that should reach the text encoder.
    pub fn effective(&self) -> &str {
        self.rewritten.as_deref().unwrap_or(&self.original)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
}

/// Case-insensitive whole-word phrase match.
fn contains_phrase(text: &str, phrase: &str) -> bool {
    let t: Vec<String> = words(text).collect();
    let p: Vec<String> = words(phrase).collect();
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

/// At least half of the letters are ASCII.
pub fn english_dominant(text: &str) -> bool {
    let letters = text.chars().filter(|c| c.is_alphabetic()).count();
    let ascii = text.chars().filter(|c| c.is_ascii_alphabetic()).count();
    letters > 0 && ascii * 2 >= letters
}

/// Checks a rewrite: non-empty, one line, one sentence, at most 25 words and
/// no banned held objects.
pub fn validate_rewrite(text: &str, banned: &[String]) -> Result<(), String> {
    let t = text.trim();
    if t.is_empty() {
        return Err("empty rewrite".to_owned());
    }
    if t.contains('\n') || t.contains('\r') {
        return Err("rewrite spans several lines".to_owned());
    }
    let n = t.split_whitespace().count();
    if n > MAX_WORDS {
        return Err(format!("rewrite has {n} words, limit {MAX_WORDS}"));
    }
    let body = t.trim_end_matches(['.', '!', '?']);
    if body.contains(['.', '!', '?'])
        && body
            .split(['.', '!', '?'])
            .skip(1)
            .any(|s| s.starts_with(' '))
    {
        return Err("rewrite has more than one sentence".to_owned());
    }
    if let Some(b) = banned
        .iter()
        .find(|b| words(t).any(|w| w == b.as_str() || w.strip_suffix('s') == Some(b.as_str())))
    {
        return Err(format!("rewrite mentions the object \"{b}\""));
    }
    Ok(())
}

/// Replaces a whole-word, case-insensitive phrase.
fn replace_phrase(text: &str, from: &str, to: &str) -> String {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let pat: Vec<String> = words(from).collect();
    if pat.is_empty() {
        return text.to_owned();
    }
    let norm = |w: &str| {
        w.trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
    };
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let end = i + pat.len();
        if end <= toks.len() && toks[i..end].iter().zip(&pat).all(|(a, b)| norm(a) == *b) {
            // keep punctuation attached to the last matched word
            let last = toks[end - 1];
            let trail: String = last
                .chars()
                .rev()
                .take_while(|c| !c.is_alphanumeric())
                .collect();
            let trail: String = trail.chars().rev().collect();
            out.push(format!("{to}{trail}"));
            i = end;
        } else {
            out.push(toks[i].to_owned());
            i += 1;
        }
    }
    out.join(" ")
}

pub fn fallback_determine(prompt: &str, tables: &FallbackTables) -> bool {
    !english_dominant(prompt) || tables.keywords().any(|k| contains_phrase(prompt, k))
}

pub fn fallback_rewrite(prompt: &str, tables: &FallbackTables) -> String {
    let mut s = prompt.trim().to_owned();
    for (from, to) in &tables.phrases {
        s = replace_phrase(&s, from, to);
    }
    for role in &tables.roles {
        s = replace_phrase(&s, role, "person");
    }
    s = replace_phrase(&s, "an person", "a person");
    // empty substitutions leave double spaces behind
    s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => s,
    }
}

pub struct Gateway<'a> {
    pub external: Option<&'a dyn ChatBackend>,
    pub tables: FallbackTables,
    pub examples: Vec<&'a str>,
    pub enabled: bool,
}

impl<'a> Gateway<'a> {
    pub fn new(external: Option<&'a dyn ChatBackend>, tables: FallbackTables) -> Self {
        Self {
            external,
            tables,
            examples: STYLE_EXAMPLES.to_vec(),
            enabled: true,
        }
    }

    /// Whether `prompt` should be rewritten, and which backend decided.
    /// An unreadable external reply counts as "yes".
    pub fn determine(&self, prompt: &str, warnings: &mut Vec<String>) -> (bool, BackendUsed) {
        if let Some(ext) = self.external {
            match ext.complete(&determine_system_prompt(&self.examples), prompt) {
                Ok(reply) => {
                    let r = reply
                        .trim()
                        .trim_start_matches(|c: char| !c.is_alphanumeric())
                        .to_lowercase();
                    let yes = !r.starts_with("no");
                    return (yes, BackendUsed::External);
                }
                Err(e) => warnings.push(format!("external determine failed: {e}")),
            }
        }
        (
            fallback_determine(prompt, &self.tables),
            BackendUsed::Fallback,
        )
    }

    fn external_rewrite(
        &self,
        ext: &dyn ChatBackend,
        prompt: &str,
        warnings: &mut Vec<String>,
    ) -> Option<String> {
        let system = rewrite_system_prompt(&self.examples);
        for attempt in 0..2 {
            match ext.complete(&system, prompt) {
                Ok(reply) => {
                    let reply = reply.trim().to_owned();
                    match validate_rewrite(&reply, &self.tables.banned_objects) {
                        Ok(()) => return Some(reply),
                        Err(e) => warnings.push(format!(
                            "external rewrite rejected (attempt {}): {e}",
                            attempt + 1
                        )),
                    }
                }
                Err(e) => {
                    warnings.push(format!("external rewrite failed: {e}"));
                    return None;
                }
            }
        }
        None
    }

    /// Rewrites `prompt`, external backend first, rule tables second.
    pub fn rewrite(&self, prompt: &str, mut warnings: Vec<String>) -> PromptDecision {
        if let Some(ext) = self.external {
            if let Some(r) = self.external_rewrite(ext, prompt, &mut warnings) {
                return PromptDecision {
                    original: prompt.to_owned(),
                    needs_rewrite: true,
                    rewritten: Some(r),
                    backend: BackendUsed::External,
                    warnings,
                };
            }
        }
        let r = fallback_rewrite(prompt, &self.tables);
        match validate_rewrite(&r, &self.tables.banned_objects) {
            Ok(()) => PromptDecision {
                original: prompt.to_owned(),
                needs_rewrite: true,
                rewritten: Some(r),
                backend: BackendUsed::Fallback,
                warnings,
            },
            Err(e) => {
                warnings.push(format!("no valid rewrite, using the original prompt: {e}"));
                PromptDecision {
                    original: prompt.to_owned(),
                    needs_rewrite: false,
                    rewritten: None,
                    backend: BackendUsed::Fallback,
                    warnings,
                }
            }
        }
    }

    /// determine, then rewrite when needed.
    pub fn process(&self, prompt: &str) -> PromptDecision {
        if !self.enabled {
            return PromptDecision {
                original: prompt.to_owned(),
                needs_rewrite: false,
                rewritten: None,
                backend: BackendUsed::Bypass,
                warnings: Vec::new(),
            };
        }
        let mut warnings = Vec::new();
        let (needs, backend) = self.determine(prompt, &mut warnings);
        if needs {
            self.rewrite(prompt, warnings)
        } else {
            PromptDecision {
                original: prompt.to_owned(),
                needs_rewrite: false,
                rewritten: None,
                backend,
                warnings,
            }
        }
    }
}
