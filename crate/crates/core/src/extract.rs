//! Structured payloads out of free-form model completions: JSON blocks,
//! sub-query lists, numeric quantities, and answer choices.
//!
//! These are heuristics over text the model was *asked* to structure; they
//! tolerate prose around the payload but never guess values. Every extractor
//! returns a typed error (or an empty list) when nothing matches.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no JSON object found in text")]
    JsonNotFound,
    #[error("no numeric value found in text")]
    NumberNotFound,
    #[error("no answer choice found in text")]
    ChoiceNotFound,
}

// ---------------------------------------------------------------------------
// Quantities
// ---------------------------------------------------------------------------

/// A finite numeric value with a canonicalized unit string. Units are
/// compared textually; there is no dimensional algebra (Pa and N/m^2 stay
/// distinct by design).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    pub fn new(value: f64, unit: &str) -> Self {
        Quantity {
            value,
            unit: canonicalize_unit(unit),
        }
    }

    pub fn unitless(value: f64) -> Self {
        Quantity {
            value,
            unit: String::new(),
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.unit.is_empty() {
            write!(f, "{}", self.value)
        } else {
            write!(f, "{} {}", self.value, self.unit)
        }
    }
}

/// Normalize typeset notation to ASCII: multiplication signs to `*`, Unicode
/// minus/dashes to `-`, superscript digit runs to caret notation, exotic
/// spaces to plain spaces. Unknown symbols pass through unchanged.
fn normalize_typeset(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_superscript = false;
    for ch in text.chars() {
        let mapped: Option<char> = match ch {
            '×' | '⋅' | '∙' | '·' => Some('*'),
            '−' | '–' => Some('-'),
            '\u{00A0}' | '\u{2009}' | '\u{202F}' => Some(' '),
            'µ' | 'μ' => Some('µ'),
            _ => None,
        };
        let superscript: Option<char> = match ch {
            '⁰' => Some('0'),
            '¹' => Some('1'),
            '²' => Some('2'),
            '³' => Some('3'),
            '⁴' => Some('4'),
            '⁵' => Some('5'),
            '⁶' => Some('6'),
            '⁷' => Some('7'),
            '⁸' => Some('8'),
            '⁹' => Some('9'),
            '⁻' => Some('-'),
            '⁺' => Some('+'),
            _ => None,
        };
        if let Some(sup) = superscript {
            if !in_superscript {
                out.push('^');
                in_superscript = true;
            }
            out.push(sup);
            continue;
        }
        in_superscript = false;
        out.push(mapped.unwrap_or(ch));
    }
    out
}

/// Canonical unit form: typeset notation normalized, whitespace collapsed,
/// no spaces around `/`, `^`, or `*`, trimmed. Idempotent.
pub fn canonicalize_unit(raw: &str) -> String {
    let normalized = normalize_typeset(raw);
    let collapsed: String = normalized.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::with_capacity(collapsed.len());
    let chars: Vec<char> = collapsed.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        if ch == ' ' {
            let prev = out.chars().last();
            let next = chars.get(i + 1).copied();
            let glue = |c: Option<char>| matches!(c, Some('/') | Some('^') | Some('*'));
            if glue(prev) || glue(next) {
                continue;
            }
        }
        out.push(ch);
    }
    out.trim().to_string()
}

// ---------------------------------------------------------------------------
// JSON block extraction
// ---------------------------------------------------------------------------

/// Find the first candidate JSON object in a completion. Priority:
/// 1. content of a fenced block tagged `json`,
/// 2. any fenced block whose content starts with `{`,
/// 3. the first balanced top-level `{...}` span (brace counting that skips
///    braces inside string literals).
pub fn extract_json_block(text: &str) -> Result<&str, ExtractError> {
    let fences = fenced_blocks(text);
    for (tag, content) in &fences {
        if tag.eq_ignore_ascii_case("json") {
            return Ok(content.trim());
        }
    }
    for (_, content) in &fences {
        if content.trim_start().starts_with('{') {
            return Ok(content.trim());
        }
    }
    balanced_object_span(text).ok_or(ExtractError::JsonNotFound)
}

/// All complete ```-fenced blocks as (tag, content) pairs, in order.
fn fenced_blocks(text: &str) -> Vec<(&str, &str)> {
    let mut blocks = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(open) = rest.find("```") {
        let after_ticks = offset + open + 3;
        let Some(line_end) = text[after_ticks..].find('\n') else {
            break;
        };
        let tag = text[after_ticks..after_ticks + line_end].trim();
        let content_start = after_ticks + line_end + 1;
        let Some(close) = text[content_start..].find("```") else {
            break;
        };
        blocks.push((tag, &text[content_start..content_start + close]));
        offset = content_start + close + 3;
        rest = &text[offset..];
    }
    blocks
}

/// First balanced `{...}` span, ignoring braces inside JSON string literals.
fn balanced_object_span(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Sub-query extraction
// ---------------------------------------------------------------------------

static SUBQUERY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^\s*sub-?query\s+\d+\s*[:.]\s*(\S.*)$").unwrap()
});
static NUMBERED_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\d+[.)]\s+(\S.*)$").unwrap());
static BULLET_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[•\-\*]\s+(\S.*)$").unwrap());

/// Pull a sub-query list out of a completion. Recognized shapes, in priority
/// order: `Subquery N:` / `Sub-query N:` lines, numbered lists (`1.` / `1)`),
/// and bullet lines under a heading containing "subquer". Wrapped item bodies
/// are joined; document order is preserved. Empty when nothing matches.
pub fn extract_subqueries(text: &str) -> Vec<String> {
    let labeled: Vec<String> = SUBQUERY_LINE
        .captures_iter(text)
        .map(|c| c[1].trim().to_string())
        .collect();
    if !labeled.is_empty() {
        return labeled;
    }

    let lines: Vec<&str> = text.lines().collect();
    let numbered = collect_items(&lines, &NUMBERED_ITEM);
    if !numbered.is_empty() {
        return numbered;
    }

    for (i, line) in lines.iter().enumerate() {
        let is_heading = line.to_lowercase().contains("subquer")
            && !BULLET_ITEM.is_match(line)
            && !NUMBERED_ITEM.is_match(line);
        if is_heading {
            let bullets = collect_items(&lines[i + 1..], &BULLET_ITEM);
            if !bullets.is_empty() {
                return bullets;
            }
        }
    }
    Vec::new()
}

/// Collect marker-led items with continuation joining: an indented non-empty
/// line that is not itself a marker extends the current item (wrapped bodies
/// indent their continuations); any flush-left non-item line or a blank line
/// followed by non-item content ends the list.
fn collect_items(lines: &[&str], marker: &Regex) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    let mut open = false;
    for (i, line) in lines.iter().enumerate() {
        if let Some(caps) = marker.captures(line) {
            items.push(caps[1].trim().to_string());
            open = true;
        } else if line.trim().is_empty() {
            if !items.is_empty() {
                let next_is_item = lines[i + 1..]
                    .iter()
                    .find(|l| !l.trim().is_empty())
                    .is_some_and(|l| marker.is_match(l));
                if !next_is_item {
                    break;
                }
            }
            open = false;
        } else if open && line.starts_with([' ', '\t']) {
            let item = items.last_mut().expect("open implies an item");
            item.push(' ');
            item.push_str(line.trim());
        } else if !items.is_empty() {
            break;
        }
    }
    items
}

// ---------------------------------------------------------------------------
// Numeric answer extraction
// ---------------------------------------------------------------------------

/// Where to look for the answer value within a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumericAnswerMode {
    /// The last number in the text wins (completions conclude with the answer).
    #[default]
    LastNumber,
    /// The first number after a "Final Answer" marker, when the marker exists;
    /// falls back to [`NumericAnswerMode::LastNumber`] otherwise.
    AfterFinalAnswerMarker,
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        // typeset scientific: optional mantissa, then *10^{exp}
        r"(?:(?P<mant>\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+)\s*[x*]\s*)?",
        r"10\s*\^\s*\{?\s*(?P<exp>[+-]?\d+)\s*\}?",
        // thousands-separated
        r"|(?P<thou>\d{1,3}(?:,\d{3})+(?:\.\d+)?)",
        // plain, with optional e-notation
        r"|(?P<plain>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?|\.\d+)",
    ))
    .unwrap()
});

struct NumberMatch {
    value: f64,
    end: usize,
}

fn number_matches(text: &str) -> Vec<NumberMatch> {
    let mut out = Vec::new();
    for caps in NUMBER.captures_iter(text) {
        let whole = caps.get(0).unwrap();
        // Skip exponents and identifier tails: neither "m^2" nor "m^-2" may
        // yield a standalone number.
        let mut back = text[..whole.start()].chars().rev();
        let prev = back.next();
        let before_prev = back.next();
        if matches!(prev, Some('^' | '{' | '_')) || prev.is_some_and(|c| c.is_alphanumeric()) {
            continue;
        }
        if matches!(prev, Some('-' | '+')) && matches!(before_prev, Some('^' | '{')) {
            continue;
        }
        let value = if let Some(exp) = caps.name("exp") {
            let mantissa = caps
                .name("mant")
                .map(|m| m.as_str().replace(',', "").parse::<f64>().unwrap())
                .unwrap_or(1.0);
            mantissa * 10f64.powi(exp.as_str().parse::<i32>().unwrap())
        } else if let Some(thou) = caps.name("thou") {
            thou.as_str().replace(',', "").parse::<f64>().unwrap()
        } else {
            caps["plain"].parse::<f64>().unwrap()
        };
        // A leading minus counts as a sign only when it is not a range or
        // hyphen between alphanumerics ("5-10 minutes").
        let negative = prev == Some('-') && !before_prev.is_some_and(|c| c.is_alphanumeric());
        out.push(NumberMatch {
            value: if negative { -value } else { value },
            end: whole.end(),
        });
    }
    out
}

/// Extract the concluding numeric quantity from a completion. Handles
/// thousands separators, e-notation, and typeset powers of ten; the unit is
/// whatever follows on the same line up to sentence punctuation.
pub fn extract_numeric_answer(text: &str) -> Result<Quantity, ExtractError> {
    extract_numeric_answer_with(text, NumericAnswerMode::LastNumber)
}

pub fn extract_numeric_answer_with(
    text: &str,
    mode: NumericAnswerMode,
) -> Result<Quantity, ExtractError> {
    let normalized = normalize_typeset(text);
    let region_start = match mode {
        NumericAnswerMode::LastNumber => 0,
        NumericAnswerMode::AfterFinalAnswerMarker => normalized
            .to_lowercase()
            .rfind("final answer")
            .map(|i| i + "final answer".len())
            .unwrap_or(0),
    };
    let region = &normalized[region_start..];
    let matches = number_matches(region);
    let chosen = match mode {
        NumericAnswerMode::LastNumber => matches.last(),
        NumericAnswerMode::AfterFinalAnswerMarker if region_start > 0 => matches.first(),
        NumericAnswerMode::AfterFinalAnswerMarker => matches.last(),
    }
    .ok_or(ExtractError::NumberNotFound)?;

    let tail = &region[chosen.end..];
    let line = tail.split('\n').next().unwrap_or("");
    let unit = cut_at_sentence_punctuation(line);
    Ok(Quantity::new(chosen.value, unit))
}

fn cut_at_sentence_punctuation(line: &str) -> &str {
    let mut end = line.len();
    for (i, ch) in line.char_indices() {
        match ch {
            ',' | ';' | ':' | '!' | '?' | ')' | '(' => {
                end = i;
                break;
            }
            '.' => {
                let next = line[i + ch.len_utf8()..].chars().next();
                if next.is_none() || next == Some(' ') {
                    end = i;
                    break;
                }
            }
            _ => {}
        }
    }
    &line[..end]
}

// ---------------------------------------------------------------------------
// Choice answer extraction
// ---------------------------------------------------------------------------

/// A multiple-choice selection: a sorted, deduplicated set of letters A–Z.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceAnswer {
    pub letters: BTreeSet<char>,
}

impl ChoiceAnswer {
    pub fn from_letters(letters: impl IntoIterator<Item = char>) -> Self {
        ChoiceAnswer {
            letters: letters
                .into_iter()
                .map(|c| c.to_ascii_uppercase())
                .collect(),
        }
    }

    /// Option ordinal (1-based) mapped onto letters: option 1 is A.
    pub fn from_ordinal(n: u32) -> Option<Self> {
        (1..=26).contains(&n).then(|| {
            ChoiceAnswer::from_letters([char::from(b'A' + (n - 1) as u8)])
        })
    }

    /// Parse a gold-answer token: letters ("A", "AC") or a 1-based option
    /// number ("1").
    pub fn parse_token(token: &str) -> Option<Self> {
        let trimmed = token.trim();
        if trimmed.is_empty() {
            return None;
        }
        if let Ok(n) = trimmed.parse::<u32>() {
            return ChoiceAnswer::from_ordinal(n);
        }
        let letters: Vec<char> = trimmed
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .collect();
        if letters.iter().all(|c| c.is_ascii_alphabetic()) && !letters.is_empty() {
            Some(ChoiceAnswer::from_letters(letters))
        } else {
            None
        }
    }
}

impl fmt::Display for ChoiceAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let joined: String = self
            .letters
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        f.write_str(&joined)
    }
}

static CHOICE_KEYWORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:answer|option|choice)s?\b").unwrap());
static LETTER_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(^|[\s(])([A-Z])([.,;:!?)\s]|$)").unwrap());
static LINE_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*\(?([A-Z])[.)]").unwrap());
static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Z])\)").unwrap());

/// Scan for answer letters (patterns like "answer is X", "option X",
/// standalone "X." or "(X)"). The final quarter of the text is searched
/// first — completions conclude with the answer — then the whole text.
pub fn extract_choice_answer(text: &str) -> Result<ChoiceAnswer, ExtractError> {
    let tail_start = {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        chars
            .get(chars.len().saturating_sub(chars.len() / 4))
            .map(|(i, _)| *i)
            .unwrap_or(0)
    };
    for region in [&text[tail_start..], text] {
        let letters = choice_letters_in(region);
        if !letters.is_empty() {
            return Ok(ChoiceAnswer { letters });
        }
    }
    Err(ExtractError::ChoiceNotFound)
}

fn choice_letters_in(region: &str) -> BTreeSet<char> {
    let mut letters = BTreeSet::new();
    for kw in CHOICE_KEYWORD.find_iter(region) {
        let span_end = region[kw.end()..]
            .find(['.', '!', '?', '\n'])
            .map(|i| kw.end() + i)
            .unwrap_or(region.len());
        for caps in LETTER_TOKEN.captures_iter(&region[kw.end()..span_end]) {
            letters.insert(caps[2].chars().next().unwrap());
        }
    }
    for caps in LINE_MARKER.captures_iter(region) {
        letters.insert(caps[1].chars().next().unwrap());
    }
    for caps in PAREN_LETTER.captures_iter(region) {
        letters.insert(caps[1].chars().next().unwrap());
    }
    letters
}

static ORDINAL_REF: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:option|scenario|choice|answer)\s*#?\s*\(?(\d{1,2})\)?").unwrap()
});
static ORDINAL_WORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(first|second|third|fourth|fifth)\s+(?:option|scenario|choice)\b").unwrap()
});

/// Recognize ordinal references to enumerated options ("option 2",
/// "Scenario 1", "the first option") and map them onto choice letters
/// (option 1 is A). The last reference in the text wins.
pub fn extract_choice_ordinal(text: &str) -> Option<ChoiceAnswer> {
    let mut best: Option<(usize, u32)> = None;
    for caps in ORDINAL_REF.captures_iter(text) {
        if let Ok(n) = caps[1].parse::<u32>() {
            best = Some((caps.get(0).unwrap().start(), n));
        }
    }
    for caps in ORDINAL_WORD.captures_iter(text) {
        let n = match caps[1].to_lowercase().as_str() {
            "first" => 1,
            "second" => 2,
            "third" => 3,
            "fourth" => 4,
            _ => 5,
        };
        let start = caps.get(0).unwrap().start();
        if best.is_none_or(|(s, _)| start > s) {
            best = Some((start, n));
        }
    }
    best.and_then(|(_, n)| ChoiceAnswer::from_ordinal(n))
}

/// Enumerated answer options embedded in a question text (numbered or
/// lettered lines, wrapped bodies joined).
pub fn enumerate_options(question_text: &str) -> Vec<String> {
    static LETTERED_ITEM: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\s*[A-Z][.)]\s+(\S.*)$").unwrap());
    let lines: Vec<&str> = question_text.lines().collect();
    let numbered = collect_items(&lines, &NUMBERED_ITEM);
    if !numbered.is_empty() {
        return numbered;
    }
    collect_items(&lines, &LETTERED_ITEM)
}

const STOPWORDS: &[&str] = &[
    "the", "a", "an", "of", "to", "with", "and", "or", "is", "are", "was", "were", "be", "been",
    "being", "by", "for", "in", "on", "at", "it", "its", "this", "that", "he", "she", "his",
    "her", "they", "them", "their", "i", "you", "we", "do", "does", "did", "have", "has", "had",
];

fn content_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .map(|t| stem(&t))
        .collect()
}

/// Crude suffix stemming, just enough to align "filling" with "fill".
fn stem(token: &str) -> String {
    if token.len() > 4 && token.ends_with("ies") {
        format!("{}y", &token[..token.len() - 3])
    } else if token.len() > 5 && token.ends_with("ing") {
        token[..token.len() - 3].to_string()
    } else if token.len() > 4 && token.ends_with("ed") {
        token[..token.len() - 2].to_string()
    } else if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        token[..token.len() - 1].to_string()
    } else {
        token.to_string()
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for token_a in a {
        let mut prev_diag = 0;
        for (j, token_b) in b.iter().enumerate() {
            let tmp = dp[j + 1];
            dp[j + 1] = if token_a == token_b {
                prev_diag + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev_diag = tmp;
        }
    }
    dp[b.len()]
}

/// Align a free-text conclusion with one of the question's enumerated
/// options by longest-common-subsequence over stemmed content tokens,
/// sentence by sentence. Picks the option of the globally best-scoring
/// sentence; ties or scores below 3 yield `None`. Token *order* matters,
/// which separates "fill, then attend" from "attend first, then fill" even
/// when the word sets coincide.
pub fn align_choice_with_options(
    answer_text: &str,
    options: &[String],
) -> Option<ChoiceAnswer> {
    if options.is_empty() {
        return None;
    }
    let option_tokens: Vec<Vec<String>> = options.iter().map(|o| content_tokens(o)).collect();
    let mut best: Option<(usize, usize)> = None; // (score, option index)
    let mut tied = false;
    for sentence in split_sentences(answer_text) {
        let tokens = content_tokens(sentence);
        if tokens.is_empty() {
            continue;
        }
        for (idx, opt) in option_tokens.iter().enumerate() {
            let score = lcs_len(&tokens, opt);
            match best {
                Some((s, i)) if score == s && i != idx => tied = true,
                Some((s, _)) if score > s => {
                    best = Some((score, idx));
                    tied = false;
                }
                None => {
                    best = Some((score, idx));
                    tied = false;
                }
                _ => {}
            }
        }
    }
    match best {
        Some((score, idx)) if score >= 3 && !tied => {
            ChoiceAnswer::from_ordinal(idx as u32 + 1)
        }
        _ => None,
    }
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let boundary = matches!(b, b'.' | b'!' | b'?')
            && bytes.get(i + 1).is_none_or(|&n| n == b' ' || n == b'\n');
        if boundary {
            out.push(&text[start..=i]);
            start = i + 1;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}
