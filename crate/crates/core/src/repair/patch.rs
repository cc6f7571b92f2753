//! Unified diff parsing and strict application.
//!
//! Hunks are applied with exact context (no fuzz). A hunk's old block may be
//! found at an offset from its stated line, nearest first, but every context
//! and removed line must match byte for byte. Application either produces
//! the complete new text or fails without producing anything.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static HUNK_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("patch has no `@@` hunk marker")]
    MissingHunkMarker,
    #[error("malformed patch at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("hunk {hunk} does not match the target file")]
    HunkMismatch { hunk: usize },
    #[error("patch target does not exist")]
    TargetMissing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
    /// `\ No newline at end of file` after the last old-side line.
    pub old_no_newline: bool,
    /// Same marker after the last new-side line.
    pub new_no_newline: bool,
}

impl Hunk {
    fn old_block(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
                HunkLine::Add(_) => None,
            })
            .collect()
    }

    fn new_block(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Add(s) => Some(s.as_str()),
                HunkLine::Remove(_) => None,
            })
            .collect()
    }

    pub fn additions(&self) -> usize {
        self.lines.iter().filter(|l| matches!(l, HunkLine::Add(_))).count()
    }

    pub fn removals(&self) -> usize {
        self.lines.iter().filter(|l| matches!(l, HunkLine::Remove(_))).count()
    }

    /// True when every added line comes after every old-side line.
    fn adds_trail(&self) -> bool {
        let first_add = self.lines.iter().position(|l| matches!(l, HunkLine::Add(_)));
        let last_old = self.lines.iter().rposition(|l| !matches!(l, HunkLine::Add(_)));
        match (first_add, last_old) {
            (Some(a), Some(o)) => a > o,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedPatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl UnifiedPatch {
    /// Creation patches declare `/dev/null` as the old file or consist of a
    /// single hunk with an empty old side at line 0.
    pub fn is_creation(&self) -> bool {
        self.old_path.as_deref() == Some("/dev/null")
            || (self.hunks.len() == 1 && self.hunks[0].old_start == 0 && self.hunks[0].old_len == 0)
    }

    pub fn changed_lines(&self) -> usize {
        self.hunks.iter().map(|h| h.additions() + h.removals()).sum()
    }

    /// An edit that only appends lines past the end of an existing file.
    pub fn is_append_only(&self, original: &str) -> bool {
        let line_count = split_lines(original).0.len();
        !self.hunks.is_empty()
            && self.hunks.iter().all(|h| {
                let old_end = if h.old_len == 0 { h.old_start } else { h.old_start + h.old_len - 1 };
                h.removals() == 0 && h.additions() > 0 && h.adds_trail() && old_end >= line_count
            })
    }
}

fn strip_header_path(rest: &str) -> String {
    let path = rest.split('\t').next().unwrap_or(rest).trim();
    path.strip_prefix("a/").or_else(|| path.strip_prefix("b/")).unwrap_or(path).to_string()
}

pub fn parse(body: &str) -> Result<UnifiedPatch, PatchError> {
    if !body.lines().any(|l| l.starts_with("@@")) {
        return Err(PatchError::MissingHunkMarker);
    }
    let lines: Vec<&str> = body.lines().collect();
    let mut patch = UnifiedPatch { old_path: None, new_path: None, hunks: Vec::new() };
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix("--- ") {
            if !patch.hunks.is_empty() {
                return Err(PatchError::Malformed { line: line_no, reason: "one target file per patch".into() });
            }
            patch.old_path = Some(strip_header_path(rest));
            i += 1;
            continue;
        }
        if let Some(rest) = line.strip_prefix("+++ ") {
            patch.new_path = Some(strip_header_path(rest));
            i += 1;
            continue;
        }
        if line.starts_with("@@") {
            let caps = HUNK_HEADER
                .captures(line)
                .ok_or_else(|| PatchError::Malformed { line: line_no, reason: "bad hunk header".into() })?;
            let num = |k: usize, default: usize| -> Result<usize, PatchError> {
                caps.get(k).map_or(Ok(default), |m| {
                    m.as_str()
                        .parse()
                        .map_err(|_| PatchError::Malformed { line: line_no, reason: "bad number".into() })
                })
            };
            let mut hunk = Hunk {
                old_start: num(1, 0)?,
                old_len: num(2, 1)?,
                new_start: num(3, 0)?,
                new_len: num(4, 1)?,
                lines: Vec::new(),
                old_no_newline: false,
                new_no_newline: false,
            };
            i += 1;
            let (mut old_seen, mut new_seen) = (0usize, 0usize);
            while (old_seen < hunk.old_len || new_seen < hunk.new_len) && i < lines.len() {
                let l = lines[i];
                match l.chars().next() {
                    Some(' ') | None => {
                        hunk.lines.push(HunkLine::Context(l.get(1..).unwrap_or("").to_string()));
                        old_seen += 1;
                        new_seen += 1;
                    }
                    Some('-') => {
                        hunk.lines.push(HunkLine::Remove(l[1..].to_string()));
                        old_seen += 1;
                    }
                    Some('+') => {
                        hunk.lines.push(HunkLine::Add(l[1..].to_string()));
                        new_seen += 1;
                    }
                    Some('\\') => {
                        mark_no_newline(&mut hunk);
                    }
                    _ => {
                        return Err(PatchError::Malformed { line: i + 1, reason: format!("unexpected line `{l}` in hunk") })
                    }
                }
                i += 1;
            }
            if old_seen != hunk.old_len || new_seen != hunk.new_len {
                return Err(PatchError::Malformed {
                    line: line_no,
                    reason: format!(
                        "hunk declares -{},{} +{},{} but contains {old_seen} old / {new_seen} new lines",
                        hunk.old_start, hunk.old_len, hunk.new_start, hunk.new_len
                    ),
                });
            }
            while i < lines.len() && lines[i].starts_with('\\') {
                mark_no_newline(&mut hunk);
                i += 1;
            }
            if let Some(prev) = patch.hunks.last() {
                if hunk.old_start < prev.old_start + prev.old_len {
                    return Err(PatchError::Malformed { line: line_no, reason: "hunks overlap or are out of order".into() });
                }
            }
            patch.hunks.push(hunk);
            continue;
        }
        if patch.hunks.is_empty() {
            // preamble (`diff --git`, `index ...`, prose)
            i += 1;
            continue;
        }
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        return Err(PatchError::Malformed { line: line_no, reason: format!("unexpected line `{line}` after hunk") });
    }
    Ok(patch)
}

fn mark_no_newline(hunk: &mut Hunk) {
    match hunk.lines.last() {
        Some(HunkLine::Add(_)) => hunk.new_no_newline = true,
        Some(HunkLine::Remove(_)) => hunk.old_no_newline = true,
        Some(HunkLine::Context(_)) => {
            hunk.old_no_newline = true;
            hunk.new_no_newline = true;
        }
        None => {}
    }
}

/// Splits text into lines plus a trailing-newline flag.
fn split_lines(text: &str) -> (Vec<&str>, bool) {
    if text.is_empty() {
        return (Vec::new(), true);
    }
    let trailing = text.ends_with('\n');
    let body = if trailing { &text[..text.len() - 1] } else { text };
    (body.split('\n').collect(), trailing)
}

fn find_block(lines: &[&str], block: &[&str], expected: usize, floor: usize) -> Option<usize> {
    let fits = |pos: usize| pos >= floor && pos + block.len() <= lines.len() && lines[pos..pos + block.len()] == *block;
    let max = lines.len().saturating_sub(block.len());
    (0..=lines.len()).find_map(|delta| {
        let below = expected.checked_sub(delta).filter(|p| fits(*p));
        let above = Some(expected + delta).filter(|p| *p <= max && fits(*p));
        below.or(above)
    })
}

/// Applies `patch` to `original`, returning the new text.
pub fn apply(original: &str, patch: &UnifiedPatch) -> Result<String, PatchError> {
    let (lines, mut trailing_newline) = split_lines(original);
    let mut out: Vec<&str> = Vec::with_capacity(lines.len());
    let mut cursor = 0usize;
    for (index, hunk) in patch.hunks.iter().enumerate() {
        let old = hunk.old_block();
        let expected = if hunk.old_len == 0 { hunk.old_start } else { hunk.old_start.saturating_sub(1) };
        let pos = if old.is_empty() {
            Some(expected).filter(|p| *p >= cursor && *p <= lines.len())
        } else {
            find_block(&lines, &old, expected.max(cursor), cursor)
        };
        let pos = pos.ok_or(PatchError::HunkMismatch { hunk: index + 1 })?;
        let touches_end = pos + old.len() == lines.len();
        if hunk.old_no_newline && (!touches_end || trailing_newline) {
            return Err(PatchError::HunkMismatch { hunk: index + 1 });
        }
        out.extend_from_slice(&lines[cursor..pos]);
        out.extend(hunk.new_block());
        cursor = pos + old.len();
        if touches_end {
            if hunk.new_no_newline {
                trailing_newline = false;
            } else if hunk.old_no_newline || lines.is_empty() {
                trailing_newline = true;
            }
        }
    }
    out.extend_from_slice(&lines[cursor..]);
    let mut text = out.join("\n");
    if trailing_newline && !out.is_empty() {
        text.push('\n');
    }
    Ok(text)
}
