//! Path globs (`**`, `*`, `?`) compiled to anchored regular expressions.

use regex::Regex;

#[derive(Debug, Clone)]
pub struct Glob {
    pattern: String,
    regex: Regex,
}

impl Glob {
    pub fn new(pattern: &str) -> Result<Self, String> {
        if pattern.is_empty() {
            return Err("empty glob".into());
        }
        if pattern.contains(['[', ']', '{', '}']) {
            return Err(format!("glob `{pattern}`: character classes and alternation are not supported"));
        }
        let mut re = String::from("^");
        let chars: Vec<char> = pattern.trim_start_matches("./").chars().collect();
        let mut i = 0;
        while i < chars.len() {
            match chars[i] {
                '*' if chars.get(i + 1) == Some(&'*') => {
                    let at_segment_start = i == 0 || chars[i - 1] == '/';
                    if !at_segment_start || !matches!(chars.get(i + 2), None | Some('/')) {
                        return Err(format!("glob `{pattern}`: `**` must be a whole path segment"));
                    }
                    if chars.get(i + 2) == Some(&'/') {
                        re.push_str("(?:.*/)?");
                        i += 3;
                    } else {
                        re.push_str(".*");
                        i += 2;
                    }
                }
                '*' => {
                    re.push_str("[^/]*");
                    i += 1;
                }
                '?' => {
                    re.push_str("[^/]");
                    i += 1;
                }
                c => {
                    re.push_str(&regex::escape(&c.to_string()));
                    i += 1;
                }
            }
        }
        re.push('$');
        let regex = Regex::new(&re).map_err(|e| format!("glob `{pattern}`: {e}"))?;
        Ok(Self { pattern: pattern.to_string(), regex })
    }

    pub fn as_str(&self) -> &str {
        &self.pattern
    }

    /// Matches a workspace-relative path using `/` separators.
    pub fn is_match(&self, relative: &str) -> bool {
        self.regex.is_match(relative.trim_start_matches("./"))
    }
}
