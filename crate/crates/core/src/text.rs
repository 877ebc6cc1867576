//! Whole-word string matching shared by the sampler, editor and dataset checks.

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// True when `needle` occurs in `haystack` bounded by non-alphanumeric
/// characters (or the string ends) on both sides. Case-insensitive.
pub fn contains_word_ci(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let h = haystack.to_lowercase();
    let n = needle.to_lowercase();
    find_word(&h, &n, |a, b| a.starts_with(b)).is_some()
}

/// Byte offset of the first whole-word occurrence of `needle` at or after
/// `from`, using `matches(rest, needle)` to test each candidate start.
fn find_word(haystack: &str, needle: &str, matches: impl Fn(&str, &str) -> bool) -> Option<usize> {
    for (pos, _) in haystack.char_indices() {
        if !boundary_before(haystack, pos) {
            continue;
        }
        let rest = &haystack[pos..];
        if matches(rest, needle) && boundary_after(haystack, pos + needle.len()) {
            return Some(pos);
        }
    }
    None
}

pub(crate) fn boundary_before(text: &str, pos: usize) -> bool {
    text[..pos].chars().next_back().is_none_or(|c| !is_word_char(c))
}

pub(crate) fn boundary_after(text: &str, end: usize) -> bool {
    text.get(end..)
        .and_then(|s| s.chars().next())
        .is_none_or(|c| !is_word_char(c))
}

/// Matches `form` at the start of `rest` where the first character may differ
/// in case and the remainder must be exact. Returns the matched byte length.
pub(crate) fn match_form_at(rest: &str, form: &str) -> Option<usize> {
    let mut fc = form.chars();
    let mut rc = rest.chars();
    let f0 = fc.next()?;
    let r0 = rc.next()?;
    if !chars_eq_ci(f0, r0) {
        return None;
    }
    let tail = fc.as_str();
    let rest_tail = rc.as_str();
    if rest_tail.starts_with(tail) {
        Some(r0.len_utf8() + tail.len())
    } else {
        None
    }
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// True when `form` occurs whole-word in `text` under the editor's matching
/// rule (leading character case-insensitive, remainder exact).
pub fn contains_form(text: &str, form: &str) -> bool {
    if form.is_empty() {
        return false;
    }
    for (pos, _) in text.char_indices() {
        if !boundary_before(text, pos) {
            continue;
        }
        if let Some(len) = match_form_at(&text[pos..], form) {
            if boundary_after(text, pos + len) {
                return true;
            }
        }
    }
    false
}
