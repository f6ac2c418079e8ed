//! Text utilities: answer normalization for VQA scoring, answer parsing, and
//! a deterministic rule-based sentence splitter.

use std::collections::HashMap;

use once_cell::sync::Lazy;

/// Punctuation handled by the VQA answer normalization.
const PUNCT: [char; 21] = [
    ';', '/', '[', ']', '"', '{', '}', '(', ')', '=', '+', '\\', '_', '-', '>', '<', '@', '`',
    ',', '?', '!',
];

const ARTICLES: [&str; 3] = ["a", "an", "the"];

static MANUAL_MAP: Lazy<HashMap<&'static str, &'static str>> = Lazy::new(|| {
    HashMap::from([
        ("none", "0"),
        ("zero", "0"),
        ("one", "1"),
        ("two", "2"),
        ("three", "3"),
        ("four", "4"),
        ("five", "5"),
        ("six", "6"),
        ("seven", "7"),
        ("eight", "8"),
        ("nine", "9"),
        ("ten", "10"),
    ])
});

static CONTRACTIONS: Lazy<HashMap<&'static str, &'static str>> = Lazy::new(|| {
    HashMap::from([
        ("aint", "ain't"),
        ("arent", "aren't"),
        ("cant", "can't"),
        ("couldve", "could've"),
        ("couldnt", "couldn't"),
        ("couldn'tve", "couldn't've"),
        ("couldnt've", "couldn't've"),
        ("didnt", "didn't"),
        ("doesnt", "doesn't"),
        ("dont", "don't"),
        ("hadnt", "hadn't"),
        ("hadnt've", "hadn't've"),
        ("hadn'tve", "hadn't've"),
        ("hasnt", "hasn't"),
        ("havent", "haven't"),
        ("hed", "he'd"),
        ("hed've", "he'd've"),
        ("he'dve", "he'd've"),
        ("hes", "he's"),
        ("howd", "how'd"),
        ("howll", "how'll"),
        ("hows", "how's"),
        ("id've", "i'd've"),
        ("i'dve", "i'd've"),
        ("im", "i'm"),
        ("ive", "i've"),
        ("isnt", "isn't"),
        ("itd", "it'd"),
        ("itd've", "it'd've"),
        ("it'dve", "it'd've"),
        ("itll", "it'll"),
        ("let's", "let's"),
        ("maam", "ma'am"),
        ("mightnt", "mightn't"),
        ("mightnt've", "mightn't've"),
        ("mightn'tve", "mightn't've"),
        ("mightve", "might've"),
        ("mustnt", "mustn't"),
        ("mustve", "must've"),
        ("neednt", "needn't"),
        ("notve", "not've"),
        ("oclock", "o'clock"),
        ("oughtnt", "oughtn't"),
        ("ow's'at", "'ow's'at"),
        ("'ows'at", "'ow's'at"),
        ("'ow'sat", "'ow's'at"),
        ("shant", "shan't"),
        ("shed've", "she'd've"),
        ("she'dve", "she'd've"),
        ("she's", "she's"),
        ("shouldve", "should've"),
        ("shouldnt", "shouldn't"),
        ("shouldnt've", "shouldn't've"),
        ("shouldn'tve", "shouldn't've"),
        ("somebody'd", "somebodyd"),
        ("somebodyd've", "somebody'd've"),
        ("somebody'dve", "somebody'd've"),
        ("somebodyll", "somebody'll"),
        ("somebodys", "somebody's"),
        ("someoned", "someone'd"),
        ("someoned've", "someone'd've"),
        ("someone'dve", "someone'd've"),
        ("someonell", "someone'll"),
        ("someones", "someone's"),
        ("somethingd", "something'd"),
        ("somethingd've", "something'd've"),
        ("something'dve", "something'd've"),
        ("somethingll", "something'll"),
        ("thats", "that's"),
        ("thered", "there'd"),
        ("thered've", "there'd've"),
        ("there'dve", "there'd've"),
        ("therere", "there're"),
        ("theres", "there's"),
        ("theyd", "they'd"),
        ("theyd've", "they'd've"),
        ("they'dve", "they'd've"),
        ("theyll", "they'll"),
        ("theyre", "they're"),
        ("theyve", "they've"),
        ("twas", "'twas"),
        ("wasnt", "wasn't"),
        ("wed've", "we'd've"),
        ("we'dve", "we'd've"),
        ("weve", "we've"),
        ("werent", "weren't"),
        ("whatll", "what'll"),
        ("whatre", "what're"),
        ("whats", "what's"),
        ("whatve", "what've"),
        ("whens", "when's"),
        ("whered", "where'd"),
        ("wheres", "where's"),
        ("whereve", "where've"),
        ("whod", "who'd"),
        ("whod've", "who'd've"),
        ("who'dve", "who'd've"),
        ("wholl", "who'll"),
        ("whos", "who's"),
        ("whove", "who've"),
        ("whyll", "why'll"),
        ("whyre", "why're"),
        ("whys", "why's"),
        ("wont", "won't"),
        ("wouldve", "would've"),
        ("wouldnt", "wouldn't"),
        ("wouldnt've", "wouldn't've"),
        ("wouldn'tve", "wouldn't've"),
        ("yall", "y'all"),
        ("yall'll", "y'all'll"),
        ("y'allll", "y'all'll"),
        ("yall'd've", "y'all'd've"),
        ("y'alld've", "y'all'd've"),
        ("y'all'dve", "y'all'd've"),
        ("youd", "you'd"),
        ("youd've", "you'd've"),
        ("you'dve", "you'd've"),
        ("youll", "you'll"),
        ("youre", "you're"),
        ("youve", "you've"),
    ])
});

/// Normalizes an answer string per the official VQA evaluation rules:
/// lowercase, punctuation stripped (keeping digit grouping like "1,000" and
/// decimals like "1.5"), articles removed, number words mapped to digits,
/// contraction surface forms canonicalized, whitespace collapsed.
pub fn normalize_answer(raw: &str) -> String {
    let text = raw.replace(['\n', '\t'], " ");
    let text = text.trim();
    let text = process_punctuation(text);
    process_digit_article(&text)
}

fn process_punctuation(text: &str) -> String {
    let mut out = text.to_string();
    let has_grouped_digits = has_digit_comma_digit(text);
    for p in PUNCT {
        let attached = {
            let mut before = String::new();
            before.push(p);
            before.push(' ');
            let mut after = String::from(" ");
            after.push(p);
            text.contains(&before) || text.contains(&after)
        };
        if attached || has_grouped_digits {
            out = out.replace(p, "");
        } else {
            out = out.replace(p, " ");
        }
    }
    // Strip periods unless followed by a digit (keeps decimals intact).
    let chars: Vec<char> = out.chars().collect();
    let mut stripped = String::with_capacity(out.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == '.' && !matches!(chars.get(i + 1), Some(d) if d.is_ascii_digit()) {
            continue;
        }
        stripped.push(c);
    }
    stripped
}

fn has_digit_comma_digit(text: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    chars.windows(3).any(|w| {
        w[0].is_ascii_digit() && w[1] == ',' && w[2].is_ascii_digit()
    })
}

fn process_digit_article(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut words: Vec<String> = Vec::new();
    for word in lowered.split_whitespace() {
        let word = MANUAL_MAP.get(word).copied().unwrap_or(word);
        if !ARTICLES.contains(&word) {
            words.push(word.to_string());
        }
    }
    for word in &mut words {
        if let Some(&canon) = CONTRACTIONS.get(word.as_str()) {
            *word = canon.to_string();
        }
    }
    words.join(" ")
}

/// Extracts the answer from a raw LLM completion: everything up to the first
/// newline, trimmed, with one trailing period stripped. The surface form is
/// preserved otherwise; normalization happens only at scoring/matching time.
pub fn parse_answer(raw_output: &str) -> String {
    let first_line = raw_output.split('\n').next().unwrap_or("");
    let trimmed = first_line.trim();
    trimmed.strip_suffix('.').unwrap_or(trimmed).trim().to_string()
}

/// Abbreviations whose trailing period never ends a sentence.
const ABBREVIATIONS: [&str; 14] = [
    "e.g.", "i.e.", "etc.", "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "no.", "vs.", "u.s.",
    "u.k.", "fig.",
];

/// Splits text into sentence byte spans.
///
/// A boundary is a run of sentence-final punctuation (`.`, `!`, `?`) followed
/// by whitespace or end of text, unless the word ending at the period is a
/// known abbreviation. The rule is case-blind because caption contexts are
/// all-lowercase sentences joined by ". ". Spans are trimmed of surrounding
/// whitespace and together cover every non-whitespace byte; text with no
/// terminal punctuation yields one span.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut boundaries: Vec<usize> = Vec::new(); // exclusive end of each sentence
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '.' || c == '!' || c == '?' {
            // extend over a punctuation run like "?!" or "..."
            let mut end = i + 1;
            while end < bytes.len() && matches!(bytes[end] as char, '.' | '!' | '?') {
                end += 1;
            }
            let mut j = end;
            while j < bytes.len() && (bytes[j] as char).is_whitespace() {
                j += 1;
            }
            let at_text_end = j >= bytes.len();
            let followed_by_space = j > end;
            if (at_text_end || followed_by_space) && !ends_with_abbreviation(text, end) {
                boundaries.push(end);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    if boundaries.last() != Some(&bytes.len()) {
        boundaries.push(bytes.len());
    }

    let mut spans = Vec::new();
    let mut start = 0;
    for &end in &boundaries {
        if let Some(span) = trim_span(text, start, end) {
            spans.push(span);
        }
        start = end;
    }
    spans
}

fn ends_with_abbreviation(text: &str, end: usize) -> bool {
    let head = &text[..end];
    let word_start = head
        .rfind(|c: char| c.is_whitespace())
        .map(|p| p + 1)
        .unwrap_or(0);
    let word = head[word_start..].to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

fn trim_span(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    let (s, e) = (start + lead, end - trail);
    (s < e).then_some((s, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_empty_passthrough() {
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn normalize_lowercase_period_article() {
        assert_eq!(normalize_answer("A Dog."), "dog");
    }

    #[test]
    fn normalize_article_removal() {
        assert_eq!(normalize_answer("the stop sign"), "stop sign");
    }

    #[test]
    fn normalize_number_words_and_contractions() {
        assert_eq!(normalize_answer("Two"), "2");
        assert_eq!(normalize_answer("dont"), "don't");
        assert_eq!(normalize_answer("none"), "0");
    }

    #[test]
    fn normalize_keeps_digit_structure() {
        assert_eq!(normalize_answer("1,000"), "1000");
        assert_eq!(normalize_answer("1.5"), "1.5");
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize_answer("  stop   sign  "), "stop sign");
    }

    #[test]
    fn parse_answer_first_line() {
        assert_eq!(parse_answer("Brick\nExplanation: ..."), "Brick");
        assert_eq!(parse_answer("  concrete.  "), "concrete");
        assert_eq!(parse_answer(""), "");
    }

    #[test]
    fn split_two_sentences() {
        let spans = split_sentences("It rains. Roads are wet.");
        assert_eq!(spans, vec![(0, 9), (10, 24)]);
    }

    #[test]
    fn split_no_delimiter_single_span() {
        assert_eq!(split_sentences("single sentence"), vec![(0, 15)]);
    }

    #[test]
    fn split_abbreviation_not_boundary() {
        let text = "See e.g. The sign is red. Stop.";
        let spans = split_sentences(text);
        assert_eq!(spans.len(), 2);
        assert_eq!(&text[spans[0].0..spans[0].1], "See e.g. The sign is red.");
        assert_eq!(&text[spans[1].0..spans[1].1], "Stop.");
    }

    #[test]
    fn split_lowercase_abbreviation_not_boundary() {
        let spans = split_sentences("See e.g. the sign. Stop.");
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn split_lowercase_caption_join() {
        let spans = split_sentences("a dog. a park.");
        assert_eq!(spans, vec![(0, 6), (7, 14)]);
    }

    #[test]
    fn split_empty_text() {
        assert!(split_sentences("").is_empty());
    }

    fn spans_cover_non_whitespace(text: &str, spans: &[(usize, usize)]) -> bool {
        let mut covered = vec![false; text.len()];
        for &(s, e) in spans {
            for flag in &mut covered[s..e] {
                *flag = true;
            }
        }
        text.char_indices().all(|(i, c)| c.is_whitespace() || covered[i])
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in ".{0,80}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn parse_answer_never_contains_newline(s in ".{0,80}") {
            prop_assert!(!parse_answer(&s).contains('\n'));
        }

        #[test]
        fn split_spans_disjoint_ordered_covering(s in "[a-zA-Z .!?]{0,120}") {
            let spans = split_sentences(&s);
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0);
            }
            for &(a, b) in &spans {
                prop_assert!(a < b);
            }
            prop_assert!(spans_cover_non_whitespace(&s, &spans));
        }
    }
}
