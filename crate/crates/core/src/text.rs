//! Deterministic tokenization shared by lexical scoring and prompt accounting.
//!
//! A token is either a maximal run of alphanumeric characters or a single
//! non-whitespace, non-alphanumeric character. Words are lowercased; no
//! stemming is applied. Joining tokens with single spaces and re-tokenizing
//! yields the same token sequence.

/// A single token with its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Punct(char),
}

impl Token {
    pub fn as_str(&self) -> std::borrow::Cow<'_, str> {
        match self {
            Token::Word(w) => std::borrow::Cow::Borrowed(w.as_str()),
            Token::Punct(c) => std::borrow::Cow::Owned(c.to_string()),
        }
    }
}

/// Splits `text` into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(Token::Word(std::mem::take(&mut word)));
        }
        if !ch.is_whitespace() {
            out.push(Token::Punct(ch));
        }
    }
    if !word.is_empty() {
        out.push(Token::Word(word));
    }
    out
}

/// Lowercased word tokens only; the term stream used by BM25.
pub fn terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter_map(|t| match t {
            Token::Word(w) => Some(w),
            Token::Punct(_) => None,
        })
        .collect()
}

/// Boundary for prompt token accounting, so an external tokenizer can be
/// substituted for the rule-based default.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-and-punctuation counter.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTokenizer;

impl TokenCounter for RuleTokenizer {
    fn count(&self, text: &str) -> usize {
        count_tokens(text)
    }
}

pub fn count_tokens(text: &str) -> usize {
    let mut n = 0;
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_word {
                n += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !ch.is_whitespace() {
                n += 1;
            }
        }
    }
    n
}

/// Keeps the last `n` tokens of `text`, rendered space-separated.
pub(crate) fn tail_tokens(text: &str, n: usize) -> String {
    let toks = tokenize_preserving_case(text);
    let start = toks.len().saturating_sub(n);
    toks[start..].join(" ")
}

fn tokenize_preserving_case(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_follow_split_rules() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("book a taxi"), 3);
        assert_eq!(count_tokens("taxi, now!"), 4);
        assert_eq!(count_tokens("Request_Refund"), 3);
    }

    #[test]
    fn terms_are_lowercased_words() {
        assert_eq!(terms("Need a TAXI, now!"), vec!["need", "a", "taxi", "now"]);
    }

    #[test]
    fn tail_keeps_most_recent_tokens() {
        assert_eq!(tail_tokens("User: book a Taxi, now", 3), "Taxi , now");
        assert_eq!(tail_tokens("a b", 10), "a b");
    }

    proptest! {
        #[test]
        fn count_matches_tokenize(s in "\\PC{0,64}") {
            prop_assert_eq!(count_tokens(&s), tokenize(&s).len());
        }

        #[test]
        fn space_join_is_a_fixed_point(s in "[a-zA-Z0-9 ,.!?:;'_-]{0,64}") {
            let joined = tokenize_preserving_case(&s).join(" ");
            prop_assert_eq!(count_tokens(&joined), count_tokens(&s));
            prop_assert_eq!(tokenize(&joined), tokenize(&s));
        }
    }
}
