//! Per-sentence frequency of person names and pronouns.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::metric_tokens;
use crate::feature_store::TimedText;

pub const AD_PRONOUNS: [&str; 6] = ["she", "her", "he", "him", "they", "them"];
pub const SUBTITLE_PRONOUNS: [&str; 8] = ["she", "her", "he", "him", "they", "them", "i", "me"];

/// An externally produced named-entity tag attached to one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerTag {
    /// Row index of the tagged sentence in the timeline being analysed.
    pub index: usize,
    pub label: String,
    #[serde(default)]
    pub text: String,
}

impl NerTag {
    pub fn is_person(&self) -> bool {
        matches!(self.label.to_ascii_uppercase().as_str(), "PER" | "PERSON")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsOptions {
    pub pronouns: Vec<String>,
    /// Sentences starting before this time are treated as intro and skipped.
    pub intro_end_s: Option<f64>,
    /// Sentences ending after this time are treated as outro and skipped.
    pub outro_start_s: Option<f64>,
}

impl StatsOptions {
    pub fn for_ad() -> Self {
        Self {
            pronouns: AD_PRONOUNS.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn for_subtitles() -> Self {
        Self {
            pronouns: SUBTITLE_PRONOUNS.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub with_person: usize,
    pub with_pronoun: usize,
    pub with_either: usize,
}

impl CorpusStats {
    fn frac(&self, n: usize) -> f64 {
        if self.sentences == 0 {
            0.0
        } else {
            n as f64 / self.sentences as f64
        }
    }

    pub fn person_fraction(&self) -> f64 {
        self.frac(self.with_person)
    }

    pub fn pronoun_fraction(&self) -> f64 {
        self.frac(self.with_pronoun)
    }

    pub fn either_fraction(&self) -> f64 {
        self.frac(self.with_either)
    }
}

pub fn corpus_stats(sentences: &[TimedText], tags: &[NerTag], opts: &StatsOptions) -> CorpusStats {
    let tagged: HashSet<usize> = tags.iter().filter(|t| t.is_person()).map(|t| t.index).collect();
    let pronouns: HashSet<&str> = opts.pronouns.iter().map(String::as_str).collect();
    let mut stats = CorpusStats::default();
    for (i, s) in sentences.iter().enumerate() {
        if opts.intro_end_s.is_some_and(|t| s.start_s < t) || opts.outro_start_s.is_some_and(|t| s.end_s > t) {
            continue;
        }
        stats.sentences += 1;
        let person = tagged.contains(&i);
        let pronoun = metric_tokens(&s.text).iter().any(|w| pronouns.contains(w.as_str()));
        stats.with_person += person as usize;
        stats.with_pronoun += pronoun as usize;
        stats.with_either += (person || pronoun) as usize;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::TextKind;

    fn ad(s: f64, text: &str) -> TimedText {
        TimedText::new(s, s + 1.0, TextKind::Ad, text).unwrap()
    }

    #[test]
    fn half_tagged() {
        let s = vec![ad(0.0, "Jack runs."), ad(2.0, "A door opens.")];
        let tags = vec![NerTag { index: 0, label: "PER".into(), text: "Jack".into() }];
        let st = corpus_stats(&s, &tags, &StatsOptions::for_ad());
        assert_eq!(st.person_fraction(), 0.5);
        assert_eq!(st.pronoun_fraction(), 0.0);
    }

    #[test]
    fn union_and_exclusion() {
        let s = vec![
            ad(0.0, "Produced by Jane Doe."),
            ad(10.0, "She smiles at him."),
            ad(20.0, "Tom waves; he leaves."),
            ad(30.0, "Rain falls."),
            ad(100.0, "Directed by John Roe."),
        ];
        let tags = vec![
            NerTag { index: 0, label: "PER".into(), text: "Jane Doe".into() },
            NerTag { index: 2, label: "PER".into(), text: "Tom".into() },
            NerTag { index: 4, label: "PER".into(), text: "John Roe".into() },
            NerTag { index: 3, label: "LOC".into(), text: "".into() },
        ];
        let opts = StatsOptions { intro_end_s: Some(5.0), outro_start_s: Some(90.0), ..StatsOptions::for_ad() };
        let st = corpus_stats(&s, &tags, &opts);
        assert_eq!(st, CorpusStats { sentences: 3, with_person: 1, with_pronoun: 2, with_either: 2 });
    }

    #[test]
    fn subtitle_pronouns_include_first_person() {
        let s = vec![ad(0.0, "I know.")];
        assert_eq!(corpus_stats(&s, &[], &StatsOptions::for_ad()).with_pronoun, 0);
        assert_eq!(corpus_stats(&s, &[], &StatsOptions::for_subtitles()).with_pronoun, 1);
    }
}
