//! Parsing and scoring of structured recall generations.
//!
//! A generation lists recalled articles (title and content) followed by an
//! answer. Scores:
//!
//! - precision: share of distinct recalled titles that belong to the
//!   question's ground-truth articles;
//! - hallucination rate: among title-matched articles, share whose content
//!   differs from the ground truth after [`normalize`];
//! - accuracy: share of judged questions the judge marked correct.
//!
//! Dataset-level precision and hallucination rate pool the underlying counts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{Corpus, DocumentGroup};
use crate::judgeclient::Verdict;
use crate::packer::{ground_truth_generation, PackError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("generation has no answer block")]
    MissingAnswer,
    #[error("cannot aggregate an empty score list")]
    EmptyScores,
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
}

/// Layout of a recall generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallTemplate {
    /// `Recalled Article N: <title>` blocks and a final `Answer: …` line.
    Inline,
    /// `# Evidence:`, one `## <title>` block per article, then `# Answer:`.
    #[default]
    Markdown,
}

impl fmt::Display for RecallTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inline => "inline",
            Self::Markdown => "markdown",
        })
    }
}

impl FromStr for RecallTemplate {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inline" => Ok(Self::Inline),
            "markdown" => Ok(Self::Markdown),
            _ => Err(EvalError::UnknownTemplate(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecalledArticle {
    pub title: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallGeneration {
    pub articles: Vec<RecalledArticle>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    NoArticles,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGeneration {
    pub generation: RecallGeneration,
    pub warnings: Vec<ParseWarning>,
}

pub fn render_generation(gen: &RecallGeneration, template: RecallTemplate) -> String {
    let mut out = String::new();
    match template {
        RecallTemplate::Markdown => {
            out.push_str("# Evidence:\n");
            for a in &gen.articles {
                out.push_str(&format!("## {}\n{}\n\n", a.title, a.content));
            }
            out.push_str("# Answer:\n");
            out.push_str(&gen.answer);
        }
        RecallTemplate::Inline => {
            for (i, a) in gen.articles.iter().enumerate() {
                out.push_str(&format!(
                    "Recalled Article {}: {}\n{}\n",
                    i + 1,
                    a.title,
                    a.content
                ));
            }
            out.push_str("Answer: ");
            out.push_str(&gen.answer);
        }
    }
    out
}

enum Line<'a> {
    Article(&'a str),
    Answer(&'a str),
    Evidence,
    Text(&'a str),
}

fn classify(line: &str, template: RecallTemplate) -> Line<'_> {
    let t = line.trim_start();
    match template {
        RecallTemplate::Markdown => {
            if let Some(title) = t.strip_prefix("## ") {
                Line::Article(title)
            } else if let Some(rest) = t.strip_prefix("# Answer") {
                Line::Answer(rest.strip_prefix(':').unwrap_or(rest))
            } else if t.starts_with("# Evidence") {
                Line::Evidence
            } else {
                Line::Text(line)
            }
        }
        RecallTemplate::Inline => {
            if let Some(rest) = t.strip_prefix("Recalled Article ") {
                let digits =
                    rest.len() - rest.trim_start_matches(|c: char| c.is_ascii_digit()).len();
                match rest[digits..].strip_prefix(':') {
                    Some(title) if digits > 0 => return Line::Article(title),
                    _ => {}
                }
            }
            match t.strip_prefix("Answer:") {
                Some(rest) => Line::Answer(rest),
                None => Line::Text(line),
            }
        }
    }
}

/// Splits a generation into article blocks and the answer.
///
/// Titles are the rest of the heading line; content is every following line up
/// to the next heading, trimmed. The answer is everything after the answer
/// marker. A generation with no articles parses with a
/// [`ParseWarning::NoArticles`] warning.
pub fn parse_generation(
    text: &str,
    template: RecallTemplate,
) -> Result<ParsedGeneration, EvalError> {
    let mut articles: Vec<RecalledArticle> = Vec::new();
    let mut content: Vec<&str> = Vec::new();
    let mut answer: Option<Vec<&str>> = None;

    let flush = |articles: &mut Vec<RecalledArticle>, content: &mut Vec<&str>| {
        if let Some(last) = articles.last_mut() {
            last.content = content.join("\n").trim().to_string();
        }
        content.clear();
    };

    for line in text.lines() {
        if let Some(ans) = answer.as_mut() {
            ans.push(line);
            continue;
        }
        match classify(line, template) {
            Line::Article(title) => {
                flush(&mut articles, &mut content);
                articles.push(RecalledArticle {
                    title: title.trim().to_string(),
                    content: String::new(),
                });
            }
            Line::Answer(rest) => {
                flush(&mut articles, &mut content);
                answer = Some(vec![rest]);
            }
            Line::Evidence => {}
            Line::Text(t) => {
                if !articles.is_empty() {
                    content.push(t);
                }
            }
        }
    }

    let answer = answer
        .map(|lines| lines.join("\n").trim().to_string())
        .filter(|a| !a.is_empty())
        .ok_or(EvalError::MissingAnswer)?;
    let warnings = if articles.is_empty() {
        vec![ParseWarning::NoArticles]
    } else {
        vec![]
    };
    Ok(ParsedGeneration {
        generation: RecallGeneration { articles, answer },
        warnings,
    })
}

/// NFKC, lowercase, whitespace runs collapsed to one space, trimmed.
/// Punctuation is kept.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().flat_map(char::to_lowercase).collect();
    // Lowercasing can produce sequences that are no longer NFKC-normal.
    let folded: String = folded.nfkc().collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ground-truth articles for one question, keyed by normalized title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub question_id: String,
    pub question: Option<String>,
    pub answer: String,
    pub articles: Vec<RecalledArticle>,
}

impl GroundTruth {
    pub fn from_group(group: &DocumentGroup, corpus: &Corpus) -> Result<Self, PackError> {
        let gen = ground_truth_generation(group, corpus)?;
        Ok(Self {
            question_id: group.question_id.clone(),
            question: group.question.clone(),
            answer: gen.answer,
            articles: gen.articles,
        })
    }

    fn contents_by_title(&self) -> HashMap<String, HashSet<String>> {
        let mut map: HashMap<String, HashSet<String>> = HashMap::new();
        for a in &self.articles {
            map.entry(normalize(&a.title))
                .or_default()
                .insert(normalize(&a.content));
        }
        map
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounts {
    pub titles_recalled: u64,
    pub titles_matched: u64,
    pub contents_mismatched: u64,
    pub questions: u64,
    /// Questions with a yes or no verdict.
    pub judged: u64,
    pub judged_yes: u64,
    /// Verdicts that could not be parsed; excluded from accuracy.
    pub unparseable: u64,
}

impl std::ops::Add for ScoreCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            titles_recalled: self.titles_recalled + o.titles_recalled,
            titles_matched: self.titles_matched + o.titles_matched,
            contents_mismatched: self.contents_mismatched + o.contents_mismatched,
            questions: self.questions + o.questions,
            judged: self.judged + o.judged,
            judged_yes: self.judged_yes + o.judged_yes,
            unparseable: self.unparseable + o.unparseable,
        }
    }
}

/// Percentages are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub precision: Option<f64>,
    pub hallucination_rate: Option<f64>,
    pub accuracy: Option<f64>,
    pub counts: ScoreCounts,
}

fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64 * 100.0)
}

impl EvalScores {
    pub fn from_counts(counts: ScoreCounts) -> Self {
        Self {
            precision: percent(counts.titles_matched, counts.titles_recalled),
            hallucination_rate: percent(counts.contents_mismatched, counts.titles_matched),
            accuracy: percent(counts.judged_yes, counts.judged),
            counts,
        }
    }
}

/// Scores one generation against its question's ground truth.
pub fn score_one(
    gen: &RecallGeneration,
    truth: &GroundTruth,
    verdict: Option<Verdict>,
) -> EvalScores {
    let truth_contents = truth.contents_by_title();
    let mut seen = HashSet::new();
    let mut counts = ScoreCounts {
        questions: 1,
        ..Default::default()
    };
    for article in &gen.articles {
        let title = normalize(&article.title);
        if !seen.insert(title.clone()) {
            continue;
        }
        counts.titles_recalled += 1;
        if let Some(contents) = truth_contents.get(&title) {
            counts.titles_matched += 1;
            if !contents.contains(&normalize(&article.content)) {
                counts.contents_mismatched += 1;
            }
        }
    }
    match verdict {
        Some(Verdict::Yes) => {
            counts.judged = 1;
            counts.judged_yes = 1;
        }
        Some(Verdict::No) => counts.judged = 1,
        Some(Verdict::Unparseable) => counts.unparseable = 1,
        None => {}
    }
    EvalScores::from_counts(counts)
}

/// Pools counts over questions.
pub fn aggregate(scores: &[EvalScores]) -> Result<EvalScores, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    let counts = scores
        .iter()
        .map(|s| s.counts)
        .fold(ScoreCounts::default(), |a, b| a + b);
    Ok(EvalScores::from_counts(counts))
}

/// Where unmatched recalled titles come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleErrorBreakdown {
    /// Title of some other corpus document: a selection error.
    pub other_document: u64,
    /// Title found nowhere in the corpus.
    pub not_in_corpus: u64,
}

pub fn title_error_breakdown(
    gen: &RecallGeneration,
    truth: &GroundTruth,
    corpus: &Corpus,
) -> TitleErrorBreakdown {
    let truth_titles: HashSet<String> =
        truth.articles.iter().map(|a| normalize(&a.title)).collect();
    let corpus_titles: BTreeSet<String> = corpus.titles().into_iter().map(normalize).collect();
    let mut seen = HashSet::new();
    let mut out = TitleErrorBreakdown::default();
    for a in &gen.articles {
        let t = normalize(&a.title);
        if !seen.insert(t.clone()) || truth_titles.contains(&t) {
            continue;
        }
        if corpus_titles.contains(&t) {
            out.other_document += 1;
        } else {
            out.not_in_corpus += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn art(title: &str, content: &str) -> RecalledArticle {
        RecalledArticle {
            title: title.into(),
            content: content.into(),
        }
    }

    fn truth(articles: Vec<RecalledArticle>) -> GroundTruth {
        GroundTruth {
            question_id: "q".into(),
            question: None,
            answer: "x".into(),
            articles,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("  Dallas   362 "), "dallas 362");
        assert_ne!(
            normalize("Gotham (season 4)"),
            normalize("Gotham (TV series)")
        );
        assert_eq!(normalize("Ｆｕｌｌ\u{00A0}width"), "full width");
        assert_eq!(normalize("a,\tB!\n"), "a, b!");
    }

    #[test]
    fn answer_only_generation() {
        let p = parse_generation("# Answer:\nX", RecallTemplate::Markdown).unwrap();
        assert!(p.generation.articles.is_empty());
        assert_eq!(p.generation.answer, "X");
        assert_eq!(p.warnings, [ParseWarning::NoArticles]);
    }

    #[test]
    fn missing_answer() {
        assert_eq!(
            parse_generation("# Evidence:\n## T\nC\n", RecallTemplate::Markdown),
            Err(EvalError::MissingAnswer)
        );
        assert_eq!(
            parse_generation("# Answer:\n   \n", RecallTemplate::Markdown),
            Err(EvalError::MissingAnswer)
        );
        assert_eq!(
            parse_generation("Recalled Article 1: T\nC", RecallTemplate::Inline),
            Err(EvalError::MissingAnswer)
        );
    }

    #[test]
    fn inline_parsing() {
        let text = "Recalled Article 1: Alpha\nfirst line\nsecond line\n\
                    Recalled Article 2:Beta\nb\nAnswer: 42";
        let p = parse_generation(text, RecallTemplate::Inline).unwrap();
        assert_eq!(
            p.generation.articles,
            [art("Alpha", "first line\nsecond line"), art("Beta", "b")]
        );
        assert_eq!(p.generation.answer, "42");
        // Not a heading without a number.
        let p =
            parse_generation("Recalled Article : x\nAnswer: y", RecallTemplate::Inline).unwrap();
        assert!(p.generation.articles.is_empty());
    }

    #[test]
    fn markdown_answer_on_same_line() {
        let p = parse_generation("## T\nC\n# Answer: DC Comics", RecallTemplate::Markdown).unwrap();
        assert_eq!(p.generation.answer, "DC Comics");
        assert_eq!(p.generation.articles, [art("T", "C")]);
    }

    #[test]
    fn exact_generation_scores_perfectly() {
        let t = truth(vec![art("A", "alpha text"), art("B", "beta text")]);
        let gen = RecallGeneration {
            articles: t.articles.clone(),
            answer: "x".into(),
        };
        let s = score_one(&gen, &t, None);
        assert_eq!(s.precision, Some(100.0));
        assert_eq!(s.hallucination_rate, Some(0.0));
        assert_eq!(s.accuracy, None);
    }

    #[test]
    fn one_of_four_contents_wrong() {
        let t = truth(vec![
            art("A", "a"),
            art("B", "b"),
            art("C", "c"),
            art("D", "d"),
        ]);
        let gen = RecallGeneration {
            articles: vec![
                art("A", "a"),
                art("B", "b"),
                art("C", "wrong"),
                art("D", "d"),
            ],
            answer: "x".into(),
        };
        let s = score_one(&gen, &t, Some(Verdict::Yes));
        assert_eq!(s.counts.titles_matched, 4);
        assert_eq!(s.counts.contents_mismatched, 1);
        assert_eq!(s.hallucination_rate, Some(25.0));
        assert_eq!(s.precision, Some(100.0));
        assert_eq!(s.accuracy, Some(100.0));
    }

    #[test]
    fn duplicates_and_unmatched_titles() {
        let t = truth(vec![art("A", "a")]);
        let gen = RecallGeneration {
            articles: vec![art("A", "a"), art(" a ", "zzz"), art("Nope", "n")],
            answer: "x".into(),
        };
        let s = score_one(&gen, &t, Some(Verdict::No));
        assert_eq!(s.counts.titles_recalled, 2);
        assert_eq!(s.precision, Some(50.0));
        assert_eq!(s.hallucination_rate, Some(0.0));
        assert_eq!(s.accuracy, Some(0.0));

        let none = RecallGeneration {
            articles: vec![art("Nope", "n")],
            answer: "x".into(),
        };
        let s = score_one(&none, &t, Some(Verdict::Unparseable));
        assert_eq!(s.hallucination_rate, None);
        assert_eq!(s.accuracy, None);
        assert_eq!(s.counts.unparseable, 1);
    }

    #[test]
    fn aggregation_pools_counts() {
        let t = truth(vec![art("A", "a"), art("B", "b")]);
        let half = RecallGeneration {
            articles: vec![art("A", "a"), art("X", "x")],
            answer: "x".into(),
        };
        let full = RecallGeneration {
            articles: vec![art("A", "a"), art("B", "b")],
            answer: "x".into(),
        };
        let s1 = score_one(&half, &t, Some(Verdict::Yes));
        let s2 = score_one(&full, &t, None);
        let agg = aggregate(&[s1, s2]).unwrap();
        assert_eq!(agg.precision, Some(75.0));
        assert_eq!(agg.accuracy, Some(100.0));
        assert_eq!(agg.counts.questions, 2);
        assert_eq!(agg.counts.judged, 1);
        assert_eq!(aggregate(&[s1]).unwrap(), s1);
        assert_eq!(aggregate(&[]), Err(EvalError::EmptyScores));

        let unjudged = aggregate(&[score_one(&full, &t, None)]).unwrap();
        assert_eq!(unjudged.accuracy, None);
    }

    #[test]
    fn title_breakdown() {
        use crate::corpus::{Document, VocabConfig};
        let docs = vec![
            Document {
                id: "1".into(),
                title: "A".into(),
                tokens: vec![5],
                raw_text: Some("a".into()),
            },
            Document {
                id: "2".into(),
                title: "Other".into(),
                tokens: vec![6],
                raw_text: Some("o".into()),
            },
        ];
        let corpus = Corpus::new(docs, vec![], &VocabConfig::default()).unwrap();
        let t = truth(vec![art("A", "a")]);
        let gen = RecallGeneration {
            articles: vec![art("A", "a"), art("other", "o"), art("Invented", "i")],
            answer: "x".into(),
        };
        assert_eq!(
            title_error_breakdown(&gen, &t, &corpus),
            TitleErrorBreakdown {
                other_document: 1,
                not_in_corpus: 1
            }
        );
    }

    fn arb_article() -> impl Strategy<Value = RecalledArticle> {
        (
            "[A-Za-z][A-Za-z0-9 ()]{0,12}[A-Za-z0-9)]",
            "[A-Za-z0-9][A-Za-z0-9 ,.]{0,30}[A-Za-z0-9.]",
        )
            .prop_map(|(t, c)| art(&t, &c))
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC*") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn render_then_parse_is_identity(
            articles in proptest::collection::vec(arb_article(), 1..5),
            answer in "[A-Za-z0-9][A-Za-z0-9 ]{0,10}[A-Za-z0-9]",
            inline in any::<bool>(),
        ) {
            let template = if inline { RecallTemplate::Inline } else { RecallTemplate::Markdown };
            let gen = RecallGeneration { articles, answer };
            let parsed = parse_generation(&render_generation(&gen, template), template).unwrap();
            prop_assert_eq!(parsed.generation, gen);
            prop_assert!(parsed.warnings.is_empty());
        }

        #[test]
        fn scores_ignore_order_and_spacing(
            articles in proptest::collection::vec(arb_article(), 1..6),
            keep in proptest::collection::vec(any::<bool>(), 6),
            rot in 0usize..6,
        ) {
            let articles: Vec<RecalledArticle> = articles
                .into_iter()
                .enumerate()
                .map(|(i, a)| art(&format!("t{i} {}", a.title), &a.content))
                .collect();
            let t = truth(articles.clone());
            let mut recalled: Vec<RecalledArticle> = articles
                .iter()
                .zip(&keep)
                .map(|(a, &k)| if k { a.clone() } else { art(&a.title, "something else") })
                .collect();
            recalled.push(art("Not A Real Title 999", "x"));
            let base = score_one(&RecallGeneration { articles: recalled.clone(), answer: "x".into() }, &t, None);

            let n = recalled.len();
            recalled.rotate_left(rot % n);
            let perturbed: Vec<RecalledArticle> = recalled
                .iter()
                .map(|a| art(&format!("  {}  ", a.title.to_uppercase()), &a.content.replace(' ', "  \t")))
                .collect();
            let other = score_one(&RecallGeneration { articles: perturbed, answer: "x".into() }, &t, None);
            prop_assert_eq!(base, other);
        }
    }
}
