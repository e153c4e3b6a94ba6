//! Scoring of prediction files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::{BenchmarkItem, OrderStatement, ProbeCategory, ProbeSubtype, Split, YesNo};
use crate::datasets::PreferenceRecord;
use crate::digest::content_id;

/// Published group score for a random baseline, reported alongside ours. The
/// independence model in [`random_group_rate`] gives 6.25.
pub const QUOTED_RANDOM_GROUP_PCT: f64 = 12.5;
pub const SUBCATEGORY_PASS: usize = 3;
pub const CATEGORY_PASS: usize = 5;

const LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub item_id: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Choice {
    Option(usize),
    Answer(YesNo),
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub raw_response: String,
    pub parsed_choice: Choice,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("duplicate prediction for item {0}")]
    DuplicatePrediction(String),
    #[error("no truth assignment for quadruple {0}")]
    MissingTruth(String),
    #[error("quadruple {quad_id}: field {field} is {value}, expected 0 or 1")]
    InvalidQuadField {
        quad_id: String,
        field: &'static str,
        value: u8,
    },
}

fn normalize(text: &str) -> String {
    text.trim()
        .trim_end_matches(['.', '!'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Option index from a free-text response: exact option text, then a
/// leading option letter.
pub fn parse_option(raw: &str, options: &[String]) -> Option<usize> {
    let norm = normalize(raw);
    if let Some(i) = options.iter().position(|o| normalize(o) == norm) {
        return Some(i);
    }
    let mut rest = raw.trim_start();
    for prefix in ["answer:", "answer is", "option", "the answer is"] {
        if rest.len() >= prefix.len() && rest[..prefix.len()].eq_ignore_ascii_case(prefix) {
            rest = rest[prefix.len()..].trim_start();
        }
    }
    let rest = rest.trim_start_matches(['(', '[']);
    let mut chars = rest.chars();
    let letter = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some_and(|c| c.is_alphanumeric()) {
        return None;
    }
    let idx = LETTERS.iter().position(|&l| l == letter)?;
    (idx < options.len()).then_some(idx)
}

/// Leading yes/no token.
pub fn parse_yes_no(raw: &str) -> Option<YesNo> {
    let first = raw
        .split(|c: char| !c.is_alphanumeric())
        .find(|t| !t.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" | "true" => Some(YesNo::Yes),
        "no" | "false" => Some(YesNo::No),
        _ => None,
    }
}

pub fn parse_mcqa_prediction(raw: &str, item: &BenchmarkItem) -> Prediction {
    Prediction {
        item_id: item.id.clone(),
        raw_response: raw.to_string(),
        parsed_choice: parse_option(raw, &item.options).map_or(Choice::Unparsed, Choice::Option),
    }
}

pub fn parse_probe_prediction(raw: &str, statement: &OrderStatement) -> Prediction {
    Prediction {
        item_id: statement.id.clone(),
        raw_response: raw.to_string(),
        parsed_choice: parse_yes_no(raw).map_or(Choice::Unparsed, Choice::Answer),
    }
}

/// Responses keyed by item id.
pub fn index_predictions(lines: &[PredictionLine]) -> Result<BTreeMap<String, String>, EvalError> {
    let mut map = BTreeMap::new();
    for line in lines {
        if map.insert(line.item_id.clone(), line.response.clone()).is_some() {
            return Err(EvalError::DuplicatePrediction(line.item_id.clone()));
        }
    }
    Ok(map)
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
    pub missing: usize,
    pub unparsed: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, outcome: Outcome) {
        self.total += 1;
        match outcome {
            Outcome::Correct => self.correct += 1,
            Outcome::Wrong => {}
            Outcome::Missing => self.missing += 1,
            Outcome::Unparsed => self.unparsed += 1,
        }
        self.accuracy = pct(self.correct, self.total);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Correct,
    Wrong,
    Missing,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: Tally,
    pub splits: BTreeMap<Split, Tally>,
    /// Normal minus shuffled accuracy, in points.
    pub gap: Option<f64>,
}

impl AccuracyReport {
    pub fn render_table(&self, label: &str) -> String {
        let mut out = format!(
            "{label}\n{:<10} {:>7} {:>7} {:>7} {:>8} {:>9}\n",
            "split", "total", "correct", "missing", "unparsed", "accuracy"
        );
        let rows = self
            .splits
            .iter()
            .map(|(s, t)| (s.to_string(), t))
            .chain(std::iter::once(("overall".to_string(), &self.overall)));
        for (name, t) in rows {
            let _ = writeln!(
                out,
                "{name:<10} {:>7} {:>7} {:>7} {:>8} {:>9.2}",
                t.total, t.correct, t.missing, t.unparsed, t.accuracy
            );
        }
        if let Some(gap) = self.gap {
            let _ = writeln!(out, "normal - shuffled gap: {gap:.2} points");
        }
        out
    }
}

/// Accuracy per split and overall. Missing and unparsed predictions count
/// as incorrect and are reported separately.
pub fn score_mcqa(items: &[BenchmarkItem], predictions: &[PredictionLine]) -> Result<AccuracyReport, EvalError> {
    let preds = index_predictions(predictions)?;
    let mut overall = Tally::default();
    let mut splits: BTreeMap<Split, Tally> = BTreeMap::new();
    for item in items {
        let outcome = match preds.get(&item.id) {
            None => Outcome::Missing,
            Some(raw) => match parse_option(raw, &item.options) {
                None => Outcome::Unparsed,
                Some(i) if i == item.answer_index => Outcome::Correct,
                Some(_) => Outcome::Wrong,
            },
        };
        overall.add(outcome);
        splits.entry(item.split).or_default().add(outcome);
    }
    let gap = match (splits.get(&Split::Normal), splits.get(&Split::Shuffled)) {
        (Some(n), Some(s)) if n.total > 0 && s.total > 0 => Some(n.accuracy - s.accuracy),
        _ => None,
    };
    Ok(AccuracyReport { overall, splits, gap })
}

/// Four forced binary choices over one (V, V', X, A, A') quadruple:
/// `t1`/`t2` pick the answer for V / V', `v1`/`v2` pick the video for A / A'.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadruplePrediction {
    pub quad_id: String,
    pub t1: u8,
    pub t2: u8,
    pub v1: u8,
    pub v2: u8,
}

impl QuadruplePrediction {
    pub fn check(&self) -> Result<(), EvalError> {
        for (field, value) in [("t1", self.t1), ("t2", self.t2), ("v1", self.v1), ("v2", self.v2)] {
            if value > 1 {
                return Err(EvalError::InvalidQuadField {
                    quad_id: self.quad_id.clone(),
                    field,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// A matching quadruple built from an explicit preference record. Index 0
/// is the original video / chosen answer, index 1 the shuffled video /
/// rejected answer, so the truth is `t1=0, t2=1, v1=0, v2=1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadItem {
    pub quad_id: String,
    pub videos: [String; 2],
    pub prompt: String,
    pub answers: [String; 2],
}

impl QuadItem {
    pub fn truth(&self) -> QuadruplePrediction {
        QuadruplePrediction {
            quad_id: self.quad_id.clone(),
            t1: 0,
            t2: 1,
            v1: 0,
            v2: 1,
        }
    }
}

pub fn build_quads(pairs: &[PreferenceRecord]) -> Vec<QuadItem> {
    pairs
        .iter()
        .filter_map(|p| {
            let shuffled = p.shuffled_video_path.as_ref()?;
            Some(QuadItem {
                quad_id: content_id(&[&p.id, "quad"]),
                videos: [p.video_path.clone(), shuffled.clone()],
                prompt: p.prompt.clone(),
                answers: [p.chosen.clone(), p.rejected.clone()],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadOutcome {
    pub text: bool,
    pub video: bool,
    pub group: bool,
}

pub fn quad_outcome(pred: &QuadruplePrediction, truth: &QuadruplePrediction) -> QuadOutcome {
    let text = pred.t1 == truth.t1 && pred.t2 == truth.t2;
    let video = pred.v1 == truth.v1 && pred.v2 == truth.v2;
    QuadOutcome {
        text,
        video,
        group: text && video,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub quads: usize,
    pub text: f64,
    pub video: f64,
    pub group: f64,
    /// Expected group score of uniform guessing under independence.
    pub random_group_independent: f64,
    pub random_group_quoted: f64,
}

impl GroupScores {
    pub fn render_table(&self, label: &str) -> String {
        format!(
            "{label}\n{:<8} {:>6} {:>6} {:>6}\n{:<8} {:>6.2} {:>6.2} {:>6.2}\nrandom group score: {:.2} (independent guessing), {:.2} (quoted reference)\n",
            "quads", "text", "video", "group",
            self.quads, self.text, self.video, self.group,
            self.random_group_independent, self.random_group_quoted
        )
    }
}

/// Probability that uniform independent guessing gets all four binary
/// choices right, in percent.
pub fn random_group_rate() -> f64 {
    100.0 * 0.5f64.powi(4)
}

pub fn score_group(quads: &[QuadruplePrediction], truth: &[QuadruplePrediction]) -> Result<GroupScores, EvalError> {
    let truth: BTreeMap<&str, &QuadruplePrediction> = truth.iter().map(|t| (t.quad_id.as_str(), t)).collect();
    let (mut text, mut video, mut group) = (0, 0, 0);
    for q in quads {
        q.check()?;
        let t = truth
            .get(q.quad_id.as_str())
            .ok_or_else(|| EvalError::MissingTruth(q.quad_id.clone()))?;
        let o = quad_outcome(q, t);
        text += o.text as usize;
        video += o.video as usize;
        group += o.group as usize;
    }
    let n = quads.len();
    Ok(GroupScores {
        quads: n,
        text: pct(text, n),
        video: pct(video, n),
        group: pct(group, n),
        random_group_independent: random_group_rate(),
        random_group_quoted: QUOTED_RANDOM_GROUP_PCT,
    })
}

pub fn random_quad_predictions(truth: &[QuadruplePrediction], seed: u64) -> Vec<QuadruplePrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth
        .iter()
        .map(|t| QuadruplePrediction {
            quad_id: t.quad_id.clone(),
            t1: rng.gen_range(0..2),
            t2: rng.gen_range(0..2),
            v1: rng.gen_range(0..2),
            v2: rng.gen_range(0..2),
        })
        .collect()
}

pub fn random_mcqa_predictions(items: &[BenchmarkItem], seed: u64) -> Vec<PredictionLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|i| PredictionLine {
            item_id: i.id.clone(),
            response: LETTERS[rng.gen_range(0..i.options.len().clamp(1, LETTERS.len()))].to_string(),
        })
        .collect()
}

pub fn random_probe_predictions(statements: &[OrderStatement], seed: u64) -> Vec<PredictionLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    statements
        .iter()
        .map(|s| PredictionLine {
            item_id: s.id.clone(),
            response: if rng.gen_bool(0.5) { "Yes" } else { "No" }.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRate {
    pub graded: usize,
    pub passed: usize,
    pub pass_rate: f64,
}

impl PassRate {
    fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let (mut graded, mut passed) = (0, 0);
        for f in flags {
            graded += 1;
            passed += f as usize;
        }
        Self {
            graded,
            passed,
            pass_rate: pct(passed, graded),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcategoryGrade {
    pub category: ProbeCategory,
    pub subtype: ProbeSubtype,
    #[serde(flatten)]
    pub rate: PassRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGrade {
    pub category: ProbeCategory,
    #[serde(flatten)]
    pub rate: PassRate,
    /// (video, category) groups lacking one subtype, hence not graded.
    pub incomplete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeReport {
    pub subcategories: Vec<SubcategoryGrade>,
    pub categories: Vec<CategoryGrade>,
    pub subcategory_overall: PassRate,
    pub category_overall: PassRate,
    pub statements: Tally,
}

impl GradeReport {
    pub fn render_table(&self, label: &str) -> String {
        let mut out = format!(
            "{label}\n{:<15} {:<7} {:>6} {:>6} {:>8}\n",
            "category", "subtype", "graded", "passed", "rate"
        );
        for s in &self.subcategories {
            let _ = writeln!(
                out,
                "{:<15} {:<7} {:>6} {:>6} {:>8.2}",
                s.category.to_string(),
                s.subtype.to_string(),
                s.rate.graded,
                s.rate.passed,
                s.rate.pass_rate
            );
        }
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{:<15} {:<7} {:>6} {:>6} {:>8.2}",
                c.category.to_string(),
                "both",
                c.rate.graded,
                c.rate.passed,
                c.rate.pass_rate
            );
        }
        let _ = writeln!(
            out,
            "statement accuracy {:.2} ({} missing, {} unparsed)",
            self.statements.accuracy, self.statements.missing, self.statements.unparsed
        );
        out
    }
}

/// Correctness per statement, grouped by video then category then subtype.
type Grouped = BTreeMap<(String, ProbeCategory), BTreeMap<ProbeSubtype, Vec<bool>>>;

fn group_outcomes(statements: &[OrderStatement], preds: &BTreeMap<String, String>, tally: &mut Tally) -> Grouped {
    let mut grouped: Grouped = BTreeMap::new();
    for s in statements {
        let outcome = match preds.get(&s.id) {
            None => Outcome::Missing,
            Some(raw) => match parse_yes_no(raw) {
                None => Outcome::Unparsed,
                Some(a) if a == s.label => Outcome::Correct,
                Some(_) => Outcome::Wrong,
            },
        };
        tally.add(outcome);
        grouped
            .entry((s.video_path.clone(), s.category))
            .or_default()
            .entry(s.subtype)
            .or_default()
            .push(outcome == Outcome::Correct);
    }
    grouped
}

fn correct(flags: &[bool]) -> usize {
    flags.iter().filter(|&&c| c).count()
}

/// A subcategory (one 4-statement pair) passes with `sub_k` correct; a
/// category (both subtypes, 8 statements) passes with `cat_k` correct.
pub fn grade_with(
    statements: &[OrderStatement],
    predictions: &[PredictionLine],
    sub_k: usize,
    cat_k: usize,
) -> Result<GradeReport, EvalError> {
    let preds = index_predictions(predictions)?;
    let mut tally = Tally::default();
    let grouped = group_outcomes(statements, &preds, &mut tally);
    let mut subcategories = Vec::new();
    let mut categories = Vec::new();
    for category in ProbeCategory::ALL {
        let in_cat: Vec<&BTreeMap<ProbeSubtype, Vec<bool>>> = grouped
            .iter()
            .filter(|((_, c), _)| *c == category)
            .map(|(_, v)| v)
            .collect();
        for subtype in ProbeSubtype::ALL {
            let rate = PassRate::from_flags(
                in_cat
                    .iter()
                    .filter_map(|m| m.get(&subtype))
                    .map(|f| correct(f) >= sub_k),
            );
            subcategories.push(SubcategoryGrade {
                category,
                subtype,
                rate,
            });
        }
        let complete: Vec<_> = in_cat.iter().filter(|m| m.len() == ProbeSubtype::ALL.len()).collect();
        categories.push(CategoryGrade {
            category,
            rate: PassRate::from_flags(
                complete
                    .iter()
                    .map(|m| m.values().map(|f| correct(f)).sum::<usize>() >= cat_k),
            ),
            incomplete: in_cat.len() - complete.len(),
        });
    }
    let subcategory_overall =
        PassRate::from_flags(grouped.values().flat_map(|m| m.values()).map(|f| correct(f) >= sub_k));
    let category_overall = PassRate::from_flags(
        grouped
            .values()
            .filter(|m| m.len() == ProbeSubtype::ALL.len())
            .map(|m| m.values().map(|f| correct(f)).sum::<usize>() >= cat_k),
    );
    Ok(GradeReport {
        subcategories,
        categories,
        subcategory_overall,
        category_overall,
        statements: tally,
    })
}

pub fn grade_order_probes(
    statements: &[OrderStatement],
    predictions: &[PredictionLine],
) -> Result<GradeReport, EvalError> {
    grade_with(statements, predictions, SUBCATEGORY_PASS, CATEGORY_PASS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    #[serde(flatten)]
    pub rate: PassRate,
}

/// Subcategory pass rate when `k` of 4 statements must be correct.
pub fn strictness_sweep(
    statements: &[OrderStatement],
    predictions: &[PredictionLine],
) -> Result<Vec<SweepPoint>, EvalError> {
    (1..=4)
        .map(|k| {
            grade_with(statements, predictions, k, CATEGORY_PASS).map(|r| SweepPoint {
                k,
                rate: r.subcategory_overall,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::build_order_probes;
    use crate::corpus::{Scene, VideoRecord};
    use proptest::prelude::*;

    fn item(id: &str, split: Split, answer: usize) -> BenchmarkItem {
        BenchmarkItem {
            id: id.into(),
            video_path: "v.mp4".into(),
            split,
            question: "q".into(),
            options: ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect(),
            answer_index: answer,
            perm_ref: None,
        }
    }

    fn line(id: &str, r: &str) -> PredictionLine {
        PredictionLine {
            item_id: id.into(),
            response: r.into(),
        }
    }

    #[test]
    fn option_ladder() {
        let opts: Vec<String> = ["The man sits.", "He runs", "C", "She waves"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(parse_option("B", &opts), Some(1));
        assert_eq!(parse_option("he runs.", &opts), Some(1));
        assert_eq!(parse_option("(D) She waves", &opts), Some(3));
        assert_eq!(parse_option("Answer: A", &opts), Some(0));
        // Exact option text wins over the letter reading.
        assert_eq!(parse_option("C", &opts), Some(2));
        assert_eq!(parse_option("E", &opts), None);
        assert_eq!(parse_option("Because", &opts), None);
        assert_eq!(parse_option("It depends.", &opts), None);
    }

    #[test]
    fn yes_no_ladder() {
        assert_eq!(parse_yes_no("Yes, the woman waves first."), Some(YesNo::Yes));
        assert_eq!(parse_yes_no("no."), Some(YesNo::No));
        assert_eq!(parse_yes_no("It depends."), None);
        assert_eq!(parse_yes_no("Nope"), None);
    }

    #[test]
    fn typed_predictions() {
        let it = item("i", Split::Normal, 1);
        assert_eq!(parse_mcqa_prediction("B", &it).parsed_choice, Choice::Option(1));
        assert_eq!(
            parse_mcqa_prediction("It depends.", &it).parsed_choice,
            Choice::Unparsed
        );
    }

    #[test]
    fn accuracy_per_split() {
        let items: Vec<_> = (0..8)
            .map(|i| item(&format!("i{i}"), if i < 4 { Split::Normal } else { Split::Shuffled }, 0))
            .collect();
        let mut preds: Vec<_> = (0..6).map(|i| line(&format!("i{i}"), "A")).collect();
        preds.push(line("i6", "B"));
        let r = score_mcqa(&items, &preds).unwrap();
        assert_eq!(r.overall.correct, 6);
        assert_eq!(r.overall.accuracy, 75.0);
        assert_eq!(r.overall.missing, 1);
        assert_eq!(r.splits[&Split::Normal].accuracy, 100.0);
        assert_eq!(r.splits[&Split::Shuffled].accuracy, 50.0);
        assert_eq!(r.gap, Some(50.0));
        assert!(r.render_table("t").contains("overall"));
    }

    #[test]
    fn duplicate_predictions_rejected() {
        let items = [item("i", Split::Normal, 0)];
        assert_eq!(
            score_mcqa(&items, &[line("i", "A"), line("i", "B")]),
            Err(EvalError::DuplicatePrediction("i".into()))
        );
    }

    fn q(t1: u8, t2: u8, v1: u8, v2: u8) -> QuadruplePrediction {
        QuadruplePrediction {
            quad_id: "q".into(),
            t1,
            t2,
            v1,
            v2,
        }
    }

    #[test]
    fn sixteen_outcomes() {
        let truth = q(0, 1, 0, 1);
        let (mut t, mut v, mut g) = (0, 0, 0);
        for bits in 0u8..16 {
            let o = quad_outcome(&q(bits & 1, (bits >> 1) & 1, (bits >> 2) & 1, (bits >> 3) & 1), &truth);
            t += o.text as u32;
            v += o.video as u32;
            g += o.group as u32;
        }
        assert_eq!((t, v, g), (4, 4, 1));
    }

    #[test]
    fn truth_scores_full_marks() {
        let truth = vec![q(0, 1, 0, 1)];
        let s = score_group(&truth, &truth).unwrap();
        assert_eq!((s.text, s.video, s.group), (100.0, 100.0, 100.0));
        assert_eq!(s.random_group_independent, 6.25);
        assert!(matches!(
            score_group(&[q(2, 0, 0, 0)], &truth),
            Err(EvalError::InvalidQuadField { .. })
        ));
    }

    fn probe_video(n: usize) -> VideoRecord {
        VideoRecord {
            video_id: "p".into(),
            media_path: String::new(),
            duration_s: 12.0 * n as f64,
            scenes: (0..n)
                .map(|i| Scene {
                    index: i,
                    start_s: 12.0 * i as f64,
                    end_s: 12.0 * (i + 1) as f64,
                    caption: format!("event {i}"),
                })
                .collect(),
        }
    }

    fn answer_all(statements: &[OrderStatement], f: impl Fn(&OrderStatement) -> &'static str) -> Vec<PredictionLine> {
        statements.iter().map(|s| line(&s.id, f(s))).collect()
    }

    fn flip(label: YesNo) -> &'static str {
        match label {
            YesNo::Yes => "No",
            YesNo::No => "Yes",
        }
    }

    fn truthful(label: YesNo) -> &'static str {
        match label {
            YesNo::Yes => "Yes",
            YesNo::No => "No",
        }
    }

    #[test]
    fn three_of_four_passes_subcategory() {
        let st = build_order_probes(&probe_video(7), "p.mp4", 0).unwrap().statements;
        let first = st[0].id.clone();
        let preds = answer_all(&st, |s| {
            if s.id == first {
                flip(s.label)
            } else {
                truthful(s.label)
            }
        });
        let r = grade_order_probes(&st, &preds).unwrap();
        let near_before = &r.subcategories[0];
        assert_eq!(
            (near_before.category, near_before.subtype),
            (ProbeCategory::Near, ProbeSubtype::Before)
        );
        assert_eq!(near_before.rate.passed, 1);
    }

    #[test]
    fn category_needs_five_of_eight() {
        let st = build_order_probes(&probe_video(7), "p.mp4", 0).unwrap().statements;
        let near: Vec<&OrderStatement> = st.iter().filter(|s| s.category == ProbeCategory::Near).collect();
        for wrong in [4usize, 3] {
            let bad: Vec<&str> = near.iter().take(wrong).map(|s| s.id.as_str()).collect();
            let preds = answer_all(&st, |s| {
                if bad.contains(&s.id.as_str()) {
                    flip(s.label)
                } else {
                    truthful(s.label)
                }
            });
            let r = grade_order_probes(&st, &preds).unwrap();
            let passed = r.categories[0].rate.passed;
            assert_eq!(passed, usize::from(wrong == 3), "{} of 8 correct", 8 - wrong);
        }
    }

    #[test]
    fn all_no_fails_three_of_four_but_passes_lax_rules() {
        let st = build_order_probes(&probe_video(7), "p.mp4", 0).unwrap().statements;
        let preds = answer_all(&st, |_| "No");
        let r = grade_order_probes(&st, &preds).unwrap();
        assert!(r.subcategories.iter().all(|s| s.rate.passed == 0));
        let sweep = strictness_sweep(&st, &preds).unwrap();
        let rates: Vec<f64> = sweep.iter().map(|p| p.rate.pass_rate).collect();
        assert_eq!(rates, [100.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn one_error_fails_k4() {
        let st = build_order_probes(&probe_video(5), "p.mp4", 0).unwrap().statements;
        let first = st[0].id.clone();
        let preds = answer_all(&st, |s| {
            if s.id == first {
                flip(s.label)
            } else {
                truthful(s.label)
            }
        });
        let sweep = strictness_sweep(&st, &preds).unwrap();
        assert!(sweep[3].rate.passed < sweep[3].rate.graded);
    }

    #[test]
    fn missing_and_unparsed_count_wrong() {
        let st = build_order_probes(&probe_video(5), "p.mp4", 0).unwrap().statements;
        let preds = vec![line(&st[0].id, "maybe")];
        let r = grade_order_probes(&st, &preds).unwrap();
        assert_eq!(r.statements.unparsed, 1);
        assert_eq!(r.statements.missing, st.len() - 1);
        assert_eq!(r.statements.correct, 0);
    }

    proptest! {
        #[test]
        fn group_implies_text_and_video(bits in proptest::collection::vec(0u8..16, 1..50)) {
            let quads: Vec<_> = bits.iter().enumerate().map(|(i, b)| QuadruplePrediction {
                quad_id: i.to_string(), t1: b & 1, t2: (b >> 1) & 1, v1: (b >> 2) & 1, v2: (b >> 3) & 1,
            }).collect();
            let truth: Vec<_> = (0..bits.len()).map(|i| QuadruplePrediction { quad_id: i.to_string(), t1: 0, t2: 1, v1: 0, v2: 1 }).collect();
            for (p, t) in quads.iter().zip(&truth) {
                let o = quad_outcome(p, t);
                prop_assert!(!o.group || (o.text && o.video));
            }
            let s = score_group(&quads, &truth).unwrap();
            prop_assert!(s.group <= s.text.min(s.video));
        }

        #[test]
        fn sweep_is_monotone(n in 4usize..10, seed in any::<u64>()) {
            let st = build_order_probes(&probe_video(n), "p.mp4", seed).unwrap().statements;
            let preds = random_probe_predictions(&st, seed);
            let sweep = strictness_sweep(&st, &preds).unwrap();
            for w in sweep.windows(2) {
                prop_assert!(w[1].rate.pass_rate <= w[0].rate.pass_rate);
            }
        }
    }
}
