//! MCQA benchmark items and binary temporal-ordering probes.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::datasets::{Assembled, DatasetError, Generator};
use crate::digest::{content_id, split_seed};
use crate::permute::ScenePermutation;
use crate::preprocess::CompositeCaption;
use crate::promptkit::{format_options, parse_mcqa, placeholders, McqaItem, TemplateId};

pub const DEFAULT_PROBE_VIDEOS: usize = 500;
pub const DEFAULT_MIN_PROBE_CAPTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Normal,
    Shuffled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Shuffled => "shuffled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub video_path: String,
    pub split: Split,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    pub perm_ref: Option<String>,
}

pub fn item_id(video_id: &str, question: &str, split: Split) -> String {
    content_id(&[video_id, question, &split.to_string()])
}

/// Inputs for one video's benchmark items. The shuffled split is built only
/// when `permuted` is present.
pub struct BenchInputs<'a> {
    pub original: &'a CompositeCaption,
    pub original_path: &'a str,
    pub permuted: Option<(&'a ScenePermutation, &'a CompositeCaption, &'a str)>,
}

/// Normal-split items come from the original narrative. Each is re-keyed
/// for the shuffled split by asking the generator to pick the option that
/// fits the permuted narrative, keeping question and options fixed.
pub fn build_mcqa_items(
    inputs: &BenchInputs<'_>,
    gen: &Generator<'_>,
) -> Result<Assembled<BenchmarkItem>, DatasetError> {
    let video_id = &inputs.original.video_id;
    let mut out = Assembled::default();
    let prompt = gen.templates.render(
        TemplateId::McqaGen,
        &placeholders([("composite_caption", &inputs.original.rendered)]),
    )?;
    let items: Vec<McqaItem> = match parse_mcqa(&gen.ask(video_id, prompt, Vec::new())?) {
        Ok(parsed) => {
            out.diagnostics
                .extend(parsed.dropped.into_iter().map(|d| format!("{video_id}: {d}")));
            parsed.items
        }
        Err(e) => {
            out.diagnostics.push(format!("{video_id}: {e}"));
            return Ok(out);
        }
    };
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.question.clone()) {
            out.diagnostics
                .push(format!("{video_id}: duplicate question `{}`", item.question));
            continue;
        }
        out.records.push(BenchmarkItem {
            id: item_id(video_id, &item.question, Split::Normal),
            video_path: inputs.original_path.to_string(),
            split: Split::Normal,
            question: item.question.clone(),
            options: item.options.clone(),
            answer_index: item.answer_index,
            perm_ref: None,
        });
        let Some((perm, permuted, permuted_path)) = inputs.permuted else {
            continue;
        };
        let prompt = gen.templates.render(
            TemplateId::ShuffledOptionSelect,
            &placeholders([
                ("composite_caption", &permuted.rendered),
                ("question", &item.question),
                ("options", &format_options(&item.options)),
            ]),
        )?;
        let raw = gen.ask(video_id, prompt, Vec::new())?;
        let rekeyed = match parse_mcqa(&raw) {
            Ok(p) => p.items.into_iter().next(),
            Err(e) => {
                out.diagnostics
                    .push(format!("{video_id}: shuffled `{}`: {e}", item.question));
                continue;
            }
        };
        match rekeyed {
            Some(r) if r.options == item.options => out.records.push(BenchmarkItem {
                id: item_id(video_id, &item.question, Split::Shuffled),
                video_path: permuted_path.to_string(),
                split: Split::Shuffled,
                question: item.question,
                options: item.options,
                answer_index: r.answer_index,
                perm_ref: Some(perm.id()),
            }),
            Some(_) => out
                .diagnostics
                .push(format!("{video_id}: shuffled `{}`: options changed", item.question)),
            None => out.diagnostics.push(format!(
                "{video_id}: shuffled `{}`: no option fits the narrative",
                item.question
            )),
        }
    }
    Ok(out)
}

/// Seeded sample of up to `n` records with at least `min_captions` scenes,
/// returned in id order.
pub fn select_probe_videos(records: &[VideoRecord], n: usize, min_captions: usize, seed: u64) -> Vec<VideoRecord> {
    let mut eligible: Vec<&VideoRecord> = records.iter().filter(|r| r.scenes.len() >= min_captions).collect();
    eligible.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if eligible.len() < n {
        log::warn!(
            "only {} videos have at least {min_captions} captions; {n} requested, taking all",
            eligible.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<VideoRecord> = eligible
        .choose_multiple(&mut rng, n.min(eligible.len()))
        .map(|r| (*r).clone())
        .collect();
    picked.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCategory {
    Near,
    ModeratelyFar,
    VeryFar,
}

impl ProbeCategory {
    pub const ALL: [ProbeCategory; 3] = [Self::Near, Self::ModeratelyFar, Self::VeryFar];

    pub fn admits(self, hops: usize) -> bool {
        match self {
            Self::Near => hops == 1,
            Self::ModeratelyFar => hops == 2,
            Self::VeryFar => hops >= 3,
        }
    }

    /// Nominal midpoint separation in seconds, as `[lo, hi)`.
    pub fn nominal_bin(self) -> (f64, f64) {
        match self {
            Self::Near => (10.0, 20.0),
            Self::ModeratelyFar => (20.0, 30.0),
            Self::VeryFar => (30.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for ProbeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Near => "near",
            Self::ModeratelyFar => "moderately_far",
            Self::VeryFar => "very_far",
        })
    }
}

/// Side of the middle event on which the partner event lies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSubtype {
    Before,
    After,
}

impl ProbeSubtype {
    pub const ALL: [ProbeSubtype; 2] = [Self::Before, Self::After];
}

impl fmt::Display for ProbeSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Before => "before",
            Self::After => "after",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStatement {
    pub id: String,
    pub video_path: String,
    pub pair_id: String,
    pub category: ProbeCategory,
    pub subtype: ProbeSubtype,
    pub statement: String,
    pub label: YesNo,
    pub hop_distance: usize,
    pub time_separation_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub video_id: String,
    pub category: ProbeCategory,
    pub subtype: ProbeSubtype,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSet {
    pub statements: Vec<OrderStatement>,
    pub coverage: Vec<CoverageEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{video_id} has {captions} captions; order probes need at least {required}")]
pub struct TooFewCaptions {
    pub video_id: String,
    pub captions: usize,
    pub required: usize,
}

/// Caption as an event phrase inside a statement: trailing punctuation
/// dropped and a capitalized first word lowered.
pub fn event_phrase(caption: &str) -> String {
    let trimmed = caption.trim().trim_end_matches(['.', '!', '?', ';', ',']);
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(first), Some(second)) if first.is_uppercase() && !second.is_uppercase() => first
            .to_lowercase()
            .chain(trimmed[first.len_utf8()..].chars())
            .collect(),
        _ => trimmed.to_string(),
    }
}

pub fn order_statement(a: &str, relation: ProbeSubtype, b: &str) -> String {
    format!(
        "In the video, {} happens {relation} {}.",
        event_phrase(a),
        event_phrase(b)
    )
}

/// The middle event is `floor(n/2)`. For each category and side a partner
/// at an admissible hop distance is chosen; each (earlier A, later B) pair
/// yields four statements labelled yes, no, yes, no.
pub fn build_order_probes(record: &VideoRecord, video_path: &str, seed: u64) -> Result<ProbeSet, TooFewCaptions> {
    let n = record.scenes.len();
    if n < DEFAULT_MIN_PROBE_CAPTIONS {
        return Err(TooFewCaptions {
            video_id: record.video_id.clone(),
            captions: n,
            required: DEFAULT_MIN_PROBE_CAPTIONS,
        });
    }
    let m = n / 2;
    let mut set = ProbeSet::default();
    for category in ProbeCategory::ALL {
        for subtype in ProbeSubtype::ALL {
            let candidates: Vec<usize> = (0..n)
                .filter(|&j| match subtype {
                    ProbeSubtype::Before => j < m,
                    ProbeSubtype::After => j > m,
                })
                .filter(|&j| category.admits(j.abs_diff(m)))
                .collect();
            let tag = format!("{category}/{subtype}");
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(split_seed(seed, &record.video_id), &tag));
            let Some(&partner) = candidates.choose(&mut rng) else {
                set.coverage.push(CoverageEntry {
                    video_id: record.video_id.clone(),
                    category,
                    subtype,
                    present: false,
                });
                continue;
            };
            set.coverage.push(CoverageEntry {
                video_id: record.video_id.clone(),
                category,
                subtype,
                present: true,
            });
            let (early, late) = (m.min(partner), m.max(partner));
            let (a, b) = (&record.scenes[early], &record.scenes[late]);
            let hops = late - early;
            let separation = (b.midpoint_s() - a.midpoint_s()).abs();
            let (lo, hi) = category.nominal_bin();
            if !(lo..hi).contains(&separation) {
                set.warnings.push(format!(
                    "{}: {tag} pair separated by {separation:.1}s, outside the nominal {lo}-{hi}s bin",
                    record.video_id
                ));
            }
            let pair_id = content_id(&[&record.video_id, &tag]);
            let texts = [
                (
                    order_statement(&a.caption, ProbeSubtype::Before, &b.caption),
                    YesNo::Yes,
                ),
                (order_statement(&a.caption, ProbeSubtype::After, &b.caption), YesNo::No),
                (order_statement(&b.caption, ProbeSubtype::After, &a.caption), YesNo::Yes),
                (order_statement(&b.caption, ProbeSubtype::Before, &a.caption), YesNo::No),
            ];
            for (k, (statement, label)) in texts.into_iter().enumerate() {
                set.statements.push(OrderStatement {
                    id: content_id(&[&pair_id, &k.to_string()]),
                    video_path: video_path.to_string(),
                    pair_id: pair_id.clone(),
                    category,
                    subtype,
                    statement,
                    label,
                    hop_distance: hops,
                    time_separation_s: separation,
                });
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scene;
    use crate::jsonl::{parse_jsonl, to_jsonl_string};
    use crate::llmclient::Client;
    use crate::permute::make_reverse;
    use crate::preprocess::{build_composite_caption, ClipSpec};
    use crate::promptkit::TemplateSet;
    use proptest::prelude::*;

    fn video(id: &str, n: usize, scene_s: f64) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            media_path: String::new(),
            duration_s: scene_s * n as f64,
            scenes: (0..n)
                .map(|i| Scene {
                    index: i,
                    start_s: scene_s * i as f64,
                    end_s: scene_s * (i + 1) as f64,
                    caption: format!("Event {} occurs.", (b'A' + i as u8) as char),
                })
                .collect(),
        }
    }

    fn bench(rec: &VideoRecord) -> Vec<BenchmarkItem> {
        let n = rec.scenes.len();
        let clip = ClipSpec {
            video_id: rec.video_id.clone(),
            kept_scene_indices: (0..n).collect(),
            trim_end_s: rec.duration_s,
            clip_duration_s: rec.duration_s,
            over_budget: false,
        };
        let perm = make_reverse(&clip).unwrap();
        let original = build_composite_caption(rec, &clip.kept_scene_indices).unwrap();
        let permuted = build_composite_caption(rec, &perm.scene_order(&clip)).unwrap();
        let client = Client::mock();
        let templates = TemplateSet::builtin();
        let gen = Generator {
            client: &client,
            templates: &templates,
            model_id: "mock",
        };
        let inputs = BenchInputs {
            original: &original,
            original_path: "o.mp4",
            permuted: Some((&perm, &permuted, "r.mp4")),
        };
        build_mcqa_items(&inputs, &gen).unwrap().records
    }

    #[test]
    fn normal_answer_is_true_successor_and_shuffled_is_rekeyed() {
        let rec = video("v", 3, 10.0);
        let items = bench(&rec);
        let normal: Vec<_> = items.iter().filter(|i| i.split == Split::Normal).collect();
        let shuffled: Vec<_> = items.iter().filter(|i| i.split == Split::Shuffled).collect();
        assert_eq!(normal.len(), 2);
        assert_eq!(normal[0].options[normal[0].answer_index], "Event B occurs.");
        assert!(shuffled.iter().all(|i| i.perm_ref.is_some() && i.video_path == "r.mp4"));
        // Under the reversal the successor of A is C.
        let s0 = shuffled.iter().find(|s| s.question == normal[0].question).unwrap();
        assert_eq!(s0.options, normal[0].options);
        assert_eq!(s0.options[s0.answer_index], "Event C occurs.");
        assert_ne!(s0.answer_index, normal[0].answer_index);
    }

    #[test]
    fn benchmark_jsonl_schema() {
        let items = bench(&video("v", 3, 10.0));
        let text = to_jsonl_string(&items);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            [
                "id",
                "video_path",
                "split",
                "question",
                "options",
                "answer_index",
                "perm_ref"
            ]
            .into()
        );
        assert_eq!(parse_jsonl::<BenchmarkItem>(&text, "t").unwrap(), items);
    }

    #[test]
    fn probe_selection() {
        let short: Vec<_> = (0..5).map(|i| video(&format!("s{i}"), 3, 10.0)).collect();
        assert!(select_probe_videos(&short, 500, 4, 0).is_empty());
        let mut mixed = short.clone();
        mixed.extend((0..6).map(|i| video(&format!("l{i}"), 5, 10.0)));
        assert_eq!(select_probe_videos(&mixed, 500, 4, 0).len(), 6);
        let a = select_probe_videos(&mixed, 3, 4, 9);
        assert_eq!(a.len(), 3);
        assert_eq!(a, select_probe_videos(&mixed, 3, 4, 9));
    }

    #[test]
    fn five_captions_near_before() {
        let rec = video("v", 5, 15.0);
        let set = build_order_probes(&rec, "v.mp4", 0).unwrap();
        let near_before: Vec<_> = set
            .statements
            .iter()
            .filter(|s| s.category == ProbeCategory::Near && s.subtype == ProbeSubtype::Before)
            .collect();
        assert_eq!(near_before.len(), 4);
        assert_eq!(
            near_before.iter().map(|s| s.label).collect::<Vec<_>>(),
            [YesNo::Yes, YesNo::No, YesNo::Yes, YesNo::No]
        );
        assert_eq!(
            near_before[0].statement,
            "In the video, event B occurs happens before event C occurs."
        );
        assert_eq!(near_before[0].hop_distance, 1);
        assert_eq!(near_before[0].time_separation_s, 15.0);
    }

    #[test]
    fn four_captions_lack_very_far_after() {
        let set = build_order_probes(&video("v", 4, 10.0), "v.mp4", 0).unwrap();
        let cov = set
            .coverage
            .iter()
            .find(|c| c.category == ProbeCategory::VeryFar && c.subtype == ProbeSubtype::After)
            .unwrap();
        assert!(!cov.present);
        assert!(!set
            .statements
            .iter()
            .any(|s| s.category == ProbeCategory::VeryFar && s.subtype == ProbeSubtype::After));
        assert!(build_order_probes(&video("v", 3, 10.0), "v.mp4", 0).is_err());
    }

    #[test]
    fn seven_captions_give_eight_per_category() {
        let set = build_order_probes(&video("v", 7, 12.0), "v.mp4", 3).unwrap();
        for c in ProbeCategory::ALL {
            assert_eq!(set.statements.iter().filter(|s| s.category == c).count(), 8);
        }
        assert!(set.coverage.iter().all(|c| c.present));
    }

    #[test]
    fn separation_outside_bin_warns() {
        let set = build_order_probes(&video("v", 5, 5.0), "v.mp4", 0).unwrap();
        assert!(set.warnings.iter().any(|w| w.contains("near/before")));
    }

    #[test]
    fn probe_jsonl_schema() {
        let set = build_order_probes(&video("v", 5, 15.0), "v.mp4", 0).unwrap();
        let text = to_jsonl_string(&set.statements);
        assert!(text.contains("\"category\":\"moderately_far\""));
        assert!(text.contains("\"label\":\"yes\""));
        assert_eq!(parse_jsonl::<OrderStatement>(&text, "t").unwrap(), set.statements);
    }

    #[test]
    fn event_phrases() {
        assert_eq!(event_phrase("A man opens the door."), "a man opens the door");
        assert_eq!(event_phrase("TV turns on"), "TV turns on");
    }

    proptest! {
        #[test]
        fn pairs_are_swap_closed_with_complementary_labels(n in 4usize..12, seed in any::<u64>(), len in 1.0f64..40.0) {
            let rec = video("p", n, len);
            let set = build_order_probes(&rec, "p.mp4", seed).unwrap();
            prop_assert_eq!(set.clone(), build_order_probes(&rec, "p.mp4", seed).unwrap());
            let pairs: BTreeSet<&str> = set.statements.iter().map(|s| s.pair_id.as_str()).collect();
            for pid in pairs {
                let group: Vec<_> = set.statements.iter().filter(|s| s.pair_id == pid).collect();
                prop_assert_eq!(group.len(), 4);
                prop_assert_eq!(group.iter().filter(|s| s.label == YesNo::Yes).count(), 2);
                prop_assert!(group[0].category.admits(group[0].hop_distance));
                // Statement k and k+2 say the same thing with A and B swapped.
                prop_assert_eq!(group[0].label, group[2].label);
                prop_assert_eq!(group[1].label, group[3].label);
            }
        }
    }
}
