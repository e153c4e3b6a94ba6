//! Scene-order hard negatives: coherence-preserving shuffles and full
//! reversals of a clip's kept scenes. Scenes are always moved whole.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{content_id, split_seed};
use crate::preprocess::ClipSpec;

/// Default shuffled share, 2617 / (2617 + 2394).
pub const REFERENCE_SHUFFLE_FRACTION: f64 = 2617.0 / (2617.0 + 2394.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermKind {
    Shuffled,
    Reversed,
}

impl fmt::Display for PermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shuffled => "shuffled",
            Self::Reversed => "reversed",
        })
    }
}

/// `pi[k]` is the position (within the clip's kept scenes) of the scene
/// shown at output position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenePermutation {
    pub video_id: String,
    pub kind: PermKind,
    pub pi: Vec<usize>,
    pub seed: u64,
}

impl ScenePermutation {
    pub fn id(&self) -> String {
        let pi: Vec<String> = self.pi.iter().map(usize::to_string).collect();
        content_id(&[&self.video_id, &self.kind.to_string(), &pi.join(",")])
    }

    /// Source scene indices in presentation order.
    pub fn scene_order(&self, clip: &ClipSpec) -> Vec<usize> {
        apply(&self.pi, &clip.kept_scene_indices)
    }

    pub fn inverse(&self) -> Vec<usize> {
        inverse(&self.pi)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PermuteError {
    #[error("clip {video_id} has {scenes} scenes; shuffling needs at least 3 (use a reversal)")]
    NotShuffleable { video_id: String, scenes: usize },
    #[error("clip {video_id} has {scenes} scene(s); reordering needs at least 2")]
    TooFewScenes { video_id: String, scenes: usize },
    #[error("shuffle fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
}

/// `out[k] = items[pi[k]]`.
pub fn apply<T: Clone>(pi: &[usize], items: &[T]) -> Vec<T> {
    pi.iter().map(|&i| items[i].clone()).collect()
}

pub fn inverse(pi: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; pi.len()];
    for (k, &i) in pi.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

pub fn is_identity(pi: &[usize]) -> bool {
    pi.iter().enumerate().all(|(k, &i)| k == i)
}

pub fn is_reversal(pi: &[usize]) -> bool {
    let n = pi.len();
    pi.iter().enumerate().all(|(k, &i)| i == n - 1 - k)
}

pub fn is_bijection(pi: &[usize]) -> bool {
    let mut seen = vec![false; pi.len()];
    pi.iter()
        .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

fn fisher_yates(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut pi: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        pi.swap(i, j);
    }
    pi
}

/// Uniform over permutations that are neither the identity nor the
/// reversal, via Fisher-Yates with rejection. For n >= 3 at least 4 of n!
/// orders are admissible, so the expected number of draws is at most 1.5.
pub fn make_shuffle(clip: &ClipSpec, seed: u64) -> Result<ScenePermutation, PermuteError> {
    let n = clip.scene_count();
    if n < 3 {
        return Err(PermuteError::NotShuffleable {
            video_id: clip.video_id.clone(),
            scenes: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = loop {
        let candidate = fisher_yates(&mut rng, n);
        if !is_identity(&candidate) && !is_reversal(&candidate) {
            break candidate;
        }
    };
    Ok(ScenePermutation {
        video_id: clip.video_id.clone(),
        kind: PermKind::Shuffled,
        pi,
        seed,
    })
}

pub fn make_reverse(clip: &ClipSpec) -> Result<ScenePermutation, PermuteError> {
    let n = clip.scene_count();
    if n < 2 {
        return Err(PermuteError::TooFewScenes {
            video_id: clip.video_id.clone(),
            scenes: n,
        });
    }
    Ok(ScenePermutation {
        video_id: clip.video_id.clone(),
        kind: PermKind::Reversed,
        pi: (0..n).rev().collect(),
        seed: 0,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePlan {
    pub permutations: Vec<ScenePermutation>,
    pub shuffled: usize,
    pub reversed: usize,
}

/// Assigns one permutation per eligible clip. Two-scene clips are always
/// reversed; longer clips are shuffled with probability `shuffle_fraction`,
/// drawn from a per-video seed so the plan does not depend on clip order.
pub fn plan_negative_set(clips: &[ClipSpec], shuffle_fraction: f64, seed: u64) -> Result<NegativePlan, PermuteError> {
    if !(0.0..=1.0).contains(&shuffle_fraction) {
        return Err(PermuteError::InvalidFraction(shuffle_fraction));
    }
    let mut plan = NegativePlan::default();
    let mut sorted: Vec<&ClipSpec> = clips.iter().filter(|c| c.scene_count() >= 2).collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for clip in sorted {
        let video_seed = split_seed(seed, &clip.video_id);
        let shuffle = clip.scene_count() >= 3 && {
            let mut coin = ChaCha8Rng::seed_from_u64(split_seed(video_seed, "kind"));
            coin.gen::<f64>() < shuffle_fraction
        };
        let perm = if shuffle {
            plan.shuffled += 1;
            make_shuffle(clip, video_seed)?
        } else {
            plan.reversed += 1;
            make_reverse(clip)?
        };
        plan.permutations.push(perm);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn clip(id: &str, n: usize) -> ClipSpec {
        ClipSpec {
            video_id: id.into(),
            kept_scene_indices: (0..n).collect(),
            trim_end_s: 10.0 * n as f64,
            clip_duration_s: 10.0 * n as f64,
            over_budget: false,
        }
    }

    /// All permutations of 0..n by Heap's algorithm, independent of the
    /// sampler under test.
    fn all_perms(n: usize) -> Vec<Vec<usize>> {
        fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(a.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, a, out);
                let j = if k.is_multiple_of(2) { i } else { 0 };
                a.swap(j, k - 1);
            }
        }
        let mut out = Vec::new();
        heap(n, &mut (0..n).collect(), &mut out);
        out
    }

    #[test]
    fn three_scene_shuffles_land_in_the_admissible_four() {
        let admissible: BTreeSet<Vec<usize>> = all_perms(3)
            .into_iter()
            .filter(|p| p != &vec![0, 1, 2] && p != &vec![2, 1, 0])
            .collect();
        assert_eq!(admissible.len(), 4);
        let mut hit = BTreeSet::new();
        for seed in 0..200 {
            let p = make_shuffle(&clip("v", 3), seed).unwrap();
            assert!(admissible.contains(&p.pi), "{:?}", p.pi);
            hit.insert(p.pi);
        }
        assert_eq!(hit, admissible);
    }

    #[test]
    fn two_scenes_not_shuffleable() {
        assert!(matches!(
            make_shuffle(&clip("v", 2), 1),
            Err(PermuteError::NotShuffleable { scenes: 2, .. })
        ));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let c = clip("v", 6);
        assert_eq!(make_shuffle(&c, 99).unwrap(), make_shuffle(&c, 99).unwrap());
    }

    #[test]
    fn reversals() {
        assert_eq!(make_reverse(&clip("v", 2)).unwrap().pi, vec![1, 0]);
        let r = make_reverse(&clip("v", 4)).unwrap();
        assert_eq!(r.pi, vec![3, 2, 1, 0]);
        assert_eq!(r.kind, PermKind::Reversed);
        assert!(is_identity(&apply(&r.pi, &r.pi)));
        assert!(make_reverse(&clip("v", 1)).is_err());
    }

    #[test]
    fn shuffle_is_roughly_uniform() {
        // 4 admissible orders for n=3; each should get ~25% of draws.
        let mut counts = std::collections::BTreeMap::new();
        let draws = 4000;
        for seed in 0..draws {
            *counts.entry(make_shuffle(&clip("v", 3), seed).unwrap().pi).or_insert(0) += 1;
        }
        for c in counts.values() {
            let share = *c as f64 / draws as f64;
            assert!((share - 0.25).abs() < 0.03, "share {share}");
        }
    }

    #[test]
    fn plan_fraction_extremes() {
        let clips: Vec<ClipSpec> = (0..30).map(|i| clip(&format!("v{i:02}"), 3)).collect();
        let all = plan_negative_set(&clips, 1.0, 5).unwrap();
        assert_eq!((all.shuffled, all.reversed), (30, 0));
        assert!(all.permutations.iter().all(|p| p.kind == PermKind::Shuffled));
        let none = plan_negative_set(&clips, 0.0, 5).unwrap();
        assert_eq!((none.shuffled, none.reversed), (0, 30));
    }

    #[test]
    fn two_scene_clips_always_reverse() {
        let clips = vec![clip("a", 2), clip("b", 2)];
        let plan = plan_negative_set(&clips, 1.0, 0).unwrap();
        assert_eq!(plan.reversed, 2);
    }

    #[test]
    fn reference_ratio_is_approximated() {
        let clips: Vec<ClipSpec> = (0..5011).map(|i| clip(&format!("v{i}"), 4)).collect();
        let plan = plan_negative_set(&clips, REFERENCE_SHUFFLE_FRACTION, 11).unwrap();
        let share = plan.shuffled as f64 / 5011.0;
        assert!((REFERENCE_SHUFFLE_FRACTION - 0.5222).abs() < 1e-3);
        assert!((share - REFERENCE_SHUFFLE_FRACTION).abs() < 0.03, "share {share}");
    }

    #[test]
    fn plan_ignores_clip_order_and_rejects_bad_fraction() {
        let mut clips: Vec<ClipSpec> = (0..10).map(|i| clip(&format!("v{i}"), 3 + i % 3)).collect();
        let a = plan_negative_set(&clips, 0.5, 3).unwrap();
        clips.reverse();
        assert_eq!(a, plan_negative_set(&clips, 0.5, 3).unwrap());
        assert!(plan_negative_set(&clips, 1.5, 3).is_err());
    }

    #[test]
    fn jsonl_shape() {
        let p = make_reverse(&clip("v", 2)).unwrap();
        let line = serde_json::to_string(&p).unwrap();
        assert_eq!(line, r#"{"video_id":"v","kind":"reversed","pi":[1,0],"seed":0}"#);
    }
}
