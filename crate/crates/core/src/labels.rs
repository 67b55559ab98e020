//! Persistent object labels over a stream of keyframes.
//!
//! Segmentation runs pairwise between keyframes and knows nothing about
//! identity, so this module keeps object labels stable over time: tracks vote
//! for the labels they carried in recent keyframes (weighted toward the
//! present), whole segmentation models adopt the majority vote of their member
//! tracks, unconvincing votes spawn fresh labels, and newly triangulated
//! points inherit labels from their nearest labeled neighbors.

use crate::geometry::Point3;
use crate::seg::SegmentationResult;
use crate::{Label, TrackId};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LabelError {
    #[error("track {0} not seen in any window keyframe")]
    TrackUnseen(TrackId),
    #[error("label score has no terms")]
    EmptyScore,
    #[error("no labeled points to assign from")]
    NoLabeledPoints,
}

/// One selected keyframe with its triangulated, labeled points.
#[derive(Debug, Clone)]
pub struct KeyFrame {
    pub frame_id: usize,
    pub timestamp: f64,
    /// Camera-frame position and persistent label per track.
    pub points: BTreeMap<TrackId, (Point3, Label)>,
}

/// The most recent keyframes, oldest first. Voting looks at the newest
/// entries; the capacity covers the current keyframe plus its predecessors.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    keyframes: VecDeque<KeyFrame>,
    capacity: usize,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 2, "window must hold at least two keyframes");
        Self {
            keyframes: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, kf: KeyFrame) {
        debug_assert!(
            self.keyframes.back().is_none_or(|b| b.frame_id < kf.frame_id),
            "keyframes must arrive in frame order"
        );
        self.keyframes.push_back(kf);
        while self.keyframes.len() > self.capacity {
            self.keyframes.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn last(&self) -> Option<&KeyFrame> {
        self.keyframes.back()
    }

    /// Keyframes newest-first, the order in which vote weights apply.
    pub fn newest_first(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.iter().rev()
    }
}

/// Accumulated vote weights per label, plus how recently each label was seen
/// (0 = newest keyframe) for breaking ties toward the present.
#[derive(Debug, Clone, Default)]
pub struct LabelScore {
    pub terms: BTreeMap<Label, f64>,
    recency: BTreeMap<Label, usize>,
}

/// Outcome of resolving a label vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Existing(Label),
    NewObject,
}

/// Keyframe selection thresholds.
#[derive(Debug, Clone)]
pub struct KeyframeParams {
    /// A keyframe at least every this many frames.
    pub interval_frames: usize,
    /// A keyframe as soon as fewer tracks than this match the previous one.
    pub min_matches: usize,
}

/// Label voting and assignment knobs.
#[derive(Debug, Clone)]
pub struct LabelParams {
    /// Vote weight per window keyframe, newest first, strictly decreasing.
    pub weights: Vec<f64>,
    /// Total vote weight below which a track's history is unconvincing.
    pub new_object_threshold: f64,
    /// Neighbor count for label assignment of newly triangulated points.
    pub knn_k: usize,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            weights: vec![0.8, 0.6, 0.4, 0.2],
            new_object_threshold: 0.3,
            knn_k: 5,
        }
    }
}

/// Whether `frame_id` must become a keyframe: enough frames elapsed since the
/// last one, or too few of `tracks` still match it.
pub fn is_keyframe(
    frame_id: usize,
    tracks: &BTreeSet<TrackId>,
    last: &KeyFrame,
    params: &KeyframeParams,
) -> bool {
    if frame_id.saturating_sub(last.frame_id) >= params.interval_frames {
        return true;
    }
    let shared = tracks.iter().filter(|t| last.points.contains_key(t)).count();
    shared < params.min_matches
}

/// Tallies the labels `track_id` carried across the window keyframes, the
/// newest keyframe contributing `weights[0]` and so on toward the past.
pub fn vote_label(
    track_id: TrackId,
    window: &SlidingWindow,
    weights: &[f64],
) -> Result<LabelScore, LabelError> {
    let mut score = LabelScore::default();
    for (rank, kf) in window.newest_first().take(weights.len()).enumerate() {
        if let Some((_, label)) = kf.points.get(&track_id) {
            *score.terms.entry(*label).or_insert(0.0) += weights[rank];
            score.recency.entry(*label).or_insert(rank);
        }
    }
    if score.terms.is_empty() {
        return Err(LabelError::TrackUnseen(track_id));
    }
    Ok(score)
}

/// Picks the label with the largest accumulated weight, ties going to the
/// label seen most recently (then the smaller label for full determinism).
/// A winning weight below the threshold means the history is too weak and the
/// caller should treat the subject as a new object.
pub fn resolve_label(score: &LabelScore, new_object_threshold: f64) -> Result<Resolution, LabelError> {
    let best = score
        .terms
        .iter()
        .map(|(label, weight)| (label, weight, score.recency[label]))
        .max_by(|a, b| {
            a.1.partial_cmp(b.1)
                .expect("weights are finite")
                .then(b.2.cmp(&a.2)) // smaller recency rank (newer) wins
                .then(b.0.cmp(a.0)) // then smaller label
        })
        .ok_or(LabelError::EmptyScore)?;
    if *best.1 >= new_object_threshold {
        Ok(Resolution::Existing(*best.0))
    } else {
        Ok(Resolution::NewObject)
    }
}

/// Labels newly triangulated points by the majority among their k nearest
/// labeled neighbors. A split vote falls back to the single nearest neighbor;
/// exact distance ties break toward the smaller track id.
pub fn assign_new_points(
    new_points: &[(TrackId, Point3)],
    labeled: &KeyFrame,
    k: usize,
) -> Result<Vec<(TrackId, Label)>, LabelError> {
    if labeled.points.is_empty() {
        return Err(LabelError::NoLabeledPoints);
    }
    let mut out = Vec::with_capacity(new_points.len());
    for (track_id, p) in new_points {
        let mut neighbors: Vec<(f64, TrackId, Label)> = labeled
            .points
            .iter()
            .map(|(id, (q, label))| ((p - q).norm(), *id, *label))
            .collect();
        neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        neighbors.truncate(k.max(1));
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for (_, _, label) in &neighbors {
            *counts.entry(*label).or_insert(0) += 1;
        }
        let top = counts.values().copied().max().expect("k >= 1 neighbors");
        let leaders: Vec<Label> = counts
            .iter()
            .filter(|(_, &c)| c == top)
            .map(|(l, _)| *l)
            .collect();
        let label = if leaders.len() == 1 {
            leaders[0]
        } else {
            // Majority tie: the nearest neighbor overall decides.
            neighbors[0].2
        };
        out.push((*track_id, label));
    }
    Ok(out)
}

/// Allocator and cumulative membership book for persistent labels.
///
/// Each track is counted toward one label: the one holding the majority of
/// its segmentation-confirmed assignments over the run. The label that is
/// home to the most tracks is taken as the static background. Two details
/// matter on scenes where a foreground object carries half the image:
/// fallback placements (history and nearest-neighbor) never enter the
/// census, and one-off model memberships don't either — ambiguous tracks
/// near the focus of expansion fluke into the foreground's model often
/// enough that counting every visit would eventually let the foreground
/// outgrow the background.
#[derive(Debug, Clone, Default)]
pub struct LabelRegistry {
    next: Label,
    /// Per track, how many keyframes each label's model claimed it.
    visits: BTreeMap<TrackId, BTreeMap<Label, usize>>,
    known: BTreeSet<Label>,
}

impl LabelRegistry {
    pub fn allocate(&mut self) -> Label {
        let label = self.next;
        self.next += 1;
        self.known.insert(label);
        label
    }

    pub fn note_member(&mut self, label: Label, track: TrackId) {
        self.known.insert(label);
        *self.visits.entry(track).or_default().entry(label).or_insert(0) += 1;
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.known.iter().copied()
    }

    /// Tracks whose model-confirmed keyframes land on `label` more often
    /// than on any other label (ties to the smaller label).
    pub fn member_count(&self, label: Label) -> usize {
        self.visits
            .values()
            .filter(|counts| Self::home(counts) == Some(label))
            .count()
    }

    fn home(counts: &BTreeMap<Label, usize>) -> Option<Label> {
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(label, _)| *label)
    }

    /// The label whose model has confirmed `track` most often, if any.
    pub fn home_of(&self, track: TrackId) -> Option<Label> {
        self.visits.get(&track).and_then(Self::home)
    }

    /// Every track's home label, for tracks with at least one confirmation.
    pub fn homes(&self) -> BTreeMap<TrackId, Label> {
        self.visits
            .iter()
            .filter_map(|(t, counts)| Self::home(counts).map(|l| (*t, l)))
            .collect()
    }

    /// The label that is home to the most tracks (ties to the smaller
    /// label), interpreted as the static background.
    pub fn background_label(&self) -> Option<Label> {
        let mut homes: BTreeMap<Label, usize> = BTreeMap::new();
        for counts in self.visits.values() {
            if let Some(label) = Self::home(counts) {
                *homes.entry(label).or_insert(0) += 1;
            }
        }
        homes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(label, _)| label)
    }
}

/// Binds the current segmentation to persistent labels.
///
/// Every model votes through its member tracks' window history and adopts the
/// majority resolution; models whose members mostly have no usable history
/// spawn a fresh label. Tracks outside every model (segmentation outliers and
/// brand-new points) vote individually, falling back to nearest-neighbor
/// assignment against the points labeled so far in this keyframe.
pub fn reconcile_segmentation(
    frame_id: usize,
    timestamp: f64,
    points: &BTreeMap<TrackId, Point3>,
    seg: &SegmentationResult,
    window: &SlidingWindow,
    registry: &mut LabelRegistry,
    params: &LabelParams,
) -> KeyFrame {
    let mut labeled: BTreeMap<TrackId, (Point3, Label)> = BTreeMap::new();

    // Tally each model's member votes over the window.
    let mut tallies: Vec<(BTreeMap<Label, usize>, usize)> = Vec::with_capacity(seg.models.len());
    for model in &seg.models {
        let mut existing: BTreeMap<Label, usize> = BTreeMap::new();
        let mut fresh_votes = 0usize;
        for track in &model.inliers {
            match vote_label(*track, window, &params.weights) {
                Ok(score) => match resolve_label(&score, params.new_object_threshold) {
                    Ok(Resolution::Existing(label)) => *existing.entry(label).or_insert(0) += 1,
                    Ok(Resolution::NewObject) => fresh_votes += 1,
                    Err(LabelError::EmptyScore) => unreachable!("vote_label never returns empty"),
                    Err(_) => {}
                },
                Err(LabelError::TrackUnseen(_)) => {} // no history, no vote
                Err(_) => {}
            }
        }
        tallies.push((existing, fresh_votes));
    }

    // Each persistent label belongs to at most one model: claims are granted
    // by descending vote count, so when two motions compete for one label the
    // better-supported claim wins and the loser falls back to its next-best
    // label (or a fresh one). Without exclusivity a transient mismatch can
    // fold two objects into one label and silently kill the other trajectory.
    let mut claims: Vec<(usize, usize, Label)> = tallies
        .iter()
        .enumerate()
        .flat_map(|(m, (tally, _))| tally.iter().map(move |(l, c)| (*c, m, *l)))
        .collect();
    claims.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut model_labels: Vec<Option<Label>> = vec![None; seg.models.len()];
    let mut claimed: BTreeSet<Label> = BTreeSet::new();
    for (count, m, label) in claims {
        // A model keeps an existing label only while it out-votes the model's
        // own fresh-object votes, mirroring resolve_label's spawn rule.
        if model_labels[m].is_none() && !claimed.contains(&label) && count >= tallies[m].1 {
            model_labels[m] = Some(label);
            claimed.insert(label);
        }
    }

    for (model, slot) in seg.models.iter().zip(&model_labels) {
        let label = slot.unwrap_or_else(|| registry.allocate());
        for track in &model.inliers {
            let p = points
                .get(track)
                .expect("segmentation covers only current keyframe tracks");
            labeled.insert(*track, (*p, label));
            registry.note_member(label, *track);
        }
    }

    // Leftovers: outlier-flagged tracks and points the segmentation never saw.
    let mut needs_knn: Vec<(TrackId, Point3)> = Vec::new();
    for (track, p) in points {
        if labeled.contains_key(track) {
            continue;
        }
        match vote_label(*track, window, &params.weights) {
            Ok(score) => match resolve_label(&score, params.new_object_threshold) {
                Ok(Resolution::Existing(label)) => {
                    labeled.insert(*track, (*p, label));
                }
                _ => needs_knn.push((*track, *p)),
            },
            Err(_) => needs_knn.push((*track, *p)),
        }
    }
    if !needs_knn.is_empty() {
        let partial = KeyFrame {
            frame_id,
            timestamp,
            points: labeled.clone(),
        };
        match assign_new_points(&needs_knn, &partial, params.knn_k) {
            Ok(assigned) => {
                for (track, label) in assigned {
                    let p = points[&track];
                    labeled.insert(track, (p, label));
                }
            }
            Err(LabelError::NoLabeledPoints) => {
                // Nothing labeled at all (degenerate frame): one fresh label.
                let label = registry.allocate();
                for (track, p) in needs_knn {
                    labeled.insert(track, (p, label));
                }
            }
            Err(_) => unreachable!("assign_new_points only fails on emptiness"),
        }
    }

    KeyFrame {
        frame_id,
        timestamp,
        points: labeled,
    }
}
