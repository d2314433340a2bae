//! Annotated narrative speech corpora: ingestion, validation, and RL curation.
//!
//! A corpus is stored as JSONL — one line record per file line, grouped into
//! stories by `story_id`. Story lines are ordinary text (narration or
//! dialogue); lines that carry an [`Annotation`] have matching audio and can
//! serve as evaluation targets.
//!
//! The on-disk representation is canonical: loading a file produced by
//! [`Corpus::to_jsonl`] and serializing it again yields byte-identical output,
//! which keeps run inputs content-addressable.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward;

/// Default lower bound (seconds) for RL duration filtering.
pub const DEFAULT_MIN_DURATION_S: f64 = 1.0;
/// Default upper bound (seconds) for RL duration filtering.
pub const DEFAULT_MAX_DURATION_S: f64 = 45.0;

/// Closed set of intonation contours used by annotations and planner output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intonation {
    Flat,
    Rising,
    Curved,
    Falling,
}

impl Intonation {
    pub const ALL: [Intonation; 4] = [
        Intonation::Flat,
        Intonation::Rising,
        Intonation::Curved,
        Intonation::Falling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Intonation::Flat => "flat",
            Intonation::Rising => "rising",
            Intonation::Curved => "curved",
            Intonation::Falling => "falling",
        }
    }
}

impl fmt::Display for Intonation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intonation {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Intonation::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or(())
    }
}

/// Closed set of rhythm styles used by annotations and planner output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rhythm {
    Brisk,
    Heavy,
    LowPaced,
    HighEnergy,
    Relaxed,
    Tense,
}

impl Rhythm {
    pub const ALL: [Rhythm; 6] = [
        Rhythm::Brisk,
        Rhythm::Heavy,
        Rhythm::LowPaced,
        Rhythm::HighEnergy,
        Rhythm::Relaxed,
        Rhythm::Tense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rhythm::Brisk => "brisk",
            Rhythm::Heavy => "heavy",
            Rhythm::LowPaced => "low-paced",
            Rhythm::HighEnergy => "high-energy",
            Rhythm::Relaxed => "relaxed",
            Rhythm::Tense => "tense",
        }
    }
}

impl fmt::Display for Rhythm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rhythm {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Rhythm::ALL.into_iter().find(|v| v.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

/// Per-utterance annotation attached to target-capable lines.
///
/// `duration` is optional at ingestion time (some upstream exports omit it);
/// RL curation requires it and fails loudly when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub expressive_score: f64,
    pub tts_difficulty: f64,
    pub intonation: Intonation,
    pub rhythm: Rhythm,
    pub emotion: String,
    pub recording_condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paralinguistic_vocalizations: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sound_events: Option<String>,
    pub bgm_present: bool,
    pub speaker_gender: Gender,
    pub speaker_age: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_context: Option<String>,
    pub utterance_start: f64,
    pub utterance_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub audio_ref: String,
}

/// One narrative line within a story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryLine {
    pub line_index: usize,
    pub speaker_role: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Annotation>,
}

impl StoryLine {
    /// Whether this line can serve as an evaluation target (i.e. it carries
    /// an annotation and thus has matching audio and a human score).
    pub fn is_target_capable(&self) -> bool {
        self.annotation.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub story_id: String,
    pub lines: Vec<StoryLine>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub stories: Vec<Story>,
}

/// Wire record: one JSONL line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    story_id: String,
    line_index: usize,
    speaker_role: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotation: Option<Annotation>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: invariant violation: {field} = {value}")]
    InvariantViolation {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("story {story_id} line {line_index}: annotated line has no duration")]
    MissingDuration { story_id: String, line_index: usize },
    #[error("corpus contains no annotated lines")]
    EmptyCorpus,
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    /// Parse and validate a JSONL corpus.
    ///
    /// Validation enforces the full schema: contiguous per-story
    /// `line_index` starting at 0, stories not split across the file,
    /// score ranges, positive durations, ordered utterance boundaries, and
    /// non-empty free-text fields (free text is trimmed, otherwise kept
    /// verbatim). Blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut stories: Vec<Story> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let rec: LineRecord =
                serde_json::from_str(raw).map_err(|e| CorpusError::MalformedRecord {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            let line = validate_record(rec, lineno, &mut stories, &mut seen)?;
            stories
                .last_mut()
                .expect("validate_record ensures a current story")
                .lines
                .push(line);
        }
        Ok(Corpus { stories })
    }

    /// Canonical JSONL serialization (inverse of [`Corpus::from_jsonl`]).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for story in &self.stories {
            for line in &story.lines {
                let rec = LineRecord {
                    story_id: story.story_id.clone(),
                    line_index: line.line_index,
                    speaker_role: line.speaker_role.clone(),
                    text: line.text.clone(),
                    annotation: line.annotation.clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("corpus records serialize"));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn story(&self, story_id: &str) -> Option<&Story> {
        self.stories.iter().find(|s| s.story_id == story_id)
    }

    pub fn story_count(&self) -> usize {
        self.stories.len()
    }

    pub fn line_count(&self) -> usize {
        self.stories.iter().map(|s| s.lines.len()).sum()
    }

    pub fn annotated_count(&self) -> usize {
        self.annotated().count()
    }

    /// Iterate over all target-capable lines, in corpus order.
    pub fn annotated(&self) -> impl Iterator<Item = (&Story, &StoryLine)> {
        self.stories.iter().flat_map(|s| {
            s.lines
                .iter()
                .filter(|l| l.is_target_capable())
                .map(move |l| (s, l))
        })
    }
}

fn validate_record(
    rec: LineRecord,
    lineno: usize,
    stories: &mut Vec<Story>,
    seen: &mut BTreeMap<String, usize>,
) -> Result<StoryLine, CorpusError> {
    let violation = |field: &'static str, value: String| CorpusError::InvariantViolation {
        line: lineno,
        field,
        value,
    };

    let story_id = rec.story_id.trim().to_string();
    if story_id.is_empty() {
        return Err(violation("story_id", "<empty>".into()));
    }

    let is_current = stories.last().is_some_and(|s| s.story_id == story_id);
    if !is_current {
        if seen.contains_key(&story_id) {
            // A story's lines must be contiguous in the file; seeing its id
            // again after another story began means the file is interleaved.
            return Err(violation("story_id", format!("{story_id} (non-contiguous)")));
        }
        seen.insert(story_id.clone(), lineno);
        stories.push(Story {
            story_id,
            lines: Vec::new(),
        });
    }
    let story = stories.last_mut().expect("just ensured");

    let expected = story.lines.len();
    if rec.line_index != expected {
        return Err(violation(
            "line_index",
            format!("expected {expected}, got {}", rec.line_index),
        ));
    }

    let speaker_role = rec.speaker_role.trim().to_string();
    if speaker_role.is_empty() {
        return Err(violation("speaker_role", "<empty>".into()));
    }
    let text = rec.text.trim().to_string();
    if text.is_empty() {
        return Err(violation("text", "<empty>".into()));
    }

    let annotation = match rec.annotation {
        None => None,
        Some(a) => Some(validate_annotation(a, lineno)?),
    };

    Ok(StoryLine {
        line_index: rec.line_index,
        speaker_role,
        text,
        annotation,
    })
}

fn validate_annotation(mut a: Annotation, lineno: usize) -> Result<Annotation, CorpusError> {
    let violation = |field: &'static str, value: String| CorpusError::InvariantViolation {
        line: lineno,
        field,
        value,
    };

    let in_score_range = |v: f64| v.is_finite() && (0.0..=5.0).contains(&v);
    if !in_score_range(a.expressive_score) {
        return Err(violation("expressive_score", a.expressive_score.to_string()));
    }
    if !in_score_range(a.tts_difficulty) {
        return Err(violation("tts_difficulty", a.tts_difficulty.to_string()));
    }

    a.emotion = a.emotion.trim().to_string();
    if a.emotion.is_empty() {
        return Err(violation("emotion", "<empty>".into()));
    }
    a.recording_condition = a.recording_condition.trim().to_string();
    if a.recording_condition.is_empty() {
        return Err(violation("recording_condition", "<empty>".into()));
    }
    a.speaker_age = a.speaker_age.trim().to_string();
    if a.speaker_age.is_empty() {
        return Err(violation("speaker_age", "<empty>".into()));
    }
    a.audio_ref = a.audio_ref.trim().to_string();
    if a.audio_ref.is_empty() {
        return Err(violation("audio_ref", "<empty>".into()));
    }
    a.paralinguistic_vocalizations = normalize_optional(a.paralinguistic_vocalizations);
    a.sound_events = normalize_optional(a.sound_events);
    a.refined_context = normalize_optional(a.refined_context);

    if !a.utterance_start.is_finite() || !a.utterance_end.is_finite() || a.utterance_start < 0.0 {
        return Err(violation(
            "utterance_start",
            format!("{}..{}", a.utterance_start, a.utterance_end),
        ));
    }
    if a.utterance_end <= a.utterance_start {
        return Err(violation(
            "utterance_end",
            format!("{} (start {})", a.utterance_end, a.utterance_start),
        ));
    }
    if let Some(d) = a.duration {
        if !d.is_finite() || d <= 0.0 {
            return Err(violation("duration", d.to_string()));
        }
    }
    Ok(a)
}

fn normalize_optional(v: Option<String>) -> Option<String> {
    v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

/// Keep only annotated lines whose audio duration lies in `[min_s, max_s]`
/// (bounds inclusive); out-of-range lines stay in the corpus but lose their
/// annotation, so stories remain intact as context.
///
/// Every annotated line must carry a duration — a missing one is an error,
/// not a silent drop, because RL curation decisions should never be made on
/// absent data.
pub fn filter_for_rl(corpus: &Corpus, min_s: f64, max_s: f64) -> Result<Corpus, CorpusError> {
    let mut out = corpus.clone();
    for story in &mut out.stories {
        for line in &mut story.lines {
            let Some(ann) = &line.annotation else { continue };
            match ann.duration {
                None => {
                    return Err(CorpusError::MissingDuration {
                        story_id: story.story_id.clone(),
                        line_index: line.line_index,
                    })
                }
                Some(d) => {
                    if !(min_s..=max_s).contains(&d) {
                        line.annotation = None;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Resample annotated lines into a score-balanced training corpus.
///
/// Annotated lines are grouped by integer score bucket (see
/// [`crate::reward::bucket`]); `size` samples (default: the number of
/// annotated input lines) are drawn with replacement, split as evenly as
/// possible across the buckets present — every bucket receives `size/k`
/// draws, with the remainder going to the lowest buckets, so per-bucket
/// counts never differ by more than one.
///
/// Sampling duplicates are materialized as extra story replicas whose ids get
/// a `#r<n>` suffix; each replica keeps the full line list for context and
/// carries exactly the annotations drawn into it. Stories with no sampled
/// annotation are dropped. The output is therefore a valid corpus whose
/// annotated multiset is exactly the drawn sample.
pub fn rebalance_by_score(
    corpus: &Corpus,
    seed: u64,
    size: Option<usize>,
) -> Result<Corpus, CorpusError> {
    // (story index, line index) refs per bucket, in deterministic corpus order.
    let mut buckets: BTreeMap<u8, Vec<(usize, usize)>> = BTreeMap::new();
    let mut total = 0usize;
    for (si, story) in corpus.stories.iter().enumerate() {
        for (li, line) in story.lines.iter().enumerate() {
            if let Some(ann) = &line.annotation {
                let b = reward::bucket(ann.expressive_score)
                    .expect("validated scores are finite");
                buckets.entry(b).or_default().push((si, li));
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = size.unwrap_or(total);

    let k = buckets.len();
    let base = n / k;
    let rem = n % k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut multiplicity: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, members) in buckets.values().enumerate() {
        let quota = base + usize::from(i < rem);
        for _ in 0..quota {
            let pick = members[rng.random_range(0..members.len())];
            *multiplicity.entry(pick).or_insert(0) += 1;
        }
    }

    let mut out = Corpus::default();
    for (si, story) in corpus.stories.iter().enumerate() {
        let replicas = story
            .lines
            .iter()
            .enumerate()
            .map(|(li, _)| multiplicity.get(&(si, li)).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        for r in 0..replicas {
            let story_id = if r == 0 {
                story.story_id.clone()
            } else {
                format!("{}#r{}", story.story_id, r)
            };
            let lines = story
                .lines
                .iter()
                .enumerate()
                .map(|(li, line)| {
                    let keep = multiplicity.get(&(si, li)).copied().unwrap_or(0) > r;
                    StoryLine {
                        annotation: if keep { line.annotation.clone() } else { None },
                        ..line.clone()
                    }
                })
                .collect();
            out.stories.push(Story { story_id, lines });
        }
    }
    Ok(out)
}

/// Histogram of annotated lines per integer score bucket.
pub fn score_histogram(corpus: &Corpus) -> BTreeMap<u8, usize> {
    let mut hist = BTreeMap::new();
    for (_, line) in corpus.annotated() {
        let ann = line.annotation.as_ref().expect("annotated() yields targets");
        let b = reward::bucket(ann.expressive_score).expect("validated scores are finite");
        *hist.entry(b).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn annotation(score: f64, duration: Option<f64>) -> Annotation {
        Annotation {
            expressive_score: score,
            tts_difficulty: 2.0,
            intonation: Intonation::Rising,
            rhythm: Rhythm::Relaxed,
            emotion: "gentle".into(),
            recording_condition: "normal speech".into(),
            paralinguistic_vocalizations: None,
            sound_events: None,
            bgm_present: false,
            speaker_gender: Gender::Female,
            speaker_age: "adult".into(),
            refined_context: None,
            utterance_start: 0.0,
            utterance_end: duration.unwrap_or(2.0).max(0.5),
            duration,
            audio_ref: "clips/test.wav".into(),
        }
    }

    fn story_of(id: &str, specs: &[Option<f64>]) -> Story {
        Story {
            story_id: id.into(),
            lines: specs
                .iter()
                .enumerate()
                .map(|(i, score)| StoryLine {
                    line_index: i,
                    speaker_role: "narrator".into(),
                    text: format!("line {i} of {id}"),
                    annotation: score.map(|s| annotation(s, Some(3.0))),
                })
                .collect(),
        }
    }

    fn record(story: &str, idx: usize, ann: &str) -> String {
        format!(
            "{{\"story_id\":\"{story}\",\"line_index\":{idx},\"speaker_role\":\"narrator\",\"text\":\"a line\"{ann}}}"
        )
    }

    const ANN: &str = r#","annotation":{"expressive_score":4.0,"tts_difficulty":2.0,"intonation":"rising","rhythm":"relaxed","emotion":"gentle","recording_condition":"normal speech","bgm_present":false,"speaker_gender":"female","speaker_age":"adult","utterance_start":0.0,"utterance_end":2.4,"duration":2.4,"audio_ref":"clips/a.wav"}"#;

    #[test]
    fn empty_input_parses_to_empty_corpus() {
        let c = Corpus::from_jsonl("").unwrap();
        assert_eq!(c.story_count(), 0);
        assert_eq!(c.line_count(), 0);
        assert_eq!(c.annotated_count(), 0);
    }

    #[test]
    fn parses_minimal_two_story_corpus() {
        let text = [
            record("s1", 0, ""),
            record("s1", 1, ANN),
            record("s2", 0, ANN),
        ]
        .join("\n");
        let c = Corpus::from_jsonl(&text).unwrap();
        assert_eq!(c.story_count(), 2);
        assert_eq!(c.line_count(), 3);
        assert_eq!(c.annotated_count(), 2);
        assert!(!c.stories[0].lines[0].is_target_capable());
        assert!(c.stories[0].lines[1].is_target_capable());
    }

    #[test]
    fn rejects_broken_json_with_line_number() {
        let text = format!("{}\nnot json", record("s1", 0, ""));
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_enum_variant() {
        let bad = ANN.replace("\"rising\"", "\"soaring\"");
        let text = record("s1", 0, &bad);
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::MalformedRecord { line: 1, reason }) => {
                assert!(reason.contains("soaring"), "reason should name the variant: {reason}")
            }
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_score() {
        let bad = ANN.replace("\"expressive_score\":4.0", "\"expressive_score\":5.5");
        let text = record("s1", 0, &bad);
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::InvariantViolation { field, value, .. }) => {
                assert_eq!(field, "expressive_score");
                assert_eq!(value, "5.5");
            }
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_gap_in_line_index() {
        let text = [record("s1", 0, ""), record("s1", 2, "")].join("\n");
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::InvariantViolation { field, .. }) => assert_eq!(field, "line_index"),
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_interleaved_story() {
        let text = [record("s1", 0, ""), record("s2", 0, ""), record("s1", 1, "")].join("\n");
        match Corpus::from_jsonl(&text) {
            Err(CorpusError::InvariantViolation { field, value, .. }) => {
                assert_eq!(field, "story_id");
                assert!(value.contains("non-contiguous"));
            }
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_inverted_utterance_bounds() {
        let bad = ANN.replace("\"utterance_end\":2.4", "\"utterance_end\":0.0");
        match Corpus::from_jsonl(&record("s1", 0, &bad)) {
            Err(CorpusError::InvariantViolation { field, .. }) => {
                assert_eq!(field, "utterance_end")
            }
            other => panic!("expected InvariantViolation, got {other:?}"),
        }
    }

    #[test]
    fn trims_free_text_and_drops_empty_optionals() {
        let padded = ANN.replace("\"gentle\"", "\"  gentle \"")
            + "";
        let text = record("s1", 0, &padded)
            .replace("\"a line\"", "\" a line \"");
        let c = Corpus::from_jsonl(&text).unwrap();
        let line = &c.stories[0].lines[0];
        assert_eq!(line.text, "a line");
        assert_eq!(line.annotation.as_ref().unwrap().emotion, "gentle");
    }

    #[test]
    fn round_trips_canonical_jsonl() {
        let text = [
            record("s1", 0, ""),
            record("s1", 1, ANN),
            record("s2", 0, ANN),
        ]
        .join("\n");
        let c = Corpus::from_jsonl(&text).unwrap();
        let serialized = c.to_jsonl();
        let reparsed = Corpus::from_jsonl(&serialized).unwrap();
        assert_eq!(c, reparsed);
        // Canonical form is a fixed point.
        assert_eq!(serialized, reparsed.to_jsonl());
    }

    #[test]
    fn filter_drops_out_of_range_keeps_boundaries() {
        let story = story_of("s", &[Some(2.0); 5]);
        let mut corpus = Corpus { stories: vec![story] };
        let durations = [0.5, 1.0, 30.0, 45.0, 46.0];
        for (line, d) in corpus.stories[0].lines.iter_mut().zip(durations) {
            line.annotation.as_mut().unwrap().duration = Some(d);
        }
        let filtered = filter_for_rl(&corpus, DEFAULT_MIN_DURATION_S, DEFAULT_MAX_DURATION_S).unwrap();
        let kept: Vec<bool> = filtered.stories[0]
            .lines
            .iter()
            .map(|l| l.is_target_capable())
            .collect();
        assert_eq!(kept, [false, true, true, true, false]);
        // Lines themselves survive as context.
        assert_eq!(filtered.line_count(), 5);
    }

    #[test]
    fn filter_is_idempotent() {
        let mut corpus = Corpus { stories: vec![story_of("s", &[Some(1.0), Some(3.0)])] };
        corpus.stories[0].lines[0].annotation.as_mut().unwrap().duration = Some(0.2);
        let once = filter_for_rl(&corpus, 1.0, 45.0).unwrap();
        let twice = filter_for_rl(&once, 1.0, 45.0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn filter_requires_duration() {
        let corpus = Corpus { stories: vec![Story {
            story_id: "s9".into(),
            lines: vec![StoryLine {
                line_index: 0,
                speaker_role: "narrator".into(),
                text: "x".into(),
                annotation: Some(annotation(3.0, None)),
            }],
        }] };
        match filter_for_rl(&corpus, 1.0, 45.0) {
            Err(CorpusError::MissingDuration { story_id, line_index }) => {
                assert_eq!(story_id, "s9");
                assert_eq!(line_index, 0);
            }
            other => panic!("expected MissingDuration, got {other:?}"),
        }
    }

    #[test]
    fn rebalance_two_buckets_to_even_split() {
        // 90 lines in bucket 3, 10 in bucket 4 → 50/50 after rebalance.
        let scores: Vec<Option<f64>> = (0..90)
            .map(|_| Some(3.2))
            .chain((0..10).map(|_| Some(4.1)))
            .collect();
        let corpus = Corpus { stories: vec![story_of("big", &scores)] };
        let out = rebalance_by_score(&corpus, 7, None).unwrap();
        let hist = score_histogram(&out);
        assert_eq!(hist.get(&3), Some(&50));
        assert_eq!(hist.get(&4), Some(&50));
        assert_eq!(out.annotated_count(), 100);
    }

    #[test]
    fn rebalance_remainder_goes_to_lowest_buckets() {
        let corpus = Corpus {
            stories: vec![story_of("s", &[Some(0.5), Some(2.5), Some(4.5), Some(4.6)])],
        };
        // n=4, k=3 → base 1, remainder 1 → buckets 0 and 2 get 1, bucket 4 gets...
        // ascending order: bucket 0 → 2, bucket 2 → 1, bucket 4 → 1.
        let out = rebalance_by_score(&corpus, 1, None).unwrap();
        let hist = score_histogram(&out);
        assert_eq!(hist.get(&0), Some(&2));
        assert_eq!(hist.get(&2), Some(&1));
        assert_eq!(hist.get(&4), Some(&1));
    }

    #[test]
    fn rebalance_is_deterministic_per_seed() {
        let corpus = Corpus {
            stories: vec![story_of("s", &[Some(1.0), Some(1.5), Some(3.0), Some(4.0), Some(4.9)])],
        };
        let a = rebalance_by_score(&corpus, 42, Some(50)).unwrap();
        let b = rebalance_by_score(&corpus, 42, Some(50)).unwrap();
        assert_eq!(a, b);
        let c = rebalance_by_score(&corpus, 43, Some(50)).unwrap();
        assert_ne!(a, c, "different seeds should draw different samples");
    }

    #[test]
    fn rebalance_output_is_resample_of_input() {
        let corpus = Corpus {
            stories: vec![
                story_of("s1", &[Some(0.5), None, Some(2.5)]),
                story_of("s2", &[Some(4.5)]),
            ],
        };
        let out = rebalance_by_score(&corpus, 9, Some(30)).unwrap();
        assert_eq!(out.annotated_count(), 30);
        // Every sampled annotation must be one of the input annotations.
        let input_scores: Vec<f64> = corpus
            .annotated()
            .map(|(_, l)| l.annotation.as_ref().unwrap().expressive_score)
            .collect();
        for (_, line) in out.annotated() {
            let s = line.annotation.as_ref().unwrap().expressive_score;
            assert!(input_scores.contains(&s));
        }
        // Replica corpora must still validate after a round trip.
        let reparsed = Corpus::from_jsonl(&out.to_jsonl()).unwrap();
        assert_eq!(out, reparsed);
    }

    #[test]
    fn rebalance_single_bucket_keeps_size() {
        let corpus = Corpus { stories: vec![story_of("s", &[Some(3.0), Some(3.4)])] };
        let out = rebalance_by_score(&corpus, 5, Some(7)).unwrap();
        assert_eq!(out.annotated_count(), 7);
        assert_eq!(score_histogram(&out).get(&3), Some(&7));
    }

    #[test]
    fn rebalance_empty_corpus_is_an_error() {
        let corpus = Corpus { stories: vec![story_of("s", &[None, None])] };
        assert!(matches!(
            rebalance_by_score(&corpus, 0, None),
            Err(CorpusError::EmptyCorpus)
        ));
    }
}
