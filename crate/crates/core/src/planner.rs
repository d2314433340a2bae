//! Expressive planner: prompting, output parsing, and cross-context voting.
//!
//! The planner is a text-only model that reads a narrative context window plus
//! the target utterance and predicts how the utterance should ideally sound —
//! a 4-tuple of emotion, rhythm, intonation and recording condition. Emotion
//! and recording condition are free-form text; rhythm and intonation come from
//! the closed sets in [`crate::corpus`].
//!
//! Real model output is messy, so [`parse_plan`] accepts a JSON object
//! embedded anywhere in the reply (leading prose, markdown fences), tolerates
//! the `"recording condition"` spelling, and maps common near-synonyms onto
//! the closed categories via a versioned alias table.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextWindow;
use crate::corpus::{Intonation, Rhythm};
use crate::templates;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressivePlan {
    pub emotion: String,
    pub rhythm: Rhythm,
    pub intonation: Intonation,
    pub recording_condition: String,
}

/// One planner prediction together with the context size that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanBallot {
    pub cts: usize,
    pub plan: ExpressivePlan,
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("no expressive plan object found in model output")]
    NoPlanFound,
    #[error("plan is missing required field `{field}`")]
    MissingField { field: &'static str },
    #[error("unknown {field} category: {value:?}")]
    UnknownCategory { field: &'static str, value: String },
    #[error("cannot vote over an empty ballot list")]
    EmptyBallots,
}

/// Render the planner prompt for a context window, with role prefixes.
pub fn render_planner_prompt(window: &ContextWindow, target_text: &str) -> String {
    render_planner_prompt_opts(window, target_text, true)
}

pub fn render_planner_prompt_opts(
    window: &ContextWindow,
    target_text: &str,
    with_roles: bool,
) -> String {
    templates::fill_template(
        templates::PLANNER_EN,
        &[
            ("context", &window.render_lines(with_roles)),
            ("target_line", target_text),
        ],
    )
}

/// Canonical single-line JSON form of a plan (inverse of [`parse_plan`]).
pub fn serialize_plan(plan: &ExpressivePlan) -> String {
    serde_json::to_string(plan).expect("plans serialize")
}

/// Extract an expressive plan from raw model output.
///
/// Scans for the first position where a well-formed JSON object can be
/// parsed, then requires the four plan fields. Rhythm and intonation accept
/// the canonical category names plus the bundled alias table (e.g.
/// `"soothing"` → relaxed, `"rising intonation"` → rising); anything else is
/// an [`PlannerError::UnknownCategory`] error rather than a silent guess.
pub fn parse_plan(raw: &str) -> Result<ExpressivePlan, PlannerError> {
    for (at, _) in raw.char_indices().filter(|&(_, c)| c == '{') {
        let mut stream =
            serde_json::Deserializer::from_str(&raw[at..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(serde_json::Value::Object(map))) => return plan_from_object(&map),
            _ => continue,
        }
    }
    Err(PlannerError::NoPlanFound)
}

fn plan_from_object(
    map: &serde_json::Map<String, serde_json::Value>,
) -> Result<ExpressivePlan, PlannerError> {
    let field = |names: &[&str], field: &'static str| -> Result<String, PlannerError> {
        for n in names {
            if let Some(serde_json::Value::String(s)) = map.get(*n) {
                return Ok(s.trim().to_string());
            }
        }
        Err(PlannerError::MissingField { field })
    };

    let emotion = field(&["emotion"], "emotion")?;
    let rhythm_raw = field(&["rhythm"], "rhythm")?;
    let intonation_raw = field(&["intonation"], "intonation")?;
    let recording_condition = field(
        &["recording_condition", "recording condition"],
        "recording_condition",
    )?;

    Ok(ExpressivePlan {
        emotion,
        rhythm: canon_rhythm(&rhythm_raw)?,
        intonation: canon_intonation(&intonation_raw)?,
        recording_condition,
    })
}

fn alias_table() -> &'static HashMap<(&'static str, &'static str), &'static str> {
    static TABLE: OnceLock<HashMap<(&'static str, &'static str), &'static str>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut m = HashMap::new();
        for line in templates::PLAN_ALIASES.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(field), Some(alias), Some(canonical)) => {
                    m.insert((field, alias), canonical);
                }
                _ => panic!("malformed alias table line: {line:?}"),
            }
        }
        m
    })
}

fn canon_rhythm(raw: &str) -> Result<Rhythm, PlannerError> {
    let lowered = raw.trim().to_lowercase();
    let resolved = alias_table()
        .get(&("rhythm", lowered.as_str()))
        .copied()
        .unwrap_or(&lowered);
    Rhythm::from_str(resolved).map_err(|()| PlannerError::UnknownCategory {
        field: "rhythm",
        value: raw.to_string(),
    })
}

fn canon_intonation(raw: &str) -> Result<Intonation, PlannerError> {
    let lowered = raw.trim().to_lowercase();
    let resolved = alias_table()
        .get(&("intonation", lowered.as_str()))
        .copied()
        .unwrap_or(&lowered);
    Intonation::from_str(resolved).map_err(|()| PlannerError::UnknownCategory {
        field: "intonation",
        value: raw.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteOptions {
    /// Compare free-text fields verbatim instead of case/whitespace-folded.
    pub strict_equality: bool,
}

impl Default for VoteOptions {
    fn default() -> Self {
        VoteOptions { strict_equality: false }
    }
}

/// Joint-vote over per-context-size plans (see [`vote_plans_opts`]).
pub fn vote_plans(ballots: &[PlanBallot]) -> Result<ExpressivePlan, PlannerError> {
    vote_plans_opts(ballots, VoteOptions::default())
}

/// Select the winning plan across context sizes.
///
/// Each ballot's full 4-tuple is the voting unit. Identical tuples are
/// grouped and counted; the group with the highest count wins, and a count
/// tie goes to the group containing the largest context size. (A residual
/// tie on both — only possible with duplicated `cts` values — falls back to
/// the lexicographically smallest tuple key so the result stays
/// deterministic.) The returned plan is the one predicted at the winning
/// group's largest context size.
///
/// By default the free-text fields are compared case-insensitively with
/// collapsed whitespace; `strict_equality` compares them verbatim.
pub fn vote_plans_opts(
    ballots: &[PlanBallot],
    opts: VoteOptions,
) -> Result<ExpressivePlan, PlannerError> {
    if ballots.is_empty() {
        return Err(PlannerError::EmptyBallots);
    }

    struct Group<'a> {
        count: usize,
        max_cts: usize,
        representative: &'a PlanBallot,
    }

    let mut groups: HashMap<String, Group> = HashMap::new();
    for ballot in ballots {
        let key = tuple_key(&ballot.plan, opts);
        let entry = groups.entry(key).or_insert(Group {
            count: 0,
            max_cts: ballot.cts,
            representative: ballot,
        });
        entry.count += 1;
        if ballot.cts >= entry.max_cts {
            entry.max_cts = ballot.cts;
            entry.representative = ballot;
        }
    }

    let winner = groups
        .iter()
        .max_by(|(ka, a), (kb, b)| {
            (a.count, a.max_cts)
                .cmp(&(b.count, b.max_cts))
                // Reverse key order so the *smallest* key wins residual ties.
                .then_with(|| kb.cmp(ka))
        })
        .map(|(_, g)| g)
        .expect("non-empty ballots imply a group");
    Ok(winner.representative.plan.clone())
}

fn tuple_key(plan: &ExpressivePlan, opts: VoteOptions) -> String {
    let fold = |s: &str| -> String {
        if opts.strict_equality {
            s.to_string()
        } else {
            s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
        }
    };
    format!(
        "{}\u{1f}{}\u{1f}{}\u{1f}{}",
        fold(&plan.emotion),
        plan.rhythm,
        plan.intonation,
        fold(&plan.recording_condition),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_context;
    use crate::corpus::StoryLine;
    use proptest::prelude::*;

    fn line(i: usize, role: &str, text: &str) -> StoryLine {
        StoryLine {
            line_index: i,
            speaker_role: role.into(),
            text: text.into(),
            annotation: None,
        }
    }

    fn plan(emotion: &str, rhythm: Rhythm, intonation: Intonation, rc: &str) -> ExpressivePlan {
        ExpressivePlan {
            emotion: emotion.into(),
            rhythm,
            intonation,
            recording_condition: rc.into(),
        }
    }

    #[test]
    fn prompt_contains_context_and_target() {
        let story = vec![
            line(0, "Mara", "The storm is close."),
            line(1, "Tomas", "Then we light it now."),
            line(2, "narrator", "He reached for the matches."),
        ];
        let w = build_context(&story, 2, 2).unwrap();
        let prompt = render_planner_prompt(&w, &w.target.text);
        assert!(prompt.contains("Narrative Context:\nMara said: The storm is close.\nTomas said: Then we light it now."));
        assert!(prompt.contains("Target Utterance:\nHe reached for the matches."));
        // All declared slots were consumed.
        assert!(!prompt.contains("{context}"));
        assert!(!prompt.contains("{target_line}"));
        // The JSON schema block survives as literal braces.
        assert!(prompt.contains("\"rhythm\": \"brisk / heavy / low-paced / high-energy / relaxed / tense\""));
    }

    #[test]
    fn prompt_rendering_is_deterministic() {
        let story = vec![line(0, "a", "x"), line(1, "b", "y")];
        let w = build_context(&story, 1, 1).unwrap();
        assert_eq!(
            render_planner_prompt(&w, "y"),
            render_planner_prompt(&w, "y")
        );
    }

    #[test]
    fn parses_bare_json_object() {
        let raw = r#"{"emotion": "calm", "rhythm": "relaxed", "intonation": "flat", "recording_condition": "normal speaking"}"#;
        let p = parse_plan(raw).unwrap();
        assert_eq!(p, plan("calm", Rhythm::Relaxed, Intonation::Flat, "normal speaking"));
    }

    #[test]
    fn parses_prose_wrapped_plan_with_spaced_key_and_synonyms() {
        // Shape seen in real planner transcripts: leading prose, a
        // "recording condition" key, and near-synonym category names.
        let raw = r#"The ideal performance in this context is: { "emotion": "gentle", "rhythm": "soothing", "intonation": "rising intonation", "recording condition": "normal speech" }"#;
        let p = parse_plan(raw).unwrap();
        assert_eq!(p, plan("gentle", Rhythm::Relaxed, Intonation::Rising, "normal speech"));
    }

    #[test]
    fn parses_markdown_fenced_plan() {
        let raw = "Here is the plan:\n```json\n{\"emotion\":\"bright\",\"rhythm\":\"brisk\",\"intonation\":\"curved\",\"recording_condition\":\"distant voice\"}\n```\n";
        let p = parse_plan(raw).unwrap();
        assert_eq!(p.rhythm, Rhythm::Brisk);
        assert_eq!(p.intonation, Intonation::Curved);
    }

    #[test]
    fn skips_malformed_braces_before_the_object() {
        let raw = "score {not json} but then {\"emotion\":\"low\",\"rhythm\":\"heavy\",\"intonation\":\"falling\",\"recording_condition\":\"inner monologue\"}";
        let p = parse_plan(raw).unwrap();
        assert_eq!(p.rhythm, Rhythm::Heavy);
    }

    #[test]
    fn missing_field_is_reported() {
        let raw = r#"{"emotion":"calm","rhythm":"relaxed","intonation":"flat"}"#;
        match parse_plan(raw) {
            Err(PlannerError::MissingField { field }) => assert_eq!(field, "recording_condition"),
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn unknown_rhythm_is_an_error_not_a_guess() {
        let raw = r#"{"emotion":"calm","rhythm":"staccato","intonation":"flat","recording_condition":"normal"}"#;
        match parse_plan(raw) {
            Err(PlannerError::UnknownCategory { field: "rhythm", value }) => {
                assert_eq!(value, "staccato")
            }
            other => panic!("expected UnknownCategory, got {other:?}"),
        }
    }

    #[test]
    fn no_object_at_all() {
        assert!(matches!(parse_plan("I cannot help."), Err(PlannerError::NoPlanFound)));
        assert!(matches!(parse_plan(""), Err(PlannerError::NoPlanFound)));
    }

    #[test]
    fn plan_round_trips_through_serialization() {
        let p = plan("wistful", Rhythm::LowPaced, Intonation::Falling, "phone speech");
        assert_eq!(parse_plan(&serialize_plan(&p)).unwrap(), p);
    }

    #[test]
    fn majority_wins() {
        let a = plan("calm", Rhythm::Relaxed, Intonation::Flat, "normal");
        let b = plan("angry", Rhythm::Tense, Intonation::Rising, "normal");
        let ballots: Vec<PlanBallot> = (1..=5)
            .map(|cts| PlanBallot { cts, plan: if cts <= 3 { a.clone() } else { b.clone() } })
            .collect();
        assert_eq!(vote_plans(&ballots).unwrap(), a);
    }

    #[test]
    fn tie_goes_to_largest_context_size() {
        let a = plan("calm", Rhythm::Relaxed, Intonation::Flat, "normal");
        let b = plan("angry", Rhythm::Tense, Intonation::Rising, "normal");
        // 7 ballots each; group B holds the largest cts (15).
        let ballots: Vec<PlanBallot> = (1..=14)
            .map(|cts| PlanBallot { cts, plan: if cts % 2 == 0 { a.clone() } else { b.clone() } })
            .chain(std::iter::once(PlanBallot { cts: 15, plan: b.clone() }))
            .collect();
        let a_count = ballots.iter().filter(|x| x.plan == a).count();
        let b_count = ballots.iter().filter(|x| x.plan == b).count();
        assert_eq!((a_count, b_count), (7, 8));
        // Drop one b ballot (cts=1) to make it a genuine 7-vs-7 tie.
        let tied: Vec<PlanBallot> = ballots.into_iter().filter(|x| x.cts != 1).collect();
        assert_eq!(vote_plans(&tied).unwrap(), b);
    }

    #[test]
    fn free_text_is_folded_unless_strict() {
        let a = plan("Calm ", Rhythm::Relaxed, Intonation::Flat, "normal  speaking");
        let b = plan("calm", Rhythm::Relaxed, Intonation::Flat, "Normal speaking");
        let c = plan("angry", Rhythm::Tense, Intonation::Rising, "shout");
        let ballots = vec![
            PlanBallot { cts: 1, plan: a.clone() },
            PlanBallot { cts: 2, plan: b.clone() },
            PlanBallot { cts: 3, plan: c.clone() },
        ];
        // Folded: a and b merge into one group of 2 and win (representative
        // is the higher-cts member, b).
        assert_eq!(vote_plans(&ballots).unwrap(), b);
        // Strict: three singleton groups; max cts wins.
        let strict = vote_plans_opts(&ballots, VoteOptions { strict_equality: true }).unwrap();
        assert_eq!(strict, c);
    }

    #[test]
    fn empty_ballots_error() {
        assert!(matches!(vote_plans(&[]), Err(PlannerError::EmptyBallots)));
    }

    fn arb_plan() -> impl Strategy<Value = ExpressivePlan> {
        (
            "[a-z]{1,8}( [a-z]{1,8})?",
            0usize..6,
            0usize..4,
            "[a-z]{1,8}",
        )
            .prop_map(|(emotion, r, i, rc)| ExpressivePlan {
                emotion,
                rhythm: Rhythm::ALL[r],
                intonation: Intonation::ALL[i],
                recording_condition: rc,
            })
    }

    proptest! {
        // Voting must not depend on ballot order.
        #[test]
        fn vote_is_permutation_invariant(
            plans in proptest::collection::vec(arb_plan(), 1..12),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ballots: Vec<PlanBallot> = plans
                .into_iter()
                .enumerate()
                .map(|(i, plan)| PlanBallot { cts: i + 1, plan })
                .collect();
            let mut shuffled = ballots.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(vote_plans(&ballots).unwrap(), vote_plans(&shuffled).unwrap());
        }

        #[test]
        fn canonical_plans_round_trip(p in arb_plan()) {
            prop_assert_eq!(parse_plan(&serialize_plan(&p)).unwrap(), p);
        }
    }
}
