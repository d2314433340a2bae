//! Judge prompting, verdict parsing, and token region annotation.
//!
//! The judge is a speech-capable model that hears the target utterance and
//! reads a system prompt. Two prompt families are supported:
//!
//! * the planner-conditioned prompt ([`render_judge_prompt`]), which compares
//!   the audio against an [`ExpressivePlan`]; and
//! * the context-conditioned baseline prompt ([`render_baseline_prompt`]),
//!   which embeds the raw narrative window instead.
//!
//! Both exist in English and Chinese with identical structure, and both can
//! request a direct score or step-by-step reasoning before the score.
//!
//! [`annotate_regions`] tags token sequences with the regions used by the
//! attention-bias kernel (prompt / audio / chain-of-thought / focus / score),
//! delimited by `<a>…</a>`, `<t>…</t>`, `<f>…</f>` and `<s>…</s>` tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextWindow;
use crate::planner::ExpressivePlan;
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    WithoutCot,
    WithCot,
}

impl fmt::Display for JudgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeMode::WithoutCot => "without_cot",
            JudgeMode::WithCot => "with_cot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    #[default]
    En,
    Zh,
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::En => "en",
            Lang::Zh => "zh",
        })
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("no final score span found in judge output")]
    NoScoreFound,
    #[error("final score {0} outside the 0.0..=5.0 range")]
    ScoreOutOfRange(f64),
    #[error("unbalanced region delimiter {token:?} at token {position}")]
    UnbalancedDelimiter { token: String, position: usize },
    #[error("audio delimiter inside an audio region at token {position}")]
    NestedAudio { position: usize },
    #[error("audio span {start}..{end} out of bounds for {len} prompt tokens")]
    AudioSpanOutOfBounds { start: usize, end: usize, len: usize },
}

/// Planner-conditioned judge system prompt.
pub fn render_judge_prompt(plan: &ExpressivePlan, mode: JudgeMode, lang: Lang) -> String {
    let template = match lang {
        Lang::En => templates::JUDGE_EN,
        Lang::Zh => templates::JUDGE_ZH,
    };
    let mode_line = match (lang, mode) {
        (Lang::En, JudgeMode::WithoutCot) => {
            "Give the final expressive appropriateness score only."
        }
        (Lang::En, JudgeMode::WithCot) => {
            "Think step by step and explain your analysis before giving the final score."
        }
        (Lang::Zh, JudgeMode::WithoutCot) => "请只给出最终的表现力贴切度评分。",
        (Lang::Zh, JudgeMode::WithCot) => "请逐步思考，在给出最终评分之前解释你的分析。",
    };
    templates::fill_template(
        template,
        &[
            ("ideal_emotion", plan.emotion.as_str()),
            ("ideal_rhythm", plan.rhythm.as_str()),
            ("ideal_intonation", plan.intonation.as_str()),
            ("ideal_recording_condition", plan.recording_condition.as_str()),
            ("mode_line", mode_line),
        ],
    )
}

/// Context-conditioned baseline system prompt (no planner).
pub fn render_baseline_prompt(window: &ContextWindow, mode: JudgeMode, lang: Lang) -> String {
    render_baseline_prompt_opts(window, mode, lang, true)
}

pub fn render_baseline_prompt_opts(
    window: &ContextWindow,
    mode: JudgeMode,
    lang: Lang,
    with_roles: bool,
) -> String {
    let template = match lang {
        Lang::En => templates::BASELINE_EN,
        Lang::Zh => templates::BASELINE_ZH,
    };
    let reasoning_mode = match (lang, mode) {
        (Lang::En, JudgeMode::WithoutCot) => {
            "Directly output the final score without additional reasoning."
        }
        (Lang::En, JudgeMode::WithCot) => {
            "Generate an explicit reasoning process before giving the final score."
        }
        (Lang::Zh, JudgeMode::WithoutCot) => "直接输出最终评分，不作额外推理。",
        (Lang::Zh, JudgeMode::WithCot) => "先给出明确的推理过程，再给出最终评分。",
    };
    templates::fill_template(
        template,
        &[
            ("reasoning_mode", reasoning_mode),
            ("context", &window.render_lines(with_roles)),
            ("target_line", &window.render_target(with_roles)),
        ],
    )
}

/// Inputs for chain-of-thought supervision generation.
#[derive(Debug, Clone)]
pub struct CotGenInputs<'a> {
    pub target_line: &'a str,
    pub ideal: &'a ExpressivePlan,
    pub actual_emotion: &'a str,
    pub actual_rhythm: &'a str,
    pub actual_intonation: &'a str,
    pub actual_recording_condition: &'a str,
    /// Ground-truth expressive score, used only as a condition.
    pub actual_score: f64,
    /// Optional paralinguistic / sound event description.
    pub sounds: Option<&'a str>,
}

/// Prompt that asks a teacher model to explain a known score dimension by
/// dimension without restating it.
pub fn render_cot_gen_prompt(inputs: &CotGenInputs<'_>) -> String {
    let sounds_block = match inputs.sounds {
        Some(s) => format!("Paralinguistic or sound-related events:\n{s}\n\n"),
        None => String::new(),
    };
    let score = format!("{:.1}", inputs.actual_score);
    templates::fill_template(
        templates::COT_GEN_EN,
        &[
            ("target_line", inputs.target_line),
            ("ideal_emotion", inputs.ideal.emotion.as_str()),
            ("ideal_rhythm", inputs.ideal.rhythm.as_str()),
            ("ideal_intonation", inputs.ideal.intonation.as_str()),
            ("ideal_record_condition", inputs.ideal.recording_condition.as_str()),
            ("actual_emotion", inputs.actual_emotion),
            ("actual_rhythm", inputs.actual_rhythm),
            ("actual_intonation", inputs.actual_intonation),
            ("actual_record_condition", inputs.actual_recording_condition),
            ("actual_score", &score),
            ("sounds_block", &sounds_block),
        ],
    )
}

/// Parsed judge output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub final_score: f64,
    /// Best-effort per-dimension scores scraped from the reasoning text
    /// (empty when the judge answered without reasoning).
    pub dimension_scores: BTreeMap<String, f64>,
    /// Reasoning text preceding the score span, when present.
    pub cot_text: Option<String>,
    pub raw: String,
}

fn score_span_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<(s|score)>\s*([-+]?\d+(?:\.\d+)?)\s*</(s|score)>").expect("valid regex")
    })
}

fn dimension_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(emotion|rhythm|intonation|recording condition)\s+score\s+of\s+([-+]?\d+(?:\.\d+)?)")
            .expect("valid regex")
    })
}

/// Parse a judge reply into a verdict.
///
/// The final score is the **last** `<s>…</s>` or `<score>…</score>` span in
/// the reply (models sometimes quote the format earlier); matching open and
/// close tags are required. Scores outside `[0, 5]` are an error — a judge
/// that emits 7.0 is broken and must surface as such, never be clamped.
/// Per-dimension scores are scraped best-effort from `"<dim> score of X"`
/// phrases; out-of-range dimension values are ignored.
pub fn parse_verdict(raw: &str) -> Result<JudgeVerdict, JudgeError> {
    let last = score_span_re()
        .captures_iter(raw)
        .filter(|c| c[1] == c[3])
        .last()
        .ok_or(JudgeError::NoScoreFound)?;
    let final_score: f64 = last[2].parse().map_err(|_| JudgeError::NoScoreFound)?;
    if !(0.0..=5.0).contains(&final_score) {
        return Err(JudgeError::ScoreOutOfRange(final_score));
    }

    let span_start = last.get(0).expect("match exists").start();
    let cot_text = {
        let prefix = raw[..span_start].trim();
        (!prefix.is_empty()).then(|| prefix.to_string())
    };

    let mut dimension_scores = BTreeMap::new();
    for cap in dimension_re().captures_iter(raw) {
        if let Ok(v) = cap[2].parse::<f64>() {
            if (0.0..=5.0).contains(&v) {
                let key = cap[1].to_lowercase().replace(' ', "_");
                dimension_scores.insert(key, v);
            }
        }
    }

    Ok(JudgeVerdict {
        final_score,
        dimension_scores,
        cot_text,
        raw: raw.to_string(),
    })
}

/// Token region categories used by the attention-bias kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Prompt,
    Audio,
    Cot,
    /// Focus span inside the chain of thought.
    Focus,
    /// Explicit score span; treated as base by the bias masks.
    Score,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub text: String,
    pub tag: RegionTag,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub tokens: Vec<AnnotatedToken>,
}

impl AnnotatedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> Vec<RegionTag> {
        self.tokens.iter().map(|t| t.tag).collect()
    }
}

pub const AUDIO_OPEN: &str = "<a>";
pub const AUDIO_CLOSE: &str = "</a>";
pub const COT_OPEN: &str = "<t>";
pub const COT_CLOSE: &str = "</t>";
pub const FOCUS_OPEN: &str = "<f>";
pub const FOCUS_CLOSE: &str = "</f>";
pub const SCORE_OPEN: &str = "<s>";
pub const SCORE_CLOSE: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionOptions {
    /// Tag delimiter tokens with the region they enclose (default) rather
    /// than the surrounding region.
    pub delimiters_in_region: bool,
}

impl Default for RegionOptions {
    fn default() -> Self {
        RegionOptions { delimiters_in_region: true }
    }
}

/// Assemble and tag the full judge token sequence.
///
/// `prompt_tokens` is the input side; `audio_span` (half-open, indices into
/// `prompt_tokens`) marks the audio embedding positions, around which
/// `<a>`/`</a>` delimiter tokens are inserted. Input tokens before the span
/// are prompt; tokens after it (connectives like a begin-of-reply marker) are
/// base. Without an audio span the whole input side is prompt.
///
/// `output_tokens` is the decoded side and may carry `<t>…</t>` (chain of
/// thought), `<f>…</f>` (focus, only inside `<t>`) and `<s>…</s>` (score)
/// delimiters; everything outside those spans is base. Audio delimiters are
/// inserted by this function only — literal `<a>`/`</a>` in token content is
/// rejected so a sequence can never contain ambiguous audio boundaries.
pub fn annotate_regions(
    prompt_tokens: &[String],
    audio_span: Option<(usize, usize)>,
    output_tokens: &[String],
) -> Result<AnnotatedSequence, JudgeError> {
    annotate_regions_opts(prompt_tokens, audio_span, output_tokens, RegionOptions::default())
}

pub fn annotate_regions_opts(
    prompt_tokens: &[String],
    audio_span: Option<(usize, usize)>,
    output_tokens: &[String],
    opts: RegionOptions,
) -> Result<AnnotatedSequence, JudgeError> {
    let mut tokens: Vec<AnnotatedToken> = Vec::with_capacity(prompt_tokens.len() + output_tokens.len() + 8);
    fn push(tokens: &mut Vec<AnnotatedToken>, text: &str, tag: RegionTag) {
        tokens.push(AnnotatedToken { text: text.to_string(), tag });
    }

    let guard_literal_audio = |tok: &str, position: usize| -> Result<(), JudgeError> {
        if tok == AUDIO_OPEN || tok == AUDIO_CLOSE {
            Err(JudgeError::NestedAudio { position })
        } else {
            Ok(())
        }
    };

    match audio_span {
        None => {
            for (i, tok) in prompt_tokens.iter().enumerate() {
                guard_literal_audio(tok, i)?;
                push(&mut tokens, tok, RegionTag::Prompt);
            }
        }
        Some((start, end)) => {
            if start > end || end > prompt_tokens.len() {
                return Err(JudgeError::AudioSpanOutOfBounds {
                    start,
                    end,
                    len: prompt_tokens.len(),
                });
            }
            let delim_tag = |enclosed: RegionTag, outer: RegionTag| {
                if opts.delimiters_in_region { enclosed } else { outer }
            };
            for (i, tok) in prompt_tokens.iter().enumerate().take(start) {
                guard_literal_audio(tok, i)?;
                push(&mut tokens, tok, RegionTag::Prompt);
            }
            push(&mut tokens, AUDIO_OPEN, delim_tag(RegionTag::Audio, RegionTag::Prompt));
            for (i, tok) in prompt_tokens.iter().enumerate().take(end).skip(start) {
                guard_literal_audio(tok, i)?;
                push(&mut tokens, tok, RegionTag::Audio);
            }
            push(&mut tokens, AUDIO_CLOSE, delim_tag(RegionTag::Audio, RegionTag::Base));
            for (i, tok) in prompt_tokens.iter().enumerate().skip(end) {
                guard_literal_audio(tok, i)?;
                push(&mut tokens, tok, RegionTag::Base);
            }
        }
    }

    #[derive(PartialEq, Clone, Copy)]
    enum St {
        Outside,
        InCot,
        InFocus,
        InScore,
    }
    let mut st = St::Outside;
    let base_offset = tokens.len();

    for (i, tok) in output_tokens.iter().enumerate() {
        let position = base_offset + i;
        let unbalanced = || JudgeError::UnbalancedDelimiter { token: tok.clone(), position };
        let delim_tag = |enclosed: RegionTag, outer: RegionTag| {
            if opts.delimiters_in_region { enclosed } else { outer }
        };
        match tok.as_str() {
            AUDIO_OPEN | AUDIO_CLOSE => return Err(JudgeError::NestedAudio { position }),
            COT_OPEN => {
                if st != St::Outside {
                    return Err(unbalanced());
                }
                st = St::InCot;
                push(&mut tokens, tok, delim_tag(RegionTag::Cot, RegionTag::Base));
            }
            COT_CLOSE => {
                if st != St::InCot {
                    return Err(unbalanced());
                }
                st = St::Outside;
                push(&mut tokens, tok, delim_tag(RegionTag::Cot, RegionTag::Base));
            }
            FOCUS_OPEN => {
                if st != St::InCot {
                    return Err(unbalanced());
                }
                st = St::InFocus;
                push(&mut tokens, tok, delim_tag(RegionTag::Focus, RegionTag::Cot));
            }
            FOCUS_CLOSE => {
                if st != St::InFocus {
                    return Err(unbalanced());
                }
                st = St::InCot;
                push(&mut tokens, tok, delim_tag(RegionTag::Focus, RegionTag::Cot));
            }
            SCORE_OPEN => {
                if st != St::Outside {
                    return Err(unbalanced());
                }
                st = St::InScore;
                push(&mut tokens, tok, delim_tag(RegionTag::Score, RegionTag::Base));
            }
            SCORE_CLOSE => {
                if st != St::InScore {
                    return Err(unbalanced());
                }
                st = St::Outside;
                push(&mut tokens, tok, delim_tag(RegionTag::Score, RegionTag::Base));
            }
            _ => {
                let tag = match st {
                    St::Outside => RegionTag::Base,
                    St::InCot => RegionTag::Cot,
                    St::InFocus => RegionTag::Focus,
                    St::InScore => RegionTag::Score,
                };
                push(&mut tokens, tok, tag);
            }
        }
    }

    if st != St::Outside {
        return Err(JudgeError::UnbalancedDelimiter {
            token: "<eos>".to_string(),
            position: base_offset + output_tokens.len(),
        });
    }

    Ok(AnnotatedSequence { tokens })
}
