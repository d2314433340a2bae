//! Versioned prompt templates and the placeholder substitution engine.
//!
//! Templates ship as plain-text resources compiled into the binary. Each file
//! name carries a version suffix (`*_v1`); the active versions are echoed into
//! run reports so persisted results can always be traced back to the exact
//! prompt text that produced them.
//!
//! Placeholders use `{name}` syntax. Substitution is strictly single-pass:
//! substituted values are never re-scanned, so corpus text containing literal
//! `{...}` can never smuggle a second expansion. Braces that do not form a
//! known placeholder (e.g. the JSON schema block in the planner template) are
//! copied through verbatim.

use std::collections::BTreeMap;

pub const PLANNER_EN: &str = include_str!("../templates/planner_en_v1.txt");
pub const JUDGE_EN: &str = include_str!("../templates/judge_en_v1.txt");
pub const JUDGE_ZH: &str = include_str!("../templates/judge_zh_v1.txt");
pub const BASELINE_EN: &str = include_str!("../templates/baseline_en_v1.txt");
pub const BASELINE_ZH: &str = include_str!("../templates/baseline_zh_v1.txt");
pub const COT_GEN_EN: &str = include_str!("../templates/cot_gen_en_v1.txt");
pub const PLAN_ALIASES: &str = include_str!("../templates/plan_aliases_v1.tsv");

pub const PLANNER_EN_VERSION: &str = "planner_en_v1";
pub const JUDGE_EN_VERSION: &str = "judge_en_v1";
pub const JUDGE_ZH_VERSION: &str = "judge_zh_v1";
pub const BASELINE_EN_VERSION: &str = "baseline_en_v1";
pub const BASELINE_ZH_VERSION: &str = "baseline_zh_v1";
pub const COT_GEN_EN_VERSION: &str = "cot_gen_en_v1";
pub const PLAN_ALIASES_VERSION: &str = "plan_aliases_v1";

/// All template versions bundled in this build, keyed by template kind.
pub fn template_versions() -> BTreeMap<String, String> {
    [
        ("planner", PLANNER_EN_VERSION),
        ("judge_en", JUDGE_EN_VERSION),
        ("judge_zh", JUDGE_ZH_VERSION),
        ("baseline_en", BASELINE_EN_VERSION),
        ("baseline_zh", BASELINE_ZH_VERSION),
        ("cot_gen", COT_GEN_EN_VERSION),
        ("plan_aliases", PLAN_ALIASES_VERSION),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Fill `{name}` placeholders in `template` from `slots`, in one pass.
///
/// Only names listed in `slots` are treated as placeholders; any other brace
/// content is copied unchanged. Values are inserted literally and never
/// re-scanned for further placeholders.
pub fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    'scan: while i < bytes.len() {
        if bytes[i] == b'{' {
            for (name, value) in slots {
                let end = i + 1 + name.len();
                if end < bytes.len()
                    && template[i + 1..].starts_with(name)
                    && bytes[end] == b'}'
                {
                    out.push_str(value);
                    i = end + 1;
                    continue 'scan;
                }
            }
        }
        // Not a known placeholder: copy one whole character ('{' is ASCII, so
        // byte scanning never lands mid-codepoint).
        let ch = template[i..].chars().next().expect("in-bounds char");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}
