//! Weak supervision over reasoning-model output: prompt assembly, response
//! parsing, confidence-argmax pseudo-labeling, dataset merging, and a
//! noise-rate simulator for experiments that do not call a live model.

use crate::datamodel::{DatasetManifest, Label, LabelSource};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, seeded_rng};
use rand::Rng;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

/// Ordered behavioral rules injected verbatim into the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorRuleSet {
    pub rules: Vec<String>,
    pub version: String,
}

impl Default for PriorRuleSet {
    fn default() -> Self {
        PriorRuleSet {
            rules: vec![
                "Scratching or touching the face can stem from sweat irritation after a match; \
                 do not count it as evidence of distress unless other cues agree."
                    .to_string(),
                "Brief smiles during polite exchanges are social, not emotional evidence."
                    .to_string(),
                "Weigh repeated micro-gestures more heavily than a single occurrence.".to_string(),
            ],
            version: "v1".to_string(),
        }
    }
}

impl PriorRuleSet {
    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::validation("rule set must not be empty".to_string()));
        }
        if self.rules.iter().any(|r| r.trim().is_empty()) {
            return Err(Error::validation("rules must be non-empty text".to_string()));
        }
        Ok(())
    }
}

/// Assemble the chain-of-thought + reflection prompt. Section order is
/// fixed: action-unit recognition, prior rules, evidence listing,
/// reflection, confidence format.
pub fn build_prompt(rules: &PriorRuleSet) -> Result<String> {
    rules.validate()?;
    let mut rule_block = String::new();
    for (i, rule) in rules.rules.iter().enumerate() {
        rule_block.push_str(&format!("{}. {}\n", i + 1, rule.trim()));
    }
    Ok(format!(
        "You are shown a post-match interview video of a tennis player. Decide whether the \
         player won or lost, reasoning step by step.\n\
         \n\
         Step 1 - Action unit recognition\n\
         Identify every visible facial action unit (FACS) and every postural or gestural unit \
         (PGCS/GACS). Describe each one neutrally before interpreting anything.\n\
         \n\
         Step 2 - Prior rules (version {version})\n\
         Apply these rules when weighing what you observed:\n\
         {rule_block}\
         \n\
         Step 3 - Evidence listing\n\
         List the evidence for winning and the evidence for losing instead of directly giving \
         a win or loss judgment. Keep the two lists separate.\n\
         \n\
         Step 4 - Reflection\n\
         Reflect on whether any listed evidence violates the prior rules above. Remove evidence \
         that a rule invalidates and say which rule applied.\n\
         \n\
         Step 5 - Confidence output\n\
         Answer in a tagged-section document with sections ACTION_UNITS, EVIDENCE_WIN, \
         EVIDENCE_LOSS, REFLECTION, CONFIDENCE. The CONFIDENCE section must contain exactly \
         two lines:\n\
         win: <number in [0,1]>\n\
         loss: <number in [0,1]>\n",
        version = rules.version,
        rule_block = rule_block,
    ))
}

/// Parsed reasoning-model output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmResponse {
    pub sample_id: String,
    pub action_units_text: String,
    pub evidence_win: Vec<String>,
    pub evidence_loss: Vec<String>,
    pub confidence_win: f64,
    pub confidence_loss: f64,
    pub raw_text: String,
}

const SECTION_TAGS: [&str; 5] = [
    "ACTION_UNITS",
    "EVIDENCE_WIN",
    "EVIDENCE_LOSS",
    "REFLECTION",
    "CONFIDENCE",
];

fn parse_confidence_line(lines: &[String], key: &str, field: &str) -> Result<f64> {
    let prefix = format!("{key}:");
    let line = lines
        .iter()
        .find(|l| l.starts_with(&prefix))
        .ok_or_else(|| Error::parse(format!("{field} missing from CONFIDENCE section")))?;
    let value: f64 = line[prefix.len()..]
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("{field} is not a number: '{line}'")))?;
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::parse(format!("{field} must be in [0,1], got {value}")));
    }
    Ok(value)
}

fn strip_bullet(line: &str) -> &str {
    line.strip_prefix("- ").unwrap_or(line)
}

/// Parse tagged-section response text. `sample_id` identifies the sample
/// the text describes (callers reading files use the file stem).
pub fn parse_response_text(sample_id: &str, text: &str) -> Result<VlmResponse> {
    let mut sections: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(&tag) = SECTION_TAGS.iter().find(|&&t| t == trimmed) {
            if sections.contains_key(tag) {
                return Err(Error::parse(format!("duplicate section {tag}")));
            }
            sections.insert(tag, Vec::new());
            current = Some(tag);
            continue;
        }
        if let Some(tag) = current {
            if !trimmed.is_empty() {
                sections.get_mut(tag).expect("section started").push(trimmed.to_string());
            }
        }
    }
    for tag in SECTION_TAGS {
        if !sections.contains_key(tag) {
            return Err(Error::parse(format!("missing section {tag}")));
        }
    }
    let confidence_lines = &sections["CONFIDENCE"];
    let confidence_win = parse_confidence_line(confidence_lines, "win", "confidence_win")?;
    let confidence_loss = parse_confidence_line(confidence_lines, "loss", "confidence_loss")?;
    Ok(VlmResponse {
        sample_id: sample_id.to_string(),
        action_units_text: sections["ACTION_UNITS"].join("\n"),
        evidence_win: sections["EVIDENCE_WIN"].iter().map(|l| strip_bullet(l).to_string()).collect(),
        evidence_loss: sections["EVIDENCE_LOSS"]
            .iter()
            .map(|l| strip_bullet(l).to_string())
            .collect(),
        confidence_win,
        confidence_loss,
        raw_text: text.to_string(),
    })
}

/// Parse a response file; the sample id is the file stem.
pub fn parse_response(path: &Path) -> Result<VlmResponse> {
    let sample_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(format!("{} has no usable file stem", path.display())))?
        .to_string();
    let text = fs::read_to_string(path)?;
    parse_response_text(&sample_id, &text)
}

/// Serialize a response in the tagged-section format `parse_response` reads.
pub fn write_response(resp: &VlmResponse, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("ACTION_UNITS\n");
    out.push_str(&resp.action_units_text);
    out.push_str("\nEVIDENCE_WIN\n");
    for e in &resp.evidence_win {
        out.push_str(&format!("- {e}\n"));
    }
    out.push_str("EVIDENCE_LOSS\n");
    for e in &resp.evidence_loss {
        out.push_str(&format!("- {e}\n"));
    }
    out.push_str("REFLECTION\nReviewed the evidence against the prior rules.\n");
    out.push_str(&format!(
        "CONFIDENCE\nwin: {}\nloss: {}\n",
        resp.confidence_win, resp.confidence_loss
    ));
    fs::write(path, out)?;
    Ok(())
}

/// The label selected from a response, with its decision margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub label: Label,
    pub margin: f64,
    pub excluded: bool,
}

/// Argmax over the two confidences. A margin at or below `threshold` marks
/// the label excluded; the default threshold 0 excludes exact ties only.
pub fn select_pseudo_label_with_threshold(resp: &VlmResponse, threshold: f64) -> PseudoLabel {
    let label = if resp.confidence_win >= resp.confidence_loss {
        Label::Win
    } else {
        Label::Loss
    };
    let margin = (resp.confidence_win - resp.confidence_loss).abs();
    PseudoLabel {
        sample_id: resp.sample_id.clone(),
        label,
        margin,
        excluded: margin <= threshold,
    }
}

pub fn select_pseudo_label(resp: &VlmResponse) -> PseudoLabel {
    select_pseudo_label_with_threshold(resp, 0.0)
}

/// Merge gold data with pseudo-labeled pool records into one training
/// manifest. Gold records pass through unmodified; pool records gain their
/// pseudo label and the `pseudo` source mark; excluded labels and pool
/// records without a pseudo label are dropped.
pub fn merge_datasets(
    gold: &DatasetManifest,
    pseudo: &[PseudoLabel],
    pool: &DatasetManifest,
) -> Result<DatasetManifest> {
    let gold_ids: HashSet<&str> = gold.records.iter().map(|r| r.sample_id.as_str()).collect();
    let pool_ids: HashSet<&str> = pool.records.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(overlap) = gold_ids.intersection(&pool_ids).next() {
        return Err(Error::validation(format!(
            "sample '{overlap}' appears in both the gold set and the pool"
        )));
    }
    let mut by_id: HashMap<&str, &PseudoLabel> = HashMap::new();
    for p in pseudo {
        if !pool_ids.contains(p.sample_id.as_str()) {
            return Err(Error::validation(format!(
                "pseudo-label for '{}' has no matching pool record",
                p.sample_id
            )));
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(Error::validation(format!(
                "duplicate pseudo-label for '{}'",
                p.sample_id
            )));
        }
    }
    let mut records = gold.records.clone();
    let rebase = gold.base_dir != pool.base_dir;
    for record in &pool.records {
        let Some(p) = by_id.get(record.sample_id.as_str()) else {
            continue;
        };
        if p.excluded {
            continue;
        }
        let mut r = record.clone();
        r.label = Some(p.label);
        r.label_source = LabelSource::Pseudo;
        if rebase {
            // Joining an absolute path onto any base yields that path, so
            // resolving here keeps mixed-directory merges loadable.
            r.keypoint_path = record.resolve_keypoint(&pool.base_dir);
            r.visual_path = record.resolve_visual(&pool.base_dir);
            r.text_path = record.resolve_text(&pool.base_dir);
        }
        records.push(r);
    }
    DatasetManifest::new(records, gold.split, gold.base_dir.clone())
}

/// Simulate reasoning-model pseudo-labels by flipping each true label with
/// probability `noise_rate`. Margins are drawn uniform(0.1, 0.9) so no
/// simulated label is tie-excluded.
pub fn simulate_pseudo_labels(
    truth: &[(String, Label)],
    noise_rate: f64,
    seed: u64,
) -> Result<Vec<PseudoLabel>> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::validation(format!(
            "noise_rate must be in [0,1], got {noise_rate}"
        )));
    }
    let mut rng = seeded_rng(derive_seed(seed, "pseudo_label_sim", &[]));
    Ok(truth
        .iter()
        .map(|(sample_id, label)| {
            let flip = rng.gen_bool(noise_rate);
            let chosen = if flip { label.flipped() } else { *label };
            PseudoLabel {
                sample_id: sample_id.clone(),
                label: chosen,
                margin: rng.gen_range(0.1..0.9),
                excluded: false,
            }
        })
        .collect())
}
