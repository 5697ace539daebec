use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripleMode {
    /// Deltas are read at the substituted token span only.
    PerToken,
    /// Deltas are averaged over every position.
    WholeSequence,
}

impl TripleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TripleMode::PerToken => "per-token",
            TripleMode::WholeSequence => "whole-sequence",
        }
    }
}

/// `(positive, neutral, negative)` inputs differing in the rewarded attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveTriple {
    pub positive: Vec<String>,
    pub neutral: Vec<String>,
    pub negative: Vec<String>,
    /// Half-open token range `[start, end)` of the substituted word.
    pub target_span: Option<(usize, usize)>,
    pub mode: TripleMode,
}

impl ContrastiveTriple {
    pub fn per_token(
        positive: Vec<String>,
        neutral: Vec<String>,
        negative: Vec<String>,
        span: (usize, usize),
    ) -> Result<Self> {
        let t = ContrastiveTriple {
            positive,
            neutral,
            negative,
            target_span: Some(span),
            mode: TripleMode::PerToken,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, seq) in self.sequences() {
            if seq.is_empty() {
                return Err(Error::invalid(format!("{name} sequence is empty")));
            }
        }
        match (self.mode, self.target_span) {
            (TripleMode::PerToken, None) => {
                Err(Error::invalid("per-token triple needs a target_span"))
            }
            (_, Some((start, end))) => {
                if start >= end {
                    return Err(Error::invalid(format!("empty span [{start}, {end})")));
                }
                for (name, seq) in self.sequences() {
                    if end > seq.len() {
                        return Err(Error::invalid(format!(
                            "span [{start}, {end}) exceeds {name} length {}",
                            seq.len()
                        )));
                    }
                }
                Ok(())
            }
            (TripleMode::WholeSequence, None) => Ok(()),
        }
    }

    pub fn sequences(&self) -> [(&'static str, &[String]); 3] {
        [
            ("positive", &self.positive),
            ("neutral", &self.neutral),
            ("negative", &self.negative),
        ]
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "positive": self.positive,
            "neutral": self.neutral,
            "negative": self.negative,
            "mode": self.mode.as_str(),
        });
        if let Some((s, e)) = self.target_span {
            v["target_span"] = json!([s, e]);
        }
        v
    }
}

fn parse_sequence(obj: &Value, key: &str) -> std::result::Result<Vec<String>, String> {
    match obj.get(key) {
        None => Err(format!("missing key {key:?}")),
        Some(Value::String(s)) => Ok(tokenize(s)),
        Some(Value::Array(items)) => items
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_lowercase)
                    .ok_or_else(|| format!("{key:?} must contain only strings"))
            })
            .collect(),
        Some(_) => Err(format!("{key:?} must be a string or an array of tokens")),
    }
}

fn parse_triple(line: &str) -> std::result::Result<ContrastiveTriple, String> {
    let obj: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    if !obj.is_object() {
        return Err("expected a JSON object".into());
    }
    let positive = parse_sequence(&obj, "positive")?;
    let neutral = parse_sequence(&obj, "neutral")?;
    let negative = parse_sequence(&obj, "negative")?;
    let target_span = match obj.get("target_span") {
        None | Some(Value::Null) => None,
        Some(Value::Array(a)) if a.len() == 2 => {
            let s = a[0]
                .as_u64()
                .ok_or("target_span start must be a non-negative integer")?;
            let e = a[1]
                .as_u64()
                .ok_or("target_span end must be a non-negative integer")?;
            Some((s as usize, e as usize))
        }
        Some(_) => return Err("target_span must be [start, end]".into()),
    };
    let mode = match obj.get("mode").and_then(Value::as_str) {
        Some("per-token") => TripleMode::PerToken,
        Some("whole-sequence") => TripleMode::WholeSequence,
        Some(other) => return Err(format!("unknown mode {other:?}")),
        None if obj.get("mode").is_some() => return Err("mode must be a string".into()),
        None if target_span.is_some() => TripleMode::PerToken,
        None => TripleMode::WholeSequence,
    };
    let triple = ContrastiveTriple {
        positive,
        neutral,
        negative,
        target_span,
        mode,
    };
    triple.validate().map_err(|e| e.to_string())?;
    Ok(triple)
}

/// Parses JSON-lines contrastive data. Blank lines are skipped; every other
/// line must hold one triple object.
pub fn parse_contrastive(text: &str) -> Result<Vec<ContrastiveTriple>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_triple(l).map_err(|message| Error::Parse {
                line: i + 1,
                message,
            })
        })
        .collect()
}

pub fn load_contrastive(path: impl AsRef<Path>) -> Result<Vec<ContrastiveTriple>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contrastive(&text)
}

pub fn write_contrastive(triples: &[ContrastiveTriple], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in triples {
        out.push_str(&t.to_json().to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movie_example_is_per_token() {
        let line = r#"{"positive":"That movie was great","neutral":"That movie was okay","negative":"That movie was awful","target_span":[3,4]}"#;
        let t = &parse_contrastive(line).unwrap()[0];
        assert_eq!(t.mode, TripleMode::PerToken);
        assert_eq!(t.positive, ["that", "movie", "was", "great"]);
        assert_eq!(t.negative[3], "awful");
        assert_eq!(t.target_span, Some((3, 4)));
    }

    #[test]
    fn missing_neutral_is_a_schema_error() {
        let text = "\n{\"positive\":\"a b\",\"negative\":\"c d\"}";
        match parse_contrastive(text) {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("neutral")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whole_sequence_without_span() {
        let line =
            r#"{"positive":["you","rock"],"neutral":["you","exist"],"negative":["you","stink"]}"#;
        let t = &parse_contrastive(line).unwrap()[0];
        assert_eq!(t.mode, TripleMode::WholeSequence);
        assert_eq!(t.target_span, None);
    }

    #[test]
    fn invalid_spans_and_empty_sequences() {
        for line in [
            r#"{"positive":"a b","neutral":"a c","negative":"a d","target_span":[1,3]}"#,
            r#"{"positive":"a b","neutral":"a c","negative":"a d","target_span":[1,1]}"#,
            r#"{"positive":"a b","neutral":"a c","negative":"a d","mode":"per-token"}"#,
            r#"{"positive":"","neutral":"a c","negative":"a d"}"#,
        ] {
            assert!(
                matches!(parse_contrastive(line), Err(Error::Parse { line: 1, .. })),
                "{line}"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let t = ContrastiveTriple::per_token(
            tokenize_vec("the plot was great"),
            tokenize_vec("the plot was okay"),
            tokenize_vec("the plot was awful"),
            (3, 4),
        )
        .unwrap();
        let back = parse_contrastive(&t.to_json().to_string()).unwrap();
        assert_eq!(back, vec![t]);
    }

    fn tokenize_vec(s: &str) -> Vec<String> {
        tokenize(s)
    }
}
