use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::encoder::DialogueContext;
use crate::error::{Error, Result};
use crate::eval::metrics::parse_state;

/// One evaluation turn: the dialogue so far, the current utterance and the
/// gold label (or canonical state string).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    #[serde(flatten)]
    pub dialogue: DialogueContext,
    pub gold: String,
    /// Gold slots of the current turn; derived from `gold` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<BTreeMap<String, String>>,
}

impl EvalInstance {
    pub fn validate(&self) -> Result<()> {
        if self.gold.trim().is_empty() {
            return Err(Error::InvalidInput(format!("instance `{}` has an empty gold label", self.id)));
        }
        if self.dialogue.current.trim().is_empty() {
            return Err(Error::InvalidInput(format!("instance `{}` has no current utterance", self.id)));
        }
        Ok(())
    }

    pub fn gold_slots(&self) -> BTreeMap<String, String> {
        self.slots.clone().unwrap_or_else(|| parse_state(&self.gold))
    }
}

pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<EvalInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EvalInstance = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("eval corpus line {}: {e}", lineno + 1)))?;
        inst.validate()?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("eval corpus is empty".into()));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], w: &mut W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
