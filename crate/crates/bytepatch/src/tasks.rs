//! Multiple-choice task files: JSON lines of `{prompt, choices, gold}`.

use std::fs;
use std::path::Path;

use bytepatch_core::eval::{McItem, Task};

use crate::error::{format_err, io_err, Result};

pub fn parse_tasks(path: &Path, text: &str) -> Result<Vec<McItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: McItem = serde_json::from_str(line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        item.validate().map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(format_err(path, "no items"));
    }
    Ok(items)
}

/// Loads a task file; the task is named after the file stem.
pub fn load_task(path: &Path) -> Result<Task> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Task { name, items: parse_tasks(path, &text)? })
}
