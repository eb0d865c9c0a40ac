//! Scripted and dry-run chat backends.
//!
//! A script maps `"<template>:<slot fingerprint>"` to a response. A key of
//! the form `"<template>:*"` answers every call of that template that has no
//! exact entry. Script files hold one `{"key": ..., "response": ...}` object
//! per line.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::templates::{Slots, TemplateName};
use super::{BackendError, CallRequest, ChatBackend, GenerationParams};

pub fn mock_key(template: TemplateName, slots: &Slots) -> String {
    format!("{}:{}", template.as_str(), slots.fingerprint())
}

pub fn wildcard_key(template: TemplateName) -> String {
    format!("{}:*", template.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ScriptLine {
    pub key: String,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("script key {0} appears twice with different responses")]
    Conflict(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    entries: HashMap<String, String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, template: TemplateName, slots: &Slots, response: impl Into<String>) -> &mut Self {
        self.entries.insert(mock_key(template, slots), response.into());
        self
    }

    pub fn insert_any(&mut self, template: TemplateName, response: impl Into<String>) -> &mut Self {
        self.entries.insert(wildcard_key(template), response.into());
        self
    }

    pub fn insert_key(&mut self, key: impl Into<String>, response: impl Into<String>) -> Result<(), ScriptError> {
        let key = key.into();
        let response = response.into();
        match self.entries.get(&key) {
            Some(existing) if *existing != response => Err(ScriptError::Conflict(key)),
            _ => {
                self.entries.insert(key, response);
                Ok(())
            }
        }
    }

    pub fn lookup(&self, template: TemplateName, slots: &Slots) -> Option<&str> {
        self.entries
            .get(&mock_key(template, slots))
            .or_else(|| self.entries.get(&wildcard_key(template)))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, ScriptError> {
        let mut script = MockScript::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine =
                serde_json::from_str(&line).map_err(|source| ScriptError::Json { line: i + 1, source })?;
            script.insert_key(parsed.key, parsed.response)?;
        }
        Ok(script)
    }

    /// Lines sorted by key.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            serde_json::to_writer(&mut out, &ScriptLine { key: k.clone(), response: self.entries[k].clone() })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Replays a [`MockScript`]; unscripted calls fail.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<String>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script, log: Mutex::new(Vec::new()) }
    }

    /// Keys of every call received so far, in arrival order.
    pub fn call_log(&self) -> Vec<String> {
        self.log.lock().expect("mock log poisoned").clone()
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, req: &CallRequest<'_>, _params: &GenerationParams) -> Result<String, BackendError> {
        let key = mock_key(req.template, req.slots);
        self.log.lock().expect("mock log poisoned").push(key.clone());
        self.script.lookup(req.template, req.slots).map(str::to_string).ok_or(BackendError::Unscripted { key })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

/// Answers every call with a fixed placeholder and keeps the rendered prompts.
#[derive(Debug)]
pub struct DryRunBackend {
    reply: String,
    prompts: Mutex<Vec<(TemplateName, String)>>,
}

impl Default for DryRunBackend {
    fn default() -> Self {
        DryRunBackend { reply: "[dry-run]".to_string(), prompts: Mutex::new(Vec::new()) }
    }
}

impl DryRunBackend {
    pub fn prompts(&self) -> Vec<(TemplateName, String)> {
        self.prompts.lock().expect("dry-run log poisoned").clone()
    }
}

impl ChatBackend for DryRunBackend {
    fn chat(&self, req: &CallRequest<'_>, _params: &GenerationParams) -> Result<String, BackendError> {
        self.prompts.lock().expect("dry-run log poisoned").push((req.template, req.prompt.to_string()));
        Ok(self.reply.clone())
    }

    fn name(&self) -> &str {
        "dry-run"
    }
}
