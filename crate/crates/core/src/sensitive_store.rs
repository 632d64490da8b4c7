//! Sensitive UI fields stored as `(field_id, value, label)` triples.
//!
//! Writes are unprivileged (they model the user typing). Reads from
//! outside a quarantine module always yield the empty string; reads through
//! a live [`SandboxContext`] return the value and taint the context.

use std::collections::{BTreeSet, HashMap};
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::labels::{TaintLabel, TaintSet};
use crate::sandbox::SandboxContext;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensitiveEntry {
    pub field_id: String,
    pub value: String,
    pub label: TaintLabel,
}

#[derive(Debug)]
pub struct SensitiveStore {
    declared: BTreeSet<TaintLabel>,
    fields: RwLock<HashMap<String, SensitiveEntry>>,
}

impl SensitiveStore {
    /// Store accepting fields tagged with any of `declared`.
    pub fn new(declared: impl IntoIterator<Item = TaintLabel>) -> Self {
        Self {
            declared: declared.into_iter().collect(),
            fields: RwLock::default(),
        }
    }

    pub fn register_field(&self, field_id: &str, label: TaintLabel) -> Result<()> {
        if !self.declared.contains(&label) {
            return Err(Error::UndeclaredLabel(label));
        }
        let mut fields = self.fields.write().expect("store poisoned");
        if fields.contains_key(field_id) {
            return Err(Error::DuplicateField(field_id.to_string()));
        }
        fields.insert(
            field_id.to_string(),
            SensitiveEntry {
                field_id: field_id.to_string(),
                value: String::new(),
                label,
            },
        );
        Ok(())
    }

    pub fn set_value(&self, field_id: &str, value: &str) -> Result<()> {
        let mut fields = self.fields.write().expect("store poisoned");
        let entry = fields
            .get_mut(field_id)
            .ok_or_else(|| Error::UnknownField(field_id.to_string()))?;
        entry.value = value.to_string();
        Ok(())
    }

    /// Unprivileged read. Always `""` for a registered field.
    pub fn get_text_untrusted(&self, field_id: &str) -> Result<String> {
        if self
            .fields
            .read()
            .expect("store poisoned")
            .contains_key(field_id)
        {
            Ok(String::new())
        } else {
            Err(Error::UnknownField(field_id.to_string()))
        }
    }

    pub fn trusted_get_text(&self, ctx: &SandboxContext, field_id: &str) -> Result<String> {
        ctx.ensure_live()?;
        let (value, label) = {
            let fields = self.fields.read().expect("store poisoned");
            let entry = fields
                .get(field_id)
                .ok_or_else(|| Error::UnknownField(field_id.to_string()))?;
            (entry.value.clone(), entry.label.clone())
        };
        ctx.acquire(&TaintSet::singleton(label));
        Ok(value)
    }

    pub fn label_of(&self, field_id: &str) -> Option<TaintLabel> {
        self.fields
            .read()
            .expect("store poisoned")
            .get(field_id)
            .map(|e| e.label.clone())
    }

    pub fn field_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self
            .fields
            .read()
            .expect("store poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}
