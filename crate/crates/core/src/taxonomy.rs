use serde::{Deserialize, Serialize};

use crate::{hash, Error, Result};

/// The ten findings of the chest X-ray task, in canonical order.
pub const CHEST_XRAY_CLASSES: [&str; 10] = [
    "Airspace Opacity",
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Lung Lesion",
    "Pleural Effusion",
    "Pneumothorax",
    "Support Devices",
];

/// Ordered, duplicate-free list of class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassTaxonomy {
    names: Vec<String>,
}

impl ClassTaxonomy {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::validation("taxonomy must contain at least one class"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::validation(format!("taxonomy entry {i} is empty")));
            }
            if names[..i].contains(name) {
                return Err(Error::validation(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn chest_xray() -> Self {
        Self::new(CHEST_XRAY_CLASSES).expect("static taxonomy is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn hash(&self) -> String {
        hash::hash_json(&self.names)
    }
}

impl TryFrom<Vec<String>> for ClassTaxonomy {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassTaxonomy> for Vec<String> {
    fn from(t: ClassTaxonomy) -> Self {
        t.names
    }
}
