//! Attribute groups and the binary person-category layout.
//!
//! A schema is an ordered list of mutually exclusive attribute groups. A
//! person category picks exactly one attribute per group and is encoded as
//! the concatenation of one one-hot slice per group, in declaration order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group name to attribute name.
pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    pub attributes: Vec<String>,
}

#[derive(Deserialize)]
struct SchemaFile {
    groups: Vec<AttributeGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile")]
pub struct AttributeSchema {
    groups: Vec<AttributeGroup>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl TryFrom<SchemaFile> for AttributeSchema {
    type Error = Error;

    fn try_from(file: SchemaFile) -> Result<Self> {
        AttributeSchema::new(file.groups)
    }
}

impl AttributeSchema {
    pub fn new(groups: Vec<AttributeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Schema("schema has no groups".into()));
        }
        let mut group_names = HashSet::new();
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut offset = 0;
        for group in &groups {
            if !group_names.insert(group.name.as_str()) {
                return Err(Error::Schema(format!("duplicate group '{}'", group.name)));
            }
            if group.attributes.len() < 2 {
                return Err(Error::Schema(format!(
                    "group '{}' has {} attribute(s), need at least 2",
                    group.name,
                    group.attributes.len()
                )));
            }
            let mut attr_names = HashSet::new();
            for attr in &group.attributes {
                if !attr_names.insert(attr.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate attribute '{}' in group '{}'",
                        attr, group.name
                    )));
                }
            }
            offsets.push(offset);
            offset += group.attributes.len();
        }
        offsets.push(offset);
        Ok(Self { groups, offsets })
    }

    /// Toy schema with groups `g0, g1, ...` and attributes `g{i}_{j}`.
    pub fn from_group_sizes(sizes: &[usize]) -> Result<Self> {
        let groups = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| AttributeGroup {
                name: format!("g{i}"),
                attributes: (0..n).map(|j| format!("g{i}_{j}")).collect(),
            })
            .collect();
        Self::new(groups)
    }

    /// Bundled example layouts: `peta`, `market`, `pa100k`.
    ///
    /// Only the vector lengths (105, 30, 26) are meaningful; the attribute
    /// splits inside the groups are reconstructions.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "peta" => include_str!("../schemas/peta.json"),
            "market" => include_str!("../schemas/market.json"),
            "pa100k" => include_str!("../schemas/pa100k.json"),
            other => return Err(Error::Config(format!("unknown schema preset '{other}'"))),
        };
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => Error::Schema(e.to_string()),
            _ => Error::Json(e),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::Parse {
                path: path.to_path_buf(),
                line: inner.line(),
                message: inner.to_string(),
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            groups: &'a [AttributeGroup],
        }
        let mut text = serde_json::to_string_pretty(&Out {
            groups: &self.groups,
        })
        .expect("schema serializes");
        text.push('\n');
        text
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total binary dimension.
    pub fn dim(&self) -> usize {
        self.offsets[self.groups.len()]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.attributes.len()).collect()
    }

    /// Bit range occupied by group `g`.
    pub fn group_range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Number of distinct categories the schema admits (saturating).
    pub fn n_combinations(&self) -> u128 {
        self.groups
            .iter()
            .fold(1u128, |acc, g| acc.saturating_mul(g.attributes.len() as u128))
    }

    fn lookup(&self, group: &str, attribute: &str) -> Result<(usize, usize)> {
        let g = self
            .group_index(group)
            .ok_or_else(|| Error::Category(format!("unknown group '{group}'")))?;
        let a = self.groups[g]
            .attributes
            .iter()
            .position(|x| x == attribute)
            .ok_or_else(|| {
                Error::Category(format!(
                    "unknown attribute '{attribute}' in group '{group}'"
                ))
            })?;
        Ok((g, a))
    }

    /// Encodes one attribute per group into a category vector.
    pub fn encode<'a, I>(&self, attrs: I) -> Result<PersonCategory>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut chosen: Vec<Option<usize>> = vec![None; self.n_groups()];
        for (group, attribute) in attrs {
            let (g, a) = self.lookup(group, attribute)?;
            if chosen[g].replace(a).is_some() {
                return Err(Error::Category(format!("group '{group}' given twice")));
            }
        }
        let mut indices = Vec::with_capacity(chosen.len());
        for (g, choice) in chosen.into_iter().enumerate() {
            match choice {
                Some(a) => indices.push(a),
                None => {
                    return Err(Error::Category(format!(
                        "missing group '{}'",
                        self.groups[g].name
                    )))
                }
            }
        }
        self.category_from_indices(&indices)
    }

    pub fn encode_map(&self, attrs: &Attributes) -> Result<PersonCategory> {
        self.encode(attrs.iter().map(|(g, a)| (g.as_str(), a.as_str())))
    }

    /// Category from per-group attribute indices.
    pub fn category_from_indices(&self, indices: &[usize]) -> Result<PersonCategory> {
        if indices.len() != self.n_groups() {
            return Err(Error::Category(format!(
                "expected {} group indices, got {}",
                self.n_groups(),
                indices.len()
            )));
        }
        let mut bits = vec![0u8; self.dim()];
        for (g, &a) in indices.iter().enumerate() {
            let range = self.group_range(g);
            if a >= range.len() {
                return Err(Error::Category(format!(
                    "attribute index {a} out of range for group '{}'",
                    self.groups[g].name
                )));
            }
            bits[range.start + a] = 1;
        }
        Ok(PersonCategory { bits })
    }

    /// Per-group attribute index of a raw bit pattern, validating one-hotness.
    pub fn indices_of(&self, bits: &[u8]) -> Result<Vec<usize>> {
        if bits.len() != self.dim() {
            return Err(Error::Category(format!(
                "bit vector has length {}, schema needs {}",
                bits.len(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(self.n_groups());
        for (g, group) in self.groups.iter().enumerate() {
            let slice = &bits[self.group_range(g)];
            let mut hot = None;
            for (j, &b) in slice.iter().enumerate() {
                match b {
                    0 => {}
                    1 if hot.is_none() => hot = Some(j),
                    1 => {
                        return Err(Error::Category(format!(
                            "group '{}' has more than one bit set",
                            group.name
                        )))
                    }
                    other => {
                        return Err(Error::Category(format!(
                            "non-binary value {other} in group '{}'",
                            group.name
                        )))
                    }
                }
            }
            match hot {
                Some(j) => out.push(j),
                None => {
                    return Err(Error::Category(format!(
                        "group '{}' has no bit set",
                        group.name
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Decodes a raw bit pattern back to attribute names.
    pub fn decode(&self, bits: &[u8]) -> Result<Attributes> {
        let indices = self.indices_of(bits)?;
        Ok(self
            .groups
            .iter()
            .zip(indices)
            .map(|(g, a)| (g.name.clone(), g.attributes[a].clone()))
            .collect())
    }

    /// Validates a raw bit pattern as a category of this schema.
    pub fn category(&self, bits: Vec<u8>) -> Result<PersonCategory> {
        self.indices_of(&bits)?;
        Ok(PersonCategory { bits })
    }
}

/// One-hot-per-group binary vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonCategory {
    bits: Vec<u8>,
}

impl PersonCategory {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Stable identifier built from the positions of the set bits.
    pub fn id(&self) -> String {
        let parts: Vec<String> = self
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(k, _)| k.to_string())
            .collect();
        parts.join(".")
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

impl fmt::Display for PersonCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Element-wise `|p - q|` of two category vectors.
pub fn hamming_profile(p: &PersonCategory, q: &PersonCategory) -> Result<Vec<u8>> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension {
            context: "hamming_profile",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(p.bits.iter().zip(&q.bits).map(|(a, b)| a ^ b).collect())
}
