//! JSON-lines dataset manifests.
//!
//! A manifest `name.jsonl` holds one sample per line and sits next to a
//! header `name.header.json` that carries the attribute schema, the domain,
//! and the split role. Tensor paths are relative to the manifest directory.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::kernel::Domain;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub names: Vec<String>,
}

impl AttributeSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let s = AttributeSchema { names };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::Schema("attribute schema needs at least one name".into()));
        }
        let mut seen = HashSet::new();
        for n in &self.names {
            if !seen.insert(n) {
                return Err(Error::Schema(format!("duplicate attribute name {n:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: AttributeSchema,
    pub domain: Domain,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: String,
    pub id: Option<i64>,
    pub cam: i64,
    pub attrs: Option<Vec<u8>>,
}

impl Sample {
    fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("path".into(), Value::from(self.path.clone()));
        m.insert("id".into(), self.id.map_or(Value::Null, Value::from));
        m.insert("cam".into(), Value::from(self.cam));
        m.insert(
            "attrs".into(),
            self.attrs
                .as_ref()
                .map_or(Value::Null, |a| Value::from(a.iter().map(|&b| b as u64).collect::<Vec<_>>())),
        );
        Value::Object(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub samples: Vec<Sample>,
    /// The `.jsonl` file; relative tensor paths resolve against its directory.
    pub path: PathBuf,
}

/// Header file that accompanies a manifest at `path`.
pub fn header_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.header.json"))
}

impl Manifest {
    pub fn new(header: ManifestHeader, samples: Vec<Sample>, path: PathBuf) -> Result<Self> {
        let m = Manifest { header, samples, path };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.header.domain
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.header.schema
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new(""))
    }

    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        self.base_dir().join(&sample.path)
    }

    fn validate(&self) -> Result<()> {
        self.header.schema.validate()?;
        let mut paths = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            check_sample(s, &self.header).map_err(|msg| Error::Manifest {
                path: self.path.clone(),
                line: i + 1,
                msg,
            })?;
            if !paths.insert(&s.path) {
                return Err(Error::Manifest {
                    path: self.path.clone(),
                    line: i + 1,
                    msg: format!("duplicate tensor path {:?}", s.path),
                });
            }
        }
        Ok(())
    }

    /// Sorted distinct raw identity ids; label `k` is `identity_ids()[k]`.
    pub fn identity_ids(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.samples.iter().filter_map(|s| s.id).collect();
        set.into_iter().collect()
    }

    /// Identity ids remapped to `0..K` in ascending raw-id order.
    pub fn contiguous_labels(&self) -> Result<Vec<usize>> {
        let ids = self.identity_ids();
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let id = s.id.ok_or_else(|| Error::Manifest {
                    path: self.path.clone(),
                    line: i + 1,
                    msg: "sample has no identity".into(),
                })?;
                Ok(ids.binary_search(&id).expect("id collected above"))
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let hp = header_path(path);
        let header = serde_json::to_string_pretty(&self.header)?;
        fs::write(&hp, header + "\n").map_err(|e| Error::io(&hp, e))?;
        let mut body = String::new();
        for s in &self.samples {
            body.push_str(&serde_json::to_string(&s.to_json())?);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

fn check_sample(s: &Sample, h: &ManifestHeader) -> std::result::Result<(), String> {
    let m = h.schema.len();
    if let Some(a) = &s.attrs {
        if a.len() != m {
            return Err(format!("attrs has {} entries, schema has {m}", a.len()));
        }
        if let Some(v) = a.iter().find(|&&v| v > 1) {
            return Err(format!("attribute value {v} is not binary"));
        }
    }
    match (h.domain, h.role) {
        (Domain::Source, Role::Train) => {
            if s.id.is_none() {
                return Err("source training sample needs an identity".into());
            }
            if s.attrs.is_none() {
                return Err("source training sample needs attributes".into());
            }
        }
        (Domain::Target, Role::Train) => {
            if s.id.is_some() {
                return Err(
                    "target training samples must not carry identities; use a ground-truth sidecar"
                        .into(),
                );
            }
        }
        _ => {}
    }
    Ok(())
}

fn parse_line(line: &str, m: usize) -> std::result::Result<Sample, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(obj) = value else {
        return Err("sample line is not a JSON object".into());
    };
    for key in obj.keys() {
        if !matches!(key.as_str(), "path" | "id" | "cam" | "attrs") {
            return Err(format!("unknown field {key:?}"));
        }
    }
    let field = |k: &str| obj.get(k).ok_or_else(|| format!("missing field {k:?}"));
    let path = field("path")?
        .as_str()
        .filter(|p| !p.is_empty())
        .ok_or("\"path\" must be a nonempty string")?
        .to_string();
    let id = match field("id")? {
        Value::Null => None,
        v => Some(v.as_i64().ok_or("\"id\" must be an integer or null")?),
    };
    let cam = field("cam")?.as_i64().ok_or("\"cam\" must be an integer")?;
    let attrs = match field("attrs")? {
        Value::Null => None,
        Value::Array(items) => {
            if items.len() != m {
                return Err(format!("attrs has {} entries, schema has {m}", items.len()));
            }
            let mut out = Vec::with_capacity(m);
            for v in items {
                match v.as_u64() {
                    Some(b @ (0 | 1)) => out.push(b as u8),
                    _ => return Err(format!("attribute value {v} is not binary")),
                }
            }
            Some(out)
        }
        _ => return Err("\"attrs\" must be an array or null".into()),
    };
    Ok(Sample { path, id, cam, attrs })
}

/// Loads and validates the manifest at `path` and its header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let hp = header_path(path);
    let header_text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_text).map_err(|e| Error::Manifest {
        path: hp.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    header.schema.validate().map_err(|e| Error::Manifest {
        path: hp.clone(),
        line: 1,
        msg: e.to_string(),
    })?;
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = header.schema.len();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in body.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let sample = parse_line(line, m).map_err(err)?;
        check_sample(&sample, &header).map_err(err)?;
        if !seen.insert(sample.path.clone()) {
            return Err(err(format!("duplicate tensor path {:?}", sample.path)));
        }
        samples.push(sample);
    }
    Ok(Manifest {
        header,
        samples,
        path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(domain: Domain, role: Role) -> String {
        let d = if domain == Domain::Source { "source" } else { "target" };
        let r = match role {
            Role::Train => "train",
            Role::Query => "query",
            Role::Gallery => "gallery",
        };
        format!(r#"{{"schema": {{"names": ["a", "b"]}}, "domain": "{d}", "role": "{r}"}}"#)
    }

    fn load(domain: Domain, role: Role, body: &str) -> Result<Manifest> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(header_path(&p), header(domain, role)).unwrap();
        fs::write(&p, body).unwrap();
        load_manifest(&p)
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Manifest { line, .. } => line,
            other => panic!("expected manifest error, got {other}"),
        }
    }

    #[test]
    fn one_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        let m = Manifest::new(
            ManifestHeader {
                schema: AttributeSchema::new(vec!["male".into()]).unwrap(),
                domain: Domain::Source,
                role: Role::Train,
            },
            vec![Sample {
                path: "x.t".into(),
                id: Some(7),
                cam: 2,
                attrs: Some(vec![1]),
            }],
            p.clone(),
        )
        .unwrap();
        m.write(&p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn six_sample_fixture_remaps_to_three_labels() {
        let body = [
            r#"{"path": "a", "id": 40, "cam": 0, "attrs": [0, 1]}"#,
            r#"{"path": "b", "id": 40, "cam": 1, "attrs": [0, 1]}"#,
            r#"{"path": "c", "id": 7, "cam": 0, "attrs": [1, 1]}"#,
            r#"{"path": "d", "id": 7, "cam": 1, "attrs": [1, 1]}"#,
            r#"{"path": "e", "id": 19, "cam": 0, "attrs": [0, 0]}"#,
            r#"{"path": "f", "id": 19, "cam": 1, "attrs": [0, 0]}"#,
        ]
        .join("\n");
        let m = load(Domain::Source, Role::Train, &body).unwrap();
        assert_eq!(m.identity_ids(), vec![7, 19, 40]);
        assert_eq!(m.contiguous_labels().unwrap(), vec![2, 2, 0, 0, 1, 1]);
    }

    #[test]
    fn wrong_attr_length_is_rejected_with_line() {
        let body = "{\"path\": \"a\", \"id\": 1, \"cam\": 0, \"attrs\": [0, 1]}\n{\"path\": \"b\", \"id\": 1, \"cam\": 0, \"attrs\": [0]}";
        assert_eq!(line_of(load(Domain::Source, Role::Train, body).unwrap_err()), 2);
    }

    #[test]
    fn diagnostics_for_each_error_case() {
        let cases = [
            r#"{"path": "a", "id": 1, "cam": 0}"#,
            r#"{"path": "a", "id": 1, "cam": 0, "attrs": [0, 2]}"#,
            r#"{"path": "a", "id": null, "cam": 0, "attrs": [0, 1]}"#,
            r#"{"path": "a", "id": 1, "cam": "x", "attrs": [0, 1]}"#,
            r#"{"path": "a", "id": 1, "cam": 0, "attrs": [0, 1], "extra": 1}"#,
            r#"not json"#,
            r#"[1, 2]"#,
        ];
        for c in cases {
            assert_eq!(line_of(load(Domain::Source, Role::Train, c).unwrap_err()), 1, "{c}");
        }
        let dup = "{\"path\": \"a\", \"id\": 1, \"cam\": 0, \"attrs\": [0, 1]}\n{\"path\": \"a\", \"id\": 2, \"cam\": 0, \"attrs\": [0, 1]}";
        assert_eq!(line_of(load(Domain::Source, Role::Train, dup).unwrap_err()), 2);
    }

    #[test]
    fn target_training_manifest_refuses_identities() {
        let ok = r#"{"path": "a", "id": null, "cam": 3, "attrs": null}"#;
        assert_eq!(load(Domain::Target, Role::Train, ok).unwrap().len(), 1);
        let leaked = r#"{"path": "a", "id": 5, "cam": 3, "attrs": null}"#;
        assert!(load(Domain::Target, Role::Train, leaked).is_err());
        assert!(load(Domain::Target, Role::Query, leaked).is_ok());
    }

    #[test]
    fn duplicate_schema_names_rejected() {
        assert!(AttributeSchema::new(vec!["a".into(), "a".into()]).is_err());
        assert!(AttributeSchema::new(vec![]).is_err());
    }
}
