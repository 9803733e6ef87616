//! Content-addressed artifact registry.
//!
//! Every artifact is stored as JSON under `objects/<kind>/<sha256>.json`,
//! where the hash covers exactly the stored bytes. Named references in
//! `refs/` point at the latest artifact of each kind, and a published
//! manifest ties together the tuple the service reads.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evolution::Individual;
use crate::evolution::Objectives;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const PUBLISHED_REF: &str = "published";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Dataset,
    Predictor,
    Gp,
    Evolution,
    Front,
    Manifest,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Dataset,
        ArtifactKind::Predictor,
        ArtifactKind::Gp,
        ArtifactKind::Evolution,
        ArtifactKind::Front,
        ArtifactKind::Manifest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Dataset => "dataset",
            ArtifactKind::Predictor => "predictor",
            ArtifactKind::Gp => "gp",
            ArtifactKind::Evolution => "evolution",
            ArtifactKind::Front => "front",
            ArtifactKind::Manifest => "manifest",
        }
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of the compact JSON encoding of `value`.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(fingerprint_bytes(&serde_json::to_vec(value)?))
}

/// The prescriptors offered to decision makers, in slider order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontArtifact {
    pub evolution: String,
    /// Predictor the front was evolved against; `None` for a stand-in model.
    pub predictor: Option<String>,
    pub reference: Objectives,
    pub representatives: Vec<Individual>,
}

/// The artifact tuple a service instance serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset: String,
    pub predictor: String,
    pub gp: Option<String>,
    pub front: String,
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

fn valid_hex(fp: &str) -> bool {
    fp.len() == 64 && fp.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn valid_ref_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.') && !name.starts_with('.')
}

impl Registry {
    /// Opens (creating if needed) a registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for kind in ArtifactKind::ALL {
            let dir = root.join("objects").join(kind.as_str());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let refs = root.join("refs");
        std::fs::create_dir_all(&refs).map_err(|e| Error::io(&refs, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, kind: ArtifactKind, fp: &str) -> PathBuf {
        self.root.join("objects").join(kind.as_str()).join(format!("{fp}.json"))
    }

    pub fn contains(&self, kind: ArtifactKind, fp: &str) -> bool {
        valid_hex(fp) && self.object_path(kind, fp).is_file()
    }

    /// Stores `value` and returns its fingerprint. Storing an identical
    /// value twice is a no-op.
    pub fn put<T: Serialize + ?Sized>(&self, kind: ArtifactKind, value: &T) -> Result<String> {
        let bytes = serde_json::to_vec(value)?;
        let fp = fingerprint_bytes(&bytes);
        let path = self.object_path(kind, &fp);
        if !path.is_file() {
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(fp)
    }

    /// Reads the raw bytes of an artifact, verifying its fingerprint.
    pub fn get_bytes(&self, kind: ArtifactKind, fp: &str) -> Result<Vec<u8>> {
        let missing = || Error::NotFound {
            kind: kind.as_str(),
            id: fp.to_string(),
        };
        if !valid_hex(fp) {
            return Err(missing());
        }
        let path = self.object_path(kind, fp);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(missing()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let actual = fingerprint_bytes(&bytes);
        if actual != fp {
            return Err(Error::Numerical(format!("{kind} artifact {fp} is corrupt (content hashes to {actual})")));
        }
        Ok(bytes)
    }

    pub fn get<T: DeserializeOwned>(&self, kind: ArtifactKind, fp: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.get_bytes(kind, fp)?)?)
    }

    pub fn list(&self, kind: ArtifactKind) -> Result<Vec<String>> {
        let dir = self.root.join("objects").join(kind.as_str());
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(fp) = name.strip_suffix(".json") {
                if valid_hex(fp) {
                    out.push(fp.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn set_ref(&self, name: &str, fp: &str) -> Result<()> {
        if !valid_ref_name(name) {
            return Err(Error::Config(format!("invalid ref name `{name}`")));
        }
        if !valid_hex(fp) {
            return Err(Error::Config(format!("invalid fingerprint `{fp}`")));
        }
        let path = self.root.join("refs").join(name);
        std::fs::write(&path, format!("{fp}\n")).map_err(|e| Error::io(&path, e))
    }

    pub fn get_ref(&self, name: &str) -> Result<Option<String>> {
        if !valid_ref_name(name) {
            return Err(Error::Config(format!("invalid ref name `{name}`")));
        }
        let path = self.root.join("refs").join(name);
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Resolves either a literal fingerprint or the ref of the same name as
    /// `kind`, and checks that the artifact exists.
    pub fn resolve(&self, kind: ArtifactKind, explicit: Option<&str>) -> Result<String> {
        let fp = match explicit {
            Some(fp) => fp.to_string(),
            None => self.get_ref(kind.as_str())?.ok_or_else(|| Error::NotFound {
                kind: kind.as_str(),
                id: format!("refs/{kind}"),
            })?,
        };
        if !self.contains(kind, &fp) {
            return Err(Error::NotFound {
                kind: kind.as_str(),
                id: fp,
            });
        }
        Ok(fp)
    }

    /// Directory holding run records and run outputs of one category.
    pub fn runs_dir(&self, category: &str) -> PathBuf {
        self.root.join("runs").join(category)
    }

    /// Writes the resolved configuration of the run that produced `fp` to
    /// `runs/<category>/<fp>.json` and returns the path.
    pub fn record_run<T: Serialize + ?Sized>(&self, category: &str, fp: &str, record: &T) -> Result<PathBuf> {
        if !valid_ref_name(category) || !valid_hex(fp) {
            return Err(Error::Config(format!("invalid run record `{category}/{fp}`")));
        }
        let dir = self.runs_dir(category);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{fp}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(record)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Validates that every artifact the manifest names exists, stores the
    /// manifest and points the `published` ref at it.
    pub fn publish(&self, manifest: &Manifest) -> Result<String> {
        let checks = [
            (ArtifactKind::Dataset, Some(&manifest.dataset)),
            (ArtifactKind::Predictor, Some(&manifest.predictor)),
            (ArtifactKind::Gp, manifest.gp.as_ref()),
            (ArtifactKind::Front, Some(&manifest.front)),
        ];
        for (kind, fp) in checks {
            if let Some(fp) = fp {
                if !self.contains(kind, fp) {
                    return Err(Error::NotFound {
                        kind: kind.as_str(),
                        id: fp.clone(),
                    });
                }
            }
        }
        let fp = self.put(ArtifactKind::Manifest, manifest)?;
        self.set_ref(PUBLISHED_REF, &fp)?;
        Ok(fp)
    }

    pub fn published(&self) -> Result<(String, Manifest)> {
        let fp = self.get_ref(PUBLISHED_REF)?.ok_or_else(|| Error::NotFound {
            kind: "manifest",
            id: format!("refs/{PUBLISHED_REF}"),
        })?;
        let manifest: Manifest = self.get(ArtifactKind::Manifest, &fp)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok((fp, manifest))
    }
}
