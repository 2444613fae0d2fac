//! `path,label,role` dataset listings.
//!
//! Paths are relative to the directory holding the manifest. Pairs are
//! stored as consecutive rows: a secret followed by its cover, optionally
//! followed by the stego image made from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use stegalift::hider::Role;

use crate::config::ConfigError;

pub const HEADER: &str = "path,label,role";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub label: u8,
    pub role: Role,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

pub fn role_name(r: Role) -> &'static str {
    match r {
        Role::Secret => "secret",
        Role::Cover => "cover",
        Role::Stego => "stego",
        Role::Revealed => "revealed",
    }
}

fn parse_role(s: &str) -> Option<Role> {
    match s {
        "secret" => Some(Role::Secret),
        "cover" => Some(Role::Cover),
        "stego" => Some(Role::Stego),
        "revealed" => Some(Role::Revealed),
        _ => None,
    }
}

/// Paths of one stored pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub secret: PathBuf,
    pub cover: PathBuf,
    pub stego: Option<PathBuf>,
    pub label: u8,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(ConfigError(format!("manifest must start with `{HEADER}`")));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || ConfigError(format!("manifest line {}: `{line}`", i + 2));
            let mut parts = line.split(',');
            let (Some(path), Some(label), Some(role), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let label = match label {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad()),
            };
            let role = parse_role(role).ok_or_else(bad)?;
            if path.is_empty() {
                return Err(bad());
            }
            entries.push(Entry {
                path: path.to_string(),
                label,
                role,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for e in &self.entries {
            writeln!(s, "{},{},{}", e.path, e.label, role_name(e.role)).unwrap();
        }
        s
    }

    pub fn push(&mut self, path: impl Into<String>, label: u8, role: Role) {
        let path = path.into();
        assert!(!path.contains(',') && !path.contains('\n'), "manifest paths cannot hold commas or newlines");
        self.entries.push(Entry { path, label, role });
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_text()).with_context(|| format!("writing manifest {}", path.display()))
    }

    /// Group rows into pairs, resolving paths against `root`.
    pub fn pairs(&self, root: &Path) -> Result<Vec<PairPaths>, ConfigError> {
        let mut out: Vec<PairPaths> = Vec::new();
        let mut rows = self.entries.iter().peekable();
        while let Some(s) = rows.next() {
            let c = rows.next();
            let (Role::Secret, Some(c)) = (s.role, c) else {
                return Err(ConfigError(format!("`{}` does not start a secret,cover pair", s.path)));
            };
            if c.role != Role::Cover || c.label != s.label {
                return Err(ConfigError(format!("`{}` is not the cover of `{}`", c.path, s.path)));
            }
            let stego = match rows.peek() {
                Some(e) if e.role == Role::Stego => {
                    let e = rows.next().unwrap();
                    if e.label != s.label {
                        return Err(ConfigError(format!("label mismatch on `{}`", e.path)));
                    }
                    Some(root.join(&e.path))
                }
                _ => None,
            };
            out.push(PairPaths {
                secret: root.join(&s.path),
                cover: root.join(&c.path),
                stego,
                label: s.label,
            });
        }
        Ok(out)
    }
}
